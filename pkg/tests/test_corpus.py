import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protlm.corpus import (ContactMap, ProteinRecord, contact_rule_map, family_split, gen_synthetic,
                           hamming_distance, mutation_parent, mutation_value, parse_fasta,
                           parse_task_records, serialize_task_records, ss_rule, truncate_record,
                           write_fasta)
from protlm.errors import ContractError, FormatError
from protlm.tokenizer import STANDARD_RESIDUES


class TestFasta:
    def test_header_family_and_wrapped_sequence(self):
        (r,) = parse_fasta(">p1 family=F1\nMKV\nLA\n")
        assert (r.id, r.family, r.sequence) == ("p1", "F1", "MKVLA")

    def test_two_records(self):
        assert [r.id for r in parse_fasta(">a\nM\n>b\nK")] == ["a", "b"]

    def test_missing_header(self):
        with pytest.raises(FormatError, match="line 1"):
            parse_fasta("MKV")

    def test_round_trip(self):
        recs = [ProteinRecord("x", "MKV" * 30, "F"), ProteinRecord("y", "A")]
        back = parse_fasta(write_fasta(recs))
        assert [(r.id, r.sequence, r.family) for r in back] == [("x", "MKV" * 30, "F"), ("y", "A", None)]


class TestTaskRecords:
    def test_ss3_accepted(self):
        (r,) = parse_task_records("id=a sequence=MKVLA ss3=HHECC\n", "ss3")
        assert r.label == "HHECC"

    def test_ss3_length_mismatch_names_line(self):
        with pytest.raises(FormatError, match="line 2"):
            parse_task_records("# comment\nid=a sequence=MKVLA ss3=HHEC\n", "ss3")

    def test_contact_symmetric_expansion(self):
        (r,) = parse_task_records("id=c sequence=MKVL contacts=0:3\n", "contact")
        expected = np.zeros((4, 4), dtype=bool)
        expected[0, 3] = expected[3, 0] = True
        np.testing.assert_array_equal(r.label.contact, expected)

    def test_contact_valid_mask(self):
        (r,) = parse_task_records("id=c sequence=MKVLA contacts=0:3 valid_mask=11011\n", "contact")
        assert not r.label.valid[2].any() and r.label.valid[0, 3]
        with pytest.raises(FormatError):
            parse_task_records("id=c sequence=MKVLA contacts=0:2 valid_mask=11011\n", "contact")

    def test_fold_range(self):
        assert parse_task_records("id=f sequence=MK fold=1194\n", "fold")[0].label == 1194
        with pytest.raises(FormatError):
            parse_task_records("id=f sequence=MK fold=1195\n", "fold")

    def test_value(self):
        assert parse_task_records("id=v sequence=MK value=-0.25\n", "stability")[0].label == -0.25

    def test_unknown_field(self):
        with pytest.raises(FormatError, match="unexpected"):
            parse_task_records("id=v sequence=MK value=1 colour=red\n", "fluorescence")


records_strategy = st.lists(
    st.tuples(st.text(alphabet=STANDARD_RESIDUES, min_size=2, max_size=30), st.randoms(use_true_random=False)),
    min_size=1, max_size=8)


@settings(max_examples=40, deadline=None)
@given(records_strategy, st.sampled_from(["ss3", "ss8", "fold", "contact", "fluorescence"]))
def test_serialize_parse_round_trip(items, task):
    recs = []
    for n, (seq, rnd) in enumerate(items):
        L = len(seq)
        if task in ("ss3", "ss8"):
            alphabet = "HEC" if task == "ss3" else "GHIEBTSC"
            label = "".join(rnd.choice(alphabet) for _ in range(L))
        elif task == "fold":
            label = rnd.randrange(1195)
        elif task == "contact":
            resolved = np.array([rnd.random() < 0.8 for _ in range(L)])
            pairs = [(i, j) for i in range(L) for j in range(i + 1, L)
                     if resolved[i] and resolved[j] and rnd.random() < 0.2]
            label = ContactMap.from_pairs(L, pairs, resolved)
        else:
            label = rnd.uniform(-5, 5)
        recs.append(ProteinRecord(f"r{n}", seq, rnd.choice([None, "famA"]), label))
    back = parse_task_records(serialize_task_records(recs, task), task)
    assert back == recs


def test_contact_map_invariants():
    with pytest.raises(ContractError):
        ContactMap(np.array([[False, True], [False, False]]), np.ones((2, 2), dtype=bool))
    with pytest.raises(ContractError):
        ContactMap(np.eye(2, dtype=bool), np.ones((2, 2), dtype=bool))


def test_truncate_record_keeps_labels_in_lockstep():
    r = ProteinRecord("a", "MKVLA", None, "HHECC")
    t = truncate_record(r, 3)
    assert (t.sequence, t.label) == ("MKV", "HHE")
    c = ProteinRecord("c", "MKVLA", None, ContactMap.from_pairs(5, [(0, 2), (1, 4)]))
    assert truncate_record(c, 3).label.pairs() == [(0, 2)]


class TestFamilySplit:
    def test_uniform_families_hold_out_exactly_one(self):
        recs = [ProteinRecord(f"{f}-{k}", "MK", f"F{f}") for f in range(100) for k in range(10)]
        split = family_split(recs, 0.01, 0.05, seed=3)
        assert len({r.family for r in split.holdout}) == 1
        assert len(split.holdout) == 10
        assert not split.test

    def test_requires_families(self):
        with pytest.raises(ContractError):
            family_split([ProteinRecord("a", "MK")])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.lists(st.integers(1, 12), min_size=3, max_size=60))
    def test_disjoint_and_complete(self, seed, sizes):
        recs = [ProteinRecord(f"{f}-{k}", "MK", f"F{f}") for f, n in enumerate(sizes) for k in range(n)]
        split = family_split(recs, 0.1, 0.2, seed=seed, test_frac=0.1)
        held = {r.family for r in split.holdout}
        assert held
        assert not held & {r.family for r in split.train + split.valid + split.test}
        assert sorted(r.id for r in split.train + split.valid + split.test + split.holdout) == \
            sorted(r.id for r in recs)


def test_hamming():
    assert hamming_distance("MKV", "MKV") == 0
    assert hamming_distance("MKV", "MAV") == 1
    assert hamming_distance("AAAA", "CCCC") == 4
    with pytest.raises(ContractError):
        hamming_distance("A", "AA")


class TestSynthetic:
    def test_motif_present(self):
        recs = gen_synthetic("motif", {"count": 50, "length": (10, 30)}, seed=1)
        assert len(recs) == 50 and all("MKVLA" in r.sequence for r in recs)
        assert all(10 <= len(r.sequence) <= 30 for r in recs)

    @pytest.mark.parametrize("task", ["motif", "homology", "ss3", "ss8", "contact", "mutation"])
    def test_pure_in_seed(self, task):
        a = gen_synthetic(task, {"count": 12, "length": 20}, seed=5)
        b = gen_synthetic(task, {"count": 12, "length": 20}, seed=5)
        c = gen_synthetic(task, {"count": 12, "length": 20}, seed=6)
        assert a == b
        assert a != c

    def test_mutation_split_distances(self):
        recs = gen_synthetic("mutation", {"count": 80}, seed=2)
        parent = mutation_parent({}, 2)
        for r in recs:
            d = hamming_distance(parent, r.sequence)
            assert (1 <= d <= 3) if r.family == "train" else d >= 4
            assert r.label == pytest.approx(mutation_value(parent, r.sequence))
        assert sum(r.family == "test" for r in recs) == 20

    def test_contact_rule_by_hand(self):
        cm = contact_rule_map("AKKKKA")
        assert cm.contact[0, 5] and cm.contact[5, 0]
        # the inner mirrored pairs are K/K, so they match too
        assert cm.pairs() == [(0, 5), (1, 4), (2, 3)]
        assert contact_rule_map("AKCDKA").pairs() == [(0, 5), (1, 4)]

    def test_contact_records_follow_rule(self):
        for r in gen_synthetic("contact", {"count": 20, "length": 24, "match_prob": 0.5}, seed=0):
            assert r.label == contact_rule_map(r.sequence)

    def test_ss_labels_follow_rule(self):
        for r in gen_synthetic("ss8", {"count": 5, "length": 15}, seed=0):
            assert r.label == "".join(ss_rule(c, "ss8") for c in r.sequence)

    def test_homology_classes_cycle(self):
        recs = gen_synthetic("homology", {"count": 16, "classes": 8, "length": 20}, seed=0)
        assert [r.label for r in recs] == list(range(8)) * 2
        assert all(r.family == f"class{r.label}" for r in recs)

    def test_unknown(self):
        with pytest.raises(ContractError):
            gen_synthetic("pdb", {})
