import math

import numpy as np
import pytest

from protlm import model as M
from protlm import tensor as T
from protlm.errors import ConfigError, ContractError
from protlm.masking import MaskedBatch, mask_batch, plain_batch
from protlm.tokenizer import encode

SMALL = M.ModelConfig(hidden_size=16, num_layers=2, num_heads=4, max_positions=32, dropout=0.1)


def batch_of(*seqs, max_len=32):
    return plain_batch([encode(s) for s in seqs], max_len)


class TestParameters:
    def test_closed_form_count(self):
        config = M.ModelConfig(hidden_size=64, num_layers=2, num_heads=4, max_positions=64)
        by_shapes = sum(int(np.prod(s)) for s in M.parameter_shapes(config).values())
        # 30*64 + 64*64 + 2 * (4*(64*64+64) + (64*256+256) + (256*64+64) + 4*64) + 2*64 + 30
        assert by_shapes == M.count_parameters(config) == 106142

    def test_count_with_heads(self):
        heads = [("ss3", None), ("fold", 1195), ("contact", None)]
        params = M.init_parameters(SMALL, 0)
        for kind, nc in heads:
            M.init_head(params, SMALL, kind, 0, nc)
        assert sum(p.size for p in params.values()) == M.count_parameters(SMALL, heads)

    def test_post_ln_has_no_final_norm(self):
        post = M.ModelConfig(hidden_size=16, num_layers=1, num_heads=2, pre_ln=False)
        assert "final_ln.gamma" not in M.parameter_shapes(post)
        assert "final_ln.gamma" in M.parameter_shapes(SMALL)

    def test_init_deterministic_and_norms_are_identity(self):
        a, b = M.init_parameters(SMALL, 3), M.init_parameters(SMALL, 3)
        assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)
        for n, p in a.items():
            if n.endswith("gamma"):
                assert (p.data == 1).all()
            elif n.endswith("beta") or n.endswith(".b") or n == "mlm.bias":
                assert (p.data == 0).all()
        assert abs(float(a["embed.token"].data.std()) - M.INIT_STD) < 0.005

    def test_init_subset_matches_full(self):
        full = M.init_parameters(SMALL, 9)
        part = M.init_parameters(SMALL, 9, ["layer1.ffn.in.w"])
        assert part["layer1.ffn.in.w"].data.tobytes() == full["layer1.ffn.in.w"].data.tobytes()

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(hidden_size=10, num_heads=4)
        with pytest.raises(ConfigError):
            M.ModelConfig(dropout=1.0)

    def test_config_text_round_trip(self):
        assert M.ModelConfig.from_text(SMALL.to_text()) == SMALL


class TestEncoder:
    def test_shapes(self):
        params = M.init_parameters(SMALL, 0)
        out = M.encode(params, batch_of("MKV", "MKVLAG"), SMALL)
        assert out.hidden.shape == (2, 8, 16)
        assert out.cls.shape == (2, 16)
        assert M.mlm_logits(params, out).shape == (2, 8, 30)

    def test_too_long(self):
        params = M.init_parameters(SMALL, 0)
        with pytest.raises(ContractError):
            M.encode(params, np.full((1, 33), 5), SMALL)

    def test_padding_isolation_bitwise(self):
        params = M.init_parameters(SMALL, 1)
        base = batch_of("MKVLAGHIKWY", "MKV")
        noisy_ids = base.input_ids.copy()
        pad = ~base.attention_mask
        noisy_ids[pad] = np.random.default_rng(0).integers(5, 30, int(pad.sum()))
        noisy = MaskedBatch(noisy_ids, base.attention_mask, base.target_ids, base.target_mask, base.lengths)
        a = M.encode(params, base, SMALL).hidden.data
        b = M.encode(params, noisy, SMALL).hidden.data
        keep = base.attention_mask
        assert a[keep].tobytes() == b[keep].tobytes()

    def test_padding_matches_unpadded(self):
        params = M.init_parameters(SMALL, 1)
        alone = M.encode(params, batch_of("MKV"), SMALL).hidden.data[0]
        padded = M.encode(params, batch_of("MKV", "MKVLAGHIKWY"), SMALL).hidden.data[0, :5]
        np.testing.assert_allclose(padded, alone, atol=1e-6)

    def test_eval_and_train_determinism(self):
        params = M.init_parameters(SMALL, 2)
        b = batch_of("MKVLA", "GHI")
        e1, e2 = (M.encode(params, b, SMALL).hidden.data for _ in range(2))
        assert e1.tobytes() == e2.tobytes()
        t1, t2 = (M.encode(params, b, SMALL, "train", np.random.default_rng(5)).hidden.data for _ in range(2))
        assert t1.tobytes() == t2.tobytes()
        assert t1.tobytes() != e1.tobytes()
        with pytest.raises(ContractError):
            M.encode(params, b, SMALL, "train")

    def test_batch_order_permutes_outputs(self):
        params = M.init_parameters(SMALL, 2)
        seqs = ["MKVLA", "GH", "WYAC", "KKKKKKK"]
        fwd = M.mlm_logits(params, M.encode(params, batch_of(*seqs), SMALL)).data
        perm = [2, 0, 3, 1]
        rev = M.mlm_logits(params, M.encode(params, batch_of(*[seqs[i] for i in perm]), SMALL)).data
        np.testing.assert_allclose(rev, fwd[perm], rtol=0, atol=1e-6)

    @pytest.mark.parametrize("pre_ln", [True, False])
    def test_twelve_layers_forward_backward(self, pre_ln):
        config = M.ModelConfig(hidden_size=64, num_layers=12, num_heads=4, max_positions=40, pre_ln=pre_ln)
        params = M.init_parameters(config, 0)
        rng = np.random.default_rng(0)
        seqs = ["".join(rng.choice(list("ACDEFGHIKLMNPQRSTVWY"), 30)) for _ in range(4)]
        batch = mask_batch([encode(s) for s in seqs], rng, 40)
        with T.Tape() as tape:
            logits = M.mlm_logits(params, M.encode(params, batch, config, "train", rng))
            B, L, V = logits.shape
            loss = T.cross_entropy_masked(T.reshape(logits, (B * L, V)), batch.target_ids.reshape(-1),
                                          batch.target_mask.reshape(-1))
        tape.backward(loss)
        assert np.isfinite(float(loss.data))
        assert all(np.isfinite(p.grad).all() for p in params.values())


def _pattern_params(config):
    """Small hand-chosen values so the reference trace is easy to follow."""
    params = {}
    for k, (name, shape) in enumerate(M.parameter_shapes(config).items()):
        n = int(np.prod(shape))
        vals = np.array([0.1 * (((k + 3 * i) % 7) - 3) for i in range(n)], dtype=np.float64).reshape(shape)
        if name.endswith("gamma"):
            vals = 1 + vals
        params[name] = T.Tensor(vals, dtype=np.float64, name=name)
    return params


def _reference_forward(P, ids):
    """Scalar pre-LN forward for one layer, H=2, one head; lists of floats only."""
    def row(name, r):
        return [float(v) for v in P[name].data[r]]

    def vec(name):
        return [float(v) for v in P[name].data]

    def lin(x, wname, bname):
        w, b = P[wname].data, vec(bname)
        return [sum(x[i] * float(w[i, o]) for i in range(len(x))) + b[o] for o in range(len(b))]

    def ln(x, g, b):
        mu = sum(x) / len(x)
        var = sum((v - mu) ** 2 for v in x) / len(x)
        return [(v - mu) / math.sqrt(var + 1e-5) * gg + bb for v, gg, bb in zip(x, vec(g), vec(b))]

    def gelu(v):
        return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))

    xs = [[t + p for t, p in zip(row("embed.token", tok), row("embed.position", pos))] for pos, tok in enumerate(ids)]
    h = [ln(x, "layer0.ln1.gamma", "layer0.ln1.beta") for x in xs]
    q = [lin(v, "layer0.attn.q.w", "layer0.attn.q.b") for v in h]
    k = [lin(v, "layer0.attn.k.w", "layer0.attn.k.b") for v in h]
    v_ = [lin(v, "layer0.attn.v.w", "layer0.attn.v.b") for v in h]
    out = []
    for i in range(len(ids)):
        s = [sum(a * b for a, b in zip(q[i], k[j])) / math.sqrt(2) for j in range(len(ids))]
        m = max(s)
        e = [math.exp(z - m) for z in s]
        p = [z / sum(e) for z in e]
        ctx = [sum(p[j] * v_[j][d] for j in range(len(ids))) for d in range(2)]
        a = lin(ctx, "layer0.attn.o.w", "layer0.attn.o.b")
        x1 = [x + y for x, y in zip(xs[i], a)]
        f = lin([gelu(z) for z in lin(ln(x1, "layer0.ln2.gamma", "layer0.ln2.beta"),
                                      "layer0.ffn.in.w", "layer0.ffn.in.b")],
                "layer0.ffn.out.w", "layer0.ffn.out.b")
        x2 = [x + y for x, y in zip(x1, f)]
        out.append(ln(x2, "final_ln.gamma", "final_ln.beta"))
    return out


# frozen output of _reference_forward for ids [2, 5]
GOLDEN_H2 = [[1.2997204078723719, -0.8998220777369639], [-0.8998861639795803, 0.49992755889609647]]


def test_hand_traced_h2_golden():
    config = M.ModelConfig(hidden_size=2, num_layers=1, num_heads=1, max_positions=4, dropout=0.0)
    P = _pattern_params(config)
    ref = _reference_forward(P, [2, 5])
    np.testing.assert_allclose(ref, GOLDEN_H2, atol=1e-10)
    got = M.encode(P, np.array([[2, 5]]), config).hidden.data[0]
    np.testing.assert_allclose(got, ref, atol=1e-12)


class TestHeads:
    def setup_method(self):
        self.params = M.init_parameters(SMALL, 0)
        for kind, nc in (("ss3", None), ("ss8", None), ("fold", 1195), ("contact", None), ("regress", None)):
            M.init_head(self.params, SMALL, kind, 0, nc)
        self.out = M.encode(self.params, batch_of("MKVLAGHIKW", "MKV"), SMALL)

    def test_mlm_zero_hidden_gives_bias(self):
        self.params["mlm.bias"].data[:] = np.arange(30)
        zero = M.EncoderOutput(T.Tensor(np.zeros((1, 3, 16))), T.Tensor(np.zeros((1, 16))),
                               np.ones((1, 3), bool), np.array([3]))
        np.testing.assert_array_equal(M.mlm_logits(self.params, zero).data[0], np.tile(np.arange(30), (3, 1)))

    def test_mlm_softmax_rows(self):
        p = T.softmax_last(M.mlm_logits(self.params, self.out)).data
        np.testing.assert_allclose(p.sum(-1), 1, atol=1e-6)

    def test_token_class_shapes(self):
        assert M.token_class_logits(self.params, self.out, 3).shape == (2, 12, 3)
        assert M.token_class_logits(self.params, self.out, 8).shape == (2, 12, 8)
        with pytest.raises(ConfigError):
            M.token_class_logits(self.params, self.out, 5)

    def test_residue_mask_excludes_specials(self):
        mask = M.residue_mask(self.out)
        assert mask.sum(1).tolist() == [10, 3]
        assert not mask[:, 0].any()
        assert not mask[1, 4:].any()

    def test_seq_class_reads_only_cls(self):
        logits = M.seq_class_logits(self.params, self.out)
        assert logits.shape == (2, 1195)
        h = self.out.hidden.data.copy()
        h[:, 1:] = h[:, 1:][:, ::-1]
        shuffled = M.EncoderOutput(T.Tensor(h), self.out.cls, self.out.attention_mask, self.out.lengths)
        assert M.seq_class_logits(self.params, shuffled).data.tobytes() == logits.data.tobytes()

    def test_regress_shape_and_finite(self):
        y = M.regress_scalar(self.params, self.out).data
        assert y.shape == (2,) and np.isfinite(y).all()

    def test_contact_symmetry_and_pairs(self):
        m = M.contact_logit_matrix(self.params, self.out).data
        assert m.shape == (2, 12, 12)
        assert m.tobytes() == np.transpose(m, (0, 2, 1)).tobytes()
        pairs = [(0, 5), (5, 0), (2, 9)]
        single = M.pair_contact_logits(self.params, self.out, pairs).data
        assert single.shape == (3,)
        avg = 0.5 * (single[0] + single[1])
        assert m[0, 1, 6] == pytest.approx(avg, abs=1e-6)
        scores = M.contact_scores(self.params, self.out)
        assert [s.shape for s in scores] == [(10, 10), (3, 3)]
        with pytest.raises(ContractError):
            M.pair_contact_logits(self.params, self.out, [(0, 3)], row=1)

    def test_untrained_chance_levels(self):
        rng = np.random.default_rng(0)
        seqs = ["".join(rng.choice(list("ACDEFGHIKLMNPQRSTVWY"), 30)) for _ in range(40)]
        out = M.encode(self.params, batch_of(*seqs), SMALL)
        pred = M.token_class_logits(self.params, out, 3).data.argmax(-1)[M.residue_mask(out)]
        gold = rng.integers(0, 3, pred.size)
        assert abs((pred == gold).mean() - 1 / 3) < 0.05
