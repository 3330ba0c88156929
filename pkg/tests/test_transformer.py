import math

import numpy as np
import pytest

from occreid import diffcore as dc
from occreid.errors import ConfigError, ContractError
from occreid.transformer import (DisentangledTransformer, EncoderLayer, FeatureBundle, MultiheadAttention,
                                 TransformerConfig, attention_maps, split_features)


# -- independent numpy oracle --------------------------------------------------

def np_linear(lin, x):
    y = x @ lin.weight.data
    return y if lin.bias is None else y + lin.bias.data


def np_softmax(s):
    e = np.exp(s - s.max())
    return e / e.sum()


def np_attention(mha, q_in, k_in, v_in):
    """Per-head, per-row explicit attention for a single sequence (no batch)."""
    d = q_in.shape[1]
    h = mha.heads
    dh = d // h
    Q, K, V = np_linear(mha.q_proj, q_in), np_linear(mha.k_proj, k_in), np_linear(mha.v_proj, v_in)
    out = np.zeros((q_in.shape[0], d))
    weights = np.zeros((h, q_in.shape[0], k_in.shape[0]))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(q_in.shape[0]):
            s = np.array([Q[i, sl] @ K[j, sl] / math.sqrt(dh) for j in range(k_in.shape[0])])
            w = np_softmax(s)
            weights[head, i] = w
            out[i, sl] = sum(w[j] * V[j, sl] for j in range(k_in.shape[0]))
    return np_linear(mha.out_proj, out), weights


def np_layernorm(ln, x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * ln.gamma.data + ln.beta.data


def np_ffn(ffn, x):
    return np_linear(ffn.lin2, np.maximum(np_linear(ffn.lin1, x), 0))


def np_encoder_layer(layer, src, pos):
    out, _ = np_attention(layer.attn, src + pos, src + pos, src)
    src = np_layernorm(layer.norm1, src + out)
    return np_layernorm(layer.norm2, src + np_ffn(layer.ffn, src))


def np_decoder_layer(layer, tgt, memory, pos, queries):
    out, _ = np_attention(layer.self_attn, tgt + queries, tgt + queries, tgt)
    tgt = np_layernorm(layer.norm1, tgt + out)
    out, w = np_attention(layer.cross_attn, tgt + queries, memory + pos, memory)
    tgt = np_layernorm(layer.norm2, tgt + out)
    return np_layernorm(layer.norm3, tgt + np_ffn(layer.ffn, tgt)), w


def np_transformer(tr, g):
    """g: (d, L) for one image -> F (N_q, d)."""
    x = g.T
    for layer in tr.encoder:
        x = np_encoder_layer(layer, x, tr.pos.data)
    tgt = np.zeros((tr.cfg.num_queries, tr.cfg.dim))
    for layer in tr.decoder:
        tgt, _ = np_decoder_layer(layer, tgt, x, tr.pos.data, tr.queries.data)
    return np_layernorm(tr.dec_norm, tgt)


def _jitter(module, rng):
    for name, p in module.named_parameters():
        if name.endswith(("bias", "beta", "gamma")):
            p.data += 0.2 * rng.standard_normal(p.shape)


def make(dim=8, heads=2, nq=3, tokens=4, enc=1, dec=1, seed=0):
    cfg = TransformerConfig(dim=dim, heads=heads, enc_layers=enc, dec_layers=dec, num_queries=nq, dropout=0.0)
    rng = np.random.default_rng(seed)
    tr = DisentangledTransformer(cfg, tokens, rng)
    _jitter(tr, rng)
    return tr


class TestConfig:
    def test_reference_defaults(self):
        cfg = TransformerConfig()
        assert (cfg.enc_layers, cfg.dec_layers, cfg.heads, cfg.num_queries, cfg.dim) == (2, 2, 8, 9, 256)
        assert cfg.ffn_mult == 4 and cfg.dropout == 0.1

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError, match="divisible"):
            TransformerConfig(dim=10, heads=4)

    def test_needs_two_queries(self):
        with pytest.raises(ConfigError, match="num_queries"):
            TransformerConfig(num_queries=1)


class TestAttention:
    def test_single_token_equals_value_projection(self, f64):
        rng = np.random.default_rng(0)
        mha = MultiheadAttention(8, 2, rng)
        x = dc.Tensor(rng.standard_normal((1, 1, 8)))
        out, w = mha(x, x, x)
        v = np_linear(mha.v_proj, x.data[0])
        np.testing.assert_allclose(out.data[0], np_linear(mha.out_proj, v), rtol=1e-12)
        np.testing.assert_array_equal(w, np.ones((1, 2, 1, 1)))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        mha = MultiheadAttention(16, 4, rng)
        x = dc.Tensor(rng.standard_normal((3, 7, 16)))
        _, w = mha(x, x, x)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)

    def test_two_token_encoder_layer_matches_oracle(self, f64):
        cfg = TransformerConfig(dim=8, heads=2, num_queries=2, dropout=0.0)
        rng = np.random.default_rng(2)
        layer = EncoderLayer(cfg, rng)
        _jitter(layer, rng)
        src = rng.standard_normal((1, 2, 8))
        pos = rng.standard_normal((2, 8))
        out, _ = layer(dc.Tensor(src), dc.Tensor(pos))
        np.testing.assert_allclose(out.data[0], np_encoder_layer(layer, src[0], pos), rtol=1e-10, atol=1e-12)


class TestDecoder:
    @pytest.mark.parametrize("dim, heads, nq, tokens, layers", [
        (4, 1, 2, 3, 1),  # N_q=2, d=4, 1 layer, 1 head
        (8, 2, 3, 4, 2),
        (12, 3, 5, 6, 2),
    ])
    def test_matches_brute_force(self, f64, dim, heads, nq, tokens, layers):
        tr = make(dim, heads, nq, tokens, layers, layers, seed=dim)
        g = np.random.default_rng(7).standard_normal((2, dim, tokens))
        bundle = tr(dc.Tensor(g))
        for b in range(2):
            np.testing.assert_allclose(bundle.F.data[b], np_transformer(tr, g[b]), rtol=1e-9, atol=1e-11)

    def test_cross_attention_weights_match_oracle(self, f64):
        tr = make(seed=3)
        g = np.random.default_rng(8).standard_normal((1, 8, 4))
        bundle = tr(dc.Tensor(g))
        memory = np_encoder_layer(tr.encoder[0], g[0].T, tr.pos.data)
        _, w = np_decoder_layer(tr.decoder[0], np.zeros((3, 8)), memory, tr.pos.data, tr.queries.data)
        np.testing.assert_allclose(bundle.attn[0][0], w, rtol=1e-9)

    def test_feature_split(self, f64):
        tr = make(seed=4)
        bundle = tr(dc.Tensor(np.random.default_rng(9).standard_normal((3, 8, 4))))
        F = bundle.F.data
        np.testing.assert_array_equal(bundle.fbar.data, F[:, -1])
        np.testing.assert_array_equal(bundle.f.data, np.concatenate([F[:, 0], F[:, 1]], axis=1))
        assert bundle.f.shape == (3, 2 * 8)

    def test_split_concat_roundtrip(self):
        F = dc.Tensor(np.random.default_rng(0).standard_normal((2, 5, 4)))
        f, fbar = split_features(F)
        back = np.concatenate([f.data.reshape(2, 4, 4), fbar.data[:, None]], axis=1)
        assert np.array_equal(back, F.data)

    def test_zero_memory_is_finite_and_deterministic(self, f64):
        tr = make(seed=5)
        for layer in tr.decoder:
            layer.cross_attn.out_proj.bias.data[:] = 0
        mem = dc.Tensor(np.zeros((1, 4, 8)))
        a, b = tr.decode(mem), tr.decode(mem)
        assert np.all(np.isfinite(a.F.data))
        assert np.array_equal(a.F.data, b.F.data)
        np.testing.assert_allclose(a.attn[0].sum(-1), 1.0)

    def test_permutation_equivariance(self, f64):
        tr = make(seed=6, tokens=5)
        rng = np.random.default_rng(10)
        g = rng.standard_normal((1, 8, 5))
        perm = rng.permutation(5)
        ref = tr(dc.Tensor(g)).F.data
        tr.pos.data = tr.pos.data[perm]
        out = tr(dc.Tensor(g[:, :, perm])).F.data
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)

    def test_gradient_flow(self, f64):
        tr = make(seed=7)
        g = dc.Tensor(np.random.default_rng(11).standard_normal((2, 8, 4)), requires_grad=True)
        probe = np.random.default_rng(12).standard_normal((2, 3, 8))
        f = lambda: dc.sum_(dc.mul(tr(g).F, probe))  # noqa: E731
        assert dc.grad_check(f, [g] + tr.parameters(), max_coords=6) <= 1e-4

    def test_token_count_mismatch(self):
        tr = make()
        with pytest.raises(ValueError, match="tokens"):
            tr(dc.Tensor(np.zeros((1, 8, 5))))


class TestAttentionMaps:
    def test_sums_to_one_and_shape(self):
        tr = make(tokens=6)
        bundle = tr(dc.Tensor(np.random.default_rng(0).standard_normal((2, 8, 6))), height=3, width=2)
        for q in range(3):
            m = attention_maps(bundle, q, layer=0, image=1)
            assert m.shape == (3, 2)
            assert abs(m.sum() - 1.0) < 1e-6

    def test_single_token(self):
        tr = make(tokens=1)
        bundle = tr(dc.Tensor(np.ones((1, 8, 1))), height=1, width=1)
        np.testing.assert_allclose(attention_maps(bundle, 2), [[1.0]])

    @pytest.mark.parametrize("kw", [dict(query_index=3), dict(query_index=0, layer=1), dict(query_index=0, image=1)])
    def test_out_of_range(self, kw):
        tr = make()
        bundle = tr(dc.Tensor(np.zeros((1, 8, 4))), height=2, width=2)
        with pytest.raises(ContractError):
            attention_maps(bundle, **kw)

    def test_empty_bundle(self):
        with pytest.raises(ContractError):
            attention_maps(FeatureBundle(None, None, None, []), 0)
