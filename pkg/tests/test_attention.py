import math

import numpy as np
import pytest
from scipy.special import erf

from perceiver_io import ops
from perceiver_io.attention import AttentionConfig, AttentionModule, ConfigError, SelfAttention, resolve
from perceiver_io.gradcheck import grad_check
from perceiver_io.tensor import Tensor


def naive_layer_norm(x, scale, bias, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + bias


def naive_qkv(module, xq, xkv, mask=None):
    """Per-head loops over query rows and key rows."""
    d = module.dims
    q = xq @ module.to_q.w.data + module.to_q.b.data
    k = xkv @ module.to_k.w.data
    v = xkv @ module.to_v.w.data + module.to_v.b.data
    hq, hv = d.qk_channels // d.num_heads, d.v_channels // d.num_heads
    out = np.zeros((xq.shape[0], d.v_channels))
    for h in range(d.num_heads):
        for i in range(xq.shape[0]):
            logits = []
            for j in range(xkv.shape[0]):
                s = sum(q[i, h * hq + c] * k[j, h * hq + c] for c in range(hq)) / math.sqrt(hq)
                logits.append(s if mask is None or mask[i, j] else -np.inf)
            logits = np.array(logits)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            for j in range(xkv.shape[0]):
                out[i, h * hv : (h + 1) * hv] += w[j] * v[j, h * hv : (h + 1) * hv]
    return out @ module.to_out.w.data + module.to_out.b.data


def naive_mlp(mlp, x):
    h = x @ mlp.fc1.w.data + mlp.fc1.b.data
    h = 0.5 * h * (1 + erf(h / math.sqrt(2)))
    return h @ mlp.fc2.w.data + mlp.fc2.b.data


def naive_block(module, xq, xkv):
    x = naive_qkv(
        module,
        naive_layer_norm(xq, module.q_norm.scale.data, module.q_norm.bias.data, 1e-5),
        naive_layer_norm(xkv, module.kv_norm.scale.data, module.kv_norm.bias.data, 1e-5),
    )
    if module.config.use_query_residual:
        x = x + xq
    y = naive_layer_norm(x, module.mlp_norm.scale.data, module.mlp_norm.bias.data, 1e-5)
    return x + naive_mlp(module.mlp, y)


def randomize(module, rng):
    for p in module.parameters():
        p.assign(rng.standard_normal(p.shape) * 0.5)


def zero(*params):
    for p in params:
        p.assign(np.zeros(p.shape))


def test_config_validation():
    with pytest.raises(ConfigError):
        resolve(AttentionConfig(num_heads=3, qk_channels=8), 8, 8)
    with pytest.raises(ConfigError):
        resolve(AttentionConfig(output_channels=4, use_query_residual=True), 8, 8)
    with pytest.raises(ConfigError):
        resolve(AttentionConfig(dropout_rate=1.0), 8, 8)
    r = resolve(AttentionConfig(num_heads=2, mlp_hidden_ratio=1.5), 8, 5)
    assert (r.qk_channels, r.v_channels, r.output_channels, r.mlp_hidden) == (8, 8, 8, 12)


def test_parameter_shapes_follow_from_widths():
    m = AttentionModule("a", AttentionConfig(num_heads=2, qk_channels=6, v_channels=4), 8, 5, np.random.default_rng(0))
    shapes = {p.name: p.shape for p in m.parameters()}
    assert shapes["a.attn.q.w"] == (8, 6)
    assert shapes["a.attn.k.w"] == (5, 6)
    assert shapes["a.attn.v.w"] == (5, 4)
    assert shapes["a.attn.o.w"] == (4, 8)
    assert "a.attn.k.b" not in shapes


def test_single_kv_element_returns_its_value_projection():
    rng = np.random.default_rng(1)
    m = AttentionModule("a", AttentionConfig(), 4, 4, rng)
    for lin in (m.to_q, m.to_k, m.to_v, m.to_out):
        lin.w.assign(np.eye(4))
    zero(m.to_q.b, m.to_v.b, m.to_out.b)
    kv = rng.standard_normal((1, 4))
    out = m.qkv_attention(Tensor(rng.standard_normal((3, 4))), Tensor(kv))
    np.testing.assert_allclose(out.data, np.repeat(kv, 3, axis=0), atol=1e-15)


def test_identical_keys_give_mean_of_values():
    rng = np.random.default_rng(2)
    m = AttentionModule("a", AttentionConfig(num_heads=2), 4, 4, rng)
    randomize(m, rng)
    kv = rng.standard_normal((5, 4))
    # Keys only see the first channel, which is constant across rows.
    w = np.zeros((4, 4))
    w[0] = 1.0
    m.to_k.w.assign(w)
    kv[:, 0] = 0.7
    out = m.qkv_attention(Tensor(rng.standard_normal((2, 4))), Tensor(kv)).data
    v = kv @ m.to_v.w.data + m.to_v.b.data
    expected = v.mean(0) @ m.to_out.w.data + m.to_out.b.data
    np.testing.assert_allclose(out, np.tile(expected, (2, 1)), atol=1e-12)


def test_multi_head_matches_naive_oracle():
    rng = np.random.default_rng(3)
    m = AttentionModule("a", AttentionConfig(num_heads=2, qk_channels=8), 6, 4, rng)
    randomize(m, rng)
    xq, xkv = rng.standard_normal((3, 6)), rng.standard_normal((5, 4))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    np.testing.assert_allclose(
        m.qkv_attention(Tensor(xq), Tensor(xkv), mask).data, naive_qkv(m, xq, xkv, mask), atol=1e-10, rtol=0
    )


def test_block_matches_naive_composition():
    rng = np.random.default_rng(4)
    for residual in (True, False):
        m = AttentionModule("a", AttentionConfig(num_heads=2, use_query_residual=residual), 8, 5, rng)
        randomize(m, rng)
        xq, xkv = rng.standard_normal((2, 8)), rng.standard_normal((3, 5))
        np.testing.assert_allclose(m(Tensor(xq), Tensor(xkv)).data, naive_block(m, xq, xkv), atol=1e-10, rtol=0)


def test_zero_output_weights_with_residual_is_identity():
    rng = np.random.default_rng(5)
    m = AttentionModule("a", AttentionConfig(), 6, 3, rng)
    zero(m.to_out.w, m.to_out.b, m.mlp.fc2.w, m.mlp.fc2.b)
    xq = rng.standard_normal((4, 6))
    np.testing.assert_array_equal(m(Tensor(xq), Tensor(rng.standard_normal((2, 3)))).data, xq)


def test_zero_output_weights_without_residual_is_zero():
    rng = np.random.default_rng(6)
    m = AttentionModule("a", AttentionConfig(use_query_residual=False), 6, 3, rng)
    zero(m.to_out.w, m.to_out.b, m.mlp.fc2.w, m.mlp.fc2.b)
    out = m(Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((2, 3))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_all_blocked_query_row_is_an_error():
    rng = np.random.default_rng(7)
    m = AttentionModule("a", AttentionConfig(), 4, 4, rng)
    mask = np.ones((2, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(ValueError):
        m(Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((3, 4))), mask)


def test_block_gradient_check():
    rng = np.random.default_rng(8)
    m = AttentionModule("a", AttentionConfig(num_heads=2), 8, 6, rng)
    xq, xkv = Tensor(rng.standard_normal((2, 8))), Tensor(rng.standard_normal((3, 6)))
    w = rng.standard_normal((2, 8))
    assert grad_check(lambda: ops.sum_(ops.mul(m(xq, xkv), Tensor(w))), m.parameters()) < 1e-4


def test_self_attention_single_element():
    rng = np.random.default_rng(9)
    m = SelfAttention("s", AttentionConfig(), 5, rng)
    zero(m.to_out.w, m.to_out.b, m.mlp.fc2.w, m.mlp.fc2.b)
    x = rng.standard_normal((1, 5))
    np.testing.assert_array_equal(m(Tensor(x)).data, x)


def test_self_attention_requires_residual():
    with pytest.raises(ConfigError):
        SelfAttention("s", AttentionConfig(use_query_residual=False), 4, np.random.default_rng(0))


def test_self_attention_matches_oracle_composition():
    rng = np.random.default_rng(10)
    m = SelfAttention("s", AttentionConfig(num_heads=2), 8, rng)
    randomize(m, rng)
    x = rng.standard_normal((4, 8))
    h = naive_layer_norm(x, m.norm.scale.data, m.norm.bias.data, 1e-5)
    y = naive_qkv(m, h, h) + x
    y = y + naive_mlp(m.mlp, naive_layer_norm(y, m.mlp_norm.scale.data, m.mlp_norm.bias.data, 1e-5))
    np.testing.assert_allclose(m(Tensor(x)).data, y, atol=1e-10, rtol=0)


def test_self_attention_permutation_equivariance():
    rng = np.random.default_rng(11)
    m = SelfAttention("s", AttentionConfig(num_heads=2), 8, rng)
    x = rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    np.testing.assert_allclose(m(Tensor(x[perm])).data, m(Tensor(x)).data[perm], atol=1e-10, rtol=0)


def test_kv_permutation_invariance_and_masked_padding():
    rng = np.random.default_rng(12)
    m = AttentionModule("a", AttentionConfig(num_heads=2), 6, 4, rng)
    xq, xkv = Tensor(rng.standard_normal((3, 6))), rng.standard_normal((5, 4))
    base = m(xq, Tensor(xkv)).data
    perm = rng.permutation(5)
    np.testing.assert_allclose(m(xq, Tensor(xkv[perm])).data, base, atol=1e-10, rtol=0)
    padded = np.concatenate([xkv, 100 * rng.standard_normal((4, 4))])
    valid = np.array([True] * 5 + [False] * 4)
    np.testing.assert_allclose(m(xq, Tensor(padded), valid).data, base, atol=1e-10, rtol=0)


def test_batched_matches_unbatched():
    rng = np.random.default_rng(13)
    m = AttentionModule("a", AttentionConfig(num_heads=2), 6, 4, rng)
    xq, xkv = rng.standard_normal((2, 3, 6)), rng.standard_normal((2, 5, 4))
    out = m(Tensor(xq), Tensor(xkv)).data
    for b in range(2):
        np.testing.assert_allclose(out[b], m(Tensor(xq[b]), Tensor(xkv[b])).data, atol=1e-12)


def test_output_index_dimension_follows_queries():
    rng = np.random.default_rng(14)
    m = AttentionModule("a", AttentionConfig(output_channels=3, use_query_residual=False), 6, 4, rng)
    assert m(Tensor(rng.standard_normal((7, 6))), Tensor(rng.standard_normal((2, 4)))).shape == (7, 3)


def test_dropout_is_seeded_and_off_without_generator():
    rng = np.random.default_rng(15)
    m = AttentionModule("a", AttentionConfig(dropout_rate=0.5), 6, 4, rng)
    xq, xkv = Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((5, 4)))
    a = m(xq, xkv, rng=np.random.default_rng(1)).data
    b = m(xq, xkv, rng=np.random.default_rng(1)).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, m(xq, xkv).data)
