import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salrank import autograd as ag
from salrank import ocor
from salrank.autograd import Tensor, grad_check
from salrank.ocor import OcorConfig, OcorParams

CONFIGS = [
    OcorConfig(s, v, a)
    for s, v, a in itertools.product(("heads", "locations"), ("self", "other"), ("none", "mean"))
]


def random_params(width, heads, rng, ln_random=True):
    p = OcorParams.init(width, heads, rng)
    if not ln_random:
        return p
    return OcorParams(p.w_k, p.w_q, p.w_v, p.w_o,
                      Tensor(rng.uniform(0.5, 1.5, width)), Tensor(rng.normal(0, 0.3, width)))


def loop_oracle(feats: np.ndarray, p: OcorParams, cfg: OcorConfig) -> np.ndarray:
    """Four nested loops over (i, x, j, y); no vectorisation across objects or cells."""
    n, ho, wo, width = feats.shape
    k = ho * wo
    heads, d = p.heads, p.head_dim
    f = feats.reshape(n, k, width)
    wk, wq, wv, wo_ = p.w_k.data, p.w_q.data, p.w_v.data, p.w_o.data

    def proj(w, vec, h):
        return vec @ w[:, h * d:(h + 1) * d]

    logits = np.zeros((n, k, n, k, heads))
    for i in range(n):
        for x in range(k):
            for j in range(n):
                for y in range(k):
                    for h in range(heads):
                        logits[i, x, j, y, h] = proj(wk, f[i, x], h) @ proj(wq, f[j, y], h)

    rho = np.zeros_like(logits)
    for i in range(n):
        for x in range(k):
            if cfg.softmax_axis == "heads":
                for j in range(n):
                    if j == i:
                        continue
                    for y in range(k):
                        e = np.exp(logits[i, x, j, y] - logits[i, x, j, y].max())
                        rho[i, x, j, y] = e / e.sum()
            else:
                for h in range(heads):
                    entries = [(j, y) for j in range(n) if j != i for y in range(k)]
                    if not entries:
                        continue
                    vals = np.array([logits[i, x, j, y, h] for j, y in entries])
                    e = np.exp(vals - vals.max())
                    for (j, y), w in zip(entries, e / e.sum()):
                        rho[i, x, j, y, h] = w

    out = np.zeros_like(f)
    for i in range(n):
        for x in range(k):
            raw = np.zeros(width)
            for j in range(n):
                if j == i:
                    continue
                for y in range(k):
                    for h in range(heads):
                        src = f[i, x] if cfg.value_source == "self" else f[j, y]
                        raw += (rho[i, x, j, y, h] * proj(wv, src, h)) @ wo_[h]
            if cfg.aggregate_scale == "mean" and n > 1:
                raw /= (n - 1) * k
            z = f[i, x] + raw
            mu = z.mean()
            var = ((z - mu) ** 2).mean()
            out[i, x] = (z - mu) / np.sqrt(var + 1e-10) * p.ln_scale.data + p.ln_shift.data
    return out.reshape(feats.shape)


# --- pooling and object context


def test_pool_constant_map():
    fmap = np.full((5, 3, 4), 2.5)
    np.testing.assert_allclose(ocor.adaptive_avg_pool(Tensor(fmap), (2, 2)).data, 2.5, atol=1e-15)


def test_pool_4x4_to_2x2():
    fmap = np.arange(16.0).reshape(4, 4, 1)
    pooled = ocor.adaptive_avg_pool(Tensor(fmap), (2, 2)).data[..., 0]
    np.testing.assert_array_equal(pooled, [[2.5, 4.5], [10.5, 12.5]])


def test_pool_matches_loop_for_uneven_sizes():
    rng = np.random.default_rng(0)
    fmap = rng.normal(size=(7, 5, 3))
    pooled = ocor.adaptive_avg_pool(Tensor(fmap), (2, 3)).data
    for oy in range(2):
        for ox in range(3):
            y0, y1 = (oy * 7) // 2, -((-(oy + 1) * 7) // 2)
            x0, x1 = (ox * 5) // 3, -((-(ox + 1) * 5) // 3)
            np.testing.assert_allclose(pooled[oy, ox], fmap[y0:y1, x0:x1].mean(axis=(0, 1)), atol=1e-14)


def test_object_context_concatenates_channels():
    rng = np.random.default_rng(1)
    objs = rng.normal(size=(3, 4, 4, 2))
    ctx = rng.normal(size=(8, 8, 2))
    out = ocor.build_object_context(Tensor(objs), Tensor(ctx)).data
    assert out.shape == (3, 2, 2, 4)
    pooled_ctx = ocor.adaptive_avg_pool(Tensor(ctx), (2, 2)).data
    for i in range(3):
        np.testing.assert_array_equal(out[i, ..., 2:], pooled_ctx)


def test_object_context_channel_mismatch():
    with pytest.raises(ag.ShapeError, match="channel"):
        ocor.build_object_context(Tensor(np.ones((2, 4, 4, 3))), Tensor(np.ones((4, 4, 2))))


# --- logits and head weights


def test_attention_logit_identity_projection():
    p = OcorParams(Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.ones((1, 2, 2))),
                   Tensor(np.ones(2)), Tensor(np.zeros(2)))
    fi = Tensor(np.array([[[1.0, 2.0]]]))
    fj = Tensor(np.array([[[3.0, -1.0]]]))
    assert ocor.attention_logits(fi, fj, 0, 0, 0, p) == 1.0


def test_head_weights_examples():
    np.testing.assert_allclose(ocor.head_weights([0.0, 0.0, 0.0, 0.0]), [0.25] * 4, atol=1e-15)
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(ocor.head_weights([1.0, 2.0, 3.0]), e / e.sum(), atol=1e-15)
    np.testing.assert_allclose(ocor.head_weights([1.0, 2.0, 3.0]), [0.0900, 0.2447, 0.6652], atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.sampled_from([1, 2, 4, 8]))
def test_head_weights_sum_to_one(seed, n, heads):
    rng = np.random.default_rng(seed)
    width = 8
    feats = rng.normal(0, 2, (n, 2, 2, width))
    rho = ocor.relation_weights(Tensor(feats), OcorParams.init(width, heads, rng)).data[0]
    total = rho.sum(axis=0)  # over heads
    owner = np.repeat(np.arange(n), 4)
    off = owner[:, None] != owner[None, :]
    assert np.abs(total[off] - 1.0).max() < 1e-12
    assert (rho >= 0).all()
    np.testing.assert_array_equal(total[~off], 0.0)


# --- forward


def test_single_object_is_layer_norm_of_input():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(1, 2, 2, 8))
    p = random_params(8, 2, rng)
    out = ocor.ocor_forward(Tensor(feats), p).data
    z = feats
    expected = (z - z.mean(-1, keepdims=True)) / np.sqrt(z.var(-1, keepdims=True) + 1e-10)
    np.testing.assert_allclose(out, expected * p.ln_scale.data + p.ln_shift.data, atol=1e-12)


def test_two_objects_one_head_one_cell():
    # with P=1 the head softmax is exactly 1, so raw(i) = W_o(phi_v(F_i))
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(2, 1, 1, 4))
    p = random_params(4, 1, rng, ln_random=False)
    out = ocor.ocor_forward(Tensor(feats), p).data.reshape(2, 4)
    for i in range(2):
        z = feats[i, 0, 0] + feats[i, 0, 0] @ p.w_v.data @ p.w_o.data[0]
        np.testing.assert_allclose(out[i], (z - z.mean()) / np.sqrt(z.var() + 1e-10), atol=1e-12)


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.softmax_axis}-{c.value_source}-{c.aggregate_scale}")
def test_matches_loop_oracle_all_switches(cfg):
    for seed in range(12):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        heads = int(rng.choice([1, 2, 4]))
        width = heads * int(rng.integers(1, 3)) * 2
        feats = rng.normal(size=(n, 2, 2, width))
        p = random_params(width, heads, rng)
        got = ocor.ocor_forward(Tensor(feats), p, cfg).data
        np.testing.assert_allclose(got, loop_oracle(feats, p, cfg), rtol=0, atol=1e-9)


def test_batched_equals_per_item():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(3, 2, 2, 2, 8))
    p = random_params(8, 4, rng)
    batched = ocor.ocor_forward(Tensor(feats), p).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], ocor.ocor_forward(Tensor(feats[b]), p).data, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.sampled_from([1, 2, 4, 8]))
def test_permutation_equivariance_is_exact(seed, n, heads):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, 2, 2, 8))
    p = random_params(8, heads, rng)
    perm = rng.permutation(n)
    out = ocor.ocor_forward(Tensor(feats), p).data
    out_perm = ocor.ocor_forward(Tensor(feats[perm]), p).data
    np.testing.assert_array_equal(out_perm, out[perm])


@pytest.mark.parametrize("cfg", CONFIGS[1:], ids=lambda c: f"{c.softmax_axis}-{c.value_source}-{c.aggregate_scale}")
def test_permutation_equivariance_other_switches(cfg):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(4, 2, 2, 8))
        p = random_params(8, 2, rng)
        perm = rng.permutation(4)
        out = ocor.ocor_forward(Tensor(feats), p, cfg).data
        np.testing.assert_allclose(ocor.ocor_forward(Tensor(feats[perm]), p, cfg).data, out[perm],
                                   rtol=0, atol=1e-12)


def test_value_of_other_objects_does_not_enter_self_value():
    # under value_source="self", other objects affect object i only through the weights;
    # with P=1 those weights are constant, so changing object 1 leaves object 0 untouched
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(2, 2, 2, 4))
    p = random_params(4, 1, rng)
    changed = feats.copy()
    changed[1] = rng.normal(size=(2, 2, 4))
    a = ocor.ocor_forward(Tensor(feats), p).data[0]
    b = ocor.ocor_forward(Tensor(changed), p).data[0]
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_output_is_normalised_before_affine(seed, n):
    rng = np.random.default_rng(seed)
    feats = rng.normal(0, 3, (n, 2, 2, 8))
    p = random_params(8, 4, rng, ln_random=False)
    out = ocor.ocor_forward(Tensor(feats), p).data
    assert np.abs(out.mean(-1)).max() < 1e-6
    assert np.abs(out.var(-1) - 1.0).max() < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        OcorConfig(softmax_axis="pixels")
    with pytest.raises(ValueError):
        OcorParams.init(6, 4, np.random.default_rng(0))
    with pytest.raises(ag.ShapeError):
        ocor.ocor_forward(Tensor(np.ones((2, 2, 2, 6))), OcorParams.init(8, 2, np.random.default_rng(0)))


@pytest.mark.parametrize("cfg", [CONFIGS[0], CONFIGS[-1]], ids=["default", "locations-other-mean"])
def test_gradient_check(cfg):
    rng = np.random.default_rng(6)
    p = random_params(8, 2, rng)
    feats = rng.normal(size=(2, 2, 2, 8))
    w = rng.normal(size=feats.shape)
    rep = grad_check(lambda x: ag.total_sum(ocor.ocor_forward(x, p, cfg) * w), feats, eps=1e-5, tol=1e-3)
    assert rep.passed, rep


def test_gradient_check_wrt_parameters():
    rng = np.random.default_rng(7)
    p = random_params(8, 2, rng)
    feats = Tensor(rng.normal(size=(3, 2, 2, 8)))
    w = rng.normal(size=feats.shape)

    def f(wk):
        q = OcorParams(wk, p.w_q, p.w_v, p.w_o, p.ln_scale, p.ln_shift)
        return ag.total_sum(ocor.ocor_forward(feats, q) * w)

    rep = grad_check(f, p.w_k.data, eps=1e-5, tol=1e-3)
    assert rep.passed, rep
