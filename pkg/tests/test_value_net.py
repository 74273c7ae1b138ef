import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualmem import value_net as vn
from dualmem.errors import InvalidInputError, NumericError

from conftest import jitter_params


# -- straight-line reference evaluator, independent of the vectorized path --

def _ref_gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def reference_forward(params, z):
    h = [float(x) for x in z]
    for layer in params.layers:
        a = []
        for i in range(layer.w.shape[0]):
            acc = float(layer.b[i])
            for j, hj in enumerate(h):
                acc += float(layer.w[i, j]) * hj
            a.append(acc)
        mu = sum(a) / len(a)
        var = sum((x - mu) ** 2 for x in a) / len(a)
        s = math.sqrt(var + 1e-5)
        h = [_ref_gelu(float(layer.ln_gain[i]) * (a[i] - mu) / s + float(layer.ln_offset[i])) for i in range(len(a))]
    logit = float(params.out_b[0]) + sum(float(params.out_w[0, j]) * hj for j, hj in enumerate(h))
    return 1.0 / (1.0 + math.exp(-logit))


def zero_params(d, hidden=(512, 128)):
    p = vn.init_params(d, np.random.default_rng(0), hidden=hidden)
    arrays_ = {k: np.zeros_like(v) for k, v in p.arrays().items()}
    for i in range(len(hidden)):
        arrays_[f"layers.{i}.ln_gain"] = np.ones(hidden[i])
    return p.with_arrays(arrays_)


def random_batch(rng, d, n, labels=None):
    out = []
    for i in range(n):
        y = labels[i] if labels is not None else int(rng.integers(2))
        out.append(vn.TrainingSample(vn.build_features(rng.standard_normal(d), rng.standard_normal(d)), y))
    return out


def test_build_features_examples():
    np.testing.assert_array_equal(vn.build_features([1, 0], [0, 1]), [1, 0, 0, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(vn.build_features([2, 3], [2, 3]), [2, 3, 2, 3, 0, 0, 4, 9])
    with pytest.raises(InvalidInputError):
        vn.build_features([1, 2, 3], [1, 2])


def test_feature_matrix_matches_rowwise(rng):
    e_s = rng.standard_normal(5)
    ms = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(vn.build_feature_matrix(e_s, ms), np.stack([vn.build_features(e_s, m) for m in ms]))


def test_zero_network_outputs_half(rng):
    p = zero_params(4)
    assert vn.forward(p, rng.standard_normal(16), "eval") == 0.5


def test_eval_forward_is_deterministic(rng):
    p = vn.init_params(8, np.random.default_rng(5))
    z = rng.standard_normal(32)
    assert vn.forward(p, z, "eval") == vn.forward(p, z, "eval")


def test_forward_matches_reference_full_size(rng):
    p = jitter_params(vn.init_params(4, np.random.default_rng(11)), rng)
    z = rng.standard_normal(16)
    assert abs(vn.forward(p, z, "eval") - reference_forward(p, z)) <= 1e-10


def test_train_mode_uses_dropout(rng):
    p = vn.init_params(4, np.random.default_rng(3))
    z = rng.standard_normal(16)
    a = vn.forward(p, z, "train", np.random.default_rng(1))
    b = vn.forward(p, z, "train", np.random.default_rng(2))
    assert a != b
    with pytest.raises(InvalidInputError):
        vn.forward(p, z, "train", None)


def test_shape_mismatch_rejected(rng):
    p = vn.init_params(4, rng, hidden=(6, 5))
    with pytest.raises(InvalidInputError):
        vn.forward(p, rng.standard_normal(12))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_output_strictly_inside_unit_interval(z):
    p = vn.init_params(4, np.random.default_rng(2), hidden=(8, 4))
    y = vn.forward(p, z)
    assert 0.0 < y < 1.0 or y in (0.0, 1.0) and abs(z).max() > 1e3


def test_layer_norm_moments(rng):
    for _ in range(20):
        a = rng.standard_normal(512) * rng.uniform(5, 50) + rng.uniform(-10, 10)
        out = vn.layer_norm(a)
        var = a.var()
        assert abs(out.mean()) <= 1e-9
        assert abs(out.var() - var / (var + vn.LN_EPS)) <= 1e-12
        assert abs(out.var() - 1.0) <= 1e-6


def test_loss_closed_forms():
    p = zero_params(2, hidden=(4, 3))
    batch = [vn.TrainingSample(np.arange(8.0), 1)]
    loss, _ = vn.loss_and_grads(p, batch, [1.0], 0.0)
    assert loss == pytest.approx(0.6931471805599453, abs=1e-15)
    loss, _ = vn.loss_and_grads(p, batch, [0.5, 0.5], 0.03)
    assert loss == pytest.approx(0.6723527651431469, abs=1e-15)


def test_loss_contract(small_params):
    with pytest.raises(InvalidInputError):
        vn.loss_and_grads(small_params, [], [1.0], 0.0)
    batch = [vn.TrainingSample(np.zeros(16), 0)]
    with pytest.raises(InvalidInputError):
        vn.loss_and_grads(small_params, batch, [0.5, 0.6], 0.0)
    with pytest.raises(InvalidInputError):
        vn.TrainingSample(np.zeros(16), 2)


def finite_difference_check(params, loss_fn, grads, h=1e-5, entries=None, rng=None):
    """Max relative error of analytic vs central-difference gradients."""
    worst = 0.0
    base = params.arrays()
    for name, arr in base.items():
        idxs = list(np.ndindex(arr.shape))
        if entries is not None and len(idxs) > entries:
            pick = rng.choice(len(idxs), size=entries, replace=False)
            idxs = [idxs[i] for i in pick]
        for idx in idxs:
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (loss_fn(params.with_arrays(plus)) - loss_fn(params.with_arrays(minus))) / (2 * h)
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_gradients_match_finite_differences_bce(small_params, rng):
    batch = random_batch(rng, 4, 3)
    loss_fn = lambda p: vn.loss_and_grads(p, batch, [1.0], 0.0)[0]
    _, grads = vn.loss_and_grads(small_params, batch, [1.0], 0.0)
    assert finite_difference_check(small_params, loss_fn, grads) <= 1e-4


def test_gradients_include_entropy_pathway(small_params, rng):
    batch = random_batch(rng, 4, 3)
    Zc = np.stack([vn.build_features(rng.standard_normal(4), rng.standard_normal(4)) for _ in range(6)])
    s_val = vn.forward_batch(small_params, Zc)
    ctx = vn.PolicyContext(Zc, rng.random(6), 0.6, 0.8, float(s_val.min()), float(s_val.max()))
    probs, _ = ctx.probs_from_values(s_val)
    loss_fn = lambda p: vn.loss_and_grads(p, batch, probs, 0.5, policy=ctx)[0]
    _, grads = vn.loss_and_grads(small_params, batch, probs, 0.5, policy=ctx)
    _, bce_only = vn.loss_and_grads(small_params, batch, probs, 0.0, policy=ctx)
    assert any(not np.array_equal(grads[k], bce_only[k]) for k in grads)
    assert finite_difference_check(small_params, loss_fn, grads) <= 1e-4


def test_zero_gradient_leaves_params(small_params):
    grads = {k: np.zeros_like(v) for k, v in small_params.arrays().items()}
    new, state = vn.train_step(small_params, grads, vn.AdamState())
    for k, v in small_params.arrays().items():
        assert np.array_equal(new.arrays()[k], v)
    assert state.step == 1


def test_nan_gradient_aborts(small_params):
    before = small_params.copy()
    grads = {k: np.zeros_like(v) for k, v in small_params.arrays().items()}
    grads["out.b"] = np.array([np.nan])
    state = vn.AdamState()
    with pytest.raises(NumericError):
        vn.train_step(small_params, grads, state)
    assert state.step == 0
    for k, v in before.arrays().items():
        assert np.array_equal(small_params.arrays()[k], v)


def test_bce_mostly_decreases_on_fixed_batch(rng):
    p = vn.init_params(8, np.random.default_rng(21))
    batch = random_batch(rng, 8, 8, labels=[0, 1] * 4)
    state = vn.AdamState()
    drop = np.random.default_rng(4)
    losses = [vn.bce_loss(p, batch)]
    for _ in range(50):
        _, g = vn.loss_and_grads(p, batch, [1.0], 0.03, train=True, rng=drop)
        p, state = vn.train_step(p, g, state)
        losses.append(vn.bce_loss(p, batch))
    increases = sum(b > a for a, b in zip(losses, losses[1:]))
    assert increases <= 5
    assert losses[-1] < losses[0]


def test_learns_linearly_separable_set():
    rng = np.random.default_rng(8)
    d = 8
    direction = rng.standard_normal(4 * d)
    Z = np.stack([vn.build_features(rng.standard_normal(d), rng.standard_normal(d)) for _ in range(200)])
    y = (Z @ direction > 0).astype(int)
    batch = [vn.TrainingSample(z, int(t)) for z, t in zip(Z, y)]
    p = vn.init_params(d, np.random.default_rng(9))
    state = vn.AdamState()
    drop = np.random.default_rng(10)
    acc = 0.0
    for step in range(500):
        _, g = vn.loss_and_grads(p, batch, [1.0], 0.0, train=True, rng=drop)
        p, state = vn.train_step(p, g, state)
        if step % 25 == 24:
            acc = float(((vn.forward_batch(p, Z) > 0.5) == y).mean())
            if acc >= 0.95:
                break
    assert acc >= 0.95


def test_params_file_roundtrip(tmp_path, rng):
    p = jitter_params(vn.init_params(4, np.random.default_rng(1), hidden=(16, 8)), rng)
    path = tmp_path / "params.json"
    vn.save_params(p, path)
    q = vn.load_params(path)
    Z = rng.standard_normal((10, 16))
    assert np.array_equal(vn.forward_batch(p, Z), vn.forward_batch(q, Z))
    assert q.p_drop == p.p_drop and q.d == 4
