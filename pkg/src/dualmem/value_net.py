"""Value network scoring (state, case) pairs.

Architecture: ``4d -> 512 -> 128 -> 1``. Each hidden layer is
affine -> layer norm -> GELU -> dropout; the head is affine -> sigmoid.
Gradients are computed by hand (numpy only) and applied with Adam.

The training objective is summed binary cross-entropy over the episode's
labelled samples minus ``beta`` times the entropy of the retrieval policy.
When a :class:`PolicyContext` is supplied, the entropy gradient reaches the
network through the value scores of the candidates; per-candidate min/max
normalization statistics and semantic scores are held constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from dualmem.errors import InvalidInputError, NumericError, ParseError

LN_EPS = 1e-5
PARAMS_VERSION = 1
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def build_features(e_s, e_m) -> np.ndarray:
    e_s = np.asarray(e_s, dtype=np.float64)
    e_m = np.asarray(e_m, dtype=np.float64)
    if e_s.ndim != 1 or e_s.shape != e_m.shape:
        raise InvalidInputError(f"feature inputs differ in shape: {e_s.shape} vs {e_m.shape}")
    return np.concatenate([e_s, e_m, np.abs(e_s - e_m), e_s * e_m])


def build_feature_matrix(e_s, e_ms) -> np.ndarray:
    """Row-wise :func:`build_features` of one state against many memories."""
    e_s = np.asarray(e_s, dtype=np.float64)
    e_ms = np.asarray(e_ms, dtype=np.float64).reshape(-1, e_s.shape[0])
    s = np.broadcast_to(e_s, e_ms.shape)
    return np.concatenate([s, e_ms, np.abs(s - e_ms), s * e_ms], axis=1)


@dataclass
class Layer:
    w: np.ndarray
    b: np.ndarray
    ln_gain: np.ndarray
    ln_offset: np.ndarray


@dataclass
class ValueNetParams:
    d: int
    layers: list
    out_w: np.ndarray
    out_b: np.ndarray
    p_drop: float = 0.1

    @property
    def n_in(self) -> int:
        return 4 * self.d

    def arrays(self) -> dict:
        """Flat name -> array view, in a fixed order."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.w"] = layer.w
            out[f"layers.{i}.b"] = layer.b
            out[f"layers.{i}.ln_gain"] = layer.ln_gain
            out[f"layers.{i}.ln_offset"] = layer.ln_offset
        out["out.w"] = self.out_w
        out["out.b"] = self.out_b
        return out

    def with_arrays(self, arrays: dict) -> "ValueNetParams":
        layers = [
            Layer(
                w=arrays[f"layers.{i}.w"],
                b=arrays[f"layers.{i}.b"],
                ln_gain=arrays[f"layers.{i}.ln_gain"],
                ln_offset=arrays[f"layers.{i}.ln_offset"],
            )
            for i in range(len(self.layers))
        ]
        return ValueNetParams(self.d, layers, arrays["out.w"], arrays["out.b"], self.p_drop)

    def copy(self) -> "ValueNetParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})

    def validate(self) -> None:
        fan_in = self.n_in
        for i, layer in enumerate(self.layers):
            h = layer.b.shape[0]
            if layer.w.shape != (h, fan_in) or layer.ln_gain.shape != (h,) or layer.ln_offset.shape != (h,):
                raise InvalidInputError(f"layer {i} shapes inconsistent with input width {fan_in}")
            fan_in = h
        if self.out_w.shape != (1, fan_in) or self.out_b.shape != (1,):
            raise InvalidInputError("output layer shapes inconsistent")
        for name, a in self.arrays().items():
            if not np.all(np.isfinite(a)):
                raise InvalidInputError(f"non-finite entries in {name}")


def init_params(d: int, rng, hidden=(512, 128), p_drop: float = 0.1) -> ValueNetParams:
    """Glorot-uniform weights, zero biases, unit gain / zero offset."""
    if d < 1:
        raise InvalidInputError("d must be positive")
    layers = []
    fan_in = 4 * d
    for h in hidden:
        lim = math.sqrt(6.0 / (fan_in + h))
        layers.append(
            Layer(
                w=rng.uniform(-lim, lim, size=(h, fan_in)),
                b=np.zeros(h),
                ln_gain=np.ones(h),
                ln_offset=np.zeros(h),
            )
        )
        fan_in = h
    lim = math.sqrt(6.0 / (fan_in + 1))
    return ValueNetParams(d, layers, rng.uniform(-lim, lim, size=(1, fan_in)), np.zeros(1), p_drop)


def gelu(x):
    return x * ndtr(x)


def _gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layer_norm(a, eps: float = LN_EPS):
    """Normalize each row to zero mean / unit variance (before gain/offset)."""
    a = np.asarray(a, dtype=np.float64)
    mu = a.mean(axis=-1, keepdims=True)
    var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
    return (a - mu) / np.sqrt(var + eps)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_input(params: ValueNetParams, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.ndim != 2 or Z.shape[1] != params.n_in:
        raise InvalidInputError(f"feature width {Z.shape[-1]} != 4d = {params.n_in}")
    return Z


def _forward(params: ValueNetParams, Z, train: bool, rng):
    """Return (logits, cache) for a batch of feature rows."""
    cache = []
    h = Z
    keep = 1.0 - params.p_drop
    for layer in params.layers:
        a = h @ layer.w.T + layer.b
        mu = a.mean(axis=1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=1, keepdims=True)
        sigma = np.sqrt(var + LN_EPS)
        xhat = (a - mu) / sigma
        y = layer.ln_gain * xhat + layer.ln_offset
        g = gelu(y)
        if train and params.p_drop > 0.0:
            if rng is None:
                raise InvalidInputError("train mode needs a random stream for dropout")
            mask = (rng.random(g.shape) < keep) / keep
        else:
            mask = None
        out = g * mask if mask is not None else g
        cache.append((h, xhat, sigma, y, mask))
        h = out
    logits = (h @ params.out_w.T + params.out_b)[:, 0]
    return logits, (cache, h)


def _backward(params: ValueNetParams, fwd_cache, dlogits) -> dict:
    cache, h_last = fwd_cache
    grads = {}
    n_layers = len(params.layers)
    dl = dlogits[:, None]
    grads["out.w"] = dl.T @ h_last
    grads["out.b"] = dl.sum(axis=0)
    dh = dl @ params.out_w
    for i in reversed(range(n_layers)):
        layer = params.layers[i]
        h_in, xhat, sigma, y, mask = cache[i]
        if mask is not None:
            dh = dh * mask
        dy = dh * _gelu_grad(y)
        grads[f"layers.{i}.ln_gain"] = (dy * xhat).sum(axis=0)
        grads[f"layers.{i}.ln_offset"] = dy.sum(axis=0)
        dxhat = dy * layer.ln_gain
        da = (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) / sigma
        grads[f"layers.{i}.w"] = da.T @ h_in
        grads[f"layers.{i}.b"] = da.sum(axis=0)
        dh = da @ layer.w
    return grads


def forward_batch(params: ValueNetParams, Z, mode: str = "eval", rng=None) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    Z = _check_input(params, Z)
    logits, _ = _forward(params, Z, mode == "train", rng)
    return sigmoid(logits)


def forward(params: ValueNetParams, z, mode: str = "eval", rng=None) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise InvalidInputError("forward takes a single feature vector")
    return float(forward_batch(params, z, mode, rng)[0])


@dataclass
class TrainingSample:
    features: np.ndarray
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInputError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class PolicyContext:
    """What is needed to recompute the retrieval distribution from the net.

    ``val_min``/``val_max`` are the normalization statistics observed when
    the distribution was formed; they are treated as constants.
    """

    features: np.ndarray
    sem_norm: np.ndarray
    alpha: float
    tau: float
    val_min: float
    val_max: float

    def probs_from_values(self, s_val):
        span = self.val_max - self.val_min
        if span > 0.0:
            val_norm = (s_val - self.val_min) / span
        else:
            val_norm = np.full_like(s_val, 0.5)
        fused = self.alpha * self.sem_norm + (1.0 - self.alpha) * val_norm
        x = fused / self.tau
        x = x - x.max()
        p = np.exp(x)
        return p / p.sum(), span


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def loss_and_grads(
    params: ValueNetParams,
    batch,
    policy_probs,
    beta: float,
    policy: PolicyContext | None = None,
    train: bool = False,
    rng=None,
):
    """Summed BCE minus ``beta`` times retrieval-policy entropy, with gradients.

    With ``policy=None`` the entropy is read from ``policy_probs`` and is a
    constant w.r.t. the parameters. With a context, the entropy is recomputed
    from the live value scores (equal to ``policy_probs`` at the parameters
    that produced them) and differentiated. ``train=True`` enables dropout
    on the BCE pass only.
    """
    batch = list(batch)
    if not batch:
        raise InvalidInputError("loss needs at least one training sample")
    probs = np.asarray(policy_probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise InvalidInputError("policy_probs must be a probability vector")
    if beta < 0:
        raise InvalidInputError("beta must be >= 0")

    Z = _check_input(params, np.stack([np.asarray(s.features, dtype=np.float64) for s in batch]))
    y = np.array([s.label for s in batch], dtype=np.float64)
    logits, cache = _forward(params, Z, train, rng)
    # BCE on logits: softplus(l) - y*l
    bce = float((np.logaddexp(0.0, logits) - y * logits).sum())
    grads = _backward(params, cache, sigmoid(logits) - y)

    if policy is None:
        H = entropy(probs)
    else:
        Zc = _check_input(params, policy.features)
        c_logits, c_cache = _forward(params, Zc, False, None)
        s_val = sigmoid(c_logits)
        p, span = policy.probs_from_values(s_val)
        logp = np.log(p)
        H = float(-(p * logp).sum())
        if beta > 0.0 and span > 0.0:
            # d(-beta*H)/d fused_i = beta * p_i * (log p_i + H) / tau
            dfused = beta * p * (logp + H) / policy.tau
            dlog = dfused * (1.0 - policy.alpha) / span * s_val * (1.0 - s_val)
            g_ent = _backward(params, c_cache, dlog)
            for k in grads:
                grads[k] = grads[k] + g_ent[k]
    return bce - beta * H, grads


def bce_loss(params: ValueNetParams, batch) -> float:
    """Summed eval-mode binary cross-entropy (no entropy term)."""
    batch = list(batch)
    Z = _check_input(params, np.stack([np.asarray(s.features, dtype=np.float64) for s in batch]))
    y = np.array([s.label for s in batch], dtype=np.float64)
    logits, _ = _forward(params, Z, False, None)
    return float((np.logaddexp(0.0, logits) - y * logits).sum())


@dataclass
class AdamState:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.b1, self.b2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def train_step(params: ValueNetParams, grads: dict, state: AdamState):
    """One Adam update. Returns fresh (params, state); inputs are not mutated."""
    arrays = params.arrays()
    if set(grads) != set(arrays):
        raise InvalidInputError("gradient keys do not match parameters")
    for k, g in grads.items():
        if np.shape(g) != arrays[k].shape:
            raise InvalidInputError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}; update aborted")
    new = state.copy()
    new.step += 1
    bc1 = 1.0 - new.b1**new.step
    bc2 = 1.0 - new.b2**new.step
    updated = {}
    for k, p in arrays.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = new.m.get(k)
        v = new.v.get(k)
        m = (1.0 - new.b1) * g if m is None else new.b1 * m + (1.0 - new.b1) * g
        v = (1.0 - new.b2) * g * g if v is None else new.b2 * v + (1.0 - new.b2) * g * g
        new.m[k] = m
        new.v[k] = v
        updated[k] = p - new.lr * (m / bc1) / (np.sqrt(v / bc2) + new.eps)
    return params.with_arrays(updated), new


def params_to_dict(params: ValueNetParams) -> dict:
    return {
        "version": PARAMS_VERSION,
        "d": params.d,
        "p_drop": params.p_drop,
        "layers": [
            {
                "w": layer.w.tolist(),
                "b": layer.b.tolist(),
                "ln_gain": layer.ln_gain.tolist(),
                "ln_offset": layer.ln_offset.tolist(),
            }
            for layer in params.layers
        ],
        "out": {"w": params.out_w.tolist(), "b": params.out_b.tolist()},
    }


def params_from_dict(data: dict) -> ValueNetParams:
    if data.get("version") != PARAMS_VERSION:
        raise ParseError(f"unsupported params version {data.get('version')!r}")
    try:
        layers = [
            Layer(
                w=np.array(lay["w"], dtype=np.float64),
                b=np.array(lay["b"], dtype=np.float64),
                ln_gain=np.array(lay["ln_gain"], dtype=np.float64),
                ln_offset=np.array(lay["ln_offset"], dtype=np.float64),
            )
            for lay in data["layers"]
        ]
        params = ValueNetParams(
            d=int(data["d"]),
            layers=layers,
            out_w=np.array(data["out"]["w"], dtype=np.float64),
            out_b=np.array(data["out"]["b"], dtype=np.float64),
            p_drop=float(data["p_drop"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed params document: {exc}") from None
    try:
        params.validate()
    except InvalidInputError as exc:
        raise ParseError(str(exc)) from None
    return params


def save_params(params: ValueNetParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)), encoding="utf-8")


def load_params(path) -> ValueNetParams:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    return params_from_dict(data)
