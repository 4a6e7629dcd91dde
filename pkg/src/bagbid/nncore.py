"""Double-precision neural-net kernels with explicit backward passes.

Everything here is plain numpy float64: affine, layer norm, GELU, causal
self-attention, embedding lookup, a bias-corrected Adam step, and a
central-difference gradient checker.  No graphs, no broadcasting magic
beyond a leading batch dimension; each op caches what its backward needs
and training is bitwise deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import math

import numpy as np

from bagbid.trajectory import atomic_write_text

CHECKPOINT_FORMAT = "bagbid-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contained NaN or inf; the update was rejected."""


class ShapeError(ValueError):
    pass


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class ParameterSet:
    """Named parameters with paired gradient and Adam moment buffers."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self.adam_t = 0

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    @property
    def size(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(p.value).all() for p in self._params.values())

    def state_dict(self):
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state_dict(self, state):
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {arr.shape} != {p.value.shape}"
                )
            p.value[...] = arr

    def save(self, path, meta: dict | None = None):
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "meta": meta or {},
            "params": {
                name: {"shape": list(p.value.shape), "data": p.value.ravel().tolist()}
                for name, p in self._params.items()
            },
        }
        atomic_write_text(path, json.dumps(payload, separators=(",", ":")))

    @staticmethod
    def load_payload(path) -> tuple[dict, dict]:
        """Read a checkpoint file into ({name: array}, meta)."""
        with open(path) as f:
            payload = json.load(f)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        state = {
            name: np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
            for name, rec in payload["params"].items()
        }
        return state, payload.get("meta", {})


def adam_step(params: ParameterSet, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every parameter.

    Rejects the whole step (raises, no state mutated) when any gradient is
    non-finite.
    """
    for name, p in params.items():
        if not np.isfinite(p.grad).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")
    params.adam_t += 1
    t = params.adam_t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        m = params._adam_m.get(name)
        if m is None:
            m = params._adam_m[name] = np.zeros_like(p.value)
        v = params._adam_v.get(name)
        if v is None:
            v = params._adam_v[name] = np.zeros_like(p.value)
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * np.square(p.grad)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# functional ops: forward returns (y, cache), backward consumes cache
# ---------------------------------------------------------------------------


def affine_forward(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"inner dims disagree: {x.shape} @ {w.shape}")
    return x @ w + b, (x, w)


def affine_backward(dy, cache):
    x, w = cache
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv_std, gamma = cache
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)
_MASK_CACHE: dict[int, np.ndarray] = {}


def _future_mask(length: int) -> np.ndarray:
    """Boolean (L, L) mask of strictly-future positions (upper triangle)."""
    mask = _MASK_CACHE.get(length)
    if mask is None:
        mask = _MASK_CACHE[length] = ~np.tril(np.ones((length, length), dtype=bool))
    return mask


def gelu_forward(x):
    xsq = x * x
    u = _GELU_C * (x + 0.044715 * (xsq * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, xsq, t)


def gelu_backward(dy, cache):
    x, xsq, t = cache
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * xsq)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def causal_attention_forward(x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads):
    """Multi-head self-attention with a strict causal mask.

    ``x`` is (L, d) or (batch, L, d); output matches.  Position i attends
    to positions <= i only; masked scores are -inf so future tokens carry
    exactly zero weight.
    """
    squeezed = x.ndim == 2
    if squeezed:
        x = x[None]
    b, length, d = x.shape
    if d % n_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    q, cq = affine_forward(x, wq, bq)
    k, ck = affine_forward(x, wk, bk)
    v, cv = affine_forward(x, wv, bv)

    def split(m):
        return m.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(0, 1, 3, 2)
    scores /= math.sqrt(dh)
    scores[..., _future_mask(length)] = -np.inf
    probs = softmax(scores, axis=-1)
    ctx = probs @ vh
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, length, d)
    y, co = affine_forward(merged, wo, bo)
    cache = (cq, ck, cv, co, qh, kh, vh, probs, n_heads, squeezed)
    return (y[0] if squeezed else y), cache


def causal_attention_backward(dy, cache):
    cq, ck, cv, co, qh, kh, vh, probs, n_heads, squeezed = cache
    if squeezed:
        dy = dy[None]
    b, length, d = dy.shape
    dh = d // n_heads

    dmerged, dwo, dbo = affine_backward(dy, co)
    dctx = dmerged.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)

    dprobs = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dctx
    # softmax backward; masked entries have prob 0 so they contribute nothing
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= math.sqrt(dh)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    def merge(m):
        return m.transpose(0, 2, 1, 3).reshape(b, length, d)

    dq_, dwq, dbq = affine_backward(merge(dqh), cq)
    dk_, dwk, dbk = affine_backward(merge(dkh), ck)
    dv_, dwv, dbv = affine_backward(merge(dvh), cv)
    dx = dq_ + dk_ + dv_
    if squeezed:
        dx = dx[0]
    return dx, dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo


def embedding_forward(table, idx):
    idx = np.asarray(idx)
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= table.shape[0]:
        raise ShapeError("embedding index out of range")
    return table[idx], (table.shape, idx)


def embedding_backward(dy, cache):
    shape, idx = cache
    dtable = np.zeros(shape, dtype=np.float64)
    np.add.at(dtable, idx, dy)
    return dtable


# ---------------------------------------------------------------------------
# layer wrappers used by model code
# ---------------------------------------------------------------------------


class Affine:
    def __init__(self, ps: ParameterSet, name, n_in, n_out, rng, w_std=0.02,
                 zero_init=False):
        w = np.zeros((n_in, n_out)) if zero_init else rng.normal(0.0, w_std, (n_in, n_out))
        self.w = ps.add(f"{name}.w", w)
        self.b = ps.add(f"{name}.b", np.zeros(n_out))

    def forward(self, x):
        y, self._cache = affine_forward(x, self.w.value, self.b.value)
        return y

    def backward(self, dy):
        dx, dw, db = affine_backward(dy, self._cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class LayerNorm:
    def __init__(self, ps: ParameterSet, name, dim, eps=1e-5):
        self.gamma = ps.add(f"{name}.gamma", np.ones(dim))
        self.beta = ps.add(f"{name}.beta", np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        y, self._cache = layer_norm_forward(x, self.gamma.value, self.beta.value, self.eps)
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = layer_norm_backward(dy, self._cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class Gelu:
    def forward(self, x):
        y, self._cache = gelu_forward(x)
        return y

    def backward(self, dy):
        return gelu_backward(dy, self._cache)


class CausalSelfAttention:
    def __init__(self, ps: ParameterSet, name, dim, n_heads, rng, w_std=0.02):
        self.n_heads = n_heads
        self.params = []
        for stem in ("q", "k", "v", "o"):
            self.params.append(ps.add(f"{name}.w{stem}", rng.normal(0.0, w_std, (dim, dim))))
            self.params.append(ps.add(f"{name}.b{stem}", np.zeros(dim)))

    def forward(self, x):
        vals = [p.value for p in self.params]
        y, self._cache = causal_attention_forward(x, *vals, self.n_heads)
        return y

    def backward(self, dy):
        grads = causal_attention_backward(dy, self._cache)
        dx = grads[0]
        for p, g in zip(self.params, grads[1:]):
            p.grad += g
        return dx


class Embedding:
    def __init__(self, ps: ParameterSet, name, n_rows, dim, rng, w_std=0.02):
        self.table = ps.add(f"{name}.table", rng.normal(0.0, w_std, (n_rows, dim)))

    def forward(self, idx):
        y, self._cache = embedding_forward(self.table.value, idx)
        return y

    def backward(self, dy):
        self.table.grad += embedding_backward(dy, self._cache)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(loss_fn, tensors, analytic_grads, h=1e-5):
    """Max relative error between analytic and central-difference grads.

    ``loss_fn()`` must recompute the scalar loss from the current contents
    of ``tensors`` (mutated in place while probing).  Per tensor the error
    is ``max|a - n| / max(max|a|, max|n|, 1)``; the worst tensor is
    returned.  Double precision only.
    """
    worst = 0.0
    for arr, analytic in zip(tensors, analytic_grads):
        numeric = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + h
            lp = loss_fn()
            arr[ix] = orig - h
            lm = loss_fn()
            arr[ix] = orig
            numeric[ix] = (lp - lm) / (2.0 * h)
        scale = max(
            float(np.abs(analytic).max(initial=0.0)),
            float(np.abs(numeric).max(initial=0.0)),
            1.0,
        )
        err = float(np.abs(analytic - numeric).max(initial=0.0)) / scale
        worst = max(worst, err)
    return worst
