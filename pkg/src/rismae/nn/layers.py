"""Layers with explicit forward/backward rules.

Every layer caches what its backward pass needs during ``forward`` and
writes parameter gradients into ``self.grads`` during ``backward``.
Inputs are batched ``(..., features)`` arrays; the lowest-level routines
attention layer also accepts a plain 2-D matrix.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

try:
    import torch as _torch
except ImportError:  # optional accelerator
    _torch = None

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


def trunc_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0, dtype=np.float64):
    """Normal(0, std) truncated to +-bound*std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)


class Module:
    """Container for named parameters, their gradients and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = False

    def named_parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.params.items()}
        for name, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.params.items():
            g = self.grads.get(k)
            out[prefix + k] = np.zeros_like(v) if g is None else g
        for name, child in self.children.items():
            out.update(child.named_grads(f"{prefix}{name}."))
        return out

    def zero_grad(self):
        self.grads = {}
        for child in self.children.values():
            child.zero_grad()

    def clear_cache(self):
        self._cache = None
        for child in self.children.values():
            child.clear_cache()

    def set_training(self, flag: bool):
        """Switch stochastic layers (dropout) on or off for the whole tree."""
        self.training = flag
        for child in self.children.values():
            child.set_training(flag)


class Linear(Module):
    """Affine map.

    ``layout="out_in"`` stores the weight as (out, in) and computes
    ``x @ W.T + b`` (the ``W x + b`` form); ``"in_out"`` stores (in, out)
    and computes ``x @ W + b`` (the ``x W`` form).
    """

    def __init__(self, n_in, n_out, rng, bias=True, layout="out_in", dtype=np.float64,
                 std=0.02):
        super().__init__()
        if layout not in ("out_in", "in_out"):
            raise ValueError(f"unknown layout {layout!r}")
        self.layout = layout
        self.n_in, self.n_out = n_in, n_out
        shape = (n_out, n_in) if layout == "out_in" else (n_in, n_out)
        self.params["w"] = trunc_normal(rng, shape, std, dtype=dtype)
        if bias:
            self.params["b"] = np.zeros(n_out, dtype=dtype)

    def _w(self):
        w = self.params["w"]
        return w.T if self.layout == "out_in" else w

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects {self.n_in} input features, got {x.shape[-1]}")
        self._cache = x
        lead = x.shape[:-1]
        y = x.reshape(-1, self.n_in) @ self._w()
        if "b" in self.params:
            y += self.params["b"]
        return y.reshape(*lead, self.n_out)

    def backward(self, dy):
        x = self._cache
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        dw = x2.T @ dy2
        self.grads["w"] = dw.T if self.layout == "out_in" else dw
        if "b" in self.params:
            self.grads["b"] = dy2.sum(axis=0)
        return (dy2 @ self._w().T).reshape(x.shape)


def _layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row standardization followed by ``gamma * xhat + beta``."""
    x = np.asarray(x)
    if x.shape[-1] != gamma.shape[-1]:
        raise ValueError(f"layer_norm width mismatch: {x.shape[-1]} vs {gamma.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


class LayerNorm(Module):
    def __init__(self, width, eps=1e-5, dtype=np.float64):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.params["gamma"] = np.ones(width, dtype=dtype)
        self.params["beta"] = np.zeros(width, dtype=dtype)

    def forward(self, x):
        y, self._cache = _layer_norm(x, self.params["gamma"], self.params["beta"], self.eps)
        return y

    def backward(self, dy):
        xhat, rstd = self._cache
        w = xhat.shape[-1]
        self.grads["gamma"] = (dy * xhat).reshape(-1, w).sum(axis=0)
        self.grads["beta"] = dy.reshape(-1, w).sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _erf(x):
    # torch's vectorized erf is ~7x faster than scipy's on large float32 arrays
    if _torch is not None and x.size >= 4096:
        return _torch.special.erf(_torch.from_numpy(np.ascontiguousarray(x))).numpy()
    return erf(x)


def normal_cdf(x):
    return 0.5 * (1.0 + _erf(x * _SQRT1_2))


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    return x * normal_cdf(x)


def gelu_grad(x, cdf=None):
    if cdf is None:
        cdf = normal_cdf(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention with an output projection.

    Projections have no bias. ``wq``, ``wk``, ``wv``, ``wo`` are d x d and
    right-multiply the token rows.
    """

    def __init__(self, dim, num_heads, rng, dtype=np.float64, std=0.02):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"width {dim} is not divisible by num_heads={num_heads}")
        self.dim, self.num_heads = dim, num_heads
        self.head_dim = dim // num_heads
        for name in ("wq", "wk", "wv", "wo"):
            self.params[name] = trunc_normal(rng, (dim, dim), std, dtype=dtype)

    @classmethod
    def from_weights(cls, wq, wk, wv, wo, num_heads=1):
        d = wq.shape[0]
        for w in (wq, wk, wv, wo):
            if w.shape != (d, d):
                raise ValueError(f"attention weights must be {d}x{d}, got {w.shape}")
        m = cls(d, num_heads, np.random.default_rng(0), dtype=wq.dtype)
        m.params.update(wq=wq, wk=wk, wv=wv, wo=wo)
        return m

    def _split(self, t):
        b, s, _ = t.shape
        return t.reshape(b, s, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, t):
        b, h, s, dh = t.shape
        return t.transpose(0, 2, 1, 3).reshape(b, s, h * dh)

    def forward(self, x, return_weights=False):
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[-1] != self.dim:
            raise ValueError(f"attention expects width {self.dim}, got {x.shape[-1]}")
        if x.shape[1] < 1:
            raise ValueError("attention needs at least one row")
        p = self.params
        w_qkv = np.concatenate([p["wq"], p["wk"], p["wv"]], axis=1)
        b, s, d = x.shape
        qkv = (x.reshape(-1, d) @ w_qkv).reshape(b, s, 3 * d)
        q, k, v = (self._split(t) for t in np.split(qkv, 3, axis=-1))
        scale = 1.0 / math.sqrt(self.head_dim)
        qs = q * scale
        a = qs @ k.transpose(0, 1, 3, 2)
        a -= a.max(axis=-1, keepdims=True)
        np.exp(a, out=a)
        a /= a.sum(axis=-1, keepdims=True)
        o = a @ v
        heads = self._merge(o)
        y = (heads.reshape(-1, d) @ p["wo"]).reshape(b, s, d)
        self._cache = (x, qs, k, v, a, o, heads, w_qkv, scale, squeeze)
        if squeeze:
            y = y[0]
        if return_weights:
            return y, (a[0] if squeeze else a)
        return y

    def backward(self, dy):
        x, qs, k, v, a, o, heads, w_qkv, scale, squeeze = self._cache
        if squeeze:
            dy = dy[None]
        d = self.dim
        self.grads["wo"] = heads.reshape(-1, d).T @ dy.reshape(-1, d)
        dheads = self._split((dy.reshape(-1, d) @ self.params["wo"].T).reshape(dy.shape))
        dv = a.transpose(0, 1, 3, 2) @ dheads
        # softmax backward; sum_j dA_ij A_ij == sum_c dO_ic O_ic
        ds = dheads @ v.transpose(0, 1, 3, 2)
        ds -= np.sum(dheads * o, axis=-1, keepdims=True)
        ds *= a
        dq = (ds @ k) * scale
        dk = ds.transpose(0, 1, 3, 2) @ qs
        dqkv = np.concatenate([self._merge(dq), self._merge(dk), self._merge(dv)], axis=-1)
        dw = x.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
        self.grads["wq"], self.grads["wk"], self.grads["wv"] = np.split(dw, 3, axis=1)
        dx = (dqkv.reshape(-1, 3 * d) @ w_qkv.T).reshape(x.shape)
        return dx[0] if squeeze else dx


class MLP(Module):
    """GELU(x W1 + b1) W2 + b2."""

    def __init__(self, dim, hidden, rng, dtype=np.float64, std=0.02):
        super().__init__()
        self.children["fc1"] = Linear(dim, hidden, rng, layout="in_out", dtype=dtype, std=std)
        self.children["fc2"] = Linear(hidden, dim, rng, layout="in_out", dtype=dtype, std=std)

    def forward(self, x):
        h = self.children["fc1"].forward(x)
        cdf = normal_cdf(h)
        self._cache = (h, cdf)
        return self.children["fc2"].forward(h * cdf)

    def backward(self, dy):
        h, cdf = self._cache
        dh = self.children["fc2"].backward(dy) * gelu_grad(h, cdf)
        return self.children["fc1"].backward(dh)


class Dropout(Module):
    """Inverted dropout; the identity unless ``training`` is set and p > 0."""

    def __init__(self, p: float = 0.0, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.training = False

    def forward(self, x):
        if not (self.training and self.p > 0):
            self._cache = None
            return x
        keep = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        self._cache = keep
        return x * keep

    def backward(self, dy):
        return dy if self._cache is None else dy * self._cache


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)), with optional residual dropout."""

    def __init__(self, dim, num_heads, mlp_hidden, rng, dtype=np.float64, eps=1e-5,
                 dropout: float = 0.0, dropout_rng: np.random.Generator | None = None):
        super().__init__()
        self.children["norm1"] = LayerNorm(dim, eps, dtype)
        self.children["attn"] = MultiHeadAttention(dim, num_heads, rng, dtype)
        self.children["norm2"] = LayerNorm(dim, eps, dtype)
        self.children["mlp"] = MLP(dim, mlp_hidden, rng, dtype)
        self.children["drop1"] = Dropout(dropout, dropout_rng)
        self.children["drop2"] = Dropout(dropout, dropout_rng)

    def forward(self, x):
        c = self.children
        h = x + c["drop1"].forward(c["attn"].forward(c["norm1"].forward(x)))
        return h + c["drop2"].forward(c["mlp"].forward(c["norm2"].forward(h)))

    def backward(self, dy):
        c = self.children
        dh = dy + c["norm2"].backward(c["mlp"].backward(c["drop2"].backward(dy)))
        return dh + c["norm1"].backward(c["attn"].backward(c["drop1"].backward(dh)))


class Stack(Module):
    def __init__(self, blocks):
        super().__init__()
        self.children = {str(i): b for i, b in enumerate(blocks)}

    def __len__(self):
        return len(self.children)

    def forward(self, x):
        for b in self.children.values():
            x = b.forward(x)
        return x

    def backward(self, dy):
        for b in reversed(list(self.children.values())):
            dy = b.backward(dy)
        return dy
