"""Attention/feed-forward building blocks with explicit reverse-mode gradients.

No autograd framework: every layer implements ``forward`` returning
``(output, cache)`` and ``backward`` consuming the upstream gradient plus the
cache, accumulating parameter gradients into a shared :class:`Parameters`
registry and returning the input gradient.  Float64 throughout so gradients
can be validated against central finite differences.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np
from scipy.special import erf

__all__ = [
    "Parameters",
    "Linear",
    "LayerNorm",
    "Dropout",
    "MultiHeadAttention",
    "FeedForward",
    "EncoderLayer",
    "CrossAttentionBlock",
    "sinusoidal_encoding",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Parameters:
    """Named trainable tensors, each with a gradient slot.

    Entries keep registration order, which is also the (deterministic)
    serialization order.
    """

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def register(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def add_grad(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def names(self) -> list[str]:
        return list(self.values)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "Parameters":
        out = Parameters()
        for name, value in self.values.items():
            out.register(name, value.copy())
        return out

    def quantized(self) -> "Parameters":
        """Copy with values rounded through float32, the checkpoint precision."""
        out = Parameters()
        for name, value in self.values.items():
            out.register(name, value.astype(np.float32).astype(np.float64))
        return out

    def to_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])

    def from_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for value in self.values.values():
            value[...] = flat[offset : offset + value.size].reshape(value.shape)
            offset += value.size
        if offset != flat.size:
            raise ValueError("flat vector size mismatch")

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([self.grads[n].ravel() for n in self.values])


def _glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class Linear:
    def __init__(self, params: Parameters, prefix: str, d_in: int, d_out: int,
                 rng: np.random.Generator) -> None:
        self.params = params
        self.w_name = f"{prefix}.w"
        self.b_name = f"{prefix}.b"
        params.register(self.w_name, _glorot(rng, d_in, d_out))
        params.register(self.b_name, np.zeros(d_out))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        return x @ self.params[self.w_name] + self.params[self.b_name], x

    def backward(self, dy: np.ndarray, cache: Any) -> np.ndarray:
        x = cache
        d_in = x.shape[-1]
        d_out = dy.shape[-1]
        self.params.add_grad(self.w_name, x.reshape(-1, d_in).T @ dy.reshape(-1, d_out))
        self.params.add_grad(self.b_name, dy.reshape(-1, d_out).sum(axis=0))
        return dy @ self.params[self.w_name].T


class LayerNorm:
    def __init__(self, params: Parameters, prefix: str, dim: int, eps: float = 1e-6) -> None:
        self.params = params
        self.g_name = f"{prefix}.g"
        self.b_name = f"{prefix}.b"
        self.eps = eps
        params.register(self.g_name, np.ones(dim))
        params.register(self.b_name, np.zeros(dim))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        return xhat * self.params[self.g_name] + self.params[self.b_name], (xhat, inv)

    def backward(self, dy: np.ndarray, cache: Any) -> np.ndarray:
        xhat, inv = cache
        dim = dy.shape[-1]
        self.params.add_grad(self.g_name, (dy * xhat).reshape(-1, dim).sum(axis=0))
        self.params.add_grad(self.b_name, dy.reshape(-1, dim).sum(axis=0))
        dxhat = dy * self.params[self.g_name]
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


class Dropout:
    def __init__(self, rate: float) -> None:
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x: np.ndarray, rng: np.random.Generator | None) -> tuple[np.ndarray, Any]:
        if rng is None or self.rate == 0.0:
            return x, None
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy: np.ndarray, cache: Any) -> np.ndarray:
        return dy if cache is None else dy * cache


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


class MultiHeadAttention:
    """Scaled dot-product attention; self-attention when queries == keys/values."""

    def __init__(self, params: Parameters, prefix: str, d_model: int, n_heads: int,
                 rng: np.random.Generator) -> None:
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(params, f"{prefix}.wq", d_model, d_model, rng)
        self.wk = Linear(params, f"{prefix}.wk", d_model, d_model, rng)
        self.wv = Linear(params, f"{prefix}.wv", d_model, d_model, rng)
        self.wo = Linear(params, f"{prefix}.wo", d_model, d_model, rng)

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, length, d = x.shape
        return x.reshape(b, length, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, _, length, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, length, self.n_heads * self.d_head)

    def forward(self, q_in: np.ndarray, kv_in: np.ndarray) -> tuple[np.ndarray, Any]:
        q_flat, q_cache = self.wq.forward(q_in)
        k_flat, k_cache = self.wk.forward(kv_in)
        v_flat, v_cache = self.wv.forward(kv_in)
        q, k, v = self._split(q_flat), self._split(k_flat), self._split(v_flat)
        scale = 1.0 / math.sqrt(self.d_head)
        attn = _softmax(np.matmul(q, k.transpose(0, 1, 3, 2)) * scale)
        ctx = self._merge(np.matmul(attn, v))
        out, o_cache = self.wo.forward(ctx)
        return out, (q_cache, k_cache, v_cache, o_cache, q, k, v, attn, scale)

    def backward(self, dout: np.ndarray, cache: Any) -> tuple[np.ndarray, np.ndarray]:
        q_cache, k_cache, v_cache, o_cache, q, k, v, attn, scale = cache
        dctx = self._split(self.wo.backward(dout, o_cache))
        dattn = np.matmul(dctx, v.transpose(0, 1, 3, 2))
        dv = np.matmul(attn.transpose(0, 1, 3, 2), dctx)
        dscores = _softmax_backward(attn, dattn) * scale
        dq = np.matmul(dscores, k)
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q)
        dq_in = self.wq.backward(self._merge(dq), q_cache)
        dk_in = self.wk.backward(self._merge(dk), k_cache)
        dv_in = self.wv.backward(self._merge(dv), v_cache)
        return dq_in, dk_in + dv_in


class FeedForward:
    def __init__(self, params: Parameters, prefix: str, d_model: int, d_hidden: int,
                 rng: np.random.Generator, dropout: float = 0.0) -> None:
        self.fc1 = Linear(params, f"{prefix}.fc1", d_model, d_hidden, rng)
        self.fc2 = Linear(params, f"{prefix}.fc2", d_hidden, d_model, rng)
        self.drop = Dropout(dropout)

    def forward(self, x: np.ndarray, rng: np.random.Generator | None) -> tuple[np.ndarray, Any]:
        h, c1 = self.fc1.forward(x)
        a = _gelu(h)
        a_drop, cd = self.drop.forward(a, rng)
        y, c2 = self.fc2.forward(a_drop)
        return y, (c1, h, cd, c2)

    def backward(self, dy: np.ndarray, cache: Any) -> np.ndarray:
        c1, h, cd, c2 = cache
        da = self.drop.backward(self.fc2.backward(dy, c2), cd)
        dh = da * _gelu_grad(h)
        return self.fc1.backward(dh, c1)


class EncoderLayer:
    """Pre-norm self-attention block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, params: Parameters, prefix: str, d_model: int, n_heads: int,
                 d_hidden: int, rng: np.random.Generator, dropout: float = 0.0) -> None:
        self.ln1 = LayerNorm(params, f"{prefix}.ln1", d_model)
        self.attn = MultiHeadAttention(params, f"{prefix}.attn", d_model, n_heads, rng)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", d_model)
        self.ffn = FeedForward(params, f"{prefix}.ffn", d_model, d_hidden, rng, dropout)
        self.drop = Dropout(dropout)

    def forward(self, x: np.ndarray, rng: np.random.Generator | None) -> tuple[np.ndarray, Any]:
        a, c_ln1 = self.ln1.forward(x)
        m, c_attn = self.attn.forward(a, a)
        m_drop, c_d1 = self.drop.forward(m, rng)
        h = x + m_drop
        b, c_ln2 = self.ln2.forward(h)
        f, c_ffn = self.ffn.forward(b, rng)
        f_drop, c_d2 = self.drop.forward(f, rng)
        return h + f_drop, (c_ln1, c_attn, c_d1, c_ln2, c_ffn, c_d2)

    def backward(self, dy: np.ndarray, cache: Any) -> np.ndarray:
        c_ln1, c_attn, c_d1, c_ln2, c_ffn, c_d2 = cache
        df = self.drop.backward(dy, c_d2)
        db = self.ffn.backward(df, c_ffn)
        dh = dy + self.ln2.backward(db, c_ln2)
        dm = self.drop.backward(dh, c_d1)
        dq, dkv = self.attn.backward(dm, c_attn)
        return dh + self.ln1.backward(dq + dkv, c_ln1)


class CrossAttentionBlock:
    """Pre-norm cross-attention: queries attend to a separate key/value stream."""

    def __init__(self, params: Parameters, prefix: str, d_model: int, n_heads: int,
                 d_hidden: int, rng: np.random.Generator, dropout: float = 0.0) -> None:
        self.ln_q = LayerNorm(params, f"{prefix}.ln_q", d_model)
        self.ln_kv = LayerNorm(params, f"{prefix}.ln_kv", d_model)
        self.attn = MultiHeadAttention(params, f"{prefix}.attn", d_model, n_heads, rng)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", d_model)
        self.ffn = FeedForward(params, f"{prefix}.ffn", d_model, d_hidden, rng, dropout)
        self.drop = Dropout(dropout)

    def forward(self, q: np.ndarray, kv: np.ndarray,
                rng: np.random.Generator | None) -> tuple[np.ndarray, Any]:
        aq, c_lnq = self.ln_q.forward(q)
        akv, c_lnkv = self.ln_kv.forward(kv)
        m, c_attn = self.attn.forward(aq, akv)
        m_drop, c_d1 = self.drop.forward(m, rng)
        h = q + m_drop
        b, c_ln2 = self.ln2.forward(h)
        f, c_ffn = self.ffn.forward(b, rng)
        f_drop, c_d2 = self.drop.forward(f, rng)
        return h + f_drop, (c_lnq, c_lnkv, c_attn, c_d1, c_ln2, c_ffn, c_d2)

    def backward(self, dy: np.ndarray, cache: Any) -> tuple[np.ndarray, np.ndarray]:
        c_lnq, c_lnkv, c_attn, c_d1, c_ln2, c_ffn, c_d2 = cache
        df = self.drop.backward(dy, c_d2)
        db = self.ffn.backward(df, c_ffn)
        dh = dy + self.ln2.backward(db, c_ln2)
        dm = self.drop.backward(dh, c_d1)
        daq, dakv = self.attn.backward(dm, c_attn)
        dq = dh + self.ln_q.backward(daq, c_lnq)
        dkv = self.ln_kv.backward(dakv, c_lnkv)
        return dq, dkv


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional encoding, shape (length, dim)."""
    position = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div[: dim // 2])
    return pe
