"""Layers built on the taped tensor ops: linear maps, attention, GRUs.

Initialization convention: linear weights uniform in +-sqrt(1/fan_in),
biases zero, everything drawn from an explicit numpy Generator so runs are
reproducible bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


class Module:
    """Minimal parameter container with recursive discovery."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{prefix}{name}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, mapping: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in mapping:
                raise ShapeError(f"missing parameter '{name}' in state")
            arr = np.asarray(mapping[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter '{name}': stored shape {arr.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(arr)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-8):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x, self._eps), self.gain), self.bias)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.table = uniform_init(rng, (vocab, dim), dim)

    def __call__(self, indices) -> Tensor:
        return ad.embedding(self.table, indices)


class SelfAttention(Module):
    """Multi-head scaled dot-product self-attention over (B, T, d) tokens."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"latent dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        x = ad.reshape(x, (b, t, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))  # (B, H, T, dh)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        q = self._split(self.wq(x), b, t)
        k = self._split(self.wk(x), b, t)
        v = self._split(self.wv(x), b, t)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                        1.0 / np.sqrt(self.head_dim))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.wo(ctx)


class CrossAttention(Module):
    """Queries from x, keys/values from a memory sequence."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"latent dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        b, tq, d = x.shape
        tm = memory.shape[1]

        def split(z, t):
            z = ad.reshape(z, (b, t, self.heads, self.head_dim))
            return ad.transpose(z, (0, 2, 1, 3))

        q = split(self.wq(x), tq)
        k = split(self.wk(memory), tm)
        v = split(self.wv(memory), tm)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                        1.0 / np.sqrt(self.head_dim))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.w1 = Linear(dim, hidden, rng)
        self.w2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ad.gelu(self.w1(x)))


class EncoderBlock(Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, dim: int, heads: int, ff_mult: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x)))
        return ad.add(x, self.ff(self.ln2(x)))


class DecoderBlock(Module):
    """Pre-norm block with self-attention, cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, ff_mult: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = ad.add(x, self.self_attn(self.ln1(x)))
        x = ad.add(x, self.cross_attn(self.ln2(x), memory))
        return ad.add(x, self.ff(self.ln3(x)))


class GRULayer(Module):
    """Single-direction gated recurrent layer over (B, T, in) sequences."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.wz = Linear(in_dim, hidden, rng)
        self.uz = Linear(hidden, hidden, rng)
        self.wr = Linear(in_dim, hidden, rng)
        self.ur = Linear(hidden, hidden, rng)
        self.wn = Linear(in_dim, hidden, rng)
        self.un = Linear(hidden, hidden, rng)

    def __call__(self, x: Tensor, reverse: bool = False):
        """Returns (outputs (B, T, h), final hidden (B, h))."""
        b, t, _ = x.shape
        h = Tensor(np.zeros((b, self.hidden)))
        outs: list[Tensor] = [None] * t
        steps = range(t - 1, -1, -1) if reverse else range(t)
        for i in steps:
            xt = x[:, i, :]
            z = ad.sigmoid(ad.add(self.wz(xt), self.uz(h)))
            r = ad.sigmoid(ad.add(self.wr(xt), self.ur(h)))
            n = ad.tanh_(ad.add(self.wn(xt), ad.mul(r, self.un(h))))
            h = ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))
            outs[i] = ad.reshape(h, (b, 1, self.hidden))
        return ad.concat(outs, axis=1), h


class BiGRUEncoder(Module):
    """Stacked bidirectional GRU; feature = linear(concat of final hiddens).

    The two directions of each layer are concatenated per frame and fed to
    the next layer; the extracted feature uses the top layer's forward and
    backward final hidden states.
    """

    def __init__(self, in_dim: int, hidden: int, layers: int, feature_width: int,
                 rng: np.random.Generator):
        self.fwd = []
        self.bwd = []
        d = in_dim
        for _ in range(layers):
            self.fwd.append(GRULayer(d, hidden, rng))
            self.bwd.append(GRULayer(d, hidden, rng))
            d = 2 * hidden
        self.out = Linear(2 * hidden, feature_width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h_f = h_b = None
        for f, b in zip(self.fwd, self.bwd):
            seq_f, h_f = f(x)
            seq_b, h_b = b(x, reverse=True)
            x = ad.concat([seq_f, seq_b], axis=-1)
        return self.out(ad.concat([h_f, h_b], axis=-1))


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos position code for integer timesteps t (B,) -> (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb
