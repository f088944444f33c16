"""Neural building blocks: spiral convolution, mesh pooling, transformer encoder."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Parameter, RowIndex, Tensor
from .errors import AllMaskedError, ShapeError
from .spiral import SpiralTable


class Module:
    """Parameter container. Parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            p.name = name
            yield name, p

    def _walk(self, prefix):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value._walk(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            if state[name].shape != p.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else xavier_uniform(rng, d_in, d_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out))

    def forward(self, x):
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        return ad.layer_norm(x, self.eps) * self.gain + self.bias


_ACTIVATIONS = {"elu": ad.elu, "gelu": ad.gelu, "identity": lambda x: x}


class SpiralConv(Module):
    """``x_i' = act(W . concat(x_j for j in spiral(i)) + b)``; filler slots read zeros."""

    def __init__(
        self,
        spirals: SpiralTable,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        activation: str = "elu",
        zero_init: bool = False,
    ):
        self.spirals = spirals
        self.index = RowIndex(spirals.indices, spirals.n_vertices)
        self.c_in, self.c_out = c_in, c_out
        self.activation = activation
        self.linear = Linear(spirals.length_l * c_in, c_out, rng, zero_init=zero_init)

    def forward(self, x):
        x = ad._as_tensor(x)
        if x.ndim < 2 or x.shape[-2] != self.spirals.n_vertices or x.shape[-1] != self.c_in:
            raise ShapeError(
                f"spiral_conv: expected (..., {self.spirals.n_vertices}, {self.c_in}) features, got {x.shape}"
            )
        gathered = ad.gather_rows(x, self.index)
        flat = ad.reshape(gathered, x.shape[:-2] + (x.shape[-2], self.spirals.length_l * self.c_in))
        return _ACTIVATIONS[self.activation](self.linear(flat))


def spiral_conv(features, layer: SpiralConv):
    return layer(features)


def pool(features, down: sparse.spmatrix) -> Tensor:
    """Fine -> coarse features through the fixed down-sampling matrix."""
    return ad.sparse_matmul(down, features)


def unpool(features, up: sparse.spmatrix) -> Tensor:
    """Coarse -> fine features through the fixed barycentric matrix."""
    return ad.sparse_matmul(up, features)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"model width {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        lead, s = x.shape[:-2], x.shape[-2]
        x = ad.reshape(x, lead + (s, self.heads, self.dim // self.heads))
        n = len(lead)
        return ad.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def attention_weights(self, x, key_mask: np.ndarray | None = None) -> Tensor:
        """Per-head softmax weights, shape ``(..., heads, S, S)``."""
        q, k = self._split(self.q(x)), self._split(self.k(x))
        logits = ad.scale(ad.matmul(q, ad.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(self.dim // self.heads))
        if key_mask is not None:
            s = logits.shape[-1]
            bias = np.zeros((s, s))
            bias[:, np.asarray(key_mask, dtype=bool)] = -np.inf
            logits = logits + bias
        return ad.softmax(logits, axis=-1)

    def forward(self, x, key_mask: np.ndarray | None = None) -> Tensor:
        x = ad._as_tensor(x)
        w = self.attention_weights(x, key_mask)
        ctx = ad.matmul(w, self._split(self.v(x)))
        n = ctx.ndim - 3
        ctx = ad.transpose(ctx, tuple(range(n)) + (n + 1, n, n + 2))
        ctx = ad.reshape(ctx, x.shape)
        return self.out(ctx)


def _swap_last(ndim: int) -> tuple:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


class TransformerBlock(Module):
    """Pre-norm encoder block: ``x + MHA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4, eps: float = 1e-5):
        self.ln1 = LayerNorm(dim, eps)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim, eps)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.fc2(ad.gelu(self.fc1(self.ln2(x))))


class PositionEmbedding(Module):
    def __init__(self, n_slots: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.table = Parameter(rng.normal(0.0, std, size=(n_slots, dim)))

    def forward(self, seq):
        return seq + self.table


class TransformerEncoder(Module):
    """Learnable slot embeddings, ``depth`` pre-norm blocks, optional final LayerNorm."""

    def __init__(
        self,
        depth: int,
        dim: int,
        heads: int,
        n_slots: int,
        rng: np.random.Generator,
        mlp_ratio: int = 4,
        final_norm: bool = True,
        eps: float = 1e-5,
    ):
        self.pos = PositionEmbedding(n_slots, dim, rng)
        self.blocks = [TransformerBlock(dim, heads, rng, mlp_ratio, eps) for _ in range(depth)]
        self.norm = LayerNorm(dim, eps) if final_norm else None

    def forward(self, seq, key_mask: np.ndarray | None = None):
        if key_mask is not None and np.all(key_mask):
            raise AllMaskedError("every slot is masked; attention has no keys")
        x = self.pos(seq)
        for block in self.blocks:
            x = block(x, key_mask)
        return self.norm(x) if self.norm is not None else x


def transformer_encode(seq, key_mask, blocks, pos, final_norm=None):
    """Functional form: ``blocks`` and ``pos`` from an encoder, optional final norm."""
    if key_mask is not None and np.all(key_mask):
        raise AllMaskedError("every slot is masked; attention has no keys")
    x = pos(seq)
    for block in blocks:
        x = block(x, key_mask)
    return final_norm(x) if final_norm is not None else x
