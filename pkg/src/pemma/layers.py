"""Layers shared by every model topology, plus the grouped parameter registry."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

GROUPS = ("base", "pet_pe", "lora", "pet_sk")


class ConfigError(ValueError):
    pass


class Parameter(Tensor):
    """A leaf tensor tagged with a freezing/checkpoint group.

    ``trainable`` is an alias of ``requires_grad``; freezing drops any
    gradient buffer so frozen tensors never carry gradient storage.
    """

    def __init__(self, data, group: str = "base", trainable: bool = True):
        if group not in GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}")
        super().__init__(np.array(data, dtype=ag.DEFAULT_DTYPE), requires_grad=trainable)
        self.group = group
        self.name = ""

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, value):
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group}, trainable={self.trainable})"


class Module:
    """Attribute-walking container; parameter order is attribute insertion order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def set_group(self, group: str):
        for p in self.parameters():
            p.group = group
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def set_trainable_groups(model: Module, trainable_groups) -> None:
    groups = set(trainable_groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise ConfigError(f"unknown parameter group(s): {sorted(unknown)}")
    for p in model.parameters():
        p.trainable = p.group in groups


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ W.T + b`` with ``W`` stored (out, in)."""

    def __init__(self, d_in, d_out, rng, group="base"):
        self.weight = Parameter(_uniform(rng, d_in, (d_out, d_in)), group)
        self.bias = Parameter(np.zeros(d_out), group)

    def __call__(self, x):
        return ag.add(ag.matmul(x, ag.transpose(self.weight, (1, 0))), self.bias)


class LayerNorm(Module):
    def __init__(self, d, group="base"):
        self.gamma = Parameter(np.ones(d), group)
        self.beta = Parameter(np.zeros(d), group)

    def __call__(self, x):
        return ag.layer_norm(x, self.gamma, self.beta)


class PatchEmbed3D(Module):
    """Cubic-patch tokenizer for a (C, D, D, D) volume.

    Patch index runs z-major, then y, then x. Within a patch the flattened
    vector is channel-major, so rows ``c*p**3:(c+1)*p**3`` of the projection
    belong to input channel ``c``. ``pos`` may be None, in which case the
    caller supplies a shared positional table.
    """

    def __init__(self, patch, channels, dim, n_tokens, rng, group="base", with_pos=True):
        self.patch = patch
        self.channels = channels
        fan_in = channels * patch**3
        self.proj = Parameter(_uniform(rng, fan_in, (fan_in, dim)), group)
        self.bias = Parameter(np.zeros(dim), group)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(n_tokens, dim)), group) if with_pos else None

    def patchify(self, x):
        c, dz, dy, dx = x.shape
        p = self.patch
        if c != self.channels:
            raise ag.ShapeError(f"patch embed expects {self.channels} channels, got {c}")
        if dz % p or dy % p or dx % p:
            raise ag.ShapeError(f"volume {x.shape[1:]} not divisible by patch size {p}")
        gz, gy, gx = dz // p, dy // p, dx // p
        x = ag.reshape(x, (c, gz, p, gy, p, gx, p))
        x = ag.transpose(x, (1, 3, 5, 0, 2, 4, 6))
        return ag.reshape(x, (gz * gy * gx, c * p**3))

    def __call__(self, x, pos=None):
        pos = self.pos if pos is None else pos
        tokens = ag.add(ag.matmul(self.patchify(x), self.proj), self.bias)
        if pos.shape != tokens.shape:
            raise ag.ShapeError(f"positional table {pos.shape} does not match tokens {tokens.shape}")
        return ag.add(tokens, pos)


class TransformerBlock(Module):
    """Pre-norm MHSA + GELU MLP. Works for any token count M."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)
        self.lora_q = None
        self.lora_v = None

    def _proj(self, lin, adapter, h):
        if adapter is None:
            return lin(h)
        from .lora import lora_forward

        return ag.add(lora_forward(lin.weight, adapter, h), lin.bias)

    def attention(self, h):
        m, d = h.shape
        nh, dh = self.heads, d // self.heads
        q = self._proj(self.q, self.lora_q, h)
        k = self.k(h)
        v = self._proj(self.v, self.lora_v, h)

        def split(t):
            return ag.transpose(ag.reshape(t, (m, nh, dh)), (1, 0, 2))

        q, k, v = split(q), split(k), split(v)
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (1, 0, 2)), (m, d))
        return self.o(ctx)

    def __call__(self, t):
        t = ag.add(t, self.attention(self.norm1(t)))
        return ag.add(t, self.fc2(ag.gelu(self.fc1(self.norm2(t)))))


class Conv3d(Module):
    def __init__(self, c_in, c_out, k, rng, group="base", zero=False):
        self.padding = k // 2
        shape = (c_out, c_in, k, k, k)
        self.weight = Parameter(np.zeros(shape) if zero else _uniform(rng, c_in * k**3, shape), group)
        self.bias = Parameter(np.zeros(c_out), group)

    def __call__(self, x):
        return ag.conv3d(x, self.weight, self.bias, padding=self.padding)


class ConvTranspose3d(Module):
    """2x upsampling, kernel 2 / stride 2."""

    def __init__(self, c_in, c_out, rng, group="base"):
        self.weight = Parameter(_uniform(rng, c_in * 8, (c_in, c_out, 2, 2, 2)), group)
        self.bias = Parameter(np.zeros(c_out), group)

    def __call__(self, x):
        return ag.conv_transpose3d_2x(x, self.weight, self.bias)


class SkipConv(Module):
    """Input-to-decoder stem: conv3 -> leaky ReLU -> conv3, spatial size kept."""

    def __init__(self, c_in, features, rng, group="base", zero_last=False):
        self.conv1 = Conv3d(c_in, features, 3, rng, group)
        self.conv2 = Conv3d(features, features, 3, rng, group, zero=zero_last)

    def __call__(self, x):
        return self.conv2(ag.leaky_relu(self.conv1(x)))


def tokens_to_grid(tokens, grid):
    n, d = tokens.shape
    if n != grid**3:
        raise ag.ShapeError(f"{n} tokens cannot form a {grid}^3 grid")
    return ag.reshape(ag.transpose(tokens, (1, 0)), (d, grid, grid, grid))


class UNETRDecoder(Module):
    """Decoder for patch size 4: token grid g -> 2g -> 4g (= input side).

    Taps are ordered [L/4, L/2, 3L/4, L]. The deepest two are fused at grid
    g, the L/2 tap joins at 2g, and the L/4 tap joins the skip stem at full
    resolution.
    """

    def __init__(self, dim, features, rng, n_classes=3):
        f = features
        self.deep_conv = Conv3d(2 * dim, 2 * f, 3, rng)
        self.deep_up = ConvTranspose3d(2 * f, 2 * f, rng)
        self.mid_tap = ConvTranspose3d(dim, 2 * f, rng)
        self.mid_conv = Conv3d(4 * f, 2 * f, 3, rng)
        self.mid_up = ConvTranspose3d(2 * f, f, rng)
        self.shallow_tap1 = ConvTranspose3d(dim, f, rng)
        self.shallow_tap2 = ConvTranspose3d(f, f, rng)
        self.out_conv = Conv3d(3 * f, f, 3, rng)
        self.head = Conv3d(f, n_classes, 1, rng)

    def __call__(self, taps, skip, grid):
        t1, t2, t3, t4 = (tokens_to_grid(t, grid) for t in taps)
        x = ag.leaky_relu(self.deep_conv(ag.concat([t4, t3], axis=0)))
        x = self.deep_up(x)
        x = ag.leaky_relu(self.mid_conv(ag.concat([x, self.mid_tap(t2)], axis=0)))
        x = self.mid_up(x)
        e1 = self.shallow_tap2(ag.leaky_relu(self.shallow_tap1(t1)))
        x = ag.leaky_relu(self.out_conv(ag.concat([x, e1, skip], axis=0)))
        return self.head(x)
