"""Finite-difference checks for every layer type and for the end-to-end PEMMA loss."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check
from .layers import Conv3d, ConvTranspose3d, Linear, PatchEmbed3D, SkipConv, TransformerBlock
from .lora import LoraAdapter
from .models import ModelConfig, SegModel, build_pemma
from .training import dice_ce_loss

LAYER_TOL = 1e-3
END_TO_END_TOL = 5e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    message: str = ""

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def _weighted(rng, fn):
    """Scalarise an op output with a fixed random weighting."""
    cache = {}

    def f():
        out = fn()
        if "w" not in cache:
            cache["w"] = rng.normal(size=out.shape)
        return ag.sum_(ag.mul(out, cache["w"]))

    return f


def _check(results, name, f, x, tol, **kw):
    r = grad_check(f, x, **kw)
    results.append(CheckResult(name, r.max_rel_error, tol, r.message))


def layer_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    t = lambda *s: Tensor(rng.normal(size=s))  # noqa: E731

    a, b = t(3, 4), t(4, 5)
    f = _weighted(rng, lambda: ag.matmul(a, b))
    _check(out, "matmul/a", f, a, LAYER_TOL)
    _check(out, "matmul/b", f, b, LAYER_TOL)

    x = t(4, 6)
    _check(out, "softmax", _weighted(rng, lambda: ag.softmax(x, -1)), x, LAYER_TOL)
    _check(out, "log_softmax", _weighted(rng, lambda: ag.log_softmax(x, 0)), x, LAYER_TOL)
    _check(out, "gelu", _weighted(rng, lambda: ag.gelu(x)), x, LAYER_TOL)
    _check(out, "leaky_relu", _weighted(rng, lambda: ag.leaky_relu(x)), x, LAYER_TOL)
    pos = Tensor(np.abs(rng.normal(size=(4, 6))) + 0.5)
    _check(out, "div", _weighted(rng, lambda: ag.div(x, pos)), pos, LAYER_TOL)

    g, be = t(6), t(6)
    f = _weighted(rng, lambda: ag.layer_norm(x, g, be))
    for name, leaf in (("x", x), ("gamma", g), ("beta", be)):
        _check(out, f"layer_norm/{name}", f, leaf, LAYER_TOL)

    lin = Linear(6, 5, rng)
    f = _weighted(rng, lambda: lin(x))
    _check(out, "linear/x", f, x, LAYER_TOL)
    _check(out, "linear/weight", f, lin.weight, LAYER_TOL)
    _check(out, "linear/bias", f, lin.bias, LAYER_TOL)

    vol = t(2, 6, 6, 6)
    conv = Conv3d(2, 3, 3, rng)
    f = _weighted(rng, lambda: conv(vol))
    for name, leaf in (("x", vol), ("weight", conv.weight), ("bias", conv.bias)):
        _check(out, f"conv3d/{name}", f, leaf, LAYER_TOL, n_coords=40, rng=rng)

    up = ConvTranspose3d(2, 3, rng)
    f = _weighted(rng, lambda: up(vol))
    for name, leaf in (("x", vol), ("weight", up.weight), ("bias", up.bias)):
        _check(out, f"conv_transpose3d/{name}", f, leaf, LAYER_TOL, n_coords=40, rng=rng)

    stem = SkipConv(2, 4, rng)
    f = _weighted(rng, lambda: stem(vol))
    _check(out, "skip_conv/x", f, vol, LAYER_TOL, n_coords=40, rng=rng)
    _check(out, "skip_conv/conv1", f, stem.conv1.weight, LAYER_TOL, n_coords=40, rng=rng)

    pvol = t(1, 8, 8, 8)
    pe = PatchEmbed3D(4, 1, 6, 8, rng)
    f = _weighted(rng, lambda: pe(pvol))
    for name, leaf in (("x", pvol), ("proj", pe.proj), ("pos", pe.pos)):
        _check(out, f"patch_embed/{name}", f, leaf, LAYER_TOL, n_coords=40, rng=rng)

    block = TransformerBlock(8, 2, rng)
    block.lora_q = LoraAdapter(8, 2, 4.0, (1, "Q"), rng)
    block.lora_v = LoraAdapter(8, 2, 4.0, (1, "V"), rng)
    block.lora_q.B.data[...] = rng.normal(0, 0.1, size=block.lora_q.B.shape)
    block.lora_v.B.data[...] = rng.normal(0, 0.1, size=block.lora_v.B.shape)
    tok = t(5, 8)
    f = _weighted(rng, lambda: block(tok))
    for name, leaf in (("x", tok), ("W_q", block.q.weight), ("W_o", block.o.weight), ("fc1", block.fc1.weight),
                       ("lora_q.A", block.lora_q.A), ("lora_v.B", block.lora_v.B)):
        _check(out, f"transformer_block/{name}", f, leaf, LAYER_TOL, n_coords=30, rng=rng)

    logits = t(3, 4, 4, 4)
    labels = rng.integers(0, 3, size=(4, 4, 4))
    _check(out, "dice_ce_loss", lambda: dice_ce_loss(logits, labels), logits, LAYER_TOL)
    return out


def end_to_end_check(seed: int = 0, coords_per_tensor: int = 3, depth: int = 12,
                   eps=(1e-5, 1e-6, 1e-7)) -> list[CheckResult]:
    """Dice+CE of a PEMMA model on one 8^3 sample, against every parameter tensor and the inputs."""
    rng = np.random.default_rng(seed)
    base = SegModel(ModelConfig(depth=depth, size=8), rng=rng)
    model = build_pemma(base, rank=4, rng=rng)
    # move off the zero-initialised start so every path carries gradient
    for a in model.adapters.adapters.values():
        a.B.data[...] = rng.normal(0, 0.05, size=a.B.shape)
    w = model.skip_pet.conv2.weight
    w.data[...] = rng.normal(0, 0.05, size=w.shape)
    x_c = Tensor(rng.normal(size=(1, 8, 8, 8)))
    x_p = Tensor(rng.uniform(size=(1, 8, 8, 8)))
    labels = rng.integers(0, 3, size=(8, 8, 8))

    def f():
        return dice_ce_loss(model(x_c=x_c, x_p=x_p), labels)

    worst = CheckResult("pemma_end_to_end", 0.0, END_TO_END_TOL)
    leaves = [("x_c", x_c), ("x_p", x_p)] + list(model.named_parameters())
    for name, leaf in leaves:
        r = grad_check(f, leaf, eps=eps, n_coords=coords_per_tensor, rng=rng)
        if r.max_rel_error >= worst.max_rel_error:
            worst = CheckResult("pemma_end_to_end", float(r.max_rel_error), END_TO_END_TOL, f"worst at {name}{r.worst_index}")
    return [worst]


def run_all(seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = layer_checks(seed) + end_to_end_check(seed)
    return results, time.perf_counter() - start

