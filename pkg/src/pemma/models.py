"""Uni-modal, early-fusion, late-fusion and PEMMA segmentation models."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import (
    ConfigError,
    Module,
    PatchEmbed3D,
    SkipConv,
    TransformerBlock,
    UNETRDecoder,
    _uniform,
    set_trainable_groups,
)
from .lora import AdapterStateError, inject_lora

TOPOLOGIES = ("unimodal_ct", "unimodal_pet", "early_fusion", "pemma")
ROUTINGS = ("ct_only", "pet_only", "mix")
INIT_STRATEGIES = ("random", "zero", "cross_modal")
PEMMA_TRAINABLE = frozenset({"pet_pe", "lora", "pet_sk"})


class InputError(ValueError):
    pass


@dataclass
class ModelConfig:
    depth: int = 12
    dim: int = 32
    heads: int = 4
    patch: int = 4
    size: int = 16
    features: int = 8
    n_classes: int = 3

    def __post_init__(self):
        if self.patch != 4:
            raise ConfigError("the decoder upsamples twice, so patch size must be 4")
        if self.size % self.patch:
            raise ConfigError(f"input side {self.size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def grid(self):
        return self.size // self.patch

    @property
    def n_tokens(self):
        return self.grid**3

    @property
    def tap_blocks(self):
        """1-based block indices feeding the decoder: L/4, L/2, 3L/4, L."""
        return [max(1, math.ceil(self.depth * k / 4)) for k in (1, 2, 3, 4)]


def route_tokens(tokens, strategy: str):
    """Pick N of 2N encoder tokens for the decoder."""
    m = tokens.shape[0]
    if m % 2:
        raise ag.ShapeError(f"token routing needs an even token count, got {m}")
    n = m // 2
    if strategy == "ct_only":
        idx = np.arange(n)
    elif strategy == "pet_only":
        idx = np.arange(n, 2 * n)
    elif strategy == "mix":
        idx = np.where(np.arange(n) % 2 == 0, np.arange(n), n + np.arange(n))
    else:
        raise ConfigError(f"unknown routing strategy {strategy!r}")
    return ag.take(tokens, idx, axis=0)


def combine_skips(z_c, z_p, beta: float):
    if z_c.shape != z_p.shape:
        raise ag.ShapeError(f"skip outputs differ in shape: {z_c.shape} vs {z_p.shape}")
    return ag.add(z_c, ag.mul(z_p, float(beta)))


def late_fusion_combine(m_c, m_p, w_c: float) -> np.ndarray:
    """Convex blend of two per-voxel probability fields."""
    if not 0.0 <= w_c <= 1.0:
        raise ConfigError(f"w_c must lie in [0, 1], got {w_c}")
    m_c, m_p = np.asarray(m_c), np.asarray(m_p)
    if m_c.shape != m_p.shape:
        raise ag.ShapeError(f"probability fields differ in shape: {m_c.shape} vs {m_p.shape}")
    w = m_c.dtype.type(w_c)
    return w * m_c + (m_c.dtype.type(1) - w) * m_p


def _vol(x):
    if x is None:
        return None
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 3:
        t = ag.reshape(t, (1,) + t.shape)
    return t


class SegModel(Module):
    def __init__(self, config: ModelConfig, topology: str = "unimodal_ct", rng=None, in_channels: int = 1):
        if topology not in ("unimodal_ct", "unimodal_pet"):
            raise ConfigError("build fused topologies with build_early_fusion / build_pemma")
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self._config = c
        self._topology = topology
        self.pe = PatchEmbed3D(c.patch, in_channels, c.dim, c.n_tokens, rng)
        self.pe_pet = None
        self.blocks = [TransformerBlock(c.dim, c.heads, rng) for _ in range(c.depth)]
        self.decoder = UNETRDecoder(c.dim, c.features, rng, c.n_classes)
        self.skip = SkipConv(in_channels, c.features, rng)
        self.skip_pet = None
        self._routing = "ct_only"
        self._beta = 1.0
        self._adapters = None
        self._init = None
        self._trace = {}

    config = property(lambda self: self._config)
    topology = property(lambda self: self._topology)
    trace = property(lambda self: self._trace)

    @property
    def adapters(self):
        return self._adapters

    @adapters.setter
    def adapters(self, value):
        self._adapters = value

    @property
    def routing(self):
        return self._routing

    @routing.setter
    def routing(self, value):
        if value not in ROUTINGS:
            raise ConfigError(f"unknown routing strategy {value!r}")
        self._routing = value

    @property
    def beta(self):
        return self._beta

    @beta.setter
    def beta(self, value):
        self._beta = float(value)

    def hyperparameters(self) -> dict:
        hp = {"config": asdict(self._config), "topology": self._topology}
        if self._topology == "pemma":
            hp.update(rank=self._adapters.rank, alpha=self._adapters.alpha, beta=self._beta, routing=self._routing)
        if self._topology == "early_fusion":
            hp["init"] = self._init
        return hp

    def _encode(self, tokens):
        taps_at = self._config.tap_blocks
        block_tokens, taps = [], []
        for i, block in enumerate(self.blocks, start=1):
            block_tokens.append(tokens.shape[0])
            tokens = block(tokens)
            for _ in range(taps_at.count(i)):
                taps.append(tokens)
        return taps, block_tokens

    def _decode(self, taps, skip):
        self._trace["tap_tokens"] = [t.shape[0] for t in taps]
        return self.decoder(taps, skip, self._config.grid)

    def forward(self, x_c=None, x_p=None) -> Tensor:
        """Class logits of shape (n_classes, D, D, D)."""
        x_c, x_p = _vol(x_c), _vol(x_p)
        topo = self._topology
        if topo == "pemma":
            return self.forward_pemma(x_c, x_p)
        if topo == "unimodal_ct":
            x = x_c
        elif topo == "unimodal_pet":
            x = x_p
        else:
            if x_c is None or x_p is None:
                raise InputError("early fusion needs both channels (zero-fill a missing one)")
            if x_c.shape != x_p.shape:
                raise ag.ShapeError(f"CT {x_c.shape} and PET {x_p.shape} differ in shape")
            x = ag.concat([x_c, x_p], axis=0)
        if x is None:
            raise InputError(f"{topo} model received no input volume")
        taps, block_tokens = self._encode(self.pe(x))
        self._trace = {"block_tokens": block_tokens}
        return self._decode(taps, self.skip(x))

    __call__ = forward

    def forward_pemma(self, x_c, x_p) -> Tensor:
        x_c, x_p = _vol(x_c), _vol(x_p)
        if x_c is None or x_p is None:
            raise InputError("forward_pemma needs both volumes (use infer_with_missing)")
        if x_c.shape != x_p.shape:
            raise ag.ShapeError(f"CT {x_c.shape} and PET {x_p.shape} differ in shape")
        t_c = self.pe(x_c)
        t_p = self.pe_pet(x_p, pos=self.pe.pos)
        taps, block_tokens = self._encode(ag.concat([t_c, t_p], axis=0))
        self._trace = {"block_tokens": block_tokens}
        routed = [route_tokens(t, self._routing) for t in taps]
        z = combine_skips(self.skip(x_c), self.skip_pet(x_p), self._beta)
        return self._decode(routed, z)


class LateFusionPair(Module):
    """Two independent uni-modal models blended on probabilities."""

    def __init__(self, ct_model: SegModel, pet_model: SegModel, w_c: float = 0.5):
        if ct_model.topology != "unimodal_ct" or pet_model.topology != "unimodal_pet":
            raise ConfigError("late fusion pairs a unimodal_ct with a unimodal_pet model")
        if not 0.0 <= w_c <= 1.0:
            raise ConfigError(f"w_c must lie in [0, 1], got {w_c}")
        self.ct_model = ct_model
        self.pet_model = pet_model
        self._w_c = float(w_c)

    topology = property(lambda self: "late_fusion")
    config = property(lambda self: self.ct_model.config)

    @property
    def w_c(self):
        return self._w_c

    def hyperparameters(self) -> dict:
        return {"config": asdict(self.config), "topology": "late_fusion", "w_c": self._w_c}

    def predict_proba(self, x_c=None, x_p=None) -> np.ndarray:
        """Blend per-branch softmax; a missing branch contributes uniform probabilities."""
        if x_c is None and x_p is None:
            raise InputError("at least one modality is required")
        n = self.config.n_classes
        shape = (n,) + np.shape(x_c if x_c is not None else x_p)[-3:]
        uniform = np.full(shape, 1.0 / n, dtype=ag.DEFAULT_DTYPE)
        with ag.no_grad():
            m_c = softmax_probs(self.ct_model(x_c=x_c)) if x_c is not None else uniform
            m_p = softmax_probs(self.pet_model(x_p=x_p)) if x_p is not None else uniform
        out = late_fusion_combine(m_c, m_p, self._w_c)
        return out / out.sum(axis=0, keepdims=True)


def softmax_probs(logits) -> np.ndarray:
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def build_early_fusion(pretrained_ct: SegModel, init: str = "cross_modal", rng=None) -> SegModel:
    """Two-channel copy of a CT model; every parameter ends up trainable."""
    if init not in INIT_STRATEGIES:
        raise ConfigError(f"unknown init strategy {init!r}")
    if pretrained_ct.topology != "unimodal_ct" or pretrained_ct.pe.channels != 1:
        raise ConfigError("early fusion starts from a single-channel unimodal_ct model")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = copy.deepcopy(pretrained_ct)
    c = model.config
    old_pe, old_skip = model.pe, model.skip.conv1

    pe = PatchEmbed3D(c.patch, 2, c.dim, c.n_tokens, rng)
    p3 = c.patch**3
    ct_rows = old_pe.proj.data
    pe.proj.data[:p3] = ct_rows
    pe.proj.data[p3:] = _new_slice(init, ct_rows, rng, fan_in=2 * p3)
    pe.bias.data[...] = old_pe.bias.data
    pe.pos.data[...] = old_pe.pos.data
    model.pe = pe

    conv1 = copy.deepcopy(old_skip)
    ct_w = old_skip.weight.data
    w = np.empty((ct_w.shape[0], 2) + ct_w.shape[2:], dtype=ct_w.dtype)
    w[:, :1] = ct_w
    w[:, 1:] = _new_slice(init, ct_w, rng, fan_in=2 * 27)
    conv1.weight.data = w
    model.skip.conv1 = conv1

    model._topology = "early_fusion"
    model._init = init
    for p in model.parameters():
        p.group = "base"
        p.trainable = True
    return model


def _new_slice(init, like, rng, fan_in):
    if init == "zero":
        return np.zeros_like(like)
    if init == "cross_modal":
        return like.copy()
    return _uniform(rng, fan_in, like.shape).astype(like.dtype)


def build_pemma(pretrained_ct: SegModel, rank: int = 8, alpha: float | None = None, beta: float = 1.0,
                routing: str = "ct_only", rng=None) -> SegModel:
    """Add a PET token stream, LoRA on Q/V and a parallel PET skip; freeze the base."""
    if pretrained_ct.topology != "unimodal_ct" or pretrained_ct.adapters is not None:
        raise AdapterStateError("build_pemma expects an unadapted unimodal_ct model")
    rng = rng if rng is not None else np.random.default_rng(0)
    alpha = 2.0 * rank if alpha is None else alpha
    model = copy.deepcopy(pretrained_ct)
    c = model.config
    for p in model.parameters():
        p.group = "base"
    model.pe_pet = PatchEmbed3D(c.patch, 1, c.dim, c.n_tokens, rng, group="pet_pe", with_pos=False)
    model.skip_pet = SkipConv(1, c.features, rng, group="pet_sk", zero_last=True)
    inject_lora(model, rank, alpha, rng)
    model._topology = "pemma"
    model.routing = routing
    model.beta = beta
    set_trainable_groups(model, PEMMA_TRAINABLE)
    return model


def infer_with_missing(model, x_c=None, x_p=None):
    """Forward with an absent modality replaced by zeros.

    SegModels return logits; a LateFusionPair returns blended probabilities
    (its own missing-branch rule applies).
    """
    if x_c is None and x_p is None:
        raise InputError("at least one modality is required")
    if isinstance(model, LateFusionPair):
        return model.predict_proba(x_c, x_p)
    ref = x_c if x_c is not None else x_p
    ref = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    zeros = np.zeros_like(ref)
    return model(x_c=zeros if x_c is None else x_c, x_p=zeros if x_p is None else x_p)


def predict_proba(model, x_c=None, x_p=None) -> np.ndarray:
    """Per-voxel class probabilities for any model kind, without recording a tape."""
    with ag.no_grad():
        out = infer_with_missing(model, x_c, x_p)
    return out if isinstance(out, np.ndarray) else softmax_probs(out)
