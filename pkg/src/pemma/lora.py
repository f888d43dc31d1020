"""Low-rank adapters on the query/value projections of every transformer block."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .layers import GROUPS, ConfigError, Module, Parameter

PROJECTIONS = ("Q", "V")


class AdapterStateError(RuntimeError):
    pass


class LoraAdapter(Module):
    """Rank-r pair with ``delta = alpha * B @ A``; B starts at zero."""

    def __init__(self, dim, rank, alpha, target, rng):
        if not 1 <= rank < dim:
            raise ConfigError(f"LoRA rank must satisfy 1 <= r < d, got r={rank}, d={dim}")
        self.A = Parameter(rng.normal(0.0, 0.02, size=(rank, dim)), "lora")
        self.B = Parameter(np.zeros((dim, rank)), "lora")
        self._alpha = float(alpha)
        self._target = target

    @property
    def alpha(self):
        return self._alpha

    @property
    def target(self):
        return self._target

    @property
    def rank(self):
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self._alpha * (self.B.data @ self.A.data)


def lora_forward(W, adapter: LoraAdapter, h):
    """Row-token form of ``W h + alpha B A h`` without materialising ``B A``."""
    base = ag.matmul(h, ag.transpose(W, (1, 0)))
    low = ag.matmul(ag.matmul(h, ag.transpose(adapter.A, (1, 0))), ag.transpose(adapter.B, (1, 0)))
    return ag.add(base, ag.mul(low, adapter.alpha))


def merge_weights(W, adapter: LoraAdapter) -> np.ndarray:
    w = W.data if isinstance(W, ag.Tensor) else np.asarray(W)
    return w + adapter.delta().astype(w.dtype)


class AdapterSet:
    """All adapters of a model, keyed by (1-based block index, projection)."""

    def __init__(self, adapters: dict, rank: int, alpha: float):
        self.adapters = adapters
        self.rank = rank
        self.alpha = alpha

    def __len__(self):
        return len(self.adapters)

    def __getitem__(self, key):
        return self.adapters[key]

    def parameters(self):
        return [p for a in self.adapters.values() for p in a.parameters()]

    def state(self) -> dict:
        return {key: (a.A.data.copy(), a.B.data.copy()) for key, a in self.adapters.items()}

    def restore(self, state: dict):
        for key, (A, B) in state.items():
            self.adapters[key].A.data[...] = A
            self.adapters[key].B.data[...] = B


def inject_lora(model, rank: int, alpha: float, rng=None) -> AdapterSet:
    """Attach Q and V adapters to every block of ``model`` (in place)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if getattr(model, "adapters", None) is not None:
        raise AdapterStateError("model already carries LoRA adapters")
    adapters = {}
    for i, block in enumerate(model.blocks, start=1):
        if block.lora_q is not None or block.lora_v is not None:
            raise AdapterStateError(f"block {i} already has adapters")
        block.lora_q = LoraAdapter(block.dim, rank, alpha, (i, "Q"), rng)
        block.lora_v = LoraAdapter(block.dim, rank, alpha, (i, "V"), rng)
        adapters[(i, "Q")] = block.lora_q
        adapters[(i, "V")] = block.lora_v
    model.adapters = AdapterSet(adapters, rank, alpha)
    return model.adapters


def count_params(model, groups=None, trainable_only: bool = False) -> dict:
    """Exact per-group parameter counts from the registry, plus ``total``."""
    wanted = set(GROUPS if groups is None else groups)
    counts = {g: 0 for g in GROUPS if g in wanted}
    for p in model.parameters():
        if p.group in wanted and (p.trainable or not trainable_only):
            counts[p.group] += p.data.size
    counts["total"] = sum(counts.values())
    return counts


def count_trainable(model, groups=None) -> dict:
    return count_params(model, groups, trainable_only=True)


def lora_param_formula(n_blocks: int, rank: int, dim: int) -> int:
    return 4 * n_blocks * rank * dim
