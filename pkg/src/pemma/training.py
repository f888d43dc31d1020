"""Dice+CE loss, AdamW and the best-on-validation training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import restore, save_checkpoint, snapshot
from .data import AugmentConfig, apply_augment, center_crop, sample_augment
from .layers import set_trainable_groups

log = logging.getLogger(__name__)

MODALITIES = ("CP", "C", "P")


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 2
    max_steps: int = 2000  # 18000 in the full-scale protocol
    val_every: int = 100
    seed: int = 0
    trainable_groups: tuple | None = None  # None keeps the model's current flags
    dice_w: float = 1.0
    ce_w: float = 1.0
    modalities: str = "CP"
    crops_per_sample: int = 4
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.trainable_groups is not None:
            self.trainable_groups = tuple(sorted(self.trainable_groups))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.dice_w + self.ce_w > 0:
            raise ValueError("dice_w + ce_w must be positive")
        if self.modalities not in MODALITIES:
            raise ValueError(f"modalities must be one of {MODALITIES}")


def dice_ce_loss(logits, labels, dice_w: float = 1.0, ce_w: float = 1.0, smooth: float = 1e-5):
    """``dice_w * (1 - mean soft Dice over classes 1..) + ce_w * mean cross-entropy``."""
    labels = np.asarray(labels)
    n_cls = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ag.ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= n_cls:
        raise DataError(f"labels must lie in [0, {n_cls - 1}]")
    onehot = (labels[None] == np.arange(n_cls).reshape((-1,) + (1,) * labels.ndim)).astype(logits.data.dtype)
    logp = ag.log_softmax(logits, axis=0)
    ce = ag.mul(ag.sum_(ag.mul(logp, onehot)), -1.0 / labels.size)
    probs = ag.exp(logp)
    fg = ag.take(probs, np.arange(1, n_cls), axis=0)
    g = onehot[1:]
    vox_axes = tuple(range(1, labels.ndim + 1))
    inter = ag.sum_(ag.mul(fg, g), axis=vox_axes)
    psum = ag.sum_(fg, axis=vox_axes)
    num = ag.add(ag.mul(inter, 2.0), smooth)
    den = ag.add(ag.add(psum, g.sum(axis=vox_axes)), smooth)
    mean_dice = ag.mean(ag.div(num, den))
    dice_term = ag.add(ag.neg(mean_dice), 1.0)
    return ag.add(ag.mul(dice_term, dice_w), ag.mul(ce, ce_w))


class AdamW:
    """Adam with decoupled weight decay; state lives only for trainable parameters."""

    def __init__(self, lr=1e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {}

    def step(self, named_params):
        named_params = list(named_params)
        live = {name for name, p in named_params if p.trainable}
        for name in list(self.state):
            if name not in live:
                del self.state[name]
        for name, p in named_params:
            if not p.trainable:
                continue
            if p.grad is None:
                raise TrainingError(f"trainable parameter {name} has no gradient")
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            g = p.grad
            st["t"] += 1
            t = st["t"]
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
            m_hat = st["m"] / (1 - self.beta1**t)
            v_hat = st["v"] / (1 - self.beta2**t)
            update = self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)) + self.lr * self.weight_decay * p.data
            p.data = (p.data - update).astype(p.data.dtype)


def adamw_step(params, state: AdamW):
    state.step(params)


def model_inputs(model, ct, pet, modalities: str = "CP"):
    """Zero-fill whichever modality the setting leaves out."""
    x_c = ct if "C" in modalities else np.zeros_like(ct)
    x_p = pet if "P" in modalities else np.zeros_like(pet)
    return x_c, x_p


class CropStream:
    """Deterministic stream of augmented crops, ``crops_per_sample`` per drawn volume."""

    def __init__(self, samples, size, config: TrainConfig, rng):
        self.samples, self.size, self.config, self.rng = samples, size, config, rng
        self.queue = []

    def _refill(self):
        s = self.samples[int(self.rng.integers(len(self.samples)))]
        aug = self.config.augment
        for _ in range(self.config.crops_per_sample):
            params = sample_augment(self.rng, aug, s.labels.shape)
            ct, pet, lab = apply_augment(params, (s.ct, s.pet, s.labels), aug.crop_size)
            if lab.shape != (self.size,) * 3:
                ct, pet, lab = center_crop((ct, pet, lab), self.size)
            self.queue.append((ct, pet, lab))

    def next_batch(self, n):
        while len(self.queue) < n:
            self._refill()
        batch, self.queue = self.queue[:n], self.queue[n:]
        return batch


@dataclass
class TrainReport:
    evals: list = field(default_factory=list)
    best_step: int = -1
    best_dice: float = -1.0
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1))


def train(model, train_samples, val_samples, config: TrainConfig, out_dir=None, evaluate_fn=None) -> TrainReport:
    """Train ``model`` in place and leave it holding the best-validation weights.

    Validation runs at step 0 and every ``val_every`` steps; the snapshot with
    the highest average Dice wins (ties keep the earlier step).
    """
    from .evaluation import evaluate

    evaluate_fn = evaluate_fn or (lambda m: evaluate(m, val_samples, config.modalities))
    if config.trainable_groups is not None:
        set_trainable_groups(model, config.trainable_groups)
    rng = np.random.default_rng(config.seed)
    stream = CropStream(train_samples, model.config.size, config, rng)
    opt = AdamW(config.lr, config.weight_decay)
    named = list(model.named_parameters())
    report = TrainReport(config=asdict(config))
    best_snap, recent = None, []

    def validate(step):
        nonlocal best_snap
        res = evaluate_fn(model)
        train_loss = float(np.mean(recent)) if recent else None
        report.evals.append({"step": step, "train_loss": train_loss, "val": asdict(res)})
        log.info("step %d loss %s val avg %.4f", step, train_loss, res.avg)
        if res.avg > report.best_dice:
            report.best_step, report.best_dice = step, res.avg
            best_snap = snapshot(model)
        recent.clear()

    validate(0)
    if not any(p.trainable for _, p in named):
        log.info("no trainable parameters; skipping optimisation")
        n_steps = 0
    else:
        n_steps = config.max_steps
    for step in range(1, n_steps + 1):
        batch = stream.next_batch(config.batch_size)
        with ag.fresh_tape():
            model.zero_grad()
            try:
                total = None
                for ct, pet, lab in batch:
                    x_c, x_p = model_inputs(model, ct, pet, config.modalities)
                    loss = dice_ce_loss(model(x_c=x_c, x_p=x_p), lab, config.dice_w, config.ce_w)
                    total = loss if total is None else ag.add(total, loss)
                total = ag.mul(total, 1.0 / len(batch))
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite loss at step {step} (lr={opt.lr}): {exc}") from exc
            value = total.item()
            ag.backward(total)
        opt.step(named)
        recent.append(value)
        if step % config.val_every == 0 or step == config.max_steps:
            validate(step)

    if best_snap is not None:
        restore(model, best_snap)
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = save_checkpoint(model, out_dir / "best", extra={"best_step": report.best_step})
        report.checkpoint = str(ckpt)
        report.to_json(out_dir / "train_report.json")
    return report
