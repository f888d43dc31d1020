"""Dice metrics, the train/infer modality grid, parameter accounting and forgetting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import CheckpointFormatError, load_checkpoint, read_checkpoint
from .lora import count_params, count_trainable, lora_param_formula
from .models import LateFusionPair, infer_with_missing, softmax_probs

# Reference values for the 92.58M-parameter UNETR setting.
REFERENCE_PHI = 92.58e6
REFERENCE_RATIOS = {"late": 2.0, "early": 1.0043, "pemma": 0.08}
METHODS = ("late", "early", "pemma")
TABLE_COLUMNS = (
    ("adapt", "CP"),
    ("task1", "C"),
    ("task1", "CP"),
    ("task2", "C"),
    ("task2", "CP"),
)
INFER_MODALITIES = ("CP", "C", "P")


@dataclass
class DiceResult:
    tumor: float
    lymph: float
    avg: float = field(init=False)

    def __post_init__(self):
        self.avg = (self.tumor + self.lymph) / 2


def dice_score(pred, gt, class_id: int) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ag.ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p, g = pred == class_id, gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def _tiles(dims, size):
    if any(d % size for d in dims):
        raise ag.ShapeError(f"volume {dims} is not tileable by {size}")
    for z in range(0, dims[0], size):
        for y in range(0, dims[1], size):
            for x in range(0, dims[2], size):
                yield (slice(None), slice(z, z + size), slice(y, y + size), slice(x, x + size))


def predict_probs(model, ct=None, pet=None, modalities: str = "CP") -> np.ndarray:
    """Class probabilities over a whole volume by non-overlapping model-sized tiles."""
    x_c = ct if "C" in modalities else None
    x_p = pet if "P" in modalities else None
    ref = ct if ct is not None else pet
    size = model.config.size
    out = np.zeros((model.config.n_classes,) + ref.shape[-3:], dtype=np.float32)
    with ag.no_grad():
        for sl in _tiles(ref.shape[-3:], size):
            res = infer_with_missing(model, None if x_c is None else x_c[sl], None if x_p is None else x_p[sl])
            out[sl] = res if isinstance(res, np.ndarray) else softmax_probs(res)
    return out


def predict_logits(model, ct, pet, modalities: str = "CP") -> np.ndarray:
    if isinstance(model, LateFusionPair):
        raise TypeError("late fusion produces probabilities, not logits")
    x_c = ct if "C" in modalities else None
    x_p = pet if "P" in modalities else None
    size = model.config.size
    out = np.zeros((model.config.n_classes,) + ct.shape[-3:], dtype=np.float32)
    with ag.no_grad():
        for sl in _tiles(ct.shape[-3:], size):
            out[sl] = infer_with_missing(model, None if x_c is None else x_c[sl],
                                         None if x_p is None else x_p[sl]).data
    return out


def evaluate(model, samples, modalities: str = "CP") -> DiceResult:
    tumor, lymph = [], []
    for s in samples:
        pred = predict_probs(model, s.ct, s.pet, modalities).argmax(axis=0)
        tumor.append(dice_score(pred, s.labels, 1))
        lymph.append(dice_score(pred, s.labels, 2))
    return DiceResult(float(np.mean(tumor)), float(np.mean(lymph)))


# ---------------------------------------------------------------------------
# modality grid


@dataclass
class EvalGrid:
    cells: dict = field(default_factory=dict)  # (method, dataset, train, infer) -> DiceResult | None

    def row(self, method):
        return {k[1:]: v for k, v in self.cells.items() if k[0] == method}

    def to_json(self) -> dict:
        return {"cells": [{"method": m, "dataset": d, "train": t, "infer": i,
                           "dice": None if v is None else asdict(v)}
                          for (m, d, t, i), v in self.cells.items()]}

    def to_table(self) -> str:
        cols = sorted({k[1:] for k in self.cells}, key=_column_order)
        head1 = "dataset".ljust(16) + "".join(f"{d:>7}" for d, _, _ in cols)
        head2 = "train".ljust(16) + "".join(f"{t:>7}" for _, t, _ in cols)
        head3 = "infer".ljust(16) + "".join(f"{i:>7}" for _, _, i in cols)
        lines = [head1, head2, head3, "-" * len(head1)]
        methods = [m for m in METHODS if any(k[0] == m for k in self.cells)]
        methods += sorted({k[0] for k in self.cells} - set(methods))
        for m in methods:
            for metric in ("tumor", "lymph", "avg"):
                cells = []
                for c in cols:
                    v = self.cells.get((m,) + c)
                    cells.append(f"{'--':>7}" if v is None else f"{getattr(v, metric):7.2f}")
                lines.append(f"{m:<8}{metric:<8}" + "".join(cells))
        return "\n".join(lines)


def _column_order(col):
    d, t, i = col
    key = (d, t)
    pos = TABLE_COLUMNS.index(key) if key in TABLE_COLUMNS else len(TABLE_COLUMNS)
    return (pos, d, t, INFER_MODALITIES.index(i) if i in INFER_MODALITIES else 9)


def eval_grid(models: dict, datasets: dict, infer_modalities=INFER_MODALITIES) -> EvalGrid:
    """Fill every (method, dataset, train modality, infer modality) cell.

    ``models[method][(dataset, train_modality)]`` is a model, a checkpoint
    directory, or None. Unavailable models leave their cells as None.
    """
    from .checkpoint import load_model

    grid = EvalGrid()
    for method, by_column in models.items():
        for (dataset, train_mod), model in by_column.items():
            if isinstance(model, (str, Path)):
                try:
                    model = load_model(model)
                except (CheckpointFormatError, OSError, KeyError):
                    model = None
            for infer in infer_modalities:
                key = (method, dataset, train_mod, infer)
                grid.cells[key] = None if model is None else evaluate(model, datasets[dataset], infer)
    return grid


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass
class ParamRow:
    method: str
    total: int
    trainable: int
    ratio: float  # trainable / |Theta| of the uni-modal model at this scale
    reference_ratio: float | None


def param_report(models: dict, theta: int) -> list[ParamRow]:
    rows = []
    for method, model in models.items():
        total = count_params(model)["total"]
        trainable = count_trainable(model)["total"]
        rows.append(ParamRow(method, total, trainable, trainable / theta, REFERENCE_RATIOS.get(method)))
    return rows


def format_param_report(rows: list[ParamRow], theta: int, pemma_model=None) -> str:
    lines = [f"|Theta| (uni-modal CT model, this scale) = {theta}",
             f"reference: Phi = {REFERENCE_PHI / 1e6:.2f}M params (UNETR, 96^3 input)",
             f"{'method':<8}{'total':>10}{'trainable':>11}{'trainable/Theta':>17}{'reference':>11}"]
    for r in rows:
        ref = "--" if r.reference_ratio is None else f"{r.reference_ratio:g} Phi"
        lines.append(f"{r.method:<8}{r.total:>10}{r.trainable:>11}{r.ratio:>17.4f}{ref:>11}")
    if pemma_model is not None:
        c = pemma_model.config
        counts = count_params(pemma_model)
        rank = pemma_model.adapters.rank
        lines.append(
            f"pemma breakdown: pet_pe={counts['pet_pe']} lora={counts['lora']} "
            f"(4*L*r*d = 4*{c.depth}*{rank}*{c.dim} = {lora_param_formula(c.depth, rank, c.dim)}) "
            f"pet_sk={counts['pet_sk']} r={rank} alpha={pemma_model.adapters.alpha:g} beta={pemma_model.beta:g}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# forgetting


@dataclass
class TaskRecord:
    name: str
    val_samples: list
    adapter_path: str
    logits: list  # per-sample logits recorded at task completion
    dice: DiceResult
    modalities: str = "CP"


@dataclass
class ForgettingEntry:
    task: str
    dice_at_completion: dict
    dice_latest: dict
    dice_restored: dict
    drift_delta: float
    restoration_delta: float
    logits_identical: bool


@dataclass
class ForgettingReport:
    entries: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries]}


def forgetting_report(model, tasks: list[TaskRecord]) -> ForgettingReport:
    """Measure drift with the current adapters, then restore each task's adapters.

    The model's adapters are put back to their current state on exit.
    """
    report = ForgettingReport()
    if not tasks:
        return report
    current = model.adapters.state()
    try:
        for task in tasks:
            manifest, _ = read_checkpoint(task.adapter_path)
            if manifest["hyperparameters"]["config"]["dim"] != model.config.dim or \
                    manifest["hyperparameters"].get("rank") != model.adapters.rank:
                raise CheckpointFormatError(f"adapter file {task.adapter_path} does not match the model (r or d)")
            model.adapters.restore(current)
            latest = evaluate(model, task.val_samples, task.modalities)
            load_checkpoint(model, task.adapter_path, groups={"lora"})
            restored = evaluate(model, task.val_samples, task.modalities)
            logits = [predict_logits(model, s.ct, s.pet, task.modalities) for s in task.val_samples]
            same = all(np.array_equal(a, b) for a, b in zip(logits, task.logits))
            report.entries.append(ForgettingEntry(
                task.name, asdict(task.dice), asdict(latest), asdict(restored),
                latest.avg - task.dice.avg, restored.avg - task.dice.avg, same))
    finally:
        model.adapters.restore(current)
    return report


def write_report(path, payload: dict, text: str | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1))
    if text is not None:
        path.with_suffix(".txt").write_text(text + "\n")
