"""Command-line driver for the pretrain -> adapt -> finetune -> report lifecycle.

Usage::

    pemma --out runs/demo [--config cfg.json] [--set train.lr=1e-3] <command> [...]

Everything a command produces lands under ``--out``; later commands read the
checkpoints written by earlier ones.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import AugmentConfig, PhantomSpec, SplitSpec, default_splits, load_dataset, write_dataset, write_volume
from .evaluation import (
    TABLE_COLUMNS,
    DiceResult,
    TaskRecord,
    eval_grid,
    evaluate,
    forgetting_report,
    format_param_report,
    param_report,
    predict_logits,
    predict_probs,
    write_report,
)
from .layers import ConfigError
from .models import LateFusionPair, ModelConfig, SegModel, build_early_fusion, build_pemma
from .training import TrainConfig, train

log = logging.getLogger("pemma")


class UsageError(Exception):
    pass


def _split_defaults():
    out = {}
    for name, s in default_splits().items():
        ph = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(s.phantom).items() if k != "seed"}
        out[name] = {"n_train": s.n_train, "n_val": s.n_val, "phantom": ph}
    return out


DEFAULT_CONFIG = {
    "seed": 0,
    "model": {"depth": 12, "dim": 32, "heads": 4, "patch": 4, "size": 16, "features": 8},
    "data": {"splits": _split_defaults()},
    # toy-scale lr; the full-scale protocol uses 1e-4 (TrainConfig default)
    "train": {"lr": 1e-3, "weight_decay": 1e-5, "batch_size": 2, "val_every": 100, "crops_per_sample": 4,
              "dice_w": 1.0, "ce_w": 1.0, "augment": {"crop_size": 16, "p_crop": 0.5, "p_flip": 0.2, "p_rot90": 0.2}},
    "stages": {"pretrain": {"max_steps": 1000}, "adapt": {"max_steps": 1000}, "finetune": {"max_steps": 300}},
    "adaptation": {"rank": 8, "alpha": None, "beta": 1.0, "routing": "ct_only", "init": "cross_modal", "w_c": 0.5},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, assignment: str):
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def derive_seed(seed: int, tag: str) -> int:
    """Per-stage seed: top-level seed plus a stable hash of the stage tag."""
    return (int(seed) + zlib.crc32(tag.encode())) % (2**31)


class Experiment:
    def __init__(self, cfg: dict, out: Path):
        self.cfg, self.out = cfg, Path(out)
        try:
            self.model_cfg = ModelConfig(**cfg["model"])
        except (TypeError, ConfigError) as exc:
            raise UsageError(f"invalid model config: {exc}") from exc

    # paths
    @property
    def manifest(self):
        return self.out / "data" / "manifest.json"

    def ckpt_dir(self, name):
        return self.out / "checkpoints" / name

    def report_path(self, name):
        return self.out / "reports" / name

    def samples(self, split, subset):
        if not self.manifest.exists():
            raise RuntimeError(f"no dataset at {self.manifest}; run gen-data first")
        return load_dataset(self.manifest, split, subset)

    def train_config(self, stage, tag, **kw) -> TrainConfig:
        t = _merge(self.cfg["train"], self.cfg["stages"].get(stage, {}))
        t.update(kw)
        t["seed"] = derive_seed(self.cfg["seed"], tag)
        try:
            return TrainConfig(**t)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid train config: {exc}") from exc

    def require(self, name):
        d = self.ckpt_dir(name)
        if not (d / "manifest.json").exists():
            raise RuntimeError(f"missing checkpoint {d}; run the earlier stage first")
        return ckpt.load_model(d)

    def _train(self, model, split, config, name):
        report = train(model, self.samples(split, "train"), self.samples(split, "val"), config)
        d = self.ckpt_dir(name)
        ckpt.save_checkpoint(model, d, extra={"best_step": report.best_step, "split": split})
        report.checkpoint = str(d)
        self.report_path("").mkdir(parents=True, exist_ok=True)
        report.to_json(self.report_path(f"train_{name}.json"))
        log.info("%s: best step %d, val avg Dice %.4f", name, report.best_step, report.best_dice)
        return report

    # commands
    def gen_data(self):
        splits = {}
        for name, s in self.cfg["data"]["splits"].items():
            splits[name] = SplitSpec(PhantomSpec(**s["phantom"]), s["n_train"], s["n_val"])
        path = write_dataset(self.manifest.parent, splits, self.cfg["seed"])
        print(f"dataset written: {path}")

    def pretrain(self):
        rng = np.random.default_rng(derive_seed(self.cfg["seed"], "init/pretrain"))
        model = SegModel(self.model_cfg, "unimodal_ct", rng)
        rep = self._train(model, "pretrain", self.train_config("pretrain", "pretrain", modalities="C"), "pretrain_ct")
        print(f"pretrain: best step {rep.best_step}, val avg Dice {rep.best_dice:.4f}")

    def adapt(self, method):
        a = self.cfg["adaptation"]
        base = self.require("pretrain_ct")
        rng = np.random.default_rng(derive_seed(self.cfg["seed"], f"init/adapt/{method}"))
        if method == "pemma":
            model = build_pemma(base, a["rank"], a["alpha"], a["beta"], a["routing"], rng)
            rep = self._train(model, "adapt", self.train_config("adapt", "adapt/pemma"), "adapt_pemma")
        elif method == "early":
            model = build_early_fusion(base, a["init"], rng)
            rep = self._train(model, "adapt", self.train_config("adapt", "adapt/early"), "adapt_early")
        else:
            pet = SegModel(self.model_cfg, "unimodal_pet", rng)
            pair = LateFusionPair(base, pet, a["w_c"])
            self._train_late(pair, "adapt", "CP", "adapt_late")
            print(f"adapt late: checkpoint {self.ckpt_dir('adapt_late')}")
            return
        print(f"adapt {method}: best step {rep.best_step}, val avg Dice {rep.best_dice:.4f}")

    def _train_late(self, pair, split, modalities, name):
        tr, va = self.samples(split, "train"), self.samples(split, "val")
        if "C" in modalities:
            train(pair.ct_model, tr, va, self.train_config(self.stage_of(split), f"{name}/ct", modalities="C"))
        if "P" in modalities:
            train(pair.pet_model, tr, va, self.train_config(self.stage_of(split), f"{name}/pet", modalities="P"))
        ckpt.save_checkpoint(pair, self.ckpt_dir(name))

    @staticmethod
    def stage_of(split):
        return "adapt" if split == "adapt" else "finetune"

    def finetune(self, task, modalities, lora_only, method):
        if lora_only and method != "pemma":
            raise UsageError("--lora-only applies to the pemma method only")
        prev_task = {"task1": None, "task2": "task1"}[task]
        start = f"finetune_{method}_{prev_task}_{modalities}" if prev_task else f"adapt_{method}"
        if prev_task and not (self.ckpt_dir(start) / "manifest.json").exists():
            raise RuntimeError(f"missing checkpoint {self.ckpt_dir(start)}; finetune {prev_task} first")
        model = self.require(start)
        name = f"finetune_{method}_{task}_{modalities}"
        if method == "late":
            self._train_late(model, task, modalities, name)
            print(f"finetune late {task}: checkpoint {self.ckpt_dir(name)}")
            return
        if method == "pemma":
            groups = ("lora",) if lora_only else ("lora", "pet_pe", "pet_sk")
        else:
            groups = ("base",)
        cfg = self.train_config("finetune", name, modalities=modalities, trainable_groups=groups)
        rep = self._train(model, task, cfg, name)
        if method == "pemma":
            adir = self.ckpt_dir(f"adapters_{task}_{modalities}")
            ckpt.save_checkpoint(model, adir, groups={"lora"})
            val = self.samples(task, "val")
            logits = {s.id: predict_logits(model, s.ct, s.pet, modalities) for s in val}
            rec = self.out / "records"
            rec.mkdir(parents=True, exist_ok=True)
            np.savez(rec / f"{task}_{modalities}_logits.npz", **logits)
            dice = evaluate(model, val, modalities)
            (rec / f"{task}_{modalities}.json").write_text(json.dumps(
                {"task": task, "modalities": modalities, "dice": vars(dice), "adapters": str(adir)}, indent=1))
        print(f"finetune {method} {task} ({modalities}, groups={','.join(groups)}): "
              f"best step {rep.best_step}, val avg Dice {rep.best_dice:.4f}")

    def infer(self, modalities, method, split, checkpoint):
        name = checkpoint or ("pretrain_ct" if method == "ct" else f"adapt_{method}")
        model = self.require(name)
        pred_dir = self.out / "predictions" / f"{name}_{split}_{modalities}"
        pred_dir.mkdir(parents=True, exist_ok=True)
        samples = self.samples(split, "val")
        for s in samples:
            pred = predict_probs(model, s.ct, s.pet, modalities).argmax(axis=0).astype(np.uint8)
            write_volume(pred_dir / f"{s.id}_pred.pvol", pred)
        res = evaluate(model, samples, modalities)
        write_report(self.report_path(f"infer_{name}_{split}_{modalities}.json"),
                     {"checkpoint": name, "split": split, "modalities": modalities, "dice": vars(res)})
        print(f"infer {name} on {split} [{modalities}]: tumor {res.tumor:.4f} lymph {res.lymph:.4f} "
              f"avg {res.avg:.4f}")

    def report(self, kind, modalities):
        if kind == "params":
            self._report_params()
        elif kind == "grid":
            self._report_grid()
        else:
            self._report_forgetting(modalities)

    def _report_params(self):
        a = self.cfg["adaptation"]
        base_path = self.ckpt_dir("pretrain_ct")
        base = ckpt.load_model(base_path) if (base_path / "manifest.json").exists() else \
            SegModel(self.model_cfg, "unimodal_ct", np.random.default_rng(0))
        theta = sum(p.data.size for p in base.parameters())
        models = {}
        for method in ("late", "early", "pemma"):
            d = self.ckpt_dir(f"adapt_{method}")
            if (d / "manifest.json").exists():
                models[method] = ckpt.load_model(d)
            elif method == "late":
                models[method] = LateFusionPair(copy.deepcopy(base), SegModel(self.model_cfg, "unimodal_pet"), a["w_c"])
            elif method == "early":
                models[method] = build_early_fusion(base, a["init"])
            else:
                models[method] = build_pemma(base, a["rank"], a["alpha"], a["beta"], a["routing"])
        rows = param_report(models, theta)
        text = format_param_report(rows, theta, models["pemma"])
        write_report(self.report_path("params.json"), {"theta": theta, "rows": [vars(r) for r in rows]}, text)
        print(text)

    def _report_grid(self):
        models = {}
        for method in ("late", "early", "pemma"):
            models[method] = {}
            for dataset, train_mod in TABLE_COLUMNS:
                name = f"adapt_{method}" if dataset == "adapt" else f"finetune_{method}_{dataset}_{train_mod}"
                d = self.ckpt_dir(name)
                models[method][(dataset, train_mod)] = d if (d / "manifest.json").exists() else None
        datasets = {d: self.samples(d, "val") for d, _ in TABLE_COLUMNS}
        grid = eval_grid(models, datasets)
        text = grid.to_table()
        write_report(self.report_path("grid.json"), grid.to_json(), text)
        print(text)

    def _report_forgetting(self, modalities):
        latest = None
        for task in ("task2", "task1"):
            d = self.ckpt_dir(f"finetune_pemma_{task}_{modalities}")
            if (d / "manifest.json").exists():
                latest = d
                break
        if latest is None:
            raise RuntimeError("no pemma finetune checkpoints; run finetune first")
        model = ckpt.load_model(latest)
        tasks = []
        for task in ("task1", "task2"):
            rec = self.out / "records" / f"{task}_{modalities}.json"
            if not rec.exists():
                continue
            meta = json.loads(rec.read_text())
            val = self.samples(task, "val")
            stored = np.load(self.out / "records" / f"{task}_{modalities}_logits.npz")
            d = meta["dice"]
            tasks.append(TaskRecord(task, val, meta["adapters"], [stored[s.id] for s in val],
                                    DiceResult(d["tumor"], d["lymph"]), modalities))
        rep = forgetting_report(model, tasks)
        lines = [f"{'task':<8}{'at end':>9}{'latest':>9}{'restored':>10}{'drift':>9}{'restore':>9}  logits"]
        for e in rep.entries:
            lines.append(f"{e.task:<8}{e.dice_at_completion['avg']:9.4f}{e.dice_latest['avg']:9.4f}"
                         f"{e.dice_restored['avg']:10.4f}{e.drift_delta:+9.4f}{e.restoration_delta:+9.4f}  "
                         f"{'identical' if e.logits_identical else 'DIFFERENT'}")
        text = "\n".join(lines)
        write_report(self.report_path(f"forgetting_{modalities}.json"), rep.to_json(), text)
        print(text)

    def gradcheck(self):
        from .gradcheck import run_all

        results, seconds = run_all(self.cfg["seed"])
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<32} max rel err {r.max_rel_error:.3e} "
                  f"(tol {r.tol:g}) {r.message}")
        ok = all(r.passed for r in results)
        print(f"gradcheck {'passed' if ok else 'FAILED'} in {seconds:.1f}s")
        return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="pemma", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file (merged over built-in defaults)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. stages.adapt.max_steps=500")
    p.add_argument("--out", default="pemma_out", help="directory for data, checkpoints and reports")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate the synthetic phantom dataset")
    sub.add_parser("pretrain", help="train the uni-modal CT model")
    a = sub.add_parser("adapt", help="multi-modal adaptation stage")
    a.add_argument("--method", choices=("early", "late", "pemma"), required=True)
    f = sub.add_parser("finetune", help="continual-learning stage on task1/task2")
    f.add_argument("--task", choices=("task1", "task2"), required=True)
    f.add_argument("--modalities", choices=("C", "CP"), default="CP")
    f.add_argument("--lora-only", action="store_true")
    f.add_argument("--method", choices=("early", "late", "pemma"), default="pemma")
    i = sub.add_parser("infer", help="segment a validation split")
    i.add_argument("--modalities", choices=("CP", "C", "P"), required=True)
    i.add_argument("--method", choices=("ct", "early", "late", "pemma"), default="pemma")
    i.add_argument("--split", default="adapt")
    i.add_argument("--checkpoint", help="checkpoint name under <out>/checkpoints")
    r = sub.add_parser("report", help="write a report")
    r.add_argument("kind", choices=("grid", "params", "forgetting"))
    r.add_argument("--modalities", choices=("C", "CP"), default="CP", help="finetune chain for forgetting")
    sub.add_parser("gradcheck", help="finite-difference checks of every layer and the full model")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PEMMA_LOG", "error").upper(), format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        exp = Experiment(cfg, Path(args.out))
        cmd = args.command
        if cmd == "gen-data":
            exp.gen_data()
        elif cmd == "pretrain":
            exp.pretrain()
        elif cmd == "adapt":
            exp.adapt(args.method)
        elif cmd == "finetune":
            exp.finetune(args.task, args.modalities, args.lora_only, args.method)
        elif cmd == "infer":
            exp.infer(args.modalities, args.method, args.split, args.checkpoint)
        elif cmd == "report":
            exp.report(args.kind, args.modalities)
        elif cmd == "gradcheck":
            return exp.gradcheck()
    except UsageError as exc:
        print(f"pemma: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic contract
        log.debug("failure", exc_info=True)
        print(f"pemma: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
