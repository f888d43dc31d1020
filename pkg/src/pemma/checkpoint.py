"""Checkpoint directories: ``manifest.json`` + ``params.bin`` (f32 little-endian).

Parameters are stored in manifest order. A checkpoint may hold any subset of
groups, e.g. adapters only.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_NAME = "pemma-checkpoint"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(model, path, groups=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records, blobs = [], []
    for name, p in model.named_parameters():
        if groups is not None and p.group not in groups:
            continue
        records.append({"name": name, "shape": list(p.shape), "group": p.group, "trainable": p.trainable})
        blobs.append(np.ascontiguousarray(p.data, dtype=_LE_F32).tobytes())
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "topology": model.topology,
        "hyperparameters": model.hyperparameters(),
        "groups": sorted({r["group"] for r in records}),
        "parameters": records,
    }
    if extra:
        manifest["extra"] = extra
    (path / "params.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (manifest, {name: array}) after validating the blob length."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointFormatError(f"not a {FORMAT_NAME} directory: {path}")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {manifest.get('version')!r}")
    sizes = [int(np.prod(r["shape"], dtype=np.int64)) for r in manifest["parameters"]]
    expected = 4 * sum(sizes)
    if len(blob) != expected:
        raise CheckpointFormatError(f"params.bin holds {len(blob)} bytes, manifest describes {expected}")
    flat = np.frombuffer(blob, dtype=_LE_F32)
    arrays, offset = {}, 0
    for rec, n in zip(manifest["parameters"], sizes):
        arrays[rec["name"]] = flat[offset:offset + n].reshape(rec["shape"]).astype(np.float32)
        offset += n
    return manifest, arrays


def load_checkpoint(model, path, groups=None, set_trainable: bool = False) -> list[str]:
    """Copy stored parameters into ``model``; parameters absent from the file are untouched."""
    manifest, arrays = read_checkpoint(path)
    params = dict(model.named_parameters())
    records = {r["name"]: r for r in manifest["parameters"]}
    loaded = []
    for name, arr in arrays.items():
        rec = records[name]
        if groups is not None and rec["group"] not in groups:
            continue
        if name not in params:
            raise CheckpointFormatError(f"checkpoint parameter {name!r} does not exist in the model")
        p = params[name]
        if tuple(p.shape) != arr.shape:
            raise CheckpointFormatError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.copy()
        if set_trainable:
            p.trainable = rec["trainable"]
        loaded.append(name)
    return loaded


def group_hash(model, group: str = "base") -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if p.group == group:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=_LE_F32).tobytes())
    return h.hexdigest()


def snapshot(model) -> dict:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def restore(model, snap: dict):
    for name, p in model.named_parameters():
        p.data = snap[name].copy()


def build_from_manifest(manifest: dict, rng=None):
    """Recreate an empty model with the architecture a manifest describes."""
    from .models import LateFusionPair, ModelConfig, SegModel, build_early_fusion, build_pemma

    hp = manifest["hyperparameters"]
    cfg = ModelConfig(**hp["config"])
    topo = manifest["topology"]
    if topo in ("unimodal_ct", "unimodal_pet"):
        return SegModel(cfg, topo, rng)
    if topo == "early_fusion":
        return build_early_fusion(SegModel(cfg, "unimodal_ct", rng), hp.get("init") or "zero", rng)
    if topo == "pemma":
        return build_pemma(SegModel(cfg, "unimodal_ct", rng), hp["rank"], hp["alpha"], hp["beta"], hp["routing"], rng)
    if topo == "late_fusion":
        return LateFusionPair(SegModel(cfg, "unimodal_ct", rng), SegModel(cfg, "unimodal_pet", rng), hp["w_c"])
    raise CheckpointFormatError(f"unknown topology {topo!r}")


def load_model(path):
    manifest, _ = read_checkpoint(path)
    model = build_from_manifest(manifest)
    load_checkpoint(model, path, set_trainable=True)
    return model
