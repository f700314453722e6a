"""On-disk formats for trained models and item indexes.

A model directory holds ``header.json`` (kind, configs, seed, tensor table)
and one raw little-endian file per tensor under ``tensors/``.  An index
directory holds ``manifest.json`` plus raw blobs per partition.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import ModelConfig, PginConfig, SequenceConfig, section_from_dict
from .dual_interest import DualInterestModel
from .pgin import PGIN
from .retrieval import IVF, IndexSet, ItemIndex

DTYPES = {"f32": "<f4", "i64": "<i8"}


def _write_tensor(path: Path, arr: np.ndarray, code: str):
    path.write_bytes(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


def _read_tensor(path: Path, shape, code: str) -> np.ndarray:
    arr = np.frombuffer(path.read_bytes(), dtype=DTYPES[code])
    return arr.astype(arr.dtype.newbyteorder("=")).reshape(shape)


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_model(model, out_dir, trace=None):
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = []
    for name in sorted(model.params):
        arr = model.params[name]
        fname = f"tensors/{name}.f32"
        _write_tensor(out / fname, arr, "f32")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "file": fname})
    header = {"kind": model.kind, "config": dataclasses.asdict(model.cfg),
              "sequence": dataclasses.asdict(model.seq), "seed": model.seed, "tensors": tensors}
    if isinstance(model, DualInterestModel):
        _write_tensor(out / "tensors/item_category.i64", model.item_category, "i64")
        header["item_category"] = {"shape": [model.n_items], "dtype": "i64",
                                   "file": "tensors/item_category.i64"}
    else:
        header["n_categories"] = model.n_categories
        header["n_users"] = model.n_users
    _dump_json(out / "header.json", header)
    if trace:
        with open(out / "train_log.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(trace[0]))
            writer.writeheader()
            writer.writerows(trace)


def load_model(model_dir):
    d = Path(model_dir)
    if not (d / "header.json").exists():
        raise FileNotFoundError(f"{d}: no model header.json")
    header = json.loads((d / "header.json").read_text())
    params = {t["name"]: _read_tensor(d / t["file"], t["shape"], t["dtype"]) for t in header["tensors"]}
    seq = section_from_dict(SequenceConfig, header["sequence"])
    if header["kind"] == DualInterestModel.kind:
        cfg = section_from_dict(ModelConfig, header["config"])
        ic = header["item_category"]
        item_category = _read_tensor(d / ic["file"], ic["shape"], ic["dtype"])
        return DualInterestModel(cfg, seq, item_category, params=params, seed=header["seed"])
    if header["kind"] == PGIN.kind:
        cfg = section_from_dict(PginConfig, header["config"])
        return PGIN(cfg, seq, header["n_categories"], header["n_users"], params=params, seed=header["seed"])
    raise ValueError(f"{d}: unknown model kind {header['kind']!r}")


def _save_partition(out: Path, stem: str, index: ItemIndex) -> dict:
    _write_tensor(out / f"{stem}.items.i64", index.item_ids, "i64")
    _write_tensor(out / f"{stem}.emb.f32", index.embeddings, "f32")
    entry = {"category_id": index.category_id, "n_items": len(index), "dim": int(index.embeddings.shape[1]),
             "items": f"{stem}.items.i64", "embeddings": f"{stem}.emb.f32", "ivf": None}
    if index.ivf is not None:
        labels = np.empty(len(index), dtype=np.int64)
        for j, lst in enumerate(index.ivf.lists):
            labels[lst] = j
        _write_tensor(out / f"{stem}.centroids.f32", index.ivf.centroids, "f32")
        _write_tensor(out / f"{stem}.lists.i64", labels, "i64")
        entry["ivf"] = {"nlist": index.ivf.nlist, "centroids": f"{stem}.centroids.f32",
                        "assignments": f"{stem}.lists.i64"}
    return entry


def _load_partition(d: Path, entry: dict) -> ItemIndex:
    n, dim = entry["n_items"], entry["dim"]
    items = _read_tensor(d / entry["items"], [n], "i64")
    emb = _read_tensor(d / entry["embeddings"], [n, dim], "f32")
    ivf = None
    if entry["ivf"]:
        spec = entry["ivf"]
        centroids = _read_tensor(d / spec["centroids"], [spec["nlist"], dim], "f32").astype(np.float64)
        labels = _read_tensor(d / spec["assignments"], [n], "i64")
        ivf = IVF(centroids, [np.flatnonzero(labels == j) for j in range(spec["nlist"])])
    return ItemIndex(entry["category_id"], items, emb, ivf)


def save_indexes(indexes: IndexSet, out_dir, meta=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"meta": meta or {}, "global": _save_partition(out, "global", indexes.global_index),
                "categories": [_save_partition(out, f"cat_{c}", indexes.categories[c])
                               for c in sorted(indexes.categories)]}
    _dump_json(out / "manifest.json", manifest)


def load_indexes(index_dir) -> IndexSet:
    d = Path(index_dir)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"{d}: no index manifest.json")
    manifest = json.loads((d / "manifest.json").read_text())
    parts = {e["category_id"]: _load_partition(d, e) for e in manifest["categories"]}
    return IndexSet(parts, _load_partition(d, manifest["global"]))
