"""Offline evaluation: hit rate, ablation variants and the K sweep."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RetrievalConfig, RunConfig
from .datamodel import BehaviorData
from .dual_interest import DualInterestModel, train
from .pgin import PGIN, train_pgin
from .retrieval import IndexSet, build_indexes, cascaded_retrieve
from .synth import synth_generate

log = logging.getLogger(__name__)

CSV_COLUMNS = ["variant", "k", "cutoff", "hr", "p50_ms", "p95_ms"]


def _half_sequence(run: RunConfig):
    run.sequence.max_long = max(1, run.sequence.max_long // 2)


def _self_attention(run: RunConfig):
    run.model.long_encoder = "self"


def _short_only(run: RunConfig):
    run.train.alpha = 0.0
    run.train.beta = 1.0
    run.train.short_global_negatives = True
    run.retrieval.k = 0


VARIANTS = {
    "ulim": None,
    "ulim-half-sequence": _half_sequence,
    "ulim-self-attention": _self_attention,
    "short-only-baseline": _short_only,
}


@dataclass
class VariantConfig:
    variant: str = "ulim"
    overrides: dict = field(default_factory=dict)  # section -> {key: value}

    def apply(self, run: RunConfig) -> RunConfig:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {list(VARIANTS)}")
        out = copy.deepcopy(run)
        if VARIANTS[self.variant]:
            VARIANTS[self.variant](out)
        for section, values in self.overrides.items():
            for key, value in values.items():
                setattr(getattr(out, section), key, value)
        return out

    @property
    def uses_pgin(self) -> bool:
        return self.variant != "short-only-baseline"


@dataclass
class VariantModels:
    variant: str
    run: RunConfig
    dual: DualInterestModel
    pgin: PGIN | None
    indexes: IndexSet
    traces: dict = field(default_factory=dict)


def train_variant(data: BehaviorData, run: RunConfig, variant: str = "ulim", seed: int | None = None,
                  ivf: bool = False, pgin_cache: dict | None = None) -> VariantModels:
    """Train one variant.

    ``pgin_cache`` lets variants that feed PGIN identical inputs share one
    trained network; it must only be reused for the same data.
    """
    vc = VariantConfig(variant)
    cfg = vc.apply(run)
    if seed is not None:
        cfg.train.seed = cfg.pgin.seed = seed
    dual = train(data, cfg.model, cfg.sequence, cfg.train)
    pg = None
    if vc.uses_pgin:
        key = repr((dataclasses.astuple(cfg.sequence), dataclasses.astuple(cfg.pgin)))
        if pgin_cache is not None and key in pgin_cache:
            pg = pgin_cache[key]
        else:
            pg = train_pgin(data, cfg.sequence, cfg.pgin)
            if pgin_cache is not None:
                pgin_cache[key] = pg
    indexes = build_indexes(dual.model, data.catalog, ivf=ivf, seed=cfg.train.seed)
    return VariantModels(variant, cfg, dual.model, pg.model if pg else None, indexes,
                         {"dual": dual.trace, "pgin": pg.trace if pg else []})


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def hit_rate_at(results: list, n: int) -> float:
    """Fraction of ``(ranked_items, held_out_item)`` pairs with the held-out item in the top ``n``."""
    if not results:
        raise ValueError("empty test set")
    hits = sum(1 for ranked, target in results if target in set(np.asarray(ranked)[:n].tolist()))
    return hits / len(results)


def _longest(results) -> int:
    return max(len(r) for r, _ in results)


def _percentiles(lat):
    if not lat:
        return "", ""
    p50, p95 = np.percentile(lat, [50, 95])
    return round(float(p50), 4), round(float(p95), 4)


def evaluate(models: VariantModels, data: BehaviorData, cutoffs, k: int | None = None,
             mode: str = "exact", nprobe: int = 0, quota: bool = True, timing: bool = False) -> list:
    """HR at each cutoff for one trained variant.

    With quota on, one retrieval of ``max(cutoffs)`` items is made per user and
    each cutoff reads a prefix of the merged ranking.  With quota off every
    source returns ``cutoff`` items and a hit is membership in their union.
    """
    users = sorted(data.test)
    k = models.run.retrieval.k if k is None else k
    if not models.pgin:
        k = 0
    cfg = RetrievalConfig(k=k, n_total=max(cutoffs), mode=mode, nprobe=nprobe, quota=quota)
    rows = []
    runs = [max(cutoffs)] if quota else sorted(cutoffs)
    ranked = {}
    latency = []
    for n in runs:
        out = []
        for u in users:
            t0 = time.perf_counter()
            res = cascaded_retrieve(data.histories[u], models.dual, models.pgin, models.indexes, cfg, n)
            latency.append((time.perf_counter() - t0) * 1e3)
            out.append((res.item_ids, data.test[u].item_id))
        ranked[n] = out
    p50, p95 = _percentiles(latency) if timing else ("", "")
    for c in sorted(cutoffs):
        if quota:
            hr = hit_rate_at(ranked[max(cutoffs)], c)
        else:
            hr = hit_rate_at(ranked[c], _longest(ranked[c]))
        rows.append({"variant": models.variant, "k": k, "cutoff": c, "hr": round(hr, 6),
                     "p50_ms": p50, "p95_ms": p95})
    return rows


def run_experiment(run: RunConfig, variants=None, seeds=None, cutoffs=None, k: int | None = None,
                   timing: bool = False) -> list:
    """Generate data, train and evaluate every variant for every seed.

    The data seed and both model seeds are set to the run seed.
    """
    variants = variants or run.eval.variants
    seeds = run.eval.seeds if seeds is None else seeds
    cutoffs = cutoffs or run.eval.cutoffs
    rows = []
    for seed in seeds:
        data_cfg = copy.deepcopy(run.data)
        data_cfg.seed = seed
        data = synth_generate(data_cfg)
        pgin_cache: dict = {}
        for variant in variants:
            log.info("seed %d: training %s", seed, variant)
            models = train_variant(data, run, variant, seed, pgin_cache=pgin_cache)
            for row in evaluate(models, data, cutoffs, k, timing=timing):
                rows.append({**row, "seed": seed})
    return rows


def sweep_k(models: VariantModels, data: BehaviorData, k_values, cutoff: int, timing: bool = True,
            repeats: int = 3) -> list:
    """HR@cutoff and query latency per K with exact search and quota disabled.

    Every timing repeat visits all K values in turn, so slow drift in machine
    speed spreads evenly over K instead of biasing the later values.
    """
    users = sorted(data.test)
    k_values = list(k_values)
    cfgs = {k: RetrievalConfig(k=k, n_total=cutoff, mode="exact", quota=False) for k in k_values}
    results = {k: [] for k in k_values}
    means = {k: [] for k in k_values}
    lat = {k: [] for k in k_values}
    for rep in range(repeats if timing else 1):
        for k in k_values:
            rep_lat = []
            for u in users:
                t0 = time.perf_counter()
                res = cascaded_retrieve(data.histories[u], models.dual, models.pgin, models.indexes, cfgs[k])
                rep_lat.append((time.perf_counter() - t0) * 1e3)
                if rep == 0:
                    results[k].append((res.item_ids, data.test[u].item_id))
            means[k].append(float(np.mean(rep_lat)))
            lat[k].extend(rep_lat)
    rows = []
    for k in k_values:
        hr = hit_rate_at(results[k], _longest(results[k]))
        p50, p95 = _percentiles(lat[k]) if timing else ("", "")
        rows.append({"variant": models.variant, "k": k, "cutoff": cutoff, "hr": round(hr, 6),
                     "p50_ms": p50, "p95_ms": p95,
                     "mean_ms": round(float(np.median(means[k])), 4) if timing else ""})
    return rows


def write_csv(path, rows: list, columns=None):
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
