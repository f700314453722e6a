"""Serving path: category-partitioned item indexes and the K+1 cascaded search."""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import numerics as nx
from .config import RetrievalConfig
from .datamodel import Catalog, UserHistory, long_term_window, short_term_window
from .pgin import predict_topk

log = logging.getLogger(__name__)

SHORT = "short"


@dataclass
class Hits:
    item_ids: np.ndarray
    scores: np.ndarray
    exhausted: bool = False  # fewer than n items were available


@dataclass
class IVF:
    centroids: np.ndarray
    lists: list  # positions into the owning index, one array per centroid

    @property
    def nlist(self) -> int:
        return len(self.lists)


def top_n(item_ids, scores, n: int):
    order = np.lexsort((item_ids, -scores))[:n]
    return item_ids[order], scores[order]


def train_ivf(embeddings: np.ndarray, seed: int = 0) -> IVF:
    """k-means coarse quantizer with ``ceil(sqrt(n))`` lists."""
    n = len(embeddings)
    nlist = max(1, math.ceil(math.sqrt(n)))
    data = embeddings.astype(nx.COMPUTE)
    if nlist == 1:
        return IVF(_stored(data.mean(axis=0, keepdims=True)), [np.arange(n)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centroids, labels = kmeans2(data, nlist, iter=20, minit="++", seed=np.random.default_rng(seed))
    return IVF(_stored(centroids), [np.flatnonzero(labels == j) for j in range(nlist)])


def _stored(centroids):
    # round through float32 so a reloaded index probes exactly like the in-memory one
    return centroids.astype(nx.STORAGE).astype(nx.COMPUTE)


@dataclass
class ItemIndex:
    category_id: int | None  # None for the global index
    item_ids: np.ndarray
    embeddings: np.ndarray  # float32, one row per item
    ivf: IVF | None = None

    def __len__(self):
        return len(self.item_ids)

    def search(self, query, n: int, mode: str = "exact", nprobe: int = 0) -> Hits:
        if n < 1:
            raise ValueError("n must be >= 1")
        q = np.asarray(query, dtype=nx.COMPUTE)
        if mode == "exact" or self.ivf is None:
            if mode not in ("exact", "ivf"):
                raise nx.ConfigError(f"unknown search mode {mode!r}")
            pos = np.arange(len(self.item_ids))
        elif mode == "ivf":
            cs = self.ivf.centroids @ q
            probes = np.lexsort((np.arange(len(cs)), -cs))
            if nprobe:
                probes = probes[:nprobe]
            pos = np.concatenate([self.ivf.lists[j] for j in probes])
        else:
            raise nx.ConfigError(f"unknown search mode {mode!r}")
        scores = self.embeddings[pos].astype(nx.COMPUTE) @ q
        ids, sc = top_n(self.item_ids[pos], scores, n)
        return Hits(ids, sc, exhausted=len(ids) < n)


@dataclass
class IndexSet:
    categories: dict  # category_id -> ItemIndex
    global_index: ItemIndex


def build_indexes(model, catalog: Catalog, ivf: bool = True, seed: int = 0) -> IndexSet:
    """Embed every item once with the model's item tower and partition by category."""
    emb = model.item_embeddings()
    parts = {}
    for c in catalog.categories:
        items = catalog.items_in(c)
        if len(items) == 0:
            log.warning("category %d has no items; index omitted", c)
            continue
        e = emb[items]
        parts[c] = ItemIndex(c, items.copy(), e, train_ivf(e, seed) if ivf else None)
    all_items = np.arange(catalog.n_items)
    glob = ItemIndex(None, all_items, emb, train_ivf(emb, seed) if ivf else None)
    return IndexSet(parts, glob)


# ---------------------------------------------------------------------------
# cascaded retrieval
# ---------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    item_ids: np.ndarray
    scores: np.ndarray
    sources: list  # "short" or "long:<category>" per returned item
    n: int
    categories: list = field(default_factory=list)  # predicted top-K
    skipped: list = field(default_factory=list)  # predicted categories without a usable slot
    per_source: dict = field(default_factory=dict)  # source -> Hits before merging

    def to_json(self) -> dict:
        return {"n": self.n, "categories": self.categories, "skipped": self.skipped,
                "items": [{"item_id": int(i), "score": round(float(s), 6), "source": src}
                          for i, s, src in zip(self.item_ids, self.scores, self.sources)]}


def merge_sources(results: list, n_total: int | None) -> tuple:
    """Merge ``[(source, Hits)]``; keep each item's best score (earlier source on ties)."""
    best: dict = {}
    for rank, (source, hits) in enumerate(results):
        for item, score in zip(hits.item_ids.tolist(), hits.scores.tolist()):
            cur = best.get(item)
            if cur is None or score > cur[0] or (score == cur[0] and rank < cur[1]):
                best[item] = (score, rank, source)
    items = np.fromiter(best, dtype=np.int64, count=len(best))
    scores = np.array([best[i][0] for i in items.tolist()])
    order = np.lexsort((items, -scores))
    if n_total is not None:
        order = order[:n_total]
    items, scores = items[order], scores[order]
    return items, scores, [best[i][2] for i in items.tolist()]


def cascaded_retrieve(history: UserHistory, dual, pgin, indexes: IndexSet, cfg: RetrievalConfig,
                      n_total: int | None = None) -> RetrievalResult:
    """Predict top-K categories, search each with its long-term vector, plus one global short search.

    With ``cfg.quota`` every source gets ``ceil(n_total / (K + 1))`` slots and the
    merged list is cut to ``n_total``; without it every source returns
    ``n_total`` items and the merged union is returned whole.
    """
    n_total = cfg.n_total if n_total is None else n_total
    seq = dual.seq
    short = short_term_window(history, seq.short_len)
    if len(short) == 0:
        raise nx.EmptySequenceError(f"user {history.user_id} has no recent events")
    v_short = dual.encode_short(short)

    k = cfg.k if pgin is not None else 0
    categories = predict_topk(pgin.predict(history).y_hat, k) if k else []
    long_hist = long_term_window(history, seq.max_long, seq.short_len, seq.short_in_long)
    slots, subseqs, skipped = [], [], []
    for c in categories:
        sub = long_hist.items[long_hist.categories == c]
        if len(sub) == 0 or c not in indexes.categories:
            skipped.append(c)
            continue
        slots.append(c)
        subseqs.append(sub)

    per_source = n_total if not cfg.quota else math.ceil(n_total / (k + 1))
    jobs = [(SHORT, indexes.global_index, v_short)]
    if slots:
        v_long = dual.encode_long_batch(subseqs, np.repeat(v_short[None], len(slots), axis=0))
        jobs += [(f"long:{c}", indexes.categories[c], v) for c, v in zip(slots, v_long)]

    def run(job):
        source, index, q = job
        return source, index.search(q, per_source, cfg.mode, cfg.nprobe)

    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    items, scores, sources = merge_sources(results, n_total if cfg.quota else None)
    return RetrievalResult(items, scores, sources, n_total, categories, skipped, dict(results))


def check_result(result: RetrievalResult, catalog: Catalog) -> list:
    """Serving-invariant violations of one result (empty when it is valid)."""
    problems = []
    if len(set(result.item_ids.tolist())) != len(result.item_ids):
        problems.append("duplicate item ids after merge")
    for source, hits in result.per_source.items():
        if source.startswith("long:"):
            cat = int(source.split(":", 1)[1])
            bad = catalog.item_category[hits.item_ids] != cat
            if bad.any():
                problems.append(f"{source} returned {int(bad.sum())} items from other categories")
        if np.any(np.diff(hits.scores) > 0):
            problems.append(f"{source} scores not descending")
    for item, source in zip(result.item_ids.tolist(), result.sources):
        if source.startswith("long:") and catalog.item_category[item] != int(source.split(":", 1)[1]):
            problems.append(f"item {item} attributed to {source} has the wrong category")
    return problems


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------


def bench_serving(histories: list, dual, pgin, indexes: IndexSet, base: RetrievalConfig,
                  grid: list, repeats: int = 1) -> list:
    """Latency percentiles and recall against exact search per ``(mode, nprobe, k)`` in ``grid``."""
    rows = []
    exact_cache: dict = {}
    for mode, nprobe, k in grid:
        cfg = RetrievalConfig(k=k, n_total=base.n_total, mode=mode, nprobe=nprobe, quota=base.quota,
                              workers=base.workers)
        if k not in exact_cache:
            ecfg = RetrievalConfig(k=k, n_total=base.n_total, mode="exact", quota=base.quota)
            exact_cache[k] = [set(cascaded_retrieve(h, dual, pgin, indexes, ecfg).item_ids.tolist())
                              for h in histories]
        lat, recalls = [], []
        for _ in range(repeats):
            for h, exact in zip(histories, exact_cache[k]):
                t0 = time.perf_counter()
                res = cascaded_retrieve(h, dual, pgin, indexes, cfg)
                lat.append((time.perf_counter() - t0) * 1e3)
                recalls.append(len(exact & set(res.item_ids.tolist())) / max(len(exact), 1))
        p50, p95, p99 = np.percentile(lat, [50, 95, 99])
        rows.append({"mode": mode, "nprobe": nprobe, "k": k, "n_queries": len(histories),
                     "p50_ms": round(float(p50), 4), "p95_ms": round(float(p95), 4),
                     "p99_ms": round(float(p99), 4), "recall": round(float(np.mean(recalls)), 6)})
    return rows
