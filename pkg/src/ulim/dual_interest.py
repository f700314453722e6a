"""Category-aware dual-interest model.

Short-term interest: MHSA over the recent window, then average pooling.
Long-term interest: target attention over one category-aware subsequence with
the pooled short-term vector as query.  Items go through a small tower over
their item and category embeddings.  Training uses category-homogeneous
batches with shared negatives and the weighted sum of two sampled-softmax
losses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import ModelConfig, SequenceConfig, TrainingConfig
from .datamodel import BehaviorData, BehaviorEvent, Catalog

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# samples and batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    user_id: int
    t: int  # index of the positive event; context is events[:t]
    pos_item: int
    category_id: int
    short: tuple  # (start, stop) event slice
    long_sub: np.ndarray = field(repr=False, compare=False)


@dataclass
class TrainBatch:
    category_id: int
    samples: list
    negatives: np.ndarray
    global_negatives: np.ndarray | None = None

    def validate(self, catalog: Catalog):
        cats = {catalog.category_of(s.pos_item) for s in self.samples}
        neg_cats = set(catalog.item_category[self.negatives].tolist())
        if cats != {self.category_id} or not neg_cats <= {self.category_id}:
            raise TrainingError(f"batch for category {self.category_id} is not category-pure")
        if set(self.negatives.tolist()) & {s.pos_item for s in self.samples}:
            raise TrainingError("negatives overlap the batch positives")


def context_bounds(t: int, seq: SequenceConfig):
    """Short slice and long-window slice of the events visible before position ``t``."""
    short = (max(0, t - seq.short_len), t)
    hi = t if seq.short_in_long else max(0, t - seq.short_len)
    return short, (max(0, hi - seq.max_long), hi)


def build_samples(data: BehaviorData, seq: SequenceConfig, max_per_user: int = 0, seed: int = 0,
                  novel_only: bool = False) -> list:
    """One sample per history position whose category subsequence is non-empty.

    With ``novel_only`` positions whose item already occurred earlier in the
    history are skipped.
    """
    rng = np.random.default_rng([seed, 7])
    out = []
    for u in data.users:
        h = data.histories[u]
        cats = h.categories
        found = []
        seen = {int(h.items[0])} if len(h) else set()
        for t in range(1, len(h)):
            item = int(h.items[t])
            repeat = item in seen
            seen.add(item)
            if novel_only and repeat:
                continue
            short, (lo, hi) = context_bounds(t, seq)
            sub = lo + np.flatnonzero(cats[lo:hi] == cats[t])
            if len(sub):
                found.append(Sample(u, t, int(h.items[t]), int(cats[t]), short, sub))
        if max_per_user and len(found) > max_per_user:
            keep = np.sort(rng.choice(len(found), size=max_per_user, replace=False))
            found = [found[i] for i in keep]
        out.extend(found)
    return out


def subsample_per_user(samples: list, max_per_user: int, rng: np.random.Generator, user_of=None) -> list:
    """At most ``max_per_user`` samples per user, drawn without replacement, order kept."""
    if not max_per_user:
        return list(samples)
    user_of = user_of or (lambda s: s.user_id)
    by_user: dict = {}
    for i, s in enumerate(samples):
        by_user.setdefault(user_of(s), []).append(i)
    keep = []
    for idx in by_user.values():
        if len(idx) > max_per_user:
            idx = [idx[j] for j in np.sort(rng.choice(len(idx), size=max_per_user, replace=False))]
        keep.extend(idx)
    return [samples[i] for i in sorted(keep)]


def build_batches(samples: list, catalog: Catalog, cfg: TrainingConfig, seed: int, epoch: int = 0) -> list:
    """Group samples by positive category, chunk, attach shared same-category negatives."""
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng([seed, epoch, 11])
    by_cat: dict = {}
    for i, s in enumerate(samples):
        by_cat.setdefault(s.category_id, []).append(i)
    batches = []
    warned = set()
    for cat in sorted(by_cat):
        idx = np.array(by_cat[cat])
        idx = idx[rng.permutation(len(idx))]
        items = catalog.items_in(cat)
        for start in range(0, len(idx), cfg.batch_size):
            chunk = [samples[i] for i in idx[start:start + cfg.batch_size]]
            positives = np.array(sorted({s.pos_item for s in chunk}))
            pool = np.setdiff1d(items, positives)
            n_neg = min(cfg.n_negatives, len(pool))
            if n_neg < cfg.n_negatives and cat not in warned:
                warned.add(cat)
                log.debug("category %d has only %d candidate negatives; using %d instead of %d",
                          cat, len(pool), n_neg, cfg.n_negatives)
            if n_neg == 0:
                continue
            negs = np.sort(rng.choice(pool, size=n_neg, replace=False))
            gneg = None
            if cfg.short_global_negatives:
                gpool = np.setdiff1d(np.arange(catalog.n_items), positives)
                gneg = np.sort(rng.choice(gpool, size=min(cfg.n_negatives, len(gpool)), replace=False))
            batches.append(TrainBatch(cat, chunk, negs, gneg))
    if warned and epoch == 0:
        log.info("%d categories have fewer than %d candidate negatives; batches use all available",
                 len(warned), cfg.n_negatives)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _pad(rows, fill=0):
    n = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), max(n, 1)), fill, dtype=np.int64)
    mask = np.zeros(out.shape, dtype=bool)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        mask[i, :len(r)] = True
    return out, mask


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class DualInterestModel:
    kind = "dual_interest"

    def __init__(self, cfg: ModelConfig, seq: SequenceConfig, item_category, params=None, seed: int = 0):
        self.cfg = cfg
        self.seq = seq
        self.item_category = np.asarray(item_category, dtype=np.int64)
        self.n_items = len(self.item_category)
        self.n_categories = int(self.item_category.max()) + 1
        self.seed = seed
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict:
        d = self.cfg.d
        p = {
            "item_emb": nx.init_uniform(rng, (self.n_items, d), d),
            "cat_emb": nx.init_uniform(rng, (self.n_categories, d), d),
        }
        nx.init_mhsa(p, rng, "short.mhsa", d)
        if self.cfg.positional:
            p["short.pos"] = nx.init_uniform(rng, (self.seq.short_len, d), d)
        if self.cfg.long_encoder == "target":
            nx.init_target_attention(p, rng, "long.ta", d)
        else:
            nx.init_mhsa(p, rng, "long.mhsa", d)
        nx.init_mlp(p, rng, "tower", [2 * d, self.cfg.tower_hidden, d])
        return p

    # -- building blocks on a tape -------------------------------------------

    def _events(self, tape, items, cats):
        P = self.params
        e = tape.apply(nx.Gather, tape.param("item_emb", P["item_emb"]), items)
        c = tape.apply(nx.Gather, tape.param("cat_emb", P["cat_emb"]), cats)
        return tape.apply(nx.Add, e, c)

    def _tower(self, tape, items):
        P = self.params
        e = tape.apply(nx.Gather, tape.param("item_emb", P["item_emb"]), items)
        c = tape.apply(nx.Gather, tape.param("cat_emb", P["cat_emb"]), self.item_category[items])
        return nx.mlp(tape, tape.apply(nx.Concat, e, c), P, "tower", 2)

    def _short(self, tape, items, cats, mask):
        x = self._events(tape, items, cats)
        if self.cfg.positional:
            lengths = mask.sum(axis=1, keepdims=True)
            recency = np.clip(lengths - 1 - np.arange(mask.shape[1]), 0, self.seq.short_len - 1)
            pos = tape.apply(nx.Gather, tape.param("short.pos", self.params["short.pos"]), recency)
            x = tape.apply(nx.Add, x, pos)
        h = nx.mhsa(tape, x, mask, self.params, "short.mhsa", self.cfg.heads)
        return tape.apply(nx.MeanPool, h, mask)

    def _long(self, tape, v_short, items, cats, mask):
        x = self._events(tape, items, cats)
        if self.cfg.long_encoder == "target":
            return nx.target_attention(tape, v_short, x, x, mask, self.params, "long.ta")
        h = nx.mhsa(tape, x, mask, self.params, "long.mhsa", self.cfg.heads)
        return tape.apply(nx.MeanPool, h, mask)

    # -- batch interface -----------------------------------------------------

    def collate(self, samples: list, histories: dict) -> dict:
        short_items, long_items = [], []
        for s in samples:
            h = histories[s.user_id]
            short_items.append(h.items[s.short[0]:s.short[1]])
            long_items.append(h.items[s.long_sub])
        si, sm = _pad(short_items)
        li, lm = _pad(long_items)
        return {"short_items": si, "short_mask": sm, "long_items": li, "long_mask": lm,
                "pos": np.array([s.pos_item for s in samples], dtype=np.int64)}

    def forward_loss(self, tape, arrays: dict, negatives, cfg: TrainingConfig, global_negatives=None):
        """Composite loss ``alpha * L_long + beta * L_short`` as a tape variable, plus its parts."""
        ic = self.item_category
        v_short = self._short(tape, arrays["short_items"], ic[arrays["short_items"]], arrays["short_mask"])
        v_long = self._long(tape, v_short, arrays["long_items"], ic[arrays["long_items"]], arrays["long_mask"])
        e_pos = self._tower(tape, arrays["pos"])
        e_neg = self._tower(tape, np.asarray(negatives))
        l_long = tape.apply(nx.SampledSoftmax, v_long, e_pos, e_neg)
        e_sneg = e_neg if global_negatives is None else self._tower(tape, np.asarray(global_negatives))
        l_short = tape.apply(nx.SampledSoftmax, v_short, e_pos, e_sneg)
        loss = tape.apply(nx.Combine, l_long, l_short, coefs=(cfg.alpha, cfg.beta))
        return loss, float(l_long.value), float(l_short.value)

    def batch_loss(self, batch: TrainBatch, histories: dict, cfg: TrainingConfig, tape=None):
        tape = tape or nx.Tape(record=False)
        arrays = self.collate(batch.samples, histories)
        return self.forward_loss(tape, arrays, batch.negatives, cfg, batch.global_negatives)

    # -- single-example interface ---------------------------------------------

    def item_embeddings(self, items=None) -> np.ndarray:
        items = np.arange(self.n_items) if items is None else np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise KeyError(f"unknown item id in {items[(items < 0) | (items >= self.n_items)][:5].tolist()}")
        return self._tower(nx.Tape(record=False), items).value.astype(nx.STORAGE)

    def item_embed(self, item_id: int) -> np.ndarray:
        return self.item_embeddings([item_id])[0]

    def encode_short(self, window) -> np.ndarray:
        items = _item_ids(window)
        if items.size == 0:
            raise nx.EmptySequenceError("short-term window is empty")
        return self.encode_short_batch([items])[0]

    def encode_short_batch(self, windows: list) -> np.ndarray:
        si, sm = _pad(windows)
        return self._short(nx.Tape(record=False), si, self.item_category[si], sm).value

    def encode_long(self, subseq, v_short) -> np.ndarray:
        items = _item_ids(subseq)
        if items.size == 0:
            raise nx.EmptySequenceError("category subsequence is empty")
        return self.encode_long_batch([items], np.asarray(v_short)[None])[0]

    def encode_long_batch(self, subseqs: list, v_short) -> np.ndarray:
        li, lm = _pad(subseqs)
        tape = nx.Tape(record=False)
        return self._long(tape, nx.Var(np.asarray(v_short, dtype=nx.COMPUTE)), li,
                          self.item_category[li], lm).value

    def sampled_softmax_loss(self, v, pos: int, negs) -> float:
        negs = np.asarray(sorted(negs), dtype=np.int64)
        if negs.size == 0:
            raise ValueError("sampled softmax needs at least one negative")
        if pos in set(negs.tolist()):
            raise ValueError(f"positive item {pos} is also a negative")
        e = self.item_embeddings(np.concatenate([[pos], negs])).astype(nx.COMPUTE)
        loss, _ = nx.SampledSoftmax.forward(np.asarray(v, dtype=nx.COMPUTE)[None], e[:1], e[1:])
        return float(loss)

    def composite_loss(self, batch: TrainBatch, histories: dict, cfg: TrainingConfig) -> float:
        loss, _, _ = self.batch_loss(batch, histories, cfg)
        return float(loss.value)


def _item_ids(seq) -> np.ndarray:
    """Item ids of a UserHistory, a list of events, or a plain id sequence."""
    if hasattr(seq, "items"):
        return seq.items
    seq = list(seq)
    if seq and isinstance(seq[0], BehaviorEvent):
        return np.array([e.item_id for e in seq], dtype=np.int64)
    return np.asarray(seq, dtype=np.int64)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DualInterestModel
    trace: list  # per-epoch dicts: epoch, loss, loss_long, loss_short


def train(data: BehaviorData, model_cfg: ModelConfig, seq: SequenceConfig, cfg: TrainingConfig,
          samples=None) -> TrainResult:
    """Adam on the composite loss.

    Unless ``samples`` is given, every epoch draws a fresh subset of at most
    ``max_samples_per_user`` positions per user, so the cap limits cost per
    epoch without pinning the model to one fixed subset.
    """
    cfg.validate()
    model = DualInterestModel(model_cfg, seq, data.catalog.item_category, seed=cfg.seed)
    pool = samples if samples is not None else build_samples(data, seq, 0, cfg.seed, cfg.novel_positives)
    opt = nx.Adam(cfg.lr)
    trace = []
    for epoch in range(cfg.epochs):
        totals = np.zeros(3)
        count = 0
        epoch_samples = pool
        if samples is None:
            epoch_samples = subsample_per_user(pool, cfg.max_samples_per_user,
                                               np.random.default_rng([cfg.seed, epoch, 7]))
        for batch in build_batches(epoch_samples, data.catalog, cfg, cfg.seed, epoch):
            batch.validate(data.catalog)
            tape = nx.Tape()
            loss, l_long, l_short = model.batch_loss(batch, data.histories, cfg, tape)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, category {batch.category_id}: "
                    f"long={l_long}, short={l_short}")
            grads = tape.backward(loss)
            opt.step(model.params, grads.params)
            n = len(batch.samples)
            totals += n * np.array([value, l_long, l_short])
            count += n
        mean = totals / max(count, 1)
        trace.append({"epoch": epoch, "loss": float(mean[0]), "loss_long": float(mean[1]),
                      "loss_short": float(mean[2])})
        log.info("dual-interest epoch %d loss %.4f (long %.4f, short %.4f)", epoch, *mean)
    return TrainResult(model, trace)
