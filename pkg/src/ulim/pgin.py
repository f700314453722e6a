"""Pointer-generator interest network: next-category prediction.

The pointer branch attends over the user's observed categories (deduplicated,
newest first) and scatters its attention weights back into the full category
space, so it can only ever point at categories the user has touched.  The
generator branch encodes the raw long and short category sequences, fuses
them with a learned user vector and emits a softmax over every category.  A
sigmoid gate mixes the two.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import PginConfig, SequenceConfig
from .datamodel import BehaviorData, UserHistory
from .dual_interest import TrainingError, _pad, context_bounds, subsample_per_user

log = logging.getLogger(__name__)

EPS = 1e-9


@dataclass
class PginOutput:
    y_poi: np.ndarray
    y_gen: np.ndarray
    p_poi: float
    y_hat: np.ndarray


def predict_topk(y_hat, k: int) -> list:
    """Top-``k`` categories by probability, ties broken by the lower category id."""
    y_hat = np.asarray(y_hat)
    if not 0 <= k <= len(y_hat):
        raise nx.ConfigError(f"K={k} must lie in [0, {len(y_hat)}]")
    order = np.lexsort((np.arange(len(y_hat)), -y_hat))
    return [int(c) for c in order[:k]]


def pgin_loss(output: PginOutput, true_category: int) -> float:
    n = len(output.y_hat)
    if not 0 <= true_category < n:
        raise ValueError(f"label {true_category} outside [0, {n})")
    return float(-math.log(output.y_hat[true_category] + EPS))


def gate_blend(y_poi, y_gen, gate_logit):
    """Blend with gate ``sigmoid(gate_logit)``; returns ``(p_poi, y_hat)``."""
    y_poi = np.asarray(y_poi, dtype=nx.COMPUTE)
    y_gen = np.asarray(y_gen, dtype=nx.COMPUTE)
    if y_poi.shape != y_gen.shape:
        raise nx.DimensionError(f"pointer {y_poi.shape} and generator {y_gen.shape} shapes differ")
    p = float(nx.sigmoid(np.asarray([gate_logit]))[0])
    return p, p * y_poi + (1.0 - p) * y_gen


def category_context(cats: np.ndarray, t: int, seq: SequenceConfig, cfg: PginConfig) -> dict:
    """Everything PGIN sees about the events before position ``t`` of one history."""
    short, (lo, hi) = context_bounds(t, seq)
    start = min(lo, short[0]) if hi > lo else short[0]
    recent_first = cats[start:t][::-1]
    counts: dict = {}
    order = []
    for c in recent_first:
        c = int(c)
        if c not in counts:
            order.append(c)
            counts[c] = 0
        counts[c] += 1
    in_long = set(cats[lo:hi].tolist())
    in_short = set(cats[short[0]:short[1]].tolist())
    return {
        "long": cats[lo:hi],
        "short": cats[short[0]:short[1]],
        "ptr": order,
        "rank": [min(r, cfg.rank_buckets - 1) for r in range(len(order))],
        "freq": [min(int(math.log2(counts[c])), cfg.freq_buckets - 1) for c in order],
        "ptr_long": [c in in_long for c in order],
        "ptr_short": [c in in_short for c in order],
    }


class PGIN:
    kind = "pgin"

    def __init__(self, cfg: PginConfig, seq: SequenceConfig, n_categories: int, n_users: int,
                 params=None, seed: int = 0):
        self.cfg = cfg
        self.seq = seq
        self.n_categories = n_categories
        self.n_users = max(n_users, 1)
        self.seed = seed
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict:
        d, h, n = self.cfg.d, self.cfg.hidden, self.n_categories
        p = {
            "cat_emb": nx.init_uniform(rng, (n, d), d),
            "rank_emb": nx.init_uniform(rng, (self.cfg.rank_buckets, d), d),
            "freq_emb": nx.init_uniform(rng, (self.cfg.freq_buckets, d), d),
            "user_emb": nx.init_uniform(rng, (self.n_users, d), d),
        }
        nx.init_mhsa(p, rng, "gen.long", d)
        nx.init_mhsa(p, rng, "gen.short", d)
        nx.init_target_attention(p, rng, "gen.fuse", d)
        nx.init_mlp(p, rng, "gen.mlp", [2 * d, h, n])
        for name in ("ptr.long", "ptr.short"):
            p[f"{name}.Wq"] = nx.init_uniform(rng, (d, d), d)
            p[f"{name}.Wk"] = nx.init_uniform(rng, (d, d), d)
        nx.init_mlp(p, rng, "gate.mlp", [2 * d, h, 1])
        return p

    # -- batching -------------------------------------------------------------

    def collate(self, contexts: list, users, labels=None) -> dict:
        lc, lm = _pad([c["long"] for c in contexts])
        sc, sm = _pad([c["short"] for c in contexts])
        pc, pm = _pad([c["ptr"] for c in contexts])
        pr, _ = _pad([c["rank"] for c in contexts])
        pf, _ = _pad([c["freq"] for c in contexts])
        pl, _ = _pad([c["ptr_long"] for c in contexts])
        ps, _ = _pad([c["ptr_short"] for c in contexts])
        users = np.asarray(users, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise KeyError(f"user ids outside the trained range [0, {self.n_users})")
        out = {"long": lc, "long_mask": lm, "short": sc, "short_mask": sm,
               "ptr": pc, "ptr_mask": pm, "rank": pr, "freq": pf,
               "ptr_long": pl.astype(bool) & pm, "ptr_short": ps.astype(bool) & pm,
               "users": users}
        if labels is not None:
            out["labels"] = np.asarray(labels, dtype=np.int64)
        return out

    # -- forward on a tape ----------------------------------------------------

    def _generator(self, tape, a):
        P, heads = self.params, self.cfg.heads
        emb = tape.param("cat_emb", P["cat_emb"])
        has_long = a["long_mask"].any(axis=1)
        has_short = a["short_mask"].any(axis=1)
        hl = tape.apply(nx.MeanPool, nx.mhsa(tape, tape.apply(nx.Gather, emb, a["long"]), a["long_mask"],
                                             P, "gen.long", heads), a["long_mask"])
        hs = tape.apply(nx.MeanPool, nx.mhsa(tape, tape.apply(nx.Gather, emb, a["short"]), a["short_mask"],
                                             P, "gen.short", heads), a["short_mask"])
        u = tape.apply(nx.Gather, tape.param("user_emb", P["user_emb"]), a["users"])
        keys = tape.apply(nx.Stack, hl, hs)
        fused = nx.target_attention(tape, u, keys, keys, np.stack([has_long, has_short], axis=1), P, "gen.fuse")
        logits = nx.mlp(tape, tape.apply(nx.Concat, fused, u), P, "gen.mlp", 2)
        return fused, tape.apply(nx.Softmax, logits)

    def _pointer(self, tape, a, query):
        P = self.params
        keys = tape.apply(nx.Gather, tape.param("cat_emb", P["cat_emb"]), a["ptr"])
        keys = tape.apply(nx.Add, keys, tape.apply(nx.Gather, tape.param("rank_emb", P["rank_emb"]), a["rank"]))
        keys = tape.apply(nx.Add, keys, tape.apply(nx.Gather, tape.param("freq_emb", P["freq_emb"]), a["freq"]))
        has_l = a["ptr_long"].any(axis=1).astype(float)
        has_s = a["ptr_short"].any(axis=1).astype(float)
        n_pass = np.maximum(has_l + has_s, 1.0)
        wl = nx.attention_weights(tape, query, keys, a["ptr_long"], P, "ptr.long")
        ws = nx.attention_weights(tape, query, keys, a["ptr_short"], P, "ptr.short")
        w = tape.apply(nx.Combine, wl, ws, coefs=((has_l / n_pass)[:, None], (has_s / n_pass)[:, None]))
        y_poi = tape.apply(nx.ScatterNormalize, w, a["ptr"], a["ptr_mask"], n=self.n_categories)
        summary = tape.apply(nx.WeightedSum, w, keys)
        return y_poi, summary

    def forward(self, tape, a):
        """Returns tape variables ``(y_poi, y_gen, p_poi, y_hat)``."""
        fused, y_gen = self._generator(tape, a)
        y_poi, summary = self._pointer(tape, a, fused)
        gate_logit = nx.mlp(tape, tape.apply(nx.Concat, fused, summary), self.params, "gate.mlp", 2)
        gate = tape.apply(nx.Sigmoid, gate_logit)
        has_ptr = a["ptr_mask"].any(axis=1).astype(float)[:, None]
        gate = tape.apply(nx.Combine, gate, coefs=(has_ptr,))
        y_hat = tape.apply(nx.Blend, gate, y_poi, y_gen)
        return y_poi, y_gen, gate, y_hat

    def loss(self, tape, a):
        *_, y_hat = self.forward(tape, a)
        return tape.apply(nx.ProbNLL, y_hat, a["labels"], eps=EPS)

    # -- inference --------------------------------------------------------------

    def context(self, history: UserHistory, t: int | None = None) -> dict:
        t = len(history) if t is None else t
        return category_context(history.categories, t, self.seq, self.cfg)

    def predict_batch(self, histories: list) -> list:
        contexts = [self.context(h) for h in histories]
        for h, c in zip(histories, contexts):
            if not len(c["long"]) and not len(c["short"]):
                raise nx.EmptySequenceError(f"user {h.user_id} has no history to predict from")
        a = self.collate(contexts, [h.user_id for h in histories])
        y_poi, y_gen, gate, y_hat = self.forward(nx.Tape(record=False), a)
        return [PginOutput(y_poi.value[i], y_gen.value[i], float(gate.value[i, 0]), y_hat.value[i])
                for i in range(len(histories))]

    def predict(self, history: UserHistory) -> PginOutput:
        return self.predict_batch([history])[0]

    def pointer_forward(self, merged_cats, user_ctx, long_cats=None, short_cats=None) -> np.ndarray:
        """Pointer distribution over all categories for a recency-ordered, duplicate-free list.

        ``long_cats``/``short_cats`` select which categories each attention pass
        sees; by default both passes see the whole list.
        """
        merged_cats = [int(c) for c in merged_cats]
        if not merged_cats:
            raise nx.EmptySequenceError("pointer needs at least one observed category")
        if len(set(merged_cats)) != len(merged_cats):
            raise ValueError("merged category sequence has duplicates")
        longs = set(merged_cats if long_cats is None else long_cats)
        shorts = set(merged_cats if short_cats is None else short_cats)
        ctx = {"long": [], "short": [], "ptr": merged_cats,
               "rank": [min(r, self.cfg.rank_buckets - 1) for r in range(len(merged_cats))],
               "freq": [0] * len(merged_cats),
               "ptr_long": [c in longs for c in merged_cats],
               "ptr_short": [c in shorts for c in merged_cats]}
        a = self.collate([ctx], [0])
        query = nx.Var(np.asarray(user_ctx, dtype=nx.COMPUTE)[None])
        y_poi, _ = self._pointer(nx.Tape(record=False), a, query)
        return y_poi.value[0]

    def generator_forward(self, long_hist: UserHistory, short_hist: UserHistory, user_id: int) -> np.ndarray:
        if not len(long_hist) and not len(short_hist):
            raise nx.EmptySequenceError("generator needs a non-empty long or short history")
        ctx = {"long": long_hist.categories, "short": short_hist.categories, "ptr": [], "rank": [],
               "freq": [], "ptr_long": [], "ptr_short": []}
        a = self.collate([ctx], [user_id])
        _, y_gen = self._generator(nx.Tape(record=False), a)
        return y_gen.value[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def build_pgin_samples(data: BehaviorData, seq: SequenceConfig, cfg: PginConfig, cap: bool = True) -> list:
    """``(user, context, label)`` for every history position with a non-empty past.

    With ``cap`` a fixed subset of at most ``cfg.max_samples_per_user`` positions is kept per user.
    """
    rng = np.random.default_rng([cfg.seed, 13])
    out = []
    for u in data.users:
        h = data.histories[u]
        ts = np.arange(1, len(h))
        if cap and cfg.max_samples_per_user and len(ts) > cfg.max_samples_per_user:
            ts = np.sort(rng.choice(ts, size=cfg.max_samples_per_user, replace=False))
        for t in ts:
            out.append((u, category_context(h.categories, int(t), seq, cfg), int(h.categories[t])))
    return out


@dataclass
class PginTrainResult:
    model: PGIN
    trace: list


def train_pgin(data: BehaviorData, seq: SequenceConfig, cfg: PginConfig, samples=None) -> PginTrainResult:
    cfg.validate()
    model = PGIN(cfg, seq, data.catalog.n_categories, data.n_users, seed=cfg.seed)
    fixed = samples is not None
    pool = samples if fixed else build_pgin_samples(data, seq, cfg, cap=False)
    if not pool:
        raise ValueError("no PGIN training samples")
    opt = nx.Adam(cfg.lr)
    trace = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 17])
        samples = pool if fixed else subsample_per_user(pool, cfg.max_samples_per_user, rng,
                                                        user_of=lambda s: s[0])
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
            a = model.collate([c for _, c, _ in chunk], [u for u, _, _ in chunk], [y for _, _, y in chunk])
            tape = nx.Tape()
            loss = model.loss(tape, a)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite PGIN loss at epoch {epoch}, batch starting {start}")
            opt.step(model.params, tape.backward(loss).params)
            total += value * len(chunk)
        trace.append({"epoch": epoch, "loss": total / len(samples)})
        log.info("pgin epoch %d loss %.4f", epoch, total / len(samples))
    return PginTrainResult(model, trace)


def top1_accuracy(model: PGIN, data: BehaviorData) -> float:
    users = sorted(data.test)
    outs = model.predict_batch([data.histories[u] for u in users])
    hits = [predict_topk(o.y_hat, 1)[0] == data.test[u].category_id for u, o in zip(users, outs)]
    return float(np.mean(hits))
