"""Synthetic behavior logs with persistent, controllable long-term interests.

Each user owns ``interests_per_user`` categories.  A session picks one of them
(weighted by ``1 / rank**interest_skew``); every event in the session lands in
that interest with probability ``persistence`` and otherwise in a uniformly
drawn non-interest category.  Inside a category the item is popularity skewed
(zipf) and optionally restricted by two latent item attributes:

* style: the user's current style drifts every ``style_period`` events (never
  when it is 0) and is shared by all categories, so recent behavior tells
  which old events matter;
* brand: the user keeps one fixed brand per category, so the whole history of
  a category says more about it than its recent part.

The held-out next click is drawn the same way, rejecting items the user
already clicked.
"""

from __future__ import annotations

import itertools

import numpy as np

from .config import SynthConfig
from .datamodel import BehaviorData, BehaviorEvent, Catalog, UserHistory


def _pick(rng, cum):
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def synth_generate(cfg: SynthConfig) -> BehaviorData:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_cat = cfg.n_categories

    item_cat = rng.permutation(np.arange(cfg.n_items) % n_cat)
    item_style = rng.integers(0, cfg.n_styles, size=cfg.n_items)
    item_brand = rng.integers(0, cfg.n_brands, size=cfg.n_items)
    catalog = Catalog(item_cat)

    # popularity rank inside the category; groups keyed by (category, style, brand), -1 = any
    pop = np.empty(cfg.n_items)
    for c in range(n_cat):
        members = catalog.items_in(c)
        ranks = rng.permutation(len(members))
        pop[members] = 1.0 / (ranks + 1.0) ** cfg.popularity_alpha
        if cfg.style_by_popularity:
            item_style[members] = ranks * cfg.n_styles // len(members)
    groups = {}
    for c in range(n_cat):
        members = catalog.items_in(c)
        for s, b in itertools.product(range(-1, cfg.n_styles), range(-1, cfg.n_brands)):
            sel = members[((item_style[members] == s) | (s < 0)) & ((item_brand[members] == b) | (b < 0))]
            if len(sel) == 0:  # fall back to dropping the brand, then the style
                sel = groups.get((c, s, -1), members)
            groups[c, s, b] = sel
    cum = {key: np.cumsum(pop[m]) for key, m in groups.items()}

    interest_w = np.cumsum(1.0 / np.arange(1, cfg.interests_per_user + 1) ** cfg.interest_skew)
    use_style = cfg.n_styles > 1 and cfg.style_fidelity > 0
    use_brand = cfg.n_brands > 1 and cfg.brand_fidelity > 0

    histories, test = {}, {}
    for u in range(cfg.n_users):
        interests = rng.choice(n_cat, size=cfg.interests_per_user, replace=False)
        others = np.setdiff1d(np.arange(n_cat), interests)
        brands = rng.integers(0, cfg.n_brands, size=n_cat)
        ts = int(rng.integers(0, 1_000_000))
        active = style = 0
        # random phases so session and style boundaries do not line up with the held-out click
        session_phase = int(rng.integers(cfg.session_len))
        style_phase = int(rng.integers(cfg.style_period)) if cfg.style_period else 0
        events = []

        def draw_category():
            if rng.random() < cfg.persistence or len(others) == 0:
                return int(interests[active])
            return int(others[rng.integers(len(others))])

        def draw_item(cat):
            s = b = -1
            if use_style:
                s = style if rng.random() < cfg.style_fidelity else int(rng.integers(cfg.n_styles))
            if use_brand:
                b = int(brands[cat]) if rng.random() < cfg.brand_fidelity else int(rng.integers(cfg.n_brands))
            key = (cat, s, b)
            return int(groups[key][_pick(rng, cum[key])])

        for j in range(cfg.seq_len + 1):
            if j == 0 or (j + session_phase) % cfg.session_len == 0:
                active = _pick(rng, interest_w)
            if use_style and (j == 0 or (cfg.style_period and (j + style_phase) % cfg.style_period == 0)):
                style = int(rng.integers(cfg.n_styles))
            ts += int(rng.integers(1, 3600))
            cat = draw_category()
            item = draw_item(cat)
            if j == cfg.seq_len:
                seen = {e.item_id for e in events}
                for _ in range(100):
                    if item not in seen:
                        break
                    item = draw_item(cat)
                else:
                    fresh = [i for i in catalog.items_in(cat) if i not in seen]
                    if not fresh:
                        break
                    item = int(fresh[0])
                test[u] = BehaviorEvent(u, item, cat, ts)
            else:
                events.append(BehaviorEvent(u, item, cat, ts))
        histories[u] = UserHistory(u, events)
    return BehaviorData(catalog, histories, test)
