"""Behavior-log schema, category clustering, sequence windows and JSON-lines I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorEvent:
    user_id: int
    item_id: int
    category_id: int
    timestamp: int

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "item_id": self.item_id,
                "category_id": self.category_id, "ts": self.timestamp}


@dataclass(frozen=True)
class UserHistory:
    user_id: int
    events: tuple = ()
    items: np.ndarray = field(init=False, repr=False, compare=False)
    categories: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "items", np.array([e.item_id for e in self.events], dtype=np.int64))
        object.__setattr__(self, "categories", np.array([e.category_id for e in self.events], dtype=np.int64))

    def __len__(self):
        return len(self.events)

    def prefix(self, t: int) -> "UserHistory":
        """The first ``t`` events, i.e. what was visible before event ``t``."""
        return UserHistory(self.user_id, self.events[:t])


class Catalog:
    """Dense item ids ``0..n_items-1``, each mapped to exactly one category."""

    def __init__(self, item_category):
        self.item_category = np.asarray(item_category, dtype=np.int64)
        if self.item_category.ndim != 1 or len(self.item_category) == 0:
            raise IngestionError("catalog must contain at least one item")
        if self.item_category.min() < 0:
            raise IngestionError("category ids must be non-negative")
        self.n_categories = int(self.item_category.max()) + 1
        order = np.argsort(self.item_category, kind="stable")
        bounds = np.searchsorted(self.item_category[order], np.arange(self.n_categories + 1))
        self._members = [order[bounds[c]:bounds[c + 1]] for c in range(self.n_categories)]

    @property
    def n_items(self) -> int:
        return len(self.item_category)

    @property
    def categories(self):
        return range(self.n_categories)

    def category_of(self, item_id: int) -> int:
        if not 0 <= item_id < self.n_items:
            raise IngestionError(f"item {item_id} is not in the catalog")
        return int(self.item_category[item_id])

    def items_in(self, category_id: int) -> np.ndarray:
        return self._members[category_id]

    def __eq__(self, other):
        return isinstance(other, Catalog) and np.array_equal(self.item_category, other.item_category)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def cluster_by_category(history: UserHistory, catalog: Catalog) -> dict:
    """Stable partition of a history into category-homogeneous subsequences."""
    groups: dict = {}
    for event in history.events:
        cat = catalog.category_of(event.item_id)
        groups.setdefault(cat, []).append(event)
    return groups


def short_term_window(history: UserHistory, max_len: int = 100) -> UserHistory:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return UserHistory(history.user_id, history.events[-max_len:])


def long_term_window(history: UserHistory, max_long: int, short_len: int = 0,
                     short_in_long: bool = True) -> UserHistory:
    """The capped long-term sequence; without overlap the short window is cut off first."""
    events = history.events
    if not short_in_long and short_len:
        events = events[:-short_len]
    return UserHistory(history.user_id, events[-max_long:])


def merged_category_sequence(long: UserHistory, short: UserHistory) -> list:
    """Categories of both histories, newest occurrence first, each listed once."""
    latest: dict = {}
    order = 0
    for event in sorted(long.events + short.events, key=lambda e: e.timestamp):
        latest[event.category_id] = (event.timestamp, order)
        order += 1
    return sorted(latest, key=lambda c: latest[c], reverse=True)


# ---------------------------------------------------------------------------
# datasets and files
# ---------------------------------------------------------------------------


@dataclass
class BehaviorData:
    catalog: Catalog
    histories: dict  # user_id -> UserHistory (training-visible)
    test: dict = field(default_factory=dict)  # user_id -> held-out BehaviorEvent

    @property
    def users(self) -> list:
        return sorted(self.histories)

    @property
    def n_users(self) -> int:
        return max(self.histories, default=-1) + 1


def _read_jsonl(path: Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestionError(f"{path}:{lineno}: invalid JSON ({exc})") from exc


def read_catalog(path) -> Catalog:
    rows = {}
    for rec in _read_jsonl(Path(path)):
        try:
            item, cat = int(rec["item_id"]), int(rec["category_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"{path}: bad catalog record {rec!r}") from exc
        if item in rows and rows[item] != cat:
            raise IngestionError(f"{path}: item {item} mapped to two categories")
        rows[item] = cat
    if sorted(rows) != list(range(len(rows))):
        raise IngestionError(f"{path}: item ids must be dense 0..n-1")
    return Catalog([rows[i] for i in range(len(rows))])


def read_events(path, catalog: Catalog) -> dict:
    """Load events grouped per user, validated against the catalog and sorted by timestamp."""
    per_user: dict = {}
    for rec in _read_jsonl(Path(path)):
        try:
            ev = BehaviorEvent(int(rec["user_id"]), int(rec["item_id"]),
                               int(rec["category_id"]), int(rec["ts"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"{path}: bad event record {rec!r}") from exc
        if ev.timestamp < 0:
            raise IngestionError(f"{path}: negative timestamp in {rec!r}")
        if catalog.category_of(ev.item_id) != ev.category_id:
            raise IngestionError(
                f"{path}: item {ev.item_id} has category {catalog.category_of(ev.item_id)}, "
                f"event says {ev.category_id}")
        per_user.setdefault(ev.user_id, []).append(ev)
    return {u: UserHistory(u, sorted(evs, key=lambda e: e.timestamp)) for u, evs in per_user.items()}


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def save_data(data: BehaviorData, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "catalog.jsonl",
                ({"item_id": i, "category_id": int(c)} for i, c in enumerate(data.catalog.item_category)))
    write_jsonl(out / "events.jsonl",
                (e.to_json() for u in data.users for e in data.histories[u].events))
    write_jsonl(out / "test.jsonl", (data.test[u].to_json() for u in sorted(data.test)))


def load_data(data_dir) -> BehaviorData:
    d = Path(data_dir)
    if not (d / "catalog.jsonl").exists():
        raise IngestionError(f"{d}: no catalog.jsonl")
    catalog = read_catalog(d / "catalog.jsonl")
    histories = read_events(d / "events.jsonl", catalog)
    test = {}
    if (d / "test.jsonl").exists():
        for u, h in read_events(d / "test.jsonl", catalog).items():
            test[u] = h.events[-1]
    return BehaviorData(catalog, histories, test)
