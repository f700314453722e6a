import numpy as np
import pytest

from ulim.config import SynthConfig
from ulim.numerics import ConfigError
from ulim.synth import synth_generate


def interest_sets(data, k):
    """Per user, the ``k`` most frequent categories of the history."""
    out = {}
    for u, h in data.histories.items():
        counts = np.bincount(h.categories, minlength=data.catalog.n_categories)
        out[u] = set(np.argsort(-counts, kind="stable")[:k].tolist())
    return out


class TestSynth:
    def test_deterministic_per_seed(self):
        cfg = SynthConfig(n_users=20, n_items=200, n_categories=10, seq_len=15, seed=3)
        a, b = synth_generate(cfg), synth_generate(cfg)
        assert a.catalog == b.catalog
        assert all(a.histories[u].events == b.histories[u].events for u in a.users)
        assert a.test == b.test
        other = synth_generate(SynthConfig(n_users=20, n_items=200, n_categories=10, seq_len=15, seed=4))
        assert any(a.histories[u].events != other.histories[u].events for u in a.users)

    def test_shapes_and_consistency(self):
        cfg = SynthConfig(n_users=30, n_items=120, n_categories=6, seq_len=12)
        data = synth_generate(cfg)
        assert data.users == list(range(30)) and sorted(data.test) == data.users
        assert data.catalog.n_items == 120
        for u in data.users:
            h = data.histories[u]
            assert len(h) == 12
            np.testing.assert_array_equal(data.catalog.item_category[h.items], h.categories)
            assert all(np.diff([e.timestamp for e in h.events]) > 0)
            assert data.test[u].timestamp > h.events[-1].timestamp

    def test_held_out_item_never_in_visible_history(self):
        data = synth_generate(SynthConfig(n_users=200, n_items=100, n_categories=5, seq_len=40,
                                          popularity_alpha=1.5))
        for u in data.users:
            assert data.test[u].item_id not in set(data.histories[u].items.tolist())

    def test_persistence_fraction(self):
        cfg = SynthConfig(n_users=300, n_items=400, n_categories=20, seq_len=60, interests_per_user=3,
                          persistence=0.8, seed=1)
        data = synth_generate(cfg)
        interests = interest_sets(data, 3)
        inside = np.mean([np.isin(data.histories[u].categories, list(interests[u])).mean() for u in data.users])
        # 80% of clicks land in interests; a few outside categories may outrank a weak interest
        assert inside == pytest.approx(0.8, abs=0.03)

    def test_full_persistence_stays_inside_interests(self):
        data = synth_generate(SynthConfig(n_users=50, n_items=200, n_categories=10, seq_len=30,
                                          interests_per_user=2, persistence=1.0))
        for u in data.users:
            assert len(set(data.histories[u].categories.tolist()) | {data.test[u].category_id}) <= 2

    def test_sessions_repeat_the_active_interest(self):
        data = synth_generate(SynthConfig(n_users=100, n_items=300, n_categories=10, seq_len=40,
                                          persistence=1.0, session_len=10))
        same = np.mean([np.mean(np.diff(data.histories[u].categories) == 0) for u in data.users])
        assert same > 0.85

    def test_style_fidelity_restricts_items(self):
        cfg = SynthConfig(n_users=50, n_items=400, n_categories=4, seq_len=20, n_styles=2, style_fidelity=1.0,
                          style_period=0, popularity_alpha=0.0)
        data = synth_generate(cfg)
        # with no drift every clicked item carries the user's single style
        # (replays the generator's first two draws to recover the item styles)
        rng = np.random.default_rng(cfg.seed)
        rng.permutation(np.arange(cfg.n_items) % cfg.n_categories)
        style = rng.integers(0, cfg.n_styles, size=cfg.n_items)
        for u in data.users:
            assert len(set(style[data.histories[u].items].tolist())) == 1

    @pytest.mark.parametrize("bad", [
        {"n_users": 0}, {"n_items": 3, "n_categories": 5}, {"persistence": 1.5},
        {"interests_per_user": 30}, {"style_fidelity": -0.1}, {"session_len": 0},
        {"n_categories": 3, "interests_per_user": 3, "persistence": 0.5},
    ])
    def test_invalid_configs(self, bad):
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(**bad))
