import json
from fractions import Fraction

import numpy as np
import pytest

from leakimpact.errors import AUCUndefinedError, ConfigError, DataError, SchemaError
from leakimpact.eventlog import DAY, EventLog, generate_synthetic
from leakimpact.leakage import (LeakSpec, LISReport, build_similar_items, causal_similar_items,
                                compute_lis, fit_baseline, future_snapshot, inject_next_click,
                                neighbour_matrix, paired_bootstrap, substitute_future_embeddings)
from leakimpact.ranker import (Categorical, FeatureSchema, ModelSnapshot, TrainConfig, auc_score,
                               featurize, predict_logits, snapshot_embeddings, train)

from conftest import brute_auc, small_config


def brute_next_click(log, targets):
    out = []
    for u, t in zip(targets.user_id.tolist(), targets.timestamp.tolist()):
        best = None
        for uu, ii, tt, yy in zip(log.user_id.tolist(), log.item_id.tolist(),
                                  log.timestamp.tolist(), log.label.tolist()):
            if uu == u and yy == 1 and tt > t and (best is None or tt < best[0]):
                best = (tt, ii)
        out.append(-1 if best is None else best[1])
    return np.array(out)


def dense_cosine_neighbours(log, k):
    """Dense user x item binary click matrix; cosine; ties to the smaller id.

    Cosines are compared exactly as fractions so ties are real ties."""
    items = np.unique(log.item_id)
    users = np.unique(log.user_id)
    X = np.zeros((len(users), len(items)))
    c = log.label == 1
    X[np.searchsorted(users, log.user_id[c]), np.searchsorted(items, log.item_id[c])] = 1.0
    deg = X.sum(axis=0).astype(int)
    out = {}
    for a in range(len(items)):
        co = (X[:, a] @ X).astype(int)
        # cos^2 = co^2 / (deg_a deg_b); deg_a is shared by the row
        cand = [(-Fraction(int(co[b]) ** 2, int(deg[b])), int(items[b]))
                for b in range(len(items)) if b != a and co[b] > 0]
        out[int(items[a])] = [i for _, i in sorted(cand)[:k]]
    return out


class TestNextClick:
    def test_matches_brute_force_10k(self):
        log, _, _ = generate_synthetic(small_config(num_users=150, days=10, events_per_day=1000))
        assert len(log) == 10_000
        targets = log.take(np.arange(0, len(log), 7))
        got = inject_next_click(log, targets)
        # brute force per user keeps this fast enough
        exp = np.full(len(targets), -1)
        clicks = log.label == 1
        for u in np.unique(targets.user_id):
            sel = np.flatnonzero(targets.user_id == u)
            cu = clicks & (log.user_id == u)
            ct, ci = log.timestamp[cu], log.item_id[cu]
            for j in sel:
                later = ct > targets.timestamp[j]
                if later.any():
                    exp[j] = ci[later][np.argmin(ct[later])]
        assert np.array_equal(got, exp)

    def test_hand_example(self):
        log = EventLog([1, 1, 1, 2, 1], [10, 11, 12, 13, 14], [5, 5, 6, 7, 9], [0, 1, 1, 1, 1])
        targets = EventLog([1, 1, 2, 3], [0, 0, 0, 0], [4, 5, 7, 0], [0, 0, 0, 0])
        assert inject_next_click(log, targets).tolist() == [11, 12, -1, -1]
        assert brute_next_click(log, targets).tolist() == [11, 12, -1, -1]


class TestSimilarItems:
    def test_matches_dense_oracle_500_items(self):
        log, _, _ = generate_synthetic(small_config(num_items=500, num_users=400, days=20,
                                                    events_per_day=600, seed=5))
        got = build_similar_items(log, k=5)
        assert len(got) > 450
        assert got == dense_cosine_neighbours(log, 5)

    def test_self_excluded_and_isolated_empty(self):
        log = EventLog([1, 1, 2, 3], [10, 11, 10, 12], [0, 1, 2, 3], [1, 1, 1, 0])
        nb = build_similar_items(log, k=3)
        assert nb == {10: [11], 11: [10], 12: []}

    def test_bad_k(self, small_world):
        with pytest.raises(ConfigError):
            build_similar_items(small_world["log"], k=0)

    def test_causal_uses_only_past(self, small_world):
        log = small_world["log"]
        day = 15
        targets = log.take(np.flatnonzero(log.timestamp // DAY == day))
        got = causal_similar_items(log, targets, k=5)
        past = log.take(np.flatnonzero(log.timestamp < day * DAY))
        nb = build_similar_items(past, k=5)
        exp = neighbour_matrix(nb, targets.item_id, 5)
        assert np.array_equal(got, exp)

    def test_neighbour_matrix_padding(self):
        m = neighbour_matrix({1: [2, 3], 2: []}, np.array([1, 2, 9]), 3)
        assert m.tolist() == [[2, 3, -1], [-1, -1, -1], [-1, -1, -1]]


class TestSubstitution:
    def _model(self, world):
        return train(world["train"], FeatureSchema(), TrainConfig(epochs=1))

    def test_rows_replaced_and_unseen_added(self, small_world):
        m = self._model(small_world)
        known = m.item_ids[:3]
        new_id = int(m.item_ids.max()) + 1000
        ids = np.r_[known, new_id]
        emb = np.arange(4 * m.embed_dim, dtype=float).reshape(4, m.embed_dim)
        snap = ModelSnapshot(m.cutoff_date + 1, ids, emb, np.ones(4, dtype=np.int64))
        out = substitute_future_embeddings(m, snap)
        for r, i in enumerate(ids.tolist()):
            assert np.array_equal(out.item_embeddings()[i], emb[r])
        untouched = int(m.item_ids[5])
        assert np.array_equal(out.item_embeddings()[untouched], m.item_embeddings()[untouched])
        assert np.array_equal(out.linear_weights, m.linear_weights)
        # the input model is not modified
        assert new_id not in m.item_ids

    def test_snapshot_must_be_later(self, small_world):
        m = self._model(small_world)
        snap = snapshot_embeddings(m)
        with pytest.raises(DataError, match="not after"):
            substitute_future_embeddings(m, snap)

    def test_width_mismatch(self, small_world):
        m = self._model(small_world)
        snap = ModelSnapshot(m.cutoff_date + 1, np.array([1]), np.zeros((1, m.embed_dim + 1)), np.ones(1))
        with pytest.raises(SchemaError):
            substitute_future_embeddings(m, snap)

    def test_future_snapshot_extends_training(self, small_world):
        m = self._model(small_world)
        split = small_world["split"]
        snap = future_snapshot(m, small_world["log"], split.train_end_T, 3, m.config)
        assert snap.date_tag >= split.train_end_T + 3 * DAY - 1
        before = dict(zip(m.item_ids.tolist(), m.update_counts.tolist()))
        after = dict(zip(snap.item_ids.tolist(), snap.update_counts.tolist()))
        assert all(after[i] >= c for i, c in before.items())
        assert sum(after.values()) > sum(before.values())


class TestBootstrap:
    def test_deterministic_and_contains_point(self, small_world):
        rng = np.random.default_rng(0)
        y = small_world["eval"].label
        a = rng.standard_normal(len(y))
        b = a + 0.5 * y + rng.standard_normal(len(y)) * 0.1
        lo1, hi1, d1 = paired_bootstrap(a, b, y, 100, 3)
        lo2, hi2, d2 = paired_bootstrap(a, b, y, 100, 3)
        assert (lo1, hi1) == (lo2, hi2)
        assert lo1 <= auc_score(b, y) - auc_score(a, y) <= hi1

    def test_identical_scores_zero_interval(self, small_world):
        y = small_world["eval"].label
        s = np.random.default_rng(1).standard_normal(len(y))
        lo, hi, _ = paired_bootstrap(s, s, y, 50, 0)
        assert lo == hi == 0.0


class TestLIS:
    CFG = TrainConfig()

    def test_lis_is_exact_difference(self, small_world):
        w = small_world
        r = compute_lis(w["train"], w["eval"], FeatureSchema(),
                        LeakSpec("next_click", source=w["log"]), self.CFG, n_boot=50, split=w["split"])
        assert r.lis == r.auc_leak - r.auc_base
        assert r.significant == (r.lis > r.threshold and r.ci_low > 0)

    def test_constant_leak_is_null(self, small_world):
        w = small_world
        r = compute_lis(w["train"], w["eval"], FeatureSchema(), LeakSpec("constant"), self.CFG,
                        n_boot=100, split=w["split"])
        assert abs(r.lis) < 0.001
        assert r.ci_low <= 0 <= r.ci_high

    def test_oracle(self, small_world):
        w = small_world
        ev = w["eval"]
        p = w["truth"].click_prob(ev.user_id, ev.item_id, ev.timestamp)
        r = compute_lis(w["train"], ev, FeatureSchema(), LeakSpec("oracle", values=(None, p)),
                        self.CFG, n_boot=50, split=w["split"])
        _, s_base, _ = fit_baseline(w["train"], ev, FeatureSchema(), self.CFG)
        assert abs(r.lis - (brute_auc(p, ev.label) - brute_auc(s_base, ev.label))) < 1e-9

    def test_zero_self_leak(self, small_world):
        w = small_world
        leak = LeakSpec("custom", name="self_item",
                        values=(Categorical(w["train"].item_id), Categorical(w["eval"].item_id)))
        r = compute_lis(w["train"], w["eval"], FeatureSchema(), leak, self.CFG, n_boot=50,
                        split=w["split"])
        assert abs(r.lis) <= 0.002

    def test_reused_baseline_gives_same_report(self, small_world):
        w = small_world
        base = fit_baseline(w["train"], w["eval"], FeatureSchema(), self.CFG)
        leak = LeakSpec("similar_items", k=3, source=w["log"])
        a = compute_lis(w["train"], w["eval"], FeatureSchema(), leak, self.CFG, n_boot=30,
                        split=w["split"], base=base)
        b = compute_lis(w["train"], w["eval"], FeatureSchema(), leak, self.CFG, n_boot=30,
                        split=w["split"])
        assert a.to_json() == b.to_json()

    def test_future_embedding_horizon_too_short(self, small_world):
        w = small_world
        with pytest.raises(DataError, match="shorter than the eval window"):
            compute_lis(w["train"], w["eval"], FeatureSchema(),
                        LeakSpec("future_embedding", horizon_n_days=1, source=w["log"]),
                        self.CFG, split=w["split"])

    def test_single_class_eval(self, small_world):
        w = small_world
        ev = w["eval"]
        ones = EventLog(ev.user_id, ev.item_id, ev.timestamp, np.ones(len(ev), dtype=int))
        with pytest.raises(AUCUndefinedError, match="AUC undefined"):
            compute_lis(w["train"], ones, FeatureSchema(), LeakSpec("constant"), self.CFG,
                        split=w["split"])

    def test_train_after_split_rejected(self, small_world):
        w = small_world
        with pytest.raises(DataError):
            compute_lis(w["log"], w["eval"], FeatureSchema(), LeakSpec("constant"), self.CFG,
                        split=w["split"])

    def test_leaky_base_schema_rejected(self, small_world):
        w = small_world
        with pytest.raises(SchemaError):
            compute_lis(w["train"], w["eval"], FeatureSchema().with_slots("leak:x"),
                        LeakSpec("constant"), self.CFG, split=w["split"])

    def test_report_round_trip(self, small_world):
        w = small_world
        r = compute_lis(w["train"], w["eval"], FeatureSchema(), LeakSpec("constant"), self.CFG,
                        n_boot=20, split=w["split"])
        assert LISReport.from_dict(json.loads(r.to_json())) == r
        assert r.summary_row()["leak"] == "constant"
        assert r.metadata["train_config"]["seed"] == self.CFG.seed


class TestLeakSpec:
    @pytest.mark.parametrize("kw", [
        dict(kind="nope"),
        dict(kind="future_embedding", horizon_n_days=0),
        dict(kind="similar_items", k=0, source=EventLog([1], [1], [1], [1])),
        dict(kind="next_click"),
        dict(kind="constant", k=3),
        dict(kind="oracle"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LeakSpec(**kw)

    def test_labels(self):
        src = EventLog([1], [1], [1], [1])
        assert LeakSpec("future_embedding", horizon_n_days=7, source=src).label == "future_embedding_n7"
        assert LeakSpec("similar_items", source=src).slot == "leak:similar_items_k5"


def test_baseline_scores_match_model(small_world):
    w = small_world
    model, scores, warm = fit_baseline(w["train"], w["eval"], FeatureSchema(), TrainConfig())
    assert warm is not None
    np.testing.assert_array_equal(scores, predict_logits(model, featurize(w["eval"], model.schema)))
    direct = train(w["train"], FeatureSchema(), TrainConfig())
    np.testing.assert_array_equal(direct.item_emb, model.item_emb)
