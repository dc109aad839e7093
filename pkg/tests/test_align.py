import json

import numpy as np
import pytest

from leakimpact.align import (AlignConfig, AlignmentDataset, ContentEncoder, build_alignment_data,
                              cosine_loss, downstream_eval, mean_recall, recall_ranks,
                              train_encoder, two_period_protocol)
from leakimpact.errors import ConfigError, DataError, NumericError
from leakimpact.eventlog import DAY, ItemContentTable, TemporalSplit, temporal_split
from leakimpact.ranker import FeatureSchema, ModelSnapshot, TrainConfig


def brute_recall(outputs, targets, ids, k):
    """Sort the whole corpus per query; ties go to the smaller id."""
    def unit(v):
        n = np.linalg.norm(v)
        return v / n if n > 1e-12 else v * 0
    hits = 0
    for q in range(len(ids)):
        o = unit(outputs[q])
        ranked = sorted(range(len(ids)), key=lambda j: (-(o @ unit(targets[j])), ids[j]))
        hits += q in ranked[:k]
    return hits / len(ids)


def linear_task(n=400, d_in=6, d_out=5, noise=0.2, seed=0):
    """Targets are a fixed linear map of a latent; content is the noisy latent."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, d_in))
    R = rng.standard_normal((d_in, d_out))
    return AlignmentDataset(np.arange(n) * 3 + 1, z + noise * rng.standard_normal(z.shape), z @ R)


class TestAlignmentData:
    def _snap(self):
        ids = np.array([1, 2, 3, 5, 8])
        return ModelSnapshot(100, ids, np.arange(10.0).reshape(5, 2), np.array([0, 10, 60, 50, 7]))

    def _content(self):
        return ItemContentTable(np.array([2, 3, 5, 8, 9]), np.arange(15.0).reshape(5, 3))

    def test_zero_threshold_keeps_intersection(self):
        d = build_alignment_data(self._snap(), self._content(), 0)
        assert d.item_ids.tolist() == [2, 3, 5, 8]

    def test_count_matches_brute_force(self):
        snap, content = self._snap(), self._content()
        for mu in (0, 8, 50, 60):
            d = build_alignment_data(snap, content, mu)
            exp = [i for i, c in zip(snap.item_ids, snap.update_counts)
                   if c >= mu and i in content.item_ids]
            assert d.item_ids.tolist() == exp
            for i, c, t in d.pairs:
                assert np.array_equal(c, content.lookup(np.array([i]))[0])
                assert np.array_equal(t, snap.item_embeddings[snap.rows(np.array([i]))[0]])

    def test_filter_too_strict(self):
        with pytest.raises(DataError, match="filter too strict"):
            build_alignment_data(self._snap(), self._content(), 61)

    def test_no_shared_items(self):
        content = ItemContentTable(np.array([100]), np.zeros((1, 3)))
        with pytest.raises(DataError, match="share no items"):
            build_alignment_data(self._snap(), content, 0)

    def test_export(self, tmp_path):
        d = build_alignment_data(self._snap(), self._content(), 10)
        d.export(tmp_path / "a.jsonl")
        lines = (tmp_path / "a.jsonl").read_text().splitlines()
        assert json.loads(lines[0]) == {"min_updates": 10, "n_pairs": 3}
        assert [json.loads(x)["item_id"] for x in lines[1:]] == [2, 3, 5]

    def test_without_items(self):
        d = build_alignment_data(self._snap(), self._content(), 0).without_items([3, 8])
        assert d.item_ids.tolist() == [2, 5]


class TestRecall:
    def test_matches_brute_force_200(self):
        rng = np.random.default_rng(0)
        out = rng.standard_normal((200, 4))
        tgt = out + rng.standard_normal((200, 4))
        ids = rng.permutation(1000)[:200]
        d = AlignmentDataset(ids, out, tgt)
        for k in (1, 5, 20):
            assert mean_recall(None, d, k).mean_recall_at_k == pytest.approx(
                brute_recall(out, tgt, ids, k), abs=1e-12)

    def test_ties_rank_smaller_id_first(self):
        tgt = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        ranks = recall_ranks(tgt, tgt, np.array([7, 3, 5]))
        assert ranks.tolist() == [1, 0, 0]

    def test_k_too_large(self):
        d = AlignmentDataset(np.arange(5), np.eye(5), np.eye(5))
        with pytest.raises(ConfigError):
            mean_recall(None, d, 5)


class TestEncoder:
    def test_cosine_loss_gradient(self):
        d = linear_task(n=20)
        enc = ContentEncoder.init(6, 7, 5, seed=1)
        _, grads = cosine_loss(enc, d.content, d.targets)
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(40):
            p = int(rng.integers(4))
            arr = enc.params()[p].reshape(-1)
            k = int(rng.integers(arr.size))
            old = arr[k]
            arr[k] = old + h
            fp = cosine_loss(enc, d.content, d.targets)[0]
            arr[k] = old - h
            fm = cosine_loss(enc, d.content, d.targets)[0]
            arr[k] = old
            fd = (fp - fm) / (2 * h)
            assert fd == pytest.approx(grads[p].reshape(-1)[k], rel=1e-4, abs=1e-9)

    def test_identity_content_reaches_full_recall(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((300, 8))
        d = AlignmentDataset(np.arange(300), z, z)
        enc, hist = train_encoder(d, hyper=AlignConfig(recall_k=1, max_epochs=50, patience=50))
        assert max(h.mean_recall_at_k for h in hist[:51]) == 1.0

    def test_random_targets_give_chance_recall(self):
        rng = np.random.default_rng(4)
        n = 2000
        d = AlignmentDataset(np.arange(n), rng.standard_normal((n, 6)), rng.standard_normal((n, 6)))
        hyper = AlignConfig(recall_k=1, val_fraction=0.5, max_epochs=5, patience=5)
        _, hist = train_encoder(d, hyper=hyper)
        n_val = hist[0].n_queries
        r = np.array([h.mean_recall_at_k for h in hist])
        se = np.sqrt((1 / n_val) * (1 - 1 / n_val) / n_val)
        assert np.all(np.abs(r - 1 / n_val) < 5 * se)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_trained_beats_untrained(self, seed):
        d = linear_task(seed=seed)
        enc, hist = train_encoder(d, hyper=AlignConfig(seed=seed))
        best = enc.meta["best_epoch"]
        assert best > 0
        assert hist[best].mean_recall_at_k > hist[0].mean_recall_at_k

    def test_history_monotone_at_best(self):
        d = linear_task()
        enc, hist = train_encoder(d)
        best = enc.meta["best_epoch"]
        assert hist[best].mean_recall_at_k == max(h.mean_recall_at_k for h in hist)

    def test_deterministic(self):
        d = linear_task()
        a, ha = train_encoder(d, hyper=AlignConfig(seed=5))
        b, hb = train_encoder(d, hyper=AlignConfig(seed=5))
        assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
        assert [h.mean_recall_at_k for h in ha] == [h.mean_recall_at_k for h in hb]

    def test_divergence_reports_last_state(self):
        d = linear_task(n=60)
        content = d.content.copy()
        content[:, 0] = np.nan
        bad = AlignmentDataset(d.item_ids, content, d.targets)
        with pytest.raises(NumericError) as info:
            train_encoder(bad, hyper=AlignConfig(recall_k=2))
        assert all(np.all(np.isfinite(p)) for p in info.value.last_state.params())

    def test_too_few_pairs(self):
        d = linear_task(n=9)
        with pytest.raises(DataError, match="at least 10"):
            train_encoder(d)

    def test_output_width_limit(self):
        with pytest.raises(ConfigError):
            ContentEncoder.init(4, 4, 100)

    def test_round_trip(self, tmp_path):
        enc, _ = train_encoder(linear_task(), hyper=AlignConfig(max_epochs=3))
        enc.save(tmp_path / "e.npz")
        back = ContentEncoder.load(tmp_path / "e.npz")
        x = np.random.default_rng(0).standard_normal((5, 6))
        assert np.array_equal(back(x), enc(x))
        assert back.meta["best_epoch"] == enc.meta["best_epoch"]


class TestDownstream:
    CFG = TrainConfig()

    def _period_b(self, world):
        log = world["log"]
        b = log.take(np.flatnonzero(log.timestamp >= 10 * DAY))
        return temporal_split(b, TemporalSplit.from_days(17, 2))

    def test_zero_encoder_gives_zero_delta(self, small_world):
        tr, ev = self._period_b(small_world)
        content = small_world["content"]
        enc = ContentEncoder.init(content.features.shape[1], 8, 8)
        enc.W2[:] = 0.0
        enc.b2[:] = 0.0
        rep = downstream_eval(enc, tr, ev, FeatureSchema(), self.CFG, content, np.array([10**6]),
                              n_boot=20)
        assert abs(rep.delta_encoder) < 1e-12
        assert rep.delta_raw == 0.0 and rep.raw_null

    def test_overlap_rejected(self, small_world):
        tr, ev = self._period_b(small_world)
        content = small_world["content"]
        enc = ContentEncoder.init(content.features.shape[1], 8, 8)
        with pytest.raises(DataError, match="period-B items"):
            downstream_eval(enc, tr, ev, FeatureSchema(), self.CFG, content, tr.item_id[:3])

    def test_protocol_small(self, small_world):
        run = two_period_protocol(small_world["log"], small_world["content"], 8 * DAY, 13 * DAY,
                                  TemporalSplit.from_days(17, 2), FeatureSchema(), self.CFG,
                                  hyper=AlignConfig(min_updates=5, recall_k=5), n_boot=20)
        rep = run.downstream
        assert rep.metadata["raw_embedding_hits"] == 0
        assert rep.delta_raw == 0.0
        s = run.summary()
        assert s["n_pairs"] == len(run.dataset) > 10
        assert s["recall_best"] >= s["recall_untrained"]
        assert not np.isin(run.dataset.item_ids, small_world["log"].item_id[
            small_world["log"].timestamp >= 13 * DAY]).any()

    def test_period_order(self, small_world):
        with pytest.raises(ConfigError):
            two_period_protocol(small_world["log"], small_world["content"], 10 * DAY, 5 * DAY,
                                TemporalSplit.from_days(17, 2), FeatureSchema(), self.CFG)
