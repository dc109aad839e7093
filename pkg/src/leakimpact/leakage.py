"""Leaked features and the Leakage Impact Score.

A leak is information the production ranker could not have had at serving
time. Each leak is scored by the AUC it adds on a fixed temporal split:
item-valued and categorical leaks are added as features and the ranker is
retrained; future embeddings are swapped into the already-trained model
without retraining.
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, SchemaError
from .eventlog import DAY, EventLog
from .ranker import (Categorical, ItemList, ItemRef, ModelSnapshot, SortedScores,
                     auc_score, featurize, fit, predict_logits, snapshot_embeddings)
from .ranker.model import extend_schema, lookup_rows

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.0010
LEAK_KINDS = ("next_click", "future_embedding", "similar_items", "constant", "oracle", "custom")


# --------------------------------------------------------------------------
# Leak constructors


def inject_next_click(full_log, target_events):
    """Item id of each target user's first click strictly after the target's
    timestamp, or -1 when there is none."""
    clicks = np.flatnonzero(full_log.label == 1)
    cu = full_log.user_id[clicks]
    ct = full_log.timestamp[clicks]
    ci = full_log.item_id[clicks]
    order = np.lexsort((ct, cu))
    cu, ct, ci = cu[order], ct[order], ci[order]

    tu = target_events.user_id
    tt = target_events.timestamp
    out = np.full(len(target_events), -1, dtype=np.int64)
    if len(cu) == 0 or len(tu) == 0:
        return out
    # first click of the same user with a larger timestamp
    lo = np.searchsorted(cu, tu, side="left")
    hi = np.searchsorted(cu, tu, side="right")
    for u_lo, u_hi, idx in _group_ranges(lo, hi):
        pos = u_lo + np.searchsorted(ct[u_lo:u_hi], tt[idx], side="right")
        ok = pos < u_hi
        out[idx[ok]] = ci[pos[ok]]
    return out


def _group_ranges(lo, hi):
    """Yield ``(lo, hi, target_indices)`` per distinct user range."""
    order = np.argsort(lo, kind="stable")
    lo_s = lo[order]
    starts = np.flatnonzero(np.r_[True, lo_s[1:] != lo_s[:-1]])
    ends = np.r_[starts[1:], len(order)]
    for s, e in zip(starts, ends):
        idx = order[s:e]
        if hi[idx[0]] > lo[idx[0]]:
            yield int(lo[idx[0]]), int(hi[idx[0]]), idx


def _click_incidence(log, upto=None):
    """Binary user x item click matrix of clicks with ``ts < upto``."""
    mask = log.label == 1
    if upto is not None:
        mask &= log.timestamp < upto
    users = log.user_id[mask]
    items = log.item_id[mask]
    if len(users) == 0:
        return None, np.zeros(0, np.int64)
    item_vocab, icol = np.unique(items, return_inverse=True)
    user_vocab, urow = np.unique(users, return_inverse=True)
    X = sp.csr_matrix((np.ones(len(urow)), (urow, icol)), shape=(len(user_vocab), len(item_vocab)))
    X.data[:] = 1.0  # duplicates summed by the constructor
    return X, item_vocab


def _top_k_rows(C, deg, item_vocab, rows, k):
    """Top-k cosine neighbours for ``rows`` of the co-click count matrix ``C``."""
    out = {}
    C = C.tocsr()
    for r_local, r in enumerate(rows):
        a, b = C.indptr[r_local], C.indptr[r_local + 1]
        cols = C.indices[a:b]
        cnt = C.data[a:b]
        keep = (cols != r) & (cnt > 0)
        cols, cnt = cols[keep], cnt[keep]
        if len(cols) == 0:
            out[int(item_vocab[r])] = []
            continue
        # cnt^2 / deg orders like cosine within a row; one rounded division
        # keeps exact ties tied
        key = cnt * cnt / deg[cols]
        ids = item_vocab[cols]
        order = np.lexsort((ids, -key))[:k]
        out[int(item_vocab[r])] = [int(x) for x in ids[order]]
    return out


def cosine_neighbours(X, item_vocab, k, items=None):
    """``{item: top-k cosine neighbours}`` from a binary click matrix."""
    deg = np.asarray(X.sum(axis=0)).ravel()
    if items is None:
        rows = np.arange(len(item_vocab))
    else:
        rows = lookup_rows(item_vocab, np.asarray(items, dtype=np.int64))
        rows = rows[rows >= 0]
    out = {}
    Xc = X.tocsc()
    for lo in range(0, len(rows), 2048):
        chunk = rows[lo:lo + 2048]
        C = (Xc[:, chunk].T @ Xc).tocsr()
        out.update(_top_k_rows(C, deg, item_vocab, chunk, k))
    return out


def build_similar_items(full_log, k=5):
    """Top-``k`` co-click cosine neighbours of every item in ``full_log``.

    Similarity is cosine over binary user click vectors built from the whole
    log, future included. Ties go to the smaller item id; items without any
    co-click get an empty list.
    """
    if k <= 0:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(full_log) == 0:
        raise DataError("build_similar_items needs a non-empty log")
    out = {int(i): [] for i in np.unique(full_log.item_id)}
    X, vocab = _click_incidence(full_log)
    if X is not None:
        out.update(cosine_neighbours(X, vocab, k))
    return out


def neighbour_matrix(neighbours, item_ids, k):
    """Per-event (n, k) neighbour ids padded with -1."""
    uniq, inv = np.unique(np.asarray(item_ids, dtype=np.int64), return_inverse=True)
    table = np.full((len(uniq), k), -1, dtype=np.int64)
    for r, i in enumerate(uniq.tolist()):
        nb = neighbours.get(i, [])[:k]
        table[r, :len(nb)] = nb
    return table[inv.reshape(-1)]


def causal_similar_items(history, targets, k=5, refresh=DAY):
    """Co-click neighbours available in production at each target's time.

    For a target at time ``t`` the neighbour index is rebuilt from clicks in
    ``history`` with timestamps before ``floor(t / refresh) * refresh``. This is
    a legitimate baseline feature, not a leak. Returns an (n, k) id array.
    """
    if k <= 0:
        raise ConfigError(f"k must be >= 1, got {k}")
    out = np.full((len(targets), k), -1, dtype=np.int64)
    bucket = targets.timestamp // refresh
    order = np.argsort(bucket, kind="stable")
    b_sorted = bucket[order]
    starts = np.flatnonzero(np.r_[True, b_sorted[1:] != b_sorted[:-1]])
    ends = np.r_[starts[1:], len(order)]
    for s, e in zip(starts, ends):
        idx = order[s:e]
        cutoff = int(b_sorted[s]) * refresh
        X, vocab = _click_incidence(history, upto=cutoff)
        if X is None:
            continue
        items = np.unique(targets.item_id[idx])
        nb = cosine_neighbours(X, vocab, k, items)
        out[idx] = neighbour_matrix(nb, targets.item_id[idx], k)
    return out


# --------------------------------------------------------------------------
# Embedding substitution


def substitute_future_embeddings(model_T, snap_future):
    """Copy of ``model_T`` whose item ID embedding rows come from ``snap_future``.

    Every item present in the snapshot takes the snapshot's row, including
    items ``model_T`` never saw (their implicit zero row is replaced). Items
    absent from the snapshot keep their rows. Nothing is retrained.
    """
    if snap_future.embed_dim != model_T.embed_dim:
        raise SchemaError(f"embedding width mismatch: model {model_T.embed_dim}, "
                          f"snapshot {snap_future.embed_dim}")
    if snap_future.date_tag <= model_T.cutoff_date:
        raise DataError(f"snapshot date {snap_future.date_tag} is not after the model cutoff "
                        f"{model_T.cutoff_date}")
    out = model_T.copy()
    merged = np.union1d(out.item_ids, snap_future.item_ids)
    table = np.zeros((len(merged), out.embed_dim))
    counts = np.zeros(len(merged), dtype=np.int64)
    pos = np.searchsorted(merged, out.item_ids)
    table[pos] = out.item_emb
    counts[pos] = out.update_counts
    table[np.searchsorted(merged, snap_future.item_ids)] = snap_future.item_embeddings
    out.item_ids, out.item_emb, out.update_counts = merged, table, counts
    return out


def future_snapshot(model_T, full_log, start, horizon_days, cfg, side_fn=None):
    """Continue training ``model_T`` on ``[start, start + horizon)`` and snapshot it."""
    end = start + horizon_days * DAY
    ts = full_log.timestamp
    window = full_log.take(np.flatnonzero((ts >= start) & (ts < end)))
    if len(window) == 0:
        raise DataError(f"no events in the leak horizon [{start}, {end})")
    side = side_fn(window) if side_fn else None
    fm = featurize(window, model_T.schema, side_values=side)
    model = fit(fm, window.label, cfg, window.timestamp, init_model=model_T)
    model.cutoff_date = max(model.cutoff_date, end - 1)
    return snapshot_embeddings(model)


# --------------------------------------------------------------------------
# LIS


@dataclass
class LeakSpec:
    """Which leak to inject.

    ``source`` is the future-inclusive log for ``next_click``,
    ``similar_items`` and ``future_embedding``; a precomputed ``snapshot`` may
    replace training the future model. ``values`` carries
    ``(train_values, eval_values)`` for ``constant``/``custom`` leaks and
    ``(None, eval_probabilities)`` for the ``oracle`` leak.
    """
    kind: str
    horizon_n_days: Optional[int] = None
    k: Optional[int] = None
    source: Optional[EventLog] = None
    snapshot: Optional[ModelSnapshot] = None
    values: Optional[tuple] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LEAK_KINDS:
            raise ConfigError(f"unknown leak kind {self.kind!r}")
        if self.kind == "future_embedding":
            if self.horizon_n_days is None or self.horizon_n_days < 1:
                raise ConfigError("future_embedding needs horizon_n_days >= 1")
        elif self.horizon_n_days is not None:
            raise ConfigError(f"horizon_n_days only applies to future_embedding, not {self.kind}")
        if self.kind == "similar_items":
            if self.k is None:
                self.k = 5
            if self.k < 1:
                raise ConfigError("similar_items needs k >= 1")
        elif self.k is not None:
            raise ConfigError(f"k only applies to similar_items, not {self.kind}")
        if self.kind in ("next_click", "similar_items") and self.source is None:
            raise ConfigError(f"{self.kind} leak needs a source log")
        if self.kind == "future_embedding" and self.source is None and self.snapshot is None:
            raise ConfigError("future_embedding needs a source log or a snapshot")
        if self.kind in ("oracle", "custom") and self.values is None:
            raise ConfigError(f"{self.kind} leak needs values")

    @property
    def label(self):
        if self.name:
            return self.name
        if self.kind == "future_embedding":
            return f"future_embedding_n{self.horizon_n_days}"
        if self.kind == "similar_items":
            return f"similar_items_k{self.k}"
        return self.kind

    @property
    def slot(self):
        return f"leak:{self.label}"

    def describe(self):
        d = {"kind": self.kind, "label": self.label}
        if self.horizon_n_days is not None:
            d["horizon_n_days"] = self.horizon_n_days
        if self.k is not None:
            d["k"] = self.k
        if self.source is not None:
            d["source_events"] = len(self.source)
        if self.snapshot is not None:
            d["snapshot_date_tag"] = int(self.snapshot.date_tag)
        return d


@dataclass
class LISReport:
    auc_base: float
    auc_leak: float
    lis: float
    ci_low: float
    ci_high: float
    n_boot: int
    threshold: float
    significant: bool
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def summary_row(self):
        return {
            "leak": self.metadata.get("leak", {}).get("label", "?"),
            "auc_base": self.auc_base, "auc_leak": self.auc_leak, "lis": self.lis,
            "ci_low": self.ci_low, "ci_high": self.ci_high,
            "significant": self.significant,
        }


def paired_bootstrap(scores_base, scores_leak, labels, n_boot, seed):
    """Percentile CI of the paired AUC delta over eval-event resamples.

    Resample ``b`` draws from ``default_rng([seed, b])`` so results do not
    depend on how resamples are partitioned.
    """
    base = SortedScores(scores_base, labels)
    leak = SortedScores(scores_leak, labels)
    n = len(labels)
    deltas = np.empty(n_boot)
    for b in range(n_boot):
        rng = np.random.default_rng([seed, b])
        w = np.bincount(rng.integers(0, n, n), minlength=n)
        deltas[b] = leak.auc(w) - base.auc(w)
    lo, hi = np.percentile(deltas, [2.5, 97.5])
    return float(lo), float(hi), deltas


def _split_bounds(train_log, eval_log, split):
    if split is not None:
        return split.train_end_T, split.eval_end
    if len(eval_log) == 0:
        raise DataError("empty eval set")
    return int(eval_log.timestamp.min()), int(eval_log.timestamp.max()) + 1


def _leak_values(leak, train_log, eval_log):
    """Per-arm slot values for retrained leak kinds."""
    if leak.kind == "next_click":
        return (ItemRef(inject_next_click(leak.source, train_log)),
                ItemRef(inject_next_click(leak.source, eval_log)))
    if leak.kind == "similar_items":
        nb = build_similar_items(leak.source, leak.k)
        return (ItemList(neighbour_matrix(nb, train_log.item_id, leak.k)),
                ItemList(neighbour_matrix(nb, eval_log.item_id, leak.k)))
    if leak.kind == "constant":
        if leak.values is not None:
            return leak.values
        return (Categorical(["c"] * len(train_log)), Categorical(["c"] * len(eval_log)))
    return leak.values


def coclick_side_values(train_log, eval_log, k=5, refresh=DAY):
    history = EventLog.concat([train_log, eval_log])
    return ({"coclick": ItemList(causal_similar_items(history, train_log, k, refresh))},
            {"coclick": ItemList(causal_similar_items(history, eval_log, k, refresh))})


def _coclick_fn(history):
    def side_fn(window):
        return {"coclick": ItemList(causal_similar_items(history, window))}
    return side_fn


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def fit_baseline(train_log, eval_log, schema_base, cfg, side_values=None, leak_epochs=1):
    """Baseline arm as ``(model, eval_logits, warm_model)``; reusable across leaks.

    ``warm_model`` is the state after the first ``cfg.epochs - leak_epochs``
    epochs (``None`` when that is zero); training is deterministic, so
    continuing it reproduces ``model`` exactly.
    """
    if leak_epochs < 1:
        raise ConfigError("leak_epochs must be >= 1")
    if side_values is None and "coclick" in schema_base.slots:
        side_values = coclick_side_values(train_log, eval_log)
    side_train, side_eval = side_values if side_values is not None else ({}, {})
    shared = max(cfg.epochs - leak_epochs, 0)
    fm_train = featurize(train_log, schema_base, side_values=side_train)
    warm = None
    if shared:
        warm = fit(fm_train, train_log.label, dataclasses.replace(cfg, epochs=shared),
                   train_log.timestamp)
        model = fit(fm_train, train_log.label, dataclasses.replace(cfg, epochs=cfg.epochs - shared),
                    train_log.timestamp, init_model=warm)
        model.config = cfg
    else:
        model = fit(fm_train, train_log.label, cfg, train_log.timestamp)
    scores = predict_logits(model, featurize(eval_log, schema_base, side_values=side_eval))
    return model, scores, warm


def compute_lis(train_log, eval_log, schema_base, leak, cfg, n_boot=200,
                threshold=DEFAULT_THRESHOLD, split=None, side_values=None, boot_seed=None,
                base=None, leak_epochs=1):
    """Paired baseline-vs-leaked evaluation.

    ``side_values`` is ``(train_side, eval_side)`` for non-leak external slots
    such as ``coclick``; it is computed when the schema needs co-click
    neighbours and none is given. ``base`` may pass a precomputed baseline
    arm, as returned by :func:`fit_baseline`. Both arms share ``cfg`` and
    seeds, so the leak is the only difference.

    Retrained leaks share the first ``cfg.epochs - leak_epochs`` epochs with
    the baseline: the baseline arm finishes its remaining epochs unchanged,
    the leaked arm runs them with the leak slot added. ``leak_epochs >=
    cfg.epochs`` trains the leaked arm from scratch.
    """
    if not schema_base.is_baseline:
        raise SchemaError("schema_base must not contain leak or dense slots")
    t_start, t_end = _split_bounds(train_log, eval_log, split)
    if len(train_log) and train_log.timestamp.max() >= t_start:
        raise DataError("train events at or after the split point")
    if len(eval_log) and (eval_log.timestamp.min() < t_start or eval_log.timestamp.max() >= t_end):
        raise DataError("eval events outside the eval window")
    if leak.source is not None and leak.kind in ("next_click", "similar_items"):
        if leak.source.timestamp.max() < eval_log.timestamp.max():
            raise DataError("leak source does not cover the eval horizon")
    if leak.kind == "future_embedding":
        if leak.horizon_n_days * DAY < t_end - t_start:
            raise DataError(f"leak horizon n={leak.horizon_n_days}d is shorter than the eval window")
        if leak.snapshot is None and leak.source.timestamp.max() < t_end - 1:
            raise DataError("leak source does not cover the eval horizon")
    boot_seed = cfg.seed if boot_seed is None else boot_seed

    if side_values is None and "coclick" in schema_base.slots:
        side_values = coclick_side_values(train_log, eval_log)
    side_train, side_eval = side_values if side_values is not None else ({}, {})

    if base is None:
        base = fit_baseline(train_log, eval_log, schema_base, cfg, side_values, leak_epochs)
    elif leak_epochs < 1:
        raise ConfigError("leak_epochs must be >= 1")
    shared = max(cfg.epochs - leak_epochs, 0)
    model_base, s_base = base[:2]
    warm = base[2] if len(base) > 2 else None
    auc_base = auc_score(s_base, eval_log.label)

    if leak.kind == "future_embedding":
        snap = leak.snapshot
        if snap is None:
            side_fn = _coclick_fn(leak.source) if "coclick" in schema_base.slots else None
            snap = future_snapshot(model_base, leak.source, t_start, leak.horizon_n_days, cfg, side_fn)
        leaked_model = substitute_future_embeddings(model_base, snap)
        s_leak = predict_logits(leaked_model, featurize(eval_log, schema_base, side_values=side_eval))
    elif leak.kind == "oracle":
        probs = np.asarray(leak.values[1] if isinstance(leak.values, tuple) else leak.values,
                           dtype=np.float64)
        if len(probs) != len(eval_log):
            raise DataError("oracle leak needs one probability per eval event")
        s_leak = probs
    else:
        v_train, v_eval = _leak_values(leak, train_log, eval_log)
        schema_leak = schema_base.with_slots(leak.slot)
        fm_train = featurize(train_log, schema_leak, {leak.slot: v_train}, side_train)
        if shared and warm is None:
            fm_b = featurize(train_log, schema_base, side_values=side_train)
            warm = fit(fm_b, train_log.label, dataclasses.replace(cfg, epochs=shared), train_log.timestamp)
        if shared:
            init = extend_schema(warm, schema_leak, fm_train.dense_layout, fm_train.list_layout)
            model_leak = fit(fm_train, train_log.label, dataclasses.replace(cfg, epochs=cfg.epochs - shared),
                             train_log.timestamp, init_model=init)
        else:
            model_leak = fit(fm_train, train_log.label, cfg, train_log.timestamp)
        fm_eval = featurize(eval_log, schema_leak, {leak.slot: v_eval}, side_eval)
        s_leak = predict_logits(model_leak, fm_eval)
    auc_leak = auc_score(s_leak, eval_log.label)

    lis = auc_leak - auc_base
    ci_low, ci_high, _ = paired_bootstrap(s_base, s_leak, eval_log.label, n_boot, boot_seed)
    meta = {
        "leak": leak.describe(),
        "split": {"train_end_T": int(t_start), "eval_end": int(t_end)},
        "schema_base": schema_base.to_dict(),
        "train_config": cfg.to_dict(),
        "boot_seed": int(boot_seed), "leak_epochs": int(min(leak_epochs, cfg.epochs)),
        "n_train": len(train_log), "n_eval": len(eval_log),
    }
    return LISReport(
        auc_base=float(auc_base), auc_leak=float(auc_leak), lis=float(lis),
        ci_low=ci_low, ci_high=ci_high, n_boot=int(n_boot), threshold=float(threshold),
        significant=bool(lis > threshold and ci_low > 0), metadata=meta,
    )
