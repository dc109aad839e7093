"""Distil leaked item ID embeddings into a content encoder and test whether the
distilled representation transfers to items the encoder never saw.

The encoder is a two-layer perceptron trained with a cosine-distance loss and
monitored by in-validation-set mean recall. Downstream, a ranker on a later,
item-disjoint period is trained three ways: baseline, baseline plus the
encoder output as a dense item feature, and baseline plus the raw leaked
embeddings looked up by item id (which are missing for every new item).
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DataError, NumericError
from .eventlog import temporal_split
from .leakage import DEFAULT_THRESHOLD, config_hash, paired_bootstrap
from .ranker import Dense, auc_score, featurize, fit, predict_logits
from .ranker.model import snapshot_embeddings

logger = logging.getLogger(__name__)

_NORM_EPS = 1e-12


def l2_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > _NORM_EPS, x / np.maximum(n, _NORM_EPS), 0.0)


# --------------------------------------------------------------------------
# Alignment data


@dataclass(frozen=True)
class AlignmentDataset:
    """Item id, content vector and target embedding per included item."""

    item_ids: np.ndarray
    content: np.ndarray
    targets: np.ndarray
    min_updates: int = 0

    def __post_init__(self):
        ids = np.asarray(self.item_ids, dtype=np.int64)
        content = np.asarray(self.content, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if content.ndim != 2 or targets.ndim != 2 or not len(ids) == len(content) == len(targets):
            raise DataError("alignment data needs one content row and one target row per item")
        if len(np.unique(ids)) != len(ids):
            raise DataError("duplicate item_id in alignment data")
        object.__setattr__(self, "item_ids", ids)
        object.__setattr__(self, "content", content)
        object.__setattr__(self, "targets", targets)

    def __len__(self):
        return len(self.item_ids)

    @property
    def pairs(self):
        return list(zip(self.item_ids.tolist(), self.content, self.targets))

    def take(self, index):
        return AlignmentDataset(self.item_ids[index], self.content[index], self.targets[index],
                                self.min_updates)

    def without_items(self, item_ids):
        return self.take(np.flatnonzero(~np.isin(self.item_ids, item_ids)))

    def export(self, path):
        """One JSON object per line, for inspection."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"min_updates": int(self.min_updates), "n_pairs": len(self)}) + "\n")
            for i, c, t in self.pairs:
                fh.write(json.dumps({"item_id": i, "content": [float(x) for x in c],
                                     "target": [float(x) for x in t]}) + "\n")


def build_alignment_data(snap, content, min_updates=50):
    """Pairs for every item in both tables with ``update_counts >= min_updates``."""
    ids = np.intersect1d(snap.item_ids, content.item_ids)
    if len(ids) == 0:
        raise DataError("snapshot and content table share no items")
    rows = snap.rows(ids)
    keep = snap.update_counts[rows] >= min_updates
    if not keep.any():
        raise DataError(f"filter too strict: no item has >= {min_updates} updates "
                        f"(max {int(snap.update_counts[rows].max())})")
    ids = ids[keep]
    return AlignmentDataset(ids, content.lookup(ids), snap.item_embeddings[rows[keep]],
                            int(min_updates))


# --------------------------------------------------------------------------
# Encoder


@dataclass(frozen=True)
class AlignConfig:
    hidden: int = 32
    learning_rate: float = 0.01
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    recall_k: int = 10
    val_fraction: float = 0.2
    min_updates: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid AlignConfig {self}")
        if self.learning_rate <= 0 or self.recall_k < 1 or self.min_updates < 0:
            raise ConfigError(f"invalid AlignConfig {self}")
        if not 0 < self.val_fraction <= 0.5:
            raise ConfigError("val_fraction must be in (0, 0.5]")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ContentEncoder:
    """``tanh(x W1 + b1) W2 + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.W2.shape[1] >= 100:
            raise ConfigError(f"encoder output width must be < 100, got {self.W2.shape[1]}")

    @classmethod
    def init(cls, in_dim, hidden, out_dim, seed=0):
        rng = np.random.default_rng(seed)
        a1 = np.sqrt(6.0 / (in_dim + hidden))
        a2 = np.sqrt(6.0 / (hidden + out_dim))
        return cls(rng.uniform(-a1, a1, (in_dim, hidden)), np.zeros(hidden),
                   rng.uniform(-a2, a2, (hidden, out_dim)), np.zeros(out_dim), seed)

    @property
    def widths(self):
        return (self.W1.shape[0], self.W1.shape[1], self.W2.shape[1])

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self):
        return ContentEncoder(*(p.copy() for p in self.params()), self.seed, dict(self.meta))

    def encode(self, x):
        h = np.tanh(np.asarray(x, dtype=np.float64) @ self.W1 + self.b1)
        return h @ self.W2 + self.b2

    __call__ = encode

    def save(self, path):
        write_container(path, dict(zip(("W1", "b1", "W2", "b2"), self.params())),
                        {"kind": "content_encoder", "widths": list(self.widths),
                         "seed": int(self.seed), "meta": self.meta})

    @classmethod
    def load(cls, path):
        arrays, meta = read_container(path)
        if meta.get("kind") != "content_encoder":
            raise DataError(f"{path}: not a content encoder file")
        return cls(arrays["W1"], arrays["b1"], arrays["W2"], arrays["b2"], int(meta["seed"]),
                   meta.get("meta", {}))


def cosine_loss(encoder, x, t):
    """Mean cosine distance and its gradients with respect to the parameters."""
    pre = x @ encoder.W1 + encoder.b1
    h = np.tanh(pre)
    y = h @ encoder.W2 + encoder.b2
    ny = np.maximum(np.linalg.norm(y, axis=1, keepdims=True), _NORM_EPS)
    nt = np.maximum(np.linalg.norm(t, axis=1, keepdims=True), _NORM_EPS)
    cos = np.sum(y * t, axis=1, keepdims=True) / (ny * nt)
    n = len(x)
    loss = float(np.mean(1.0 - cos))
    gy = -(t / (ny * nt) - cos * y / ny ** 2) / n
    gW2 = h.T @ gy
    gb2 = gy.sum(axis=0)
    gpre = (gy @ encoder.W2.T) * (1.0 - h ** 2)
    gW1 = x.T @ gpre
    gb1 = gpre.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2]


@dataclass
class RecallReport:
    k: int
    mean_recall_at_k: float
    n_queries: int

    def to_dict(self):
        return dataclasses.asdict(self)


def recall_ranks(outputs, targets, item_ids):
    """Rank of each query's own target among all targets (0 = first).

    Similarity is cosine; targets tied with the own target rank ahead of it
    when their item id is smaller.
    """
    sims = l2_normalize(outputs) @ l2_normalize(targets).T
    own = np.diag(sims)[:, None]
    ids = np.asarray(item_ids)
    ahead = (sims > own) | ((sims == own) & (ids[None, :] < ids[:, None]))
    return ahead.sum(axis=1)


def mean_recall(encoder, val, k):
    """In-set retrieval: queries and corpus are both ``val``."""
    n = len(val)
    if k >= n:
        raise ConfigError(f"recall@{k} needs more than {k} validation pairs, got {n}")
    out = encoder.encode(val.content) if encoder is not None else val.content
    ranks = recall_ranks(out, val.targets, val.item_ids)
    return RecallReport(int(k), float(np.mean(ranks < k)), int(n))


def split_alignment(data, val_fraction, seed):
    n = len(data)
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return data.take(np.sort(perm[n_val:])), data.take(np.sort(perm[:n_val]))


def train_encoder(data, val_fraction=None, hyper=None):
    """Adam on the cosine-distance loss with recall-based early stopping.

    Returns ``(best_encoder, history)``; ``history[0]`` is the untrained
    encoder and ``history[e]`` the recall after epoch ``e``.
    """
    hyper = hyper or AlignConfig()
    if val_fraction is not None:
        hyper = dataclasses.replace(hyper, val_fraction=val_fraction)
    if len(data) < 10:
        raise DataError(f"need at least 10 alignment pairs, got {len(data)}")
    tr, va = split_alignment(data, hyper.val_fraction, hyper.seed)
    k = hyper.recall_k
    if len(va) <= k:
        raise ConfigError(f"validation split has {len(va)} pairs, recall@{k} needs more")

    enc = ContentEncoder.init(data.content.shape[1], hyper.hidden, data.targets.shape[1], hyper.seed)
    rng = np.random.default_rng([hyper.seed, 11])
    m = [np.zeros_like(p) for p in enc.params()]
    v = [np.zeros_like(p) for p in enc.params()]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = [mean_recall(enc, va, k)]
    best, best_recall, best_epoch, stale = enc.copy(), history[0].mean_recall_at_k, 0, 0
    losses = []
    for epoch in range(1, hyper.max_epochs + 1):
        last = enc.copy()
        order = rng.permutation(len(tr))
        total = 0.0
        for lo in range(0, len(tr), hyper.batch_size):
            idx = order[lo:lo + hyper.batch_size]
            loss, grads = cosine_loss(enc, tr.content[idx], tr.targets[idx])
            total += loss * len(idx)
            step += 1
            for p, g, mi, vi in zip(enc.params(), grads, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= hyper.learning_rate * (mi / (1 - b1 ** step)) / (np.sqrt(vi / (1 - b2 ** step)) + eps)
        total /= len(tr)
        if not np.isfinite(total) or not all(np.all(np.isfinite(p)) for p in enc.params()):
            raise NumericError(f"encoder training diverged in epoch {epoch}", last_state=last)
        losses.append(total)
        rep = mean_recall(enc, va, k)
        history.append(rep)
        logger.debug("epoch %d: loss %.5f recall@%d %.4f", epoch, total, k, rep.mean_recall_at_k)
        if rep.mean_recall_at_k > best_recall:
            best, best_recall, best_epoch, stale = enc.copy(), rep.mean_recall_at_k, epoch, 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    best.meta = {"best_epoch": best_epoch, "epochs_run": len(history) - 1,
                 "train_losses": losses, "config": hyper.to_dict(),
                 "n_train": len(tr), "n_val": len(va), "min_updates": int(data.min_updates)}
    return best, history


# --------------------------------------------------------------------------
# Downstream evaluation


@dataclass
class DownstreamReport:
    auc_base: float
    auc_encoder: float
    auc_raw: float
    delta_encoder: float
    delta_raw: float
    ci_encoder: tuple
    ci_raw: tuple
    threshold: float
    metadata: dict = field(default_factory=dict)

    @property
    def raw_null(self):
        return abs(self.delta_raw) < self.threshold

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ci_encoder"] = list(self.ci_encoder)
        d["ci_raw"] = list(self.ci_raw)
        d["raw_null"] = self.raw_null
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _dense_rows(ids, table_ids, table):
    """Rows of ``table`` for ``ids``; zero rows where the id is absent."""
    out = np.zeros((len(ids), table.shape[1]))
    if len(table_ids) == 0:
        return out
    order = np.argsort(table_ids, kind="stable")
    sid = table_ids[order]
    pos = np.clip(np.searchsorted(sid, ids), 0, len(sid) - 1)
    hit = sid[pos] == ids
    out[hit] = table[order[pos[hit]]]
    return out


def downstream_eval(encoder, train_b, eval_b, schema_base, cfg, content, align_items,
                    snapshot=None, n_boot=200, threshold=DEFAULT_THRESHOLD):
    """Paired evaluation of the encoder feature (arm 2) and the raw leaked
    embeddings (arm 3) against the baseline (arm 1), all on period B.

    ``align_items`` are the items the encoder was aligned on; any of them
    appearing in period B is an error.
    """
    b_items = np.union1d(train_b.item_id, eval_b.item_id)
    overlap = np.intersect1d(b_items, align_items)
    if len(overlap):
        raise DataError(f"{len(overlap)} period-B items appear in the alignment data "
                        f"(e.g. {overlap[:5].tolist()})")
    if not schema_base.is_baseline:
        raise ConfigError("schema_base must not contain leak or dense slots")

    def arm(slot=None, lookup=None):
        schema = schema_base if slot is None else schema_base.with_slots(slot)
        vals = {}
        if slot is not None:
            vals = {slot: Dense(lookup(train_b.item_id))}
        fm = featurize(train_b, schema, side_values=vals)
        model = fit(fm, train_b.label, cfg, train_b.timestamp)
        if slot is not None:
            vals = {slot: Dense(lookup(eval_b.item_id))}
        return predict_logits(model, featurize(eval_b, schema, side_values=vals))

    enc_table = l2_normalize(encoder.encode(content.features))

    def enc_lookup(ids):
        return _dense_rows(ids, content.item_ids, enc_table)

    E = encoder.widths[2]
    if snapshot is not None:
        raw_ids, raw_table = snapshot.item_ids, l2_normalize(snapshot.item_embeddings)
    else:
        raw_ids, raw_table = np.zeros(0, np.int64), np.zeros((0, E))

    def raw_lookup(ids):
        return _dense_rows(ids, raw_ids, raw_table)

    y = eval_b.label
    s1 = arm()
    s2 = arm("dense:content_encoder", enc_lookup)
    s3 = arm("dense:leaked_embedding", raw_lookup)
    a1, a2, a3 = auc_score(s1, y), auc_score(s2, y), auc_score(s3, y)
    ci2 = paired_bootstrap(s1, s2, y, n_boot, cfg.seed)[:2]
    ci3 = paired_bootstrap(s1, s3, y, n_boot, cfg.seed)[:2]
    raw_hits = int(np.isin(eval_b.item_id, raw_ids).sum())
    meta = {
        "n_train": len(train_b), "n_eval": len(eval_b), "n_align_items": int(len(align_items)),
        "raw_embedding_hits": raw_hits, "encoder_widths": list(encoder.widths),
        "schema_base": schema_base.to_dict(), "train_config": cfg.to_dict(),
    }
    return DownstreamReport(float(a1), float(a2), float(a3), float(a2 - a1), float(a3 - a1),
                            tuple(ci2), tuple(ci3), float(threshold), meta)


# --------------------------------------------------------------------------
# Two-period protocol


@dataclass
class AlignmentRun:
    dataset: AlignmentDataset
    encoder: ContentEncoder
    history: list
    downstream: DownstreamReport
    snapshot: object

    def summary(self):
        best = self.encoder.meta.get("best_epoch", 0)
        return {
            "n_pairs": len(self.dataset), "min_updates": int(self.dataset.min_updates),
            "best_epoch": best, "recall_untrained": self.history[0].mean_recall_at_k,
            "recall_best": self.history[best].mean_recall_at_k,
            "delta_encoder": self.downstream.delta_encoder, "delta_raw": self.downstream.delta_raw,
        }


def two_period_protocol(log, content, period_a_end, period_b_start, b_split, schema, cfg,
                        hyper=None, n_boot=200, threshold=DEFAULT_THRESHOLD, model_a=None):
    """Align on period A, then evaluate on the item-disjoint period B.

    A ranker trained on all of ``[0, period_a_end)`` plays the leaked future
    model; its item embeddings are the alignment targets. Items that occur in
    period B are removed from the alignment data so the encoder never sees
    them. Period B runs from ``period_b_start`` and is cut by ``b_split``
    (absolute times) into train and eval.
    """
    hyper = hyper or AlignConfig()
    if period_b_start < period_a_end:
        raise ConfigError("period B must start at or after the end of period A")
    ts = log.timestamp
    log_a = log.take(np.flatnonzero(ts < period_a_end))
    log_b = log.take(np.flatnonzero(ts >= period_b_start))
    if len(log_a) == 0 or len(log_b) == 0:
        raise DataError("empty alignment or downstream period")
    if model_a is None:
        model_a = fit(featurize(log_a, schema), log_a.label, cfg, log_a.timestamp)
    snap = snapshot_embeddings(model_a)
    train_b, eval_b = temporal_split(log_b, b_split)
    data = build_alignment_data(snap, content, hyper.min_updates)
    data = data.without_items(np.union1d(train_b.item_id, eval_b.item_id))
    if len(data) == 0:
        raise DataError("every aligned item also occurs in period B")
    encoder, history = train_encoder(data, hyper=hyper)
    report = downstream_eval(encoder, train_b, eval_b, schema, cfg, content, data.item_ids,
                             snapshot=snap, n_boot=n_boot, threshold=threshold)
    report.metadata["align_config"] = hyper.to_dict()
    report.metadata["align_config_hash"] = config_hash(hyper.to_dict())
    return AlignmentRun(data, encoder, history, report, snap)


__all__ = ["AlignConfig", "AlignmentDataset", "AlignmentRun", "ContentEncoder", "DownstreamReport",
           "RecallReport", "build_alignment_data", "cosine_loss", "downstream_eval", "l2_normalize",
           "mean_recall", "recall_ranks", "split_alignment", "train_encoder", "two_period_protocol"]
