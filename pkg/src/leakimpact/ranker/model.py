"""Hashed sparse logistic regression with user/item ID embeddings.

The score of one event is::

    s = bias + sum_j v_j * w[h_j] + <d, x> + <U, I>
    U = a * e_user + sum_a a * Q e_item[ref_a]         (user-side item references)
    I = e_item + sum_l R_l mean_b e_item[ref_lb] + P x  (item lists, dense)

User-side references (e.g. an item the user clicked) are mapped into user
space by a shared matrix ``Q`` that starts at zero; the user-side bag is
mean-pooled (``a = 1/bag size``). Each item list (e.g. neighbours of the
candidate) contributes the mean of its members' embeddings through its own
matrix ``R_l``, also starting at zero, so adding a list leaves the scores of
an existing model unchanged until training moves ``R_l``.

The per-event objective is the log-loss of ``sigmoid(s)`` plus
``l2/2`` times the squared norm of every distinct parameter the event touches
(the bias is not regularised).
"""
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from ..container import read_container, write_container
from ..errors import AUCUndefinedError, DataError, NumericError, SchemaError
from .features import FeatureSchema, featurize
from .kernel import sgd_pass

logger = logging.getLogger(__name__)

_CHUNK = 200_000
OPTIMIZERS = ("sgd", "adagrad", "hybrid", "adagrad_emb")
# optimizer -> Adagrad on (linear params, projections, embedding rows)
_ADAGRAD_FLAGS = {"sgd": (False, False, False), "adagrad": (True, True, True),
                  "hybrid": (True, True, False), "adagrad_emb": (False, True, True)}
# accumulator name -> parameter it belongs to; embedding tables use one per row
_ACCUM = {"w": "linear_weights", "b": None, "u": "user_emb", "i": "item_emb", "q": "ref_proj",
          "r": "list_proj", "dl": "dense_linear", "dp": "dense_proj"}


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser settings.

    ``learning_rate`` drives embeddings and projections, ``linear_learning_rate``
    the bias and hashed/dense linear weights. ``optimizer`` picks where Adagrad
    scaling applies (see ``_ADAGRAD_FLAGS``); the default keeps linear
    weights on plain SGD so a newly added slot does not start with a large
    effective step.
    """
    learning_rate: float = 0.3
    linear_learning_rate: float = 0.003
    epochs: int = 2
    l2: float = 1e-6
    seed: int = 0
    shuffle: bool = False
    init_scale: float = 0.001
    optimizer: str = "adagrad_emb"
    initial_accumulator: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.linear_learning_rate <= 0 or self.epochs < 1 or self.l2 < 0 or self.init_scale < 0:
            raise SchemaError(f"invalid TrainConfig {self}")
        if self.optimizer not in OPTIMIZERS:
            raise SchemaError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.initial_accumulator <= 0:
            raise SchemaError("initial_accumulator must be > 0")

    def to_dict(self):
        return dataclasses.asdict(self)


def sigmoid(s):
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logloss(s, y):
    z = np.where(np.asarray(y) == 1, s, -np.asarray(s))
    return np.logaddexp(0.0, -z)


def _init_rows(ids, tag, seed, dim, scale):
    out = np.empty((len(ids), dim))
    for r, i in enumerate(ids.tolist()):
        out[r] = np.random.default_rng([seed, tag, i]).standard_normal(dim)
    return out * scale


def lookup_rows(vocab, ids):
    """Row of each id in the sorted ``vocab``; -1 for unknown or negative ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(vocab) == 0:
        return np.full(ids.shape, -1, dtype=np.int64)
    pos = np.searchsorted(vocab, ids)
    pos = np.clip(pos, 0, len(vocab) - 1)
    hit = (vocab[pos] == ids) & (ids >= 0)
    return np.where(hit, pos, -1).astype(np.int64)


@dataclass
class RankModel:
    schema: FeatureSchema
    linear_weights: np.ndarray
    bias: float
    user_ids: np.ndarray
    user_emb: np.ndarray
    item_ids: np.ndarray
    item_emb: np.ndarray
    update_counts: np.ndarray
    ref_proj: np.ndarray
    dense_layout: tuple
    dense_linear: np.ndarray
    dense_proj: np.ndarray
    cutoff_date: int
    config: TrainConfig
    list_layout: tuple = ()
    list_proj: np.ndarray = None
    warnings: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    accum: dict = field(default_factory=dict)

    @property
    def embed_dim(self):
        return self.schema.embed_dim

    def item_embeddings(self):
        return {int(i): self.item_emb[r].copy() for r, i in enumerate(self.item_ids)}

    def user_embeddings(self):
        return {int(u): self.user_emb[r].copy() for r, u in enumerate(self.user_ids)}

    def counts(self):
        return {int(i): int(c) for i, c in zip(self.item_ids, self.update_counts)}

    def copy(self):
        return dataclasses.replace(
            self,
            linear_weights=self.linear_weights.copy(),
            user_ids=self.user_ids.copy(), user_emb=self.user_emb.copy(),
            item_ids=self.item_ids.copy(), item_emb=self.item_emb.copy(),
            update_counts=self.update_counts.copy(),
            ref_proj=self.ref_proj.copy(), list_proj=self.list_proj.copy(),
            dense_linear=self.dense_linear.copy(), dense_proj=self.dense_proj.copy(),
            warnings=list(self.warnings), epoch_losses=list(self.epoch_losses),
            accum={k: v.copy() for k, v in self.accum.items()},
        )

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        arrays = {
            "linear_weights": self.linear_weights, "user_ids": self.user_ids,
            "user_emb": self.user_emb, "item_ids": self.item_ids, "item_emb": self.item_emb,
            "update_counts": self.update_counts, "ref_proj": self.ref_proj,
            "list_proj": self.list_proj,
            "dense_linear": self.dense_linear,
            "dense_proj": self.dense_proj, "bias": np.array([self.bias]),
        }
        arrays.update({f"accum_{k}": v for k, v in self.accum.items()})
        meta = {
            "kind": "rank_model", "schema": self.schema.to_dict(),
            "dense_layout": [list(x) for x in self.dense_layout],
            "list_layout": list(self.list_layout),
            "cutoff_date": int(self.cutoff_date), "config": self.config.to_dict(),
            "warnings": list(self.warnings), "epoch_losses": [float(x) for x in self.epoch_losses],
        }
        write_container(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = read_container(path)
        if meta.get("kind") != "rank_model":
            raise DataError(f"{path}: not a rank model file")
        return cls(
            schema=FeatureSchema.from_dict(meta["schema"]),
            linear_weights=arrays["linear_weights"], bias=float(arrays["bias"][0]),
            user_ids=arrays["user_ids"], user_emb=arrays["user_emb"],
            item_ids=arrays["item_ids"], item_emb=arrays["item_emb"],
            update_counts=arrays["update_counts"],
            ref_proj=arrays["ref_proj"],
            list_layout=tuple(meta["list_layout"]), list_proj=arrays["list_proj"],
            dense_layout=tuple((s, int(w)) for s, w in meta["dense_layout"]),
            dense_linear=arrays["dense_linear"], dense_proj=arrays["dense_proj"],
            cutoff_date=int(meta["cutoff_date"]), config=TrainConfig(**meta["config"]),
            warnings=list(meta["warnings"]), epoch_losses=list(meta["epoch_losses"]),
            accum={k[6:]: v for k, v in arrays.items() if k.startswith("accum_")},
        )


def _empty_model(schema, dense_layout, cfg, list_layout=()):
    E = schema.embed_dim
    D = sum(w for _, w in dense_layout)
    proj = np.zeros((E, D))
    off = 0
    for _, width in dense_layout:
        k = min(E, width)
        proj[np.arange(k), off + np.arange(k)] = 1.0
        off += width
    return RankModel(
        schema=schema, linear_weights=np.zeros(schema.hash_dim), bias=0.0,
        user_ids=np.zeros(0, np.int64), user_emb=np.zeros((0, E)),
        item_ids=np.zeros(0, np.int64), item_emb=np.zeros((0, E)),
        update_counts=np.zeros(0, np.int64),
        ref_proj=np.zeros((E, E)),
        list_layout=tuple(list_layout), list_proj=np.zeros((len(list_layout), E, E)),
        dense_layout=tuple(dense_layout),
        dense_linear=np.zeros(D), dense_proj=proj, cutoff_date=-1, config=cfg,
    )


def _grow(ids, table, new_ids, tag, cfg, dim):
    """Merge ``new_ids`` into a sorted vocabulary, initialising unseen rows."""
    fresh = np.setdiff1d(new_ids, ids)
    if len(fresh) == 0:
        return ids, table, np.arange(len(ids))
    merged = np.union1d(ids, fresh)
    out = np.empty((len(merged), dim))
    old_pos = np.searchsorted(merged, ids)
    out[old_pos] = table
    out[np.searchsorted(merged, fresh)] = _init_rows(fresh, tag, cfg.seed, dim, cfg.init_scale)
    return merged, out, old_pos


def extend_schema(model, schema, dense_layout=None, list_layout=None):
    """Copy of ``model`` under a wider ``schema`` that keeps every existing slot.

    Parameters of the new slots start as a fresh model would: hashed weights
    at zero (they share the table), new dense blocks with zero linear weights
    and an identity projection, new item lists with a zero projection.
    """
    missing = [s for s in model.schema.slots if s not in schema.slots]
    if missing or schema.hash_dim != model.schema.hash_dim or schema.embed_dim != model.schema.embed_dim:
        raise SchemaError(f"schema does not extend the model schema (missing {missing})")
    dense_layout = tuple(dense_layout if dense_layout is not None else model.dense_layout)
    if dense_layout[:len(model.dense_layout)] != tuple(model.dense_layout):
        raise SchemaError("dense layout must extend the model's layout")
    list_layout = tuple(list_layout if list_layout is not None else model.list_layout)
    if list_layout[:len(model.list_layout)] != tuple(model.list_layout):
        raise SchemaError("item list layout must extend the model's layout")
    out = model.copy()
    out.schema = schema
    fresh = _empty_model(schema, dense_layout, model.config)
    D0 = model.dense_linear.shape[0]
    fresh.dense_linear[:D0] = model.dense_linear
    fresh.dense_proj[:, :D0] = model.dense_proj
    out.dense_layout, out.dense_linear, out.dense_proj = dense_layout, fresh.dense_linear, fresh.dense_proj
    for k in ("dl", "dp"):
        out.accum.pop(k, None)
    E = schema.embed_dim
    n_new = len(list_layout) - len(model.list_layout)
    out.list_layout = list_layout
    out.list_proj = np.concatenate([model.list_proj, np.zeros((n_new, E, E))])
    if "r" in out.accum:
        fill = np.full((n_new, E, E), model.config.initial_accumulator)
        out.accum["r"] = np.concatenate([out.accum["r"], fill])
    return out


def _regrow(arr, old_pos, n, fill):
    out = np.full(n, fill, dtype=arr.dtype)
    out[old_pos] = arr
    return out


def _accumulators(model, cfg):
    """Adagrad state aligned with the current parameter shapes.

    Accumulators survive continued training; a model trained with plain SGD
    starts them fresh when continued with Adagrad.
    """
    acc = {}
    for k, attr in _ACCUM.items():
        if attr is None:
            shape = (1,)
        elif k in ("u", "i"):
            shape = (len(getattr(model, attr)),)
        else:
            shape = getattr(model, attr).shape
        old = model.accum.get(k)
        acc[k] = old.copy() if old is not None and old.shape == shape else np.full(shape, cfg.initial_accumulator)
    return acc


def _check_matrix(model, fm):
    if fm.schema != model.schema:
        raise SchemaError("feature matrix was built under a different schema than the model")
    if tuple(fm.dense_layout) != tuple(model.dense_layout):
        raise SchemaError(f"dense dimension mismatch: model expects {model.dense_layout}, "
                          f"got {fm.dense_layout}")
    if tuple(fm.list_layout) != tuple(model.list_layout):
        raise SchemaError(f"item list mismatch: model expects {model.list_layout}, "
                          f"got {fm.list_layout}")


def _rows(model, fm):
    return (lookup_rows(model.user_ids, fm.user_id), lookup_rows(model.item_ids, fm.item_id),
            lookup_rows(model.item_ids, fm.user_refs), lookup_rows(model.item_ids, fm.item_refs))


def fit(fm, labels, cfg, timestamps=None, init_model=None):
    """Train on a prebuilt feature matrix. See :func:`train`."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(fm)
    if n == 0:
        raise DataError("cannot train on an empty log")
    schema = fm.schema
    E = schema.embed_dim
    if init_model is None:
        model = _empty_model(schema, fm.dense_layout, cfg, fm.list_layout)
    else:
        _check_matrix(init_model, fm)
        model = init_model.copy()
        model.config = cfg

    item_ids = np.concatenate([fm.item_id, fm.user_refs.ravel(), fm.item_refs.ravel()])
    item_ids = np.unique(item_ids[item_ids >= 0])
    acc = _accumulators(model, cfg)
    users, utable, uold = _grow(model.user_ids, model.user_emb, np.unique(fm.user_id), 1, cfg, E)
    acc["u"] = _regrow(acc["u"], uold, len(users), cfg.initial_accumulator)
    model.user_ids, model.user_emb = users, utable
    items, table, old_pos = _grow(model.item_ids, model.item_emb, item_ids, 2, cfg, E)
    acc["i"] = _regrow(acc["i"], old_pos, len(items), cfg.initial_accumulator)
    model.update_counts = _regrow(model.update_counts, old_pos, len(items), 0)
    model.item_ids, model.item_emb = items, table
    model.accum = acc

    if labels.min() == labels.max():
        msg = f"single-class training data (all labels = {labels[0]})"
        logger.warning(msg)
        model.warnings.append(msg)

    urow, irow, uref, iref = _rows(model, fm)
    bias = np.array([model.bias])
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = sgd_pass(order, fm.cat_idx, fm.cat_val, urow, fm.user_scale, irow, fm.item_scale,
                         uref, fm.user_ref_w, iref, fm.item_ref_w, fm.item_ref_list, fm.dense,
                         labels, model.linear_weights, bias, model.user_emb, model.item_emb,
                         model.ref_proj, model.list_proj, model.dense_linear, model.dense_proj,
                         acc["w"], acc["b"], acc["u"], acc["i"], acc["q"], acc["r"], acc["dl"],
                         acc["dp"], cfg.linear_learning_rate, cfg.learning_rate, cfg.l2,
                         schema.uses_embeddings, *_ADAGRAD_FLAGS[cfg.optimizer],
                         model.update_counts)
        model.bias = float(bias[0])
        if not np.isfinite(total) or not np.isfinite(model.bias):
            raise NumericError(f"training diverged in epoch {epoch}", last_state=model)
        model.epoch_losses.append(float(np.mean(logloss(predict_logits(model, fm), labels))))
        logger.debug("epoch %d: train log-loss %.6f", epoch, model.epoch_losses[-1])
    if timestamps is not None and len(timestamps):
        model.cutoff_date = max(int(model.cutoff_date), int(np.max(timestamps)))
    return model


def train(train_log, schema, cfg, leak_values=None, side_values=None, init_model=None):
    """Fit by chronological per-event SGD (shuffled when ``cfg.shuffle``).

    ``update_counts`` grows by one per training event for the event's item, per
    epoch. With ``init_model`` training continues from a copy of that model,
    which is how a later snapshot of the same production model is produced.
    """
    fm = featurize(train_log, schema, leak_values, side_values)
    return fit(fm, train_log.label, cfg, train_log.timestamp, init_model)


def predict_logits(model, fm):
    _check_matrix(model, fm)
    E = model.embed_dim
    use = 1.0 if model.schema.uses_embeddings else 0.0
    UEz = np.vstack([model.user_emb, np.zeros((1, E))])
    IEz = np.vstack([model.item_emb, np.zeros((1, E))])
    urow, irow, uref, iref = _rows(model, fm)
    out = np.empty(len(fm))
    for lo in range(0, len(fm), _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        ci = fm.cat_idx[sl]
        s = model.bias + np.sum(np.where(ci >= 0, fm.cat_val[sl] * model.linear_weights[ci], 0.0), axis=1)
        U = fm.user_scale[sl, None] * UEz[urow[sl]]
        for a in range(uref.shape[1]):
            U = U + fm.user_ref_w[sl, a, None] * (IEz[uref[sl, a]] @ model.ref_proj.T)
        I = use * fm.item_scale[sl, None] * IEz[irow[sl]]
        for b in range(iref.shape[1]):
            R = model.list_proj[fm.item_ref_list[b]]
            I = I + fm.item_ref_w[sl, b, None] * (IEz[iref[sl, b]] @ R.T)
        x = fm.dense[sl]
        if x.shape[1]:
            I = I + x @ model.dense_proj.T
            s = s + x @ model.dense_linear
        out[sl] = s + np.einsum("ij,ij->i", U, I)
    return out


def predict(model, fm):
    """Click probability for every row of ``fm``; unknown ids embed as zero."""
    return sigmoid(predict_logits(model, fm))


def predict_log(model, log, leak_values=None, side_values=None):
    return predict(model, featurize(log, model.schema, leak_values, side_values))


# --------------------------------------------------------------------------
# AUC


def _tie_groups(scores):
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    return order, starts


def _grouped_auc(pos_g, neg_g):
    n_pos = int(pos_g.sum())
    n_neg = int(neg_g.sum())
    if n_pos == 0 or n_neg == 0:
        raise AUCUndefinedError(n_pos, n_neg)
    neg_before = np.cumsum(neg_g) - neg_g
    u2 = int(np.sum(pos_g * (2 * neg_before + neg_g)))
    return u2 / (2 * n_pos * n_neg)


def auc_score(scores, labels, weights=None):
    """Exact ROC-AUC (Mann-Whitney U with midranks for tied scores).

    Integer ``weights`` act as event multiplicities (a bootstrap resample).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if weights is None:
        weights = np.ones(len(scores), dtype=np.int64)
    order, starts = _tie_groups(scores)
    wpos = (weights * labels)[order]
    wneg = (weights * (1 - labels))[order]
    if len(scores) == 0:
        raise AUCUndefinedError(0, 0)
    return _grouped_auc(np.add.reduceat(wpos, starts), np.add.reduceat(wneg, starts))


class SortedScores:
    """Scores pre-sorted once so many weighted AUCs cost O(n) each."""

    def __init__(self, scores, labels):
        self.order, self.starts = _tie_groups(np.asarray(scores, dtype=np.float64))
        labels = np.asarray(labels).astype(np.int64)
        self.pos = labels[self.order]
        self.neg = 1 - self.pos

    def auc(self, weights):
        w = np.asarray(weights, dtype=np.int64)[self.order]
        return _grouped_auc(np.add.reduceat(w * self.pos, self.starts),
                            np.add.reduceat(w * self.neg, self.starts))


def evaluate_auc(model, eval_log, schema=None, leak_values=None, side_values=None):
    """Global ROC-AUC of ``model`` on ``eval_log``."""
    if schema is not None and schema != model.schema:
        raise SchemaError("schema does not match the model's schema")
    fm = featurize(eval_log, model.schema, leak_values, side_values)
    return auc_score(predict_logits(model, fm), eval_log.label)


# --------------------------------------------------------------------------
# Snapshots


@dataclass(frozen=True)
class ModelSnapshot:
    date_tag: int
    item_ids: np.ndarray
    item_embeddings: np.ndarray
    update_counts: np.ndarray

    def __post_init__(self):
        for name in ("item_ids", "item_embeddings", "update_counts"):
            a = np.array(getattr(self, name), copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return len(self.item_ids)

    @property
    def embed_dim(self):
        return self.item_embeddings.shape[1]

    def rows(self, item_ids):
        return lookup_rows(self.item_ids, item_ids)

    def save(self, path):
        write_container(path, {"item_ids": self.item_ids, "item_embeddings": self.item_embeddings,
                               "update_counts": self.update_counts},
                        {"kind": "model_snapshot", "date_tag": int(self.date_tag)})

    @classmethod
    def load(cls, path):
        arrays, meta = read_container(path)
        if meta.get("kind") != "model_snapshot":
            raise DataError(f"{path}: not a snapshot file")
        return cls(int(meta["date_tag"]), arrays["item_ids"], arrays["item_embeddings"],
                   arrays["update_counts"])

    def __eq__(self, other):
        if not isinstance(other, ModelSnapshot):
            return NotImplemented
        return (self.date_tag == other.date_tag
                and np.array_equal(self.item_ids, other.item_ids)
                and np.array_equal(self.item_embeddings, other.item_embeddings)
                and np.array_equal(self.update_counts, other.update_counts))

    __hash__ = None


def snapshot_embeddings(model):
    return ModelSnapshot(model.cutoff_date, model.item_ids, model.item_emb, model.update_counts)


# --------------------------------------------------------------------------
# Reference per-event objective and gradient (pure numpy, used for checking)


def event_objective(model, fm, i, label):
    """Regularised log-loss of row ``i`` at the model's current parameters."""
    return _event_terms(model, fm, i, label)["loss"]


def event_gradient(model, fm, i, label):
    """Gradient of :func:`event_objective` as full-size arrays keyed by parameter."""
    return _event_terms(model, fm, i, label, with_grad=True)["grad"]


def _event_terms(model, fm, i, label, with_grad=False):
    _check_matrix(model, fm)
    y = int(label)
    E = model.embed_dim
    l2 = model.config.l2
    use = model.schema.uses_embeddings
    urow, irow, uref, iref = (r[i:i + 1] for r in _rows(model, fm))
    urow, irow, uref, iref = int(urow[0]), int(irow[0]), uref[0], iref[0]
    ci, cv = fm.cat_idx[i], fm.cat_val[i]
    x = fm.dense[i]
    W = model.linear_weights

    s = model.bias + sum(v * W[c] for c, v in zip(ci, cv) if c >= 0) + x @ model.dense_linear
    U = np.zeros(E)
    if use and urow >= 0:
        U += fm.user_scale[i] * model.user_emb[urow]
    for r, wt in zip(uref, fm.user_ref_w[i]):
        if r >= 0:
            U += wt * (model.ref_proj @ model.item_emb[r])
    I = np.zeros(E)
    if use and irow >= 0:
        I += fm.item_scale[i] * model.item_emb[irow]
    lists = fm.item_ref_list
    for r, wt, li in zip(iref, fm.item_ref_w[i], lists):
        if r >= 0:
            I += wt * (model.list_proj[li] @ model.item_emb[r])
    I += model.dense_proj @ x
    s += U @ I

    w_touched = sorted({int(c) for c in ci if c >= 0})
    has_ref = bool(np.any(uref >= 0))
    item_touched = sorted({int(r) for r in ([irow] if use and irow >= 0 else [])
                           + [int(r) for r in uref if r >= 0] + [int(r) for r in iref if r >= 0]})
    reg = float(np.sum(W[w_touched] ** 2))
    if use and urow >= 0:
        reg += float(model.user_emb[urow] @ model.user_emb[urow])
    reg += float(np.sum(model.item_emb[item_touched] ** 2))
    if has_ref:
        reg += float(np.sum(model.ref_proj ** 2))
    lists_touched = sorted({int(li) for r, li in zip(iref, lists) if r >= 0})
    reg += float(np.sum(model.list_proj[lists_touched] ** 2))
    if len(x):
        reg += float(model.dense_linear @ model.dense_linear) + float(np.sum(model.dense_proj ** 2))
    loss = float(logloss(np.array([s]), np.array([y]))[0]) + 0.5 * l2 * reg
    out = {"loss": loss}
    if not with_grad:
        return out

    g = float(sigmoid(np.array([s]))[0]) - y
    grad = {
        "bias": np.array([g]),
        "linear_weights": np.zeros_like(W),
        "user_emb": np.zeros_like(model.user_emb),
        "item_emb": np.zeros_like(model.item_emb),
        "ref_proj": np.zeros_like(model.ref_proj),
        "list_proj": np.zeros_like(model.list_proj),
        "dense_linear": g * x + (l2 * model.dense_linear if len(x) else 0.0),
        "dense_proj": g * np.outer(U, x) + (l2 * model.dense_proj if len(x) else 0.0),
    }
    for c, v in zip(ci, cv):
        if c >= 0:
            grad["linear_weights"][c] += g * v
    grad["linear_weights"][w_touched] += l2 * W[w_touched]
    if use and urow >= 0:
        grad["user_emb"][urow] += g * fm.user_scale[i] * I + l2 * model.user_emb[urow]
    for r, wt in zip(uref, fm.user_ref_w[i]):
        if r >= 0:
            grad["ref_proj"] += g * wt * np.outer(I, model.item_emb[r])
            grad["item_emb"][r] += g * wt * (model.ref_proj.T @ I)
    if use and irow >= 0:
        grad["item_emb"][irow] += g * fm.item_scale[i] * U
    for r, wt, li in zip(iref, fm.item_ref_w[i], lists):
        if r >= 0:
            grad["item_emb"][r] += g * wt * (model.list_proj[li].T @ U)
            grad["list_proj"][li] += g * wt * np.outer(U, model.item_emb[r])
    grad["list_proj"][lists_touched] += l2 * model.list_proj[lists_touched]
    grad["item_emb"][item_touched] += l2 * model.item_emb[item_touched]
    if has_ref:
        grad["ref_proj"] += l2 * model.ref_proj
    out["grad"] = grad
    return out
