"""Interaction logs: data model, file ingestion, temporal splits and a
synthetic behaviour generator with recorded ground truth."""
import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DAY = 86_400
FIELDS = ("user_id", "item_id", "timestamp", "label", "context")


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    timestamp: int
    label: int
    context: tuple = ()

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.timestamp < 0:
            raise DataError(f"timestamp must be >= 0, got {self.timestamp}")
        names = [k for k, _ in self.context]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate context slot in {names}")


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class EventLog:
    """Columnar, immutable sequence of interaction events.

    ``context`` is either ``None`` (every event has an empty context) or a
    tuple holding one ``((slot, value), ...)`` tuple per event.
    """

    __slots__ = ("user_id", "item_id", "timestamp", "label", "context")

    def __init__(self, user_id, item_id, timestamp, label, context=None):
        uid = _readonly(user_id, np.int64)
        iid = _readonly(item_id, np.int64)
        ts = _readonly(timestamp, np.int64)
        lab = _readonly(label, np.int8)
        n = len(uid)
        if not (len(iid) == len(ts) == len(lab) == n):
            raise DataError("column lengths differ")
        if context is not None:
            context = tuple(tuple(c) for c in context)
            if len(context) != n:
                raise DataError("context length differs from event count")
            if not any(context):
                context = None
        object.__setattr__(self, "user_id", uid)
        object.__setattr__(self, "item_id", iid)
        object.__setattr__(self, "timestamp", ts)
        object.__setattr__(self, "label", lab)
        object.__setattr__(self, "context", context)

    def __setattr__(self, name, value):
        raise AttributeError("EventLog is immutable")

    @classmethod
    def from_events(cls, events):
        events = list(events)
        return cls(
            [e.user_id for e in events],
            [e.item_id for e in events],
            [e.timestamp for e in events],
            [e.label for e in events],
            [tuple(e.context) for e in events],
        )

    @classmethod
    def empty(cls):
        return cls([], [], [], [])

    def __len__(self):
        return len(self.user_id)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            ctx = self.context[key] if self.context is not None else ()
            return InteractionEvent(
                int(self.user_id[key]), int(self.item_id[key]),
                int(self.timestamp[key]), int(self.label[key]), ctx,
            )
        return self.take(key)

    def take(self, index):
        index = np.arange(len(self))[index] if isinstance(index, slice) else np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        ctx = None
        if self.context is not None:
            ctx = [self.context[i] for i in index]
        return EventLog(self.user_id[index], self.item_id[index], self.timestamp[index],
                        self.label[index], ctx)

    def contexts(self):
        if self.context is None:
            return ((),) * len(self)
        return self.context

    def sorted(self):
        order = np.argsort(self.timestamp, kind="stable")
        return self.take(order)

    def is_sorted(self):
        return bool(np.all(np.diff(self.timestamp) >= 0))

    @staticmethod
    def concat(logs):
        logs = list(logs)
        if any(log.context is not None for log in logs):
            ctx = [c for log in logs for c in log.contexts()]
        else:
            ctx = None
        return EventLog(
            np.concatenate([log.user_id for log in logs]),
            np.concatenate([log.item_id for log in logs]),
            np.concatenate([log.timestamp for log in logs]),
            np.concatenate([log.label for log in logs]),
            ctx,
        )

    def __eq__(self, other):
        if not isinstance(other, EventLog):
            return NotImplemented
        return (
            np.array_equal(self.user_id, other.user_id)
            and np.array_equal(self.item_id, other.item_id)
            and np.array_equal(self.timestamp, other.timestamp)
            and np.array_equal(self.label, other.label)
            and tuple(self.contexts()) == tuple(other.contexts())
        )

    __hash__ = None

    def __repr__(self):
        if len(self) == 0:
            return "EventLog(n=0)"
        return (f"EventLog(n={len(self)}, t=[{self.timestamp.min()}, {self.timestamp.max()}], "
                f"ctr={self.label.mean():.4f})")


# --------------------------------------------------------------------------
# File ingestion


def _parse_int(raw, name, lineno):
    if isinstance(raw, bool):
        raise DataError(f"line {lineno}: field {name!r} is not an integer: {raw!r}")
    if isinstance(raw, int):
        return raw
    if isinstance(raw, float) and raw.is_integer():
        return int(raw)
    if isinstance(raw, str):
        try:
            return int(raw.strip())
        except ValueError:
            pass
    raise DataError(f"line {lineno}: field {name!r} is not an integer: {raw!r}")


def _parse_context(raw, lineno):
    if raw is None or raw == "":
        return ()
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: field 'context' is not a JSON object: {exc}") from None
    if not isinstance(raw, dict):
        raise DataError(f"line {lineno}: field 'context' must be a flat string map")
    out = []
    for k, v in raw.items():
        if isinstance(v, (dict, list)):
            raise DataError(f"line {lineno}: field 'context' value for {k!r} is not flat")
        out.append((str(k), str(v)))
    return tuple(sorted(out))


def _parse_record(rec, lineno):
    vals = {}
    for name in ("user_id", "item_id", "timestamp", "label"):
        if name not in rec:
            raise DataError(f"line {lineno}: missing field {name!r}")
        vals[name] = _parse_int(rec[name], name, lineno)
    if vals["label"] not in (0, 1):
        raise DataError(f"line {lineno}: field 'label' must be 0 or 1, got {vals['label']}")
    if vals["timestamp"] < 0:
        raise DataError(f"line {lineno}: field 'timestamp' must be >= 0")
    for name in ("user_id", "item_id"):
        if vals[name] < 0:
            raise DataError(f"line {lineno}: field {name!r} must be non-negative")
    return vals, _parse_context(rec.get("context"), lineno)


def load_events(path, format=None):
    """Read an event file (``jsonl`` or ``csv``) and return it sorted by time.

    Errors name the offending line (1-based, counting the CSV header) and field.
    """
    path = Path(path)
    if format is None:
        format = path.suffix.lstrip(".").lower()
    if format not in ("jsonl", "csv"):
        raise ConfigError(f"unknown event file format {format!r} (expected jsonl or csv)")
    if not path.exists():
        raise DataError(f"{path}: no such file")

    cols = {name: [] for name in ("user_id", "item_id", "timestamp", "label")}
    contexts = []
    with path.open(newline="") as fh:
        if format == "jsonl":
            records = _iter_jsonl(fh)
        else:
            records = _iter_csv(fh)
        for lineno, rec in records:
            vals, ctx = _parse_record(rec, lineno)
            for name, v in vals.items():
                cols[name].append(v)
            contexts.append(ctx)
    log = EventLog(cols["user_id"], cols["item_id"], cols["timestamp"], cols["label"], contexts)
    log = log.sorted()
    logger.info("loaded %d events from %s", len(log), path)
    return log


def _iter_jsonl(fh):
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise DataError(f"line {lineno}: record is not an object")
        yield lineno, rec


def _iter_csv(fh):
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        return
    header = [h.strip() for h in header]
    missing = [f for f in FIELDS[:4] if f not in header]
    if missing:
        raise DataError(f"line 1: CSV header lacks fields {missing}")
    for row in reader:
        lineno = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} columns, got {len(row)}")
        yield lineno, dict(zip(header, row))


def save_events(log, path, format=None):
    path = Path(path)
    if format is None:
        format = path.suffix.lstrip(".").lower()
    if format not in ("jsonl", "csv"):
        raise ConfigError(f"unknown event file format {format!r}")
    ctxs = log.contexts()
    with path.open("w", newline="") as fh:
        if format == "jsonl":
            for u, i, t, y, c in zip(log.user_id.tolist(), log.item_id.tolist(),
                                     log.timestamp.tolist(), log.label.tolist(), ctxs):
                fh.write(json.dumps({"user_id": u, "item_id": i, "timestamp": t, "label": y,
                                     "context": dict(c)}, separators=(",", ":")))
                fh.write("\n")
        else:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIELDS)
            for u, i, t, y, c in zip(log.user_id.tolist(), log.item_id.tolist(),
                                     log.timestamp.tolist(), log.label.tolist(), ctxs):
                w.writerow([u, i, t, y, json.dumps(dict(c), separators=(",", ":")) if c else ""])


# --------------------------------------------------------------------------
# Temporal splitting


@dataclass(frozen=True)
class TemporalSplit:
    """Cut-off ``train_end_T`` (seconds), eval window length (seconds) and
    leak horizon (days)."""

    train_end_T: int
    eval_window: int
    leak_horizon_n: int = 0

    def __post_init__(self):
        if self.train_end_T < 0 or self.eval_window <= 0 or self.leak_horizon_n < 0:
            raise ConfigError(f"invalid split {self}")

    @classmethod
    def from_days(cls, train_end_day, eval_days, leak_horizon_n=0):
        return cls(int(train_end_day * DAY), int(eval_days * DAY), int(leak_horizon_n))

    @property
    def eval_end(self):
        return self.train_end_T + self.eval_window


def temporal_split(log, split):
    """Return ``(train, eval)``: events before T, and events in [T, T + window)."""
    if not log.is_sorted():
        raise DataError("temporal_split requires a log sorted by timestamp")
    ts = log.timestamp
    t_end = np.searchsorted(ts, split.train_end_T, side="left")
    e_end = np.searchsorted(ts, split.eval_end, side="left")
    train = log.take(np.arange(0, t_end))
    ev = log.take(np.arange(t_end, e_end))
    if len(ev) == 0:
        raise DataError("empty eval set: no events in "
                        f"[{split.train_end_T}, {split.eval_end})")
    return train, ev


# --------------------------------------------------------------------------
# Synthetic generator


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 2000
    num_items: int = 600
    latent_dim: int = 4
    drift_rate: float = 0.1
    item_lifecycle_days: int = 5
    days: int = 50
    events_per_day: int = 2000
    content_noise: float = 0.0
    seed: int = 0
    click_scale: float = 5.0
    click_bias: float = -1.0
    item_clusters: int = 0
    cluster_spread: float = 0.3

    def __post_init__(self):
        for name in ("num_users", "num_items", "latent_dim", "item_lifecycle_days", "days",
                     "events_per_day"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"SyntheticConfig.{name} must be an integer >= 1, got {v!r}")
        if self.drift_rate < 0 or self.content_noise < 0 or self.cluster_spread < 0:
            raise ConfigError("drift_rate, content_noise and cluster_spread must be >= 0")
        if self.item_clusters < 0:
            raise ConfigError("item_clusters must be >= 0")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be >= 2 (user drift rotates in a plane)")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ItemContentTable:
    item_ids: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.item_ids, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or len(feats) != len(ids):
            raise DataError("content table needs one feature row per item")
        if len(np.unique(ids)) != len(ids):
            raise DataError("duplicate item_id in content table")
        object.__setattr__(self, "item_ids", _readonly(ids, np.int64))
        object.__setattr__(self, "features", _readonly(feats, np.float64))

    @property
    def dim(self):
        return self.features.shape[1]

    def lookup(self, item_ids):
        """Rows for ``item_ids``; missing ids raise."""
        order = np.argsort(self.item_ids, kind="stable")
        sorted_ids = self.item_ids[order]
        pos = np.searchsorted(sorted_ids, item_ids)
        pos = np.clip(pos, 0, len(sorted_ids) - 1)
        ok = sorted_ids[pos] == item_ids
        if not np.all(ok):
            raise DataError(f"{int((~ok).sum())} item ids have no content row")
        return self.features[order[pos]]

    def save(self, path):
        write_container(path, {"item_ids": self.item_ids, "features": self.features},
                        {"kind": "item_content"})

    @classmethod
    def load(cls, path):
        arrays, _ = read_container(path)
        return cls(arrays["item_ids"], arrays["features"])


@dataclass(frozen=True)
class GroundTruth:
    """Sidecar with every latent the generator used. Only the leakage module's
    oracle channel is allowed to read it."""

    config: SyntheticConfig
    user_basis_a: np.ndarray
    user_basis_b: np.ndarray
    user_phase: np.ndarray
    item_latent: np.ndarray
    item_created: np.ndarray
    event_prob: np.ndarray

    def user_latent(self, user_ids, timestamps):
        theta = self.user_phase[user_ids] + self.config.drift_rate * (np.asarray(timestamps) / DAY)
        return (np.cos(theta)[:, None] * self.user_basis_a[user_ids]
                + np.sin(theta)[:, None] * self.user_basis_b[user_ids])

    def click_prob(self, user_ids, item_ids, timestamps):
        u = self.user_latent(np.asarray(user_ids), timestamps)
        z = self.config.click_scale * np.einsum("ij,ij->i", u, self.item_latent[item_ids])
        return 1.0 / (1.0 + np.exp(-(z + self.config.click_bias)))

    def save(self, path):
        arrays = {k: getattr(self, k) for k in ("user_basis_a", "user_basis_b", "user_phase",
                                                 "item_latent", "item_created", "event_prob")}
        write_container(path, arrays, {"kind": "ground_truth", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path):
        arrays, meta = read_container(path)
        return cls(SyntheticConfig(**meta["config"]), **arrays)


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(config):
    """Draw a rotating-latent-factor behaviour log.

    Users hold a unit preference vector that turns by ``drift_rate`` radians per
    day inside a private 2-D plane; items hold fixed unit vectors and only
    receive impressions inside ``[created, created + lifecycle)``. Every
    impression is labelled Bernoulli(sigmoid(scale * <u(t), v> + bias)).

    With ``item_clusters > 0`` item vectors scatter (``cluster_spread``) around
    that many random unit centres, like items within a category.

    Returns ``(log, content, truth)``; item content is the latent plus
    Gaussian noise of scale ``content_noise``. Item ids follow creation order.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    d = cfg.latent_dim

    g = rng.standard_normal((cfg.num_users, 2, d))
    a = _unit_rows(g[:, 0])
    b = g[:, 1] - np.einsum("ij,ij->i", g[:, 1], a)[:, None] * a
    b = _unit_rows(b)
    phase = rng.uniform(0.0, 2 * np.pi, cfg.num_users)

    item_latent = _unit_rows(rng.standard_normal((cfg.num_items, d)))
    if cfg.item_clusters:
        # separate stream so the unclustered log stays unchanged
        crng = np.random.default_rng([cfg.seed, 1])
        centers = _unit_rows(crng.standard_normal((cfg.item_clusters, d)))
        assign = crng.integers(0, cfg.item_clusters, cfg.num_items)
        item_latent = _unit_rows(centers[assign] + cfg.cluster_spread * item_latent)
    life = cfg.item_lifecycle_days * DAY
    created = np.sort(rng.integers(-life, cfg.days * DAY, cfg.num_items))

    n = cfg.days * cfg.events_per_day
    day = np.repeat(np.arange(cfg.days, dtype=np.int64), cfg.events_per_day)
    ts = day * DAY + rng.integers(0, DAY, n)
    ts.sort(kind="stable")
    users = rng.integers(0, cfg.num_users, n)
    lo = np.searchsorted(created, ts - life, side="right")
    hi = np.searchsorted(created, ts, side="right")
    pick = rng.random(n)
    coin = rng.random(n)
    has_item = hi > lo
    items = lo + np.floor(pick * (hi - lo)).astype(np.int64)
    items = np.minimum(items, np.maximum(hi - 1, 0))

    theta = phase[users] + cfg.drift_rate * (ts / DAY)
    u = np.cos(theta)[:, None] * a[users] + np.sin(theta)[:, None] * b[users]
    z = cfg.click_scale * np.einsum("ij,ij->i", u, item_latent[items]) + cfg.click_bias
    prob = 1.0 / (1.0 + np.exp(-z))
    labels = (coin < prob).astype(np.int8)

    keep = np.flatnonzero(has_item)
    if len(keep) < n:
        logger.info("dropped %d impressions with no active item", n - len(keep))
    log = EventLog(users[keep], items[keep], ts[keep], labels[keep])

    content = item_latent + cfg.content_noise * rng.standard_normal(item_latent.shape)
    if cfg.content_noise == 0:
        content = item_latent.copy()
    table = ItemContentTable(np.arange(cfg.num_items), content)
    truth = GroundTruth(cfg, a, b, phase, item_latent, created, prob[keep])
    return log, table, truth


def synthetic_config_from_dict(d):
    known = {f.name for f in dataclasses.fields(SyntheticConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown synthetic config fields: {sorted(unknown)}")
    return SyntheticConfig(**d)

