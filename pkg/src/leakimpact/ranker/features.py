"""Feature schema and featurization.

A schema is an ordered list of slot strings:

``user_id``            hashed user weight
``item_id_weight``     hashed item weight
``item_id_embedding``  user/item embedding interaction
``coclick``            item-side pooled embeddings of causal co-click neighbours
``context:<name>``     hashed context value
``dense:<name>``       dense item-side vector
``leak:<name>``        leaked value; its treatment follows the value type

Slot values that do not come from the event itself (``coclick``, ``dense:*``,
``leak:*``) are passed in explicitly, keyed by the full slot string.
"""
import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import SchemaError

MISSING = None
MISSING_TOKEN = "\x00missing"

BASE_SLOTS = ("user_id", "item_id_weight", "item_id_embedding", "coclick")
PREFIXED = ("context", "dense", "leak")


def _check_slot(slot):
    if slot in BASE_SLOTS:
        return
    prefix, sep, name = slot.partition(":")
    if not sep or prefix not in PREFIXED or not name:
        raise SchemaError(f"unknown slot {slot!r}")


@dataclass(frozen=True)
class FeatureSchema:
    hash_dim: int = 1 << 18
    embed_dim: int = 8
    slots: tuple = ("user_id", "item_id_weight", "item_id_embedding")

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        if self.hash_dim < 1 or self.hash_dim & (self.hash_dim - 1):
            raise SchemaError(f"hash_dim must be a power of two, got {self.hash_dim}")
        if not 1 <= self.embed_dim <= 99:
            raise SchemaError(f"embed_dim must be in [1, 99], got {self.embed_dim}")
        if len(set(self.slots)) != len(self.slots):
            raise SchemaError(f"duplicate slots in {self.slots}")
        for s in self.slots:
            _check_slot(s)

    @property
    def leak_slots(self):
        return tuple(s for s in self.slots if s.startswith("leak:"))

    @property
    def dense_slots(self):
        return tuple(s for s in self.slots if s.startswith("dense:"))

    @property
    def external_slots(self):
        """Slots whose values must be supplied by the caller."""
        return tuple(s for s in self.slots
                     if s == "coclick" or s.startswith(("dense:", "leak:")))

    @property
    def is_baseline(self):
        return not self.leak_slots and not self.dense_slots

    @property
    def uses_embeddings(self):
        return "item_id_embedding" in self.slots

    def with_slots(self, *extra):
        return FeatureSchema(self.hash_dim, self.embed_dim, self.slots + tuple(extra))

    def without_slots(self, *drop):
        return FeatureSchema(self.hash_dim, self.embed_dim,
                             tuple(s for s in self.slots if s not in drop))

    def to_dict(self):
        return {"hash_dim": self.hash_dim, "embed_dim": self.embed_dim, "slots": list(self.slots)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["hash_dim"]), int(d["embed_dim"]), tuple(d["slots"]))


# --------------------------------------------------------------------------
# Slot value containers


@dataclass(frozen=True)
class Categorical:
    """One hashable value per event; ``None`` is the missing marker."""
    values: object

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class ItemRef:
    """One item id per event, -1 when missing. Hashed as a categorical value and
    added to the user side of the interaction (a behaviour of the user)."""
    item_ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "item_ids", np.asarray(self.item_ids, dtype=np.int64).reshape(-1))

    def __len__(self):
        return len(self.item_ids)


@dataclass(frozen=True)
class ItemList:
    """Up to k item ids per event, padded with -1. Each id gets a hashed weight
    of 1/len and the list's mean embedding joins the item side through a
    per-slot projection."""
    item_ids: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.item_ids, dtype=np.int64)
        if a.ndim != 2:
            raise SchemaError("ItemList needs a 2-D (events, k) array")
        object.__setattr__(self, "item_ids", a)

    def __len__(self):
        return len(self.item_ids)


@dataclass(frozen=True)
class Dense:
    """Real vector per event; joins the item side through a learned projection."""
    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
        object.__setattr__(self, "values", a)

    @property
    def width(self):
        return self.values.shape[1]

    def __len__(self):
        return len(self.values)


def coerce_values(v):
    if isinstance(v, (Categorical, ItemRef, ItemList, Dense)):
        return v
    return Categorical(v)


# --------------------------------------------------------------------------
# Hashing


def stable_hash(slot, value, hash_dim):
    """Process-independent ``hash(slot, value) mod hash_dim``."""
    token = MISSING_TOKEN if value is None else str(value)
    digest = hashlib.blake2b(f"{slot}\x1f{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (hash_dim - 1)


def hash_column(slot, values, hash_dim):
    """Vectorised ``stable_hash`` over a column, hashing each distinct value once."""
    if isinstance(values, np.ndarray) and values.dtype.kind in "iu":
        uniq, inv = np.unique(values, return_inverse=True)
        table = np.array([stable_hash(slot, int(u), hash_dim) for u in uniq.tolist()], dtype=np.int64)
        return table[inv.reshape(-1)]
    cache = {}
    out = np.empty(len(values), dtype=np.int64)
    for j, v in enumerate(values):
        if v is not None and not isinstance(v, str):
            v = v.item() if isinstance(v, np.generic) else v
        h = cache.get(v)
        if h is None:
            h = cache[v] = stable_hash(slot, v, hash_dim)
        out[j] = h
    return out


def _hash_item_ids(slot, ids, hash_dim):
    """Hash item ids, mapping -1 to the missing marker."""
    uniq, inv = np.unique(ids, return_inverse=True)
    table = np.array([stable_hash(slot, None if u < 0 else int(u), hash_dim) for u in uniq.tolist()],
                     dtype=np.int64)
    return table[inv.reshape(-1)].reshape(ids.shape)


# --------------------------------------------------------------------------
# Feature matrix


@dataclass
class FeatureMatrix:
    """Featurized batch of events.

    ``cat_idx``/``cat_val`` hold hashed indices (-1 padded) and their values;
    ``user_refs``/``item_refs`` hold item ids that join the user or item side of
    the interaction with the matching weights. The user side is the mean of
    the user embedding and the user-side references (``user_scale`` weighs the
    user embedding). The item side is the item embedding (``item_scale``) plus,
    per item list, the projected mean of the list's embeddings; column ``b`` of
    ``item_refs`` belongs to list ``item_ref_list[b]`` of ``list_layout``.
    ``dense`` concatenates dense slots laid out by ``dense_layout``.
    """
    schema: FeatureSchema
    cat_idx: np.ndarray
    cat_val: np.ndarray
    user_id: np.ndarray
    user_scale: np.ndarray
    item_id: np.ndarray
    item_scale: np.ndarray
    user_refs: np.ndarray
    user_ref_w: np.ndarray
    item_refs: np.ndarray
    item_ref_w: np.ndarray
    dense: np.ndarray
    dense_layout: tuple = field(default=())
    item_ref_list: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    list_layout: tuple = field(default=())

    def __len__(self):
        return len(self.user_id)

    def take(self, index):
        return FeatureMatrix(self.schema, self.cat_idx[index], self.cat_val[index],
                             self.user_id[index], self.user_scale[index], self.item_id[index],
                             self.item_scale[index], self.user_refs[index],
                             self.user_ref_w[index], self.item_refs[index], self.item_ref_w[index],
                             self.dense[index], self.dense_layout, self.item_ref_list,
                             self.list_layout)


def _as_log(events):
    from ..eventlog import EventLog, InteractionEvent
    if isinstance(events, InteractionEvent):
        return EventLog.from_events([events]), True
    return events, False


def _scalarize(v):
    """Wrap single-event values into length-1 containers."""
    if isinstance(v, ItemRef):
        return v
    if isinstance(v, ItemList):
        return v
    if isinstance(v, Dense):
        return Dense(np.asarray(v.values).reshape(1, -1))
    if isinstance(v, Categorical):
        vals = v.values
        return v if isinstance(vals, (list, tuple, np.ndarray)) else Categorical([vals])
    return Categorical([v])


def featurize(events, schema, leak_values=None, side_values=None):
    """Turn events into a :class:`FeatureMatrix` under ``schema``.

    ``events`` may be an :class:`InteractionEvent` or an ``EventLog``.
    ``leak_values`` must cover exactly the schema's ``leak:*`` slots; passing
    leak values to a schema without leak slots is an error, so a baseline can
    never silently consume leaked data.
    """
    log, single = _as_log(events)
    n = len(log)
    leak_values = dict(leak_values or {})
    side_values = dict(side_values or {})
    if single:
        leak_values = {k: _scalarize(v) for k, v in leak_values.items()}
        side_values = {k: _scalarize(v) for k, v in side_values.items()}

    for k in leak_values:
        if k not in schema.leak_slots:
            raise SchemaError(f"leak slot not in schema: {k!r}")
    for k in side_values:
        if k not in schema.slots or k.startswith("leak:"):
            raise SchemaError(f"side slot not in schema: {k!r}")
    supplied = {**side_values, **leak_values}
    for s in schema.external_slots:
        if s not in supplied:
            kind = "leak" if s.startswith("leak:") else "side"
            raise SchemaError(f"{kind} slot {s!r} declared but value map absent")
    supplied = {k: coerce_values(v) for k, v in supplied.items()}
    for k, v in supplied.items():
        if len(v) != n:
            raise SchemaError(f"slot {k!r}: {len(v)} values for {n} events")

    H = schema.hash_dim
    cat_cols, cat_vals = [], []
    user_refs, item_refs, item_w, ref_list, list_layout = [], [], [], [], []
    dense_blocks, layout = [], []

    def add_item_list(slot, ids):
        present = ids >= 0
        cnt = present.sum(axis=1, keepdims=True)
        w = np.where(present, 1.0 / np.maximum(cnt, 1), 0.0)
        h = _hash_item_ids(slot, ids, H)
        # an all-missing list still hashes the missing marker once
        empty = cnt[:, 0] == 0
        h = np.where(present, h, -1)
        if ids.shape[1]:
            h[empty, 0] = stable_hash(slot, None, H)
        vals = np.where(present, w, 0.0)
        if ids.shape[1]:
            vals[empty, 0] = 1.0
        cat_cols.append(h)
        cat_vals.append(vals)
        item_refs.append(ids)
        item_w.append(w)
        ref_list.append(np.full(ids.shape[1], len(list_layout), dtype=np.int64))
        list_layout.append(slot)

    for slot in schema.slots:
        if slot == "user_id":
            cat_cols.append(hash_column("user_id", log.user_id, H)[:, None])
            cat_vals.append(np.ones((n, 1)))
        elif slot == "item_id_weight":
            cat_cols.append(hash_column("item_id", log.item_id, H)[:, None])
            cat_vals.append(np.ones((n, 1)))
        elif slot == "item_id_embedding":
            continue
        elif slot.startswith("context:"):
            name = slot.partition(":")[2]
            vals = [dict(c).get(name) for c in log.contexts()]
            cat_cols.append(hash_column(slot, vals, H)[:, None])
            cat_vals.append(np.ones((n, 1)))
        else:
            v = supplied[slot]
            if isinstance(v, Categorical):
                vals = v.values
                if isinstance(vals, np.ndarray) and vals.dtype.kind in "iu":
                    h = hash_column(slot, vals, H)
                else:
                    h = hash_column(slot, list(vals), H)
                cat_cols.append(h[:, None])
                cat_vals.append(np.ones((n, 1)))
            elif isinstance(v, ItemRef):
                cat_cols.append(_hash_item_ids(slot, v.item_ids, H)[:, None])
                cat_vals.append(np.ones((n, 1)))
                user_refs.append(v.item_ids[:, None])
            elif isinstance(v, ItemList):
                add_item_list(slot, v.item_ids)
            elif isinstance(v, Dense):
                dense_blocks.append(v.values)
                layout.append((slot, v.width))

    def hstack(blocks, dtype, fill):
        if not blocks:
            return np.full((n, 0), fill, dtype=dtype)
        return np.ascontiguousarray(np.hstack(blocks).astype(dtype))

    ur = hstack(user_refs, np.int64, -1)
    bag = (ur >= 0).sum(axis=1) + (1 if schema.uses_embeddings else 0)
    member_w = 1.0 / np.maximum(bag, 1)
    return FeatureMatrix(
        schema=schema,
        cat_idx=hstack(cat_cols, np.int64, -1),
        cat_val=hstack(cat_vals, np.float64, 0.0),
        user_id=np.asarray(log.user_id, dtype=np.int64),
        user_scale=member_w if schema.uses_embeddings else np.zeros(n),
        item_id=np.asarray(log.item_id, dtype=np.int64),
        item_scale=np.ones(n),
        user_refs=ur,
        user_ref_w=np.where(ur >= 0, member_w[:, None], 0.0),
        item_refs=hstack(item_refs, np.int64, -1),
        item_ref_w=hstack(item_w, np.float64, 0.0),
        dense=hstack(dense_blocks, np.float64, 0.0),
        dense_layout=tuple(layout),
        item_ref_list=np.concatenate(ref_list) if ref_list else np.zeros(0, np.int64),
        list_layout=tuple(list_layout),
    )
