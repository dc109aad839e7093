"""Deterministic ``.npz``-compatible container: named arrays plus a JSON header.

``numpy.savez`` stamps zip members with the wall clock, which breaks byte-level
reproducibility, so members are written with a fixed date here. Files remain
readable with ``numpy.load``.
"""
import io
import json
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)
_META_KEY = "__meta__"


def write_container(path, arrays, meta):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
        blob = json.dumps(meta, sort_keys=True).encode()
        info = zipfile.ZipInfo(_META_KEY + ".json", date_time=_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        info.external_attr = 0o644 << 16
        zf.writestr(info, blob)


def read_container(path):
    arrays = {}
    meta = None
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == _META_KEY + ".json":
                meta = json.loads(data.decode())
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    if meta is None:
        raise ValueError(f"{path}: missing metadata header")
    return arrays, meta
