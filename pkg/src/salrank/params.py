"""Flatten, rebuild and persist nested frozen dataclasses whose leaves are Tensors."""
from __future__ import annotations

import dataclasses
import io
import zipfile
from typing import Callable

import numpy as np

from .autograd import Tensor


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            out.update(named_tensors(getattr(obj, f.name), name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}.{i}" if prefix else str(i)))
    return out


def map_tensors(obj, fn: Callable[[str, Tensor], Tensor], prefix: str = ""):
    """Rebuild ``obj`` with every Tensor leaf replaced by ``fn(name, leaf)``."""
    if isinstance(obj, Tensor):
        return fn(prefix, obj)
    if dataclasses.is_dataclass(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            changes[f.name] = map_tensors(getattr(obj, f.name), fn, name)
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, (list, tuple)):
        items = [map_tensors(v, fn, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(obj)]
        return type(obj)(items)
    return obj


def save_params(obj, path) -> None:
    """Write an ``.npz`` archive with fixed member timestamps, so equal params give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, t in sorted(named_tensors(obj).items()):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(t.data), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_params(template, path):
    with np.load(path) as data:
        return map_tensors(template, lambda name, t: Tensor(data[name], requires_grad=t.requires_grad))
