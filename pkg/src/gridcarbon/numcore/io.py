"""Portable tensor file: one JSON header line, then little-endian f64 payload."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .tensor import Tensor

PathLike = Union[str, Path]


def save_tensor(path: PathLike, value) -> None:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    header = json.dumps({"shape": list(arr.shape), "dtype": "f64"}, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_array(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        payload = fh.read()
    if header.get("dtype") != "f64":
        raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(n) for n in header["shape"])
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def load_tensor(path: PathLike, requires_grad: bool = False) -> Tensor:
    return Tensor(load_array(path), requires_grad=requires_grad)
