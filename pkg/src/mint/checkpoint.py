"""Checkpoint archives: a zip holding ``config.json``, ``meta.json`` and one ``.npy`` per tensor.

Entries carry a fixed timestamp so that identical contents give identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _as_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(t)


def _writestr(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(path, config: Mapping, tensors: Mapping, meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _writestr(zf, "config.json", json.dumps(config, sort_keys=True, indent=2).encode())
        _writestr(zf, "meta.json", json.dumps(meta or {}, sort_keys=True, indent=2).encode())
        for name in sorted(tensors):
            buf = io.BytesIO()
            np.save(buf, _as_array(tensors[name]), allow_pickle=False)
            _writestr(zf, f"tensors/{name}.npy", buf.getvalue())
    return path


def load_archive(path) -> tuple[dict, dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors = {}
    with zipfile.ZipFile(path) as zf:
        config = json.loads(zf.read("config.json"))
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.startswith("tensors/") and name.endswith(".npy"):
                arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                tensors[name[len("tensors/"):-len(".npy")]] = torch.from_numpy(arr)
    return config, tensors, meta


def tensor_hash(tensors: Mapping) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
