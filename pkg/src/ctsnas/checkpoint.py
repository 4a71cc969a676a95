"""Flat binary tensor store with a JSON manifest.

``tensors.bin`` holds raw little-endian tensor bytes back to back;
``manifest.json`` lists name, dtype, shape, byte offset and size for each,
plus arbitrary JSON metadata.  Files are written to a temporary name and
renamed into place.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_BY_NAME = {v: k for k, v in _DTYPES.items()}


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_tensors(directory, tensors: dict[str, torch.Tensor], metadata: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        raw = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    _atomic_write(directory / "tensors.bin", b"".join(chunks))
    manifest = {"tensors": entries, "metadata": metadata or {}}
    _atomic_write(directory / "manifest.json", json.dumps(manifest, indent=1).encode())


def load_tensors(directory) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "tensors.bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).copy()
        out[e["name"]] = torch.from_numpy(arr).to(_BY_NAME[e["dtype"]])
    return out, manifest["metadata"]


def flatten_optimizer(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            name = f"{prefix}/{idx}/{key}"
            if torch.is_tensor(val):
                tensors[name] = val
            else:
                scalars[name] = val
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, meta: dict):
    state: dict = {}
    for name, val in list(tensors.items()) + list(meta["scalars"].items()):
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = val
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
