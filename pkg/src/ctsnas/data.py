"""Correlated time series: loading, synthesis, scaling, windowing and splits.

A dataset directory holds ``meta.json``, ``values.bin`` (little-endian
float32, row-major N x T x F) and optionally ``adj.csv``.  When
``values.bin`` is absent, ``values.csv`` with T rows and N*F columns
(features of node 0 first, then node 1, ...) is accepted instead.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

LAYOUT = "row-major N×T×F"
META_KEYS = ("name", "n_nodes", "n_steps", "n_features", "has_adjacency", "dtype", "layout")

Mode = Literal["multi_step", "single_step"]


class DataError(ValueError):
    """Raised for malformed datasets or impossible split/window requests."""


@dataclass
class CtsDataset:
    values: np.ndarray  # [N, T, F] float32
    adjacency: np.ndarray | None = None  # [N, N]
    name: str = "dataset"
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise DataError(f"values must be [N, T, F], got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("values contain NaN or Inf")
        self.values = v
        if self.adjacency is not None:
            a = np.asarray(self.adjacency, dtype=np.float64)
            n = v.shape[0]
            if a.shape != (n, n):
                raise DataError(f"adjacency shape mismatch: expected {(n, n)}, got {a.shape}")
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise DataError("adjacency must be finite and nonnegative")
            self.adjacency = a
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps)
            if ts.shape != (v.shape[1],) or np.any(np.diff(ts) <= 0):
                raise DataError("timestamps must be strictly increasing with length T")
            self.timestamps = ts

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
        if self.adjacency is not None:
            h.update(np.ascontiguousarray(self.adjacency, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class WindowSet:
    inputs: np.ndarray  # [S, N, P, F], scaled
    targets: np.ndarray  # [S, N, Q, 1] (multi-step) or [S, N, 1, 1], original units
    P: int
    Q: int
    mode: Mode

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], self.P, self.Q, self.mode)


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    pseudo_split: float = 0.5

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
            raise DataError(f"split ratios must be three nonnegative reals summing to 1, got {self.ratios}")
        if not 0.0 < self.pseudo_split < 1.0:
            raise DataError("pseudo_split must lie in (0, 1)")
        self.ratios = r


@dataclass
class Scaler:
    """Per-feature z-score transform."""

    mean: np.ndarray
    std: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, x: np.ndarray) -> "Scaler":
        flat = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean=mean, std=std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse_transform(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def inverse_target(self, x):
        """Undo scaling of the forecast feature (feature 0); works for numpy or torch."""
        return x * float(self.std[0]) + float(self.mean[0])

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64), std=np.asarray(d["std"], dtype=np.float64))


# --------------------------------------------------------------------------- io


def _read_adjacency(path: Path) -> np.ndarray:
    rows = []
    for line in path.read_text().splitlines():
        if line.strip():
            rows.append([float(tok) for tok in line.split(",")])
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DataError("adjacency shape mismatch: ragged rows in adj.csv")
    return np.asarray(rows, dtype=np.float64)


def load_dataset(path) -> CtsDataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    for key in ("n_nodes", "n_steps", "n_features"):
        if key not in meta:
            raise DataError(f"meta.json lacks '{key}'")
    n, t, f = int(meta["n_nodes"]), int(meta["n_steps"]), int(meta["n_features"])
    if meta.get("dtype", "float32") != "float32":
        raise DataError(f"unsupported dtype {meta['dtype']!r}")
    if meta.get("layout", LAYOUT) != LAYOUT:
        raise DataError(f"unsupported layout {meta['layout']!r}")

    bin_path, csv_path = path / "values.bin", path / "values.csv"
    if bin_path.is_file():
        raw = np.fromfile(bin_path, dtype="<f4")
        if raw.size != n * t * f:
            raise DataError(f"shape mismatch: meta declares {n}x{t}x{f}={n * t * f} values, values.bin holds {raw.size}")
        values = raw.reshape(n, t, f).astype(np.float32)
    elif csv_path.is_file():
        table = np.loadtxt(csv_path, delimiter=",", dtype=np.float64, ndmin=2)
        if table.shape != (t, n * f):
            raise DataError(f"shape mismatch: values.csv is {table.shape}, expected {(t, n * f)}")
        values = table.reshape(t, n, f).transpose(1, 0, 2).astype(np.float32)
    else:
        raise DataError(f"missing file: neither values.bin nor values.csv in {path}")

    adjacency = None
    adj_path = path / "adj.csv"
    if meta.get("has_adjacency", adj_path.is_file()):
        if not adj_path.is_file():
            raise DataError(f"missing file: {adj_path}")
        adjacency = _read_adjacency(adj_path)
        if adjacency.shape != (n, n):
            raise DataError(f"adjacency shape mismatch: expected {(n, n)}, got {adjacency.shape}")
    return CtsDataset(values=values, adjacency=adjacency, name=str(meta.get("name", path.name)))


def write_dataset(ds: CtsDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": ds.name,
        "n_nodes": ds.n_nodes,
        "n_steps": ds.n_steps,
        "n_features": ds.n_features,
        "has_adjacency": ds.adjacency is not None,
        "dtype": "float32",
        "layout": LAYOUT,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    np.ascontiguousarray(ds.values, dtype="<f4").tofile(path / "values.bin")
    if ds.adjacency is not None:
        lines = [",".join(repr(float(x)) for x in row) for row in ds.adjacency]
        (path / "adj.csv").write_text("\n".join(lines) + "\n")
    return path


# -------------------------------------------------------------------- synthesis


def _geometric_adjacency(rng: np.random.Generator, n: int, kappa: float = 0.5) -> np.ndarray:
    pts = rng.uniform(size=(n, 2))
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    off = dist[~np.eye(n, dtype=bool)]
    sigma = off.std()
    w = np.exp(-(dist**2) / sigma**2)
    np.fill_diagonal(w, 0.0)
    keep = w >= kappa
    # every node keeps its nearest neighbour so no row is empty
    nearest = np.argmax(w, axis=1)
    keep[np.arange(n), nearest] = True
    keep |= keep.T
    return np.where(keep, w, 0.0)


def generate_synthetic(
    n_nodes: int,
    n_steps: int,
    seed: int,
    process: str = "diffusion",
    period: int = 24,
    rho: float = 0.6,
    noise: float = 0.05,
) -> CtsDataset:
    """Desk-scale ground-truth series.

    ``diffusion``: random geometric graph, x[t+1] = rho * Abar x[t] + s(t) + eps
    with Abar the row-normalised adjacency and s a sinusoid shared by all nodes.
    ``seasonal``: independent per-node sinusoids with random phase, no graph.
    """
    if n_nodes < 2:
        raise DataError("n_nodes must be >= 2")
    if n_steps < 64:
        raise DataError("n_steps must be >= 64 to form at least one window per split")
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps)
    if process == "diffusion":
        adj = _geometric_adjacency(rng, n_nodes)
        abar = build_supports(adj)[0]
        season = 0.5 * np.sin(2 * np.pi * t / period)
        x = np.zeros((n_nodes, n_steps))
        x[:, 0] = rng.normal(0.0, noise, size=n_nodes)
        eps = rng.normal(0.0, noise, size=(n_steps, n_nodes))
        for k in range(n_steps - 1):
            x[:, k + 1] = rho * abar @ x[:, k] + season[k] + eps[k]
        return CtsDataset(values=x[:, :, None].astype(np.float32), adjacency=adj,
                          name=f"synthetic-diffusion-{n_nodes}-{seed}", timestamps=t)
    if process == "seasonal":
        phase = rng.uniform(0, 2 * np.pi, size=(n_nodes, 1))
        amp = rng.uniform(0.5, 1.5, size=(n_nodes, 1))
        x = amp * np.sin(2 * np.pi * t[None, :] / period + phase)
        x += rng.normal(0.0, noise, size=x.shape)
        return CtsDataset(values=x[:, :, None].astype(np.float32), adjacency=None,
                          name=f"synthetic-seasonal-{n_nodes}-{seed}", timestamps=t)
    raise DataError(f"unknown process {process!r}")


# ------------------------------------------------------------------- windowing


def make_windows(segment: np.ndarray, P: int, Q: int, mode: Mode) -> tuple[np.ndarray, np.ndarray]:
    """segment: [N, T', F] -> inputs [S, N, P, F], targets [S, N, Q or 1, 1]."""
    n, length, f = segment.shape
    S = length - P - Q + 1
    if S < 1:
        raise DataError(f"split too short for one window: length {length} < P+Q = {P + Q}")
    starts = np.arange(S)
    inputs = segment[:, starts[:, None] + np.arange(P)[None, :], :]  # [N, S, P, F]
    inputs = inputs.transpose(1, 0, 2, 3)
    if mode == "multi_step":
        tidx = starts[:, None] + P + np.arange(Q)[None, :]
    elif mode == "single_step":
        tidx = (starts + P + Q - 1)[:, None]
    else:
        raise DataError(f"unknown mode {mode!r}")
    targets = segment[:, tidx, 0:1].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(inputs), np.ascontiguousarray(targets)


def split_and_window(ds: CtsDataset, spec: SplitSpec, P: int, Q: int, mode: Mode = "multi_step"):
    """Chronological train/val/test split, windowing and scaling.

    The scaler is fit on the training inputs only.  Inputs are z-scored;
    targets stay in original units of feature 0.
    """
    if P < 1 or Q < 1:
        raise DataError("P and Q must be >= 1")
    T = ds.n_steps
    n_train = int(round(spec.ratios[0] * T))
    n_val = int(round(spec.ratios[1] * T))
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, T)]
    raw = []
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        try:
            raw.append(make_windows(ds.values[:, a:b, :], P, Q, mode))
        except DataError as exc:
            raise DataError(f"{name} {exc}") from None
    scaler = Scaler.fit(raw[0][0])
    sets = [
        WindowSet(scaler.transform(x).astype(np.float32), y.astype(np.float32), P, Q, mode)
        for x, y in raw
    ]
    return sets[0], sets[1], sets[2], scaler


def pseudo_split(train: WindowSet, fraction: float = 0.5) -> tuple[WindowSet, WindowSet]:
    """Chronological partition of training windows; the first part gets the extra window."""
    if not 0.0 < fraction < 1.0:
        raise DataError("fraction must lie in (0, 1)")
    S = len(train)
    if S < 2:
        raise DataError("pseudo split needs at least 2 training windows")
    k = min(max(math.ceil(fraction * S), 1), S - 1)
    return train.subset(slice(0, k)), train.subset(slice(k, S))


def build_supports(adjacency: np.ndarray) -> list[np.ndarray]:
    """Forward and backward random-walk transition matrices [D_O^-1 A, D_I^-1 A^T].

    Zero-degree rows stay zero.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if np.any(a < 0):
        raise DataError("adjacency has negative entries")

    def rownorm(m):
        deg = m.sum(axis=1)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return inv[:, None] * m

    return [rownorm(a), rownorm(a.T)]


def default_adjacency(n: int) -> np.ndarray:
    """Complete graph without self loops, for datasets that ship no graph."""
    return np.ones((n, n)) - np.eye(n)
