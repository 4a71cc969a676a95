"""Forecast accuracy metrics and report assembly."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch


class MetricError(ValueError):
    pass


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {y.shape}")
    return p, y


def _masked(p, y, mask):
    if mask is None:
        return p.ravel(), y.ravel()
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise MetricError("no valid entries")
    return p[m], y[m]


def mae(pred, truth, mask=None) -> float:
    p, y = _masked(*_pair(pred, truth), mask)
    if p.size == 0:
        raise MetricError("no valid entries")
    return float(np.mean(np.abs(p - y)))


def rmse(pred, truth, mask=None) -> float:
    p, y = _masked(*_pair(pred, truth), mask)
    if p.size == 0:
        raise MetricError("no valid entries")
    return float(np.sqrt(np.mean((p - y) ** 2)))


def mape(pred, truth, mask=None) -> float:
    """Mean absolute percentage error in percent; zero truths are always excluded."""
    p, y = _pair(pred, truth)
    valid = y != 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise MetricError("no valid entries")
    return float(np.mean(np.abs(p[valid] - y[valid]) / np.abs(y[valid])) * 100.0)


def rrse(pred, truth) -> float:
    p, y = _pair(pred, truth)
    denom = np.sum((y - y.mean()) ** 2)
    if denom == 0:
        raise MetricError("truth has zero variance")
    return float(np.sqrt(np.sum((p - y) ** 2) / denom))


def corr(pred, truth) -> float:
    """Mean over nodes of the Pearson correlation across windows.

    Inputs are [S, N] (extra trailing axes are flattened into nodes).
    Nodes whose truth is constant are skipped.
    """
    p, y = _pair(pred, truth)
    if p.shape[0] < 2:
        raise MetricError("CORR needs at least 2 windows")
    p = p.reshape(p.shape[0], -1)
    y = y.reshape(y.shape[0], -1)
    pc, yc = p - p.mean(0), y - y.mean(0)
    sp, sy = np.sqrt((pc**2).sum(0)), np.sqrt((yc**2).sum(0))
    keep = sy > 0
    if not keep.any():
        raise MetricError("all nodes have zero truth variance")
    num = (pc * yc).sum(0)[keep]
    den = (sp * sy)[keep]
    r = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(np.clip(r, -1.0, 1.0).mean())


@dataclass
class MetricsReport:
    mode: str
    horizons: dict = field(default_factory=dict)  # "3" -> {"MAE", "RMSE", "MAPE"}
    average: dict = field(default_factory=dict)
    single_step: dict = field(default_factory=dict)  # {"RRSE", "CORR"}
    n_windows: int = 0
    dataset: str = ""
    genotype_hash: str = ""
    notes: dict = field(default_factory=lambda: {"mape_zero_mask": True})

    def check(self):
        rows = list(self.horizons.values()) + ([self.average] if self.average else [])
        for row in rows:
            if row["MAE"] > row["RMSE"] * (1 + 1e-12) + 1e-12:
                raise MetricError(f"MAE {row['MAE']} exceeds RMSE {row['RMSE']}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def table(self) -> str:
        lines = [f"dataset: {self.dataset}  windows: {self.n_windows}  genotype: {self.genotype_hash}"]
        header = f"{'horizon':>8} {'MAE':>10} {'RMSE':>10} {'MAPE':>9}"
        if self.mode == "multi_step":
            lines.append(header)
            for h, row in self.horizons.items():
                lines.append(f"{h:>8} {row['MAE']:>10.4f} {row['RMSE']:>10.4f} {row['MAPE']:>8.2f}%")
            row = self.average
            lines.append(f"{'average':>8} {row['MAE']:>10.4f} {row['RMSE']:>10.4f} {row['MAPE']:>8.2f}%")
        else:
            lines.append(f"{'RRSE':>8} {'CORR':>10}")
            lines.append(f"{self.single_step['RRSE']:>8.4f} {self.single_step['CORR']:>10.4f}")
        return "\n".join(lines)


def _row(p, y) -> dict:
    return {"MAE": mae(p, y), "RMSE": rmse(p, y), "MAPE": mape(p, y)}


@torch.no_grad()
def predict(model, windows, scaler, batch_size: int = 256) -> np.ndarray:
    """Predictions in original units, shaped like ``windows.targets``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    for start in range(0, len(windows), batch_size):
        x = torch.as_tensor(windows.inputs[start:start + batch_size], dtype=dtype)
        out = model(x)
        if out.dim() == 3:
            out = out.unsqueeze(-1)
        outs.append(scaler.inverse_target(out).double().numpy())
    return np.concatenate(outs, axis=0)


def build_report(pred, truth, mode: str, horizons=(3, 6, 12), dataset: str = "", genotype_hash: str = "") -> MetricsReport:
    """pred/truth: [S, N, Q, 1] for multi-step, [S, N, 1, 1] for single-step."""
    pred, truth = _pair(pred, truth)
    report = MetricsReport(mode=mode, n_windows=int(truth.shape[0]), dataset=dataset, genotype_hash=genotype_hash)
    if mode == "multi_step":
        Q = truth.shape[2]
        for h in horizons:
            if not 1 <= h <= Q:
                raise MetricError(f"horizon {h} outside 1..{Q}")
            report.horizons[str(h)] = _row(pred[:, :, h - 1], truth[:, :, h - 1])
        report.average = _row(pred, truth)
    else:
        p, y = pred[:, :, 0, 0], truth[:, :, 0, 0]
        report.average = _row(p, y)
        report.single_step = {"RRSE": rrse(p, y), "CORR": corr(p, y)}
    report.check()
    return report


def evaluate(model, windows, scaler, horizons=(3, 6, 12), dataset: str = "", genotype_hash: str = "") -> MetricsReport:
    if windows.mode == "multi_step":
        for h in horizons:
            if not 1 <= h <= windows.Q:
                raise MetricError(f"horizon {h} outside 1..{windows.Q}")
    pred = predict(model, windows, scaler)
    return build_report(pred, windows.targets, windows.mode, horizons, dataset, genotype_hash)
