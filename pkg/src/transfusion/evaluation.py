"""Evaluation metrics (MAE, MSE, MAPE, R^2), test-set evaluation, and the
five-row ablation study (full model plus four single-component removals)."""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .model import ModelConfig, TransFusionModel, ablate, build, forward
from .tensor import no_grad
from .train import TrainConfig, fit

ABLATION_ROWS = ("full", "-vision", "-wifi", "-multiscale", "-linear_attention")
_ROW_TO_KEY = {
    "-vision": "vision_stream",
    "-wifi": "wifi_stream",
    "-multiscale": "multiscale_cnn",
    "-linear_attention": "linear_attention",
}
METRIC_NAMES = ("mae", "mse", "mape", "r2")


@dataclass
class MetricsReport:
    mae: float
    mse: float
    mape: float
    r2: float | None  # None when label variance is zero (undefined)
    m: int
    mape_excluded: int
    model_id: str = ""
    dataset_id: str = ""
    timestamp: str = ""

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mse": self.mse,
            "mape": self.mape,
            "r2": self.r2,
            "m": self.m,
            "mape_excluded": self.mape_excluded,
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "timestamp": self.timestamp,
        }

    def format_row(self) -> str:
        r2 = "undef" if self.r2 is None else f"{self.r2:.4f}"
        return f"MAE {self.mae:.4f}  MSE {self.mse:.4f}  MAPE {self.mape:.4f}  R2 {r2}"


def compute_metrics(preds, labels, model_id: str = "", dataset_id: str = "") -> MetricsReport:
    """Mean absolute/squared error, percentage error, coefficient of determination.

    MAPE averages |pred - y| / y over strictly positive labels only; zero-label
    samples are excluded and counted. R^2 = 1 - SS_res / SS_tot, reported as
    None when the labels have no variance.
    """
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    m = p.size
    if m < 2:
        raise ValueError("need at least 2 samples for R^2")
    err = p - y
    # fsum: correctly rounded sums make every metric exactly permutation-invariant
    mae = math.fsum(np.abs(err)) / m
    ss_res = math.fsum(err**2)
    mse = ss_res / m
    pos = y > 0
    excluded = int(m - pos.sum())
    mape = math.fsum(np.abs(err[pos]) / y[pos]) / int(pos.sum()) if pos.any() else 0.0
    y_mean = math.fsum(y) / m
    ss_tot = math.fsum((y_mean - y) ** 2)
    r2 = None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return MetricsReport(
        mae=mae,
        mse=mse,
        mape=mape,
        r2=r2,
        m=m,
        mape_excluded=excluded,
        model_id=model_id,
        dataset_id=dataset_id,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )


def predict(model: TransFusionModel, subset: D.Subset, batch_size: int = 32) -> np.ndarray:
    """Deterministic batched inference over a subset, in subset order."""
    preds = []
    with no_grad():
        for xw, xv, _y in D.batches(subset, batch_size):
            preds.extend(forward(model, xw[i], xv[i]).item() for i in range(xw.shape[0]))
    return np.array(preds, dtype=np.float64)


def evaluate(model: TransFusionModel, subset: D.Subset, batch_size: int = 32) -> MetricsReport:
    if len(subset) == 0:
        raise D.DataError("cannot evaluate an empty subset")
    preds = predict(model, subset, batch_size)
    return compute_metrics(
        preds,
        subset.labels(),
        model_id=f"seed{model.cfg.seed}-{model.cfg.streams}-{model.cfg.attention_kernel}",
        dataset_id=subset.dataset.spec.dataset_id(),
    )


@dataclass
class AblationReport:
    rows: dict[str, MetricsReport | None] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def delta(self, row: str) -> dict[str, float | None] | None:
        """Row metric minus full-model metric, per metric (R^2 included as row - full)."""
        rep = self.rows.get(row)
        full = self.rows.get("full")
        if rep is None or full is None:
            return None
        out: dict[str, float | None] = {}
        for name in METRIC_NAMES:
            a, b = getattr(rep, name), getattr(full, name)
            out[name] = None if a is None or b is None else a - b
        return out

    def to_table(self) -> str:
        header = f"{'model':<20}" + "".join(f"{k.upper():>10}{'Δ' + k.upper():>12}" for k in METRIC_NAMES)
        lines = [header, "-" * len(header)]
        for row in ABLATION_ROWS:
            rep = self.rows.get(row)
            if rep is None:
                lines.append(f"{row:<20}FAILED: {self.errors.get(row, 'unknown')}")
                continue
            delta = self.delta(row)
            cells = ""
            for name in METRIC_NAMES:
                val = getattr(rep, name)
                dv = delta[name]
                cells += f"{'undef' if val is None else format(val, '.4f'):>10}"
                cells += f"{'undef' if dv is None else format(dv, '+.4f'):>12}"
            lines.append(f"{row:<20}" + cells)
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model," + ",".join(f"{k},delta_{k}" for k in METRIC_NAMES) + "\n")
        for row in ABLATION_ROWS:
            rep = self.rows.get(row)
            if rep is None:
                buf.write(f"{row},failed\n")
                continue
            delta = self.delta(row)
            cells = []
            for name in METRIC_NAMES:
                val = getattr(rep, name)
                dv = delta[name]
                cells.append("" if val is None else f"{val:.4f}")
                cells.append("" if dv is None else f"{dv:.4f}")
            buf.write(row + "," + ",".join(cells) + "\n")
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {}
        for row in ABLATION_ROWS:
            rep = self.rows.get(row)
            payload[row] = None if rep is None else {**rep.to_dict(), "delta": self.delta(row)}
        if self.errors:
            payload["errors"] = self.errors
        return json.dumps(payload, sort_keys=True, indent=1)


def ablation_study(
    base_cfg: ModelConfig,
    train_set: D.Subset,
    val_set: D.Subset,
    test_set: D.Subset,
    train_cfg: TrainConfig,
    progress=None,
) -> AblationReport:
    """Train the full model plus four ablations from identical seeds and splits,
    then evaluate each on the test subset. A failed row is recorded and the
    remaining rows proceed."""
    report = AblationReport()
    for row in ABLATION_ROWS:
        cfg = base_cfg if row == "full" else ablate(base_cfg, _ROW_TO_KEY[row])
        try:
            model = build(cfg)
            best, _state = fit(model, train_set, val_set, train_cfg)
            report.rows[row] = evaluate(best, test_set, train_cfg.batch_size)
            if progress is not None:
                progress(row, report.rows[row])
        except Exception as exc:  # record the row failure, keep going
            report.rows[row] = None
            report.errors[row] = f"{type(exc).__name__}: {exc}"
    return report
