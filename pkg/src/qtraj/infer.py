"""Forward prediction, backward retrodiction and smoothing of records.

A forward model is conditioned on the preparation and consumes the
record in time order, so its probability at step t depends only on
samples at times <= t. A backward model is conditioned on the final
measurement and consumes the record reversed; its output here is
re-reversed so that entry t of every series refers to the same instant
of forward time. The two are combined per axis by the odds-product rule

    p = pf * pb / (pf * pb + (1 - pf) * (1 - pb)),

computed in log-odds space (where it is simply additive) to stay exact
near 0 and 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import data, nn
from .core import AXES, Label, label_index
from .errors import ConfigError, DataError

DEFAULT_RECORD_DT = 0.04

_CSV_COLUMNS = ("record_id", "t_us", "axis", "p_forward", "p_backward", "p_smoothed")

_LOGIT_CLIP = 1e-15


@dataclass
class PredictionSeries:
    """Per-time-step outcome probabilities for the three Pauli axes.

    probs has shape (steps+1, 3); entry 0 is the t=0 prediction from
    the conditioning alone.
    """

    times: np.ndarray
    probs: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


def _normalize_record(model: nn.RnnModel, voltages) -> np.ndarray:
    v = np.asarray(voltages, dtype=float)
    return (v - model.norm_mean) / model.norm_std


def predict_forward(model: nn.RnnModel, voltages, prep: Label,
                    record_dt: float = DEFAULT_RECORD_DT) -> PredictionSeries:
    """Causal prediction series from a raw (unnormalized) record."""
    if model.direction != "forward":
        raise ConfigError("predict_forward needs a forward-direction model")
    X = _normalize_record(model, voltages)[None, :]
    cond = np.array([label_index(prep)])
    probs = nn.predict_probabilities(model, X, cond)[0]
    times = np.arange(len(X[0]) + 1) * record_dt
    return PredictionSeries(times=times, probs=probs)


def predict_backward(model: nn.RnnModel, voltages, meas: Label,
                     record_dt: float = DEFAULT_RECORD_DT) -> PredictionSeries:
    """Anti-causal series: conditioned on the final measurement, the
    record is consumed reversed and the output re-reversed, so entry t
    depends only on samples at times >= t."""
    if model.direction != "backward":
        raise ConfigError("predict_backward needs a backward-direction model")
    X = _normalize_record(model, voltages)[::-1][None, :]
    cond = np.array([label_index(meas)])
    probs = nn.predict_probabilities(model, X, cond)[0][::-1]
    times = np.arange(len(X[0]) + 1) * record_dt
    return PredictionSeries(times=times, probs=probs.copy())


def predict_dataset(model: nn.RnnModel, dataset: data.Dataset,
                    unknown_conditioning: bool = False,
                    chunk: int = 2048) -> list[PredictionSeries]:
    """Series for every record of a dataset, grouped by length for speed.

    The dataset must be raw (unnormalized); the model's stored
    statistics are applied. With unknown_conditioning the label encoder
    is fed the uniform mixture instead of the record's label, which is
    how initial-state estimation runs a backward model.
    """
    if dataset.norm_stats is not None:
        raise ConfigError("predict_dataset expects raw voltages; the model "
                          "applies its own normalization")
    cfg = dataset.manifest.get("config") or {}
    record_dt = float(cfg.get("record_dt", DEFAULT_RECORD_DT))
    backward = model.direction == "backward"
    out: list[PredictionSeries | None] = [None] * len(dataset)
    for steps, group in dataset.groups_by_length():
        times = np.arange(steps + 1) * record_dt
        for lo in range(0, len(group), chunk):
            sel = group[lo:lo + chunk]
            X = (dataset.voltage_matrix(sel).astype(float) - model.norm_mean)
            X /= model.norm_std
            if backward:
                X = X[:, ::-1]
            if unknown_conditioning:
                cond = None
            elif backward:
                cond = 2 * dataset.labels[sel, 2].astype(int) + dataset.labels[sel, 3]
            else:
                cond = 2 * dataset.labels[sel, 0].astype(int) + dataset.labels[sel, 1]
            probs = nn.predict_probabilities(model, X, cond)
            if backward:
                probs = probs[:, ::-1]
            for row, rec in enumerate(sel):
                out[rec] = PredictionSeries(times=times, probs=probs[row].copy())
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------


def logit(p):
    p = np.clip(np.asarray(p, dtype=float), _LOGIT_CLIP, 1.0 - _LOGIT_CLIP)
    return np.log(p) - np.log1p(-p)


def smooth_probabilities(pf, pb):
    """Odds-product combination of two probability arrays, elementwise."""
    return nn.sigmoid(logit(pf) + logit(pb))


def smooth(pf: PredictionSeries, pb: PredictionSeries) -> PredictionSeries:
    """Combine forward and backward series into the smoothed estimate."""
    if pf.probs.shape != pb.probs.shape:
        raise DataError(
            f"series length mismatch: {pf.probs.shape} vs {pb.probs.shape}"
        )
    return PredictionSeries(times=pf.times.copy(),
                            probs=smooth_probabilities(pf.probs, pb.probs))


# ---------------------------------------------------------------------------
# CSV export / import
# ---------------------------------------------------------------------------


def predictions_frame(series_list, record_ids=None, kind: str = "p_forward") -> pd.DataFrame:
    """Long-format table of one series collection under a given column."""
    if kind not in ("p_forward", "p_backward", "p_smoothed"):
        raise ConfigError(f"unknown prediction kind {kind!r}")
    ids, times, axes, values = [], [], [], []
    if record_ids is None:
        record_ids = range(len(series_list))
    for rid, series in zip(record_ids, series_list):
        n = len(series.times)
        for a in range(3):
            ids.append(np.full(n, rid, dtype=np.int64))
            times.append(series.times)
            axes.append(np.full(n, AXES[a]))
            values.append(series.probs[:, a])
    frame = pd.DataFrame({
        "record_id": np.concatenate(ids),
        "t_us": np.concatenate(times),
        "axis": np.concatenate(axes),
    })
    for col in ("p_forward", "p_backward", "p_smoothed"):
        frame[col] = np.concatenate(values) if col == kind else np.nan
    return frame


def write_predictions_csv(path, series_list, record_ids=None,
                          kind: str = "p_forward") -> None:
    frame = predictions_frame(series_list, record_ids, kind)
    frame.to_csv(path, index=False, float_format="%.17g")


def read_predictions_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = set(_CSV_COLUMNS) - set(frame.columns)
    if missing:
        raise DataError(f"prediction CSV lacks columns {sorted(missing)}")
    return frame


def series_from_frame(frame: pd.DataFrame, column: str) -> tuple[np.ndarray, list[PredictionSeries]]:
    """Rebuild (record_ids, series list) from a long-format table."""
    if column not in frame.columns:
        raise DataError(f"prediction CSV lacks column {column!r}")
    ids = []
    series = []
    for rid, sub in frame.groupby("record_id", sort=True):
        pivot = sub.pivot_table(index="t_us", columns="axis", values=column,
                                sort=True)
        try:
            probs = pivot[list(AXES)].to_numpy(dtype=float)
        except KeyError as exc:
            raise DataError(f"prediction CSV incomplete for record {rid}") from exc
        if np.isnan(probs).any():
            raise DataError(f"prediction CSV has gaps for record {rid}")
        ids.append(rid)
        series.append(PredictionSeries(times=pivot.index.to_numpy(dtype=float),
                                       probs=probs))
    return np.asarray(ids), series
