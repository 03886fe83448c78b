"""Validation and physics extraction from ensembles of predictions.

Calibration follows the subset construction: predictions at the final
time are binned into windows of half-width delta, and within each bin
the empirical outcome frequency is compared with the bin's nominal
probability. The weighted squared gap, summed over bins, is the
per-axis relative error.

Drift and diffusion maps histogram consecutive prediction changes on a
grid over the (y, z) plane of the Bloch ball. For the monitored-qubit
model the instantaneous drift is the linear field

    dy/dt = -gamma_phi * y - rabi * z,      dz/dt = +rabi * y,

and the displacement covariance is rank one with leading eigenvalue

    lambda = 2 * gamma_m * ((1 - z^2)^2 + (y z)^2) * dt,

which vanishes at the poles and peaks at the equator. Because the state
turns by rabi*dt ~ 0.2 rad within one record bin, the observed one-bin
displacement map is exp(A dt) - I rather than A dt (fitting the raw
secant would inflate gamma_phi by ~40% and shrink rabi by ~3%); the fit
therefore estimates the linear bin map by weighted least squares and
recovers A through a matrix logarithm. The quantum efficiency is the
ratio gamma_m / gamma_phi.

Initial-state tomography averages backward-model predictions taken at
t=0 under unknown conditioning; the quadratic-cost estimate of the
initial outcome probabilities is exactly that ensemble mean, clamped to
[0, 1], with confidence intervals from record-level bootstrap
resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import data, infer, nn
from .core import AXES, Label
from .errors import ConfigError, DataError, NumericError


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    delta: float
    centers: np.ndarray                    # (n_bins,)
    counts: dict[str, np.ndarray]          # per axis name
    mean_outcomes: dict[str, np.ndarray]   # NaN where a bin is empty
    epsilon: dict[str, float]
    total: int

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "total": self.total,
            "epsilon": {k: float(v) for k, v in self.epsilon.items()},
        }

    def bins_frame(self) -> pd.DataFrame:
        rows = []
        for name in self.counts:
            for c, cnt, m in zip(self.centers, self.counts[name],
                                 self.mean_outcomes[name]):
                rows.append((name, c, self.delta, int(cnt),
                             float(m) if np.isfinite(m) else float("nan")))
        return pd.DataFrame(
            rows, columns=["axis", "p_center", "delta", "count", "mean_outcome"]
        )


def calibrate(p_final, outcomes, axes, delta: float = 0.01) -> CalibrationReport:
    """Bin final predictions against observed outcome bits, per axis.

    p_final, outcomes and axes are aligned arrays (probability of y=1,
    observed bit, measurement-axis index). Bins of width 2*delta
    partition [0, 1]; the relative error per axis is
    sum_p (N_p / N) * (<y>_p - p_center)^2.
    """
    p_final = np.asarray(p_final, dtype=float)
    outcomes = np.asarray(outcomes, dtype=float)
    axes = np.asarray(axes, dtype=int)
    if p_final.size == 0:
        raise DataError("cannot calibrate an empty prediction set")
    if not (p_final.shape == outcomes.shape == axes.shape):
        raise DataError("calibration inputs must be aligned 1-D arrays")
    if delta <= 0:
        raise ConfigError("delta must be > 0")
    n_bins = max(1, int(math.ceil(1.0 / (2.0 * delta))))
    centers = (np.arange(n_bins) + 0.5) * 2.0 * delta
    bin_of = np.minimum((p_final / (2.0 * delta)).astype(int), n_bins - 1)

    counts, means, eps = {}, {}, {}
    for a in range(3):
        sel = axes == a
        name = AXES[a]
        n_axis = int(sel.sum())
        cnt = np.bincount(bin_of[sel], minlength=n_bins).astype(np.int64)
        ysum = np.bincount(bin_of[sel], weights=outcomes[sel], minlength=n_bins)
        with np.errstate(invalid="ignore"):
            mean_y = ysum / cnt
        counts[name] = cnt
        means[name] = mean_y
        if n_axis == 0:
            eps[name] = float("nan")
            continue
        occ = cnt > 0
        eps[name] = float(
            ((cnt[occ] / n_axis) * (mean_y[occ] - centers[occ]) ** 2).sum()
        )
    return CalibrationReport(delta=delta, centers=centers, counts=counts,
                             mean_outcomes=means, epsilon=eps,
                             total=int(p_final.size))


def final_step_table(series_list, dataset: data.Dataset, direction: str = "forward"):
    """Align predictions with outcome bits for calibration.

    Forward models are scored on the final projective bit with the
    record's measurement axis; backward models on the preparation bit
    with the preparation axis, read from the t=0 end of the series.
    Returns (p, y, axis) arrays.
    """
    if len(series_list) != len(dataset):
        raise DataError("series list and dataset sizes differ")
    p = np.empty(len(dataset))
    if direction == "forward":
        axis = dataset.labels[:, 2].astype(int)
        y = dataset.labels[:, 3].astype(float)
        for i, s in enumerate(series_list):
            p[i] = s.probs[-1, axis[i]]
    elif direction == "backward":
        axis = dataset.labels[:, 0].astype(int)
        y = dataset.labels[:, 1].astype(float)
        for i, s in enumerate(series_list):
            p[i] = s.probs[0, axis[i]]
    else:
        raise ConfigError(f"unknown direction {direction!r}")
    return p, y, axis


# ---------------------------------------------------------------------------
# Drift / diffusion maps
# ---------------------------------------------------------------------------


@dataclass
class VectorFieldMap:
    centers: np.ndarray          # (grid,) cell centers, same for y and z
    counts: np.ndarray           # (grid, grid) indexed [iy, iz]
    mean: np.ndarray             # (grid, grid, 2) mean displacement / dt
    mean_start: np.ndarray       # (grid, grid, 2) mean start point per cell
    cov: np.ndarray | None       # (grid, grid, 2, 2) displacement covariance
    dt: float
    min_count: int

    @property
    def valid(self) -> np.ndarray:
        """Cells with enough samples; the rest are flagged empty."""
        return self.counts >= self.min_count

    def leading_eigen(self):
        """Per-cell leading eigenvalue and unit eigenvector of cov."""
        if self.cov is None:
            raise ConfigError("map carries no covariance data")
        a = self.cov[..., 0, 0]
        b = self.cov[..., 0, 1]
        c = self.cov[..., 1, 1]
        half_gap = 0.5 * (a - c)
        root = np.sqrt(half_gap ** 2 + b ** 2)
        lam = 0.5 * (a + c) + root
        # Eigenvector of [[a, b], [b, c]] for the larger eigenvalue.
        vy = np.where(np.abs(b) > 1e-300, b, lam - c)
        vz = np.where(np.abs(b) > 1e-300, lam - a, np.zeros_like(b))
        norm = np.hypot(vy, vz)
        fallback = norm <= 0
        vy = np.where(fallback, np.where(a >= c, 1.0, 0.0), vy)
        vz = np.where(fallback, np.where(a >= c, 0.0, 1.0), vz)
        norm = np.hypot(vy, vz)
        return lam, np.stack([vy / norm, vz / norm], axis=-1)

    def to_frame(self) -> pd.DataFrame:
        g = len(self.centers)
        iy, iz = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        cols = {
            "y_center": self.centers[iy.ravel()],
            "z_center": self.centers[iz.ravel()],
            "count": self.counts.ravel(),
            "y_mean": self.mean_start[..., 0].ravel(),
            "z_mean": self.mean_start[..., 1].ravel(),
            "mean_dy_dt": self.mean[..., 0].ravel(),
            "mean_dz_dt": self.mean[..., 1].ravel(),
        }
        if self.cov is not None:
            lam, vec = self.leading_eigen()
            cols.update({
                "cov_yy": self.cov[..., 0, 0].ravel(),
                "cov_yz": self.cov[..., 0, 1].ravel(),
                "cov_zz": self.cov[..., 1, 1].ravel(),
                "eig_max": lam.ravel(),
                "eigvec_y": vec[..., 0].ravel(),
                "eigvec_z": vec[..., 1].ravel(),
            })
        return pd.DataFrame(cols)


def _collect_steps(series_list):
    """Concatenate (start point, displacement) pairs in the (y, z) plane."""
    starts, deltas = [], []
    dt = None
    for s in series_list:
        if len(s.times) < 2:
            continue
        step = float(s.times[1] - s.times[0])
        if dt is None:
            dt = step
        elif abs(step - dt) > 1e-9:
            raise DataError("prediction series have inconsistent time steps")
        yz = 2.0 * s.probs[:, 1:3] - 1.0
        starts.append(yz[:-1])
        deltas.append(np.diff(yz, axis=0))
    if dt is None:
        raise DataError("no series with at least two time points")
    return np.concatenate(starts), np.concatenate(deltas), dt


def _accumulate(series_list, grid_size, min_count, with_cov):
    starts, deltas, dt = _collect_steps(series_list)
    g = grid_size
    iy = np.clip(((starts[:, 0] + 1.0) * 0.5 * g).astype(int), 0, g - 1)
    iz = np.clip(((starts[:, 1] + 1.0) * 0.5 * g).astype(int), 0, g - 1)
    flat = iy * g + iz
    counts = np.bincount(flat, minlength=g * g).reshape(g, g)
    sums = np.stack([
        np.bincount(flat, weights=deltas[:, 0], minlength=g * g),
        np.bincount(flat, weights=deltas[:, 1], minlength=g * g),
    ], axis=-1).reshape(g, g, 2)
    pos_sums = np.stack([
        np.bincount(flat, weights=starts[:, 0], minlength=g * g),
        np.bincount(flat, weights=starts[:, 1], minlength=g * g),
    ], axis=-1).reshape(g, g, 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_delta = sums / counts[..., None]
        mean_start = pos_sums / counts[..., None]
    mean_delta[counts == 0] = 0.0
    mean_start[counts == 0] = 0.0
    cov = None
    if with_cov:
        prods = np.empty((g, g, 2, 2))
        for (i, j), col in (((0, 0), deltas[:, 0] * deltas[:, 0]),
                            ((0, 1), deltas[:, 0] * deltas[:, 1]),
                            ((1, 1), deltas[:, 1] * deltas[:, 1])):
            prods[..., i, j] = np.bincount(flat, weights=col,
                                           minlength=g * g).reshape(g, g)
        prods[..., 1, 0] = prods[..., 0, 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            second = prods / counts[..., None, None]
        outer = mean_delta[..., :, None] * mean_delta[..., None, :]
        cov = second - outer
        cov[counts == 0] = 0.0
    centers = (np.arange(g) + 0.5) * 2.0 / g - 1.0
    return VectorFieldMap(centers=centers, counts=counts,
                          mean=mean_delta / dt, mean_start=mean_start,
                          cov=cov, dt=dt, min_count=min_count)


def drift_map(series_list, grid_size: int = 20, min_count: int = 50) -> VectorFieldMap:
    """Cell-averaged prediction velocity over one record bin."""
    return _accumulate(series_list, grid_size, min_count, with_cov=False)


def diffusion_map(series_list, grid_size: int = 20, min_count: int = 50) -> VectorFieldMap:
    """Cell covariance of drift-subtracted prediction changes."""
    return _accumulate(series_list, grid_size, min_count, with_cov=True)


# ---------------------------------------------------------------------------
# Parameter extraction
# ---------------------------------------------------------------------------


@dataclass
class PhysParams:
    rabi_freq: float
    rabi_freq_err: float
    gamma_phi: float
    gamma_phi_err: float
    gamma_m: float
    gamma_m_err: float
    eta: float
    eta_err: float

    def to_dict(self) -> dict:
        return {
            "rabi_freq_rad_per_us": self.rabi_freq,
            "rabi_freq_err": self.rabi_freq_err,
            "rabi_freq_mhz": self.rabi_freq / (2.0 * math.pi),
            "gamma_phi_per_us": self.gamma_phi,
            "gamma_phi_err": self.gamma_phi_err,
            "gamma_m_per_us": self.gamma_m,
            "gamma_m_err": self.gamma_m_err,
            "eta": self.eta,
            "eta_err": self.eta_err,
        }


def _logm_2x2(m: np.ndarray) -> np.ndarray:
    """Principal matrix logarithm of a real 2x2 matrix with spectrum off
    the negative real axis (true for any damped-rotation bin map)."""
    w, vecs = np.linalg.eig(m.astype(complex))
    if np.any(np.abs(w) <= 0.0) or np.any((w.real <= 0.0) & (w.imag == 0.0)):
        raise NumericError("bin map has a non-positive real eigenvalue; "
                           "cannot take its logarithm")
    log_m = vecs @ np.diag(np.log(w)) @ np.linalg.inv(vecs)
    return log_m.real


def _drift_generator(drift: VectorFieldMap, valid: np.ndarray):
    """WLS fit of the one-bin linear map on valid cells, then the
    continuous generator A = logm(I + dt*B) / dt and the per-row WLS
    covariance of B (rows of B are independent regressions)."""
    w = drift.counts[valid].astype(float)
    pos = drift.mean_start[valid]          # (m, 2) mean start point
    vel = drift.mean[valid]                # (m, 2) displacement / dt
    sw = np.sqrt(w)
    design = pos * sw[:, None]
    gram_inv = np.linalg.inv(design.T @ design)
    b_rows = np.empty((2, 2))
    row_covs = np.empty((2, 2, 2))
    for r in range(2):
        target = vel[:, r] * sw
        b_rows[r] = gram_inv @ (design.T @ target)
        resid = vel[:, r] - pos @ b_rows[r]
        sigma2 = float((w * resid ** 2).sum()) / max(len(w) - 2, 1)
        row_covs[r] = sigma2 * gram_inv
    a_gen = _logm_2x2(np.eye(2) + drift.dt * b_rows) / drift.dt
    return a_gen, b_rows, row_covs


def _params_from_generator(a_gen: np.ndarray) -> tuple[float, float]:
    """(rabi, gamma_phi) from the (y, z) drift generator
    [[-gamma_phi, -rabi], [rabi, 0]]; antisymmetric and trace parts."""
    rabi = 0.5 * (a_gen[1, 0] - a_gen[0, 1])
    gamma_phi = -(a_gen[0, 0] + a_gen[1, 1])
    return float(rabi), float(gamma_phi)


def fit_params(drift: VectorFieldMap, diffusion: VectorFieldMap) -> PhysParams:
    """Weighted least squares of the two maps against the model fields."""
    dvalid = drift.valid
    if dvalid.sum() < 10:
        raise NumericError(f"drift map has only {int(dvalid.sum())} valid cells")
    g = len(drift.centers)
    yy, zz = np.meshgrid(drift.centers, drift.centers, indexing="ij")
    a_gen, b_rows, row_covs = _drift_generator(drift, dvalid)
    rabi, gamma_phi = _params_from_generator(a_gen)
    # Delta-method errors: numerical Jacobian of (rabi, gamma_phi)
    # through the matrix logarithm, row covariances of B on the inside.
    jac = np.zeros((2, 4))
    h = 1e-6
    for k in range(4):
        bumped = b_rows.copy()
        bumped[divmod(k, 2)] += h
        a_b = _logm_2x2(np.eye(2) + drift.dt * bumped) / drift.dt
        pr, pg = _params_from_generator(a_b)
        jac[0, k] = (pr - rabi) / h
        jac[1, k] = (pg - gamma_phi) / h
    cov_b = np.zeros((4, 4))
    cov_b[:2, :2] = row_covs[0]
    cov_b[2:, 2:] = row_covs[1]
    cov_theta = jac @ cov_b @ jac.T
    rabi_err, gamma_phi_err = np.sqrt(np.maximum(np.diag(cov_theta), 0.0))

    mvalid = diffusion.valid
    if mvalid.sum() < 10:
        raise NumericError(f"diffusion map has only {int(mvalid.sum())} valid cells")
    if diffusion.cov is None:
        raise ConfigError("diffusion map lacks covariance data")
    lam, _ = diffusion.leading_eigen()
    lam = lam[mvalid]
    yv2 = diffusion.mean_start[mvalid][:, 0]
    zv2 = diffusion.mean_start[mvalid][:, 1]
    wd = diffusion.counts[mvalid].astype(float)
    # Leading eigenvalue of the rank-one backaction covariance in (y, z).
    x = 2.0 * diffusion.dt * ((1.0 - zv2 ** 2) ** 2 + (yv2 * zv2) ** 2)
    denom = float((wd * x * x).sum())
    if denom <= 0:
        raise NumericError("diffusion fit is degenerate")
    gamma_m = float((wd * x * lam).sum()) / denom
    rd = lam - gamma_m * x
    sig2 = float((wd * rd ** 2).sum()) / max(len(lam) - 1, 1)
    gamma_m_err = math.sqrt(sig2 / denom)

    eta = gamma_m / gamma_phi if gamma_phi > 0 else float("nan")
    if math.isfinite(eta) and gamma_m > 0:
        eta_err = abs(eta) * math.hypot(gamma_m_err / gamma_m,
                                        gamma_phi_err / gamma_phi)
    else:
        eta_err = float("nan")
    return PhysParams(rabi_freq=rabi, rabi_freq_err=float(rabi_err),
                      gamma_phi=gamma_phi, gamma_phi_err=float(gamma_phi_err),
                      gamma_m=gamma_m, gamma_m_err=float(gamma_m_err),
                      eta=eta, eta_err=eta_err)


# ---------------------------------------------------------------------------
# Initial-state tomography
# ---------------------------------------------------------------------------


@dataclass
class TomographyResult:
    p0: np.ndarray            # (3,) estimated P(y0=1) per axis
    bloch: np.ndarray         # (3,) 2*p0 - 1, projected into the unit ball
    predictions: np.ndarray   # (n_records, 3) per-record t=0 probabilities

    def to_dict(self) -> dict:
        return {
            "p0": {AXES[a]: float(self.p0[a]) for a in range(3)},
            "bloch": {AXES[a].lower(): float(self.bloch[a]) for a in range(3)},
            "n_records": int(len(self.predictions)),
        }


def _point_estimate(predictions: np.ndarray):
    p0 = np.clip(predictions.mean(axis=0), 0.0, 1.0)
    v = 2.0 * p0 - 1.0
    norm = float(np.linalg.norm(v))
    if norm > 1.0:
        v = v / norm
    return p0, v


def start_probabilities(model: nn.RnnModel, dataset: data.Dataset) -> np.ndarray:
    """Backward-model t=0 predictions under unknown conditioning, (n, 3)."""
    if model.direction != "backward":
        raise ConfigError("initial-state estimation needs a backward model")
    series = infer.predict_dataset(model, dataset, unknown_conditioning=True)
    return np.stack([s.probs[0] for s in series])


def tomography(model: nn.RnnModel, dataset: data.Dataset) -> TomographyResult:
    """Estimate the shared initial state of a record ensemble.

    The per-axis estimate minimizing the summed squared distance to the
    per-record predictions is their mean; the Bloch vector is 2*p0 - 1
    scaled back into the unit ball if needed.
    """
    if len(dataset) < 100:
        raise DataError(f"need at least 100 records, got {len(dataset)}")
    preds = start_probabilities(model, dataset)
    p0, v = _point_estimate(preds)
    return TomographyResult(p0=p0, bloch=v, predictions=preds)


def bootstrap_ci(predictions: np.ndarray, n_resamples: int = 1000,
                 seed: int = 0, level: float = 0.95) -> np.ndarray:
    """Percentile bootstrap interval of the Bloch estimate, shape (3, 2).

    Resamples whole records with replacement and re-runs the point
    estimate, so the interval reflects record-to-record scatter.
    """
    if n_resamples < 100:
        raise ConfigError("n_resamples must be >= 100")
    rng = np.random.default_rng(seed)
    n = len(predictions)
    stats = np.empty((n_resamples, 3))
    for r in range(n_resamples):
        sel = rng.integers(0, n, n)
        _, stats[r] = _point_estimate(predictions[sel])
    tail = 100.0 * (1.0 - level) / 2.0
    lo = np.percentile(stats, tail, axis=0)
    hi = np.percentile(stats, 100.0 - tail, axis=0)
    return np.stack([lo, hi], axis=1)


def nearest_cardinal(bloch: np.ndarray) -> Label:
    """Closest of the six cardinal states to a Bloch vector."""
    axis = int(np.argmax(np.abs(bloch)))
    return Label(y=int(bloch[axis] >= 0), axis=axis)
