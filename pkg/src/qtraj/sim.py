"""Stochastic simulation of a continuously monitored, Rabi-driven qubit.

The monitored observable is sigma_z with measurement strength gamma
(1/us) and quantum efficiency eta in [0, 1]; a resonant drive rotates
the Bloch vector about X at rabi_freq (rad/us). In Bloch coordinates
the Ito equations integrated here are

    dx = -gamma x dt - k x z dW
    dy = (-rabi z - gamma y) dt - k y z dW
    dz = rabi y dt + k (1 - z^2) dW,        k = sqrt(2 gamma eta),

with dW a Wiener increment of variance dt. Each substep applies the X
rotation exactly (a first-order treatment would dilate the gamma=0
rotation by ~(rabi*dt)^2/2 per step, visibly corrupting z = cos(rabi t)
over 4 us) and the dissipative/backaction terms with Euler-Maruyama.
States that step outside the Bloch ball are projected back to its
surface (the nearest valid state); a norm beyond DIVERGENCE_LIMIT
aborts, signalling that the step size is too large.

Voltage records use the signal-plus-white-noise convention

    V_bin = k z(bin start) + dW_bin / dt_bin

so a filter reading the record recovers dW_bin = (V_bin - k z) dt_bin
exactly. Each record bin spans integration_substeps substeps whose
Wiener increments are drawn independently and summed into dW_bin.

Every shot owns a counter-based random stream keyed by (seed, shot
index), so datasets are bit-reproducible no matter how generation is
chunked across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import data
from .core import (
    IDENTITY,
    SIGMA_X,
    SIGMA_Z,
    Label,
    bloch_from_rho,
    cardinal_state,
    label_index,
    rho_from_bloch,
)
from .errors import ConfigError, NumericError
from .infer import PredictionSeries

#: Bloch norm beyond which integration aborts instead of projecting.
DIVERGENCE_LIMIT = 1.5

_SETTINGS_PER_CYCLE = 6 * 3  # prep labels x measurement axes


def default_duration_grid(record_dt: float = 0.04, max_time: float = 4.0,
                          count: int = 20) -> tuple[float, ...]:
    """Evenly spread durations in [0, max_time], snapped to record bins."""
    max_steps = int(round(max_time / record_dt))
    steps = np.unique(np.round(np.linspace(0.0, max_steps, count)).astype(int))
    return tuple(float(s) * record_dt for s in steps)


@dataclass(frozen=True)
class SimConfig:
    """Physical and numerical parameters of a simulation run.

    rabi_freq is in rad/us, meas_dephasing (gamma) in 1/us. Defaults
    follow the reference experiment: 0.82 MHz Rabi drive, gamma = 1.1,
    eta = 0.36, 40 ns sampling, 20 durations within 4 us.
    """

    rabi_freq: float = 2.0 * math.pi * 0.82
    meas_dephasing: float = 1.1
    quantum_efficiency: float = 0.36
    record_dt: float = 0.04
    integration_substeps: int = 10
    duration_grid: tuple[float, ...] = field(default_factory=default_duration_grid)
    seed: int = 0

    def __post_init__(self):
        if self.meas_dephasing < 0:
            raise ConfigError("meas_dephasing must be >= 0")
        if not 0.0 <= self.quantum_efficiency <= 1.0:
            raise ConfigError("quantum_efficiency must be in [0, 1]")
        if self.record_dt <= 0:
            raise ConfigError("record_dt must be > 0")
        if self.integration_substeps < 1:
            raise ConfigError("integration_substeps must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not self.duration_grid:
            raise ConfigError("duration_grid must not be empty")
        for t in self.duration_grid:
            self.steps_for(t)  # raises if off the bin grid

    @property
    def signal_scale(self) -> float:
        """Voltage per unit z: 2 sqrt(eta) * sqrt(gamma/2) = sqrt(2 gamma eta)."""
        return math.sqrt(2.0 * self.meas_dephasing * self.quantum_efficiency)

    @property
    def substep_dt(self) -> float:
        return self.record_dt / self.integration_substeps

    def steps_for(self, duration: float) -> int:
        """Number of record bins for a duration; must sit on the bin grid."""
        steps = int(round(duration / self.record_dt))
        if steps < 0 or abs(steps * self.record_dt - duration) > 1e-9:
            raise ConfigError(
                f"duration {duration} is not a non-negative multiple of "
                f"record_dt={self.record_dt}"
            )
        return steps

    def to_dict(self) -> dict:
        return {
            "rabi_freq": self.rabi_freq,
            "meas_dephasing": self.meas_dephasing,
            "quantum_efficiency": self.quantum_efficiency,
            "record_dt": self.record_dt,
            "integration_substeps": self.integration_substeps,
            "duration_grid": list(self.duration_grid),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulation config keys: {sorted(unknown)}")
        d = dict(d)
        if "duration_grid" in d:
            d["duration_grid"] = tuple(float(t) for t in d["duration_grid"])
        return cls(**d)


@dataclass
class SimulatedShot:
    """One synthetic run: preparation, sampled projective outcome, record."""

    prep: Label
    meas: Label
    record: np.ndarray  # (steps,) float64 voltages
    duration: float
    true_bloch: np.ndarray | None = None  # (steps+1, 3), debug only

    @property
    def steps(self) -> int:
        return len(self.record)

    def true_rho_series(self) -> list[np.ndarray] | None:
        if self.true_bloch is None:
            return None
        return [rho_from_bloch(v) for v in self.true_bloch]


def shot_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one shot; pure in (seed, index)."""
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def setting_for_index(cfg: SimConfig, index: int) -> tuple[Label, int, float]:
    """Deterministic (prep, meas_axis, duration) sweep, durations cycling fastest."""
    n_dur = len(cfg.duration_grid)
    combo = index % (_SETTINGS_PER_CYCLE * n_dur)
    duration = cfg.duration_grid[combo % n_dur]
    meas_axis = (combo // n_dur) % 3
    prep_idx = combo // (n_dur * 3)
    prep = Label(y=prep_idx % 2, axis=prep_idx // 2)
    return prep, meas_axis, duration


# ---------------------------------------------------------------------------
# Bloch-coordinate integration kernels (vectorized over trajectories)
# ---------------------------------------------------------------------------


def _project_ball(x, y, z):
    """Clamp Bloch rows back onto the unit sphere; abort on gross overshoot."""
    n2 = x * x + y * y + z * z
    over = n2 > 1.0
    if np.any(over):
        n = np.sqrt(n2[over])
        nmax = n.max()
        if nmax > DIVERGENCE_LIMIT:
            raise NumericError(
                f"Bloch norm {nmax:.4f} exceeded {DIVERGENCE_LIMIT}; "
                "integration step too large"
            )
        x[over] /= n
        y[over] /= n
        z[over] /= n
    return x, y, z


def _substep(x, y, z, dw, dt, sin_t, cos_t, gamma, k):
    """Exact X rotation followed by Euler-Maruyama dissipation/backaction."""
    yr = cos_t * y - sin_t * z
    zr = sin_t * y + cos_t * z
    decay = 1.0 - gamma * dt
    xn = x * decay - k * (x * zr) * dw
    yn = yr * decay - k * (yr * zr) * dw
    zn = zr + k * (1.0 - zr * zr) * dw
    return _project_ball(xn, yn, zn)


def _prep_bloch_rows(prep_axis, y0):
    """Initial Bloch rows for arrays of preparation labels."""
    n = len(prep_axis)
    sign = np.where(np.asarray(y0) == 1, 1.0, -1.0)
    x = np.where(np.asarray(prep_axis) == 0, sign, 0.0)
    y = np.where(np.asarray(prep_axis) == 1, sign, 0.0)
    z = np.where(np.asarray(prep_axis) == 2, sign, 0.0)
    return x.astype(float), y.astype(float), z.astype(float), n


def _simulate_group(prep_axis, y0, noise, cfg: SimConfig, store_states=False):
    """Integrate a batch of equal-length shots.

    noise holds standard normals of shape (n, steps * substeps). Returns
    (voltages (n, steps), final Bloch rows, optional state series).
    """
    x, y, z, n = _prep_bloch_rows(prep_axis, y0)
    steps = noise.shape[1] // cfg.integration_substeps
    sub = cfg.integration_substeps
    dt = cfg.substep_dt
    sqrt_dt = math.sqrt(dt)
    theta = cfg.rabi_freq * dt
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    gamma, k = cfg.meas_dephasing, cfg.signal_scale

    volts = np.empty((n, steps))
    series = np.empty((n, steps + 1, 3)) if store_states else None
    for b in range(steps):
        if store_states:
            series[:, b, 0], series[:, b, 1], series[:, b, 2] = x, y, z
        s_bin = k * z
        wsum = np.zeros(n)
        for j in range(sub):
            dw = noise[:, b * sub + j] * sqrt_dt
            x, y, z = _substep(x, y, z, dw, dt, sin_t, cos_t, gamma, k)
            wsum += dw
        volts[:, b] = s_bin + wsum / cfg.record_dt
    if store_states:
        series[:, steps, 0], series[:, steps, 1], series[:, steps, 2] = x, y, z
    return volts, (x, y, z), series


def _filter_group(x, y, z, volts, cfg: SimConfig, loglik=None):
    """Re-integrate states from recorded voltages; emit Born probabilities.

    Recovers the bin Wiener increment as (V - k z) * dt_bin and spreads
    it evenly over the substeps. When loglik is given, accumulates the
    Gaussian innovation log-likelihood of each record instead of storing
    probabilities (used for initial-state retrodiction).
    """
    n, steps = volts.shape
    sub = cfg.integration_substeps
    dt = cfg.substep_dt
    theta = cfg.rabi_freq * dt
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    gamma, k = cfg.meas_dephasing, cfg.signal_scale

    probs = None
    if loglik is None:
        probs = np.empty((n, steps + 1, 3))
        probs[:, 0, 0] = 0.5 * (x + 1.0)
        probs[:, 0, 1] = 0.5 * (y + 1.0)
        probs[:, 0, 2] = 0.5 * (z + 1.0)
    for b in range(steps):
        s_bin = k * z
        innovation = volts[:, b] - s_bin
        if loglik is not None:
            # V | past ~ Normal(k z, 1 / dt_bin); outcome-independent terms drop.
            loglik -= 0.5 * cfg.record_dt * innovation * innovation
        dw = innovation * cfg.record_dt / sub
        for _ in range(sub):
            x, y, z = _substep(x, y, z, dw, dt, sin_t, cos_t, gamma, k)
        if probs is not None:
            probs[:, b + 1, 0] = 0.5 * (x + 1.0)
            probs[:, b + 1, 1] = 0.5 * (y + 1.0)
            probs[:, b + 1, 2] = 0.5 * (z + 1.0)
    return probs, (x, y, z)


# ---------------------------------------------------------------------------
# Density-matrix reference steps
# ---------------------------------------------------------------------------


def _rotation_x(theta: float) -> np.ndarray:
    return math.cos(0.5 * theta) * IDENTITY - 1j * math.sin(0.5 * theta) * SIGMA_X


def _positivity(rho: np.ndarray) -> np.ndarray:
    """Hermitize, renormalize trace, project into the Bloch ball."""
    rho = 0.5 * (rho + rho.conj().T)
    tr = rho[0, 0].real + rho[1, 1].real
    if not np.isfinite(tr) or tr <= 0.0:
        raise NumericError("density-matrix trace collapsed; step size too large")
    rho = rho / tr
    v = bloch_from_rho(rho)
    norm = float(np.linalg.norm(v))
    if norm > DIVERGENCE_LIMIT:
        raise NumericError(
            f"Bloch norm {norm:.4f} exceeded {DIVERGENCE_LIMIT}; "
            "integration step too large"
        )
    if norm > 1.0:
        rho = rho_from_bloch(v / norm)
    return rho


def sme_step(rho: np.ndarray, dw: float, dt: float, cfg: SimConfig) -> np.ndarray:
    """One conditional-evolution step of the monitored qubit.

    Applies the Rabi rotation exactly, then the measurement dephasing
    (gamma/2)(sz rho sz - rho) dt and the backaction
    sqrt(eta gamma/2)(sz rho + rho sz - 2 <sz> rho) dw, followed by
    hermitization, trace renormalization and positivity projection.
    """
    if dt <= 0:
        raise ConfigError("dt must be > 0")
    u = _rotation_x(cfg.rabi_freq * dt)
    r = u @ rho @ u.conj().T
    g = cfg.meas_dephasing
    lind = 0.5 * g * (SIGMA_Z @ r @ SIGMA_Z - r)
    zbar = (r[0, 0] - r[1, 1]).real
    meas = math.sqrt(0.5 * g) * (SIGMA_Z @ r + r @ SIGMA_Z - 2.0 * zbar * r)
    r = r + lind * dt + math.sqrt(cfg.quantum_efficiency) * meas * dw
    return _positivity(r)


def lindblad_step(rho: np.ndarray, dt: float, cfg: SimConfig) -> np.ndarray:
    """sme_step with the stochastic backaction removed (ensemble average)."""
    if dt <= 0:
        raise ConfigError("dt must be > 0")
    u = _rotation_x(cfg.rabi_freq * dt)
    r = u @ rho @ u.conj().T
    g = cfg.meas_dephasing
    r = r + 0.5 * g * (SIGMA_Z @ r @ SIGMA_Z - r) * dt
    return _positivity(r)


def lindblad_trajectory(prep: Label, duration: float, cfg: SimConfig) -> np.ndarray:
    """Deterministic Bloch series (steps+1, 3) on the record-bin grid."""
    steps = cfg.steps_for(duration)
    rho = cardinal_state(prep)
    out = np.empty((steps + 1, 3))
    out[0] = bloch_from_rho(rho)
    for b in range(steps):
        for _ in range(cfg.integration_substeps):
            rho = lindblad_step(rho, cfg.substep_dt, cfg)
        out[b + 1] = bloch_from_rho(rho)
    return out


# ---------------------------------------------------------------------------
# Shot generation
# ---------------------------------------------------------------------------


def generate_shot(prep: Label, meas_axis: int, duration: float, cfg: SimConfig,
                  rng: np.random.Generator, store_states: bool = False) -> SimulatedShot:
    """Simulate one heralded shot: prepare, monitor, projectively read out.

    Draw order (normals for every substep, then one uniform for the
    final outcome) is part of the reproducibility contract.
    """
    steps = cfg.steps_for(duration)
    noise = rng.standard_normal((1, steps * cfg.integration_substeps))
    volts, (x, y, z), series = _simulate_group(
        np.array([prep.axis]), np.array([prep.y]), noise, cfg, store_states
    )
    bloch_final = (x[0], y[0], z[0])
    p_one = 0.5 * (bloch_final[meas_axis] + 1.0)
    y_t = int(rng.random() < p_one)
    return SimulatedShot(
        prep=prep,
        meas=Label(y=y_t, axis=meas_axis),
        record=volts[0],
        duration=duration,
        true_bloch=series[0] if store_states else None,
    )


def generate_dataset(cfg: SimConfig, shots_per_setting: int,
                     seed: int | None = None,
                     store_states: bool = False) -> Iterator[SimulatedShot]:
    """Balanced sweep over 6 preparations x 3 measurement axes x durations.

    Yields shots_per_setting * 18 * len(duration_grid) shots, each drawn
    from its own (seed, index) stream.
    """
    if shots_per_setting < 1:
        raise ConfigError("shots_per_setting must be >= 1")
    seed = cfg.seed if seed is None else seed
    total = shots_per_setting * _SETTINGS_PER_CYCLE * len(cfg.duration_grid)
    for index in range(total):
        prep, meas_axis, duration = setting_for_index(cfg, index)
        yield generate_shot(prep, meas_axis, duration, cfg,
                            shot_rng(seed, index), store_states)


def _simulate_index_range(cfg: SimConfig, seed: int, start: int, stop: int,
                          chunk: int = 4096):
    """Simulate shots [start, stop) and return compact record arrays."""
    count = stop - start
    indices = np.arange(start, stop)
    n_dur = len(cfg.duration_grid)
    combo = indices % (_SETTINGS_PER_CYCLE * n_dur)
    dur_idx = combo % n_dur
    meas_axis = ((combo // n_dur) % 3).astype(np.uint8)
    prep_idx = combo // (n_dur * 3)
    prep_axis = (prep_idx // 2).astype(np.uint8)
    y0 = (prep_idx % 2).astype(np.uint8)
    step_counts = np.array(
        [cfg.steps_for(cfg.duration_grid[i]) for i in range(n_dur)], dtype=np.uint16
    )[dur_idx]

    y_t = np.zeros(count, dtype=np.uint8)
    offsets = np.zeros(count + 1, dtype=np.int64)
    np.cumsum(step_counts, out=offsets[1:])
    flat = np.empty(int(offsets[-1]), dtype=np.float32)

    sub = cfg.integration_substeps
    for steps in np.unique(step_counts):
        (group,) = np.nonzero(step_counts == steps)
        steps = int(steps)
        for lo in range(0, len(group), chunk):
            sel = group[lo:lo + chunk]
            noise = np.empty((len(sel), steps * sub))
            finals = np.empty(len(sel))
            for row, rec in enumerate(sel):
                rng = shot_rng(seed, int(indices[rec]))
                noise[row] = rng.standard_normal(steps * sub)
                finals[row] = rng.random()
            volts, (x, y, z), _ = _simulate_group(
                prep_axis[sel], y0[sel], noise, cfg
            )
            bloch = np.stack([x, y, z], axis=1)
            p_one = 0.5 * (bloch[np.arange(len(sel)), meas_axis[sel]] + 1.0)
            y_t[sel] = (finals < p_one).astype(np.uint8)
            v32 = volts.astype(np.float32)
            for row, rec in enumerate(sel):
                flat[offsets[rec]:offsets[rec + 1]] = v32[row]
    labels = np.stack([prep_axis, y0, meas_axis, y_t], axis=1)
    return labels, step_counts, flat, offsets


def simulate_dataset(cfg: SimConfig, n_records: int, seed: int | None = None,
                     workers: int = 1) -> data.Dataset:
    """Generate a dataset of n_records shots, sweeping settings cyclically.

    Bit-identical output for any worker count: shot i depends only on
    (seed, i), and chunks are concatenated in index order.
    """
    if n_records < 1:
        raise ConfigError("n_records must be >= 1")
    seed = cfg.seed if seed is None else seed
    if workers > 1 and n_records >= 4 * workers:
        from concurrent.futures import ProcessPoolExecutor

        bounds = np.linspace(0, n_records, workers + 1).astype(int)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                _simulate_index_range,
                [cfg] * workers, [seed] * workers, bounds[:-1], bounds[1:],
            ))
        labels = np.concatenate([p[0] for p in parts])
        step_counts = np.concatenate([p[1] for p in parts])
        flat = np.concatenate([p[2] for p in parts])
        offsets = np.zeros(n_records + 1, dtype=np.int64)
        np.cumsum(step_counts, out=offsets[1:])
    else:
        labels, step_counts, flat, offsets = _simulate_index_range(
            cfg, seed, 0, n_records
        )
    manifest = data.new_manifest(config=cfg.to_dict(), seed=seed,
                                 n_records=n_records)
    return data.Dataset(manifest=manifest, labels=labels,
                        step_counts=step_counts, voltages=flat, offsets=offsets)


def sme_trajectories(prep: Label, duration: float, cfg: SimConfig,
                     n_traj: int, seed: int | None = None) -> np.ndarray:
    """Bloch series (n_traj, steps+1, 3) of independent monitored runs."""
    seed = cfg.seed if seed is None else seed
    steps = cfg.steps_for(duration)
    sub = cfg.integration_substeps
    out = np.empty((n_traj, steps + 1, 3))
    chunk = 4096
    for lo in range(0, n_traj, chunk):
        n = min(chunk, n_traj - lo)
        noise = np.empty((n, steps * sub))
        for row in range(n):
            noise[row] = shot_rng(seed, lo + row).standard_normal(steps * sub)
        _, _, series = _simulate_group(
            np.full(n, prep.axis), np.full(n, prep.y), noise, cfg,
            store_states=True,
        )
        out[lo:lo + n] = series
    return out


# ---------------------------------------------------------------------------
# Oracle filtering and retrodiction
# ---------------------------------------------------------------------------


def sme_filter(record: np.ndarray, prep: Label, cfg: SimConfig) -> PredictionSeries:
    """Exact-model filter: replay one record into Born probabilities."""
    record = np.asarray(record, dtype=float)
    x, y, z, _ = _prep_bloch_rows(np.array([prep.axis]), np.array([prep.y]))
    probs, _ = _filter_group(x, y, z, record[None, :], cfg)
    times = np.arange(len(record) + 1) * cfg.record_dt
    return PredictionSeries(times=times, probs=probs[0])


def filter_dataset(dataset: data.Dataset, cfg: SimConfig | None = None,
                   chunk: int = 4096) -> list[PredictionSeries]:
    """Filter every record of a dataset, grouped by length for speed."""
    if cfg is None:
        cfg = SimConfig.from_dict(dataset.manifest["config"])
    out: list[PredictionSeries | None] = [None] * len(dataset)
    times_cache: dict[int, np.ndarray] = {}
    for steps, group in dataset.groups_by_length():
        times = times_cache.setdefault(
            steps, np.arange(steps + 1) * cfg.record_dt
        )
        for lo in range(0, len(group), chunk):
            sel = group[lo:lo + chunk]
            volts = dataset.voltage_matrix(sel).astype(float)
            x, y, z, _ = _prep_bloch_rows(
                dataset.labels[sel, 0], dataset.labels[sel, 1]
            )
            probs, _ = _filter_group(x, y, z, volts, cfg)
            for row, rec in enumerate(sel):
                out[rec] = PredictionSeries(times=times, probs=probs[row])
    return out  # type: ignore[return-value]


def retrodict_initial_probabilities(dataset: data.Dataset,
                                    cfg: SimConfig | None = None,
                                    chunk: int = 4096) -> np.ndarray:
    """Exact Bayesian retrodiction of the preparation bit, per axis.

    For each axis the record is filtered under both cardinal initial
    states; the Gaussian innovation log-likelihoods give
    P(y0=1 | record) under a flat prior. The final projective outcome is
    deliberately ignored, mirroring estimation from the record alone.
    Returns an (n_records, 3) array.
    """
    if cfg is None:
        cfg = SimConfig.from_dict(dataset.manifest["config"])
    out = np.empty((len(dataset), 3))
    for steps, group in dataset.groups_by_length():
        for lo in range(0, len(group), chunk):
            sel = group[lo:lo + chunk]
            volts = dataset.voltage_matrix(sel).astype(float)
            n = len(sel)
            for axis in range(3):
                logratio = np.zeros(n)
                for bit, sign in ((1, 1.0), (0, -1.0)):
                    v0 = np.zeros((3, n))
                    v0[axis] = sign
                    loglik = np.zeros(n)
                    _filter_group(v0[0].copy(), v0[1].copy(), v0[2].copy(),
                                  volts, cfg, loglik=loglik)
                    logratio += loglik if bit == 1 else -loglik
                out[sel, axis] = 1.0 / (1.0 + np.exp(-logratio))
    return out
