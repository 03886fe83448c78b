"""Qubit states and Pauli algebra on the Bloch sphere.

Conventions used throughout the package:

* hbar = 1. Angular frequencies are in rad/us, decay rates in 1/us,
  times in us. A Rabi frequency quoted in MHz enters as 2*pi*f.
* Measurement/preparation axes are indexed 0 = X, 1 = Y, 2 = Z.
* An outcome bit y = 1 means the +1 eigenvalue of the measured Pauli
  operator (Bloch coordinate +1 along that axis); y = 0 means -1.

Density matrices are plain 2x2 complex128 numpy arrays, Bloch vectors
are length-3 float arrays (x, y, z). All functions here are pure and
stateless.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import NumericError

AXES = "XYZ"

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)

_PAULI = (SIGMA_X, SIGMA_Y, SIGMA_Z)

# Validation tolerances for density matrices.
HERM_TOL = 1e-12
TRACE_TOL = 1e-10
EIG_TOL = 1e-9


class Label(NamedTuple):
    """A preparation or measurement setting: outcome bit plus axis index."""

    y: int
    axis: int

    @property
    def axis_name(self) -> str:
        return AXES[self.axis]


# Preparation and measurement labels share the same structure.
PrepLabel = Label
MeasLabel = Label

#: The six cardinal settings in one-hot order (index = 2*axis + y).
ALL_LABELS = tuple(Label(y, axis) for axis in range(3) for y in range(2))


def label_index(label: Label) -> int:
    """One-hot index of a setting, 2*axis + y in [0, 6)."""
    return 2 * label.axis + label.y


def axis_index(name: str) -> int:
    """Map an axis name 'X'/'Y'/'Z' (case-insensitive) to its index."""
    try:
        return AXES.index(name.upper())
    except ValueError:
        raise ValueError(f"unknown axis {name!r}, expected one of X, Y, Z") from None


def pauli(axis: int) -> np.ndarray:
    """Return the Pauli matrix for an axis index (0=X, 1=Y, 2=Z)."""
    return _PAULI[axis]


def bloch_from_rho(rho: np.ndarray) -> np.ndarray:
    """Bloch vector (Tr[rho sigma_x], Tr[rho sigma_y], Tr[rho sigma_z]).

    For a 2x2 Hermitian matrix the traces reduce to closed forms in the
    entries, which is both faster and exactly real.
    """
    x = rho[0, 1].real + rho[1, 0].real
    y = rho[1, 0].imag - rho[0, 1].imag
    z = rho[0, 0].real - rho[1, 1].real
    return np.array([x, y, z])


def rho_from_bloch(v: np.ndarray) -> np.ndarray:
    """Density matrix (I + v . sigma) / 2 for a Bloch vector inside the ball."""
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm > 1.0 + EIG_TOL:
        raise ValueError(f"Bloch vector norm {norm} exceeds 1")
    x, y, z = v
    return 0.5 * np.array(
        [[1.0 + z, x - 1.0j * y], [x + 1.0j * y, 1.0 - z]], dtype=complex
    )


def cardinal_state(prep: Label) -> np.ndarray:
    """Pure state at a cardinal point: Bloch +1 along prep.axis if y=1, else -1."""
    v = np.zeros(3)
    v[prep.axis] = 1.0 if prep.y == 1 else -1.0
    return rho_from_bloch(v)


def born_probability(rho: np.ndarray, axis: int) -> float:
    """Probability of outcome y=1 along an axis: (Tr[rho sigma_axis] + 1) / 2."""
    return 0.5 * (bloch_from_rho(rho)[axis] + 1.0)


def purity(rho: np.ndarray) -> float:
    """Tr[rho^2], equal to (1 + |bloch|^2) / 2 for a qubit."""
    return float(np.trace(rho @ rho).real)


def validate_density_matrix(rho: np.ndarray, context: str = "") -> None:
    """Raise NumericError unless rho is Hermitian, unit-trace and positive.

    Tolerances: Hermiticity residual HERM_TOL, trace deviation TRACE_TOL,
    eigenvalues >= -EIG_TOL.
    """
    where = f" ({context})" if context else ""
    if rho.shape != (2, 2):
        raise NumericError(f"density matrix must be 2x2{where}")
    if not np.all(np.isfinite(rho.view(float))):
        raise NumericError(f"density matrix has non-finite entries{where}")
    herm = np.abs(rho - rho.conj().T).max()
    if herm > HERM_TOL:
        raise NumericError(f"Hermiticity residual {herm:.3e} > {HERM_TOL}{where}")
    tr = rho[0, 0].real + rho[1, 1].real
    if abs(tr - 1.0) > TRACE_TOL:
        raise NumericError(f"trace {tr!r} deviates from 1{where}")
    norm = float(np.linalg.norm(bloch_from_rho(rho)))
    # Eigenvalues of a unit-trace qubit state are (1 +/- |v|) / 2.
    if (1.0 - norm) / 2.0 < -EIG_TOL:
        raise NumericError(f"negative eigenvalue {(1.0 - norm) / 2.0:.3e}{where}")
