"""Continuously monitored qubit trajectories on synthetic data.

Simulate diffusive measurement records, train recurrent networks to
predict projective outcomes from raw records, smooth forward and
backward estimates, validate calibration, extract physical parameters
and reconstruct initial states.
"""

from .core import (
    AXES,
    ALL_LABELS,
    IDENTITY,
    Label,
    MeasLabel,
    PrepLabel,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    bloch_from_rho,
    born_probability,
    cardinal_state,
    label_index,
    pauli,
    purity,
    rho_from_bloch,
)
from .errors import ConfigError, DataError, NumericError, QtrajError

__version__ = "0.1.0"
