"""Entanglement and classicality diagnostics on trajectory states.

The state is a pure bipartite (motional x spin) vector, so every
entanglement quantity reduces to the spectrum of the (2J+1)-dimensional
spin marginal; the motional marginal shares that spectrum and is never
diagonalized outside of small-system self-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .classical import ClassicalRecord
from .hilbert import QuantumState

__all__ = [
    "ReducedSpinDensity",
    "ClassicalityMetrics",
    "spinor_components",
    "reduced_spin_density",
    "von_neumann_entropy",
    "normalized_max_entropy",
    "jz_histogram",
    "classicality_metrics",
]

# Marginal eigenvalues below this are truncation/rounding artifacts and
# contribute 0 to the entropy (0 ln 0 = 0).
_EIGENVALUE_FLOOR = 1e-14

_NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class ReducedSpinDensity:
    """Spin marginal of a pure state: Hermitian, unit trace, PSD."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"density matrix must be square, got {m.shape}")
        if np.abs(m - m.conj().T).max() > 1e-10:
            raise ValueError("density matrix must be Hermitian")
        tr = np.trace(m).real
        if abs(tr - 1.0) > 1e-10:
            raise ValueError(f"density matrix trace {tr!r} is not 1")
        evals = np.linalg.eigvalsh(m)
        if evals.min() < -1e-10 or evals.max() > 1.0 + 1e-10:
            raise ValueError("density matrix eigenvalues outside [0, 1]")
        object.__setattr__(self, "matrix", m)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def entropy(self) -> float:
        evals = self.eigenvalues()
        evals = evals[evals > _EIGENVALUE_FLOOR]
        return float(-np.sum(evals * np.log(evals)))


def _normalized_matrix(state: QuantumState) -> np.ndarray:
    norm_sq = state.norm_sq
    if not math.isfinite(norm_sq) or abs(norm_sq - 1.0) > _NORMALIZATION_TOL:
        raise ValueError(
            f"state must be normalized (|psi|^2 = {norm_sq!r}); call .normalized()"
        )
    return state.matrix / math.sqrt(norm_sq)


def spinor_components(state: QuantumState) -> np.ndarray:
    """Motional wave functions phi_M, one row per M (ascending -J..+J).

    The rows' squared norms sum to 1; their Gram matrix carries the full
    entanglement structure (rank 1 for product states).
    """
    return _normalized_matrix(state).T.copy()


def reduced_spin_density(state: QuantumState) -> ReducedSpinDensity:
    m = _normalized_matrix(state)
    return ReducedSpinDensity(m.T @ m.conj())


def _entropy_of_psd(matrix: np.ndarray) -> float:
    evals = np.linalg.eigvalsh(matrix)
    evals = evals[evals > _EIGENVALUE_FLOOR]
    return float(-np.sum(evals * np.log(evals)))


def von_neumann_entropy(state: QuantumState, subsystem: str = "spin") -> float:
    """Entanglement entropy -Tr(rho ln rho) of a marginal, natural log.

    ``subsystem`` picks the marginal; both give the same value for a pure
    state, but "motional" diagonalizes an (n_max+1)-dim matrix and exists
    for small-system cross-checks only.
    """
    m = _normalized_matrix(state)
    if subsystem == "spin":
        return _entropy_of_psd(m.T @ m.conj())
    if subsystem == "motional":
        return _entropy_of_psd(m @ m.conj().T)
    raise ValueError(f"subsystem must be 'spin' or 'motional', got {subsystem!r}")


def normalized_max_entropy(
    entropy_series: np.ndarray, J: float, e0: float | None = None
) -> float:
    """Peak entropy over a trajectory divided by E_0 (default ln(2J+1))."""
    series = np.asarray(entropy_series, dtype=float)
    finite = series[np.isfinite(series)]
    if finite.size == 0:
        raise ValueError("entropy series has no finite samples")
    if e0 is None:
        e0 = math.log(2.0 * J + 1.0)
    if e0 <= 0:
        raise ValueError(f"e0 must be positive, got {e0!r}")
    return float(finite.max() / e0)


def jz_histogram(state: QuantumState) -> np.ndarray:
    """Population of each |M> spin projection, ascending M; sums to 1."""
    m = _normalized_matrix(state)
    return np.einsum("ns,ns->s", m.real, m.real) + np.einsum(
        "ns,ns->s", m.imag, m.imag
    )


@dataclass(frozen=True)
class ClassicalityMetrics:
    """How classical a measured trajectory looks against its reference.

    ``rms_deviation_over_amplitude``: time-RMS of <z> - z_cl over the orbit
    amplitude.  ``max_czz_over_phasespace``: peak position variance over
    amplitude^2.  Both small together mean the record tracks Hamilton's
    equations with weak back-action.
    """

    rms_deviation_over_amplitude: float
    max_czz_over_phasespace: float


def classicality_metrics(
    quantum_record, classical_record: ClassicalRecord, amplitude: float | None = None
) -> ClassicalityMetrics:
    """Compare a quantum trajectory record to a classical one on one grid.

    Records must share their time grid.  ``amplitude`` is the orbit scale in
    the shared display unit (z_g); default is the classical trace's peak
    excursion.
    """
    tq = np.asarray(quantum_record.times, dtype=float)
    tc = np.asarray(classical_record.times, dtype=float)
    if tq.shape != tc.shape or not np.allclose(tq, tc, rtol=1e-9, atol=1e-12):
        raise ValueError("records are not on a shared time grid")
    z_q = np.asarray(quantum_record.z_mean, dtype=float)
    z_c = np.asarray(classical_record.z, dtype=float)
    if amplitude is None:
        amplitude = float(np.abs(z_c).max())
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    dev = z_q - z_c
    finite = np.isfinite(dev)
    if not finite.any():
        raise ValueError("no finite overlapping samples")
    rms = math.sqrt(float(np.mean(dev[finite] ** 2)))
    czz = np.asarray(quantum_record.czz, dtype=float)
    czz_max = float(np.nanmax(czz)) if np.isfinite(czz).any() else math.nan
    return ClassicalityMetrics(
        rms_deviation_over_amplitude=rms / amplitude,
        max_czz_over_phasespace=czz_max / amplitude**2,
    )
