"""Hilbert-space plumbing for a harmonic oscillator coupled to a spin.

The system is a particle of mass ``m`` in a harmonic well of frequency
``omega`` whose position couples linearly to the z component of a spin J:

    H = p^2 / 2m + (1/2) m omega^2 z^2 + b z Jz

The coupling tilts the well by an amount depending on the spin projection:
sector M (eigenvalue of Jz) sees a well centered at (M/J) * delta_z, where
delta_z = -b J hbar / (m omega^2).  States live on a truncated Fock ladder
tensored with the (2J+1)-dimensional spin space.

Main entry points: :class:`ModelParams`, :class:`BasisSpec`,
:func:`build_operators`, :func:`product_state`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "CutoffError",
    "ModelParams",
    "BasisSpec",
    "Operator",
    "OperatorSet",
    "QuantumState",
    "suggest_n_max",
    "oscillator_operators",
    "spin_operators",
    "build_operators",
    "coherent_state",
    "spin_coherent_state",
    "product_state",
    "expectation",
    "covariance",
    "variance",
]

# Tail weight above which a Fock truncation is considered unusable.
TAIL_TOLERANCE = 1e-8

# Hermiticity tolerance for operator construction, elementwise.
HERMITICITY_TOL = 1e-12


class CutoffError(RuntimeError):
    """Raised when the Fock-space truncation cannot hold the state."""


def _check_half_integer(value: float, name: str) -> None:
    doubled = 2.0 * value
    if doubled < 0 or abs(doubled - round(doubled)) > 1e-12:
        raise ValueError(f"{name} must be a nonnegative half-integer, got {value}")


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the monitored spin-oscillator.

    Exactly one of ``delta_z`` (well separation, the distance from the well
    center of the extremal sector M = +J to the origin) or ``b`` (the raw
    coupling in H = ... + b z Jz) should be given; the other is derived via
    b = -m omega^2 delta_z / (J hbar).  Giving both is allowed only when they
    are consistent.  ``k`` is the position-measurement strength (units
    1/(length^2 time)).

    Defaults are natural units hbar = m = omega = 1.
    """

    J: float
    k: float = 0.0
    delta_z: float | None = None
    b: float | None = None
    hbar: float = 1.0
    m: float = 1.0
    omega: float = 1.0

    def __post_init__(self) -> None:
        _check_half_integer(self.J, "J")
        if self.k < 0:
            raise ValueError(f"measurement strength k must be >= 0, got {self.k}")
        for name in ("hbar", "m", "omega"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        b, dz = self.b, self.delta_z
        if self.J == 0:
            # No spin to couple to; only the trivial values are coherent.
            if (b not in (None, 0.0)) or (dz not in (None, 0.0)):
                raise ValueError("J = 0 admits no spin coupling; leave b and delta_z unset")
            object.__setattr__(self, "b", 0.0)
            object.__setattr__(self, "delta_z", 0.0)
            return
        scale = self.m * self.omega**2 / (self.J * self.hbar)
        if b is None and dz is None:
            object.__setattr__(self, "b", 0.0)
            object.__setattr__(self, "delta_z", 0.0)
        elif b is None:
            object.__setattr__(self, "b", -scale * dz)
        elif dz is None:
            object.__setattr__(self, "delta_z", -b / scale)
        else:
            ref = max(abs(b), abs(scale * dz), scale * self.z_g)
            if abs(b + scale * dz) > 1e-9 * ref:
                raise ValueError(
                    f"inconsistent coupling: b={b} vs delta_z={dz} "
                    f"(expected b = {-scale * dz})"
                )

    @property
    def z_g(self) -> float:
        """Ground-state position width sqrt(hbar / 2 m omega)."""
        return math.sqrt(self.hbar / (2.0 * self.m * self.omega))

    @property
    def p_g(self) -> float:
        """Ground-state momentum width sqrt(hbar m omega / 2)."""
        return math.sqrt(self.hbar * self.m * self.omega / 2.0)

    @property
    def spin_dim(self) -> int:
        return int(round(2 * self.J)) + 1

    def spin_projections(self) -> np.ndarray:
        """Jz eigenvalues in units of hbar, ascending: -J, -J+1, ..., +J."""
        return -self.J + np.arange(self.spin_dim, dtype=float)

    def period(self) -> float:
        return 2.0 * math.pi / self.omega


@dataclass(frozen=True)
class BasisSpec:
    """Truncated product basis: Fock levels 0..n_max tensor spin projections.

    The composite index is Fock-major: index = n * spin_dim + s, where s
    counts spin projections ascending from M = -J (s = 0) to M = +J.
    """

    n_max: int
    J: float

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        _check_half_integer(self.J, "J")

    @property
    def n_fock(self) -> int:
        return self.n_max + 1

    @property
    def spin_dim(self) -> int:
        return int(round(2 * self.J)) + 1

    @property
    def dimension(self) -> int:
        return self.n_fock * self.spin_dim

    def index(self, n: int, s: int) -> int:
        if not (0 <= n <= self.n_max):
            raise ValueError(f"Fock level {n} outside 0..{self.n_max}")
        if not (0 <= s < self.spin_dim):
            raise ValueError(f"spin index {s} outside 0..{self.spin_dim - 1}")
        return n * self.spin_dim + s

    def unpack(self, index: int) -> tuple[int, int]:
        if not (0 <= index < self.dimension):
            raise ValueError(f"index {index} outside basis of dimension {self.dimension}")
        return divmod(index, self.spin_dim)


def suggest_n_max(action_over_hbar: float, delta_z_over_zg: float) -> int:
    """Smallest usable Fock cutoff for given initial action and well separation.

    Heuristic: the state explores n ~ I/hbar around the orbit plus the
    displaced-well offset (delta_z/z_g)^2 in quanta; four times that sum plus
    a spread margin keeps the runtime tail check comfortably satisfied.
    """
    if action_over_hbar < 0:
        raise ValueError("action must be nonnegative")
    need = 4.0 * (action_over_hbar + delta_z_over_zg**2 + 10.0 * math.sqrt(action_over_hbar))
    return max(16, math.ceil(need))


@dataclass(frozen=True)
class Operator:
    """Sparse operator on the composite basis with a hermiticity contract."""

    matrix: sp.csr_matrix
    hermitian: bool
    name: str = ""

    def __post_init__(self) -> None:
        mat = sp.csr_matrix(self.matrix)
        object.__setattr__(self, "matrix", mat)
        if self.hermitian:
            diff = (mat - mat.getH()).tocoo()
            if diff.nnz:
                err = np.abs(diff.data).max()
                scale = max(1.0, np.abs(mat.data).max() if mat.nnz else 0.0)
                if err > HERMITICITY_TOL * scale:
                    raise ValueError(
                        f"operator {self.name or '<unnamed>'} fails hermiticity: "
                        f"max |A - A^H| = {err:.3e}"
                    )

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ vec

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True)
class OperatorSet:
    """The standard observables: z, p, Jx, Jy, Jz and the Hamiltonian."""

    z: Operator
    p: Operator
    jx: Operator
    jy: Operator
    jz: Operator
    h: Operator


@dataclass
class QuantumState:
    """State vector on a :class:`BasisSpec`, possibly unnormalized.

    ``amplitudes`` is the flat composite-index vector; :attr:`matrix` views it
    as (n_fock, spin_dim) without copying.
    """

    amplitudes: np.ndarray
    basis: BasisSpec
    _norm_sq: float | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        amp = np.ascontiguousarray(self.amplitudes, dtype=np.complex128)
        if amp.shape != (self.basis.dimension,):
            raise ValueError(
                f"amplitude shape {amp.shape} does not match basis dimension "
                f"{self.basis.dimension}"
            )
        self.amplitudes = amp

    @property
    def matrix(self) -> np.ndarray:
        return self.amplitudes.reshape(self.basis.n_fock, self.basis.spin_dim)

    @property
    def norm_sq(self) -> float:
        if self._norm_sq is None:
            a = self.amplitudes
            self._norm_sq = float(np.real(np.vdot(a, a)))
        return self._norm_sq

    @property
    def norm(self) -> float:
        return math.sqrt(self.norm_sq)

    def normalized(self) -> "QuantumState":
        n = self.norm
        if n == 0.0 or not math.isfinite(n):
            raise ValueError(f"cannot normalize state with norm {n}")
        return QuantumState(self.amplitudes / n, self.basis, _norm_sq=1.0)

    def fock_populations(self) -> np.ndarray:
        """Population per Fock level, summed over spin (normalized)."""
        m = self.matrix
        pops = np.sum(np.abs(m) ** 2, axis=1)
        return pops / self.norm_sq

    def tail_population(self, fraction: float = 0.05) -> float:
        """Weight in the top ``fraction`` of Fock levels."""
        pops = self.fock_populations()
        n_tail = max(1, int(math.ceil(fraction * len(pops))))
        return float(np.sum(pops[-n_tail:]))


def oscillator_operators(n_max: int, params: ModelParams) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Position and momentum on the truncated Fock ladder (physical units)."""
    root = np.sqrt(np.arange(1, n_max + 1, dtype=float))
    a = sp.diags(root, offsets=1, format="csr")
    adag = a.getH().tocsr()
    z = params.z_g * (a + adag)
    p = 1j * params.p_g * (adag - a)
    return z.tocsr(), p.tocsr()


def spin_operators(J: float, hbar: float = 1.0) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
    """Jx, Jy, Jz on the 2J+1 projections, M ascending, in physical units."""
    _check_half_integer(J, "J")
    m = -J + np.arange(int(round(2 * J)) + 1, dtype=float)
    jz = sp.diags(hbar * m, format="csr")
    # raising: <M+1| J+ |M> = hbar sqrt(J(J+1) - M(M+1)); with M ascending in
    # the index, that element sits on the subdiagonal (row M+1, column M).
    raise_elems = hbar * np.sqrt(J * (J + 1) - m[:-1] * (m[:-1] + 1))
    jplus = sp.diags(raise_elems, offsets=-1, format="csr")
    jminus = jplus.getH().tocsr()
    jx = ((jplus + jminus) / 2).tocsr()
    jy = ((jplus - jminus) / 2j).tocsr()
    return jx, jy, jz.tocsr()


def build_operators(params: ModelParams, basis: BasisSpec) -> OperatorSet:
    """Assemble the composite-space observables and Hamiltonian.

    Returns sparse operators on the Fock-major composite index.  The
    Hamiltonian is H = p^2/2m + (1/2) m omega^2 z^2 + b (z tensor Jz).
    """
    if abs(basis.J - params.J) > 1e-12:
        raise ValueError(f"basis J={basis.J} does not match params J={params.J}")
    z1, p1 = oscillator_operators(basis.n_max, params)
    jx1, jy1, jz1 = spin_operators(params.J, params.hbar)
    eye_f = sp.identity(basis.n_fock, format="csr")
    eye_s = sp.identity(basis.spin_dim, format="csr")

    z = sp.kron(z1, eye_s, format="csr")
    p = sp.kron(p1, eye_s, format="csr")
    jx = sp.kron(eye_f, jx1, format="csr")
    jy = sp.kron(eye_f, jy1, format="csr")
    jz = sp.kron(eye_f, jz1, format="csr")

    h_osc = (p1 @ p1) / (2 * params.m) + 0.5 * params.m * params.omega**2 * (z1 @ z1)
    # The a^2/adag^2 pieces cancel between kinetic and potential terms, but the
    # truncated corner element survives; build from the full products anyway so
    # the operator is exactly what the truncated z and p generate.
    h = sp.kron(h_osc, eye_s, format="csr") + params.b * sp.kron(z1, jz1, format="csr")
    h = h.tocsr()
    h.eliminate_zeros()

    return OperatorSet(
        z=Operator(z, hermitian=True, name="z"),
        p=Operator(p, hermitian=True, name="p"),
        jx=Operator(jx, hermitian=True, name="Jx"),
        jy=Operator(jy, hermitian=True, name="Jy"),
        jz=Operator(jz, hermitian=True, name="Jz"),
        h=Operator(h, hermitian=True, name="H"),
    )


def coherent_state(n_max: int, params: ModelParams, z0: float, p0: float) -> np.ndarray:
    """Fock amplitudes of the oscillator coherent state centered at (z0, p0).

    alpha = z0/(2 z_g) + i p0/(2 p_g); amplitudes follow the stable recurrence
    c_{n+1} = c_n alpha / sqrt(n+1) from c_0 = exp(-|alpha|^2 / 2).  Raises
    :class:`CutoffError` if the truncated tail exceeds the tail tolerance.
    """
    alpha = z0 / (2 * params.z_g) + 1j * p0 / (2 * params.p_g)
    c = np.empty(n_max + 1, dtype=np.complex128)
    c[0] = math.exp(-0.5 * abs(alpha) ** 2)
    for n in range(n_max):
        c[n + 1] = c[n] * alpha / math.sqrt(n + 1)
    captured = float(np.sum(np.abs(c) ** 2))
    tail = max(0.0, 1.0 - captured)
    if tail > TAIL_TOLERANCE:
        needed = suggest_n_max(abs(alpha) ** 2, 0.0)
        raise CutoffError(
            f"coherent state |alpha|^2 = {abs(alpha)**2:.3g} loses {tail:.2e} "
            f"beyond n_max = {n_max}; need n_max >= {needed}"
        )
    return c / math.sqrt(captured)


def spin_coherent_state(J: float, theta: float, phi: float, hbar: float = 1.0) -> np.ndarray:
    """Amplitudes of the spin coherent state along (theta, phi), M ascending.

    c_M = sqrt(C(2J, J+M)) cos(theta/2)^{J+M} sin(theta/2)^{J-M} e^{-i M phi},
    the rotation of the maximal state |M=+J> to polar angle theta, azimuth phi.
    """
    _check_half_integer(J, "J")
    dim = int(round(2 * J)) + 1
    two_j = int(round(2 * J))
    m = -J + np.arange(dim, dtype=float)
    ct, st = math.cos(theta / 2.0), math.sin(theta / 2.0)
    # log-binomial for stability at large J
    log_binom = (
        math.lgamma(two_j + 1)
        - np.array([math.lgamma(k + 1) + math.lgamma(two_j - k + 1) for k in range(dim)])
    )
    with np.errstate(divide="ignore"):
        log_ct = np.log(ct) if ct > 0 else -np.inf
        log_st = np.log(st) if st > 0 else -np.inf
    log_mag = 0.5 * log_binom + (J + m) * log_ct + (J - m) * log_st
    mag = np.exp(log_mag)
    mag[np.isnan(mag)] = 0.0
    amps = mag * np.exp(-1j * m * phi)
    return amps / np.linalg.norm(amps)


def product_state(
    basis: BasisSpec,
    params: ModelParams,
    z0: float = 0.0,
    p0: float = 0.0,
    theta: float = math.pi / 2,
    phi: float = 0.0,
) -> QuantumState:
    """Oscillator coherent state tensor spin coherent state.

    Defaults put the spin along +x (theta = pi/2, phi = 0), the symmetric
    superposition of wells.
    """
    fock = coherent_state(basis.n_max, params, z0, p0)
    spin = spin_coherent_state(params.J, theta, phi, params.hbar)
    amps = np.outer(fock, spin).reshape(-1)
    return QuantumState(amps, basis)


def expectation(state: QuantumState, op: Operator) -> float | complex:
    """<psi|A|psi> / <psi|psi>.  Hermitian operators return a float.

    For hermitian operators the imaginary residual must be numerical noise
    (relative 1e-10); a larger residual indicates a corrupted state or
    operator and raises.
    """
    x = state.amplitudes
    val = np.vdot(x, op.matrix @ x) / state.norm_sq
    if not op.hermitian:
        return complex(val)
    scale = max(1.0, abs(val))
    if abs(val.imag) > 1e-10 * scale:
        raise ValueError(
            f"expectation of hermitian {op.name or '<op>'} has imaginary part "
            f"{val.imag:.3e}"
        )
    return float(val.real)


def covariance(state: QuantumState, op_a: Operator, op_b: Operator) -> float:
    """Symmetrized covariance (1/2)<ab + ba> - <a><b> for hermitian a, b."""
    if not (op_a.hermitian and op_b.hermitian):
        raise ValueError("covariance is defined here for hermitian operators")
    x = state.amplitudes
    ax = op_a.matrix @ x
    bx = op_b.matrix @ x
    sym = float(np.real(np.vdot(ax, bx))) / state.norm_sq
    return sym - expectation(state, op_a) * expectation(state, op_b)


def variance(state: QuantumState, op: Operator) -> float:
    return covariance(state, op, op)
