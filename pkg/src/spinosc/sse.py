"""Quantum trajectories of the spin-oscillator under continuous position readout.

The conditional state obeys the (unnormalized, perfect-efficiency) stochastic
Schrodinger equation

    d|psi> = { (H / i hbar - k z^2) dt + (4 k <z> dt + sqrt(2k) dW) z } |psi>

with measurement record increment dy = <z> dt + dW / sqrt(8k).  Two
integration schemes are provided:

``kraus``
    Split-step with an exact spectral propagator and a Gaussian measurement
    operator.  [H, Jz] = 0 makes the Hamiltonian block-diagonal over spin
    projections with real symmetric *tridiagonal* sector blocks, so the
    unitary is exact per sector (eigh_tridiagonal) and the measurement
    operator exp(-2 k dt (z - alpha)^2), alpha = <z> + dW/(sqrt(8k) dt), is
    diagonal in the z eigenbasis.  Measurements sit at half-step times
    (Strang: U_half [M U]^{n-1} M U_half), so interior unitaries merge and
    the state is in the z eigenbasis exactly when <z> is needed.  Agrees
    with ``milstein`` per step to O(dt^{3/2}).

``milstein``
    Explicit order-1.0 strong scheme applied directly to the linear equation
    above, with <z> evaluated at step entry:
    psi' = psi + (H/i hbar) psi dt + k z^2 psi (dW^2 - 2 dt)
           + (4 k <z> dt + sqrt(2k) dW) z psi.

Samples are recorded at the measurement events for ``kraus`` (times
(j*stride - 1/2)*dt plus a row at t = 0) and at step boundaries for
``milstein``.  All recorded series are in display units: z in z_g, p in p_g,
angular momenta in hbar, covariances in the matching products.  Times stay
in simulation units (the CSV layer rescales them to 1/omega; they coincide
for the natural-unit default omega = 1).  Detection efficiency is fixed
at 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from .hilbert import (
    TAIL_TOLERANCE,
    BasisSpec,
    CutoffError,
    ModelParams,
    QuantumState,
    build_operators,
    oscillator_operators,
    suggest_n_max,
)

__all__ = [
    "SseConfig",
    "NoiseStream",
    "TrajectoryRecord",
    "TrajectoryFailure",
    "KrausPropagator",
    "sse_step",
    "run_trajectory",
    "run_batch",
]

SCHEMES = ("kraus", "milstein")

# Squared-norm bounds beyond which a trajectory is declared numerically dead.
_NORM_SQ_FLOOR = 1e-300
_NORM_SQ_CEIL = 1e300

# Bytes of dense sector propagators we are willing to hold.
_PROPAGATOR_BYTE_LIMIT = 3.2e9


@dataclass(frozen=True)
class SseConfig:
    """Integration policy: scheme, step size, renormalization and guards.

    ``renormalize_every``: steps between explicit renormalizations.  Both
    schemes drift away from unit norm by construction (the Kraus measurement
    carries the record's probability weight; the linear scheme's norm is a
    likelihood martingale), so the default is every step.  ``tail_check_every``:
    steps between Fock-tail occupation checks (population of the top 5% of
    levels must stay below the tail tolerance).
    """

    dt: float
    scheme: str = "kraus"
    renormalize_every: int = 1
    tail_check_every: int = 100

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        if self.renormalize_every < 1:
            raise ValueError("renormalize_every must be >= 1")
        if self.tail_check_every < 1:
            raise ValueError("tail_check_every must be >= 1")


@dataclass
class NoiseStream:
    """Counter-based Gaussian noise source, one standard normal per step.

    Streams are keyed by (seed, trajectory_id) on a Philox counter generator,
    so trajectory i's noise is identical no matter how trajectories are
    batched or distributed.  ``counter`` records how many normals have been
    consumed; a reconstructed stream with the same counter resumes the same
    sequence.  Increments are dW = xi * sqrt(dt).
    """

    seed: int
    trajectory_id: int = 0
    counter: int = 0
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        for name in ("seed", "trajectory_id", "counter"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")

    def _generator(self) -> np.random.Generator:
        if self._gen is None:
            key = np.array([self.seed, self.trajectory_id], dtype=np.uint64)
            gen = np.random.Generator(np.random.Philox(key=key))
            if self.counter:
                gen.standard_normal(self.counter)
            self._gen = gen
        return self._gen

    def normals(self, n: int) -> np.ndarray:
        out = self._generator().standard_normal(int(n))
        self.counter += int(n)
        return out


class TrajectoryFailure(RuntimeError):
    """A trajectory went numerically bad; carries step provenance."""

    def __init__(
        self,
        reason: str,
        step: int,
        trajectory_id: int = 0,
        partial_record: "TrajectoryRecord | None" = None,
    ):
        super().__init__(f"trajectory {trajectory_id} failed at step {step}: {reason}")
        self.reason = reason
        self.step = step
        self.trajectory_id = trajectory_id
        self.partial_record = partial_record


_SERIES_FIELDS = (
    "dy_rate",
    "z_mean",
    "p_mean",
    "jx_mean",
    "jy_mean",
    "jz_mean",
    "czz",
    "czp",
    "cpp",
    "czjz",
    "cpjz",
    "cjzjz",
    "entropy",
    "norm_residual",
    "m3_z",
    "m3_jz",
)


@dataclass
class TrajectoryRecord:
    """Sampled trajectory in display units (z_g, p_g, hbar); times in simulation units.

    ``dy_rate`` is the measurement record increment per unit time averaged
    over the window ending at each row: dy_rate[j] * (t[j] - t[j-1]) is the
    accumulated dy over that window (row 0 is 0, or NaN when k = 0).  At
    sample_stride = 1 the kraus convention gives
    dy[j] = z_mean[j] * dt + dW_j / sqrt(8k) (same-row z_mean, in physical
    units); the milstein convention pairs dy[j] with z_mean[j-1] (step
    entry).  ``norm_residual`` is the per-window max of |norm - 1| before
    renormalization; for the kraus scheme the norm deviates at O(sqrt(k dt))
    by construction (POVM weight), so the column is scheme-relative.
    ``m3_z`` / ``m3_jz`` are third central moments (display units), kept in
    memory only (not part of the CSV schema).  ``error`` is set when the
    trajectory failed; rows past the failure are NaN.
    """

    times: np.ndarray
    dy_rate: np.ndarray
    z_mean: np.ndarray
    p_mean: np.ndarray
    jx_mean: np.ndarray
    jy_mean: np.ndarray
    jz_mean: np.ndarray
    czz: np.ndarray
    czp: np.ndarray
    cpp: np.ndarray
    czjz: np.ndarray
    cpjz: np.ndarray
    cjzjz: np.ndarray
    entropy: np.ndarray
    norm_residual: np.ndarray
    m3_z: np.ndarray
    m3_jz: np.ndarray
    scheme: str = "kraus"
    dt: float = 0.0
    sample_stride: int = 1
    n_steps: int = 0
    seed: int | None = None
    trajectory_id: int = 0
    params: ModelParams | None = None
    final_state: QuantumState | None = None
    error: str | None = None
    error_step: int | None = None
    steps_completed: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.times)

    def dy(self) -> np.ndarray:
        """Accumulated record increment per window (physical length x time)."""
        widths = np.diff(self.times, prepend=self.times[0])
        return self.dy_rate * widths

    def ok(self) -> bool:
        return self.error is None


class KrausPropagator:
    """Precomputed spectral workspace for the split-step scheme.

    Holds the z eigenbasis (x, W) of the truncated position operator and,
    per spin sector M, the map T = V^T W from the z eigenbasis to the sector
    Hamiltonian eigenbasis together with the half/full-step phases.  All
    transform matrices are real orthogonal, so complex states are transformed
    by viewing them as real arrays of doubled width.
    """

    def __init__(self, params: ModelParams, basis: BasisSpec, dt: float):
        if abs(basis.J - params.J) > 1e-12:
            raise ValueError("basis and params disagree on J")
        n = basis.n_fock
        s_dim = basis.spin_dim
        need = (s_dim + 1) * n * n * 8
        if need > _PROPAGATOR_BYTE_LIMIT:
            raise CutoffError(
                f"dense sector propagators would need {need / 1e9:.1f} GB "
                f"(n_fock = {n}, {s_dim} sectors); use scheme='milstein' at this scale"
            )
        self.params = params
        self.basis = basis
        self.dt = float(dt)

        z_off = params.z_g * np.sqrt(np.arange(1, n, dtype=float))
        x, w = eigh_tridiagonal(np.zeros(n), z_off)
        self.x = np.ascontiguousarray(x)
        self.w = np.ascontiguousarray(w)

        # Oscillator diagonal of the truncated H: hbar w (n + 1/2) with the
        # corner element reduced by hbar w / 2, which is what the truncated
        # p^2/2m + m w^2 z^2 / 2 actually produces (the a a^dagger diagonal
        # loses its last entry).  Keeps this propagator exactly consistent
        # with the sparse Hamiltonian assembled from truncated z and p.
        hw = params.hbar * params.omega
        osc_diag = hw * (np.arange(n, dtype=float) + 0.5)
        osc_diag[-1] -= hw / 2.0

        self.sector_t: list[np.ndarray] = []
        self.phases_full: list[np.ndarray] = []
        self.phases_half: list[np.ndarray] = []
        for m_val in params.spin_projections():
            # sector Hamiltonian H_M = H_osc + b hbar M z, both tridiagonal
            coupling = params.b * params.hbar * m_val
            energies, vecs = eigh_tridiagonal(osc_diag, coupling * z_off)
            self.sector_t.append(np.ascontiguousarray(vecs.T @ self.w))
            theta = energies * (self.dt / params.hbar)
            self.phases_full.append(np.exp(-1j * theta))
            self.phases_half.append(np.exp(-0.5j * theta))

    def to_z_rep(self, psi: np.ndarray) -> list[np.ndarray]:
        """(n_fock, spin_dim, B) Fock-basis stack -> per-sector z-basis blocks."""
        return [np.ascontiguousarray(self.w.T @ psi[:, s, :]) for s in range(self.basis.spin_dim)]

    def to_fock(self, g: list[np.ndarray]) -> np.ndarray:
        """Per-sector z-basis blocks -> (spin_dim, n_fock, B) Fock-basis stack.

        Sector-major layout keeps each sector block contiguous so the real
        orthogonal transform runs as a float64 matmul with no copies; view
        the result with ``.transpose(1, 0, 2)`` for Fock-major consumers.
        """
        n, s_dim = self.basis.n_fock, self.basis.spin_dim
        b = g[0].shape[1]
        psi = np.empty((s_dim, n, b), dtype=np.complex128)
        for s in range(s_dim):
            np.matmul(self.w, g[s].view(np.float64), out=psi[s].view(np.float64))
        return psi

    def apply_unitary(self, g: list[np.ndarray], half: bool, scratch: np.ndarray) -> None:
        """In-place U (or U_half) on per-sector z-basis blocks."""
        phases = self.phases_half if half else self.phases_full
        for s, gs in enumerate(g):
            view = gs.view(np.float64)
            np.matmul(self.sector_t[s], view, out=scratch)
            c = scratch.view(np.complex128)
            c *= phases[s][:, None]
            np.matmul(self.sector_t[s].T, scratch, out=view)


@lru_cache(maxsize=2)
def _cached_propagator(params: ModelParams, basis: BasisSpec, dt: float) -> KrausPropagator:
    return KrausPropagator(params, basis, dt)


@lru_cache(maxsize=2)
def _cached_milstein_ops(params: ModelParams, basis: BasisSpec):
    ops = build_operators(params, basis)
    h = ops.h.matrix
    z = ops.z.matrix
    return h, z, (z @ z).tocsr()


@lru_cache(maxsize=2)
def _cached_fock_ops(params: ModelParams, n_max: int):
    return oscillator_operators(n_max, params)


def _measure_stack(psi: np.ndarray, params: ModelParams) -> dict[str, np.ndarray]:
    """Normalized expectations per batch column from a (n_fock, S, B) stack.

    Returns physical-unit first/second/third moments of z, p, Jz, the
    transverse spin means, symmetrized covariances, and the spin-marginal
    entropy.  Columns with zero norm produce NaN.
    """
    n, s_dim, b = psi.shape
    zf, pf = _cached_fock_ops(params, n - 1)
    flat = psi.reshape(n, s_dim * b)
    zpsi = (zf @ flat).reshape(n, s_dim, b)
    z2psi = (zf @ zpsi.reshape(n, s_dim * b)).reshape(n, s_dim, b)
    ppsi = (pf @ flat).reshape(n, s_dim, b)

    # dead (zeroed) columns divide 0/NaN by design; they are masked downstream
    with np.errstate(invalid="ignore", divide="ignore"):
        return _moments(psi, zpsi, z2psi, ppsi, params, n, s_dim, b)


def _moments(psi, zpsi, z2psi, ppsi, params, n, s_dim, b) -> dict[str, np.ndarray]:
    conj = np.conj(psi)
    norm2 = np.einsum("nsb,nsb->b", conj, psi).real
    ok = np.isfinite(norm2) & (norm2 > 0)
    safe = np.where(ok, norm2, np.nan)

    m_z = np.einsum("nsb,nsb->b", conj, zpsi).real / safe
    m_zz = np.einsum("nsb,nsb->b", np.conj(zpsi), zpsi).real / safe
    m_z3 = np.einsum("nsb,nsb->b", np.conj(zpsi), z2psi).real / safe
    m_p = np.einsum("nsb,nsb->b", conj, ppsi).real / safe
    m_pp = np.einsum("nsb,nsb->b", np.conj(ppsi), ppsi).real / safe
    m_zp = np.einsum("nsb,nsb->b", np.conj(zpsi), ppsi).real / safe

    m_vals = params.hbar * params.spin_projections()
    w_spin = np.einsum("nsb,nsb->sb", conj, psi).real
    m_jz = np.einsum("s,sb->b", m_vals, w_spin) / safe
    m_jz2 = np.einsum("s,sb->b", m_vals**2, w_spin) / safe
    m_jz3 = np.einsum("s,sb->b", m_vals**3, w_spin) / safe

    zw = np.einsum("nsb,nsb->sb", conj, zpsi).real
    pw = np.einsum("nsb,nsb->sb", conj, ppsi).real
    m_zjz = np.einsum("s,sb->b", m_vals, zw) / safe
    m_pjz = np.einsum("s,sb->b", m_vals, pw) / safe

    if s_dim > 1:
        j = params.J
        m_lower = params.spin_projections()[:-1]
        lam = params.hbar * np.sqrt(j * (j + 1) - m_lower * (m_lower + 1))
        cross = np.einsum("nsb,nsb->sb", np.conj(psi[:, 1:, :]), psi[:, :-1, :])
        jplus = np.einsum("s,sb->b", lam, cross) / safe
        m_jx = jplus.real
        m_jy = jplus.imag
    else:
        m_jx = np.zeros(b)
        m_jy = np.zeros(b)

    rho = np.einsum("nsb,ntb->bst", conj, psi) / safe[:, None, None]
    # dead or non-finite columns would poison the batched eigensolver
    rho[~ok] = np.eye(s_dim) / s_dim
    bad_rho = ~np.isfinite(rho).all(axis=(1, 2))
    rho[bad_rho] = np.eye(s_dim) / s_dim
    evals = np.linalg.eigvalsh(rho)
    evals = np.where(evals < 1e-14, 0.0, evals)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(evals > 0, np.log(evals), 0.0)
    entropy = -np.einsum("bs,bs->b", evals, logs)
    entropy[~ok] = np.nan

    return {
        "norm2": norm2,
        "z": m_z,
        "p": m_p,
        "jx": m_jx,
        "jy": m_jy,
        "jz": m_jz,
        "czz": m_zz - m_z**2,
        "czp": m_zp - m_z * m_p,
        "cpp": m_pp - m_p**2,
        "czjz": m_zjz - m_z * m_jz,
        "cpjz": m_pjz - m_p * m_jz,
        "cjzjz": m_jz2 - m_jz**2,
        "entropy": entropy,
        "m3_z": m_z3 - 3.0 * m_zz * m_z + 2.0 * m_z**3,
        "m3_jz": m_jz3 - 3.0 * m_jz2 * m_jz + 2.0 * m_jz**3,
    }


class _SampleSink:
    """Accumulates sampled rows (display units) for a batch of trajectories."""

    def __init__(self, n_rows: int, batch: int, params: ModelParams):
        self.params = params
        self.arrays = {name: np.full((n_rows, batch), np.nan) for name in _SERIES_FIELDS}
        self.row = 0

    def write(
        self,
        stats: dict[str, np.ndarray],
        dy_rate: np.ndarray,
        norm_residual: np.ndarray,
        active: np.ndarray,
    ) -> None:
        p = self.params
        units = {
            "z_mean": ("z", p.z_g),
            "p_mean": ("p", p.p_g),
            "jx_mean": ("jx", p.hbar),
            "jy_mean": ("jy", p.hbar),
            "jz_mean": ("jz", p.hbar),
            "czz": ("czz", p.z_g**2),
            "czp": ("czp", p.z_g * p.p_g),
            "cpp": ("cpp", p.p_g**2),
            "czjz": ("czjz", p.z_g * p.hbar),
            "cpjz": ("cpjz", p.p_g * p.hbar),
            "cjzjz": ("cjzjz", p.hbar**2),
            "entropy": ("entropy", 1.0),
            "m3_z": ("m3_z", p.z_g**3),
            "m3_jz": ("m3_jz", p.hbar**3),
        }
        r = self.row
        for out_name, (key, unit) in units.items():
            arr = self.arrays[out_name]
            arr[r, active] = stats[key][active] / unit
        self.arrays["dy_rate"][r, active] = dy_rate[active] / p.z_g
        self.arrays["norm_residual"][r, active] = norm_residual[active]
        self.row += 1


def _collect_records(
    sink: _SampleSink,
    times: np.ndarray,
    params: ModelParams,
    cfg: SseConfig,
    sample_stride: int,
    n_steps: int,
    trajectory_ids: list[int],
    seeds: list[int | None],
    finals: list[QuantumState | None],
    errors: list[tuple[str, int] | None],
) -> list[TrajectoryRecord]:
    records = []
    for b, tid in enumerate(trajectory_ids):
        err = errors[b]
        kwargs = {name: sink.arrays[name][:, b].copy() for name in _SERIES_FIELDS}
        records.append(
            TrajectoryRecord(
                times=times.copy(),
                scheme=cfg.scheme,
                dt=cfg.dt,
                sample_stride=sample_stride,
                n_steps=n_steps,
                seed=seeds[b],
                trajectory_id=tid,
                params=params,
                final_state=finals[b],
                error=None if err is None else err[0],
                error_step=None if err is None else err[1],
                steps_completed=n_steps if err is None else max(0, err[1] - 1),
                **kwargs,
            )
        )
    return records


def _prepare_noise(
    noises: "list[NoiseStream | np.ndarray]", n_steps: int
) -> tuple[np.ndarray, list[int | None]]:
    cols = []
    seeds: list[int | None] = []
    for noise in noises:
        if isinstance(noise, NoiseStream):
            cols.append(noise.normals(n_steps))
            seeds.append(noise.seed)
        else:
            arr = np.asarray(noise, dtype=float)
            if arr.ndim != 1 or len(arr) < n_steps:
                raise ValueError(
                    f"injected noise needs at least {n_steps} standard normals, got shape {arr.shape}"
                )
            cols.append(arr[:n_steps].copy())
            seeds.append(None)
    return np.column_stack(cols), seeds


def _stack_initials(initials: list[QuantumState], basis: BasisSpec) -> np.ndarray:
    n, s_dim = basis.n_fock, basis.spin_dim
    psi = np.empty((n, s_dim, len(initials)), dtype=np.complex128)
    for b, state in enumerate(initials):
        if state.basis != basis:
            raise ValueError("all initial states must share one basis")
        psi[:, :, b] = state.matrix
    return psi


def _tail_guard(
    psi: np.ndarray,
    params: ModelParams,
    active: np.ndarray,
    step: int,
    errors: list,
) -> np.ndarray:
    """Mark columns whose Fock tail occupation breaches the tolerance.

    ``psi`` is Fock-major (n_fock, spin_dim, B), any normalization (the
    fractions are computed against the column's own norm).  Returns the
    indices of newly failed columns so the caller can zero its own state.
    """
    n = psi.shape[0]
    n_tail = max(1, int(math.ceil(0.05 * n)))
    pops = np.einsum("nsb,nsb->nb", np.conj(psi), psi).real
    norm2 = pops.sum(axis=0)
    safe = np.where(norm2 > 0, norm2, 1.0)
    tail = pops[-n_tail:, :].sum(axis=0) / safe
    bad = active & (tail > TAIL_TOLERANCE)
    if not np.any(bad):
        return np.empty(0, dtype=int)
    mean_n = np.arange(n) @ pops[:, bad] / safe[bad]
    worst = float(np.max(mean_n))
    needed = suggest_n_max(worst, abs(params.delta_z) / params.z_g)
    for b in np.nonzero(bad)[0]:
        errors[b] = (
            f"Fock tail occupation {tail[b]:.2e} exceeds {TAIL_TOLERANCE:.0e} "
            f"(cutoff too small; need n_max >= {max(needed, int(1.5 * (n - 1)))})",
            step,
        )
    active[bad] = False
    return np.nonzero(bad)[0]


def run_batch(
    initials: "QuantumState | list[QuantumState]",
    params: ModelParams,
    cfg: SseConfig,
    noises: "list[NoiseStream | np.ndarray]",
    t_final: float,
    sample_stride: int = 1,
    trajectory_ids: list[int] | None = None,
    propagator: KrausPropagator | None = None,
) -> list[TrajectoryRecord]:
    """Propagate a block of trajectories in lockstep and record samples.

    The block advances through shared propagators so each step is a
    matrix-matrix product over trajectory columns.  Per-column results are
    independent of the other columns' contents; block *width* is fixed by the
    caller, which is what makes ensemble output independent of scheduling.
    Failed columns (norm blowup, NaN, Fock-tail breach) are zeroed and
    reported on their records without disturbing the rest of the block.
    """
    if isinstance(initials, QuantumState):
        initials = [initials] * len(noises)
    if len(initials) != len(noises):
        raise ValueError("need one noise source per initial state")
    if not initials:
        return []
    if sample_stride < 1:
        raise ValueError("sample_stride must be >= 1")
    basis = initials[0].basis
    n_steps = max(1, int(round(t_final / cfg.dt)))
    batch = len(initials)
    if trajectory_ids is None:
        trajectory_ids = list(range(batch))

    xi, seeds = _prepare_noise(noises, n_steps)
    psi0 = _stack_initials(initials, basis)

    if cfg.scheme == "kraus":
        return _run_batch_kraus(
            psi0, params, basis, cfg, xi, seeds, n_steps, sample_stride, trajectory_ids, propagator
        )
    return _run_batch_milstein(
        psi0, params, basis, cfg, xi, seeds, n_steps, sample_stride, trajectory_ids
    )


def _norm_guard(norm2, active, errors, step, blocks_zero) -> None:
    bad = active & (~np.isfinite(norm2) | (norm2 < _NORM_SQ_FLOOR) | (norm2 > _NORM_SQ_CEIL))
    if np.any(bad):
        for b in np.nonzero(bad)[0]:
            errors[b] = (f"state norm^2 = {norm2[b]:.3e} out of range (NaN/underflow/overflow)", step)
        active[bad] = False
        blocks_zero(np.nonzero(bad)[0])


def _run_batch_kraus(
    psi0, params, basis, cfg, xi, seeds, n_steps, sample_stride, trajectory_ids, propagator
):
    n, s_dim, batch = psi0.shape
    prop = propagator or _cached_propagator(params, basis, cfg.dt)
    if prop.basis != basis or abs(prop.dt - cfg.dt) > 1e-15 * cfg.dt or prop.params != params:
        raise ValueError("propagator was built for different params/basis/dt")

    dt = cfg.dt
    k = params.k
    sqrt_dt = math.sqrt(dt)
    sqrt8k = math.sqrt(8.0 * k) if k > 0 else 0.0
    x = prop.x

    n_rows = 1 + n_steps // sample_stride
    times = np.empty(n_rows)
    times[0] = 0.0
    times[1:] = (sample_stride * np.arange(1, n_rows) - 0.5) * dt
    sink = _SampleSink(n_rows, batch, params)

    active = np.ones(batch, dtype=bool)
    errors: list[tuple[str, int] | None] = [None] * batch

    # row 0: the initial state itself
    stats0 = _measure_stack(psi0, params)
    _norm_guard(stats0["norm2"], active, errors, 0, lambda idx: None)
    dy0 = np.zeros(batch) if k > 0 else np.full(batch, np.nan)
    sink.write(stats0, dy0, np.abs(np.sqrt(stats0["norm2"]) - 1.0), active)

    g = prop.to_z_rep(psi0)

    def zero_cols(idx):
        for gs in g:
            gs[:, idx] = 0.0

    scratch = np.empty((n, 2 * batch), dtype=np.float64)
    prop.apply_unitary(g, half=True, scratch=scratch)

    window_dy = np.zeros(batch)
    window_resid = np.zeros(batch)
    abs2 = np.empty((n, batch))

    for i in range(1, n_steps + 1):
        # state sits at measurement event time (i - 1/2) dt, z eigenbasis
        abs2.fill(0.0)
        for gs in g:
            view = gs.view(np.float64)
            re = view[:, 0::2]
            im = view[:, 1::2]
            abs2 += re * re
            abs2 += im * im
        norm2 = abs2.sum(axis=0)
        _norm_guard(norm2, active, errors, i, zero_cols)
        safe = np.where(norm2 > 0, norm2, 1.0)
        z_mean = (x @ abs2) / safe

        if k > 0:
            dw = xi[i - 1] * sqrt_dt
            dy = z_mean * dt + dw / sqrt8k
            window_dy += np.where(active, dy, 0.0)

        tail_due = i % cfg.tail_check_every == 0
        sample_due = i % sample_stride == 0
        if tail_due or sample_due:
            psi = prop.to_fock(g).transpose(1, 0, 2)
            if tail_due:
                failed = _tail_guard(psi, params, active, i, errors)
                if len(failed):
                    zero_cols(failed)
            if sample_due:
                stats = _measure_stack(psi, params)
                width = times[sink.row] - times[sink.row - 1]
                rate = (window_dy / width) if k > 0 else np.full(batch, np.nan)
                sink.write(stats, rate, window_resid, active)
                window_dy.fill(0.0)
                window_resid.fill(0.0)

        if k > 0:
            alpha = z_mean + dw / (sqrt8k * dt)
            fac = np.exp((-2.0 * k * dt) * (x[:, None] - alpha[None, :]) ** 2)
            for gs in g:
                gs *= fac
            norm2_post = np.zeros(batch)
            for gs in g:
                view = gs.view(np.float64)
                norm2_post += np.einsum("nb,nb->b", view[:, 0::2], view[:, 0::2])
                norm2_post += np.einsum("nb,nb->b", view[:, 1::2], view[:, 1::2])
        else:
            norm2_post = norm2
        _norm_guard(norm2_post, active, errors, i, zero_cols)
        norms_post = np.sqrt(np.where(norm2_post > 0, norm2_post, 1.0))
        window_resid = np.maximum(window_resid, np.where(active, np.abs(norms_post - 1.0), 0.0))

        if i % cfg.renormalize_every == 0:
            inv = 1.0 / norms_post
            for gs in g:
                gs *= inv[None, :]

        prop.apply_unitary(g, half=(i == n_steps), scratch=scratch)

    psi_final = prop.to_fock(g).transpose(1, 0, 2)
    finals: list[QuantumState | None] = []
    for b in range(batch):
        if errors[b] is None:
            finals.append(
                QuantumState(np.ascontiguousarray(psi_final[:, :, b]).reshape(-1), basis).normalized()
            )
        else:
            finals.append(None)

    return _collect_records(
        sink, times, params, cfg, sample_stride, n_steps, trajectory_ids, seeds, finals, errors
    )


def _run_batch_milstein(psi0, params, basis, cfg, xi, seeds, n_steps, sample_stride, trajectory_ids):
    n, s_dim, batch = psi0.shape
    h_full, z_full, z2_full = _cached_milstein_ops(params, basis)

    dt = cfg.dt
    k = params.k
    sqrt_dt = math.sqrt(dt)
    sqrt2k = math.sqrt(2.0 * k) if k > 0 else 0.0
    sqrt8k = math.sqrt(8.0 * k) if k > 0 else 0.0

    n_rows = 1 + n_steps // sample_stride
    times = dt * sample_stride * np.arange(n_rows)
    sink = _SampleSink(n_rows, batch, params)

    active = np.ones(batch, dtype=bool)
    errors: list[tuple[str, int] | None] = [None] * batch

    psi = psi0.copy()
    flat = psi.reshape(n * s_dim, batch)

    stats0 = _measure_stack(psi, params)
    _norm_guard(stats0["norm2"], active, errors, 0, lambda idx: None)
    dy0 = np.zeros(batch) if k > 0 else np.full(batch, np.nan)
    sink.write(stats0, dy0, np.abs(np.sqrt(stats0["norm2"]) - 1.0), active)

    window_dy = np.zeros(batch)
    window_resid = np.zeros(batch)

    def zero_cols(idx):
        flat[:, idx] = 0.0

    minus_i_dt_over_hbar = -1j * dt / params.hbar

    for i in range(1, n_steps + 1):
        zpsi = z_full @ flat
        norm2 = np.einsum("db,db->b", np.conj(flat), flat).real
        _norm_guard(norm2, active, errors, i, zero_cols)
        safe = np.where(norm2 > 0, norm2, 1.0)
        z_entry = np.einsum("db,db->b", np.conj(flat), zpsi).real / safe

        if k > 0:
            dw = xi[i - 1] * sqrt_dt
            dy = z_entry * dt + dw / sqrt8k
            window_dy += np.where(active, dy, 0.0)
            hpsi = h_full @ flat
            z2psi = z2_full @ flat
            coef_z = (4.0 * k * dt) * z_entry + sqrt2k * dw
            coef_z2 = k * (dw * dw - 2.0 * dt)
            flat += minus_i_dt_over_hbar * hpsi
            flat += zpsi * coef_z[None, :]
            flat += z2psi * coef_z2[None, :]
        else:
            hpsi = h_full @ flat
            flat += minus_i_dt_over_hbar * hpsi

        norm2_post = np.einsum("db,db->b", np.conj(flat), flat).real
        _norm_guard(norm2_post, active, errors, i, zero_cols)
        norms_post = np.sqrt(np.where(norm2_post > 0, norm2_post, 1.0))
        window_resid = np.maximum(window_resid, np.where(active, np.abs(norms_post - 1.0), 0.0))

        if i % cfg.renormalize_every == 0:
            flat *= (1.0 / norms_post)[None, :]

        if i % cfg.tail_check_every == 0:
            failed = _tail_guard(psi, params, active, i, errors)
            if len(failed):
                zero_cols(failed)

        if i % sample_stride == 0:
            stats = _measure_stack(psi, params)
            width = times[sink.row] - times[sink.row - 1]
            rate = (window_dy / width) if k > 0 else np.full(batch, np.nan)
            sink.write(stats, rate, window_resid, active)
            window_dy.fill(0.0)
            window_resid.fill(0.0)

    finals: list[QuantumState | None] = []
    for b in range(batch):
        if errors[b] is None:
            finals.append(QuantumState(flat[:, b].copy(), basis).normalized())
        else:
            finals.append(None)

    return _collect_records(
        sink, times, params, cfg, sample_stride, n_steps, trajectory_ids, seeds, finals, errors
    )


def run_trajectory(
    initial: QuantumState,
    params: ModelParams,
    cfg: SseConfig,
    noise: "NoiseStream | np.ndarray",
    t_final: float,
    sample_stride: int = 1,
    propagator: KrausPropagator | None = None,
) -> TrajectoryRecord:
    """Integrate a single monitored trajectory and return its sampled record.

    ``noise`` is either a :class:`NoiseStream` or an explicit array of
    standard normals (dW = noise * sqrt(dt)), which is how refinement studies
    inject a shared Brownian path.  Raises :class:`TrajectoryFailure` (with
    the partial record attached) if the trajectory goes numerically bad.
    """
    tid = noise.trajectory_id if isinstance(noise, NoiseStream) else 0
    rec = run_batch(
        [initial], params, cfg, [noise], t_final, sample_stride, [tid], propagator
    )[0]
    if rec.error is not None:
        raise TrajectoryFailure(rec.error, rec.error_step or 0, tid, partial_record=rec)
    return rec


def sse_step(
    state: QuantumState,
    params: ModelParams,
    cfg: SseConfig,
    dw: float,
) -> QuantumState:
    """One integration step of size cfg.dt; returns the *unnormalized* state.

    For the kraus scheme this is U_half M(alpha) U_half with
    alpha = <z> + dW/(sqrt(8k) dt), <z> taken at the half-step point; for
    milstein it is the explicit update with <z> at entry.  The caller owns
    normalization policy.
    """
    basis = state.basis
    if cfg.scheme == "kraus":
        prop = _cached_propagator(params, basis, cfg.dt)
        psi = state.matrix[:, :, None].astype(np.complex128)
        g = prop.to_z_rep(psi)
        scratch = np.empty((basis.n_fock, 2), dtype=np.float64)
        prop.apply_unitary(g, half=True, scratch=scratch)
        if params.k > 0:
            abs2 = np.zeros((basis.n_fock, 1))
            for gs in g:
                abs2 += np.abs(gs) ** 2
            norm2 = abs2.sum()
            z_mean = float(prop.x @ abs2[:, 0]) / norm2
            alpha = z_mean + dw / (math.sqrt(8.0 * params.k) * cfg.dt)
            fac = np.exp(-2.0 * params.k * cfg.dt * (prop.x - alpha) ** 2)
            for gs in g:
                gs *= fac[:, None]
        prop.apply_unitary(g, half=True, scratch=scratch)
        out = prop.to_fock(g).transpose(1, 0, 2)[:, :, 0]
        return QuantumState(np.ascontiguousarray(out).reshape(-1), basis)

    h_full, z_full, z2_full = _cached_milstein_ops(params, basis)
    flat = state.amplitudes.copy()
    k, dt = params.k, cfg.dt
    out = flat + (-1j * dt / params.hbar) * (h_full @ flat)
    if k > 0:
        zpsi = z_full @ flat
        z_entry = float(np.real(np.vdot(flat, zpsi))) / state.norm_sq
        out += ((4.0 * k * dt) * z_entry + math.sqrt(2.0 * k) * dw) * zpsi
        out += (k * (dw * dw - 2.0 * dt)) * (z2_full @ flat)
    return QuantumState(out, basis)
