"""Reproducible trajectory ensembles with order-independent aggregation.

Trajectories are grouped into fixed blocks of ``batch_size`` consecutive ids
and each block is integrated in lockstep.  Block membership is a pure
function of (n_traj, batch_size), and each trajectory's noise stream is keyed
by (base_seed, trajectory_id), so the numbers a trajectory sees never depend
on how blocks are spread over workers.  Results are reduced in trajectory-id
order; worker count only changes wall time.

Failed trajectories stay in ``records`` with their error set but are
excluded from every aggregate; ``n_failed`` makes the exclusion visible.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cumulant import CumulantSeries
from .diagnostics import normalized_max_entropy
from .hilbert import BasisSpec, ModelParams, product_state
from .sse import NoiseStream, SseConfig, TrajectoryRecord, run_batch

__all__ = [
    "EnsembleSpec",
    "EnsembleResult",
    "ConvergenceReport",
    "run_ensemble",
    "convergence_report",
]


@dataclass(frozen=True)
class EnsembleSpec:
    """Everything needed to reproduce an ensemble bit for bit."""

    params: ModelParams
    cfg: SseConfig
    n_max: int
    t_final: float
    n_traj: int
    base_seed: int
    sample_stride: int = 1
    batch_size: int = 32
    z0: float = 0.0
    p0: float = 0.0
    theta: float = math.pi / 2
    phi: float = 0.0

    def __post_init__(self) -> None:
        if self.n_traj < 1:
            raise ValueError(f"n_traj must be >= 1, got {self.n_traj}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.t_final <= 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")

    def blocks(self) -> list[range]:
        """Fixed partition of trajectory ids; independent of worker count."""
        return [
            range(lo, min(lo + self.batch_size, self.n_traj))
            for lo in range(0, self.n_traj, self.batch_size)
        ]

    def initial_state(self):
        basis = BasisSpec(n_max=self.n_max, J=self.params.J)
        return product_state(
            basis, self.params, z0=self.z0, p0=self.p0, theta=self.theta, phi=self.phi
        )


def _run_block(spec: EnsembleSpec, block: range) -> list[TrajectoryRecord]:
    ids = list(block)
    initial = spec.initial_state()
    noises = [NoiseStream(seed=spec.base_seed, trajectory_id=tid) for tid in ids]
    return run_batch(
        initial,
        spec.params,
        spec.cfg,
        noises,
        spec.t_final,
        sample_stride=spec.sample_stride,
        trajectory_ids=ids,
    )


@dataclass
class EnsembleResult:
    """Per-trajectory records plus fixed-order pointwise aggregates.

    Aggregate arrays are NaN where no trajectory survived.  ``partial`` is
    true when any trajectory failed; its record keeps the failure reason.
    """

    spec: EnsembleSpec
    records: list[TrajectoryRecord]
    times: np.ndarray
    z_mean_avg: np.ndarray
    z_mean_var: np.ndarray
    p_mean_avg: np.ndarray
    p_mean_var: np.ndarray
    jz_mean_avg: np.ndarray
    jz_mean_var: np.ndarray
    entropy_avg: np.ndarray
    entropy_var: np.ndarray
    failed_ids: list[int] = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return len(self.failed_ids)

    @property
    def partial(self) -> bool:
        return self.n_failed > 0

    def ok_records(self) -> list[TrajectoryRecord]:
        return [r for r in self.records if r.ok()]

    def final_jz(self) -> np.ndarray:
        """Terminal <Jz> (units of hbar) of each surviving trajectory, id order."""
        return np.array([r.jz_mean[-1] for r in self.ok_records()])

    def up_fraction(self) -> float:
        finals = self.final_jz()
        if finals.size == 0:
            return math.nan
        return float(np.mean(finals > 0.0))

    def collapsed_fraction(self, threshold: float) -> float:
        """Fraction of surviving trajectories with |<Jz>| beyond threshold at the end."""
        finals = self.final_jz()
        if finals.size == 0:
            return math.nan
        return float(np.mean(np.abs(finals) > threshold))

    def e_max_values(self, e0: float | None = None) -> np.ndarray:
        """Normalized peak entropy per surviving trajectory, id order."""
        return np.array(
            [
                normalized_max_entropy(r.entropy, self.spec.params.J, e0=e0)
                for r in self.ok_records()
            ]
        )

    def summary(self) -> dict:
        """JSON-ready scalars describing the ensemble."""
        e_max = self.e_max_values()
        return {
            "n_traj": self.spec.n_traj,
            "n_failed": self.n_failed,
            "failed_ids": list(self.failed_ids),
            "base_seed": self.spec.base_seed,
            "J": self.spec.params.J,
            "scheme": self.spec.cfg.scheme,
            "up_fraction": self.up_fraction(),
            "collapsed_fraction_049": self.collapsed_fraction(0.49),
            "mean_e_max": float(e_max.mean()) if e_max.size else math.nan,
            "std_e_max": float(e_max.std()) if e_max.size else math.nan,
        }


def _aggregate(spec: EnsembleSpec, records: list[TrajectoryRecord]) -> EnsembleResult:
    times = records[0].times
    ok = [r for r in records if r.ok()]
    failed_ids = [r.trajectory_id for r in records if not r.ok()]
    agg = {}
    for name in ("z_mean", "p_mean", "jz_mean", "entropy"):
        if ok:
            stack = np.stack([getattr(r, name) for r in ok])
            agg[f"{name}_avg"] = stack.mean(axis=0)
            agg[f"{name}_var"] = stack.var(axis=0)
        else:
            agg[f"{name}_avg"] = np.full_like(times, np.nan)
            agg[f"{name}_var"] = np.full_like(times, np.nan)
    return EnsembleResult(
        spec=spec, records=records, times=times, failed_ids=failed_ids, **agg
    )


def run_ensemble(spec: EnsembleSpec, n_jobs: int = 1) -> EnsembleResult:
    """Run all trajectories and aggregate; output is independent of n_jobs.

    ``n_jobs`` > 1 distributes whole blocks over a process pool.  Because
    blocks are integrated in lockstep batches whose membership is fixed by
    the spec, per-trajectory output is bitwise identical for any worker
    count.
    """
    if n_jobs < 1:
        raise ValueError(f"n_jobs must be >= 1, got {n_jobs}")
    blocks = spec.blocks()
    if n_jobs == 1 or len(blocks) == 1:
        per_block = [_run_block(spec, block) for block in blocks]
    else:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(blocks))) as pool:
            per_block = list(pool.map(_run_block, [spec] * len(blocks), blocks))
    records = [rec for block in per_block for rec in block]
    records.sort(key=lambda r: r.trajectory_id)
    return _aggregate(spec, records)


@dataclass(frozen=True)
class ConvergenceReport:
    """Closure-vs-ensemble comparison on a shared grid.

    ``covariance_discrepancy`` maps each covariance channel to
    max_t |ensemble mean - closure| / max_t |closure| (NaN when the closure
    trace is identically ~0).  ``third_cumulant_ratio`` maps the measured
    third central moments to their Gaussian scale max_t C^(3/2).  The
    closure is trustworthy when both stay small; ``within(rel_tol)`` applies
    one threshold across channels.
    """

    covariance_discrepancy: dict[str, float]
    third_cumulant_ratio: dict[str, float]
    n_trajectories: int

    def within(self, rel_tol: float) -> bool:
        vals = [v for v in self.covariance_discrepancy.values() if not math.isnan(v)]
        return bool(vals) and max(vals) <= rel_tol

    def lines(self) -> list[str]:
        out = [f"closure vs ensemble of {self.n_trajectories}:"]
        for name, val in self.covariance_discrepancy.items():
            out.append(f"  {name:6s} discrepancy {val:.3f}")
        for name, val in self.third_cumulant_ratio.items():
            out.append(f"  {name:6s} third-cumulant ratio {val:.3f}")
        return out


_COV_CHANNELS = ("czz", "czp", "cpp", "czjz", "cpjz", "cjzjz")


def convergence_report(
    result: EnsembleResult, series: CumulantSeries
) -> ConvergenceReport:
    """Tabulate how far the moment closure sits from the ensemble.

    The ensemble and the closure must share parameters and sampling cadence.
    The split-step quantum scheme stores rows at measurement event times,
    half a step before the closure's boundary rows; when the two grids
    differ by at most one step the closure channels (smooth between rows)
    are interpolated onto the ensemble grid.
    """
    if series.params is not None and series.params != result.spec.params:
        raise ValueError("parameter mismatch between ensemble and closure series")
    ok = result.ok_records()
    if not ok:
        raise ValueError("no surviving trajectories to compare")
    times = result.times
    same_grid = len(series.times) == len(times) and np.allclose(
        series.times, times, rtol=1e-9, atol=1e-12
    )
    if not same_grid:
        step = result.spec.cfg.dt
        offset = np.abs(np.asarray(times)[:, None] - np.asarray(series.times)).min(
            axis=1
        )
        if len(series.times) != len(times) or offset.max() > step * (1 + 1e-9):
            raise ValueError("time-grid mismatch between ensemble and closure series")

    cov_disc: dict[str, float] = {}
    for name in _COV_CHANNELS:
        mean_sse = np.stack([getattr(r, name) for r in ok]).mean(axis=0)
        closure = getattr(series, name)
        if not same_grid:
            closure = np.interp(times, series.times, closure)
        scale = float(np.abs(closure).max())
        if scale < 1e-12:
            cov_disc[name] = math.nan if np.abs(mean_sse).max() < 1e-12 else math.inf
        else:
            cov_disc[name] = float(np.abs(mean_sse - closure).max() / scale)

    third: dict[str, float] = {}
    for m3_name, c_name in (("m3_z", "czz"), ("m3_jz", "cjzjz")):
        m3 = np.abs(np.stack([getattr(r, m3_name) for r in ok])).mean(axis=0)
        gauss = float(np.stack([getattr(r, c_name) for r in ok]).mean(axis=0).max())
        third[m3_name] = float(m3.max() / gauss**1.5) if gauss > 1e-12 else math.nan

    return ConvergenceReport(
        covariance_discrepancy=cov_disc,
        third_cumulant_ratio=third,
        n_trajectories=len(ok),
    )
