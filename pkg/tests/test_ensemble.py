"""Ensemble reproducibility, aggregation, and closure comparison."""

import math

import numpy as np
import pytest

from spinosc import ModelParams
from spinosc.cumulant import initial_moments, run_cumulant
from spinosc.ensemble import (
    ConvergenceReport,
    EnsembleSpec,
    convergence_report,
    run_ensemble,
)
from spinosc.sse import NoiseStream, SseConfig

SERIES = ("times", "dy_rate", "z_mean", "p_mean", "jz_mean", "czz", "czp",
          "cpp", "czjz", "cpjz", "cjzjz", "entropy", "norm_residual")


def _small_spec(n_traj=7, batch_size=3, scheme="kraus", n_steps=150):
    params = ModelParams(J=0.5, k=0.1, delta_z=1.0)
    dt = 2.0 * math.pi / 1000.0
    return EnsembleSpec(
        params=params,
        cfg=SseConfig(dt=dt, scheme=scheme),
        n_max=32,
        t_final=n_steps * dt,
        n_traj=n_traj,
        base_seed=2024,
        sample_stride=10,
        batch_size=batch_size,
        p0=0.5,
    )


def test_worker_count_does_not_change_output():
    spec = _small_spec()
    results = [run_ensemble(spec, n_jobs=n) for n in (1, 2, 3)]
    ref = results[0]
    assert [r.trajectory_id for r in ref.records] == list(range(spec.n_traj))
    for other in results[1:]:
        for a, b in zip(ref.records, other.records):
            for name in SERIES:
                assert np.array_equal(
                    getattr(a, name), getattr(b, name), equal_nan=True
                ), name
        assert np.array_equal(ref.z_mean_avg, other.z_mean_avg)
        assert np.array_equal(ref.entropy_var, other.entropy_var)


def test_single_trajectory_aggregates_are_the_record():
    spec = _small_spec(n_traj=1, batch_size=4)
    result = run_ensemble(spec)
    rec = result.records[0]
    assert np.array_equal(result.z_mean_avg, rec.z_mean)
    assert np.array_equal(result.jz_mean_avg, rec.jz_mean)
    assert np.all(result.z_mean_var == 0.0)
    assert not result.partial
    assert result.summary()["n_failed"] == 0


def test_trajectories_are_distinct():
    spec = _small_spec(n_traj=5)
    result = run_ensemble(spec)
    finals = np.array([r.z_mean[-1] for r in result.records])
    assert len(np.unique(finals)) == len(finals)


def test_failed_trajectory_excluded(monkeypatch):
    import spinosc.ensemble as ens

    real_run_batch = ens.run_batch

    def sabotage(*args, **kwargs):
        records = real_run_batch(*args, **kwargs)
        for rec in records:
            if rec.trajectory_id == 2:
                rec.error = "synthetic failure"
                rec.error_step = 1
        return records

    monkeypatch.setattr(ens, "run_batch", sabotage)
    spec = _small_spec(n_traj=5, batch_size=2)
    result = run_ensemble(spec)
    assert result.failed_ids == [2]
    assert result.partial
    assert len(result.ok_records()) == 4
    clean = run_ensemble(_small_spec(n_traj=5, batch_size=2))
    keep = [0, 1, 3, 4]
    stack = np.stack([clean.records[i].z_mean for i in keep])
    assert np.allclose(result.z_mean_avg, stack.mean(axis=0), atol=0, rtol=0)
    assert math.isfinite(result.summary()["up_fraction"])


def test_cutoff_breach_reported_not_fatal():
    # Wells far outside the basis: every trajectory must hit the Fock-tail
    # guard, be reported, and leave the aggregates NaN rather than crash.
    params = ModelParams(J=0.5, k=0.1, delta_z=10.0)
    dt = 2.0 * math.pi / 1000.0
    spec = EnsembleSpec(
        params=params,
        cfg=SseConfig(dt=dt),
        n_max=16,
        t_final=400 * dt,
        n_traj=3,
        base_seed=5,
        sample_stride=20,
        batch_size=3,
    )
    result = run_ensemble(spec)
    assert result.n_failed == 3
    assert all("n_max" in (r.error or "") for r in result.records)
    assert np.isnan(result.z_mean_avg).all()
    assert math.isnan(result.up_fraction())


def test_closure_matches_uncoupled_ensemble():
    # b = 0: the closure is exact, so the ensemble-mean covariances must sit
    # on the deterministic Riccati flow up to O(dt) scheme bias.
    params = ModelParams(J=0.5, k=0.1, delta_z=0.0)
    dt = 2.0 * math.pi / 1000.0
    n_steps = 250
    spec = EnsembleSpec(
        params=params,
        cfg=SseConfig(dt=dt, scheme="milstein"),
        n_max=48,
        t_final=n_steps * dt,
        n_traj=6,
        base_seed=77,
        sample_stride=5,
        batch_size=6,
        z0=0.7,
    )
    result = run_ensemble(spec)
    assert not result.partial
    series = run_cumulant(
        initial_moments(params, z0=0.7), params,
        dt=dt, t_final=n_steps * dt,
        noise=NoiseStream(seed=123), sample_stride=5,
    )
    report = convergence_report(result, series)
    assert isinstance(report, ConvergenceReport)
    assert report.within(0.05)
    assert report.covariance_discrepancy["czz"] < 0.05
    # Uncoupled channels are flat zero in both: reported as NaN, not inf.
    assert math.isnan(report.covariance_discrepancy["czjz"])
    assert report.third_cumulant_ratio["m3_z"] < 0.05
    assert any("czz" in line for line in report.lines())


def test_convergence_report_interpolates_event_time_grid():
    # kraus rows sit half a step before the closure's boundary rows; the
    # report must interpolate the smooth closure channels, not reject.
    params = ModelParams(J=0.5, k=0.1, delta_z=0.0)
    dt = 2.0 * math.pi / 1000.0
    n_steps = 250
    spec = EnsembleSpec(
        params=params,
        cfg=SseConfig(dt=dt, scheme="kraus"),
        n_max=48,
        t_final=n_steps * dt,
        n_traj=6,
        base_seed=77,
        sample_stride=5,
        batch_size=6,
        z0=0.7,
    )
    result = run_ensemble(spec)
    series = run_cumulant(
        initial_moments(params, z0=0.7), params,
        dt=dt, t_final=n_steps * dt,
        noise=NoiseStream(seed=123), sample_stride=5,
    )
    assert not np.allclose(result.times, series.times)
    report = convergence_report(result, series)
    assert report.within(0.05)


def test_convergence_report_rejects_mismatch():
    spec = _small_spec(n_traj=2, scheme="milstein", n_steps=50)
    result = run_ensemble(spec)
    other = ModelParams(J=1.0, k=0.1, delta_z=1.0)
    series = run_cumulant(
        initial_moments(other), other, dt=spec.cfg.dt,
        t_final=spec.t_final, noise=NoiseStream(seed=1), sample_stride=10,
    )
    with pytest.raises(ValueError, match="parameter mismatch"):
        convergence_report(result, series)
    # Same params, wrong grid.
    series2 = run_cumulant(
        initial_moments(spec.params), spec.params, dt=spec.cfg.dt,
        t_final=spec.t_final, noise=NoiseStream(seed=1), sample_stride=5,
    )
    with pytest.raises(ValueError, match="grid"):
        convergence_report(result, series2)


def test_spec_validation():
    params = ModelParams(J=0.5, k=0.1, delta_z=1.0)
    cfg = SseConfig(dt=1e-3)
    with pytest.raises(ValueError, match="n_traj"):
        EnsembleSpec(params=params, cfg=cfg, n_max=16, t_final=1.0,
                     n_traj=0, base_seed=1)
    with pytest.raises(ValueError, match="batch_size"):
        EnsembleSpec(params=params, cfg=cfg, n_max=16, t_final=1.0,
                     n_traj=2, base_seed=1, batch_size=0)
    spec = EnsembleSpec(params=params, cfg=cfg, n_max=16, t_final=1.0,
                        n_traj=7, base_seed=1, batch_size=3)
    assert [list(b) for b in spec.blocks()] == [[0, 1, 2], [3, 4, 5], [6]]
    with pytest.raises(ValueError, match="n_jobs"):
        run_ensemble(spec, n_jobs=0)
