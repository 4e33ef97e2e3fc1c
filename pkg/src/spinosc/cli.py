"""Command line front end: subcommand = mode, flags override config keys.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (partial
outputs are flushed first), 4 I/O error.  The only environment variable read
is SPINOSC_OUTPUT_DIR (output directory when neither flag nor config give
one); physics never depends on the environment.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace

from .classical import matched_classical_state, run_classical
from .config import (
    MODES,
    PRESETS,
    ConfigError,
    RunConfig,
    load_config,
    parse_config,
    parse_override,
)
from .cumulant import PsdViolationError, initial_moments, run_cumulant
from .ensemble import EnsembleSpec, run_ensemble
from .hilbert import BasisSpec, CutoffError, product_state
from .output import (
    classical_columns,
    cumulant_columns,
    emit_aggregate_csv,
    emit_csv,
    emit_svg,
    trajectory_columns,
    write_summary,
)
from .sse import NoiseStream, TrajectoryFailure, run_trajectory

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

# flag dest -> config key (parsed with the config-file parsers so flag and
# file values behave identically)
_FLAG_KEYS = {
    "J": "J",
    "delta_z": "delta_z_over_zg",
    "b_natural": "b_natural",
    "k": "k_zg2_over_omega",
    "action": "action_over_hbar",
    "n_max": "n_max",
    "dt": "dt",
    "t_final": "t_final_periods",
    "scheme": "scheme",
    "seed": "seed",
    "n_traj": "n_traj",
    "stride": "sample_stride",
    "batch_size": "batch_size",
    "jobs": "n_jobs",
    "z0": "z0_over_zg",
    "p0": "p0_over_pg",
    "e0": "e0",
    "output_dir": "output_dir",
    "basename": "output_basename",
}


def build_parser() -> argparse.ArgumentParser:
    # argument_default=SUPPRESS: flags the user didn't give stay absent from
    # the namespace, so a subparser reusing these options cannot clobber a
    # value parsed before the subcommand ("spinosc --seed 3 sse").
    common = argparse.ArgumentParser(
        add_help=False, argument_default=argparse.SUPPRESS
    )
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="preset layer")
    common.add_argument("-J", dest="J", metavar="LIST",
                        help="spin magnitude(s), comma separated half-integers")
    common.add_argument("--delta-z", dest="delta_z", metavar="X",
                        help="well half-separation in z_g")
    common.add_argument("--b-natural", dest="b_natural", metavar="X",
                        help="coupling b in m w^2 z_g / hbar")
    common.add_argument("--k", metavar="X", help="measurement strength in omega/z_g^2")
    common.add_argument("--action", metavar="X", help="orbit action in hbar")
    common.add_argument("--n-max", dest="n_max", metavar="N",
                        help="Fock cutoff, or 'auto'")
    common.add_argument("--dt", metavar="X", help="time step in oscillator periods")
    common.add_argument("--t-final", dest="t_final", metavar="X",
                        help="duration in oscillator periods")
    common.add_argument("--scheme", choices=("kraus", "milstein"))
    common.add_argument("--seed", metavar="N", help="base seed")
    common.add_argument("--n-traj", dest="n_traj", metavar="N",
                        help="ensemble size")
    common.add_argument("--stride", metavar="N", help="sample every N steps")
    common.add_argument("--batch-size", dest="batch_size", metavar="N",
                        help="trajectories per lockstep block")
    common.add_argument("--jobs", metavar="N", help="worker processes")
    common.add_argument("--z0", metavar="X", help="initial position in z_g")
    common.add_argument("--p0", metavar="X", help="initial momentum in p_g")
    common.add_argument("--e0", metavar="X", help="entropy normalization override")
    common.add_argument("--svg", action="store_const", const=True,
                        help="also write SVG line plots")
    common.add_argument("--output-dir", dest="output_dir", metavar="DIR")
    common.add_argument("--basename", metavar="NAME", help="output file stem")

    parser = argparse.ArgumentParser(
        prog="spinosc",
        parents=[common],
        description="Continuously measured spin-oscillator trajectory simulator.",
    )
    sub = parser.add_subparsers(dest="mode_arg", metavar="mode")
    for mode in MODES:
        sub.add_parser(mode, parents=[common], help=f"run in {mode} mode")
    return parser


def _resolve_config(args) -> RunConfig:
    config_path = getattr(args, "config", None)
    preset = getattr(args, "preset", None)
    if config_path is not None:
        cfg = load_config(config_path, preset=preset)
    else:
        cfg = parse_config("", preset=preset)

    overrides = {}
    for dest, key in _FLAG_KEYS.items():
        raw = getattr(args, dest, None)
        if raw is None:
            continue
        try:
            attr, value = parse_override(key, str(raw))
        except ConfigError as exc:
            raise ConfigError(f"flag --{dest.replace('_', '-')}: {exc}") from None
        overrides[attr] = value
    if getattr(args, "svg", None):
        overrides["svg"] = True
    if getattr(args, "mode_arg", None):
        overrides["mode"] = args.mode_arg
    cfg = replace(cfg, **overrides)
    for J in cfg.j_values:
        try:
            cfg.params_for(J)
        except ValueError as exc:
            raise ConfigError(f"J={J:g}: {exc}") from None
    return cfg


def _fmt_j(J: float) -> str:
    return f"{J:g}".replace(".", "p")


def _run_sse(cfg: RunConfig, J: float, want_classical: bool):
    params = cfg.params_for(J)
    basis = BasisSpec(n_max=cfg.basis_n_max(J), J=J)
    z0, p0 = cfg.initial_zp()
    state = product_state(basis, params, z0=z0, p0=p0)
    noise = NoiseStream(seed=cfg.seed, trajectory_id=0)
    partial = None
    try:
        rec = run_trajectory(
            state, params, cfg.sse_config(), noise, cfg.t_final,
            sample_stride=cfg.sample_stride,
        )
    except TrajectoryFailure as exc:
        if exc.partial_record is None:
            return None, None, str(exc)
        rec, partial = exc.partial_record, str(exc)
    parts = [trajectory_columns(rec)]
    curves = [("<z>/zg", rec.z_mean), ("<Jz>/hbar", rec.jz_mean)]
    if want_classical:
        initial = matched_classical_state(params, z0=z0, p0=p0)
        cl = run_classical(initial, params, cfg.dt, sample_times=rec.times)
        parts.append(classical_columns(cl, omega=params.omega))
        curves.insert(1, ("z_cl/zg", cl.z))
    return parts, curves, partial


def _run_classical_mode(cfg: RunConfig, J: float):
    params = cfg.params_for(J)
    z0, p0 = cfg.initial_zp()
    initial = matched_classical_state(params, z0=z0, p0=p0)
    n_steps = max(1, round(cfg.t_final / cfg.dt))
    cl = run_classical(
        initial, params, cfg.dt, n_steps=n_steps, sample_stride=cfg.sample_stride
    )
    parts = [classical_columns(cl, omega=params.omega)]
    curves = [("z_cl/zg", cl.z), ("Sz/hbar", cl.sz)]
    return parts, curves, None


def _run_cumulant_mode(cfg: RunConfig, J: float):
    params = cfg.params_for(J)
    z0, p0 = cfg.initial_zp()
    series = run_cumulant(
        initial_moments(params, z0=z0, p0=p0), params, cfg.dt, cfg.t_final,
        NoiseStream(seed=cfg.seed, trajectory_id=0),
        sample_stride=cfg.sample_stride,
    )
    parts = [cumulant_columns(series)]
    curves = [
        ("Czz/zg^2", series.czz),
        ("Cpp/pg^2", series.cpp),
        ("CJzJz/hbar^2", series.cjzjz),
    ]
    return parts, curves, None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"spinosc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = cfg.output_dir or os.environ.get("SPINOSC_OUTPUT_DIR") or "."
    basename = cfg.output_basename or f"{cfg.mode}_{cfg.preset}_seed{cfg.seed}"
    if cfg.long_running:
        print(
            f"spinosc: preset {cfg.preset!r} is long-running and not part of CI",
            file=sys.stderr,
        )

    failures: list[str] = []
    summaries: dict[str, dict] = {}
    e_max_table: list[list[float]] = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(
            os.path.join(out_dir, f"{basename}_config.txt"),
            "w", encoding="utf-8", newline="\n",
        ) as fh:
            fh.write(cfg.echo())

        for J in cfg.j_values:
            stem = os.path.join(out_dir, f"{basename}_J{_fmt_j(J)}")
            try:
                if cfg.mode in ("sse", "compare"):
                    parts, curves, partial = _run_sse(cfg, J, cfg.mode == "compare")
                elif cfg.mode == "classical":
                    parts, curves, partial = _run_classical_mode(cfg, J)
                elif cfg.mode == "cumulant":
                    parts, curves, partial = _run_cumulant_mode(cfg, J)
                else:  # ensemble
                    params = cfg.params_for(J)
                    z0, p0 = cfg.initial_zp()
                    spec = EnsembleSpec(
                        params=params,
                        cfg=cfg.sse_config(),
                        n_max=cfg.basis_n_max(J),
                        t_final=cfg.t_final,
                        n_traj=cfg.n_traj,
                        base_seed=cfg.seed,
                        sample_stride=cfg.sample_stride,
                        batch_size=cfg.batch_size,
                        z0=z0,
                        p0=p0,
                    )
                    result = run_ensemble(spec, n_jobs=cfg.n_jobs)
                    emit_aggregate_csv(stem + "_agg.csv", result)
                    summary = result.summary()
                    if cfg.e0 is not None:
                        vals = result.e_max_values(e0=cfg.e0)
                        summary["mean_e_max"] = (
                            float(vals.mean()) if vals.size else math.nan
                        )
                    summaries[f"{J:g}"] = summary
                    if not math.isnan(summary["mean_e_max"]):
                        e_max_table.append([J, summary["mean_e_max"]])
                    if cfg.svg:
                        emit_svg(
                            stem + "_agg.svg",
                            result.times * params.omega,
                            [("<z>/zg mean", result.z_mean_avg),
                             ("entropy mean", result.entropy_avg)],
                            title=f"ensemble J={J:g} ({cfg.preset})",
                        )
                    if result.n_failed == cfg.n_traj:
                        failures.append(f"J={J:g}: all {cfg.n_traj} trajectories failed")
                    elif result.partial:
                        print(
                            f"spinosc: J={J:g}: {result.n_failed} of {cfg.n_traj} "
                            f"trajectories failed; aggregates exclude them",
                            file=sys.stderr,
                        )
                    continue
            except (CutoffError, PsdViolationError) as exc:
                failures.append(f"J={J:g}: {exc}")
                continue

            if parts is None:
                failures.append(f"J={J:g}: {partial}")
                continue
            emit_csv(stem + ".csv", *parts)
            if cfg.svg:
                t = parts[0]["t"]
                emit_svg(stem + ".svg", t, curves, title=f"{cfg.mode} J={J:g} ({cfg.preset})")
            if partial is not None:
                failures.append(f"J={J:g}: {partial}")

        if cfg.mode == "ensemble":
            payload = {
                "preset": cfg.preset,
                "base_seed": cfg.seed,
                "runs": summaries,
                "e_max_vs_J": e_max_table,
            }
            write_summary(os.path.join(out_dir, f"{basename}_summary.json"), payload)
    except OSError as exc:
        print(f"spinosc: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO

    if failures:
        for line in failures:
            print(f"spinosc: numerical failure: {line}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
