"""Run configuration: flat key=value files, presets, resolved echoes.

All physics keys are dimensionless ratios (z in z_g, k in omega/z_g^2, the
orbit action in hbar, dt and t_final in oscillator periods); the resolved
config builds natural-unit ModelParams (hbar = m = omega = 1).  Unknown keys
are rejected with their line number, as are unparsable values.  A preset
line supplies a base layer; explicit keys override it regardless of order,
and a repeated key's last occurrence wins.

The half-separation can be given either as ``delta_z_over_zg`` or as the
coupling ``b_natural`` (b in units of m omega^2 z_g / hbar); they are
related by delta_z_over_zg = -b_natural * J.  Supplying both is accepted
only when consistent for every J in the sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .hilbert import ModelParams, suggest_n_max
from .sse import SCHEMES, SseConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "PRESETS",
    "parse_config",
    "parse_override",
    "load_config",
]

MODES = ("sse", "classical", "cumulant", "ensemble", "compare")


class ConfigError(ValueError):
    """Bad configuration; message carries line numbers where known."""


def _parse_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"cannot parse {raw!r} as a number") from None


def _parse_int(raw: str) -> int:
    try:
        return int(raw, 10)
    except ValueError:
        raise ValueError(f"cannot parse {raw!r} as an integer") from None


def _parse_positive_float(raw: str) -> float:
    val = _parse_float(raw)
    if val <= 0:
        raise ValueError(f"must be positive, got {raw!r}")
    return val


def _parse_seed(raw: str) -> int:
    val = _parse_int(raw)
    if val < 0:
        raise ValueError(f"seed must be nonnegative, got {raw!r}")
    return val


def _parse_count(raw: str) -> int:
    val = _parse_int(raw)
    if val < 1:
        raise ValueError(f"must be >= 1, got {raw!r}")
    return val


def _parse_j_list(raw: str) -> tuple[float, ...]:
    values = []
    for piece in raw.split(","):
        val = _parse_float(piece.strip())
        if val < 0.5 or abs(2.0 * val - round(2.0 * val)) > 1e-9:
            raise ValueError(f"J must be a positive half-integer, got {piece.strip()!r}")
        values.append(round(2.0 * val) / 2.0)
    return tuple(values)


def _parse_n_max(raw: str) -> int | None:
    if raw.lower() == "auto":
        return None
    val = _parse_int(raw)
    if val < 1:
        raise ValueError(f"n_max must be >= 1 or 'auto', got {raw!r}")
    return val


def _parse_scheme(raw: str) -> str:
    if raw not in SCHEMES:
        raise ValueError(f"scheme must be one of {'/'.join(SCHEMES)}, got {raw!r}")
    return raw


def _parse_mode(raw: str) -> str:
    if raw not in MODES:
        raise ValueError(f"mode must be one of {'/'.join(MODES)}, got {raw!r}")
    return raw


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"cannot parse {raw!r} as a boolean")


def _parse_str(raw: str) -> str:
    return raw


# key -> (attribute, parser).  Attribute None means handled specially.
_KEYS = {
    "preset": (None, _parse_str),
    "mode": ("mode", _parse_mode),
    "J": ("j_values", _parse_j_list),
    "delta_z_over_zg": ("delta_z_over_zg", _parse_float),
    "b_natural": ("b_natural", _parse_float),
    "k_zg2_over_omega": ("k_zg2_over_omega", _parse_float),
    "action_over_hbar": ("action_over_hbar", _parse_positive_float),
    "n_max": ("n_max", _parse_n_max),
    "dt": ("dt_periods", _parse_positive_float),
    "t_final_periods": ("t_final_periods", _parse_positive_float),
    "scheme": ("scheme", _parse_scheme),
    "seed": ("seed", _parse_seed),
    "n_traj": ("n_traj", _parse_count),
    "sample_stride": ("sample_stride", _parse_count),
    "batch_size": ("batch_size", _parse_count),
    "n_jobs": ("n_jobs", _parse_count),
    "z0_over_zg": ("z0_over_zg", _parse_float),
    "p0_over_pg": ("p0_over_pg", _parse_float),
    "e0": ("e0", _parse_positive_float),
    "svg": ("svg", _parse_bool),
    "output_dir": ("output_dir", _parse_str),
    "output_basename": ("output_basename", _parse_str),
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration (defaults and preset applied)."""

    preset: str = "desk"
    mode: str = "sse"
    j_values: tuple[float, ...] = (0.5, 2.0, 10.0)
    delta_z_over_zg: float = 8.0
    b_natural: float | None = None
    k_zg2_over_omega: float = 0.05
    action_over_hbar: float = 50.0
    n_max: int | None = None
    dt_periods: float = 1e-3
    t_final_periods: float = 8.0
    scheme: str = "kraus"
    seed: int = 42
    n_traj: int = 1
    sample_stride: int = 10
    batch_size: int = 32
    n_jobs: int = 1
    z0_over_zg: float = 0.0
    p0_over_pg: float | None = None
    e0: float | None = None
    svg: bool = False
    output_dir: str | None = None
    output_basename: str | None = None
    long_running: bool = False

    def delta_z_for(self, J: float) -> float:
        """Half-separation in z_g for this J (resolving b_natural if used)."""
        if self.b_natural is not None:
            return -self.b_natural * J
        return self.delta_z_over_zg

    def params_for(self, J: float) -> ModelParams:
        """Natural-unit model for one J of the sweep."""
        z_g = math.sqrt(0.5)
        return ModelParams(
            J=J,
            k=self.k_zg2_over_omega / z_g**2,
            delta_z=self.delta_z_for(J) * z_g,
        )

    def basis_n_max(self, J: float) -> int:
        if self.n_max is not None:
            return self.n_max
        return suggest_n_max(self.action_over_hbar, abs(self.delta_z_for(J)))

    @property
    def dt(self) -> float:
        """Step in natural time units."""
        return self.dt_periods * 2.0 * math.pi

    @property
    def t_final(self) -> float:
        return self.t_final_periods * 2.0 * math.pi

    def initial_zp(self) -> tuple[float, float]:
        """Initial (z, p) in natural units; p0 defaults to the action orbit."""
        z_g = math.sqrt(0.5)
        p_g = math.sqrt(0.5)
        z0 = self.z0_over_zg * z_g
        if self.p0_over_pg is not None:
            return z0, self.p0_over_pg * p_g
        return z0, math.sqrt(2.0 * self.action_over_hbar)

    def sse_config(self) -> SseConfig:
        return SseConfig(dt=self.dt, scheme=self.scheme)

    def echo(self) -> str:
        """Canonical key=value text of the resolved configuration."""
        z0, p0 = self.initial_zp()
        p_g = math.sqrt(0.5)
        lines = [
            "# resolved configuration (all keys explicit)",
            f"preset={self.preset}",
            f"mode={self.mode}",
            "J=" + ",".join(f"{j:g}" for j in self.j_values),
            f"delta_z_over_zg={self.delta_z_over_zg:.17g}",
        ]
        if self.b_natural is not None:
            lines.append(f"b_natural={self.b_natural:.17g}")
        lines += [
            f"k_zg2_over_omega={self.k_zg2_over_omega:.17g}",
            f"action_over_hbar={self.action_over_hbar:.17g}",
            "n_max=" + ("auto" if self.n_max is None else str(self.n_max)),
            f"dt={self.dt_periods:.17g}",
            f"t_final_periods={self.t_final_periods:.17g}",
            f"scheme={self.scheme}",
            f"seed={self.seed}",
            f"n_traj={self.n_traj}",
            f"sample_stride={self.sample_stride}",
            f"batch_size={self.batch_size}",
            f"n_jobs={self.n_jobs}",
            f"z0_over_zg={self.z0_over_zg:.17g}",
            f"p0_over_pg={p0 / p_g:.17g}",
        ]
        if self.e0 is not None:
            lines.append(f"e0={self.e0:.17g}")
        lines.append(f"svg={'true' if self.svg else 'false'}")
        if self.output_dir is not None:
            lines.append(f"output_dir={self.output_dir}")
        if self.output_basename is not None:
            lines.append(f"output_basename={self.output_basename}")
        return "\n".join(lines) + "\n"


# Preset layers applied beneath explicit keys.  The paper-scale presets are
# long-running and excluded from CI; entropy-scaling is sized so the
# 1/sqrt(J) trend resolves within the CI budget.
PRESETS: dict[str, dict] = {
    "desk": {},
    "paper-fig1": {
        "j_values": (0.5, 5.0, 25.0),
        "delta_z_over_zg": 22.0,
        "action_over_hbar": 1000.0,
        "k_zg2_over_omega": 0.05,
        # Dense sector propagators do not fit at this cutoff, so the run must
        # use the sparse explicit scheme, and that scheme needs E_max * dt
        # well below 1 or the Fock-tail guard aborts the run.
        "scheme": "milstein",
        "dt_periods": 1e-5,
        "long_running": True,
    },
    "paper-fig3": {
        "j_values": (25.0,),
        "delta_z_over_zg": 22.0,
        "action_over_hbar": 1000.0,
        "k_zg2_over_omega": 0.05,
        "mode": "cumulant",
        "long_running": True,
    },
    "entropy-scaling": {
        "j_values": (2.0, 4.0, 8.0, 16.0),
        "delta_z_over_zg": 9.0,
        "action_over_hbar": 18.0,
        "k_zg2_over_omega": 0.05,
        "t_final_periods": 4.0,
        "n_traj": 10,
        "mode": "ensemble",
    },
}


def parse_override(key: str, raw: str) -> tuple[str, object]:
    """Parse one key's raw value exactly as the file parser would.

    Returns (attribute, value) for dataclasses.replace; used by the CLI so
    flags and file keys cannot drift apart.
    """
    if key not in _KEYS:
        raise ConfigError(f"unknown key {key!r}")
    attr, parser = _KEYS[key]
    try:
        return attr, parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config(text: str, preset: str | None = None) -> RunConfig:
    """Parse key=value lines ('#' comments) into a resolved RunConfig.

    ``preset`` (e.g. from a command-line flag) overrides any preset line in
    the text; explicit keys still win over the preset layer.
    """
    assignments: dict[str, tuple[object, int]] = {}
    preset_name = "desk"
    preset_line = 0
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _KEYS:
            known = ", ".join(sorted(_KEYS))
            raise ConfigError(f"line {lineno}: unknown key {key!r} (known keys: {known})")
        attr, parser = _KEYS[key]
        try:
            value = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(
                    f"line {lineno}: unknown preset {value!r} "
                    f"(available: {', '.join(sorted(PRESETS))})"
                )
            preset_name, preset_line = value, lineno
        else:
            assignments[attr] = (value, lineno)

    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r} (available: {', '.join(sorted(PRESETS))})"
            )
        preset_name = preset
    cfg = RunConfig(preset=preset_name, **PRESETS[preset_name])
    explicit = {attr: value for attr, (value, _) in assignments.items()}
    cfg = replace(cfg, **explicit)

    if cfg.b_natural is not None and "delta_z_over_zg" in explicit:
        b_line = assignments["b_natural"][1]
        dz_line = assignments["delta_z_over_zg"][1]
        for J in cfg.j_values:
            implied = -cfg.b_natural * J
            if abs(cfg.delta_z_over_zg - implied) > 1e-9 * max(1.0, abs(implied)):
                raise ConfigError(
                    f"lines {min(b_line, dz_line)} and {max(b_line, dz_line)}: "
                    f"inconsistent (b, delta_z): b_natural={cfg.b_natural:g} implies "
                    f"delta_z_over_zg={implied:g} for J={J:g}, got {cfg.delta_z_over_zg:g}"
                )
    # Surface bad derived physics at parse time rather than mid-run.
    for J in cfg.j_values:
        try:
            cfg.params_for(J)
        except ValueError as exc:
            raise ConfigError(f"J={J:g}: {exc}") from None
    return cfg


def load_config(path: str, preset: str | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from None
    return parse_config(text, preset=preset)
