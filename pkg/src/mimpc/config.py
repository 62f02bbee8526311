"""TOML run configuration for the command line pipeline.

A run file names a benchmark and optionally overrides the horizon, the
stage costs, the demonstration plan, the learner tolerances and the
simulation window. Parsing is total: every rejection raises
:class:`ConfigError` carrying a machine-readable reason code and a
message that names the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python 3.10
    import tomli as tomllib

from .learner import LearnerOptions
from .models import ModelSpec, get_model
from .ocp import OcpSpec

__all__ = ["ConfigError", "RunConfig", "load_config", "BENCHMARK_NAMES"]

# relative tolerances for the symmetric-PSD gate on parsed matrices
SYM_TOL = 1e-9
PSD_TOL = 1e-10


class ConfigError(Exception):
    """Rejected configuration with a machine-readable reason code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message

    def __str__(self) -> str:
        return f"{self.message} [{self.code}]"


# Per-benchmark defaults: a minimal config is just `benchmark = "..."`.
_BENCHMARKS: dict[str, dict] = {
    "fishing": dict(
        model="lotka-volterra",
        horizon=20,
        Q=np.eye(2),
        R=np.array([[0.01]]),
        x_ref=np.array([1.0, 1.0]),
        expert="mixed-integer",
        starts=(
            np.array([1.2, 1.1]),
            np.array([0.8, 1.3]),
            np.array([1.5, 0.9]),
        ),
        demo_steps=120,
        sim_x0=np.array([1.2, 1.1]),
        sim_steps=120,
    ),
    "satellite": dict(
        model="satellite",
        horizon=12,
        Q=np.diag([10.0, 1.0, 1.0]),
        R=np.eye(2),
        x_ref=np.array([5.0, 0.0, 0.126]),
        expert="relaxed",
        starts=(
            np.array([4.4, 0.0, 0.14]),
            np.array([5.6, 0.0, 0.11]),
            np.array([5.0, 0.1, 0.126]),
        ),
        demo_steps=40,
        sim_x0=np.array([4.4, 0.0, 0.14]),
        sim_steps=100,
    ),
}

BENCHMARK_NAMES = tuple(sorted(_BENCHMARKS))

_EXPERTS = ("mixed-integer", "relaxed")

# schema: section -> allowed fields
_SCHEMA = {
    "": ("benchmark", "seed", "out_dir", "ocp", "demos", "learner", "simulate"),
    "ocp": ("horizon", "Q", "R", "Qf"),
    "demos": ("expert", "starts", "steps"),
    "learner": ("eps", "tol", "rel_decrease", "max_iters"),
    "simulate": ("x0", "steps"),
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run description (defaults already applied)."""

    benchmark: str
    seed: int
    out_dir: Path
    horizon: int
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    x_ref: np.ndarray
    expert: str
    starts: tuple[np.ndarray, ...]
    demo_steps: int
    learner_eps: float
    learner_opts: LearnerOptions
    sim_x0: np.ndarray
    sim_steps: int

    @property
    def model(self) -> ModelSpec:
        return get_model(_BENCHMARKS[self.benchmark]["model"])

    def ocp_spec(self) -> OcpSpec:
        """Horizon problem used by the demonstration experts."""
        model = self.model
        return OcpSpec(model=model, N=self.horizon, Q=self.Q, R=self.R,
                       x_ref=self.x_ref, Qf=self.Qf,
                       w_ref=np.zeros(model.n_w))


def _anchor(path: Path, section: str) -> str:
    where = f"[{section}]" if section else "top level"
    return f"{path}: {where}"


def _reject_unknown(path: Path, section: str, table: dict) -> None:
    known = _SCHEMA[section]
    for key in table:
        if key not in known:
            raise ConfigError(
                "unknown-field",
                f"{_anchor(path, section)}: unknown field '{key}'",
            )


def _section(path: Path, raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(
            "bad-type", f"{_anchor(path, '')}: '{name}' must be a table")
    _reject_unknown(path, name, value)
    return value


def _get_str(path: Path, section: str, table: dict, field: str,
             default: str, choices: tuple[str, ...]) -> str:
    value = table.get(field, default)
    if not isinstance(value, str):
        raise ConfigError(
            "bad-type", f"{_anchor(path, section)}: '{field}' must be a string")
    if value not in choices:
        raise ConfigError(
            "bad-value",
            f"{_anchor(path, section)}: '{field}' must be one of "
            f"{', '.join(choices)} (got '{value}')",
        )
    return value


def _get_int(path: Path, section: str, table: dict, field: str,
             default: int, minimum: int) -> int:
    value = table.get(field, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(
            "bad-type",
            f"{_anchor(path, section)}: '{field}' must be an integer")
    if value < minimum:
        raise ConfigError(
            "bad-value",
            f"{_anchor(path, section)}: '{field}' must be >= {minimum}")
    return value


def _get_float(path: Path, section: str, table: dict, field: str,
               default: float, minimum: float) -> float:
    value = table.get(field, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(
            "bad-type", f"{_anchor(path, section)}: '{field}' must be a number")
    value = float(value)
    if not np.isfinite(value) or value < minimum:
        raise ConfigError(
            "bad-value",
            f"{_anchor(path, section)}: '{field}' must be >= {minimum}")
    return value


def _as_vector(path: Path, section: str, field: str, value,
               length: int) -> np.ndarray:
    try:
        vec = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(
            "bad-type",
            f"{_anchor(path, section)}: '{field}' must be a list of numbers")
    if vec.shape != (length,):
        raise ConfigError(
            "bad-shape",
            f"{_anchor(path, section)}: '{field}' must have length {length}")
    if not np.all(np.isfinite(vec)):
        raise ConfigError(
            "bad-value", f"{_anchor(path, section)}: '{field}' must be finite")
    return vec


def _get_matrix(path: Path, section: str, table: dict, field: str,
                default: np.ndarray, size: int) -> np.ndarray:
    if field not in table:
        return default.copy()
    try:
        mat = np.asarray(table[field], dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(
            "bad-type",
            f"{_anchor(path, section)}: '{field}' must be a matrix of numbers")
    if mat.shape != (size, size):
        raise ConfigError(
            "bad-shape",
            f"{_anchor(path, section)}: '{field}' must be {size}x{size}")
    if not np.all(np.isfinite(mat)):
        raise ConfigError(
            "bad-value", f"{_anchor(path, section)}: '{field}' must be finite")
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > SYM_TOL * scale:
        raise ConfigError(
            "not-symmetric",
            f"{_anchor(path, section)}: '{field}' must be symmetric")
    if np.linalg.eigvalsh(0.5 * (mat + mat.T)).min() < -PSD_TOL * scale:
        raise ConfigError(
            "not-psd",
            f"{_anchor(path, section)}: '{field}' must be positive "
            "semidefinite")
    return mat


def load_config(path: str | Path) -> RunConfig:
    """Parse and resolve a run file, applying benchmark defaults."""
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as err:
        raise ConfigError("io-error", f"{path}: cannot read config: {err}")
    try:
        raw = tomllib.loads(text.decode("utf-8"))
    except UnicodeDecodeError as err:
        raise ConfigError("toml-syntax", f"{path}: not UTF-8: {err}")
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("toml-syntax", f"{path}: {err}")

    _reject_unknown(path, "", raw)
    if "benchmark" not in raw:
        raise ConfigError(
            "missing-field", f"{_anchor(path, '')}: 'benchmark' is required")
    benchmark = _get_str(path, "", raw, "benchmark", "", BENCHMARK_NAMES)
    defaults = _BENCHMARKS[benchmark]
    model = get_model(defaults["model"])

    seed = _get_int(path, "", raw, "seed", 0, 0)
    out_dir = raw.get("out_dir", f"runs/{benchmark}")
    if not isinstance(out_dir, str):
        raise ConfigError(
            "bad-type", f"{_anchor(path, '')}: 'out_dir' must be a string")

    ocp = _section(path, raw, "ocp")
    horizon = _get_int(path, "ocp", ocp, "horizon", defaults["horizon"], 1)
    Q = _get_matrix(path, "ocp", ocp, "Q", defaults["Q"], model.n_x)
    R = _get_matrix(path, "ocp", ocp, "R", defaults["R"], model.n_w)
    Qf = _get_matrix(path, "ocp", ocp, "Qf", defaults["Q"], model.n_x)

    demos = _section(path, raw, "demos")
    expert = _get_str(path, "demos", demos, "expert", defaults["expert"],
                      _EXPERTS)
    demo_steps = _get_int(path, "demos", demos, "steps",
                          defaults["demo_steps"], 1)
    if "starts" in demos:
        rows = demos["starts"]
        if not isinstance(rows, list) or not rows:
            raise ConfigError(
                "bad-type",
                f"{_anchor(path, 'demos')}: 'starts' must be a non-empty "
                "list of states")
        starts = tuple(
            _as_vector(path, "demos", f"starts[{i}]", row, model.n_x)
            for i, row in enumerate(rows))
    else:
        starts = tuple(s.copy() for s in defaults["starts"])

    learner = _section(path, raw, "learner")
    eps = _get_float(path, "learner", learner, "eps", 1e-6, 0.0)
    opts = LearnerOptions(
        tol=_get_float(path, "learner", learner, "tol", 1e-8, 1e-300),
        rel_decrease=_get_float(path, "learner", learner, "rel_decrease",
                                1e-10, 1e-300),
        max_iters=_get_int(path, "learner", learner, "max_iters", 2000, 1),
    )

    simulate = _section(path, raw, "simulate")
    sim_steps = _get_int(path, "simulate", simulate, "steps",
                         defaults["sim_steps"], 0)
    if "x0" in simulate:
        sim_x0 = _as_vector(path, "simulate", "x0", simulate["x0"], model.n_x)
    else:
        sim_x0 = defaults["sim_x0"].copy()

    return RunConfig(
        benchmark=benchmark, seed=seed, out_dir=Path(out_dir),
        horizon=horizon, Q=Q, R=R, Qf=Qf, x_ref=defaults["x_ref"].copy(),
        expert=expert, starts=starts, demo_steps=demo_steps,
        learner_eps=eps, learner_opts=opts,
        sim_x0=sim_x0, sim_steps=sim_steps,
    )
