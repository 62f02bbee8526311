"""Closed-loop simulation, expert-demonstration generation and metrics.

The simulator runs a controller against a plant whose dynamics may
differ from the controller's model (coefficient errors, state-dependent
terms); demonstrations are generated against the nominal model, since
the offline phase precedes deployment.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .learner import Dataset, DemoPair
from .minlp import BnbOptions
from .models import DiscreteMap, ModelSpec, lotka_volterra_model, rk4_step, satellite_model
from .nlp import SolveOptions, solve_nlp
from .ocp import InfeasibleInputError, OcpSpec, build_full_ocp, rollout_guess

log = logging.getLogger(__name__)

MIXED_INTEGER = "mixed-integer"
RELAXED = "relaxed"

# Demonstration-grade search settings: the incumbent is carried by the
# seeded dive, so a loose certificate and a hard node cap bound the cost
# of each expert step without changing the returned actions; node (not
# wall-clock) limits keep closed loops deterministic.
DEMO_BNB_OPTIONS = BnbOptions(rel_gap=0.05, node_limit=100)
DEMO_SOLVE_OPTIONS = SolveOptions(kkt_tol=1e-5, penalty_init=1e3)

CSV_FLOAT_DIGITS = 17  # shortest-repr floats round-trip exactly


@dataclass(frozen=True)
class PlantSpec:
    """True dynamics driven by the simulator.

    ``model`` may be simulation-only (no derivative callbacks); ``params``
    records the coefficient values for inspection and reporting.
    """

    model: ModelSpec
    steps_per_sample: int = 1
    params: dict = field(default_factory=dict)

    @property
    def dmap(self) -> DiscreteMap:
        return DiscreteMap(self.model, self.steps_per_sample)

    def step(self, x, w) -> np.ndarray:
        return rk4_step(self.dmap, x, w)


def fishing_plant() -> PlantSpec:
    """Fishing plant with 10% high harvest coefficients."""
    c1, c2 = 0.44, 0.22
    return PlantSpec(model=lotka_volterra_model(c1=c1, c2=c2),
                     params={"c1": c1, "c2": c2})


def variable_thrust_efficiency(x1):
    """State-dependent efficiency, nominal 0.1 at the reference radius."""
    return np.exp((5.0 - x1 + 2.0 * np.log(0.1)) / 2.0)


def satellite_plant() -> PlantSpec:
    """Satellite plant whose thrust efficiency decays with the radius."""
    return PlantSpec(
        model=satellite_model(d3=variable_thrust_efficiency),
        params={"d1": 2.0, "d2": 0.1, "d3": variable_thrust_efficiency},
    )


@dataclass(frozen=True)
class SimConfig:
    """Closed-loop run settings."""

    x0: np.ndarray
    T: int
    x_ref: np.ndarray
    seed: int = 0
    record_wall_times: bool = True
    record_violations: bool = True

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float))
        if self.T < 0:
            raise ValueError("step count must be nonnegative")


@dataclass(frozen=True)
class ViolationEvent:
    """One recorded constraint problem during a closed loop."""

    t: int
    kind: str  # "controller_infeasible" or "state_bounds"
    amount: float


@dataclass
class SimResult:
    """Recorded closed loop with tracking metrics.

    ``states`` has one more row than ``controls``; row ``t+1`` is exactly
    the plant step of row ``t`` under ``controls[t]``.
    """

    states: np.ndarray
    controls: np.ndarray
    wall_times: np.ndarray
    final_deviation_inf: float
    integrated_squared_deviation: float
    violations: tuple[ViolationEvent, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "wall_times": self.wall_times.tolist(),
            "metrics": {
                "final_deviation_inf": float(self.final_deviation_inf),
                "integrated_squared_deviation": float(
                    self.integrated_squared_deviation
                ),
            },
            "violations": [
                {"t": v.t, "kind": v.kind, "amount": v.amount}
                for v in self.violations
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SimResult":
        return cls(
            states=np.asarray(d["states"], dtype=float),
            controls=np.asarray(d["controls"], dtype=float),
            wall_times=np.asarray(d["wall_times"], dtype=float),
            final_deviation_inf=float(d["metrics"]["final_deviation_inf"]),
            integrated_squared_deviation=float(
                d["metrics"]["integrated_squared_deviation"]
            ),
            violations=tuple(
                ViolationEvent(int(v["t"]), str(v["kind"]), float(v["amount"]))
                for v in d["violations"]
            ),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SimResult":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def compute_metrics(states, x_ref, Ts) -> tuple[float, float]:
    """Tracking metrics of a recorded state trajectory.

    Returns the infinity-norm deviation of the final state and the
    sample-time-weighted sum of squared deviations over every recorded
    state, ``Ts * sum_t ||x_t - x_ref||^2``.
    """
    states = np.asarray(states, dtype=float)
    dev = states - np.asarray(x_ref, dtype=float)
    final = float(np.abs(dev[-1]).max())
    integrated = float(Ts * np.sum(dev * dev))
    return final, integrated


def _bound_violation(model: ModelSpec, x) -> float:
    lo = np.where(np.isfinite(model.x_lower), model.x_lower - x, -np.inf)
    hi = np.where(np.isfinite(model.x_upper), x - model.x_upper, -np.inf)
    return float(max(lo.max(), hi.max(), 0.0))


def simulate_closed_loop(controller, plant: PlantSpec, cfg: SimConfig) -> SimResult:
    """Run ``cfg.T`` closed-loop steps of ``controller`` against ``plant``.

    The controller sees the exact plant state (perfect observation) and
    only its own call is timed. An infeasible step is recorded and the
    loop continues with the least-violating control the controller
    returned; plant states outside the model box are logged as well.
    """
    m = controller.model
    if (m.n_x, m.n_u, m.n_z) != (plant.model.n_x, plant.model.n_u, plant.model.n_z):
        raise ValueError("plant and controller dimensions do not match")
    if not plant.model.within_bounds(cfg.x0, tol=1e-12):
        raise InfeasibleInputError(f"x0 {cfg.x0} violates state bounds")

    x = cfg.x0.copy()
    states = [x.copy()]
    controls = []
    walls = []
    events: list[ViolationEvent] = []
    for t in range(cfg.T):
        t0 = time.perf_counter()
        res = controller.step(x)
        walls.append(time.perf_counter() - t0)
        if not res.feasible and cfg.record_violations:
            events.append(ViolationEvent(t, "controller_infeasible",
                                         float(max(res.objective, 0.0))))
        x = plant.step(x, res.w_star)
        controls.append(np.asarray(res.w_star, dtype=float).copy())
        states.append(x.copy())
        viol = _bound_violation(plant.model, x)
        if viol > 1e-8 and cfg.record_violations:
            events.append(ViolationEvent(t, "state_bounds", viol))

    states_arr = np.array(states)
    controls_arr = (np.array(controls) if controls
                    else np.zeros((0, m.n_w)))
    final, integrated = compute_metrics(states_arr, cfg.x_ref, plant.model.Ts)
    return SimResult(
        states=states_arr,
        controls=controls_arr,
        wall_times=np.array(walls) if cfg.record_wall_times else np.zeros(0),
        final_deviation_inf=final,
        integrated_squared_deviation=integrated,
        violations=tuple(events),
    )


def _expert_mixed_integer(ocp, x, warm, bnb_options, solve_options):
    from .controller import full_minmpc_step

    res = full_minmpc_step(ocp, x, opts=bnb_options, warm=warm,
                           solve_options=solve_options)
    if not res.feasible:
        return None, None, res.status
    return res.w_star, res, res.status


def _expert_relaxed(ocp, x, warm, solve_options):
    problem = build_full_ocp(ocp, x, validate_x_init=False)
    lay = problem.layout
    nu0 = lam0 = None
    if warm is not None:
        X, W = lay.split(warm[0])
        x0 = lay.join(np.vstack([X[1:], X[-1:]]), np.vstack([W[1:], W[-1:]]))
        nu0, lam0 = warm[1], warm[2]
    else:
        x0 = rollout_guess(problem)
    res = solve_nlp(problem, solve_options, x0=x0, nu0=nu0, lam0=lam0)
    if not res.optimal:
        return None, None, res.status
    _, W = lay.split(res.x)
    return W[0].copy(), (res.x, res.nu, res.lam), res.status


def generate_demonstrations(
    expert: str,
    ocp: OcpSpec,
    starts,
    steps: int,
    bnb_options: BnbOptions | None = None,
    solve_options: SolveOptions | None = None,
    out_dir=None,
) -> Dataset:
    """Roll the chosen expert against the nominal model and collect pairs.

    The mixed-integer expert accepts any search result carrying an
    incumbent (integral and feasible by construction); a step with no
    incumbent truncates the trajectory with a logged reason, as does a
    failed relaxed solve. Trajectories are closed loops from each start,
    warm started step to step.

    When ``out_dir`` is given, one CSV per trajectory plus a manifest
    JSON are written there; wall times are deliberately excluded so
    repeated runs produce identical bytes.
    """
    if expert not in (MIXED_INTEGER, RELAXED):
        raise ValueError(f"unknown expert kind '{expert}'")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    bnb_options = DEMO_BNB_OPTIONS if bnb_options is None else bnb_options
    solve_options = DEMO_SOLVE_OPTIONS if solve_options is None else solve_options
    model = ocp.model
    dmap = ocp.dmap

    trajectories = []
    for i, start in enumerate(starts):
        x = np.asarray(start, dtype=float)
        if not model.within_bounds(x, tol=1e-12):
            raise InfeasibleInputError(f"start {x} violates state bounds")
        rows = []
        warm = None
        for t in range(steps):
            if expert == MIXED_INTEGER:
                w, warm, status = _expert_mixed_integer(
                    ocp, x, warm, bnb_options, solve_options)
            else:
                w, warm, status = _expert_relaxed(ocp, x, warm, solve_options)
            if w is None:
                log.warning(
                    "trajectory %d truncated at step %d: expert returned %s",
                    i, t, status,
                )
                break
            rows.append((x.copy(), w))
            x = rk4_step(dmap, x, w)
        trajectories.append(rows)

    pairs = tuple(
        DemoPair(x=x, w_star=w, source=expert)
        for rows in trajectories for (x, w) in rows
    )
    data = Dataset(pairs=pairs, model=model, Q=ocp.Q, R=ocp.R,
                   x_ref=ocp.x_ref, w_ref=ocp.w_ref)
    if out_dir is not None:
        _write_demo_files(Path(out_dir), trajectories, ocp, expert)
    return data


def _csv_header(model: ModelSpec) -> list[str]:
    return (
        ["t"]
        + [f"x{i + 1}" for i in range(model.n_x)]
        + [f"u{i + 1}" for i in range(model.n_u)]
        + [f"z{i + 1}" for i in range(model.n_z)]
        + ["source"]
    )


def _write_demo_files(out_dir: Path, trajectories, ocp: OcpSpec, expert: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    model = ocp.model
    names = []
    for i, rows in enumerate(trajectories):
        name = f"trajectory_{i:02d}.csv"
        names.append(name)
        with open(out_dir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_csv_header(model))
            for t, (x, w) in enumerate(rows):
                writer.writerow(
                    [t]
                    + [repr(float(v)) for v in x]
                    + [repr(float(v)) for v in w]
                    + [expert]
                )
    manifest = {
        "model": model.name,
        "M": sum(len(rows) for rows in trajectories),
        "Q": np.asarray(ocp.Q).tolist(),
        "R": np.asarray(ocp.R).tolist(),
        "x_ref": np.asarray(ocp.x_ref).tolist(),
        "w_ref": np.asarray(ocp.w_ref).tolist(),
        "Ts": float(model.Ts),
        "expert": expert,
        "trajectories": names,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_demonstrations(path) -> Dataset:
    """Rebuild a dataset from a demonstration directory."""
    from .models import get_model

    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    model = get_model(manifest["model"])
    if float(model.Ts) != float(manifest["Ts"]):
        raise ValueError("manifest sample time does not match the model")
    n_x, n_w = model.n_x, model.n_w
    pairs = []
    for name in manifest["trajectories"]:
        with open(root / name, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != _csv_header(model):
                raise ValueError(f"unexpected column layout in {name}")
            for row in reader:
                x = np.array([float(v) for v in row[1:1 + n_x]])
                w = np.array([float(v) for v in row[1 + n_x:1 + n_x + n_w]])
                pairs.append(DemoPair(x=x, w_star=w, source=row[-1]))
    return Dataset(
        pairs=tuple(pairs),
        model=model,
        Q=np.asarray(manifest["Q"], dtype=float),
        R=np.asarray(manifest["R"], dtype=float),
        x_ref=np.asarray(manifest["x_ref"], dtype=float),
        w_ref=np.asarray(manifest["w_ref"], dtype=float),
    )
