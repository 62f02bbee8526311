#!/usr/bin/env python3
"""Satellite benchmark pipeline: demos, value-function fit, closed-loop runs.

Rolls the relaxed expert from three starts, fits the terminal weight,
then simulates the myopic controller and the no-value-function baseline
against the variable-thrust-efficiency plant. Everything lands under
--out, including the report table.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from mimpc.cli import main as cli  # noqa: E402

FULL = dict(horizon=12, steps=40, sim_steps=100)
QUICK = dict(horizon=4, steps=6, sim_steps=30)

CONFIG = """\
benchmark = "satellite"
out_dir = "{out}"

[ocp]
horizon = {horizon}

[demos]
steps = {steps}

[simulate]
steps = {sim_steps}
"""


def run(cmd: list[str]) -> None:
    print("$ mimpc " + " ".join(cmd))
    code = cli(cmd)
    if code != 0:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/satellite")
    ap.add_argument("--quick", action="store_true",
                    help="desk-scale sizes for a fast smoke run")
    ap.add_argument("--with-full", action="store_true",
                    help="also simulate the full-horizon controller (slow)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "run.toml"
    cfg.write_text(CONFIG.format(out=out, **(QUICK if args.quick else FULL)))

    demos = out / "demos"
    value_fn = out / "value_function.json"
    run(["demos", "--config", str(cfg), "--out", str(demos)])
    run(["learn", "--dataset", str(demos), "--config", str(cfg),
         "--out", str(value_fn)])

    kinds = ["myopic", "short-no-v"] + (["full"] if args.with_full else [])
    results = []
    for kind in kinds:
        dest = out / f"sim_{kind}"
        cmd = ["simulate", "--config", str(cfg), "--controller", kind,
               "--out", str(dest)]
        if kind == "myopic":
            cmd += ["--value-fn", str(value_fn)]
        run(cmd)
        results.append(str(dest / "result.json"))
    run(["report", *results, "--out", str(out / "report.csv")])


if __name__ == "__main__":
    main()
