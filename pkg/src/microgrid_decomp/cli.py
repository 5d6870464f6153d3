"""Command line: generate instances, solve them, simulate policies, compare runs.

    microgrid-decomp generate --family 12 --seed 0 --out inst.json
    microgrid-decomp solve --instance inst.json --algo dadp --out runs/dadp
    microgrid-decomp simulate --run runs/dadp --scenarios 5000
    microgrid-decomp report runs/dadp runs/padp runs/sddp

Every run directory holds the exact configuration and a copy of the
instance, so it can be simulated or reported on without other inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .coordination import CoordinationOptions, CoordinationResult, dadp_run, padp_run
from .instance import FAMILIES, Instance, InstanceError, NodeGrids, dumps, generate, load, make_grids
from .nodal_dp import ControlGrid, NodalInfeasibility, StateGrid, TabularValueFunction
from .policy import GlobalValueStack, simulate_policy
from .sddp import Cut, CutPool, SddpError, SddpOptions, sddp_run

log = logging.getLogger("microgrid_decomp")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFINITE_BOUND = 3

INSTANCE_COPY = "instance.json"
CONFIG = "config.json"
SUMMARY = "summary.json"
TRACE = "trace.csv"
VALUES = "values.npz"
SIM_CSV = "simulation.csv"
SIM_SUMMARY = "simulation.json"


def _num(v):
    """JSON-safe float: infinities and NaN become strings."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _from_num(v):
    if v is None:
        return None
    return float(v)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# --- generate ------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.family is not None:
        family = args.family
    elif args.nodes is not None and args.edges is not None:
        family = (args.nodes, args.edges)
    else:
        raise InstanceError("give --family, or both --nodes and --edges")
    inst = generate(family, args.seed, horizon=args.horizon)
    text = dumps(inst)
    if args.out:
        Path(args.out).write_text(text)
        log.info("wrote %s: %d nodes, %d edges, state dim %d", args.out, inst.num_nodes, inst.num_edges, inst.state_dim)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- solve ---------------------------------------------------------------------


def _save_tables(path: Path, result: CoordinationResult, grids: list[NodeGrids]) -> None:
    arrays = {"coordination": result.coordination}
    if result.edge_stage_values is not None:
        arrays["edge_stage_values"] = result.edge_stage_values
    for i, (vfs, g) in enumerate(zip(result.value_functions, grids)):
        for k, axis in enumerate(g.state.axes):
            arrays[f"node{i}_axis{k}"] = axis
        arrays[f"node{i}_values"] = np.stack([vf.values for vf in vfs])
        arrays[f"node{i}_heating"] = g.controls.heating
        if g.controls.battery is not None:
            arrays[f"node{i}_battery"] = np.asarray(g.controls.battery)
    np.savez(path, kind=np.array(result.kind), **arrays)


def _save_cuts(path: Path, pools) -> None:
    arrays = {}
    for t, pool in enumerate(pools):
        if pool is None:
            continue
        arrays[f"stage{t}_intercepts"] = np.array([c.intercept for c in pool.cuts])
        arrays[f"stage{t}_slopes"] = np.stack([c.slope for c in pool.cuts])
        arrays[f"stage{t}_generations"] = np.array([c.generation for c in pool.cuts])
    np.savez(path, kind=np.array("sddp"), num_stages=np.array(len(pools)), **arrays)


def load_stack(path, instance: Instance) -> tuple[GlobalValueStack, list[NodeGrids] | None]:
    """Rebuild a value stack (and nodal grids, if any) from a run's ``values.npz``."""
    with np.load(path) as data:
        kind = str(data["kind"])
        if kind == "sddp":
            n = int(data["num_stages"])
            pools: list = [None] * n
            for t in range(n):
                key = f"stage{t}_intercepts"
                if key not in data:
                    continue
                pool = CutPool(t)
                for c, g, gen in zip(data[key], data[f"stage{t}_slopes"], data[f"stage{t}_generations"]):
                    if len(g) != instance.state_dim:
                        raise InstanceError("cut dimension does not match the instance state")
                    pool.cuts.append(Cut(float(c), g, t, int(gen)))
                pools[t] = pool
            if n != instance.horizon + 1:
                raise InstanceError("cut stack horizon does not match the instance")
            return GlobalValueStack("sddp", pools=pools), None
        tables, grids = [], []
        for i, node in enumerate(instance.nodes):
            axes = tuple(data[f"node{i}_axis{k}"] for k in range(node.state_dim))
            values = data[f"node{i}_values"]
            if values.shape[0] != instance.horizon + 1:
                raise InstanceError("value tables do not match the instance horizon")
            grid = StateGrid(axes)
            battery = data[f"node{i}_battery"] if f"node{i}_battery" in data else None
            grids.append(NodeGrids(grid, ControlGrid(battery, data[f"node{i}_heating"])))
            tables.append([TabularValueFunction(grid, v, t) for t, v in enumerate(values)])
        edge = data["edge_stage_values"] if "edge_stage_values" in data else None
        return GlobalValueStack(kind, tables=tables, edge_stage_values=edge), grids


def _coordination_summary(res: CoordinationResult) -> dict:
    return {
        "bound": _num(res.bound),
        "iterations": res.iterations,
        "stop_reason": res.stop_reason,
        "node_values": [_num(v) for v in res.node_values],
        "edge_value": _num(res.edge_value),
        "bound_trace": [_num(r.bound) for r in res.trace],
    }


def cmd_solve(args) -> int:
    inst_text = Path(args.instance).read_text()
    inst = load(args.instance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / INSTANCE_COPY).write_text(inst_text)
    config = {
        "version": __version__,
        "algo": args.algo,
        "instance": str(args.instance),
        "instance_sha256": _sha256(inst_text),
        "seed": args.seed,
        "grid_points": args.grid_points,
        "control_points": args.control_points,
        "max_iters": args.max_iters,
        "mc_samples": args.mc_samples,
        "resample_k": args.resample_k,
        "ub_scenarios": args.ub_scenarios,
        "gap_tol": args.gap_tol,
    }
    _write_json(out / CONFIG, config)
    summary = {"algo": args.algo, "instance_sha256": config["instance_sha256"], "seed": args.seed}
    status = EXIT_OK
    if args.algo == "sddp":
        opts = SddpOptions(
            resample_k=args.resample_k,
            max_iters=args.max_iters if args.max_iters is not None else SddpOptions.max_iters,
            gap_tol=args.gap_tol,
            ub_scenarios=args.ub_scenarios,
            seed=args.seed,
        )
        res = sddp_run(inst, opts)
        res.write_trace(out / TRACE)
        _save_cuts(out / VALUES, res.pools)
        last_ub = res.ub_trace[-1] if res.ub_trace else None
        summary.update(
            lower_bound=_num(res.lower_bound),
            upper_bound=_num(last_ub[1]) if last_ub else None,
            upper_half_width=_num(last_ub[2]) if last_ub else None,
            iterations=res.iterations,
            stop_reason=res.stop_reason,
            lower_bound_trace=[_num(v) for v in res.lb_trace],
        )
    else:
        grids = make_grids(inst, args.grid_points, args.control_points)
        opts = CoordinationOptions(
            max_iters=args.max_iters if args.max_iters is not None else CoordinationOptions.max_iters,
            mc_samples=args.mc_samples,
            seed=args.seed,
        )
        run = dadp_run if args.algo == "dadp" else padp_run
        res = run(inst, opts, grids=grids)
        res.write_trace(out / TRACE)
        _save_tables(out / VALUES, res, grids)
        np.savetxt(out / "coordination.csv", res.coordination, delimiter=",", fmt="%.17g")
        summary.update(_coordination_summary(res))
        key = "lower_bound" if args.algo == "dadp" else "upper_bound"
        summary[key] = _num(res.bound)
        if not math.isfinite(res.bound):
            log.error("%s bound is not finite: no admissible coordination process found", args.algo)
            status = EXIT_INFINITE_BOUND
    _write_json(out / SUMMARY, summary)
    print(_bound_line(summary))
    return status


def _bound_line(summary: dict) -> str:
    parts = [summary["algo"]]
    for key in ("lower_bound", "upper_bound"):
        if summary.get(key) is not None:
            parts.append(f"{key.replace('_', ' ')} {summary[key]}")
    return ": ".join([parts[0], ", ".join(parts[1:])])


# --- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    run = Path(args.run)
    inst_path = Path(args.instance) if args.instance else run / INSTANCE_COPY
    inst = load(inst_path)
    if not (run / VALUES).exists():
        raise InstanceError(f"{run} has no {VALUES}; run solve first")
    stack, grids = load_stack(run / VALUES, inst)
    report = simulate_policy(inst, stack, args.scenarios, args.seed, grids=grids)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / SIM_CSV)
    _write_json(
        out / SIM_SUMMARY,
        {
            "kind": report.kind,
            "scenarios": args.scenarios,
            "seed": args.seed,
            "mean": _num(report.mean),
            "half_width": _num(report.half_width),
            "flagged": report.flagged,
            "instance_sha256": _sha256(inst_path.read_text()),
        },
    )
    print(report.summary())
    return EXIT_OK if report.flagged < report.n else EXIT_ERROR


# --- report ---------------------------------------------------------------------


def _read(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    return f"{v:.6f}"


def build_report(run_dirs) -> tuple[str, bool]:
    """Comparison table over run directories; second value is False on a sandwich violation."""
    rows, lowers, uppers, shas = [], [], [], set()
    for d in run_dirs:
        d = Path(d)
        summary = _read(d / SUMMARY)
        sim = _read(d / SIM_SUMMARY)
        if summary is None:
            rows.append([str(d), "missing", "-", "-", "-"])
            continue
        shas.add(summary.get("instance_sha256"))
        lb, ub = summary.get("lower_bound"), summary.get("upper_bound")
        if summary["algo"] == "sddp":
            # the statistical estimate is not a bound; only the cut bound is
            ub = None
        if lb is not None:
            lowers.append(_from_num(lb))
        if ub is not None:
            uppers.append(_from_num(ub))
        policy = None if sim is None else f"{_fmt(_from_num(sim['mean']))} +- {_fmt(_from_num(sim['half_width']))}"
        rows.append([str(d), summary["algo"], _fmt(_from_num(lb) if lb is not None else None), _fmt(_from_num(ub) if ub is not None else None), policy or "-"])
    header = ["run", "algo", "lower", "upper", "policy"]
    widths = [max(len(str(r[k])) for r in rows + [header]) for k in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in [header] + rows]
    ok = True
    if lowers and uppers:
        lo, hi = max(lowers), min(uppers)
        gap = (hi - lo) / abs(hi) * 100 if math.isfinite(hi) and hi != 0 else math.inf
        ok = lo <= hi + 1e-6 * max(1.0, abs(lo))
        lines.append(f"best lower {lo:.6f}  best upper {hi:.6f}  gap {gap:.2f}%")
        lines.append("lower <= upper: " + ("ok" if ok else "VIOLATED"))
    else:
        lines.append("gap: - (need both a lower and an upper bound)")
    if len(shas) > 1:
        lines.append("warning: runs are on different instances")
    return "\n".join(lines), ok


def cmd_report(args) -> int:
    table, ok = build_report(args.runs)
    print(table)
    return EXIT_OK if ok else EXIT_ERROR


# --- entry point ----------------------------------------------------------------


def _family(text: str) -> str:
    name = text if text.endswith("-nodes") else f"{text}-nodes"
    if name not in FAMILIES:
        raise argparse.ArgumentTypeError(f"unknown family {text!r}")
    return name


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microgrid-decomp", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic instance")
    g.add_argument(
        "--family",
        type=_family,
        help=f"standard family: {', '.join(sorted(FAMILIES, key=lambda k: FAMILIES[k]))} (or just the node count)",
    )
    g.add_argument("--nodes", type=int, help="custom node count")
    g.add_argument("--edges", type=int, help="custom edge count")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--horizon", type=int, default=96)
    g.add_argument("--out", help="output file (stdout if omitted)")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run DADP, PADP or SDDP on an instance")
    s.add_argument("--instance", required=True)
    s.add_argument("--algo", required=True, choices=["sddp", "dadp", "padp"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--grid-points", type=int, default=51, help="state grid points per axis")
    s.add_argument("--control-points", type=int, default=21, help="control grid points per axis")
    s.add_argument("--max-iters", type=int, help="iteration cap (default 100 for dadp/padp, 2000 for sddp)")
    s.add_argument("--mc-samples", type=int, default=1000, help="Monte Carlo samples of the price gradient")
    s.add_argument("--resample-k", type=int, default=100, help="SDDP atoms per stage")
    s.add_argument("--ub-scenarios", type=int, default=1000, help="SDDP upper bound scenarios")
    s.add_argument("--gap-tol", type=float, default=0.01, help="SDDP relative gap at which to stop")
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="evaluate the policy of a solved run")
    m.add_argument("--run", required=True, help="run directory written by solve")
    m.add_argument("--instance", help="instance file (default: the run's copy)")
    m.add_argument("--scenarios", type=int, default=5000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", help="output directory (default: the run directory)")
    m.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="compare bounds and policy values across runs")
    r.add_argument("runs", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InstanceError, SddpError, NodalInfeasibility, OSError, ValueError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
