"""Command-line front end.

Subcommands: ``simulate``, ``design``, ``certify``, ``sweep`` and ``presets``.
Exit status: 0 success, 2 configuration error, 3 run error (the converter
left continuous conduction or a design was infeasible), 4 certificate failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .certify import (
    boost_gas_certificate,
    buck_gas_certificate,
    check_discrete_stability,
    overshoot_bound,
    sector_bounds,
    settling_time_bound,
)
from .controller import closed_loop_poles
from .config import PRESETS, ScenarioConfig, dump_config, load_config, preset_config
from .converter import Topology, Trace, find_equilibrium
from .errors import ConfigError, FivessError
from .runner import bound_suite, controller_for, run_scenario, run_sweep, table_for, trace_stats

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_CERTIFICATE = 4
OUT_DIR_ENV = "FIVESS_OUT_DIR"
CSV_HEADER = ("t_s", "v_V", "iL_A", "switch_state", "cycle")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def format_trace_rows(trace: Trace) -> list[str]:
    """CSV data lines with 12 significant digits."""
    return [
        f"{t:.12g},{v:.12g},{i:.12g},{int(s)},{int(c)}"
        for t, v, i, s, c in zip(trace.t, trace.v, trace.i_L, trace.switch_state, trace.cycle)
    ]


def read_trace_csv(path) -> dict[str, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="ascii")
    return {name: np.asarray(data[name]) for name in data.dtype.names}


def write_trace_csv(trace: Trace, path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Write the dense trace; returns (t, v) exactly as written."""
    rows = format_trace_rows(trace)
    path.write_text(",".join(CSV_HEADER) + "\n" + "".join(r + "\n" for r in rows))
    t = np.array([float(r.split(",", 1)[0]) for r in rows])
    v = np.array([float(r.split(",", 2)[1]) for r in rows])
    return t, v


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load(args) -> ScenarioConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        cfg = preset_config(args.preset)
    else:
        raise ConfigError("a scenario is required: use --config FILE or --preset NAME")
    if args.seed is not None:
        tree = cfg.to_dict()
        tree["seed"] = args.seed
        cfg = ScenarioConfig(tree, cfg.params, cfg.source)
    return cfg


def _provenance(cfg: ScenarioConfig) -> dict:
    return {"version": __version__, "config_hash": cfg.config_hash(), "source": cfg.source}


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def cmd_simulate(cfg: ScenarioConfig, out: Path, threads: int = 1) -> int:
    result = run_scenario(cfg)
    tr = result.trace
    t, v = write_trace_csv(tr, out / cfg.outputs["csv"])
    sc = cfg.scenario
    v_ref = float(sc.get("v_to", sc["v_from"]))
    summary = {
        "provenance": _provenance(cfg),
        "scenario": sc["type"],
        "termination": tr.termination.value,
        "message": tr.message,
        "cycles": len(tr.records),
        "transitions": [
            {"v_from": x.v_from, "v_to": x.v_to, "start_cycle": x.start_cycle, **asdict(x.metrics)}
            for x in result.transitions
        ],
        "controllers": result.controllers,
        "switches": result.switches,
        "extra": result.extra,
        "trace_stats": trace_stats(t, v, v_ref),
    }
    _write_json(out / cfg.outputs["summary"], summary)
    print(f"{sc['type']}: {len(tr.records)} cycles, termination {tr.termination.value}")
    for x in result.transitions:
        m = x.metrics
        print(
            f"  {x.v_from:g} -> {x.v_to:g} V: rise {m.rise_time_10_90 * 1e6:.3f} us, "
            f"overshoot {100 * m.sigma_t_v:.2f} %, N_t {m.N_t}, settled {m.settled}"
        )
    if "max_deviation_V" in result.extra:
        print(f"  max deviation {result.extra['max_deviation_V']:.4f} V")
    return EXIT_OK if result.ok else EXIT_RUN


def _design_target(cfg: ScenarioConfig) -> float:
    sc = cfg.scenario
    return float(sc.get("v_to", sc["v_from"]))


def cmd_design(cfg: ScenarioConfig, out: Path, threads: int = 1) -> int:
    sc = cfg.scenario
    if sc["type"] == "staircase":
        table = table_for(cfg.params, sc["voltages"], float(sc["region_radius"]), cfg.controller)
        rows = [(e.voltage, e.controller, e.plant) for e in table.entries]
    else:
        v = _design_target(cfg)
        ctrl, plant = controller_for(cfg.params, v, cfg.controller)
        rows = [(v, ctrl, plant)]
    doc = {"provenance": _provenance(cfg), "designs": []}
    for v, ctrl, plant in rows:
        rep = check_discrete_stability(plant, ctrl)
        print(f"{v:g} V: k = {ctrl.k:.6g}, z_k = {ctrl.z_k:.6g}, p_k = {ctrl.p_k:g}  (plant a1 {plant.a1:.6g}, "
              f"b1 {plant.b1:.6g}, g1 {plant.g1:.6g})")
        for i, (z, r) in enumerate(sorted(((z, abs(z)) for z in closed_loop_poles(plant, ctrl)), key=lambda p: -p[1])):
            print(f"    pole {i}: {z.real:+.6f} {z.imag:+.6f}j  |z| = {r:.6f}")
        doc["designs"].append({
            "v_op": v, "k": ctrl.k, "z_k": ctrl.z_k, "p_k": ctrl.p_k,
            "plant": {"a1": plant.a1, "b1": plant.b1, "g1": plant.g1},
            "poles": [[z.real, z.imag] for z in closed_loop_poles(plant, ctrl)],
            "max_radius": rep.max_radius, "stable": rep.stable,
        })
    _write_json(out / "design.json", doc)
    return EXIT_OK


def cmd_certify(cfg: ScenarioConfig, out: Path, threads: int = 1) -> int:
    params, cc = cfg.params, cfg.certify
    results: dict = {"provenance": _provenance(cfg)}
    ok = True

    v = _design_target(cfg)
    ctrl, plant = controller_for(params, v, cfg.controller)
    rep = check_discrete_stability(plant, ctrl)
    results["discrete_stability"] = {"stable": rep.stable, "max_radius": rep.max_radius}
    ok &= rep.stable
    print(f"discrete stability at {v:g} V: {'PASS' if rep.stable else 'FAIL'} (max |z| = {rep.max_radius:.6f})")

    if cc["g_ab"] is not None and cc["controlled_min"] is not None and cc["controlled_max"] is not None:
        if params.topology is Topology.BOOST:
            cert = boost_gas_certificate(params, cc["g_ab"], params.lam, cc["controlled_min"], cc["controlled_max"],
                                         cfg.v_out)
        else:
            cert = buck_gas_certificate(params, cc["g_ab"], cc["controlled_min"], cc["controlled_max"], cfg.v_out)
        results["gas_certificate"] = asdict(cert)
        ok &= cert.stable
        print(f"large-signal certificate: {'PASS' if cert.stable else 'FAIL'} "
              f"(branch {cert.case_branch}, margins {cert.margins})")

    if None not in (cc["f_ub"], cc["A_ub"], cc["G0"]):
        try:
            sb = sector_bounds(cc["f_ub"], cc["A_ub"], cc["G0"])
            results["sector_bounds"] = asdict(sb)
            print(f"sector bounds: K_lb = {sb.K_lb:.6g}, K_ub = {sb.K_ub:.6g}")
        except FivessError as exc:
            results["sector_bounds"] = {"error": str(exc)}
            ok = False
            print(f"sector bounds: FAIL ({exc})")

    if params.topology is Topology.BOOST:
        sim = run_scenario(cfg)
        checks = []
        for x in sim.transitions:
            if x.v_to <= x.v_from:
                continue
            e1, e2 = find_equilibrium(params, x.v_from), find_equilibrium(params, x.v_to)
            b2, h2 = settling_time_bound(x.metrics, params, x.v_from, x.v_to, e1.command, e2.command)
            b3, h3 = overshoot_bound(x.metrics, params)
            h2 = h2 and x.metrics.settled
            checks.append({"v_from": x.v_from, "v_to": x.v_to, "T_t": x.metrics.T_t, "settling_bound": b2,
                           "settling_holds": h2, "sigma_t_v": x.metrics.sigma_t_v, "overshoot_bound": b3,
                           "overshoot_holds": h3})
            ok &= h2 and h3
            print(f"  {x.v_from:g} -> {x.v_to:g} V: settling bound {'PASS' if h2 else 'FAIL'}, "
                  f"overshoot bound {'PASS' if h3 else 'FAIL'}")
        results["scenario_bounds"] = checks
        if cc["bound_runs"] > 0:
            suite = bound_suite(params, v, cc["bound_runs"], seed=cfg.seed, max_step=cc["bound_max_step"])
            n2 = sum(c.settling_holds for c in suite)
            n3 = sum(c.overshoot_holds for c in suite)
            results["bound_suite"] = {"runs": len(suite), "settling_holds": n2, "overshoot_holds": n3}
            ok &= n2 == len(suite) and n3 == len(suite)
            print(f"randomised bound suite: settling {n2}/{len(suite)}, overshoot {n3}/{len(suite)}")

    results["ok"] = bool(ok)
    _write_json(out / "certificate.json", results)
    return EXIT_OK if ok else EXIT_CERTIFICATE


def cmd_sweep(cfg: ScenarioConfig, out: Path, threads: int = 1) -> int:
    v = float(cfg.scenario["v_from"])
    ctrl, _ = controller_for(cfg.params, v, cfg.controller)
    rows = run_sweep(cfg.params, ctrl, v, cfg.sweep["steps"], int(cfg.sweep["cycles"]), threads)
    lines = ["step_V,e_w_percent"] + [f"{r['step_V']:.12g},{r['e_w_percent']:.12g}" for r in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "sweep.json", {"provenance": _provenance(cfg), "v_op": v, "k": ctrl.k, "z_k": ctrl.z_k,
                                     "points": rows})
    for r in rows:
        print(f"step {r['step_V']:g} V: e_w = {r['e_w_percent']:.4f} %  ({r['termination']})")
    return EXIT_OK if all(math.isfinite(r["e_w_percent"]) for r in rows) else EXIT_RUN


def cmd_presets(args) -> int:
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        sys.stdout.write(dump_config(preset_config(args.preset)))
    else:
        for name in sorted(PRESETS):
            print(name)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "design": cmd_design, "certify": cmd_certify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fivess", description="Switching-synchronized converter models and control.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "design", "certify", "sweep", "presets"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML scenario file")
        p.add_argument("--preset", help="built-in scenario name")
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or .)")
        p.add_argument("--seed", type=int, help="seed for randomised suites")
        p.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            return cmd_presets(args)
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, _out_dir(args), max(1, args.threads))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FivessError as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
