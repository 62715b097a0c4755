"""Command line harness for the simulator and the inference pipeline.

Five subcommands: `simulate` records a seeded scenario trace, `infer` runs
the passive pipeline on a recorded trace (optionally re-running it live
with the excitation stage), `excite` drives the active stage end to end,
`sweep` writes the figure tables (fig4.csv .. fig7.csv), and `replay`
re-runs a previous command from its manifest and byte-compares the CSV
artifacts. Every failure exits with a stage-specific code so batch callers
can tell a steady-detection failure from a topology one.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import (
    OUTDIR_ENV,
    SCENARIO_BUILDERS,
    ExperimentConfig,
    StageError,
    infer_from_trace,
    run_session,
    run_sweep,
    scenario_from_trace,
    simulate_trace,
    write_estimate_csv,
    write_manifest,
    write_session_csv,
)
from .simulate import load_trace, save_trace, trace_to_csv

EXIT_STAGES = {
    "config": 2,
    "network": 3,
    "simulate": 4,
    "steady": 5,
    "excite": 6,
    "range": 7,
    "topology": 8,
    "io": 9,
    "replay": 10,
}

_CONFIG_FIELDS = (
    "network", "scenario", "sigma", "sigma_grid", "ks_grid", "trials", "seed",
    "epsilon_factor", "window_len", "concentration_len", "m_excite", "ks",
    "rc_hat", "rc_upper", "horizon", "outdir",
)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--network", help="network file to study (default: bundled)")
    parser.add_argument(
        "--scenario",
        choices=sorted(SCENARIO_BUILDERS),
        help="named setup to run when no network file is given",
    )
    parser.add_argument("--sigma", type=float, help="reading noise level")
    parser.add_argument(
        "--sigma-grid", type=float, nargs="+", dest="sigma_grid",
        help="noise levels swept by the figure tables",
    )
    parser.add_argument(
        "--ks-grid", type=int, nargs="+", dest="ks_grid",
        help="observation-window lengths swept by the figure tables",
    )
    parser.add_argument("--trials", type=int, help="trials per grid point")
    parser.add_argument("--seed", type=int, help="base seed")
    parser.add_argument(
        "--epsilon-factor", type=float, dest="epsilon_factor",
        help="steadiness margin as a multiple of sigma",
    )
    parser.add_argument(
        "--window-len", type=int, dest="window_len",
        help="steady-detection window length",
    )
    parser.add_argument(
        "--concentration-len", type=int, dest="concentration_len",
        help="speed-estimate window length for the fig4 table",
    )
    parser.add_argument("--m", type=int, dest="m_excite", help="excitation steps")
    parser.add_argument("--ks", type=int, help="regression window override")
    parser.add_argument(
        "--rc-hat", type=float, dest="rc_hat",
        help="assumed interaction range (skips the range search)",
    )
    parser.add_argument(
        "--rc-upper", type=float, dest="rc_upper",
        help="known-safe interaction range upper bound",
    )
    parser.add_argument("--horizon", type=int, help="passive simulation steps")
    parser.add_argument(
        "--outdir", help=f"output directory (default: ${OUTDIR_ENV} or .)"
    )


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    fields = {}
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = tuple(value) if isinstance(value, list) else value
    try:
        return ExperimentConfig(**fields)
    except ValueError as exc:
        raise StageError("config", str(exc)) from exc


def _prepare_outdir(config: ExperimentConfig, outdir: Path | None) -> Path:
    out = Path(outdir) if outdir is not None else config.resolve_outdir()
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# command bodies (shared by the subcommands and replay)


def _do_simulate(config: ExperimentConfig, outdir: Path) -> list[str]:
    scenario = config.build_scenario()
    trace, _ = simulate_trace(scenario, config.seed)
    save_trace(trace, outdir / "trace.npz")
    trace_to_csv(trace, outdir / "trace.csv")
    write_manifest(
        outdir / "manifest.json",
        "simulate",
        config,
        {"trace": "trace.npz", "horizon": trace.horizon, "n": trace.spec.n},
        ["trace.csv"],
    )
    return ["trace.csv"]


def _do_infer(
    config: ExperimentConfig, outdir: Path, trace_path: str, excite: bool
) -> list[str]:
    try:
        trace = load_trace(trace_path)
    except FileNotFoundError as exc:
        raise StageError("io", f"trace not found: {trace_path}") from exc
    except (ValueError, OSError) as exc:
        raise StageError("io", f"unreadable trace {trace_path}: {exc}") from exc
    if excite:
        scenario, seed = scenario_from_trace(trace)
        result, _ = run_session(
            scenario, seed, excite=True, rc_hat=config.rc_hat, k_reg=config.ks
        )
    else:
        result = infer_from_trace(
            trace,
            window_len=config.window_len,
            sigma=config.sigma,
            rc_hat=config.rc_hat,
            rc_upper=config.rc_upper,
            k_reg=config.ks,
        )
    write_estimate_csv(
        outdir / "estimate.csv", result.w_hat, result.v_h0, result.members
    )
    write_estimate_csv(
        outdir / "refined.csv", result.w_refined, result.v_h, result.members
    )
    write_manifest(
        outdir / "manifest.json",
        "infer",
        config,
        {
            "trace": str(Path(trace_path).resolve()),
            "excite": bool(excite),
            "result": result.manifest(),
        },
        ["estimate.csv", "refined.csv"],
    )
    return ["estimate.csv", "refined.csv"]


def _do_excite(config: ExperimentConfig, outdir: Path) -> list[str]:
    scenario = config.build_scenario()
    result, sim = run_session(
        scenario, config.seed, excite=True, fit_topology=False
    )
    write_session_csv(outdir / "session.csv", result.session)
    trace_to_csv(sim.trace(), outdir / "trace.csv")
    write_manifest(
        outdir / "manifest.json",
        "excite",
        config,
        {"result": result.manifest()},
        ["session.csv", "trace.csv"],
    )
    return ["session.csv", "trace.csv"]


def _do_sweep(config: ExperimentConfig, outdir: Path) -> list[str]:
    counts = run_sweep(config, outdir)
    artifacts = sorted(counts)
    write_manifest(
        outdir / "manifest.json", "sweep", config, {"rows": counts}, artifacts
    )
    return artifacts


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    outdir = _prepare_outdir(config, None)
    artifacts = _do_simulate(config, outdir)
    print(f"wrote {', '.join(artifacts)} and trace.npz in {outdir}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    outdir = _prepare_outdir(config, None)
    artifacts = _do_infer(config, outdir, args.trace, args.excite)
    manifest = json.loads((outdir / "manifest.json").read_text())
    summary = manifest["result"]
    print(
        f"rc_hat {summary['rc_hat']:.3f}, rows {summary['v_h0']}, "
        f"error {summary['errors'].get('range_shrink', float('nan')):.4g}; "
        f"wrote {', '.join(artifacts)} in {outdir}"
    )
    return 0


def cmd_excite(args: argparse.Namespace) -> int:
    if getattr(args, "scenario", None) is None and getattr(args, "network", None) is None:
        args.scenario = "excitation"
    config = _config_from_args(args)
    outdir = _prepare_outdir(config, None)
    artifacts = _do_excite(config, outdir)
    manifest = json.loads((outdir / "manifest.json").read_text())
    exc = manifest["result"]["excitation"]
    print(
        f"target {exc['target']}, k_excite {exc['k_excite']}, "
        f"rc_lower {exc['rc_lower']:.3f}, indicators {exc['indicators']}; "
        f"wrote {', '.join(artifacts)} in {outdir}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    outdir = _prepare_outdir(config, None)
    artifacts = _do_sweep(config, outdir)
    manifest = json.loads((outdir / "manifest.json").read_text())
    rows = manifest["rows"]
    print(
        "; ".join(f"{name}: {rows[name]} rows" for name in artifacts)
        + f"; wrote manifest.json in {outdir}"
    )
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    src = Path(args.directory)
    manifest_path = src / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise StageError("replay", f"no manifest at {manifest_path}") from exc
    except (ValueError, OSError) as exc:
        raise StageError("replay", f"unreadable manifest: {exc}") from exc
    stored = {
        key: tuple(value) if isinstance(value, list) else value
        for key, value in manifest.get("config", {}).items()
        if value is not None
    }
    stored.pop("outdir", None)
    try:
        config = ExperimentConfig(**stored)
    except (TypeError, ValueError) as exc:
        raise StageError("config", f"manifest config invalid: {exc}") from exc
    redo = src / "replay"
    redo.mkdir(parents=True, exist_ok=True)
    command = manifest.get("command")
    if command == "simulate":
        _do_simulate(config, redo)
    elif command == "infer":
        _do_infer(config, redo, manifest["trace"], bool(manifest.get("excite")))
    elif command == "excite":
        _do_excite(config, redo)
    elif command == "sweep":
        _do_sweep(config, redo)
    else:
        raise StageError("replay", f"manifest names unknown command {command!r}")
    mismatched = []
    for name in manifest.get("artifacts", []):
        original, again = src / name, redo / name
        if not again.exists() or original.read_bytes() != again.read_bytes():
            mismatched.append(name)
    if mismatched:
        print(
            f"replay mismatch in {', '.join(mismatched)} (see {redo})",
            file=sys.stderr,
        )
        return EXIT_STAGES["replay"]
    n = len(manifest.get("artifacts", []))
    print(f"replay clean: {n} artifact file(s) byte-identical")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmtopo",
        description="Formation simulator and local topology inference harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="record a seeded scenario trace")
    _add_config_args(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_inf = sub.add_parser("infer", help="run the pipeline on a recorded trace")
    p_inf.add_argument("trace", help="path to a trace.npz")
    p_inf.add_argument(
        "--excite", action="store_true",
        help="re-run the trace's scenario live with the excitation stage",
    )
    _add_config_args(p_inf)
    p_inf.set_defaults(func=cmd_infer)

    p_exc = sub.add_parser("excite", help="drive the active excitation stage")
    _add_config_args(p_exc)
    p_exc.set_defaults(func=cmd_excite)

    p_swp = sub.add_parser("sweep", help="write the figure tables fig4..fig7")
    _add_config_args(p_swp)
    p_swp.set_defaults(func=cmd_sweep)

    p_rep = sub.add_parser(
        "replay", help="re-run a command from its manifest and compare bytes"
    )
    p_rep.add_argument("directory", help="output directory of a previous command")
    p_rep.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"swarmtopo: {exc}", file=sys.stderr)
        return EXIT_STAGES.get(exc.stage, 1)


if __name__ == "__main__":
    sys.exit(main())
