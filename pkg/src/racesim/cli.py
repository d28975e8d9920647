"""Command-line front end.

Exit codes: 0 clean run, 2 collision/off-track verdict (or a failed sweep),
1 configuration or input errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .scenario import ConfigError, load_scenario, read_scenario_doc, apply_override
from .sim import cycle_latency_report, output_paths, run_scenario, write_latency_csv
from .sweep import SweepSpec, default_ranges, default_speeds, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_VERDICT = 0, 1, 2


def _err(msg: str) -> None:
    print(f"racesim: {msg}", file=sys.stderr)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out-dir", type=Path, default=Path("out"), help="artifact directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. perception.detection_range_m=120")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="racesim", parents=[common],
                                     description="Multi-vehicle racing simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run a scenario and write its log")
    p.add_argument("scenario", type=Path)

    p = sub.add_parser("evasion-sweep", parents=[common],
                       help="minimum detection range per speed for a parked-car scenario")
    p.add_argument("scenario", type=Path)
    p.add_argument("--speeds-kph", type=float, nargs="+", default=None)
    p.add_argument("--ranges-m", type=float, nargs="+", default=None,
                   help="descending candidate ranges (default 300..10 step 5)")
    p.add_argument("--resolution-m", type=float, default=1.0)
    p.add_argument("--with-delay", action="store_true",
                   help="simulate the processing delay instead of reporting it as a column")
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("latency", parents=[common], help="per-stage compute latency report")
    p.add_argument("scenario", type=Path)

    p = sub.add_parser("plot", parents=[common], help="render a sweep or log CSV as SVG")
    p.add_argument("csv", type=Path)
    p.add_argument("--kind", choices=("auto", "sweep", "trajectory"), default="auto")
    p.add_argument("--track", type=Path, default=None,
                   help="track file for corridor lines (default: from the run metadata)")
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("validate-config", parents=[common], help="load and check a scenario")
    p.add_argument("scenario", type=Path)
    return parser


# -- commands ---------------------------------------------------------------


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario, args.overrides, args.seed)
    log = run_scenario(sc)
    csv_path, meta_path = output_paths(args.out_dir, sc.name)
    log.write_csv(csv_path)
    log.write_metadata(meta_path)
    print(f"{sc.name}: {log.verdict} at t={log.t_end:.2f} s ({log.wall_time:.1f} s wall) -> {csv_path}")
    if not log.clean:
        _err(f"{log.verdict}: {log.verdict_detail}")
        return EXIT_VERDICT
    return EXIT_OK


def cmd_evasion_sweep(args) -> int:
    doc = read_scenario_doc(args.scenario)
    for o in args.overrides:
        apply_override(doc, o)
    if args.seed is not None:
        doc["seed"] = args.seed
    speeds = (tuple(k / 3.6 for k in args.speeds_kph) if args.speeds_kph else default_speeds())
    ranges = tuple(args.ranges_m) if args.ranges_m else default_ranges()
    spec = SweepSpec(speeds, ranges, resolution=args.resolution_m, with_delay=args.with_delay)
    result = run_sweep(doc, args.scenario.resolve().parent, spec, args.jobs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "evasion_sweep.csv")
    result.write_trials_csv(out / "evasion_trials.csv")
    missing = 0
    for r in result.rows:
        if r.min_detection is None:
            missing += 1
            _err(f"no tested range succeeded at {r.speed * 3.6:.0f} kph")
            continue
        print(f"{r.speed * 3.6:6.1f} kph  min detection {r.min_detection:6.1f} m  "
              f"braking {r.brake_distance:6.1f} m  with delay {r.delay_adjusted:6.1f} m")
    return EXIT_VERDICT if missing else EXIT_OK


def cmd_latency(args) -> int:
    sc = load_scenario(args.scenario, args.overrides, args.seed)
    log = run_scenario(sc, timing=True)
    report = cycle_latency_report(log)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{sc.name}_latency.csv"
    write_latency_csv(report, path)
    for name, st in report["stages"].items():
        print(f"{name:11s} n={st['count']:5d}  p50 {st['p50'] * 1e3:8.2f} ms  "
              f"p99 {st['p99'] * 1e3:8.2f} ms  max {st['max'] * 1e3:8.2f} ms")
    if not log.clean:
        _err(f"{log.verdict}: {log.verdict_detail}")
        return EXIT_VERDICT
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario, args.overrides, args.seed)
    print(f"{sc.name}: ok ({len(sc.agents)} agents, track {sc.track.total_length:.0f} m, "
          f"config {sc.config_hash})")
    return EXIT_OK


# -- plotting ---------------------------------------------------------------

SWEEP_COLUMNS = ["speed_mps", "min_detection_m", "brake_distance_m", "delay_adjusted_m"]


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError(f"{path}: no data rows")
    return rows[0], rows[1:]


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "racesim"
    return plt


def plot_sweep(header, rows, output: Path) -> None:
    plt = _figure()
    col = {c: header.index(c) for c in SWEEP_COLUMNS}
    kph = np.array([float(r[col["speed_mps"]]) * 3.6 for r in rows])
    det = np.array([float(r[col["min_detection_m"]]) if r[col["min_detection_m"]] else np.nan
                    for r in rows])
    brk = np.array([float(r[col["brake_distance_m"]]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(kph, det, "o-", label="min. detection range (evasion)")
    ax.plot(kph, brk, "s--", label="braking distance")
    ax.set_xlabel("speed [kph]")
    ax.set_ylabel("distance [m]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(output, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trajectory(header, rows, output: Path, track_path: Path | None) -> None:
    from .track import frenet_to_cart_array, load_track
    plt = _figure()
    col = {c: i for i, c in enumerate(header)}
    agents = sorted({r[col["agent"]] for r in rows}, key=lambda a: [r[col["agent"]] for r in rows].index(a))
    fig, ax = plt.subplots(figsize=(7, 7))
    if track_path is not None:
        track = load_track(track_path)
        s = np.linspace(0.0, track.total_length, 2000)
        for n in (track.width_left.min(), -track.width_right.min()):
            pts = frenet_to_cart_array(track, s, np.full_like(s, n))
            ax.plot(pts[:, 0], pts[:, 1], color="0.5", lw=0.8)
    for a in agents:
        sel = [r for r in rows if r[col["agent"]] == a]
        x = np.array([float(r[col["x_m"]]) for r in sel])
        y = np.array([float(r[col["y_m"]]) for r in sel])
        ax.plot(x, y, lw=1.2, label=a)
        last = sel[-1]
        psi = float(last[col["psi_rad"]])
        c, sn = np.cos(psi), np.sin(psi)
        box = np.array([[2.5, 1.0], [-2.5, 1.0], [-2.5, -1.0], [2.5, -1.0], [2.5, 1.0]])
        ax.plot(x[-1] + box[:, 0] * c - box[:, 1] * sn, y[-1] + box[:, 0] * sn + box[:, 1] * c,
                color="k", lw=0.8)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(output, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_plot(args) -> int:
    header, rows = _read_csv(args.csv)
    kind = args.kind
    if kind == "auto":
        if header[:len(SWEEP_COLUMNS)] == SWEEP_COLUMNS:
            kind = "sweep"
        elif {"agent", "x_m", "y_m", "psi_rad"} <= set(header):
            kind = "trajectory"
        else:
            raise ConfigError(f"{args.csv}: unrecognised CSV columns")
    output = args.output or Path(args.out_dir) / (args.csv.stem + ".svg")
    output.parent.mkdir(parents=True, exist_ok=True)
    if kind == "sweep":
        if header[:len(SWEEP_COLUMNS)] != SWEEP_COLUMNS:
            raise ConfigError(f"{args.csv}: not a sweep CSV")
        plot_sweep(header, rows, output)
    else:
        if not {"agent", "x_m", "y_m", "psi_rad"} <= set(header):
            raise ConfigError(f"{args.csv}: not a simulation log")
        track = args.track
        if track is None:
            meta = args.csv.with_name(args.csv.name.replace("_log.csv", "_meta.json"))
            if meta.exists() and meta != args.csv:
                track_file = json.loads(meta.read_text()).get("track_file")
                track = Path(track_file) if track_file else None
        plot_trajectory(header, rows, output, track)
    print(output)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "evasion-sweep": cmd_evasion_sweep, "latency": cmd_latency,
            "plot": cmd_plot, "validate-config": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
