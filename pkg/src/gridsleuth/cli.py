"""Command-line front end: ``gridsleuth {simulate,identify,monitor,replay,validate}``.

Exit codes: 0 clean run, 2 events detected and localized, 3 an event was
detected but could not be localized, 1 operational error.  The log level is
read from the ``GRIDSLEUTH_LOG`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .config import ScenarioConfig, load_config
from .errors import GridSleuthError, InsufficientDataError, LocalizationError
from .events import (
    DetectorState,
    calibrate_threshold,
    detect,
    localize,
    residual,
    write_alarm_log,
)
from .feeder import assemble_ybus
from .ident import identify, relative_errors
from .simulator import PhasorWindow, run_scenario, window
from .streamio import iter_binary, read_binary, read_csv, write_binary, write_csv

log = logging.getLogger("gridsleuth")

EXIT_OK, EXIT_ERROR, EXIT_EVENTS, EXIT_UNLOCALIZED = 0, 1, 2, 3

STREAM_BIN = "stream.gsph"
STREAM_CSV = "stream.csv"


def _out_dir(args, cfg: Optional[ScenarioConfig]) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg is not None:
        out = cfg.output_dir
    else:
        out = Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args, required: bool = True) -> Optional[ScenarioConfig]:
    if args.config is None:
        if required:
            raise GridSleuthError("--config is required for this command")
        return None
    return load_config(args.config, seed_override=args.seed_override)


def _read_stream(path: Path):
    if path.suffix == ".csv":
        with open(path, encoding="utf-8") as fh:
            return read_csv(fh)
    with open(path, "rb") as fh:
        return read_binary(fh)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    f = cfg.feeder
    h = cfg.config_hash
    snaps = list(run_scenario(f, cfg.allocation, **cfg.scenario_kwargs()))
    with open(out / STREAM_BIN, "wb") as fh:
        write_binary(fh, f.labels, snaps, h)
    with open(out / STREAM_CSV, "w", encoding="utf-8", newline="") as fh:
        write_csv(fh, f.labels, snaps, h)
    manifest = {
        "config_hash": h,
        "seeds": cfg.settings["seeds"],
        "K": len(snaps),
        "D": f.D,
        "files": [STREAM_BIN, STREAM_CSV],
        "versions": {"gridsleuth": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "settings": cfg.settings,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(snaps)} snapshots of {f.D} node/phases to {out}")
    return EXIT_OK


def _write_grid(path: Path, M: np.ndarray, labels: Sequence[str], config_hash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, M):
            w.writerow([lab] + [repr(float(v)) for v in row])


def cmd_identify(args) -> int:
    cfg = _config(args, required=False)
    out = _out_dir(args, cfg)
    header, snaps = _read_stream(Path(args.stream))
    h = header.config_hash
    tau = args.tau
    first, K = 1, None
    if cfg is not None:
        idc = cfg.settings["identification"]
        tau = tau if tau is not None else idc["tau"]
        first, K = idc["first_slot"], idc["K"]
    if not snaps:
        raise InsufficientDataError("stream contains no snapshots")
    first = max(first, snaps[0].slot)
    if K is None:
        K = sum(1 for s in snaps if s.slot >= first)
    w = window(snaps, first, K)
    model = identify(w.V, w.I, tau=tau if tau is not None else 1e-6)
    (out / "model.json").write_text(model.to_json(config_hash=h) + "\n")
    print(f"identified rank {model.partition.R} of {model.partition.D}; model written to {out / 'model.json'}")
    if args.ground_truth:
        from .config import BUILTIN_FEEDERS, _read_source
        from .feeder import load_feeder

        truth_f = load_feeder(_read_source(args.ground_truth, BUILTIN_FEEDERS, Path(".")))
        Y = assemble_ybus(truth_f).Y
        p = model.partition
        ind, dep = list(p.ind_rows), list(p.dep_rows)
        Y22 = Y[np.ix_(ind, ind)]
        labels = [header.labels[i] for i in ind]
        abs_err = np.abs(Y22 - model.Y22)
        rel = relative_errors(model.Y22, Y22)
        _write_grid(out / "y22_abs_error.csv", abs_err, labels, h)
        _write_grid(out / "y22_rel_error.csv", rel, labels, h)
        nz = np.abs(Y22) > 0
        report = {
            "config_hash": h,
            "rank": p.R,
            "D": p.D,
            "y22_max_relative_error": float(rel.max()),
            "y22_max_relative_error_nonzero": float(rel[nz].max()) if nz.any() else 0.0,
            "y22_max_abs_error": float(abs_err.max()),
            "y11_max_abs_error": float(np.abs(model.Y11 - Y[np.ix_(dep, dep)]).max(initial=0.0)),
            "y12_max_abs_error": float(np.abs(model.Y12 - Y[np.ix_(dep, ind)]).max(initial=0.0)),
        }
        (out / "error_report.json").write_text(json.dumps(report, indent=1) + "\n")
        print(f"Y22 max relative error {report['y22_max_relative_error']:.3e}")
    return EXIT_OK


def _calibrate(cfg: ScenarioConfig, f, Y0, alpha: float) -> float:
    """Gamma from an event-free companion run with a distinct noise seed."""
    d = cfg.settings["detector"]
    kw = cfg.scenario_kwargs()
    kw["events"] = ()
    kw["K"] = int(d["calibration_slots"])
    noise = kw["noise"]
    kw["noise"] = type(noise)(noise.magnitude_std, noise.angle_std, noise.seed + 1)
    state = DetectorState(Y0, gamma=1.0)
    norms = [residual(state, s)[1] for s in run_scenario(f, cfg.allocation, **kw)]
    return calibrate_threshold(norms, alpha, safety_factor=float(d["safety_factor"]))


def cmd_monitor(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    f = cfg.feeder
    yb = assemble_ybus(f)
    d, loc = cfg.settings["detector"], cfg.settings["localization"]
    alpha = args.alpha if args.alpha is not None else d["alpha"]
    if args.gamma is not None:
        gamma = args.gamma
    elif d["gamma"] != "auto":
        gamma = float(d["gamma"])
    else:
        gamma = _calibrate(cfg, f, yb.Y, alpha)
    k_loc = args.k_localize if args.k_localize is not None else loc["K"]
    guard = loc["guard"]
    h = cfg.config_hash
    if args.stream:
        header, snaps = _read_stream(Path(args.stream))
        if header.config_hash and header.config_hash != h:
            log.warning("stream config hash %s differs from config %s", header.config_hash, h)
    else:
        snaps = list(run_scenario(f, cfg.allocation, **cfg.scenario_kwargs()))
    state = DetectorState(yb.Y, gamma, history_window=max(len(snaps), 1))
    records, failures = [], []
    for pos, snap in enumerate(snaps):
        alarm = detect(state, snap)
        if alarm is None:
            continue
        post = snaps[pos + guard: pos + guard + k_loc]
        try:
            if len(post) < k_loc:
                raise LocalizationError(
                    f"only {len(post)} post-event samples available, need {k_loc}")
            w = window(post, post[0].slot, k_loc)
            rec = localize(state.Y0, w, yb.block_index, t=alarm.slot, feeder=f)
        except (LocalizationError, InsufficientDataError) as exc:
            failures.append({"slot": alarm.slot, "error": str(exc)})
            print(f"slot {alarm.slot}: detected but not localized: {exc}", file=sys.stderr)
            continue
        records.append(rec)
        state.rebase(rec)
        name = f"event_{alarm.slot}.json"
        (out / name).write_text(rec.to_json(labels=f.labels, config_hash=h) + "\n")
        print(f"slot {alarm.slot}: {rec.classification} {', '.join(rec.line_ids)}".rstrip())
    with open(out / "alarms.csv", "w", encoding="utf-8", newline="") as fh:
        write_alarm_log(state.history, fh, h)
    summary = {
        "config_hash": h,
        "gamma": gamma,
        "slots": len(snaps),
        "alarms": sum(1 for x in state.history if x.alarmed),
        "localized": [{"slot": r.t, "classification": r.classification,
                       "lines": list(r.line_ids)} for r in records],
        "unlocalized": failures,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"{summary['alarms']} alarm(s) over {len(snaps)} slots (gamma {gamma:.3e})")
    if failures:
        return EXIT_UNLOCALIZED
    return EXIT_EVENTS if records else EXIT_OK


def cmd_replay(args) -> int:
    path = Path(args.stream)
    with open(path, "rb") as fh:
        header, it = iter_binary(fh)
        n, first, last = 0, None, None
        peak_v = 0.0
        for s in it:
            n += 1
            first = s.slot if first is None else first
            last = s.slot
            peak_v = max(peak_v, float(np.abs(s.V).max()))
    info = {"file": str(path), "version": header.version, "D": header.D,
            "config_hash": header.config_hash, "snapshots": n,
            "first_slot": first, "last_slot": last, "max_abs_V": peak_v}
    cfg = _config(args, required=False)
    if cfg is not None:
        info["config_match"] = cfg.config_hash == header.config_hash
    print(json.dumps(info, indent=1))
    return EXIT_OK if info.get("config_match", True) else EXIT_ERROR


def cmd_validate(args) -> int:
    cfg = _config(args)
    f = cfg.feeder
    print(json.dumps({
        "config_hash": cfg.config_hash,
        "feeder": f.name,
        "D": f.D,
        "radial": f.is_radial(),
        "households": cfg.allocation.total,
        "events": len(cfg.events),
        "status": "ok",
    }, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridsleuth", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, stream: Optional[str] = None):
        p.add_argument("--config", help="scenario config (JSON)")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--seed-override", type=int, help="use this seed for every random stream")
        if stream == "required":
            p.add_argument("stream", help="phasor stream file (.gsph binary or .csv)")
        elif stream == "optional":
            p.add_argument("stream", nargs="?", help="phasor stream file; simulate if omitted")
        return p

    common(sub.add_parser("simulate", help="simulate a scenario and write phasor streams")).set_defaults(
        func=cmd_simulate)
    p = common(sub.add_parser("identify", help="identify the admittance matrix from a stream"), "required")
    p.add_argument("--tau", type=float, help="numerical rank threshold")
    p.add_argument("--ground-truth", help="feeder file (or builtin:NAME) to score the estimate against")
    p.set_defaults(func=cmd_identify)
    p = common(sub.add_parser("monitor", help="detect and localize events"), "optional")
    p.add_argument("--alpha", type=float, help="false-alarm level for gamma calibration")
    p.add_argument("--gamma", type=float, help="fixed detection threshold in amperes")
    p.add_argument("--k-localize", type=int, help="post-event samples used for localization")
    p.set_defaults(func=cmd_monitor)
    common(sub.add_parser("replay", help="summarize a binary replay file"), "required").set_defaults(
        func=cmd_replay)
    common(sub.add_parser("validate", help="check a config without running it")).set_defaults(
        func=cmd_validate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("GRIDSLEUTH_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GridSleuthError, OSError) as exc:
        print(f"gridsleuth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
