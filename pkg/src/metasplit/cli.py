"""Command-line entry point: ``metasplit {train,replay,sweep,conformal,serve,device,gradcheck}``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from typing import List, Optional

from . import harness, meta, nncore, splitnet, transport
from .channel import ChannelPair
from .config import load_config, to_ini

log = logging.getLogger("metasplit")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with [experiment], [meta], [channel], [cp], [synth]")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--mode", choices=("dnn", "sl", "msl"))
    p.add_argument("--seed", type=int)
    p.add_argument("--cut", type=int, choices=(1, 2, 3))
    p.add_argument("--data", help="'synth' or 'omniglot:<path>'")


def _config(args):
    overrides: List[str] = list(args.overrides)
    for name in ("mode", "seed", "cut", "data"):
        value = getattr(args, name, None)
        if value is not None:
            overrides.append(f"experiment.{name}={value}")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _config(args)
    report = harness.train(cfg)
    report.write_csv(args.out)
    if args.log:
        meta.write_log_csv(args.log, report.train_log)
    if args.cp_out:
        report.write_cp_csv(args.cp_out)
    if args.echo_config:
        with open(args.echo_config, "w", encoding="utf-8") as f:
            f.write(to_ini(cfg))
    print(f"{cfg.mode}: accuracy {report.metrics.accuracy:.4f} after {cfg.meta.test_steps} steps, "
          f"coverage {report.coverage:.3f}, inefficiency {report.inefficiency:.3f} -> {args.out}")
    return 0


def cmd_replay(args) -> int:
    cfg = harness.config_from_report(args.report)
    harness.train(cfg).write_csv(args.out)
    print(f"replayed {args.report} -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = [g for g in args.grid.split(",") if g]
    modes = args.modes.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    harness.sweep(args.kind, grid, cfg, args.out, modes, seeds)
    print(f"sweep {args.kind} over {grid} -> {args.out}")
    return 0


def cmd_conformal(args) -> int:
    cfg = _config(args)
    report = harness.train(cfg)
    report.write_cp_csv(args.out)
    print(f"{cfg.mode}: mean coverage {report.coverage:.3f}, mean inefficiency "
          f"{report.inefficiency:.3f} over {len(report.cp_rows)} tasks -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    srv = transport.listen(args.port, args.host)
    print(f"listening on {srv.getsockname()[0]}:{srv.getsockname()[1]}", flush=True)
    sessions = 0
    try:
        while True:
            ep = transport.accept(srv)
            try:
                slog = transport.run_aggregator(ep, timeout=args.timeout)
                if args.log:
                    transport.write_session_csv(args.log, slog)
                log.info("session from %s finished after %d steps", ep.address, len(slog.steps))
            finally:
                ep.close()
            sessions += 1
            if args.once or (args.sessions and sessions >= args.sessions):
                break
    finally:
        srv.close()
    return 0


def cmd_device(args) -> int:
    cfg = _config(args)
    host, _, port = args.connect.rpartition(":")
    x, y = harness.session_data(cfg)
    model_cfg = nncore.default_config(cfg.meta.ways)
    pair = splitnet.init_pair(model_cfg, cfg.cut, cfg.seed)
    scfg = transport.SessionConfig(cfg.cut, cfg.meta.ways, cfg.seed, args.lr if args.lr is not None
                                   else cfg.meta.eta, args.steps)
    channels = None if cfg.channel.is_identity else ChannelPair(cfg.channel)
    deadline = time.monotonic() + args.timeout
    while True:
        try:
            ep = transport.connect(host or "127.0.0.1", int(port), args.timeout)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.1)
    try:
        slog = transport.run_device(ep, pair, x, y, scfg, channels, args.timeout)
    finally:
        ep.close()
    if args.log:
        transport.write_session_csv(args.log, slog)
    print(f"device: {len(slog.steps)} steps, {ep.sent} bytes sent, {ep.received} received")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    err = nncore.grad_check(nncore.default_config(args.classes), args.seed, args.eps, args.batch,
                            args.params)
    print(f"max relative error {err:.3e} over {args.params} parameters "
          f"({time.perf_counter() - t0:.1f} s)")
    return 0 if err < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metasplit", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one dnn/sl/msl run, report as CSV")
    _common(p)
    p.add_argument("--out", default="report.csv")
    p.add_argument("--log", help="per-epoch meta-training log CSV")
    p.add_argument("--cp-out", help="per-task conformal report CSV")
    p.add_argument("--echo-config", help="write the effective config as INI")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("replay", help="re-run the config echoed in a report CSV")
    p.add_argument("report")
    p.add_argument("--out", default="replay.csv")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sweep", help="train across a grid of shots/tasks/cut/snr")
    _common(p)
    p.add_argument("--kind", required=True, choices=harness.SWEEP_KINDS)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--modes", default="msl")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("conformal", help="per-task coverage/inefficiency CSV")
    _common(p)
    p.add_argument("--out", default="cp.csv")
    p.set_defaults(func=cmd_conformal)

    p = sub.add_parser("serve", help="aggregator side of a two-process session")
    p.add_argument("--port", type=int, required=True, help="0 picks a free port")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--once", action="store_true", help="exit after one session")
    p.add_argument("--sessions", type=int, default=0)
    p.add_argument("--timeout", type=float, default=transport.DEFAULT_TIMEOUT)
    p.add_argument("--log", help="session log CSV")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("device", help="device side of a two-process SL session")
    _common(p)
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--lr", type=float)
    p.add_argument("--timeout", type=float, default=transport.DEFAULT_TIMEOUT)
    p.add_argument("--log", help="session log CSV")
    p.set_defaults(func=cmd_device)

    p = sub.add_parser("gradcheck", help="finite-difference check of backprop (float64)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--params", type=int, default=200)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
