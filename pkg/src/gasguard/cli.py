"""``gasguard`` command line.

Exit codes: 0 success, 2 scenario load/validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from gasguard.errors import GasGuardError
from gasguard.gateway.server import GatewayConfig, GatewayServer, LOG_PATH_ENV, parse_addr
from gasguard.scenario import LoadError, load_scenario_file, report_render, run

EXIT_OK, EXIT_LOAD, EXIT_RUNTIME = 0, 2, 3


def _load(path: str):
    try:
        return load_scenario_file(path)
    except OSError as e:
        raise LoadError(f"cannot read {path}: {e.strerror}") from None


def cmd_run(args) -> int:
    scenario = _load(args.scenario)
    gateway_log = None if args.remote else os.environ.get(LOG_PATH_ENV)
    events, report = run(scenario, remote=args.remote, gateway_log=gateway_log)
    if args.log_path:
        Path(args.log_path).write_text(events.text())
    sys.stdout.write(report_render(report, args.report))
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = _load(args.scenario)
    print(f"ok: {sc.device_id} {sc.active_gas.value} {sc.ticks} ticks, {len(sc.segments)} segments")
    return EXIT_OK


def cmd_gateway(args) -> int:
    cfg = GatewayConfig.load(args.config)
    overrides = {}
    if args.listen_ingest:
        overrides["ingest_addr"] = parse_addr(args.listen_ingest)
    if args.listen_http:
        overrides["http_addr"] = parse_addr(args.listen_http)
    cfg = GatewayConfig(**{**cfg.__dict__, **overrides})
    server = GatewayServer(cfg)
    if server.store.recovery.truncated:
        logging.warning("log %s: dropped %d trailing bytes of a partial frame",
                        cfg.log_path, server.store.recovery.truncated_bytes)
    print(f"ingest on {server.ingest_addr[0]}:{server.ingest_addr[1]}, "
          f"http on {server.http_addr[0]}:{server.http_addr[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gasguard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario end to end")
    r.add_argument("scenario")
    r.add_argument("--remote", metavar="HOST:PORT", help="gateway ingest socket (default: in-process)")
    r.add_argument("--log-path", metavar="PATH", help="write the event log here")
    r.add_argument("--report", choices=("text", "machine"), default="text")
    r.epilog = f"Without --remote, {LOG_PATH_ENV} persists the in-process gateway log."
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gateway", help="serve the ingest socket and HTTP queries",
                       epilog=f"{LOG_PATH_ENV} overrides the log path from the config file.")
    g.add_argument("--listen-ingest", metavar="HOST:PORT")
    g.add_argument("--listen-http", metavar="HOST:PORT")
    g.add_argument("--config", metavar="INI")
    g.set_defaults(func=cmd_gateway)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LoadError as e:
        print(f"gasguard: {e}", file=sys.stderr)
        return EXIT_LOAD
    except (GasGuardError, OSError) as e:
        print(f"gasguard: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
