"""
omapisim command line.

Every subcommand prints ``key: value`` lines on stdout; diagnostics go to
stderr. Exit codes: 0 ok, 1 demo property failed, 2 usage or config
error, 3 the service answered with an error, 4 the service is unreachable.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import errors
from .access_control import load_rule_file
from .apdu import ApduError, from_hex, to_hex
from .client import connect
from .config import LOADER_MODES, ConfigError, ServiceConfig
from .demo import run_demo
from .sandbox import PROFILES
from .service import SmartcardService
from .vse import ElementConfig

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_USAGE = 2
EXIT_SERVICE_ERROR = 3
EXIT_UNREACHABLE = 4


def _out(key: str, value) -> None:
    print(f"{key}: {value}", flush=True)


def _err(text: str) -> None:
    print(text, file=sys.stderr, flush=True)


def _load_config(args) -> ServiceConfig:
    cfg = ServiceConfig.load(args.config) if getattr(args, "config", None) else ServiceConfig()
    if getattr(args, "mode", None):
        cfg = replace(cfg, loader_mode=args.mode)
    if getattr(args, "profile", None):
        cfg = replace(cfg, profile=args.profile)
    if getattr(args, "socket", None):
        cfg = replace(cfg, socket=Path(args.socket))
    if getattr(args, "report_out", None):
        cfg = replace(cfg, report_sink=Path(args.report_out))
    cfg.__post_init__()
    return cfg


def _socket_path(args) -> Path:
    if args.socket:
        return Path(args.socket)
    if args.config:
        cfg = ServiceConfig.load(args.config)
        if cfg.socket is not None:
            return cfg.socket
    raise ConfigError("no socket: pass --socket or a --config naming one")


def _service_error(exc: errors.OmapiError) -> int:
    _out("error", type(exc).__name__)
    _out("code", f"{exc.code:04X}")
    _out("message", exc.message)
    return EXIT_SERVICE_ERROR


def cmd_serve(args) -> int:
    cfg = _load_config(args)
    if cfg.socket is None:
        raise ConfigError("serve needs a socket path (--socket or config 'socket')")
    service = SmartcardService(cfg)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        names = service.start(serve=True)
        _out("socket", cfg.socket)
        _out("mode", cfg.loader_mode)
        _out("profile", cfg.profile)
        for name in names:
            _out("reader", name)
        _out("status", "serving")
        stop.wait()
    finally:
        service.stop()
    _out("status", "stopped")
    return EXIT_OK


def cmd_readers(args) -> int:
    path = _socket_path(args)
    try:
        with connect(path) as client:
            names = client.list_readers()
    except OSError as exc:
        _err(f"cannot reach service at {path}: {exc}")
        return EXIT_UNREACHABLE
    except errors.OmapiError as exc:
        return _service_error(exc)
    for name in names:
        _out("reader", name)
    return EXIT_OK


def cmd_transmit(args) -> int:
    path = _socket_path(args)
    try:
        aid = from_hex(args.aid)
        apdu = from_hex(args.apdu)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    reader = int(args.reader) if args.reader.isdigit() else args.reader
    try:
        with connect(path) as client:
            session = client.open_session(reader)
            channel, select = client.open_channel(session, aid)
            _out("select_response", to_hex(select))
            response = client.transmit(channel, apdu)
            client.close_channel(channel)
            client.close_session(session)
    except OSError as exc:
        _err(f"cannot reach service at {path}: {exc}")
        return EXIT_UNREACHABLE
    except errors.OmapiError as exc:
        return _service_error(exc)
    _out("response", to_hex(response))
    if len(response) >= 2:
        _out("sw", to_hex(response[-2:]))
    return EXIT_OK


def cmd_demo_exploit(args) -> int:
    base = ServiceConfig.load(args.config) if args.config else None
    golden = args.golden if args.golden else ("auto" if not args.no_golden else None)
    result = run_demo(args.mode, args.profile, config=base, report_out=args.report_out, golden=golden,
                      workdir=args.workdir)
    for line in result.lines():
        print(line)
    if args.show_report and result.report_text:
        _err(result.report_text)
    if not result.holds:
        _err(f"expected property of mode {args.mode!r} does not hold")
        return EXIT_PROPERTY
    return EXIT_OK


def cmd_ara(args) -> int:
    cfg = ServiceConfig.load(args.config)
    if cfg.element is None:
        raise ConfigError(f"{args.config} names no element config ('element = ...')")
    ecfg = ElementConfig.load(cfg.element) if cfg.element.exists() else ElementConfig()
    if args.clear:
        ecfg.ara_rules = None
        cfg.element.write_text(ecfg.dump(), encoding="utf-8")
        _out("ara", "cleared")
    else:
        rules = Path(args.rules).resolve()
        db = load_rule_file(rules)
        ecfg.ara_rules = rules
        cfg.element.write_text(ecfg.dump(), encoding="utf-8")
        _out("ara", "installed")
        _out("rules", len(db.rules))
    _out("element", cfg.element)
    _out("effective", "next service start")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omapisim", description="Desk-scale Open Mobile API smartcard service.")
    p.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the service until interrupted")
    s.add_argument("--config")
    s.add_argument("--socket")
    s.add_argument("--mode", choices=LOADER_MODES)
    s.add_argument("--profile", choices=sorted(PROFILES))
    s.add_argument("--report-out")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("readers", help="list readers of a running service")
    s.add_argument("--config")
    s.add_argument("--socket")
    s.set_defaults(func=cmd_readers)

    s = sub.add_parser("transmit", help="open a channel to an applet and send one APDU")
    s.add_argument("--config")
    s.add_argument("--socket")
    s.add_argument("--reader", required=True, help="reader name or index")
    s.add_argument("--aid", required=True, help="applet AID, hex")
    s.add_argument("--apdu", required=True, help="command APDU, hex")
    s.set_defaults(func=cmd_transmit)

    s = sub.add_parser("demo_exploit", aliases=["demo-exploit"],
                       help="install the exploit add-on, boot the service and report")
    s.add_argument("--config")
    s.add_argument("--mode", choices=LOADER_MODES, default="legacy")
    s.add_argument("--profile", choices=sorted(PROFILES), default="nexus6")
    s.add_argument("--report-out")
    s.add_argument("--golden", help="compare against this golden instead of the bundled one")
    s.add_argument("--no-golden", action="store_true")
    s.add_argument("--workdir", help="keep scratch files here")
    s.add_argument("--show-report", action="store_true", help="echo the report on stderr")
    s.set_defaults(func=cmd_demo_exploit)

    s = sub.add_parser("ara", help="install or clear the ARA rule database of the virtual UICC")
    s.add_argument("--config", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--rules")
    g.add_argument("--clear", action="store_true")
    s.set_defaults(func=cmd_ara)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ApduError, OSError) as exc:
        _err(f"omapisim: {exc}")
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - sandbox/profile errors etc.
        if type(exc).__module__.startswith("omapisim"):
            _err(f"omapisim: {type(exc).__name__}: {exc}")
            return EXIT_USAGE
        raise


if __name__ == "__main__":
    sys.exit(main())
