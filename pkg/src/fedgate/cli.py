"""``fedgate`` command line.

Exit codes: 0 success, 1 protocol error, 2 configuration error,
3 upstream failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import random
import sys
import threading
from pathlib import Path

from .containers import ArcFile, TapeFile, container_fsck
from .errors import (
    BadArgument,
    ConfigError,
    FedgateError,
    HarvestFailure,
    NotFound,
    ProtocolError,
    ScenarioError,
    Unreachable,
    UpstreamUnavailable,
)
from .federator import Federator, FederatorConfig
from .httpd import Server, fetch
from .ingest import ingest_batch, load_package
from .locator import Locator
from .model import FedDatetime
from .registry import Registry, RegistryClient
from .repository import ARC_SUFFIX, TAPE_SUFFIX, NodeConfig
from .wire import (
    DATETIME_PREFIX,
    IDENTIFIERS_PREFIX,
    SURROGATE_PREFIX,
    SVC_BASE,
    harvest_client,
    kev_url,
    parse_error_body,
)

EXIT_OK = 0
EXIT_PROTOCOL = 1
EXIT_CONFIG = 2
EXIT_UPSTREAM = 3

log = logging.getLogger("fedgate")

SERVICE_NAMES = {
    "ObtainSurrogate": "ObtainSurrogate.SUR",
    "LocateSurrogates": "LocateSurrogates",
    "ObtainDatastream": "ObtainDatastream",
    "LocateRepositories": "LocateRepositories",
    "ObtainRecord": "ObtainRecord",
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ScenarioError)):
        return EXIT_CONFIG
    if isinstance(exc, (Unreachable, UpstreamUnavailable, HarvestFailure)):
        return EXIT_UPSTREAM
    return EXIT_PROTOCOL


def _read_config(path) -> tuple[dict, Path]:
    p = Path(path)
    try:
        return json.loads(p.read_text()), p.parent
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {p}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: not JSON: {e}") from None


def _announce(name, srv):
    print(f"{name} listening on {srv.url}", flush=True)


def _wait(stop_event=None):
    ev = stop_event or threading.Event()
    try:
        ev.wait()
    except KeyboardInterrupt:
        pass


def _bind(app, host, port, name):
    srv = Server(app, host, port, name)
    try:
        srv.start()
    except OSError as e:
        raise ConfigError(f"{name}: cannot bind {host}:{port}: {e}") from None
    return srv


# -- serve commands --


def cmd_repo_serve(args):
    data, base = _read_config(args.config)
    cfg = NodeConfig.from_json(data, base)
    node = cfg.build()
    node.load()
    srv = Server(None, cfg.host, cfg.port, cfg.name or "repo")
    srv.app = node.app(lambda: srv.url, page_size=cfg.page_size)
    try:
        srv.start()
    except OSError as e:
        raise ConfigError(f"cannot bind {cfg.host}:{cfg.port}: {e}") from None
    if cfg.registry_url:
        reg = RegistryClient(cfg.registry_url)
        for comp, bindings in node.bindings(srv.url).items():
            reg.register(comp, bindings, node.registry_metadata(comp))
    _announce("repository", srv)
    _wait(args.stop_event)
    srv.stop()
    return EXIT_OK


def cmd_registry_serve(args):
    reg = Registry(args.state)
    srv = _bind(reg.app, args.host, args.port, "registry")
    _announce("registry", srv)
    _wait(args.stop_event)
    srv.stop()
    return EXIT_OK


def cmd_locator_serve(args):
    loc = Locator(args.journal)
    registry = RegistryClient(args.registry, ttl=0.0) if args.registry else None
    srv = _bind(loc.make_app(registry), args.host, args.port, "locator")
    _announce("locator", srv)
    stop = args.stop_event or threading.Event()
    if registry is not None and args.sync_interval > 0:
        def loop():
            while not stop.wait(args.sync_interval):
                report = loc.sync(registry)
                for r in report.errors:
                    log.warning("sync %s: %s", r.repository_uri, r.error)
        threading.Thread(target=loop, name="locator-sync", daemon=True).start()
    _wait(stop)
    srv.stop()
    loc.close()
    return EXIT_OK


def cmd_federator_serve(args):
    data, base = _read_config(args.config)
    if data.get("cache_path") and not Path(data["cache_path"]).is_absolute():
        data["cache_path"] = str(base / data["cache_path"])
    cfg = FederatorConfig.from_json(data)
    fed = Federator(cfg)
    srv = Server(None, cfg.host, cfg.port, "federator")
    srv.app = fed.app(lambda: srv.url)
    try:
        srv.start()
    except OSError as e:
        raise ConfigError(f"cannot bind {cfg.host}:{cfg.port}: {e}") from None
    _announce("federator", srv)
    _wait(args.stop_event)
    srv.stop()
    return EXIT_OK


# -- one-shot commands --


def cmd_ingest(args):
    data, base = _read_config(args.target)
    cfg = NodeConfig.from_json(data, base)
    node = cfg.build()
    node.load()
    pkg = load_package(args.pkg_dir)
    dt = FedDatetime.parse(args.datetime) if args.datetime else FedDatetime.now()
    rng = random.Random(args.seed) if args.seed is not None else random.Random()
    manifest = ingest_batch(pkg, cfg.namespace, node, dt, rng)
    if args.notify:
        status, _, body = fetch(args.notify.rstrip("/") + "/admin/rescan", method="POST")
        if status != 200:
            raise ProtocolError(f"http{status}", parse_error_body(body)[1], args.notify)
    sys.stdout.write(manifest.to_json() + "\n")
    return EXIT_OK


def _describe(prefix, meta):
    if prefix == SURROGATE_PREFIX:
        return "sha256:" + hashlib.sha256(meta).hexdigest()
    if prefix == IDENTIFIERS_PREFIX:
        do, ds, urls = meta
        return " ".join(u.value for u in (*do, *ds, *urls))
    return str(meta)


def cmd_harvest(args):
    endpoint = args.endpoint
    verb = "ListIdentifiers" if args.identifiers_only else "ListRecords"
    start = FedDatetime.parse(args.from_) if args.from_ else None
    until = FedDatetime.parse(args.until) if args.until else None
    out = sys.stdout
    n = 0
    for rec in harvest_client(endpoint, args.prefix, start, until, verb=verb, timeout=args.timeout):
        if verb == "ListIdentifiers":
            ident, dt = rec
            out.write(f"{ident}\t{dt}\n")
        else:
            ident, dt, meta = rec
            out.write(f"{ident}\t{dt}\t{_describe(args.prefix, meta)}\n")
        n += 1
    log.info("%d records", n)
    return EXIT_OK


def _svc_id(name):
    if name.startswith(SVC_BASE):
        return name
    if name in SERVICE_NAMES:
        return SVC_BASE + SERVICE_NAMES[name]
    raise BadArgument(f"unknown service {name!r}; one of {', '.join(SERVICE_NAMES)}")


def cmd_resolve(args):
    url = kev_url(args.at.rstrip("/") + "/openurl", args.uri, _svc_id(args.svc))
    status, ctype, body = fetch(url, args.timeout)
    if status == 200:
        sys.stdout.buffer.write(body)
        if not body.endswith(b"\n") and (ctype or "").startswith(("application/xml", "text/")):
            sys.stdout.buffer.write(b"\n")
        sys.stdout.flush()
        return EXIT_OK
    code, msg = parse_error_body(body)
    print(f"{code or status}: {msg}", file=sys.stderr)
    return EXIT_UPSTREAM if status >= 500 else EXIT_PROTOCOL


def cmd_fsck(args):
    try:
        issues = container_fsck(args.container)
    except NotFound as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    for issue in issues:
        print(issue)
    if not issues:
        print(f"{args.container}: ok")
    return EXIT_PROTOCOL if issues else EXIT_OK


def _open_container(path: Path):
    if path.name.endswith(TAPE_SUFFIX):
        return TapeFile.open(path)
    if path.name.endswith(ARC_SUFFIX):
        return ArcFile.open(path)
    raise BadArgument(f"not a tape or arc: {path}")


def cmd_tape_ls(args):
    target = Path(args.path)
    if target.is_dir():
        for p in sorted([*target.glob("*" + TAPE_SUFFIX), *target.glob("*" + ARC_SUFFIX)]):
            try:
                c = _open_container(p)
            except FedgateError as e:
                print(f"{p.name}\t-\t-\t{e}")
                continue
            print(f"{p.name}\t{c.record_count}\t{c.size}\t{'sealed' if c.sealed else 'open'}")
        return EXIT_OK
    if not target.exists():
        raise ConfigError(f"no such container: {target}")
    c = _open_container(target)
    for e in c.records:
        print(f"{e.record_id}\t{e.datetime}\t{e.offset}\t{e.length}")
    return EXIT_OK


def cmd_scenario_run(args):
    from .harness import FederationScenario, run_scenario, scenario_summary

    data, _ = _read_config(args.scenario)
    try:
        scenario = FederationScenario.from_json(data)
    except BadArgument as e:
        raise ConfigError(str(e)) from None
    handles = run_scenario(scenario, args.workdir)
    try:
        print(json.dumps(scenario_summary(handles), indent=1), flush=True)
        if args.serve:
            _wait(args.stop_event)
    finally:
        handles.stop()
    return EXIT_OK


def cmd_bench_locator(args):
    from .harness import bench_locator
    from .report import bench_report

    report = bench_locator(args.uris, args.queries, args.seed)
    samples, summary, fig = bench_report(report, args.out)
    for k, v in report.summary().items():
        print(f"{k}\t{v}")
    print(f"samples\t{samples}\nsummary\t{summary}\nfigure\t{fig}")
    return EXIT_OK


# -- parser --


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedgate", description="Federated repository gateway")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(stop_event=None)
    sub = p.add_subparsers(dest="command", required=True)

    repo = sub.add_parser("repo", help="Tier-1 repository node").add_subparsers(dest="action", required=True)
    s = repo.add_parser("serve")
    s.add_argument("config")
    s.set_defaults(func=cmd_repo_serve)

    loc = sub.add_parser("locator", help="Identifier Locator").add_subparsers(dest="action", required=True)
    s = loc.add_parser("serve")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--journal", help="journal file; omitted means in-memory")
    s.add_argument("--registry", help="registry URL used by sync")
    s.add_argument("--sync-interval", type=float, default=0.0, help="seconds between syncs; 0 disables")
    s.set_defaults(func=cmd_locator_serve)

    reg = sub.add_parser("registry", help="Service Registry").add_subparsers(dest="action", required=True)
    s = reg.add_parser("serve")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--state", help="JSON file the registry persists to")
    s.set_defaults(func=cmd_registry_serve)

    fed = sub.add_parser("federator", help="Tier-3 federator").add_subparsers(dest="action", required=True)
    s = fed.add_parser("serve")
    s.add_argument("config")
    s.set_defaults(func=cmd_federator_serve)

    s = sub.add_parser("ingest", help="ingest a package directory into a repository")
    s.add_argument("pkg_dir")
    s.add_argument("--target", required=True, help="repository config file")
    s.add_argument("--datetime", help="ingest datetime (default: now)")
    s.add_argument("--seed", type=int, help="seed for URI minting")
    s.add_argument("--notify", help="URL of the running node to rescan its storage")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("harvest", help="incremental harvest from an OAI-PMH endpoint")
    s.add_argument("endpoint")
    s.add_argument("--from", dest="from_")
    s.add_argument("--until")
    s.add_argument("--prefix", default=SURROGATE_PREFIX, choices=(SURROGATE_PREFIX, IDENTIFIERS_PREFIX, DATETIME_PREFIX))
    s.add_argument("--identifiers-only", action="store_true", help="use ListIdentifiers")
    s.add_argument("--timeout", type=float, default=30.0)
    s.set_defaults(func=cmd_harvest)

    s = sub.add_parser("resolve", help="issue one OpenURL request")
    s.add_argument("uri")
    s.add_argument("--svc", required=True, help="service name or full svc_id")
    s.add_argument("--at", required=True, help="base URL of a node, federator, locator or registry")
    s.add_argument("--timeout", type=float, default=10.0)
    s.set_defaults(func=cmd_resolve)

    s = sub.add_parser("fsck", help="check a sealed container against its index")
    s.add_argument("container")
    s.set_defaults(func=cmd_fsck)

    tape = sub.add_parser("tape", help="container inspection").add_subparsers(dest="action", required=True)
    s = tape.add_parser("ls")
    s.add_argument("path", nargs="?", default=".", help="container file or storage directory")
    s.set_defaults(func=cmd_tape_ls)

    sc = sub.add_parser("scenario", help="run a federation scenario").add_subparsers(dest="action", required=True)
    s = sc.add_parser("run")
    s.add_argument("scenario")
    s.add_argument("--workdir")
    s.add_argument("--serve", action="store_true", help="keep the federation running")
    s.set_defaults(func=cmd_scenario_run)

    bench = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="action", required=True)
    s = bench.add_parser("locator")
    s.add_argument("--uris", type=int, default=1_000_000)
    s.add_argument("--queries", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".", help="directory for TSV and PNG output")
    s.set_defaults(func=cmd_bench_locator)
    return p


def main(argv=None, stop_event=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if stop_event is not None:
        args.stop_event = stop_event
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedgateError as e:
        print(f"fedgate: {e}", file=sys.stderr)
        return exit_code_for(e)
    except OSError as e:
        print(f"fedgate: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entry():
    sys.exit(main())

