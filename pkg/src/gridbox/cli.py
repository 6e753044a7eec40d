"""Command-line entry points: the ``gridbox`` daemon, the ``mgctl`` client and
the ``mgsim`` simulator."""

from __future__ import annotations

import argparse
import base64
import getpass
import logging
import os
import secrets
import signal
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import auth
from .federation import Faults, NodeServer, TcpNetwork, Topology, clique, line, ring, send_request
from .model import GridError, MAX_TTL_HOPS, ValidationError
from .node import Gridbox
from .query import Vocabulary
from .sim import CLINICAL_QUERIES, load_queries, random_queries, simulate
from .store import content_hash
from .wire import Message, ProtocolError, to_xml

log = logging.getLogger("gridbox")

EXIT_OK, EXIT_FAIL, EXIT_AUTH, EXIT_PROTOCOL, EXIT_NOTFOUND = 0, 1, 2, 3, 4
ERROR_EXIT = {"auth": EXIT_AUTH, "protocol": EXIT_PROTOCOL, "notfound": EXIT_NOTFOUND}
DEFAULT_SITE_ADDR = "127.0.0.1:7400"


class ConfigError(GridError):
    pass


# -- site configuration ------------------------------------------------------


@dataclass
class SiteConfig:
    site_id: str
    listen: str
    data_dir: Path
    vo_key_file: Path
    user_table_file: Path
    topology_file: Path
    vocab_file: Optional[Path] = None
    ttl_hops: int = 8
    query_timeout_ms: int = 5000
    anonymize_on_add: bool = True


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}
_REQUIRED = ("site_id", "data_dir", "vo_key_file", "user_table_file", "topology_file")


def parse_config(text: str, base: Path = Path(".")) -> SiteConfig:
    """Parse ``key = value`` lines; relative paths resolve against ``base``."""
    raw = {}
    for n, line_ in enumerate(text.splitlines(), 1):
        line_ = line_.split("#", 1)[0].strip()
        if not line_:
            continue
        key, sep, value = line_.partition("=")
        if not sep:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"config line {n}: duplicate key {key}")
        raw[key] = value.strip()
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"config is missing {', '.join(missing)}")
    known = set(_REQUIRED) | {"listen", "vocab_file", "ttl_hops", "query_timeout_ms", "anonymize_on_add"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    def path(key):
        return base / raw[key] if key in raw else None

    try:
        ttl = int(raw.get("ttl_hops", "8"))
        timeout = int(raw.get("query_timeout_ms", "5000"))
    except ValueError as exc:
        raise ConfigError(f"bad numeric config value: {exc}") from None
    if not 0 <= ttl <= MAX_TTL_HOPS:
        raise ConfigError(f"ttl_hops must be within 0..{MAX_TTL_HOPS}")
    if timeout <= 0:
        raise ConfigError("query_timeout_ms must be positive")
    anon = raw.get("anonymize_on_add", "true").lower()
    if anon not in _BOOL:
        raise ConfigError(f"anonymize_on_add must be true or false, got {anon!r}")
    return SiteConfig(
        site_id=raw["site_id"],
        listen=raw.get("listen", ""),
        data_dir=path("data_dir"),
        vo_key_file=path("vo_key_file"),
        user_table_file=path("user_table_file"),
        topology_file=path("topology_file"),
        vocab_file=path("vocab_file"),
        ttl_hops=ttl,
        query_timeout_ms=timeout,
        anonymize_on_add=_BOOL[anon],
    )


def load_config(path) -> SiteConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)


def build_node(cfg: SiteConfig) -> Gridbox:
    """Load every file the config names and construct the node."""
    key = auth.load_key(cfg.vo_key_file)
    try:
        users = auth.UserTable.load(cfg.user_table_file)
        topology = Topology.load(cfg.topology_file)
        vocab = Vocabulary.parse(cfg.vocab_file.read_text()) if cfg.vocab_file else None
    except OSError as exc:
        raise ConfigError(f"cannot read {exc.filename}: {exc.strerror}") from None
    if cfg.site_id not in topology.sites:
        raise ConfigError(f"site {cfg.site_id} is not listed in {cfg.topology_file}")
    network = TcpNetwork(topology, timeout=cfg.query_timeout_ms / 1000.0)
    return Gridbox(
        cfg.site_id,
        key,
        users,
        topology,
        network,
        data_dir=cfg.data_dir,
        vocab=vocab,
        ttl_hops=cfg.ttl_hops,
        query_timeout_ms=cfg.query_timeout_ms,
        anonymize_on_add=cfg.anonymize_on_add,
    )


def serve(cfg: SiteConfig, ready=None) -> None:
    node = build_node(cfg)
    addr = cfg.listen or node.topology.sites[cfg.site_id]
    server = NodeServer(node, addr)
    stop = threading.Event()

    def _stop(signum, frame):
        stop.set()

    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, _stop)
    worker = threading.Thread(target=server.serve_forever, name="gridbox-serve", daemon=True)
    worker.start()
    log.info("site %s listening on %s", node.site, server.address)
    print(f"listening {node.site} {server.address}", flush=True)
    if ready is not None:
        ready(server)
    try:
        stop.wait()
    finally:
        server.shutdown()
        server.server_close()
        log.info("site %s stopped", node.site)


def gridbox_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridbox", description="Run or provision a Gridbox site.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("serve", help="run the site daemon")
    p.add_argument("--config", required=True)
    p = sub.add_parser("keygen", help="write a fresh hex VO key")
    p.add_argument("path")
    p = sub.add_parser("useradd", help="add or replace a user in a user table file")
    p.add_argument("--table", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--roles", required=True, help="comma-separated: reader, writer, admin")
    p.add_argument("--secret", help="defaults to $MG_SECRET, else prompts")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "serve":
            serve(load_config(args.config))
        elif args.cmd == "keygen":
            fd = os.open(args.path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
            with os.fdopen(fd, "w") as fh:
                fh.write(secrets.token_hex(32) + "\n")
        else:
            table_path = Path(args.table)
            table = auth.UserTable.load(table_path) if table_path.exists() else auth.UserTable()
            secret = args.secret or os.environ.get("MG_SECRET") or getpass.getpass(f"secret for {args.user}: ")
            table.add(args.user, secret, [r.strip() for r in args.roles.split(",") if r.strip()])
            table_path.write_text(table.dumps())
    except (GridError, OSError) as exc:
        print(f"gridbox: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- mgctl -------------------------------------------------------------------


class CommandFailed(Exception):
    def __init__(self, code: int, text: str):
        super().__init__(text)
        self.code = code


def _call(args, msg: Message) -> Message:
    try:
        reply = send_request(args.site, msg, args.timeout)
    except ProtocolError as exc:
        raise CommandFailed(EXIT_PROTOCOL, str(exc)) from None
    except OSError as exc:
        raise CommandFailed(EXIT_PROTOCOL, f"cannot reach {args.site}: {exc}") from None
    if reply.kind == "error":
        code = reply.get("code", "")
        raise CommandFailed(ERROR_EXIT.get(code, EXIT_FAIL), f"{code}: {reply.text}")
    return reply


def _token(args) -> str:
    if not args.token:
        raise CommandFailed(EXIT_AUTH, "no token: run 'mgctl auth' and export MG_TOKEN, or pass --token")
    return args.token


def _print_xml(msg: Message) -> None:
    sys.stdout.write(to_xml(msg).decode("utf-8") + "\n")


def cmd_auth(args) -> None:
    secret = args.secret or os.environ.get("MG_SECRET") or getpass.getpass(f"secret for {args.user}: ")
    reply = _call(args, Message("auth", {"user": args.user, "secret": secret}))
    print(reply.attrs["tok"])


def cmd_add(args) -> None:
    tok = _token(args)
    for name in args.files:
        data = Path(name).read_bytes()
        reply = _call(args, Message("file-put", {"tok": tok}, base64.b64encode(data).decode("ascii")))
        a = reply.attrs
        print(f"{a['gid']} {a['guid']} {a['lfn']}{' duplicate' if a.get('duplicate') == 'true' else ''}")


def cmd_retrieve(args) -> None:
    tok = _token(args)
    first = _call(args, Message("file-get", {"ref": args.ref, "index": "0", "tok": tok}))
    guid, total = first.attrs["guid"], int(first.attrs["total"])
    pieces = [base64.b64decode(first.text)]
    for i in range(1, total):
        pieces.append(base64.b64decode(_call(args, Message("file-get", {"ref": guid, "index": str(i), "tok": tok})).text))
    data = b"".join(pieces)
    if content_hash(data) != guid:
        raise CommandFailed(EXIT_PROTOCOL, f"received bytes do not hash to {guid}")
    out = Path(args.output or f"{guid}.dcm")
    out.write_bytes(data)
    print(f"{out} {guid} {len(data)}")


def cmd_update(args) -> None:
    kids = []
    for item in args.set:
        path, sep, value = item.partition("=")
        if not sep:
            raise CommandFailed(EXIT_FAIL, f"--set expects path=value, got {item!r}")
        kids.append(Message("set", {"path": path.strip()}, value.strip()))
    reply = _call(args, Message("update", {"gid": args.gid, "tok": _token(args)}, "", tuple(kids)))
    print(f"{reply.attrs['gid']} {reply.attrs.get('status', 'ok')}")


def cmd_episode_add(args) -> None:
    attrs = {
        "tok": _token(args),
        "patient": args.patient,
        "laterality": args.laterality,
        "diagnosis": args.diagnosis,
        "therapy_outcome": args.outcome,
        "date": args.date,
    }
    if args.therapy_end_date:
        attrs["therapy_end_date"] = args.therapy_end_date
    reply = _call(args, Message("episode-add", attrs))
    print(reply.attrs["gid"])


def cmd_query(args) -> None:
    body = Message("formal" if args.formal else "user", {}, args.text)
    _print_xml(_call(args, Message("query", {"tok": _token(args)}, "", (body,))))


def cmd_alg_add(args) -> None:
    source = Path(args.file).read_text().strip() if args.file else args.source
    if not source:
        raise CommandFailed(EXIT_FAIL, "alg-add needs pipeline source or --file")
    msg = Message("alg-add", {"tok": _token(args), "name": args.name}, "", (Message("source", {}, source),))
    _print_xml(_call(args, msg))


def cmd_alg_exec(args) -> None:
    msg = Message("alg-exec", {"tok": _token(args), "name": args.name}, "", (Message("formal", {}, args.selector),))
    _print_xml(_call(args, msg))


# one subcommand per MI service
MGCTL_COMMANDS = {
    "auth": cmd_auth,
    "add": cmd_add,
    "retrieve": cmd_retrieve,
    "update": cmd_update,
    "episode-add": cmd_episode_add,
    "query": cmd_query,
    "alg-add": cmd_alg_add,
    "alg-exec": cmd_alg_exec,
}
MI_SERVICES = {
    "authenticate": "auth",
    "add": "add",
    "retrieve": "retrieve",
    "update": "update",
    "query": "query",
    "addAlgorithm": "alg-add",
    "executeAlgorithm": "alg-exec",
}


def mgctl_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgctl", description="Client for a Gridbox site.")
    parser.add_argument("--site", default=os.environ.get("MG_SITE", DEFAULT_SITE_ADDR), help="host:port of the site")
    parser.add_argument("--token", default=os.environ.get("MG_TOKEN"), help="defaults to $MG_TOKEN")
    parser.add_argument("--timeout", type=float, default=30.0)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("auth", help="authenticate and print a token")
    p.add_argument("--user", required=True)
    p.add_argument("--secret", help="defaults to $MG_SECRET, else prompts")

    p = sub.add_parser("add", help="store DICOM files")
    p.add_argument("files", nargs="+")

    p = sub.add_parser("retrieve", help="fetch an image by gid, lfn or guid")
    p.add_argument("ref")
    p.add_argument("-o", "--output")

    p = sub.add_parser("update", help="change mutable metadata")
    p.add_argument("gid")
    p.add_argument("--set", action="append", required=True, metavar="PATH=VALUE")

    p = sub.add_parser("episode-add", help="record a clinical episode")
    p.add_argument("--patient", required=True)
    p.add_argument("--laterality", required=True, choices=("L", "R"))
    p.add_argument("--diagnosis", required=True)
    p.add_argument("--outcome", required=True)
    p.add_argument("--date", required=True)
    p.add_argument("--therapy-end-date")

    p = sub.add_parser("query", help="run a federated query and print the result XML")
    p.add_argument("text")
    p.add_argument("--formal", action="store_true", help="text is a formal FIND query")

    p = sub.add_parser("alg-add", help="distribute an algorithm pipeline")
    p.add_argument("name")
    p.add_argument("source", nargs="?")
    p.add_argument("--file")

    p = sub.add_parser("alg-exec", help="run an algorithm over images matching a selector")
    p.add_argument("name")
    p.add_argument("selector", help="formal FIND IMAGES query")
    return parser


def mgctl_main(argv=None) -> int:
    args = mgctl_parser().parse_args(argv)
    try:
        MGCTL_COMMANDS[args.cmd](args)
    except CommandFailed as exc:
        print(f"mgctl: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"mgctl: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- mgsim -------------------------------------------------------------------


TOPOLOGY_KINDS = {"clique": clique, "line": line, "ring": ring}


def sim_topology(args) -> tuple[Topology, str]:
    if args.topology:
        return Topology.load(args.topology), Path(args.topology).stem
    sites = [f"site-{i}" for i in range(1, args.sites + 1)]
    return TOPOLOGY_KINDS[args.kind](sites), f"{args.kind}-{args.sites}"


def mgsim_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mgsim", description="In-process federation simulator with oracle checking.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--topology", help="topology file of 'site' and 'link' lines")
    src.add_argument("--kind", choices=sorted(TOPOLOGY_KINDS))
    p.add_argument("--sites", type=int, default=5, help="site count with --kind")
    p.add_argument("--records", type=int, required=True)
    p.add_argument("--queries", help="file with one query per line (user or formal)")
    p.add_argument("--clinical-queries", action="store_true", help="include the two built-in clinical queries")
    p.add_argument("--random-queries", type=int, default=0)
    p.add_argument("--query-seed", type=int, default=7)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--fault", action="append", default=[], help="down:<site>, corrupt-chunk:<n> or fail-chunk:<n>")
    p.add_argument("--xml", help="also write the machine-readable report here")
    p.add_argument("--timing", action="store_true", help="include wall times (makes output nondeterministic)")
    args = parser.parse_args(argv)
    try:
        topology, name = sim_topology(args)
        queries = load_queries(Path(args.queries).read_text()) if args.queries else []
        if args.clinical_queries:
            queries += list(CLINICAL_QUERIES)
        queries += random_queries(args.random_queries, args.query_seed)
        if not queries:
            raise ValidationError("no queries: give --queries, --clinical-queries or --random-queries")
        report = simulate(topology, args.records, queries, args.seed, Faults.parse(args.fault), name)
    except (GridError, OSError) as exc:
        print(f"mgsim: {exc}", file=sys.stderr)
        return EXIT_FAIL
    sys.stdout.write(report.to_text(args.timing))
    if args.xml:
        Path(args.xml).write_text(report.to_xml(args.timing))
    return EXIT_OK if report.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(mgctl_main())
