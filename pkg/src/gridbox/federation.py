"""Inter-site machinery: topology, envelopes, query flooding with duplicate
suppression, message transports and scheduled file transfer."""

from __future__ import annotations

import base64
import logging
import secrets
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from . import auth
from .formal import FormalQuery, format_formal
from .model import MAX_TTL_HOPS, GlobalId, GridError, HEX32_RE, NotFoundError, ValidationError, check_site
from .query import ResultSet, merge_results
from .store import FileCatalogEntry, content_hash
from .wire import Message, ProtocolError, decode_msg, encode_msg, error_message, message_rs, read_frame

log = logging.getLogger(__name__)

CHUNK_SIZE = 64 * 1024
MAX_ATTEMPTS = 3
SEEN_TTL_S = 600


class Unreachable(GridError):
    pass


class TransferFailed(GridError):
    pass


# -- topology ----------------------------------------------------------------


@dataclass
class Topology:
    sites: dict  # site -> "host:port"
    neighbors: dict  # site -> frozenset of sites

    def __post_init__(self) -> None:
        for s, ns in self.neighbors.items():
            for n in ns:
                if n not in self.sites:
                    raise ValidationError(f"link to unregistered site {n}")
                if s not in self.neighbors.get(n, ()):
                    raise ValidationError(f"link {s}-{n} is not symmetric")

    @classmethod
    def build(cls, sites, links) -> "Topology":
        addr = {check_site(s): a for s, a in (sites.items() if isinstance(sites, dict) else ((s, "") for s in sites))}
        nb = {s: set() for s in addr}
        for a, b in links:
            if a not in addr or b not in addr:
                raise ValidationError(f"link {a}-{b} names an unregistered site")
            if a == b:
                raise ValidationError(f"self link on {a}")
            nb[a].add(b)
            nb[b].add(a)
        return cls(addr, {s: frozenset(v) for s, v in nb.items()})

    @classmethod
    def parse(cls, text: str) -> "Topology":
        sites, links = {}, []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "site" and len(parts) == 3:
                if parts[1] in sites:
                    raise ValidationError(f"topology line {n}: duplicate site {parts[1]}")
                sites[parts[1]] = parts[2]
            elif parts[0] == "link" and len(parts) == 3:
                links.append((parts[1], parts[2]))
            else:
                raise ValidationError(f"topology line {n}: expected 'site <id> <host:port>' or 'link <a> <b>'")
        return cls.build(sites, links)

    @classmethod
    def load(cls, path) -> "Topology":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = [f"site {s} {a or '-'}" for s, a in sorted(self.sites.items())]
        edges = sorted({tuple(sorted((a, b))) for a, ns in self.neighbors.items() for b in ns})
        return "\n".join(lines + [f"link {a} {b}" for a, b in edges]) + "\n"

    def directed_edges(self) -> int:
        return sum(len(ns) for ns in self.neighbors.values())

    def connected(self) -> bool:
        if not self.sites:
            return True
        start = next(iter(self.sites))
        seen, todo = {start}, [start]
        while todo:
            for n in self.neighbors[todo.pop()]:
                if n not in seen:
                    seen.add(n)
                    todo.append(n)
        return len(seen) == len(self.sites)


def clique(sites) -> Topology:
    sites = list(sites)
    return Topology.build(sites, [(a, b) for i, a in enumerate(sites) for b in sites[i + 1 :]])


def line(sites) -> Topology:
    sites = list(sites)
    return Topology.build(sites, list(zip(sites, sites[1:])))


def ring(sites) -> Topology:
    sites = list(sites)
    return Topology.build(sites, list(zip(sites, sites[1:] + sites[:1])))


# -- envelopes ---------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    query_id: str
    origin: str
    formal: str
    visited: frozenset
    ttl_hops: int
    token: str

    def __post_init__(self) -> None:
        if not HEX32_RE.fullmatch(self.query_id):
            raise ValidationError(f"query id must be 32 hex chars: {self.query_id!r}")
        if self.origin not in self.visited:
            raise ValidationError("envelope origin must be in the visited set")
        if not 0 <= self.ttl_hops <= MAX_TTL_HOPS:
            raise ValidationError(f"ttl_hops out of range: {self.ttl_hops}")

    def to_message(self, kind: str, body_tag: str = "formal", extra: Optional[dict] = None) -> Message:
        attrs = {"id": self.query_id, "origin": self.origin, "ttl": str(self.ttl_hops), "tok": self.token}
        attrs.update(extra or {})
        kids = tuple(Message("visited", {"site": s}) for s in sorted(self.visited))
        return Message(kind, attrs, "", kids + (Message(body_tag, {}, self.formal),))

    @classmethod
    def from_message(cls, msg: Message, body_tag: str = "formal") -> "Envelope":
        try:
            body = msg.find_all(body_tag)
            return cls(
                msg.attrs["id"],
                msg.attrs["origin"],
                body[0].text if body else "",
                frozenset(v.attrs["site"] for v in msg.find_all("visited")),
                int(msg.attrs["ttl"]),
                msg.attrs["tok"],
            )
        except (KeyError, ValueError, ValidationError) as exc:
            raise ProtocolError(f"malformed {msg.kind} envelope: {exc}") from None


def new_query_id(rng=None) -> str:
    if rng is not None:
        return "%032x" % rng.getrandbits(128)
    return secrets.token_hex(16)


def forward_token(token: str, site: str, key: bytes, now: int) -> str:
    """Token a site attaches when forwarding: delegated unless it already
    carries this site as the latest delegator."""
    tok = auth.Token.decode(token)
    if tok.chain and tok.chain[-1] == site:
        auth.verify(tok, key, now)
        return token
    return auth.delegate(tok, site, key, now).encode()


def analyse(q: FormalQuery, node, token: str, inherited: Optional[Envelope] = None):
    """Split ``q`` into the local query and the envelope for remote sites.

    Every site owns its patients outright, so the local part is ``q`` itself;
    the remote part is None when the site has no neighbours.
    """
    if not node.topology.neighbors.get(node.site):
        return q, None
    now = int(node.clock())
    if inherited is not None:
        env = replace(
            inherited,
            visited=inherited.visited | {node.site},
            token=forward_token(inherited.token, node.site, node.vo_key, now),
        )
        return q, env
    env = Envelope(
        node.new_query_id(),
        node.site,
        format_formal(q),
        frozenset([node.site]),
        node.ttl_hops,
        forward_token(token, node.site, node.vo_key, now),
    )
    return q, env


class SeenTable:
    """query_id -> first-seen time, with expiry so memory stays bounded."""

    def __init__(self, ttl_s: float = SEEN_TTL_S, clock: Callable[[], float] = time.monotonic):
        self.ttl_s = ttl_s
        self.clock = clock
        self._seen: dict[str, float] = {}
        self._lock = threading.Lock()

    def add(self, key: str) -> bool:
        """Record ``key``; False if it was already present and unexpired."""
        now = self.clock()
        with self._lock:
            if len(self._seen) > 1024:
                self._seen = {k: t for k, t in self._seen.items() if now - t < self.ttl_s}
            t = self._seen.get(key)
            if t is not None and now - t < self.ttl_s:
                return False
            self._seen[key] = now
            return True

    def __len__(self) -> int:
        return len(self._seen)


def flood(node, kind: str, env: Envelope, local_fn: Callable[[], ResultSet], *,
          body_tag: str = "formal", extra: Optional[dict] = None) -> ResultSet:
    """Run ``local_fn`` once per query id here and fan the envelope out to
    every neighbour not yet visited; return the merged result."""
    if not node.seen.add(f"{kind}:{env.query_id}"):
        return ResultSet(env.query_id, node.site, {}, (f"duplicate:{node.site}",))
    node.exec_log.append((kind, env.query_id))
    parts = [local_fn()]
    targets = sorted(node.topology.neighbors.get(node.site, frozenset()) - env.visited)
    if env.ttl_hops > 0 and targets:
        try:
            tok = forward_token(env.token, node.site, node.vo_key, int(node.clock()))
        except auth.DelegationExhausted:
            parts.append(ResultSet(env.query_id, node.site, {}, (f"delegation-exhausted:{node.site}",)))
            targets = []
        if targets:
            child = replace(env, visited=env.visited | set(targets), ttl_hops=env.ttl_hops - 1, token=tok)
            msg = child.to_message(kind, body_tag, extra)
            for site, reply in node.fan_out(targets, msg):
                parts.append(_child_result(env.query_id, node.site, site, reply))
    return merge_results(parts)


def _child_result(qid: str, here: str, site: str, reply) -> ResultSet:
    if isinstance(reply, Exception):
        log.info("%s: neighbour %s unreachable: %s", here, site, reply)
        return ResultSet(qid, here, {}, (f"unreachable:{site}",))
    if reply.kind == "error":
        code = reply.get("code", "error")
        return ResultSet(qid, here, {}, (f"{code}:{site}:{reply.text}",))
    try:
        rs = message_rs(reply)
    except GridError as exc:
        return ResultSet(qid, here, {}, (f"protocol:{site}:{exc}",))
    rs.site = here
    if rs.query_id != qid:
        return ResultSet(qid, here, {}, (f"protocol:{site}:query id mismatch",))
    return rs


# -- transports --------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    src: str
    dst: str
    kind: str
    direction: str  # "req" or "resp"
    ref: str = ""


@dataclass
class Faults:
    down: set = field(default_factory=set)
    corrupt_chunks: int = 0
    fail_chunks: int = 0

    @classmethod
    def parse(cls, specs) -> "Faults":
        f = cls()
        for spec in specs or ():
            name, _, arg = spec.partition(":")
            if name == "down":
                f.down.add(check_site(arg))
            elif name == "corrupt-chunk":
                f.corrupt_chunks += int(arg or 1)
            elif name == "fail-chunk":
                f.fail_chunks += int(arg or 1)
            else:
                raise ValidationError(f"unknown fault spec {spec!r}")
        return f


class Transcript:
    def __init__(self):
        self.entries: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def log(self, src, dst, msg: Message, direction: str) -> None:
        ref = msg.get("id") or msg.get("query") or msg.get("guid") or msg.get("ref") or ""
        with self._lock:
            self.entries.append(TranscriptEntry(src, dst, msg.kind, direction, ref))

    def count(self, kind: str, direction: str = "req", ref: Optional[str] = None) -> int:
        return sum(
            1
            for e in self.entries
            if e.kind == kind and e.direction == direction and (ref is None or e.ref == ref)
        )

    def clear(self) -> None:
        with self._lock:
            self.entries.clear()


class LocalNetwork:
    """In-process transport: frames go through the real codec, calls run on
    the caller's thread, and every frame is appended to the transcript."""

    def __init__(self, faults: Optional[Faults] = None):
        self.nodes: dict = {}
        self.transcript = Transcript()
        self.faults = faults or Faults()
        self._lock = threading.Lock()
        self.frames: list[bytes] = []
        self.keep_frames = False

    def register(self, node) -> None:
        self.nodes[node.site] = node

    def _take(self, attr: str) -> bool:
        with self._lock:
            n = getattr(self.faults, attr)
            if n > 0:
                setattr(self.faults, attr, n - 1)
                return True
            return False

    def request(self, src: str, dst: str, msg: Message, timeout: Optional[float] = None) -> Message:
        frame = encode_msg(msg)
        self.transcript.log(src, dst, msg, "req")
        if self.keep_frames:
            self.frames.append(frame)
        node = self.nodes.get(dst)
        if node is None or dst in self.faults.down:
            raise Unreachable(f"site {dst} is not reachable")
        if msg.kind == "file-get" and self._take("fail_chunks"):
            raise Unreachable(f"injected failure fetching from {dst}")
        reply = node.handle(decode_msg(frame), peer=src)
        if reply.kind == "file-chunk" and self._take("corrupt_chunks"):
            data = bytearray(base64.b64decode(reply.text))
            data[len(data) // 2] ^= 0xFF
            reply = replace(reply, text=base64.b64encode(bytes(data)).decode("ascii"))
        out = encode_msg(reply)
        self.transcript.log(dst, src, reply, "resp")
        if self.keep_frames:
            self.frames.append(out)
        return decode_msg(out)


class TcpNetwork:
    """Socket transport addressed through the topology registry."""

    def __init__(self, topology: Topology, timeout: float = 5.0):
        self.topology = topology
        self.timeout = timeout
        self.transcript = Transcript()

    def request(self, src: str, dst: str, msg: Message, timeout: Optional[float] = None) -> Message:
        addr = self.topology.sites.get(dst)
        if not addr:
            raise Unreachable(f"no address for site {dst}")
        self.transcript.log(src, dst, msg, "req")
        try:
            reply = send_request(addr, msg, timeout or self.timeout)
        except (OSError, ProtocolError) as exc:
            raise Unreachable(f"site {dst} at {addr}: {exc}") from None
        self.transcript.log(dst, src, reply, "resp")
        return reply


def split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def send_request(addr: str, msg: Message, timeout: float = 5.0) -> Message:
    with socket.create_connection(split_addr(addr), timeout=timeout) as sock:
        sock.sendall(encode_msg(msg))
        with sock.makefile("rb") as stream:
            reply = read_frame(stream)
    if reply is None:
        raise ProtocolError("connection closed without a reply")
    return reply


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        node = self.server.node
        while True:
            try:
                msg = read_frame(self.rfile)
            except ProtocolError as exc:
                self.wfile.write(encode_msg(error_message("protocol", str(exc))))
                return
            if msg is None:
                return
            self.wfile.write(encode_msg(node.handle(msg, peer=self.client_address[0])))
            self.wfile.flush()


class NodeServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, node, addr: str):
        self.node = node
        super().__init__(split_addr(addr), _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


# -- scheduled file transfer -------------------------------------------------


@dataclass
class TransferJob:
    guid: str
    src: str
    dst: str
    state: str = "queued"
    attempts: int = 0
    error: str = ""


def _chunk_attrs(entry: FileCatalogEntry, index: int, total: int, size: int) -> dict:
    attrs = {"guid": entry.guid, "lfn": entry.lfn, "index": str(index), "total": str(total), "size": str(size)}
    if entry.gid is not None:
        attrs["gid"] = str(entry.gid)
    attrs["replicas"] = ",".join(sorted(entry.replicas))
    return attrs


def chunk_reply(data: bytes, entry: FileCatalogEntry, index: int) -> Message:
    total = max(1, -(-len(data) // CHUNK_SIZE))
    if not 0 <= index < total:
        raise NotFoundError(f"chunk {index} out of range for {entry.guid}")
    piece = data[index * CHUNK_SIZE : (index + 1) * CHUNK_SIZE]
    return Message("file-chunk", _chunk_attrs(entry, index, total, len(data)), base64.b64encode(piece).decode("ascii"))


def pull_file(node, src: str, ref: str, job: TransferJob) -> tuple[bytes, FileCatalogEntry]:
    """Fetch every chunk of ``ref`` from ``src``; verify the whole-file hash."""
    tok = node.service_token()
    first = node.request(src, Message("file-get", {"ref": ref, "index": "0", "tok": tok}))
    if first.kind == "error":
        if first.get("code") == "notfound":
            raise NotFoundError(first.text)
        raise TransferFailed(f"{src}: {first.text}")
    guid = first.attrs["guid"]
    job.guid = guid
    total = int(first.attrs["total"])
    pieces = [base64.b64decode(first.text)]
    for i in range(1, total):
        part = node.request(src, Message("file-get", {"ref": guid, "index": str(i), "tok": tok}))
        if part.kind == "error":
            raise TransferFailed(f"{src}: {part.text}")
        pieces.append(base64.b64decode(part.text))
    data = b"".join(pieces)
    if len(data) != int(first.attrs["size"]) or content_hash(data) != guid:
        raise TransferFailed(f"checksum mismatch for {guid} from {src}")
    gid = first.attrs.get("gid")
    entry = FileCatalogEntry(
        first.attrs["lfn"],
        guid,
        frozenset(first.attrs.get("replicas", src).split(",")),
        GlobalId.parse(gid) if gid else None,
    )
    return data, entry


def transfer_file(node, ref: str, src: str, backoff_s: float = 0.05) -> tuple[TransferJob, bytes, Optional[FileCatalogEntry]]:
    """Pull ``ref`` (guid, gid or lfn) from ``src`` to ``node`` with up to
    three attempts and exponential backoff between them."""
    job = TransferJob(ref, src, node.site)
    node.transfers.append(job)
    data, entry = b"", None
    while job.attempts < MAX_ATTEMPTS:
        job.attempts += 1
        job.state = "active"
        try:
            data, entry = pull_file(node, src, ref, job)
        except NotFoundError:
            job.state = "failed"
            raise
        except (TransferFailed, Unreachable, ValueError) as exc:
            job.error = str(exc)
            log.info("transfer of %s from %s failed (attempt %d): %s", ref, src, job.attempts, exc)
            if job.attempts < MAX_ATTEMPTS and backoff_s:
                time.sleep(backoff_s * 2 ** (job.attempts - 1))
            continue
        job.state = "done"
        return job, data, entry
    job.state = "failed"
    return job, b"", None
