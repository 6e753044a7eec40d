"""A Gridbox: one site's full service stack behind a message dispatcher."""

from __future__ import annotations

import base64
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import auth, dicom
from .auth import AuthError, UserTable
from .federation import (
    Envelope,
    SeenTable,
    Topology,
    Unreachable,
    analyse,
    chunk_reply,
    flood,
    forward_token,
    new_query_id,
    transfer_file,
)
from .formal import IMAGES, FormalQuery, GridError, parse_formal
from .model import GlobalId, NotFoundError, ValidationError, format_number
from .pipeline import NAME_RE, PipelineError, parse_pipeline, run_pipeline
from .query import ResultSet, Vocabulary, eval_local, translate
from .store import Store, StoreError
from .wire import Message, ProtocolError, error_message, rs_message

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    source: str
    version: int


def error_code(exc: Exception) -> str:
    if isinstance(exc, AuthError):
        return "auth"
    if isinstance(exc, NotFoundError):
        return "notfound"
    if isinstance(exc, ProtocolError):
        return "protocol"
    return "invalid"


class Gridbox:
    def __init__(
        self,
        site: str,
        vo_key: bytes,
        users: UserTable,
        topology: Topology,
        network,
        data_dir=None,
        vocab: Optional[Vocabulary] = None,
        ttl_hops: int = 8,
        query_timeout_ms: int = 5000,
        anonymize_on_add: bool = True,
        clock: Callable[[], float] = time.time,
        rng=None,
        concurrent: bool = True,
        fsync: bool = True,
        transfer_backoff_s: float = 0.05,
    ):
        if site not in topology.sites:
            raise ValidationError(f"site {site} is not in the topology")
        self.site = site
        self.vo_key = vo_key
        self.users = users
        self.topology = topology
        self.network = network
        self.vocab = vocab or Vocabulary.default()
        self.ttl_hops = ttl_hops
        self.query_timeout = query_timeout_ms / 1000.0
        self.clock = clock
        self.rng = rng
        self.concurrent = concurrent
        self.transfer_backoff_s = transfer_backoff_s
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.store = Store(site, vo_key, data_dir, anonymize_on_add, clock=clock, fsync=fsync)
        self.store.fetcher = self._fetch_remote
        self.seen = SeenTable()
        self.exec_log: list[tuple[str, str]] = []
        self.transfers: list = []
        self.algorithms: dict[str, AlgorithmSpec] = {}
        self._alg_lock = threading.Lock()
        self._id_lock = threading.Lock()
        self._load_algorithms()
        if hasattr(network, "register"):
            network.register(self)

    # -- plumbing -----------------------------------------------------------

    def new_query_id(self) -> str:
        with self._id_lock:
            return new_query_id(self.rng)

    def request(self, dst: str, msg: Message) -> Message:
        return self.network.request(self.site, dst, msg, self.query_timeout)

    def fan_out(self, targets, msg: Message):
        """Send ``msg`` to every target; yields (site, reply or exception)."""
        if not self.concurrent or len(targets) == 1:
            for t in targets:
                try:
                    yield t, self.request(t, msg)
                except (Unreachable, OSError, GridError) as exc:
                    yield t, exc
            return
        pool = ThreadPoolExecutor(max_workers=len(targets), thread_name_prefix=f"{self.site}-fanout")
        try:
            futures = [(t, pool.submit(self.request, t, msg)) for t in targets]
            deadline = time.monotonic() + self.query_timeout
            for t, fut in futures:
                try:
                    yield t, fut.result(timeout=max(0.0, deadline - time.monotonic()))
                except FutureTimeout:
                    yield t, Unreachable(f"{t} timed out")
                except (Unreachable, OSError, GridError) as exc:
                    yield t, exc
        finally:
            pool.shutdown(wait=False)

    def _origin_envelope(self, body: str, token: str) -> Envelope:
        if not self.topology.neighbors.get(self.site):
            return Envelope(self.new_query_id(), self.site, body, frozenset([self.site]), 0, token)
        tok = forward_token(token, self.site, self.vo_key, int(self.clock()))
        return Envelope(self.new_query_id(), self.site, body, frozenset([self.site]), self.ttl_hops, tok)

    def service_token(self) -> str:
        """Short-lived token the site uses for its own transfer requests."""
        tok = auth.sign(auth.Token(f"site:{self.site}", ("reader",), int(self.clock()), 60, 0), self.vo_key)
        return tok.encode()

    def _claims(self, msg: Message, action: str) -> auth.Claims:
        tok = msg.get("tok")
        if not tok:
            raise AuthError("message carries no token")
        return self.store.require(tok, action)

    # -- dispatch -----------------------------------------------------------

    def handle(self, msg: Message, peer: str = "") -> Message:
        handler = getattr(self, "_on_" + msg.kind.replace("-", "_"), None)
        if handler is None:
            return error_message("protocol", f"unsupported message type {msg.kind}")
        try:
            return handler(msg)
        except (GridError, KeyError, ValueError) as exc:
            if not isinstance(exc, (AuthError, NotFoundError)):
                log.info("%s: %s request failed: %s", self.site, msg.kind, exc)
            text = str(exc) if isinstance(exc, GridError) else f"bad request: {exc}"
            return error_message(error_code(exc), text)

    def _on_auth(self, msg: Message) -> Message:
        tok = auth.authenticate(self.users, msg.attrs["user"], msg.get("secret", ""), self.vo_key, int(self.clock()))
        return Message("auth", {"user": tok.user, "tok": tok.encode()})

    def _on_file_put(self, msg: Message) -> Message:
        res = self.store.add_image(base64.b64decode(msg.text), msg.get("tok"))
        return Message(
            "file-put",
            {"gid": str(res.gid), "guid": res.guid, "lfn": res.lfn, "duplicate": "true" if res.duplicate else "false"},
        )

    def _on_file_get(self, msg: Message) -> Message:
        ref = msg.attrs["ref"]
        index = int(msg.get("index", "0"))
        tok = msg.get("tok")
        try:
            self._claims(msg, "retrieve")
            data, entry = self.store.local_bytes(ref)
        except NotFoundError:
            if re.fullmatch(r"[0-9a-f]{64}", ref):
                raise
            data = self.store.retrieve_image(ref, tok)
            _, entry = self.store.local_bytes(ref)
        return chunk_reply(data, entry, index)

    def _on_update(self, msg: Message) -> Message:
        changes = {c.attrs["path"]: c.text for c in msg.find_all("set")}
        self.store.update_meta(msg.attrs["gid"], changes, msg.get("tok"))
        return Message("update", {"gid": msg.attrs["gid"], "status": "ok"})

    def _on_episode_add(self, msg: Message) -> Message:
        fields = {k: v for k, v in msg.attrs.items() if k != "tok"}
        gid = self.store.add_episode(fields, msg.get("tok"))
        return Message("episode-add", {"gid": str(gid), "status": "ok"})

    # queries

    def _on_query(self, msg: Message) -> Message:
        claims = self._claims(msg, "query")
        if "id" in msg.attrs:
            env = Envelope.from_message(msg)
            rs = self.handle_query(env)
        else:
            user = msg.find_all("user")
            formal = msg.find_all("formal")
            if formal:
                q = parse_formal(formal[0].text)
            elif user:
                q = translate(user[0].text, self.vocab)
            else:
                raise ProtocolError("query needs a <formal> or <user> body")
            rs = self.query(q, msg.attrs["tok"], claims)
        return rs_message(rs)

    def query(self, q: FormalQuery, token: str, claims=None) -> ResultSet:
        """Resolve ``q`` from this site across the federation."""
        if claims is None:
            self.store.require(token, "query")
        _, env = analyse(q, self, token)
        return self.handle_query(env or self._origin_envelope(str(q), token))

    def handle_query(self, env: Envelope) -> ResultSet:
        q = parse_formal(env.formal)
        return flood(self, "query", env, lambda: eval_local(q, self.store, env.query_id))

    # algorithms

    def _load_algorithms(self) -> None:
        if self.data_dir is None:
            return
        path = self.data_dir / "algorithms.txt"
        if not path.exists():
            return
        for raw in path.read_text().splitlines():
            if raw.strip():
                name, version, source = raw.split("|", 2)
                self.algorithms[name] = AlgorithmSpec(name, source, int(version))

    def _store_algorithm(self, spec: AlgorithmSpec) -> bool:
        with self._alg_lock:
            cur = self.algorithms.get(spec.name)
            if cur is not None and cur.version >= spec.version:
                return False
            self.algorithms[spec.name] = spec
            if self.data_dir is not None:
                self.data_dir.mkdir(parents=True, exist_ok=True)
                lines = [f"{a.name}|{a.version}|{a.source}\n" for a in sorted(self.algorithms.values(), key=lambda a: a.name)]
                tmp = self.data_dir / "algorithms.txt.tmp"
                tmp.write_text("".join(lines))
                tmp.replace(self.data_dir / "algorithms.txt")
            return True

    def _on_alg_add(self, msg: Message) -> Message:
        self._claims(msg, "addAlgorithm")
        name = msg.attrs["name"]
        if "id" in msg.attrs:
            env = Envelope.from_message(msg, "source")
            version = int(msg.attrs["version"])
            rs = self._flood_alg_add(env, name, version)
        else:
            source = msg.find_all("source")[0].text
            version, rs = self.add_algorithm(name, source, msg.attrs["tok"])
        return _alg_result(rs, name, version)

    def add_algorithm(self, name: str, source: str, token: str) -> tuple[int, ResultSet]:
        self.store.require(token, "addAlgorithm")
        if not NAME_RE.fullmatch(name):
            raise ValidationError(f"invalid algorithm name {name!r}")
        parse_pipeline(source)
        with self._alg_lock:
            cur = self.algorithms.get(name)
            version = (cur.version if cur else 0) + 1
        return version, self._flood_alg_add(self._origin_envelope(source, token), name, version)

    def _flood_alg_add(self, env: Envelope, name: str, version: int) -> ResultSet:
        def local():
            parse_pipeline(env.formal)
            self._store_algorithm(AlgorithmSpec(name, env.formal, version))
            return ResultSet(env.query_id, self.site)

        return flood(self, "alg-add", env, local, body_tag="source", extra={"name": name, "version": str(version)})

    def _on_alg_exec(self, msg: Message) -> Message:
        self._claims(msg, "executeAlgorithm")
        name = msg.attrs["name"]
        if "id" in msg.attrs:
            rs = self._flood_alg_exec(Envelope.from_message(msg), name)
        else:
            selector = parse_formal(msg.find_all("formal")[0].text)
            rs = self.execute_algorithm(selector, name, msg.attrs["tok"])
        return rs_message(rs, "alg-result")

    def execute_algorithm(self, selector: FormalQuery, name: str, token: str) -> ResultSet:
        self.store.require(token, "executeAlgorithm")
        if selector.target != IMAGES:
            raise ValidationError("algorithm selectors must be FIND IMAGES queries")
        if not NAME_RE.fullmatch(name):
            raise ValidationError(f"invalid algorithm name {name!r}")
        _, env = analyse(selector, self, token)
        return self._flood_alg_exec(env or self._origin_envelope(str(selector), token), name)

    def _flood_alg_exec(self, env: Envelope, name: str) -> ResultSet:
        selector = parse_formal(env.formal)
        return flood(self, "alg-exec", env, lambda: self.run_local_algorithm(selector, name, env.query_id),
                     extra={"name": name})

    def run_local_algorithm(self, selector: FormalQuery, name: str, query_id: str) -> ResultSet:
        spec = self.algorithms.get(name)
        if spec is None:
            return ResultSet(query_id, self.site, {}, (f"noalg:{self.site}",))
        pipeline = parse_pipeline(spec.source)
        matches = eval_local(selector, self.store, query_id)
        records, warnings = {}, []
        attr = f"alg.{name}.value"
        for gid in matches.gids():
            img = self.store.images[gid]
            try:
                obj = dicom.parse_dicom(self.store.blobs.get(img.guid))
                value = run_pipeline(pipeline, obj.pixels(), img.rows, img.cols, obj.bits_allocated)
            except (PipelineError, dicom.DicomError, NotFoundError) as exc:
                log.info("%s: %s failed on %s: %s", self.site, name, gid, exc)
                warnings.append(f"algfail:{gid}")
                continue
            if isinstance(value, list):
                text = ",".join(str(v) for v in value)
            else:
                self.store.set_derived(gid, name, value)
                text = format_number(value)
            records[gid] = (("image.gid", str(gid)), (attr, text))
        return ResultSet(query_id, self.site, records, tuple(warnings))

    # retrieval

    def _fetch_remote(self, ref: str):
        if ref.startswith("lfn://"):
            owner = ref[len("lfn://"):].split("/", 1)[0]
        else:
            owner = GlobalId.parse(ref).site
        if owner not in self.topology.sites:
            raise NotFoundError(f"unknown site {owner}")
        job, data, entry = transfer_file(self, ref, owner, self.transfer_backoff_s)
        if job.state != "done":
            raise StoreError(f"transfer of {ref} from {owner} failed after {job.attempts} attempts: {job.error}")
        return data, entry

    def retrieve(self, ref: str, token: str) -> bytes:
        return self.store.retrieve_image(ref, token)


def _alg_result(rs: ResultSet, name: str, version: int) -> Message:
    msg = rs_message(rs, "alg-result")
    msg.attrs["name"] = name
    msg.attrs["version"] = str(version)
    return msg
