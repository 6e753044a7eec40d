"""Desk-scale federation simulator with centralised oracle checking."""

from __future__ import annotations

import datetime as dt
import hashlib
import random
import time
from dataclasses import dataclass, field
from typing import Optional
from xml.sax.saxutils import escape

from . import dicom
from .auth import UserTable, authenticate, hash_secret
from .federation import Faults, LocalNetwork, Topology, Unreachable
from .formal import (
    IMAGES,
    PATIENTS,
    And,
    Cmp,
    Exists,
    FormalQuery,
    Not,
    Or,
    Ref,
    format_formal,
    parse_formal,
)
from .node import Gridbox
from .oracle import oracle_answer
from .query import Vocabulary, translate
from .wire import Message, message_rs

SIM_EPOCH = 1_100_000_000
CLINICAL_QUERIES = (
    "find all mammographic images for all women over 50 undergoing HRT treatment",
    "find all patients who have developed cancer in the other breast after successful therapy on the first cancer",
)
USERS = {"alice": ("alice-secret", ("reader",)), "loader": ("loader-secret", ("writer",)), "root": ("root-secret", ("admin",))}


# -- synthetic data ----------------------------------------------------------


@dataclass
class SynthEpisode:
    laterality: str
    diagnosis: str
    therapy_outcome: str
    date: str
    therapy_end_date: Optional[str] = None


@dataclass
class SynthPatient:
    index: int
    patient_id: str
    name: str
    age: int
    sex: str
    hrt: bool
    images: list = field(default_factory=list)  # raw (pre-anonymisation) DICOM bytes
    episodes: list = field(default_factory=list)
    contralateral: bool = False


def _date(rng: random.Random, start: int, end: int) -> dt.date:
    a = dt.date(start, 1, 1).toordinal()
    b = dt.date(end, 12, 31).toordinal()
    return dt.date.fromordinal(rng.randint(a, b))


def _episode(rng: random.Random) -> SynthEpisode:
    d = _date(rng, 1995, 2004)
    if rng.random() < 0.20:
        outcome = rng.choice(("successful", "failed"))
        end = d + dt.timedelta(days=rng.randint(30, 365))
        return SynthEpisode(rng.choice("LR"), "cancer", outcome, d.isoformat(), end.isoformat())
    return SynthEpisode(rng.choice("LR"), rng.choice(("benign", "normal")), "none", d.isoformat())


def _contralateral(rng: random.Random) -> list:
    first = rng.choice("LR")
    other = "R" if first == "L" else "L"
    d1 = _date(rng, 1995, 2000)
    end = d1 + dt.timedelta(days=rng.randint(60, 300))
    d2 = end + dt.timedelta(days=rng.randint(30, 900))
    return [
        SynthEpisode(first, "cancer", "successful", d1.isoformat(), end.isoformat()),
        SynthEpisode(other, "cancer", rng.choice(("successful", "failed", "none")), d2.isoformat()),
    ]


def generate(n: int, seed: int) -> list[SynthPatient]:
    """Deterministic synthetic patients, each with 1-2 small images."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        age = rng.randint(35, 85)
        sex = "F" if rng.random() < 0.95 else "M"
        hrt = rng.random() < 0.30
        p = SynthPatient(i, f"SIM{seed}X{i:06d}", f"Simpatient^Number{i:05d}^S{seed}", age, sex, hrt)
        if rng.random() < 0.02:
            p.contralateral = True
            p.episodes = _contralateral(rng)
        else:
            p.episodes = [_episode(rng) for _ in range(rng.randint(0, 3))]
        study = _date(rng, 2002, 2004)
        birth = dt.date(study.year - age, rng.randint(1, 12), rng.randint(1, 28))
        for k in range(rng.randint(1, 2)):
            rows, cols = rng.choice(((2, 2), (3, 4), (4, 4)))
            pixels = [rng.randint(0, 255) for _ in range(rows * cols)]
            fields = {
                dicom.STUDY_DATE: study.strftime("%Y%m%d"),
                dicom.MODALITY: "MG",
                dicom.HRT_FLAG: f"HRT={int(hrt)}",
                dicom.PATIENT_NAME: p.name,
                dicom.PATIENT_ID: p.patient_id,
                dicom.PATIENT_BIRTH_DATE: birth.strftime("%Y%m%d"),
                dicom.PATIENT_SEX: sex,
                dicom.PATIENT_AGE: f"{age:03d}Y",
                dicom.VIEW_POSITION: ("CC", "MLO")[k % 2],
                dicom.IMAGE_LATERALITY: rng.choice("LR"),
            }
            p.images.append(dicom.write_dicom(dicom.build(fields, pixels, rows, cols)))
        out.append(p)
    return out


# -- random queries ----------------------------------------------------------


_PATIENT_PREDS = (
    ("patient.age", "int", lambda r: r.randint(30, 90)),
    ("patient.sex", "str", lambda r: r.choice("FM")),
    ("patient.hrt", "bool", lambda r: r.random() < 0.5),
    ("patient.site", "str", lambda r: f"site-{r.randint(1, 6)}"),
    ("patient.pseudoid", "str", lambda r: "%016x" % r.getrandbits(64)),
)
_IMAGE_PREDS = (
    ("image.view", "str", lambda r: r.choice(("CC", "MLO"))),
    ("image.laterality", "str", lambda r: r.choice("LR")),
    ("image.study_date", "date", lambda r: _date(r, 2002, 2004).isoformat()),
    ("image.rows", "int", lambda r: r.choice((2, 3, 4))),
    ("image.cols", "int", lambda r: r.choice((2, 4))),
    ("image.modality", "str", lambda r: r.choice(("MG", "CT"))),
)
_EPISODE_PREDS = (
    ("laterality", "str", lambda r: r.choice("LR")),
    ("diagnosis", "str", lambda r: r.choice(("cancer", "benign", "normal"))),
    ("therapy_outcome", "str", lambda r: r.choice(("successful", "failed", "none"))),
    ("date", "date", lambda r: _date(r, 1995, 2004).isoformat()),
    ("therapy_end_date", "date", lambda r: _date(r, 1995, 2005).isoformat()),
)


def _random_cmp(rng: random.Random, target: str, aliases: list) -> Cmp:
    pool = list(_PATIENT_PREDS)
    if target == IMAGES:
        pool += _IMAGE_PREDS
    for a in aliases:
        pool += [(f"{a}.{n}", t, g) for n, t, g in _EPISODE_PREDS]
    path, typ, gen = rng.choice(pool)
    ops = ("=", "!=") if typ == "bool" else ("=", "!=", "<", "<=", ">", ">=")
    op = rng.choice(ops)
    if len(aliases) >= 2 and path.startswith(aliases[-1] + ".") and rng.random() < 0.4:
        field_name = path.split(".", 1)[1]
        return Cmp(path, op, Ref(f"{rng.choice(aliases[:-1])}.{field_name}"))
    return Cmp(path, op, gen(rng))


def _random_expr(rng: random.Random, target: str, depth: int, aliases: list):
    roll = rng.random()
    if depth <= 0 or roll < 0.35:
        return _random_cmp(rng, target, aliases)
    if roll < 0.55:
        return And(tuple(_random_expr(rng, target, depth - 1, aliases) for _ in range(rng.randint(2, 3))))
    if roll < 0.70:
        return Or(tuple(_random_expr(rng, target, depth - 1, aliases) for _ in range(2)))
    if roll < 0.80:
        return Not(_random_expr(rng, target, depth - 1, aliases))
    if len(aliases) < 2:
        alias = f"e{len(aliases) + 1}"
        return Exists(alias, _random_expr(rng, target, depth - 1, aliases + [alias]))
    return _random_cmp(rng, target, aliases)


def random_query(rng: random.Random, depth: int = 3) -> FormalQuery:
    target = rng.choice((IMAGES, PATIENTS))
    return FormalQuery(target, _random_expr(rng, target, depth, []))


def random_queries(n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    return [format_formal(random_query(rng)) for _ in range(n)]


def load_queries(text: str) -> list[str]:
    return [line.strip() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]


# -- federation harness ------------------------------------------------------


def sim_key(seed: int) -> bytes:
    return hashlib.sha256(f"gridbox-sim-vo-key-{seed}".encode()).digest()


class Federation:
    """Boots one in-process node per site and loads synthetic data."""

    def __init__(self, topology: Topology, seed: int, faults: Optional[Faults] = None,
                 concurrent: bool = False, ttl_hops: int = 8, clock=None):
        self.topology = topology
        self.seed = seed
        self.key = sim_key(seed)
        self.clock = clock or (lambda: SIM_EPOCH)
        self.network = LocalNetwork(faults)
        self.users = UserTable()
        salt_rng = random.Random(seed)
        for user, (secret, roles) in USERS.items():
            self.users.entries[user] = (hash_secret(secret, salt_rng.randbytes(16)), roles)
        self.nodes = {}
        for i, site in enumerate(sorted(topology.sites)):
            self.nodes[site] = Gridbox(
                site,
                self.key,
                self.users,
                topology,
                self.network,
                clock=self.clock,
                rng=random.Random(seed * 1000 + i),
                concurrent=concurrent,
                ttl_hops=ttl_hops,
                transfer_backoff_s=0.0,
            )
        self.patients: list[SynthPatient] = []

    def token(self, user: str = "alice") -> str:
        secret, _ = USERS[user]
        return authenticate(self.users, user, secret, self.key, int(self.clock())).encode()

    def load(self, patients: list[SynthPatient]) -> None:
        sites = sorted(self.nodes)
        tok = self.token("loader")
        for p in patients:
            store = self.nodes[sites[p.index % len(sites)]].store
            pat = None
            for raw in p.images:
                res = store.add_image(raw, tok)
                pat = store.images[res.gid].patient
            for ep in p.episodes:
                store.add_episode(
                    {
                        "patient": pat,
                        "laterality": ep.laterality,
                        "diagnosis": ep.diagnosis,
                        "therapy_outcome": ep.therapy_outcome,
                        "date": ep.date,
                        "therapy_end_date": ep.therapy_end_date,
                    },
                    tok,
                )
        self.patients.extend(patients)

    def snapshots(self) -> list:
        return [n.store.snapshot() for n in self.nodes.values()]

    def client_query(self, site: str, text: str, token: Optional[str] = None):
        body = "formal" if text.lstrip().startswith("FIND ") else "user"
        msg = Message("query", {"tok": token or self.token()}, "", (Message(body, {}, text),))
        return self.network.request("client", site, msg)

    def formal(self, text: str) -> FormalQuery:
        if text.lstrip().startswith("FIND "):
            return parse_formal(text)
        return translate(text, Vocabulary.default())


# -- reports -----------------------------------------------------------------


def records_hash(records: dict) -> str:
    h = hashlib.sha256()
    for gid in sorted(records):
        h.update(str(gid).encode())
        for name, value in records[gid]:
            h.update(b"\x1f" + name.encode() + b"=" + value.encode())
        h.update(b"\x1e")
    return h.hexdigest()


@dataclass
class QueryRun:
    index: int
    origin: str
    query: str
    result_hash: str
    oracle_hash: str
    match: bool
    records: int
    messages: dict
    once: bool
    bound: bool
    warnings: tuple = ()
    wall_ms: float = 0.0
    diff: str = ""


@dataclass
class SimReport:
    topology: str
    records: int
    seed: int
    runs: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.match for r in self.runs)

    def to_text(self, timing: bool = False) -> str:
        head = f"{'#':>4} {'origin':<10} {'match':<5} {'result':<12} {'oracle':<12} {'recs':>5} {'query':>5} {'chunk':>5} once bound"
        if timing:
            head += "   wall_ms"
        lines = [f"mgsim topology={self.topology} records={self.records} seed={self.seed}", head]
        for r in self.runs:
            row = (
                f"{r.index:>4} {r.origin:<10} {str(r.match).lower():<5} {r.result_hash[:12]:<12} "
                f"{r.oracle_hash[:12]:<12} {r.records:>5} {r.messages.get('query', 0):>5} "
                f"{r.messages.get('file-chunk', 0):>5} {str(r.once).lower():<4} {str(r.bound).lower()}"
            )
            if timing:
                row += f" {r.wall_ms:9.1f}"
            lines.append(row)
            if r.diff:
                lines.append(f"     diff: {r.diff}")
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'} ({sum(r.match for r in self.runs)}/{len(self.runs)} match)")
        return "\n".join(lines) + "\n"

    def to_xml(self, timing: bool = False) -> str:
        out = [
            f'<simreport topology="{escape(self.topology)}" records="{self.records}" seed="{self.seed}" '
            f'pass="{str(self.passed).lower()}">'
        ]
        for r in self.runs:
            msgs = "".join(f'<messages type="{k}" count="{v}"/>' for k, v in sorted(r.messages.items()))
            wall = f' wall-ms="{r.wall_ms:.1f}"' if timing else ""
            out.append(
                f'<run index="{r.index}" origin="{r.origin}" match="{str(r.match).lower()}" '
                f'result-hash="{r.result_hash}" oracle-hash="{r.oracle_hash}" records="{r.records}" '
                f'once="{str(r.once).lower()}" bound="{str(r.bound).lower()}"{wall}>'
                f"<query>{escape(r.query)}</query>{msgs}</run>"
            )
        out.append("</simreport>")
        return "\n".join(out) + "\n"


def _diff(got: dict, want: dict) -> str:
    extra = sorted(str(g) for g in set(got) - set(want))
    missing = sorted(str(g) for g in set(want) - set(got))
    changed = sorted(str(g) for g in set(got) & set(want) if got[g] != want[g])
    parts = []
    for label, items in (("extra", extra), ("missing", missing), ("changed", changed)):
        if items:
            parts.append(f"{label}={','.join(items[:10])}{'...' if len(items) > 10 else ''}")
    return " ".join(parts)


def run_queries(fed: Federation, queries: list[str], name: str = "", start_index: int = 0) -> SimReport:
    report = SimReport(name, len(fed.patients), fed.seed)
    snaps = fed.snapshots()
    edges = fed.topology.directed_edges()
    token = fed.token()
    for qi, text in enumerate(queries, start_index):
        expected = oracle_answer(fed.formal(text), snaps)
        want_hash = records_hash(expected)
        for origin in sorted(fed.nodes):
            mark = len(fed.network.transcript.entries)
            t0 = time.perf_counter()
            try:
                reply = fed.client_query(origin, text, token)
            except Unreachable as exc:
                reply = Message("error", {"code": "unreachable"}, f"origin unreachable: {exc}")
            wall = (time.perf_counter() - t0) * 1000
            entries = fed.network.transcript.entries[mark:]
            counts = {}
            for e in entries:
                if e.direction == "req" and e.src != "client":
                    counts[e.kind] = counts.get(e.kind, 0) + 1
            if reply.kind == "error":
                report.runs.append(
                    QueryRun(qi, origin, text, "", want_hash, False, 0, counts, False, False, (), wall, reply.text)
                )
                continue
            rs = message_rs(reply)
            once = all(
                sum(1 for k, q in n.exec_log if k == "query" and q == rs.query_id) <= 1 for n in fed.nodes.values()
            )
            got_hash = records_hash(rs.records)
            match = rs.records == expected
            report.runs.append(
                QueryRun(
                    qi,
                    origin,
                    text,
                    got_hash,
                    want_hash,
                    match,
                    len(rs.records),
                    counts,
                    once,
                    counts.get("query", 0) <= edges,
                    rs.warnings,
                    wall,
                    "" if match else _diff(rs.records, expected),
                )
            )
    return report


def simulate(topology: Topology, records: int, queries: list[str], seed: int,
             faults: Optional[Faults] = None, name: str = "", concurrent: bool = False) -> SimReport:
    fed = Federation(topology, seed, faults, concurrent=concurrent)
    fed.load(generate(records, seed))
    return run_queries(fed, queries, name)
