"""Query translation, local evaluation, result merging and the result XML codec."""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence
from xml.sax.saxutils import escape

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
    check_types,
    parse_predicate,
    referenced_algs,
)
from .model import HEX32_RE, GlobalId, GridError, SITE_RE, ValidationError, format_number

IMAGE_FIELDS = (
    "image.gid",
    "image.view",
    "image.laterality",
    "image.study_date",
    "patient.pseudoid",
    "patient.age",
)
PATIENT_FIELDS = ("patient.pseudoid", "patient.age", "patient.sex", "patient.hrt", "patient.site")


class TranslationError(GridError):
    pass


class MergeError(GridError):
    pass


class SchemaError(GridError):
    pass


# -- result sets -------------------------------------------------------------


@dataclass
class ResultSet:
    query_id: str
    site: str
    records: dict = field(default_factory=dict)  # GlobalId -> tuple of (name, value)
    warnings: tuple = ()

    def gids(self) -> list[GlobalId]:
        return sorted(self.records)

    def ordered(self) -> list[tuple[GlobalId, tuple]]:
        return [(g, self.records[g]) for g in self.gids()]


def _warnings(items) -> tuple:
    return tuple(sorted(set(items)))


def merge_results(parts: Sequence[ResultSet]) -> ResultSet:
    if not parts:
        raise MergeError("nothing to merge")
    qid = parts[0].query_id
    records: dict = {}
    warnings = []
    for part in parts:
        if part.query_id != qid:
            raise MergeError(f"query id mismatch: {part.query_id} vs {qid}")
        for gid, fields in part.records.items():
            prior = records.get(gid)
            if prior is not None and prior != fields:
                raise MergeError(f"conflicting records for {gid}")
            records[gid] = fields
        warnings.extend(part.warnings)
    return ResultSet(qid, parts[0].site, dict(sorted(records.items())), _warnings(warnings))


_SPECIAL = re.compile(r'[&<>"\n\r\t]')


def _attr(value: str) -> str:
    if not _SPECIAL.search(value):
        return '"' + value + '"'
    return '"' + escape(value, {'"': "&quot;", "\n": "&#10;", "\r": "&#13;", "\t": "&#9;"}) + '"'


def _text(value: str) -> str:
    if not _SPECIAL.search(value):
        return value
    return escape(value, {"\r": "&#13;"})


def resultset_xml(rs: ResultSet, root: str = "resultset", extra: Optional[dict] = None) -> bytes:
    attrs = f"query={_attr(rs.query_id)} site={_attr(rs.site)}"
    for k, v in (extra or {}).items():
        attrs += f" {k}={_attr(v)}"
    body = []
    for w in rs.warnings:
        body.append(f"<warning>{_text(w)}</warning>" if w else "<warning/>")
    for gid, fields in rs.ordered():
        inner = "".join(f"<f n={_attr(n)}>{_text(v)}</f>" if v else f"<f n={_attr(n)}/>" for n, v in fields)
        body.append(f"<record gid={_attr(str(gid))}>{inner}</record>" if inner else f"<record gid={_attr(str(gid))}/>")
    if not body:
        return f"<{root} {attrs}/>".encode("utf-8")
    return f"<{root} {attrs}>{''.join(body)}</{root}>".encode("utf-8")


def element_resultset(el: ET.Element, root: str = "resultset", extra=("tok",)) -> ResultSet:
    """Validate a parsed resultset element against the schema and decode it."""
    path = f"/{root}"
    if el.tag != root:
        raise SchemaError(f"{path}: expected root <{root}>, found <{el.tag}>")
    allowed = {"query", "site", *extra}
    bad = set(el.attrib) - allowed
    if bad or "query" not in el.attrib or "site" not in el.attrib:
        raise SchemaError(f"{path}: attributes must be query and site, got {sorted(el.attrib)}")
    qid, site = el.get("query"), el.get("site")
    if not HEX32_RE.fullmatch(qid):
        raise SchemaError(f"{path}/@query: not a 32-hex id: {qid!r}")
    if not SITE_RE.fullmatch(site):
        raise SchemaError(f"{path}/@site: invalid site id {site!r}")
    if (el.text or "").strip():
        raise SchemaError(f"{path}: unexpected text content")
    warnings, records = [], {}
    seen_record = False
    for i, child in enumerate(el, 1):
        cpath = f"{path}/{child.tag}[{i}]"
        if (child.tail or "").strip():
            raise SchemaError(f"{cpath}: unexpected trailing text")
        if child.tag == "warning":
            if seen_record:
                raise SchemaError(f"{cpath}: warnings must precede records")
            if child.attrib or len(child):
                raise SchemaError(f"{cpath}: warning takes text only")
            warnings.append(child.text or "")
        elif child.tag == "record":
            seen_record = True
            if set(child.attrib) != {"gid"}:
                raise SchemaError(f"{cpath}: record needs exactly a gid attribute")
            try:
                gid = GlobalId.parse(child.get("gid"))
            except ValidationError as exc:
                raise SchemaError(f"{cpath}/@gid: {exc}") from None
            if gid in records:
                raise SchemaError(f"{cpath}: duplicate record {gid}")
            fields = []
            for j, f in enumerate(child, 1):
                fpath = f"{cpath}/{f.tag}[{j}]"
                if f.tag != "f" or set(f.attrib) != {"n"} or len(f):
                    raise SchemaError(f"{fpath}: expected <f n=...>value</f>")
                fields.append((f.get("n"), f.text or ""))
            records[gid] = tuple(fields)
        else:
            raise SchemaError(f"{cpath}: unexpected element")
    return ResultSet(qid, site, dict(sorted(records.items())), tuple(warnings))


def xml_resultset(data: bytes, root: str = "resultset") -> ResultSet:
    try:
        el = ET.fromstring(data)
    except ET.ParseError as exc:
        raise SchemaError(f"malformed XML: {exc}") from None
    return element_resultset(el, root, extra=())


# -- local evaluation --------------------------------------------------------


def _resolve(path: str, env: dict):
    root, _, rest = path.partition(".")
    if root == "alg":
        img = env.get("image")
        return None if img is None else img.derived.get(rest.split(".")[0])
    obj = env.get(root)
    if obj is None:
        return None
    if root == "image" and rest == "gid":
        return str(obj.gid)
    return getattr(obj, rest, None)


def _compare(op: str, a, b) -> bool:
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def evaluate(e, env: dict, snap) -> Optional[bool]:
    """Three-valued evaluation: True, False or None for UNKNOWN."""
    if isinstance(e, Cmp):
        left = _resolve(e.path, env)
        right = _resolve(e.value.path, env) if isinstance(e.value, Ref) else e.value
        if left is None or right is None:
            return None
        return _compare(e.op, left, right)
    if isinstance(e, And):
        result = True
        for item in e.items:
            v = evaluate(item, env, snap)
            if v is False:
                return False
            if v is None:
                result = None
        return result
    if isinstance(e, Or):
        result = False
        for item in e.items:
            v = evaluate(item, env, snap)
            if v is True:
                return True
            if v is None:
                result = None
        return result
    if isinstance(e, Not):
        v = evaluate(e.item, env, snap)
        return None if v is None else not v
    if isinstance(e, Exists):
        result = False
        for ep in snap.episodes_of(env["patient"].gid):
            v = evaluate(e.body, {**env, e.alias: ep}, snap)
            if v is True:
                return True
            if v is None:
                result = None
        return result
    raise TypeError(f"not a predicate node: {e!r}")


def project(q: FormalQuery, env: dict) -> tuple:
    if q.target == PATIENTS:
        names = PATIENT_FIELDS
    else:
        names = IMAGE_FIELDS + tuple(f"alg.{n}.value" for n in referenced_algs(q.predicate))
    out = []
    for name in names:
        v = _resolve(name, env)
        out.append((name, "" if v is None else v if isinstance(v, str) else format_number(v)))
    return tuple(out)


class MemoryBackend:
    """Evaluates formal queries directly over a store snapshot.

    A SQL-generating backend would implement the same ``run`` signature.
    """

    def __init__(self, source):
        self.source = source

    def run(self, q: FormalQuery, query_id: str) -> ResultSet:
        snap = self.source.snapshot() if hasattr(self.source, "snapshot") else self.source
        records = {}
        if q.target == IMAGES:
            for gid, img in snap.images.items():
                env = {"image": img, "patient": snap.patients.get(img.patient)}
                if env["patient"] is not None and evaluate(q.predicate, env, snap) is True:
                    records[gid] = project(q, env)
        else:
            for gid, pat in snap.patients.items():
                env = {"patient": pat}
                if evaluate(q.predicate, env, snap) is True:
                    records[gid] = project(q, env)
        return ResultSet(query_id, snap.site, dict(sorted(records.items())))


def eval_local(q: FormalQuery, store, query_id: str = "0" * 32) -> ResultSet:
    return MemoryBackend(store).run(q, query_id)


# -- translation -------------------------------------------------------------


@dataclass(frozen=True)
class VocabEntry:
    phrase: tuple
    fragment: Optional[str] = None
    target: Optional[str] = None


@dataclass
class Vocabulary:
    entries: list
    skip: frozenset = frozenset()

    @classmethod
    def parse(cls, text: str) -> "Vocabulary":
        entries, skip = [], set()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("skip:"):
                skip.update(line[5:].split())
                continue
            is_target = line.startswith("target:")
            if is_target:
                line = line[7:]
            if "=>" not in line:
                raise TranslationError(f"vocabulary line {n}: expected 'phrase => fragment'")
            phrase, rhs = (s.strip() for s in line.split("=>", 1))
            words = tuple(phrase.lower().split())
            if not words or sum(w == "<num>" for w in words) > 1:
                raise TranslationError(f"vocabulary line {n}: bad phrase {phrase!r}")
            if is_target:
                if rhs not in (IMAGES, PATIENTS):
                    raise TranslationError(f"vocabulary line {n}: target must be IMAGES or PATIENTS")
                entries.append(VocabEntry(words, target=rhs))
            else:
                try:
                    parse_predicate(rhs.replace("<num>", "0"))
                except GridError as exc:
                    raise TranslationError(f"vocabulary line {n}: {exc}") from None
                entries.append(VocabEntry(words, fragment=rhs))
        return cls(entries, frozenset(skip))

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls.parse(resources.files("gridbox").joinpath("vocab.txt").read_text())


def _match(entry: VocabEntry, words: list, i: int) -> Optional[str]:
    """Return the placeholder value ('' if none) when ``entry`` matches at ``i``."""
    if i + len(entry.phrase) > len(words):
        return None
    num = ""
    for w, p in zip(words[i:], entry.phrase):
        if p == "<num>":
            if not w.isdigit():
                return None
            num = w
        elif w != p:
            return None
    return num


def normalize(text: str) -> list[str]:
    return re.sub(r"[^a-z0-9]+", " ", text.lower()).split()


def translate(user_text: str, vocab: Vocabulary) -> FormalQuery:
    words = normalize(user_text)
    if not words:
        raise TranslationError("empty query")
    target = None
    fragments = []
    i = 0
    while i < len(words):
        best, best_num = None, ""
        for entry in vocab.entries:
            num = _match(entry, words, i)
            if num is not None and (best is None or len(entry.phrase) > len(best.phrase)):
                best, best_num = entry, num
        if best is not None:
            if best.target is not None:
                target = target or best.target
            else:
                fragments.append(best.fragment.replace("<num>", best_num))
            i += len(best.phrase)
        elif words[i] in vocab.skip:
            i += 1
        else:
            raise TranslationError(f"unrecognised word {words[i]!r} at position {i + 1}")
    if target is None:
        raise TranslationError("query names no target (images or patients)")
    if not fragments:
        raise TranslationError("query has no recognised conditions")
    preds = [parse_predicate(f) for f in fragments]
    q = FormalQuery(target, preds[0] if len(preds) == 1 else And(tuple(preds)))
    check_types(q)
    return q
