"""Per-site storage element: content-addressed blobs, logical file catalogue,
and the journaled metadata index for patients, episodes and images."""

from __future__ import annotations

import hashlib
import hmac
import logging
import os
import re
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

from . import auth, dicom
from .model import (
    Episode,
    GlobalId,
    GridError,
    ImageMeta,
    NotFoundError,
    PatientRecord,
    ValidationError,
    check_site,
)

log = logging.getLogger(__name__)

DERIVED_NAME_RE = re.compile(r"[a-z0-9_]{1,32}")
RECORD_TYPES = ("AddPatient", "AddImage", "AddEpisode", "UpdateMeta", "SetDerived", "RegisterReplica")

MUTABLE_FIELDS = {
    "pat": {"patient.hrt"},
    "epi": {
        "episode.laterality",
        "episode.diagnosis",
        "episode.therapy_outcome",
        "episode.date",
        "episode.therapy_end_date",
    },
    "img": {"image.view", "image.laterality"},
}


class StoreError(GridError):
    pass


class ImmutableFieldError(StoreError):
    pass


class JournalCorrupt(StoreError):
    pass


class ChecksumMismatch(StoreError):
    pass


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def anon_key_for(vo_key: bytes) -> bytes:
    return hmac.new(vo_key, b"gridbox-anonymisation-key", hashlib.sha256).digest()


class BlobStore:
    """Immutable blobs keyed by their SHA-256; in memory when ``root`` is None."""

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, bytes] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def path(self, guid: str) -> Path:
        return self.root / guid[:2] / guid

    def has(self, guid: str) -> bool:
        if self.root is None:
            return guid in self._mem
        return self.path(guid).exists()

    def put(self, data: bytes) -> tuple[str, bool]:
        guid = content_hash(data)
        if self.has(guid):
            return guid, False
        if self.root is None:
            self._mem[guid] = bytes(data)
        else:
            p = self.path(guid)
            p.parent.mkdir(exist_ok=True)
            tmp = p.with_suffix(".tmp")
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, p)
        return guid, True

    def get(self, guid: str) -> bytes:
        if self.root is None:
            try:
                return self._mem[guid]
            except KeyError:
                raise NotFoundError(f"no blob {guid}") from None
        try:
            return self.path(guid).read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"no blob {guid}") from None

    def guids(self) -> list[str]:
        if self.root is None:
            return sorted(self._mem)
        return sorted(p.name for p in self.root.glob("??/*") if not p.name.endswith(".tmp"))


class Journal:
    """Append-only ``seq|type|payload-xml`` lines; in memory when ``path`` is None."""

    def __init__(self, path: Optional[Path] = None, fsync: bool = True):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.lines: list[str] = []
        self.seq = 0

    def read(self) -> list[tuple[int, str, ET.Element]]:
        """Parse existing records, dropping (and truncating) a torn final line."""
        if self.path is None or not self.path.exists():
            return []
        data = self.path.read_bytes()
        raw_lines = data.split(b"\n")
        complete, tail = raw_lines[:-1], raw_lines[-1]
        records = []
        good_bytes = 0
        for n, raw in enumerate(complete):
            try:
                records.append(self._parse_line(raw.decode("utf-8")))
            except (ValueError, ET.ParseError, UnicodeDecodeError) as exc:
                if n == len(complete) - 1 and not tail:
                    log.warning("dropping corrupt final journal line %d", n + 1)
                    break
                raise JournalCorrupt(f"journal line {n + 1}: {exc}") from None
            good_bytes += len(raw) + 1
        if tail:
            log.warning("dropping truncated final journal line")
        if good_bytes != len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(good_bytes)
        for i, (seq, _, _) in enumerate(records):
            if seq != i + 1:
                raise JournalCorrupt(f"journal sequence gap at record {i + 1}")
        self.seq = len(records)
        self.lines = [self._format(*r) for r in records]
        return records

    @staticmethod
    def _parse_line(line: str) -> tuple[int, str, ET.Element]:
        seq, rtype, payload = line.split("|", 2)
        if rtype not in RECORD_TYPES:
            raise ValueError(f"unknown record type {rtype!r}")
        return int(seq), rtype, ET.fromstring(payload)

    @staticmethod
    def _format(seq: int, rtype: str, payload: ET.Element) -> str:
        return f"{seq}|{rtype}|{ET.tostring(payload, encoding='unicode')}"

    def append(self, rtype: str, payload: ET.Element) -> int:
        self.seq += 1
        line = self._format(self.seq, rtype, payload)
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
        return self.seq


def _payload(attrs: dict, children: tuple = ()) -> ET.Element:
    el = ET.Element("r", {k: str(v) for k, v in attrs.items() if v is not None})
    for path, value in children:
        c = ET.SubElement(el, "set", path=path)
        c.text = value
    return el


@dataclass(frozen=True)
class FileCatalogEntry:
    lfn: str
    guid: str
    replicas: frozenset
    gid: Optional[GlobalId] = None


@dataclass
class AddResult:
    gid: GlobalId
    guid: str
    lfn: str
    duplicate: bool = False


@dataclass(frozen=True)
class Snapshot:
    """Consistent read-only view taken at query start."""

    site: str
    patients: dict
    episodes: dict  # patient gid -> tuple of Episode
    images: dict

    def episodes_of(self, patient: GlobalId) -> tuple:
        return self.episodes.get(patient, ())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if text in ("true", "1"):
        return True
    if text in ("false", "0"):
        return False
    raise ValidationError(f"expected boolean, got {text!r}")


def _num(text):
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return text
    try:
        return int(text)
    except ValueError:
        return float(text)


class Store:
    def __init__(
        self,
        site: str,
        vo_key: bytes,
        data_dir=None,
        anonymize_on_add: bool = True,
        clock: Callable[[], float] = time.time,
        fsync: bool = True,
    ):
        self.site = check_site(site)
        self.vo_key = vo_key
        self.anon_key = anon_key_for(vo_key)
        self.anonymize_on_add = anonymize_on_add
        self.clock = clock
        root = Path(data_dir) if data_dir is not None else None
        self.blobs = BlobStore(root / "blobs" if root else None)
        self.journal = Journal(root / "journal.log" if root else None, fsync=fsync)
        self.fetcher: Optional[Callable[[str], tuple[bytes, FileCatalogEntry]]] = None
        self.listeners: list[Callable[[int, str], None]] = []
        self._lock = threading.RLock()
        self._reset()
        for seq, rtype, payload in self.journal.read():
            self._apply(rtype, payload)

    def _reset(self) -> None:
        self.patients: dict[GlobalId, PatientRecord] = {}
        self.episodes: dict[GlobalId, Episode] = {}
        self.images: dict[GlobalId, ImageMeta] = {}
        self.by_pseudoid: dict[str, GlobalId] = {}
        self.by_guid: dict[str, GlobalId] = {}
        self.catalogue: dict[str, FileCatalogEntry] = {}
        self.lfn_by_gid: dict[GlobalId, str] = {}
        self.lfn_by_guid: dict[str, str] = {}
        self._patient_episodes: dict[GlobalId, tuple] = {}
        self.counters = {"pat": 0, "img": 0, "epi": 0}

    # -- auth ---------------------------------------------------------------

    def require(self, token, action: str) -> auth.Claims:
        claims = auth.verify(token, self.vo_key, int(self.clock()))
        if not auth.authorize(claims, action):
            raise auth.AuthError(f"user {claims.user!r} may not {action}")
        return claims

    # -- journal ------------------------------------------------------------

    def _record(self, rtype: str, payload: ET.Element) -> None:
        seq = self.journal.append(rtype, payload)
        self._apply(rtype, payload)
        for fn in self.listeners:
            fn(seq, rtype)

    def _next(self, kind: str) -> GlobalId:
        return GlobalId(self.site, kind, self.counters[kind] + 1)

    def _bump(self, gid: GlobalId) -> None:
        self.counters[gid.kind] = max(self.counters[gid.kind], gid.num)

    def _apply(self, rtype: str, p: ET.Element) -> None:
        a = p.attrib
        if rtype == "AddPatient":
            gid = GlobalId.parse(a["gid"])
            self.patients[gid] = PatientRecord(
                gid, a["pseudoid"], int(a["age"]), a["sex"], _bool(a["hrt"]), self.site
            )
            self.by_pseudoid[a["pseudoid"]] = gid
            self._bump(gid)
        elif rtype == "AddImage":
            gid = GlobalId.parse(a["gid"])
            self.images[gid] = ImageMeta(
                gid,
                GlobalId.parse(a["patient"]),
                a["view"],
                a["laterality"],
                a["study_date"],
                int(a["rows"]),
                int(a["cols"]),
                a["modality"],
                a["guid"],
                a["lfn"],
                {},
            )
            self.by_guid[a["guid"]] = gid
            self._catalogue(FileCatalogEntry(a["lfn"], a["guid"], frozenset([self.site]), gid))
            self._bump(gid)
        elif rtype == "AddEpisode":
            gid = GlobalId.parse(a["gid"])
            ep = Episode(
                gid,
                GlobalId.parse(a["patient"]),
                a["laterality"],
                a["diagnosis"],
                a["therapy_outcome"],
                a["date"],
                a.get("therapy_end_date"),
            )
            self.episodes[gid] = ep
            self._patient_episodes[ep.patient] = self._patient_episodes.get(ep.patient, ()) + (gid,)
            self._bump(gid)
        elif rtype == "UpdateMeta":
            gid = GlobalId.parse(a["gid"])
            changes = {c.get("path"): c.text for c in p.findall("set")}
            self._update(gid, changes)
        elif rtype == "SetDerived":
            gid = GlobalId.parse(a["gid"])
            img = self.images[gid]
            derived = dict(img.derived)
            derived[a["name"]] = _num(a["value"])
            self.images[gid] = replace(img, derived=derived)
        elif rtype == "RegisterReplica":
            gid = GlobalId.parse(a["gid"]) if a.get("gid") else None
            replicas = frozenset(a["replicas"].split(","))
            self._catalogue(FileCatalogEntry(a["lfn"], a["guid"], replicas, gid))
        else:
            raise JournalCorrupt(f"unknown record type {rtype!r}")

    def _catalogue(self, entry: FileCatalogEntry) -> None:
        self.catalogue[entry.lfn] = entry
        self.lfn_by_guid[entry.guid] = entry.lfn
        if entry.gid is not None:
            self.lfn_by_gid[entry.gid] = entry.lfn

    def _update(self, gid: GlobalId, changes: dict) -> None:
        if gid.kind == "pat":
            rec = self.patients[gid]
            self.patients[gid] = replace(rec, hrt=_bool(changes["patient.hrt"]))
        elif gid.kind == "epi":
            ep = self.episodes[gid]
            kw = {}
            for path, value in changes.items():
                name = path.split(".", 1)[1]
                kw[name] = value if value not in ("", None) or name != "therapy_end_date" else None
            self.episodes[gid] = replace(ep, **kw)
        else:
            img = self.images[gid]
            self.images[gid] = replace(img, **{k.split(".", 1)[1]: v for k, v in changes.items()})

    # -- operations ---------------------------------------------------------

    def add_image(self, dicom_bytes: bytes, token) -> AddResult:
        self.require(token, "add")
        obj = dicom.parse_dicom(dicom_bytes)
        obj.validate()
        if not dicom.is_anonymized(obj):
            if not self.anonymize_on_add:
                raise dicom.DicomError("image is not anonymised and anonymize_on_add is off")
            obj = dicom.anonymize(obj, self.anon_key)
        data = dicom.write_dicom(obj)
        pfields, ifields = dicom.extract_meta(obj)
        with self._lock:
            guid = content_hash(data)
            if guid in self.by_guid:
                gid = self.by_guid[guid]
                return AddResult(gid, guid, self.images[gid].lfn, duplicate=True)
            self.blobs.put(data)
            pat = self.by_pseudoid.get(pfields["pseudoid"])
            if pat is None:
                pat = self._next("pat")
                PatientRecord(pat, site=self.site, **pfields)  # validate before journaling
                self._record("AddPatient", _payload({"gid": pat, **pfields, "hrt": str(pfields["hrt"]).lower()}))
            gid = self._next("img")
            lfn = f"lfn://{self.site}/{pfields['pseudoid']}/{gid.num}.dcm"
            ImageMeta(gid, pat, guid=guid, lfn=lfn, **ifields)
            self._record(
                "AddImage", _payload({"gid": gid, "patient": pat, "guid": guid, "lfn": lfn, **ifields})
            )
            return AddResult(gid, guid, lfn)

    def _resolve(self, ref: str) -> tuple[Optional[GlobalId], Optional[str]]:
        """Map a gid or lfn reference to (gid, lfn) as known locally."""
        if ref.startswith("lfn://"):
            entry = self.catalogue.get(ref)
            return (entry.gid if entry else None), ref
        gid = GlobalId.parse(ref)
        if gid.kind != "img":
            raise ValidationError(f"{ref} is not an image id")
        return gid, self.lfn_by_gid.get(gid)

    def local_bytes(self, ref: str) -> tuple[bytes, FileCatalogEntry]:
        """Bytes of a locally held replica; raises NotFoundError otherwise."""
        with self._lock:
            if re.fullmatch(r"[0-9a-f]{64}", ref):
                lfn = self.lfn_by_guid.get(ref)
            else:
                _, lfn = self._resolve(ref)
            entry = self.catalogue.get(lfn) if lfn else None
        if entry is None or self.site not in entry.replicas:
            raise NotFoundError(f"no local replica of {ref}")
        return self.blobs.get(entry.guid), entry

    def retrieve_image(self, ref: str, token) -> bytes:
        self.require(token, "retrieve")
        try:
            data, entry = self.local_bytes(ref)
        except NotFoundError:
            gid, _ = self._resolve(ref)
            owner = gid.site if gid is not None else ref[len("lfn://"):].split("/", 1)[0]
            if owner == self.site or self.fetcher is None:
                raise NotFoundError(f"unknown image {ref}") from None
            data, entry = self.fetcher(ref)
            if content_hash(data) != entry.guid:
                raise ChecksumMismatch(f"transferred bytes do not hash to {entry.guid}")
            self.register_replica(data, entry)
            return data
        if content_hash(data) != entry.guid:
            raise ChecksumMismatch(f"stored bytes for {entry.lfn} do not hash to {entry.guid}")
        return data

    def register_replica(self, data: bytes, entry: FileCatalogEntry) -> None:
        with self._lock:
            self.blobs.put(data)
            replicas = sorted(set(entry.replicas) | {self.site})
            self._record(
                "RegisterReplica",
                _payload(
                    {
                        "gid": entry.gid,
                        "guid": entry.guid,
                        "lfn": entry.lfn,
                        "replicas": ",".join(replicas),
                    }
                ),
            )

    def update_meta(self, gid, assignments: dict, token) -> None:
        self.require(token, "update")
        gid = GlobalId.parse(gid) if isinstance(gid, str) else gid
        changes = {}
        for path, value in assignments.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            changes[path] = "" if value is None else str(value)
        with self._lock:
            table = {"pat": self.patients, "epi": self.episodes, "img": self.images}[gid.kind]
            if gid.site != self.site or gid not in table:
                raise NotFoundError(f"unknown record {gid}")
            allowed = MUTABLE_FIELDS[gid.kind]
            bad = sorted(p for p in changes if p not in allowed)
            if bad:
                raise ImmutableFieldError(f"fields not updatable on {gid}: {', '.join(bad)}")
            if not changes:
                return
            saved = table[gid]
            try:
                self._update(gid, changes)  # dry run validates through the record constructors
            finally:
                table[gid] = saved
            self._record("UpdateMeta", _payload({"gid": gid}, tuple(sorted(changes.items()))))

    def add_episode(self, fields: dict, token) -> GlobalId:
        self.require(token, "add_episode")
        patient = fields.get("patient")
        patient = GlobalId.parse(patient) if isinstance(patient, str) else patient
        if patient is None or patient.kind != "pat":
            raise ValidationError("episode needs a patient gid")
        if patient.site != self.site:
            raise ValidationError(f"patient {patient} belongs to site {patient.site}, not {self.site}")
        with self._lock:
            if patient not in self.patients:
                raise NotFoundError(f"unknown patient {patient}")
            gid = self._next("epi")
            ep = Episode(
                gid,
                patient,
                fields.get("laterality"),
                fields.get("diagnosis"),
                fields.get("therapy_outcome", "none"),
                fields.get("date"),
                fields.get("therapy_end_date") or None,
            )
            self._record(
                "AddEpisode",
                _payload(
                    {
                        "gid": gid,
                        "patient": patient,
                        "laterality": ep.laterality,
                        "diagnosis": ep.diagnosis,
                        "therapy_outcome": ep.therapy_outcome,
                        "date": ep.date,
                        "therapy_end_date": ep.therapy_end_date,
                    }
                ),
            )
            return gid

    def set_derived_attr(self, img_gid, name: str, value, token) -> None:
        self.require(token, "set_derived")
        self.set_derived(img_gid, name, value)

    def set_derived(self, img_gid, name: str, value) -> None:
        """Unauthenticated variant for the in-process algorithm runtime."""
        gid = GlobalId.parse(img_gid) if isinstance(img_gid, str) else img_gid
        if not DERIVED_NAME_RE.fullmatch(name):
            raise ValidationError(f"invalid derived attribute name {name!r}")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"derived value must be numeric, got {value!r}")
        with self._lock:
            if gid not in self.images:
                raise NotFoundError(f"unknown image {gid}")
            self._record("SetDerived", _payload({"gid": gid, "name": name, "value": repr(value)}))

    def snapshot(self) -> Snapshot:
        with self._lock:
            return Snapshot(
                self.site,
                dict(self.patients),
                {p: tuple(self.episodes[e] for e in eps) for p, eps in self._patient_episodes.items()},
                dict(self.images),
            )
