"""Explicit-VR little-endian DICOM subset: parse, write, anonymise, extract.

Only a fixed tag table is interpreted; anything else is carried through as
opaque ``(group, element, vr, value)`` so write(parse(b)) == b.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Iterable, Optional

from .model import GridError

PREAMBLE = b"\x00" * 128
MAGIC = b"DICM"

STUDY_DATE = (0x0008, 0x0020)
MODALITY = (0x0008, 0x0060)
HRT_FLAG = (0x0009, 0x0010)
ANON_MARKER = (0x0009, 0x0011)
PATIENT_NAME = (0x0010, 0x0010)
PATIENT_ID = (0x0010, 0x0020)
PATIENT_BIRTH_DATE = (0x0010, 0x0030)
PATIENT_SEX = (0x0010, 0x0040)
PATIENT_AGE = (0x0010, 0x1010)
VIEW_POSITION = (0x0018, 0x5101)
IMAGE_LATERALITY = (0x0020, 0x0062)
ROWS = (0x0028, 0x0010)
COLUMNS = (0x0028, 0x0011)
BITS_ALLOCATED = (0x0028, 0x0100)
PIXEL_DATA = (0x7FE0, 0x0010)

TAG_VR = {
    STUDY_DATE: "DA",
    MODALITY: "CS",
    HRT_FLAG: "LO",
    ANON_MARKER: "LO",
    PATIENT_NAME: "PN",
    PATIENT_ID: "LO",
    PATIENT_BIRTH_DATE: "DA",
    PATIENT_SEX: "CS",
    PATIENT_AGE: "AS",
    VIEW_POSITION: "CS",
    IMAGE_LATERALITY: "CS",
    ROWS: "US",
    COLUMNS: "US",
    BITS_ALLOCATED: "US",
}

REQUIRED_TAGS = (
    STUDY_DATE,
    MODALITY,
    PATIENT_ID,
    PATIENT_SEX,
    PATIENT_AGE,
    VIEW_POSITION,
    IMAGE_LATERALITY,
    ROWS,
    COLUMNS,
    BITS_ALLOCATED,
    PIXEL_DATA,
)

# VRs with a reserved word and 32-bit length field.
LONG_VRS = {"OB", "OW", "OF", "SQ", "UT", "UN"}
BINARY_VRS = {"OB", "OW", "OF", "UN", "US", "UL", "SS", "SL", "FL", "FD", "AT"}


class DicomError(GridError):
    pass


@dataclass(frozen=True)
class Element:
    group: int
    element: int
    vr: str
    value: bytes

    @property
    def tag(self) -> tuple[int, int]:
        return (self.group, self.element)


def _pad(vr: str, raw: bytes) -> bytes:
    if len(raw) % 2:
        raw += b"\x00" if vr in BINARY_VRS or vr == "UI" else b" "
    return raw


def encode_value(vr: str, value) -> bytes:
    if vr == "US":
        return struct.pack("<H", value)
    if isinstance(value, str):
        value = value.encode("ascii")
    return _pad(vr, bytes(value))


@dataclass(frozen=True)
class DicomObject:
    elements: tuple

    def __post_init__(self) -> None:
        tags = [e.tag for e in self.elements]
        if tags != sorted(tags) or len(set(tags)) != len(tags):
            raise DicomError("elements must be unique and sorted by (group, element)")

    def find(self, tag) -> Optional[Element]:
        for e in self.elements:
            if e.tag == tag:
                return e
        return None

    def __contains__(self, tag) -> bool:
        return self.find(tag) is not None

    def text(self, tag) -> Optional[str]:
        e = self.find(tag)
        if e is None:
            return None
        return e.value.decode("ascii", "replace").rstrip(" \x00")

    def ushort(self, tag) -> Optional[int]:
        e = self.find(tag)
        if e is None:
            return None
        if len(e.value) != 2:
            raise DicomError(f"US element {tag[0]:04X},{tag[1]:04X} has length {len(e.value)}")
        return struct.unpack("<H", e.value)[0]

    def with_value(self, tag, value, vr: Optional[str] = None) -> "DicomObject":
        vr = vr or TAG_VR.get(tag) or (self.find(tag).vr if tag in self else None)
        if vr is None:
            raise DicomError(f"no VR known for tag {tag[0]:04X},{tag[1]:04X}")
        new = Element(tag[0], tag[1], vr, encode_value(vr, value))
        rest = [e for e in self.elements if e.tag != tag]
        return DicomObject(tuple(sorted(rest + [new], key=lambda e: e.tag)))

    @property
    def rows(self) -> Optional[int]:
        return self.ushort(ROWS)

    @property
    def cols(self) -> Optional[int]:
        return self.ushort(COLUMNS)

    @property
    def bits_allocated(self) -> int:
        return self.ushort(BITS_ALLOCATED) or 8

    @property
    def pixel_data(self) -> bytes:
        e = self.find(PIXEL_DATA)
        return e.value if e is not None else b""

    def pixels(self) -> list[int]:
        """Pixel values in row-major order, trailing pad byte dropped."""
        n = (self.rows or 0) * (self.cols or 0)
        raw = self.pixel_data
        if self.bits_allocated == 16:
            return list(struct.unpack(f"<{n}H", raw[: 2 * n]))
        return list(raw[:n])

    def validate(self) -> None:
        """Check the tags and pixel length needed before import."""
        missing = [t for t in REQUIRED_TAGS if t not in self]
        if missing:
            names = ", ".join(f"({g:04X},{e:04X})" for g, e in missing)
            raise DicomError(f"missing required tags: {names}")
        bits = self.bits_allocated
        if bits not in (8, 16):
            raise DicomError(f"unsupported BitsAllocated {bits}")
        if not self.rows or not self.cols:
            raise DicomError("Rows and Columns must be positive")
        n = self.rows * self.cols * bits // 8
        if len(self.pixel_data) not in (n, n + (n % 2)):
            raise DicomError(f"pixel data is {len(self.pixel_data)} bytes, expected {n}")


def build(fields: dict, pixels: Iterable[int], rows: int, cols: int, bits: int = 8) -> DicomObject:
    """Assemble an object from tag -> value pairs plus a pixel list."""
    values = list(pixels)
    if len(values) != rows * cols:
        raise DicomError("pixel count does not match rows x cols")
    if bits == 8:
        raw, pvr = bytes(values), "OB"
    elif bits == 16:
        raw, pvr = struct.pack(f"<{len(values)}H", *values), "OW"
    else:
        raise DicomError(f"unsupported BitsAllocated {bits}")
    elems = {ROWS: Element(*ROWS, "US", encode_value("US", rows))}
    elems[COLUMNS] = Element(*COLUMNS, "US", encode_value("US", cols))
    elems[BITS_ALLOCATED] = Element(*BITS_ALLOCATED, "US", encode_value("US", bits))
    elems[PIXEL_DATA] = Element(*PIXEL_DATA, pvr, _pad(pvr, raw))
    for tag, value in fields.items():
        vr = TAG_VR.get(tag)
        if isinstance(value, tuple):
            vr, value = value
        if vr is None:
            raise DicomError(f"no VR known for tag {tag[0]:04X},{tag[1]:04X}")
        elems[tag] = Element(tag[0], tag[1], vr, encode_value(vr, value))
    return DicomObject(tuple(elems[t] for t in sorted(elems)))


def parse_dicom(data: bytes) -> DicomObject:
    if len(data) < 132:
        raise DicomError(f"file too short ({len(data)} bytes)")
    if data[128:132] != MAGIC:
        raise DicomError("missing DICM magic after 128-byte preamble")
    pos = 132
    elements = []
    view = memoryview(data)
    while pos < len(data):
        if len(data) - pos < 8:
            raise DicomError(f"truncated element header at offset {pos}")
        group, elem = struct.unpack_from("<HH", data, pos)
        try:
            vr = bytes(view[pos + 4 : pos + 6]).decode("ascii")
        except UnicodeDecodeError:
            raise DicomError(f"invalid VR bytes at offset {pos + 4}") from None
        if not (vr.isalpha() and vr.isupper()):
            raise DicomError(f"invalid VR {vr!r} at offset {pos + 4}")
        if vr in LONG_VRS:
            if len(data) - pos < 12:
                raise DicomError(f"truncated element header at offset {pos}")
            (length,) = struct.unpack_from("<I", data, pos + 8)
            pos += 12
            if length == 0xFFFFFFFF:
                raise DicomError("undefined-length elements are not supported")
        else:
            (length,) = struct.unpack_from("<H", data, pos + 6)
            pos += 8
        if length > len(data) - pos:
            raise DicomError(
                f"element ({group:04X},{elem:04X}) length {length} exceeds remaining {len(data) - pos} bytes"
            )
        elements.append(Element(group, elem, vr, bytes(view[pos : pos + length])))
        pos += length
    return DicomObject(tuple(elements))


def write_dicom(obj: DicomObject) -> bytes:
    out = [PREAMBLE, MAGIC]
    for e in obj.elements:
        if len(e.value) % 2:
            raise DicomError(f"element ({e.group:04X},{e.element:04X}) has odd length")
        head = struct.pack("<HH", e.group, e.element) + e.vr.encode("ascii")
        if e.vr in LONG_VRS:
            if len(e.value) >= 0xFFFFFFFF:
                raise DicomError("element value too large for 32-bit length")
            out.append(head + b"\x00\x00" + struct.pack("<I", len(e.value)))
        else:
            if len(e.value) > 0xFFFF:
                raise DicomError(
                    f"element ({e.group:04X},{e.element:04X}) value too large for 16-bit length"
                )
            out.append(head + struct.pack("<H", len(e.value)))
        out.append(e.value)
    return b"".join(out)


def pseudonym(key: bytes, patient_id: str) -> str:
    return hmac.new(key, patient_id.encode("utf-8"), hashlib.sha256).hexdigest()[:16]


def is_anonymized(obj: DicomObject) -> bool:
    return obj.text(ANON_MARKER) == "ANON=1"


def anonymize(obj: DicomObject, key: bytes) -> DicomObject:
    if is_anonymized(obj):
        return obj
    pid = obj.text(PATIENT_ID)
    if pid is None:
        raise DicomError("cannot anonymise: PatientID missing")
    out = obj.with_value(PATIENT_ID, pseudonym(key, pid))
    out = out.with_value(PATIENT_NAME, "ANON")
    birth = obj.text(PATIENT_BIRTH_DATE)
    if birth:
        out = out.with_value(PATIENT_BIRTH_DATE, birth[:4] + "0101")
    return out.with_value(ANON_MARKER, "ANON=1")


_AGE_UNITS = {"Y": 1, "M": 12, "W": 52, "D": 365}


def _parse_age(text: Optional[str]) -> int:
    if not text or len(text) != 4 or not text[:3].isdigit() or text[3] not in _AGE_UNITS:
        raise DicomError(f"malformed PatientAge {text!r}")
    return int(text[:3]) // _AGE_UNITS[text[3]]


def _iso(da: Optional[str]) -> str:
    if not da or len(da) != 8 or not da.isdigit():
        raise DicomError(f"malformed DA value {da!r}")
    return f"{da[:4]}-{da[4:6]}-{da[6:]}"


def extract_meta(obj: DicomObject) -> tuple[dict, dict]:
    """Split an anonymised object into patient fields and image fields."""
    sex = obj.text(PATIENT_SEX)
    if sex not in ("F", "M"):
        raise DicomError(f"unsupported PatientSex {sex!r}")
    hrt = obj.text(HRT_FLAG)
    if hrt not in (None, "", "HRT=0", "HRT=1"):
        raise DicomError(f"malformed HRT flag {hrt!r}")
    patient = {
        "pseudoid": obj.text(PATIENT_ID),
        "age": _parse_age(obj.text(PATIENT_AGE)),
        "sex": sex,
        "hrt": hrt == "HRT=1",
    }
    view = obj.text(VIEW_POSITION)
    if view not in ("CC", "MLO"):
        raise DicomError(f"unknown ViewPosition {view!r}")
    lat = obj.text(IMAGE_LATERALITY)
    if lat not in ("L", "R"):
        raise DicomError(f"unknown ImageLaterality {lat!r}")
    image = {
        "view": view,
        "laterality": lat,
        "study_date": _iso(obj.text(STUDY_DATE)),
        "rows": obj.rows,
        "cols": obj.cols,
        "modality": obj.text(MODALITY) or "",
    }
    return patient, image
