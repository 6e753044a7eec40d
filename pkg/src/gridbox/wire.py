"""Length-prefixed XML framing for every message exchanged with a node.

Frame layout: ``MG01`` | payload length (u32 big-endian) | UTF-8 XML payload.
"""

from __future__ import annotations

import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

from .model import GridError
from .query import ResultSet, _attr, _text, element_resultset

MAGIC = b"MG01"
MAX_PAYLOAD = 16 * 1024 * 1024
HEADER = struct.Struct(">4sI")

KINDS = (
    "auth",
    "query",
    "resultset",
    "file-get",
    "file-chunk",
    "file-put",
    "alg-add",
    "alg-exec",
    "alg-result",
    "error",
    "update",
    "episode-add",
)


class ProtocolError(GridError):
    pass


@dataclass
class Message:
    kind: str
    attrs: dict = field(default_factory=dict)
    text: str = ""
    children: tuple = ()

    def get(self, name: str, default=None):
        return self.attrs.get(name, default)

    def find_all(self, kind: str) -> list["Message"]:
        return [c for c in self.children if c.kind == kind]


def _serialize(msg: Message, out: list) -> None:
    attrs = "".join(f" {k}={_attr(str(v))}" for k, v in sorted(msg.attrs.items()))
    if msg.children and msg.text:
        raise ProtocolError(f"<{msg.kind}> cannot mix text and child elements")
    if not msg.children and not msg.text:
        out.append(f"<{msg.kind}{attrs}/>")
        return
    out.append(f"<{msg.kind}{attrs}>")
    if msg.text:
        out.append(_text(msg.text))
    for c in msg.children:
        _serialize(c, out)
    out.append(f"</{msg.kind}>")


def to_xml(msg: Message) -> bytes:
    out: list = []
    _serialize(msg, out)
    return "".join(out).encode("utf-8")


def _from_element(el: ET.Element) -> Message:
    kids = tuple(_from_element(c) for c in el)
    text = el.text or ""
    if kids:
        if text.strip() or any((c.tail or "").strip() for c in el):
            raise ProtocolError(f"<{el.tag}> mixes text and elements")
        text = ""
    return Message(el.tag, dict(el.attrib), text, kids)


def encode_msg(msg: Message) -> bytes:
    if msg.kind not in KINDS:
        raise ProtocolError(f"unknown message type {msg.kind!r}")
    payload = to_xml(msg)
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, len(payload)) + payload


def check_header(header: bytes) -> int:
    if len(header) < HEADER.size:
        raise ProtocolError("truncated frame header")
    magic, length = HEADER.unpack(header[: HEADER.size])
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds {MAX_PAYLOAD}")
    return length


def decode_payload(payload: bytes) -> Message:
    try:
        el = ET.fromstring(payload)
    except ET.ParseError as exc:
        raise ProtocolError(f"malformed XML payload: {exc}") from None
    if el.tag not in KINDS:
        raise ProtocolError(f"unknown message type {el.tag!r}")
    return _from_element(el)


def decode_msg(frame: bytes) -> Message:
    length = check_header(frame)
    payload = frame[HEADER.size :]
    if len(payload) != length:
        raise ProtocolError(f"frame declares {length} payload bytes, got {len(payload)}")
    return decode_payload(payload)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_frame(stream: BinaryIO) -> Optional[Message]:
    """Read one message from a stream; None on clean EOF before a header."""
    first = stream.read(HEADER.size)
    if not first:
        return None
    header = first + _read_exact(stream, HEADER.size - len(first)) if len(first) < HEADER.size else first
    length = check_header(header)
    return decode_payload(_read_exact(stream, length))


# -- result set carriage -----------------------------------------------------


def rs_message(rs: ResultSet, kind: str = "resultset", tok: Optional[str] = None) -> Message:
    """Message form of ``rs``; serializes to exactly ``resultset_xml(rs)``."""
    attrs = {"query": rs.query_id, "site": rs.site}
    if tok:
        attrs["tok"] = tok
    kids = [Message("warning", {}, w) for w in rs.warnings]
    for gid, fields in rs.ordered():
        kids.append(Message("record", {"gid": str(gid)}, "", tuple(Message("f", {"n": n}, v) for n, v in fields)))
    return Message(kind, attrs, "", tuple(kids))


def _to_element(msg: Message) -> ET.Element:
    el = ET.Element(msg.kind, msg.attrs)
    el.text = msg.text or None
    el.extend(_to_element(c) for c in msg.children)
    return el


def message_rs(msg: Message) -> ResultSet:
    return element_resultset(_to_element(msg), root=msg.kind, extra=("tok", "name", "version"))


def error_message(code: str, text: str) -> Message:
    return Message("error", {"code": code}, text)
