"""Regenerate the golden fixtures by hand-packing bytes with struct.

Kept independent of the gridbox codec so the goldens can check it.
"""

import struct
from pathlib import Path

HERE = Path(__file__).parent


def short(group, elem, vr, value: bytes) -> bytes:
    return struct.pack("<HH", group, elem) + vr.encode() + struct.pack("<H", len(value)) + value


def long(group, elem, vr, value: bytes) -> bytes:
    return struct.pack("<HH", group, elem) + vr.encode() + b"\x00\x00" + struct.pack("<I", len(value)) + value


def golden_2x2() -> bytes:
    parts = [
        b"\x00" * 128,
        b"DICM",
        short(0x0008, 0x0020, "DA", b"20040315"),
        short(0x0008, 0x0060, "CS", b"MG"),
        short(0x0009, 0x0010, "LO", b"HRT=1 "),
        short(0x0010, 0x0010, "PN", b"Golden^Fixture"),
        short(0x0010, 0x0020, "LO", b"GOLD-0001 "),
        short(0x0010, 0x0030, "DA", b"19510704"),
        short(0x0010, 0x0040, "CS", b"F "),
        short(0x0010, 0x1010, "AS", b"052Y"),
        short(0x0018, 0x5101, "CS", b"CC"),
        short(0x0020, 0x0062, "CS", b"L "),
        short(0x0028, 0x0010, "US", struct.pack("<H", 2)),
        short(0x0028, 0x0011, "US", struct.pack("<H", 2)),
        short(0x0028, 0x0100, "US", struct.pack("<H", 8)),
        long(0x7FE0, 0x0010, "OB", bytes([0, 100, 200, 255])),
    ]
    return b"".join(parts)


def empty_resultset_frame() -> bytes:
    payload = b'<resultset query="00000000000000000000000000000000" site="st-a"/>'
    return b"MG01" + struct.pack(">I", len(payload)) + payload


if __name__ == "__main__":
    (HERE / "golden_2x2.dcm").write_bytes(golden_2x2())
    (HERE / "empty_resultset.hex").write_text(empty_resultset_frame().hex() + "\n")
