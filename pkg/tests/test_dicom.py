import hashlib
import hmac
import io
import struct

import pydicom
import pytest
from hypothesis import given, settings, strategies as st

from conftest import KEY, golden_bytes, sample_dicom
from gridbox import dicom
from gridbox.dicom import DicomError, parse_dicom, write_dicom
from gridbox.store import anon_key_for
from strategies import elements


def test_golden_roundtrip_is_byte_exact():
    raw = golden_bytes()
    obj = parse_dicom(raw)
    assert write_dicom(obj) == raw
    assert obj.pixels() == [0, 100, 200, 255]
    assert (obj.rows, obj.cols, obj.bits_allocated) == (2, 2, 8)


def test_golden_matches_pydicom_reading():
    ref = pydicom.dcmread(io.BytesIO(golden_bytes()), force=True)
    obj = parse_dicom(golden_bytes())
    assert obj.text(dicom.PATIENT_ID) == str(ref.PatientID)
    assert obj.text(dicom.PATIENT_SEX) == str(ref.PatientSex)
    assert obj.text(dicom.STUDY_DATE) == str(ref.StudyDate)
    assert obj.rows == ref.Rows and obj.cols == ref.Columns
    assert obj.pixel_data == bytes(ref.PixelData)
    # element order and VRs agree with the reference reader
    assert [(e.group, e.element, e.vr) for e in obj.elements] == [(el.tag.group, el.tag.element, el.VR) for el in ref]


def test_written_objects_readable_by_pydicom():
    raw = sample_dicom(pixels=list(range(12)), rows=3, cols=4)
    ref = pydicom.dcmread(io.BytesIO(raw), force=True)
    assert ref.Rows == 3 and ref.Columns == 4
    assert bytes(ref.PixelData) == bytes(range(12))


@settings(max_examples=200)
@given(elements())
def test_parse_write_roundtrip(obj):
    raw = write_dicom(obj)
    assert parse_dicom(raw) == obj
    assert write_dicom(parse_dicom(raw)) == raw


def test_long_vr_layout():
    obj = dicom.DicomObject((dicom.Element(0x7FE0, 0x0010, "OB", b"\x01\x02"),))
    raw = write_dicom(obj)
    assert raw[132:] == struct.pack("<HH", 0x7FE0, 0x0010) + b"OB\x00\x00" + struct.pack("<I", 2) + b"\x01\x02"


@pytest.mark.parametrize(
    "raw,msg",
    [
        (b"short", "too short"),
        (b"\x00" * 128 + b"DICX", "magic"),
        (b"\x00" * 128 + b"DICM" + b"\x08\x00\x20\x00DA", "truncated"),
        (b"\x00" * 128 + b"DICM" + b"\x08\x00\x20\x00DA\x08\x00" + b"2004", "exceeds"),
        (b"\x00" * 128 + b"DICM" + b"\x08\x00\x20\x00da\x00\x00", "invalid VR"),
    ],
)
def test_malformed_input(raw, msg):
    with pytest.raises(DicomError, match=msg):
        parse_dicom(raw)


def test_unsorted_elements_rejected():
    with pytest.raises(DicomError):
        dicom.DicomObject((dicom.Element(0x10, 0x20, "LO", b"AB"), dicom.Element(0x08, 0x20, "DA", b"20040101")))


def test_validate_requires_tags():
    obj = parse_dicom(golden_bytes())
    obj.validate()
    trimmed = dicom.DicomObject(tuple(e for e in obj.elements if e.tag != dicom.PATIENT_SEX))
    with pytest.raises(DicomError, match="0010,0040"):
        trimmed.validate()


def _reference_pseudonym(vo_key: bytes, patient_id: str) -> str:
    akey = hmac.new(vo_key, b"gridbox-anonymisation-key", hashlib.sha256).digest()
    return hmac.new(akey, patient_id.encode(), hashlib.sha256).hexdigest()[:16]


def test_anonymize_matches_reference_hmac():
    obj = parse_dicom(golden_bytes())
    anon = dicom.anonymize(obj, anon_key_for(KEY))
    assert anon.text(dicom.PATIENT_ID) == _reference_pseudonym(KEY, "GOLD-0001")
    assert anon.text(dicom.PATIENT_NAME) == "ANON"
    assert anon.text(dicom.PATIENT_BIRTH_DATE) == "19510101"
    assert dicom.is_anonymized(anon)
    assert anon.pixel_data == obj.pixel_data


@given(st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=20))
def test_anonymize_idempotent_and_scrubbed(pid):
    raw = sample_dicom(patient_id=pid, name="Secret^Person")
    anon = dicom.anonymize(parse_dicom(raw), anon_key_for(KEY))
    assert dicom.anonymize(anon, anon_key_for(KEY)) == anon
    out = write_dicom(anon)
    assert b"Secret^Person" not in out
    assert anon.text(dicom.PATIENT_ID) == _reference_pseudonym(KEY, pid.rstrip(" "))


def test_extract_meta():
    patient, image = dicom.extract_meta(parse_dicom(golden_bytes()))
    assert patient == {"pseudoid": "GOLD-0001", "age": 52, "sex": "F", "hrt": True}
    assert image == {"view": "CC", "laterality": "L", "study_date": "2004-03-15", "rows": 2, "cols": 2, "modality": "MG"}


@pytest.mark.parametrize("age,years", [("052Y", 52), ("024M", 2), ("104W", 2), ("730D", 2)])
def test_age_units(age, years):
    obj = parse_dicom(golden_bytes()).with_value(dicom.PATIENT_AGE, age)
    assert dicom.extract_meta(obj)[0]["age"] == years


def test_sixteen_bit_pixels():
    obj = dicom.build({}, [0, 1000, 4095, 65535], 2, 2, bits=16)
    assert parse_dicom(write_dicom(obj)).pixels() == [0, 1000, 4095, 65535]
    assert obj.find(dicom.PIXEL_DATA).vr == "OW"

