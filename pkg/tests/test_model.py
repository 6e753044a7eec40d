import pytest
from hypothesis import given, strategies as st

from gridbox.model import Episode, GlobalId, ImageMeta, PatientRecord, ValidationError, format_number

sites = st.from_regex(r"[a-z0-9-]{1,16}", fullmatch=True)
gids = st.builds(GlobalId, sites, st.sampled_from(["pat", "img", "epi"]), st.integers(1, 10**9))


@given(gids)
def test_gid_text_roundtrip(gid):
    assert GlobalId.parse(str(gid)) == gid
    assert hash(GlobalId.parse(str(gid))) == hash(gid)


@given(gids, gids)
def test_gid_order_follows_text(a, b):
    assert (a < b) == (str(a) < str(b))


@pytest.mark.parametrize("text", ["st-a/img/0", "st-a/img/01", "ST/img/1", "st-a/foo/1", "st-a/img", "a/b/c/d", "x/img/-1"])
def test_gid_rejects_malformed(text):
    with pytest.raises(ValidationError):
        GlobalId.parse(text)


def test_episode_end_date_cannot_precede_start():
    pat = GlobalId("st-a", "pat", 1)
    Episode(GlobalId("st-a", "epi", 1), pat, "L", "cancer", "successful", "2001-01-01", "2001-01-01")
    with pytest.raises(ValidationError):
        Episode(GlobalId("st-a", "epi", 2), pat, "L", "cancer", "successful", "2001-01-02", "2001-01-01")
    with pytest.raises(ValidationError):
        Episode(GlobalId("st-a", "epi", 3), pat, "X", "cancer", "none", "2001-01-02")


def test_record_validation():
    pat = GlobalId("st-a", "pat", 1)
    PatientRecord(pat, "0123456789abcdef", 50, "F", True, "st-a")
    with pytest.raises(ValidationError):
        PatientRecord(pat, "PLAINTEXT-ID", 50, "F", True, "st-a")
    with pytest.raises(ValidationError):
        PatientRecord(pat, "0123456789abcdef", 200, "F", True, "st-a")
    with pytest.raises(ValidationError):
        ImageMeta(GlobalId("st-a", "img", 1), pat, "AP", "L", "2004-01-01", 2, 2, "MG", "0" * 64)


def test_format_number():
    assert format_number(True) == "true"
    assert format_number(7) == "7"
    assert format_number(138.75) == "138.75"
    assert format_number(0.1 + 0.2) == repr(0.1 + 0.2)
