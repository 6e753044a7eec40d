"""Hypothesis strategies shared by several test modules."""

from hypothesis import strategies as st

from gridbox import dicom

SHORT_VRS = ["AE", "AS", "CS", "DA", "LO", "PN", "SH", "UI", "US", "UL", "FD"]
LONG_VRS = ["OB", "OW", "UT", "UN"]


@st.composite
def elements(draw, max_elems=12):
    tags = draw(
        st.lists(
            st.tuples(st.integers(0x0002, 0xFFFE), st.integers(0, 0xFFFF)),
            min_size=0,
            max_size=max_elems,
            unique=True,
        )
    )
    out = []
    for g, e in sorted(tags):
        vr = draw(st.sampled_from(SHORT_VRS + LONG_VRS))
        n = draw(st.integers(0, 40)) * 2
        value = draw(st.binary(min_size=n, max_size=n))
        out.append(dicom.Element(g, e, vr, value))
    return dicom.DicomObject(tuple(out))


def _xml_char():
    return st.characters(blacklist_categories=("Cs", "Cc"), whitelist_characters="\t\n\r")


xml_text = st.text(_xml_char(), max_size=12)
site_ids = st.from_regex(r"[a-z0-9-]{1,16}", fullmatch=True)
query_ids = st.from_regex(r"[0-9a-f]{32}", fullmatch=True)


@st.composite
def result_sets(draw, universe=None, query_id=None):
    """A ResultSet; records come from ``universe`` (gid -> fields) when given."""
    from gridbox.model import GlobalId
    from gridbox.query import ResultSet

    if universe is None:
        gids = draw(st.lists(st.builds(GlobalId, site_ids, st.sampled_from(["pat", "img"]), st.integers(1, 999)),
                             max_size=5, unique=True))
        records = {g: tuple(draw(st.lists(st.tuples(xml_text, xml_text), max_size=3))) for g in gids}
    else:
        keys = draw(st.lists(st.sampled_from(sorted(universe)), max_size=len(universe), unique=True)) if universe else []
        records = {g: universe[g] for g in keys}
    warnings = tuple(draw(st.lists(xml_text, max_size=3)))
    qid = query_id or draw(query_ids)
    return ResultSet(qid, draw(site_ids), dict(sorted(records.items())), warnings)
