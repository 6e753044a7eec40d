import math
import statistics

import pytest
from hypothesis import given, strategies as st

from conftest import golden_bytes
from gridbox.dicom import parse_dicom
from gridbox.pipeline import PipelineError, PipelineSyntaxError, parse_pipeline, run_pipeline

GOLD = [0, 100, 200, 255]


def run(src, pixels=GOLD, rows=2, cols=2, bits=8):
    return run_pipeline(parse_pipeline(src), pixels, rows, cols, bits)


def test_golden_mean_exact():
    obj = parse_dicom(golden_bytes())
    assert run_pipeline(parse_pipeline("mean"), obj.pixels(), obj.rows, obj.cols) == 138.75


def test_terminals_on_golden():
    assert run("min") == 0.0 and run("max") == 255.0
    assert run("stddev") == statistics.pstdev(GOLD)
    assert run("count_above(100)") == 2
    # equal-width bins over [0, 255]; the maximum lands in the last bin
    assert run("histogram(4)") == [1, 1, 0, 2]
    assert run("histogram(256)")[255] == 1
    assert run("histogram(1)") == [4]


def test_transforms():
    assert run("crop(1,0,1,2); mean") == (100 + 255) / 2
    assert run("normalize; max") == 1.0
    assert run("normalize; histogram(2)") == [2, 2]
    assert run("normalize; mean", pixels=[7, 7, 7, 7]) == 0.0
    assert run("crop(0,0,2,1); normalize; count_above(0.5)") == 1


def test_sixteen_bit_histogram_domain():
    assert run("histogram(2)", pixels=[0, 1000, 40000, 65535], bits=16) == [2, 2]


def test_crop_out_of_bounds():
    with pytest.raises(PipelineError):
        run("crop(1,1,2,2); mean")


@pytest.mark.parametrize(
    "src",
    ["", "mean; max", "normalize", "crop(1,2); mean", "blur; mean", "histogram(0)", "histogram(257)",
     "histogram(2.5)", "crop(0,0,0,1); mean", "mean(3)", "count_above"],
)
def test_syntax_errors(src):
    with pytest.raises(PipelineSyntaxError):
        parse_pipeline(src)


def test_pipeline_text_roundtrip():
    p = parse_pipeline(" crop( 0 , 0 , 2 , 2 ) ;normalize;  count_above(0.25)")
    assert str(p) == "crop(0,0,2,2); normalize; count_above(0.25)"
    assert parse_pipeline(str(p)) == p


grids = st.integers(1, 6).flatmap(
    lambda r: st.integers(1, 6).flatmap(
        lambda c: st.tuples(st.just(r), st.just(c), st.lists(st.integers(0, 255), min_size=r * c, max_size=r * c))
    )
)


@given(grids)
def test_statistics_match_reference(g):
    rows, cols, px = g
    assert math.isclose(run("mean", px, rows, cols), statistics.fmean(px), rel_tol=1e-12, abs_tol=1e-12)
    assert math.isclose(run("stddev", px, rows, cols), statistics.pstdev(px), rel_tol=1e-9, abs_tol=1e-9)
    assert sum(run("histogram(7)", px, rows, cols)) == len(px)
    assert run("count_above(128)", px, rows, cols) == sum(1 for v in px if v > 128)


@given(grids)
def test_pipeline_is_pure(g):
    rows, cols, px = g
    before = list(px)
    first = run("normalize; stddev", px, rows, cols)
    assert px == before and run("normalize; stddev", px, rows, cols) == first


@given(grids)
def test_crop_full_window_is_identity(g):
    rows, cols, px = g
    for term in ("mean", "stddev", "histogram(5)"):
        assert run(f"crop(0,0,{cols},{rows}); {term}", px, rows, cols) == run(term, px, rows, cols)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 255))
def test_constant_image_mean(rows, cols, c):
    assert run("mean", [c] * (rows * cols), rows, cols) == c
