import base64

import pytest

from conftest import golden_bytes, make_grid, make_token, sample_dicom
from gridbox import auth
from gridbox.dicom import parse_dicom
from gridbox.federation import clique, line
from gridbox.formal import parse_formal
from gridbox.model import GlobalId, ValidationError
from gridbox.oracle import oracle_answer
from gridbox.pipeline import PipelineSyntaxError, parse_pipeline, run_pipeline
from gridbox.wire import Message, message_rs

ADMIN = make_token("root", ("admin",))
W = make_token("w", ("writer",))
R = make_token("r", ("reader",))
SEL = parse_formal("FIND IMAGES WHERE image.rows > 0")


def test_message_dispatch_and_error_codes():
    net, nodes = make_grid(clique(["st-a"]))
    node = nodes["st-a"]
    node.users.add("alice", "pw", ["writer"])
    tok = node.handle(Message("auth", {"user": "alice", "secret": "pw"})).attrs["tok"]
    put = node.handle(Message("file-put", {"tok": tok}, base64.b64encode(golden_bytes()).decode()))
    assert put.attrs["gid"] == "st-a/img/1" and put.attrs["duplicate"] == "false"
    cases = [
        (Message("auth", {"user": "alice", "secret": "nope"}), "auth"),
        (Message("file-put", {}, ""), "auth"),
        (Message("query", {"tok": tok}, "", (Message("formal", {}, "FIND IMAGES WHERE"),)), "invalid"),
        (Message("query", {"tok": tok}), "protocol"),
        (Message("update", {"gid": "st-a/img/9", "tok": tok}, "", (Message("set", {"path": "image.view"}, "CC"),)), "notfound"),
        (Message("update", {"gid": "st-a/img/1", "tok": tok}, "", (Message("set", {"path": "image.rows"}, "3"),)), "invalid"),
        (Message("file-get", {"ref": "st-a/img/1"}), "auth"),
        (Message("resultset", {}), "protocol"),
        (Message("alg-add", {"tok": tok, "name": "m"}, "", (Message("source", {}, "mean"),)), "auth"),
    ]
    for msg, code in cases:
        reply = node.handle(msg)
        assert (reply.kind, reply.attrs.get("code")) == ("error", code), msg


def test_user_text_query_over_messages():
    net, nodes = make_grid(clique(["st-a", "st-b"]))
    nodes["st-b"].store.add_image(sample_dicom("X", age=60, hrt=True), W)
    nodes["st-b"].store.add_image(sample_dicom("Y", age=45, hrt=True), W)
    text = "find all mammographic images for all women over 50 undergoing HRT treatment"
    reply = net.request("client", "st-a", Message("query", {"tok": R}, "", (Message("user", {}, text),)))
    assert [str(g) for g in message_rs(reply).gids()] == ["st-b/img/1"]


def test_update_and_episode_messages():
    net, nodes = make_grid(clique(["st-a"]))
    node = nodes["st-a"]
    node.store.add_image(golden_bytes(), W)
    reply = node.handle(Message("update", {"gid": "st-a/pat/1", "tok": W}, "", (Message("set", {"path": "patient.hrt"}, "false"),)))
    assert reply.attrs["status"] == "ok"
    reply = node.handle(Message("episode-add", {"tok": W, "patient": "st-a/pat/1", "laterality": "R",
                                                "diagnosis": "normal", "therapy_outcome": "none", "date": "2003-01-01"}))
    assert reply.attrs["gid"] == "st-a/epi/1"
    assert node.store.patients[GlobalId.parse("st-a/pat/1")].hrt is False


def test_algorithm_distribution_and_execution(tmp_path):
    net, nodes = make_grid(line(["st-a", "st-b", "st-c"]), data_root=tmp_path)
    for site, node in nodes.items():
        node.store.add_image(sample_dicom(f"{site}-1", pixels=[1, 2, 3, 4]), W)
        node.store.add_image(golden_bytes(), W)
    with pytest.raises(auth.AuthError):
        nodes["st-a"].add_algorithm("m", "mean", R)
    with pytest.raises(PipelineSyntaxError):
        nodes["st-a"].add_algorithm("m", "mean; max", ADMIN)
    with pytest.raises(ValidationError):
        nodes["st-a"].add_algorithm("Bad Name", "mean", ADMIN)
    version, rs = nodes["st-a"].add_algorithm("m", "mean", ADMIN)
    assert version == 1 and all(n.algorithms["m"].version == 1 for n in nodes.values())
    version, _ = nodes["st-c"].add_algorithm("m", "crop(0,0,1,1); max", ADMIN)
    assert version == 2 and {n.algorithms["m"].source for n in nodes.values()} == {"crop(0,0,1,1); max"}
    nodes["st-a"].add_algorithm("m", "mean", ADMIN)

    net.transcript.clear()
    rs = nodes["st-b"].execute_algorithm(SEL, "m", R)
    assert net.transcript.count("file-chunk", "resp") == 0
    assert len(rs.records) == 6
    for gid, fields in rs.records.items():
        store = nodes[gid.site].store
        obj = parse_dicom(store.blobs.get(store.images[gid].guid))
        local = run_pipeline(parse_pipeline("mean"), obj.pixels(), obj.rows, obj.cols)
        assert dict(fields)["alg.m.value"] == repr(local)
        assert store.images[gid].derived["m"] == local

    q = parse_formal("FIND IMAGES WHERE alg.m.value > 100")
    got = nodes["st-a"].query(q, R)
    assert got.records == oracle_answer(q, [n.store.snapshot() for n in nodes.values()])
    assert len(got.records) == 3

    # algorithms and derived values survive a restart
    net2, again = make_grid(line(["st-a", "st-b", "st-c"]), data_root=tmp_path)
    assert again["st-b"].algorithms["m"].version == 3
    assert again["st-b"].query(q, R).records == got.records


def test_unknown_algorithm_and_failures_warn():
    net, nodes = make_grid(clique(["st-a", "st-b"]))
    nodes["st-a"].store.add_image(golden_bytes(), W)
    rs = nodes["st-a"].execute_algorithm(SEL, "ghost", R)
    assert rs.warnings == ("noalg:st-a", "noalg:st-b") and not rs.records
    nodes["st-a"].add_algorithm("c", "crop(0,0,3,3); mean", ADMIN)
    rs = nodes["st-a"].execute_algorithm(SEL, "c", R)
    assert rs.warnings == ("algfail:st-a/img/1",)


def test_vector_results_are_returned_not_stored():
    net, nodes = make_grid(clique(["st-a"]))
    nodes["st-a"].store.add_image(golden_bytes(), W)
    nodes["st-a"].add_algorithm("h", "histogram(2)", ADMIN)
    rs = nodes["st-a"].execute_algorithm(SEL, "h", R)
    assert dict(rs.records[GlobalId.parse("st-a/img/1")])["alg.h.value"] == "2,2"
    assert nodes["st-a"].store.images[GlobalId.parse("st-a/img/1")].derived == {}


def test_alg_exec_requires_image_selector():
    net, nodes = make_grid(clique(["st-a"]))
    with pytest.raises(ValidationError):
        nodes["st-a"].execute_algorithm(parse_formal("FIND PATIENTS WHERE patient.age > 1"), "m", R)
