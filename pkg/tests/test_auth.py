import base64
import hashlib
import hmac

import pytest
from hypothesis import given, strategies as st

from conftest import KEY, NOW, make_token
from gridbox import auth
from gridbox.auth import AuthError, BadMac, DelegationExhausted, MalformedToken, Token, TokenExpired


def test_sign_verify_and_claims():
    tok = make_token("bob", ("reader",), ttl=10, depth=2)
    claims = auth.verify(tok, KEY, NOW)
    assert claims == auth.Claims("bob", ("reader",), 2, ())


def test_mac_is_hmac_sha256_over_body():
    tok = Token.decode(make_token())
    assert tok.mac == hmac.new(KEY, tok.body(), hashlib.sha256).digest()


def test_expiry_boundary_is_exclusive():
    tok = make_token(ttl=100)
    auth.verify(tok, KEY, NOW + 99)
    with pytest.raises(TokenExpired):
        auth.verify(tok, KEY, NOW + 100)


def test_wrong_key_rejected():
    with pytest.raises(BadMac):
        auth.verify(make_token(), b"\x01" * 32, NOW)


@given(st.integers(0, 10_000))
def test_every_single_bit_flip_rejected(bit):
    wire = make_token().encode("ascii")
    bit %= len(wire) * 8
    flipped = bytearray(wire)
    flipped[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(AuthError):
        auth.verify(flipped.decode("latin-1"), KEY, NOW)


def test_forged_fields_rejected():
    tok = Token.decode(make_token("eve", ("reader",)))
    forged = Token(tok.user, ("admin",), tok.issued, tok.ttl, tok.depth, tok.chain, tok.mac)
    with pytest.raises(BadMac):
        auth.verify(forged.encode(), KEY, NOW)


def test_non_canonical_encoding_rejected():
    raw = base64.b64decode(make_token())
    with pytest.raises(MalformedToken):
        Token.decode(base64.b64encode(raw).decode() + "\n")
    with pytest.raises(MalformedToken):
        Token.decode("not base64 at all!")


def test_delegation_appends_chain_and_spends_depth():
    tok = make_token(depth=2)
    t1 = auth.delegate(tok, "st-a", KEY, NOW)
    t2 = auth.delegate(t1, "st-b", KEY, NOW)
    assert (t2.depth, t2.chain) == (0, ("st-a", "st-b"))
    assert auth.verify(t2, KEY, NOW).chain == ("st-a", "st-b")
    with pytest.raises(DelegationExhausted):
        auth.delegate(t2, "st-c", KEY, NOW)


def test_delegating_expired_token_fails():
    with pytest.raises(TokenExpired):
        auth.delegate(make_token(ttl=5), "st-a", KEY, NOW + 5)


@pytest.mark.parametrize(
    "roles,action,ok",
    [
        (("reader",), "query", True),
        (("reader",), "add", False),
        (("writer",), "add", True),
        (("writer",), "addAlgorithm", False),
        (("admin",), "addAlgorithm", True),
        (("admin",), "retrieve", True),
        (("reader",), "no-such-action", False),
        ((), "query", False),
    ],
)
def test_authorize(roles, action, ok):
    assert auth.authorize(auth.Claims("u", roles, 0), action) is ok


def test_user_table_never_stores_plaintext(tmp_path):
    table = auth.UserTable()
    table.add("alice", "hunter2-secret", ["reader"])
    text = table.dumps()
    assert "hunter2-secret" not in text
    path = tmp_path / "users.txt"
    path.write_text("# users\n" + text)
    loaded = auth.UserTable.load(path)
    assert loaded.check("alice", "hunter2-secret") == ("reader",)


def test_authenticate_failures_look_alike():
    table = auth.UserTable()
    table.add("alice", "s3cret", ["writer"])
    msgs = []
    for user, secret in (("alice", "wrong"), ("mallory", "s3cret")):
        with pytest.raises(AuthError) as ei:
            auth.authenticate(table, user, secret, KEY, NOW)
        msgs.append(str(ei.value))
    assert msgs[0] == msgs[1]
    tok = auth.authenticate(table, "alice", "s3cret", KEY, NOW)
    assert (tok.ttl, tok.depth, tok.chain) == (3600, 8, ())


def test_user_table_rejects_unknown_roles():
    with pytest.raises(AuthError):
        auth.UserTable().add("x", "y", ["superuser"])


def test_load_key_forms(tmp_path, monkeypatch):
    raw = tmp_path / "raw.key"
    raw.write_bytes(KEY)
    hexed = tmp_path / "hex.key"
    hexed.write_text(KEY.hex() + "\n")
    assert auth.load_key(raw) == KEY == auth.load_key(hexed)
    monkeypatch.setenv("MG_VO_KEY_FILE", str(hexed))
    assert auth.load_key() == KEY
    bad = tmp_path / "bad.key"
    bad.write_text("too short")
    with pytest.raises(AuthError):
        auth.load_key(bad)
    with pytest.raises(AuthError):
        auth.load_key(tmp_path / "missing.key")
