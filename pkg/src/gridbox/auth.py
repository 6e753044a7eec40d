"""Time-limited, delegable credentials under a single shared VO key."""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import os
import secrets
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .model import GridError, SITE_RE

ROLES = ("reader", "writer", "admin")
DEFAULT_TTL = 3600
DEFAULT_DEPTH = 8
KEY_ENV = "MG_VO_KEY_FILE"

ACTION_ROLE = {
    "add": "writer",
    "update": "writer",
    "add_episode": "writer",
    "set_derived": "writer",
    "query": "reader",
    "retrieve": "reader",
    "addAlgorithm": "admin",
    "executeAlgorithm": "reader",
}
_RANK = {"reader": 1, "writer": 2, "admin": 3}

_PBKDF2_ROUNDS = 20_000


class AuthError(GridError):
    pass


class TokenExpired(AuthError):
    pass


class BadMac(AuthError):
    pass


class MalformedToken(AuthError):
    pass


class DelegationExhausted(AuthError):
    pass


@dataclass(frozen=True)
class Token:
    user: str
    roles: tuple
    issued: int
    ttl: int
    depth: int
    chain: tuple = ()
    mac: bytes = b""

    def body(self) -> bytes:
        return "|".join(
            [
                self.user,
                ",".join(self.roles),
                str(self.issued),
                str(self.ttl),
                str(self.depth),
                ",".join(self.chain),
            ]
        ).encode("utf-8")

    def encode(self) -> str:
        raw = self.body() + b"|" + self.mac.hex().encode("ascii")
        return base64.b64encode(raw).decode("ascii")

    @classmethod
    def decode(cls, text: str) -> "Token":
        try:
            raw = base64.b64decode(text.encode("ascii"), validate=True)
            fields = raw.decode("utf-8").split("|")
            user, roles, issued, ttl, depth, chain, mac = fields
            tok = cls(
                user=user,
                roles=tuple(roles.split(",")) if roles else (),
                issued=int(issued),
                ttl=int(ttl),
                depth=int(depth),
                chain=tuple(chain.split(",")) if chain else (),
                mac=bytes.fromhex(mac),
            )
        except (ValueError, UnicodeError, binascii.Error) as exc:
            raise MalformedToken(f"malformed token: {exc}") from None
        # only the canonical spelling is accepted, so no bit of the wire form is ignored
        if tok.encode() != text:
            raise MalformedToken("malformed token: non-canonical encoding")
        return tok


@dataclass(frozen=True)
class Claims:
    user: str
    roles: tuple
    depth: int
    chain: tuple = ()


def sign(token: Token, key: bytes) -> Token:
    return replace(token, mac=hmac.new(key, token.body(), hashlib.sha256).digest())


def verify(token, key: bytes, now: int) -> Claims:
    """Check the MAC and expiry of ``token`` (a Token or its wire string)."""
    if isinstance(token, str):
        token = Token.decode(token)
    if not isinstance(token, Token):
        raise MalformedToken("no token presented")
    expected = hmac.new(key, token.body(), hashlib.sha256).digest()
    if not hmac.compare_digest(expected, token.mac):
        raise BadMac("token MAC does not verify")
    if now >= token.issued + token.ttl:
        raise TokenExpired(f"token expired at {token.issued + token.ttl}")
    return Claims(token.user, token.roles, token.depth, token.chain)


def delegate(token, site: str, key: bytes, now: int) -> Token:
    if isinstance(token, str):
        token = Token.decode(token)
    verify(token, key, now)
    if not SITE_RE.fullmatch(site):
        raise AuthError(f"invalid delegating site {site!r}")
    if token.depth <= 0:
        raise DelegationExhausted("delegation depth exhausted")
    return sign(replace(token, depth=token.depth - 1, chain=token.chain + (site,)), key)


def authorize(claims: Claims, action: str) -> bool:
    need = ACTION_ROLE.get(action)
    if need is None:
        return False
    return any(_RANK.get(r, 0) >= _RANK[need] for r in claims.roles)


def hash_secret(secret: str, salt: Optional[bytes] = None) -> str:
    salt = salt if salt is not None else secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", secret.encode("utf-8"), salt, _PBKDF2_ROUNDS)
    return f"{salt.hex()}${digest.hex()}"


def _check_secret(secret: str, stored: str) -> bool:
    try:
        salt_hex, _ = stored.split("$")
        salt = bytes.fromhex(salt_hex)
    except ValueError:
        return False
    return hmac.compare_digest(hash_secret(secret, salt), stored)


class UserTable:
    """Users mapped to salted secret hashes and role sets.

    File format is one ``user:salted-hash:roles`` line per user, roles
    comma-separated; ``#`` starts a comment line.
    """

    def __init__(self, entries: Optional[dict] = None):
        self.entries: dict[str, tuple[str, tuple]] = dict(entries or {})

    def add(self, user: str, secret: str, roles) -> None:
        roles = tuple(roles)
        bad = [r for r in roles if r not in ROLES]
        if bad or ":" in user or "|" in user or not user:
            raise AuthError(f"invalid user entry for {user!r}")
        self.entries[user] = (hash_secret(secret), roles)

    @classmethod
    def parse(cls, text: str) -> "UserTable":
        table = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(":")
            if len(parts) != 3:
                raise AuthError(f"user table line {n}: expected user:hash:roles")
            user, hashed, roles = parts
            table.entries[user] = (hashed, tuple(r for r in roles.split(",") if r))
        return table

    @classmethod
    def load(cls, path) -> "UserTable":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        return "".join(f"{u}:{h}:{','.join(r)}\n" for u, (h, r) in sorted(self.entries.items()))

    def check(self, user: str, secret: str) -> tuple:
        entry = self.entries.get(user)
        # hash even for unknown users so both failures look alike
        stored = entry[0] if entry else hash_secret("", b"\x00" * 16)
        ok = _check_secret(secret, stored)
        if entry is None or not ok:
            raise AuthError("authentication failed")
        return entry[1]


def authenticate(
    table: UserTable,
    user: str,
    secret: str,
    key: bytes,
    now: int,
    ttl: int = DEFAULT_TTL,
    depth: int = DEFAULT_DEPTH,
) -> Token:
    roles = table.check(user, secret)
    return sign(Token(user, roles, int(now), ttl, depth), key)


def load_key(path=None) -> bytes:
    """Read the 32-byte VO key (raw or hex) from ``path`` or $MG_VO_KEY_FILE."""
    path = path or os.environ.get(KEY_ENV)
    if not path:
        raise AuthError(f"no VO key file given and {KEY_ENV} is unset")
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise AuthError(f"cannot read VO key file {path}: {exc.strerror}") from None
    text = data.strip()
    if len(text) == 64:
        try:
            return bytes.fromhex(text.decode("ascii"))
        except ValueError:
            pass
    if len(data) == 32:
        return data
    raise AuthError(f"VO key file {path} must hold 32 raw bytes or 64 hex chars")
