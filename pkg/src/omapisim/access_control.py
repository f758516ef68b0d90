"""
Access rules for secure element applets and the enforcer that applies them.

Rule databases travel as a simplified GlobalPlatform Response-ALL-AR-DO:

    FF40 { E2 { E1 { 4F aid, C1 hash }, E3 { D0 policy } } ... }

An empty 4F or C1 value is a wildcard. D0 holds 01 (allow), 00 (deny) or
a multiple of 8 bytes of APDU filters (4 header bytes + 4 mask bytes each).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

from . import tlv
from .apdu import CommandApdu, from_hex, to_hex

TAG_ALL_AR = 0xFF40
TAG_REF_AR = 0xE2
TAG_REF = 0xE1
TAG_AID_REF = 0x4F
TAG_HASH_REF = 0xC1
TAG_AR = 0xE3
TAG_APDU_AR = 0xD0

HASH_LEN = 20


class MalformedRuleDb(ValueError):
    pass


class Wildcard:
    """Matches any AID or any client hash."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "WILDCARD"

    def __reduce__(self):
        return (Wildcard, ())


WILDCARD = Wildcard()

Ref = Union[Wildcard, bytes]


@dataclass(frozen=True, order=True)
class ApduFilter:
    header: bytes
    mask: bytes

    def __post_init__(self):
        object.__setattr__(self, "header", bytes(self.header))
        object.__setattr__(self, "mask", bytes(self.mask))
        if len(self.header) != 4 or len(self.mask) != 4:
            raise ValueError("APDU filter header and mask must be 4 bytes each")

    def matches(self, cmd: CommandApdu) -> bool:
        return all((c & m) == (h & m) for c, h, m in zip(cmd.header, self.header, self.mask))

    def to_bytes(self) -> bytes:
        return self.header + self.mask

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ApduFilter":
        return cls(raw[:4], raw[4:8])


class Policy(enum.Enum):
    ALLOW = "allow"
    DENY = "deny"
    ALLOW_FILTERED = "filtered"


@dataclass(frozen=True)
class AccessRule:
    aid_ref: Ref = WILDCARD
    hash_ref: Ref = WILDCARD
    policy: Policy = Policy.ALLOW
    filters: Tuple[ApduFilter, ...] = ()

    def __post_init__(self):
        if self.aid_ref is not WILDCARD:
            object.__setattr__(self, "aid_ref", bytes(self.aid_ref))
            if not 5 <= len(self.aid_ref) <= 16:
                raise ValueError(f"rule AID must be 5..16 bytes, got {len(self.aid_ref)}")
        if self.hash_ref is not WILDCARD:
            object.__setattr__(self, "hash_ref", bytes(self.hash_ref))
            if len(self.hash_ref) != HASH_LEN:
                raise ValueError(f"rule hash must be {HASH_LEN} bytes")
        object.__setattr__(self, "filters", tuple(self.filters))
        if self.policy is Policy.ALLOW_FILTERED and not self.filters:
            raise ValueError("filtered policy needs at least one filter")
        if self.policy is not Policy.ALLOW_FILTERED and self.filters:
            raise ValueError("filters only apply to the filtered policy")

    def matches(self, client_hash: bytes, aid: bytes) -> bool:
        return ((self.aid_ref is WILDCARD or self.aid_ref == aid)
                and (self.hash_ref is WILDCARD or self.hash_ref == client_hash))

    @property
    def specificity(self) -> int:
        # (aid, hash) > (aid, *) > (*, hash) > (*, *)
        return (2 if self.aid_ref is not WILDCARD else 0) + (1 if self.hash_ref is not WILDCARD else 0)


@dataclass(frozen=True)
class AccessRuleDb:
    rules: Tuple[AccessRule, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))


class DecisionKind(enum.Enum):
    ALLOWED = "Allowed"
    ALLOWED_FILTERED = "AllowedFiltered"
    DENIED = "Denied"
    DENIED_NO_DB = "DeniedNoDb"


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    filters: Tuple[ApduFilter, ...] = ()

    @property
    def allowed(self) -> bool:
        return self.kind in (DecisionKind.ALLOWED, DecisionKind.ALLOWED_FILTERED)

    def __str__(self):
        return self.kind.value


ALLOWED = Decision(DecisionKind.ALLOWED)
DENIED = Decision(DecisionKind.DENIED)
DENIED_NO_DB = Decision(DecisionKind.DENIED_NO_DB)


def enforcer_decide(db: Optional[AccessRuleDb], client_hash: bytes, aid: bytes) -> Decision:
    """Pick the verdict of the most specific matching rules.

    Equally specific matches combine as Deny > AllowFiltered > Allow; the
    filters of every filtered match at that level are merged, so the result
    does not depend on rule order.
    """
    if db is None:
        return DENIED_NO_DB
    client_hash = bytes(client_hash)
    aid = bytes(aid)
    matching = [r for r in db.rules if r.matches(client_hash, aid)]
    if not matching:
        return DENIED
    top = max(r.specificity for r in matching)
    best = [r for r in matching if r.specificity == top]
    if any(r.policy is Policy.DENY for r in best):
        return DENIED
    filtered = [r for r in best if r.policy is Policy.ALLOW_FILTERED]
    if filtered:
        merged = sorted({f for r in filtered for f in r.filters})
        return Decision(DecisionKind.ALLOWED_FILTERED, tuple(merged))
    return ALLOWED


def filter_apdu(decision: Decision, cmd: CommandApdu) -> bool:
    if decision.kind is DecisionKind.ALLOWED:
        return True
    if decision.kind is DecisionKind.ALLOWED_FILTERED:
        return any(f.matches(cmd) for f in decision.filters)
    return False


# -- binary rule database ----------------------------------------------------

def _rule_to_tlv(rule: AccessRule) -> tlv.TlvNode:
    aid = b"" if rule.aid_ref is WILDCARD else rule.aid_ref
    hsh = b"" if rule.hash_ref is WILDCARD else rule.hash_ref
    if rule.policy is Policy.ALLOW:
        policy = b"\x01"
    elif rule.policy is Policy.DENY:
        policy = b"\x00"
    else:
        policy = b"".join(f.to_bytes() for f in rule.filters)
    return tlv.cons(TAG_REF_AR,
                    tlv.cons(TAG_REF, tlv.prim(TAG_AID_REF, aid), tlv.prim(TAG_HASH_REF, hsh)),
                    tlv.cons(TAG_AR, tlv.prim(TAG_APDU_AR, policy)))


def encode_rule_db(db: AccessRuleDb) -> bytes:
    return tlv.serialize_ber_tlv([tlv.cons(TAG_ALL_AR, *(_rule_to_tlv(r) for r in db.rules))])


def _only(node: tlv.TlvNode, tag: int) -> tlv.TlvNode:
    found = node.find(tag)
    if len(found) != 1:
        raise MalformedRuleDb(f"expected exactly one {tag:02X} inside {node.tag:02X}, found {len(found)}")
    return found[0]


def _rule_from_tlv(node: tlv.TlvNode) -> AccessRule:
    if node.tag != TAG_REF_AR or len(node.children) != 2:
        raise MalformedRuleDb(f"expected REF-AR-DO E2 with two children, got {node.tag:02X}")
    ref, ar = _only(node, TAG_REF), _only(node, TAG_AR)
    if len(ref.children) != 2 or len(ar.children) != 1:
        raise MalformedRuleDb("REF-DO needs AID and hash refs, AR-DO one APDU-AR-DO")
    aid = _only(ref, TAG_AID_REF).value
    hsh = _only(ref, TAG_HASH_REF).value
    policy = _only(ar, TAG_APDU_AR).value
    try:
        aid_ref = WILDCARD if not aid else aid
        hash_ref = WILDCARD if not hsh else hsh
        if policy == b"\x01":
            return AccessRule(aid_ref, hash_ref, Policy.ALLOW)
        if policy == b"\x00":
            return AccessRule(aid_ref, hash_ref, Policy.DENY)
        if not policy or len(policy) % 8:
            raise MalformedRuleDb(f"APDU-AR-DO of {len(policy)} bytes")
        filters = tuple(ApduFilter.from_bytes(policy[i:i + 8]) for i in range(0, len(policy), 8))
        return AccessRule(aid_ref, hash_ref, Policy.ALLOW_FILTERED, filters)
    except MalformedRuleDb:
        raise
    except ValueError as exc:
        raise MalformedRuleDb(str(exc)) from exc


def decode_rule_db(raw: bytes) -> AccessRuleDb:
    try:
        root = tlv.parse_single(raw)
    except tlv.TlvError as exc:
        raise MalformedRuleDb(f"rule database is not valid BER-TLV: {exc}") from exc
    if root.tag != TAG_ALL_AR:
        raise MalformedRuleDb(f"expected FF40 root, got {root.tag:X}")
    return AccessRuleDb(tuple(_rule_from_tlv(c) for c in root.children))


# -- text rule file ----------------------------------------------------------

def _parse_ref(text: str) -> Ref:
    return WILDCARD if text == "*" else from_hex(text)


def parse_rule_line(line: str) -> AccessRule:
    """Parse `aid=<hex|*> hash=<hex|*> policy=<allow|deny|filters:hex8(,hex8)*>`."""
    fields = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep or key not in ("aid", "hash", "policy") or key in fields:
            raise MalformedRuleDb(f"bad rule token {token!r}")
        fields[key] = value
    if set(fields) != {"aid", "hash", "policy"}:
        raise MalformedRuleDb(f"rule needs aid, hash and policy: {line!r}")
    try:
        aid = _parse_ref(fields["aid"])
        hsh = _parse_ref(fields["hash"])
        policy = fields["policy"].lower()
        if policy == "allow":
            return AccessRule(aid, hsh, Policy.ALLOW)
        if policy == "deny":
            return AccessRule(aid, hsh, Policy.DENY)
        if policy.startswith("filters:"):
            raw = [from_hex(p) for p in policy[len("filters:"):].split(",")]
            if any(len(r) != 8 for r in raw):
                raise MalformedRuleDb("each filter must be 8 bytes (header + mask)")
            return AccessRule(aid, hsh, Policy.ALLOW_FILTERED, tuple(ApduFilter.from_bytes(r) for r in raw))
    except MalformedRuleDb:
        raise
    except ValueError as exc:
        raise MalformedRuleDb(f"{exc} in rule {line!r}") from exc
    raise MalformedRuleDb(f"unknown policy {fields['policy']!r}")


def parse_rule_text(text: str) -> AccessRuleDb:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rules.append(parse_rule_line(line))
        except MalformedRuleDb as exc:
            raise MalformedRuleDb(f"line {lineno}: {exc}") from exc
    return AccessRuleDb(tuple(rules))


def load_rule_file(path) -> AccessRuleDb:
    return parse_rule_text(Path(path).read_text())


def format_rule(rule: AccessRule) -> str:
    aid = "*" if rule.aid_ref is WILDCARD else to_hex(rule.aid_ref)
    hsh = "*" if rule.hash_ref is WILDCARD else to_hex(rule.hash_ref)
    if rule.policy is Policy.ALLOW_FILTERED:
        policy = "filters:" + ",".join(to_hex(f.to_bytes()) for f in rule.filters)
    else:
        policy = rule.policy.value
    return f"aid={aid} hash={hsh} policy={policy}"


def format_rule_text(db: AccessRuleDb) -> str:
    return "".join(format_rule(r) + "\n" for r in db.rules)
