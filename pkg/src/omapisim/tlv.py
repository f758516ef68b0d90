"""BER-TLV with definite lengths only (1-2 byte tags, up to 2 length bytes)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple


class TlvError(ValueError):
    pass


class Truncated(TlvError):
    pass


class IndefiniteLength(TlvError):
    pass


class TrailingGarbage(TlvError):
    pass


class MalformedLength(TlvError):
    """Length field longer than two bytes or not minimally encoded."""


class MalformedTag(TlvError):
    pass


def is_constructed(tag: int) -> bool:
    first = tag >> 8 if tag > 0xFF else tag
    return bool(first & 0x20)


def _check_tag(tag: int) -> None:
    if tag > 0xFF:
        first, second = tag >> 8, tag & 0xFF
        if tag > 0xFFFF or first & 0x1F != 0x1F or second & 0x80 or second < 0x1F:
            raise MalformedTag(f"invalid two-byte tag {tag:04X}")
    elif tag < 0 or tag & 0x1F == 0x1F:
        raise MalformedTag(f"invalid one-byte tag {tag:02X}")


@dataclass(frozen=True)
class TlvNode:
    tag: int
    value: Optional[bytes] = None
    children: Optional[Tuple["TlvNode", ...]] = None

    def __post_init__(self):
        _check_tag(self.tag)
        if is_constructed(self.tag):
            if self.value is not None:
                raise TlvError(f"constructed tag {self.tag:X} cannot carry a primitive value")
            object.__setattr__(self, "children", tuple(self.children or ()))
        else:
            if self.children is not None:
                raise TlvError(f"primitive tag {self.tag:X} cannot carry children")
            object.__setattr__(self, "value", bytes(self.value or b""))

    @property
    def constructed(self) -> bool:
        return is_constructed(self.tag)

    def find(self, tag: int) -> List["TlvNode"]:
        return [c for c in (self.children or ()) if c.tag == tag]


def prim(tag: int, value: bytes = b"") -> TlvNode:
    return TlvNode(tag, value=bytes(value))


def cons(tag: int, *children: TlvNode) -> TlvNode:
    return TlvNode(tag, children=tuple(children))


def _encode_tag(tag: int) -> bytes:
    return tag.to_bytes(2, "big") if tag > 0xFF else bytes((tag,))


def encode_length(n: int) -> bytes:
    if n < 0x80:
        return bytes((n,))
    if n <= 0xFF:
        return bytes((0x81, n))
    if n <= 0xFFFF:
        return bytes((0x82, n >> 8, n & 0xFF))
    raise MalformedLength(f"length {n} needs more than two length bytes")


def _encode_node(node: TlvNode) -> bytes:
    if node.constructed:
        body = b"".join(_encode_node(c) for c in node.children)
    else:
        body = node.value
    return _encode_tag(node.tag) + encode_length(len(body)) + body


def serialize_ber_tlv(nodes: Iterable[TlvNode]) -> bytes:
    return b"".join(_encode_node(n) for n in nodes)


def _read_one(raw: bytes, pos: int) -> Tuple[TlvNode, int]:
    end = len(raw)
    if pos >= end:
        raise Truncated("missing tag")
    tag = raw[pos]
    pos += 1
    if tag & 0x1F == 0x1F:
        if pos >= end:
            raise Truncated("missing second tag byte")
        second = raw[pos]
        pos += 1
        if second & 0x80:
            raise MalformedTag("tags longer than two bytes are not supported")
        tag = (tag << 8) | second
    if pos >= end:
        raise Truncated("missing length")
    first = raw[pos]
    pos += 1
    if first == 0x80:
        raise IndefiniteLength("indefinite length form is not allowed")
    if first < 0x80:
        length = first
    else:
        count = first & 0x7F
        if count > 2:
            raise MalformedLength(f"{count} length bytes not supported")
        if pos + count > end:
            raise Truncated("length field cut short")
        length = int.from_bytes(raw[pos:pos + count], "big")
        pos += count
        if length < 0x80 or (count == 2 and length <= 0xFF):
            raise MalformedLength("length not minimally encoded")
    if pos + length > end:
        raise Truncated(f"value needs {length} bytes, {end - pos} available")
    body = raw[pos:pos + length]
    pos += length
    try:
        if is_constructed(tag):
            return TlvNode(tag, children=tuple(parse_ber_tlv(body))), pos
        return TlvNode(tag, value=body), pos
    except MalformedTag:
        raise
    except TlvError as exc:
        raise type(exc)(f"inside tag {tag:X}: {exc}") from exc


def parse_ber_tlv(raw: bytes) -> List[TlvNode]:
    """Parse a concatenation of TLV objects; the whole input must be consumed."""
    raw = bytes(raw)
    nodes = []
    pos = 0
    while pos < len(raw):
        if raw[pos] in (0x00, 0xFF) and all(b == raw[pos] for b in raw[pos:]):
            raise TrailingGarbage(f"{len(raw) - pos} padding bytes after last object")
        node, pos = _read_one(raw, pos)
        nodes.append(node)
    return nodes


def parse_single(raw: bytes) -> TlvNode:
    """Parse exactly one TLV object with nothing after it."""
    raw = bytes(raw)
    node, pos = _read_one(raw, 0)
    if pos != len(raw):
        raise TrailingGarbage(f"{len(raw) - pos} bytes after tag {node.tag:X}")
    return node


def walk(nodes: Sequence[TlvNode], depth: int = 0):
    for n in nodes:
        yield depth, n
        if n.constructed:
            yield from walk(n.children, depth + 1)
