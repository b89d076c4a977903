"""Byte-stable XML writing and strict reading shared by the persistence formats.

Writers emit UTF-8, LF line endings, two-space indentation, and a fixed
attribute order, so equal states always serialize to identical bytes.
Readers use :mod:`xml.etree.ElementTree` but reject anything outside the
expected shape (unknown tags or attributes, malformed decimals,
duplicate ids) instead of guessing.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET


class SchemaError(Exception):
    """File is well-formed XML but does not match the expected schema."""


_TEXT_ESCAPES = {"&": "&amp;", "<": "&lt;", ">": "&gt;", "\r": "&#13;"}
_ATTR_ESCAPES = {
    "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;",
    "\n": "&#10;", "\t": "&#9;", "\r": "&#13;",
}


def _check_representable(s: str) -> None:
    for ch in s:
        code = ord(ch)
        if code < 0x20 and ch not in "\t\n\r":
            raise SchemaError(f"control character {code:#x} cannot be stored in XML")


def esc_text(s: str) -> str:
    _check_representable(s)
    return "".join(_TEXT_ESCAPES.get(c, c) for c in s)


def esc_attr(s: str) -> str:
    _check_representable(s)
    return "".join(_ATTR_ESCAPES.get(c, c) for c in s)


def attr_str(pairs: list[tuple[str, str]]) -> str:
    return "".join(f' {k}="{esc_attr(v)}"' for k, v in pairs)


def parse_decimal(s: str, what: str = "decimal") -> float:
    """Fixed-point decimals only; no exponents, no inf/nan."""
    body = s[1:] if s.startswith("-") else s
    whole, dot, frac = body.partition(".")
    digits = "0123456789"
    if not whole or any(c not in digits for c in whole):
        raise SchemaError(f"bad {what} {s!r}")
    if dot and (not frac or any(c not in digits for c in frac)):
        raise SchemaError(f"bad {what} {s!r}")
    value = float(s)
    if abs(value) >= 1e9:
        raise SchemaError(f"{what} out of range: {s!r}")
    return value


def parse_int(s: str, what: str = "integer") -> int:
    neg = s.startswith("-")
    body = s[1:] if neg else s
    if not body or any(c not in "0123456789" for c in body):
        raise SchemaError(f"bad {what} {s!r}")
    return int(s)


def load_root(path, expected_tag: str) -> ET.Element:
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        raise SchemaError(f"{path}: not well-formed XML: {exc}") from exc
    root = tree.getroot()
    if root.tag != expected_tag:
        raise SchemaError(f"{path}: expected <{expected_tag}>, found <{root.tag}>")
    return root


def take_attrs(elem: ET.Element, required: tuple[str, ...],
               optional: tuple[str, ...] = ()) -> dict[str, str]:
    """Return the element's attributes, enforcing the exact expected set."""
    seen = dict(elem.attrib)
    out = {}
    for name in required:
        if name not in seen:
            raise SchemaError(f"<{elem.tag}> is missing attribute {name!r}")
        out[name] = seen.pop(name)
    for name in optional:
        if name in seen:
            out[name] = seen.pop(name)
    if seen:
        raise SchemaError(f"<{elem.tag}> has unexpected attributes {sorted(seen)}")
    return out


def check_children(elem: ET.Element, allowed: tuple[str, ...]) -> None:
    for child in elem:
        if child.tag not in allowed:
            raise SchemaError(f"unexpected element <{child.tag}> inside <{elem.tag}>")


def check_no_text(elem: ET.Element) -> None:
    if (elem.text or "").strip():
        raise SchemaError(f"unexpected text inside <{elem.tag}>")
