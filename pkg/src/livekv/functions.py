"""Patchable functions and the behaviors their versions select.

Only two functions are routed through the dispatch table: ``render_version``
(what ``VERSION`` reports) and ``transform_value`` (applied to every value
returned by ``GET``).  A behavior is identified by its tag; the tag also
determines what the behavior does, so a patch file only needs to name a tag.
"""
from __future__ import annotations

from dataclasses import dataclass, field

RENDER_VERSION = 0
TRANSFORM_VALUE = 1

FUNCTION_NAMES: tuple[str, ...] = ("render_version", "transform_value")

_TRANSFORMS = {
    "upper": str.upper,
    "lower": str.lower,
    "reverse": lambda s: s[::-1],
}


@dataclass(frozen=True)
class FunctionId:
    id: int
    name: str


@dataclass(frozen=True)
class BehaviorVersion:
    function: FunctionId
    version: int
    blob: bytes = field(repr=False)
    tag: str

    @property
    def blob_size(self) -> int:
        return len(self.blob)


def function_by_name(name: str) -> FunctionId:
    try:
        return FunctionId(FUNCTION_NAMES.index(name), name)
    except ValueError:
        raise KeyError(f"unknown function {name!r}") from None


def default_functions(blob_size: int = 1024) -> list[tuple[FunctionId, BehaviorVersion]]:
    """Version-0 table for the server: both functions tagged ``v0``."""
    out = []
    for i, name in enumerate(FUNCTION_NAMES):
        fid = FunctionId(i, name)
        blob = bytes((i * 31 + k) & 0xFF for k in range(blob_size))
        out.append((fid, BehaviorVersion(fid, 0, blob, "v0")))
    return out


def render_version(behavior: BehaviorVersion) -> str:
    return behavior.tag


def transform_value(behavior: BehaviorVersion, value: str) -> str:
    """Apply the value transformation selected by ``behavior``.

    ``v0`` is the identity.  Any other tag may end in ``-upper``, ``-lower``
    or ``-reverse``; the transformed value is suffixed with ``#<tag>`` so a
    client can tell which version served it.
    """
    tag = behavior.tag
    if tag == "v0":
        return value
    _, _, op = tag.rpartition("-")
    fn = _TRANSFORMS.get(op)
    if fn is not None:
        value = fn(value)
    return f"{value}#{tag}"
