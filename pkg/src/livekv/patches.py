"""Patch definitions, the patch file format, and category rules."""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from pathlib import Path

from .functions import FunctionId, function_by_name
from .generations import PAGE_SIZE


class PatchError(Exception):
    pass


class PatchCategory(enum.Enum):
    THREAD_LOCAL = "thread_local"
    THREAD_GROUP = "thread_group"
    PROCESS = "process"


class Method(enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


@dataclass(frozen=True)
class Replacement:
    function: FunctionId
    tag: str
    blob: bytes = field(repr=False)


@dataclass(frozen=True)
class PatchSpec:
    patch_id: str
    category: PatchCategory
    replacements: tuple[Replacement, ...]
    payload_bytes: int
    tag: str

    @property
    def noop(self) -> bool:
        return is_noop_id(self.patch_id)

    @property
    def blob_pages(self) -> int:
        return -(-self.payload_bytes // PAGE_SIZE)


@dataclass(frozen=True)
class Violation:
    reason: str

    def __bool__(self) -> bool:
        return False


def is_noop_id(patch_id: str) -> bool:
    return patch_id == "noop" or patch_id.startswith("noop-")


def make_patch(patch_id: str, category: PatchCategory | str, payload_bytes: int,
               replacements: list[tuple[str, str]]) -> PatchSpec:
    """Build a validated spec; blobs are seeded by ``patch_id`` and split evenly."""
    if isinstance(category, str):
        try:
            category = PatchCategory(category)
        except ValueError:
            raise PatchError(f"invalid category {category!r}") from None
    if payload_bytes < 0:
        raise PatchError("payload must be non-negative")
    if not replacements and not is_noop_id(patch_id):
        raise PatchError(f"patch {patch_id!r} has no replacements")
    if replacements and payload_bytes < len(replacements):
        raise PatchError("payload smaller than the number of replacements")
    payload = random.Random(patch_id).randbytes(payload_bytes) if replacements else b""
    reps = []
    n = len(replacements)
    pos = 0
    for i, (name, tag) in enumerate(replacements):
        size = payload_bytes // n + (1 if i < payload_bytes % n else 0)
        try:
            fid = function_by_name(name)
        except KeyError:
            raise PatchError(f"unknown function {name!r}") from None
        reps.append(Replacement(fid, tag, payload[pos:pos + size]))
        pos += size
    tags = {r.function.name: r.tag for r in reps}
    tag = tags.get("render_version") or (reps[0].tag if reps else "noop")
    return PatchSpec(patch_id, category, tuple(reps), sum(len(r.blob) for r in reps), tag)


def parse_patch(text: str) -> PatchSpec:
    patch_id = category = payload = None
    replacements: list[tuple[str, str]] = []
    ended = False
    for lineno, raw in enumerate(text.split("\n"), 1):
        line = raw.strip()
        if not line:
            continue
        if ended:
            raise PatchError(f"line {lineno}: content after 'end'")
        words = line.split()
        head = words[0]
        if head == "patch" and len(words) == 2 and patch_id is None:
            patch_id = words[1]
        elif head == "category" and len(words) == 2 and category is None:
            category = words[1]
        elif head == "payload" and len(words) == 2 and payload is None:
            try:
                payload = int(words[1])
            except ValueError:
                raise PatchError(f"line {lineno}: payload must be an integer") from None
        elif head == "replace" and len(words) == 4 and words[2] == "tag":
            replacements.append((words[1], words[3]))
        elif head == "end" and len(words) == 1:
            ended = True
        else:
            raise PatchError(f"line {lineno}: unexpected directive {line!r}")
    if not ended:
        raise PatchError("missing 'end'")
    if patch_id is None or category is None or payload is None:
        raise PatchError("patch, category and payload directives are required")
    return make_patch(patch_id, category, payload, replacements)


def format_patch(patch: PatchSpec) -> str:
    lines = [f"patch {patch.patch_id}", f"category {patch.category.value}",
             f"payload {patch.payload_bytes}"]
    lines += [f"replace {r.function.name} tag {r.tag}" for r in patch.replacements]
    lines.append("end")
    return "\n".join(lines) + "\n"


def load_patch_file(path: str | Path) -> PatchSpec:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise PatchError(f"cannot read {path}: {e.strerror}") from None
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise PatchError("patch file must be ASCII") from None
    return parse_patch(text)


def validate(patch: PatchSpec, method: Method) -> bool | Violation:
    if method is Method.GLOBAL or patch.category is PatchCategory.THREAD_LOCAL:
        return True
    return Violation("requires global quiescence")


KIB = 1024


def builtin_patches() -> list[PatchSpec]:
    tl = PatchCategory.THREAD_LOCAL
    return [
        make_patch("p1-render-4k", tl, 4 * KIB, [("render_version", "v1")]),
        make_patch("p2-upper-16k", tl, 16 * KIB,
                   [("render_version", "v2"), ("transform_value", "v2-upper")]),
        make_patch("p3-render-64k", tl, 64 * KIB, [("render_version", "v3")]),
        make_patch("p4-render-200k", tl, 200 * KIB, [("render_version", "v4")]),
        make_patch("p5-reverse-8k", tl, 8 * KIB,
                   [("render_version", "v5"), ("transform_value", "v5-reverse")]),
        make_patch("g1-group-8k", PatchCategory.THREAD_GROUP, 8 * KIB,
                   [("transform_value", "g1-lower")]),
        make_patch("x1-process-4k", PatchCategory.PROCESS, 4 * KIB, [("render_version", "x1")]),
        make_patch("noop", tl, 0, []),
    ]


def builtin(patch_id: str) -> PatchSpec:
    for p in builtin_patches():
        if p.patch_id == patch_id:
            return p
    raise PatchError(f"unknown builtin patch {patch_id!r}")


def synthetic(payload_bytes: int, tag: str | None = None) -> PatchSpec:
    """A thread-local render_version patch of a given payload size."""
    tag = tag or f"s{payload_bytes}"
    return make_patch(f"synthetic-{payload_bytes}", PatchCategory.THREAD_LOCAL,
                      payload_bytes, [("render_version", tag)])


def resolve_patch_ref(ref: str) -> PatchSpec:
    """Load ``builtin:<id>``, ``synthetic:<bytes>`` or a patch file path."""
    if ref.startswith("builtin:"):
        return builtin(ref[len("builtin:"):])
    if ref.startswith("synthetic:"):
        try:
            return synthetic(int(ref[len("synthetic:"):]))
        except ValueError:
            raise PatchError(f"bad synthetic size in {ref!r}") from None
    return load_patch_file(ref)
