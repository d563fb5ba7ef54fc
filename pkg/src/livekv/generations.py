"""Versioned code generations over simulated 4 KiB pages.

A generation is a dispatch table plus a page index mapping virtual page
numbers to physical frames.  Frames are shared between generations until a
write hits a pinned page, at which point the writing generation gets its own
copy.  Unpinned pages (all data pages, and any code page nobody pinned) stay
shared, so writes through one generation are visible through every other.

Cloning copies the page index entry by entry and patching writes the payload
byte by byte.  Both loops are kept deliberately naive: they are the cost
model, and their durations are what the scaling experiments measure.
"""
from __future__ import annotations

import struct
import threading
import time
from array import array
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Protocol

from .functions import BehaviorVersion, FunctionId

if TYPE_CHECKING:
    from .patches import PatchSpec

PAGE_SIZE = 4096
INDEX_ENTRY_SIZE = 8
TRAMPOLINE = struct.Struct("<qq")


class GenerationError(Exception):
    pass


class CapacityError(GenerationError):
    pass


class NotPatchable(GenerationError):
    pass


class UnknownGeneration(GenerationError):
    pass


class LiveThreads(GenerationError):
    pass


class Bound(Protocol):
    gen: int


@dataclass(frozen=True)
class CodePage:
    page_id: int
    bytes: bytes
    shared: bool


@dataclass(frozen=True)
class ApplyReport:
    duration: float
    pages_copied: int
    bytes_written: int = 0


@dataclass(frozen=True)
class MigrationReport:
    duration: float


class CodeGeneration:
    def __init__(self, gen_id: int, dispatch: list[BehaviorVersion], index: array,
                 pinned: set[int], parent: int | None, patch_cursor: int = 0):
        self.gen_id = gen_id
        self.dispatch = dispatch
        self.index = index
        self.pinned = pinned
        self.parent = parent
        self.refcount = 0
        self.patch_label: str | None = None
        self.patch_cursor = patch_cursor
        self.retired = False

    @property
    def code_pages(self) -> array:
        return self.index

    def __repr__(self) -> str:
        return (f"CodeGeneration(gen_id={self.gen_id}, parent={self.parent}, "
                f"refcount={self.refcount}, patch_label={self.patch_label!r})")


def _normalize_regions(regions: Iterable) -> list[range]:
    out = []
    for r in regions:
        if isinstance(r, range):
            out.append(r)
        else:
            lo, hi = r
            out.append(range(lo, hi))
    return out


class GenerationStore:
    """All code generations of one process, plus the frames they map."""

    def __init__(self, functions: list[tuple[FunctionId, BehaviorVersion]], code_page_count: int):
        if not functions:
            raise GenerationError("empty function table")
        ids = [f.id for f, _ in functions]
        if len(set(ids)) != len(ids):
            raise GenerationError("duplicate function id")
        if sorted(ids) != list(range(len(ids))):
            raise GenerationError("function ids must be dense 0..F-1")
        functions = sorted(functions, key=lambda fv: fv[0].id)
        # Version-0 blobs are packed back to back; each gets at least room for
        # the trampoline that later redirects its entry point.
        self.entry: list[int] = []
        pos = 0
        for _, v in functions:
            self.entry.append(pos)
            pos += max(len(v.blob), TRAMPOLINE.size)
        needed = -(-pos // PAGE_SIZE)
        if needed > code_page_count:
            raise CapacityError(
                f"capacity: version-0 blobs need {needed} pages, store has {code_page_count}")

        self.code_page_count = code_page_count
        self.functions = [f for f, _ in functions]
        self._frames: list[bytearray | None] = [bytearray(PAGE_SIZE) for _ in range(code_page_count)]
        self._free: list[int] = []
        for (_, v), addr in zip(functions, self.entry):
            blob = v.blob
            while blob:
                page, off = divmod(addr, PAGE_SIZE)
                n = min(len(blob), PAGE_SIZE - off)
                self._frames[page][off:off + n] = blob[:n]
                blob = blob[n:]
                addr += n
        self.home = [e // PAGE_SIZE for e in self.entry]
        # Pages after the version-0 text hold patch payloads, used as a ring.
        self.patch_area = range(needed, code_page_count)

        gen0 = CodeGeneration(0, [v for _, v in functions],
                              array("q", range(code_page_count)), set(), None)
        self._gens: dict[int, CodeGeneration] = {0: gen0}
        self._next_gen = 1
        self.current = 0
        self.clone_cost = 0.0

        self._ctl = threading.RLock()
        self._ref_lock = threading.Lock()
        self._running = threading.Event()
        self._running.set()

    # -- inspection -------------------------------------------------------

    def generation(self, gen_id: int) -> CodeGeneration:
        g = self._gens.get(gen_id)
        if g is None:
            raise UnknownGeneration(f"unknown generation {gen_id}")
        return g

    def live_generations(self) -> list[int]:
        return sorted(self._gens)

    @property
    def page_count(self) -> int:
        return len(self._gens[self.current].index)

    def page(self, gen_id: int, page_id: int) -> CodePage:
        g = self.generation(gen_id)
        fid = g.index[page_id]
        shared = any(o.index[page_id] == fid for o in self._gens.values() if o is not g)
        return CodePage(page_id, bytes(self._frames[fid]), shared)

    def read_page(self, gen_id: int, page_id: int) -> bytes:
        g = self.generation(gen_id)
        return bytes(self._frames[g.index[page_id]])

    def write_page(self, gen_id: int, page_id: int, offset: int, data: bytes) -> int:
        """Write through ``gen_id``'s mapping; returns the number of pages copied."""
        with self._ctl:
            g = self.generation(gen_id)
            frame, copied = self._writable(g, page_id)
            frame[offset:offset + len(data)] = data
            return copied

    # -- data pages -------------------------------------------------------

    def map_data_pages(self, n: int) -> list[tuple[int, bytearray]]:
        """Append ``n`` shared data pages to every live generation."""
        with self._ctl:
            start = len(self._gens[self.current].index)
            new = []
            for k in range(n):
                buf = bytearray(PAGE_SIZE)
                new.append((start + k, buf, self._alloc(buf)))
            fids = array("q", (fid for _, _, fid in new))
            for g in self._gens.values():
                g.index.extend(fids)
            return [(vp, buf) for vp, buf, _ in new]

    # -- pin / clone ------------------------------------------------------

    def pin(self, regions: Iterable, gen_id: int | None = None) -> None:
        regions = _normalize_regions(regions)
        with self._ctl:
            g = self.generation(self.current if gen_id is None else gen_id)
            for r in regions:
                if r.start < 0 or r.stop > self.code_page_count or r.start > r.stop:
                    raise GenerationError(f"page range {r.start}..{r.stop} out of range")
            for r in regions:
                g.pinned.update(r)

    def clone_generation(self, source: int) -> int:
        with self._ctl:
            parent = self.generation(source)
            src = parent.index
            n = len(src)
            self._running.clear()
            try:
                t0 = time.perf_counter()
                dst = array("q", bytes(INDEX_ENTRY_SIZE * n))
                for i in range(n):
                    dst[i] = src[i]
                self.clone_cost = time.perf_counter() - t0
            finally:
                self._running.set()
            child = CodeGeneration(self._next_gen, list(parent.dispatch), dst,
                                   set(parent.pinned), parent.gen_id, parent.patch_cursor)
            self._gens[child.gen_id] = child
            self._next_gen += 1
            return child.gen_id

    # -- patching ---------------------------------------------------------

    def apply_patch_to_generation(self, gen_id: int, patch: PatchSpec) -> ApplyReport:
        with self._ctl:
            g = self.generation(gen_id)
            if g.parent is None:
                raise GenerationError("generation 0 cannot be patched by cloning")
            if g.patch_label is not None:
                raise GenerationError(f"generation {gen_id} already patched")
            if g.refcount:
                raise LiveThreads(f"generation {gen_id} has {g.refcount} live threads")
            report = self._apply(g, patch)
            g.patch_label = patch.patch_id
            return report

    def apply_patch_in_place(self, patch: PatchSpec) -> ApplyReport:
        with self._ctl:
            return self._apply(self._gens[self.current], patch)

    def _plan(self, g: CodeGeneration, patch: PatchSpec) -> list[tuple[int, int]]:
        area = self.patch_area
        area_bytes = len(area) * PAGE_SIZE
        cursor = g.patch_cursor
        placements = []
        for rep in patch.replacements:
            size = len(rep.blob)
            if size > area_bytes:
                raise CapacityError(
                    f"capacity: payload of {size} bytes exceeds patch area of {area_bytes}")
            if cursor + size > area_bytes:
                cursor = 0
            entry = self.entry[rep.function.id]
            pages = set(range(entry // PAGE_SIZE, (entry + TRAMPOLINE.size - 1) // PAGE_SIZE + 1))
            pages.update(area.start + p for p in
                         range(cursor // PAGE_SIZE, -(-(cursor + size) // PAGE_SIZE)))
            for p in pages:
                if p not in g.pinned:
                    raise NotPatchable(f"not patchable: page {p} outside read-only region")
            placements.append((cursor, size))
            cursor += size
        return placements

    def _apply(self, g: CodeGeneration, patch: PatchSpec) -> ApplyReport:
        t0 = time.perf_counter()
        placements = self._plan(g, patch)
        copied = 0
        written = 0
        dispatch = list(g.dispatch)
        base = self.patch_area.start * PAGE_SIZE
        for rep, (offset, size) in zip(patch.replacements, placements):
            old = dispatch[rep.function.id]
            new = BehaviorVersion(rep.function, old.version + 1, rep.blob, rep.tag)
            blob = rep.blob
            vpage = -1
            frame = None
            for k in range(size):
                addr = base + offset + k
                if addr // PAGE_SIZE != vpage:
                    vpage = addr // PAGE_SIZE
                    frame, c = self._writable(g, vpage)
                    copied += c
                frame[addr % PAGE_SIZE] = blob[k]
            copied += self._write_bytes(g, self.entry[rep.function.id],
                                        TRAMPOLINE.pack(new.version, base + offset))
            written += size
            dispatch[rep.function.id] = new
            g.patch_cursor = offset + size
        g.dispatch = dispatch
        return ApplyReport(time.perf_counter() - t0, copied, written)

    def _write_bytes(self, g: CodeGeneration, addr: int, data: bytes) -> int:
        copied = 0
        for k, b in enumerate(data):
            frame, c = self._writable(g, (addr + k) // PAGE_SIZE)
            copied += c
            frame[(addr + k) % PAGE_SIZE] = b
        return copied

    def _writable(self, g: CodeGeneration, vpage: int) -> tuple[bytearray, int]:
        fid = g.index[vpage]
        if vpage in g.pinned and any(
                o.index[vpage] == fid for o in self._gens.values() if o is not g):
            fid = self._alloc(bytearray(self._frames[fid]))
            g.index[vpage] = fid
            return self._frames[fid], 1
        return self._frames[fid], 0

    def _alloc(self, buf: bytearray) -> int:
        if self._free:
            fid = self._free.pop()
            self._frames[fid] = buf
            return fid
        self._frames.append(buf)
        return len(self._frames) - 1

    # -- data plane -------------------------------------------------------

    def resolve(self, gen_id: int, function: int) -> BehaviorVersion:
        if not self._running.is_set():
            self._running.wait()
        g = self._gens.get(gen_id)
        if g is None:
            raise UnknownGeneration(f"unknown generation {gen_id}")
        return g.dispatch[function]

    def bind_thread(self, thread: Bound, gen_id: int | None = None) -> None:
        with self._ref_lock:
            g = self.generation(self.current if gen_id is None else gen_id)
            g.refcount += 1
            thread.gen = g.gen_id

    def unbind_thread(self, thread: Bound) -> None:
        with self._ref_lock:
            g = self._gens.get(thread.gen)
            if g is not None:
                g.refcount -= 1

    def migrate_thread(self, thread: Bound, to: int) -> MigrationReport:
        t0 = time.perf_counter()
        with self._ref_lock:
            target = self._gens.get(to)
            if target is None:
                raise UnknownGeneration(f"unknown generation {to}")
            if thread.gen != to:
                old = self._gens.get(thread.gen)
                if old is not None:
                    old.refcount -= 1
                target.refcount += 1
                thread.gen = to
        return MigrationReport(time.perf_counter() - t0)

    def set_current(self, gen_id: int) -> None:
        self.generation(gen_id)
        self.current = gen_id

    def retire_generation(self, gen_id: int) -> None:
        with self._ctl, self._ref_lock:
            g = self.generation(gen_id)
            if g.refcount:
                raise LiveThreads(f"live threads: generation {gen_id} has refcount {g.refcount}")
            if gen_id == max(self._gens) or gen_id == self.current:
                raise GenerationError(f"generation {gen_id} is the newest generation")
            del self._gens[gen_id]
            g.retired = True
            for vpage in g.pinned:
                fid = g.index[vpage]
                if not any(o.index[vpage] == fid for o in self._gens.values()):
                    self._frames[fid] = None
                    self._free.append(fid)


def create_store(functions: list[tuple[FunctionId, BehaviorVersion]],
                 code_page_count: int) -> GenerationStore:
    return GenerationStore(functions, code_page_count)
