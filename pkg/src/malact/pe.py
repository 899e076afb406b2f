"""Permissive Portable Executable parser with an offset-to-structure map.

Parsing never aborts on malformed optional structures: they are dropped
and a message is appended to ``PeImage.warnings``. Only a missing ``MZ`` or
``PE\\0\\0`` signature raises :class:`~malact.errors.NotAPEError`.

Both PE32 and PE32+ optional headers are understood; only the fields the
activation analysis needs are surfaced.
"""

from __future__ import annotations

import bisect
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import NotAPEError

MZ = b"MZ"
PE_SIGNATURE = b"PE\x00\x00"
RICH = b"Rich"
DANS = 0x536E6144  # "DanS" read as a little-endian dword
PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

DIR_EXPORT = 0
DIR_IMPORT = 1
DIR_SECURITY = 4
DIRECTORY_NAMES = (
    "export", "import", "resource", "exception", "security", "basereloc", "debug",
    "architecture", "globalptr", "tls", "load_config", "bound_import", "iat",
    "delay_import", "com_descriptor", "reserved",
)

COFF_SIZE = 20
SECTION_HEADER_SIZE = 40
DIRECTORY_ENTRY_SIZE = 8
MAX_IMPORT_DESCRIPTORS = 4096
MAX_THUNKS = 65536
MAX_NAME = 512

# region kinds
DOS_HEADER = "DosHeader"
RICH_HEADER = "RichHeader"
PE_HEADERS = "PeHeaders"
SECTION_TABLE = "SectionTable"
SECTION_DATA = "SectionData"
IMPORT_NAME_TABLE = "ImportNameTable"
EXPORT_TABLE = "ExportTable"
SECURITY_DIRECTORY = "SecurityDirectory"
INTER_SECTION_PADDING = "InterSectionPadding"
OVERLAY = "Overlay"
UNKNOWN = "Unknown"
PADDING_INPUT = "Padding(input)"


@dataclass
class Section:
    name: str
    virtual_address: int
    virtual_size: int
    raw_offset: int
    raw_size: int
    characteristics: int
    header_offset: int

    @property
    def raw_end(self) -> int:
        return self.raw_offset + self.raw_size


@dataclass
class DataDirectory:
    index: int
    rva: int
    size: int
    entry_offset: int  # file offset of the 8-byte directory entry

    @property
    def name(self) -> str:
        return DIRECTORY_NAMES[self.index] if self.index < len(DIRECTORY_NAMES) else str(self.index)

    @property
    def present(self) -> bool:
        return self.rva != 0 and self.size != 0


@dataclass
class NameRef:
    """A NUL-terminated name and where its bytes sit in the file."""

    name: str
    offset: int
    length: int


@dataclass
class ImportDescriptor:
    dll: str
    dll_offset: Optional[int]
    descriptor_offset: int
    functions: list[NameRef] = field(default_factory=list)
    ordinals: list[int] = field(default_factory=list)
    thunk_spans: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class RichEntry:
    product_id: int
    build_id: int
    count: int

    @property
    def comp_id(self) -> int:
        return (self.product_id << 16) | self.build_id


@dataclass
class RichHeader:
    key: int
    entries: list[RichEntry]
    start: int  # offset of the encoded "DanS" dword
    end: int  # one past the XOR key that follows "Rich"


@dataclass
class PeImage:
    size: int
    e_lfanew: int
    machine: int = 0
    number_of_sections: int = 0
    timestamp: int = 0
    characteristics: int = 0
    optional_header_offset: int = 0
    optional_header_size: int = 0
    magic: int = 0
    entry_point: int = 0
    image_base: int = 0
    size_of_headers: int = 0
    checksum: int = 0
    checksum_offset: Optional[int] = None
    directories: list[DataDirectory] = field(default_factory=list)
    section_table_offset: int = 0
    sections: list[Section] = field(default_factory=list)
    imports: list[ImportDescriptor] = field(default_factory=list)
    exports: list[NameRef] = field(default_factory=list)
    export_directory_span: Optional[tuple[int, int]] = None
    rich: Optional[RichHeader] = None
    warnings: list[str] = field(default_factory=list)

    @property
    def is_64(self) -> bool:
        return self.magic == PE32PLUS_MAGIC

    @property
    def headers_end(self) -> int:
        """End of the section table, i.e. of all parsed header structures."""
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.sections)

    def directory(self, index: int) -> Optional[DataDirectory]:
        for d in self.directories:
            if d.index == index:
                return d
        return None

    @property
    def security_directory(self) -> Optional[DataDirectory]:
        return self.directory(DIR_SECURITY)

    @property
    def has_signature(self) -> bool:
        d = self.security_directory
        return d is not None and d.present

    @property
    def overlay_start(self) -> int:
        ends = [s.raw_end for s in self.sections if s.raw_size]
        return max(ends) if ends else max(self.size_of_headers, self.headers_end)

    @property
    def overlay(self) -> Optional[tuple[int, int]]:
        start = min(self.overlay_start, self.size)
        return (start, self.size) if start < self.size else None

    def import_names(self) -> list[NameRef]:
        return [fn for imp in self.imports for fn in imp.functions]


# ---------------------------------------------------------------------------
# low-level readers
# ---------------------------------------------------------------------------

def _u16(data: bytes, off: int) -> int:
    return struct.unpack_from("<H", data, off)[0]


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def _u64(data: bytes, off: int) -> int:
    return struct.unpack_from("<Q", data, off)[0]


def _cstring(data: bytes, off: int, limit: int = MAX_NAME) -> Optional[tuple[str, int]]:
    """ASCII string at ``off`` and its length excluding the NUL, or None."""
    if off < 0 or off >= len(data):
        return None
    end = data.find(b"\x00", off, off + limit)
    if end < 0:
        return None
    return data[off:end].decode("latin-1"), end - off


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_pe(data: bytes) -> PeImage:
    """Parse headers, sections, imports, exports and the Rich header."""
    data = bytes(data)
    if len(data) < 64:
        raise NotAPEError(f"file is {len(data)} bytes, shorter than a DOS header")
    if data[:2] != MZ:
        raise NotAPEError("missing MZ signature")
    e_lfanew = _u32(data, 0x3C)
    if e_lfanew + 4 + COFF_SIZE > len(data) or data[e_lfanew : e_lfanew + 4] != PE_SIGNATURE:
        raise NotAPEError(f"bad e_lfanew 0x{e_lfanew:x}: no PE signature there")

    pe = PeImage(size=len(data), e_lfanew=e_lfanew)
    coff = e_lfanew + 4
    (pe.machine, pe.number_of_sections, pe.timestamp, _, _, pe.optional_header_size,
     pe.characteristics) = struct.unpack_from("<HHIIIHH", data, coff)
    pe.optional_header_offset = coff + COFF_SIZE
    _parse_optional_header(data, pe)
    _parse_sections(data, pe)
    _parse_imports(data, pe)
    _parse_exports(data, pe)
    pe.rich = _decode_rich(data, e_lfanew, pe.warnings)
    return pe


def _parse_optional_header(data: bytes, pe: PeImage) -> None:
    opt = pe.optional_header_offset
    size = pe.optional_header_size
    avail = min(size, len(data) - opt)
    if avail < 2:
        pe.warnings.append("optional header missing")
        return
    pe.magic = _u16(data, opt)
    if pe.magic not in (PE32_MAGIC, PE32PLUS_MAGIC):
        pe.warnings.append(f"unknown optional header magic 0x{pe.magic:x}")
        return
    dirs_at = 112 if pe.is_64 else 96
    count_at = dirs_at - 4
    if avail < dirs_at:
        pe.warnings.append("optional header truncated before data directories")
        return
    pe.entry_point = _u32(data, opt + 16)
    pe.image_base = _u64(data, opt + 24) if pe.is_64 else _u32(data, opt + 28)
    pe.size_of_headers = _u32(data, opt + 60)
    pe.checksum_offset = opt + 64
    pe.checksum = _u32(data, opt + 64)
    count = _u32(data, opt + count_at)
    fits = (avail - dirs_at) // DIRECTORY_ENTRY_SIZE
    if count > fits:
        pe.warnings.append(f"{count} data directories declared, only {fits} fit in the optional header")
        count = fits
    for i in range(min(count, 16)):
        at = opt + dirs_at + i * DIRECTORY_ENTRY_SIZE
        rva, dsize = struct.unpack_from("<II", data, at)
        pe.directories.append(DataDirectory(i, rva, dsize, at))


def _parse_sections(data: bytes, pe: PeImage) -> None:
    pe.section_table_offset = pe.optional_header_offset + pe.optional_header_size
    for i in range(pe.number_of_sections):
        at = pe.section_table_offset + i * SECTION_HEADER_SIZE
        if at + SECTION_HEADER_SIZE > len(data):
            pe.warnings.append(f"section table truncated after {i} entries")
            break
        raw_name, vsize, va, rsize, roff, _, _, _, _, chars = struct.unpack_from("<8sIIIIIIHHI", data, at)
        name = raw_name.rstrip(b"\x00").decode("latin-1")
        if roff > len(data):
            pe.warnings.append(f"section {name!r} starts past end of file")
            rsize = 0
        elif roff + rsize > len(data):
            pe.warnings.append(f"section {name!r} raw data truncated")
            rsize = len(data) - roff
        pe.sections.append(Section(name, va, vsize, roff, rsize, chars, at))
    spans = sorted((s.raw_offset, s.raw_end) for s in pe.sections if s.raw_size)
    for (_, a_end), (b_start, _) in zip(spans, spans[1:]):
        if b_start < a_end:
            pe.warnings.append("section raw ranges overlap")
            break


def rva_to_offset(pe: PeImage, rva: int) -> Optional[int]:
    """File offset backing ``rva``, or None when no file bytes map there."""
    for s in pe.sections:
        extent = max(s.virtual_size, s.raw_size)
        if s.virtual_address <= rva < s.virtual_address + extent:
            delta = rva - s.virtual_address
            return s.raw_offset + delta if delta < s.raw_size else None
    first_va = min((s.virtual_address for s in pe.sections), default=None)
    header_limit = pe.size_of_headers or pe.headers_end
    if (first_va is None or rva < first_va) and rva < min(header_limit, pe.size):
        return rva
    return None


def offset_to_rva(pe: PeImage, offset: int) -> Optional[int]:
    for s in pe.sections:
        if s.raw_offset <= offset < s.raw_end:
            return s.virtual_address + offset - s.raw_offset
    return None


def _parse_imports(data: bytes, pe: PeImage) -> None:
    d = pe.directory(DIR_IMPORT)
    if d is None or not d.present:
        return
    at = rva_to_offset(pe, d.rva)
    if at is None:
        pe.warnings.append("import directory does not map into the file")
        return
    thunk_size = 8 if pe.is_64 else 4
    ordinal_flag = 1 << (63 if pe.is_64 else 31)
    for n in range(MAX_IMPORT_DESCRIPTORS):
        off = at + 20 * n
        if off + 20 > len(data):
            pe.warnings.append("import descriptor table runs past end of file")
            return
        oft, _, _, name_rva, ft = struct.unpack_from("<IIIII", data, off)
        if not any((oft, name_rva, ft)):
            return
        name_off = rva_to_offset(pe, name_rva)
        dll = _cstring(data, name_off) if name_off is not None else None
        if dll is None:
            pe.warnings.append(f"import descriptor {n} has an unreadable DLL name")
        desc = ImportDescriptor(dll[0] if dll else "", name_off if dll else None, off)
        pe.imports.append(desc)
        for thunk_rva in dict.fromkeys(r for r in (oft, ft) if r):
            table = rva_to_offset(pe, thunk_rva)
            if table is None:
                pe.warnings.append(f"import thunks of {desc.dll!r} do not map into the file")
                continue
            entries = []
            for k in range(MAX_THUNKS):
                t_off = table + k * thunk_size
                if t_off + thunk_size > len(data):
                    pe.warnings.append(f"import thunks of {desc.dll!r} run past end of file")
                    break
                value = _u64(data, t_off) if pe.is_64 else _u32(data, t_off)
                if value == 0:
                    break
                entries.append(value)
            desc.thunk_spans.append((table, table + (len(entries) + 1) * thunk_size))
            if desc.functions or desc.ordinals:
                continue  # names already read from the other thunk array
            for value in entries:
                if value & ordinal_flag:
                    desc.ordinals.append(value & 0xFFFF)
                    continue
                hint_off = rva_to_offset(pe, value & 0x7FFFFFFF)
                name = _cstring(data, hint_off + 2) if hint_off is not None else None
                if name is None:
                    pe.warnings.append(f"unreadable import name in {desc.dll!r}")
                    continue
                desc.functions.append(NameRef(name[0], hint_off + 2, name[1]))
    pe.warnings.append("import descriptor table not terminated")


def _parse_exports(data: bytes, pe: PeImage) -> None:
    d = pe.directory(DIR_EXPORT)
    if d is None or not d.present:
        return
    at = rva_to_offset(pe, d.rva)
    if at is None or at + 40 > len(data):
        pe.warnings.append("export directory does not map into the file")
        return
    pe.export_directory_span = (at, min(at + d.size, len(data)))
    n_names = _u32(data, at + 24)
    names_at = rva_to_offset(pe, _u32(data, at + 32))
    if n_names and names_at is None:
        pe.warnings.append("export name pointer table does not map into the file")
        return
    for i in range(min(n_names, MAX_THUNKS)):
        p = names_at + 4 * i
        if p + 4 > len(data):
            pe.warnings.append("export name pointer table runs past end of file")
            return
        off = rva_to_offset(pe, _u32(data, p))
        name = _cstring(data, off) if off is not None else None
        if name is None:
            pe.warnings.append(f"unreadable export name {i}")
            continue
        pe.exports.append(NameRef(name[0], off, name[1]))


# ---------------------------------------------------------------------------
# Rich header
# ---------------------------------------------------------------------------

def _decode_rich(data: bytes, e_lfanew: int, warnings: list[str]) -> Optional[RichHeader]:
    limit = min(e_lfanew, len(data))
    marker = data.rfind(RICH, 0x40, limit)
    if marker < 0 or marker + 8 > len(data):
        return None
    key = _u32(data, marker + 4)
    pos = marker - 4
    while pos >= 0x40:
        if _u32(data, pos) ^ key == DANS:
            break
        pos -= 4
    else:
        warnings.append("malformed Rich header: no DanS marker before Rich")
        return None
    body = pos + 16  # DanS followed by three zero dwords
    if body > marker or (marker - body) % 8:
        warnings.append("malformed Rich header: entry area misaligned")
        return None
    entries = []
    for off in range(body, marker, 8):
        comp_id = _u32(data, off) ^ key
        count = _u32(data, off + 4) ^ key
        entries.append(RichEntry(comp_id >> 16, comp_id & 0xFFFF, count))
    return RichHeader(key, entries, pos, marker + 8)


def decode_rich_header(data: bytes) -> Optional[RichHeader]:
    """Locate and decode the Rich header; None when absent or malformed."""
    if len(data) < 0x40 or data[:2] != MZ:
        return None
    return _decode_rich(bytes(data), _u32(data, 0x3C), [])


def encode_rich_header(entries: Iterable[RichEntry], key: int) -> bytes:
    """Encode ``entries`` under ``key``: DanS, padding, pairs, Rich, key."""
    words = [DANS, 0, 0, 0]
    for e in entries:
        words += [e.comp_id, e.count]
    body = b"".join(struct.pack("<I", w ^ key) for w in words)
    return body + RICH + struct.pack("<I", key)


def rich_checksum_key(dos_stub: bytes, entries: Iterable[RichEntry]) -> int:
    """Linker-style key: rotate-sum over the DOS region (e_lfanew zeroed) and comp ids."""
    def rol(v: int, n: int) -> int:
        n &= 31
        return ((v << n) | (v >> (32 - n))) & 0xFFFFFFFF

    key = len(dos_stub)
    for i, b in enumerate(dos_stub):
        if 0x3C <= i < 0x40:
            continue
        key = (key + rol(b, i)) & 0xFFFFFFFF
    for e in entries:
        key = (key + rol(e.comp_id, e.count)) & 0xFFFFFFFF
    return key


# ---------------------------------------------------------------------------
# checksum
# ---------------------------------------------------------------------------

def compute_checksum(data: bytes, checksum_offset: int) -> int:
    """Standard PE checksum: folded 16-bit one's-complement sum plus file length.

    The four bytes at ``checksum_offset`` are treated as zero.
    """
    buf = bytearray(data)
    buf[checksum_offset : checksum_offset + 4] = b"\x00\x00\x00\x00"
    if len(buf) % 2:
        buf.append(0)
    total = int(np.frombuffer(bytes(buf), dtype="<u2").sum(dtype=np.uint64))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# region map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    start: int
    end: int
    kind: str
    detail: str = ""

    def record(self, offset: Optional[int] = None) -> dict:
        return {
            "offset": self.start if offset is None else offset,
            "start": self.start,
            "end": self.end,
            "kind": self.kind,
            "detail": self.detail,
        }


@dataclass
class RegionMap:
    """Sorted, disjoint intervals covering ``[0, size)`` exactly once."""

    size: int
    regions: list[Region]

    def __post_init__(self):
        self._starts = [r.start for r in self.regions]

    def __iter__(self) -> Iterator[Region]:
        return iter(self.regions)

    def __len__(self) -> int:
        return len(self.regions)

    def at(self, offset: int) -> Region:
        if offset < 0:
            raise ValueError(f"negative offset {offset}")
        if offset >= self.size:
            return Region(self.size, offset + 1, PADDING_INPUT)
        return self.regions[bisect.bisect_right(self._starts, offset) - 1]

    def overlapping(self, start: int, end: int) -> list[Region]:
        out = [r for r in self.regions if r.start < end and start < r.end]
        if end > self.size:
            out.append(Region(self.size, end, PADDING_INPUT))
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.record(), sort_keys=True) + "\n" for r in self.regions)


def region_at(rmap: RegionMap, offset: int) -> str:
    return rmap.at(offset).kind


def build_region_map(pe: PeImage, filesize: Optional[int] = None) -> RegionMap:
    """Label every file byte; later paints win (headers > directories > sections)."""
    size = pe.size if filesize is None else filesize
    labels: list[tuple[str, str]] = [(UNKNOWN, "")]
    index = {labels[0]: 0}
    paint = np.zeros(size, dtype=np.int32)

    def put(start: int, end: int, kind: str, detail: str = "") -> None:
        start, end = max(0, start), min(size, end)
        if start >= end:
            return
        if (kind, detail) not in index:  # equal labels share an id so neighbours merge
            index[(kind, detail)] = len(labels)
            labels.append((kind, detail))
        paint[start:end] = index[(kind, detail)]

    sections = sorted((s for s in pe.sections if s.raw_size), key=lambda s: s.raw_offset)
    if sections:
        put(pe.headers_end, pe.overlay_start, INTER_SECTION_PADDING)
        put(pe.overlay_start, size, OVERLAY)
        for s in sections:
            put(s.raw_offset, s.raw_end, SECTION_DATA, s.name)

    for imp in pe.imports:
        put(imp.descriptor_offset, imp.descriptor_offset + 20, IMPORT_NAME_TABLE, "import descriptor")
        for start, end in imp.thunk_spans:
            put(start, end, IMPORT_NAME_TABLE, f"{imp.dll} thunks")
        if imp.dll_offset is not None:
            put(imp.dll_offset, imp.dll_offset + len(imp.dll) + 1, IMPORT_NAME_TABLE, imp.dll)
        for fn in imp.functions:
            put(fn.offset - 2, fn.offset + fn.length + 1, IMPORT_NAME_TABLE, fn.name)
    if pe.export_directory_span:
        put(*pe.export_directory_span, EXPORT_TABLE, "export directory")
    for fn in pe.exports:
        put(fn.offset, fn.offset + fn.length + 1, EXPORT_TABLE, fn.name)
    sec = pe.security_directory
    if sec is not None and sec.present:
        put(sec.rva, sec.rva + sec.size, SECURITY_DIRECTORY, "certificate table")

    put(0, min(pe.e_lfanew, 0x40), DOS_HEADER)
    put(0x40, pe.e_lfanew, DOS_HEADER, "stub")
    if pe.rich is not None:
        put(pe.rich.start, pe.rich.end, RICH_HEADER)
    put(pe.e_lfanew, pe.section_table_offset, PE_HEADERS)
    put(pe.section_table_offset, pe.headers_end, SECTION_TABLE)

    regions = []
    if size:
        change = np.flatnonzero(np.diff(paint)) + 1
        starts = np.concatenate(([0], change))
        ends = np.concatenate((change, [size]))
        for s, e in zip(starts.tolist(), ends.tolist()):
            kind, detail = labels[paint[s]]
            regions.append(Region(s, e, kind, detail))
    return RegionMap(size, regions)


def header_field_spans(pe: PeImage) -> dict[str, tuple[int, int]]:
    """Byte spans of individual header fields the analysis names directly."""
    spans = {}
    if pe.checksum_offset is not None:
        spans["checksum"] = (pe.checksum_offset, pe.checksum_offset + 4)
    sec = pe.security_directory
    if sec is not None:
        spans["security directory"] = (sec.entry_offset, sec.entry_offset + DIRECTORY_ENTRY_SIZE)
    if pe.rich is not None:
        spans["Rich header"] = (pe.rich.start, pe.rich.end)
    return spans
