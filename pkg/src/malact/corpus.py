"""Synthetic PE corpus with planted, class-conditional features.

Every generated file is a small well-formed PE32 image (DOS header and stub,
optional Rich header, COFF and optional headers, a section table, ``.text``,
``.rdata`` with a real import table, optional ``.data``, optional
certificate overlay). Feature plants are drawn per class and their exact byte
spans are written to a manifest, which is the ground truth for attribution
recall and activation-location tests.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import pe as P
from .errors import ConfigError, InputError
from .model import LabeledSample

logger = logging.getLogger(__name__)

FILE_ALIGN = 0x200
SECTION_ALIGN = 0x1000
IMAGE_BASE = 0x400000
OPT_HEADER_SIZE = 224
CERT_MIN, CERT_MAX = 256, 640
MIN_FILE_SIZE = 3 * FILE_ALIGN + CERT_MAX

DOS_STUB = (
    bytes.fromhex("0e1fba0e00b409cd21b8014ccd21")
    + b"This program cannot be run in DOS mode.\r\r\n$"
).ljust(64, b"\x00")

COMMON_IMPORTS = {
    "KERNEL32.dll": ["GetModuleHandleA", "ExitProcess", "GetProcAddress", "LoadLibraryA"],
}
MALWARE_IMPORTS = {
    "ADVAPI32.dll": ["CryptEncrypt", "CryptDecrypt", "CryptGenKey", "CryptAcquireContextA"],
    "KERNEL32.dll": ["VirtualAllocEx", "WriteProcessMemory", "CreateRemoteThread"],
}
GOODWARE_IMPORTS = {
    "USER32.dll": ["RegisterClassExW", "CreateWindowExW", "GetMessageW", "DispatchMessageW"],
}
BENIGN_STRINGS = [
    b"Copyright (C) Example Corp.", b"Settings", b"Version 1.0.3", b"%s\\config.ini",
    b"Error opening file", b"Application", b"Help", b"OK", b"Cancel", b"Software\\Vendor",
]


def _import_features() -> dict[str, tuple[float, float]]:
    probs = {}
    for names in MALWARE_IMPORTS.values():
        probs.update({f"import:{n}": (0.35, 0.03) for n in names})
    for names in GOODWARE_IMPORTS.values():
        probs.update({f"import:{n}": (0.1, 0.5) for n in names})
    return probs


def default_feature_probs() -> dict[str, tuple[float, float]]:
    """(P(feature | malware), P(feature | goodware)) for every plantable feature."""
    probs = {
        "checksum_zero": (0.7, 0.05),
        "no_security_directory": (0.9, 0.4),
        "no_rich_header": (0.5, 0.1),
        "push_call": (0.8, 0.1),
    }
    probs.update(_import_features())
    return probs


@dataclass
class CorpusSpec:
    n_samples: int = 2000
    malware_fraction: float = 0.2
    feature_probs: dict[str, tuple[float, float]] = field(default_factory=default_feature_probs)
    label_noise: float = 0.0
    size_range: tuple[int, int] = (2304, 4096)
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 2:
            raise ConfigError("a corpus needs at least two samples")
        n_mal = self.n_malware
        if n_mal < 1 or n_mal >= self.n_samples:
            raise ConfigError(
                f"malware_fraction {self.malware_fraction} leaves a class empty at n={self.n_samples}"
            )
        known = set(default_feature_probs())
        for name, pair in self.feature_probs.items():
            if name not in known:
                raise ConfigError(f"unknown feature {name!r}")
            if len(pair) != 2 or any(not 0.0 <= p <= 1.0 for p in pair):
                raise ConfigError(f"feature {name!r} probabilities must lie in [0, 1]: {pair}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigError("label_noise must lie in [0, 1]")
        lo, hi = self.size_range
        if lo > hi:
            raise ConfigError(f"size range {self.size_range} is empty")
        if lo < MIN_FILE_SIZE:
            raise ConfigError(
                f"size range {self.size_range} is infeasible: files need at least {MIN_FILE_SIZE} bytes"
            )

    @property
    def n_malware(self) -> int:
        return int(round(self.n_samples * self.malware_fraction))

    def prob(self, feature: str, label: int) -> float:
        p_mal, p_good = self.feature_probs.get(feature, (0.0, 0.0))
        return p_mal if label == 1 else p_good

    def sign(self, feature: str) -> int:
        """+1 if the feature leans malware, -1 if it leans goodware, 0 if neutral."""
        p_mal, p_good = self.feature_probs.get(feature, (0.0, 0.0))
        return int(np.sign(p_mal - p_good))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_probs"] = {k: list(v) for k, v in sorted(self.feature_probs.items())}
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if "feature_probs" in d:
            merged = default_feature_probs()
            merged.update({k: tuple(v) for k, v in d["feature_probs"].items()})
            d["feature_probs"] = merged
        if "size_range" in d:
            d["size_range"] = tuple(d["size_range"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad corpus spec: {exc}") from exc


@dataclass(frozen=True)
class PlantedSpan:
    feature: str
    start: int
    end: int
    sign: int


@dataclass
class ManifestEntry:
    id: str
    label: int
    true_label: int
    order: int
    size: int
    spans: list[PlantedSpan]

    def discriminative_spans(self, sign: int = 1) -> list[PlantedSpan]:
        return [s for s in self.spans if s.sign == sign]


@dataclass
class Manifest:
    spec: CorpusSpec
    entries: list[ManifestEntry]

    def __post_init__(self):
        self._by_id = {e.id: e for e in self.entries}

    def __getitem__(self, sample_id: str) -> ManifestEntry:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise InputError(f"sample {sample_id!r} is not in the manifest") from None

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._by_id

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "entries": [
                {**{k: v for k, v in asdict(e).items() if k != "spans"},
                 "spans": [asdict(s) for s in e.spans]}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        entries = [
            ManifestEntry(
                e["id"], e["label"], e["true_label"], e["order"], e["size"],
                [PlantedSpan(**s) for s in e["spans"]],
            )
            for e in d["entries"]
        ]
        return cls(CorpusSpec.from_dict(d["spec"]), entries)


# ---------------------------------------------------------------------------
# byte-level builders
# ---------------------------------------------------------------------------

def _align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


def _code_filler(rng: np.random.Generator, n: int) -> bytearray:
    """Benign-looking instruction soup: movs, arithmetic, tests, short jumps."""
    templates = (
        (b"\x8b\x45", 1), (b"\x89\x45", 1), (b"\x8b\x4d", 1), (b"\x8d\x45", 1),
        (b"\x33\xc0", 0), (b"\x85\xc0", 0), (b"\x3b\xc1", 0), (b"\x03\xc1", 0),
        (b"\x74", 1), (b"\x75", 1), (b"\x83\xc4", 1), (b"\x83\xec", 1),
        (b"\x40", 0), (b"\x48", 0), (b"\x90", 0), (b"\xc3", 0), (b"\x8b\xff", 0),
        (b"\x55\x8b\xec", 0), (b"\x5d", 0), (b"\xb8", 4),
    )
    out = bytearray()
    while len(out) < n:
        op, n_imm = templates[rng.integers(len(templates))]
        out += op + rng.integers(0, 256, n_imm, dtype=np.uint8).tobytes()
    return out[:n]


def _push_call_motif(rng: np.random.Generator) -> bytes:
    pushes = bytearray()
    for _ in range(int(rng.integers(2, 5))):
        if rng.random() < 0.7:
            pushes += bytes([0x6A, int(rng.choice([0x00, 0x01, 0x02, 0x04, 0xFF]))])
        else:
            pushes.append(0x50 + int(rng.integers(0, 8)))
    rel = int(rng.integers(-0x800, 0x800))
    return bytes(pushes) + b"\xe8" + struct.pack("<i", rel)


def _data_filler(rng: np.random.Generator, n: int) -> bytearray:
    out = bytearray()
    while len(out) < n:
        if rng.random() < 0.3:
            out += BENIGN_STRINGS[rng.integers(len(BENIGN_STRINGS))] + b"\x00"
        else:
            out += rng.integers(0, 256, int(rng.integers(4, 24)), dtype=np.uint8).tobytes()
    return out[:n]


def _certificate(rng: np.random.Generator) -> bytes:
    body_len = int(rng.integers(CERT_MIN, CERT_MAX - 8 + 1)) // 8 * 8
    der = b"\x30\x82" + struct.pack(">H", body_len - 4) + b"\x06\x09\x2a\x86\x48\x86\xf7\x0d\x01\x07\x02"
    der += rng.integers(0, 256, body_len - len(der), dtype=np.uint8).tobytes()
    return struct.pack("<IHH", body_len + 8, 0x0200, 0x0002) + der


def _rich_entries(rng: np.random.Generator) -> list[P.RichEntry]:
    n = int(rng.integers(2, 7))
    return [
        P.RichEntry(int(rng.integers(1, 0x110)), int(rng.integers(0x1000, 0x7000)), int(rng.integers(1, 300)))
        for _ in range(n)
    ]


@dataclass
class _Plan:
    checksum_zero: bool
    signed: bool
    rich: bool
    push_call: bool
    imports: dict[str, list[str]]
    target_size: int


def _layout_imports(imports: dict[str, list[str]], rva_base: int) -> tuple[bytearray, dict, list]:
    """Build .rdata holding descriptors, ILT/IAT, hint/name entries and DLL names.

    Returns the raw bytes, the import directory (rva, size), and
    (name, offset-in-section, length) for every function name.
    """
    dlls = list(imports)
    desc_size = 20 * (len(dlls) + 1)
    thunk_sizes = [4 * (len(imports[d]) + 1) for d in dlls]
    ilt_at = desc_size
    iat_at = ilt_at + sum(thunk_sizes)
    names_at = iat_at + sum(thunk_sizes)

    hint_names = bytearray()
    name_offsets: dict[tuple[str, str], int] = {}
    for d in dlls:
        for fn in imports[d]:
            name_offsets[(d, fn)] = names_at + len(hint_names)
            entry = struct.pack("<H", 0) + fn.encode() + b"\x00"
            hint_names += entry + (b"\x00" if len(entry) % 2 else b"")
    dll_names_at = names_at + len(hint_names)
    dll_blob = bytearray()
    dll_offsets = {}
    for d in dlls:
        dll_offsets[d] = dll_names_at + len(dll_blob)
        dll_blob += d.encode() + b"\x00"

    buf = bytearray(dll_names_at + len(dll_blob))
    ilt, iat = ilt_at, iat_at
    spans = []
    for i, d in enumerate(dlls):
        struct.pack_into("<IIIII", buf, 20 * i, rva_base + ilt, 0, 0, rva_base + dll_offsets[d], rva_base + iat)
        for k, fn in enumerate(imports[d]):
            hn = name_offsets[(d, fn)]
            struct.pack_into("<I", buf, ilt + 4 * k, rva_base + hn)
            struct.pack_into("<I", buf, iat + 4 * k, rva_base + hn)
            spans.append((fn, hn + 2, len(fn)))
        ilt += thunk_sizes[i]
        iat += thunk_sizes[i]
    buf[names_at:dll_names_at] = hint_names
    buf[dll_names_at:] = dll_blob
    return buf, {"rva": rva_base, "size": desc_size}, spans


def build_pe(rng: np.random.Generator, plan: _Plan) -> tuple[bytes, list[tuple[str, int, int]]]:
    """Assemble one PE file; returns bytes and (feature, start, end) spans."""
    spans: list[tuple[str, int, int]] = []
    n_sections = 3 if plan.target_size >= MIN_FILE_SIZE + FILE_ALIGN else 2

    dos = bytearray(64)
    dos[0:2] = P.MZ
    struct.pack_into("<HHHHHHHHH", dos, 2, 0x90, 3, 0, 4, 0, 0xFFFF, 0, 0xB8, 0)
    struct.pack_into("<H", dos, 0x18, 0x40)
    head = bytearray(dos + DOS_STUB)
    if plan.rich:
        entries = _rich_entries(rng)
        e_lfanew_guess = _align(len(head) + 16 + 8 * len(entries) + 8, 8)
        struct.pack_into("<I", head, 0x3C, e_lfanew_guess)
        key = P.rich_checksum_key(bytes(head), entries)
        rich = P.encode_rich_header(entries, key)
        spans.append(("rich_header", len(head), len(head) + len(rich)))
        head += rich
    head += b"\x00" * (_align(len(head), 8) - len(head))
    e_lfanew = len(head)
    struct.pack_into("<I", head, 0x3C, e_lfanew)
    if not plan.rich:
        spans.append(("no_rich_header", e_lfanew, e_lfanew + 4))

    opt_at = e_lfanew + 4 + P.COFF_SIZE
    table_at = opt_at + OPT_HEADER_SIZE
    size_of_headers = _align(table_at + P.SECTION_HEADER_SIZE * n_sections, FILE_ALIGN)

    # .rdata first so .text can absorb the remaining size budget
    rdata_va = 2 * SECTION_ALIGN
    rdata, import_dir, name_spans = _layout_imports(plan.imports, rdata_va)
    rdata_raw = _align(len(rdata), FILE_ALIGN)
    data_raw = FILE_ALIGN if n_sections == 3 else 0
    cert = _certificate(rng) if plan.signed else b""
    budget = plan.target_size - size_of_headers - rdata_raw - data_raw - len(cert)
    text_raw = max(FILE_ALIGN, budget // FILE_ALIGN * FILE_ALIGN)

    text = _code_filler(rng, text_raw)
    text_at = size_of_headers
    if plan.push_call:
        n_motifs = int(rng.integers(2, 6))
        slots = np.sort(rng.choice(text_raw // 32 - 1, size=n_motifs, replace=False)) * 32 + 8
        for slot in slots.tolist():
            motif = _push_call_motif(rng)
            text[slot : slot + len(motif)] = motif
            spans.append(("push_call", text_at + slot, text_at + slot + len(motif)))

    sections = [(".text", SECTION_ALIGN, text, text_raw, 0x60000020)]
    sections.append((".rdata", rdata_va, rdata, rdata_raw, 0x40000040))
    if data_raw:
        sections.append((".data", 3 * SECTION_ALIGN, _data_filler(rng, data_raw), data_raw, 0xC0000040))

    body = bytearray()
    table = bytearray()
    raw_ptr = size_of_headers
    for name, va, content, raw, chars in sections:
        blob = bytes(content).ljust(raw, b"\x00")
        table += struct.pack(
            "<8sIIIIIIHHI", name.encode(), len(content), va, raw, raw_ptr, 0, 0, 0, 0, chars
        )
        if name == ".rdata":
            rdata_at = raw_ptr
        body += blob
        raw_ptr += raw
    image_size = _align(sections[-1][1] + len(sections[-1][2]), SECTION_ALIGN)

    coff = struct.pack(
        "<HHIIIHH", 0x14C, len(sections), int(rng.integers(0x4000_0000, 0x6000_0000)), 0, 0,
        OPT_HEADER_SIZE, 0x0102,
    )
    opt = bytearray(OPT_HEADER_SIZE)
    struct.pack_into(
        "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII", opt, 0,
        P.PE32_MAGIC, 14, 0, text_raw, rdata_raw + data_raw, 0, SECTION_ALIGN, SECTION_ALIGN,
        2 * SECTION_ALIGN, IMAGE_BASE, SECTION_ALIGN, FILE_ALIGN, 6, 0, 0, 0, 6, 0, 0,
        image_size, size_of_headers, 0, 2, 0x8140, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
    )
    dirs_at = 96
    struct.pack_into("<II", opt, dirs_at + 8 * P.DIR_IMPORT, import_dir["rva"], import_dir["size"])

    out = bytearray(head)
    out += struct.pack("<4s", P.PE_SIGNATURE) + coff + opt + table
    out += b"\x00" * (size_of_headers - len(out))
    out += body
    sec_entry = opt_at + dirs_at + 8 * P.DIR_SECURITY
    if plan.signed:
        cert_at = len(out)
        struct.pack_into("<II", out, sec_entry, cert_at, len(cert))
        out += cert
        spans.append(("security_directory", sec_entry, sec_entry + 8))
    else:
        spans.append(("no_security_directory", sec_entry, sec_entry + 8))

    checksum_at = opt_at + 64
    if plan.checksum_zero:
        spans.append(("checksum_zero", checksum_at, checksum_at + 4))
    else:
        struct.pack_into("<I", out, checksum_at, P.compute_checksum(bytes(out), checksum_at))

    for fn, off, length in name_spans:
        spans.append((f"import:{fn}", rdata_at + off, rdata_at + off + length))
    return bytes(out), spans


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def _plan(rng: np.random.Generator, spec: CorpusSpec, label: int) -> _Plan:
    def draw(feature: str) -> bool:
        return bool(rng.random() < spec.prob(feature, label))

    imports = {d: list(fns) for d, fns in COMMON_IMPORTS.items()}
    for table in (MALWARE_IMPORTS, GOODWARE_IMPORTS):
        for dll, names in table.items():
            chosen = [n for n in names if draw(f"import:{n}")]
            if chosen:
                imports.setdefault(dll, []).extend(chosen)
    for names in imports.values():
        rng.shuffle(names)
    lo, hi = spec.size_range
    return _Plan(
        checksum_zero=draw("checksum_zero"),
        signed=not draw("no_security_directory"),
        rich=not draw("no_rich_header"),
        push_call=draw("push_call"),
        imports=imports,
        target_size=int(rng.integers(lo, hi + 1)),
    )


def _feature_sign(spec: CorpusSpec, feature: str) -> int:
    complements = {
        "security_directory": "no_security_directory",
        "rich_header": "no_rich_header",
    }
    if feature in complements:
        return -spec.sign(complements[feature])
    return spec.sign(feature)


def generate(spec: CorpusSpec) -> tuple[list[LabeledSample], Manifest]:
    """Generate the corpus in memory. Bit-reproducible from ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = np.zeros(spec.n_samples, dtype=int)
    labels[: spec.n_malware] = 1
    rng.shuffle(labels)
    samples, entries = [], []
    for i, true_label in enumerate(labels.tolist()):
        data, raw_spans = build_pe(rng, _plan(rng, spec, true_label))
        label = 1 - true_label if rng.random() < spec.label_noise else true_label
        sid = f"s{i:05d}"
        spans = [PlantedSpan(f, s, e, _feature_sign(spec, f)) for f, s, e in raw_spans]
        samples.append(LabeledSample(data, label, sid))
        entries.append(ManifestEntry(sid, label, true_label, i, len(data), spans))
    return samples, Manifest(spec, entries)


def write_corpus(samples: Sequence[LabeledSample], manifest: Manifest, out_dir) -> Path:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    for s in samples:
        (out / "samples" / f"{s.id}.exe").write_bytes(s.data)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")
    return out


def generate_corpus(spec: CorpusSpec, out_dir) -> Manifest:
    samples, manifest = generate(spec)
    write_corpus(samples, manifest, out_dir)
    logger.info("wrote %d samples to %s", len(samples), out_dir)
    return manifest


def load_manifest(corpus_dir) -> Manifest:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise InputError(f"{corpus_dir} has no manifest.json")
    return Manifest.from_dict(json.loads(path.read_text()))


def load_corpus(corpus_dir) -> tuple[list[LabeledSample], Manifest]:
    """Samples in generation order plus the manifest."""
    manifest = load_manifest(corpus_dir)
    root = Path(corpus_dir) / "samples"
    samples = []
    for e in sorted(manifest.entries, key=lambda e: e.order):
        path = root / f"{e.id}.exe"
        if not path.exists():
            raise InputError(f"manifest lists {e.id} but {path} is missing")
        samples.append(LabeledSample(path.read_bytes(), e.label, e.id))
    return samples, manifest


def split_by_order(
    samples: Sequence[LabeledSample], fractions: Sequence[float] = (0.6, 0.2, 0.2)
) -> tuple[list[LabeledSample], list[LabeledSample], list[LabeledSample]]:
    """Train/validation/test split by generation order (later files test)."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three values summing to 1: {fractions}")
    n = len(samples)
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return list(samples[:a]), list(samples[a:b]), list(samples[b:])


def balanced_subset(samples: Sequence[LabeledSample]) -> list[LabeledSample]:
    """50:50 subset keeping every minority-class sample and the earliest of the other."""
    mal = [s for s in samples if s.label == 1]
    good = [s for s in samples if s.label == 0]
    n = min(len(mal), len(good))
    keep = {s.id for s in mal[:n]} | {s.id for s in good[:n]}
    return [s for s in samples if s.id in keep]


def planted_byte_values(spec: Optional[CorpusSpec] = None) -> set[int]:
    """Opcode bytes that only enter files through malware-leaning code plants."""
    return {0x6A, 0xE8}
