"""First-layer activation probing: top-k extraction, histograms, byte-level annotation."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import pe as P
from . import svg
from .errors import InputError
from .model import Model, first_layer_activations
from .x86 import annotate_window

CONTEXT = 16


@dataclass(frozen=True)
class ActivationRecord:
    sample: str
    label: int
    filter: int
    offset: int
    value: float
    input_len: int

    def row(self) -> list:
        return [self.sample, self.label, self.filter, self.offset, repr(self.value)]


def top_k_activations(
    model: Model,
    symbols,
    k: int = 100,
    sample: str = "",
    label: int = -1,
) -> list[ActivationRecord]:
    """The k largest post-ReLU first-layer outputs over all (filter, position) pairs.

    Sorted by value descending; ties go to the lower filter, then the lower offset.
    """
    if k < 0:
        raise InputError("k must be nonnegative")
    acts = first_layer_activations(model, symbols)
    flat = acts.ravel()  # filter-major, so flat order is (filter, offset)
    order = np.argsort(-flat, kind="stable")[:k]
    n_pos = acts.shape[1]
    L = model.config.input_len
    return [
        ActivationRecord(sample, int(label), int(i // n_pos), int(i % n_pos), float(flat[i]), L)
        for i in order
    ]


def records_to_csv(records: Iterable[ActivationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "class", "filter", "offset", "value"])
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


@dataclass
class Histogram:
    """Per-bin counts split by class; ``kind`` is "filter" or "bucket"."""

    kind: str
    counts: dict[int, np.ndarray]
    bucket_size: int = 1

    @property
    def n_bins(self) -> int:
        return len(next(iter(self.counts.values()))) if self.counts else 0

    def total(self, label: Optional[int] = None) -> int:
        if label is not None:
            return int(self.counts.get(label, np.zeros(0)).sum())
        return int(sum(c.sum() for c in self.counts.values()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.kind, "class", "count"])
        for label in sorted(self.counts):
            for b, c in enumerate(self.counts[label]):
                if c:
                    w.writerow([b * self.bucket_size if self.kind == "bucket" else b, label, int(c)])
        return buf.getvalue()

    def to_svg(self, title: str = "") -> str:
        positions = [b * self.bucket_size for b in range(self.n_bins)]
        names = {0: "goodware", 1: "malware"}
        series = {names.get(l, f"class {l}"): self.counts[l].tolist() for l in sorted(self.counts)}
        return svg.bars(positions, series, title or f"top activations by {self.kind}", self.bucket_size)


def _common_input_len(records: Sequence[ActivationRecord]) -> int:
    lens = {r.input_len for r in records}
    if len(lens) > 1:
        raise InputError(f"records mix input lengths {sorted(lens)}")
    return lens.pop() if lens else 0


def aggregate_by_filter(records: Sequence[ActivationRecord], n_filters: Optional[int] = None) -> Histogram:
    _common_input_len(records)
    n = n_filters if n_filters is not None else max((r.filter for r in records), default=-1) + 1
    counts: dict[int, np.ndarray] = {}
    for r in records:
        counts.setdefault(r.label, np.zeros(n, dtype=np.int64))[r.filter] += 1
    return Histogram("filter", counts)


def default_bucket_size(input_len: int) -> int:
    return max(1, input_len // 100)


def aggregate_by_offset(records: Sequence[ActivationRecord], bucket_size: Optional[int] = None) -> Histogram:
    L = _common_input_len(records)
    size = bucket_size or default_bucket_size(L)
    if size < 1:
        raise InputError("bucket size must be positive")
    n = -(-L // size) if L else 0
    counts: dict[int, np.ndarray] = {}
    for r in records:
        counts.setdefault(r.label, np.zeros(n, dtype=np.int64))[r.offset // size] += 1
    return Histogram("bucket", counts, size)


@dataclass
class Annotation:
    offset: int
    region: str
    detail: str
    window_start: int
    string_view: list[str]
    instruction_view: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def annotate_offset(
    data: bytes,
    offset: int,
    length: int,
    pe_image: Optional[P.PeImage] = None,
    region_map: Optional[P.RegionMap] = None,
    context: int = CONTEXT,
) -> Annotation:
    """Region label plus string and instruction views around ``[offset, offset+length)``."""
    if offset < 0:
        raise InputError(f"negative offset {offset}")
    if region_map is None:
        try:
            pe_image = pe_image or P.parse_pe(data)
            region_map = P.build_region_map(pe_image, len(data))
        except P.NotAPEError:
            region_map = P.RegionMap(len(data), [P.Region(0, len(data), P.UNKNOWN)] if data else [])
    region = region_map.at(offset)
    start = max(0, offset - context)
    view = annotate_window(data, start, offset + length + context - start)
    return Annotation(offset, region.kind, region.detail, start, view.string_lines(), view.instruction_lines())


def annotate_activation(
    record: ActivationRecord,
    data: bytes,
    pe_image: Optional[P.PeImage] = None,
    kernel_width: int = 11,
    region_map: Optional[P.RegionMap] = None,
) -> Annotation:
    return annotate_offset(data, record.offset, kernel_width, pe_image, region_map)
