"""GradientSHAP (expected gradients) in embedding space, plus segment reports.

Attributions are taken with respect to the embedded input, so the discrete
byte lookup never needs a gradient. Per-byte values are the sum over the
embedding dimensions at each position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import pe as P
from . import svg
from . import tensor as T
from .errors import InputError
from .model import Model, logits_from_embedded
from .probe import annotate_offset
from .tensor import Tensor

OutputFn = Callable[[Model, Tensor], Tensor]
MAX_RENDER = 64  # bytes rendered per reported segment


def probability_output(model: Model, emb: Tensor) -> Tensor:
    """Malware probability per batch row; the default explained quantity."""
    return T.sigmoid(logits_from_embedded(model, emb))


@dataclass
class AttributionConfig:
    n_samples: int = 1000
    sigma: float = 0.0
    seed: int = 0
    batch_size: int = 16
    expected_output: bool = True

    def validate(self) -> None:
        if self.n_samples < 1:
            raise InputError("n_samples must be >= 1")
        if self.sigma < 0:
            raise InputError("sigma must be >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


@dataclass
class ByteAttribution:
    phi: np.ndarray
    output: float
    expected_output: Optional[float]
    sample: str = ""

    @property
    def input_len(self) -> int:
        return len(self.phi)


def _check_symbols(model: Model, symbols, what: str) -> np.ndarray:
    arr = np.asarray(symbols)
    L = model.config.input_len
    if arr.shape[-1] != L:
        raise InputError(f"{what} has length {arr.shape[-1]}, model expects {L}")
    return arr


def gradient_shap(
    model: Model,
    symbols,
    background,
    config: Optional[AttributionConfig] = None,
    output_fn: OutputFn = probability_output,
    sample: str = "",
) -> ByteAttribution:
    """Monte Carlo expected gradients between ``symbols`` and random background rows.

    Each draw picks a background row b and alpha ~ U(0, 1), evaluates the
    gradient at e_b + alpha (e_x - e_b) and multiplies it by (e_x - e_b).
    """
    config = config or AttributionConfig()
    config.validate()
    x = _check_symbols(model, symbols, "sample")
    if x.ndim != 1:
        raise InputError("explain one sample at a time")
    bg = _check_symbols(model, background, "background")
    if bg.ndim == 1:
        bg = bg[None]
    if len(bg) == 0:
        raise InputError("background set is empty")

    table = model.embedding
    e_x = table[x].T  # [dim, L]
    rng = np.random.default_rng(config.seed)
    idx = rng.integers(len(bg), size=config.n_samples)
    alpha = rng.uniform(size=config.n_samples)

    total = np.zeros_like(e_x)
    for start in range(0, config.n_samples, config.batch_size):
        bi, a = idx[start : start + config.batch_size], alpha[start : start + config.batch_size]
        e_b = table[bg[bi]].transpose(0, 2, 1)  # [B, dim, L]
        delta = e_x[None] - e_b
        point = e_b + a[:, None, None] * delta
        if config.sigma:
            point = point + rng.normal(scale=config.sigma, size=point.shape)
        emb = Tensor(point, requires_grad=True)
        T.tsum(output_fn(model, emb)).backward()
        total += np.sum(emb.grad * delta, axis=0)
    phi = (total / config.n_samples).sum(axis=0)

    out = float(output_fn(model, Tensor(e_x[None])).data[0])
    expected = None
    if config.expected_output:
        rows = np.unique(idx)
        vals = np.concatenate([
            output_fn(model, Tensor(table[bg[rows[s : s + config.batch_size]]].transpose(0, 2, 1))).data
            for s in range(0, len(rows), config.batch_size)
        ])
        counts = np.bincount(idx, minlength=len(bg))[rows]
        expected = float(np.dot(vals, counts) / config.n_samples)
    return ByteAttribution(phi, out, expected, sample)


def integrated_gradients(
    model: Model,
    symbols,
    baseline,
    steps: int = 256,
    output_fn: OutputFn = probability_output,
    batch_size: int = 16,
) -> np.ndarray:
    """Midpoint Riemann-sum integrated gradients along the straight embedding path."""
    table = model.embedding
    e_x = table[_check_symbols(model, symbols, "sample")].T
    e_b = table[_check_symbols(model, baseline, "baseline")].T
    delta = e_x - e_b
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(e_x)
    for s in range(0, steps, batch_size):
        a = alphas[s : s + batch_size]
        emb = Tensor(e_b[None] + a[:, None, None] * delta[None], requires_grad=True)
        T.tsum(output_fn(model, emb)).backward()
        total += emb.grad.sum(axis=0)
    return (total / steps * delta).sum(axis=0)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    value: float
    sign: int

    @property
    def label(self) -> str:
        return "malicious" if self.sign > 0 else "benign"


def segment(phi) -> list[Segment]:
    """Maximal same-sign runs; zeros join the current run, leading zeros are dropped."""
    phi = np.asarray(phi.phi if isinstance(phi, ByteAttribution) else phi, dtype=float)
    signs = np.sign(phi)
    nz = np.flatnonzero(signs)
    if not len(nz):
        return []
    # a run starts wherever the sign differs from the previous nonzero sign
    starts = nz[np.concatenate(([True], signs[nz[1:]] != signs[nz[:-1]]))]
    ends = np.append(starts[1:], len(phi))
    return [
        Segment(int(s), int(e), math.fsum(phi[s:e]), int(signs[s]))
        for s, e in zip(starts, ends)
    ]


# ---------------------------------------------------------------------------
# annotated report
# ---------------------------------------------------------------------------

def _named_feature(pe_image: Optional[P.PeImage], start: int, end: int) -> str:
    if pe_image is None:
        return ""
    for name, (a, b) in P.header_field_spans(pe_image).items():
        if a < end and start < b:
            return name
    for ref in pe_image.import_names():
        if ref.offset < end and start < ref.offset + ref.length:
            return ref.name
    return ""


def _main_region(rmap: P.RegionMap, start: int, end: int) -> P.Region:
    best, best_len = None, -1
    for r in rmap.overlapping(start, end):
        overlap = min(end, r.end) - max(start, r.start)
        if overlap > best_len:
            best, best_len = r, overlap
    return best


@dataclass
class SegmentReport:
    sample: str
    output: Optional[float]
    expected_output: Optional[float]
    file_size: int
    input_len: int
    segments: list[dict]
    n_segments: int = 0
    padding_excluded: bool = True
    extra: dict = field(default_factory=dict)

    def positive(self) -> list[dict]:
        return [s for s in self.segments if s["sign"] > 0]

    def to_dict(self) -> dict:
        return {
            "sample": self.sample,
            "output": self.output,
            "expected_output": self.expected_output,
            "file_size": self.file_size,
            "input_len": self.input_len,
            "n_segments": self.n_segments,
            "padding_excluded": self.padding_excluded,
            "segments": self.segments,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_svg(self) -> str:
        pos = [s["start"] for s in self.segments]
        series = {
            "malicious": [s["value"] if s["sign"] > 0 else 0.0 for s in self.segments],
            "benign": [s["value"] if s["sign"] < 0 else 0.0 for s in self.segments],
        }
        return svg.bars(pos, series, f"segment attributions {self.sample}".strip(), max(1, self.input_len // 200))


def top_segments(
    segments: Sequence[Segment],
    data: bytes,
    pe_image: Optional[P.PeImage] = None,
    n: int = 10,
    include_padding: bool = False,
    attribution: Optional[ByteAttribution] = None,
    sample: str = "",
) -> SegmentReport:
    """The ``n`` largest-|value| segments of each sign, annotated with PE semantics."""
    size = len(data)
    if pe_image is None:
        try:
            pe_image = P.parse_pe(data)
        except P.NotAPEError:
            pe_image = None
    if pe_image is not None:
        rmap = P.build_region_map(pe_image, size)
    else:
        rmap = P.RegionMap(size, [P.Region(0, size, P.UNKNOWN)] if size else [])
    pool = [s for s in segments if include_padding or s.start < size]
    chosen = []
    for sign in (1, -1):
        side = sorted((s for s in pool if s.sign == sign), key=lambda s: (-abs(s.value), s.start))
        chosen += side[:n]
    chosen.sort(key=lambda s: (-s.sign, -abs(s.value), s.start))
    out = []
    for s in chosen:
        region = _main_region(rmap, s.start, s.end)
        ann = annotate_offset(data, s.start, min(s.end - s.start, MAX_RENDER), pe_image, rmap, context=0)
        out.append({
            "start": s.start,
            "end": s.end,
            "value": s.value,
            "sign": s.sign,
            "region": region.kind,
            "region_detail": region.detail,
            "feature": _named_feature(pe_image, s.start, min(s.end, size)),
            "strings": ann.string_view,
            "instructions": ann.instruction_view,
        })
    input_len = attribution.input_len if attribution is not None else max((s.end for s in segments), default=0)
    return SegmentReport(
        sample or (attribution.sample if attribution else ""),
        attribution.output if attribution else None,
        attribution.expected_output if attribution else None,
        size,
        input_len,
        out,
        len(segments),
        not include_padding,
    )
