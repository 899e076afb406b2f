"""Training-regime orchestration and ground-truth scoring against corpus manifests."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import chisquare

from .corpus import Manifest, PlantedSpan, balanced_subset, split_by_order
from .errors import ConfigError, InputError
from .model import (
    LabeledSample,
    Model,
    ModelConfig,
    TrainConfig,
    build_model,
    evaluate,
    train,
)
from .probe import ActivationRecord

logger = logging.getLogger(__name__)

REGIMES = ("small", "baseline", "dropout")


def regime_model_config(regime: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    base = base or ModelConfig()
    if regime == "dropout":
        return base.with_dropout()
    if regime in ("small", "baseline"):
        return replace(base, dropout_rates=None)
    raise ConfigError(f"unknown regime {regime!r}; expected one of {', '.join(REGIMES)}")


def regime_train_set(regime: str, train_samples: Sequence[LabeledSample]) -> list[LabeledSample]:
    """Small uses a 50:50 class-balanced subset; the others use the full split."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    return balanced_subset(train_samples) if regime == "small" else list(train_samples)


@dataclass
class RegimeResult:
    regime: str
    model: Model
    n_train: int
    malware_fraction: float
    metrics: dict[str, float]
    history: dict

    def row(self) -> dict:
        return {
            "regime": self.regime,
            "n_train": self.n_train,
            "malware_fraction": round(self.malware_fraction, 4),
            **{k: self.metrics[k] for k in sorted(self.metrics)},
        }


@dataclass
class RegimeTable:
    results: dict[str, RegimeResult] = field(default_factory=dict)

    def __getitem__(self, regime: str) -> RegimeResult:
        return self.results[regime]

    def to_csv(self) -> str:
        rows = [r.row() for r in self.results.values()]
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return buf.getvalue()

    def to_json(self) -> str:
        out = {k: {**r.row(), "history": r.history} for k, r in self.results.items()}
        return json.dumps(out, indent=2, sort_keys=True) + "\n"


def train_regime(
    regime: str,
    train_samples: Sequence[LabeledSample],
    validation: Optional[Sequence[LabeledSample]] = None,
    train_config: Optional[TrainConfig] = None,
    model_config: Optional[ModelConfig] = None,
    model_seed: int = 0,
) -> Model:
    data = regime_train_set(regime, train_samples)
    model = build_model(regime_model_config(regime, model_config), seed=model_seed)
    tc = replace(train_config or TrainConfig(), regime=regime)
    logger.info("training %s regime on %d samples", regime, len(data))
    train(model, data, tc, validation)
    return model


def run_regimes(
    samples: Sequence[LabeledSample],
    regimes: Iterable[str] = REGIMES,
    train_config: Optional[TrainConfig] = None,
    model_config: Optional[ModelConfig] = None,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    model_seed: int = 0,
) -> RegimeTable:
    """Train each regime on a generation-order split and score it on the test split.

    ``samples`` must be in generation order; later files form the test set.
    """
    tr, va, te = split_by_order(samples, fractions)
    table = RegimeTable()
    for regime in regimes:
        model = train_regime(regime, tr, va, train_config, model_config, model_seed)
        data = regime_train_set(regime, tr)
        table.results[regime] = RegimeResult(
            regime,
            model,
            len(data),
            float(np.mean([s.label for s in data])),
            evaluate(model, te),
            model.metadata.get("history", {}),
        )
    return table


# ---------------------------------------------------------------------------
# ground-truth scoring
# ---------------------------------------------------------------------------

def _overlaps(start: int, end: int, spans: Iterable[PlantedSpan]) -> bool:
    return any(s.start < end and start < s.end for s in spans)


def planted_feature_recall(
    reports: Sequence,
    manifest: Manifest,
    top_n: int = 5,
) -> float:
    """Fraction of reports whose ``top_n`` positive segments hit a malware-leaning plant.

    ``reports`` are SegmentReport objects or their dict form.
    """
    if top_n < 0:
        raise InputError("top_n must be nonnegative")
    dicts = [r if isinstance(r, Mapping) else r.to_dict() for r in reports]
    entries = [manifest[d["sample"]] for d in dicts]  # raises on unknown samples
    if top_n == 0 or not dicts:
        return 0.0
    hits = 0
    for d, entry in zip(dicts, entries):
        pos = sorted((s for s in d["segments"] if s["sign"] > 0), key=lambda s: (-s["value"], s["start"]))
        spans = entry.discriminative_spans(1)
        if any(_overlaps(s["start"], s["end"], spans) for s in pos[:top_n]):
            hits += 1
    return hits / len(dicts)


@dataclass
class Concentration:
    hits: int
    total: int
    expected: float
    statistic: float
    p_value: float

    @property
    def enriched(self) -> bool:
        return self.hits > self.expected

    def to_dict(self) -> dict:
        return {**asdict(self), "enriched": self.enriched}


def _coverage_fraction(spans: Sequence[PlantedSpan], n_starts: int, width: int) -> float:
    """Share of window starts in ``[0, n_starts)`` whose window touches a span."""
    if n_starts <= 0:
        return 0.0
    hit = np.zeros(n_starts, dtype=bool)
    for s in spans:
        hit[max(0, s.start - width + 1) : max(0, min(n_starts, s.end))] = True
    return float(hit.mean())


def activation_concentration(
    records: Sequence[ActivationRecord],
    manifest: Manifest,
    kernel_width: int = 11,
    sign: int = 1,
) -> Concentration:
    """Chi-square test of record windows landing on planted spans vs a uniform null.

    The null places each record uniformly over window starts inside its own
    file, so padding never counts in favour of the planted spans.
    """
    hits, expected, total = 0, 0.0, 0
    cache: dict[str, tuple[list[PlantedSpan], float]] = {}
    for r in records:
        if r.sample not in cache:
            entry = manifest[r.sample]
            spans = entry.discriminative_spans(sign)
            n_starts = min(entry.size, r.input_len) - kernel_width + 1
            cache[r.sample] = (spans, _coverage_fraction(spans, n_starts, kernel_width))
        spans, frac = cache[r.sample]
        total += 1
        expected += frac
        hits += _overlaps(r.offset, r.offset + kernel_width, spans)
    if total == 0 or expected in (0.0, float(total)):
        return Concentration(hits, total, expected, float("nan"), float("nan"))
    stat, p = chisquare([hits, total - hits], [expected, total - expected])
    return Concentration(hits, total, expected, float(stat), float(p))
