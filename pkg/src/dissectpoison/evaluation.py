"""Metrics over dissection runs: manipulation rates, category breakdown,
accuracy impact, and the random-noise vs designed-corruption comparison."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corruption import Baseline, clean_baseline, run_corruption_campaign
from .data import CATEGORIES, ConceptSet, ProbingDataset, add_random_noise
from .dissection import DissectionResult, dissect
from .errors import InvalidArgumentError
from .models import NeuronAddress, classify


@dataclass(frozen=True)
class NeuronChange:
    neuron: NeuronAddress
    baseline: str | None
    corrupted: str | None
    description_score: float | None = None  # reserved for learned similarity scorers

    @property
    def manipulated(self) -> bool:
        return self.baseline != self.corrupted


def _rate(flags) -> float:
    flags = list(flags)
    return 100.0 * sum(flags) / len(flags) if flags else 0.0


@dataclass
class ManipulationReport:
    rows: list = field(default_factory=list)
    context: dict = field(default_factory=dict)  # epsilon, noise kind/level/fraction, ...

    @property
    def rate(self) -> float:
        return _rate(r.manipulated for r in self.rows)

    def rate_per_layer(self) -> dict:
        layers = {}
        for r in self.rows:
            layers.setdefault(r.neuron.layer, []).append(r.manipulated)
        return {k: _rate(v) for k, v in layers.items()}

    def to_json(self) -> dict:
        return {
            "context": self.context,
            "rate": self.rate,
            "rate_per_layer": self.rate_per_layer(),
            "neurons": [
                {
                    "layer": r.neuron.layer,
                    "channel": r.neuron.channel,
                    "baseline_concept": r.baseline,
                    "corrupted_concept": r.corrupted,
                    "manipulated": r.manipulated,
                    "description_score": r.description_score,
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ManipulationReport":
        rows = [
            NeuronChange(
                NeuronAddress(n["layer"], int(n["channel"])),
                n["baseline_concept"],
                n["corrupted_concept"],
                n.get("description_score"),
            )
            for n in obj["neurons"]
        ]
        return cls(rows, dict(obj.get("context", {})))

    _CSV_COLUMNS = ("layer", "channel", "baseline_concept", "corrupted_concept", "manipulated", "context")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self._CSV_COLUMNS)
        ctx = json.dumps(self.context, sort_keys=True)
        for r in self.rows:
            writer.writerow(
                [r.neuron.layer, r.neuron.channel, r.baseline or "", r.corrupted or "", int(r.manipulated), ctx]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ManipulationReport":
        reader = csv.DictReader(io.StringIO(text))
        rows, context = [], {}
        for rec in reader:
            context = json.loads(rec["context"])
            rows.append(
                NeuronChange(
                    NeuronAddress(rec["layer"], int(rec["channel"])),
                    rec["baseline_concept"] or None,
                    rec["corrupted_concept"] or None,
                )
            )
        return cls(rows, context)


def manipulation_rate(
    baseline: DissectionResult, corrupted: DissectionResult, scope: str = "all", context=None
) -> ManipulationReport:
    """Compare assigned concepts neuron by neuron; a move to or from "none" counts."""
    if list(baseline.neurons) != list(corrupted.neurons):
        raise InvalidArgumentError("baseline and corrupted runs cover different neurons")
    rows = [
        NeuronChange(n, baseline.concept_name(n), corrupted.concept_name(n))
        for n in baseline.neurons
        if scope == "all" or n.layer == scope
    ]
    if scope != "all" and not rows:
        raise InvalidArgumentError(f"no neurons in layer {scope!r}")
    return ManipulationReport(rows, dict(context or {}))


def category_breakdown(report: ManipulationReport, concepts: ConceptSet) -> dict:
    """Manipulation rate per category of the baseline concept; empty categories omitted."""
    groups = {}
    for r in report.rows:
        if r.baseline is None:
            continue
        cat = concepts[concepts.id_of(r.baseline)].category
        groups.setdefault(cat, []).append(r.manipulated)
    return {c: _rate(groups[c]) for c in CATEGORIES if c in groups}


@dataclass(frozen=True)
class AccuracyImpact:
    clean: float
    corrupted: float

    @property
    def delta_points(self) -> float:
        return 100.0 * (self.corrupted - self.clean)

    def to_json(self) -> dict:
        return {"clean": self.clean, "corrupted": self.corrupted, "delta_points": self.delta_points}


def accuracy(model, dataset: ProbingDataset) -> float:
    return float(np.mean(np.asarray(classify(model, dataset.images)) == dataset.labels))


def accuracy_impact(model, clean: ProbingDataset, corrupted: ProbingDataset) -> AccuracyImpact:
    if len(clean) != len(corrupted) or not np.array_equal(clean.labels, corrupted.labels):
        raise InvalidArgumentError("clean and corrupted datasets must carry identical labels")
    return AccuracyImpact(accuracy(model, clean), accuracy(model, corrupted))


# --------------------------------------------------------------------------
# noise vs designed


@dataclass(frozen=True)
class ComparisonRow:
    method: str  # "noise" or "designed"
    kind: str  # noise kind or corruption mode
    level: float
    layer: str
    neurons: int
    manipulated: int

    @property
    def rate(self) -> float:
        return 100.0 * self.manipulated / self.neurons if self.neurons else 0.0


COMPARISON_COLUMNS = ("method", "kind", "level", "layer", "neurons", "manipulated", "rate")


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)

    def rate(self, method: str, kind: str, layer: str | None = None) -> float:
        sel = [r for r in self.rows if r.method == method and r.kind == kind and (layer is None or r.layer == layer)]
        total = sum(r.neurons for r in sel)
        return 100.0 * sum(r.manipulated for r in sel) / total if total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for r in self.rows:
            writer.writerow([r.method, r.kind, repr(r.level), r.layer, r.neurons, r.manipulated, repr(r.rate)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append(
                ComparisonRow(
                    rec["method"],
                    rec["kind"],
                    float(rec["level"]),
                    rec["layer"],
                    int(rec["neurons"]),
                    int(rec["manipulated"]),
                )
            )
        return cls(rows)


def _rows_by_layer(method, kind, level, flags: dict) -> list:
    layers = {}
    for neuron, flag in flags.items():
        layers.setdefault(neuron.layer, []).append(flag)
    return [ComparisonRow(method, kind, level, layer, len(v), int(sum(v))) for layer, v in layers.items()]


def compare_corruptions(
    model,
    dataset: ProbingDataset,
    noise_cfgs,
    corruption_cfgs,
    neurons=None,
    baseline: Baseline | None = None,
) -> ComparisonReport:
    """Manipulation rates of random noise and designed corruption, side by side per layer.

    Noise is scored over ``neurons`` (default: the neurons the designed configs
    attack, else every baseline-interpretable neuron).
    """
    noise_cfgs, corruption_cfgs = list(noise_cfgs), list(corruption_cfgs)
    levels = {float(c.level) for c in noise_cfgs} | {float(c.epsilon) for c in corruption_cfgs}
    if len(levels) > 1:
        raise InvalidArgumentError(f"noise level and epsilon must be equal, got {sorted(levels)}")
    if baseline is None:
        baseline = clean_baseline(model, dataset)
    if neurons is None:
        if corruption_cfgs:
            neurons = list(dict.fromkeys(c.neuron for c in corruption_cfgs))
        else:
            neurons = [n for n, r in baseline.result.neurons.items() if r.interpretable]
    neurons = list(neurons)
    layers = sorted({n.layer for n in neurons}, key=list(model.dissectable).index)
    report = ComparisonReport()
    for cfg in noise_cfgs:
        noisy = add_random_noise(dataset, cfg)
        res = baseline.result
        after, _, _ = dissect(model, noisy, layers, res.eta, None, res.floor)
        flags = {n: after.concept_of(n) != res.concept_of(n) for n in neurons}
        report.rows += _rows_by_layer("noise", cfg.kind, float(cfg.level), flags)
    by_mode = {}
    for cfg in corruption_cfgs:
        by_mode.setdefault(cfg.mode, []).append(cfg)
    for mode, cfgs in by_mode.items():
        campaign = run_corruption_campaign(model, dataset, cfgs, baseline)
        flags = {o.config.neuron: bool(o.manipulated) for o in campaign.outcomes}
        report.rows += _rows_by_layer("designed", mode, float(cfgs[0].epsilon), flags)
    return report


def save_report(path, report) -> Path:
    path = Path(path)
    if path.suffix == ".csv":
        path.write_text(report.to_csv())
    else:
        with open(path, "w") as fh:
            json.dump(report.to_json(), fh, indent=1, sort_keys=True)
    return path


__all__ = [
    "AccuracyImpact",
    "ComparisonReport",
    "ComparisonRow",
    "ManipulationReport",
    "NeuronChange",
    "accuracy",
    "accuracy_impact",
    "category_breakdown",
    "compare_corruptions",
    "manipulation_rate",
    "save_report",
]
