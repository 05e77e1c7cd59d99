"""Neuron explanation by activation-mask overlap.

Three steps per channel: a top-quantile activation threshold over the whole
probe set, binary masks from the upsampled activation maps, then the concept
whose segmentation overlaps those masks best.
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .bundle import load_bundle, save_bundle
from .data import ConceptSet, ProbingDataset
from .errors import ConfigurationError, IntegrityError, NoBaselineConceptError
from .models import ModelSpec, NeuronAddress
from .tensor import bilinear_upsample, forward_collect

DEFAULT_ETA = 0.005
DEFAULT_FLOOR = 0.04


# --------------------------------------------------------------------------
# step 1: thresholds


def compute_threshold(activations, eta: float = DEFAULT_ETA) -> float:
    """Nearest-rank upper quantile: descending sort, take index ``floor(eta * S)``."""
    if not 0.0 < eta < 1.0:
        raise ConfigurationError(f"eta must lie in (0, 1), got {eta}")
    values = np.asarray(activations).reshape(-1)
    s = values.size
    if s < math.ceil(1.0 / eta):
        raise ConfigurationError(f"need at least {math.ceil(1.0 / eta)} samples for eta={eta}, got {s}")
    rank = s - 1 - int(math.floor(eta * s))  # same element, ascending order
    return float(np.partition(values, rank)[rank])


@dataclass(frozen=True)
class ThresholdEntry:
    threshold: float
    eta: float
    samples: int


# --------------------------------------------------------------------------
# step 2: masks


def binary_masks(maps: np.ndarray, threshold: float, size) -> np.ndarray:
    """Upsample ``... x h x w`` activation maps to ``size`` and keep pixels >= threshold."""
    up = bilinear_upsample(maps, int(size[0]), int(size[1]))
    return (up >= np.float32(threshold)).astype(np.uint8)


def compute_binary_mask(model: ModelSpec, image: np.ndarray, neuron: NeuronAddress, threshold: float) -> np.ndarray:
    if neuron.layer not in model.dissectable:
        raise ConfigurationError(f"layer {neuron.layer!r} is not dissectable")
    if not 0 <= neuron.channel < model.channels(neuron.layer):
        raise ConfigurationError(f"{neuron} is out of range")
    image = np.asarray(image, dtype=np.float32)
    acts, _, _ = forward_collect(model, image[None], layers=(neuron.layer,))
    return binary_masks(acts[neuron.layer][0, neuron.channel], threshold, image.shape[1:])


@dataclass
class BinaryMaskSet:
    """Per neuron, an N x H x W uint8 stack of binary activation masks."""

    masks: dict = field(default_factory=dict)

    def __getitem__(self, neuron: NeuronAddress) -> np.ndarray:
        try:
            return self.masks[neuron]
        except KeyError:
            raise ConfigurationError(f"no masks stored for {neuron}") from None

    def __contains__(self, neuron):
        return neuron in self.masks

    def save(self, path) -> Path:
        return save_bundle(path, {str(n): m for n, m in self.masks.items()})

    @classmethod
    def load(cls, path) -> "BinaryMaskSet":
        tensors = load_bundle(path)
        masks = {}
        for name, arr in tensors.items():
            if arr.dtype != np.uint8 or arr.ndim != 3:
                raise IntegrityError(f"mask tensor {name!r} must be N x H x W u8")
            masks[NeuronAddress.parse(name)] = arr
        return cls(masks)


# --------------------------------------------------------------------------
# step 3: similarity and assignment


class SimilarityFunction(ABC):
    """Scores how well a neuron's binary masks match one concept's masks."""

    identifier = "abstract"

    @abstractmethod
    def evaluate(self, neuron_masks: np.ndarray, concept_masks: np.ndarray) -> float:
        """Both arguments are N x H x W binary stacks."""

    def evaluate_all(self, neuron_masks: np.ndarray, concept_masks: np.ndarray) -> np.ndarray:
        """Scores against every concept of an N x K x H x W stack."""
        return np.array(
            [self.evaluate(neuron_masks, concept_masks[:, k]) for k in range(concept_masks.shape[1])]
        )


class IoUSimilarity(SimilarityFunction):
    """Dataset-wide intersection over union (ratio of sums, not mean of ratios)."""

    identifier = "iou"

    def evaluate(self, neuron_masks, concept_masks) -> float:
        return float(self.evaluate_all(neuron_masks, np.asarray(concept_masks)[:, None])[0])

    def evaluate_all(self, neuron_masks, concept_masks) -> np.ndarray:
        m = np.asarray(neuron_masks, dtype=bool).reshape(len(neuron_masks), -1)
        lab = np.asarray(concept_masks, dtype=bool).reshape(m.shape[0], concept_masks.shape[1], -1)
        inter = np.einsum("np,nkp->k", m.astype(np.int64), lab.astype(np.int64))
        union = int(m.sum()) + lab.sum(axis=(0, 2)) - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def iou_similarity(neuron_masks, concept_masks) -> float:
    return IoUSimilarity().evaluate(neuron_masks, concept_masks)


def assign_concept(scores, floor: float = DEFAULT_FLOOR):
    """Best concept id (lowest id on ties) and its score; id is None below the floor."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ConfigurationError("concept set is empty")
    best = int(np.argmax(scores))
    score = float(scores[best])
    return (best if score >= floor else None), score


# --------------------------------------------------------------------------
# full pipeline


@dataclass(frozen=True)
class NeuronResult:
    neuron: NeuronAddress
    concept: int | None
    score: float
    runner_up: int | None
    runner_up_score: float
    threshold: float

    @property
    def interpretable(self) -> bool:
        return self.concept is not None


@dataclass
class DissectionResult:
    concepts: ConceptSet
    neurons: dict  # NeuronAddress -> NeuronResult, in dissection order
    eta: float = DEFAULT_ETA
    floor: float = DEFAULT_FLOOR
    similarity: str = "iou"

    def __getitem__(self, neuron: NeuronAddress) -> NeuronResult:
        try:
            return self.neurons[neuron]
        except KeyError:
            raise ConfigurationError(f"{neuron} was not dissected") from None

    def concept_of(self, neuron: NeuronAddress) -> int | None:
        return self[neuron].concept

    def concept_name(self, neuron: NeuronAddress) -> str | None:
        cid = self.concept_of(neuron)
        return None if cid is None else self.concepts[cid].name

    def to_json(self) -> dict:
        rows = []
        for r in self.neurons.values():
            rows.append(
                {
                    "layer": r.neuron.layer,
                    "channel": r.neuron.channel,
                    "concept": None if r.concept is None else self.concepts[r.concept].name,
                    "score": r.score,
                    "runner_up": None if r.runner_up is None else self.concepts[r.runner_up].name,
                    "runner_up_score": r.runner_up_score,
                    "threshold": r.threshold,
                    "interpretable": r.interpretable,
                }
            )
        return {
            "eta": self.eta,
            "floor": self.floor,
            "similarity": self.similarity,
            "concepts": self.concepts.to_json(),
            "neurons": rows,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DissectionResult":
        concepts = ConceptSet.from_json(obj["concepts"])
        neurons = {}
        for row in obj["neurons"]:
            addr = NeuronAddress(row["layer"], int(row["channel"]))
            neurons[addr] = NeuronResult(
                addr,
                None if row["concept"] is None else concepts.id_of(row["concept"]),
                float(row["score"]),
                None if row["runner_up"] is None else concepts.id_of(row["runner_up"]),
                float(row.get("runner_up_score", 0.0)),
                float(row["threshold"]),
            )
        return cls(concepts, neurons, float(obj["eta"]), float(obj["floor"]), obj.get("similarity", "iou"))


def _layer_list(model: ModelSpec, layers) -> list:
    layers = list(model.dissectable) if layers is None else list(layers)
    for layer in layers:
        if layer not in model.dissectable:
            raise ConfigurationError(f"layer {layer!r} is not dissectable (choose from {list(model.dissectable)})")
    return layers


def layer_activations(model: ModelSpec, images: np.ndarray, layers, batch_size: int = 200) -> dict:
    out = {layer: [] for layer in layers}
    for start in range(0, len(images), batch_size):
        acts, _, _ = forward_collect(model, images[start : start + batch_size], layers=tuple(layers))
        for layer in layers:
            out[layer].append(acts[layer])
    return {layer: np.concatenate(chunks) for layer, chunks in out.items()}


def dissect(
    model: ModelSpec,
    dataset: ProbingDataset,
    layers=None,
    eta: float = DEFAULT_ETA,
    sim: SimilarityFunction | None = None,
    floor: float = DEFAULT_FLOOR,
):
    """Explain every channel of ``layers``; returns (result, thresholds, masks)."""
    sim = IoUSimilarity() if sim is None else sim
    layers = _layer_list(model, layers)
    size = dataset.image_size
    acts = layer_activations(model, dataset.images, layers)
    neurons, thresholds, masks = {}, {}, BinaryMaskSet()
    for layer in layers:
        maps = acts[layer]
        for ch in range(maps.shape[1]):
            addr = NeuronAddress(layer, ch)
            t = compute_threshold(maps[:, ch], eta)
            thresholds[addr] = ThresholdEntry(t, eta, int(maps[:, ch].size))
            m = binary_masks(maps[:, ch], t, size)
            masks.masks[addr] = m
            scores = sim.evaluate_all(m, dataset.masks)
            concept, score = assign_concept(scores, floor)
            order = np.argsort(-scores, kind="stable")
            runner = int(order[1]) if len(order) > 1 else None
            neurons[addr] = NeuronResult(
                addr,
                concept,
                score,
                runner,
                float(scores[runner]) if runner is not None else 0.0,
                t,
            )
    result = DissectionResult(dataset.concepts, neurons, eta, floor, sim.identifier)
    return result, thresholds, masks


def derive_baseline_masks(result: DissectionResult, masks: BinaryMaskSet, neuron: NeuronAddress) -> np.ndarray:
    """Stand-in segmentation for the neuron's baseline concept: its own clean masks."""
    if result[neuron].concept is None:
        raise NoBaselineConceptError(f"{neuron} had no interpretable concept in the baseline run")
    return masks[neuron].copy()


# --------------------------------------------------------------------------
# persistence


def save_dissection(path, result: DissectionResult, masks: BinaryMaskSet | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "dissection.json", "w") as fh:
        json.dump(result.to_json(), fh, indent=1, sort_keys=True)
    if masks is not None:
        masks.save(path / "masks")
    return path


def load_dissection(path, with_masks: bool = True):
    path = Path(path)
    try:
        with open(path / "dissection.json") as fh:
            result = DissectionResult.from_json(json.load(fh))
    except FileNotFoundError:
        raise IntegrityError(f"{path} has no dissection.json") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise IntegrityError(f"{path}/dissection.json is malformed: {exc}") from None
    masks = BinaryMaskSet.load(path / "masks") if with_masks else None
    return result, masks


# --------------------------------------------------------------------------
# estimator wrapper


class NetworkDissection(BaseEstimator):
    """Estimator-style front end: ``fit`` dissects a probe set.

    Fitted attributes: ``result_``, ``thresholds_``, ``masks_``.
    """

    def __init__(self, model=None, layers=None, eta=DEFAULT_ETA, floor=DEFAULT_FLOOR, similarity=None):
        self.model = model
        self.layers = layers
        self.eta = eta
        self.floor = floor
        self.similarity = similarity

    def fit(self, dataset: ProbingDataset, y=None):
        if self.model is None:
            raise ConfigurationError("NetworkDissection needs a model")
        self.result_, self.thresholds_, self.masks_ = dissect(
            self.model, dataset, self.layers, self.eta, self.similarity, self.floor
        )
        return self

    def predict(self, neurons=None) -> list:
        """Assigned concept names (None when uninterpretable)."""
        neurons = list(self.result_.neurons) if neurons is None else neurons
        return [self.result_.concept_name(n) for n in neurons]
