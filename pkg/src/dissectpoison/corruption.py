"""Designed probe-set corruption: sign-gradient PGD against one neuron's explanation.

The objective for one image is the mean upsampled activation of the neuron over
the pixels of its current concept, minus the same mean over a target concept's
pixels (or the source term alone in the U1 variant). Minimising it inside an
L-infinity ball pushes the neuron's strongest responses away from its concept.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .bundle import save_bundle
from .data import NoiseConfig, ProbingDataset, add_random_noise, select_poison_subset
from .dissection import BinaryMaskSet, DissectionResult, dissect
from .errors import (
    ConfigurationError,
    DissectPoisonError,
    EmptyConceptMaskError,
    EmptyPoisonSetError,
    NoBaselineConceptError,
)
from .models import ModelSpec, NeuronAddress
from .tensor import bilinear_matrix, forward_collect, grad_wrt_input, run_layers, upsample_adjoint

logger = logging.getLogger(__name__)

MODES = ("targeted", "u1", "u2")
MASK_SOURCES = ("ground-truth", "baseline")


@dataclass(frozen=True)
class CorruptionConfig:
    neuron: NeuronAddress
    mode: str = "u2"
    target: str | int | None = None
    epsilon: float = 6 / 255
    steps: int = 40
    step_size: float | None = None  # None: epsilon / 10
    mask_source: str = "ground-truth"
    max_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.neuron, str):
            object.__setattr__(self, "neuron", NeuronAddress.parse(self.neuron))
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigurationError(f"mask source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        if self.mode == "targeted" and self.target is None:
            raise ConfigurationError("targeted mode needs a target concept")
        if not self.epsilon >= 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigurationError("step size must be > 0")
        if not 0.0 < self.max_fraction <= 1.0:
            raise ConfigurationError("max_fraction must lie in (0, 1]")

    @property
    def alpha(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else float(self.step_size)

    def to_json(self) -> dict:
        out = asdict(self)
        out["neuron"] = str(self.neuron)
        out["step_size"] = self.alpha
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CorruptionConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ConfigurationError(f"unknown corruption config keys: {sorted(extra)}")
        return cls(**obj)


# --------------------------------------------------------------------------
# objective


def concept_weights(masks: np.ndarray) -> np.ndarray:
    """Per image, the mask divided by its pixel count (float64)."""
    masks = np.asarray(masks, dtype=np.float64)
    flat = masks.reshape(masks.shape[0], -1) if masks.ndim == 3 else masks.reshape(1, -1)
    totals = flat.sum(axis=1)
    if np.any(totals == 0):
        raise EmptyConceptMaskError("concept mask is empty; exclude the image before optimising")
    shape = (-1,) + (1,) * (masks.ndim - 1) if masks.ndim == 3 else ()
    return masks / (totals.reshape(shape) if shape else totals[0])


@dataclass(frozen=True)
class _Truncated:
    layers: tuple
    input_shape: tuple


def _truncate(model: ModelSpec, layer: str) -> _Truncated:
    names = [op.name for op in model.layers]
    if layer not in model.dissectable:
        raise ConfigurationError(f"layer {layer!r} is not dissectable")
    return _Truncated(tuple(model.layers[: names.index(layer) + 1]), model.input_shape)


def _check_neuron(model: ModelSpec, neuron: NeuronAddress):
    if neuron.layer not in model.dissectable:
        raise ConfigurationError(f"layer {neuron.layer!r} is not dissectable")
    if not 0 <= neuron.channel < model.channels(neuron.layer):
        raise ConfigurationError(f"{neuron} is out of range")


def _upsampled(maps: np.ndarray, size) -> np.ndarray:
    uy = bilinear_matrix(maps.shape[-2], size[0])
    ux = bilinear_matrix(maps.shape[-1], size[1])
    return np.einsum("ih,nhw,jw->nij", uy, maps.astype(np.float64), ux, optimize=True)


def objective_values(model, images, neuron, pixel_weights, dtype=np.float32) -> np.ndarray:
    """Per-image ``sum(upsampled activation * pixel_weights)``.

    ``dtype=np.float64`` runs the network without float32 rounding.
    """
    images = np.asarray(images)
    out = run_layers(_truncate(model, neuron.layer).layers, images, dtype=dtype)[neuron.layer]
    up = _upsampled(out[:, neuron.channel], images.shape[2:])
    return np.einsum("nij,nij->n", up, pixel_weights)


def objective_and_grad(model, images, neuron, pixel_weights):
    """Per-image objective values and their gradients with respect to ``images``."""
    images = np.asarray(images, dtype=np.float32)
    sub = _truncate(model, neuron.layer)
    acts, _, tape = forward_collect(sub, images, layers=(neuron.layer,))
    maps = acts[neuron.layer]
    values = np.einsum("nij,nij->n", _upsampled(maps[:, neuron.channel], images.shape[2:]), pixel_weights)

    def objective(outputs, logits):
        adj = np.zeros(maps.shape)
        adj[:, neuron.channel] = upsample_adjoint(pixel_weights, *maps.shape[2:])
        return float(values.sum()), {neuron.layer: adj}

    return values, grad_wrt_input(objective, images, tape)


def average_concept_activation(model, image, neuron, mask, dtype=np.float32) -> float:
    """Mean upsampled activation of ``neuron`` over the pixels where ``mask`` is set."""
    _check_neuron(model, neuron)
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.shape != image.shape[1:]:
        raise ConfigurationError(f"mask shape {mask.shape} does not match image {image.shape[1:]}")
    w = concept_weights(mask[None])
    return float(objective_values(model, image[None], neuron, w, dtype=dtype)[0])


def corruption_objective(model, image, neuron, source_mask, target_mask=None, dtype=np.float32) -> float:
    """act_avg(source) - act_avg(target); the source term alone when no target is given."""
    value = average_concept_activation(model, image, neuron, source_mask, dtype)
    if target_mask is not None:
        value -= average_concept_activation(model, image, neuron, target_mask, dtype)
    return value


def pixel_weights_for(source_masks, target_masks=None) -> np.ndarray:
    w = concept_weights(source_masks)
    if target_masks is not None:
        w = w - concept_weights(target_masks)
    return w


# --------------------------------------------------------------------------
# PGD


def _budget(epsilon: float) -> float:
    """Largest float32 not above epsilon, so float32 differences stay inside the ball."""
    e32 = np.float32(epsilon)
    if float(e32) > epsilon:
        e32 = np.nextafter(e32, np.float32(0))
    return float(e32)


def _apply(x0: np.ndarray, delta: np.ndarray, eps: float) -> np.ndarray:
    """float32 image ``clip(x0 + delta, 0, 1)`` with rounding kept inside the ball."""
    x = np.clip(x0.astype(np.float64) + delta, 0.0, 1.0).astype(np.float32)
    over = np.abs(x.astype(np.float64) - x0) > eps
    if over.any():
        x[over] = np.nextafter(x[over], x0[over])
    return x


def sign_pgd(model, images, neuron, pixel_weights, epsilon, steps, alpha):
    """Minimise the per-image objective; returns (adversarial images, traces, best steps).

    Each image keeps the iterate with the lowest recorded objective; the
    returned images differ from the inputs by at most ``epsilon`` and stay in
    [0, 1].
    """
    x0 = np.asarray(images, dtype=np.float32)
    x0_64 = x0.astype(np.float64)
    eps = _budget(epsilon)
    delta = np.zeros_like(x0_64)
    x = x0.copy()
    best_x = x0.copy()
    best_val = np.full(len(x0), np.inf)
    best_step = np.zeros(len(x0), dtype=int)
    traces = []
    for step in range(steps + 1):
        if step == steps:
            values = objective_values(model, x, neuron, pixel_weights)
        else:
            values, grad = objective_and_grad(model, x, neuron, pixel_weights)
        traces.append(values)
        better = values < best_val
        best_val = np.where(better, values, best_val)
        best_step = np.where(better, step, best_step)
        best_x[better] = x[better]
        if step == steps:
            break
        delta = np.clip(delta - alpha * np.sign(grad), -eps, eps)
        x = _apply(x0, delta, eps)
        delta = x.astype(np.float64) - x0_64  # what was actually applied
    return best_x, np.stack(traces, axis=1), best_step


@dataclass
class PerturbationRecord:
    index: int
    delta: np.ndarray  # 3 x H x W float32, applied difference
    linf: float
    trace: list
    best_step: int
    target: int | None = None


@dataclass
class Baseline:
    """A clean dissection run plus its masks; source of c_i* and derived segmentations."""

    result: DissectionResult
    masks: BinaryMaskSet

    def concept_masks(self, concept: int) -> np.ndarray:
        """Union of the baseline masks of every neuron assigned ``concept``."""
        stacks = [self.masks[n] for n, r in self.result.neurons.items() if r.concept == concept and n in self.masks]
        if not stacks:
            return None
        return np.any(np.stack(stacks), axis=0).astype(np.uint8)

    def presence(self, n_images: int) -> np.ndarray:
        k = len(self.result.concepts)
        out = np.zeros((n_images, k), dtype=bool)
        for c in range(k):
            m = self.concept_masks(c)
            if m is not None:
                out[:, c] = m.reshape(n_images, -1).any(axis=1)
        return out


def _stable(*parts) -> int:
    return int.from_bytes(hashlib.sha256("/".join(map(str, parts)).encode()).digest()[:4], "little")


def _label_source(dataset, baseline: Baseline | None, cfg: CorruptionConfig):
    """Per-concept segmentation getter and presence table for the chosen mask source."""
    if cfg.mask_source == "ground-truth":
        return (lambda c: dataset.masks[:, c]), dataset.presence()
    if baseline is None:
        raise ConfigurationError("mask source 'baseline' needs a baseline dissection")
    cache = {}

    def get(c):
        if c not in cache:
            if c == baseline.result.concept_of(cfg.neuron):
                cache[c] = baseline.masks[cfg.neuron]
            else:
                m = baseline.concept_masks(c)
                cache[c] = np.zeros(dataset.masks[:, c].shape, np.uint8) if m is None else m
        return cache[c]

    presence = np.stack([get(c).reshape(len(dataset), -1).any(axis=1) for c in range(len(dataset.concepts))], 1)
    return get, presence


def pgd_corrupt(model: ModelSpec, dataset: ProbingDataset, cfg: CorruptionConfig, baseline: Baseline):
    """Corrupt the poison subset of ``dataset`` against ``cfg.neuron``.

    Returns the corrupted dataset and a list of ``PerturbationRecord``.
    """
    _check_neuron(model, cfg.neuron)
    source = baseline.result.concept_of(cfg.neuron)
    if source is None:
        raise NoBaselineConceptError(f"{cfg.neuron} had no interpretable concept in the baseline run")
    concepts = dataset.concepts
    target = None if cfg.target is None else concepts.id_of(cfg.target)
    if cfg.mode == "targeted" and target == source:
        raise ConfigurationError("target concept equals the neuron's current concept")
    if cfg.epsilon == 0:
        return dataset.with_images(dataset.images.copy(), _log_entry(cfg, [], source)), []

    get_mask, presence = _label_source(dataset, baseline, cfg)
    poison = select_poison_subset(
        dataset,
        source,
        target if cfg.mode == "targeted" else None,
        cfg.max_fraction,
        cfg.seed,
        presence=presence,
    )
    src_masks = get_mask(source)
    rows, targets, skipped = [], [], []
    for i in poison:
        t = None
        if cfg.mode == "targeted":
            t = target
            if not get_mask(t)[i].any():
                skipped.append(i)
                continue
        elif cfg.mode == "u2":
            options = [c for c in np.flatnonzero(presence[i]) if c != source]
            if not options:
                skipped.append(i)
                continue
            rng = np.random.default_rng([cfg.seed, _stable(cfg.neuron), i])
            t = int(rng.choice(options))
        rows.append(i)
        targets.append(t)

    if skipped:
        logger.warning(
            "%s: %d poisoned image(s) have no %s concept and were skipped",
            cfg.neuron,
            len(skipped),
            "target" if cfg.mode == "targeted" else "alternative",
        )
    images = dataset.images.copy()
    records = []
    if rows:
        idx = np.asarray(rows)
        src_w = _weights_where_present(src_masks[idx])
        tgt = np.stack([get_mask(t)[i] if t is not None else np.zeros_like(src_masks[i]) for i, t in zip(rows, targets)])
        tgt_w = _weights_where_present(tgt)
        adv, traces, best = sign_pgd(
            model, dataset.images[idx], cfg.neuron, src_w - tgt_w, cfg.epsilon, cfg.steps, cfg.alpha
        )
        images[idx] = adv
        for j, i in enumerate(rows):
            delta = adv[j] - dataset.images[i]
            records.append(
                PerturbationRecord(
                    index=int(i),
                    delta=delta,
                    linf=float(np.max(np.abs(adv[j].astype(np.float64) - dataset.images[i].astype(np.float64)))),
                    trace=[float(v) for v in traces[j]],
                    best_step=int(best[j]),
                    target=targets[j],
                )
            )
    return dataset.with_images(images, _log_entry(cfg, rows, source)), records


def _weights_where_present(masks):
    # targeted poison sets may hold target-only images; their source term is dropped
    out = np.zeros(masks.shape)
    present = masks.reshape(len(masks), -1).any(axis=1)
    if present.any():
        out[present] = concept_weights(masks[present])
    return out


def _log_entry(cfg, rows, source) -> dict:
    return {"type": "designed", **cfg.to_json(), "source": int(source), "indices": [int(i) for i in rows]}


# --------------------------------------------------------------------------
# campaigns


@dataclass
class ConfigOutcome:
    config: CorruptionConfig
    baseline_concept: str | None = None
    corrupted_concept: str | None = None
    manipulated: bool | None = None
    poisoned: list = field(default_factory=list)
    records: list = field(default_factory=list)
    dataset: ProbingDataset | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "neuron": str(self.config.neuron),
            "baseline_concept": self.baseline_concept,
            "corrupted_concept": self.corrupted_concept,
            "manipulated": self.manipulated,
            "poisoned": self.poisoned,
            "error": self.error,
            "perturbations": [
                {
                    "index": r.index,
                    "linf": r.linf,
                    "best_step": r.best_step,
                    "target": r.target,
                    "trace": r.trace,
                }
                for r in self.records
            ],
        }


@dataclass
class CampaignReport:
    outcomes: list = field(default_factory=list)

    def rates(self, key) -> dict:
        groups = {}
        for o in self.outcomes:
            if o.manipulated is None:
                continue
            groups.setdefault(key(o), []).append(o.manipulated)
        return {k: 100.0 * sum(v) / len(v) for k, v in sorted(groups.items(), key=lambda kv: str(kv[0]))}

    def rate(self) -> float:
        done = [o.manipulated for o in self.outcomes if o.manipulated is not None]
        return 100.0 * sum(done) / len(done) if done else 0.0

    def to_json(self) -> dict:
        return {
            "outcomes": [o.to_json() for o in self.outcomes],
            "rate": self.rate(),
            "rate_per_layer": self.rates(lambda o: o.config.neuron.layer),
            "rate_per_epsilon": {repr(k): v for k, v in self.rates(lambda o: o.config.epsilon).items()},
            "failed": sum(o.error is not None for o in self.outcomes),
        }


def clean_baseline(model: ModelSpec, dataset: ProbingDataset, **kw) -> Baseline:
    result, _, masks = dissect(model, dataset, **kw)
    return Baseline(result, masks)


def redissect_neuron(model, dataset, neuron, baseline: Baseline) -> int | None:
    res = baseline.result
    result, _, _ = dissect(model, dataset, [neuron.layer], res.eta, None, res.floor)
    return result.concept_of(neuron)


def run_corruption_campaign(model, dataset, configs, baseline: Baseline | None = None, keep_datasets=False):
    """Attack each config on its own copy of ``dataset`` and re-dissect the neuron."""
    report = CampaignReport()
    configs = list(configs)
    if not configs:
        return report
    if baseline is None:
        baseline = clean_baseline(model, dataset)
    names = dataset.concepts.names
    for cfg in configs:
        outcome = ConfigOutcome(cfg)
        try:
            before = baseline.result.concept_of(cfg.neuron)
            outcome.baseline_concept = None if before is None else names[before]
            corrupted, records = pgd_corrupt(model, dataset, cfg, baseline)
            after = redissect_neuron(model, corrupted, cfg.neuron, baseline)
            outcome.corrupted_concept = None if after is None else names[after]
            outcome.manipulated = after != before
            outcome.poisoned = [r.index for r in records]
            outcome.records = records
            if keep_datasets:
                outcome.dataset = corrupted
        except DissectPoisonError as exc:
            outcome.error = f"{type(exc).__name__}: {exc}"
            logger.warning("config for %s failed: %s", cfg.neuron, outcome.error)
        report.outcomes.append(outcome)
    return report


def save_campaign(path, report: CampaignReport) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "campaign.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
    tensors = {}
    for k, o in enumerate(report.outcomes):
        for r in o.records:
            tensors[f"{k}/{r.index}"] = r.delta.astype(np.float32)
    save_bundle(path / "perturbations", tensors)
    return path


# --------------------------------------------------------------------------
# transformer front ends


class RandomNoise(BaseEstimator, TransformerMixin):
    """Bounded random noise on a seeded fraction of the probe images."""

    def __init__(self, kind="gaussian", level=0.02, fraction=1.0, seed=0, clamp_to_valid=True):
        self.kind = kind
        self.level = level
        self.fraction = fraction
        self.seed = seed
        self.clamp_to_valid = clamp_to_valid

    def fit(self, dataset=None, y=None):
        self.config_ = NoiseConfig(self.kind, self.level, self.fraction, self.seed, self.clamp_to_valid)
        return self

    def transform(self, dataset: ProbingDataset) -> ProbingDataset:
        if not hasattr(self, "config_"):
            self.fit()
        return add_random_noise(dataset, self.config_)


class DesignedCorruption(BaseEstimator, TransformerMixin):
    """PGD corruption against one neuron; ``fit`` dissects the clean probe set."""

    def __init__(
        self,
        model=None,
        neuron=None,
        mode="u2",
        target=None,
        epsilon=6 / 255,
        steps=40,
        step_size=None,
        mask_source="ground-truth",
        max_fraction=0.1,
        seed=0,
    ):
        self.model = model
        self.neuron = neuron
        self.mode = mode
        self.target = target
        self.epsilon = epsilon
        self.steps = steps
        self.step_size = step_size
        self.mask_source = mask_source
        self.max_fraction = max_fraction
        self.seed = seed

    def _config(self) -> CorruptionConfig:
        return CorruptionConfig(
            neuron=self.neuron,
            mode=self.mode,
            target=self.target,
            epsilon=self.epsilon,
            steps=self.steps,
            step_size=self.step_size,
            mask_source=self.mask_source,
            max_fraction=self.max_fraction,
            seed=self.seed,
        )

    def fit(self, dataset: ProbingDataset, y=None, baseline: Baseline | None = None):
        self.config_ = self._config()
        self.baseline_ = baseline if baseline is not None else clean_baseline(self.model, dataset)
        return self

    def transform(self, dataset: ProbingDataset) -> ProbingDataset:
        corrupted, self.records_ = pgd_corrupt(self.model, dataset, self.config_, self.baseline_)
        return corrupted


__all__ = [
    "Baseline",
    "CampaignReport",
    "CorruptionConfig",
    "DesignedCorruption",
    "EmptyPoisonSetError",
    "PerturbationRecord",
    "RandomNoise",
    "average_concept_activation",
    "clean_baseline",
    "concept_weights",
    "corruption_objective",
    "objective_and_grad",
    "objective_values",
    "pgd_corrupt",
    "pixel_weights_for",
    "redissect_neuron",
    "run_corruption_campaign",
    "save_campaign",
    "sign_pgd",
]
