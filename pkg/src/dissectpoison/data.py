"""Probing datasets: images with exact per-concept segmentation masks.

Includes the synthetic planted-concept generator, bounded random-noise
corruption and the poison-subset selection rule.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bundle import load_bundle, save_bundle
from .errors import ConfigurationError, EmptyPoisonSetError, IntegrityError

logger = logging.getLogger(__name__)

CATEGORIES = ("color", "texture", "object", "part", "scene", "material")
BACKGROUND = (0.5, 0.5, 0.5)

#: appearance kind -> detector kind used when a concept is planted
DETECTOR_FOR_APPEARANCE = {
    "solid": "color-matched-filter",
    "stripes": "oriented-edge",
    "bars": "oriented-edge",
    "checker": "texture-frequency",
}


@dataclass(frozen=True)
class Concept:
    id: int
    name: str
    category: str
    appearance: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def detector(self) -> str:
        return DETECTOR_FOR_APPEARANCE[self.appearance.get("kind", "solid")]


@dataclass(frozen=True)
class ConceptSet:
    concepts: tuple

    def __post_init__(self):
        concepts = tuple(self.concepts)
        object.__setattr__(self, "concepts", concepts)
        if not concepts:
            raise ConfigurationError("concept set is empty")
        if [c.id for c in concepts] != list(range(len(concepts))):
            raise ConfigurationError("concept ids must be dense 0..K-1 in order")
        names = [c.name for c in concepts]
        if len(set(names)) != len(names):
            raise ConfigurationError("concept names must be unique")
        for c in concepts:
            if c.category not in CATEGORIES:
                raise ConfigurationError(f"concept {c.name!r}: unknown category {c.category!r}")
            kind = c.appearance.get("kind", "solid")
            if kind not in DETECTOR_FOR_APPEARANCE:
                raise ConfigurationError(f"concept {c.name!r}: unknown appearance {kind!r}")

    def __len__(self):
        return len(self.concepts)

    def __iter__(self):
        return iter(self.concepts)

    def __getitem__(self, i) -> Concept:
        return self.concepts[i]

    @property
    def names(self) -> list:
        return [c.name for c in self.concepts]

    def id_of(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= int(name) < len(self):
                raise ConfigurationError(f"concept id {name} out of range")
            return int(name)
        for c in self.concepts:
            if c.name == name:
                return c.id
        raise ConfigurationError(f"unknown concept {name!r}")

    def to_json(self) -> list:
        return [
            {"id": c.id, "name": c.name, "category": c.category, "appearance": c.appearance}
            for c in self.concepts
        ]

    @classmethod
    def from_json(cls, items) -> "ConceptSet":
        if isinstance(items, dict):
            items = items["concepts"]
        concepts = []
        for i, item in enumerate(items):
            concepts.append(
                Concept(
                    id=int(item.get("id", i)),
                    name=item["name"],
                    category=item.get("category", "color"),
                    appearance=dict(item.get("appearance", {})),
                )
            )
        return cls(tuple(concepts))


@dataclass(frozen=True, eq=False)
class ProbingDataset:
    """Images (N x 3 x H x W in [0, 1]), labels, and N x K x H x W u8 concept masks."""

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    concepts: ConceptSet
    provenance: dict = field(default_factory=dict)
    # unclamped noise experiments may leave [0, 1]; everything else is checked
    check_range: bool = field(default=True, repr=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int32)
        masks = np.asarray(self.masks, dtype=np.uint8)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "masks", masks)
        if images.ndim != 4 or images.shape[1] != 3:
            raise IntegrityError(f"images must be N x 3 x H x W, got {images.shape}")
        n, _, h, w = images.shape
        if labels.shape != (n,):
            raise IntegrityError(f"labels shape {labels.shape} does not match N={n}")
        if masks.shape != (n, len(self.concepts), h, w):
            raise IntegrityError(
                f"masks shape {masks.shape} does not match (N, K, H, W)={(n, len(self.concepts), h, w)}"
            )
        if masks.size and masks.max() > 1:
            raise IntegrityError("mask values must be 0 or 1")
        if not np.all(np.isfinite(images)):
            raise IntegrityError("pixel values must be finite")
        if self.check_range and images.size and (images.min() < 0 or images.max() > 1):
            raise IntegrityError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple:
        return self.images.shape[2:]

    def presence(self) -> np.ndarray:
        """N x K boolean: does concept k appear in image n."""
        return self.masks.reshape(len(self), len(self.concepts), -1).any(axis=2)

    def with_images(self, images: np.ndarray, log_entry: dict | None = None, check_range=True) -> "ProbingDataset":
        prov = json.loads(json.dumps(self.provenance))
        if log_entry is not None:
            prov.setdefault("corruption_log", []).append(log_entry)
        return replace(self, images=images, provenance=prov, check_range=check_range)

    def equals(self, other: "ProbingDataset") -> bool:
        return (
            self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.masks, other.masks)
            and self.concepts.to_json() == other.concepts.to_json()
        )


# --------------------------------------------------------------------------
# synthetic generation

_REGION_COUNT_P = (0.3, 0.45, 0.25)
_DOMINANT_SIDE = (13, 16)
_MINOR_SIDE = (7, 10)


def _paint(concept: Concept, h: int, w: int, phase_y: int, phase_x: int) -> np.ndarray:
    """3 x h x w pixel block for a concept region."""
    app = concept.appearance
    kind = app.get("kind", "solid")
    if kind == "solid":
        color = np.asarray(app.get("color", (1.0, 0.0, 0.0)), dtype=np.float64)
        return np.broadcast_to(color[:, None, None], (3, h, w)).copy()
    light = np.asarray(app.get("light", (0.8, 0.8, 0.8)), dtype=np.float64)
    dark = np.asarray(app.get("dark", (0.2, 0.2, 0.2)), dtype=np.float64)
    half = int(app.get("period", 4)) // 2
    yy = (np.arange(h)[:, None] + phase_y) // half % 2
    xx = (np.arange(w)[None, :] + phase_x) // half % 2
    if kind == "stripes":
        sel = np.broadcast_to(yy, (h, w))
    elif kind == "bars":
        sel = np.broadcast_to(xx, (h, w))
    else:  # checker
        sel = (yy + xx) % 2
    return np.where(sel[None] == 0, light[:, None, None], dark[:, None, None])


def _place(rng, size, side, taken):
    h_img, w_img = size
    for _ in range(60):
        h = int(rng.integers(side[0], side[1] + 1))
        w = int(rng.integers(side[0], side[1] + 1))
        if h > h_img or w > w_img:
            return None
        y = int(rng.integers(0, h_img - h + 1))
        x = int(rng.integers(0, w_img - w + 1))
        # keep a one-pixel gap of background between regions
        if all(y + h + 1 <= ty or ty + th + 1 <= y or x + w + 1 <= tx or tx + tw + 1 <= x for ty, tx, th, tw in taken):
            return y, x, h, w
    return None


def generate_synthetic_dataset(concepts: ConceptSet, n: int, image_size=32, seed: int = 0) -> ProbingDataset:
    """Compose 1-3 concept regions per image on a neutral background.

    The first region is the large "dominant" one and fixes the label; the
    masks are exactly the painted pixels. Each image draws from its own RNG
    stream keyed on ``(seed, index)``.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if not len(concepts):
        raise ConfigurationError("concept set is empty")
    size = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    if min(size) < _DOMINANT_SIDE[0]:
        raise ConfigurationError(f"image size {size} too small for a {_DOMINANT_SIDE[0]}px concept region")
    k = len(concepts)
    images = np.empty((n, 3, *size), dtype=np.float32)
    masks = np.zeros((n, k, *size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int32)
    bg = np.asarray(BACKGROUND, dtype=np.float64)[:, None, None]
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        count = min(k, int(rng.choice(3, p=_REGION_COUNT_P)) + 1)
        chosen = rng.choice(k, size=count, replace=False)
        canvas = np.broadcast_to(bg, (3, *size)).copy()
        taken = []
        for j, cid in enumerate(chosen):
            box = _place(rng, size, _DOMINANT_SIDE if j == 0 else _MINOR_SIDE, taken)
            if box is None:
                if j == 0:
                    raise ConfigurationError(f"image size {size} too small for requested regions")
                continue
            y, x, h, w = box
            taken.append(box)
            canvas[:, y : y + h, x : x + w] = _paint(
                concepts[int(cid)], h, w, int(rng.integers(0, 4)), int(rng.integers(0, 4))
            )
            masks[i, int(cid), y : y + h, x : x + w] = 1
        images[i] = canvas
        areas = masks[i].reshape(k, -1).sum(axis=1)
        labels[i] = int(np.argmax(areas))
    prov = {"generator": "synthetic", "seed": int(seed), "n": int(n), "image_size": list(size), "corruption_log": []}
    return ProbingDataset(images, labels, masks, concepts, prov)


# --------------------------------------------------------------------------
# random noise


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "gaussian"
    level: float = 0.02
    fraction: float = 1.0
    seed: int = 0
    clamp_to_valid: bool = True

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "bernoulli"):
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if not self.level >= 0:
            raise ConfigurationError("noise level must be >= 0")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigurationError("noise fraction must lie in [0, 1]")


def sample_noise(kind: str, level: float, shape, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean noise with standard deviation ``level`` (float64)."""
    if kind == "gaussian":
        return rng.normal(0.0, level, size=shape)
    if kind == "uniform":
        a = level * np.sqrt(3.0)
        return rng.uniform(-a, a, size=shape)
    if kind == "bernoulli":
        return np.where(rng.random(size=shape) < 0.5, -level, level)
    raise ConfigurationError(f"unknown noise kind {kind!r}")


def add_random_noise(ds: ProbingDataset, cfg: NoiseConfig) -> ProbingDataset:
    """Add noise to ``floor(fraction * N)`` images chosen uniformly by seed."""
    n = len(ds)
    count = int(np.floor(cfg.fraction * n))
    rng = np.random.default_rng(cfg.seed)
    chosen = np.sort(rng.choice(n, size=count, replace=False)) if count else np.array([], dtype=int)
    images = ds.images.copy()
    if cfg.level > 0:
        for i in chosen:
            noise = sample_noise(cfg.kind, cfg.level, images.shape[1:], np.random.default_rng([cfg.seed, int(i)]))
            noisy = images[i].astype(np.float64) + noise
            if cfg.clamp_to_valid:
                noisy = np.clip(noisy, 0.0, 1.0)
            images[i] = noisy.astype(np.float32)
    entry = {
        "type": "random_noise",
        "kind": cfg.kind,
        "level": float(cfg.level),
        "fraction": float(cfg.fraction),
        "seed": int(cfg.seed),
        "clamp_to_valid": bool(cfg.clamp_to_valid),
        "indices": [int(i) for i in chosen],
    }
    return ds.with_images(images, entry, check_range=cfg.clamp_to_valid)


def select_poison_subset(
    ds: ProbingDataset,
    source,
    target=None,
    max_fraction: float = 0.1,
    seed: int = 0,
    presence: np.ndarray | None = None,
) -> list:
    """Indices of images to poison, sorted ascending.

    Images carrying the source concept are eligible (in targeted mode images
    carrying the target are eligible too). When more than
    ``floor(max_fraction * N)`` qualify, a seeded uniform subset is kept.
    ``presence`` overrides the ground-truth N x K presence table, e.g. with
    masks derived from a baseline run.
    """
    if not 0.0 < max_fraction <= 1.0:
        raise ConfigurationError("max_fraction must lie in (0, 1]")
    if presence is None:
        presence = ds.presence()
    src = ds.concepts.id_of(source)
    eligible = presence[:, src].copy()
    if not eligible.any():
        raise EmptyPoisonSetError(f"concept {ds.concepts[src].name!r} is absent from every image")
    if target is not None:
        eligible |= presence[:, ds.concepts.id_of(target)]
    idx = np.flatnonzero(eligible)
    cap = int(np.floor(max_fraction * len(ds)))
    if len(idx) > cap:
        idx = np.random.default_rng(seed).choice(idx, size=cap, replace=False)
    return sorted(int(i) for i in idx)


# --------------------------------------------------------------------------
# persistence


def save_dataset(ds: ProbingDataset, path) -> Path:
    path = Path(path)
    save_bundle(path, {"images": ds.images, "labels": ds.labels, "masks": ds.masks})
    with open(path / "concepts.json", "w") as fh:
        json.dump(ds.concepts.to_json(), fh, indent=1, sort_keys=True)
    with open(path / "provenance.json", "w") as fh:
        json.dump(ds.provenance, fh, indent=1, sort_keys=True)
    return path


def load_dataset(path) -> ProbingDataset:
    path = Path(path)
    tensors = load_bundle(path, ["images", "labels", "masks"])
    try:
        with open(path / "concepts.json") as fh:
            concepts = ConceptSet.from_json(json.load(fh))
        with open(path / "provenance.json") as fh:
            provenance = json.load(fh)
    except FileNotFoundError as exc:
        raise IntegrityError(f"{path}: missing {Path(exc.filename).name}") from None
    except ConfigurationError as exc:
        raise IntegrityError(f"{path}: bad concepts.json: {exc}") from None
    images, masks = tensors["images"], tensors["masks"]
    if masks.ndim != 4 or images.ndim != 4 or masks.shape[2:] != images.shape[2:] or masks.shape[0] != images.shape[0]:
        raise IntegrityError(f"{path}: mask shape {masks.shape} does not match images {images.shape}")
    return ProbingDataset(images, tensors["labels"], masks, concepts, provenance)
