"""The frozen reference scenario: 8 concepts, a planted model and a 400-image probe set."""

from __future__ import annotations

import json
from pathlib import Path

from .data import Concept, ConceptSet, generate_synthetic_dataset
from .models import NeuronAddress, PlantedNeuron, PlantSpec, build_planted_model

DATASET_SEED = 42
MODEL_SEED = 1
N_IMAGES = 400
IMAGE_SIZE = 32
DEEPEST = "block3"

_TEXTURE = {"light": [0.9, 0.9, 0.9], "dark": [0.1, 0.1, 0.1], "period": 4}


def reference_concepts() -> ConceptSet:
    return ConceptSet(
        (
            Concept(0, "red", "color", {"kind": "solid", "color": [0.9, 0.2, 0.2]}),
            Concept(1, "green", "color", {"kind": "solid", "color": [0.2, 0.85, 0.2]}),
            Concept(2, "blue", "color", {"kind": "solid", "color": [0.2, 0.2, 0.9]}),
            Concept(3, "stripes", "texture", {"kind": "stripes", **_TEXTURE}),
            Concept(4, "checker", "texture", {"kind": "checker", **_TEXTURE}),
            Concept(5, "fence", "object", {"kind": "bars", **_TEXTURE}),
            Concept(6, "sun", "object", {"kind": "solid", "color": [0.9, 0.9, 0.2]}),
            Concept(7, "water", "scene", {"kind": "solid", "color": [0.2, 0.8, 0.8]}),
        )
    )


def reference_plant(concepts: ConceptSet | None = None) -> PlantSpec:
    concepts = reference_concepts() if concepts is None else concepts
    planted = [PlantedNeuron(NeuronAddress(DEEPEST, c.id), c.name, c.detector) for c in concepts]
    planted += [
        PlantedNeuron(NeuronAddress("block2", 0), "stripes", "oriented-edge"),
        PlantedNeuron(NeuronAddress("block2", 1), "checker", "texture-frequency"),
        PlantedNeuron(NeuronAddress("block2", 2), "fence", "oriented-edge"),
        PlantedNeuron(NeuronAddress("block1", 0), "red", "color-matched-filter"),
        PlantedNeuron(NeuronAddress("block1", 1), "green", "color-matched-filter"),
    ]
    return PlantSpec(concepts=concepts, planted=tuple(planted))


def reference_model():
    return build_planted_model(reference_plant(), seed=MODEL_SEED)


def reference_dataset():
    return generate_synthetic_dataset(reference_concepts(), N_IMAGES, IMAGE_SIZE, seed=DATASET_SEED)


def planted_addresses(plant: PlantSpec | None = None, layer: str | None = DEEPEST) -> list:
    plant = reference_plant() if plant is None else plant
    return [p.address for p in plant.planted if layer is None or p.address.layer == layer]


def write_reference_files(directory) -> tuple:
    """Write ``concepts.json`` and ``plant.json`` usable with the ``gen`` command."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    concepts = reference_concepts()
    with open(directory / "concepts.json", "w") as fh:
        json.dump(concepts.to_json(), fh, indent=1, sort_keys=True)
    with open(directory / "plant.json", "w") as fh:
        json.dump({**reference_plant(concepts).to_json(), "model_seed": MODEL_SEED}, fh, indent=1, sort_keys=True)
    return directory / "concepts.json", directory / "plant.json"
