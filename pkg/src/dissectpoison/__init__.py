"""Neuron dissection on small CNNs and corruption of the probing data it relies on."""

from .corruption import (
    Baseline,
    CorruptionConfig,
    DesignedCorruption,
    RandomNoise,
    average_concept_activation,
    corruption_objective,
    pgd_corrupt,
    run_corruption_campaign,
)
from .data import Concept, ConceptSet, NoiseConfig, ProbingDataset, add_random_noise, generate_synthetic_dataset
from .dissection import (
    IoUSimilarity,
    NetworkDissection,
    SimilarityFunction,
    assign_concept,
    compute_binary_mask,
    compute_threshold,
    derive_baseline_masks,
    dissect,
    iou_similarity,
)
from .evaluation import accuracy_impact, category_breakdown, compare_corruptions, manipulation_rate
from .models import ModelSpec, NeuronAddress, PlantedNeuron, PlantSpec, build_planted_model, classify

__version__ = "0.1.0"
