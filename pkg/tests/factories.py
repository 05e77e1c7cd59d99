"""Random models and masks for property tests."""

import numpy as np

from dissectpoison.models import ModelSpec
from dissectpoison.tensor import Conv2d, Flatten, Linear, MaxPool2d, ReLU, Tape, run_layers


def random_model(rng, size=16, widths=(4, 5, 6), classes=3, scale=0.4):
    c1, c2, c3 = widths
    final = size // 4
    layers = [
        Conv2d("block1", rng.normal(0, scale, (c1, 3, 3, 3)), rng.normal(0, 0.1, c1), 1, 1),
        ReLU("relu1"),
        MaxPool2d("pool1", 2, 2),
        Conv2d("block2", rng.normal(0, scale, (c2, c1, 3, 3)), rng.normal(0, 0.1, c2), 1, 1),
        ReLU("relu2"),
        MaxPool2d("pool2", 2, 2),
        Conv2d("block3", rng.normal(0, scale, (c3, c2, 3, 3)), rng.normal(0, 0.1, c3), 1, 1),
        ReLU("relu3"),
        Flatten("flatten"),
        Linear("head", rng.normal(0, scale, (classes, c3 * final * final)), np.zeros(classes)),
    ]
    return ModelSpec(tuple(layers), ("block1", "block2", "block3"), classes, (3, size, size))


def random_rect_mask(rng, size, min_side=3):
    mask = np.zeros((size, size), dtype=np.uint8)
    h, w = rng.integers(min_side, size // 2 + 1, size=2)
    y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    mask[y : y + h, x : x + w] = 1
    return mask


def _pattern(model, neuron, x):
    """ReLU signs and pooling winners in float64; equal patterns mean the same linear piece."""
    ops = model.layers[: [op.name for op in model.layers].index(neuron.layer) + 1]
    tape = Tape(batch=x, ops=tuple(ops))
    run_layers(ops, x, dtype=np.float64, tape=tape)
    return [a for a in tape.aux if a is not None]


def same_linear_piece(model, neuron, x, coord, h):
    base = _pattern(model, neuron, x)
    for step in (h, -h):
        xs = x.copy().reshape(-1)
        xs[coord] += step
        other = _pattern(model, neuron, xs.reshape(x.shape))
        if not all(np.array_equal(a, b) for a, b in zip(base, other)):
            return False
    return True
