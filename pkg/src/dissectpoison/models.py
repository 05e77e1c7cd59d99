"""CNN descriptions, persistence, planted-concept construction and classification.

The planted model is a fixed three-block CNN (conv -> relu -> maxpool, three
times, then a linear head) whose filters are written down rather than trained:

* block1 holds colour matched filters, luminance edge filters and a few
  high-frequency chroma filters;
* block2 turns those into one evidence channel per concept and passes each
  high-frequency channel on twice, once linearly and once behind a gate;
* block3 holds the planted neurons, a readout channel per concept for the
  classification head, and decoys.

A planted block3 neuron adds a weak copy of the linear pass and a strong copy
of the gated pass to its concept evidence. Natural (piecewise-constant) images
never open the gate, but an L-infinity perturbation aligned with the filter
does, which mimics the non-robust features of trained networks. Lower blocks
carry no such component, so deeper planted neurons are the susceptible ones.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import load_bundle, save_bundle
from .data import BACKGROUND, ConceptSet, _paint
from .errors import (
    ConfigurationError,
    IntegrityError,
    MissingTensorError,
    ShapeMismatchError,
    UnknownLayerKindError,
)
from .tensor import Conv2d, Flatten, Linear, MaxPool2d, ReLU, forward_collect, run_layers

DETECTOR_KINDS = ("color-matched-filter", "oriented-edge", "texture-frequency")
BLOCKS = ("block1", "block2", "block3")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    layers: tuple
    dissectable: tuple
    num_classes: int
    input_shape: tuple = (3, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "dissectable", tuple(self.dissectable))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        names = [op.name for op in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError("layer names must be unique")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        convs = {op.name for op in self.layers if isinstance(op, Conv2d)}
        bad = [d for d in self.dissectable if d not in convs]
        if bad:
            raise ConfigurationError(f"dissectable layers must be conv outputs: {bad}")
        # shape check: one dummy image through the stack
        try:
            out = run_layers(self.layers, np.zeros((1, *self.input_shape), dtype=np.float32))
        except ConfigurationError as exc:
            raise ConfigurationError(f"layer shapes do not compose: {exc}") from None
        last = out[names[-1]]
        if last.size != self.num_classes:
            raise ConfigurationError(f"head produces {last.shape[1:]} outputs, expected {self.num_classes}")

    def layer(self, name):
        for op in self.layers:
            if op.name == name:
                return op
        raise ConfigurationError(f"unknown layer {name!r}")

    def channels(self, name) -> int:
        op = self.layer(name)
        if not isinstance(op, Conv2d):
            raise ConfigurationError(f"layer {name!r} is not a conv layer")
        return op.out_channels

    def neurons(self, layers=None) -> list:
        layers = self.dissectable if layers is None else layers
        return [NeuronAddress(l, c) for l in layers for c in range(self.channels(l))]

    def equals(self, other: "ModelSpec") -> bool:
        if (self.dissectable, self.num_classes, self.input_shape) != (
            other.dissectable,
            other.num_classes,
            other.input_shape,
        ) or len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind or _params(a) != _params(b):
                return False
            for attr in ("weight", "bias"):
                if hasattr(a, attr) and getattr(a, attr).tobytes() != getattr(b, attr).tobytes():
                    return False
        return True


@dataclass(frozen=True, order=True)
class NeuronAddress:
    layer: str
    channel: int

    def __str__(self):
        return f"{self.layer}:{self.channel}"

    @classmethod
    def parse(cls, text: str) -> "NeuronAddress":
        layer, sep, ch = str(text).rpartition(":")
        if not sep or not layer:
            raise ConfigurationError(f"neuron must look like LAYER:CHANNEL, got {text!r}")
        try:
            return cls(layer, int(ch))
        except ValueError:
            raise ConfigurationError(f"bad channel in {text!r}") from None


@dataclass(frozen=True)
class PlantedNeuron:
    address: NeuronAddress
    concept: str
    detector: str = ""


@dataclass(frozen=True)
class PlantSpec:
    concepts: ConceptSet
    planted: tuple = ()
    decoys: int | None = None  # None: every free channel is a decoy
    weight_noise: float = 0.05
    widths: tuple = (16, 16, 24)
    sensitivity: float = 3.0  # gain of the gated high-frequency input of block3 planted neurons

    def __post_init__(self):
        planted = tuple(self.planted)
        object.__setattr__(self, "planted", planted)
        addrs = [p.address for p in planted]
        if len(set(addrs)) != len(addrs):
            raise ConfigurationError("planted addresses must be distinct")
        for p in planted:
            if p.address.layer not in BLOCKS:
                raise ConfigurationError(f"cannot plant into unknown layer {p.address.layer!r}")
            if p.concept not in self.concepts.names:
                raise ConfigurationError(f"planted concept {p.concept!r} is not in the concept set")
            if p.detector and p.detector not in DETECTOR_KINDS:
                raise ConfigurationError(f"unknown detector kind {p.detector!r}")
        if self.weight_noise < 0:
            raise ConfigurationError("weight_noise must be >= 0")

    def to_json(self) -> dict:
        return {
            "planted": [
                {"layer": p.address.layer, "channel": p.address.channel, "concept": p.concept, "detector": p.detector}
                for p in self.planted
            ],
            "decoys": self.decoys,
            "weight_noise": self.weight_noise,
            "widths": list(self.widths),
            "sensitivity": self.sensitivity,
        }

    @classmethod
    def from_json(cls, obj: dict, concepts: ConceptSet) -> "PlantSpec":
        planted = tuple(
            PlantedNeuron(NeuronAddress(p["layer"], int(p["channel"])), p["concept"], p.get("detector", ""))
            for p in obj.get("planted", [])
        )
        return cls(
            concepts=concepts,
            planted=planted,
            decoys=obj.get("decoys"),
            weight_noise=float(obj.get("weight_noise", 0.05)),
            widths=tuple(obj.get("widths", (16, 16, 24))),
            sensitivity=float(obj.get("sensitivity", 3.0)),
        )


# --------------------------------------------------------------------------
# planted construction

_K1 = 5  # block1 kernel; 5x5 so the high-frequency filters fit
_COLOR_GATE = 0.6
_EDGE_GATE = 0.55
_EVIDENCE_GATE = 0.3
_HF_OFFSET = 2.0
_HF_GATE = 1.6  # clean corners of the reference colours peak at 1.4
_HF_LEAK = 0.05
_HF_AXES = ((1.0, -1.0, 0.0), (0.0, 1.0, -1.0), (1.0, 0.0, -1.0))
# zero row and column sums; prefix sums are +-1 so straight edges give nothing
# and rectangle corners give at most one unit of contrast
_HF_1D = np.array([1.0, -2.0, 2.0, -2.0, 1.0])
_HF = np.outer(_HF_1D, _HF_1D)


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class _Allocator:
    """Hands out channel slots of one layer, planted addresses first."""

    def __init__(self, layer, width, reserved):
        self.layer, self.width = layer, width
        self.free = [c for c in range(width) if c not in reserved]

    def take(self, what):
        if not self.free:
            raise ConfigurationError(f"layer {self.layer!r} has too few channels ({self.width}) for {what}")
        return self.free.pop(0)


def _hf_axis(concept, bg) -> int:
    """Index of the chroma axis least moved by the concept's colour."""
    color = np.asarray(concept.appearance.get("color", bg), dtype=np.float64) - bg
    return int(np.argmin([abs(np.dot(a, color)) for a in _HF_AXES]))


def _unit(vec):
    vec = np.asarray(vec, dtype=np.float64)
    return vec / max(float(vec @ vec), 1e-12)


def build_planted_model(plant: PlantSpec, seed: int = 0) -> ModelSpec:
    """Write down a 3-block CNN whose planted channels detect their concepts.

    Planted filters depend only on ``plant``; ``seed`` drives the decoy
    channels alone.
    """
    concepts = plant.concepts
    k = len(concepts)
    widths = tuple(int(w) for w in plant.widths)
    if len(widths) != 3:
        raise ConfigurationError("widths must list three block widths")
    by_layer = {b: {} for b in BLOCKS}
    for p in plant.planted:
        if p.address.channel >= widths[BLOCKS.index(p.address.layer)] or p.address.channel < 0:
            raise ConfigurationError(
                f"plant references {p.address} but {p.address.layer} has only "
                f"{widths[BLOCKS.index(p.address.layer)]} channels"
            )
        by_layer[p.address.layer][p.address.channel] = concepts.id_of(p.concept)

    rng = np.random.default_rng(seed)
    c1, c2, c3 = widths
    w1 = np.zeros((c1, 3, _K1, _K1))
    b1 = np.zeros(c1)
    w2 = np.zeros((c2, c1, 3, 3))
    b2 = np.zeros(c2)
    w3 = np.zeros((c3, c2, 3, 3))
    b3 = np.zeros(c3)
    head_w = np.zeros((k, c3 * 16))
    head_b = np.zeros(k)
    used = [set(), set(), set()]
    bg = np.asarray(BACKGROUND)

    if plant.planted:
        a1 = _Allocator("block1", c1, by_layer["block1"])
        a2 = _Allocator("block2", c2, by_layer["block2"])
        a3 = _Allocator("block3", c3, by_layer["block3"])
        planted1 = {cid: ch for ch, cid in by_layer["block1"].items()}
        planted2 = {cid: ch for ch, cid in by_layer["block2"].items()}

        # ---- block1: colour matched filters (centre tap of the 5x5 kernel)
        box = np.zeros((_K1, _K1))
        box[2, 2] = 1.0
        color_ch = {}
        for c in concepts:
            if c.appearance.get("kind", "solid") != "solid":
                continue
            ch = planted1.get(c.id)
            if ch is None:
                ch = a1.take(f"colour filter {c.name}")
            w = _unit(np.asarray(c.appearance["color"]) - bg)
            w1[ch] = w[:, None, None] * box
            b1[ch] = -float(w @ bg) - _COLOR_GATE
            color_ch[c.id] = ch
            used[0].add(ch)

        # ---- block1: luminance edges; two-tap derivatives so each 2x2 pool
        # window of a period-4 texture sees exactly one transition
        lum = np.full(3, 1.0 / 3.0)
        deriv = {
            "ey": {(2, 2): 1.0, (3, 2): -1.0},
            "ex": {(2, 2): 1.0, (2, 3): -1.0},
            "exy": {(2, 2): 0.5, (2, 3): -0.5, (3, 2): -0.5, (3, 3): 0.5},
        }
        edge_ch = {}
        texture_kind = {"stripes": "ey", "bars": "ex", "checker": "exy"}
        planted_edge = {}
        for cid, ch in planted1.items():
            kind = concepts[cid].appearance.get("kind", "solid")
            if kind in texture_kind:
                planted_edge.setdefault((texture_kind[kind], 1.0), ch)
        for name, taps in deriv.items():
            for sign in (1.0, -1.0):
                ch = planted_edge.get((name, sign))
                if ch is None:
                    ch = a1.take(f"edge filter {name}")
                for (dy, dx), v in taps.items():
                    w1[ch, :, dy, dx] = sign * v * lum
                b1[ch] = -_EDGE_GATE
                edge_ch[(name, sign)] = ch
                used[0].add(ch)

        # ---- block1: high-frequency chroma filters, biased open so their
        # gradient reaches the input; each planted block3 neuron uses an axis
        # its own colour does not move, so its own patch corners stay quiet
        axis_of = {c.id: _hf_axis(c, bg) for c in concepts}
        hf_ch = {}
        for axis in sorted(set(axis_of.values())):
            if not any(axis_of[cid] == axis for cid in by_layer["block3"].values()):
                continue
            ch = a1.take("high-frequency channel")
            w1[ch] = np.asarray(_HF_AXES[axis])[:, None, None] * _HF
            b1[ch] = _HF_OFFSET
            hf_ch[axis] = ch
            used[0].add(ch)

        # ---- block2: per-concept evidence, calibrated to 1 inside the concept
        mean3 = np.full((3, 3), 1.0 / 9.0)
        evid_ch = {}
        for c in concepts:
            ch = planted2.get(c.id)
            if ch is None:
                ch = a2.take(f"evidence {c.name}")
            kind = c.appearance.get("kind", "solid")
            if kind == "solid":
                w2[ch, color_ch[c.id]] = mean3
            else:
                # checker fires the row and column derivatives too, so only
                # the single-orientation textures subtract the others
                own = texture_kind[kind]
                for name in deriv:
                    sgn = 1.0 if name == own else (0.0 if own == "exy" else -1.0)
                    for sign in (1.0, -1.0):
                        w2[ch, edge_ch[(name, sign)]] = sgn * mean3
            evid_ch[c.id] = ch
            used[1].add(ch)
        # two pass-throughs per filter: a linear one (open on clean images,
        # value 1 on flat regions) and a steep one gated above every clean
        # corner response
        lin_ch, steep_ch = {}, {}
        for axis, src in hf_ch.items():
            ch = lin_ch[axis] = a2.take("high-frequency linear pass")
            w2[ch, src, 1, 1] = 1.0
            b2[ch] = 1.0 - _HF_OFFSET
            ch = steep_ch[axis] = a2.take("high-frequency gated pass")
            w2[ch, src, 1, 1] = 1.0
            b2[ch] = -_HF_OFFSET - _HF_GATE
            used[1].update((lin_ch[axis], steep_ch[axis]))

        partial = _assemble(w1, b1, w2, b2, w3, b3, head_w, head_b, widths, k, upto="relu2")
        interior = _calibrate(partial, concepts, [evid_ch[c.id] for c in concepts], "relu1", "block2")
        for c in concepts:
            ch = evid_ch[c.id]
            scale = (1.0 + _EVIDENCE_GATE) / interior[c.id]
            w2[ch] *= scale
            b2[ch] = -_EVIDENCE_GATE

        # ---- block3: planted neurons and readouts
        # interior evidence is 1 after block2, so 2 * evidence - 1 maps concept
        # interiors to +1 and everything else to -1
        for ch, cid in sorted(by_layer["block3"].items()):
            w3[ch, evid_ch[cid], 1, 1] = 2.0
            b3[ch] = -1.0
            axis = axis_of[cid]
            w3[ch, lin_ch[axis], 1, 1] = _HF_LEAK
            b3[ch] -= _HF_LEAK
            w3[ch, steep_ch[axis], 1, 1] = plant.sensitivity
            used[2].add(ch)
        readout = {}
        for c in concepts:
            ch = a3.take(f"readout {c.name}")
            w3[ch, evid_ch[c.id]] = mean3
            readout[c.id] = ch
            used[2].add(ch)
        for cid, ch in readout.items():
            head_w[cid, ch * 16 : (ch + 1) * 16] = 1.0

    # ---- decoys: random filters on every channel not claimed above
    noise = plant.weight_noise
    budget = plant.decoys
    for layer_i, (w, b) in enumerate(((w1, b1), (w2, b2), (w3, b3))):
        for ch in range(w.shape[0]):
            if ch in used[layer_i] or ch in by_layer[BLOCKS[layer_i]]:
                continue
            if budget is not None:
                if budget <= 0:
                    continue
                budget -= 1
            w[ch] = _decoy_filter(rng, noise, w[ch].shape, first=layer_i == 0)
    if not plant.planted:
        head_w[:] = rng.normal(0.0, noise, size=head_w.shape)

    return _assemble(w1, b1, w2, b2, w3, b3, head_w, head_b, widths, k)


def _decoy_filter(rng, noise, shape, first):
    """Gaussian filter with zero row and column sums in every input channel.

    Such a filter ignores flat regions and straight edges, so on clean
    piecewise-constant images it only reacts near region corners, where most
    of the window is background. In block1 it also ignores luminance.
    """
    w = rng.normal(0.0, noise, size=shape)
    w = w - w.mean(axis=-1, keepdims=True) - w.mean(axis=-2, keepdims=True) + w.mean(axis=(-2, -1), keepdims=True)
    if first:
        w -= w.mean(axis=0, keepdims=True)
    return w


def _assemble(w1, b1, w2, b2, w3, b3, head_w, head_b, widths, k, upto=None) -> ModelSpec:
    layers = [
        Conv2d("block1", w1, b1, stride=1, padding=_K1 // 2),
        ReLU("relu1"),
        MaxPool2d("pool1", 2, 2),
        Conv2d("block2", w2, b2, stride=1, padding=1),
        ReLU("relu2"),
        MaxPool2d("pool2", 2, 2),
        Conv2d("block3", w3, b3, stride=1, padding=1),
        ReLU("relu3"),
        MaxPool2d("pool3", 2, 2),
        Flatten("flatten"),
        Linear("head", head_w, head_b),
    ]
    if upto is not None:
        return _Partial(layers)
    return ModelSpec(tuple(layers), BLOCKS, k, (3, 32, 32))


@dataclass
class _Partial:
    layers: list


def _calibrate(partial, concepts: ConceptSet, channels, *_):
    """Interior response of each evidence channel on a full-frame patch of its concept."""
    imgs = np.stack([_paint(c, 32, 32, 0, 0) for c in concepts]).astype(np.float32)
    out = run_layers(partial.layers[:4], imgs)["block2"]
    vals = []
    for i, ch in enumerate(channels):
        centre = out[i, ch, 4:12, 4:12]
        vals.append(float(np.median(centre)))
    vals = np.asarray(vals)
    if np.any(vals <= 0):
        bad = [concepts[i].name for i in np.flatnonzero(vals <= 0)]
        raise ConfigurationError(f"no evidence response for concept(s) {bad}")
    return vals


# --------------------------------------------------------------------------
# classification


def classify(model: ModelSpec, batch: np.ndarray) -> list:
    """Arg-max class per image; ties go to the lower class index."""
    _, logits, _ = forward_collect(model, batch)
    return [int(i) for i in np.argmax(logits.reshape(len(logits), -1), axis=1)]


def predict_logits(model: ModelSpec, batch: np.ndarray) -> np.ndarray:
    logits = forward_collect(model, batch)[1]
    return logits.reshape(len(logits), -1)


# --------------------------------------------------------------------------
# persistence

_KINDS = {"conv2d", "relu", "maxpool", "flatten", "linear"}


def _params(op) -> dict:
    if isinstance(op, Conv2d):
        return {"stride": op.stride, "padding": op.padding, "weight_shape": list(op.weight.shape)}
    if isinstance(op, MaxPool2d):
        return {"kernel": op.kernel, "stride": op.stride}
    if isinstance(op, Linear):
        return {"weight_shape": list(op.weight.shape)}
    return {}


def save_model(model: ModelSpec, path) -> Path:
    path = Path(path)
    tensors = {}
    layers = []
    for op in model.layers:
        layers.append({"name": op.name, "kind": op.kind, "params": _params(op)})
        if isinstance(op, (Conv2d, Linear)):
            tensors[f"{op.name}.weight"] = op.weight
            tensors[f"{op.name}.bias"] = op.bias
    save_bundle(path, tensors)
    arch = {
        "layers": layers,
        "dissectable": list(model.dissectable),
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
    }
    with open(path / "model.json", "w") as fh:
        json.dump(arch, fh, indent=1, sort_keys=True)
    return path


def load_model(path) -> ModelSpec:
    path = Path(path)
    try:
        with open(path / "model.json") as fh:
            arch = json.load(fh)
    except FileNotFoundError:
        raise IntegrityError(f"{path} has no model.json") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}/model.json is not valid JSON: {exc}") from None
    for key in ("layers", "dissectable", "num_classes", "input_shape"):
        if key not in arch:
            raise IntegrityError(f"model.json lacks {key!r}")
    for spec in arch["layers"]:
        if spec.get("kind") not in _KINDS:
            raise UnknownLayerKindError(f"unknown layer kind {spec.get('kind')!r} in layer {spec.get('name')!r}")
    needed = [
        f"{s['name']}.{t}" for s in arch["layers"] if s["kind"] in ("conv2d", "linear") for t in ("weight", "bias")
    ]
    tensors = load_bundle(path, needed) if needed else {}
    layers = []
    for spec in arch["layers"]:
        name, kind, params = spec["name"], spec["kind"], spec.get("params", {})
        if kind in ("conv2d", "linear"):
            weight, bias = tensors[f"{name}.weight"], tensors[f"{name}.bias"]
            declared = params.get("weight_shape")
            if declared is not None and list(weight.shape) != list(declared):
                raise ShapeMismatchError(f"{name}.weight has shape {list(weight.shape)}, model.json says {declared}")
            if bias.shape != (weight.shape[0],):
                raise ShapeMismatchError(f"{name}.bias has shape {list(bias.shape)}, expected [{weight.shape[0]}]")
        try:
            if kind == "conv2d":
                if weight.ndim != 4:
                    raise ShapeMismatchError(f"{name}.weight must be 4-d")
                layers.append(Conv2d(name, weight, bias, int(params.get("stride", 1)), int(params.get("padding", 0))))
            elif kind == "linear":
                if weight.ndim != 2:
                    raise ShapeMismatchError(f"{name}.weight must be 2-d")
                layers.append(Linear(name, weight, bias))
            elif kind == "relu":
                layers.append(ReLU(name))
            elif kind == "maxpool":
                layers.append(MaxPool2d(name, int(params.get("kernel", 2)), int(params.get("stride", 2))))
            else:
                layers.append(Flatten(name))
        except ConfigurationError as exc:
            raise ShapeMismatchError(str(exc)) from None
    try:
        return ModelSpec(tuple(layers), tuple(arch["dissectable"]), int(arch["num_classes"]), tuple(arch["input_shape"]))
    except ConfigurationError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from None


__all__ = [
    "ModelSpec",
    "NeuronAddress",
    "PlantedNeuron",
    "PlantSpec",
    "build_planted_model",
    "classify",
    "predict_logits",
    "save_model",
    "load_model",
    "MissingTensorError",
]
