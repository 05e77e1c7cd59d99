"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 integrity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from .corruption import (
    Baseline,
    CorruptionConfig,
    clean_baseline,
    run_corruption_campaign,
    save_campaign,
)
from .data import ConceptSet, NoiseConfig, add_random_noise, generate_synthetic_dataset, load_dataset, save_dataset
from .dissection import DEFAULT_ETA, DEFAULT_FLOOR, dissect, load_dissection, save_dissection
from .errors import ConfigurationError, DissectPoisonError, IntegrityError
from .evaluation import compare_corruptions, manipulation_rate, save_report
from .models import NeuronAddress, PlantSpec, build_planted_model, load_model, save_model

logger = logging.getLogger("dissectpoison")

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY = 0, 2, 3


def fraction(text: str) -> float:
    """Parse ``0.02`` or ``6/255``."""
    try:
        value = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or K/255 fraction: {text!r}") from None
    return float(value)


def _layers(text):
    return None if text is None else [s for s in text.split(",") if s]


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    concepts = ConceptSet.from_json(_read_json(args.concepts))
    plant_obj = _read_json(args.plant)
    plant = PlantSpec.from_json(plant_obj, concepts)
    model_seed = int(plant_obj.get("model_seed", args.seed))
    out = Path(args.out)
    ds = generate_synthetic_dataset(concepts, args.n, args.size, seed=args.seed)
    model = build_planted_model(plant, seed=model_seed)
    save_dataset(ds, out / "data")
    save_model(model, out / "model")
    with open(out / "plant.json", "w") as fh:
        json.dump({**plant.to_json(), "model_seed": model_seed}, fh, indent=1, sort_keys=True)
    print(f"wrote {len(ds)} images and a planted model to {out}")


def cmd_dissect(args):
    model = load_model(args.model)
    ds = load_dataset(args.data)
    result, _, masks = dissect(model, ds, _layers(args.layers), args.eta, None, args.floor)
    save_dissection(args.out, result, masks)
    named = sum(r.interpretable for r in result.neurons.values())
    print(f"dissected {len(result.neurons)} neurons, {named} interpretable -> {args.out}")


def cmd_noise(args):
    ds = load_dataset(args.data)
    cfg = NoiseConfig(args.kind, args.level, args.fraction, args.seed, not args.no_clamp)
    save_dataset(add_random_noise(ds, cfg), args.out)
    print(f"{args.kind} noise level {args.level:g} on {int(args.fraction * len(ds))} images -> {args.out}")


def _load_baseline(path) -> Baseline:
    result, masks = load_dissection(path)
    return Baseline(result, masks)


def cmd_corrupt(args):
    model = load_model(args.model)
    ds = load_dataset(args.data)
    baseline = _load_baseline(args.baseline)
    cfg = CorruptionConfig(
        neuron=NeuronAddress.parse(args.neuron),
        mode=args.mode,
        target=args.target,
        epsilon=args.eps,
        steps=args.steps,
        step_size=args.step_size,
        mask_source=args.mask_source,
        max_fraction=args.max_poison_frac,
        seed=args.seed,
    )
    report = run_corruption_campaign(model, ds, [cfg], baseline, keep_datasets=True)
    outcome = report.outcomes[0]
    if outcome.error is not None:
        raise ConfigurationError(outcome.error)
    out = Path(args.out)
    save_dataset(outcome.dataset, out / "data")
    save_campaign(out, report)
    print(
        f"{cfg.neuron}: {outcome.baseline_concept} -> {outcome.corrupted_concept} "
        f"({'manipulated' if outcome.manipulated else 'unchanged'}), {len(outcome.poisoned)} images poisoned"
    )


def cmd_evaluate(args):
    before, _ = load_dissection(args.baseline, with_masks=False)
    after, _ = load_dissection(args.corrupted, with_masks=False)
    report = manipulation_rate(before, after)
    save_report(args.out, report)
    print(f"manipulation rate {report.rate:.2f}% over {len(report.rows)} neurons -> {args.out}")


def cmd_compare(args):
    model = load_model(args.model)
    ds = load_dataset(args.data)
    baseline = clean_baseline(model, ds)
    if args.neurons:
        neurons = [NeuronAddress.parse(s) for s in args.neurons.split(",") if s]
    else:
        deepest = model.dissectable[-1]
        neurons = [n for n, r in baseline.result.neurons.items() if n.layer == deepest and r.interpretable]
    noise = [NoiseConfig(kind, args.level, args.fraction, args.seed) for kind in args.kinds.split(",")]
    designed = [
        CorruptionConfig(neuron=n, mode=args.mode, epsilon=args.level, max_fraction=args.fraction, seed=args.seed)
        for n in neurons
    ]
    report = compare_corruptions(model, ds, noise, designed, neurons=neurons, baseline=baseline)
    save_report(args.out, report)
    for row in report.rows:
        print(f"{row.method:9s} {row.kind:10s} {row.layer}: {row.rate:6.2f}% ({row.manipulated}/{row.neurons})")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dissectpoison", description="Neuron dissection and probe-set corruption")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset and planted model")
    p.add_argument("--concepts", required=True, help="JSON list of concepts")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plant", required=True, help="JSON plant description")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("dissect", help="assign a concept to every channel")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layers", default=None, help="comma-separated layer names (default: all dissectable)")
    p.add_argument("--eta", type=float, default=DEFAULT_ETA)
    p.add_argument("--floor", type=float, default=DEFAULT_FLOOR)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dissect)

    p = sub.add_parser("noise", help="add random noise to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("gaussian", "uniform", "bernoulli"), required=True)
    p.add_argument("--level", type=fraction, required=True)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-clamp", action="store_true", help="leave noisy pixels outside [0, 1]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("corrupt", help="PGD-corrupt the probe set against one neuron")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", required=True, help="output directory of a clean dissect run")
    p.add_argument("--neuron", required=True, help="LAYER:CHANNEL")
    p.add_argument("--mode", choices=("targeted", "u1", "u2"), default="u2")
    p.add_argument("--target", default=None)
    p.add_argument("--eps", type=fraction, default=6 / 255)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--step-size", type=fraction, default=None, help="default: eps / 10")
    p.add_argument("--mask-source", choices=("ground-truth", "baseline"), default="ground-truth")
    p.add_argument("--max-poison-frac", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("evaluate", help="compare a baseline and a corrupted dissection run")
    p.add_argument("--baseline", required=True)
    p.add_argument("--corrupted", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="random noise vs designed corruption at one level")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--level", type=fraction, default=6 / 255)
    p.add_argument("--out", required=True)
    p.add_argument("--neurons", default=None, help="LAYER:CH list (default: interpretable deepest-layer neurons)")
    p.add_argument("--kinds", default="bernoulli,gaussian,uniform")
    p.add_argument("--mode", choices=("targeted", "u1", "u2"), default="u2")
    p.add_argument("--fraction", type=float, default=0.1, help="share of images noised / poisoned")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (DissectPoisonError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
