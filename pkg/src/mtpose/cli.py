"""Command-line interface: dataset generation, training, and the studies.

All experiment subcommands read an optional JSON config (keys matching
PipelineConfig field names) and write a `results.csv`; flags override
config-file values.  Exit status is 0 on success and 1 if any repeat in
any group aborted (the CSV is still written with the completed rows).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from . import cnn, harness, lrr, synth
from .exceptions import MtposeError
from .harness import PipelineConfig, config_from_dict

log = logging.getLogger(__name__)


def _load_config(args) -> PipelineConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    config = config_from_dict(data)
    overrides = {}
    if getattr(args, "variant", None):
        overrides["variant"] = harness.Variant(args.variant)
    if getattr(args, "activation", None):
        overrides["activation"] = cnn.Activation(args.activation)
    if getattr(args, "penalty", None):
        overrides["mtl_penalty"] = harness.Penalty(args.penalty)
    if getattr(args, "repeats", None) is not None:
        overrides["repeats"] = args.repeats
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return dataclasses.replace(config, **overrides) if overrides else config


def _finish(reports, out: str) -> int:
    harness.write_results_csv(reports, out)
    bad = [r for r in reports if r.incomplete]
    for rep in reports:
        status = "INCOMPLETE" if rep.incomplete else "ok"
        print(
            f"{rep.variant.value}/{rep.activation.value}/{rep.penalty.value}:"
            f" mean pan MAE {rep.mean_pan:.3f} deg"
            f" (std {rep.std_pan:.3f}, {len(rep.results)} repeats, {status})"
        )
    print(f"wrote {out}")
    if bad:
        print(
            f"error: {len(bad)} group(s) had aborted repeats", file=sys.stderr
        )
        return 1
    return 0


def _cmd_gen_data(args) -> int:
    config = _load_config(args)
    if config.scene is None:
        raise MtposeError("gen-data needs a synthetic scene config")
    scene = dataclasses.replace(config.scene, seed=args.seed if args.seed is not None else config.scene.seed)
    datasets = synth.generate_dataset(scene)
    ann = synth.export_dataset(datasets, args.out)
    n = sum(d.train.images.shape[0] + d.test.images.shape[0] for d in datasets)
    print(f"wrote {n} images across {len(datasets)} tasks; annotations: {ann}")
    return 0


def _cmd_train(args) -> int:
    """Train the stage-1 CNNs for repeat 0 and save checkpoints."""
    import os

    config = _load_config(args)
    splits = harness._load_splits(config, 0)
    opts = config.training
    os.makedirs(args.out, exist_ok=True)
    for s in splits:
        hw = s.train_images.shape[-1]
        spec = cnn.default_spec(2, config.activation, input_hw=hw)
        state = cnn.init_state(
            spec, harness._seed_int(config.seed, 0, s.task_id, 1)
        )
        rng = np.random.default_rng(
            harness._seed_int(config.seed, 0, s.task_id, 2)
        )
        targets = np.stack(
            [s.train_pan / opts.pan_scale, s.train_tilt / opts.tilt_scale], axis=1
        )
        loss = float("nan")
        for _ in range(opts.epochs):
            state, loss = cnn.train_epoch(
                spec, state, s.train_images, targets,
                eta=opts.eta, batch_size=opts.batch_size, rng=rng,
            )
        path = os.path.join(args.out, f"task{s.task_id}.npz")
        cnn.save_checkpoint(spec, state, path)
        print(f"task {s.task_id}: final loss {loss:.6f} -> {path}")
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args)
    return _finish([harness.run_pipeline(config)], args.out)


def _cmd_compare_activations(args) -> int:
    return _finish(harness.compare_activations(_load_config(args)), args.out)


def _cmd_compare_losses(args) -> int:
    return _finish(harness.compare_losses(_load_config(args)), args.out)


def _cmd_ablate(args) -> int:
    return _finish(harness.ablate(_load_config(args)), args.out)


def _cmd_lrr_demo(args) -> int:
    """Recover a planted low-rank matrix with a few corrupted columns."""
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    n, d, rank, bad = 60, 30, 3, 4
    clean = rng.normal(size=(d, rank)) @ rng.normal(size=(rank, n)) * 3.0
    x = clean.copy()
    corrupted = rng.choice(n, size=bad, replace=False)
    x[:, corrupted] += rng.normal(scale=5.0, size=(d, bad))
    # dictionary = the clean columns, so corruption cannot be re-expressed
    # and has to land in E
    result = lrr.solve_lrr(lrr.LrrProblem(x=x, a=clean, lam=0.3))
    energy = np.linalg.norm(result.e, axis=0) ** 2
    frac = energy[corrupted].sum() / max(energy.sum(), 1e-30)
    print(
        f"converged={result.converged} iterations={result.iterations} "
        f"residuals=({result.primal_residuals[0]:.2e}, "
        f"{result.primal_residuals[1]:.2e})"
    )
    print(f"rank(Z) ~ {np.linalg.matrix_rank(result.z, tol=1e-6)}")
    print(
        f"corrupted columns {sorted(int(c) for c in corrupted)} carry "
        f"{100 * frac:.1f}% of the corruption energy"
    )
    if args.out:
        lrr.dump_diagnostics(result, args.out)
        print(f"wrote {args.out}z.csv / {args.out}e.csv")
    return 0 if result.converged else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtpose",
        description="Multi-task manifold pose-regression experiments",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="results.csv"):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("gen-data", help="render a synthetic dataset to PGM files")
    common(p, out_default="dataset")

    p = sub.add_parser("train", help="train stage-1 CNNs, save checkpoints")
    common(p, out_default="checkpoints")
    p.add_argument("--activation", choices=[a.value for a in cnn.Activation])

    p = sub.add_parser("eval", help="run one pipeline configuration")
    common(p)
    p.add_argument("--variant", choices=[v.value for v in harness.Variant])
    p.add_argument("--activation", choices=[a.value for a in cnn.Activation])
    p.add_argument("--penalty", choices=[x.value for x in harness.Penalty])
    p.add_argument("--repeats", type=int)

    for name in ("compare-activations", "compare-losses", "ablate"):
        p = sub.add_parser(name, help=f"run the {name.replace('-', ' ')} study")
        common(p)
        p.add_argument("--variant", choices=[v.value for v in harness.Variant])
        p.add_argument("--repeats", type=int)
        if name != "compare-activations":
            p.add_argument(
                "--activation", choices=[a.value for a in cnn.Activation]
            )
        if name != "compare-losses":
            p.add_argument(
                "--penalty", choices=[x.value for x in harness.Penalty]
            )

    p = sub.add_parser("lrr-demo", help="low-rank recovery on a planted instance")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="", help="prefix for diagnostic CSVs")

    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare-activations": _cmd_compare_activations,
    "compare-losses": _cmd_compare_losses,
    "ablate": _cmd_ablate,
    "lrr-demo": _cmd_lrr_demo,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except MtposeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
