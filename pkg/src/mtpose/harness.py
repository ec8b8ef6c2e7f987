"""End-to-end two-stage pose pipeline and experiment drivers.

Stage 1 trains one small CNN per task (view/modality) as a pan/tilt
regressor and extracts its fully-connected features.  Depending on the
pipeline variant the features are cleaned with the low-rank manifold
transform and the second stage fits the per-task regressors either
jointly (multi-task penalty across tasks) or independently.

Variants:
    M2DL  manifold cleanup + joint multi-task stage 2
    SMDL  manifold cleanup + independent stage 2
    MDL   raw features     + joint multi-task stage 2
    TDL   raw features     + independent stage 2
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cnn import (
    Activation,
    default_spec,
    extract_features,
    init_state,
    train_epoch,
)
from .exceptions import MtposeError
from .lrr import mrcl_transform
from .multitask import Penalty, SolverOpts, TaskDataset, predict, solve
from .synth import SceneParams, generate_dataset, load_csv_dataset

__all__ = [
    "Variant",
    "TrainingOpts",
    "MrclOpts",
    "CsvSource",
    "PipelineConfig",
    "RepeatResult",
    "EvalReport",
    "run_pipeline",
    "compare_activations",
    "compare_losses",
    "ablate",
    "write_results_csv",
    "config_from_dict",
]

log = logging.getLogger(__name__)

RESULTS_HEADER = [
    "variant",
    "activation",
    "penalty",
    "repeat",
    "mae_pan_deg",
    "mae_tilt_deg",
    "seed",
    "wall_ms",
    "std_pan_deg",
]


class Variant(enum.Enum):
    M2DL = "M2DL"
    SMDL = "SMDL"
    MDL = "MDL"
    TDL = "TDL"

    @property
    def uses_mrcl(self) -> bool:
        return self in (Variant.M2DL, Variant.SMDL)

    @property
    def joint_stage2(self) -> bool:
        return self in (Variant.M2DL, Variant.MDL)


@dataclass
class TrainingOpts:
    """Stage-1 CNN training knobs (plain SGD)."""

    epochs: int = 6
    eta: float = 0.1
    batch_size: int = 8
    pan_scale: float = 90.0   # targets are (pan/pan_scale, tilt/tilt_scale)
    tilt_scale: float = 60.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eta <= 0:
            raise MtposeError("epochs/batch_size must be >= 1, eta > 0")
        if self.pan_scale <= 0 or self.tilt_scale <= 0:
            raise MtposeError("target scales must be > 0")


@dataclass
class MrclOpts:
    """Manifold cleanup knobs (applied to train+test features jointly)."""

    lam: float = 0.3
    target_norm: float = 10.0
    max_iter: int = 300

    def __post_init__(self):
        if self.lam <= 0 or self.target_norm <= 0 or self.max_iter < 1:
            raise MtposeError("lam/target_norm must be > 0, max_iter >= 1")


@dataclass
class CsvSource:
    """Exported-dataset source; the first `n_train` rows per task train."""

    image_dir: str
    annotations: str
    n_train: int

    def __post_init__(self):
        if self.n_train < 1:
            raise MtposeError("n_train must be >= 1")


@dataclass
class PipelineConfig:
    variant: Variant = Variant.M2DL
    activation: Activation = Activation.RELU
    mtl_penalty: Penalty = Penalty.SPARSE_TRACE
    repeats: int = 20
    seed: int = 0
    solver: SolverOpts = field(
        default_factory=lambda: SolverOpts(standardize=True, max_iter=2000)
    )
    training: TrainingOpts = field(default_factory=TrainingOpts)
    mrcl: MrclOpts = field(default_factory=MrclOpts)
    scene: SceneParams | None = field(default_factory=SceneParams)
    csv: CsvSource | None = None

    def __post_init__(self):
        if self.repeats < 1:
            raise MtposeError("repeats must be >= 1")
        if (self.scene is None) == (self.csv is None):
            raise MtposeError("exactly one of scene/csv must be set")


@dataclass
class RepeatResult:
    repeat: int
    mae_pan: float          # mean over tasks, degrees; NaN if aborted
    mae_tilt: float
    train_mae_pan: float
    wall_ms: float
    error: str | None = None

    @property
    def completed(self) -> bool:
        return self.error is None


@dataclass
class EvalReport:
    variant: Variant
    activation: Activation
    penalty: Penalty
    seed: int
    results: list[RepeatResult]

    @property
    def incomplete(self) -> bool:
        return any(not r.completed for r in self.results)

    def _completed_pan(self) -> np.ndarray:
        return np.array([r.mae_pan for r in self.results if r.completed])

    @property
    def mean_pan(self) -> float:
        vals = self._completed_pan()
        return float(vals.mean()) if vals.size else float("nan")

    @property
    def std_pan(self) -> float:
        vals = self._completed_pan()
        return float(vals.std()) if vals.size else float("nan")

    @property
    def mean_tilt(self) -> float:
        vals = np.array([r.mae_tilt for r in self.results if r.completed])
        return float(vals.mean()) if vals.size else float("nan")

    @property
    def wall_ms(self) -> float:
        return float(sum(r.wall_ms for r in self.results))


@dataclass
class _TaskSplit:
    task_id: int
    train_images: np.ndarray
    test_images: np.ndarray
    train_pan: np.ndarray
    train_tilt: np.ndarray
    test_pan: np.ndarray
    test_tilt: np.ndarray


def _seed_int(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def _load_splits(config: PipelineConfig, repeat: int) -> list[_TaskSplit]:
    if config.scene is not None:
        scene = dataclasses.replace(
            config.scene, seed=_seed_int(config.seed, repeat)
        )
        return [
            _TaskSplit(
                d.task_id,
                d.train.images, d.test.images,
                d.train.pan, d.train.tilt, d.test.pan, d.test.tilt,
            )
            for d in generate_dataset(scene)
        ]
    src = config.csv
    splits = []
    for t in load_csv_dataset(src.image_dir, src.annotations):
        n = src.n_train
        if t.images.shape[0] <= n:
            raise MtposeError(
                f"task {t.task_id}: {t.images.shape[0]} samples, "
                f"need more than n_train={n}"
            )
        splits.append(
            _TaskSplit(
                t.task_id,
                t.images[:n], t.images[n:],
                t.pan[:n], t.tilt[:n], t.pan[n:], t.tilt[n:],
            )
        )
    return splits


def _stage1_features(config: PipelineConfig, repeat: int, splits):
    """Train one CNN per task, return {task_id: (train_feats, test_feats)}."""
    opts = config.training
    feats = {}
    for s in splits:
        hw = s.train_images.shape[-1]
        spec = default_spec(2, config.activation, input_hw=hw)
        state = init_state(spec, _seed_int(config.seed, repeat, s.task_id, 1))
        rng = np.random.default_rng(
            _seed_int(config.seed, repeat, s.task_id, 2)
        )
        targets = np.stack(
            [s.train_pan / opts.pan_scale, s.train_tilt / opts.tilt_scale],
            axis=1,
        )
        for _ in range(opts.epochs):
            state, _ = train_epoch(
                spec, state, s.train_images, targets,
                eta=opts.eta, batch_size=opts.batch_size, rng=rng,
            )
        feats[s.task_id] = (
            extract_features(spec, state, s.train_images),
            extract_features(spec, state, s.test_images),
        )
    return feats


def _mrcl_features(config: PipelineConfig, feats):
    """Clean train+test features of each task with one joint LRR solve.

    Train and test rows are stacked and transformed together: the
    self-expressive reconstruction is only consistent when every sample is
    expressed in the *same* dictionary, and cleaning the splits separately
    leaves them in mismatched coordinates.
    """
    m = config.mrcl
    out = {}
    for task_id, (tr, te) in feats.items():
        stacked = np.vstack([tr, te])
        cleaned = mrcl_transform(
            stacked, lam=m.lam, target_norm=m.target_norm, max_iter=m.max_iter
        )
        out[task_id] = (cleaned[: len(tr)], cleaned[len(tr):])
    return out


def _stage2_eval(config: PipelineConfig, splits, feats):
    """Fit the selected penalty (jointly or per task) and score pan/tilt MAE."""
    tasks = [
        TaskDataset(
            s.task_id,
            feats[s.task_id][0],
            np.stack([s.train_pan, s.train_tilt], axis=1),
        )
        for s in splits
    ]
    if config.variant.joint_stage2:
        model = solve(tasks, config.mtl_penalty, config.solver)
        models = {t.task_id: model for t in tasks}
    else:
        models = {
            t.task_id: solve([t], config.mtl_penalty, config.solver)
            for t in tasks
        }
    pan, tilt, train_pan = [], [], []
    for s in splits:
        pred = predict(models[s.task_id], feats[s.task_id][1], s.task_id)
        pan.append(np.abs(pred[:, 0] - s.test_pan).mean())
        tilt.append(np.abs(pred[:, 1] - s.test_tilt).mean())
        pred_tr = predict(models[s.task_id], feats[s.task_id][0], s.task_id)
        train_pan.append(np.abs(pred_tr[:, 0] - s.train_pan).mean())
    return float(np.mean(pan)), float(np.mean(tilt)), float(np.mean(train_pan))


def run_pipeline(config: PipelineConfig, cache: dict | None = None) -> EvalReport:
    """Run the configured variant for `config.repeats` repeats.

    `cache` (optional, shared between calls) memoizes per-repeat datasets
    and stage-1 features so the comparison drivers reuse identical inputs.
    Keys depend only on (seed, repeat, activation, mrcl-or-not), never on
    the variant or penalty, so cached and uncached runs agree bit for bit.
    """
    if cache is None:
        cache = {}
    results = []
    for r in range(config.repeats):
        t0 = time.perf_counter()
        try:
            data_key = ("data", config.seed, r)
            if data_key not in cache:
                cache[data_key] = _load_splits(config, r)
            splits = cache[data_key]

            feat_key = ("feats", config.seed, r, config.activation.value,
                        config.training.epochs, config.training.eta,
                        config.training.batch_size)
            if feat_key not in cache:
                cache[feat_key] = _stage1_features(config, r, splits)
            feats = cache[feat_key]

            if config.variant.uses_mrcl:
                clean_key = ("mrcl",) + feat_key[1:] + (
                    config.mrcl.lam, config.mrcl.target_norm)
                if clean_key not in cache:
                    cache[clean_key] = _mrcl_features(config, feats)
                feats = cache[clean_key]

            mae_pan, mae_tilt, train_pan = _stage2_eval(config, splits, feats)
            wall = (time.perf_counter() - t0) * 1000.0
            results.append(RepeatResult(r, mae_pan, mae_tilt, train_pan, wall))
        except Exception as exc:  # recorded, not raised: the repeat aborts
            wall = (time.perf_counter() - t0) * 1000.0
            log.warning("repeat %d aborted: %s", r, exc)
            results.append(
                RepeatResult(
                    r, float("nan"), float("nan"), float("nan"), wall,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    return EvalReport(
        config.variant, config.activation, config.mtl_penalty,
        config.seed, results,
    )


def compare_activations(
    base_config: PipelineConfig, cache: dict | None = None
) -> list[EvalReport]:
    """Run the pipeline once per activation with identical seeds/datasets."""
    cache = {} if cache is None else cache
    return [
        run_pipeline(dataclasses.replace(base_config, activation=act), cache)
        for act in Activation
    ]


def compare_losses(
    base_config: PipelineConfig, cache: dict | None = None
) -> list[EvalReport]:
    """Run the four penalties on shared stage-1 features (computed once)."""
    cache = {} if cache is None else cache
    return [
        run_pipeline(dataclasses.replace(base_config, mtl_penalty=pen), cache)
        for pen in Penalty
    ]


def ablate(
    base_config: PipelineConfig, cache: dict | None = None
) -> list[EvalReport]:
    """Run the four variants on shared datasets and stage-1 features."""
    cache = {} if cache is None else cache
    return [
        run_pipeline(dataclasses.replace(base_config, variant=var), cache)
        for var in Variant
    ]


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_results_csv(reports: list[EvalReport], path) -> None:
    """Write per-repeat rows plus one `repeat=-1` summary row per report."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for rep in reports:
            label = [rep.variant.value, rep.activation.value, rep.penalty.value]
            for r in rep.results:
                writer.writerow(
                    label
                    + [r.repeat, _fmt(r.mae_pan), _fmt(r.mae_tilt),
                       rep.seed, _fmt(r.wall_ms), ""]
                )
            writer.writerow(
                label
                + [-1, _fmt(rep.mean_pan), _fmt(rep.mean_tilt),
                   rep.seed, _fmt(rep.wall_ms), _fmt(rep.std_pan)]
            )


_ACTIVATIONS = {a.value: a for a in Activation}
_PENALTIES = {p.value: p for p in Penalty}
_VARIANTS = {v.value: v for v in Variant}


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a PipelineConfig from JSON-style nested dicts.

    Keys match the PipelineConfig field names; enum fields take their
    string values (e.g. "M2DL", "relu", "LeastSparseTrace").
    """
    data = dict(data)
    kwargs = {}
    try:
        if "variant" in data:
            kwargs["variant"] = _VARIANTS[data.pop("variant")]
        if "activation" in data:
            kwargs["activation"] = _ACTIVATIONS[data.pop("activation")]
        if "mtl_penalty" in data:
            kwargs["mtl_penalty"] = _PENALTIES[data.pop("mtl_penalty")]
    except KeyError as exc:
        raise MtposeError(f"unknown enum value {exc}") from exc
    for name, cls in (
        ("solver", SolverOpts),
        ("training", TrainingOpts),
        ("mrcl", MrclOpts),
        ("scene", SceneParams),
        ("csv", CsvSource),
    ):
        if name in data:
            val = data.pop(name)
            if val is not None and not isinstance(val, cls):
                try:
                    val = cls(**val)
                except TypeError as exc:
                    raise MtposeError(f"bad {name} section: {exc}") from exc
            kwargs[name] = val
    for name in ("repeats", "seed"):
        if name in data:
            kwargs[name] = int(data.pop(name))
    if data:
        raise MtposeError(f"unknown config keys: {sorted(data)}")
    if "csv" in kwargs and kwargs.get("csv") is not None:
        kwargs.setdefault("scene", None)
    return PipelineConfig(**kwargs)
