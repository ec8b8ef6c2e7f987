"""Synthetic multi-view / multi-modal pose data.

A parametric "head" (triaxial ellipsoid with eye, nose, mouth and ear
landmarks painted on its surface) is ray-cast orthographically to a 64x64
intensity or depth image.  The renderer is built exclusively from
mirror-safe arithmetic, so negating the pan angle produces the exactly
mirrored image, and pan = tilt = 0 is exactly bilaterally symmetric.

Images are quantized to 16-bit gray levels at generation time so that the
PGM export/import round trip is bit exact.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataFormatError, MtposeError

__all__ = [
    "SceneParams",
    "PoseSet",
    "ImageTaskDataset",
    "render_head",
    "generate_dataset",
    "export_dataset",
    "load_csv_dataset",
]

IMAGE_SIZE = 64
_GRAY_LEVELS = 65535

# ellipsoid semi-axes (x: ear-to-ear, y: chin-to-crown, z: back-to-nose)
_AX, _AY, _AZ = 0.60, 0.80, 0.70

# landmark centers in head coordinates (x mirrored for paired features)
_EYE = (0.22, 0.18, 0.632)
_NOSE = (0.0, -0.05, 0.699)
_MOUTH = (0.0, -0.32, 0.641)
_EAR = (0.588, 0.0, 0.0)


@dataclass
class SceneParams:
    n_subjects: int = 4
    n_samples: int = 500          # training samples per task
    n_test: int | None = None     # defaults to n_samples
    views: int = 4
    modals: str = "gray"          # "gray" or "gray+depth"
    pan_range: tuple[float, float] = (-90.0, 90.0)
    tilt_range: tuple[float, float] = (-60.0, 60.0)
    noise_sigma: float = 0.0
    seed: int = 0
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.image_size < 8:
            raise MtposeError("image_size must be >= 8")
        if self.pan_range[0] >= self.pan_range[1]:
            raise MtposeError(f"bad pan range {self.pan_range}")
        if self.tilt_range[0] >= self.tilt_range[1]:
            raise MtposeError(f"bad tilt range {self.tilt_range}")
        if self.modals not in ("gray", "gray+depth"):
            raise MtposeError(f"unknown modal set {self.modals!r}")
        if self.modals == "gray" and self.views < 1:
            raise MtposeError("need at least one view")
        if self.n_subjects < 1 or self.n_samples < 1:
            raise MtposeError("n_subjects and n_samples must be >= 1")


@dataclass
class PoseSet:
    images: np.ndarray   # (N, 1, 64, 64)
    pan: np.ndarray      # (N,) degrees
    tilt: np.ndarray     # (N,) degrees
    subject: np.ndarray  # (N,) int


@dataclass
class ImageTaskDataset:
    task_id: int
    view_offset: float
    modal: str
    train: PoseSet
    test: PoseSet


def _pixel_axis(size: int) -> np.ndarray:
    # (i - (size-1)/2) / (size/2): exactly antisymmetric pixel coordinates
    return (np.arange(size, dtype=np.float64) - (size - 1) / 2.0) / (size / 2.0)


def _blob(hx, hy, hz, cx, cy, cz, width):
    d2 = (hx - cx) ** 2 + (hy - cy) ** 2 + (hz - cz) ** 2
    return np.exp(-d2 / (2.0 * width))


def render_head(
    pan: float,
    tilt: float,
    view_offset: float = 0.0,
    modal: str = "gray",
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    geom_scale: float = 1.0,
    size: int = IMAGE_SIZE,
) -> np.ndarray:
    """Render one head at (pan + view_offset, tilt) degrees; returns (1, size, size)."""
    if not (np.isfinite(pan) and np.isfinite(tilt)):
        raise MtposeError("angles must be finite")
    pr = np.deg2rad(pan + view_offset)
    tr = np.deg2rad(tilt)
    cp, sp = np.cos(pr), np.sin(pr)
    ct, st = np.cos(tr), np.sin(tr)
    ax, ay, az = _AX * geom_scale, _AY * geom_scale, _AZ * geom_scale

    axis = _pixel_axis(size)
    u = axis[None, :]            # +x to the right
    v = (-axis)[:, None]         # +y up

    # head coords of the ray p(z) = (u, v, z): h = A + B z per component
    a1, b1 = cp * u, -sp + 0.0 * u
    a2, b2 = ct * v + st * sp * u, st * cp + 0.0 * u
    a3, b3 = -st * v + ct * sp * u, ct * cp + 0.0 * u

    qa = (b1 / ax) ** 2 + (b2 / ay) ** 2 + (b3 / az) ** 2
    qb = 2.0 * (a1 * b1 / ax**2 + a2 * b2 / ay**2 + a3 * b3 / az**2)
    qc = (a1 / ax) ** 2 + (a2 / ay) ** 2 + (a3 / az) ** 2 - 1.0
    disc = qb * qb - 4.0 * qa * qc
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    z = np.where(hit, (-qb + sq) / (2.0 * qa), 0.0)  # front intersection

    hx = a1 + b1 * z
    hy = a2 + b2 * z
    hz = a3 + b3 * z

    if modal == "depth":
        img = np.where(hit, np.clip((z + 0.9 * geom_scale) / (1.8 * geom_scale), 0.0, 1.0), 0.0)
    elif modal == "gray":
        # Lambert shading toward the viewer
        nhx, nhy, nhz = hx / ax**2, hy / ay**2, hz / az**2
        my_, mz_ = ct * nhy - st * nhz, st * nhy + ct * nhz
        nz_world = -sp * nhx + cp * mz_
        nrm = np.sqrt(nhx * nhx + my_ * my_ + mz_ * mz_)
        shade = np.clip(nz_world / np.where(nrm > 0, nrm, 1.0), 0.0, 1.0)

        r = np.sqrt(hx * hx + hy * hy + hz * hz)
        r = np.where(r > 0, r, 1.0)
        rho = np.sqrt(hx * hx + hz * hz)
        clon = hz / np.where(rho > 0, rho, 1.0)  # cos(longitude)
        # cos(3 * longitude): breaks the front/back ambiguity everywhere
        band = 4.0 * clon**3 - 3.0 * clon

        s = geom_scale
        eyes = _blob(hx, hy, hz, _EYE[0] * s, _EYE[1] * s, _EYE[2] * s, 0.004 * s * s) \
            + _blob(hx, hy, hz, -_EYE[0] * s, _EYE[1] * s, _EYE[2] * s, 0.004 * s * s)
        nose = _blob(hx, hy, hz, _NOSE[0], _NOSE[1] * s, _NOSE[2] * s, 0.003 * s * s)
        mouth = _blob(hx, hy, hz, _MOUTH[0], _MOUTH[1] * s, _MOUTH[2] * s, 0.005 * s * s)
        ears = _blob(hx, hy, hz, _EAR[0] * s, _EAR[1], _EAR[2], 0.006 * s * s) \
            + _blob(hx, hy, hz, -_EAR[0] * s, _EAR[1], _EAR[2], 0.006 * s * s)

        img = 0.30 + 0.40 * shade + 0.08 * band + 0.06 * (hy / r) \
            - 0.35 * eyes + 0.28 * nose - 0.30 * mouth + 0.18 * ears
        img = np.where(hit, np.clip(img, 0.0, 1.0), 0.0)
    else:
        raise MtposeError(f"unknown modal {modal!r}")

    if noise_sigma > 0.0:
        if rng is None:
            raise MtposeError("noise requires an rng")
        img = np.clip(img + rng.normal(0.0, noise_sigma, img.shape), 0.0, 1.0)

    img = np.round(img * _GRAY_LEVELS) / _GRAY_LEVELS
    return img[None, :, :]


def _task_layout(params: SceneParams) -> list[tuple[float, str]]:
    """(view_offset, modal) per task."""
    if params.modals == "gray+depth":
        return [(0.0, "gray"), (0.0, "depth")]
    return [(360.0 * k / params.views, "gray") for k in range(params.views)]


def generate_dataset(params: SceneParams) -> list[ImageTaskDataset]:
    """Per-task train/test splits observing identical head states."""
    n_test = params.n_test if params.n_test is not None else params.n_samples
    n_total = params.n_samples + n_test
    root_ss = np.random.SeedSequence((params.seed,))
    pose_rng = np.random.default_rng(root_ss.spawn(1)[0])
    pan = pose_rng.uniform(*params.pan_range, n_total)
    tilt = pose_rng.uniform(*params.tilt_range, n_total)
    subject = pose_rng.integers(0, params.n_subjects, n_total)
    geom = 1.0 + 0.05 * (pose_rng.random(params.n_subjects) * 2.0 - 1.0)

    datasets = []
    for task_id, (offset, modal) in enumerate(_task_layout(params)):
        noise_rng = np.random.default_rng(
            np.random.SeedSequence((params.seed, task_id + 1))
        )
        images = np.empty((n_total, 1, params.image_size, params.image_size))
        for i in range(n_total):
            images[i] = render_head(
                pan[i], tilt[i], offset, modal,
                params.noise_sigma, noise_rng, geom_scale=geom[subject[i]],
                size=params.image_size,
            )
        tr = slice(0, params.n_samples)
        te = slice(params.n_samples, n_total)
        datasets.append(
            ImageTaskDataset(
                task_id=task_id, view_offset=offset, modal=modal,
                train=PoseSet(images[tr], pan[tr].copy(), tilt[tr].copy(), subject[tr].copy()),
                test=PoseSet(images[te], pan[te].copy(), tilt[te].copy(), subject[te].copy()),
            )
        )
    return datasets


def _write_pgm(path: str, img: np.ndarray) -> None:
    levels = np.round(img * _GRAY_LEVELS).astype(np.int64)
    h, w = levels.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n{_GRAY_LEVELS}\n")
        for row in levels:
            fh.write(" ".join(str(int(x)) for x in row))
            fh.write("\n")


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    for line in data.split(b"\n"):
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != b"P2":
        raise DataFormatError(f"{path}: expected ASCII PGM (P2)")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = np.array([int(t) for t in tokens[4 : 4 + w * h]], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"{path}: malformed PGM") from exc
    if vals.size != w * h:
        raise DataFormatError(f"{path}: expected {w * h} pixels, got {vals.size}")
    img = (vals / maxval).reshape(h, w)
    if (h, w) != (IMAGE_SIZE, IMAGE_SIZE):
        # nearest-neighbor resize to the working resolution
        yi = (np.arange(IMAGE_SIZE) * h // IMAGE_SIZE).clip(0, h - 1)
        xi = (np.arange(IMAGE_SIZE) * w // IMAGE_SIZE).clip(0, w - 1)
        img = img[np.ix_(yi, xi)]
    return img


def export_dataset(datasets: list[ImageTaskDataset], root: str) -> str:
    """Write `<root>/task<k>/img<i>.pgm` plus `annotations.csv`.

    Train samples come first, then test samples, per task.  Returns the
    annotations path.
    """
    os.makedirs(root, exist_ok=True)
    ann_path = os.path.join(root, "annotations.csv")
    with open(ann_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "task", "pan", "tilt"])
        for ds in datasets:
            task_dir = os.path.join(root, f"task{ds.task_id}")
            os.makedirs(task_dir, exist_ok=True)
            i = 0
            for split in (ds.train, ds.test):
                for j in range(split.images.shape[0]):
                    rel = os.path.join(f"task{ds.task_id}", f"img{i}.pgm")
                    _write_pgm(os.path.join(root, rel), split.images[j, 0])
                    writer.writerow(
                        [rel, ds.task_id, "%.17g" % split.pan[j], "%.17g" % split.tilt[j]]
                    )
                    i += 1
    return ann_path


@dataclass
class LoadedTask:
    task_id: int
    images: np.ndarray  # (N, 1, 64, 64)
    pan: np.ndarray
    tilt: np.ndarray


def load_csv_dataset(image_dir: str, annotations_csv: str) -> list[LoadedTask]:
    """Load `path,task,pan,tilt` annotations plus the referenced PGM files."""
    rows_by_task: dict[int, list[tuple[str, float, float]]] = {}
    with open(annotations_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "task", "pan", "tilt"]:
            raise DataFormatError(
                f"{annotations_csv}: header must be path,task,pan,tilt, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(f"{annotations_csv}:{lineno}: expected 4 columns")
            try:
                task = int(row[1])
                pan, tilt = float(row[2]), float(row[3])
            except ValueError as exc:
                raise DataFormatError(f"{annotations_csv}:{lineno}: {exc}") from exc
            rows_by_task.setdefault(task, []).append((row[0], pan, tilt))

    missing = [
        os.path.join(image_dir, rel)
        for rows in rows_by_task.values()
        for rel, _, _ in rows
        if not os.path.exists(os.path.join(image_dir, rel))
    ]
    if missing:
        raise DataFormatError(f"missing image files: {missing}")

    out = []
    for task in sorted(rows_by_task):
        rows = rows_by_task[task]
        images = np.empty((len(rows), 1, IMAGE_SIZE, IMAGE_SIZE))
        for i, (rel, _, _) in enumerate(rows):
            images[i, 0] = _read_pgm(os.path.join(image_dir, rel))
        out.append(
            LoadedTask(
                task_id=task,
                images=images,
                pan=np.array([r[1] for r in rows]),
                tilt=np.array([r[2] for r in rows]),
            )
        )
    return out
