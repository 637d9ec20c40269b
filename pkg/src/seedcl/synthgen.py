"""Domain-randomized synthetic dataset generation.

Seed cutouts (segmented from photos or procedurally generated toy ellipses)
are composited onto bright canvases with random rotation and position. Every
output image draws its randomness from a stream derived from
(master_seed, class_index, image_index), so parallel and serial generation
agree bit-exactly.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import (
    AmbiguousForeground,
    ConfigError,
    IoFailure,
    NoForegroundFound,
    PlacementFailure,
)
from .image import Image, alpha_blend, hsv_to_rgb, rotate_rgba, save_png, to_u8
from .rng import derive_stream

DEFAULT_BACKGROUND = (220, 220, 220)
BACKGROUND_JITTER = 5

# Toy classes differ only in structure: axis ratio (short/long), speckle
# density, and lobe count. Color, footprint area, and mean brightness are
# shared across classes so that global intensity statistics carry no label
# signal and class identity must come from shape and texture.
_TOY_STYLES = (
    {"ratio": 1.00, "speckle": 0.03, "lobes": 1},
    {"ratio": 0.40, "speckle": 0.30, "lobes": 1},
    {"ratio": 0.75, "speckle": 0.10, "lobes": 2},
    {"ratio": 0.55, "speckle": 0.02, "lobes": 2},
    {"ratio": 0.90, "speckle": 0.22, "lobes": 1},
    {"ratio": 0.45, "speckle": 0.08, "lobes": 2},
    {"ratio": 0.70, "speckle": 0.35, "lobes": 1},
    {"ratio": 1.00, "speckle": 0.15, "lobes": 2},
)
MAX_TOY_CLASSES = len(_TOY_STYLES)
_TOY_HUE = 30.0
_TOY_MEAN_VAL = 165.0


@dataclass
class Cutout:
    """A segmented seed: RGB pixels, alpha mask, and provenance."""

    image: Image
    class_label: str
    source_id: str

    def __post_init__(self):
        if self.image.alpha is None:
            raise ConfigError("cutout image must carry an alpha mask")
        if not np.any(self.image.alpha > 0):
            raise ConfigError("cutout alpha mask is fully transparent")


@dataclass
class Placement:
    """Draw-order record of one composited cutout instance."""

    cutout_index: int
    x: int
    y: int
    rotation: float


@dataclass
class ManifestRecord:
    path: str
    class_label: str
    split: str


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    class_names: List[str]
    master_seed: int
    root: Optional[Path] = None  # directory paths are relative to; not serialized

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ConfigError("manifest contains duplicate paths")
        known = set(self.class_names)
        for r in self.records:
            if r.class_label not in known:
                raise ConfigError(f"record label {r.class_label!r} not in class_names")
            if r.split not in ("train", "val", "test"):
                raise ConfigError(f"bad split {r.split!r}")

    def split_records(self, split: str) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def resolve(self, record: ManifestRecord) -> Path:
        return (self.root / record.path) if self.root is not None else Path(record.path)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    try:
        with open(path, "w") as fh:
            fh.write(json.dumps({"classes": manifest.class_names, "master_seed": manifest.master_seed}) + "\n")
            for r in manifest.records:
                fh.write(json.dumps({"path": r.path, "class": r.class_label, "split": r.split}) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise IoFailure(f"manifest {path} is empty")
    header = json.loads(lines[0])
    records = [
        ManifestRecord(path=d["path"], class_label=d["class"], split=d["split"])
        for d in (json.loads(ln) for ln in lines[1:])
    ]
    return DatasetManifest(
        records=records,
        class_names=list(header["classes"]),
        master_seed=int(header["master_seed"]),
        root=path.parent,
    )


@dataclass
class ThresholdConfig:
    """Segmentation knobs for extract_cutouts."""

    mode: str = "otsu"  # "otsu" | "fixed"
    fixed_value: float = 128.0
    max_coverage: float = 0.9  # largest component above this fraction -> ambiguous


def otsu_threshold(luminance: np.ndarray) -> int:
    """Otsu's threshold over the 256-bin luminance histogram.

    Returns the bin t maximizing between-class variance for the partition
    (lum <= t, lum > t); ties resolve to the smallest t.
    """
    hist = np.bincount(
        np.clip(np.floor(luminance + 0.5), 0, 255).astype(np.int64).ravel(), minlength=256
    ).astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    mu = np.cumsum(hist * np.arange(256))
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = mu / w0
        mu1 = (mu_total - mu) / w1
        sigma_b = w0 * w1 * (mu0 - mu1) ** 2
    sigma_b = np.nan_to_num(sigma_b, nan=0.0, posinf=0.0, neginf=0.0)
    return int(np.argmax(sigma_b))


def extract_cutouts(
    photos: Sequence[Image],
    threshold_config: Optional[ThresholdConfig] = None,
    class_label: str = "unknown",
    source_prefix: str = "photo",
) -> List[Cutout]:
    """Segment one dark-on-bright object per photo into an alpha-masked cutout.

    Global luminance thresholding picks foreground (lum <= threshold), the
    largest connected component is kept, and the cutout is cropped to its
    bounding box with alpha 255 inside / 0 outside.
    """
    cfg = threshold_config or ThresholdConfig()
    cutouts = []
    for i, photo in enumerate(photos):
        lum = photo.luminance()
        if cfg.mode == "otsu":
            t = otsu_threshold(lum)
        elif cfg.mode == "fixed":
            t = cfg.fixed_value
        else:
            raise ConfigError(f"unknown threshold mode {cfg.mode!r}")
        fg = lum <= t
        if not fg.any():
            raise NoForegroundFound(f"photo {i}: thresholding found no object pixels")
        labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=np.int8))
        sizes = np.bincount(labels.ravel())[1:]  # skip background label 0
        biggest = int(np.argmax(sizes)) + 1
        component = labels == biggest
        if sizes[biggest - 1] > cfg.max_coverage * lum.size:
            raise AmbiguousForeground(
                f"photo {i}: largest component covers {sizes[biggest - 1] / lum.size:.0%} of the photo"
            )
        ys, xs = np.nonzero(component)
        y0, y1 = ys.min(), ys.max() + 1
        x0, x1 = xs.min(), xs.max() + 1
        alpha = np.where(component[y0:y1, x0:x1], 255, 0).astype(np.uint8)
        cutouts.append(
            Cutout(
                image=Image(photo.pixels[y0:y1, x0:x1].copy(), alpha),
                class_label=class_label,
                source_id=f"{source_prefix}_{i:03d}",
            )
        )
    return cutouts


def _lobed_mask(a: float, b: float, lobes: int) -> np.ndarray:
    # Union of `lobes` ellipses with horizontal semi-axis a and vertical b;
    # two lobes sit offset by 0.75a each way, giving a peanut outline.
    offset = 0.75 * a if lobes == 2 else 0.0
    half_w = a + offset
    side = int(math.ceil(2 * max(half_w, b))) + 2
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy = cx = (side - 1) / 2.0
    inside = ((xx - cx - offset) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    if lobes == 2:
        inside |= ((xx - cx + offset) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    if not inside.any():
        inside[side // 2, side // 2] = True
    return inside


def generate_toy_cutouts(
    class_count: int,
    per_class: int,
    rng: np.random.Generator,
    base_size: int = 16,
) -> List[Cutout]:
    """Procedural cutouts standing in for photographed seeds.

    Classes share one hue band, one mean brightness, and one footprint
    area; they differ in axis ratio, speckle density, and lobe count, so
    only shape and texture tell them apart. Instances jitter axis lengths
    by +-15% and hue by +-10 degrees.
    """
    if not 2 <= class_count <= MAX_TOY_CLASSES:
        raise ConfigError(f"class_count must be in [2, {MAX_TOY_CLASSES}], got {class_count}")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    if base_size < 4:
        raise ConfigError("base_size must be >= 4")

    target_area = math.pi * (base_size / 2.0) ** 2
    cutouts = []
    for ci in range(class_count):
        style = _TOY_STYLES[ci]
        label = f"toy{ci}"
        for j in range(per_class):
            ratio = style["ratio"] * (1.0 + rng.uniform(-0.15, 0.15))
            area = target_area * (1.0 + rng.uniform(-0.1, 0.1))
            # Start from the equal-area single-ellipse axes, then correct
            # once against the actual rasterized footprint.
            a = math.sqrt(area / (math.pi * ratio))
            b = max(a * ratio, 1.0)
            inside = _lobed_mask(a, b, style["lobes"])
            scale = math.sqrt(area / max(int(inside.sum()), 1))
            if abs(scale - 1.0) > 0.02:
                a = max(a * scale, 1.0)
                b = max(b * scale, 1.0)
                inside = _lobed_mask(a, b, style["lobes"])
            side = inside.shape[0]

            hue = (_TOY_HUE + rng.uniform(-10.0, 10.0)) % 360.0
            sat = rng.uniform(0.55, 0.8)
            vals = np.full((side, side), _TOY_MEAN_VAL)
            vals *= 1.0 + rng.uniform(-0.08, 0.08, size=(side, side))
            dark = rng.random((side, side)) < style["speckle"]
            vals = np.where(dark, vals * 0.55, vals)
            # Shared mean brightness: speckle may shape the texture but not
            # the first-order intensity statistics.
            fg_mean = float(np.mean(vals[inside]))
            vals *= _TOY_MEAN_VAL / fg_mean
            rgb = hsv_to_rgb(np.full((side, side), hue), np.full((side, side), sat), vals)
            pixels = to_u8(np.where(inside[:, :, None], rgb, 0.0))
            alpha = np.where(inside, 255, 0).astype(np.uint8)
            cutouts.append(
                Cutout(
                    image=Image(pixels, alpha),
                    class_label=label,
                    source_id=f"{label}_{j:03d}",
                )
            )
    return cutouts


def group_cutouts(cutouts: Sequence[Cutout]) -> Dict[str, List[Cutout]]:
    """Bucket cutouts by class label, preserving first-seen label order."""
    grouped: Dict[str, List[Cutout]] = {}
    for c in cutouts:
        grouped.setdefault(c.class_label, []).append(c)
    return grouped


def compose_image(
    cutouts: Sequence[Cutout],
    count: int,
    canvas_size: Tuple[int, int],
    background: Union[Image, Tuple[int, int, int]],
    rng: np.random.Generator,
    rotate: bool = True,
    allow_overlap: bool = True,
    max_retries: int = 100,
) -> Tuple[Image, List[Placement]]:
    """Alpha-blend `count` cutout instances (sampled with replacement) onto a canvas.

    Every placed bounding box lies fully inside the canvas. With overlap
    disabled, positions are rejection-sampled against prior boxes for up to
    `max_retries` attempts per instance before PlacementFailure.
    """
    width, height = canvas_size
    if count < 0:
        raise ConfigError("count must be >= 0")
    if count > 0:
        labels = {c.class_label for c in cutouts}
        if len(labels) != 1:
            raise ConfigError(f"cutouts must share one class_label, got {sorted(labels)}")

    if isinstance(background, Image):
        if (background.width, background.height) != (width, height):
            raise ConfigError("background image does not match canvas size")
        canvas = background.pixels.copy()
    else:
        canvas = Image.solid(width, height, background).pixels

    placements: List[Placement] = []
    boxes: List[Tuple[int, int, int, int]] = []
    for _ in range(count):
        idx = int(rng.integers(len(cutouts)))
        cut = cutouts[idx]
        for attempt in range(max_retries):
            angle = float(rng.uniform(0.0, 360.0)) if rotate else 0.0
            rgb, alpha = rotate_rgba(cut.image.pixels, cut.image.alpha, angle)
            ph, pw = alpha.shape
            if pw > width or ph > height:
                raise PlacementFailure(
                    f"cutout {cut.source_id} is {pw}x{ph} after rotation, larger than the {width}x{height} canvas"
                )
            x = int(rng.integers(0, width - pw + 1))
            y = int(rng.integers(0, height - ph + 1))
            if allow_overlap or not any(
                x < bx1 and bx0 < x + pw and y < by1 and by0 < y + ph for bx0, by0, bx1, by1 in boxes
            ):
                break
        else:
            raise PlacementFailure(
                f"no non-overlapping spot for instance {len(placements)} after {max_retries} retries"
            )
        alpha_blend(canvas, rgb, alpha, x, y)
        placements.append(Placement(cutout_index=idx, x=x, y=y, rotation=angle))
        boxes.append((x, y, x + pw, y + ph))
    return Image(canvas), placements


def _render_one(
    cutouts: Sequence[Cutout],
    seeds_per_image: int,
    canvas_size: Tuple[int, int],
    background_color: Tuple[int, int, int],
    master_seed: int,
    class_index: int,
    image_index: int,
    rotate: bool,
    allow_overlap: bool,
) -> Image:
    rng = derive_stream(master_seed, "image", class_index, image_index)
    jitter = int(rng.integers(-BACKGROUND_JITTER, BACKGROUND_JITTER + 1))
    color = tuple(int(np.clip(c + jitter, 0, 255)) for c in background_color)
    img, _ = compose_image(
        cutouts, seeds_per_image, canvas_size, color, rng, rotate=rotate, allow_overlap=allow_overlap
    )
    return img


def generate_dataset(
    cutouts_by_class: Dict[str, Sequence[Cutout]],
    per_class: int,
    seeds_per_image: int,
    canvas_size: Tuple[int, int],
    split_ratio: Tuple[float, float],
    out_dir,
    master_seed: int,
    background_color: Tuple[int, int, int] = DEFAULT_BACKGROUND,
    rotate: bool = True,
    allow_overlap: bool = True,
) -> DatasetManifest:
    """Write per_class composed PNGs per class under out_dir and a JSONL manifest.

    The first floor(train_fraction * per_class) images of each class go to the
    train split, the rest to val. SEEDCL_THREADS > 1 parallelizes image
    rendering; per-image rng streams make the output identical to serial.
    """
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    train_frac, val_frac = split_ratio
    if train_frac < 0 or val_frac < 0 or abs(train_frac + val_frac - 1.0) > 1e-9:
        raise ConfigError(f"split_ratio must be two non-negative fractions summing to 1, got {split_ratio}")

    out_dir = Path(out_dir)
    class_names = list(cutouts_by_class.keys())
    n_train = int(math.floor(train_frac * per_class))

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for label in class_names:
            (out_dir / label).mkdir(exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out_dir}: {exc}") from exc

    jobs = []
    records = []
    for ci, label in enumerate(class_names):
        for ii in range(per_class):
            rel = f"{label}/img_{ii:05d}.png"
            split = "train" if ii < n_train else "val"
            records.append(ManifestRecord(path=rel, class_label=label, split=split))
            jobs.append((ci, ii, label, rel))

    def run_job(job):
        ci, ii, label, rel = job
        img = _render_one(
            cutouts_by_class[label],
            seeds_per_image,
            canvas_size,
            background_color,
            master_seed,
            ci,
            ii,
            rotate,
            allow_overlap,
        )
        try:
            save_png(img, out_dir / rel)
        except OSError as exc:
            raise IoFailure(f"cannot write {out_dir / rel}: {exc}") from exc

    workers = int(os.environ.get("SEEDCL_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_job, jobs))
    else:
        for job in jobs:
            run_job(job)

    manifest = DatasetManifest(records=records, class_names=class_names, master_seed=master_seed, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
