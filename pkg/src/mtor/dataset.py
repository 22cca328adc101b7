"""Synthetic shape-detection domains.

A labeled *source* domain of clean procedurally drawn shapes, an unlabeled
*target* domain obtained by fogging/noising fresh scenes, COCO-style
persistence, and the shared-spatial / independent-photometric pair
augmentation used for the teacher and student views.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .config import AugConfig, DatasetConfig, ShiftConfig


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class DatasetFormatError(ValueError):
    """Malformed dataset on disk; ``sample_id`` names the offending image."""

    def __init__(self, sample_id: str | None, message: str):
        self.sample_id = sample_id
        super().__init__(f"[{sample_id}] {message}" if sample_id is not None else message)


class AnnotationLeakError(RuntimeError):
    """Target-domain boxes reached a training code path."""


@dataclass(frozen=True)
class BoxAnnotation:
    box: tuple[float, float, float, float]
    category: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")


@dataclass
class DomainSample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    boxes: list[BoxAnnotation]
    domain: Domain
    id: str

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H x W x 3, got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError(f"{self.id}: pixel values outside [0, 1]")

    def unlabeled(self) -> "DomainSample":
        return replace(self, boxes=[])


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    num_objects: tuple[int, int] = (1, 4)
    object_size: tuple[int, int] = (18, 44)
    categories: tuple[str, ...] = ("circle", "square", "triangle")
    background_style: str = "gradient"
    rng_seed: int = 0

    @classmethod
    def from_config(cls, cfg: DatasetConfig, seed: int | None = None) -> "SceneSpec":
        return cls(
            image_size=cfg.image_size,
            num_objects=tuple(cfg.num_objects),
            object_size=tuple(cfg.object_size),
            categories=tuple(cfg.categories),
            background_style=cfg.background_style,
            rng_seed=cfg.seed if seed is None else seed,
        )


SHAPES = ("circle", "square", "triangle", "diamond", "cross")
BACKGROUNDS = ("flat", "gradient", "texture")


def _to_grid(img: np.ndarray) -> np.ndarray:
    """Quantize to the 8-bit grid so PNG round trips are exact."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)).astype(np.float32) / np.float32(255.0)


quantize = _to_grid


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    # pixel-centre sampling on a size x size canvas
    c = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(c, c)
    if kind == "circle":
        m = (xx - 0.5) ** 2 + (yy - 0.5) ** 2 <= 0.25
    elif kind == "square":
        m = np.ones((size, size), dtype=bool)
    elif kind == "triangle":
        if rng.random() < 0.5:
            yy = 1.0 - yy
        m = np.abs(xx - 0.5) <= 0.5 * yy
    elif kind == "diamond":
        m = np.abs(xx - 0.5) + np.abs(yy - 0.5) <= 0.5
    elif kind == "cross":
        m = (np.abs(xx - 0.5) <= 0.17) | (np.abs(yy - 0.5) <= 0.17)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def _background(size: int, style: str, rng: np.random.Generator) -> np.ndarray:
    if style == "flat":
        return np.broadcast_to(rng.uniform(0.1, 0.9, 3), (size, size, 3)).copy()
    if style == "gradient":
        a, b = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        theta = rng.uniform(0, 2 * np.pi)
        c = np.arange(size) / (size - 1)
        xx, yy = np.meshgrid(c, c)
        t = np.clip(0.5 + (xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta), 0, 1)[..., None]
        return (1 - t) * a + t * b
    if style == "texture":
        base = rng.uniform(0.2, 0.8, 3)
        coarse = rng.normal(0, 0.08, (size // 16, size // 16, 3))
        tex = np.kron(coarse, np.ones((16, 16, 1)))
        return np.clip(base + tex, 0, 1)
    raise ValueError(f"unknown background style {style!r}")


def generate_scene(spec: SceneSpec, index: int, domain: Domain = Domain.SOURCE) -> DomainSample:
    """Draw one scene; a pure function of ``(spec.rng_seed, index)``.

    Objects never overlap, so every box is the exact tight bound of the
    pixels drawn for it.
    """
    size = spec.image_size
    if size < 64:
        raise ValueError(f"image_size must be >= 64, got {size}")
    if not spec.categories:
        raise ValueError("need at least one category")
    lo, hi = spec.num_objects
    if not 1 <= lo <= hi:
        raise ValueError(f"num_objects must satisfy 1 <= lo <= hi, got {spec.num_objects}")
    smin, smax = spec.object_size
    smax = min(smax, size - 2)

    rng = np.random.default_rng([spec.rng_seed, index])
    img = _background(size, spec.background_style, rng)
    n = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, int, int, int]] = []
    boxes: list[BoxAnnotation] = []
    for _ in range(n):
        for _attempt in range(100):
            cat = int(rng.integers(len(spec.categories)))
            s = int(rng.integers(smin, smax + 1))
            x0 = int(rng.integers(0, size - s + 1))
            y0 = int(rng.integers(0, size - s + 1))
            if all(x0 + s + 2 <= a or b + 2 <= x0 or y0 + s + 2 <= c or d + 2 <= y0 for a, c, b, d in placed):
                break
        else:
            continue
        mask = _shape_mask(spec.categories[cat], s, rng)
        region = img[y0 : y0 + s, x0 : x0 + s]
        bg = region.mean(axis=(0, 1))
        color = rng.uniform(0, 1, 3)
        while np.abs(color - bg).sum() < 0.6:
            color = rng.uniform(0, 1, 3)
        region[mask] = color
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        box = (float(x0 + cols[0]), float(y0 + rows[0]), float(x0 + cols[-1] + 1), float(y0 + rows[-1] + 1))
        placed.append((x0, y0, x0 + s, y0 + s))
        boxes.append(BoxAnnotation(box, cat))
    return DomainSample(_to_grid(img), boxes, domain, f"{domain.value}_{index:05d}")


# --------------------------------------------------------------------------
# domain shift


@dataclass(frozen=True)
class ShiftParams:
    fog_density: float = 0.5
    fog_color: tuple[float, float, float] = (0.75, 0.75, 0.78)
    noise_sigma: float = 0.05
    hue_shift: float = 0.0

    @classmethod
    def from_config(cls, cfg: ShiftConfig) -> "ShiftParams":
        return cls(cfg.fog_density, tuple(cfg.fog_color), cfg.noise_sigma, cfg.hue_shift)


def hue_rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate hue about the grey axis (luminance-preserving linear approximation)."""
    if degrees == 0:
        return image
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    k = 1.0 / 3.0
    sq = np.sqrt(k)
    # Rodrigues rotation about (1,1,1)/sqrt(3)
    m = np.array(
        [
            [c + k * (1 - c), k * (1 - c) - sq * s, k * (1 - c) + sq * s],
            [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
            [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
        ]
    )
    return image @ m.T


def apply_domain_shift(sample: DomainSample, params: ShiftParams, rng: np.random.Generator | None = None) -> DomainSample:
    if sample.domain != Domain.SOURCE:
        raise ValueError("domain shift applies to source-domain samples")
    img = hue_rotate(sample.image.astype(np.float64), params.hue_shift)
    fog = np.asarray(params.fog_color, dtype=np.float64)
    img = (1.0 - params.fog_density) * img + params.fog_density * fog
    if params.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng()
        img = img + rng.normal(0.0, params.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    new_id = sample.id.replace(Domain.SOURCE.value, Domain.TARGET.value, 1)
    return DomainSample(img, list(sample.boxes), Domain.TARGET, new_id)


# --------------------------------------------------------------------------
# pair augmentation


@dataclass(frozen=True)
class SpatialTransform:
    pad: int
    # crop window in padded coordinates (x0, y0, x1, y1)
    crop: tuple[int, int, int, int]
    flip: bool


@dataclass
class PerturbedPair:
    student_view: np.ndarray
    teacher_view: np.ndarray
    shared_spatial: SpatialTransform
    id: str = ""


def sample_spatial(size: tuple[int, int], aug: AugConfig, rng: np.random.Generator) -> SpatialTransform:
    h, w = size
    pad = int(aug.crop)
    while True:
        ox = int(rng.integers(0, 2 * pad + 1))
        oy = int(rng.integers(0, 2 * pad + 1))
        crop = (ox, oy, ox + w, oy + h)
        # overlap of the crop with the original (unpadded) image
        ix = min(crop[2], pad + w) - max(crop[0], pad)
        iy = min(crop[3], pad + h) - max(crop[1], pad)
        if ix > 0 and iy > 0:
            break
    flip = bool(aug.flip) and bool(rng.random() < 0.5)
    return SpatialTransform(pad, crop, flip)


def apply_spatial(image: np.ndarray, t: SpatialTransform) -> np.ndarray:
    out = image
    if t.pad:
        out = np.pad(out, ((t.pad, t.pad), (t.pad, t.pad), (0, 0)), mode="edge")
    x0, y0, x1, y1 = t.crop
    out = out[y0:y1, x0:x1]
    if t.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def transform_boxes(boxes: Sequence[BoxAnnotation], t: SpatialTransform, size: tuple[int, int]) -> list[BoxAnnotation]:
    """Map boxes through ``t``; boxes pushed fully outside the view are dropped."""
    h, w = size
    dx, dy = t.pad - t.crop[0], t.pad - t.crop[1]
    out = []
    for b in boxes:
        x0, y0, x1, y1 = b.box
        x0, x1 = np.clip([x0 + dx, x1 + dx], 0, w)
        y0, y1 = np.clip([y0 + dy, y1 + dy], 0, h)
        if t.flip:
            x0, x1 = w - x1, w - x0
        if x1 > x0 and y1 > y0:
            out.append(BoxAnnotation((float(x0), float(y0), float(x1), float(y1)), b.category))
    return out


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float) -> np.ndarray:
    """Factors multiply (1.0 is identity); ``hue`` is a rotation in turns."""
    img = image.astype(np.float64) * brightness
    grey = img @ np.array([0.299, 0.587, 0.114])
    img = (img - grey.mean()) * contrast + grey.mean()
    grey = (img @ np.array([0.299, 0.587, 0.114]))[..., None]
    img = grey + (img - grey) * saturation
    img = hue_rotate(img, 360.0 * hue)
    return np.clip(img, 0.0, 1.0)


# AlexNet-style lighting noise basis (ImageNet RGB statistics)
_PCA_EIGVAL = np.array([0.2175, 0.0188, 0.0045])
_PCA_EIGVEC = np.array(
    [
        [-0.5675, 0.7192, 0.4009],
        [-0.5808, -0.0045, -0.8140],
        [-0.5836, -0.6948, 0.4203],
    ]
)


def pca_noise(image: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    shift = _PCA_EIGVEC @ (coeffs * _PCA_EIGVAL)
    return np.clip(image.astype(np.float64) + shift, 0.0, 1.0)


def _photometric(image: np.ndarray, aug: AugConfig, rng: np.random.Generator) -> np.ndarray:
    use_jitter = aug.jitter > 0 and (aug.pca_noise <= 0 or rng.random() < 0.5)
    if use_jitter:
        j = aug.jitter
        b, c, s = rng.uniform(1 - j, 1 + j, 3)
        h = rng.uniform(-j / 4, j / 4)
        return color_jitter(image, b, c, s, h)
    if aug.pca_noise > 0:
        return pca_noise(image, rng.normal(0.0, aug.pca_noise, 3))
    return image.astype(np.float64)


def augment_pair(sample: DomainSample, aug: AugConfig, rng: np.random.Generator) -> PerturbedPair:
    """One shared spatial transform, then an independent photometric draw per view."""
    if sample.domain != Domain.TARGET:
        raise ValueError("augment_pair expects a target-domain sample")
    if sample.boxes:
        raise AnnotationLeakError(f"{sample.id}: target boxes must be stripped before training")
    h, w = sample.image.shape[:2]
    t = sample_spatial((h, w), aug, rng)
    base = apply_spatial(sample.image, t)
    student = _photometric(base, aug, rng).astype(np.float32)
    teacher = _photometric(base, aug, rng).astype(np.float32)
    return PerturbedPair(student, teacher, t, sample.id)


# --------------------------------------------------------------------------
# persistence


def write_dataset(samples: Iterable[DomainSample], path: str | Path, categories: Sequence[str]) -> None:
    """Write ``images/*.png`` plus a COCO-style ``annotations.json`` (boxes as x, y, w, h)."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    domain = None
    for i, s in enumerate(samples):
        domain = s.domain.value
        fname = f"{s.id}.png"
        Image.fromarray(np.round(s.image * 255.0).astype(np.uint8)).save(root / "images" / fname)
        h, w = s.image.shape[:2]
        images.append({"id": i, "file_name": fname, "width": w, "height": h, "sample_id": s.id, "domain": s.domain.value})
        for b in s.boxes:
            x0, y0, x1, y1 = b.box
            annotations.append(
                {
                    "id": len(annotations),
                    "image_id": i,
                    "category_id": b.category,
                    "bbox": [x0, y0, x1 - x0, y1 - y0],
                    "area": (x1 - x0) * (y1 - y0),
                    "iscrowd": 0,
                }
            )
    doc = {
        "info": {"domain": domain, "format": "mtor-shapes", "version": 1},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": n} for i, n in enumerate(categories)],
    }
    (root / "annotations.json").write_text(json.dumps(doc, indent=1))


def read_categories(path: str | Path) -> list[str]:
    doc = _load_doc(Path(path))
    return [c["name"] for c in sorted(doc["categories"], key=lambda c: c["id"])]


def _load_doc(root: Path) -> dict:
    ann = root / "annotations.json"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.json under {root}")
    try:
        doc = json.loads(ann.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(None, f"annotations.json is not valid JSON: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DatasetFormatError(None, f"annotations.json lacks '{key}'")
    return doc


def read_dataset(path: str | Path) -> list[DomainSample]:
    """Read a split including its annotations.

    Used for source training data and for evaluation.  Training code that
    consumes target data must go through :func:`read_unlabeled`.
    """
    root = Path(path)
    doc = _load_doc(root)
    ncat = len(doc["categories"])
    by_image: dict[int, list[BoxAnnotation]] = {}
    id_of = {im["id"]: im.get("sample_id", str(im["id"])) for im in doc["images"]}
    for a in doc["annotations"]:
        sid = id_of.get(a.get("image_id"))
        if sid is None:
            raise DatasetFormatError(str(a.get("image_id")), "annotation refers to unknown image")
        try:
            x, y, w, h = (float(v) for v in a["bbox"])
            cat = int(a["category_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(sid, f"malformed annotation {a.get('id')}: {exc}") from exc
        if w <= 0 or h <= 0:
            raise DatasetFormatError(sid, f"annotation {a.get('id')} has x_min >= x_max or y_min >= y_max")
        if not 0 <= cat < ncat:
            raise DatasetFormatError(sid, f"annotation {a.get('id')} has category {cat} outside [0, {ncat})")
        by_image.setdefault(a["image_id"], []).append(BoxAnnotation((x, y, x + w, y + h), cat))
    out = []
    for im in doc["images"]:
        sid = id_of[im["id"]]
        try:
            arr = np.asarray(Image.open(root / "images" / im["file_name"]).convert("RGB"))
        except (OSError, KeyError) as exc:
            raise DatasetFormatError(sid, f"cannot load image: {exc}") from exc
        domain = Domain(im.get("domain", doc.get("info", {}).get("domain") or "source"))
        out.append(DomainSample(arr.astype(np.float32) / np.float32(255.0), by_image.get(im["id"], []), domain, sid))
    return out


def read_unlabeled(path: str | Path) -> list[DomainSample]:
    """Training-scoped reader for target splits: annotations are never returned."""
    return [s.unlabeled() for s in read_dataset(path)]


# --------------------------------------------------------------------------
# whole benchmark


def build_domains(cfg: DatasetConfig) -> dict[str, list[DomainSample]]:
    """Generate every split; a pure function of ``cfg``."""
    spec = SceneSpec.from_config(cfg)
    shift = ShiftParams.from_config(cfg.shift)
    source = [generate_scene(spec, i) for i in range(cfg.size.source)]

    def target_split(offset: int, n: int, tag: str) -> list[DomainSample]:
        out = []
        for i in range(n):
            raw = generate_scene(spec, offset + i)
            shifted = apply_domain_shift(raw, shift, np.random.default_rng([cfg.seed, offset + i, 7]))
            out.append(replace(shifted, image=quantize(shifted.image), id=f"{tag}_{i:05d}"))
        return out

    splits = {"source": source, "target": target_split(1_000_000, cfg.size.target, "target")}
    if cfg.size.target_test:
        splits["target_test"] = target_split(2_000_000, cfg.size.target_test, "target_test")
    return splits


def category_histogram(samples: Iterable[DomainSample], categories: Sequence[str]) -> dict[str, int]:
    hist = {c: 0 for c in categories}
    for s in samples:
        for b in s.boxes:
            hist[categories[b.category]] += 1
    return hist


def to_chw(image: np.ndarray):
    import torch

    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
