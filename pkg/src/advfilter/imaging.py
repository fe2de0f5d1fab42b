"""
Image types, dataset ingestion and image-quality metrics.

Images live in memory as float tensors of shape 3×H×W with values in [0, 1]
(batches are N×3×H×W). On disk and at decode time they are channel-last
8-bit arrays, converted with ``to_tensor`` / ``to_array``.

Dataset layouts:
- folder:    root/<class_name>/<image files>, 8-bit PNG/JPEG
- packed:    b"AFPK" magic, uint32 H, W, N (little endian), then N records of
             H*W*3 pixel bytes + 1 label byte; optional ``<file>.idx.json`` sidecar
             holding class names
- synthetic: deterministic striped patterns, one orientation/colour per class
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from advfilter.errors import DatasetError, ShapeError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}
PACKED_MAGIC = b"AFPK"
MIN_EXTENT = 8
PSNR_CAP = 100.0
MAX_SKIP_FRACTION = 0.01

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """A 3×H×W image in [0, 1] and its class index."""
    image: torch.Tensor
    label: int

    @property
    def height(self) -> int:
        return int(self.image.shape[-2])

    @property
    def width(self) -> int:
        return int(self.image.shape[-1])


@dataclass(frozen=True)
class QualityReport:
    """PSNR (dB, capped) and SSIM of one image against its reference."""
    psnr: float
    ssim: float


@dataclass
class DatasetSource:
    """Dataset descriptor: where images come from and in which layout."""
    kind: str = "synthetic"  # auto | folder | packed | synthetic
    path: str | None = None
    num_classes: int = 10
    height: int = 32
    width: int = 32
    split: str = "train"  # seeds synthetic images so train/test never coincide

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DatasetSource:
        return cls(
            kind=data.get("kind", "synthetic"),
            path=data.get("path"),
            num_classes=int(data.get("num_classes", 10)),
            height=int(data.get("height", 32)),
            width=int(data.get("width", 32)),
            split=data.get("split", "train"),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def resolved_kind(self) -> str:
        if self.kind != "auto":
            return self.kind
        if self.path is None:
            return "synthetic"
        return "folder" if Path(self.path).is_dir() else "packed"


# ---------------------------------------------------------------------------
# Tensor conversion
# ---------------------------------------------------------------------------

def to_tensor(array: np.ndarray) -> torch.Tensor:
    """Channel-last array (uint8 0..255 or float 0..1) -> 3×H×W float32 tensor."""
    if array.ndim != 3 or array.shape[-1] != 3:
        raise ShapeError(f"Expected H×W×3 array, got shape {array.shape}")
    if array.dtype == np.uint8:
        data = array.astype(np.float32) / 255.0
    else:
        data = array.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1)))


def to_array(image: torch.Tensor) -> np.ndarray:
    """3×H×W tensor in [0, 1] -> H×W×3 uint8 array."""
    data = image.detach().float().clamp(0.0, 1.0).cpu().numpy().transpose(1, 2, 0)
    return np.round(data * 255.0).astype(np.uint8)


def validate_image(image: torch.Tensor) -> None:
    """Check the ImageTensor contract: 3×H×W, H, W >= 8, finite, inside [0, 1]."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ShapeError(f"Expected a 3×H×W image, got shape {tuple(image.shape)}")
    if image.shape[1] < MIN_EXTENT or image.shape[2] < MIN_EXTENT:
        raise ShapeError(f"Image {tuple(image.shape)} smaller than {MIN_EXTENT}×{MIN_EXTENT}")
    if not torch.isfinite(image).all():
        raise ShapeError("Image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ShapeError("Image values outside [0, 1]")


def load_image(path: str | Path) -> torch.Tensor:
    """Decode an 8-bit image file into a 3×H×W tensor."""
    with Image.open(path) as img:
        return to_tensor(np.asarray(img.convert("RGB"), dtype=np.uint8))


def save_image(image: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_array(image)).save(path)


def stack_images(images: Sequence[LabeledImage]) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch a sequence of LabeledImage into (N×3×H×W, N) tensors."""
    if not images:
        raise DatasetError("Cannot stack an empty image sequence")
    x = torch.stack([item.image for item in images])
    y = torch.tensor([item.label for item in images], dtype=torch.long)
    return x, y


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------

def load_dataset(source: DatasetSource, subset_size: int, seed: int) -> list[LabeledImage]:
    """
    Load a deterministic subset of a dataset.

    Args:
        source: Dataset descriptor.
        subset_size: Number of images to return.
        seed: Sampling seed; the same (source, subset_size, seed) always yields the same list.

    Returns:
        List of LabeledImage. Folder layouts are sampled class-balanced.
    """
    if subset_size < 0:
        raise DatasetError(f"subset_size must be >= 0, got {subset_size}")
    if subset_size == 0:
        return []

    kind = source.resolved_kind()
    if kind == "synthetic":
        return _load_synthetic(source, subset_size, seed)
    if source.path is None:
        raise DatasetError(f"Dataset layout {kind!r} needs a path")
    path = Path(source.path)
    if not path.exists():
        raise DatasetError(f"Dataset source not found: {path}")
    if kind == "folder":
        return _load_folder(path, subset_size, seed)
    if kind == "packed":
        return _load_packed(path, subset_size, seed)
    raise DatasetError(f"Unsupported dataset layout: {source.kind!r}")


def balanced_quotas(sizes: Sequence[int], total: int) -> list[int]:
    """Split ``total`` as evenly as possible over classes, never past a class's size."""
    quotas = [0] * len(sizes)
    remaining = total
    open_classes = [i for i, size in enumerate(sizes) if size > 0]
    while remaining and open_classes:
        share, extra = divmod(remaining, len(open_classes))
        for rank, i in enumerate(open_classes):
            give = min(share + (1 if rank < extra else 0), sizes[i] - quotas[i])
            quotas[i] += give
            remaining -= give
        open_classes = [i for i in open_classes if quotas[i] < sizes[i]]
    return quotas


def _load_folder(root: Path, subset_size: int, seed: int) -> list[LabeledImage]:
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"No class folders under {root}")

    files_per_class = [
        sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS) for d in class_dirs
    ]
    available = sum(len(files) for files in files_per_class)
    if subset_size > available:
        raise DatasetError(f"Requested {subset_size} images but {root} holds {available}")

    # Classes short of an even share (or hit by unreadable files) hand the rest to the others
    num_classes = len(class_dirs)
    orders = [
        [files[i] for i in np.random.default_rng([seed, label]).permutation(len(files))]
        for label, files in enumerate(files_per_class)
    ]
    cursors = [0] * num_classes
    per_class: list[list[LabeledImage]] = [[] for _ in range(num_classes)]
    attempted = 0
    skipped = 0
    quotas = balanced_quotas([len(o) for o in orders], subset_size)
    while True:
        for label, order in enumerate(orders):
            while len(per_class[label]) < quotas[label] and cursors[label] < len(order):
                path = order[cursors[label]]
                cursors[label] += 1
                attempted += 1
                try:
                    image = load_image(path)
                except (OSError, UnidentifiedImageError, ValueError) as e:
                    skipped += 1
                    logger.warning(f"Skipping corrupt image {path}: {e}")
                    continue
                per_class[label].append(LabeledImage(image=image, label=label))
        shortfall = subset_size - sum(len(records) for records in per_class)
        if shortfall == 0:
            break
        unread = [len(order) - cursor for order, cursor in zip(orders, cursors)]
        if sum(unread) == 0:
            raise DatasetError(
                f"Needed {subset_size} readable images under {root}, found {subset_size - shortfall}"
            )
        quotas = [len(records) + extra
                  for records, extra in zip(per_class, balanced_quotas(unread, shortfall))]

    if attempted and skipped / attempted > MAX_SKIP_FRACTION:
        raise DatasetError(
            f"{skipped}/{attempted} images under {root} were unreadable (more than 1%)"
        )
    records = [item for records in per_class for item in records]
    logger.info(f"Loaded {len(records)} images from {num_classes} classes under {root}")
    return records


def _packed_dtype(height: int, width: int) -> np.dtype:
    return np.dtype([("pixels", np.uint8, (height, width, 3)), ("label", np.uint8)])


def _read_packed_header(path: Path) -> tuple[int, int, int]:
    with open(path, "rb") as f:
        header = f.read(16)
    if len(header) < 16 or header[:4] != PACKED_MAGIC:
        raise DatasetError(f"{path} is not a packed dataset (bad magic)")
    height, width, count = np.frombuffer(header[4:], dtype="<u4")
    return int(height), int(width), int(count)


def _load_packed(path: Path, subset_size: int, seed: int) -> list[LabeledImage]:
    height, width, count = _read_packed_header(path)
    dtype = _packed_dtype(height, width)
    expected = 16 + count * dtype.itemsize
    if path.stat().st_size < expected:
        raise DatasetError(f"{path} is truncated: expected {expected} bytes")
    if subset_size > count:
        raise DatasetError(f"Requested {subset_size} images but {path} holds {count}")

    records = np.memmap(path, dtype=dtype, mode="r", offset=16, shape=(count,))
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(count, size=subset_size, replace=False))
    images = [
        LabeledImage(image=to_tensor(np.array(records[i]["pixels"])), label=int(records[i]["label"]))
        for i in indices
    ]
    logger.info(f"Loaded {len(images)} of {count} packed images from {path}")
    return images


def write_packed_dataset(
    images: Sequence[LabeledImage],
    path: str | Path,
    class_names: Sequence[str] | None = None,
) -> Path:
    """Write images in the packed layout plus its JSON index sidecar."""
    path = Path(path)
    if not images:
        raise DatasetError("Refusing to write an empty packed dataset")
    height, width = images[0].height, images[0].width
    dtype = _packed_dtype(height, width)
    records = np.zeros(len(images), dtype=dtype)
    for i, item in enumerate(images):
        if (item.height, item.width) != (height, width):
            raise ShapeError("All packed images must share one size")
        records[i]["pixels"] = to_array(item.image)
        records[i]["label"] = item.label

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(PACKED_MAGIC)
        f.write(np.array([height, width, len(images)], dtype="<u4").tobytes())
        f.write(records.tobytes())

    labels = sorted({item.label for item in images})
    sidecar = {
        "count": len(images),
        "height": height,
        "width": width,
        "classes": list(class_names) if class_names else [str(label) for label in labels],
    }
    with open(packed_sidecar(path), "w") as f:
        json.dump(sidecar, f, indent=2)
    return path


def packed_sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".idx.json")


def _class_palette(label: int) -> np.ndarray:
    rng = np.random.default_rng([1234, label])
    return rng.uniform(0.15, 0.95, size=3)


def synthetic_image(label: int, num_classes: int, height: int, width: int,
                    rng: np.random.Generator) -> np.ndarray:
    """One striped H×W×3 uint8 image whose orientation, frequency and hue encode the class."""
    angle = math.pi * label / num_classes
    freq = 2 + (label % 3)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    coord = (xx * math.cos(angle) + yy * math.sin(angle)) / max(height, width)
    pattern = 0.5 + 0.4 * np.sin(2.0 * math.pi * freq * coord + phase)
    color = np.clip(_class_palette(label) + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    image = pattern[..., None] * color + (1.0 - pattern[..., None]) * (1.0 - color) * 0.5
    image += rng.normal(0.0, 0.03, size=image.shape)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _load_synthetic(source: DatasetSource, subset_size: int, seed: int) -> list[LabeledImage]:
    split_id = int(hashlib.sha256(source.split.encode()).hexdigest()[:8], 16)
    records = []
    for i in range(subset_size):
        label = i % source.num_classes
        rng = np.random.default_rng([seed, split_id, i])
        array = synthetic_image(label, source.num_classes, source.height, source.width, rng)
        records.append(LabeledImage(image=to_tensor(array), label=label))
    return records


def dataset_fingerprint(images: Sequence[LabeledImage]) -> str:
    """Content hash of an image list (pixels and labels)."""
    digest = hashlib.sha256()
    for item in images:
        digest.update(to_array(item.image).tobytes())
        digest.update(int(item.label).to_bytes(4, "little"))
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------

def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _psnr_from_mse(mse: torch.Tensor) -> torch.Tensor:
    capped = torch.full_like(mse, PSNR_CAP)
    safe = torch.clamp(mse, min=1e-10)
    return torch.where(mse < 1e-10, capped, 10.0 * torch.log10(1.0 / safe))


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for unit dynamic range, capped at 100 dB when MSE < 1e-10."""
    _check_same_shape(a, b)
    mse = torch.mean((a.double() - b.double()) ** 2)
    return float(_psnr_from_mse(mse))


def batch_psnr(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image PSNR of two N×C×H×W batches."""
    _check_same_shape(a, b)
    mse = ((a.double() - b.double()) ** 2).flatten(1).mean(dim=1)
    return _psnr_from_mse(mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_map(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Local SSIM over 'valid' 11×11 Gaussian windows; x, y are N×C×H×W float64."""
    channels = x.shape[1]
    window = gaussian_window().to(x.device)
    weight = window.expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, weight, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x**2
    sigma_y = blur(y * y) - mu_y**2
    sigma_xy = blur(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    denominator = (mu_x**2 + mu_y**2 + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return numerator / denominator


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    if t.dim() < 2:
        raise ShapeError(f"SSIM needs at least 2 spatial dims, got {tuple(t.shape)}")
    h, w = t.shape[-2:]
    if min(h, w) < SSIM_WINDOW:
        raise ShapeError(f"Image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")
    return t.double().reshape(1, -1, h, w)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Single-scale SSIM (11×11 Gaussian, sigma 1.5), averaged over channels."""
    _check_same_shape(a, b)
    return float(_ssim_map(_as_batch(a), _as_batch(b)).mean())


def batch_ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image SSIM of two N×C×H×W batches."""
    _check_same_shape(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"Images {tuple(a.shape[-2:])} are smaller than the SSIM window")
    return _ssim_map(a.double(), b.double()).flatten(1).mean(dim=1)


def quality(a: torch.Tensor, b: torch.Tensor) -> QualityReport:
    return QualityReport(psnr=psnr(a, b), ssim=ssim(a, b))
