"""Paired image/mask datasets, rotation augmentation and synthetic data."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, LoadError
from .pgm import read_pgm, write_pgm

DEFAULT_ROTATION = 15.0
MASK_SUFFIX = "_mask"


@dataclass(frozen=True)
class Augmentation:
    angle: float
    source_index: int


@dataclass(frozen=True)
class Sample:
    """Grayscale image in [0, 1] with its binary mask.

    ``origin`` is ``None`` for original samples and an :class:`Augmentation`
    for rotated copies.
    """

    image: np.ndarray
    mask: np.ndarray
    stem: str = ""
    origin: Augmentation | None = None

    def __post_init__(self):
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ContractError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if not np.isin(self.mask, (0, 1)).all():
            raise ContractError(f"mask of {self.stem or 'sample'} is not binary")

    @property
    def augmented(self) -> bool:
        return self.origin is not None


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    name: str = "dataset"

    def __post_init__(self):
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) > 1:
            raise ContractError(f"dataset {self.name!r} mixes sample sizes {sorted(shapes)}")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    def __iter__(self):
        return iter(self.samples)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples[0].image.shape

    def subset(self, indices, name: str | None = None) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], name or self.name)

    def images(self, dtype=np.float32) -> np.ndarray:
        """All images stacked as ``(n, 1, h, w)``."""
        return np.stack([s.image for s in self.samples])[:, None].astype(dtype)

    def masks(self, dtype=np.float32) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])[:, None].astype(dtype)


# -- disk format ----------------------------------------------------------------

def load_dataset(directory: str | os.PathLike, require_masks: bool = True) -> Dataset:
    """Read ``<stem>.pgm`` / ``<stem>_mask.pgm`` pairs, ordered by stem.

    Images are scaled from 8-bit to [0, 1]; mask pixels >= 128 become 1.
    With ``require_masks=False`` unpaired images get an all-zero mask (used
    when predicting on unlabeled data).
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise LoadError(f"{directory} is not a directory")
    stems = sorted(p.stem for p in directory.glob("*.pgm") if not p.stem.endswith(MASK_SUFFIX))
    samples = []
    for stem in stems:
        img = read_pgm(directory / f"{stem}.pgm")
        mask_path = directory / f"{stem}{MASK_SUFFIX}.pgm"
        if mask_path.exists():
            m = read_pgm(mask_path)
        elif require_masks:
            raise LoadError(f"missing mask for image {stem!r} (expected {mask_path.name})")
        else:
            m = np.zeros_like(img)
        if img.shape != m.shape:
            raise LoadError(f"size mismatch for {stem!r}: image {img.shape}, mask {m.shape}")
        samples.append(Sample(img.astype(np.float64) / 255.0, (m >= 128).astype(np.uint8), stem))
    try:
        return Dataset(samples, directory.name)
    except ContractError as exc:
        raise LoadError(str(exc)) from None


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def mask_to_u8(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) > 0).astype(np.uint8) * 255


def save_dataset(ds: Dataset, directory: str | os.PathLike) -> list[str]:
    """Write every sample as a PGM pair; returns the stems written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stems = []
    for idx, s in enumerate(ds):
        stem = s.stem or f"s{idx:04d}"
        write_pgm(directory / f"{stem}.pgm", image_to_u8(s.image))
        write_pgm(directory / f"{stem}{MASK_SUFFIX}.pgm", mask_to_u8(s.mask))
        stems.append(stem)
    return stems


# -- rotation -----------------------------------------------------------------------

def _quarter_turns(angle: float) -> int | None:
    q = angle / 90.0
    return int(round(q)) % 4 if q == round(q) else None


def _rotate(arr: np.ndarray, angle: float, order: int) -> np.ndarray:
    """Counter-clockwise rotation about the array centre with zero fill.

    Exact multiples of 90 degrees are pure pixel permutations.
    """
    if not -180.0 <= angle <= 180.0:
        raise ContractError(f"rotation angle must lie in [-180, 180], got {angle}")
    turns = _quarter_turns(angle)
    if turns is not None and (turns % 2 == 0 or arr.shape[0] == arr.shape[1]):
        return np.rot90(arr, turns).copy()
    return _rotate_interp(arr, angle, order)


def _rotate_interp(arr: np.ndarray, angle: float, order: int) -> np.ndarray:
    theta = np.deg2rad(angle)
    c, s = np.cos(theta), np.sin(theta)
    # maps output (row, col) offsets from the centre back to input offsets
    matrix = np.array([[c, s], [-s, c]])
    centre = (np.array(arr.shape, dtype=np.float64) - 1) / 2
    offset = centre - matrix @ centre
    out = ndimage.affine_transform(arr.astype(np.float64), matrix, offset=offset,
                                   output_shape=arr.shape, order=order, mode="constant", cval=0.0)
    return out


def rotate_image(image: np.ndarray, angle: float) -> np.ndarray:
    """Bilinear rotation; values outside the source are 0."""
    out = _rotate(image, angle, order=1)
    return np.clip(out, 0.0, 1.0) if out.dtype.kind == "f" else out


def rotate_mask(mask: np.ndarray, angle: float) -> np.ndarray:
    """Nearest-neighbour rotation, so the result stays binary."""
    return (_rotate(mask, angle, order=0) > 0.5).astype(np.uint8)


def rotate_pair(sample: Sample, angle: float, source_index: int = 0) -> Sample:
    """Rotate image and mask by the same transform."""
    return Sample(rotate_image(sample.image, angle), rotate_mask(sample.mask, angle),
                  sample.stem, Augmentation(float(angle), source_index))


def sample_angle(seed: int, index: int, rotation: float) -> float:
    """Angle for sample ``index``, drawn from its own ``(seed, index)`` stream."""
    return float(np.random.default_rng([seed, index]).uniform(-rotation, rotation))


def augment_dataset(ds: Dataset, rotation: float = DEFAULT_ROTATION, seed: int = 0) -> Dataset:
    """Originals followed by one randomly rotated copy of each, in order."""
    if len(ds) == 0:
        raise ContractError("cannot augment an empty dataset")
    copies = []
    for idx, s in enumerate(ds):
        rotated = rotate_pair(s, sample_angle(seed, idx, rotation), source_index=idx)
        stem = f"{s.stem or f's{idx:04d}'}_aug1"
        copies.append(Sample(rotated.image, rotated.mask, stem, rotated.origin))
    return Dataset(list(ds.samples) + copies, f"{ds.name}+aug")


# -- synthetic data -------------------------------------------------------------------

def _ellipse(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v


def synth_sample(size: int, rng: np.random.Generator, max_tries: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """One noisy image with 1-2 bright elliptical regions and their exact mask."""
    for _ in range(max_tries):
        r2_all = []
        for _ in range(rng.integers(1, 3)):
            cy = rng.uniform(0.25, 0.75) * size
            cx = rng.uniform(0.2, 0.8) * size
            ry = rng.uniform(0.12, 0.3) * size
            rx = rng.uniform(0.08, 0.2) * size
            r2_all.append(_ellipse(size, size, cy, cx, ry, rx, rng.uniform(-0.5, 0.5)))
        r2 = np.minimum.reduce(r2_all)
        mask = (r2 <= 1.0).astype(np.uint8)
        if 0.05 <= mask.mean() <= 0.6:
            break
    else:
        raise RuntimeError("could not draw a mask with foreground fraction in [0.05, 0.6]")
    # bright interior that dims smoothly toward the rim, on a noisy dark background
    inside = np.where(mask > 0, 0.55 + 0.2 * (1 - np.clip(r2, 0, 1)), 0.0)
    background = 0.2 + 0.05 * np.sin(np.linspace(0, np.pi, size))[None, :]
    image = np.where(mask > 0, inside, background) + rng.normal(0, 0.06, (size, size))
    image = np.rint(np.clip(image, 0, 1) * 255) / 255.0
    return image, mask


def synth_generate(count: int, size: int = 64, seed: int = 0) -> Dataset:
    """Deterministic synthetic dataset; sample ``i`` depends only on ``(seed, i)``."""
    samples = []
    for idx in range(count):
        rng = np.random.default_rng([seed, idx, 0x5E6])
        image, mask = synth_sample(size, rng)
        samples.append(Sample(image, mask, f"synth{idx:04d}"))
    return Dataset(samples, f"synth-{seed}")
