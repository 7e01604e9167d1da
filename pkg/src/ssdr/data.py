"""Dataset ingestion, preprocessing, splitting, augmentation, noise
injection, and a synthetic six-class texture generator for environments
without the real defect images.

All images are 200x200 8-bit grayscale. Class ids follow the alphabetical
order of the six canonical class directory names so label assignments and
confusion matrices are reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container

CLASS_NAMES = (
    "crazing",
    "inclusion",
    "patches",
    "pitted_surface",
    "rolled-in_scale",
    "scratches",
)
IMAGE_SIZE = 200
INPUT_SIZE = 224
IMAGE_SUFFIXES = (".png", ".bmp", ".jpg")


class DataError(Exception):
    """Dataset layout or image decoding failure."""


@dataclass
class LabeledImage:
    pixels: np.ndarray  # uint8 [200, 200]
    label: int

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE) or self.pixels.dtype != np.uint8:
            raise DataError(
                f"image must be uint8 {IMAGE_SIZE}x{IMAGE_SIZE}, "
                f"got {self.pixels.dtype} {self.pixels.shape}"
            )
        if not 0 <= self.label < len(CLASS_NAMES):
            raise DataError(f"label must lie in [0, {len(CLASS_NAMES)}), got {self.label}")


@dataclass
class Dataset:
    images: list
    provenance: str
    per_class: tuple

    @classmethod
    def from_images(cls, images, provenance: str) -> "Dataset":
        counts = [0] * len(CLASS_NAMES)
        for img in images:
            counts[img.label] += 1
        return cls(list(images), provenance, tuple(counts))

    def __len__(self) -> int:
        return len(self.images)

    def labels(self) -> np.ndarray:
        return np.array([img.label for img in self.images], dtype=np.int64)


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    per_class_train: int = 150
    per_class_test: int = 150


@dataclass(frozen=True)
class AugmentationPlan:
    brightness: bool = False
    flips: bool = False
    rotations: bool = False

    @property
    def factor(self) -> int:
        return (4 if self.brightness else 1) * (4 if self.flips else 1) * (4 if self.rotations else 1)


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    apply_to_train: bool = True
    apply_to_test: bool = True

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")


def load_dataset(root_dir) -> Dataset:
    """Reads <root>/<class_name>/*.png|bmp|jpg, ordered by (class, filename)."""
    from PIL import Image

    root = Path(root_dir)
    missing = [name for name in CLASS_NAMES if not (root / name).is_dir()]
    if missing:
        raise DataError(f"{root}: missing class directories {missing}")
    images = []
    for label, name in enumerate(CLASS_NAMES):
        files = sorted(
            p for p in (root / name).iterdir()
            if p.suffix.lower() in IMAGE_SUFFIXES
        )
        for path in files:
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("L"))
            except Exception as e:
                raise DataError(f"{path}: cannot decode image ({e})") from e
            if arr.shape != (IMAGE_SIZE, IMAGE_SIZE):
                raise DataError(
                    f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {arr.shape[1]}x{arr.shape[0]}"
                )
            images.append(LabeledImage(arr.astype(np.uint8), label))
    return Dataset.from_images(images, str(root))


def split(dataset: Dataset, spec: SplitSpec):
    """Per class, a seeded shuffle assigns the first images to train and the
    next to test; the two sides are disjoint and deterministic per seed."""
    need = spec.per_class_train + spec.per_class_test
    by_class = [[] for _ in CLASS_NAMES]
    for img in dataset.images:
        by_class[img.label].append(img)
    train, test = [], []
    for label, group in enumerate(by_class):
        if len(group) < need:
            raise DataError(
                f"class {CLASS_NAMES[label]!r} has {len(group)} images, needs {need} to split"
            )
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, label]))
        order = rng.permutation(len(group))
        train.extend(group[i] for i in order[: spec.per_class_train])
        test.extend(group[i] for i in order[spec.per_class_train : need])
    return (
        Dataset.from_images(train, f"{dataset.provenance}#train"),
        Dataset.from_images(test, f"{dataset.provenance}#test"),
    )


def sample_n_per_class(train: Dataset, n: int, seed: int) -> Dataset:
    """Uniform sample of n images per class without replacement.

    Sampling takes the first n of a seeded per-class shuffle, so for a fixed
    seed the n-image sample is a prefix of (hence nested inside) any larger
    sample.
    """
    by_class = [[] for _ in CLASS_NAMES]
    for img in train.images:
        by_class[img.label].append(img)
    limit = min(len(g) for g in by_class)
    if not 1 <= n <= limit:
        raise DataError(f"n must lie in [1, {limit}], got {n}")
    picked = []
    for label, group in enumerate(by_class):
        rng = np.random.default_rng(np.random.SeedSequence([seed, label]))
        order = rng.permutation(len(group))
        picked.extend(group[i] for i in order[:n])
    return Dataset.from_images(picked, f"{train.provenance}#n{n}")


def _bilinear_resize(src: np.ndarray, dst: int) -> np.ndarray:
    """Half-pixel bilinear resampling: source coordinate
    s = (d + 0.5) * size_in / size_out - 0.5, clamped to the image."""
    size = src.shape[0]
    coords = np.clip((np.arange(dst) + 0.5) * (size / dst) - 0.5, 0.0, size - 1.0)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = (coords - i0).astype(np.float32)
    rows = src[i0] * (1.0 - frac)[:, None] + src[i1] * frac[:, None]
    out = rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i1] * frac[None, :]
    return out.astype(np.float32)


def preprocess(img: LabeledImage) -> np.ndarray:
    """200x200 grayscale -> [3, 224, 224] float32: subtract the image's own
    mean, bilinear-resize, replicate the channel three times."""
    g = img.pixels.astype(np.float32)
    g -= np.float32(g.mean(dtype=np.float64))
    r = _bilinear_resize(g, INPUT_SIZE)
    return np.repeat(r[None], 3, axis=0)


def preprocess_batch(images) -> np.ndarray:
    out = np.empty((len(images), 3, INPUT_SIZE, INPUT_SIZE), np.float32)
    for i, img in enumerate(images):
        out[i] = preprocess(img)
    return out


BRIGHTNESS_GAINS = (1.2, 1.4, 1.6)


def augment_brightness(img: LabeledImage) -> list:
    """p' = round(p * k + 10) for k in 1.2/1.4/1.6, clamped at 255."""
    out = []
    p = img.pixels.astype(np.float64)
    for k in BRIGHTNESS_GAINS:
        arr = np.minimum(np.rint(p * k + 10.0), 255.0).astype(np.uint8)
        out.append(LabeledImage(arr, img.label))
    return out


def augment_flips(img: LabeledImage) -> list:
    """Horizontal, vertical, and both-axis flips; pixel-exact."""
    p = img.pixels
    return [
        LabeledImage(np.ascontiguousarray(p[:, ::-1]), img.label),
        LabeledImage(np.ascontiguousarray(p[::-1, :]), img.label),
        LabeledImage(np.ascontiguousarray(p[::-1, ::-1]), img.label),
    ]


def augment_rotations(img: LabeledImage) -> list:
    """Clockwise rotations by 90, 180 and 270 degrees (index permutations)."""
    p = img.pixels
    if p.shape[0] != p.shape[1]:
        raise DataError(f"rotation requires a square image, got {p.shape}")
    return [
        LabeledImage(np.ascontiguousarray(np.rot90(p, k=-1)), img.label),
        LabeledImage(np.ascontiguousarray(np.rot90(p, k=2)), img.label),
        LabeledImage(np.ascontiguousarray(np.rot90(p, k=1)), img.label),
    ]


def expand(dataset: Dataset, plan: AugmentationPlan) -> Dataset:
    """Offline Cartesian composition of the enabled transform families; each
    family contributes the identity plus its three variants."""
    out = []
    for img in dataset.images:
        stage = [img]
        if plan.brightness:
            stage = [v for x in stage for v in ([x] + augment_brightness(x))]
        if plan.flips:
            stage = [v for x in stage for v in ([x] + augment_flips(x))]
        if plan.rotations:
            stage = [v for x in stage for v in ([x] + augment_rotations(x))]
        out.extend(stage)
    return Dataset.from_images(out, f"{dataset.provenance}+aug")


def add_gaussian_noise(img: LabeledImage, spec: NoiseSpec, rng) -> LabeledImage:
    """Adds zero-mean Gaussian noise whose variance is set per image from the
    target SNR: sigma_noise^2 = pixel_variance / 10^(snr_db/10)."""
    p = img.pixels.astype(np.float64)
    signal_var = float(p.var())
    if signal_var == 0.0:
        warnings.warn("constant image: noise injection skipped", stacklevel=2)
        return LabeledImage(img.pixels.copy(), img.label)
    sigma = np.sqrt(signal_var / 10.0 ** (spec.snr_db / 10.0))
    noisy = np.clip(np.rint(p + rng.normal(0.0, sigma, p.shape)), 0.0, 255.0)
    return LabeledImage(noisy.astype(np.uint8), img.label)


def add_noise_to_dataset(dataset: Dataset, spec: NoiseSpec, seed: int) -> Dataset:
    """Independent noise per image, with per-image RNG streams derived from
    (seed, image index) so the result does not depend on evaluation order."""
    out = []
    for i, img in enumerate(dataset.images):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out.append(add_gaussian_noise(img, spec, rng))
    return Dataset.from_images(out, f"{dataset.provenance}+noise{spec.snr_db:g}dB")


# Synthetic stand-in classes: per-class base gray levels keep class means
# apart while the spatial structure carries the actual texture signal.
_SYNTH_BASES = (90.0, 115.0, 140.0, 165.0, 190.0, 65.0)


def _synth_texture(label: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    base = _SYNTH_BASES[label]
    if label == 0:  # horizontal stripes, random period and phase
        period = rng.uniform(10.0, 14.0)
        img = base + 45.0 * np.sin(2 * np.pi * (yy + rng.uniform(0, period)) / period)
        img += rng.normal(0.0, 6.0, yy.shape)
    elif label == 1:  # diagonal stripes
        period = rng.uniform(10.0, 14.0)
        diag = (xx + yy) / np.sqrt(2.0)
        img = base + 45.0 * np.sin(2 * np.pi * (diag + rng.uniform(0, period)) / period)
        img += rng.normal(0.0, 6.0, yy.shape)
    elif label in (2, 3):  # sparse vs dense blob fields
        img = np.full(yy.shape, base)
        count, lo_s, hi_s, amp = (12, 8.0, 12.0, 70.0) if label == 2 else (60, 2.5, 4.0, 45.0)
        for _ in range(count):
            cy, cx = rng.uniform(0, IMAGE_SIZE, 2)
            s = rng.uniform(lo_s, hi_s)
            a = rng.uniform(0.6, 1.0) * amp * rng.choice((-1.0, 1.0))
            img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += rng.normal(0.0, 4.0, yy.shape)
    elif label == 4:  # checkerboard with jittered cell size and offset
        cell = int(rng.integers(22, 29))
        oy, ox = rng.integers(0, cell, 2)
        parity = (((yy + oy) // cell) + ((xx + ox) // cell)) % 2
        img = base + 45.0 * (2.0 * parity - 1.0)
        img += rng.normal(0.0, 6.0, yy.shape)
    else:  # oriented ramp plus speckle
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * (xx - IMAGE_SIZE / 2) + np.sin(theta) * (yy - IMAGE_SIZE / 2)
        img = base + ramp * (30.0 / IMAGE_SIZE) + rng.normal(0.0, 15.0, yy.shape)
    return np.clip(np.rint(img), 0.0, 255.0).astype(np.uint8)


def synth_dataset(n_per_class: int, seed: int) -> Dataset:
    """Six procedurally distinct texture classes; deterministic per seed, with
    per-image RNG streams derived from (seed, class, index)."""
    if n_per_class < 1:
        raise DataError(f"n_per_class must be at least 1, got {n_per_class}")
    images = []
    for label in range(len(CLASS_NAMES)):
        for i in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, label, i]))
            images.append(LabeledImage(_synth_texture(label, rng), label))
    return Dataset.from_images(images, "synthetic")


def write_image_tree(dataset: Dataset, root) -> None:
    """Writes the dataset as <root>/<class>/<index>.png, loadable by load_dataset."""
    from PIL import Image

    root = Path(root)
    counters = [0] * len(CLASS_NAMES)
    for name in CLASS_NAMES:
        (root / name).mkdir(parents=True, exist_ok=True)
    for img in dataset.images:
        name = CLASS_NAMES[img.label]
        path = root / name / f"{counters[img.label]:04d}.png"
        counters[img.label] += 1
        Image.fromarray(img.pixels, mode="L").save(path)


def save_dataset_cache(dataset: Dataset, path) -> None:
    """Caches a dataset in the tensor-container format (img_<i>, label_<i>)."""
    tensors = []
    for i, img in enumerate(dataset.images):
        tensors.append((f"img_{i}", img.pixels.astype(np.float32)))
        tensors.append((f"label_{i}", np.array([img.label], np.float32)))
    container.write_tensors(path, tensors)


def load_dataset_cache(path) -> Dataset:
    tensors = container.read_tensors(path)
    count = len(tensors) // 2
    images = []
    for i in range(count):
        pixels = np.rint(tensors[f"img_{i}"]).astype(np.uint8)
        label = int(tensors[f"label_{i}"][0])
        images.append(LabeledImage(pixels, label))
    return Dataset.from_images(images, f"cache:{path}")
