"""Datasets: the CIFAR-10 binary loader, a synthetic generator, augmentation.

Raw images are float64 in [0, 1], shape (3, S, S). Augmentation (pad-crop
and flip) happens on raw pixels; per-channel normalization is applied
exactly once, as the last step before a sample reaches the model.

The synthetic set exists so that adaptive routing is testable at desk
scale: "easy" samples carry their class cue in a blocky low-frequency blob
that survives 2x box downscaling, while "hard" samples modulate the same
blob with a +-1 pixel checkerboard, which makes every 2x2 block average out
to the background. A coarse-only model therefore sees pure noise on hard
samples, while a full-resolution model can demodulate the cue linearly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .numerics import Tensor
from .rng import Rng

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2023, 0.1994, 0.2010)
SYNTH_MEAN = (0.5, 0.5, 0.5)
SYNTH_STD = (0.25, 0.25, 0.25)

_RECORD_PIXELS = 3 * 32 * 32
_RECORD_BYTES = 1 + _RECORD_PIXELS  # label byte + channel-major R,G,B planes


@dataclass(frozen=True)
class Sample:
    """A normalized image ready for the model, plus its label."""

    image: Tensor
    label: int


@dataclass(frozen=True)
class Dataset:
    """Raw train/test splits with the normalization constants to apply."""

    train_images: np.ndarray  # (N, 3, S, S) float64 in [0, 1]
    train_labels: np.ndarray  # (N,) int64
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @property
    def side(self) -> int:
        return self.train_images.shape[-1]


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    return (image - m) / s


def pad_crop(image: np.ndarray, off_y: int, off_x: int, pad: int = 4) -> np.ndarray:
    """Zero-pad by `pad` on every side, then crop the original size at (off_y, off_x)."""
    side = image.shape[-1]
    if not (0 <= off_y <= 2 * pad and 0 <= off_x <= 2 * pad):
        raise ValueError(f"crop offset ({off_y}, {off_x}) outside [0, {2 * pad}]")
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, off_y : off_y + side, off_x : off_x + side]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def augment(image: np.ndarray, rng: Rng, mean, std, pad: int = 4) -> np.ndarray:
    """Random pad-crop, coin-flip mirror, then normalize. Raw pixels in, ndarray out.

    Consumes exactly three draws in a fixed order (row offset, column
    offset, flip coin), so replaying the generator replays the augmentation.
    """
    off_y = rng.randbelow(2 * pad + 1)
    off_x = rng.randbelow(2 * pad + 1)
    out = pad_crop(image, off_y, off_x, pad)
    if rng.uniform() < 0.5:
        out = hflip(out)
    return normalize(out, mean, std)


def eval_samples(images: np.ndarray, labels: np.ndarray, mean, std) -> list[Sample]:
    """Normalization-only samples (no augmentation), for evaluation."""
    return [
        Sample(image=Tensor(normalize(img, mean, std)), label=int(lab))
        for img, lab in zip(images, labels)
    ]


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def _parse_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    blob = path.read_bytes()
    n, rem = divmod(len(blob), _RECORD_BYTES)
    if rem != 0 or n == 0:
        raise DataFormatError(
            f"{path}: {len(blob)} bytes is not a whole number of {_RECORD_BYTES}-byte records"
            f" (last record boundary at byte offset {n * _RECORD_BYTES})"
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, _RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        idx = int(bad[0])
        raise DataFormatError(
            f"{path}: label byte {labels[idx]} out of range at byte offset {idx * _RECORD_BYTES}"
        )
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(path) -> Dataset:
    """Load CIFAR-10 from the standard binary batches.

    `path` may be a directory holding data_batch_*.bin (train) and
    test_batch.bin, or a single .bin file (all records become the train
    split). Pixels are scaled to [0, 1]; normalization constants are the
    usual per-channel CIFAR-10 values.
    """
    p = Path(path)
    if p.is_dir():
        train_files = sorted(p.glob("data_batch_*.bin"))
        if not train_files:
            raise DataFormatError(f"{p}: no data_batch_*.bin files found")
        parts = [_parse_cifar_file(f) for f in train_files]
        train_images = np.concatenate([im for im, _ in parts])
        train_labels = np.concatenate([lab for _, lab in parts])
        test_file = p / "test_batch.bin"
        if test_file.exists():
            test_images, test_labels = _parse_cifar_file(test_file)
        else:
            test_images = np.zeros((0, 3, 32, 32))
            test_labels = np.zeros((0,), dtype=np.int64)
    elif p.is_file():
        train_images, train_labels = _parse_cifar_file(p)
        test_images = np.zeros((0, 3, 32, 32))
        test_labels = np.zeros((0,), dtype=np.int64)
    else:
        raise DataFormatError(f"{p}: no such file or directory")
    return Dataset(
        train_images=train_images,
        train_labels=train_labels,
        test_images=test_images,
        test_labels=test_labels,
        num_classes=10,
        mean=CIFAR10_MEAN,
        std=CIFAR10_STD,
    )


def write_cifar_records(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write [0, 1] float images as CIFAR-style 3073-byte uint8 records."""
    if images.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"CIFAR records need (3, 32, 32) images, got {images.shape[1:]}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataFormatError("labels must fit in one byte")
    quantized = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    records = np.empty((len(images), _RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels.astype(np.uint8)
    records[:, 1:] = quantized.reshape(len(images), _RECORD_PIXELS)
    Path(path).write_bytes(records.tobytes())


# ---------------------------------------------------------------------------
# synthetic data

# Amplitude x jitter plus 4 sigma of noise stays inside [0, 1]: class cues
# survive untouched and the checkerboard cancellation is not distorted by
# clipping.
_BLOB_AMPLITUDE = 0.32
_NOISE_STD = 0.03


def _class_blob(side: int, label: int, num_classes: int, jitter_y: int, jitter_x: int) -> np.ndarray:
    """Gaussian bump at a class-specific position, constant over 2x2 blocks."""
    radius = 0.35 * side
    sigma = side / 12.0
    angle = 2.0 * np.pi * label / num_classes
    cy = side / 2.0 + radius * np.sin(angle) + 2 * jitter_y
    cx = side / 2.0 + radius * np.cos(angle) + 2 * jitter_x
    half = side // 2
    # Sample at block centers, then upsample so each 2x2 block is constant.
    coord = 2.0 * np.arange(half) + 0.5
    yy = coord[:, None] - cy
    xx = coord[None, :] - cx
    block = np.exp(-(yy * yy + xx * xx) / (2.0 * sigma * sigma))
    return np.repeat(np.repeat(block, 2, axis=0), 2, axis=1)


def _checkerboard(side: int) -> np.ndarray:
    y, x = np.indices((side, side))
    return np.where((y + x) % 2 == 0, 1.0, -1.0)


def synth_dataset(
    num_classes: int,
    samples: int,
    side: int,
    easy_frac: float,
    seed: int,
    test_frac: float = 0.2,
) -> Dataset:
    """Class-conditional blob images in two difficulty tiers.

    easy_frac of the samples are classifiable after 2x box downscaling; the
    rest hide the same cue under a checkerboard carrier that block
    averaging cancels exactly. Generation is a pure function of the seed.
    """
    if side % 4 != 0 or side < 8:
        raise DataFormatError(f"synthetic side must be a multiple of 4 and >= 8, got {side}")
    if not 0.0 <= easy_frac <= 1.0:
        raise DataFormatError(f"easy_frac must be in [0, 1], got {easy_frac}")
    if samples < 1 or num_classes < 2:
        raise DataFormatError("need at least one sample and two classes")
    rng = Rng(seed)
    checker = _checkerboard(side)
    images = np.empty((samples, 3, side, side))
    labels = np.empty(samples, dtype=np.int64)
    for i in range(samples):
        label = rng.randbelow(num_classes)
        easy = rng.uniform() < easy_frac
        jitter_y = rng.randbelow(3) - 1
        jitter_x = rng.randbelow(3) - 1
        amplitude = _BLOB_AMPLITUDE * (0.85 + 0.3 * rng.uniform())
        noise = rng.normals(3 * side * side).reshape(3, side, side) * _NOISE_STD
        pattern = _class_blob(side, label, num_classes, jitter_y, jitter_x)
        if not easy:
            pattern = pattern * checker
        images[i] = np.clip(0.5 + amplitude * pattern + noise, 0.0, 1.0)
        labels[i] = label
    n_test = int(round(samples * test_frac))
    n_train = samples - n_test
    return Dataset(
        train_images=images[:n_train],
        train_labels=labels[:n_train],
        test_images=images[n_train:],
        test_labels=labels[n_train:],
        num_classes=num_classes,
        mean=SYNTH_MEAN,
        std=SYNTH_STD,
    )
