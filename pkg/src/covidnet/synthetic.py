"""Synthetic chest-film stand-ins with class-dependent planted patterns.

Normal films carry only a smooth background. Pneumonia films add a few bright
compact blobs; COVID-19 films add a banded texture over the central field.
Both patterns survive flips, small rotations and translations, so the default
augmentation does not erase the label.
"""
import numpy as np
from scipy import ndimage

from .data import LABELS, Manifest, SampleRecord


def _background(rng, size):
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8, mode="wrap")
    coarse /= np.abs(coarse).max() + 1e-12
    return 0.35 + 0.08 * coarse + 0.03 * rng.standard_normal((size, size))


def _blobs(rng, size):
    yy, xx = np.mgrid[:size, :size]
    out = np.zeros((size, size))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.25, 0.75, size=2) * size
        sigma = rng.uniform(0.05, 0.08) * size
        out += 0.4 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return out


def _bands(rng, size):
    yy, xx = np.mgrid[:size, :size] / size
    period = rng.uniform(0.09, 0.12)
    phase = rng.uniform(0, 2 * np.pi)
    angle = rng.uniform(-0.2, 0.2)
    wave = np.sin(2 * np.pi * (yy * np.cos(angle) + xx * np.sin(angle)) / period + phase)
    field = np.exp(-(((yy - 0.5) / 0.3) ** 2 + ((xx - 0.5) / 0.3) ** 2))
    return 0.2 * wave * field


def make_image(label, rng, size=64):
    img = _background(rng, size)
    if label == 1:
        img = img + _blobs(rng, size)
    elif label == 2:
        img = img + _bands(rng, size)
    return np.clip(img, 0.0, 1.0)


def make_dataset(n_per_class, size=64, seed=0):
    """``(images, labels)`` with ``n_per_class`` images of each class, class-interleaved."""
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(len(LABELS)), n_per_class)
    images = np.stack([make_image(int(lab), rng, size) for lab in labels])
    return images, labels


def make_manifest(n_per_class, size=64, seed=0, prefix="synthetic", source="synthetic"):
    """A manifest (one image per patient) and an in-memory loader for it."""
    images, labels = make_dataset(n_per_class, size, seed)
    records, store = [], {}
    for i, (img, lab) in enumerate(zip(images, labels)):
        path = f"{prefix}/{i:05d}.png"
        records.append(SampleRecord(f"{prefix}-p{i:05d}", path, LABELS[lab], source))
        store[path] = img

    def loader(record):
        return store[record.image_path]

    return Manifest(records), loader


class PlantedQuadrantModel:
    """Classifier whose target logit reads one image quadrant.

    The target class logit is ``gain * mean(quadrant)``. Every pixel also feeds
    all logits through small seeded random weights, so the rest of the image
    is not entirely ignored.
    """

    def __init__(self, size=64, quadrant=(0, 0), target=2, gain=40.0, distractor=2.0, seed=0):
        rng = np.random.default_rng(seed)
        self.size, self.quadrant, self.target = size, quadrant, target
        half = size // 2
        w = distractor * rng.standard_normal((len(LABELS), size, size)) / (size * size) ** 0.5
        qy, qx = quadrant
        w[target, qy * half : (qy + 1) * half, qx * half : (qx + 1) * half] += gain / (half * half)
        self.weights = w

    def quadrant_mask(self):
        half = self.size // 2
        m = np.zeros((self.size, self.size), dtype=bool)
        qy, qx = self.quadrant
        m[qy * half : (qy + 1) * half, qx * half : (qx + 1) * half] = True
        return m

    def planted_image(self, rng, lift=0.3):
        """Background film with the signal quadrant brightened by ``lift``."""
        img = _background(rng, self.size)
        img[self.quadrant_mask()] += lift
        return np.clip(img, 0.0, 1.0)

    def __call__(self, images):
        x = np.asarray(images, dtype=np.float64).reshape(len(images), self.size, self.size)
        logits = np.einsum("nhw,khw->nk", x, self.weights)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)
