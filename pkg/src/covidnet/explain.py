"""Occlusion attribution: which image patches the decision depends on.

Each patch is replaced by a constant, the model is re-run, and the drop in the
target-class probability is recorded. The patches with the largest drops form
the interpretation mask.
"""
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, ImageError, ShapeError


@dataclass(frozen=True)
class AttributionConfig:
    patch_size: int = 8
    stride: int = 0  # 0 means equal to patch_size
    occlusion_value: float | None = None  # None means the image mean
    selection_fraction: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.stride < 0:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.occlusion_value is not None and not 0.0 <= self.occlusion_value <= 1.0:
            raise ConfigError(f"occlusion_value must lie in [0, 1], got {self.occlusion_value}")
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ConfigError(f"selection_fraction must lie in (0, 1], got {self.selection_fraction}")

    @property
    def step(self):
        return self.stride or self.patch_size


@dataclass(frozen=True)
class InterpretationMask:
    grid: np.ndarray  # bool, one cell per patch position
    score_drop_map: np.ndarray
    target_class: int
    threshold: float
    patch_size: int
    step: int
    image_shape: tuple
    base_score: float

    @property
    def no_critical_factors(self):
        """True when no selected patch lowers the target score at all."""
        return not bool((self.score_drop_map[self.grid] > 0).any())

    def patch_slices(self, i, j):
        y, x = i * self.step, j * self.step
        return slice(y, min(y + self.patch_size, self.image_shape[0])), slice(x, min(x + self.patch_size, self.image_shape[1]))

    def pixel_mask(self, positive_only=False):
        """Union of the selected patches as a boolean image."""
        out = np.zeros(self.image_shape, dtype=bool)
        for i, j in zip(*np.nonzero(self.grid)):
            if positive_only and not self.score_drop_map[i, j] > 0:
                continue
            out[self.patch_slices(i, j)] = True
        return out

    def selected(self):
        return list(zip(*(a.tolist() for a in np.nonzero(self.grid))))


def patch_grid_shape(image_shape, patch_size, step):
    h, w = image_shape
    if patch_size > h or patch_size > w:
        raise ShapeError(f"patch size {patch_size} exceeds image size {h}x{w}")
    return math.ceil(h / step), math.ceil(w / step)


def select_top(drops, fraction):
    """Boolean grid of the top ``ceil(fraction * n)`` cells; ties go to the earlier row-major cell."""
    flat = drops.ravel()
    k = math.ceil(fraction * flat.size)
    # stable sort on -drop keeps row-major order among equal drops
    order = np.argsort(-flat, kind="stable")[:k]
    grid = np.zeros(flat.size, dtype=bool)
    grid[order] = True
    return grid.reshape(drops.shape), float(flat[order[-1]])


def critical_factors(model, image, target_class, config=None) -> InterpretationMask:
    """Occlusion mask for ``target_class``.

    ``model`` maps a stack of images ``(n, h, w)`` to class probabilities ``(n, 3)``.
    """
    config = config or AttributionConfig()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ImageError(f"expected a 2-D grayscale image, got shape {image.shape}")
    target_class = int(target_class)
    if target_class not in (0, 1, 2):
        raise ValueError(f"target_class must be 0, 1 or 2, got {target_class}")
    gh, gw = patch_grid_shape(image.shape, config.patch_size, config.step)
    fill = float(image.mean()) if config.occlusion_value is None else config.occlusion_value

    base = float(np.asarray(model(image[None]))[0, target_class])
    if not np.isfinite(base):
        raise ValueError("model output is not finite on the input image")
    proto = InterpretationMask(np.zeros((gh, gw), bool), np.zeros((gh, gw)), target_class, 0.0,
                               config.patch_size, config.step, image.shape, base)
    cells = [(i, j) for i in range(gh) for j in range(gw)]
    drops = np.zeros(gh * gw)
    for start in range(0, len(cells), config.batch_size):
        chunk = cells[start : start + config.batch_size]
        batch = np.repeat(image[None], len(chunk), axis=0)
        for n, (i, j) in enumerate(chunk):
            batch[(n, *proto.patch_slices(i, j))] = fill
        drops[start : start + len(chunk)] = base - np.asarray(model(batch))[:, target_class]
    drops = drops.reshape(gh, gw)
    grid, threshold = select_top(drops, config.selection_fraction)
    return InterpretationMask(grid, drops, target_class, threshold, config.patch_size, config.step, image.shape, base)


def occlude(image, pixel_mask, value):
    out = np.array(image, dtype=np.float64)
    out[pixel_mask] = value
    return out


# --- rendering ------------------------------------------------------------------

TINT = np.array([255.0, 0.0, 0.0])
ALPHA = 0.5


def _to_u8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def overlay(image, pixel_mask, path):
    """Write ``image`` with ``pixel_mask`` highlighted.

    PNG output blends selected pixels halfway toward red. PGM has no colour, so
    selected pixels are inverted instead. Unselected pixels keep their plain
    8-bit grayscale value.
    """
    gray = _to_u8(image)
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    if pixel_mask.shape != gray.shape:
        raise ShapeError(f"mask shape {pixel_mask.shape} does not match image shape {gray.shape}")
    path = str(path)
    try:
        if path.lower().endswith(".pgm"):
            out = gray.copy()
            out[pixel_mask] = 255 - out[pixel_mask]
            Image.fromarray(out, mode="L").save(path, format="PPM")
        else:
            rgb = np.repeat(gray[..., None], 3, axis=2).astype(np.float64)
            rgb[pixel_mask] = (1 - ALPHA) * rgb[pixel_mask] + ALPHA * TINT
            Image.fromarray(np.rint(rgb).astype(np.uint8), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageError(f"cannot write overlay {path}: {exc}") from None
    return path


def write_drop_map(mask: InterpretationMask, path):
    """CSV with one row per patch: row, col, drop, selected."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("row,col,drop,selected\n")
        for i in range(mask.grid.shape[0]):
            for j in range(mask.grid.shape[1]):
                f.write(f"{i},{j},{float(mask.score_drop_map[i, j])!r},{int(mask.grid[i, j])}\n")


def graph_model(graph, params, batch_size=64):
    """Adapt a COVID-Net graph and its parameters to the ``model`` callable shape."""
    from . import arch

    def model(images):
        return arch.predict(graph, params, np.asarray(images)[:, None], batch_size=batch_size)

    return model
