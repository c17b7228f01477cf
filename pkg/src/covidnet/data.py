"""Dataset manifests, patient-level splits, augmentation and batch sampling."""
import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ImageError, ManifestError

logger = logging.getLogger(__name__)

LABELS = ("normal", "pneumonia", "covid19")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
CSV_HEADER = ("patient_id", "image_path", "label", "source")

# Which cases each public repository contributes to the merged dataset.
COVIDX_RECIPE = {
    "cohen": ("pneumonia", "covid19"),
    "figure1": ("covid19",),
    "actualmed": ("covid19",),
    "rsna": ("normal", "pneumonia"),
    "radiography": ("covid19",),
}


@dataclass(frozen=True)
class SampleRecord:
    patient_id: str
    image_path: str
    label: str
    source: str

    def __post_init__(self):
        if not self.patient_id:
            raise ManifestError(f"empty patient_id for image {self.image_path!r}")
        if not self.image_path:
            raise ManifestError(f"empty image_path for patient {self.patient_id!r}")
        if self.label not in LABEL_INDEX:
            raise ManifestError(f"label {self.label!r} for {self.image_path!r} is not one of {'|'.join(LABELS)}")

    @property
    def label_index(self):
        return LABEL_INDEX[self.label]


class Manifest:
    """Ordered collection of records, unique on ``(source, image_path)``."""

    def __init__(self, records=(), root=None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        seen = set()
        dups = []
        for r in self.records:
            key = (r.source, r.image_path)
            if key in seen:
                dups.append(key)
            seen.add(key)
        if dups:
            raise ManifestError(f"duplicate (source, image_path) entries: {dups[:5]}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.records == other.records

    def __repr__(self):
        return f"Manifest({len(self)} records, {dict(self.class_counts())})"

    @property
    def provenance(self):
        return dict(sorted(Counter(r.source for r in self.records).items()))

    def class_counts(self):
        c = Counter(r.label for r in self.records)
        return {label: c.get(label, 0) for label in LABELS}

    def patient_counts(self, aliases=None):
        per = {}
        for r in self.records:
            per.setdefault(r.label, set()).add(patient_key(r, aliases))
        return {label: len(per.get(label, ())) for label in LABELS}

    @property
    def labels(self):
        return np.array([r.label_index for r in self.records], dtype=np.int64)

    def resolve(self, record):
        p = Path(record.image_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    @classmethod
    def read_csv(cls, path):
        path = Path(path)
        try:
            with open(path, newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                if tuple(reader.fieldnames or ()) != CSV_HEADER:
                    raise ManifestError(f"{path}: header must be {','.join(CSV_HEADER)}, got {reader.fieldnames}")
                records = []
                for lineno, row in enumerate(reader, start=2):
                    try:
                        records.append(SampleRecord(*(row[k].strip() if row[k] else "" for k in CSV_HEADER)))
                    except ManifestError as exc:
                        raise ManifestError(f"{path}:{lineno}: {exc}") from None
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from None
        return cls(records, root=path.parent)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.records:
                w.writerow((r.patient_id, r.image_path, r.label, r.source))


def patient_key(record, aliases=None):
    """Identity of the patient behind a record.

    Repositories use unrelated id schemes, so ids are scoped by source unless
    ``aliases`` maps ``(source, patient_id)`` to a shared canonical id.
    """
    if aliases:
        canon = aliases.get((record.source, record.patient_id))
        if canon is not None:
            return ("alias", canon)
    return (record.source, record.patient_id)


@dataclass(frozen=True)
class SelectionRule:
    source: str
    admitted_labels: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        labels = frozenset(self.admitted_labels)
        object.__setattr__(self, "admitted_labels", labels)
        if not labels:
            raise ManifestError(f"selection rule for {self.source!r} admits no labels")
        bad = labels - set(LABELS)
        if bad:
            raise ManifestError(f"selection rule for {self.source!r} names unknown labels {sorted(bad)}")

    def admits(self, record):
        return (self.source == "*" or record.source == self.source) and record.label in self.admitted_labels


IDENTITY_RULE = SelectionRule("*", frozenset(LABELS))


def merge_manifests(sources):
    """Union of admitted records over ``(Manifest, SelectionRule)`` pairs.

    The same ``(source, image_path)`` seen twice is kept once; seen with two
    different labels it is an error, whether or not either copy is admitted.
    """
    labels_by_key = {}
    conflicts = []
    for manifest, _ in sources:
        for r in manifest:
            key = (r.source, r.image_path)
            prev = labels_by_key.setdefault(key, r.label)
            if prev != r.label:
                conflicts.append(f"{key[0]}:{key[1]} labelled {prev} and {r.label}")
    if conflicts:
        raise ManifestError("conflicting labels: " + "; ".join(conflicts))
    out, seen = [], set()
    root = None
    for manifest, rule in sources:
        root = root or manifest.root
        for r in manifest:
            key = (r.source, r.image_path)
            if rule.admits(r) and key not in seen:
                seen.add(key)
                if manifest.root is not None and root != manifest.root and not Path(r.image_path).is_absolute():
                    r = SampleRecord(r.patient_id, str(manifest.root / r.image_path), r.label, r.source)
                out.append(r)
    return Manifest(out, root=root)


def _half_up(x):
    return int(math.floor(x + 0.5))


def patient_split(manifest, test_fraction, seed, aliases=None):
    """Split by patient so no patient lands on both sides.

    Each class contributes ``round(test_fraction * patients)`` test patients,
    clamped to leave at least one patient per side. A patient's class is the
    most frequent label among their images.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    images = {}
    for r in manifest:
        images.setdefault(patient_key(r, aliases), []).append(r.label_index)
    by_class = {i: [] for i in range(len(LABELS))}
    for key, labs in images.items():
        counts = Counter(labs)
        top = max(counts.values())
        by_class[min(l for l, c in counts.items() if c == top)].append(key)
    test_keys = set()
    for cls, keys in by_class.items():
        if len(keys) < 2:
            raise ManifestError(f"class {LABELS[cls]!r} has {len(keys)} patient(s); at least 2 are needed to split")
        keys.sort()
        n_test = min(max(_half_up(test_fraction * len(keys)), 1), len(keys) - 1)
        rng = np.random.default_rng([_seed_int(seed), cls])
        test_keys.update(keys[i] for i in rng.permutation(len(keys))[:n_test])
    train = [r for r in manifest if patient_key(r, aliases) not in test_keys]
    test = [r for r in manifest if patient_key(r, aliases) in test_keys]
    return Manifest(train, manifest.root), Manifest(test, manifest.root)


def _seed_int(seed):
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def distribution_report(train, test, aliases=None):
    """Per-class image and patient counts for both sides of a split."""
    rows = [("class", "train_images", "test_images", "train_patients", "test_patients")]
    ti, si = train.class_counts(), test.class_counts()
    tp, sp = train.patient_counts(aliases), test.patient_counts(aliases)
    for label in LABELS:
        rows.append((label, ti[label], si[label], tp[label], sp[label]))
    rows.append(("total", sum(ti.values()), sum(si.values()), sum(tp.values()), sum(sp.values())))
    lines = [f"{r[0]:<10} {r[1]:>13} {r[2]:>12} {r[3]:>15} {r[4]:>14}" for r in rows]
    return "\n".join(lines) + "\n"


def parse_distribution_report(text):
    lines = [ln.split() for ln in text.strip().splitlines()]
    header = lines[0][1:]
    return {row[0]: dict(zip(header, map(int, row[1:]))) for row in lines[1:]}


# --- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    max_translation_frac: float = 0.1
    max_rotation_deg: float = 10.0
    hflip_prob: float = 0.5
    zoom_range: tuple = (0.9, 1.1)
    max_intensity_shift_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.zoom_range
        if not (0 < lo <= 1 <= hi):
            raise ValueError(f"zoom_range must satisfy 0 < lo <= 1 <= hi, got {self.zoom_range}")
        if min(self.max_translation_frac, self.max_rotation_deg, self.max_intensity_shift_frac) < 0:
            raise ValueError("augmentation magnitudes must be nonnegative")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")

    @classmethod
    def identity(cls, seed=0):
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), 0.0, seed)


@dataclass(frozen=True)
class AugmentParams:
    shift_x: float = 0.0  # pixels
    shift_y: float = 0.0
    rotation_deg: float = 0.0
    flip: bool = False
    zoom: float = 1.0
    intensity_shift: float = 0.0


def draw_params(config, shape, rng):
    """Sample one set of augmentation magnitudes.

    Always consumes the same six draws so the random stream stays aligned
    regardless of which augmentations are switched off.
    """
    h, w = shape
    u = rng.uniform(-1.0, 1.0, size=3)
    flip = rng.random() < config.hflip_prob
    zoom = rng.uniform(config.zoom_range[0], config.zoom_range[1])
    shift = rng.uniform(-1.0, 1.0) * config.max_intensity_shift_frac
    return AugmentParams(
        shift_x=float(u[0] * config.max_translation_frac * w),
        shift_y=float(u[1] * config.max_translation_frac * h),
        rotation_deg=float(u[2] * config.max_rotation_deg),
        flip=bool(flip),
        zoom=float(zoom),
        intensity_shift=float(shift),
    )


def apply_augmentation(image, params):
    img = np.asarray(image, dtype=np.float64)
    if params.flip:
        img = img[:, ::-1]
    if params.shift_x or params.shift_y or params.rotation_deg or params.zoom != 1.0:
        theta = np.deg2rad(params.rotation_deg)
        # output -> input coordinate map, about the image centre
        inv = np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]]) / params.zoom
        centre = (np.array(img.shape, dtype=np.float64) - 1) / 2
        offset = centre - inv @ (centre + np.array([params.shift_y, params.shift_x]))
        img = ndimage.affine_transform(img, inv, offset=offset, order=1, mode="constant", cval=0.0)
    if params.intensity_shift:
        img = img + params.intensity_shift
    return np.clip(img, 0.0, 1.0)


def augment(image, config, rng):
    """Random translation, rotation, horizontal flip, zoom and intensity shift."""
    img = np.asarray(image, dtype=np.float64)
    return apply_augmentation(img, draw_params(config, img.shape, rng))


# --- batch sampling ---------------------------------------------------------

def effective_batch_size(batch_size, n_classes=3):
    eff = batch_size - batch_size % n_classes
    if eff < n_classes:
        raise ValueError(f"batch_size {batch_size} too small for {n_classes} equal class quotas")
    return eff


def rebalanced_index_batches(labels, batch_size, seed, n_classes=3):
    """Index batches with exactly ``batch_size // 3`` samples of every class.

    The epoch length is set by the largest class. Classes that cannot fill
    their share are cycled through shuffled full passes plus a partial pass
    drawn without replacement, so each of their samples recurs either
    ``floor`` or ``ceil`` of the expected number of times.
    """
    labels = np.asarray(labels)
    eff = effective_batch_size(batch_size, n_classes)
    if eff != batch_size:
        logger.debug("batch size %d rounded down to %d", batch_size, eff)
    quota = eff // n_classes
    pools = [np.flatnonzero(labels == c) for c in range(n_classes)]
    for c, pool in enumerate(pools):
        if pool.size == 0:
            name = LABELS[c] if n_classes == len(LABELS) else str(c)
            raise ManifestError(f"class {name!r} has no samples; cannot rebalance")
    n_batches = max(1, max(p.size for p in pools) // quota)
    need = n_batches * quota
    rng = np.random.default_rng(seed)
    streams = []
    for pool in pools:
        reps, rem = divmod(need, pool.size)
        parts = [pool[rng.permutation(pool.size)] for _ in range(reps)]
        parts.append(pool[rng.permutation(pool.size)[:rem]])
        streams.append(np.concatenate(parts))
    batches = []
    for b in range(n_batches):
        idx = np.concatenate([s[b * quota : (b + 1) * quota] for s in streams])
        batches.append(idx[rng.permutation(idx.size)])
    return batches


def rebalanced_batches(manifest, batch_size, seed):
    recs = manifest.records
    return [[recs[i] for i in batch] for batch in rebalanced_index_batches(manifest.labels, batch_size, seed)]


# --- image I/O --------------------------------------------------------------

def bilinear_resize(img, out_h, out_w):
    """Half-pixel-centred bilinear resampling without antialiasing."""
    img = np.asarray(img, dtype=np.float64)

    def along(a, n_out, axis):
        n_in = a.shape[axis]
        if n_in == n_out:
            return a
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        lo, hi = np.take(a, i0, axis=axis), np.take(a, i1, axis=axis)
        shape = [1] * a.ndim
        shape[axis] = n_out
        return lo + frac.reshape(shape) * (hi - lo)

    return along(along(img, out_h, 0), out_w, 1)


def read_image(path):
    """Decode an image file to a float grayscale array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                return np.clip(arr / (65535.0 if im.mode.startswith("I;16") else max(arr.max(), 1.0)), 0, 1)
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from None


def preprocess(path, size=64):
    """Grayscale, bilinear resize to ``size`` x ``size``, values in [0, 1]."""
    img = read_image(path)
    if img.shape != (size, size):
        img = bilinear_resize(img, size, size)
    return np.clip(img, 0.0, 1.0)


def write_image(path, array):
    """Write a [0, 1] grayscale or uint8 RGB array as PNG or PGM (by suffix)."""
    path = Path(path)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".ppm") else "PNG"
    try:
        Image.fromarray(arr).save(path, format=fmt)
    except OSError as exc:
        raise ImageError(f"cannot write image {path}: {exc}") from None
