"""Volume container I/O, slice handling, synthetic CT volumes and fold splitting.

On-disk layout of one volume directory::

    meta.json    id, num_slices, height, width, diagnosis, [severity], has_masks, crc32
    slices.f32   little-endian float32, C order [slice, row, col]
    masks.u8     optional, one byte per pixel in {0, 1}, same order

A dataset root holds one directory per volume plus ``index.json`` listing them
together with the fold assignment.
"""
import json
import os
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (ConfigError, CorruptDataError, MissingAnnotationError,
                     ValidationError)

SLICES_FILE = "slices.f32"
MASKS_FILE = "masks.u8"
META_FILE = "meta.json"
INDEX_FILE = "index.json"

HU_WINDOW = (-1250.0, 250.0)
SEVERE_FRACTION = 0.25
CLASSES = ("normal", "mild", "severe")
N_FOLDS = 5


@dataclass
class VolumeSample:
    slices: np.ndarray                 # (s, H, W) float32
    diagnosis: int
    severity: int = None
    masks: np.ndarray = None           # (s, H, W) uint8 or None
    id: str = ""
    spacing: tuple = None

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.uint8)
        self.validate()

    def validate(self):
        if self.slices.ndim != 3:
            raise ValidationError(f"{self.id}: slices must be (s, H, W), got {self.slices.shape}")
        if self.masks is not None:
            if self.masks.shape != self.slices.shape:
                raise ValidationError(f"{self.id}: masks {self.masks.shape} != slices {self.slices.shape}")
            if self.masks.size and self.masks.max() > 1:
                raise ValidationError(f"{self.id}: masks must be binary")
        if self.diagnosis not in (0, 1):
            raise ValidationError(f"{self.id}: diagnosis must be 0 or 1")
        if (self.severity is not None) != (self.diagnosis == 1):
            raise ValidationError(f"{self.id}: severity is defined exactly when diagnosis == 1")
        if self.severity is not None and self.severity not in (0, 1):
            raise ValidationError(f"{self.id}: severity must be 0 or 1")

    @property
    def num_slices(self):
        return self.slices.shape[0]

    @property
    def label_class(self):
        if self.diagnosis == 0:
            return "normal"
        return "severe" if self.severity else "mild"


def _crc(data):
    return zlib.crc32(data) & 0xFFFFFFFF


def save_volume(v, path):
    os.makedirs(path, exist_ok=True)
    slices = v.slices.astype("<f4", copy=False).tobytes(order="C")
    meta = {
        "id": v.id,
        "num_slices": int(v.slices.shape[0]),
        "height": int(v.slices.shape[1]),
        "width": int(v.slices.shape[2]),
        "diagnosis": int(v.diagnosis),
        "has_masks": v.masks is not None,
        "crc32": {SLICES_FILE: _crc(slices)},
    }
    if v.severity is not None:
        meta["severity"] = int(v.severity)
    if v.spacing is not None:
        meta["spacing"] = [float(x) for x in v.spacing]
    with open(os.path.join(path, SLICES_FILE), "wb") as fh:
        fh.write(slices)
    masks_path = os.path.join(path, MASKS_FILE)
    if v.masks is not None:
        masks = v.masks.astype(np.uint8, copy=False).tobytes(order="C")
        meta["crc32"][MASKS_FILE] = _crc(masks)
        with open(masks_path, "wb") as fh:
            fh.write(masks)
    elif os.path.exists(masks_path):
        os.remove(masks_path)
    with open(os.path.join(path, META_FILE), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_checked(path, name, meta, expected_bytes):
    fname = os.path.join(path, name)
    try:
        with open(fname, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CorruptDataError(f"{path}: missing {name}")
    if len(data) != expected_bytes:
        raise CorruptDataError(f"{path}: {name} has {len(data)} bytes, expected {expected_bytes}")
    want = meta.get("crc32", {}).get(name)
    if want is not None and _crc(data) != want:
        raise CorruptDataError(f"{path}: {name} checksum mismatch")
    return data


def load_volume(path, require_masks=False):
    try:
        with open(os.path.join(path, META_FILE), encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise CorruptDataError(f"{path}: missing {META_FILE}")
    except json.JSONDecodeError as e:
        raise CorruptDataError(f"{path}: unreadable {META_FILE}: {e}")
    try:
        shape = (int(meta["num_slices"]), int(meta["height"]), int(meta["width"]))
        diagnosis = int(meta["diagnosis"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptDataError(f"{path}: bad metadata: {e}")
    n = shape[0] * shape[1] * shape[2]
    raw = _read_checked(path, SLICES_FILE, meta, 4 * n)
    slices = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    masks = None
    if meta.get("has_masks"):
        raw = _read_checked(path, MASKS_FILE, meta, n)
        masks = np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()
    elif require_masks:
        raise MissingAnnotationError(f"{path}: segmentation requested but volume has no masks")
    sev = meta.get("severity")
    spacing = meta.get("spacing")
    return VolumeSample(slices, diagnosis, None if sev is None else int(sev), masks,
                        id=str(meta.get("id", os.path.basename(os.path.normpath(path)))),
                        spacing=tuple(spacing) if spacing else None)


def extract_slices(v):
    """``[(slice, mask_or_None), ...]`` in volume order."""
    if v.masks is None:
        return [(s, None) for s in v.slices]
    return list(zip(v.slices, v.masks))


def resample_indices(s_raw, s):
    if s < 1:
        raise ConfigError(f"slice budget must be >= 1, got {s}")
    if s_raw >= s:
        # truncate toward zero: 40 -> 8 gives 0, 5, 11, 16, 22, 27, 33, 39
        return np.floor(np.linspace(0, s_raw - 1, s)).astype(int)
    return np.arange(s_raw)


def resample_slices(v, s):
    """Uniformly pick ``s`` slices; short volumes are zero-padded at the end."""
    idx = resample_indices(v.num_slices, s)
    slices = v.slices[idx]
    masks = None if v.masks is None else v.masks[idx]
    if len(idx) < s:
        pad = ((0, s - len(idx)), (0, 0), (0, 0))
        slices = np.pad(slices, pad)
        if masks is not None:
            masks = np.pad(masks, pad)
    return VolumeSample(slices, v.diagnosis, v.severity, masks, v.id, v.spacing)


def normalize(x, window=HU_WINDOW):
    """Clip to ``window`` then min-max scale to [0, 1]; constant inputs map to 0."""
    lo, hi = window
    if lo >= hi:
        raise ConfigError(f"window low {lo} must be below high {hi}")
    x = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
    xmin, xmax = x.min(), x.max()
    if xmax == xmin:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - xmin) / (xmax - xmin)).astype(np.float32)


def prepare_slices(x, window=HU_WINDOW):
    """Network input in [0, 1]: data already in that range passes through, else ``normalize``."""
    x = np.asarray(x, dtype=np.float32)
    if x.size and x.min() >= 0 and x.max() <= 1:
        return x
    return np.stack([normalize(s, window) for s in x]) if x.ndim == 3 else normalize(x, window)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    slices: int = 8
    height: int = 64
    width: int = 64
    lung_level: float = 0.3
    background_level: float = 0.05
    lesion_gain: float = 0.45
    texture: float = 0.04
    # target lesion/lung area bands, kept clear of the 0.25 cut on both sides
    mild_band: tuple = (0.04, 0.15)
    severe_band: tuple = (0.35, 0.65)
    max_tries: int = 200


def parse_mix(mix):
    """``"normal:mild:severe"`` weights (or a 3-sequence) -> normalized dict."""
    if isinstance(mix, str):
        try:
            parts = [float(x) for x in mix.split(":")]
        except ValueError:
            raise ConfigError(f"bad class mix {mix!r}")
    elif isinstance(mix, dict):
        parts = [float(mix.get(k, 0)) for k in CLASSES]
    else:
        parts = [float(x) for x in mix]
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise ConfigError(f"class mix needs three non-negative weights, got {mix!r}")
    total = sum(parts)
    return dict(zip(CLASSES, (p / total for p in parts)))


def class_counts(count, mix):
    """Largest-remainder apportionment of ``count`` volumes over the mix."""
    mix = parse_mix(mix)
    exact = np.array([mix[k] * count for k in CLASSES])
    base = np.floor(exact).astype(int)
    order = np.argsort(-(exact - base), kind="stable")
    for i in order[: count - base.sum()]:
        base[i] += 1
    return dict(zip(CLASSES, base.tolist()))


def lung_fields(h, w, rng):
    """Boolean mask of two ellipses standing in for the lungs."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h * rng.uniform(0.47, 0.53)
    ry = h * rng.uniform(0.30, 0.36)
    rx = w * rng.uniform(0.16, 0.19)
    gap = w * rng.uniform(0.035, 0.06)
    lung = np.zeros((h, w), bool)
    for side in (-1, 1):
        cx = w / 2 + side * (gap + rx)
        lung |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    return lung


def _smooth_noise(shape, rng, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return n / (np.abs(n).max() + 1e-12)


def _blobs(shape, lung, rng, n_blobs, radius_range):
    """Soft lesion field in [0, 1] from ``n_blobs`` Gaussian blobs on contiguous slice runs."""
    s, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ly, lx = np.nonzero(lung)
    field = np.zeros(shape)
    for _ in range(n_blobs):
        k = rng.integers(len(ly))
        cy, cx = ly[k], lx[k]
        r = rng.uniform(*radius_range)
        run = int(rng.integers(max(1, s // 2), s + 1))
        start = int(rng.integers(0, s - run + 1))
        for j in range(start, start + run):
            # blob swells and shrinks along its slice run
            t = (j - start + 0.5) / run
            rj = r * (0.6 + 0.4 * np.sin(np.pi * t))
            d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / rj ** 2
            field[j] = np.maximum(field[j], np.exp(-d2 ** 2))
    return field


def lesion_fraction(masks, lung):
    """Lesion area over lung area, summed over the whole volume."""
    lung_area = lung.sum() * masks.shape[0] if lung.ndim == 2 else lung.sum()
    return float(masks.sum()) / float(lung_area)


def synth_volume(label, rng, cfg=SynthConfig(), vid=""):
    s, h, w = cfg.slices, cfg.height, cfg.width
    lung = lung_fields(h, w, rng)
    soft_lung = ndimage.gaussian_filter(lung.astype(np.float64), 0.8)
    base = cfg.background_level + (cfg.lung_level - cfg.background_level) * soft_lung
    texture = cfg.texture * _smooth_noise((s, h, w), rng, 1.5)
    masks = np.zeros((s, h, w), np.uint8)
    lesion = np.zeros((s, h, w))
    if label != "normal":
        band = cfg.mild_band if label == "mild" else cfg.severe_band
        radius = (0.06 * h, 0.14 * h) if label == "mild" else (0.16 * h, 0.30 * h)
        for _ in range(cfg.max_tries):
            n = int(rng.integers(1, 7))
            field = _blobs((s, h, w), lung, rng, n, radius) * lung
            m = (field > 0.5).astype(np.uint8)
            frac = lesion_fraction(m, lung)
            if band[0] <= frac <= band[1]:
                masks, lesion = m, field
                break
        else:
            raise ConfigError(f"could not place {label} lesions within {band} after {cfg.max_tries} tries")
    img = np.clip(base[None] + texture * soft_lung[None] + cfg.lesion_gain * lesion, 0, 1)
    diagnosis = int(label != "normal")
    severity = None if label == "normal" else int(label == "severe")
    return VolumeSample(img.astype(np.float32), diagnosis, severity, masks, id=vid), lung


def synth_dataset(seed, count, mix="1:1:1", cfg=SynthConfig()):
    """Generate ``count`` volumes in memory. Each volume draws from its own seeded stream."""
    counts = class_counts(count, mix)
    labels = [k for k in CLASSES for _ in range(counts[k])]
    order = np.random.default_rng([seed, 0xC0FFEE]).permutation(count)
    volumes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        v, _ = synth_volume(labels[order[i]], rng, cfg, vid=f"vol{i:04d}")
        volumes.append(v)
    return volumes


def synth_generate(out, seed, count, sizes=(8, 64, 64), mix="1:1:1"):
    """Write a synthetic dataset with a stratified 5-fold index under ``out``."""
    s, h, w = sizes
    volumes = synth_dataset(seed, count, mix, SynthConfig(slices=s, height=h, width=w))
    folds = None
    if count >= N_FOLDS:
        try:
            folds = make_folds([v.id for v in volumes], [v.label_class for v in volumes], seed)
        except ConfigError:
            folds = None
    save_dataset(volumes, out, folds)
    return volumes


# ---------------------------------------------------------------- datasets, folds

def save_dataset(volumes, root, folds=None):
    os.makedirs(root, exist_ok=True)
    for v in volumes:
        save_volume(v, os.path.join(root, v.id))
    index = {"volumes": [v.id for v in volumes]}
    if folds is not None:
        index["folds"] = [list(f) for f in folds]
    write_index(root, index)


def write_index(root, index):
    with open(os.path.join(root, INDEX_FILE), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_index(path):
    if os.path.isdir(path):
        path = os.path.join(path, INDEX_FILE)
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CorruptDataError(f"missing dataset index {path}")
    except json.JSONDecodeError as e:
        raise CorruptDataError(f"unreadable dataset index {path}: {e}")


def load_dataset(root, require_masks=False):
    index = read_index(root)
    volumes = [load_volume(os.path.join(root, vid), require_masks) for vid in index["volumes"]]
    return volumes, index.get("folds")


def make_folds(ids, labels, seed, n_folds=N_FOLDS):
    """Stratified partition of ``ids`` into ``n_folds`` disjoint lists.

    Every class needs at least ``n_folds`` members. Within a class, members are
    shuffled and dealt round-robin, starting where the previous class stopped so
    fold sizes stay within one of each other.
    """
    ids = list(ids)
    labels = list(labels)
    if len(ids) != len(labels):
        raise ConfigError("ids and labels must be aligned")
    if len(set(ids)) != len(ids):
        raise ConfigError("ids must be unique")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(n_folds)]
    offset = 0
    for cls in sorted(set(labels), key=str):
        members = [i for i, l in zip(ids, labels) if l == cls]
        if len(members) < n_folds:
            raise ConfigError(f"class {cls!r} has {len(members)} samples, need >= {n_folds}")
        for j, k in enumerate(rng.permutation(len(members))):
            folds[(offset + j) % n_folds].append(members[k])
        offset = (offset + len(members)) % n_folds
    return folds
