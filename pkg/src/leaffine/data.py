"""Dataset discovery, image decoding, augmentation and batching.

Datasets live on disk as ``root/<class_name>/<file>.ppm`` (binary P6,
maxval 255; PNG works too when Pillow is installed). All randomness is
keyed on explicit integers — per-item augmentation uses a generator
seeded by (seed, epoch, item index), so results never depend on batch
composition or prefetch order.
"""

from __future__ import annotations

import os
import threading
import queue
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, DecodeError, DimensionError
from .tensor import Tensor

IMAGE_SUFFIXES = (".ppm", ".png")
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def worker_threads():
    """Worker-thread cap from LEAFFINE_THREADS (default 1: fully sequential)."""
    raw = os.environ.get("LEAFFINE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# PPM codec

def encode_ppm(pixels):
    """Encode an (H, W, 3) uint8 array as binary PPM bytes."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"encode_ppm needs (H, W, 3), got {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes()


def _ppm_token(data, pos, what):
    # skip whitespace and '#' comments, then read one token
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise DecodeError(f"missing {what} in PPM header", offset=pos)
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def decode_ppm(data):
    """Decode binary PPM (P6, maxval 255) bytes into (H, W, 3) uint8."""
    if data[:2] != b"P6":
        raise DecodeError("not a binary PPM (expected P6 magic)", offset=0)
    pos = 2
    dims = []
    for what in ("width", "height", "maxval"):
        token, pos = _ppm_token(data, pos, what)
        try:
            dims.append(int(token))
        except ValueError:
            raise DecodeError(f"non-numeric {what} {token!r}",
                              offset=pos - len(token)) from None
    w, h, maxval = dims
    if w < 1 or h < 1:
        raise DecodeError(f"bad dimensions {w}x{h}", offset=2)
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval} (only 255)", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    if len(data) - pos < need:
        raise DecodeError(
            f"payload needs {need} bytes, found {len(data) - pos}", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def _decode_png(data):
    try:
        from PIL import Image
    except ImportError:
        raise DecodeError("PNG support requires Pillow (pip install leaffine[png])",
                          offset=0) from None
    import io
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DecodeError(f"PNG decode failed: {exc}", offset=0) from None


def decode_image_bytes(data):
    """Sniff and decode PPM or PNG bytes into (H, W, 3) uint8."""
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:8] == _PNG_SIGNATURE:
        return _decode_png(data)
    raise DecodeError("unrecognized image bytes (expected PPM P6 or PNG)", offset=0)


def load_image_array(path):
    """Read an image file as a channel-first float array in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    try:
        hwc = decode_image_bytes(data)
    except DecodeError as exc:
        raise DecodeError(f"{path}: {exc}", offset=exc.offset) from None
    return np.ascontiguousarray(hwc.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0)


def load_image(path):
    """Spec'd entry point: decoded image as a 3xHxW Tensor in [0, 1]."""
    return Tensor(load_image_array(path))


def save_ppm(path, chw):
    """Write a channel-first float image in [0, 1] as binary PPM."""
    arr = np.clip(np.asarray(chw), 0.0, 1.0)
    pixels = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(encode_ppm(pixels))


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class DatasetItem:
    path: str
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    root: str
    class_names: list
    items: list

    def items_of(self, split):
        return [(i, it) for i, it in enumerate(self.items) if it.split == split]

    def class_counts(self, split=None):
        counts = [0] * len(self.class_names)
        for it in self.items:
            if split is None or it.split == split:
                counts[it.label] += 1
        return counts

    def to_csv(self, path):
        lines = ["path,label,split"]
        lines += [f"{it.path},{it.label},{it.split}" for it in self.items]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def scan_dataset(root):
    """Build a manifest from a folder-per-class tree, deterministically.

    Classes are the sorted subdirectory names; items are sorted per class.
    """
    rootp = Path(root)
    if not rootp.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    class_dirs = sorted(d for d in rootp.iterdir() if d.is_dir())
    if len(class_dirs) < 2:
        raise DatasetError(
            f"dataset root {root} needs at least 2 class directories, found {len(class_dirs)}")
    class_names = [d.name for d in class_dirs]
    items = []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir()
                       if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class directory {d} contains no images")
        items += [DatasetItem(str(f), label) for f in files]
    return DatasetManifest(str(rootp), class_names, items)


def split_dataset(manifest, valid_fraction, seed):
    """Stratified train/valid tagging, deterministic per seed.

    Every class keeps at least one item on each side.
    """
    if not 0.0 < valid_fraction < 1.0:
        raise ConfigError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
    new_items = list(manifest.items)
    for label in range(len(manifest.class_names)):
        idx = [i for i, it in enumerate(manifest.items) if it.label == label]
        if len(idx) < 2:
            raise DatasetError(
                f"class {manifest.class_names[label]} needs >= 2 items to split, "
                f"has {len(idx)}")
        rng = np.random.default_rng([seed, label])
        perm = rng.permutation(len(idx))
        n_valid = int(round(valid_fraction * len(idx)))
        n_valid = min(max(n_valid, 1), len(idx) - 1)
        chosen = {idx[j] for j in perm[:n_valid]}
        for i in idx:
            new_items[i] = dc_replace(manifest.items[i],
                                      split="valid" if i in chosen else "train")
    return DatasetManifest(manifest.root, list(manifest.class_names), new_items)


# ---------------------------------------------------------------------------
# normalization

@dataclass(frozen=True)
class NormalizationPreset:
    name: str
    mean: tuple
    std: tuple

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("presets carry exactly 3 per-channel values")
        if any(s <= 0 for s in self.std):
            raise ConfigError("std values must be positive")


IMAGENET = NormalizationPreset("imagenet", (0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
IDENTITY = NormalizationPreset("none", (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
PRESETS = {p.name: p for p in (IMAGENET, IDENTITY)}


def get_normalization(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown normalization preset {name!r}; "
                          f"choose from {sorted(PRESETS)} or compute one")
    return PRESETS[name]


def _as_chw(image):
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a 3xHxW image, got shape {arr.shape}")
    return arr


def normalize_array(arr, preset):
    mean = np.asarray(preset.mean, dtype=arr.dtype).reshape(3, 1, 1)
    std = np.asarray(preset.std, dtype=arr.dtype).reshape(3, 1, 1)
    return (arr - mean) / std


def normalize(image, preset):
    """Per-channel standardization: (x - mean) / std."""
    return Tensor(normalize_array(_as_chw(image), preset))


def denormalize(image, preset):
    """Inverse of :func:`normalize`."""
    arr = _as_chw(image)
    mean = np.asarray(preset.mean, dtype=arr.dtype).reshape(3, 1, 1)
    std = np.asarray(preset.std, dtype=arr.dtype).reshape(3, 1, 1)
    return Tensor(arr * std + mean)


def compute_normalization(manifest, split="train", name="dataset"):
    """Per-channel mean/std over a split's pixels (population std)."""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for _, item in manifest.items_of(split):
        arr = load_image_array(item.path).astype(np.float64)
        total += arr.sum(axis=(1, 2))
        total_sq += (arr * arr).sum(axis=(1, 2))
        count += arr.shape[1] * arr.shape[2]
    if count == 0:
        raise DatasetError(f"split {split!r} has no items")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 1e-12)
    return NormalizationPreset(name, tuple(mean.tolist()), tuple(np.sqrt(var).tolist()))


# ---------------------------------------------------------------------------
# geometry: bilinear sampling with border replication

def bilinear_sample(chw, src_y, src_x):
    """Sample a channel-first image at fractional coordinates.

    Coordinates are clamped to the image rectangle (border replication),
    so outputs stay inside the input value range.
    """
    c, h, w = chw.shape
    ys = np.clip(src_y, 0.0, h - 1.0)
    xs = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(chw.dtype)
    wx = (xs - x0).astype(chw.dtype)
    top = chw[:, y0, x0] * (1 - wx) + chw[:, y0, x1] * wx
    bottom = chw[:, y1, x0] * (1 - wx) + chw[:, y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def _output_grid(h, w):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return ys, xs


def resize_bilinear(chw, out_h, out_w):
    """Resize with corner-aligned bilinear interpolation."""
    c, h, w = chw.shape
    if (h, w) == (out_h, out_w):
        return chw
    ys = (np.arange(out_h, dtype=np.float64) * ((h - 1) / (out_h - 1))
          if out_h > 1 else np.full(1, (h - 1) / 2.0))
    xs = (np.arange(out_w, dtype=np.float64) * ((w - 1) / (out_w - 1))
          if out_w > 1 else np.full(1, (w - 1) / 2.0))
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(chw, gy, gx)


def rotate_image(chw, degrees):
    """Rotate about the image center; out-of-frame samples replicate the border."""
    if degrees == 0:
        return chw
    c, h, w = chw.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = _output_grid(h, w)
    dy, dx = ys - cy, xs - cx
    cos_t, sin_t = np.cos(-theta), np.sin(-theta)
    src_x = cos_t * dx - sin_t * dy + cx
    src_y = sin_t * dx + cos_t * dy + cy
    return bilinear_sample(chw, src_y, src_x)


def _homography_from_corners(h, w, src_corners):
    # Map output corners (x, y) to the displaced source corners via the
    # standard 8-unknown direct linear transform.
    dst = np.array([(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)], dtype=np.float64)
    src = np.asarray(src_corners, dtype=np.float64)
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((dx, dy), (sx, sy)) in enumerate(zip(dst, src)):
        a[2 * i] = [dx, dy, 1, 0, 0, 0, -sx * dx, -sx * dy]
        a[2 * i + 1] = [0, 0, 0, dx, dy, 1, -sy * dx, -sy * dy]
        rhs[2 * i] = sx
        rhs[2 * i + 1] = sy
    coeff = np.linalg.solve(a, rhs)
    return np.append(coeff, 1.0).reshape(3, 3)


def warp_image(chw, corner_offsets):
    """Perspective warp given (4, 2) pixel offsets of the source corners.

    Corner order: top-left, top-right, bottom-left, bottom-right, offsets
    as (dx, dy).
    """
    offsets = np.asarray(corner_offsets, dtype=np.float64)
    if not offsets.any():
        return chw
    c, h, w = chw.shape
    base = np.array([(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)], dtype=np.float64)
    hom = _homography_from_corners(h, w, base + offsets)
    ys, xs = _output_grid(h, w)
    denom = hom[2, 0] * xs + hom[2, 1] * ys + hom[2, 2]
    src_x = (hom[0, 0] * xs + hom[0, 1] * ys + hom[0, 2]) / denom
    src_y = (hom[1, 0] * xs + hom[1, 1] * ys + hom[1, 2]) / denom
    return bilinear_sample(chw, src_y, src_x)


def zoom_image(chw, zoom, offset_y=0.5, offset_x=0.5):
    """Crop a 1/zoom-sized window (placed by relative offsets) and resize back."""
    if zoom == 1.0:
        return chw
    c, h, w = chw.shape
    crop_h, crop_w = h / zoom, w / zoom
    y0 = offset_y * (h - crop_h)
    x0 = offset_x * (w - crop_w)
    ys = (y0 + np.arange(h, dtype=np.float64) * ((crop_h - 1) / (h - 1))
          if h > 1 else np.full(1, y0))
    xs = (x0 + np.arange(w, dtype=np.float64) * ((crop_w - 1) / (w - 1))
          if w > 1 else np.full(1, x0))
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(chw, gy, gx)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Flip / rotate / perspective-warp / zoom-crop policy."""

    hflip_prob: float = 0.5
    max_rotate_deg: float = 10.0
    warp_magnitude: float = 0.2
    zoom_range: tuple = (1.0, 1.1)
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.max_rotate_deg < 0:
            raise ConfigError(f"max_rotate_deg must be >= 0, got {self.max_rotate_deg}")
        if not 0.0 <= self.warp_magnitude < 1.0:
            raise ConfigError(f"warp_magnitude must be in [0, 1), got {self.warp_magnitude}")
        lo, hi = self.zoom_range
        if lo < 1.0 or hi < lo:
            raise ConfigError(f"zoom_range must satisfy 1 <= lo <= hi, got {self.zoom_range}")


IDENTITY_AUGMENT = AugmentConfig(hflip_prob=0.0, max_rotate_deg=0.0,
                                 warp_magnitude=0.0, zoom_range=(1.0, 1.0))


def augment_array(chw, cfg, rng):
    """Apply the configured transforms in order on a channel-first array.

    All random draws happen up front in a fixed order, so a zeroed-out
    config is an exact identity and determinism depends only on the
    generator's seed.
    """
    h, w = chw.shape[1], chw.shape[2]
    if h < 8 or w < 8:
        raise DimensionError(f"augment needs at least 8x8 images, got {h}x{w}")
    if not cfg.enabled:
        return chw
    flip_u = rng.random()
    angle = float(rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg))
    corner_unit = rng.uniform(-1.0, 1.0, size=(4, 2))
    zoom = float(rng.uniform(cfg.zoom_range[0], cfg.zoom_range[1]))
    offs = rng.random(2)

    out = chw
    touched = False
    if flip_u < cfg.hflip_prob:
        out = out[:, :, ::-1]
    if angle != 0.0:
        out = rotate_image(out, angle)
        touched = True
    if cfg.warp_magnitude > 0.0:
        out = warp_image(out, corner_unit * (cfg.warp_magnitude * min(h, w) / 2.0))
        touched = True
    if zoom != 1.0:
        out = zoom_image(out, zoom, offs[0], offs[1])
        touched = True
    if touched:
        out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=chw.dtype)


def augment(image, cfg, rng):
    """Tensor-level wrapper around :func:`augment_array`."""
    return Tensor(augment_array(_as_chw(image), cfg, rng))


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    """A normalized mini-batch plus the manifest indices it came from."""

    images: Tensor
    labels: np.ndarray
    indices: list

    def __len__(self):
        return len(self.labels)


def _seed_key(seed):
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    return [int(seed)]


def make_batches(manifest, split, *, batch_size, image_size, preset,
                 augment_cfg=None, seed=0, epoch=0, shuffle=None):
    """Yield deterministic batches for one epoch of a split.

    Train items are augmented (when a config is given) and shuffled per
    (seed, epoch); validation items keep manifest order and are only
    resized and normalized. The final short batch is kept. Augmentation
    randomness is keyed per item, independent of batch composition.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    entries = manifest.items_of(split)
    if not entries:
        raise DatasetError(f"split {split!r} has no items")
    key = _seed_key(seed)
    if shuffle is None:
        shuffle = split == "train"
    if shuffle:
        order = np.random.default_rng(key + [int(epoch)]).permutation(len(entries))
        entries = [entries[i] for i in order]
    do_augment = augment_cfg is not None and split == "train"

    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        images = np.empty((len(chunk), 3, image_size, image_size), dtype=np.float32)
        labels = np.empty(len(chunk), dtype=np.int64)
        indices = []
        for row, (idx, item) in enumerate(chunk):
            arr = load_image_array(item.path)
            if do_augment:
                rng = np.random.default_rng(key + [int(epoch), int(idx)])
                arr = augment_array(arr, augment_cfg, rng)
            if arr.shape[1] != image_size or arr.shape[2] != image_size:
                arr = resize_bilinear(arr, image_size, image_size)
            images[row] = normalize_array(arr.astype(np.float32), preset)
            labels[row] = item.label
            indices.append(idx)
        yield Batch(Tensor(images), labels, indices)


class Prefetcher:
    """Run an iterator ahead of the consumer through a bounded buffer.

    Because item randomness is seeded per item, the sequence is identical
    to sequential execution; only wall-clock overlap changes.
    """

    _DONE = object()

    def __init__(self, iterator, capacity=2):
        self._queue = queue.Queue(maxsize=capacity)
        self._error = None
        self._thread = threading.Thread(target=self._pump, args=(iterator,), daemon=True)
        self._thread.start()

    def _pump(self, iterator):
        try:
            for item in iterator:
                self._queue.put(item)
        except BaseException as exc:  # forwarded to the consumer
            self._error = exc
        finally:
            self._queue.put(self._DONE)

    def __iter__(self):
        return self

    def __next__(self):
        item = self._queue.get()
        if item is self._DONE:
            self._thread.join()
            if self._error is not None:
                raise self._error
            raise StopIteration
        return item


def maybe_prefetch(iterator, capacity=2):
    """Wrap with a prefetch thread when LEAFFINE_THREADS allows it."""
    if worker_threads() > 1:
        return Prefetcher(iterator, capacity=capacity)
    return iterator


# ---------------------------------------------------------------------------
# synthetic desk-scale dataset

_LESION_PALETTE = [
    (0.08, 0.85, 0.25),   # dark brown
    (0.12, 0.90, 0.75),   # ochre
    (0.00, 0.05, 0.15),   # near-black
    (0.10, 0.45, 0.92),   # pale yellow
]
_MOTIF_NAMES = ("spot", "blotch", "rust", "mosaic", "scorch", "mildew", "curl", "streak")


def _hsv_to_rgb(h, s, v):
    h = h % 1.0
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _class_recipe(k, num_classes):
    # widely spaced hues plus cycling lesion motifs keep classes separable
    hue = (0.20 + 0.618033988749895 * k) % 1.0
    return {
        "hue": hue,
        "sat": 0.45 + 0.10 * ((k * 3) % 4),
        "val": 0.45 + 0.06 * (k % 3),
        "spots": 3 + 3 * (k % 5),
        "radius": 1.5 + 1.2 * (k % 3),
        "lesion": _LESION_PALETTE[k % len(_LESION_PALETTE)],
        "blotch": k % 2 == 1,
        "vein_angle": np.pi * (k + 0.37) / max(num_classes, 1),
        "vein_count": 3 + (k % 4),
    }


def _render_leaf(recipe, size, rng):
    s = size
    ys, xs = np.meshgrid(np.arange(s, dtype=np.float64),
                         np.arange(s, dtype=np.float64), indexing="ij")

    hue = recipe["hue"] + rng.uniform(-0.02, 0.02)
    sat = np.clip(recipe["sat"] + rng.uniform(-0.05, 0.05), 0.05, 1.0)
    val = np.clip(recipe["val"] + rng.uniform(-0.05, 0.05), 0.05, 1.0)
    base = np.array(_hsv_to_rgb(hue, sat, val)).reshape(3, 1, 1)
    img = np.repeat(np.repeat(base, s, axis=1), s, axis=2)

    # low-frequency illumination gradient
    g_theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(g_theta) * xs + np.sin(g_theta) * ys) / s
    img += 0.08 * (ramp - ramp.mean())

    # vein streaks along the class angle
    theta = recipe["vein_angle"]
    axis = np.cos(theta) * (xs - s / 2) + np.sin(theta) * (ys - s / 2)
    stripes = np.cos(2 * np.pi * recipe["vein_count"] * axis / s)
    vein_mask = (stripes > 0.965).astype(np.float64) * 0.5
    vein_color = np.array(_hsv_to_rgb(hue + 0.04, sat * 0.6, min(val + 0.25, 1.0)))
    img = img * (1 - vein_mask) + vein_color.reshape(3, 1, 1) * vein_mask

    # lesions: soft discs of the class lesion color
    n_spots = max(0, int(round(recipe["spots"] * rng.uniform(0.7, 1.3))))
    lesion = np.array(_hsv_to_rgb(*recipe["lesion"])).reshape(3, 1, 1)
    for _ in range(n_spots):
        cy, cx = rng.uniform(0, s - 1, size=2)
        r = recipe["radius"] * (s / 64.0) * rng.uniform(0.7, 1.4)
        d2 = ((ys - cy) ** 2 + (xs - cx) ** 2) / max(r * r, 1e-6)
        alpha = np.clip(1.0 - d2, 0.0, 1.0) * 0.9
        img = img * (1 - alpha) + lesion * alpha
    if recipe["blotch"]:
        cy, cx = rng.uniform(s * 0.25, s * 0.75, size=2)
        phi = rng.uniform(0, np.pi)
        dy, dx = ys - cy, xs - cx
        u = np.cos(phi) * dx + np.sin(phi) * dy
        v = -np.sin(phi) * dx + np.cos(phi) * dy
        r = recipe["radius"] * (s / 64.0) * 2.5
        d2 = (u / (2.0 * r)) ** 2 + (v / r) ** 2
        alpha = np.clip(1.0 - d2, 0.0, 1.0) * 0.8
        img = img * (1 - alpha) + lesion * alpha

    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic_dataset(out_dir, num_classes, per_class, image_size=64, seed=0):
    """Write a procedurally generated folder-per-class PPM dataset.

    Each class pairs a distinct background hue with a distinct lesion
    motif (spot density, radius, color, optional blotch, vein pattern);
    per-image jitter provides intra-class variation. Files are
    byte-identical for identical arguments.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if per_class < 4:
        raise ConfigError(f"need at least 4 images per class, got {per_class}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(num_classes):
        recipe = _class_recipe(k, num_classes)
        cls_dir = out / f"leaf{k:02d}_{_MOTIF_NAMES[k % len(_MOTIF_NAMES)]}"
        cls_dir.mkdir(exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng([seed, k, i])
            img = _render_leaf(recipe, image_size, rng)
            save_ppm(cls_dir / f"img{i:04d}.ppm", img)
    return scan_dataset(out)
