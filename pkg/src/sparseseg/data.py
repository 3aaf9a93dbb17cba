"""Synthetic street-like scenes, segmentation metrics and PPM/PGM files."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor import ParameterError

TRAIN_SEEDS = range(0, 10_000)
VAL_SEEDS = range(10_000, 20_000)


class FormatError(ValueError):
    """Malformed pixmap file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class SceneSample:
    image: np.ndarray   # (1, 3, h, w) in [0, 1]
    labels: np.ndarray  # (h, w) int64 in [0, classes)
    seed: int


def class_bands(classes: int) -> tuple[list[int], list[int], list[int]]:
    """Split class ids into top (sky-like), middle (objects) and bottom (road-like) bands."""
    if classes < 3:
        raise ParameterError("need at least 3 classes")
    top = [0] + ([1] if classes >= 6 else [])
    bottom = [classes - 1] + ([classes - 2] if classes >= 5 else [])
    middle = [c for c in range(classes) if c not in top and c not in bottom]
    return top, middle, sorted(bottom)


def palette(classes: int) -> np.ndarray:
    """Fixed, well separated RGB colour per class."""
    hues = (np.arange(classes) * 0.618034) % 1.0
    rng = np.random.default_rng(classes)
    vals = 0.45 + 0.45 * rng.random(classes)
    sats = 0.5 + 0.4 * rng.random(classes)
    # hsv -> rgb
    i = np.floor(hues * 6).astype(int) % 6
    f = hues * 6 - np.floor(hues * 6)
    p, q, t = vals * (1 - sats), vals * (1 - f * sats), vals * (1 - (1 - f) * sats)
    table = [(vals, t, p), (q, vals, p), (p, vals, t), (p, q, vals), (t, p, vals), (vals, p, q)]
    rgb = np.empty((classes, 3))
    for c in range(classes):
        rgb[c] = [table[i[c]][j][c] for j in range(3)]
    return rgb


def gen_scene(seed: int, dims=(64, 128), classes: int = 8, region_px: int = 16) -> SceneSample:
    """Deterministic scene: sky band on top, road band at the bottom and
    rectangular objects (some smaller than one region) in between."""
    h, w = (int(v) for v in dims)
    if h % 32 or w % 32 or h % region_px or w % region_px:
        raise ParameterError(f"scene dims {h}x{w} must be divisible by 32 and by {region_px}")
    top, middle, bottom = class_bands(classes)
    rng = np.random.default_rng([seed, h, w, classes])
    labels = np.empty((h, w), dtype=np.int64)
    y1 = int(rng.integers(round(0.25 * h), round(0.35 * h) + 1))
    y2 = int(rng.integers(round(0.65 * h), round(0.75 * h) + 1))
    labels[:y1] = top[0]
    labels[y1:y2] = middle[0]
    labels[y2:] = bottom[-1]

    # buildings rising above the horizon, at most 15% of the top quarter
    if len(top) > 1:
        budget = int(0.15 * (h // 4) * w)
        x = 0
        while x < w:
            bw = int(rng.integers(w // 16, w // 5))
            bh = int(rng.integers(2, max(3, y1 // 3)))
            if rng.random() < 0.5 and bw * bh <= budget:
                labels[y1 - bh:y1, x:x + bw] = top[1]
                budget -= min(bw, w - x) * bh
            x += bw
    # sidewalk strips at the road edges
    if len(bottom) > 1:
        side = bottom[0]
        for x0, x1 in ((0, int(rng.integers(w // 10, w // 4))), (w - int(rng.integers(w // 10, w // 4)), w)):
            ys = int(rng.integers(y2, y2 + max(1, (h - y2) // 2)))
            labels[ys:, x0:x1] = side
    # objects in the middle band, some smaller than a region
    objects = middle[1:] or middle
    for _ in range(int(rng.integers(3, 7))):
        cls = objects[int(rng.integers(len(objects)))]
        oh = int(rng.integers(region_px // 2, int(region_px * 1.5) + 1))
        ow = int(rng.integers(region_px // 2, int(region_px * 1.5) + 1))
        cy = int(rng.integers(y1, y2))
        cx = int(rng.integers(0, w))
        ya, yb = max(y1, cy - oh // 2), min(y2, cy + (oh + 1) // 2)
        xa, xb = max(0, cx - ow // 2), min(w, cx + (ow + 1) // 2)
        labels[ya:yb, xa:xb] = cls

    colours = palette(classes)
    jitter = 1.0 + 0.1 * (rng.random(3) - 0.5)
    img = colours[labels] * jitter + rng.normal(0.0, 0.04, (h, w, 3))
    shade = np.linspace(-0.05, 0.05, h)[:, None, None]
    img = np.clip(img + shade, 0.0, 1.0)
    return SceneSample(img.transpose(2, 0, 1)[None].copy(), labels, int(seed))


def make_dataset(seeds, dims=(64, 128), classes: int = 8, region_px: int = 16):
    """Stack scenes for ``seeds`` into ``(images (N,3,h,w), labels (N,h,w))``."""
    samples = [gen_scene(s, dims, classes, region_px) for s in seeds]
    if not samples:
        raise ParameterError("empty dataset")
    return (np.concatenate([s.image for s in samples]),
            np.stack([s.labels for s in samples]))


# -- metrics ----------------------------------------------------------------------

class ConfusionMatrix:
    """Counts with ground truth on rows and predictions on columns."""

    def __init__(self, classes: int):
        self.classes = int(classes)
        self.counts = np.zeros((self.classes, self.classes), dtype=np.int64)

    def add(self, pred, truth, ignore_index: int | None = None):
        pred = np.asarray(pred).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        if pred.shape != truth.shape:
            raise ParameterError("prediction and ground truth sizes differ")
        keep = (truth >= 0) & (truth < self.classes)
        if ignore_index is not None:
            keep &= truth != ignore_index
        idx = self.classes * truth[keep] + pred[keep]
        self.counts += np.bincount(idx, minlength=self.classes ** 2).reshape(self.classes, self.classes)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def metrics(m) -> tuple[float, float, float]:
    """(pixel accuracy, mean class accuracy, mean IoU); classes absent from the
    ground truth are left out of both means."""
    counts = m.counts if isinstance(m, ConfusionMatrix) else np.asarray(m)
    total = counts.sum()
    if total == 0:
        raise ParameterError("confusion matrix is empty")
    diag = np.diag(counts).astype(np.float64)
    rows = counts.sum(axis=1).astype(np.float64)
    cols = counts.sum(axis=0).astype(np.float64)
    present = rows > 0
    pixel_acc = diag.sum() / total
    mean_acc = float(np.mean(diag[present] / rows[present]))
    iou = diag[present] / (rows[present] + cols[present] - diag[present])
    return float(pixel_acc), mean_acc, float(np.mean(iou))


# -- PPM / PGM ---------------------------------------------------------------------

def _read_header(data: bytes):
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated header", pos)
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append((data[start:pos], start))
    magic, off = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}", off)
    nums = []
    for tok, off in fields[1:]:
        if not tok.isdigit():
            raise FormatError(f"expected a decimal number, got {tok!r}", off)
        nums.append(int(tok))
    width, height, maxval = nums
    if width < 1 or height < 1:
        raise FormatError("zero image size", fields[1][1])
    if not 0 < maxval < 256:
        raise FormatError(f"maxval {maxval} unsupported (8-bit only)", fields[3][1])
    return magic.decode(), width, height, maxval, pos + 1


def read_pixmap(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6).  Returns uint8 (h, w) or (h, w, 3)."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, width, height, _, start = _read_header(data)
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    body = data[start:start + need]
    if len(body) < need:
        raise FormatError(f"expected {need} pixel bytes, found {len(body)}", start + len(body))
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def write_pixmap(path, pixels) -> None:
    """Write uint8 (h, w) as P5 or (h, w, 3) as P6, maxval 255."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ParameterError("pixmaps are written from uint8 arrays")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ParameterError(f"cannot write array of shape {arr.shape}")
    header = b"%s\n%d %d\n255\n" % (magic, arr.shape[1], arr.shape[0])
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header + np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def image_to_u8(image) -> np.ndarray:
    """(1, 3, h, w) float in [0, 1] -> (h, w, 3) uint8."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    return np.clip(np.round(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def u8_to_image(pixels) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float64) / 255.0).transpose(2, 0, 1)[None].copy()


def write_image(path, image):
    write_pixmap(path, image_to_u8(image))


def read_image(path) -> np.ndarray:
    px = read_pixmap(path)
    if px.ndim != 3:
        raise ParameterError(f"{path} is a gray map, expected a colour image")
    return u8_to_image(px)


def write_labels(path, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ParameterError("label values must fit in one byte")
    write_pixmap(path, labels.astype(np.uint8))


def read_labels(path) -> np.ndarray:
    px = read_pixmap(path)
    if px.ndim != 2:
        raise ParameterError(f"{path} is a colour image, expected a label map")
    return px.astype(np.int64)


def render_overlay(image, mask, region_px: int = 16, tint=(1.0, 0.2, 0.2),
                   strength: float = 0.5) -> np.ndarray:
    """Tint the footprint of every active region of a (H, W) region mask.

    ``mask`` may also be a full-resolution (h, w) binary map.  Returns a
    (1, 3, h, w) image; an all-zero mask returns the input unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[2:]
    m = np.asarray(mask)
    while m.ndim > 2:
        m = m[0]
    if m.shape != (h, w):
        if h % m.shape[0] or w % m.shape[1]:
            raise ParameterError(f"mask {m.shape} does not tile image {h}x{w}")
        m = np.repeat(np.repeat(m, h // m.shape[0], axis=0), w // m.shape[1], axis=1)
    on = m.astype(bool)
    out = img.copy()
    tint = np.asarray(tint, dtype=np.float64)[:, None]
    out[0][:, on] = (1.0 - strength) * img[0][:, on] + strength * tint
    return out
