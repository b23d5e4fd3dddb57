"""Desk-scale image datasets: synthetic generators, IDX files, noise probes.

Two generator families keep source and target domains genuinely apart:
`make_digits` renders a pixel-font digit with random placement/scale/shear
(ten classes), `make_shapes` renders geometric figures with optional
texture, supporting 2-, 10- and 20-class labelings. Images are 8-bit,
1x32x32, NCHW.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    id: str
    images: np.ndarray                 # uint8 (N, C, H, W)
    labels: np.ndarray | None = None   # int64 (N,)
    split: str = ""                    # teacher-train | student-train | test | probe
    provenance: str = "in-distribution"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError("labels/images length mismatch")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx, id=None, split=None):
        return Dataset(id or self.id, self.images[idx],
                       None if self.labels is None else self.labels[idx],
                       split or self.split, self.provenance)

    def image_digests(self):
        return [hashlib.sha256(img.tobytes()).digest() for img in self.images]

    def content_hash(self):
        h = hashlib.sha256(self.images.tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        return h.hexdigest()


def assert_disjoint(*datasets):
    """Fail if any two datasets share an image (byte-identical content)."""
    seen = {}
    for ds in datasets:
        digests = set(ds.image_digests())
        for other, other_digests in seen.items():
            overlap = digests & other_digests
            if overlap:
                raise ValueError(f"datasets {ds.id!r} and {other!r} share "
                                 f"{len(overlap)} images")
        seen[ds.id] = digests


_DIGIT_FONT = [
    "01110 10001 10011 10101 11001 10001 01110",
    "00100 01100 00100 00100 00100 00100 01110",
    "01110 10001 00001 00010 00100 01000 11111",
    "11111 00010 00100 00010 00001 10001 01110",
    "00010 00110 01010 10010 11111 00010 00010",
    "11111 10000 11110 00001 00001 10001 01110",
    "00110 01000 10000 11110 10001 10001 01110",
    "11111 00001 00010 00100 01000 01000 01000",
    "01110 10001 10001 01110 10001 10001 01110",
    "01110 10001 10001 01111 00001 00010 01100",
]

_GLYPHS = np.array([[[c == "1" for c in row] for row in pat.split()]
                    for pat in _DIGIT_FONT], dtype=np.float32)  # (10, 7, 5)


def _render_digit(rng, digit, size=32):
    canvas = np.zeros((size, size), dtype=np.float32)
    scale = int(rng.integers(3, 5))
    glyph = np.kron(_GLYPHS[digit], np.ones((scale, scale), dtype=np.float32))
    gh, gw = glyph.shape
    top = int(rng.integers(0, size - gh + 1))
    left = int(rng.integers(0, size - gw + 1))
    intensity = float(rng.uniform(150, 255))
    canvas[top:top + gh, left:left + gw] = glyph * intensity
    shear = float(rng.uniform(-0.12, 0.12))
    for r in range(size):
        canvas[r] = np.roll(canvas[r], int(round(shear * (r - size // 2))))
    canvas += rng.normal(0.0, 10.0, canvas.shape)
    return np.clip(canvas, 0, 255).astype(np.uint8)


def make_digits(n, seed, id="digits", split="", labels_balanced=True):
    """Ten-class handwritten-style digit set."""
    rng = np.random.default_rng([_role_seed("digits"), seed])
    if labels_balanced:
        labels = np.arange(n) % 10
        rng.shuffle(labels)
    else:
        labels = rng.integers(0, 10, n)
    images = np.stack([_render_digit(rng, int(d))[None] for d in labels])
    return Dataset(id, images, labels.astype(np.int64), split)


_CURVED = (0, 1, 2, 3, 4)   # disk, ring, ellipse, crescent, dome
_ANGULAR = (5, 6, 7, 8, 9)  # square, diamond, triangle, plus, saltire
N_SHAPES = 10


def _shape_mask(shape_id, cx, cy, r, size=32):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    d2 = dx * dx + dy * dy
    if shape_id == 0:
        return d2 <= r * r
    if shape_id == 1:
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape_id == 2:
        return (dx / r) ** 2 + (dy / (0.55 * r)) ** 2 <= 1.0
    if shape_id == 3:
        return (d2 <= r * r) & ((dx - 0.5 * r) ** 2 + dy * dy > (0.9 * r) ** 2)
    if shape_id == 4:
        return (d2 <= r * r) & (dy <= 0)
    if shape_id == 5:
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if shape_id == 6:
        return np.abs(dx) + np.abs(dy) <= 1.1 * r
    if shape_id == 7:
        return (dy >= -0.8 * r) & (dy <= 0.8 * r) & (np.abs(dx) <= (dy + 0.8 * r) * 0.55)
    if shape_id == 8:
        return ((np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r))
    if shape_id == 9:
        return (np.abs(np.abs(dx) - np.abs(dy)) <= 0.45 * r) & \
               (np.abs(dx) <= r) & (np.abs(dy) <= r)
    raise ValueError(f"unknown shape id {shape_id}")


def _render_shape(rng, shape_id, texture, size=32):
    cx = float(rng.uniform(12, 20))
    cy = float(rng.uniform(12, 20))
    r = float(rng.uniform(6.5, 10.5))
    mask = _shape_mask(shape_id, cx, cy, r, size)
    intensity = float(rng.uniform(160, 255))
    canvas = mask.astype(np.float32) * intensity
    if texture == 1:
        rows = (np.arange(size) % 4 < 2).astype(np.float32) * 0.6 + 0.4
        canvas *= rows[:, None]
    canvas += rng.normal(0.0, 12.0, canvas.shape)
    return np.clip(canvas, 0, 255).astype(np.uint8)


def make_shapes(n, seed, id="shapes", split="", labeling="shape", textures=(0, 1)):
    """Geometric-figure set.

    labeling: "shape" -> 10 classes, "combo" -> 20 classes (shape x texture),
    "family" -> 2 classes (curved vs angular).
    """
    rng = np.random.default_rng([_role_seed("shapes"), seed])
    shape_ids = np.arange(n) % N_SHAPES
    rng.shuffle(shape_ids)
    texture_ids = np.asarray(textures)[rng.integers(0, len(textures), n)]
    images = np.stack([_render_shape(rng, int(s), int(t))[None]
                       for s, t in zip(shape_ids, texture_ids)])
    if labeling == "shape":
        labels = shape_ids
    elif labeling == "combo":
        labels = shape_ids * 2 + texture_ids
    elif labeling == "family":
        labels = np.isin(shape_ids, _ANGULAR).astype(np.int64)
    else:
        raise ValueError(f"unknown labeling {labeling!r}")
    return Dataset(id, images, labels.astype(np.int64), split)


def make_noise_probes(n, shape, seed, id="noise-probes"):
    """Gaussian pixel noise, mapped per image onto the full 0..255 range."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng([_role_seed("noise"), seed])
    images = np.empty((n,) + tuple(shape), dtype=np.uint8)
    for i in range(n):
        g = rng.standard_normal(shape)
        lo, hi = g.min(), g.max()
        if hi == lo:
            images[i] = 0
        else:
            images[i] = np.rint((g - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return Dataset(id, images, None, split="probe", provenance="random-noise")


def _role_seed(role):
    return int.from_bytes(hashlib.sha256(role.encode()).digest()[:4], "big")


def save_idx(dataset, images_path, labels_path=None):
    """Write a dataset as IDX files (big-endian, unsigned-byte payload)."""
    imgs = dataset.images
    if imgs.ndim != 4 or imgs.shape[1] != 1:
        raise ValueError("IDX export supports single-channel (N,1,H,W) images")
    n, _, h, w = imgs.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(imgs[:, 0].tobytes())
    if labels_path is not None:
        if dataset.labels is None:
            raise ValueError("dataset has no labels to export")
        if dataset.labels.size and (dataset.labels.min() < 0 or dataset.labels.max() > 255):
            raise ValueError("IDX labels must fit in one byte")
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", LABEL_MAGIC, n))
            f.write(dataset.labels.astype(np.uint8).tobytes())


def load_idx(images_path, labels_path=None, id=None, split=""):
    """Read IDX image (and optionally label) files back into a Dataset."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise ValueError(f"{images_path}: truncated IDX header")
        magic, n, h, w = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise ValueError(f"{images_path}: bad magic 0x{magic:08x}, "
                             f"expected 0x{IMAGE_MAGIC:08x}")
        payload = f.read()
    if len(payload) != n * h * w:
        raise ValueError(f"{images_path}: payload has {len(payload)} bytes, "
                         f"expected {n * h * w}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w).copy()
    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as f:
            header = f.read(8)
            if len(header) < 8:
                raise ValueError(f"{labels_path}: truncated IDX header")
            magic, ln = struct.unpack(">II", header)
            if magic != LABEL_MAGIC:
                raise ValueError(f"{labels_path}: bad magic 0x{magic:08x}, "
                                 f"expected 0x{LABEL_MAGIC:08x}")
            body = f.read()
        if len(body) != ln:
            raise ValueError(f"{labels_path}: payload has {len(body)} bytes, expected {ln}")
        if ln != n:
            raise ValueError("label count does not match image count")
        labels = np.frombuffer(body, dtype=np.uint8).astype(np.int64)
    name = id or str(images_path)
    return Dataset(name, images, labels, split)
