"""Black-box query interface over a concealed student model.

Three exposure modes: raw posteriors, noised posteriors (zero-mean
Gaussian, clipped to [0,1] and renormalized), and top-1 label only (the
default an attacker should expect). Every query — including ones rejected
for a bad input shape — spends one unit of the query counter.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np


class ProtocolError(RuntimeError):
    """Malformed query (wrong shape/dtype); the query still counts."""


class TransportError(RuntimeError):
    """Connection-level failure talking to a remote endpoint."""


@dataclass(frozen=True)
class ExposureMode:
    kind: str              # "top1" | "noisy" | "raw"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("top1", "noisy", "raw"):
            raise ValueError(f"unknown exposure mode {self.kind!r}")
        if self.kind == "noisy" and self.sigma < 0:
            raise ValueError("noise scale must be >= 0")

    @staticmethod
    def parse(text):
        """"top1" | "raw" | "noisy:<sigma>" (default sigma 0.05)."""
        if text.startswith("noisy"):
            _, _, s = text.partition(":")
            return ExposureMode("noisy", float(s) if s else 0.05)
        return ExposureMode(text)

    def __str__(self):
        return f"noisy:{self.sigma}" if self.kind == "noisy" else self.kind


@dataclass
class Response:
    label: int | None = None
    posteriors: np.ndarray | None = None

    def top1(self):
        """Collapse any exposure mode to a label."""
        if self.label is not None:
            return int(self.label)
        return int(np.argmax(self.posteriors))


class Endpoint:
    """Shared query contract; see LocalEndpoint and wire.RemoteEndpoint."""

    input_shape = None
    classes = None
    mode = None

    def query(self, image):
        raise NotImplementedError

    def query_many(self, images):
        return [self.query(img) for img in images]

    def query_count(self):
        raise NotImplementedError


class LocalEndpoint(Endpoint):
    supports_batch = True

    def __init__(self, network, mode=ExposureMode("top1"), seed=0, id="local"):
        self._network = network
        self.mode = mode if isinstance(mode, ExposureMode) else ExposureMode.parse(mode)
        self.id = id
        self.input_shape = network.input_shape
        self.classes = int(network.out_shape[-1])
        self._count = 0
        self._lock = threading.Lock()
        self._rng = np.random.default_rng([seed, 0x626C6B62])

    def _spend(self, n=1):
        with self._lock:
            self._count += n

    def _validate(self, image):
        image = np.asarray(image)
        if image.shape != self.input_shape:
            raise ProtocolError(f"input shape {image.shape} != advertised "
                                f"{self.input_shape}")
        if image.dtype != np.uint8:
            raise ProtocolError(f"expected 8-bit pixels, got dtype {image.dtype}")
        return image

    def query(self, image):
        self._spend()
        image = self._validate(image)
        post = self._network.forward(image[None].astype(np.float32))[0]
        return self._respond(post)

    def query_many(self, images):
        images = np.asarray(images)
        self._spend(len(images))
        if images.shape[1:] != self.input_shape or images.dtype != np.uint8:
            raise ProtocolError(f"batch shape {images.shape[1:]}/dtype {images.dtype} "
                                f"!= advertised {self.input_shape}/uint8")
        posts = self._network.forward(images.astype(np.float32))
        return [self._respond(p) for p in posts]

    def _respond(self, post):
        if self.mode.kind == "raw":
            return Response(posteriors=post.copy())
        if self.mode.kind == "noisy":
            with self._lock:
                noise = self._rng.normal(0.0, self.mode.sigma, post.shape)
            noisy = np.clip(post.astype(np.float64) + noise, 0.0, 1.0)
            total = noisy.sum()
            noisy = noisy / total if total > 0 else np.full_like(noisy, 1.0 / len(noisy))
            return Response(posteriors=noisy.astype(np.float32))
        return Response(label=int(np.argmax(post)))

    def query_count(self):
        with self._lock:
            return self._count
