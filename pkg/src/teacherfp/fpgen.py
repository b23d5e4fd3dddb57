"""Fingerprinting-pair synthesis by feature matching.

Given a probe image x and a candidate feature extractor F, find a
synthetic image x' minimizing ||F(x') - F(x)||_2 subject to pixels in
[0, 255]. The box constraint holds by construction through a change of
variables x' = 255*(tanh(w)+1)/2, optimized over unconstrained w with
Adam (step-decayed learning rate, best-so-far tracking). The real-valued
optimum is rounded to 8-bit pixels and kept only if the full teacher
model assigns x and x' the same top-1 label; rounding or residual loss
can flip the label, in which case the probe is retried from a fresh
random start.

Production generation runs probes through `synthesize_batch` in fixed
chunks: the optimization is independent per probe (each has its own RNG
stream keyed by (seed, probe index, attempt)), rows leave the batch as
they converge, and `synthesize` is the equivalent single-probe form.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .nn import AdamState, GradientDiverged

PAIR_FORMAT = "teacherfp-pairs-v1"

# Count of per-probe optimization runs, for asserting that cached pairs
# are reused without new synthesis work.
_SYNTH_CALLS = 0


def synthesis_calls():
    return _SYNTH_CALLS


@dataclass(frozen=True)
class SynthesisConfig:
    learning_rate: float = 0.2
    lr_decay: float = 0.5      # step-decay factor ...
    decay_every: int = 600     # ... applied every this many iterations
    max_iters: int = 2000
    tau: float = 0.05          # acceptance tolerance on relative feature residual
    stop_ratio: float = 0.6    # early-stop once relative residual <= stop_ratio*tau
    max_retries: int = 5
    batch_size: int = 24       # probes optimized together by generate_pairs
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.max_retries < 1:
            raise ValueError("need at least one attempt per probe")

    def config_hash(self):
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FingerprintPair:
    probe: np.ndarray          # uint8 (C,H,W)
    synthetic: np.ndarray      # uint8 (C,H,W)
    candidate: str             # teacher id
    cut: int
    residual: float            # ||F(x') - F(x)||_2 after quantization
    rel_residual: float        # residual / ||F(x)||_2
    verified: bool
    probe_index: int = -1


class PairShortfall(RuntimeError):
    """Probe pool exhausted before reaching the requested pair budget."""

    def __init__(self, pairs, requested):
        super().__init__(f"only {len(pairs)} of {requested} pairs achievable")
        self.pairs = pairs
        self.requested = requested


def pixels_to_logits(x):
    """Inverse of the tanh pixel map, with the tanh range clamped to
    [1e-6, 1-1e-6] so boundary pixels stay finite."""
    t = np.clip(np.asarray(x, dtype=np.float64) / 255.0, 1e-6, 1.0 - 1e-6)
    return np.arctanh(2.0 * t - 1.0).astype(np.float32)


def logits_to_pixels(w):
    return (np.tanh(w) + 1.0) * np.asarray(127.5, dtype=w.dtype)


def synthesize_batch(extractor, probes, cfg, rngs=None, w0=None):
    """Optimize synthetic inputs for a batch of probes at once.

    Each probe's objective, best-so-far tracking, early stop, and Adam
    moments are independent; converged or diverged rows leave the batch.
    Returns (best_images, infos): per probe the best real-valued image in
    [0, 255] and {"residual", "rel_residual", "iters", "diverged"}.
    """
    global _SYNTH_CALLS
    net = extractor.network
    x_ref = np.asarray(probes).astype(np.float32)
    n = len(x_ref)
    _SYNTH_CALLS += n
    target_all = net.forward(x_ref)
    scale = np.linalg.norm(target_all.reshape(n, -1).astype(np.float64), axis=1)
    scale = np.where(scale > 0, scale, 1.0)

    if w0 is None:
        if rngs is None:
            rngs = [np.random.default_rng([cfg.seed, i, 0]) for i in range(n)]
        w = np.stack([r.standard_normal(x_ref.shape[1:]).astype(np.float32)
                      for r in rngs])
    else:
        w = np.asarray(w0, dtype=np.float32).copy()

    opt = AdamState({"w": w}, lr=cfg.learning_rate)
    target = target_all
    alive = np.arange(n)                      # original row of each live slot
    best_x = [None] * n
    best_obj = np.full(n, np.inf)
    last_iter = np.zeros(n, dtype=int)
    diverged = np.zeros(n, dtype=bool)
    stop_at = cfg.tau * cfg.stop_ratio

    for it in range(cfg.max_iters + 1):
        w = opt.params["w"]
        t = np.tanh(w)
        x = (t + 1.0) * np.float32(127.5)
        out, caches = net.forward(x, want_caches=True)
        diff = (out - target).reshape(len(alive), -1)
        norms = np.linalg.norm(diff.astype(np.float64), axis=1)
        finite = np.isfinite(norms)
        for slot in np.nonzero(finite & (norms < best_obj[alive]))[0]:
            row = alive[slot]
            best_obj[row] = norms[slot]
            best_x[row] = x[slot].copy()
        last_iter[alive] = it
        diverged[alive[~finite]] = True
        drop = ~finite | (best_obj[alive] / scale[alive] <= stop_at)
        if it == cfg.max_iters or np.all(drop):
            break
        # one Adam step for every live row, then retire the finished ones
        dout = (diff / np.maximum(norms, 1e-30)[:, None]).astype(np.float32)
        dx, _ = net.backward(dout.reshape(out.shape), caches, param_layers=())
        dw = dx * (1.0 - t * t) * np.float32(127.5)
        np.nan_to_num(dw, copy=False)
        opt.lr = cfg.learning_rate * (cfg.lr_decay ** ((it + 1) // cfg.decay_every))
        opt.update({"w": dw})
        if np.any(drop):
            keep = ~drop
            alive = alive[keep]
            target = target[keep]
            nxt = AdamState({"w": opt.params["w"][keep]}, lr=opt.lr)
            nxt.m["w"] = opt.m["w"][keep]
            nxt.v["w"] = opt.v["w"][keep]
            nxt.step = opt.step
            opt = nxt

    infos = []
    outs = []
    for i in range(n):
        if best_x[i] is None:
            best_x[i] = logits_to_pixels(np.zeros(x_ref.shape[1:], dtype=np.float32))
            diverged[i] = True
        outs.append(best_x[i])
        infos.append({"residual": float(best_obj[i]) if np.isfinite(best_obj[i]) else float("inf"),
                      "rel_residual": float(best_obj[i] / scale[i]),
                      "iters": int(last_iter[i]), "diverged": bool(diverged[i])})
    return outs, infos


def synthesize(extractor, probe, cfg, rng=None, w0=None):
    """Optimize a synthetic input against one probe.

    Returns (x_tilde, info): the best-so-far real-valued image in [0,255]
    and a dict with the absolute/relative residual and iteration count.
    Raises GradientDiverged on NaN so the caller can retry (one retry unit).
    """
    rngs = [rng] if rng is not None else None
    w0b = w0[None] if w0 is not None else None
    outs, infos = synthesize_batch(extractor, np.asarray(probe)[None], cfg,
                                   rngs=rngs, w0=w0b)
    if infos[0]["diverged"]:
        raise GradientDiverged("synthesis objective went non-finite")
    return outs[0], infos[0]


def quantize_and_verify(teacher, extractor, probe, x_tilde, probe_index=-1):
    """Round to 8-bit pixels and keep the pair only if the teacher's top-1
    labels for probe and synthetic input agree. Returns a FingerprintPair
    (with the post-quantization residual) or None as the rejection signal.
    """
    x_q = np.rint(np.clip(x_tilde, 0.0, 255.0)).astype(np.uint8)
    batch = np.stack([probe, x_q]).astype(np.float32)
    out = teacher.network.forward(batch)
    if int(np.argmax(out[0])) != int(np.argmax(out[1])):
        return None
    feats = extractor.network.forward(batch)
    diff = (feats[1] - feats[0]).astype(np.float64)
    residual = float(np.linalg.norm(diff))
    norm = float(np.linalg.norm(feats[0].astype(np.float64)))
    return FingerprintPair(
        probe=probe.copy(), synthetic=x_q, candidate=teacher.id, cut=extractor.cut,
        residual=residual, rel_residual=residual / (norm if norm > 0 else 1.0),
        verified=True, probe_index=probe_index)


def generate_pairs(teacher, cut, probes, budget, cfg=None, extractor=None):
    """Produce exactly `budget` verified pairs from a probe pool.

    Probes are consumed in order, a chunk at a time; each probe is used at
    most once and gets up to max_retries fresh-start attempts (RNG stream
    keyed by (seed, probe index, attempt)). A pair is kept only when the
    teacher verifies it and its post-quantization relative residual is
    within tau. Raises PairShortfall when the pool runs out first.
    """
    from . import zoo
    cfg = cfg or SynthesisConfig()
    if extractor is None:
        extractor = zoo.extract_feature_map(teacher, cut)
    images = probes.images if hasattr(probes, "images") else np.asarray(probes)
    pairs = []
    consumed = 0
    while len(pairs) < budget and consumed < len(images):
        want = budget - len(pairs)
        take = min(cfg.batch_size, len(images) - consumed, max(want + 2, 4))
        chunk = list(range(consumed, consumed + take))
        consumed += take
        results = {}
        pending = chunk
        for attempt in range(cfg.max_retries):
            if not pending:
                break
            rngs = [np.random.default_rng([cfg.seed, i, attempt]) for i in pending]
            xs, infos = synthesize_batch(extractor, images[pending], cfg, rngs=rngs)
            still = []
            for i, x, info in zip(pending, xs, infos):
                pair = None
                if not info["diverged"] and info["rel_residual"] <= cfg.tau:
                    pair = quantize_and_verify(teacher, extractor, images[i], x, i)
                if pair is not None and pair.rel_residual <= cfg.tau:
                    results[i] = pair
                else:
                    still.append(i)
            pending = still
        pairs.extend(results[i] for i in chunk if i in results)
    if len(pairs) < budget:
        raise PairShortfall(pairs, budget)
    return pairs[:budget]


def store_pairs(pairs, path, cfg=None):
    """One file: a JSON manifest line, then raw probe|synthetic pixel blobs."""
    if pairs:
        shape = list(pairs[0].probe.shape)
        candidate, cut = pairs[0].candidate, pairs[0].cut
    else:
        shape, candidate, cut = [], "", 0
    manifest = {
        "format": PAIR_FORMAT, "candidate": candidate, "cut": cut,
        "config_hash": cfg.config_hash() if cfg else "",
        "count": len(pairs), "shape": shape,
        "pairs": [{"probe_index": p.probe_index, "residual": p.residual,
                   "rel_residual": p.rel_residual, "verified": p.verified}
                  for p in pairs],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for p in pairs:
            f.write(p.probe.tobytes())
            f.write(p.synthetic.tobytes())


def load_pairs(path, expect_candidate=None, expect_cut=None, cfg=None):
    with open(path, "rb") as f:
        head = f.readline()
        blob = f.read()
    manifest = json.loads(head.decode())
    if manifest.get("format") != PAIR_FORMAT:
        raise ValueError(f"{path}: not a fingerprint-pair file")
    if expect_candidate is not None and manifest["count"] and \
            manifest["candidate"] != expect_candidate:
        raise ValueError(f"{path}: pairs belong to {manifest['candidate']!r}, "
                         f"not {expect_candidate!r}")
    if expect_cut is not None and manifest["count"] and manifest["cut"] != expect_cut:
        raise ValueError(f"{path}: pairs were cut at block {manifest['cut']}, "
                         f"not {expect_cut}")
    if cfg is not None and manifest["config_hash"] and \
            manifest["config_hash"] != cfg.config_hash():
        warnings.warn(f"{path}: stored pairs were generated under a different "
                      f"synthesis config")
    shape = tuple(manifest["shape"])
    size = int(np.prod(shape)) if shape else 0
    pairs = []
    for i, rec in enumerate(manifest["pairs"]):
        off = 2 * i * size
        probe = np.frombuffer(blob, np.uint8, size, off).reshape(shape).copy()
        synth = np.frombuffer(blob, np.uint8, size, off + size).reshape(shape).copy()
        pairs.append(FingerprintPair(
            probe=probe, synthetic=synth, candidate=manifest["candidate"],
            cut=manifest["cut"], residual=rec["residual"],
            rel_residual=rec["rel_residual"], verified=rec["verified"],
            probe_index=rec["probe_index"]))
    return pairs
