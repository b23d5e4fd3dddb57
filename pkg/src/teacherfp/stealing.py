"""Model stealing on top of a teacher-fingerprinting result.

Harvest top-1 labels from the black box on a related-but-disjoint query
set, train a surrogate (guessed extractor frozen + fresh head) on those
hard labels with cross-entropy, and measure accuracy against ground truth
plus fidelity — the agreement rate with the target — on held-out inputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import transfer
from .blackbox import ProtocolError, TransportError
from .datasets import Dataset
from .transfer import HeadSpec, Student, TuningPolicy
from .zoo import TrainConfig


@dataclass
class HarvestedSet:
    images: np.ndarray            # uint8 (N, C, H, W)
    labels: np.ndarray            # int64, one per image
    endpoint_id: str = ""
    queries_used: int = 0
    failed: list = field(default_factory=list)


@dataclass
class FidelityReport:
    surrogate_id: str
    accuracy: float
    fidelity: float
    query_budget: int


def harvest_labels(endpoint, images):
    """One label per image; the counter grows by len(images)."""
    images = np.asarray(images)
    before = endpoint.query_count()
    if getattr(endpoint, "supports_batch", False):
        responses = endpoint.query_many(images)
        labels = [r.top1() for r in responses]
        failed = []
    else:
        labels, failed = [], []
        for i, img in enumerate(images):
            try:
                labels.append(endpoint.query(img).top1())
            except (TransportError, ProtocolError):
                labels.append(-1)
                failed.append(i)
    return HarvestedSet(images=images, labels=np.asarray(labels, dtype=np.int64),
                        endpoint_id=getattr(endpoint, "id", ""),
                        queries_used=endpoint.query_count() - before, failed=failed)


def train_surrogate(extractor_guess, harvested, head, cfg=None, seed=0):
    """Frozen-extractor surrogate fitted to harvested hard labels."""
    if len(harvested.images) == 0:
        raise ValueError("no harvested samples to train on")
    if harvested.labels.max() >= head.classes:
        raise ValueError(f"harvested label {harvested.labels.max()} out of range "
                         f"for a {head.classes}-class head")
    cfg = cfg or TrainConfig(epochs=10, batch_size=32)
    surrogate = transfer.build_student(
        extractor_guess, head, TuningPolicy.FROZEN, seed,
        id=f"surrogate-{extractor_guess.teacher_id}-b{len(harvested.images)}-s{seed}")
    ds = Dataset(f"harvest-{harvested.endpoint_id}", harvested.images,
                 harvested.labels, split="student-train")
    transfer.train_student(surrogate, ds, cfg=cfg)
    return surrogate


def accuracy(surrogate, test_set):
    return transfer.evaluate(surrogate, test_set)


def fidelity(surrogate, endpoint, test_images):
    """Agreement rate with the target's labels; these queries are metered
    like any other."""
    test_images = np.asarray(test_images)
    if len(test_images) == 0:
        raise ValueError("empty fidelity test set")
    target = harvest_labels(endpoint, test_images).labels
    mine = surrogate.network.predict_labels(test_images.astype(np.float32))
    return float(np.mean(mine == target))


@dataclass
class StealingCurves:
    rows: list   # dicts: guess, budget, seed, accuracy, fidelity, queries

    def as_dict(self):
        return {"rows": self.rows}

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.as_dict(), f, sort_keys=True, indent=1)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["guess", "budget", "seed", "accuracy", "fidelity", "queries"])
            for r in self.rows:
                w.writerow([r["guess"], r["budget"], r["seed"],
                            repr(r["accuracy"]), repr(r["fidelity"]), r["queries"]])

    def mean_fidelity(self, guess, budget):
        vals = [r["fidelity"] for r in self.rows
                if r["guess"] == guess and r["budget"] == budget]
        return float(np.mean(vals))


def run_stealing_curves(endpoint, guesses, harvest_pool, test_set, budgets,
                        head=None, cfg=None, seeds=(0, 1, 2)):
    """Budget sweep of surrogate accuracy/fidelity per extractor guess.

    The pool is labeled once at the largest budget; a smaller budget uses
    the first b harvested samples (the box is deterministic, so this
    matches harvesting them separately). Reported queries per row is the
    budget an attacker with that harvest would have spent.
    """
    head = head or HeadSpec(transfer.STEAL_HEAD_WIDTHS, endpoint.classes)
    budgets = sorted(budgets)
    pool = np.asarray(harvest_pool.images if hasattr(harvest_pool, "images")
                      else harvest_pool)
    if len(pool) < budgets[-1]:
        raise ValueError(f"harvest pool has {len(pool)} images, "
                         f"largest budget is {budgets[-1]}")
    full = harvest_labels(endpoint, pool[:budgets[-1]])
    rows = []
    for guess_id, extractor in guesses.items():
        for budget in budgets:
            part = HarvestedSet(full.images[:budget], full.labels[:budget],
                                full.endpoint_id, budget)
            for seed in seeds:
                surrogate = train_surrogate(extractor, part, head, cfg, seed=seed)
                rows.append({
                    "guess": guess_id, "budget": budget, "seed": seed,
                    "accuracy": accuracy(surrogate, test_set),
                    "fidelity": fidelity(surrogate, endpoint, test_set.images),
                    "queries": budget,
                })
    return StealingCurves(rows)
