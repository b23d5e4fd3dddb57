"""Students: teacher feature extractor + fresh classification head.

A head is a stack of fully connected layers with relu+batchnorm after
each, closed by a softmax output of width c. Tuning policies decide which
transferred blocks may move during training; everything else stays
bitwise identical to the teacher, running statistics included.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import zoo
from .nn import BatchNorm, Flatten, Linear, Network, ReLU, ShapeError, Softmax
from .zoo import MODEL_FORMAT, TrainConfig, accuracy_of, fit_network


class TuningPolicy(Enum):
    FROZEN = "frozen"
    LAST_BLOCK = "last-block"
    LAST_TWO_BLOCKS = "last-two-blocks"

    @property
    def tunable_blocks(self):
        return {"frozen": 0, "last-block": 1, "last-two-blocks": 2}[self.value]


@dataclass(frozen=True)
class HeadSpec:
    widths: tuple        # hidden fully connected widths, input to output
    classes: int         # terminal softmax width c

    def layers(self, in_features):
        out = []
        prev = in_features
        for w in self.widths:
            out += [Linear(prev, w), ReLU(), BatchNorm(w)]
            prev = w
        out += [Linear(prev, self.classes), Softmax()]
        return out


# Three heads per task, mirroring the usual "one or two hidden FC layers"
# transfer pattern at desk width.
HEAD_CATALOG = ((64,), (128, 32), (256, 64))
# Surrogates in the stealing study use this single-hidden-layer head.
STEAL_HEAD_WIDTHS = (128,)


@dataclass
class Student:
    id: str
    network: Network
    teacher_id: str
    cut: int
    policy: TuningPolicy
    head: HeadSpec
    classes: int
    extractor_len: int            # layers [0, extractor_len) came from the teacher
    block_ends: list              # absolute end index per transferred block
    seed: int = 0
    dataset_id: str = ""
    test_acc: float | None = None

    def trainable_layers(self):
        """Head layers plus the extractor blocks opened by the policy."""
        layers = set(range(self.extractor_len, len(self.network.layers)))
        k = min(self.policy.tunable_blocks, len(self.block_ends))
        for b in range(len(self.block_ends) - k, len(self.block_ends)):
            lo = 0 if b == 0 else self.block_ends[b - 1] + 1
            layers.update(range(lo, self.block_ends[b] + 1))
        return layers

    def extractor_bytes(self):
        """Bitwise snapshot of transferred parameters and running stats."""
        chunks = []
        for layer in self.network.layers[:self.extractor_len]:
            for group, name in layer.param_order():
                chunks.append(np.ascontiguousarray(
                    getattr(layer, group)[name], dtype="<f4").tobytes())
        return b"".join(chunks)

    def _meta(self):
        return {"format": MODEL_FORMAT, "kind": "student", "id": self.id,
                "arch": "", "seed": self.seed, "dataset": self.dataset_id,
                "teacher_id": self.teacher_id, "cut": self.cut,
                "policy": self.policy.value, "head_widths": list(self.head.widths),
                "classes": self.classes, "extractor_len": self.extractor_len,
                "block_ends": list(self.block_ends), "test_acc": self.test_acc}


def build_student(extractor, head, policy, seed, id=None):
    """Copy the extractor by value and stack a freshly initialized head."""
    prefix = extractor.network.copy()
    layers = list(prefix.layers)
    if len(prefix.out_shape) > 1:
        layers.append(Flatten())
    in_features = int(np.prod(prefix.out_shape))
    head_layers = head.layers(in_features)
    rng = np.random.default_rng([seed, zoo._stable_seed("head-init")])
    for layer in head_layers:
        layer.init_params(rng)
    try:
        network = Network(layers + head_layers, prefix.input_shape, prefix.pixel_scale)
    except ShapeError as e:
        raise ShapeError(f"head does not fit extractor output "
                         f"{prefix.out_shape}: {e}") from None
    sid = id or f"{extractor.teacher_id}-c{extractor.cut}-{policy.value}-h{seed}"
    return Student(id=sid, network=network, teacher_id=extractor.teacher_id,
                   cut=extractor.cut, policy=policy, head=head,
                   classes=head.classes, extractor_len=len(prefix.layers),
                   block_ends=list(extractor.block_ends), seed=seed)


def train_student(student, train_set, test_set=None, cfg=None):
    """Train honoring the tuning policy; returns (student, test accuracy).

    The frozen prefix below the lowest trainable layer is evaluated once
    over the dataset and reused every step; this is exact because frozen
    layers run in eval mode during training anyway.
    """
    cfg = cfg or TrainConfig()
    labels = train_set.labels
    if labels is None:
        raise ValueError("student training needs labels")
    if labels.size and (labels.min() < 0 or labels.max() >= student.classes):
        raise ValueError(f"label out of range for {student.classes}-class head")
    trainable = student.trainable_layers()
    boundary = min(trainable)
    if cfg.epochs > 0:
        feats = _forward_in_batches(student.network, train_set.images, upto=boundary)
        fit_network(student.network, feats, labels, cfg,
                    trainable_layers=trainable, start=boundary)
    student.dataset_id = train_set.id
    eval_set = test_set if test_set is not None else train_set
    student.test_acc = evaluate(student, eval_set)
    return student, student.test_acc


def _forward_in_batches(network, images, upto, batch_size=512):
    out = []
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size].astype(np.float32)
        out.append(network.forward(x, upto=upto))
    return np.concatenate(out)


def evaluate(student, test_set):
    """Fraction of argmax-correct predictions."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    return accuracy_of(student.network, test_set.images, test_set.labels)


def save_student(student, path):
    data = zoo.serialize_model(student.network, student._meta())
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_student(path):
    network, meta = zoo.deserialize_model(Path(path).read_bytes())
    if meta.get("kind") != "student":
        raise ValueError(f"{path} holds a {meta.get('kind')!r}, not a student")
    head = HeadSpec(tuple(meta["head_widths"]), meta["classes"])
    return Student(id=meta["id"], network=network, teacher_id=meta["teacher_id"],
                   cut=meta["cut"], policy=TuningPolicy(meta["policy"]), head=head,
                   classes=meta["classes"], extractor_len=meta["extractor_len"],
                   block_ends=list(meta["block_ends"]), seed=meta["seed"],
                   dataset_id=meta["dataset"], test_acc=meta["test_acc"])
