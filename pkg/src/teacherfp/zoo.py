"""Desk-scale model zoo: build, train, segment, extract and persist teachers.

Blocks follow pooling boundaries: every pooling layer closes a block,
except that the deepest block extends past its pool up to the penultimate
layer (everything before the final output linear+softmax). Cutting at the
deepest block therefore yields the model's penultimate features; for
architectures whose tail holds pre-trained fully connected layers, those
belong to the deepest block and travel with it.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import (AdamState, AvgPool2d, BatchNorm, Conv2d, Flatten, Linear,
                 MaxPool2d, Network, ReLU, Softmax, train_step)

MODEL_FORMAT = "teacherfp-model-v1"


class ChecksumError(RuntimeError):
    pass


def _conv_bn_block(cin, cout):
    return [Conv2d(cin, cout, 3, padding=1), BatchNorm(cout), ReLU(), MaxPool2d(2)]


def _arch_tiny3(classes):
    return [
        Conv2d(1, 8, 3, padding=1), ReLU(), MaxPool2d(2),
        Conv2d(8, 16, 3, padding=1), ReLU(), MaxPool2d(2),
        Conv2d(16, 32, 3, padding=1), ReLU(), MaxPool2d(2),
        Flatten(), Linear(32 * 4 * 4, classes), Softmax(),
    ]


def _arch_bnpool5(classes):
    layers = (_conv_bn_block(1, 8) + _conv_bn_block(8, 16) + _conv_bn_block(16, 24)
              + _conv_bn_block(24, 32) + _conv_bn_block(32, 48))
    return layers + [Flatten(), Linear(48, classes), Softmax()]


def _arch_fcdeep2(classes):
    return [
        Conv2d(1, 8, 3, padding=1), ReLU(), MaxPool2d(2),
        Conv2d(8, 16, 3, padding=1), ReLU(), MaxPool2d(2),
        Flatten(), Linear(16 * 8 * 8, 128), ReLU(), Linear(128, classes), Softmax(),
    ]


def _arch_wide3(classes):
    return [
        Conv2d(1, 12, 5, padding=2), ReLU(), AvgPool2d(2),
        Conv2d(12, 24, 3, padding=1), ReLU(), AvgPool2d(2),
        Conv2d(24, 32, 3, padding=1), ReLU(), MaxPool2d(2),
        Flatten(), Linear(32 * 4 * 4, classes), Softmax(),
    ]


# name -> builder; tiny3/wide3 are batchnorm-free, bnpool5 interleaves
# batchnorm with its convolutions, fcdeep2 carries fully connected layers
# inside its deepest block.
ARCHITECTURES = {
    "tiny3": _arch_tiny3,
    "bnpool5": _arch_bnpool5,
    "fcdeep2": _arch_fcdeep2,
    "wide3": _arch_wide3,
}

INPUT_SHAPE = (1, 32, 32)
PIXEL_SCALE = 1.0 / 255.0


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0


@dataclass
class Teacher:
    id: str
    arch_name: str
    seed: int
    network: Network
    dataset_id: str = ""
    block_ends: list = field(default_factory=list)
    test_acc: float | None = None

    @property
    def n_blocks(self):
        return len(self.block_ends)

    def checksum(self):
        return hashlib.sha256(serialize_model(self.network, self._meta())).hexdigest()

    def _meta(self):
        return {"format": MODEL_FORMAT, "kind": "teacher", "id": self.id,
                "arch": self.arch_name, "seed": self.seed,
                "dataset": self.dataset_id, "block_ends": list(self.block_ends),
                "test_acc": self.test_acc}


@dataclass
class FeatureExtractor:
    teacher_id: str
    cut: int                  # 1-based block index, counted from the input
    network: Network          # read-only prefix; shares the teacher's arrays
    block_ends: list = field(default_factory=list)

    @property
    def out_shape(self):
        return self.network.out_shape

    @property
    def out_dim(self):
        return int(np.prod(self.network.out_shape))

    def forward(self, x):
        return self.network.forward(x)


def segment_blocks(network):
    """Block end indices (inclusive). See module docstring for the rule."""
    pools = [i for i, l in enumerate(network.layers) if l.kind in ("maxpool", "avgpool")]
    linears = [i for i, l in enumerate(network.layers) if l.kind == "linear"]
    head_start = linears[-1] if linears else len(network.layers)
    penultimate = head_start - 1
    ends = [p for p in pools if p < head_start]
    if not ends:
        warnings.warn("model has no pooling layer; treating it as a single block")
        return [max(penultimate, 0)]
    ends[-1] = max(ends[-1], penultimate)
    return ends


def build_teacher(arch_name, seed, classes=10):
    """Deterministically initialized, untrained teacher."""
    if arch_name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch_name!r}; "
                         f"catalog: {sorted(ARCHITECTURES)}")
    network = Network(ARCHITECTURES[arch_name](classes), INPUT_SHAPE, PIXEL_SCALE)
    rng = np.random.default_rng([seed, _stable_seed(arch_name)])
    network.init_params(rng)
    teacher = Teacher(id=f"{arch_name}-s{seed}", arch_name=arch_name, seed=seed,
                      network=network)
    teacher.block_ends = segment_blocks(network)
    return teacher


def fit_network(network, images, labels, cfg, trainable_layers=None, start=0):
    """Cross-entropy training loop; returns per-epoch mean losses."""
    opt = AdamState(dict(network.param_items(trainable_layers)),
                    lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng([cfg.seed, _stable_seed("shuffle")])
    n = len(images)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue  # batchnorm needs at least two samples in train mode
            losses.append(train_step(network, _as_input(images[idx]), labels[idx],
                                     opt, trainable_layers, start=start))
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return history


def _as_input(images):
    return images.astype(np.float32) if images.dtype == np.uint8 else images


def accuracy_of(network, images, labels, batch_size=512):
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    pred = network.predict_labels(_as_input(images), batch_size)
    return float(np.mean(pred == labels))


def train_teacher(teacher, train_set, test_set=None, cfg=None):
    """Train in place; returns (teacher, test accuracy)."""
    cfg = cfg or TrainConfig()
    if train_set.shape != teacher.network.input_shape:
        raise ValueError(f"dataset shape {train_set.shape} != model input "
                         f"{teacher.network.input_shape}")
    if cfg.epochs > 0:
        fit_network(teacher.network, train_set.images, train_set.labels, cfg)
    teacher.dataset_id = train_set.id
    eval_set = test_set if test_set is not None else train_set
    teacher.test_acc = accuracy_of(teacher.network, eval_set.images, eval_set.labels)
    return teacher, teacher.test_acc


def extract_feature_map(teacher, cut_block=None):
    """Prefix of the teacher up to the end of `cut_block` (default: deepest)."""
    if cut_block is None:
        cut_block = teacher.n_blocks
    if not 1 <= cut_block <= teacher.n_blocks:
        raise ValueError(f"cut {cut_block} out of range 1..{teacher.n_blocks}")
    end = teacher.block_ends[cut_block - 1]
    prefix = Network(teacher.network.layers[:end + 1], teacher.network.input_shape,
                     teacher.network.pixel_scale)
    return FeatureExtractor(teacher.id, cut_block, prefix,
                            list(teacher.block_ends[:cut_block]))


def mean_feature_distances(extractors, n=100, seed=0):
    """Mean pairwise feature L2 distance on random inputs, for extractor pairs
    with matching output shapes (differently shaped pairs are trivially
    distinct). Sanity gate before attack experiments."""
    rng = np.random.default_rng([seed, _stable_seed("discriminability")])
    shape = extractors[0].network.input_shape
    x = rng.integers(0, 256, (n,) + shape).astype(np.float32)
    feats = [e.forward(x).reshape(n, -1) for e in extractors]
    out = {}
    for i in range(len(extractors)):
        for j in range(i + 1, len(extractors)):
            if feats[i].shape != feats[j].shape:
                continue
            d = np.linalg.norm((feats[i] - feats[j]).astype(np.float64), axis=1)
            out[(extractors[i].teacher_id, extractors[j].teacher_id)] = float(d.mean())
    return out


def serialize_model(network, meta):
    header = dict(meta)
    blob = network.state_bytes()
    header["network"] = network.spec()
    header["param_bytes"] = len(blob)
    head = json.dumps(header, sort_keys=True).encode() + b"\n"
    body = head + blob
    return body + hashlib.sha256(body).hexdigest().encode()


def deserialize_model(data):
    body, checksum = data[:-64], data[-64:]
    if hashlib.sha256(body).hexdigest().encode() != checksum:
        raise ChecksumError("model file checksum mismatch; refusing to load")
    head, _, blob = body.partition(b"\n")
    meta = json.loads(head.decode())
    if meta.get("format") != MODEL_FORMAT:
        raise ValueError(f"unexpected model format {meta.get('format')!r}")
    if meta["param_bytes"] != len(blob):
        raise ChecksumError("parameter blob length mismatch")
    network = Network.from_spec(meta["network"])
    network.load_state_bytes(blob)
    return network, meta


def save(teacher, path):
    data = serialize_model(teacher.network, teacher._meta())
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    network, meta = deserialize_model(Path(path).read_bytes())
    if meta.get("kind") != "teacher":
        raise ValueError(f"{path} holds a {meta.get('kind')!r}, not a teacher")
    return Teacher(id=meta["id"], arch_name=meta["arch"], seed=meta["seed"],
                   network=network, dataset_id=meta["dataset"],
                   block_ends=list(meta["block_ends"]), test_acc=meta["test_acc"])


class ZooRegistry:
    """Directory of saved teachers plus a JSON index."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "registry.json"
        self.entries = {}
        if self.index_path.exists():
            self.entries = json.loads(self.index_path.read_text())

    def register(self, teacher):
        path = self.root / f"{teacher.id}.tfp"
        checksum = save(teacher, path)
        self.entries[teacher.id] = {
            "arch": teacher.arch_name, "seed": teacher.seed,
            "dataset": teacher.dataset_id, "checksum": checksum,
            "path": path.name, "test_acc": teacher.test_acc,
            "blocks": teacher.n_blocks,
        }
        self._flush()
        return self.entries[teacher.id]

    def lookup(self, teacher_id):
        return self.entries[teacher_id]

    def load_teacher(self, teacher_id):
        entry = self.entries[teacher_id]
        path = self.root / entry["path"]
        data = path.read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["checksum"]:
            raise ChecksumError(f"{teacher_id}: file does not match registered checksum")
        return load(path)

    def _flush(self):
        self.index_path.write_text(json.dumps(self.entries, sort_keys=True, indent=1))


def _stable_seed(role):
    return int.from_bytes(hashlib.sha256(role.encode()).digest()[:4], "big")
