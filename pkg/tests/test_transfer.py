"""Students: head construction, tuning policies, the bitwise frozen
invariant, batchnorm-stat behavior under fine-tuning, evaluation."""

import numpy as np
import pytest

from teacherfp import transfer, zoo
from teacherfp.datasets import make_digits, make_shapes
from teacherfp.transfer import HeadSpec, TuningPolicy
from teacherfp.zoo import TrainConfig


@pytest.fixture(scope="module")
def teacher():
    t = zoo.build_teacher("bnpool5", 0)
    zoo.train_teacher(t, make_digits(600, seed=100, id="tt-train"),
                      cfg=TrainConfig(epochs=3, batch_size=64, lr=0.002))
    return t


@pytest.fixture(scope="module")
def extractor(teacher):
    return zoo.extract_feature_map(teacher)


@pytest.fixture(scope="module")
def shapes_train():
    return make_shapes(400, seed=200, id="st-train", labeling="shape")


def _prefix_bytes(network, n_layers):
    chunks = []
    for layer in network.layers[:n_layers]:
        for grp, name in layer.param_order():
            chunks.append(np.ascontiguousarray(getattr(layer, grp)[name]).tobytes())
    return b"".join(chunks)


def test_head_layers_follow_fc_relu_bn_pattern():
    layers = HeadSpec((128,), 10).layers(48)
    kinds = [l.kind for l in layers]
    assert kinds == ["linear", "relu", "batchnorm", "linear", "softmax"]
    assert layers[0].out_features == 128 and layers[3].out_features == 10


def test_head_catalog_has_three_heads():
    assert len(transfer.HEAD_CATALOG) == 3


def test_build_student_frozen_mask_covers_head_only(extractor):
    s = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 0)
    assert s.trainable_layers() == set(range(s.extractor_len, len(s.network.layers)))


def test_build_student_last_two_blocks_mask(extractor):
    s = transfer.build_student(extractor, HeadSpec((64,), 10),
                               TuningPolicy.LAST_TWO_BLOCKS, 0)
    # 5-block extractor: blocks 4 and 5 plus the head are trainable
    expected = set(range(s.block_ends[2] + 1, len(s.network.layers)))
    assert s.trainable_layers() == expected


def test_policy_masks_are_nested(extractor):
    masks = {pol: transfer.build_student(extractor, HeadSpec((64,), 10),
                                         pol, 0).trainable_layers()
             for pol in TuningPolicy}
    assert masks[TuningPolicy.FROZEN] < masks[TuningPolicy.LAST_BLOCK]
    assert masks[TuningPolicy.LAST_BLOCK] < masks[TuningPolicy.LAST_TWO_BLOCKS]


def test_three_heads_build_three_distinct_students(extractor):
    students = [transfer.build_student(extractor, HeadSpec(w, 10), TuningPolicy.FROZEN, 0)
                for w in transfer.HEAD_CATALOG]
    dims = {tuple(l.out_features for l in s.network.layers if l.kind == "linear")
            for s in students}
    assert len(dims) == 3


def test_build_student_copies_extractor_by_value(extractor, teacher):
    s = transfer.build_student(extractor, HeadSpec((32,), 10), TuningPolicy.FROZEN, 0)
    s.network.layers[0].params["weight"][:] += 1.0
    assert not np.array_equal(s.network.layers[0].params["weight"],
                              teacher.network.layers[0].params["weight"])


def test_head_seed_determinism(extractor):
    a = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 7)
    b = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 7)
    c = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 8)
    assert a.network.state_bytes() == b.network.state_bytes()
    assert a.network.state_bytes() != c.network.state_bytes()


# ---------------------------------------------------------------- training

def test_frozen_student_extractor_bitwise_equal_to_teacher(extractor, teacher,
                                                           shapes_train):
    s = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 0)
    transfer.train_student(s, shapes_train, cfg=TrainConfig(epochs=2, batch_size=64))
    assert s.extractor_bytes() == _prefix_bytes(teacher.network, s.extractor_len)


def test_last_block_tuning_updates_its_batchnorm_stats(extractor, teacher,
                                                       shapes_train):
    s = transfer.build_student(extractor, HeadSpec((64,), 10),
                               TuningPolicy.LAST_BLOCK, 0)
    transfer.train_student(s, shapes_train, cfg=TrainConfig(epochs=1, batch_size=64))
    last_block = range(s.block_ends[-2] + 1, s.block_ends[-1] + 1)
    changed = unchanged = True
    for i, layer in enumerate(s.network.layers[:s.extractor_len]):
        if layer.kind != "batchnorm":
            continue
        same = np.array_equal(layer.state["running_mean"],
                              teacher.network.layers[i].state["running_mean"])
        if i in last_block:
            changed &= not same
        else:
            unchanged &= same
    assert changed and unchanged


def test_frozen_student_beats_untrained_head(extractor, shapes_train):
    s = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 1)
    baseline = transfer.evaluate(s, shapes_train)
    transfer.train_student(s, shapes_train, cfg=TrainConfig(epochs=3, batch_size=64))
    assert transfer.evaluate(s, shapes_train) > baseline


def test_train_student_rejects_out_of_range_labels(extractor, shapes_train):
    s = transfer.build_student(extractor, HeadSpec((16,), 5), TuningPolicy.FROZEN, 0)
    with pytest.raises(ValueError, match="label out of range"):
        transfer.train_student(s, shapes_train)  # 10-class labels, 5-class head


# -------------------------------------------------------------- evaluation

def test_evaluate_perfect_memorizer_is_one(extractor):
    tiny = make_shapes(40, seed=300, id="tiny", labeling="family")
    s = transfer.build_student(extractor, HeadSpec((64,), 2), TuningPolicy.FROZEN, 0)
    transfer.train_student(s, tiny, cfg=TrainConfig(epochs=30, batch_size=20, lr=0.01))
    assert transfer.evaluate(s, tiny) == 1.0


def test_evaluate_random_predictor_near_chance(extractor):
    # fixed random head vs labels drawn independently of the images:
    # accuracy is Binomial(1000, 1/10)/1000, so within 0.1 +- 0.03 (> 3 sigma)
    s = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 0)
    ds = make_shapes(1000, seed=301, id="rand-eval", labeling="shape")
    rng = np.random.default_rng(17)
    shuffled = ds.subset(np.arange(len(ds)))
    shuffled.labels = rng.integers(0, 10, len(ds)).astype(np.int64)
    acc = transfer.evaluate(s, shuffled)
    assert abs(acc - 0.1) <= 0.03


def test_evaluate_invariant_under_shuffling(extractor, shapes_train):
    s = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 2)
    perm = np.random.default_rng(3).permutation(len(shapes_train))
    assert transfer.evaluate(s, shapes_train) == pytest.approx(
        transfer.evaluate(s, shapes_train.subset(perm)))


def test_evaluate_empty_test_set_rejected(extractor, shapes_train):
    s = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 0)
    with pytest.raises(ValueError, match="empty"):
        transfer.evaluate(s, shapes_train.subset(np.zeros(0, dtype=int)))


# ------------------------------------------------------------- persistence

def test_student_save_load_roundtrip(tmp_path, extractor, shapes_train):
    s = transfer.build_student(extractor, HeadSpec((64,), 10), TuningPolicy.FROZEN, 0)
    transfer.train_student(s, shapes_train, cfg=TrainConfig(epochs=1, batch_size=64))
    p = tmp_path / "student.tfp"
    transfer.save_student(s, p)
    back = transfer.load_student(p)
    assert back.network.state_bytes() == s.network.state_bytes()
    assert back.policy == s.policy and back.cut == s.cut
    assert back.head == s.head and back.teacher_id == s.teacher_id
    x = shapes_train.images[:8]
    np.testing.assert_array_equal(back.network.predict_labels(x.astype(np.float32)),
                                  s.network.predict_labels(x.astype(np.float32)))
