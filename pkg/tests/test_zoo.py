"""Zoo: deterministic builds, block segmentation, extraction prefix
property, serialization round-trips, registry behavior."""

import numpy as np
import pytest

from teacherfp import zoo
from teacherfp.datasets import make_digits
from teacherfp.nn import (BatchNorm, Conv2d, Flatten, Linear, MaxPool2d,
                          Network, ReLU, Softmax)


def test_build_teacher_deterministic_checksum():
    assert zoo.build_teacher("tiny3", 0).checksum() == zoo.build_teacher("tiny3", 0).checksum()


def test_build_teacher_seed_changes_checksum():
    assert zoo.build_teacher("tiny3", 0).checksum() != zoo.build_teacher("tiny3", 1).checksum()


def test_unknown_architecture_rejected():
    with pytest.raises(ValueError, match="unknown architecture"):
        zoo.build_teacher("resnet999", 0)


def test_catalog_has_batchnorm_and_batchnorm_free_architectures():
    kinds = {}
    for name in zoo.ARCHITECTURES:
        t = zoo.build_teacher(name, 0)
        kinds[name] = any(l.kind == "batchnorm" for l in t.network.layers)
    assert any(kinds.values()) and not all(kinds.values())
    # the batchnorm-bearing one interleaves batchnorm with its convolutions
    t = zoo.build_teacher("bnpool5", 0)
    layer_kinds = [l.kind for l in t.network.layers]
    assert "batchnorm" in layer_kinds
    assert layer_kinds.index("batchnorm") > layer_kinds.index("conv2d")


def test_catalog_block_counts_in_range():
    for name in zoo.ARCHITECTURES:
        t = zoo.build_teacher(name, 0)
        assert 2 <= t.n_blocks <= 5, name


# ----------------------------------------------------------- segmentation

def test_segment_two_pool_stack():
    net = Network([Conv2d(1, 2, 3, padding=1), ReLU(), MaxPool2d(2),
                   Conv2d(2, 4, 3, padding=1), ReLU(), MaxPool2d(2)], (1, 8, 8))
    assert zoo.segment_blocks(net) == [2, 5]


def test_segment_pool_free_single_block_warns():
    net = Network([Conv2d(1, 2, 3, padding=1), ReLU()], (1, 8, 8))
    with pytest.warns(UserWarning, match="single block"):
        assert zoo.segment_blocks(net) == [1]


def test_segment_five_pool_analogue_gives_five_blocks():
    t = zoo.build_teacher("bnpool5", 0)
    assert t.n_blocks == 5
    pools = [i for i, l in enumerate(t.network.layers) if l.kind == "maxpool"]
    assert t.block_ends[:4] == pools[:4]


def test_deepest_block_absorbs_pretrained_fc_layers():
    t = zoo.build_teacher("fcdeep2", 0)
    ex = zoo.extract_feature_map(t, t.n_blocks)
    assert any(l.kind == "linear" for l in ex.network.layers)
    assert ex.out_shape == (64,)  # penultimate features, not class scores


# ------------------------------------------------------------- extraction

@pytest.mark.parametrize("arch", sorted(zoo.ARCHITECTURES))
def test_extractor_prefix_property(arch):
    t = zoo.build_teacher(arch, 0)
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (10, 1, 32, 32)).astype(np.float32)
    for cut in range(1, t.n_blocks + 1):
        ex = zoo.extract_feature_map(t, cut)
        end = t.block_ends[cut - 1]
        truncated = t.network.forward(x, upto=end + 1)
        np.testing.assert_array_equal(ex.forward(x), truncated)  # 0 ulp


def test_extract_cut_out_of_range():
    t = zoo.build_teacher("tiny3", 0)
    with pytest.raises(ValueError, match="out of range"):
        zoo.extract_feature_map(t, t.n_blocks + 1)


def test_default_cut_is_whole_convolutional_prefix():
    t = zoo.build_teacher("tiny3", 0)
    ex = zoo.extract_feature_map(t)
    # everything up to and including the last pool + flatten, no classifier
    assert all(l.kind != "softmax" for l in ex.network.layers)
    assert ex.out_shape == (32 * 4 * 4,)


def test_zoo_discriminability_gate():
    teachers = [zoo.build_teacher("tiny3", 0), zoo.build_teacher("tiny3", 1),
                zoo.build_teacher("wide3", 0)]
    extractors = [zoo.extract_feature_map(t) for t in teachers]
    dists = zoo.mean_feature_distances(extractors, n=100, seed=0)
    assert dists  # same-shape pairs exist
    assert all(v > 0 for v in dists.values())


# ------------------------------------------------------------ train/persist

@pytest.fixture(scope="module")
def trained_teacher():
    t = zoo.build_teacher("tiny3", 0)
    train = make_digits(500, seed=100, id="zt-train")
    test = make_digits(150, seed=101, id="zt-test")
    zoo.train_teacher(t, train, test, zoo.TrainConfig(epochs=4, batch_size=64, lr=0.002))
    return t


def test_zero_epoch_training_is_identity():
    t = zoo.build_teacher("wide3", 3)
    before = t.network.state_bytes()
    ds = make_digits(64, seed=5, id="zz")
    zoo.train_teacher(t, ds, cfg=zoo.TrainConfig(epochs=0))
    assert t.network.state_bytes() == before
    assert t.test_acc is not None


def test_training_reaches_ninety_percent_train_accuracy():
    # 3-block CNN, 10-class set, well under the 10-epoch budget
    t = zoo.build_teacher("tiny3", 0)
    train = make_digits(1000, seed=100, id="acc-train")
    zoo.train_teacher(t, train, cfg=zoo.TrainConfig(epochs=8, batch_size=64, lr=0.002))
    assert zoo.accuracy_of(t.network, train.images, train.labels) >= 0.90


def test_dataset_shape_mismatch_rejected():
    t = zoo.build_teacher("tiny3", 0)
    from teacherfp.datasets import Dataset
    bad = Dataset("bad", np.zeros((8, 1, 16, 16), dtype=np.uint8),
                  np.zeros(8, dtype=np.int64))
    with pytest.raises(ValueError, match="shape"):
        zoo.train_teacher(t, bad)


def test_teachers_on_disjoint_datasets_have_different_checksums():
    a = zoo.build_teacher("tiny3", 0)
    b = zoo.build_teacher("tiny3", 0)
    cfg = zoo.TrainConfig(epochs=1, batch_size=64)
    zoo.train_teacher(a, make_digits(200, seed=1, id="da"), cfg=cfg)
    zoo.train_teacher(b, make_digits(200, seed=2, id="db"), cfg=cfg)
    assert a.checksum() != b.checksum()


def test_save_load_roundtrip_bitwise(tmp_path, trained_teacher):
    p1 = tmp_path / "t.tfp"
    p2 = tmp_path / "t2.tfp"
    zoo.save(trained_teacher, p1)
    back = zoo.load(p1)
    zoo.save(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.network.state_bytes() == trained_teacher.network.state_bytes()
    assert back.test_acc == trained_teacher.test_acc


def test_load_refuses_flipped_byte(tmp_path, trained_teacher):
    p = tmp_path / "t.tfp"
    zoo.save(trained_teacher, p)
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(zoo.ChecksumError):
        zoo.load(p)


def test_registry_lookup_matches_saved_entry(tmp_path, trained_teacher):
    reg = zoo.ZooRegistry(tmp_path / "zoo")
    entry = reg.register(trained_teacher)
    again = zoo.ZooRegistry(tmp_path / "zoo")  # re-open from disk
    got = again.lookup(trained_teacher.id)
    assert got == entry
    loaded = again.load_teacher(trained_teacher.id)
    assert loaded.network.state_bytes() == trained_teacher.network.state_bytes()
