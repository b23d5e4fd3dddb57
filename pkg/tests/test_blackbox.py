"""Exposure modes, query accounting (including concurrency), and the TCP
wire protocol's equivalence with in-process queries."""

import json
import socket
import threading

import numpy as np
import pytest

from teacherfp import wire, zoo
from teacherfp.blackbox import (ExposureMode, LocalEndpoint, ProtocolError,
                                Response)
from teacherfp.datasets import make_digits
from teacherfp.zoo import TrainConfig


@pytest.fixture(scope="module")
def network():
    t = zoo.build_teacher("tiny3", 0)
    zoo.train_teacher(t, make_digits(400, seed=100, id="bb-train"),
                      cfg=TrainConfig(epochs=2, batch_size=64, lr=0.002))
    return t.network


@pytest.fixture(scope="module")
def images():
    return make_digits(100, seed=102, id="bb-q").images


def test_mode_parsing():
    assert ExposureMode.parse("top1").kind == "top1"
    assert ExposureMode.parse("noisy:0.2") == ExposureMode("noisy", 0.2)
    assert ExposureMode.parse("noisy").sigma == 0.05
    with pytest.raises(ValueError):
        ExposureMode("topk")


def test_top1_is_argmax_of_posteriors():
    assert Response(posteriors=np.array([0.1, 0.7, 0.2])).top1() == 1


def test_counter_starts_at_zero_and_reads_are_free(network):
    ep = LocalEndpoint(network)
    assert ep.query_count() == 0
    assert ep.query_count() == 0


def test_query_counts_and_label_mode(network, images):
    ep = LocalEndpoint(network)
    r = ep.query(images[0])
    assert r.label is not None and r.posteriors is None
    assert ep.query_count() == 1
    ep.query_many(images[:10])
    assert ep.query_count() == 11


def test_shape_mismatch_still_spends_query(network):
    ep = LocalEndpoint(network)
    with pytest.raises(ProtocolError):
        ep.query(np.zeros((1, 16, 16), dtype=np.uint8))
    with pytest.raises(ProtocolError):
        ep.query(np.zeros((1, 32, 32), dtype=np.float32))  # not 8-bit
    assert ep.query_count() == 2


def test_exposure_monotonicity_top1_equals_argmax_raw(network, images):
    top = LocalEndpoint(network, ExposureMode("top1"))
    raw = LocalEndpoint(network, ExposureMode("raw"))
    for img in images[:20]:
        assert top.query(img).label == int(np.argmax(raw.query(img).posteriors))


def test_sigma_zero_noisy_equals_raw(network, images):
    noisy = LocalEndpoint(network, ExposureMode("noisy", 0.0))
    raw = LocalEndpoint(network, ExposureMode("raw"))
    for img in images[:5]:
        np.testing.assert_allclose(noisy.query(img).posteriors,
                                   raw.query(img).posteriors, atol=1e-7)


def test_noisy_posteriors_renormalized(network, images):
    ep = LocalEndpoint(network, ExposureMode("noisy", 0.5), seed=1)
    for img in images[:10]:
        p = ep.query(img).posteriors
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-6


def test_small_noise_rarely_changes_argmax(network, images):
    raw = LocalEndpoint(network, ExposureMode("raw"))
    noisy = LocalEndpoint(network, ExposureMode("noisy", 1e-4), seed=2)
    agree = sum(int(np.argmax(noisy.query(img).posteriors)
                    == np.argmax(raw.query(img).posteriors))
                for img in np.repeat(images[:20], 50, axis=0))
    assert agree / 1000 >= 0.99


def test_counter_exact_under_concurrency(network, images):
    ep = LocalEndpoint(network)
    k, n = 8, 25

    def worker():
        for i in range(n):
            ep.query(images[i % len(images)])

    threads = [threading.Thread(target=worker) for _ in range(k)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ep.query_count() == k * n


# --------------------------------------------------------------------- wire

def test_local_vs_remote_identical_labels_and_counts(network, images):
    local = LocalEndpoint(network)
    with wire.serve(network) as server:
        remote = wire.connect(server.address)
        assert remote.input_shape == local.input_shape
        assert remote.classes == local.classes
        local_labels = [local.query(img).label for img in images]
        remote_labels = [remote.query(img).label for img in images]
        assert local_labels == remote_labels
        assert remote.query_count() == local.query_count() == len(images)
        remote.close()


def test_remote_posterior_mode(network, images):
    local = LocalEndpoint(network, ExposureMode("raw"))
    with wire.serve(network, ExposureMode("raw")) as server:
        remote = wire.connect(server.address)
        got = remote.query(images[0]).posteriors
        want = local.query(images[0]).posteriors
        np.testing.assert_allclose(got, want, atol=1e-6)
        remote.close()


def test_malformed_frame_gets_error_and_connection_survives(network, images):
    with wire.serve(network) as server:
        sock = socket.create_connection(server.address)
        f = sock.makefile("rwb")
        f.write(b"this is not json\n")
        f.flush()
        assert json.loads(f.readline()) == {"error": "bad_request"}
        # next request on the same connection still works
        import base64
        msg = {"id": 1, "shape": list(images[0].shape),
               "pixels": base64.b64encode(images[0].tobytes()).decode()}
        f.write(json.dumps(msg).encode() + b"\n")
        f.flush()
        reply = json.loads(f.readline())
        assert reply["id"] == 1 and "label" in reply
        sock.close()


def test_remote_shape_mismatch_spends_query(network):
    with wire.serve(network) as server:
        remote = wire.connect(server.address)
        with pytest.raises(ProtocolError):
            remote.query(np.zeros((1, 8, 8), dtype=np.uint8))
        assert remote.query_count() == 1
        remote.close()


def test_remote_counter_after_n_queries(network, images):
    with wire.serve(network) as server:
        remote = wire.connect(server.address)
        for img in images[:7]:
            remote.query(img)
        assert remote.query_count() == 7
        remote.close()
