"""Sequential network: shape-checked forward, reverse-mode gradients.

A Network owns an ordered layer list plus a fixed input shape. Inputs are
pixel-valued (0..255); `pixel_scale` is applied on entry so convolutions
see unit-scale activations. Gradients returned by `input_gradient` are
with respect to the raw pixel input (the scale factor is part of the
chain).
"""

from __future__ import annotations

import numpy as np

from .layers import ShapeError, layer_from_spec


class Network:
    def __init__(self, layers, input_shape, pixel_scale=1.0):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.pixel_scale = float(pixel_scale)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(layer.out_shape(self.shapes[-1]))
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}", layer_index=i) from None

    @property
    def out_shape(self):
        return self.shapes[-1]

    def init_params(self, rng):
        for layer in self.layers:
            layer.init_params(rng)

    def _check_input(self, x):
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"layer 0: input shape {x.shape[1:]} != declared {self.input_shape}",
                layer_index=0)

    def forward(self, x, train=False, train_layers=None, mutate=None,
                want_caches=False, start=0, upto=None):
        """Run layers [start, upto); `train_layers` restricts train-mode
        behavior (batchnorm batch statistics + running-stat updates) to those
        layer indices. Layers outside the set run in eval mode, so frozen
        blocks never see or write batch statistics. With start > 0, `x` is
        the activation at that boundary (pixel scaling already applied)."""
        x = np.asarray(x)
        if x.dtype == np.uint8:
            x = x.astype(np.float32)
        if mutate is None:
            mutate = train
        stop = len(self.layers) if upto is None else upto
        if start == 0:
            self._check_input(x)
            out = x * x.dtype.type(self.pixel_scale) if self.pixel_scale != 1.0 else x
        else:
            out = x
        caches = []
        for i in range(start, stop):
            layer = self.layers[i]
            layer_train = train and (train_layers is None or i in train_layers)
            out, cache = layer.forward(out, train=layer_train, mutate=layer_train and mutate)
            if want_caches:
                caches.append(cache)
        if want_caches:
            return out, caches
        return out

    def backward(self, dout, caches, param_layers=None, start=0, upto=None):
        """Backpropagate through layers [start, upto) given their caches.

        Returns (dx at the `start` boundary — the raw input when start is 0 —
        and {layer_index: {param: grad}}); parameter gradients are computed
        only for `param_layers`.
        """
        stop = len(self.layers) if upto is None else upto
        grads = {}
        d = dout
        for i in range(stop - 1, start - 1, -1):
            layer = self.layers[i]
            want = layer.params and (param_layers is None or i in param_layers)
            d, g = layer.backward(d, caches[i - start], want_param_grads=bool(want))
            if want:
                grads[i] = g
        if start == 0 and self.pixel_scale != 1.0:
            d = d * d.dtype.type(self.pixel_scale)
        return d, grads

    def param_items(self, layer_ids=None):
        """Yield ((layer_index, name), array) for learnable parameters."""
        for i, layer in enumerate(self.layers):
            if layer_ids is not None and i not in layer_ids:
                continue
            for name in layer.params:
                yield (i, name), layer.params[name]

    def state_bytes(self):
        """Concatenated little-endian bytes of all params and state, in
        declaration order. Used for checksums and bitwise comparisons."""
        chunks = []
        for layer in self.layers:
            for group, name in layer.param_order():
                arr = getattr(layer, group)[name]
                chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(chunks)

    def load_state_bytes(self, blob):
        offset = 0
        for layer in self.layers:
            for group, name in layer.param_order():
                arr = getattr(layer, group)[name]
                nbytes = arr.size * 4
                flat = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=offset)
                getattr(layer, group)[name] = flat.reshape(arr.shape).copy()
                offset += nbytes
        if offset != len(blob):
            raise ValueError(f"state blob has {len(blob)} bytes, expected {offset}")

    def copy(self):
        clone = Network([layer_from_spec(l.spec()) for l in self.layers],
                        self.input_shape, self.pixel_scale)
        clone.load_state_bytes(self.state_bytes())
        return clone

    def spec(self):
        return {"input_shape": list(self.input_shape),
                "pixel_scale": self.pixel_scale,
                "layers": [l.spec() for l in self.layers]}

    @staticmethod
    def from_spec(d):
        return Network([layer_from_spec(s) for s in d["layers"]],
                       tuple(d["input_shape"]), d.get("pixel_scale", 1.0))

    def predict_labels(self, x, batch_size=256):
        x = np.asarray(x)
        out = []
        for i in range(0, len(x), batch_size):
            out.append(np.argmax(self.forward(x[i:i + batch_size]), axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of integer labels under output probs.

    Returns (loss, dloss/dprobs). Probabilities are clipped at 1e-12 so the
    gradient through a preceding softmax stays finite.
    """
    n = probs.shape[0]
    p = np.clip(probs[np.arange(n), labels], 1e-12, None)
    loss = float(-np.sum(np.log(p), dtype=np.float64) / n)
    d = np.zeros_like(probs)
    d[np.arange(n), labels] = (-1.0 / (n * p)).astype(probs.dtype)
    return loss, d


class FeatureMatchLoss:
    """L2 distance between an output feature map and a fixed target."""

    def __init__(self, target):
        self.target = np.asarray(target)

    def __call__(self, out):
        diff = out - self.target.astype(out.dtype)
        norm = float(np.sqrt(np.sum(diff.astype(np.float64) ** 2)))
        if norm == 0.0:
            return 0.0, np.zeros_like(out)
        return norm, (diff / out.dtype.type(norm))


def input_gradient(network, x, loss_fn):
    """Gradient of a scalar loss of the network output w.r.t. the input.

    Parameters are frozen; the network runs in eval mode. `loss_fn` maps
    the output to (scalar value, dloss/doutput).
    """
    x = np.asarray(x)
    if x.dtype == np.uint8:
        x = x.astype(np.float32)
    out, caches = network.forward(x, train=False, want_caches=True)
    value, dout = loss_fn(out)
    if np.ndim(value) != 0:
        raise ValueError(f"loss must be scalar, got shape {np.shape(value)}")
    dx, _ = network.backward(dout, caches, param_layers=())
    return dx


def train_step(network, batch, labels, opt, trainable_layers=None, start=0):
    """One optimizer step of cross-entropy training.

    `trainable_layers` is the set of layer indices whose parameters may
    change; batchnorm running statistics update only inside that set
    (frozen layers run in eval mode). With start > 0 the batch holds
    activations at that layer boundary (a frozen prefix computed once
    outside the loop). Returns the batch loss.
    """
    batch = np.asarray(batch)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels)
    out, caches = network.forward(batch, train=True, train_layers=trainable_layers,
                                  mutate=True, want_caches=True, start=start)
    loss, dout = cross_entropy(out, labels)
    if trainable_layers is not None and not trainable_layers:
        return loss
    _, grads = network.backward(dout, caches, param_layers=trainable_layers, start=start)
    flat = {(i, name): g for i, by_name in grads.items() for name, g in by_name.items()}
    opt.update(flat)
    return loss
