"""Multilayer perceptron used for every network in the pipeline."""

import numpy as np

from plmlab.autodiff.functional import linear, relu
from plmlab.autodiff.tensor import DTYPE, Tensor
from plmlab.errors import DimensionError


class Mlp:
    """Fully connected network with rectifier hidden layers and a linear head.

    ``widths`` lists every layer size including input and output, so
    ``Mlp([784, 256, 128, 10])`` has two hidden layers and ``Mlp([d, c])``
    is a single linear layer.
    """

    def __init__(self, widths, rng=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise DimensionError(f"invalid layer widths {widths}")
        self.widths = widths
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            # He-normal init for rectifier networks
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(Tensor(W, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def in_features(self):
        return self.widths[0]

    @property
    def out_features(self):
        return self.widths[-1]

    def parameters(self):
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend((W, b))
        return params

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=DTYPE).reshape(len(x), -1))
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = linear(h, W, b)
            if i < last:
                h = relu(h)
        return h

    def logits(self, X, batch_size=1024):
        """Untracked forward pass over an array, in chunks."""
        X = np.asarray(X, dtype=DTYPE).reshape(len(X), -1)
        out = np.empty((len(X), self.out_features))
        Ws = [W.data for W in self.weights]
        bs = [b.data for b in self.biases]
        for start in range(0, len(X), batch_size):
            h = X[start:start + batch_size]
            for i, (W, b) in enumerate(zip(Ws, bs)):
                h = h @ W + b
                if i < len(Ws) - 1:
                    h = np.maximum(h, 0.0)
            out[start:start + batch_size] = h
        return out

    def state(self):
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise DimensionError("state has the wrong number of arrays")
        for p, a in zip(params, arrays):
            if p.shape != np.shape(a):
                raise DimensionError(f"state shape {np.shape(a)} != parameter {p.shape}")
            p.data = np.array(a, dtype=DTYPE)
            p.grad = None

    def copy(self):
        clone = Mlp.__new__(Mlp)
        clone.widths = list(self.widths)
        clone.weights = [Tensor(W.data.copy(), requires_grad=True) for W in self.weights]
        clone.biases = [Tensor(b.data.copy(), requires_grad=True) for b in self.biases]
        return clone

    def save(self, path):
        arrays = {f"p{i}": a for i, a in enumerate(self.state())}
        np.savez(path, widths=np.array(self.widths), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            widths = z["widths"].tolist()
            model = cls(widths)
            model.load_state([z[f"p{i}"] for i in range(2 * (len(widths) - 1))])
        return model


def softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model, X, batch_size=1024):
    return softmax_np(model.logits(X, batch_size))
