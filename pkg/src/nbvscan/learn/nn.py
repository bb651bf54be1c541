"""Small feed-forward networks with hand-written backpropagation.

Tensors are channels-last (N, H, W, C). Every parameter of a network lives
in one flat vector; layers hold views into it, so optimisers and
checkpoints work on a single array.
"""

from __future__ import annotations

import json
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    n_params = 0

    def build(self, in_shape: tuple) -> tuple:
        """Bind to an input shape (batch axis excluded); return the output shape."""
        raise NotImplementedError

    def bind(self, theta: np.ndarray, grad: np.ndarray) -> None:
        pass

    def init(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray, extra=None):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache, need_dx: bool = True):
        """Accumulate parameter gradients into the bound grad view; return (dx, d_extra)."""
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, width: int, init_scale: float | None = None):
        self.width = int(width)
        self.init_scale = init_scale

    def build(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense layer needs a flat input, got {in_shape}")
        self.fan_in = in_shape[0]
        self.n_params = self.fan_in * self.width + self.width
        return (self.width,)

    def bind(self, theta, grad):
        k = self.fan_in * self.width
        self.W = theta[:k].reshape(self.fan_in, self.width)
        self.b = theta[k:]
        self.dW = grad[:k].reshape(self.fan_in, self.width)
        self.db = grad[k:]

    def init(self, rng):
        s = self.init_scale if self.init_scale is not None else 1.0 / math.sqrt(self.fan_in)
        self.W[...] = rng.uniform(-s, s, self.W.shape)
        self.b[...] = rng.uniform(-s, s, self.b.shape)

    def forward(self, x, extra=None):
        return x @ self.W + self.b, x

    def backward(self, dy, x, need_dx=True):
        self.dW += x.T @ dy
        self.db += dy.sum(axis=0)
        return (dy @ self.W.T if need_dx else None), None

    def descriptor(self):
        d = {"type": "dense", "width": self.width}
        if self.init_scale is not None:
            d["init_scale"] = self.init_scale
        return d


class Conv2D(Layer):
    """Valid convolution, square kernel, channels-last."""

    def __init__(self, channels: int, kernel: int, stride: int = 1):
        self.channels, self.kernel, self.stride = int(channels), int(kernel), int(stride)

    def build(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"convolution needs an (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        k, s = self.kernel, self.stride
        if h < k or w < k:
            raise ShapeError(f"kernel {k} larger than input {h}x{w}")
        self.in_shape = in_shape
        self.out_hw = ((h - k) // s + 1, (w - k) // s + 1)
        self.n_params = k * k * c * self.channels + self.channels
        return (*self.out_hw, self.channels)

    def bind(self, theta, grad):
        k, c = self.kernel, self.in_shape[2]
        n = k * k * c * self.channels
        self.W = theta[:n].reshape(k * k * c, self.channels)
        self.b = theta[n:]
        self.dW = grad[:n].reshape(k * k * c, self.channels)
        self.db = grad[n:]

    def init(self, rng):
        s = 1.0 / math.sqrt(self.W.shape[0])
        self.W[...] = rng.uniform(-s, s, self.W.shape)
        self.b[...] = rng.uniform(-s, s, self.b.shape)

    def _cols(self, x):
        k, s = self.kernel, self.stride
        oh, ow = self.out_hw
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
        # (N, oh, ow, C, k, k) -> rows ordered (ki, kj, c)
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(x.shape[0] * oh * ow, -1)

    def forward(self, x, extra=None):
        cols = self._cols(x)
        y = cols @ self.W + self.b
        return y.reshape(x.shape[0], *self.out_hw, self.channels), (cols, x.shape)

    def backward(self, dy, cache, need_dx=True):
        cols, xshape = cache
        k, s = self.kernel, self.stride
        oh, ow = self.out_hw
        d = dy.reshape(-1, self.channels)
        self.dW += cols.T @ d
        self.db += d.sum(axis=0)
        if not need_dx:
            return None, None
        dcols = (d @ self.W.T).reshape(xshape[0], oh, ow, k, k, xshape[3])
        dx = np.zeros(xshape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
        return dx, None

    def descriptor(self):
        return {"type": "conv", "channels": self.channels, "kernel": self.kernel, "stride": self.stride}


class ReLU(Layer):
    def build(self, in_shape):
        return in_shape

    def forward(self, x, extra=None):
        return np.maximum(x, 0), x > 0

    def backward(self, dy, mask, need_dx=True):
        return dy * mask, None

    def descriptor(self):
        return {"type": "relu"}


class Tanh(Layer):
    def build(self, in_shape):
        return in_shape

    def forward(self, x, extra=None):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, y, need_dx=True):
        return dy * (1 - y * y), None

    def descriptor(self):
        return {"type": "tanh"}


class Scale(Layer):
    """Fixed per-unit multiplier, e.g. mapping tanh output onto an action range."""

    def __init__(self, factor):
        self.factor = np.atleast_1d(np.asarray(factor, dtype=np.float64))

    def build(self, in_shape):
        if self.factor.size not in (1, in_shape[-1]):
            raise ShapeError(f"scale factor of size {self.factor.size} does not fit {in_shape}")
        return in_shape

    def forward(self, x, extra=None):
        return x * self.factor.astype(x.dtype), None

    def backward(self, dy, cache, need_dx=True):
        return dy * self.factor.astype(dy.dtype), None

    def descriptor(self):
        return {"type": "scale", "factor": self.factor.tolist()}


class Flatten(Layer):
    def build(self, in_shape):
        self.in_shape = in_shape
        return (int(np.prod(in_shape)),)

    def forward(self, x, extra=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, need_dx=True):
        return dy.reshape(shape), None

    def descriptor(self):
        return {"type": "flatten"}


class Concat(Layer):
    """Appends a second input (e.g. an action) to a flat feature vector."""

    def __init__(self, size: int):
        self.size = int(size)

    def build(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError("concat needs a flat input")
        self.split = in_shape[0]
        return (in_shape[0] + self.size,)

    def forward(self, x, extra=None):
        if extra is None:
            raise ShapeError("this network needs a second input")
        extra = np.asarray(extra, dtype=x.dtype).reshape(x.shape[0], self.size)
        return np.concatenate([x, extra], axis=1), None

    def backward(self, dy, cache, need_dx=True):
        return dy[:, : self.split], dy[:, self.split :]

    def descriptor(self):
        return {"type": "concat", "size": self.size}


_LAYERS = {"dense": Dense, "conv": Conv2D, "relu": ReLU, "tanh": Tanh, "scale": Scale,
           "flatten": Flatten, "concat": Concat}


def layer_from_descriptor(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type")
    if kind not in _LAYERS:
        raise ValueError(f"unknown layer type {kind!r}")
    return _LAYERS[kind](**d)


class Network:
    """Sequential network over a flat parameter vector."""

    def __init__(self, layers: Sequence[dict | Layer], input_shape: Sequence[int], dtype=np.float32, seed: int = 0):
        self.layers = [l if isinstance(l, Layer) else layer_from_descriptor(l) for l in layers]
        self.input_shape = tuple(int(v) for v in input_shape)
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        sizes = []
        for layer in self.layers:
            shape = layer.build(shape)
            sizes.append(layer.n_params)
        self.output_shape = shape
        self.n_params = int(sum(sizes))
        self.theta = np.zeros(self.n_params, dtype=self.dtype)
        self.grad = np.zeros(self.n_params, dtype=self.dtype)
        off = 0
        for layer, n in zip(self.layers, sizes):
            layer.bind(self.theta[off : off + n], self.grad[off : off + n])
            off += n
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)
        self._caches = None

    # -- architecture --------------------------------------------------------

    def descriptor(self) -> dict:
        return {"input_shape": list(self.input_shape), "dtype": self.dtype.name,
                "layers": [l.descriptor() for l in self.layers]}

    def descriptor_json(self) -> str:
        return json.dumps(self.descriptor(), sort_keys=True)

    @classmethod
    def from_descriptor(cls, d: dict, dtype=None) -> "Network":
        return cls(d["layers"], d["input_shape"], dtype or d["dtype"])

    def clone(self) -> "Network":
        net = Network.from_descriptor(self.descriptor())
        net.theta[...] = self.theta
        return net

    def astype(self, dtype) -> "Network":
        net = Network.from_descriptor(self.descriptor(), dtype)
        net.theta[...] = self.theta
        return net

    def set_params(self, theta: np.ndarray) -> None:
        if theta.shape != self.theta.shape:
            raise ShapeError(f"parameter vector has shape {theta.shape}, expected {self.theta.shape}")
        self.theta[...] = theta

    # -- evaluation ----------------------------------------------------------

    def forward(self, x, extra=None, keep: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            if x.shape == self.input_shape:
                raise ShapeError(f"missing batch axis: got {x.shape}")
            raise ShapeError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, extra)
            caches.append(c)
        self._caches = caches if keep else None
        return x

    def __call__(self, x, extra=None) -> np.ndarray:
        return self.forward(x, extra)

    def backward(self, dy, input_grad: bool = False) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
        """Gradient of sum(dy * output) for the last ``forward(keep=True)``.

        Returns (parameter gradient, input gradient or None unless
        ``input_grad``, second-input gradient). The parameter gradient is a
        fresh copy.
        """
        if self._caches is None:
            raise RuntimeError("backward needs a preceding forward(..., keep=True)")
        self.grad[...] = 0
        d = np.asarray(dy, dtype=self.dtype)
        d_extra = None
        last = len(self.layers) - 1
        for i, (layer, c) in enumerate(zip(reversed(self.layers), reversed(self._caches))):
            d, e = layer.backward(d, c, input_grad or i < last)
            if e is not None:
                d_extra = e
        return self.grad.copy(), d, d_extra


class Adam:
    def __init__(self, n: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 dtype=np.float32):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        lr_t = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        theta -= (lr_t * self.m / (np.sqrt(self.v) + self.eps)).astype(theta.dtype)


def conv_q_layers(n_outputs: int, hidden: int = 256) -> list[dict]:
    """Default image tower: 16@8x8/4, 32@4x4/2, dense ``hidden``, linear head."""
    return [{"type": "conv", "channels": 16, "kernel": 8, "stride": 4}, {"type": "relu"},
            {"type": "conv", "channels": 32, "kernel": 4, "stride": 2}, {"type": "relu"},
            {"type": "flatten"}, {"type": "dense", "width": hidden}, {"type": "relu"},
            {"type": "dense", "width": n_outputs}]


def conv_actor_layers(action_high: Sequence[float], hidden: int = 256) -> list[dict]:
    return conv_q_layers(len(action_high), hidden)[:-1] + [
        {"type": "dense", "width": len(action_high), "init_scale": 3e-3}, {"type": "tanh"},
        {"type": "scale", "factor": [float(a) for a in action_high]}]


def conv_critic_layers(action_dim: int, hidden: int = 256) -> list[dict]:
    return conv_q_layers(1, hidden)[:5] + [
        {"type": "concat", "size": action_dim}, {"type": "dense", "width": hidden}, {"type": "relu"},
        {"type": "dense", "width": 1, "init_scale": 3e-3}]
