"""Neural layers assembled from the autodiff primitives.

Weight initialization is uniform on (-1/sqrt(fan_in), +1/sqrt(fan_in)),
drawn from the package's counter-based generator keyed by
``(seed, "init", parameter_name)``.  Keying on the parameter name makes the
draw independent of construction order, so rebuilding a subset of layers
(input-layer surgery) reproduces exactly the weights a fresh build would
have produced for those names.
"""

from __future__ import annotations

import math

import numpy as np

from .. import rng
from . import tensor as T
from .tensor import Parameter, ShapeError, StateError, Tensor


def uniform_init(name: str, shape, fan_in: int, seed: int, dtype) -> np.ndarray:
    stream = rng.Stream(seed, "init", name)
    bound = 1.0 / math.sqrt(fan_in)
    size = int(np.prod(shape)) if shape else 1
    u = stream.uniform(size)
    return ((2.0 * u - 1.0) * bound).reshape(shape).astype(dtype)


class Conv2d:
    """2-D cross-correlation layer with bias, NCHW layout."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=(1, 1),
        padding=((0, 0), (0, 0)),
        *,
        seed: int,
        dtype=np.float64,
    ):
        kh, kw = kernel
        fan_in = in_channels * kh * kw
        self.name = name
        self.stride = tuple(stride)
        self.padding = tuple(tuple(p) for p in padding)
        self.weight = Parameter(
            f"{name}.weight",
            uniform_init(f"{name}.weight", (out_channels, in_channels, kh, kw), fan_in, seed, dtype),
        )
        self.bias = Parameter(
            f"{name}.bias",
            uniform_init(f"{name}.bias", (out_channels,), fan_in, seed, dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight.tensor, self.bias.tensor, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm2d:
    """Per-feature-map normalization over the (N, H, W) axes.

    Train mode normalizes by batch statistics (population variance) and
    updates exponential running stats with the configured momentum; eval
    mode normalizes by the stored running stats.  ``initialized`` flips on
    the first train-mode pass or when stats are restored from a checkpoint.
    """

    def __init__(self, name, num_features, momentum=0.1, eps=1e-5, *, dtype=np.float64):
        self.name = name
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(num_features, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.initialized = False

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        n, f, h, w = x.data.shape
        if f != self.num_features:
            raise ShapeError(
                f"{self.name}: expected {self.num_features} feature maps, got {f}"
            )
        gamma = T.reshape(self.gamma.tensor, (1, f, 1, 1))
        beta = T.reshape(self.beta.tensor, (1, f, 1, 1))
        if training:
            if n * h * w < 2:
                raise ShapeError(
                    f"{self.name}: batch norm needs >= 2 values per feature map"
                )
            mu = T.mean_(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = T.mean_(centered * centered, axis=(0, 2, 3), keepdims=True)
            inv = T.pow_const(var + self.eps, -0.5)
            xhat = centered * inv
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data.reshape(f)
            self.running_var = (1.0 - m) * self.running_var + m * var.data.reshape(f)
            self.initialized = True
        else:
            if not self.initialized:
                raise StateError(
                    f"{self.name}: eval mode before any training step or restored stats"
                )
            rm = self.running_mean.reshape(1, f, 1, 1).astype(x.data.dtype, copy=False)
            rv = self.running_var.reshape(1, f, 1, 1).astype(x.data.dtype, copy=False)
            xhat = (x - Tensor(rm)) * Tensor(1.0 / np.sqrt(rv + self.eps))
        return xhat * gamma + beta

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        if name.endswith(".running_mean"):
            self.running_mean = value.astype(self.running_mean.dtype)
        elif name.endswith(".running_var"):
            self.running_var = value.astype(self.running_var.dtype)
        else:
            raise KeyError(name)
        self.initialized = True


class BiGRU:
    """Bidirectional gated recurrent unit over the last (time) axis.

    Gate order within the packed projections is (update z, reset r,
    candidate n).  The reset gate multiplies the hidden state *before* the
    candidate's recurrent product:

        z_t = sigmoid(x W_z + h U_z + b_z)
        r_t = sigmoid(x W_r + h U_r + b_r)
        n_t = tanh(x W_n + (r_t * h) U_n + b_n)
        h_t = z_t * h + (1 - z_t) * n_t

    Input is (N, F, T); output stacks the two directions on a new axis:
    (N, hidden, 2, T), with the backward stream re-aligned to input time.
    """

    DIRECTIONS = ("fwd", "bwd")

    def __init__(self, name, input_size, hidden_size, *, seed, dtype=np.float64):
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        self._weights = {}
        h = hidden_size
        for tag in self.DIRECTIONS:
            prefix = f"{name}.{tag}"
            self._weights[tag] = {
                "w_ih": Parameter(
                    f"{prefix}.w_ih",
                    uniform_init(f"{prefix}.w_ih", (input_size, 3 * h), input_size, seed, dtype),
                ),
                "u_zr": Parameter(
                    f"{prefix}.u_zr",
                    uniform_init(f"{prefix}.u_zr", (h, 2 * h), h, seed, dtype),
                ),
                "u_n": Parameter(
                    f"{prefix}.u_n",
                    uniform_init(f"{prefix}.u_n", (h, h), h, seed, dtype),
                ),
                "bias": Parameter(
                    f"{prefix}.bias",
                    uniform_init(f"{prefix}.bias", (3 * h,), h, seed, dtype),
                ),
            }

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3:
            raise ShapeError(f"{self.name}: expected (N, F, T), got {x.data.shape}")
        n, f, steps = x.data.shape
        if f != self.input_size:
            raise ShapeError(
                f"{self.name}: expected {self.input_size} input features, got {f}"
            )
        h = self.hidden_size
        xt = T.transpose(x, (0, 2, 1))  # (N, T, F)
        directions = []
        for tag in self.DIRECTIONS:
            w = self._weights[tag]
            xproj = T.matmul(xt, w["w_ih"].tensor) + w["bias"].tensor  # (N, T, 3h)
            hidden = Tensor(np.zeros((n, h), dtype=x.data.dtype))
            order = range(steps) if tag == "fwd" else range(steps - 1, -1, -1)
            outputs = [None] * steps
            for t in order:
                xg = xproj[:, t]
                rec = T.matmul(hidden, w["u_zr"].tensor)  # (N, 2h)
                z = T.sigmoid(xg[:, :h] + rec[:, :h])
                r = T.sigmoid(xg[:, h : 2 * h] + rec[:, h:])
                cand = T.tanh(xg[:, 2 * h :] + T.matmul(r * hidden, w["u_n"].tensor))
                hidden = z * hidden + (T.neg(z) + 1.0) * cand
                outputs[t] = hidden
            directions.append(T.stack(outputs, axis=2))  # (N, h, T)
        return T.stack(directions, axis=2)  # (N, h, 2, T)

    def parameters(self):
        return [p for tag in self.DIRECTIONS for p in self._weights[tag].values()]
