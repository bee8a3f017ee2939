"""Triplane-conditioned NeRF MLP: features -> (density, colour).

A shared SiLU trunk of ``n_layers`` linear layers feeds a 1-channel density
head (``sigma = exp(raw + density_bias)``) and a 3-channel colour head
(logistic). Forward and backward work on ``(N, F)`` batches; the returned
gradients are freshly allocated, see :mod:`tripo_lite.triplane` for the
accumulation contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .triplane import Triplane, sample_features

ACTIVATIONS = ("silu", "identity")


@dataclass
class FieldSample:
    sigma: np.ndarray
    rgb: np.ndarray


@dataclass
class FieldParams:
    weights: list  # trunk weights, each (fan_in, width)
    biases: list
    density_w: np.ndarray  # (width, 1)
    density_b: np.ndarray  # (1,)
    color_w: np.ndarray  # (width, 3)
    color_b: np.ndarray  # (3,)
    density_bias: float = -1.0
    activation: str = field(default="silu")

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("trunk needs matching, non-empty weight and bias lists")

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def width(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dtype(self):
        return self.density_w.dtype

    def arrays(self) -> list:
        """Trainable arrays in a fixed order (trunk W/b pairs, then heads)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.density_w, self.density_b, self.color_w, self.color_b]

    def named_arrays(self) -> list:
        names = []
        for i in range(self.n_layers):
            names += [f"field.trunk.{i}.weight", f"field.trunk.{i}.bias"]
        names += ["field.density.weight", "field.density.bias", "field.color.weight", "field.color.bias"]
        return list(zip(names, self.arrays()))

    def with_arrays(self, arrays) -> "FieldParams":
        arrays = list(arrays)
        n = self.n_layers
        return FieldParams(arrays[0:2 * n:2], arrays[1:2 * n:2], *arrays[2 * n:2 * n + 4],
                           density_bias=self.density_bias, activation=self.activation)

    def zeros_like(self) -> "FieldParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def astype(self, dtype) -> "FieldParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    @classmethod
    def init(cls, rng, in_features=120, width=64, n_layers=10, density_bias=-1.0,
             activation="silu", dtype=np.float32):
        ws, bs = [], []
        fan_in = in_features
        for _ in range(n_layers):
            ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width)).astype(dtype))
            bs.append(np.zeros(width, dtype=dtype))
            fan_in = width
        head_std = np.sqrt(1.0 / width)
        return cls(ws, bs,
                   rng.normal(0.0, head_std, size=(width, 1)).astype(dtype), np.zeros(1, dtype=dtype),
                   rng.normal(0.0, head_std, size=(width, 3)).astype(dtype), np.zeros(3, dtype=dtype),
                   density_bias=density_bias, activation=activation)

    @classmethod
    def zeros(cls, in_features=120, width=64, n_layers=10, density_bias=-1.0, activation="silu",
              dtype=np.float32):
        ws = [np.zeros((in_features if i == 0 else width, width), dtype=dtype) for i in range(n_layers)]
        bs = [np.zeros(width, dtype=dtype) for _ in range(n_layers)]
        return cls(ws, bs, np.zeros((width, 1), dtype=dtype), np.zeros(1, dtype=dtype),
                   np.zeros((width, 3), dtype=dtype), np.zeros(3, dtype=dtype), density_bias=density_bias,
                   activation=activation)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward(params: FieldParams, x: np.ndarray):
    hs, gates = [x], []
    h = x
    for w, b in zip(params.weights, params.biases):
        z = h @ w
        z += b
        if params.activation == "silu":
            s = _sigmoid(z)
            gates.append((z, s))
            h = z * s
        else:
            gates.append(None)
            h = z
        hs.append(h)
    raw_d = (h @ params.density_w)[:, 0] + params.density_b[0]
    raw_c = h @ params.color_w + params.color_b
    sigma = np.exp(raw_d + params.density_bias)
    rgb = _sigmoid(raw_c)
    return sigma, rgb, (hs, gates)


def _check_features(params: FieldParams, features):
    x = np.asarray(features, dtype=params.dtype)
    single = x.ndim == 1
    x = x.reshape(-1, x.shape[-1])
    if x.shape[1] != params.in_features:
        raise ValueError(f"feature width {x.shape[1]} != field input width {params.in_features}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite field input")
    return x, single


def field_forward(params: FieldParams, features: np.ndarray) -> FieldSample:
    """Density and colour for one feature vector or an (N, F) batch."""
    x, single = _check_features(params, features)
    sigma, rgb, _ = _forward(params, x)
    if single:
        return FieldSample(sigma[0], rgb[0])
    return FieldSample(sigma, rgb)


def _backward(params: FieldParams, sigma, rgb, cache, grad_sigma, grad_rgb):
    hs, gates = cache
    g_rd = (grad_sigma * sigma)[:, None]
    g_rc = grad_rgb * rgb * (1.0 - rgb)
    h = hs[-1]
    d_density_w = h.T @ g_rd
    d_density_b = g_rd.sum(axis=0)
    d_color_w = h.T @ g_rc
    d_color_b = g_rc.sum(axis=0)
    g_h = g_rd @ params.density_w.T + g_rc @ params.color_w.T

    d_ws, d_bs = [], []
    for i in range(params.n_layers - 1, -1, -1):
        if gates[i] is not None:
            z, s = gates[i]
            g_h *= s * (1.0 + z * (1.0 - s))
        d_ws.append(hs[i].T @ g_h)
        d_bs.append(g_h.sum(axis=0))
        g_h = g_h @ params.weights[i].T
    grads = FieldParams(d_ws[::-1], d_bs[::-1], d_density_w, d_density_b, d_color_w, d_color_b,
                        density_bias=params.density_bias, activation=params.activation)
    return g_h, grads


def field_backward(params: FieldParams, features, grad_sigma, grad_rgb):
    """Reverse-mode pass; returns ``(d_features, FieldParams of gradients)``."""
    x, single = _check_features(params, features)
    grad_sigma = np.asarray(grad_sigma, dtype=x.dtype).reshape(-1)
    grad_rgb = np.asarray(grad_rgb, dtype=x.dtype).reshape(-1, 3)
    sigma, rgb, cache = _forward(params, x)
    g_x, grads = _backward(params, sigma, rgb, cache, grad_sigma, grad_rgb)
    return (g_x[0] if single else g_x), grads


def field_at_point(params: FieldParams, tp: Triplane, points) -> FieldSample:
    return field_forward(params, sample_features(tp, points))
