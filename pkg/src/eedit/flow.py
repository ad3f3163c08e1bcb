"""Synthetic MM-DiT layer stack and analytic rectified-flow velocity fields.

Time convention: ``s`` runs from 0 (clean data) to 1 (noise). Forward Euler
steps move toward noise (inversion), inverse steps move toward data
(denoising)::

    forward:  x + dt * v(x, s)
    inverse:  x - dt * v(x, s)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .grid import Purpose, TokenGrid, stream_rng, uniform_pm1
from .scoring import KINDS, ModuleKind

MAX_RATE = 8.0


@dataclass(frozen=True)
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass(frozen=True)
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _weight(rng, fan_in, shape, gain=1.0):
    return uniform_pm1(rng, shape) * np.float32(gain / math.sqrt(fan_in))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LayerStack:
    """L layers of (self-attention, cross-attention, MLP) with seeded weights.

    Every module maps the full hidden sequence ``h`` (image tokens then prompt
    tokens) to outputs for the query rows ``rows``; ``rows=None`` means all.
    """

    def __init__(self, layers: int, channels: int, n_image: int, seed: int = 0):
        if layers < 1 or channels < 1 or n_image < 1:
            raise InvalidArgument(f"bad stack dims L={layers} C={channels} N={n_image}")
        self.layers = layers
        self.channels = channels
        self.n_image = n_image
        self.seed = seed
        c = channels
        self.sa = []
        self.ca = []
        self.mlp = []
        for layer in range(layers):
            rng = stream_rng(seed, Purpose.PARAMS, ModuleKind.SA, layer)
            self.sa.append(AttentionParams(*(_weight(rng, c, (c, c)) for _ in range(3)),
                                           _weight(rng, c, (c, c), gain=0.5)))
            rng = stream_rng(seed, Purpose.PARAMS, ModuleKind.CA, layer)
            self.ca.append(AttentionParams(*(_weight(rng, c, (c, c)) for _ in range(3)),
                                           _weight(rng, c, (c, c), gain=0.5)))
            rng = stream_rng(seed, Purpose.PARAMS, ModuleKind.MLP, layer)
            self.mlp.append(MlpParams(_weight(rng, c, (c, 2 * c)),
                                      _weight(rng, c, (2 * c,), gain=0.1),
                                      _weight(rng, 2 * c, (2 * c, c), gain=0.5),
                                      _weight(rng, 2 * c, (c,), gain=0.1)))

    def _check(self, h):
        if h.ndim != 2 or h.shape[1] != self.channels or h.shape[0] < self.n_image:
            raise InvalidArgument(f"hidden state shape {h.shape} incompatible with stack "
                                  f"(N>={self.n_image}, C={self.channels})")

    def self_attention(self, layer: int, h: np.ndarray, rows=None) -> np.ndarray:
        self._check(h)
        p = self.sa[layer]
        x = h if rows is None else h[rows]
        q = x @ p.wq
        k = h @ p.wk
        v = h @ p.wv
        attn = _softmax_rows((q @ k.T) * np.float32(1.0 / math.sqrt(self.channels)))
        return (attn @ v) @ p.wo

    def cross_attention(self, layer: int, h: np.ndarray, rows=None) -> np.ndarray:
        """Queries attend to the prompt tokens only; zero output without a prompt."""
        self._check(h)
        p = self.ca[layer]
        x = h if rows is None else h[rows]
        prompt = h[self.n_image:]
        if prompt.shape[0] == 0:
            return np.zeros_like(x)
        q = x @ p.wq
        k = prompt @ p.wk
        v = prompt @ p.wv
        attn = _softmax_rows((q @ k.T) * np.float32(1.0 / math.sqrt(self.channels)))
        return (attn @ v) @ p.wo

    def mlp_block(self, layer: int, h: np.ndarray, rows=None) -> np.ndarray:
        self._check(h)
        p = self.mlp[layer]
        x = h if rows is None else h[rows]
        return np.tanh(x @ p.w1 + p.b1) @ p.w2 + p.b2

    def module(self, kind: ModuleKind):
        return {ModuleKind.SA: self.self_attention,
                ModuleKind.CA: self.cross_attention,
                ModuleKind.MLP: self.mlp_block}[ModuleKind(kind)]

    def forward(self, h: np.ndarray) -> np.ndarray:
        """Uncached pass over all layers; returns the final hidden state."""
        h = np.asarray(h, dtype=np.float32)
        for layer in range(self.layers):
            for kind in KINDS:
                h = h + self.module(kind)(layer, h)
        return h


class VelocityField:
    def __call__(self, x: np.ndarray, s: float) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(VelocityField):
    value: float = 0.0

    def __call__(self, x, s):
        return np.broadcast_to(np.float32(self.value), np.shape(x)).astype(np.float32)


@dataclass(frozen=True, eq=False)
class LinearContraction(VelocityField):
    """``v(x) = rates * (target - x)`` with per-channel rates in [0, MAX_RATE].

    Exact flow: ``x(s) = target + (x(s0) - target) * exp(-rates * (s - s0))``.
    """

    rates: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=np.float32).reshape(-1)
        if not ((rates >= 0) & (rates <= MAX_RATE)).all():
            raise InvalidArgument(f"contraction rates must lie in [0, {MAX_RATE}]")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float32))

    def __call__(self, x, s):
        return self.rates * (self.target - x)

    def closed_form(self, x0, s0: float, s1: float) -> np.ndarray:
        decay = np.exp(-self.rates.astype(np.float64) * (s1 - s0))
        t = self.target.astype(np.float64)
        return t + (np.asarray(x0, dtype=np.float64) - t) * decay


def noise_target(seed: int, n_image: int, channels: int) -> np.ndarray:
    return uniform_pm1(stream_rng(seed, Purpose.NOISE), (n_image, channels))


def interpolate(x1, x0, t: float):
    """Straight-line path between data ``x1`` (t=0) and noise ``x0`` (t=1)."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t must be in [0, 1], got {t}")
    a = x1.data if isinstance(x1, TokenGrid) else np.asarray(x1, dtype=np.float32)
    b = x0.data if isinstance(x0, TokenGrid) else np.asarray(x0, dtype=np.float32)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    out = np.float32(1.0 - t) * a + np.float32(t) * b
    return x1.with_data(out) if isinstance(x1, TokenGrid) else out


def _check_step(t, dt, direction):
    eps = 1e-9
    if dt < 0:
        raise InvalidArgument(f"dt must be >= 0, got {dt}")
    end = t + direction * dt
    if not (-eps <= t <= 1 + eps and -eps <= end <= 1 + eps):
        raise InvalidArgument(f"step from t={t} by {direction * dt} leaves [0, 1]")


def euler_step_forward(x, t: float, dt: float, field) -> np.ndarray:
    _check_step(t, dt, +1)
    x = np.asarray(x, dtype=np.float32)
    return x + np.float32(dt) * field(x, t)


def euler_step_inverse(x, t: float, dt: float, field) -> np.ndarray:
    _check_step(t, dt, -1)
    x = np.asarray(x, dtype=np.float32)
    return x - np.float32(dt) * field(x, t)
