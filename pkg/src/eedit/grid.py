"""Token grids, edit masks and the counter-based random streams behind them.

Every random draw in the package goes through :func:`stream_rng`, which keys a
Philox generator with ``(seed, stream id)``. A stream is addressed by its
coordinates rather than by how many draws happened before it, so the offline
index planner and the online scorer see identical numbers regardless of the
order in which they ask for them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

U64_MAX = (1 << 64) - 1


class Purpose(enum.IntEnum):
    IMAGE = 1
    PROMPT = 2
    NOISE = 3
    SCORE = 4
    PARAMS = 5
    MASK = 6


def stream_id(purpose: int, kind: int = 0, layer: int = 0, step: int = 0) -> int:
    """Pack stream coordinates into one 64-bit word: purpose|kind|layer|step."""
    if not (0 <= purpose < 256 and 0 <= kind < 256):
        raise InvalidArgument(f"purpose/kind out of range: {purpose}, {kind}")
    if not (0 <= layer < (1 << 16) and 0 <= step < (1 << 32)):
        raise InvalidArgument(f"layer/step out of range: {layer}, {step}")
    return (purpose << 56) | (kind << 48) | (layer << 32) | step


def stream_rng(seed: int, purpose: int, kind: int = 0, layer: int = 0, step: int = 0) -> np.random.Generator:
    if not 0 <= seed <= U64_MAX:
        raise InvalidArgument(f"seed must fit in u64, got {seed}")
    key = np.array([seed, stream_id(purpose, kind, layer, step)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """H*W image tokens followed by P prompt tokens, each a C-vector of float32."""

    height: int
    width: int
    channels: int
    prompt_len: int
    data: np.ndarray

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1 or self.prompt_len < 0:
            raise InvalidArgument(
                f"bad grid dims h={self.height} w={self.width} c={self.channels} p={self.prompt_len}"
            )
        data = np.array(self.data, dtype=np.float32, order="C")
        expected = (self.n_image + self.prompt_len, self.channels)
        if data.shape != expected:
            if data.size != expected[0] * expected[1]:
                raise InvalidArgument(f"grid data has {data.size} values, expected {expected[0] * expected[1]}")
            data = data.reshape(expected)
        object.__setattr__(self, "data", _frozen(data))

    @property
    def n_image(self) -> int:
        return self.height * self.width

    @property
    def n_tokens(self) -> int:
        return self.n_image + self.prompt_len

    @property
    def image(self) -> np.ndarray:
        return self.data[: self.n_image]

    @property
    def prompt(self) -> np.ndarray:
        return self.data[self.n_image:]

    def with_data(self, data: np.ndarray) -> "TokenGrid":
        return TokenGrid(self.height, self.width, self.channels, self.prompt_len, data)

    def with_prompt(self, prompt: np.ndarray) -> "TokenGrid":
        prompt = np.asarray(prompt, dtype=np.float32).reshape(-1, self.channels)
        return TokenGrid(self.height, self.width, self.channels, prompt.shape[0],
                         np.concatenate([self.image, prompt]))

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (
            (self.height, self.width, self.channels, self.prompt_len)
            == (other.height, other.width, other.channels, other.prompt_len)
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class EditMask:
    height: int
    width: int
    bits: np.ndarray

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidArgument(f"bad mask dims {self.height}x{self.width}")
        bits = np.asarray(self.bits)
        if bits.size != self.height * self.width:
            raise InvalidArgument(f"mask has {bits.size} bits, expected {self.height * self.width}")
        bits = bits.reshape(self.height, self.width).astype(bool, copy=True)
        object.__setattr__(self, "bits", _frozen(bits))

    @property
    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, EditMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


def uniform_pm1(rng: np.random.Generator, shape) -> np.ndarray:
    """float32 samples in [-1, 1)."""
    return np.float32(2.0) * rng.random(shape, dtype=np.float32) - np.float32(1.0)


def make_grid(h: int, w: int, c: int, p: int, seed: int) -> TokenGrid:
    """Seeded synthetic latent: image tokens and prompt tokens drawn from separate streams."""
    if min(h, w, c) < 1 or p < 0:
        raise InvalidArgument(f"make_grid needs h,w,c >= 1 and p >= 0, got {(h, w, c, p)}")
    image = uniform_pm1(stream_rng(seed, Purpose.IMAGE), (h * w, c))
    prompt = uniform_pm1(stream_rng(seed, Purpose.PROMPT), (p, c))
    return TokenGrid(h, w, c, p, np.concatenate([image, prompt]))


def rect_mask(h: int, w: int, top: int, left: int, bottom: int, right: int) -> EditMask:
    """Mask with the half-open rectangle [top, bottom) x [left, right) set."""
    if not (0 <= top <= bottom <= h and 0 <= left <= right <= w):
        raise InvalidArgument(f"rectangle {(top, left, bottom, right)} outside {h}x{w}")
    bits = np.zeros((h, w), dtype=bool)
    bits[top:bottom, left:right] = True
    return EditMask(h, w, bits)


def rasterize_mask(pixel_mask: np.ndarray, patch: int) -> EditMask:
    """Token-level mask: a token is on iff any pixel of its patch is on."""
    pm = np.asarray(pixel_mask).astype(bool)
    if pm.ndim != 2 or patch < 1:
        raise InvalidArgument("pixel mask must be 2-D and patch >= 1")
    hp, wp = pm.shape
    if hp % patch or wp % patch:
        raise InvalidArgument(f"pixel mask {hp}x{wp} not divisible by patch {patch}")
    h, w = hp // patch, wp // patch
    bits = pm.reshape(h, patch, w, patch).any(axis=(1, 3))
    return EditMask(h, w, bits)
