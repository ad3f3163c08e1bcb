"""Token scores, top-R% selection and frequency control.

A token's score at one (kind, layer, step) is::

    score = rand * bonus + gamma * freq

where ``rand`` comes from a counter-based stream keyed by the coordinates and
``freq`` counts the partial steps since the token was last recomputed. Only
``freq`` is carried between steps.
"""

from __future__ import annotations

import collections
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .grid import Purpose, stream_rng

# Incremented by every scoring primitive; the TIP path must leave it untouched.
calls: collections.Counter = collections.Counter()


class ModuleKind(enum.IntEnum):
    SA = 0
    CA = 1
    MLP = 2

    @property
    def label(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "ModuleKind":
        try:
            return cls[text.upper()]
        except KeyError:
            raise InvalidArgument(f"unknown module kind {text!r}") from None


KINDS = (ModuleKind.SA, ModuleKind.CA, ModuleKind.MLP)


@dataclass(frozen=True, eq=False)
class Selection:
    """Ascending image-token indices recomputed at one (kind, layer, step)."""

    indices: np.ndarray
    step: int = -1
    layer: int = -1
    kind: ModuleKind | None = None

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).reshape(-1)
        if idx.size > 1 and not (np.diff(idx) > 0).all():
            raise InvalidArgument("selection indices must be strictly increasing")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return int(self.indices.size)

    def __eq__(self, other):
        if not isinstance(other, Selection):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    __hash__ = None


def partial_count(n_image_tokens: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise InvalidArgument(f"ratio must be in (0, 1], got {ratio}")
    return max(1, min(n_image_tokens, math.ceil(ratio * n_image_tokens)))


def random_component(seed: int, kind: ModuleKind, layer: int, step: int, n_tokens: int) -> np.ndarray:
    """float32 draws in [0, 1), a pure function of all arguments."""
    if n_tokens < 1:
        raise InvalidArgument(f"n_tokens must be >= 1, got {n_tokens}")
    calls["random_component"] += 1
    rng = stream_rng(seed, Purpose.SCORE, int(kind), layer, step)
    return rng.random(n_tokens, dtype=np.float32)


def compute_scores(rand: np.ndarray, bonus: np.ndarray, freq: np.ndarray, gamma: float) -> np.ndarray:
    rand = np.asarray(rand, dtype=np.float32)
    bonus = np.asarray(bonus, dtype=np.float32)
    freq = np.asarray(freq)
    if not rand.shape == bonus.shape == freq.shape:
        raise InvalidArgument(f"length mismatch: rand {rand.shape}, bonus {bonus.shape}, freq {freq.shape}")
    calls["compute_scores"] += 1
    return rand * bonus + np.float32(gamma) * freq.astype(np.float32)


def select_top(scores: np.ndarray, count: int, *, step: int = -1, layer: int = -1,
               kind: ModuleKind | None = None) -> Selection:
    """Indices of the ``count`` largest scores; ties go to the lower index."""
    scores = np.asarray(scores)
    if not 1 <= count <= scores.size:
        raise InvalidArgument(f"count {count} outside [1, {scores.size}]")
    calls["select_top"] += 1
    # stable sort on the negated scores keeps equal scores in index order
    order = np.argsort(-scores, kind="stable")
    return Selection(np.sort(order[:count]), step, layer, kind)


@dataclass
class ScoreState:
    n_tokens: int
    gamma: float = 1.0
    ratio: float = 0.25
    seed: int = 0
    freq: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidArgument(f"gamma must be >= 0, got {self.gamma}")
        partial_count(self.n_tokens, self.ratio)

    def freq_for(self, kind: ModuleKind, layer: int) -> np.ndarray:
        key = (ModuleKind(kind), layer)
        if key not in self.freq:
            self.freq[key] = np.zeros(self.n_tokens, dtype=np.int64)
        return self.freq[key]

    @property
    def count(self) -> int:
        return partial_count(self.n_tokens, self.ratio)


def update_frequency(state: ScoreState, kind: ModuleKind, layer: int, selected: Selection) -> None:
    """Selected tokens reset to 0, everything else ages by one step."""
    freq = state.freq_for(kind, layer)
    if len(selected) and (selected.indices[0] < 0 or selected.indices[-1] >= freq.size):
        raise InvalidArgument("selection index out of range")
    freq += 1
    freq[selected.indices] = 0


def refresh_frequency(state: ScoreState, kind: ModuleKind, layer: int) -> None:
    state.freq_for(kind, layer)[:] = 0


class OnlineScorer:
    """Live scoring, called by the denoise loop at the moment a module runs."""

    def __init__(self, bonus: np.ndarray, state: ScoreState):
        self.bonus = np.asarray(bonus, dtype=np.float32)
        if self.bonus.size != state.n_tokens:
            raise InvalidArgument("bonus map and score state disagree on token count")
        self.state = state

    def select(self, kind: ModuleKind, layer: int, step: int) -> Selection:
        st = self.state
        rand = random_component(st.seed, kind, layer, step, st.n_tokens)
        scores = compute_scores(rand, self.bonus, st.freq_for(kind, layer), st.gamma)
        sel = select_top(scores, st.count, step=step, layer=layer, kind=kind)
        update_frequency(st, kind, layer, sel)
        return sel

    def refresh(self, kind: ModuleKind, layer: int) -> None:
        refresh_frequency(self.state, kind, layer)
