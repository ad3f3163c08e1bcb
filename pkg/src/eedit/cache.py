"""Per-(layer, module) output cache and the partial-computation executor."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidArgument, StateError
from .scoring import ModuleKind, Selection


class Policy(str, enum.Enum):
    TOKEN_WISE = "token_wise"
    FULL_OR_SKIP = "full_or_skip"


@dataclass(frozen=True)
class KindPolicy:
    sa: Policy = Policy.TOKEN_WISE
    ca: Policy = Policy.FULL_OR_SKIP
    mlp: Policy = Policy.TOKEN_WISE

    def of(self, kind: ModuleKind) -> Policy:
        return Policy((self.sa, self.ca, self.mlp)[ModuleKind(kind)])

    def as_dict(self) -> dict:
        return {k.name.lower(): self.of(k).value for k in ModuleKind}


@dataclass(frozen=True)
class RefreshSchedule:
    """Refresh steps of a denoise loop that runs ``first_step, first_step-1, ..., 1``.

    A step refreshes if it is forced or ``interval`` steps have passed since the
    previous refresh. ``first_step`` is always forced.
    """

    interval: int
    first_step: int
    forced_full_steps: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.interval < 1:
            raise InvalidArgument(f"refresh interval must be >= 1, got {self.interval}")
        if self.first_step < 1:
            raise InvalidArgument(f"first step must be >= 1, got {self.first_step}")
        object.__setattr__(self, "forced_full_steps",
                           frozenset(self.forced_full_steps) | {self.first_step})

    @classmethod
    def for_denoise(cls, steps: int, interval: int, force_final: bool = True) -> "RefreshSchedule":
        forced = {steps, 1} if force_final else {steps}
        return cls(interval, steps, frozenset(forced))

    @cached_property
    def refresh_steps(self) -> frozenset:
        out = set()
        last = None
        for step in range(self.first_step, 0, -1):
            if step in self.forced_full_steps or last - step == self.interval:
                out.add(step)
                last = step
        return frozenset(out)


def is_refresh_step(schedule: RefreshSchedule, step: int) -> bool:
    return step in schedule.refresh_steps


class Full:
    def __repr__(self):
        return "FULL"


class Skip:
    def __repr__(self):
        return "SKIP"


FULL = Full()
SKIP = Skip()


@dataclass
class ExecRecord:
    step: int
    layer: int
    kind: ModuleKind
    n_computed: int


class CacheStore:
    """Last written output of every (layer, kind) module plus per-token write steps."""

    def __init__(self, n_tokens: int, channels: int):
        self.n_tokens = n_tokens
        self.channels = channels
        self.buffers: dict = {}
        self.written_at: dict = {}
        self.last_refresh_step: dict = {}
        self.log: list[ExecRecord] = []

    def read(self, layer: int, kind: ModuleKind) -> np.ndarray:
        key = (layer, ModuleKind(kind))
        if key not in self.buffers:
            raise StateError(f"cache for layer {layer} {ModuleKind(kind).name} read before any full write")
        return self.buffers[key]

    def write_full(self, layer, kind, out: np.ndarray, step: int) -> None:
        key = (layer, ModuleKind(kind))
        out.setflags(write=False)
        self.buffers[key] = out
        self.written_at[key] = np.full(self.n_tokens, step, dtype=np.int64)
        self.last_refresh_step[key] = step

    def scatter(self, layer, kind, rows: np.ndarray, out_rows: np.ndarray, step: int) -> np.ndarray:
        key = (layer, ModuleKind(kind))
        buf = self.read(layer, kind).copy()
        buf[rows] = out_rows
        buf.setflags(write=False)
        self.buffers[key] = buf
        written = self.written_at[key].copy()
        written[rows] = step
        self.written_at[key] = written
        return buf

    def staleness(self, step: int) -> int:
        """Largest number of steps any cached token has gone without recomputation."""
        if not self.written_at:
            return 0
        return max(int((w - step).max()) for w in self.written_at.values())


def execute_module(kind: ModuleKind, layer: int, step: int, h: np.ndarray, directive,
                   cache: CacheStore, stack, n_image: int) -> np.ndarray:
    """Run one module under a FULL / SKIP / partial-Selection directive.

    Partial computation evaluates the module for the selected image tokens and
    all prompt tokens (reading the live input for every token) and scatters the
    result over the cached output.
    """
    kind = ModuleKind(kind)
    fn = stack.module(kind)
    n_total = h.shape[0]
    if isinstance(directive, Selection) and len(directive) == n_image:
        if not np.array_equal(directive.indices, np.arange(n_image)):
            raise InvalidArgument("selection index out of range")
        directive = FULL
    if directive is FULL:
        out = fn(layer, h)
        cache.write_full(layer, kind, out, step)
        cache.log.append(ExecRecord(step, layer, kind, n_total))
        return out
    if directive is SKIP:
        out = cache.read(layer, kind)
        cache.log.append(ExecRecord(step, layer, kind, 0))
        return out
    if not isinstance(directive, Selection):
        raise InvalidArgument(f"unknown directive {directive!r}")
    idx = directive.indices
    if len(idx) and (idx[0] < 0 or idx[-1] >= n_image):
        raise InvalidArgument("selection index out of range")
    cache.read(layer, kind)
    rows = np.concatenate([idx, np.arange(n_image, n_total, dtype=np.int64)])
    out = cache.scatter(layer, kind, rows, fn(layer, h, rows), step)
    cache.log.append(ExecRecord(step, layer, kind, int(rows.size)))
    return out


def flops_of(kind: ModuleKind, n_computed: int, n_total: int, c: int, prompt_len: int = 0) -> int:
    """Analytic FLOPs for one module evaluation over ``n_computed`` query tokens."""
    if not 0 <= n_computed <= n_total:
        raise InvalidArgument(f"n_computed {n_computed} outside [0, {n_total}]")
    kind = ModuleKind(kind)
    if kind is ModuleKind.SA:
        return 2 * n_computed * n_total * c + 4 * n_computed * c * c
    if kind is ModuleKind.CA:
        return 2 * n_computed * prompt_len * c + 4 * n_computed * c * c
    return 8 * n_computed * c * c
