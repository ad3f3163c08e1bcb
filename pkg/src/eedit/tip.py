"""Token index preprocessing.

:func:`plan` simulates the whole scoring/selection/frequency chain ahead of
time and stores every (kind, layer, step) directive in an :class:`IndexPlan`.
A run that consumes the plan never touches the scoring module. Because the
random component is counter-based and ties break by index, the offline
directives match the ones the live scorer would produce step for step;
:func:`verify_equivalence` runs both and compares them exactly.

Plan files are plain text: a ``key = json`` header, a ``---`` line, then one
line per entry in denoise order (steps descending, layers ascending, kinds
SA, CA, MLP)::

    SA 0 27 64 3 4 5 ...     # kind layer step count indices...
    CA 0 27 skip
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .bonus import build_bonus
from .cache import FULL, SKIP, Policy, RefreshSchedule, Skip, is_refresh_step
from .config import EditConfig, resolve_mask
from .errors import ConfigError, FormatError, InconsistentFile, Truncated, VersionMismatch
from .grid import EditMask
from .scoring import (KINDS, ModuleKind, OnlineScorer, ScoreState, Selection, compute_scores,
                      partial_count, random_component)

PLAN_VERSION = 1
_MAGIC_LINE = "# eedit index plan"


def mask_digest(mask: EditMask) -> str:
    return hashlib.sha256(np.packbits(mask.flat).tobytes()).hexdigest()


def plan_header(config: EditConfig, mask: EditMask) -> dict:
    """Everything the selections depend on; a consumer must match it exactly."""
    return {
        "format_version": PLAN_VERSION,
        "height": config.height,
        "width": config.width,
        "layers": config.layers,
        "steps": config.steps,
        "ratio": config.ratio,
        "gamma": config.gamma,
        "seed": config.seed,
        "bonus": config.bonus.model_dump(),
        "refresh_interval": config.refresh_interval,
        "force_final_refresh": config.force_final_refresh,
        "policies": config.policies.policy().as_dict(),
        "mask_sha256": mask_digest(mask),
    }


def stream_order(layers: int):
    return [(kind, layer) for layer in range(layers) for kind in KINDS]


@dataclass
class IndexPlan:
    header: dict
    entries: dict = field(default_factory=dict)  # (kind, layer, step) -> index array | SKIP

    def directive(self, kind: ModuleKind, layer: int, step: int):
        """FULL, SKIP or a Selection, as the cache engine expects."""
        try:
            entry = self.entries[(ModuleKind(kind), layer, step)]
        except KeyError:
            raise FormatError(f"plan has no entry for {ModuleKind(kind).name} layer {layer} step {step}") from None
        if entry is SKIP:
            return SKIP
        if entry.size == self.header["height"] * self.header["width"]:
            return FULL
        return Selection(entry, step, layer, ModuleKind(kind))

    def same_entries(self, other: "IndexPlan") -> bool:
        return first_difference(self, other) is None


def _entry_equal(a, b) -> bool:
    if a is SKIP or b is SKIP:
        return a is b
    return np.array_equal(a, b)


def first_difference(a: IndexPlan, b: IndexPlan):
    """First (kind, layer, step) whose entries differ or exist in only one plan."""
    for key in list(a.entries) + [k for k in b.entries if k not in a.entries]:
        if key not in a.entries or key not in b.entries or not _entry_equal(a.entries[key], b.entries[key]):
            return key
    return None


def _check_config(config: EditConfig):
    if config.steps < 1 or config.layers < 1:
        raise ConfigError("plan needs steps >= 1 and layers >= 1")


def plan(config: EditConfig, mask: EditMask | None = None) -> IndexPlan:
    """Offline simulation of every selection the denoise loop will make.

    All token-wise streams of one step are scored and ranked together as rows
    of a matrix; frequency state threads through the steps.
    """
    _check_config(config)
    mask = resolve_mask(config) if mask is None else mask
    n = config.n_image
    count = partial_count(n, config.ratio)
    bonus = build_bonus(mask, config.bonus.params()).values
    schedule = config.schedule()
    policy = config.policies.policy()
    streams = stream_order(config.layers)
    token_wise = [s for s in streams if policy.of(s[0]) is Policy.TOKEN_WISE]
    row_of = {s: i for i, s in enumerate(token_wise)}
    freq = np.zeros((len(token_wise), n), dtype=np.int64)
    everything = np.arange(n, dtype=np.int64)
    out = IndexPlan(plan_header(config, mask))

    for step in range(config.steps, 0, -1):
        if is_refresh_step(schedule, step):
            freq[:] = 0
            for kind, layer in streams:
                out.entries[(kind, layer, step)] = everything
            continue
        picked = None
        if token_wise:
            rand = np.stack([random_component(config.seed, k, l, step, n) for k, l in token_wise])
            scores = compute_scores(rand, np.broadcast_to(bonus, rand.shape), freq, config.gamma)
            ranked = np.argsort(-scores, axis=1, kind="stable")[:, :count]
            picked = np.sort(ranked, axis=1)
            freq += 1
            np.put_along_axis(freq, picked, 0, axis=1)
        for kind, layer in streams:
            if (kind, layer) in row_of:
                out.entries[(kind, layer, step)] = picked[row_of[(kind, layer)]].copy()
            else:
                out.entries[(kind, layer, step)] = SKIP
    return out


def online_directive(kind: ModuleKind, layer: int, step: int, schedule: RefreshSchedule,
                     policy, scorer: OnlineScorer):
    """What the live (non-TIP) denoise loop executes for one module."""
    token_wise = policy.of(kind) is Policy.TOKEN_WISE
    if is_refresh_step(schedule, step):
        if token_wise:
            scorer.refresh(kind, layer)
        return FULL
    if not token_wise:
        return SKIP
    return scorer.select(kind, layer, step)


def make_scorer(config: EditConfig, mask: EditMask) -> OnlineScorer:
    bonus = build_bonus(mask, config.bonus.params()).values
    return OnlineScorer(bonus, ScoreState(config.n_image, config.gamma, config.ratio, config.seed))


@dataclass
class EquivalenceReport:
    equal: bool
    first_divergence: tuple | None
    entries_checked: int

    def describe(self) -> str:
        if self.equal:
            return f"equivalent: {self.entries_checked} entries identical"
        kind, layer, step = self.first_divergence
        return f"DIVERGED at kind={ModuleKind(kind).name} layer={layer} step={step}"


def _as_entry(directive, n):
    if directive is FULL:
        return np.arange(n, dtype=np.int64)
    if isinstance(directive, Skip):
        return SKIP
    return directive.indices


def verify_equivalence(config: EditConfig, mask: EditMask | None = None,
                       offline: IndexPlan | None = None) -> EquivalenceReport:
    """Compare the offline plan against a live scorer stepped in denoise order."""
    mask = resolve_mask(config) if mask is None else mask
    offline = plan(config, mask) if offline is None else offline
    scorer = make_scorer(config, mask)
    schedule = config.schedule()
    policy = config.policies.policy()
    n = config.n_image
    checked = 0
    for step in range(config.steps, 0, -1):
        for layer in range(config.layers):
            for kind in KINDS:
                key = (kind, layer, step)
                live = _as_entry(online_directive(kind, layer, step, schedule, policy, scorer), n)
                if key not in offline.entries or not _entry_equal(live, offline.entries[key]):
                    return EquivalenceReport(False, key, checked)
                checked += 1
    if checked != len(offline.entries):
        visited = {(k, l, t) for t in range(config.steps, 0, -1) for l in range(config.layers) for k in KINDS}
        return EquivalenceReport(False, next(k for k in offline.entries if k not in visited), checked)
    return EquivalenceReport(True, None, checked)


def check_plan_matches(p: IndexPlan, config: EditConfig, mask: EditMask) -> None:
    expected = plan_header(config, mask)
    diff = sorted(k for k in expected.keys() | p.header.keys() if expected.get(k) != p.header.get(k))
    if diff:
        raise ConfigError(f"plan does not match this configuration (differs in: {', '.join(diff)})")


# ---------------------------------------------------------------- file format

def dumps_plan(p: IndexPlan) -> str:
    lines = [_MAGIC_LINE]
    header = dict(p.header)
    header["entries"] = len(p.entries)
    for key, value in header.items():
        lines.append(f"{key} = {json.dumps(value, sort_keys=True)}")
    lines.append("---")
    for (kind, layer, step), entry in p.entries.items():
        head = f"{ModuleKind(kind).name} {layer} {step}"
        if entry is SKIP:
            lines.append(f"{head} skip")
        else:
            lines.append(f"{head} {entry.size} " + " ".join(map(str, entry.tolist())))
    return "\n".join(lines) + "\n"


def loads_plan(text: str) -> IndexPlan:
    lines = text.splitlines()
    if not lines or lines[0] != _MAGIC_LINE:
        raise FormatError("not an eedit index plan (missing magic line)")
    try:
        sep = lines.index("---")
    except ValueError:
        raise Truncated("plan header is not terminated by '---'") from None
    header = {}
    for raw in lines[1:sep]:
        key, eq, value = raw.partition(" = ")
        if not eq:
            raise FormatError(f"bad header line {raw!r}")
        try:
            header[key] = json.loads(value)
        except json.JSONDecodeError:
            raise FormatError(f"bad header value for {key!r}") from None
    version = header.get("format_version")
    if version != PLAN_VERSION:
        raise VersionMismatch(f"plan format version {version}, expected {PLAN_VERSION}")
    for key in ("height", "width", "layers", "steps", "entries"):
        if not isinstance(header.get(key), int):
            raise FormatError(f"header field {key!r} missing or not an integer")
    n_entries = header.pop("entries")
    body = [ln for ln in lines[sep + 1:] if ln.strip()]
    if len(body) < n_entries:
        raise Truncated(f"plan header promises {n_entries} entries, file has {len(body)}")
    if len(body) > n_entries:
        raise InconsistentFile(f"plan header promises {n_entries} entries, file has {len(body)}")
    if n_entries != 3 * header["layers"] * header["steps"]:
        raise InconsistentFile(f"{n_entries} entries for {header['layers']} layers x {header['steps']} steps")
    n = header["height"] * header["width"]
    out = IndexPlan(header)
    for ln in body:
        parts = ln.split()
        if len(parts) < 4:
            raise FormatError(f"bad entry line {ln!r}")
        try:
            kind = ModuleKind[parts[0]]
            layer, step = int(parts[1]), int(parts[2])
        except (KeyError, ValueError):
            raise FormatError(f"bad entry coordinates in {ln!r}") from None
        key = (kind, layer, step)
        if key in out.entries:
            raise InconsistentFile(f"duplicate entry {parts[:3]}")
        if not (0 <= layer < header["layers"] and 1 <= step <= header["steps"]):
            raise InconsistentFile(f"entry {parts[:3]} outside the header's layers/steps")
        if parts[3] == "skip":
            if len(parts) != 4:
                raise InconsistentFile(f"skip entry with indices: {parts[:3]}")
            out.entries[key] = SKIP
            continue
        idx = np.array(parts[4:], dtype=np.int64)
        if int(parts[3]) != idx.size:
            raise InconsistentFile(f"entry {parts[:3]} declares {parts[3]} indices, has {idx.size}")
        if idx.size == 0 or idx[0] < 0 or idx[-1] >= n or (np.diff(idx) <= 0).any():
            raise InconsistentFile(f"entry {parts[:3]} indices not strictly increasing within [0, {n})")
        out.entries[key] = idx
    return out


def write_plan(p: IndexPlan, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_plan(p))


def read_plan(path) -> IndexPlan:
    with open(path) as fh:
        return loads_plan(fh.read())
