"""End-to-end editing run: skipped inversion, cached denoising, mask blending.

Inversion integrates the image latent toward noise with the unconditional
velocity (analytic field plus the layer stack run on a null prompt). Denoising
walks back with the prompt-conditioned velocity, where the layer stack runs
through the cache engine under live scoring or a precomputed index plan.
After every denoise step the tokens outside the edit mask are overwritten by
the inversion latent of that step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scoring
from .cache import CacheStore, execute_module, flops_of
from .config import CliConfig, EditConfig, resolve_mask
from .errors import ConfigError, InvalidArgument, StateError
from .flow import (Constant, LayerStack, LinearContraction, euler_step_forward, euler_step_inverse,
                   noise_target)
from .grid import EditMask, TokenGrid, make_grid
from .scoring import KINDS, ModuleKind
from .tip import IndexPlan, check_plan_matches, make_scorer, online_directive, plan as make_plan


def inversion_step_computed(t: int, m: int, steps: int) -> bool:
    """Whether inversion step ``t`` (1-based) runs the model or reuses Z_{t-1}.

    Computed when t = 1 (mod m), on the final step, and always when m >= steps.
    """
    if m < 1:
        raise InvalidArgument(f"skip interval must be >= 1, got {m}")
    return (t - 1) % m == 0 or t == steps or m >= steps


def build_field(config: EditConfig):
    v = config.velocity
    if v.kind == "constant":
        return Constant(v.value)
    rates = np.full(config.channels, v.rate, dtype=np.float32)
    return LinearContraction(rates, noise_target(config.seed, config.n_image, config.channels))


def full_step_flops(config: EditConfig) -> int:
    n = config.n_image + config.prompt_len
    return config.layers * sum(flops_of(k, n, n, config.channels, config.prompt_len) for k in KINDS)


@dataclass
class InversionTrajectory:
    latents: list  # Z_0 .. Z_T, each (H*W + P, C)
    computed_steps: list
    velocity_evals: int


@dataclass
class Trajectory:
    inversion: InversionTrajectory
    denoise: dict  # t -> Z*_t for t = T .. 0
    step_flops: dict  # t -> denoise FLOPs spent at step t
    refresh_steps: list
    directives: dict = field(default_factory=dict)  # (kind, layer, t) -> "full" | "skip" | index array
    module_outputs: dict | None = None  # t -> {(layer, kind): output}, diagnostic mode only
    scoring_calls: int = 0
    max_staleness: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.denoise[0]


def _freeze(a):
    a.setflags(write=False)
    return a


def invert(z0: TokenGrid, config: EditConfig, field_fn, stack: LayerStack) -> InversionTrajectory:
    n_img, steps, dt = z0.n_image, config.steps, 1.0 / config.steps
    null_prompt = np.zeros_like(z0.prompt)
    evals = 0

    def velocity(x_img, s):
        nonlocal evals
        evals += 1
        h = np.concatenate([x_img, null_prompt])
        return field_fn(x_img, s) + (stack.forward(h) - h)[:n_img]

    latents = [_freeze(z0.data.copy())]
    computed = []
    for t in range(1, steps + 1):
        prev = latents[-1]
        if inversion_step_computed(t, config.skip_interval, steps):
            img = euler_step_forward(prev[:n_img], (t - 1) * dt, dt, velocity)
            latents.append(_freeze(np.concatenate([img, prev[n_img:]])))
            computed.append(t)
        else:
            latents.append(prev)
    return InversionTrajectory(latents, computed, evals)


def denoise(inv: InversionTrajectory, config: EditConfig, mask: EditMask, field_fn, stack: LayerStack,
            plan: IndexPlan | None = None, cached: bool = True, diagnostic: bool = False) -> Trajectory:
    """Run t = T..1 and blend the background back in after each step.

    ``plan`` switches to precomputed directives; ``cached=False`` bypasses the
    cache engine and scoring entirely.
    """
    steps = config.steps
    if len(inv.latents) != steps + 1:
        raise StateError(f"inversion trajectory has {len(inv.latents)} latents, need {steps + 1}")
    n_img, dt = config.n_image, 1.0 / steps
    n_total = inv.latents[0].shape[0]
    c, p = config.channels, n_total - n_img
    outside = ~mask.flat
    schedule = config.schedule()
    policy = config.policies.policy()
    cache = CacheStore(n_total, c)
    scorer = make_scorer(config, mask) if cached and plan is None else None
    calls_before = sum(scoring.calls.values())
    traj = Trajectory(inv, {steps: inv.latents[steps]}, {}, sorted(schedule.refresh_steps, reverse=True),
                      module_outputs={} if diagnostic else None)
    full_flops = full_step_flops(config)

    z = inv.latents[steps]
    for t in range(steps, 0, -1):
        prompt = z[n_img:]
        outputs = {} if diagnostic else None
        log_start = len(cache.log)

        def velocity(x_img, s):
            h0 = np.concatenate([x_img, prompt])
            h = h0
            for layer in range(config.layers):
                for kind in KINDS:
                    if not cached:
                        out = stack.module(kind)(layer, h)
                    else:
                        if plan is not None:
                            d = plan.directive(kind, layer, t)
                        else:
                            d = online_directive(kind, layer, t, schedule, policy, scorer)
                        traj.directives[(kind, layer, t)] = d
                        out = execute_module(kind, layer, t, h, d, cache, stack, n_img)
                    if outputs is not None:
                        outputs[(layer, kind)] = out
                    h = h + out
            return field_fn(x_img, s) + (h - h0)[:n_img]

        img = euler_step_inverse(z[:n_img], t * dt, dt, velocity)
        img[outside] = inv.latents[t][:n_img][outside]
        z = _freeze(np.concatenate([img, prompt]))
        traj.denoise[t - 1] = z
        if cached:
            traj.step_flops[t] = sum(flops_of(r.kind, r.n_computed, n_total, c, p) for r in cache.log[log_start:])
            traj.max_staleness = max(traj.max_staleness, cache.staleness(t))
        else:
            traj.step_flops[t] = full_flops
        if outputs is not None:
            traj.module_outputs[t] = outputs
    traj.scoring_calls = sum(scoring.calls.values()) - calls_before
    return traj


def background_exact(traj: Trajectory, mask: EditMask) -> bool:
    """Every outside-mask token of Z*_{t-1} equals the inversion latent Z_t."""
    outside = ~mask.flat
    n_img = mask.flat.size
    for t in range(len(traj.inversion.latents) - 1, 0, -1):
        got = traj.denoise[t - 1][:n_img][outside]
        want = traj.inversion.latents[t][:n_img][outside]
        if got.tobytes() != want.tobytes():
            return False
    return True


def relative_error(a: np.ndarray, ref: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    denom = np.linalg.norm(ref)
    diff = np.linalg.norm(a - ref)
    return float(diff / denom) if denom > 0 else float(diff)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dot = (a * b).sum(axis=1)
    out = np.where((na > 0) & (nb > 0), dot / np.maximum(na * nb, 1e-300), 0.0)
    # two zero vectors count as identical
    return np.where((na == 0) & (nb == 0), 1.0, np.clip(out, -1.0, 1.0))


def similarity_report(traj: Trajectory) -> list[dict]:
    """Cosine similarity of each module kind's output between consecutive steps.

    Averaged over tokens and layers; one row per (step, kind) where ``step`` is
    the later of the two denoise steps compared.
    """
    if traj.module_outputs is None:
        raise StateError("similarity report needs a trajectory recorded in diagnostic mode")
    rows = []
    steps = sorted(traj.module_outputs, reverse=True)
    for prev, cur in zip(steps, steps[1:]):
        a, b = traj.module_outputs[prev], traj.module_outputs[cur]
        for kind in KINDS:
            sims = [_cosine_rows(a[key], b[key]).mean() for key in a if key[1] == kind]
            rows.append({"step": cur, "kind": kind.name, "cosine_similarity": float(np.mean(sims))})
    return rows


def similarity_csv(rows: list[dict]) -> str:
    lines = ["step,kind,cosine_similarity"]
    lines += [f"{r['step']},{r['kind']},{r['cosine_similarity']:.9g}" for r in rows]
    return "\n".join(lines) + "\n"


def load_input(config: EditConfig, input_path=None) -> TokenGrid:
    from .tensorfile import read_grid

    if input_path is None:
        return make_grid(config.height, config.width, config.channels, config.prompt_len, config.seed)
    try:
        grid = read_grid(input_path, config.height, config.width)
    except FileNotFoundError:
        raise ConfigError(f"input file not found: {input_path}") from None
    if (grid.height, grid.width, grid.channels) != (config.height, config.width, config.channels):
        raise ConfigError(f"input {input_path} is {grid.height}x{grid.width}x{grid.channels}, config expects "
                          f"{config.height}x{config.width}x{config.channels}")
    if grid.prompt_len == config.prompt_len:
        return grid
    if grid.prompt_len == 0:
        prompt = make_grid(1, 1, config.channels, config.prompt_len, config.seed).prompt
        return grid.with_prompt(prompt)
    raise ConfigError(f"input {input_path} has {grid.prompt_len} prompt tokens, config expects {config.prompt_len}")


@dataclass
class RunResult:
    final: TokenGrid
    report: dict
    trajectory: Trajectory
    reference: Trajectory | None = None


def reference_config(config: EditConfig) -> EditConfig:
    return config.replace(ratio=1.0, refresh_interval=1, skip_interval=1, use_tip=False)


def _execute(config, z0, mask, plan, cached, diagnostic):
    field_fn = build_field(config)
    stack = LayerStack(config.layers, config.channels, config.n_image, config.seed)
    inv = invert(z0, config, field_fn, stack)
    return denoise(inv, config, mask, field_fn, stack, plan=plan, cached=cached, diagnostic=diagnostic)


def run_edit(config: EditConfig, z0: TokenGrid | None = None, mask: EditMask | None = None,
             plan: IndexPlan | None = None, reference: bool = True, diagnostic: bool = False,
             base_dir: Path | None = None) -> RunResult:
    started = time.perf_counter()
    if z0 is None:
        z0 = load_input(config, getattr(config, "input_path", None))
    if (z0.height, z0.width, z0.channels, z0.prompt_len) != (
            config.height, config.width, config.channels, config.prompt_len):
        raise ConfigError("input grid dimensions do not match the configuration")
    mask = resolve_mask(config, base_dir) if mask is None else mask
    if mask.count == 0:
        raise ConfigError("edit mask is empty")
    if plan is None and config.use_tip:
        plan = make_plan(config, mask)
    if plan is not None:
        check_plan_matches(plan, config, mask)
    preprocess_seconds = time.perf_counter() - started

    traj = _execute(config, z0, mask, plan, True, diagnostic)
    final = z0.with_data(traj.final)
    ref = None
    if reference:
        ref = _execute(reference_config(config), z0, mask, None, False, diagnostic)

    full = full_step_flops(config)
    flops_actual = len(traj.inversion.computed_steps) * full + sum(traj.step_flops.values())
    flops_full_equivalent = 2 * config.steps * full
    n_img = config.n_image
    inside = mask.flat
    report = {
        "config": _echo(config),
        "flops_full_equivalent": flops_full_equivalent,
        "flops_actual": flops_actual,
        "speedup_flops": flops_full_equivalent / flops_actual,
        "velocity_evals_inversion": traj.inversion.velocity_evals,
        "inversion_computed_steps": traj.inversion.computed_steps,
        "refresh_steps": traj.refresh_steps,
        "per_step_bg_exact": background_exact(traj, mask),
        "fg_error_vs_reference": None,
        "final_error_vs_reference": None,
        "max_cache_staleness": traj.max_staleness,
        "mask_tokens": mask.count,
        "finite": bool(np.isfinite(traj.final).all()),
    }
    if ref is not None:
        report["fg_error_vs_reference"] = relative_error(traj.final[:n_img][inside], ref.final[:n_img][inside])
        report["final_error_vs_reference"] = relative_error(traj.final[:n_img], ref.final[:n_img])
    if diagnostic:
        report["similarity"] = similarity_report(ref if ref is not None else traj)
    report["runtime"] = {
        "tip": plan is not None,
        "scoring_calls_during_denoise": traj.scoring_calls,
        "preprocess_seconds": preprocess_seconds,
        "wall_seconds": time.perf_counter() - started,
    }
    if not report["finite"]:
        raise StateError("non-finite values in the final latent")
    return RunResult(final, report, traj, ref)


def _echo(config: EditConfig) -> dict:
    data = config.model_dump(mode="json")
    if isinstance(config, CliConfig):
        for key in ("input_path", "output_path", "report_path", "plan_path", "diagnostic", "reference_run"):
            data.pop(key, None)
    return data

