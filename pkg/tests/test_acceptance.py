"""Acceptance checks, one test per criterion.

Each test prints a single ``[acceptance N] PASS|FAIL ...`` line to the terminal
(capture is bypassed for that line) and then asserts.
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eedit.bonus import BonusParams, build_bonus
from eedit.config import EditConfig, resolve_mask
from eedit.flow import LayerStack
from eedit.grid import EditMask
from eedit.pipeline import build_field, denoise, invert, run_edit
from eedit.scoring import ModuleKind, OnlineScorer, ScoreState
from eedit.grid import make_grid
from eedit.tip import plan, verify_equivalence

import oracles

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def random_config(rng, max_side=16, max_steps=28):
    h, w = int(rng.integers(1, max_side + 1)), int(rng.integers(1, max_side + 1))
    top, left = int(rng.integers(0, h)), int(rng.integers(0, w))
    return EditConfig(
        height=h, width=w, layers=int(rng.integers(1, 5)), steps=int(rng.integers(1, max_steps + 1)),
        ratio=float(rng.choice([0.1, 0.25, 0.5, 1.0])), gamma=float(rng.choice([0.0, 0.5, 1.0])),
        seed=int(rng.integers(0, 2**63)), refresh_interval=int(rng.integers(1, 8)),
        skip_interval=int(rng.integers(1, 5)), force_final_refresh=bool(rng.integers(0, 2)),
        mask={"rect": [top, left, int(rng.integers(top + 1, h + 1)), int(rng.integers(left + 1, w + 1))]},
        bonus={"b": float(rng.uniform(1.1, 4)), "r": float(rng.uniform(0.1, 0.9)), "K": int(rng.integers(0, 5))},
    )


def test_1_tip_equivalence(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    failures, checked = [], 0
    for i in range(120):
        cfg = random_config(rng)
        if i % 2:
            cfg = cfg.replace(policies={"sa": "token_wise", "ca": "token_wise", "mlp": "token_wise"})
        rep = verify_equivalence(cfg)
        checked += rep.entries_checked
        if not rep.equal:
            failures.append((i, rep.first_divergence))
    elapsed = time.perf_counter() - start
    verdict(1, not failures and elapsed < 60,
            f"120 configs, {checked} entries, {len(failures)} divergent, {elapsed:.1f}s")


def test_2_pipeline_tip_lossless(verdict):
    rng = np.random.default_rng(7)
    mismatched = 0
    for _ in range(24):
        cfg = random_config(rng, max_side=10, max_steps=12).replace(channels=4, prompt_len=int(rng.integers(0, 4)))
        live = run_edit(cfg, reference=False)
        offline = run_edit(cfg, plan=plan(cfg), reference=False)
        mismatched += live.final.data.tobytes() != offline.final.data.tobytes()
    verdict(2, mismatched == 0, f"24 configs, {mismatched} final latents differ")


def _inversion_evals(steps, m):
    cfg = EditConfig(height=4, width=4, channels=4, layers=1, steps=steps, skip_interval=m)
    z0 = make_grid(4, 4, 4, cfg.prompt_len, 0)
    return invert(z0, cfg, build_field(cfg), LayerStack(1, 4, 16, 0)).velocity_evals


def test_3_inversion_step_counting(verdict):
    m3, m1 = _inversion_evals(28, 3), _inversion_evals(28, 1)
    verdict(3, (m3, m1) == (10, 28), f"T=28 m=3 -> {m3} evaluations, m=1 -> {m1}")


def test_4_background_preservation(verdict):
    rng = np.random.default_rng(44)
    bad = 0
    total = 30
    for _ in range(total):
        cfg = random_config(rng, max_side=10, max_steps=12).replace(channels=4)
        res = run_edit(cfg, reference=False)
        outside = ~resolve_mask(cfg).flat
        n = cfg.n_image
        traj = res.trajectory
        for t in range(1, cfg.steps + 1):
            if traj.denoise[t - 1][:n][outside].tobytes() != traj.inversion.latents[t][:n][outside].tobytes():
                bad += 1
                break
    verdict(4, bad == 0, f"{total} configs, {bad} with a background token off the inversion latent")


def test_5_cache_exactness(verdict):
    rng = np.random.default_rng(5)
    differing = 0
    for m in (1, 2, 3, 1, 2):
        cfg = random_config(rng, max_side=8, max_steps=10).replace(
            ratio=1.0, refresh_interval=1, skip_interval=m, channels=4, prompt_len=2)
        mask = resolve_mask(cfg)
        z0 = make_grid(cfg.height, cfg.width, 4, 2, cfg.seed)
        field = build_field(cfg)
        stack = LayerStack(cfg.layers, 4, cfg.n_image, cfg.seed)
        inv = invert(z0, cfg, field, stack)
        cached = denoise(inv, cfg, mask, field, stack)
        plain = denoise(inv, cfg, mask, field, stack, cached=False)
        differing += cached.final.tobytes() != plain.final.tobytes()
    verdict(5, differing == 0, f"5 configs at ratio=1, refresh every step, {differing} differ from uncached")


def test_6_flops_accounting(verdict):
    schedules = [
        dict(steps=28, skip_interval=3, ratio=0.25, refresh_interval=4),
        dict(steps=28, skip_interval=1, ratio=0.25, refresh_interval=4),
        dict(steps=28, skip_interval=3, ratio=0.1, refresh_interval=7),
        dict(steps=20, skip_interval=2, ratio=0.5, refresh_interval=3, force_final_refresh=False),
        dict(steps=10, skip_interval=4, ratio=1.0, refresh_interval=2),
        dict(steps=7, skip_interval=7, ratio=0.3, refresh_interval=1),
        dict(steps=12, skip_interval=20, ratio=0.05, refresh_interval=5),
        dict(steps=16, skip_interval=3, ratio=0.25, refresh_interval=16, height=8, width=12),
        dict(steps=5, skip_interval=2, ratio=0.75, refresh_interval=2, prompt_len=0),
        dict(steps=9, skip_interval=1, ratio=0.2, refresh_interval=3, layers=2, channels=4),
        dict(steps=1, skip_interval=1, ratio=0.25, refresh_interval=4),
        dict(steps=24, skip_interval=5, ratio=0.4, refresh_interval=6, force_final_refresh=False, height=5, width=9),
    ]
    mismatches = []
    for s in schedules:
        cfg = EditConfig(**s)
        rep = run_edit(cfg, reference=False).report
        expected = oracles.closed_form_flops(cfg.height, cfg.width, cfg.channels, cfg.prompt_len, cfg.layers,
                                             cfg.steps, cfg.skip_interval, cfg.ratio, cfg.refresh_interval,
                                             cfg.force_final_refresh)
        if (rep["flops_full_equivalent"], rep["flops_actual"]) != expected:
            mismatches.append(s)
    speedup = run_edit(EditConfig(), reference=False).report["speedup_flops"]
    verdict(6, not mismatches and speedup >= 2.4,
            f"{len(schedules)} schedules, {len(mismatches)} mismatches; default speedup {speedup:.4f}x")


def test_7_bonus_map_oracle(verdict):
    rng = np.random.default_rng(77)
    wrong = 0
    for _ in range(200):
        h, w = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        bits = rng.random((h, w)) < rng.choice([0.0, 0.002, 0.01, 0.05, 0.3])
        params = BonusParams(float(rng.uniform(1.01, 6)), float(rng.uniform(0.05, 0.95)), int(rng.integers(0, 9)))
        got = build_bonus(EditMask(h, w, bits), params).values
        wrong += got.tobytes() != oracles.brute_bonus(bits, params.b, params.r, params.K).tobytes()
    verdict(7, wrong == 0, f"200 masks up to 64x64, {wrong} differ from brute force")


_law_violations = []


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.floats(0.05, 1.0), st.sampled_from([0.0, 0.5, 1.0]), st.integers(0, 2**32),
       st.integers(1, 30))
def _frequency_law(n, ratio, gamma, seed, steps):
    bonus = np.random.default_rng(seed).uniform(1, 3, n).astype(np.float32)
    scorer = OnlineScorer(bonus, ScoreState(n, gamma=gamma, ratio=ratio, seed=seed))
    prev = scorer.state.freq_for(ModuleKind.MLP, 0).copy()
    for step in range(steps, 0, -1):
        sel = scorer.select(ModuleKind.MLP, 0, step)
        chosen = np.isin(np.arange(n), sel.indices)
        cur = scorer.state.freq_for(ModuleKind.MLP, 0)
        if not np.array_equal(cur, np.where(chosen, 0, prev + 1)):
            _law_violations.append((n, ratio, gamma, seed, step))
        prev = cur.copy()


def test_8_frequency_control_law(verdict):
    _law_violations.clear()
    _frequency_law()
    stale = []
    for n_r in (1, 2, 3, 4, 7):
        rep = run_edit(EditConfig(height=8, width=8, layers=2, steps=20, ratio=0.1, refresh_interval=n_r),
                       reference=False).report
        if rep["max_cache_staleness"] > n_r:
            stale.append((n_r, rep["max_cache_staleness"]))
    verdict(8, not _law_violations and not stale,
            f"{len(_law_violations)} frequency-law violations; staleness over bound for {stale or 'no'} N_r")


def _mean_error(seeds, **changes):
    errs = []
    for seed in seeds:
        cfg = EditConfig(height=8, width=8, layers=2, steps=28, seed=seed, **changes)
        errs.append(run_edit(cfg).report["final_error_vs_reference"])
    return float(np.mean(errs))


def test_9_fidelity_monotonicity(verdict):
    seeds = range(20)
    by_ratio = [_mean_error(seeds, ratio=r, skip_interval=1) for r in (0.1, 0.25, 0.5, 1.0)]
    by_m = [_mean_error(seeds, ratio=1.0, refresh_interval=1, skip_interval=m) for m in (1, 2, 4)]
    ok = all(a >= b for a, b in zip(by_ratio, by_ratio[1:])) and all(a <= b for a, b in zip(by_m, by_m[1:]))
    verdict(9, ok, "mean error by ratio 0.1/0.25/0.5/1.0 = " + "/".join(f"{e:.5f}" for e in by_ratio)
            + "; by m 1/2/4 = " + "/".join(f"{e:.5f}" for e in by_m))


def test_10_no_online_scoring_with_tip(verdict):
    cfg = EditConfig()
    res = run_edit(cfg, plan=plan(cfg), reference=False)
    live = run_edit(cfg, reference=False)
    calls = res.report["runtime"]["scoring_calls_during_denoise"]
    verdict(10, calls == 0 and live.report["runtime"]["scoring_calls_during_denoise"] > 0,
            f"scoring calls during TIP denoise = {calls} (live run: "
            f"{live.report['runtime']['scoring_calls_during_denoise']})")
