"""Slow, obviously-correct reference computations used as test oracles.

Nothing here calls the code paths under test except the counter-based random
stream, which both sides must share by construction.
"""

import math

import numpy as np

from eedit.grid import Purpose, stream_rng

SA, CA, MLP = 0, 1, 2


def brute_l1_distance(bits):
    """Min L1 distance from each cell to any True cell, None when there is none."""
    h, w = bits.shape
    pts = [(i, j) for i in range(h) for j in range(w) if bits[i, j]]
    out = []
    for i in range(h):
        for j in range(w):
            out.append(min((abs(i - a) + abs(j - b) for a, b in pts), default=None))
    return out


def brute_bonus(bits, b, r, K):
    """Evaluate the bonus formula by enumerating every k-neighbourhood of the mask."""
    h, w = bits.shape
    pts = [(i, j) for i in range(h) for j in range(w) if bits[i, j]]
    vals = []
    for i in range(h):
        for j in range(w):
            value = 1.0
            # smallest k with some mask point at L1 distance exactly k
            for k in range(K + 1):
                if any(abs(i - a) + abs(j - c) == k for a, c in pts):
                    value = 1.0 + b * r ** k
                    break
            vals.append(np.float32(value))
    return np.array(vals, dtype=np.float32)


def brute_rasterize(pixels, patch):
    hp, wp = pixels.shape
    out = np.zeros((hp // patch, wp // patch), dtype=bool)
    for i in range(hp // patch):
        for j in range(wp // patch):
            hit = False
            for a in range(patch):
                for c in range(patch):
                    hit = hit or bool(pixels[i * patch + a, j * patch + c])
            out[i, j] = hit
    return out


def sort_top(scores, count):
    """Full sort by (-score, index), first ``count`` indices ascending."""
    keyed = sorted(range(len(scores)), key=lambda i: (-float(scores[i]), i))
    return sorted(keyed[:count])


def draw(seed, kind, layer, step, n):
    return stream_rng(seed, Purpose.SCORE, kind, layer, step).random(n, dtype=np.float32)


def naive_selection_run(seed, bonus, steps, layers, ratio, gamma, refresh, token_wise=(SA, MLP)):
    """Step the selection process one token at a time in pipeline order.

    Returns {(kind, layer, step): list of indices or "skip"}; refresh steps
    select everything.
    """
    n = len(bonus)
    count = max(1, math.ceil(ratio * n))
    freq = {(k, l): [0] * n for k in token_wise for l in range(layers)}
    out = {}
    for step in range(steps, 0, -1):
        for layer in range(layers):
            for kind in (SA, CA, MLP):
                if step in refresh:
                    if kind in token_wise:
                        freq[(kind, layer)] = [0] * n
                    out[(kind, layer, step)] = list(range(n))
                    continue
                if kind not in token_wise:
                    out[(kind, layer, step)] = "skip"
                    continue
                rand = draw(seed, kind, layer, step, n)
                f = freq[(kind, layer)]
                scores = [np.float32(rand[i]) * np.float32(bonus[i]) + np.float32(gamma) * np.float32(f[i])
                          for i in range(n)]
                sel = sort_top(scores, count)
                chosen = set(sel)
                freq[(kind, layer)] = [0 if i in chosen else f[i] + 1 for i in range(n)]
                out[(kind, layer, step)] = sel
    return out


def enumerate_refresh(first, interval, forced=()):
    refresh, last = [], None
    for s in range(first, 0, -1):
        if s == first or s in forced or last - s == interval:
            refresh.append(s)
            last = s
    return refresh


def closed_form_flops(H, W, C, P, L, T, m, ratio, interval, force_final, ca_skips=True):
    """(full-equivalent, actual) FLOPs written out term by term from the cost model."""
    n_img = H * W
    N = n_img + P
    sa_full = 2 * N * N * C + 4 * N * C * C
    ca_full = 2 * N * P * C + 4 * N * C * C
    mlp_full = 8 * N * C * C
    full_step = L * (sa_full + ca_full + mlp_full)

    inv_steps = len([t for t in range(1, T + 1) if (t - 1) % m == 0 or t == T or m >= T])
    refresh = enumerate_refresh(T, interval, (1,) if force_final else ())
    k = max(1, math.ceil(ratio * n_img))
    if k == n_img:
        partial_step = L * (sa_full + (0 if ca_skips else ca_full) + mlp_full)
    else:
        nk = k + P
        partial_step = L * ((2 * nk * N * C + 4 * nk * C * C) + (0 if ca_skips else 2 * nk * P * C + 4 * nk * C * C)
                            + 8 * nk * C * C)
    actual = inv_steps * full_step + len(refresh) * full_step + (T - len(refresh)) * partial_step
    return 2 * T * full_step, actual
