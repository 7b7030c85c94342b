"""Independent oracles shared by the test modules.

Nothing here goes through the autodiff tape: the reference forward passes
are plain numpy loops written straight from the model equations, so they
can check the taped implementation rather than echo it.
"""

from __future__ import annotations

import math

import numpy as np

from tamkot.data import ASSESSED, NON_ASSESSED, Activity, StudentSequence
from tamkot.model import GATES, Hyperparams
from tamkot.training import init_params

# Gradient entries below this magnitude cannot be resolved to 1e-4 relative
# accuracy by central differences at eps=1e-5 in float64; compare absolutely there.
GRAD_FLOOR = 1e-6


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def max_rel_err(analytic, numeric, floor: float = GRAD_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def reference_loss(arrays: dict, hyper: Hyperparams, sequences, lambda_theta: float) -> float:
    """Regularised BCE of the transition-aware cell, one activity at a time."""
    d_h = hyper.d_h
    total = 0.0
    for seq in sequences:
        h = np.zeros(d_h)
        m = np.zeros(d_h)
        prev = None
        for a in seq:
            if a.is_padding:
                continue
            d = a.material_type
            if d == ASSESSED:
                joined = np.concatenate([h, arrays["A_q"][a.material_id]])
                p = _sig(joined @ arrays["W_p"] + arrays["b_p"])
                r = a.response
                total -= r * math.log(p) + (1 - r) * math.log(1 - p)
                if hyper.response_mode == "binary":
                    resp = arrays["A_r"][int(r)]
                else:
                    resp = r * arrays["A_r"]
                x = np.concatenate([arrays["A_q"][a.material_id], resp])
            else:
                x = arrays["A_l"][a.material_id]
            dp = d if prev is None else prev
            trans = {(0, 0): "QQ", (0, 1): "QL", (1, 0): "LQ", (1, 1): "LL"}[(dp, d)]
            pre = {}
            for g in GATES:
                v = arrays[f"V_{g}Q"] if d == ASSESSED else arrays[f"V_{g}L"]
                w = arrays[f"W_{g}"] if hyper.tie_transfer else arrays[f"W_{g}_{trans}"]
                pre[g] = x @ v + h @ w + arrays[f"b_{g}"]
            i, gg, f, o = _sig(pre["i"]), np.tanh(pre["g"]), _sig(pre["f"]), _sig(pre["o"])
            m = f * m + i * gg
            h = o * np.tanh(m)
            prev = d
    reg = sum(float(np.sum(v * v)) for v in arrays.values())
    return total + lambda_theta * reg


def reference_lstm(xs, wx: dict, wh: dict, b: dict):
    """Textbook LSTM; returns the list of hidden states."""
    d_h = next(iter(b.values())).shape[0]
    h = np.zeros(d_h)
    c = np.zeros(d_h)
    out = []
    for x in xs:
        i = _sig(x @ wx["i"] + h @ wh["i"] + b["i"])
        g = np.tanh(x @ wx["g"] + h @ wh["g"] + b["g"])
        f = _sig(x @ wx["f"] + h @ wh["f"] + b["f"])
        o = _sig(x @ wx["o"] + h @ wh["o"] + b["o"])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return out


def random_activities(rng, n: int, Q: int, L: int, mode: str = "binary", all_transitions: bool = True):
    """Random activity list; when asked, forces QQ, QL, LL and LQ to all occur."""
    while True:
        types = rng.integers(0, 2, size=n)
        if all_transitions:
            pairs = {(int(a), int(b)) for a, b in zip(types[:-1], types[1:])}
            if len(pairs) < 4:
                continue
        break
    acts = []
    for d in types:
        if d == ASSESSED:
            r = float(rng.integers(0, 2)) if mode == "binary" else float(rng.random())
            acts.append(Activity(ASSESSED, int(rng.integers(Q)), r))
        else:
            acts.append(Activity(NON_ASSESSED, int(rng.integers(L))))
    return acts


def random_setup(seed: int, d_h: int = 4, n: int = 8, Q: int = 3, L: int = 3, mode: str = "binary",
                 tie: bool = False, lam: float = 0.01):
    rng = np.random.default_rng(seed)
    hyper = Hyperparams(d_q=3, d_l=2, d_r=2, d_h=d_h, seq_len=n, lambda_theta=lam,
                        response_mode=mode, tie_transfer=tie, seed=seed)
    params = init_params(hyper, Q, L, seed=seed)
    # wider than the N(0, 0.2) init so that every gate is exercised away from its linear regime
    for t in params:
        t.value[...] = rng.normal(0.0, 0.6, size=t.shape)
    acts = random_activities(rng, n, Q, L, mode)
    return hyper, params, StudentSequence("s0", tuple(acts))


def brute_wilcoxon(x, y):
    """W = min(W+, W-) and its two-sided p by listing all 2^n sign patterns."""
    d = [a - b for a, b in zip(x, y) if a != b]
    mags = sorted(abs(v) for v in d)
    # average ranks, computed naively
    rank_of = {}
    for m in set(mags):
        positions = [i + 1 for i, v in enumerate(mags) if v == m]
        rank_of[m] = sum(positions) / len(positions)
    ranks = np.array([rank_of[abs(v)] for v in d])
    w_plus = float(sum(r for r, v in zip(ranks, d) if v > 0))
    w = min(w_plus, float(ranks.sum()) - w_plus)
    n = len(d)
    patterns = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    wp = patterns @ ranks
    stat = np.minimum(wp, ranks.sum() - wp)
    return w, float(np.count_nonzero(stat <= w + 1e-9)) / 2 ** n
