"""Numerical optimization primitives shared by calibration.

Nelder-Mead delegates to scipy; CMA-ES and RANSAC are implemented here so
runs are deterministic under a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import NoValidHypothesis, NonFiniteObjective


@dataclass
class RansacConfig:
    sample_size: int
    iterations: int = 50
    inlier_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be > 0")


@dataclass
class CmaesConfig:
    sigma0: float = 1.0
    population: Optional[int] = None  # default 4 + floor(3 ln n)
    max_evals: int = 5000
    f_tol: float = 1e-14
    seed: int = 0
    lower: Optional[np.ndarray] = None  # optional per-dimension box bounds
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be > 0")
        if self.population is not None and self.population < 2:
            raise ValueError("population must be >= 2")


def nelder_mead(f, x0, xatol=1e-8, fatol=1e-10, max_evals=20000, restarts=2):
    """Minimize f from x0 with Nelder-Mead; restarts re-seed the simplex at the incumbent."""
    x0 = np.asarray(x0, dtype=float)
    f0 = float(f(x0))
    if not math.isfinite(f0):
        raise NonFiniteObjective("objective is not finite at x0")
    best_x, best_f = x0, f0
    for _ in range(max(1, restarts + 1)):
        res = minimize(
            f,
            best_x,
            method="Nelder-Mead",
            options={
                "xatol": xatol,
                "fatol": fatol,
                "maxfev": max_evals,
                "adaptive": True,
            },
        )
        if res.fun < best_f:
            best_x, best_f = np.asarray(res.x, dtype=float), float(res.fun)
    return best_x, best_f


def _clamp_mirrored(x, lower, upper):
    """Reflect out-of-bound coordinates back into the box."""
    if lower is None and upper is None:
        return x
    y = x.copy()
    if lower is not None:
        mask = y < lower
        y[mask] = np.minimum(2 * lower[mask] - y[mask], upper[mask] if upper is not None else np.inf)
        y = np.maximum(y, lower)
    if upper is not None:
        mask = y > upper
        y[mask] = np.maximum(2 * upper[mask] - y[mask], lower[mask] if lower is not None else -np.inf)
        y = np.minimum(y, upper)
    return y


def cma_es(f, x0, cfg: CmaesConfig):
    """(mu/mu_w, lambda)-CMA-ES with rank-one/rank-mu updates and CSA step-size control.

    Returns the best-ever (x, f). Deterministic for a fixed cfg.seed.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    f0 = float(f(x0))
    if not math.isfinite(f0):
        raise NonFiniteObjective("objective is not finite at x0")

    lam = cfg.population or (4 + int(3 * math.log(n)))
    mu = lam // 2
    weights = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights = weights / weights.sum()
    mu_eff = 1.0 / np.sum(weights**2)

    cc = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
    cs = (mu_eff + 2) / (n + mu_eff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mu_eff)
    cmu = min(1 - c1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
    damps = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    lower = None if cfg.lower is None else np.asarray(cfg.lower, dtype=float)
    upper = None if cfg.upper is None else np.asarray(cfg.upper, dtype=float)

    rng = np.random.default_rng(cfg.seed)
    mean = x0.copy()
    sigma = cfg.sigma0
    C = np.eye(n)
    ps = np.zeros(n)
    pc = np.zeros(n)
    best_x, best_f = x0.copy(), f0
    evals = 1
    gen_best_history = []

    while evals < cfg.max_evals:
        # eigendecomposition of C for sampling (C symmetric PSD)
        C = (C + C.T) / 2
        eigvals, B = np.linalg.eigh(C)
        eigvals = np.maximum(eigvals, 1e-20)
        D = np.sqrt(eigvals)

        zs = rng.standard_normal((lam, n))
        ys = zs * D @ B.T  # y_k = B D z_k
        xs = mean + sigma * ys
        fitness = np.empty(lam)
        for k in range(lam):
            xk = _clamp_mirrored(xs[k], lower, upper)
            xs[k] = xk
            ys[k] = (xk - mean) / sigma
            fitness[k] = float(f(xk))
        evals += lam

        order = np.argsort(fitness, kind="stable")
        if fitness[order[0]] < best_f:
            best_f = float(fitness[order[0]])
            best_x = xs[order[0]].copy()

        y_w = weights @ ys[order[:mu]]
        mean = mean + sigma * y_w

        # cumulative step-size adaptation
        inv_sqrt_C = B @ np.diag(1.0 / D) @ B.T
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mu_eff) * (inv_sqrt_C @ y_w)
        h_sig = (
            np.linalg.norm(ps) / math.sqrt(1 - (1 - cs) ** (2 * evals / lam)) / chi_n
            < 1.4 + 2 / (n + 1)
        )
        pc = (1 - cc) * pc + (h_sig * math.sqrt(cc * (2 - cc) * mu_eff)) * y_w

        # rank-one + rank-mu covariance update
        artmp = ys[order[:mu]]
        C = (
            (1 - c1 - cmu) * C
            + c1 * (np.outer(pc, pc) + (not h_sig) * cc * (2 - cc) * C)
            + cmu * (artmp.T * weights) @ artmp
        )
        sigma *= math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))

        gen_best_history.append(float(fitness[order[0]]))
        if len(gen_best_history) > 10:
            gen_best_history.pop(0)
            if max(gen_best_history) - min(gen_best_history) < cfg.f_tol:
                break
        if evals >= cfg.max_evals:
            break

    return best_x, best_f


def ransac(
    data: Sequence,
    fit: Callable,
    residual: Callable,
    cfg: RansacConfig,
):
    """Generic RANSAC.

    fit(subset) -> model or None (degenerate subset); residual(model, sample) -> meters.
    The winning hypothesis (most inliers, ties by lower mean inlier residual) is
    refit on all of its inliers; returns (model, inlier_mask).
    """
    n = len(data)
    if n < cfg.sample_size:
        raise NoValidHypothesis(f"need >= {cfg.sample_size} samples, got {n}")
    rng = np.random.default_rng(cfg.seed)

    best = None  # (n_inliers, -mean_residual, mask, model) comparison tuple
    for _ in range(cfg.iterations):
        idx = rng.choice(n, size=cfg.sample_size, replace=False)
        model = fit([data[i] for i in idx])
        if model is None:
            continue
        res = np.array([residual(model, s) for s in data])
        mask = res < cfg.inlier_threshold
        n_in = int(mask.sum())
        if n_in == 0:
            continue
        mean_res = float(res[mask].mean())
        key = (n_in, -mean_res)
        if best is None or key > best[0]:
            best = (key, mask, model)

    if best is None:
        raise NoValidHypothesis("every hypothesis fit failed or had zero inliers")

    _, mask, model = best
    refit = fit([data[i] for i in np.flatnonzero(mask)])
    if refit is not None:
        res = np.array([residual(refit, s) for s in data])
        new_mask = res < cfg.inlier_threshold
        # keep the refit only if it does not lose inliers
        if int(new_mask.sum()) >= int(mask.sum()):
            model, mask = refit, new_mask
    return model, mask
