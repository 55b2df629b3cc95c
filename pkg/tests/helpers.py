"""Shared fixtures for the search tests and the acceptance suite."""
import numpy as np

from fundus_uda.search import _uniform, run_tpe

PEAK, WIDTH = 0.3, 0.05
GRID = np.arange(1, 1000) / 1000.0


def peaked(beta: float) -> float:
    return float(np.exp(-0.5 * ((beta - PEAK) / WIDTH) ** 2))


def grid_optimum(fn=peaked):
    vals = np.array([fn(b) for b in GRID])
    i = int(np.argmax(vals))
    return float(GRID[i]), float(vals[i])


def trials_to_optimum(betas, fn=peaked, tol=0.05):
    """1-based index of the first trial whose score is within ``tol`` of the grid optimum."""
    _, best = grid_optimum(fn)
    for i, b in enumerate(betas):
        if fn(b) >= best - tol:
            return i + 1
    return len(betas) + 1


def tpe_betas(seed, n=30, fn=peaked):
    return [r.beta for r in run_tpe(fn, n, np.random.default_rng(seed))]


def uniform_betas(seed, n=30):
    rng = np.random.default_rng(seed)
    return [_uniform(rng) for _ in range(n)]


# acceptance lines collected during the session and printed by conftest
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])
