"""Feature-column selection (deterministic CUR, FPS) and the GFRE metric."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class SelectionError(Exception):
    pass


@dataclass
class SelectionResult:
    indices: list[int]
    scores: list[float]

    def to_dict(self) -> dict:
        return {"indices": [int(i) for i in self.indices],
                "scores": [float(s) for s in self.scores]}


def cur_select(x: np.ndarray, k: int) -> SelectionResult:
    """Deterministic CUR column selection with rank-1 deflation.

    At each step the column with the largest leverage score on the top right
    singular vector of the residual is picked (ties broken by lowest index),
    then the residual is orthogonalized against it.
    """
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if k > d:
        raise SelectionError(f"cannot select {k} of {d} columns")
    resid = x.copy()
    picked: list[int] = []
    scores: list[float] = []
    for step in range(k):
        norms = np.linalg.norm(resid, axis=0)
        if np.max(norms) < 1e-12 * max(1.0, np.linalg.norm(x)):
            raise SelectionError(
                f"residual vanished after {step} picks (achievable rank {step})"
            )
        _, _, vt = np.linalg.svd(resid, full_matrices=False)
        lev = vt[0] ** 2
        lev[picked] = -1.0
        j = int(np.argmax(lev))
        picked.append(j)
        scores.append(float(lev[j]))
        col = resid[:, j]
        nrm2 = float(col @ col)
        if nrm2 > 0:
            resid = resid - np.outer(col, col @ resid) / nrm2
        resid[:, j] = 0.0
    return SelectionResult(indices=picked, scores=scores)


def fps_select(x: np.ndarray, k: int, start: int = 0) -> SelectionResult:
    """Farthest point sampling over feature columns (points in R^N)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[1]
    if k > d:
        raise SelectionError(f"cannot select {k} of {d} columns")
    if not 0 <= start < d:
        raise SelectionError("start index out of range")
    picked = [start]
    scores = [float("inf")]
    sq = np.sum(x**2, axis=0)
    mind = sq + sq[start] - 2.0 * (x[:, start] @ x)
    mind[start] = 0.0
    exhausted = False
    for _ in range(k - 1):
        j = int(np.argmax(mind))
        best = float(mind[j])
        if best <= 1e-24 and not exhausted:
            warnings.warn("duplicate columns exhaust FPS distances; "
                          "remaining picks by lowest index")
            exhausted = True
        if exhausted:
            remaining = sorted(set(range(d)) - set(picked))
            j = remaining[0]
            best = 0.0
        picked.append(j)
        scores.append(best)
        dj = sq + sq[j] - 2.0 * (x[:, j] @ x)
        mind = np.minimum(mind, np.maximum(dj, 0.0))
        mind[picked] = 0.0
    return SelectionResult(indices=picked, scores=scores)


def gfre(x_src: np.ndarray, x_dst: np.ndarray, split: float = 0.5,
         ridge: float = 1e-8, seed: int = 0) -> float:
    """Global feature-space reconstruction error of x_dst from x_src.

    Columns are standardized on the train split; a ridge map is fitted on
    train rows and the normalized Frobenius residual is evaluated on test
    rows.  Deterministic given the shuffling seed.
    """
    x_src = np.asarray(x_src, dtype=float)
    x_dst = np.asarray(x_dst, dtype=float)
    if len(x_src) != len(x_dst):
        raise SelectionError("row counts differ")
    if not 0.0 < split < 1.0:
        raise SelectionError("split must be in (0, 1)")
    n = len(x_src)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    ntr = max(1, int(round(split * n)))
    tr, te = perm[:ntr], perm[ntr:]
    if len(te) == 0:
        raise SelectionError("empty test split")

    def standardize(a):
        mu = a[tr].mean(axis=0)
        sd = a[tr].std(axis=0)
        sd = np.where(sd < 1e-300, 1.0, sd)
        return (a - mu) / sd, sd

    ys, ysd = standardize(x_dst)
    if np.all(x_dst.std(axis=0) < 1e-300):
        raise SelectionError("destination features have zero variance")
    xs, _ = standardize(x_src)
    gram = xs[tr].T @ xs[tr]
    w = np.linalg.solve(gram + ridge * len(tr) * np.eye(gram.shape[0]),
                        xs[tr].T @ ys[tr])
    resid = ys[te] - xs[te] @ w
    denom = np.linalg.norm(ys[te])
    if denom == 0:
        raise SelectionError("destination test block is zero")
    return float(np.linalg.norm(resid) / denom)
