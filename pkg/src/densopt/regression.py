"""Linear ridge and polynomial-kernel ridge models on invariant features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve


class RegressionError(Exception):
    pass


def aggregate_structure_features(env_features: np.ndarray,
                                 structure_ids: np.ndarray,
                                 n_structures: int | None = None) -> np.ndarray:
    """Sum per-environment features into per-structure feature vectors."""
    env_features = np.asarray(env_features, dtype=float)
    structure_ids = np.asarray(structure_ids, dtype=int)
    if len(env_features) != len(structure_ids):
        raise RegressionError("feature rows and structure ids differ in length")
    ns = int(structure_ids.max()) + 1 if n_structures is None else n_structures
    out = np.zeros((ns, env_features.shape[1]))
    np.add.at(out, structure_ids, env_features)
    return out


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return solve(a, b, assume_a="pos")
    except np.linalg.LinAlgError:
        return np.linalg.solve(a, b)


@dataclass
class Model:
    """A fitted energy model: primal linear weights or a polynomial-kernel
    dual expansion on L2-normalized features."""

    kind: str  # "linear" or "kernel_poly"
    lam: float
    zeta: int = 1
    weights: np.ndarray | None = None
    intercept: float = 0.0
    feature_mean: np.ndarray | None = None
    support: np.ndarray | None = None  # normalized training features
    dual_coef: np.ndarray | None = None
    pipeline_id: str = ""
    target_convention: str = "per_structure"

    def to_bytes(self) -> bytes:
        header = {
            "kind": self.kind, "lam": self.lam, "zeta": self.zeta,
            "intercept": self.intercept, "pipeline_id": self.pipeline_id,
            "target_convention": self.target_convention,
            "weights_len": len(self.weights) if self.weights is not None else 0,
            "mean_len": (len(self.feature_mean)
                         if self.feature_mean is not None else 0),
            "support_shape": (list(self.support.shape)
                              if self.support is not None else None),
        }
        chunks = []
        if self.weights is not None:
            chunks.append(np.asarray(self.weights, dtype="<f8").tobytes())
        if self.feature_mean is not None:
            chunks.append(np.asarray(self.feature_mean, dtype="<f8").tobytes())
        if self.support is not None:
            chunks.append(np.ascontiguousarray(self.support, dtype="<f8").tobytes())
            chunks.append(np.asarray(self.dual_coef, dtype="<f8").tobytes())
        return json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Model":
        head, _, payload = blob.partition(b"\n")
        h = json.loads(head.decode())
        data = np.frombuffer(payload, dtype="<f8")
        ofs = 0
        weights = None
        mean = None
        support = None
        dual = None
        if h["weights_len"]:
            weights = data[:h["weights_len"]].copy()
            ofs = h["weights_len"]
        if h.get("mean_len"):
            mean = data[ofs:ofs + h["mean_len"]].copy()
            ofs += h["mean_len"]
        if h["support_shape"]:
            ns, d = h["support_shape"]
            support = data[ofs:ofs + ns * d].reshape(ns, d).copy()
            ofs += ns * d
            dual = data[ofs:ofs + ns].copy()
        return cls(kind=h["kind"], lam=h["lam"], zeta=int(h["zeta"]),
                   weights=weights, intercept=float(h["intercept"]),
                   feature_mean=mean, support=support, dual_coef=dual,
                   pipeline_id=h.get("pipeline_id", ""),
                   target_convention=h.get("target_convention", "per_structure"))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise RegressionError("non-finite values in regression inputs")


def ridge_fit(x: np.ndarray, y: np.ndarray, lam: float,
              center_features: bool = True, **meta) -> Model:
    """w = (X^T X + lam N I)^-1 X^T y_c with the intercept on centered y.

    By default the feature columns are centered as well, so exactly
    representable affine targets give near-zero training residual at tiny
    lam.  center_features=False keeps the raw design (the convention that
    matches the uncentered-kernel dual solve).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    _check_finite(x, y)
    if lam <= 0:
        raise RegressionError("lam must be positive")
    n = len(y)
    intercept = float(y.mean())
    yc = y - intercept
    mean = x.mean(axis=0) if center_features else None
    xc = x - mean if mean is not None else x
    w = _solve_spd(xc.T @ xc + lam * n * np.eye(x.shape[1]), xc.T @ yc)
    return Model(kind="linear", lam=lam, weights=w, intercept=intercept,
                 feature_mean=mean, **meta)


def ridge_predict(model: Model, x: np.ndarray) -> np.ndarray:
    if model.kind != "linear":
        raise RegressionError("ridge_predict requires a linear model")
    x = np.asarray(x, dtype=float)
    if model.feature_mean is not None:
        x = x - model.feature_mean
    return x @ model.weights + model.intercept


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < 1e-300):
        raise RegressionError("zero-norm feature row cannot be kernel-normalized")
    return x / norms[:, None]


def krr_fit(x: np.ndarray, y: np.ndarray, zeta: int, lam: float, **meta) -> Model:
    """Polynomial kernel k(x, x') = (x.x'/|x||x'|)^zeta, dual ridge solve."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    _check_finite(x, y)
    if lam <= 0:
        raise RegressionError("lam must be positive")
    if not (isinstance(zeta, (int, np.integer)) and zeta >= 1):
        raise RegressionError("zeta must be an integer >= 1")
    xn = _normalize_rows(x)
    n = len(y)
    k = (xn @ xn.T) ** zeta
    intercept = float(y.mean())
    alpha = _solve_spd(k + lam * n * np.eye(n), y - intercept)
    return Model(kind="kernel_poly", lam=lam, zeta=int(zeta), support=xn,
                 dual_coef=alpha, intercept=intercept, **meta)


def krr_predict(model: Model, x: np.ndarray) -> np.ndarray:
    if model.kind != "kernel_poly":
        raise RegressionError("krr_predict requires a kernel model")
    xn = _normalize_rows(np.asarray(x, dtype=float))
    k = (xn @ model.support.T) ** model.zeta
    return k @ model.dual_coef + model.intercept


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    if model.kind == "linear":
        return ridge_predict(model, x)
    return krr_predict(model, x)


@dataclass
class EnvGradients:
    """Feature gradients of one environment for force assembly."""

    structure_id: int
    center: int
    neighbor_indices: np.ndarray
    neighbor_grads: np.ndarray  # (K, d, 3)
    center_grad: np.ndarray     # (d, 3)


def predict_forces(model: Model, env_grads: list[EnvGradients],
                   n_atoms: int) -> np.ndarray:
    """Forces F_k = -sum_env w . d(features_env)/d r_k for a linear model."""
    if model.kind != "linear":
        raise RegressionError("force prediction supports linear models only")
    forces = np.zeros((n_atoms, 3))
    w = model.weights
    for g in env_grads:
        forces[g.center] -= w @ g.center_grad
        contrib = np.einsum("d,kdx->kx", w, g.neighbor_grads)
        np.add.at(forces, g.neighbor_indices, -contrib)
    return forces


def gradient_rows(env_grads: list[EnvGradients], n_atoms: int, d: int) -> np.ndarray:
    """Stack d(structure features)/d(atom coordinates) into (3*n_atoms, d)."""
    g = np.zeros((n_atoms, 3, d))
    for e in env_grads:
        g[e.center] += e.center_grad.T
        for k, j in enumerate(e.neighbor_indices):
            g[j] += e.neighbor_grads[k].T
    return g.reshape(3 * n_atoms, d)


def joint_energy_force_fit(x_e: np.ndarray, y_e: np.ndarray,
                           grad_rows: np.ndarray, y_f: np.ndarray,
                           lam: float, force_weight: float = 1.0,
                           **meta) -> Model:
    """Ridge fit on stacked energy rows and (negated-gradient) force rows.

    Regularization is scaled by the energy row count so force_weight = 0
    reduces exactly to ridge_fit on the energies.
    """
    x_e = np.asarray(x_e, dtype=float)
    y_e = np.asarray(y_e, dtype=float).ravel()
    grad_rows = np.asarray(grad_rows, dtype=float)
    y_f = np.asarray(y_f, dtype=float).ravel()
    _check_finite(x_e, y_e, grad_rows, y_f)
    if lam <= 0:
        raise RegressionError("lam must be positive")
    n = len(y_e)
    intercept = float(y_e.mean())
    yc = y_e - intercept
    mean = x_e.mean(axis=0)
    xc = x_e - mean  # force rows are mean-free already (gradients of a shift)
    a = xc.T @ xc + force_weight**2 * (grad_rows.T @ grad_rows)
    a += lam * n * np.eye(x_e.shape[1])
    b = xc.T @ yc + force_weight**2 * (grad_rows.T @ (-y_f))
    w = _solve_spd(a, b)
    return Model(kind="linear", lam=lam, weights=w, intercept=intercept,
                 feature_mean=mean, **meta)


def cross_validate(x: np.ndarray, y: np.ndarray, lam: float, folds: int = 5,
                   seed: int = 0, zeta: int | None = None) -> dict:
    """Deterministic k-fold CV; returns RMSE/MAE per fold and aggregate."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n = len(y)
    if folds < 2 or folds > n:
        raise RegressionError("invalid fold count")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    rmses, maes = [], []
    for f in range(folds):
        te = perm[f::folds]
        tr = np.setdiff1d(perm, te)
        if zeta is None:
            m = ridge_fit(x[tr], y[tr], lam)
            pred = ridge_predict(m, x[te])
        else:
            m = krr_fit(x[tr], y[tr], zeta, lam)
            pred = krr_predict(m, x[te])
        err = pred - y[te]
        rmses.append(float(np.sqrt(np.mean(err**2))))
        maes.append(float(np.mean(np.abs(err))))
    return {
        "rmse_per_fold": rmses,
        "mae_per_fold": maes,
        "rmse": float(np.sqrt(np.mean(np.square(rmses)))),
        "mae": float(np.mean(maes)),
    }
