"""Data-driven contraction of the radial basis: covariance, PCA and PCovR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .density import DensityCoeffs


class ContractionError(Exception):
    pass


CHANNEL_MODES = ("per_species", "combined")
CENTER_MODES = ("agnostic", "per_center")


def _keys_for(coeff: DensityCoeffs, channel_mode: str, center_mode: str):
    center = coeff.center_species if center_mode == "per_center" else None
    if channel_mode == "per_species":
        return [(center, a) for a in coeff.species]
    return [(center, None)]


def _block_matrix(coeff: DensityCoeffs, key, l: int) -> np.ndarray:
    """Coefficient block for one (key, l): shape (d, 2l+1)."""
    _, a = key
    lm0 = coeff.lmax
    sl = coeff.data[:, :, l, lm0 - l:lm0 + l + 1]
    if a is None:
        return sl.reshape(-1, 2 * l + 1)
    return sl[coeff.species.index(a)]


@dataclass
class CovarianceSet:
    """Uncentered, rotationally invariant coefficient covariances.

    matrices[key] has shape (lmax+1, d, d); key = (center_species|None,
    neighbor_species|None).
    """

    channel_mode: str
    center_mode: str
    species: tuple[int, ...]
    lmax: int
    matrices: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)


def covariance(coeffs, channel_mode: str = "per_species",
               center_mode: str = "agnostic") -> CovarianceSet:
    """Accumulate C^(key,l)_nn' = (1/N) sum_i sum_m c conj(c') over a stream
    of DensityCoeffs (no centering)."""
    if channel_mode not in CHANNEL_MODES:
        raise ContractionError(f"unknown channel mode {channel_mode!r}")
    if center_mode not in CENTER_MODES:
        raise ContractionError(f"unknown center mode {center_mode!r}")
    acc: dict = {}
    counts: dict = {}
    species = None
    lmax = None
    n_seen = 0
    for c in coeffs:
        n_seen += 1
        if species is None:
            species, lmax = c.species, c.lmax
        elif c.species != species or c.lmax != lmax:
            raise ContractionError("mixed bases in covariance accumulation")
        for key in _keys_for(c, channel_mode, center_mode):
            if key not in acc:
                d = len(species) * c.n_channels if key[1] is None else c.n_channels
                acc[key] = np.zeros((lmax + 1, d, d), dtype=complex)
                counts[key] = 0
            counts[key] += 1
            for l in range(lmax + 1):
                b = _block_matrix(c, key, l)
                acc[key][l] += b @ b.conj().T
    if n_seen == 0:
        raise ContractionError("empty coefficient stream")
    matrices = {}
    for key, m in acc.items():
        m = m / counts[key]
        herm = 0.5 * (m + np.conj(np.swapaxes(m, -1, -2)))
        resid = np.max(np.abs(herm.imag))
        if resid > 1e-10 * max(1.0, np.max(np.abs(herm.real))):
            raise ContractionError(f"covariance imaginary residue {resid:.2e}")
        matrices[key] = herm.real
    return CovarianceSet(channel_mode=channel_mode, center_mode=center_mode,
                         species=species, lmax=lmax, matrices=matrices,
                         counts=counts)


def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    """Deterministic eigenvector signs: largest-|component| entry positive."""
    out = vecs.copy()
    for i in range(out.shape[0]):
        j = int(np.argmax(np.abs(out[i])))
        if out[i, j] < 0:
            out[i] = -out[i]
    return out


def _eig_descending(c: np.ndarray):
    evals, evecs = np.linalg.eigh(c)
    order = np.argsort(evals)[::-1]
    return evals[order], _sign_fix(evecs[:, order].T)


@dataclass
class ContractionMap:
    """Per-(key, l) eigenbasis of the coefficient covariance.

    blocks[key] maps l -> (components, eigenvalues); components rows are
    sorted by descending eigenvalue and sign-fixed.  Truncation to qmax
    happens at lookup time.
    """

    channel_mode: str
    center_mode: str
    species: tuple[int, ...]
    lmax: int
    qmax: int
    blocks: dict = field(default_factory=dict)

    def identifier(self) -> str:
        return f"{self.channel_mode}:{self.center_mode}:q{self.qmax}"

    def keys(self):
        return sorted(self.blocks.keys(), key=lambda k: (k[0] or 0, k[1] or 0))

    def eigenvalues(self, key, l: int) -> np.ndarray:
        return self.blocks[key][l][1]

    def components(self, key, l: int) -> np.ndarray:
        return self.blocks[key][l][0]

    def matrix_for(self, a: int, l: int, species_order=None,
                   center_species=None) -> np.ndarray:
        """Truncated (qmax x nmax) contraction matrix for neighbor species a.

        In combined mode this is the species-a column block of the joint
        (a, n) eigenvectors, so the contracted coefficients can be evaluated
        as a direct neighbor sum.
        """
        center = center_species if self.center_mode == "per_center" else None
        if self.center_mode == "per_center" and center is None:
            raise ContractionError("per-center map requires center_species")
        if self.channel_mode == "per_species":
            u, _ = self.blocks[(center, a)][l]
            return u[: self.qmax]
        u, _ = self.blocks[(center, None)][l]
        order = tuple(species_order) if species_order is not None else self.species
        nmax = u.shape[1] // len(order)
        ai = order.index(a)
        return u[: self.qmax, ai * nmax:(ai + 1) * nmax]

    def to_bytes(self) -> bytes:
        keys = self.keys()
        header = {
            "channel_mode": self.channel_mode,
            "center_mode": self.center_mode,
            "species": list(self.species),
            "lmax": self.lmax,
            "qmax": self.qmax,
            "keys": [list(k) for k in keys],
            "dims": [int(self.blocks[k][0][0].shape[1]) for k in keys],
            "eigenvalues": {
                str(i): [self.blocks[k][l][1].tolist() for l in range(self.lmax + 1)]
                for i, k in enumerate(keys)
            },
        }
        payload = b"".join(
            self.blocks[k][l][0].astype("<f8").tobytes()
            for k in keys for l in range(self.lmax + 1)
        )
        return json.dumps(header, sort_keys=True).encode() + b"\n" + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ContractionMap":
        head, _, payload = blob.partition(b"\n")
        h = json.loads(head.decode())
        lmax = int(h["lmax"])
        keys = [tuple(None if x is None else int(x) for x in k) for k in h["keys"]]
        blocks = {}
        ofs = 0
        data = np.frombuffer(payload, dtype="<f8")
        for i, k in enumerate(keys):
            d = int(h["dims"][i])
            per_l = {}
            for l in range(lmax + 1):
                n = len(h["eigenvalues"][str(i)][l])
                u = data[ofs:ofs + n * d].reshape(n, d).copy()
                ofs += n * d
                per_l[l] = (u, np.array(h["eigenvalues"][str(i)][l]))
            blocks[k] = per_l
        return cls(channel_mode=h["channel_mode"], center_mode=h["center_mode"],
                   species=tuple(h["species"]), lmax=lmax, qmax=int(h["qmax"]),
                   blocks=blocks)


def pca_contraction(cov: CovarianceSet, qmax: int) -> ContractionMap:
    """Eigendecompose each covariance block; keep all components, truncate at
    qmax on lookup."""
    if qmax < 1:
        raise ContractionError("qmax must be >= 1")
    blocks = {}
    for key, mats in cov.matrices.items():
        if qmax > mats.shape[-1]:
            raise ContractionError(
                f"qmax={qmax} exceeds block dimension {mats.shape[-1]}"
            )
        per_l = {}
        for l in range(cov.lmax + 1):
            evals, evecs = _eig_descending(mats[l])
            per_l[l] = (evecs, evals)
        blocks[key] = per_l
    return ContractionMap(channel_mode=cov.channel_mode,
                          center_mode=cov.center_mode, species=cov.species,
                          lmax=cov.lmax, qmax=qmax, blocks=blocks)


def pcovr_eigendecomposition(x: np.ndarray, y: np.ndarray, alpha: float,
                             ridge: float):
    """Eigenbasis of the PCovR-style mixed objective on the l=0 coefficients.

    C~ = alpha * C / tr_norm
       + (1 - alpha) * (C^1/2 w)(C^1/2 w)^T / var_norm
    with C = X^T X / N and w the ridge weights.  The whitened eigenvectors
    are mapped back through C^-1/2 and row-normalized, so alpha = 1 reduces
    to the PCA components while the leading alpha = 0 component is parallel
    to w and its coordinate X w is the regression prediction itself.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != len(x):
        raise ContractionError("target length does not match coefficient rows")
    if not 0.0 <= alpha <= 1.0:
        raise ContractionError("alpha must be in [0, 1]")
    if ridge <= 0:
        raise ContractionError("ridge must be positive")
    if alpha < 1.0 and np.allclose(y, y[0]):
        raise ContractionError("constant targets carry no regression signal")
    n = len(x)
    c = x.T @ x / n
    w = np.linalg.solve(n * c + ridge * n * np.eye(x.shape[1]), x.T @ y)
    yhat = x @ w
    dc, vc = np.linalg.eigh(c)
    keep = dc > max(dc.max(), 0.0) * 1e-14
    sq = np.sqrt(dc[keep])
    csqrt = (vc[:, keep] * sq) @ vc[:, keep].T
    icsqrt = (vc[:, keep] / sq) @ vc[:, keep].T
    var_norm = float(yhat @ yhat) / n
    cw = csqrt @ w
    ct = alpha * c / np.trace(c)
    ct = ct + (1.0 - alpha) * np.outer(cw, cw) / var_norm
    evals, u = _eig_descending(0.5 * (ct + ct.T))
    comps = u @ icsqrt.T  # rows: C^-1/2 applied to each whitened eigenvector
    norms = np.linalg.norm(comps, axis=1)
    comps /= np.maximum(norms, 1e-300)[:, None]
    return evals, _sign_fix(comps)


def pcovr_contraction(cov: CovarianceSet, x_l0: np.ndarray, y: np.ndarray,
                      alpha: float, ridge: float, qmax: int) -> ContractionMap:
    """PCA map with the l = 0 block replaced by the PCovR eigenbasis.

    Only the l = 0 channel shares the equivariant character of scalar
    targets, so supervision enters there alone.
    """
    base = pca_contraction(cov, qmax)
    evals, evecs = pcovr_eigendecomposition(x_l0, y, alpha, ridge)
    keys = base.keys()
    if len(keys) != 1:
        raise ContractionError(
            "PCovR supports a single covariance block (combined or "
            "single-species mode)"
        )
    key = keys[0]
    if evecs.shape[1] != base.blocks[key][0][0].shape[1]:
        raise ContractionError("l=0 coefficient matrix does not match covariance dimension")
    base.blocks[key][0] = (evecs, evals)
    return base


def explained_variance(cmap: ContractionMap, q: int):
    """Fraction of covariance trace retained by the top q components.

    Returns (per_block, overall) with per_block keyed by (key, l).
    """
    if q > cmap.qmax:
        raise ContractionError("q exceeds qmax of the contraction map")
    per_block = {}
    tot_kept = 0.0
    tot_all = 0.0
    for key in cmap.keys():
        for l in range(cmap.lmax + 1):
            lam = cmap.blocks[key][l][1]
            kept = float(np.sum(lam[:q]))
            allv = float(np.sum(lam))
            per_block[(key, l)] = kept / allv if allv > 0 else 1.0
            tot_kept += kept
            tot_all += allv
    overall = tot_kept / tot_all if tot_all > 0 else 1.0
    return per_block, overall


def retained_variance_curve(cmap: ContractionMap) -> np.ndarray:
    """Overall retained-variance fraction as a function of q = 1..dim."""
    dims = min(cmap.blocks[k][l][1].shape[0]
               for k in cmap.keys() for l in range(cmap.lmax + 1))
    tot = sum(float(np.sum(cmap.blocks[k][l][1]))
              for k in cmap.keys() for l in range(cmap.lmax + 1))
    out = np.empty(dims)
    for q in range(1, dims + 1):
        kept = sum(float(np.sum(cmap.blocks[k][l][1][:q]))
                   for k in cmap.keys() for l in range(cmap.lmax + 1))
        out[q - 1] = kept / tot
    return out


def optimal_basis_values(cmap: ContractionMap, family, r_grid: np.ndarray,
                         center_species=None) -> np.ndarray:
    """Sampled contracted radial functions sum_n U_qn R_n(x).

    Shape (n_species, qmax, lmax+1, len(r_grid)), following the basis
    species order.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    prim = family.values(r_grid)  # (nmax, G)
    species = family.spec.species or cmap.species
    out = np.empty((len(species), cmap.qmax, cmap.lmax + 1, len(r_grid)))
    for ai, a in enumerate(species):
        for l in range(cmap.lmax + 1):
            u = cmap.matrix_for(a, l, species_order=species,
                                center_species=center_species)
            out[ai, :, l, :] = u @ prim
    return out
