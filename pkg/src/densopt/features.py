"""Per-environment invariant feature vectors, gradients, and serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .correlations import powerspectrum, powerspectrum_gradients
from .density import CoeffGradients, DensityCoeffs


class FeatureError(Exception):
    pass


def radial_spectrum(c: DensityCoeffs):
    """Body-order-1 invariants: the real l = 0 coefficients per (a, n)."""
    vec = c.l0_vector()
    labels = [(a, n) for a in c.species for n in range(c.n_channels)]
    return vec, labels


def radial_spectrum_gradients(c: DensityCoeffs, cgrad: CoeffGradients):
    """Gradients of the radial spectrum: (K, d, 3) neighbor and (d, 3) center."""
    lm0 = c.lmax
    g = cgrad.neighbor_grads[:, :, :, 0, lm0, :]
    k = g.shape[0]
    d = c.data.shape[0] * c.data.shape[1]
    g = g.reshape(k, d, 3).real
    return g, -g.sum(axis=0)


@dataclass
class FeatureMatrix:
    """Environments x features matrix with label and provenance metadata."""

    matrix: np.ndarray
    labels: list
    order: int
    basis_id: str = ""
    structure_ids: np.ndarray | None = None

    def to_bytes(self) -> bytes:
        header = {
            "shape": list(self.matrix.shape),
            "labels": [list(l) if isinstance(l, tuple) else l for l in self.labels],
            "order": self.order,
            "basis_id": self.basis_id,
            "structure_ids": (self.structure_ids.tolist()
                              if self.structure_ids is not None else None),
        }
        payload = np.ascontiguousarray(self.matrix, dtype="<f8").tobytes()
        return json.dumps(header, sort_keys=True).encode() + b"\n" + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureMatrix":
        head, _, payload = blob.partition(b"\n")
        h = json.loads(head.decode())
        shape = tuple(h["shape"])
        mat = np.frombuffer(payload, dtype="<f8", count=int(np.prod(shape)))
        sids = h.get("structure_ids")
        return cls(
            matrix=mat.reshape(shape).copy(),
            labels=[tuple(l) if isinstance(l, list) else l for l in h["labels"]],
            order=int(h["order"]),
            basis_id=h.get("basis_id", ""),
            structure_ids=np.array(sids, dtype=int) if sids is not None else None,
        )


def stack_features(per_env, labels, order: int, basis_id: str = "",
                   structure_ids=None) -> FeatureMatrix:
    mat = np.vstack([np.atleast_1d(v) for v in per_env]) if per_env else np.zeros((0, len(labels)))
    return FeatureMatrix(
        matrix=mat, labels=list(labels), order=order, basis_id=basis_id,
        structure_ids=np.asarray(structure_ids, dtype=int) if structure_ids is not None else None,
    )


def powerspectrum_matrix(coeffs: list[DensityCoeffs], basis_id: str = "") -> FeatureMatrix:
    """Powerspectrum features for a list of environments."""
    if not coeffs:
        raise FeatureError("no environments")
    rows = []
    labels = None
    for c in coeffs:
        vec, lab = powerspectrum(c)
        if labels is None:
            labels = lab
        rows.append(vec)
    sids = np.array([c.structure_id for c in coeffs], dtype=int)
    return stack_features(rows, labels, order=2, basis_id=basis_id,
                          structure_ids=sids)


def radial_spectrum_matrix(coeffs: list[DensityCoeffs], basis_id: str = "") -> FeatureMatrix:
    if not coeffs:
        raise FeatureError("no environments")
    rows = []
    labels = None
    for c in coeffs:
        vec, lab = radial_spectrum(c)
        if labels is None:
            labels = lab
        rows.append(vec)
    sids = np.array([c.structure_id for c in coeffs], dtype=int)
    return stack_features(rows, labels, order=1, basis_id=basis_id,
                          structure_ids=sids)


__all__ = [
    "FeatureError", "FeatureMatrix", "radial_spectrum",
    "radial_spectrum_gradients", "powerspectrum", "powerspectrum_gradients",
    "powerspectrum_matrix", "radial_spectrum_matrix", "stack_features",
]
