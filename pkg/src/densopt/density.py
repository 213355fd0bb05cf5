"""Spherical harmonics and per-environment density expansion coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .radial import RadialError, RadialTable, cutoff_fn, cutoff_fn_deriv
from .structures import Environment

LMAX_RECURRENCE = 30


class DensityError(Exception):
    pass


def _legendre_norm(lmax: int, cost: np.ndarray, sint: np.ndarray) -> np.ndarray:
    """Normalized associated Legendre Q_lm (Condon-Shortley phase) for m >= 0.

    Q_lm = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!) P_lm(cos t); shape (K, lmax+1, lmax+1)
    indexed [point, l, m].
    """
    k = len(cost)
    q = np.zeros((k, lmax + 1, lmax + 1))
    q[:, 0, 0] = np.sqrt(1.0 / (4.0 * np.pi))
    for m in range(1, lmax + 1):
        q[:, m, m] = -np.sqrt((2 * m + 1) / (2.0 * m)) * sint * q[:, m - 1, m - 1]
    for m in range(lmax):
        q[:, m + 1, m] = np.sqrt(2 * m + 3.0) * cost * q[:, m, m]
    for m in range(lmax + 1):
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            q[:, l, m] = a * (cost * q[:, l - 1, m] - b * q[:, l - 2, m])
    return q


@dataclass
class SphericalHarmonics:
    """Complex Y_lm values (and optionally unit-sphere gradients) at unit vectors.

    values[k, l, m + lmax]; gradients[k, l, m + lmax, xyz] holds the gradient
    of v -> Y_lm(v/|v|) evaluated at |v| = 1 (tangential to the sphere).
    """

    lmax: int
    values: np.ndarray
    gradients: np.ndarray | None = None


def spherical_harmonics(lmax: int, units: np.ndarray,
                        with_gradients: bool = False) -> SphericalHarmonics:
    """Complex spherical harmonics at unit vectors, shape (K, 3) or (3,)."""
    if lmax > LMAX_RECURRENCE:
        raise DensityError(f"lmax={lmax} beyond validated recurrence range ({LMAX_RECURRENCE})")
    u = np.atleast_2d(np.asarray(units, dtype=float))
    norms = np.linalg.norm(u, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-10):
        raise DensityError("input vectors must be unit length")
    k = len(u)
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    sint = np.hypot(x, y)
    cost = z
    with np.errstate(divide="ignore", invalid="ignore"):
        eiphi = (x + 1j * y) / sint
    eiphi = np.where(sint < 1e-300, 1.0 + 0.0j, eiphi)

    q = _legendre_norm(lmax, cost, sint)
    vals = np.zeros((k, lmax + 1, 2 * lmax + 1), dtype=complex)
    phase = np.ones(k, dtype=complex)
    for m in range(lmax + 1):
        for l in range(m, lmax + 1):
            vals[:, l, lmax + m] = q[:, l, m] * phase
            if m > 0:
                vals[:, l, lmax - m] = (-1) ** m * np.conj(vals[:, l, lmax + m])
        phase = phase * eiphi

    grads = None
    if with_gradients:
        grads = np.zeros((k, lmax + 1, 2 * lmax + 1, 3), dtype=complex)
        for l in range(1, lmax + 1):
            for m in range(-l, l + 1):
                c = 2 * l + 1.0
                gz = np.zeros(k, dtype=complex)
                gp = np.zeros(k, dtype=complex)  # (d/dx + i d/dy) of r^l Ylm
                gm = np.zeros(k, dtype=complex)  # (d/dx - i d/dy)
                if abs(m) <= l - 1:
                    gz = np.sqrt(c * (l * l - m * m) / (2 * l - 1.0)) * \
                        vals[:, l - 1, lmax + m]
                if abs(m + 1) <= l - 1:
                    gp = np.sqrt(c * (l - m) * (l - m - 1) / (2 * l - 1.0)) * \
                        vals[:, l - 1, lmax + m + 1]
                if abs(m - 1) <= l - 1:
                    gm = -np.sqrt(c * (l + m) * (l + m - 1) / (2 * l - 1.0)) * \
                        vals[:, l - 1, lmax + m - 1]
                gx = 0.5 * (gp + gm)
                gy = (gp - gm) / 2j
                # subtract the radial part of the solid-harmonic gradient
                lyu = l * vals[:, l, lmax + m, None] * u
                grads[:, l, lmax + m, 0] = gx - lyu[:, 0]
                grads[:, l, lmax + m, 1] = gy - lyu[:, 1]
                grads[:, l, lmax + m, 2] = gz - lyu[:, 2]
    return SphericalHarmonics(lmax=lmax, values=vals, gradients=grads)


@dataclass
class DensityCoeffs:
    """Expansion coefficients <a n l m || rho_i> of one environment.

    data[a, c, l, m + lmax] complex; the channel axis c indexes n (primitive)
    or q (contracted).
    """

    data: np.ndarray
    species: tuple[int, ...]
    lmax: int
    contracted: bool = False
    structure_id: int = 0
    center: int = 0
    center_species: int = 0

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    def l0_vector(self) -> np.ndarray:
        """Real (a, c) vector of the l = 0, m = 0 coefficients."""
        block = self.data[:, :, 0, self.lmax]
        return block.real.ravel()

    def norm_squared(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))


@dataclass
class CoeffGradients:
    """d<a c l m||rho_i> / d r_j for every neighbor j, plus the center term.

    neighbor_grads[j, a, c, l, m + lmax, xyz]; center_grad is minus the sum
    over neighbors (translation invariance).
    """

    neighbor_grads: np.ndarray
    center_grad: np.ndarray
    neighbor_indices: np.ndarray
    center: int
    structure_id: int


def _neighbor_weights(env: Environment, table: RadialTable):
    spec = table.spec
    w = cutoff_fn(env.dists, spec.rcut, spec.cutoff_width)
    dw = cutoff_fn_deriv(env.dists, spec.rcut, spec.cutoff_width)
    if spec.scaling is not None:
        u = spec.scaling.weight(env.dists)
        du = spec.scaling.weight_deriv(env.dists)
        w, dw = w * u, dw * u + w * du
    return w, dw


def _species_rows(env: Environment, table: RadialTable) -> np.ndarray:
    rows = np.empty(len(env), dtype=int)
    for j, z in enumerate(env.species):
        rows[j] = table.species_index(int(z))
    return rows


def density_coeffs(env: Environment, table: RadialTable) -> DensityCoeffs:
    """Per-environment density coefficients, Eq.-(4)-style neighbor sum."""
    spec = table.spec
    nspec, nchan, nl = len(spec.species), table.n_channels, spec.lmax + 1
    data = np.zeros((nspec, nchan, nl, 2 * spec.lmax + 1), dtype=complex)
    if len(env) == 0:
        return DensityCoeffs(data=data, species=spec.species, lmax=spec.lmax,
                             contracted=table.contracted,
                             structure_id=env.structure_id, center=env.center,
                             center_species=env.center_species)
    if np.any(env.dists > spec.rcut + 1e-12):
        raise DensityError("environment contains neighbors beyond the basis rcut")
    rows = _species_rows(env, table)
    w, _ = _neighbor_weights(env, table)
    tv, _ = table.evaluate(env.dists)  # (S, C, L+1, K)
    tsel = tv[rows, :, :, np.arange(len(env))]  # (K, C, L+1)
    ylm = spherical_harmonics(spec.lmax, env.vecs / env.dists[:, None]).values
    # sum_j w_j T_{cl}(r_j) conj(Y_lm(r^_j)), routed into the species row
    contrib = np.einsum("k,kcl,klm->kclm", w, tsel, np.conj(ylm))
    for j in range(len(env)):
        data[rows[j]] += contrib[j]
    return DensityCoeffs(data=data, species=spec.species, lmax=spec.lmax,
                         contracted=table.contracted,
                         structure_id=env.structure_id, center=env.center,
                         center_species=env.center_species)


def density_coeff_gradients(env: Environment, table: RadialTable) -> CoeffGradients:
    """Analytic gradients of density_coeffs with respect to atom positions."""
    spec = table.spec
    nspec, nchan, nl = len(spec.species), table.n_channels, spec.lmax + 1
    k = len(env)
    grads = np.zeros((k, nspec, nchan, nl, 2 * spec.lmax + 1, 3), dtype=complex)
    if k == 0:
        return CoeffGradients(neighbor_grads=grads,
                              center_grad=np.zeros(grads.shape[1:], dtype=complex),
                              neighbor_indices=env.indices.copy(),
                              center=env.center, structure_id=env.structure_id)
    rows = _species_rows(env, table)
    w, dw = _neighbor_weights(env, table)
    tv, td = table.evaluate(env.dists)
    sel = np.arange(k)
    tsel = tv[rows, :, :, sel]  # (K, C, L+1)
    dsel = td[rows, :, :, sel]
    units = env.vecs / env.dists[:, None]
    sh = spherical_harmonics(spec.lmax, units, with_gradients=True)
    ylm, gylm = sh.values, sh.gradients

    # radial part: d/dr[w T] along the bond direction
    radial = np.einsum("k,kcl,klm,kx->kclmx",
                       dw * np.ones(k), tsel, np.conj(ylm), units)
    radial += np.einsum("k,kcl,klm,kx->kclmx", w, dsel, np.conj(ylm), units)
    # angular part: w T conj(grad Y)/r
    angular = np.einsum("k,kcl,klmx->kclmx", w / env.dists, tsel, np.conj(gylm))
    total = radial + angular
    for j in range(k):
        grads[j, rows[j]] = total[j]
    center = -grads.sum(axis=0)
    return CoeffGradients(neighbor_grads=grads, center_grad=center,
                          neighbor_indices=env.indices.copy(),
                          center=env.center, structure_id=env.structure_id)
