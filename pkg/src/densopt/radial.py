"""Primitive radial bases, radial integrals by quadrature, and spline tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import gammaln, ive


class RadialError(Exception):
    """Raised for invalid radial-basis parameters or quadrature failure."""


@dataclass(frozen=True)
class RadialScaling:
    """Monotone weight u(r) = c / (c + (r/r0)^m) applied per neighbor."""

    c: float
    r0: float
    m: float

    def __post_init__(self):
        if self.r0 <= 0:
            raise RadialError("radial scaling requires r0 > 0")
        if self.m < 0:
            raise RadialError("radial scaling requires m >= 0")

    def weight(self, r):
        r = np.asarray(r, dtype=float)
        return self.c / (self.c + (r / self.r0) ** self.m)

    def weight_deriv(self, r):
        r = np.asarray(r, dtype=float)
        if self.m == 0:
            return np.zeros_like(r)
        t = (r / self.r0) ** self.m
        denom = (self.c + t) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            dt = self.m * (r / self.r0) ** (self.m - 1) / self.r0
        dt = np.where(r == 0, (self.m == 1) / self.r0, dt)
        return -self.c * dt / denom


@dataclass(frozen=True)
class BasisSpec:
    """Parameters of a primitive radial basis and the density it expands."""

    kind: str  # "gto" or "dvr"
    nmax: int
    lmax: int
    rcut: float
    sigma_a: float = 0.5
    cutoff_width: float = 0.5
    species: tuple[int, ...] = ()
    scaling: RadialScaling | None = None

    def __post_init__(self):
        if self.kind not in ("gto", "dvr"):
            raise RadialError(f"unknown basis kind {self.kind!r}")
        if self.nmax < 1:
            raise RadialError("nmax must be >= 1")
        if self.lmax < 0:
            raise RadialError("lmax must be >= 0")
        if not 0 < self.cutoff_width < self.rcut:
            raise RadialError("need 0 < cutoff_width < rcut")
        if self.sigma_a < 0:
            raise RadialError("sigma_a must be >= 0")
        object.__setattr__(self, "species", tuple(sorted(int(z) for z in self.species)))

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "nmax": self.nmax,
            "lmax": self.lmax,
            "rcut": self.rcut,
            "sigma_a": self.sigma_a,
            "cutoff_width": self.cutoff_width,
            "species": list(self.species),
        }
        if self.scaling is not None:
            d["scaling"] = {"c": self.scaling.c, "r0": self.scaling.r0, "m": self.scaling.m}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        scaling = None
        if d.get("scaling"):
            scaling = RadialScaling(**d["scaling"])
        return cls(
            kind=d["kind"], nmax=int(d["nmax"]), lmax=int(d["lmax"]),
            rcut=float(d["rcut"]), sigma_a=float(d["sigma_a"]),
            cutoff_width=float(d["cutoff_width"]),
            species=tuple(d.get("species", ())), scaling=scaling,
        )


def cutoff_fn(r, rcut: float, width: float):
    """C1 shifted-cosine cutoff: 1 inside rcut-width, 0 beyond rcut."""
    r = np.asarray(r, dtype=float)
    t = np.clip((r - (rcut - width)) / width, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def cutoff_fn_deriv(r, rcut: float, width: float):
    r = np.asarray(r, dtype=float)
    t = (r - (rcut - width)) / width
    inside = (t > 0.0) & (t < 1.0)
    out = np.zeros_like(r)
    out[inside] = -0.5 * np.pi / width * np.sin(np.pi * t[inside])
    return out


def _lowdin(overlap: np.ndarray) -> np.ndarray:
    """S^(-1/2) of a symmetric positive-definite overlap matrix."""
    evals, evecs = np.linalg.eigh(overlap)
    if evals[0] <= 0 or evals[-1] / evals[0] > 1e12:
        raise RadialError(
            "primitive overlap matrix is numerically singular "
            f"(condition {evals[-1] / max(evals[0], 1e-300):.2e}); reduce nmax"
        )
    return (evecs / np.sqrt(evals)) @ evecs.T


class RadialFamily:
    """Orthonormal radial family R_n(x) = sum_k W_nk prim_k(x).

    Orthonormal under the weight x^2 on [0, inf); the primitive functions are
    l-independent.
    """

    def __init__(self, spec: BasisSpec):
        self.spec = spec
        n = spec.nmax
        if spec.kind == "gto":
            k = np.arange(n)
            self._sigmas = spec.rcut * np.maximum(np.sqrt(k), 1.0) / n
            self._powers = k.astype(float)
            # primitive normalization: <k|k> = 1 under x^2 weight
            a_kk = 1.0 / self._sigmas**2
            self._norms = 1.0 / np.sqrt(
                0.5 * np.exp(gammaln(k + 1.5)) * a_kk ** (-(k + 1.5))
            )
            overlap = self._gto_overlap()
        else:
            spacing = spec.rcut / (n + 1)
            self._centers = spacing * (np.arange(n) + 1.0)
            self._width = spacing
            raw = self._dvr_raw(self._quad_x())
            w = self._quad_w()
            norms = np.sqrt(np.einsum("q,nq,nq->n", w, raw, raw))
            self._norms = 1.0 / norms
            prim = raw * self._norms[:, None]
            overlap = np.einsum("q,nq,mq->nm", w, prim, prim)
        self.weights = _lowdin(overlap)

    # dense Gauss-Legendre rule used for DVR overlaps and orthonormality checks
    def _quad_rule(self):
        upper = self.spec.rcut * 2.5 + 8.0 * max(self.spec.sigma_a, 0.5)
        x, w = leggauss(800)
        x = 0.5 * upper * (x + 1.0)
        w = 0.5 * upper * w
        return x, w * x**2

    def _quad_x(self):
        return self._quad_rule()[0]

    def _quad_w(self):
        return self._quad_rule()[1]

    def _gto_overlap(self) -> np.ndarray:
        k = self._powers
        a = 0.5 * (1.0 / self._sigmas**2)
        ksum = k[:, None] + k[None, :]
        asum = a[:, None] + a[None, :]
        s = 0.5 * np.exp(gammaln((ksum + 3.0) / 2.0)) * asum ** (-(ksum + 3.0) / 2.0)
        return s * self._norms[:, None] * self._norms[None, :]

    def _gto_raw(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        # x^k with k=0 defined as 1 at x=0
        powed = np.where(
            (x[None, :] == 0.0) & (self._powers[:, None] == 0.0),
            1.0,
            x[None, :] ** self._powers[:, None],
        )
        return powed * np.exp(-(x[None, :] ** 2) / (2.0 * self._sigmas[:, None] ** 2))

    def _gto_raw_deriv(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        raw = self._gto_raw(x)
        k = self._powers[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            term = k / x[None, :]
        term = np.where(x[None, :] == 0.0, 0.0, term)
        d = raw * (term - x[None, :] / self._sigmas[:, None] ** 2)
        # the k>=1 monomial derivative at x=0: only k=1 contributes
        at0 = x == 0.0
        if np.any(at0):
            for n, kk in enumerate(self._powers):
                if kk == 1.0:
                    d[n, at0] = 1.0
        return d

    def _dvr_raw(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.exp(
            -((x[None, :] - self._centers[:, None]) ** 2) / (2.0 * self._width**2)
        )

    def _dvr_raw_deriv(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self._dvr_raw(x) * (
            -(x[None, :] - self._centers[:, None]) / self._width**2
        )

    def _raw(self, x):
        if self.spec.kind == "gto":
            return self._gto_raw(x) * self._norms[:, None]
        return self._dvr_raw(x) * self._norms[:, None]

    def _raw_deriv(self, x):
        if self.spec.kind == "gto":
            return self._gto_raw_deriv(x) * self._norms[:, None]
        return self._dvr_raw_deriv(x) * self._norms[:, None]

    def values(self, x) -> np.ndarray:
        """R_n(x) for all n; shape (nmax, len(x))."""
        return self.weights @ self._raw(x)

    def derivatives(self, x) -> np.ndarray:
        """dR_n/dx for all n; shape (nmax, len(x))."""
        return self.weights @ self._raw_deriv(x)

    def overlap_check(self) -> np.ndarray:
        """Numerical overlap of the orthonormalized family (should be I)."""
        x, w = self._quad_rule()
        v = self.values(x)
        return np.einsum("q,nq,mq->nm", w, v, v)


def primitive_functions(spec: BasisSpec) -> RadialFamily:
    """Construct the orthonormal primitive radial family for `spec`."""
    return RadialFamily(spec)


def _scaled_bessel_i(lmax: int, z: np.ndarray) -> np.ndarray:
    """Exponentially scaled modified spherical Bessel e^(-z) i_l(z), l=0..lmax.

    Returns shape (lmax+1, len(z)); z >= 0.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.empty((lmax + 1, len(z)))
    small = z < 1e-8
    zs = np.where(small, 1.0, z)
    for l in range(lmax + 1):
        out[l] = np.sqrt(np.pi / (2.0 * zs)) * ive(l + 0.5, zs)
    if np.any(small):
        # series limit: e^(-z) z^l / (2l+1)!!
        df = 1.0
        for l in range(lmax + 1):
            out[l, small] = np.exp(-z[small]) * z[small] ** l / df
            df *= 2 * l + 3
    return out


def _integral_batch(family: RadialFamily, sigma: float, l: int, r: np.ndarray,
                    derivative: bool, tol: float = 1e-9, max_doublings: int = 9):
    """Radial integral (or its d/dr) for all n at each r, by panelled
    Gauss-Legendre with panel doubling until relative tolerance."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    upper = family.spec.rcut * 1.5 + 8.0 * sigma
    base_x, base_w = leggauss(16)

    prev = None
    panels = 8
    for _ in range(max_doublings):
        edges = np.linspace(0.0, upper, panels + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        x = (mid[:, None] + half[:, None] * base_x[None, :]).ravel()
        w = (half[:, None] * base_w[None, :]).ravel()

        Rn = family.values(x)  # (nmax, nq)
        z = np.outer(r, x) / sigma**2  # (nr, nq)
        gauss = np.exp(-((x[None, :] - r[:, None]) ** 2) / (2.0 * sigma**2))
        need = l + 1 if derivative else l
        bess = _scaled_bessel_i(need + 1, z.ravel()).reshape(need + 2, *z.shape)
        if derivative:
            il = bess[l]
            dil = (l * bess[l - 1] if l > 0 else 0.0)
            dil = (dil + (l + 1) * bess[l + 1]) / (2 * l + 1) - il
            kernel = gauss * (
                (x[None, :] - r[:, None]) / sigma**2 * il + x[None, :] / sigma**2 * dil
            )
        else:
            kernel = gauss * bess[l]
        integ = 4.0 * np.pi * np.einsum("q,nq,rq->nr", w * x**2, Rn, kernel)

        if prev is not None:
            scale = max(np.max(np.abs(integ)), 1e-30)
            if np.max(np.abs(integ - prev)) <= tol * scale:
                return integ
        prev = integ
        panels *= 2
    raise RadialError(
        f"radial integral quadrature did not converge (l={l}, sigma={sigma})"
    )


def radial_integral(spec: BasisSpec, family: RadialFamily, n: int, l: int, r: float) -> float:
    """Density-smearing radial integral <nl||r;g> for a single channel."""
    if spec.sigma_a <= 0:
        raise RadialError("radial_integral requires sigma_a > 0; use radial_integral_delta")
    if not 0 <= r <= spec.rcut:
        raise RadialError(f"r={r} outside [0, {spec.rcut}]")
    if not 0 <= n < spec.nmax:
        raise RadialError(f"n={n} outside basis")
    if not 0 <= l <= spec.lmax:
        raise RadialError(f"l={l} outside basis")
    return float(_integral_batch(family, spec.sigma_a, l, np.array([r]), False)[n, 0])


def radial_integral_delta(spec: BasisSpec, family: RadialFamily, n: int, l: int, r: float) -> float:
    """sigma_a = 0 limit: the basis function value R_n(r) itself."""
    if r > spec.rcut:
        raise RadialError(f"r={r} beyond rcut={spec.rcut}")
    return float(family.values(np.array([r]))[n, 0])


@dataclass
class RadialTable:
    """Splined radial integrals with derivatives (cubic Hermite data).

    values/derivs have shape (n_species, n_channels, lmax+1, n_grid); the
    channel axis indexes n for a primitive table or q for a contracted one.
    """

    spec: BasisSpec
    grid: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    contracted: bool = False
    contraction_id: str = ""

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def species_index(self, z: int) -> int:
        try:
            return self.spec.species.index(z)
        except ValueError:
            raise RadialError(
                f"species {z} not in basis species set {self.spec.species}"
            ) from None

    def evaluate(self, r) -> tuple[np.ndarray, np.ndarray]:
        """Cubic Hermite value and d/dr at r; shapes (S, C, lmax+1, len(r))."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if np.any(r < 0) or np.any(r > self.spec.rcut + 1e-12):
            raise RadialError("r outside [0, rcut]; filter by cutoff first")
        g = self.grid
        h = g[1] - g[0]
        idx = np.clip(((r - g[0]) / h).astype(int), 0, len(g) - 2)
        t = (r - g[idx]) / h
        h00 = 2 * t**3 - 3 * t**2 + 1
        h10 = t**3 - 2 * t**2 + t
        h01 = -2 * t**3 + 3 * t**2
        h11 = t**3 - t**2
        d00 = (6 * t**2 - 6 * t) / h
        d10 = 3 * t**2 - 4 * t + 1
        d01 = (-6 * t**2 + 6 * t) / h
        d11 = 3 * t**2 - 2 * t
        f0 = self.values[..., idx]
        f1 = self.values[..., idx + 1]
        m0 = self.derivs[..., idx]
        m1 = self.derivs[..., idx + 1]
        val = h00 * f0 + h * h10 * m0 + h01 * f1 + h * h11 * m1
        der = d00 * f0 + d10 * m0 + d01 * f1 + d11 * m1
        return val, der

    def to_bytes(self) -> bytes:
        header = {
            "spec": self.spec.to_dict(),
            "grid": {"n": len(self.grid), "rmax": float(self.grid[-1])},
            "shape": list(self.values.shape),
            "contracted": self.contracted,
            "contraction_id": self.contraction_id,
        }
        payload = np.concatenate(
            [self.values.ravel(), self.derivs.ravel()]
        ).astype("<f8").tobytes()
        return json.dumps(header, sort_keys=True).encode() + b"\n" + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RadialTable":
        head, _, payload = blob.partition(b"\n")
        header = json.loads(head.decode())
        shape = tuple(header["shape"])
        n = int(np.prod(shape))
        data = np.frombuffer(payload, dtype="<f8", count=2 * n)
        grid = np.linspace(0.0, header["grid"]["rmax"], header["grid"]["n"])
        return cls(
            spec=BasisSpec.from_dict(header["spec"]),
            grid=grid,
            values=data[:n].reshape(shape).copy(),
            derivs=data[n:].reshape(shape).copy(),
            contracted=bool(header["contracted"]),
            contraction_id=header.get("contraction_id", ""),
        )


def _primitive_grid_data(spec: BasisSpec, family: RadialFamily, grid: np.ndarray):
    """Primitive integrals and d/dr on the grid; shapes (nmax, lmax+1, G)."""
    nmax, lmax = spec.nmax, spec.lmax
    vals = np.empty((nmax, lmax + 1, len(grid)))
    ders = np.empty_like(vals)
    if spec.sigma_a == 0.0:
        v = family.values(grid)
        d = family.derivatives(grid)
        for l in range(lmax + 1):
            vals[:, l, :] = v
            ders[:, l, :] = d
    else:
        for l in range(lmax + 1):
            vals[:, l, :] = _integral_batch(family, spec.sigma_a, l, grid, False)
            ders[:, l, :] = _integral_batch(family, spec.sigma_a, l, grid, True)
    return vals, ders


def build_table(spec: BasisSpec, contraction=None, grid_points: int = 600,
                center_species: int | None = None) -> RadialTable:
    """Spline table of primitive or contracted radial integrals.

    With a ContractionMap the rows of U are applied across the n (or (a, n))
    index of the primitive integrals, per species and angular channel.  The
    cutoff function is not folded in; it is applied per neighbor downstream.
    """
    if grid_points < 32:
        raise RadialError("grid_points must be >= 32")
    if not spec.species:
        raise RadialError("basis species set is empty")
    family = primitive_functions(spec)
    grid = np.linspace(0.0, spec.rcut, grid_points)
    pv, pd = _primitive_grid_data(spec, family, grid)
    nspec = len(spec.species)

    if contraction is None:
        values = np.broadcast_to(pv, (nspec, *pv.shape)).copy()
        derivs = np.broadcast_to(pd, (nspec, *pd.shape)).copy()
        return RadialTable(spec=spec, grid=grid, values=values, derivs=derivs)

    qmax = contraction.qmax
    values = np.empty((nspec, qmax, spec.lmax + 1, grid_points))
    derivs = np.empty_like(values)
    for ai, a in enumerate(spec.species):
        for l in range(spec.lmax + 1):
            u = contraction.matrix_for(a, l, species_order=spec.species,
                                       center_species=center_species)
            values[ai, :, l, :] = u @ pv[:, l, :]
            derivs[ai, :, l, :] = u @ pd[:, l, :]
    return RadialTable(
        spec=spec, grid=grid, values=values, derivs=derivs,
        contracted=True, contraction_id=contraction.identifier(),
    )
