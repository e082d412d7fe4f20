"""Surface-wave velocities on a rotated piezoelectric half-space.

Partial-wave (Stroh) formulation. In the device frame x1 is the propagation
direction and x3 the outward surface normal; the crystal fills x3 < 0. Fields
vary as exp(i k (x1 + beta x3 - v t)) with generalised displacement
U = (u1, u2, u3, potential). For a trial velocity the eight decay exponents
beta are the eigenvalues of the Stroh matrix; the four with Im(beta) < 0
decay into the crystal.

With A and B the displacement and traction halves of the selected
eigenvectors, Z = i B A^-1 is the (Hermitian) surface impedance. The
electrical degree of freedom is eliminated according to the surface
condition, leaving a 3x3 Hermitian matrix whose smallest eigenvalue decreases
monotonically with v and crosses zero at the surface-wave velocity. The root
is bracketed between half the slowest bulk velocity and the limiting
velocity, then refined by Illinois-modified regula falsi.

Electrical models for the free surface:

``"open"``
    normal electric displacement vanishes at the surface (no field outside);
``"vacuum"``
    potential and normal displacement match a decaying Laplace solution in
    vacuum above the surface.

The shorted surface holds the potential at zero. No frequency enters: the
half-space problem is scale invariant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .materials import VOIGT_INDEX, MaterialConstants, Orientation, euler_matrices, rotate_voigt_batch
from .units import EPS0

__all__ = [
    "Surface",
    "Polarization",
    "SurfaceWaveSolution",
    "NoSurfaceWave",
    "DegenerateRoots",
    "BatchSolution",
    "saw_velocity",
    "coupling_k2",
    "classify_polarization",
    "solve_directions",
    "bulk_velocities",
    "surface_impedance",
]

#: amplitude ratio separating a dominant polarisation from a mixed one
POLARIZATION_RATIO = 2.0
DEFAULT_TOL = 1e-7  # m/s
_SUPERSONIC_IMAG = 1e-7
_DEGENERATE_HADAMARD = 1e-10

STATUS_OK = 0
STATUS_NO_SAW = 1
STATUS_DEGENERATE = 2


class Surface(str, enum.Enum):
    FREE = "free"
    SHORTED = "shorted"


class Polarization(str, enum.Enum):
    RAYLEIGH = "R"
    SHEAR_HORIZONTAL = "SH"
    OTHER = "other"


class NoSurfaceWave(RuntimeError):
    """No boundary-determinant root exists below the limiting bulk velocity."""


class DegenerateRoots(RuntimeError):
    """Partial-wave branches coalesce and the decaying subspace is ill defined."""


@dataclass(frozen=True)
class SurfaceWaveSolution:
    orientation: Orientation
    v_free: Optional[float] = None
    v_shorted: Optional[float] = None
    k2: Optional[float] = None
    polarization: Optional[Polarization] = None
    u_sagittal: Optional[float] = None
    u_transverse: Optional[float] = None
    v_bulk: Optional[float] = None
    electrical: str = "open"
    diagnostics: dict = field(default_factory=dict)

    @property
    def k2_percent(self):
        return None if self.k2 is None else 100.0 * self.k2


@dataclass
class BatchSolution:
    """Per-direction arrays from :func:`solve_directions`.

    ``status`` is 0 for a converged surface wave, 1 where no root exists
    below the limiting velocity and 2 where branch degeneracy persisted.
    ``u`` holds the normalised surface displacement (device frame).
    """

    v: np.ndarray
    status: np.ndarray
    u: np.ndarray
    v_bulk: np.ndarray
    perturbed: np.ndarray


def classify_polarization(u, ratio: float = POLARIZATION_RATIO):
    """Label a surface displacement (u1, u2, u3) as R, SH or other.

    Returns ``(label, |u_sagittal|, |u_transverse|)``. Sagittal means the
    propagation/normal plane (components 1 and 3).
    """
    u = np.asarray(u)
    sag = float(np.sqrt(abs(u[0]) ** 2 + abs(u[2]) ** 2))
    tr = float(abs(u[1]))
    if sag >= ratio * tr:
        label = Polarization.RAYLEIGH
    elif tr >= ratio * sag:
        label = Polarization.SHEAR_HORIZONTAL
    else:
        label = Polarization.OTHER
    return label, sag, tr


# --------------------------------------------------------------------------- kernels


class _Problem:
    """Scaled Stroh blocks for a stack of rotated material frames."""

    def __init__(self, C, E, eps, density):
        n = C.shape[0]
        self.c0 = c0 = float(np.mean(np.abs(np.diagonal(C, axis1=-2, axis2=-1))))
        eref = float(np.mean(np.trace(eps, axis1=-2, axis2=-1))) / 3.0
        self.p = p = np.sqrt(c0 / eref)
        self.rho = density / c0
        self.eps0 = p * p * EPS0 / c0
        K = {}
        for j, l in ((0, 0), (0, 2), (2, 2)):
            M = np.empty((n, 4, 4))
            M[:, :3, :3] = C[:, VOIGT_INDEX[:, j][:, None], VOIGT_INDEX[:, l][None, :]] / c0
            M[:, :3, 3] = E[:, l, VOIGT_INDEX[:, j]] * p / c0
            M[:, 3, :3] = E[:, j, VOIGT_INDEX[:, l]] * p / c0
            M[:, 3, 3] = -eps[:, j, l] * p * p / c0
            K[j, l] = M
        K11, K13, K33 = K[0, 0], K[0, 2], K[2, 2]
        K31 = np.swapaxes(K13, -1, -2)
        Ki = np.linalg.inv(K33)
        self.N11 = -Ki @ K31
        self.N12 = Ki
        self.N21_static = K13 @ Ki @ K31 - K11
        self.N22 = -K13 @ Ki
        self.n = n
        # slowest piezoelectrically stiffened bulk wave along x1
        G = K11[:, :3, :3] + K11[:, :3, 3, None] * K11[:, None, 3, :3] / (-K11[:, 3, 3])[:, None, None]
        self.v_bulk = np.sqrt(np.linalg.eigvalsh(G)[:, 0] / self.rho)

    def stroh(self, v, idx):
        n = len(idx)
        N = np.empty((n, 8, 8))
        N[:, :4, :4] = self.N11[idx]
        N[:, :4, 4:] = self.N12[idx]
        N[:, 4:, :4] = self.N21_static[idx]
        d = self.rho * v * v
        for i in range(3):
            N[:, 4 + i, i] += d
        N[:, 4:, 4:] = self.N22[idx]
        return N

    def impedance(self, v, idx):
        """Hermitian impedance Z (n,4,4), supersonic flags and Hadamard ratios."""
        w, V = np.linalg.eig(self.stroh(v, idx))
        order = np.argsort(w.imag, axis=-1)[:, :4]
        sel_w = np.take_along_axis(w, order, axis=-1)
        vec = np.take_along_axis(V, order[:, None, :], axis=-1)
        A, B = vec[:, :4, :], vec[:, 4:, :]
        supersonic = sel_w.imag[:, 3] > -_SUPERSONIC_IMAG
        colnorm = np.prod(np.linalg.norm(A, axis=1), axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            hadamard = np.abs(np.linalg.det(A)) / colnorm
        bad = ~(hadamard > _DEGENERATE_HADAMARD)
        Ys = np.linalg.solve(np.swapaxes(A[~bad], -1, -2), np.swapaxes(B[~bad], -1, -2))
        Z = np.full((len(idx), 4, 4), np.nan, dtype=complex)
        Z[~bad] = 1j * np.swapaxes(Ys, -1, -2)
        Z = 0.5 * (Z + np.conj(np.swapaxes(Z, -1, -2)))
        return Z, supersonic, hadamard

    def reduced(self, Z, surface, electrical):
        if surface == Surface.SHORTED:
            return Z[:, :3, :3]
        zee = Z[:, 3, 3].real
        if electrical == "vacuum":
            zee = zee - self.eps0
        elif electrical != "open":
            raise ValueError(f"unknown electrical model {electrical!r}")
        return Z[:, :3, :3] - Z[:, :3, 3, None] * Z[:, None, 3, :3] / zee[:, None, None]

    def evaluate(self, v, idx, surface, electrical):
        Z, supersonic, hadamard = self.impedance(v, idx)
        degenerate = ~(hadamard > _DEGENERATE_HADAMARD)
        R = self.reduced(Z, surface, electrical)
        lam = np.full(len(idx), np.nan)
        ok = ~degenerate
        if ok.any():
            lam[ok] = np.linalg.eigvalsh(R[ok])[:, 0]
        return lam, supersonic, degenerate, R


def _problem_for(mat: MaterialConstants, angles) -> _Problem:
    angles = np.atleast_2d(np.asarray(angles, float))
    a = euler_matrices(angles[:, 0], angles[:, 1], angles[:, 2])
    C, E, eps = rotate_voigt_batch(mat, a)
    return _Problem(C, E, eps, mat.density)


def surface_impedance(mat: MaterialConstants, o: Orientation, v: float) -> np.ndarray:
    """Unscaled 4x4 surface impedance i B A^-1 at velocity ``v`` (m/s).

    Relates surface traction and normal electric displacement to
    displacement and potential: t = k Z U. Mainly for diagnostics.
    """
    prob = _problem_for(mat, [o.as_tuple()])
    Z, _, _ = prob.impedance(np.array([float(v)]), np.array([0]))
    S = np.diag([1.0, 1.0, 1.0, 1.0 / prob.p])
    return prob.c0 * (S @ Z[0] @ S)


def bulk_velocities(mat: MaterialConstants, o: Orientation) -> np.ndarray:
    """Piezoelectrically stiffened bulk velocities along the propagation axis, ascending."""
    a = euler_matrices(o.psi, o.phi, o.theta)
    C, E, eps = rotate_voigt_batch(mat, a[None])
    G = C[0][np.ix_(VOIGT_INDEX[:, 0], VOIGT_INDEX[:, 0])]
    g = E[0][0, VOIGT_INDEX[:, 0]]
    G = G + np.outer(g, g) / eps[0][0, 0]
    return np.sqrt(np.linalg.eigvalsh(G) / mat.density)


def _solve(prob: _Problem, surface, electrical, tol, maxit=200):
    n = prob.n
    vb = prob.v_bulk
    lo = 0.5 * vb
    hi = vb * (1.0 - 1e-10)
    lam_lo = np.full(n, np.nan)
    lam_hi = np.full(n, np.nan)
    hi_root = np.zeros(n, bool)
    degenerate = np.zeros(n, bool)
    perturbed = np.zeros(n, bool)
    side = np.zeros(n, np.int8)
    allidx = np.arange(n)

    def evaluate(v, idx):
        lam, sup, deg, _ = prob.evaluate(v, idx, surface, electrical)
        if deg.any():
            # coalescing branches: nudge the trial velocity once and retry
            j = np.flatnonzero(deg)
            v2 = v[j] + 1e-3
            lam2, sup2, deg2, _ = prob.evaluate(v2, idx[j], surface, electrical)
            lam[j], sup[j] = lam2, sup2
            perturbed[idx[j]] = True
            degenerate[idx[j[deg2]]] |= True
            v = v.copy()
            v[j] = v2
        return lam, sup, v

    # lower bracket must lie below the root
    idx = allidx
    for _ in range(6):
        lam, sup, lo[idx] = evaluate(lo[idx], idx)
        lam_lo[idx] = lam
        bad = ~(lam > 0) | sup
        if not bad.any():
            break
        idx = idx[bad]
        lo[idx] *= 0.5

    for _ in range(maxit):
        active = np.flatnonzero(((hi - lo) > tol) & ~degenerate)
        if active.size == 0:
            break
        a_lo, a_hi = lo[active], hi[active]
        m = 0.5 * (a_lo + a_hi)
        rf = hi_root[active]
        if rf.any():
            l0, l1 = lam_lo[active[rf]], lam_hi[active[rf]]
            x = a_hi[rf] - l1 * (a_hi[rf] - a_lo[rf]) / (l1 - l0)
            w = a_hi[rf] - a_lo[rf]
            m[rf] = np.clip(x, a_lo[rf] + 1e-3 * w, a_hi[rf] - 1e-3 * w)
        lam, sup, m = evaluate(m, active)
        up = ~sup & (lam > 0)
        down_root = ~sup & ~(lam > 0)
        exact = ~sup & (lam == 0)
        # Illinois: halve the stale endpoint value after repeated same-side moves
        i_up = active[up]
        stale = i_up[(side[i_up] == 1) & hi_root[i_up]]
        lam_hi[stale] *= 0.5
        lo[i_up], lam_lo[i_up], side[i_up] = m[up], lam[up], 1
        i_dn = active[down_root]
        stale = i_dn[side[i_dn] == -1]
        lam_lo[stale] *= 0.5
        hi[i_dn], lam_hi[i_dn], side[i_dn] = m[down_root], lam[down_root], -1
        hi_root[i_dn] = True
        i_sup = active[sup]
        hi[i_sup], side[i_sup] = m[sup], 0
        i_ex = active[exact]
        lo[i_ex] = hi[i_ex] = m[exact]

    v = np.where(hi_root, 0.5 * (lo + hi), np.nan)
    status = np.where(hi_root, STATUS_OK, STATUS_NO_SAW)
    status[degenerate] = STATUS_DEGENERATE
    v[degenerate] = np.nan

    u = np.full((n, 3), np.nan, dtype=complex)
    good = np.flatnonzero(status == STATUS_OK)
    if good.size:
        # evaluate on the subsonic side of the bracket where the impedance is regular
        _, _, _, R = prob.evaluate(lo[good], good, surface, electrical)
        ok = np.all(np.isfinite(R), axis=(1, 2))
        if ok.any():
            _, vecs = np.linalg.eigh(R[ok])
            u[good[ok]] = vecs[:, :, 0]
    return BatchSolution(v=v, status=status, u=u, v_bulk=vb * 1.0, perturbed=perturbed)


def solve_directions(
    mat: MaterialConstants,
    angles,
    surface: Surface = Surface.FREE,
    electrical: str = "open",
    tol: float = DEFAULT_TOL,
    chunk: int = 20000,
) -> BatchSolution:
    """Vectorised surface-wave solve for an (n, 3) array of Euler angles in degrees."""
    surface = Surface(surface)
    angles = np.atleast_2d(np.asarray(angles, float))
    parts = []
    for start in range(0, len(angles), chunk):
        prob = _problem_for(mat, angles[start:start + chunk])
        parts.append(_solve(prob, surface, electrical, tol))
    if len(parts) == 1:
        return parts[0]
    return BatchSolution(*(np.concatenate([getattr(p, f) for p in parts]) for f in BatchSolution.__dataclass_fields__))


def _raise_for(status, o, surface, vb):
    if status == STATUS_NO_SAW:
        raise NoSurfaceWave(
            f"no {surface.value}-surface wave below the limiting velocity at "
            f"{o.as_tuple()} (slowest bulk wave {vb:.2f} m/s)"
        )
    if status == STATUS_DEGENERATE:
        raise DegenerateRoots(f"partial-wave branches coalesce at {o.as_tuple()}; perturbation did not separate them")


def saw_velocity(
    mat: MaterialConstants,
    o: Orientation,
    surface: Surface = Surface.FREE,
    electrical: str = "open",
    tol: float = DEFAULT_TOL,
) -> SurfaceWaveSolution:
    """Slowest true surface wave for one orientation and one surface condition."""
    surface = Surface(surface)
    res = solve_directions(mat, [o.as_tuple()], surface, electrical, tol)
    _raise_for(res.status[0], o, surface, res.v_bulk[0])
    pol, sag, tr = classify_polarization(res.u[0])
    v = float(res.v[0])
    return SurfaceWaveSolution(
        orientation=o,
        v_free=v if surface == Surface.FREE else None,
        v_shorted=v if surface == Surface.SHORTED else None,
        polarization=pol,
        u_sagittal=sag,
        u_transverse=tr,
        v_bulk=float(res.v_bulk[0]),
        electrical=electrical,
        diagnostics={"perturbed": bool(res.perturbed[0]), "tol_mps": tol},
    )


def coupling_k2(mat: MaterialConstants, o: Orientation, electrical: str = "open", tol: float = DEFAULT_TOL) -> SurfaceWaveSolution:
    """Free and shorted velocities with k2 = 2 (v_free - v_shorted) / v_free."""
    angles = [o.as_tuple(), o.as_tuple()]
    prob = _problem_for(mat, angles)
    free = _solve(prob, Surface.FREE, electrical, tol)
    short = _solve(prob, Surface.SHORTED, electrical, tol)
    _raise_for(free.status[0], o, Surface.FREE, free.v_bulk[0])
    _raise_for(short.status[0], o, Surface.SHORTED, short.v_bulk[0])
    vf, vs = float(free.v[0]), float(short.v[0])
    if not mat.piezo.any():
        # no electromechanical coupling: the electrical boundary condition cannot matter
        vs = vf
    pol, sag, tr = classify_polarization(free.u[0])
    return SurfaceWaveSolution(
        orientation=o,
        v_free=vf,
        v_shorted=vs,
        k2=max(0.0, 2.0 * (vf - vs) / vf),
        polarization=pol,
        u_sagittal=sag,
        u_transverse=tr,
        v_bulk=float(free.v_bulk[0]),
        electrical=electrical,
        diagnostics={"perturbed": bool(free.perturbed[0] or short.perturbed[0]), "tol_mps": tol},
    )
