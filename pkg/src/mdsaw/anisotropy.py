"""Beam steering, diffraction parameter and the minimally-diffracting cut search.

Angles are degrees at every interface. Derivatives with respect to the
planar angle theta are taken per radian, so ``gamma`` (d eta / d theta) is
the same number in degree-per-degree or radian-per-radian.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .contours import contour_intersections, marching_squares
from .materials import MaterialConstants, Orientation
from .surface_wave import (
    STATUS_OK,
    Polarization,
    Surface,
    classify_polarization,
    coupling_k2,
    solve_directions,
)

log = logging.getLogger(__name__)

__all__ = [
    "AnisotropyProfile",
    "ParameterMap",
    "MDCandidate",
    "GridTooCoarse",
    "derivative",
    "beam_steering",
    "diffraction_parameter",
    "velocity_profile",
    "local_eta_gamma",
    "md_theta",
    "map_parameter_space",
    "find_md_orientations",
    "q_diffraction",
]

#: coarsest theta step accepted for finite-difference derivatives, degrees
MAX_THETA_STEP = 1.0
#: change in eta (degrees) and gamma allowed when the theta step is halved
ETA_CONVERGENCE_TOL = 1e-3
GAMMA_CONVERGENCE_TOL = 1e-3

FIVE_POINT = "5-point central, O(h^4)"


class GridTooCoarse(ValueError):
    pass


def _is_periodic(theta):
    theta = np.asarray(theta, float)
    if theta.size < 5:
        return False
    h = theta[1] - theta[0]
    span = h * theta.size
    return any(abs(span - p) < 1e-6 * p for p in (180.0, 360.0))


def _step(theta, max_step):
    theta = np.asarray(theta, float)
    if theta.ndim != 1 or theta.size < 3:
        raise ValueError("need a 1-D grid with at least 3 samples")
    d = np.diff(theta)
    h = d[0]
    if h <= 0 or np.abs(d - h).max() > 1e-9 * max(1.0, abs(h)):
        raise ValueError("theta samples must be uniform and increasing")
    if h > max_step:
        raise GridTooCoarse(f"theta step {h:g} deg exceeds the maximum {max_step:g} deg")
    return h


def derivative(theta, f, periodic: Optional[bool] = None, max_step: float = MAX_THETA_STEP):
    """d f / d theta (per radian) along the last axis on a uniform grid in degrees.

    Interior points use the five-point central stencil. On a periodic grid
    the stencil wraps; otherwise the two points next to each end fall back to
    second-order differences.
    """
    h = math.radians(_step(theta, max_step))
    f = np.asarray(f, float)
    if periodic is None:
        periodic = _is_periodic(theta)
    if periodic:
        r = lambda k: np.roll(f, -k, axis=-1)
        return (r(-2) - 8 * r(-1) + 8 * r(1) - r(2)) / (12 * h)
    n = f.shape[-1]
    if n < 5:
        return np.gradient(f, h, axis=-1, edge_order=2)
    d = np.gradient(f, h, axis=-1, edge_order=2)
    d[..., 2:-2] = (f[..., :-4] - 8 * f[..., 1:-3] + 8 * f[..., 3:-1] - f[..., 4:]) / (12 * h)
    return d


def beam_steering(theta, v, periodic: Optional[bool] = None, max_step: float = MAX_THETA_STEP):
    """Beam-steering angle eta(theta) = atan(v'/v), in degrees."""
    v = np.asarray(v, float)
    return np.degrees(np.arctan(derivative(theta, v, periodic, max_step) / v))


def diffraction_parameter(theta, eta_deg, periodic: Optional[bool] = None, max_step: float = MAX_THETA_STEP):
    """gamma = d eta / d theta (dimensionless)."""
    return derivative(theta, np.radians(eta_deg), periodic, max_step)


def q_diffraction(gamma, w_over_lambda):
    """Diffraction-limited quality factor 5 pi (W/lambda)^2 / |1 + gamma|.

    Returns ``math.inf`` (elementwise for arrays) when gamma is exactly -1.
    """
    g = np.asarray(gamma, float)
    w = np.asarray(w_over_lambda, float)
    if np.any(w <= 0):
        raise ValueError("W/lambda must be positive")
    with np.errstate(divide="ignore"):
        q = 5 * np.pi * w**2 / np.abs(1.0 + g)
    if q.ndim == 0:
        return float(q)
    return q


@dataclass
class AnisotropyProfile:
    phi: float
    theta: np.ndarray
    v: np.ndarray
    eta: np.ndarray
    gamma: np.ndarray
    psi: float = 0.0
    polarization: Optional[np.ndarray] = None
    derivative_meta: dict = field(default_factory=dict)


def _meta(theta, periodic):
    return {
        "scheme": FIVE_POINT,
        "step_deg": float(theta[1] - theta[0]),
        "periodic": bool(periodic),
        "max_step_deg": MAX_THETA_STEP,
    }


def velocity_profile(
    mat: MaterialConstants,
    phi: float,
    theta: Sequence[float],
    psi: float = 0.0,
    electrical: str = "open",
    periodic: Optional[bool] = None,
) -> AnisotropyProfile:
    """Free-surface v(theta) at fixed cut and its eta, gamma."""
    theta = np.asarray(theta, float)
    ang = np.column_stack([np.full_like(theta, psi), np.full_like(theta, phi), theta])
    res = solve_directions(mat, ang, Surface.FREE, electrical)
    if periodic is None:
        periodic = _is_periodic(theta)
    eta = beam_steering(theta, res.v, periodic)
    gamma = diffraction_parameter(theta, eta, periodic)
    pol = np.array([_pol_code(u) if s == STATUS_OK else "" for u, s in zip(res.u, res.status)])
    return AnisotropyProfile(phi, theta, res.v, eta, gamma, psi, pol, _meta(theta, periodic))


def md_theta(profile: AnisotropyProfile):
    """Planar angle of minimal diffraction on a profile.

    Finds every crossing of gamma = -1 by linear interpolation and returns
    the one with the smallest beam steering, as ``(theta, eta, gamma_slope)``.
    Returns None when gamma never reaches -1.
    """
    th, g, e = profile.theta, profile.gamma + 1.0, profile.eta
    best = None
    for i in np.flatnonzero(np.isfinite(g[:-1]) & np.isfinite(g[1:]) & (np.sign(g[:-1]) != np.sign(g[1:]))):
        t = g[i] / (g[i] - g[i + 1])
        cand = (th[i] + t * (th[i + 1] - th[i]), e[i] + t * (e[i + 1] - e[i]), (g[i + 1] - g[i]) / (th[i + 1] - th[i]))
        if best is None or abs(cand[1]) < abs(best[1]):
            best = cand
    return None if best is None else tuple(float(x) for x in best)


def _pol_code(u):
    return classify_polarization(u)[0].value


def local_eta_gamma(mat, points, h: float = 0.05, psi: float = 0.0, electrical: str = "open"):
    """eta (deg), gamma and v at each (phi, theta) point from a local 5-sample stencil.

    Uses gamma = (v'' v - v'^2) / (v^2 + v'^2), the expanded derivative of
    atan(v'/v), with v' and v'' from central differences of step ``h`` degrees.
    """
    pts = np.atleast_2d(np.asarray(points, float))
    k = np.arange(-2, 3)
    th = pts[:, 1, None] + h * k
    ph = np.broadcast_to(pts[:, 0, None], th.shape)
    ang = np.column_stack([np.full(th.size, psi), ph.ravel(), th.ravel()])
    res = solve_directions(mat, ang, Surface.FREE, electrical)
    v = res.v.reshape(th.shape)
    hr = math.radians(h)
    d1 = (v[:, 0] - 8 * v[:, 1] + 8 * v[:, 3] - v[:, 4]) / (12 * hr)
    d2 = (-v[:, 0] + 16 * v[:, 1] - 30 * v[:, 2] + 16 * v[:, 3] - v[:, 4]) / (12 * hr * hr)
    v0 = v[:, 2]
    eta = np.degrees(np.arctan(d1 / v0))
    gamma = (d2 * v0 - d1**2) / (v0**2 + d1**2)
    return eta, gamma, v0


# --------------------------------------------------------------------------- maps


@dataclass
class ParameterMap:
    """(phi, theta) grid of free-surface properties; rows are phi, columns theta."""

    phi: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    eta: np.ndarray
    gamma: np.ndarray
    k2: np.ndarray
    polarization: np.ndarray
    status: np.ndarray
    periodic: bool
    psi: float = 0.0
    material: str = ""
    fingerprint: str = ""
    electrical: str = "open"
    resolution: float = 0.0

    def holes(self):
        """(phi, theta, reason) for every direction without a converged surface wave."""
        reasons = {1: "no surface wave below limiting velocity", 2: "degenerate partial-wave branches"}
        out = []
        for i, j in np.argwhere(self.status != STATUS_OK):
            out.append((float(self.phi[i]), float(self.theta[j]), reasons.get(int(self.status[i, j]), "unknown")))
        return out

    def to_csv(self, path):
        P, T = np.meshgrid(self.phi, self.theta, indexing="ij")

        def fmt(x, spec):
            return "" if not np.isfinite(x) else format(x, spec)

        with open(path, "w") as fh:
            fh.write("phi_deg,theta_deg,v_mps,eta_deg,gamma,k2_percent,polarization\n")
            for p, t, v, e, g, k, pol in zip(
                P.ravel(), T.ravel(), self.v.ravel(), self.eta.ravel(), self.gamma.ravel(),
                self.k2.ravel(), self.polarization.ravel(),
            ):
                fh.write(
                    f"{p:.4f},{t:.4f},{fmt(v, '.6f')},{fmt(e, '.6f')},{fmt(g, '.6f')},"
                    f"{fmt(100 * k, '.5f')},{pol or 'none'}\n"
                )


def theta_grid(resolution: float, theta_range=(0.0, 180.0)):
    """Theta samples; a full 180-degree period is sampled at cell centres and wraps."""
    lo, hi = theta_range
    span = hi - lo
    n = span / resolution
    if abs(span - 180.0) < 1e-9 and abs(n - round(n)) < 1e-9:
        return lo + (np.arange(round(n)) + 0.5) * resolution, True
    return np.arange(lo, hi + 0.5 * resolution, resolution), False


def _solve_rows(args):
    mat, psi, phis, theta, electrical, with_k2 = args
    P, T = np.meshgrid(phis, theta, indexing="ij")
    ang = np.column_stack([np.full(P.size, psi), P.ravel(), T.ravel()])
    free = solve_directions(mat, ang, Surface.FREE, electrical)
    out = {
        "v": free.v.reshape(P.shape),
        "status": free.status.reshape(P.shape),
        "u": free.u.reshape(P.shape + (3,)),
    }
    if with_k2:
        short = solve_directions(mat, ang, Surface.SHORTED, electrical)
        vf, vs = free.v, short.v
        if not mat.piezo.any():
            vs = vf
        k2 = np.where(short.status == STATUS_OK, 2 * (vf - vs) / vf, np.nan)
        out["k2"] = np.maximum(k2, 0.0).reshape(P.shape)
    else:
        out["k2"] = np.full(P.shape, np.nan)
    return out


def _cache_dir(root, mat, psi, theta, electrical, with_k2, resolution):
    key = (
        f"{mat.fingerprint()}-psi{psi:g}-{electrical}-h{resolution:g}-"
        f"t{theta[0]:.6g}_{theta[-1]:.6g}_{theta.size}{'-k2' if with_k2 else ''}"
    )
    d = Path(root) / key
    d.mkdir(parents=True, exist_ok=True)
    return d


def map_parameter_space(
    mat: MaterialConstants,
    phi_range=(-90.0, 90.0),
    theta_range=(0.0, 180.0),
    resolution: float = 0.25,
    psi: float = 0.0,
    electrical: str = "open",
    with_k2: bool = True,
    jobs: Optional[int] = None,
    cache_dir=None,
    rows_per_task: int = 8,
    resume: bool = True,
) -> ParameterMap:
    """Evaluate v, eta, gamma, k2 and polarisation on a (phi, theta) grid.

    With ``cache_dir`` set, each block of phi rows is stored as it completes
    (keyed by material fingerprint, electrical model and grid) and reused on
    later calls, so interrupted runs resume. ``resume=False`` recomputes
    every block and overwrites the cache.
    """
    theta, periodic = theta_grid(resolution, theta_range)
    nphi = int(round((phi_range[1] - phi_range[0]) / resolution))
    phi = phi_range[0] + resolution * np.arange(nphi + 1)
    blocks = [phi[i:i + rows_per_task] for i in range(0, phi.size, rows_per_task)]
    cdir = _cache_dir(cache_dir, mat, psi, theta, electrical, with_k2, resolution) if cache_dir else None

    results = [None] * len(blocks)
    todo = []
    for b, phis in enumerate(blocks):
        f = cdir / f"block_{phis[0]:+010.4f}_{phis.size}.npz" if cdir else None
        if resume and f is not None and f.exists():
            with np.load(f) as z:
                results[b] = {k: z[k] for k in z.files}
        else:
            todo.append(b)
    log.info("map: %d blocks cached, %d to compute", len(blocks) - len(todo), len(todo))

    jobs = jobs or os.cpu_count() or 1
    tasks = [(mat, psi, blocks[b], theta, electrical, with_k2) for b in todo]

    def store(b, res):
        results[b] = res
        if cdir is not None:
            f = cdir / f"block_{blocks[b][0]:+010.4f}_{blocks[b].size}.npz"
            tmp = f.with_suffix(".tmp.npz")
            np.savez(tmp, **res)
            os.replace(tmp, f)

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for b, res in zip(todo, ex.map(_solve_rows, tasks)):
                store(b, res)
    else:
        for b, t in zip(todo, tasks):
            store(b, _solve_rows(t))

    v = np.concatenate([r["v"] for r in results])
    status = np.concatenate([r["status"] for r in results])
    u = np.concatenate([r["u"] for r in results])
    k2 = np.concatenate([r["k2"] for r in results])
    eta = beam_steering(theta, v, periodic)
    gamma = diffraction_parameter(theta, eta, periodic)
    pol = np.full(v.shape, "", dtype=object)
    for i, j in np.argwhere(status == STATUS_OK):
        pol[i, j] = _pol_code(u[i, j])
    return ParameterMap(
        phi=phi, theta=theta, v=v, eta=eta, gamma=gamma, k2=k2, polarization=pol, status=status,
        periodic=periodic, psi=psi, material=mat.name, fingerprint=mat.fingerprint(),
        electrical=electrical, resolution=resolution,
    )


# --------------------------------------------------------------------------- MD search


@dataclass
class MDCandidate:
    orientation: Orientation
    eta_residual: float
    gamma_value: float
    sens_eta: float
    sens_gamma: float
    velocity: float
    polarization: Polarization
    k2: float
    converged: bool = True
    iterations: int = 0
    note: str = ""

    def as_dict(self):
        d = asdict(self)
        d["orientation"] = {"psi": self.orientation.psi, "phi": self.orientation.phi, "theta": self.orientation.theta}
        d["polarization"] = self.polarization.value if self.polarization else None
        d["k2_percent"] = 100 * self.k2 if self.k2 == self.k2 else None
        return d


def _mirror_symmetric(mat, psi):
    # a two-fold crystal X axis makes v(phi, theta) = v(phi, -theta) on psi = 0 cuts
    return psi == 0.0 and mat.symmetry_class in ("32", "isotropic")


def _fold(theta, mirror):
    theta = theta % 180.0
    if mirror and theta > 90.0:
        theta = 180.0 - theta
    return theta


def _residual(mat, pts, h, psi, electrical):
    eta, gamma, v = local_eta_gamma(mat, pts, h, psi, electrical)
    return np.column_stack([eta, gamma + 1.0]), v


def _refine(mat, seed, psi, electrical, h=0.05, fd=0.02, max_iter=25, tol=1e-4, max_step=0.5):
    x = np.array(seed, float)
    for it in range(1, max_iter + 1):
        pts = np.array([x, x + [fd, 0.0], x + [0.0, fd]])
        r, _ = _residual(mat, pts, h, psi, electrical)
        if not np.all(np.isfinite(r)):
            return x, False, it
        J = np.column_stack([(r[1] - r[0]) / fd, (r[2] - r[0]) / fd])
        try:
            dx = -np.linalg.solve(J, r[0])
        except np.linalg.LinAlgError:
            return x, False, it
        n = np.linalg.norm(dx)
        if n > max_step:
            dx *= max_step / n
        x = x + dx
        if n < tol:
            return x, True, it
    return x, False, max_iter


def find_md_orientations(
    pmap: ParameterMap,
    mat: MaterialConstants,
    dedupe_radius: float = 1.0,
    refine: bool = True,
    sens_step: float = 0.1,
    max_seed_shift: float = 1.0,
    keep_unconverged: bool = False,
) -> list:
    """Crossings of the eta = 0 and gamma = -1 contours, refined and annotated.

    Each crossing from the map is polished by Newton iteration on
    (eta, gamma + 1) with fresh solver calls, then sensitivities
    |d eta/d phi| and |d gamma/d phi| are taken by central differences of
    ``sens_step`` degrees in phi. Candidates whose refinement fails or walks
    further than ``max_seed_shift`` degrees from the map crossing are
    dropped unless ``keep_unconverged`` is set.
    """
    psi = pmap.psi
    phi, theta, eta, gam = pmap.phi, pmap.theta, pmap.eta, pmap.gamma + 1.0
    if pmap.periodic:
        theta = np.append(theta, theta[0] + 180.0)
        eta = np.concatenate([eta, eta[:, :1]], axis=1)
        gam = np.concatenate([gam, gam[:, :1]], axis=1)
    hits = contour_intersections(marching_squares(phi, theta, eta), marching_squares(phi, theta, gam))
    mirror = _mirror_symmetric(mat, psi)
    seeds = []
    for (p, t), _cell in sorted(hits):
        t = _fold(t, mirror)
        if all(math.hypot(p - q, t - s) > dedupe_radius for q, s in seeds):
            seeds.append((p, t))
    log.info("find_md: %d contour crossings, %d after de-duplication", len(hits), len(seeds))

    out = []
    for p, t in seeds:
        x, ok, it = (np.array([p, t]), True, 0)
        if refine:
            x, ok, it = _refine(mat, (p, t), psi, pmap.electrical)
            if ok and math.hypot(x[0] - p, x[1] - t) > max_seed_shift:
                ok = False
        if not ok and not keep_unconverged:
            log.info("find_md: dropping crossing near (%.2f, %.2f): refinement did not converge", p, t)
            continue
        o = Orientation(psi, x[0], x[1])
        ph, th = o.phi, _fold(o.theta, mirror)
        pts = np.array([[ph, th], [ph + sens_step, th], [ph - sens_step, th]])
        (r, v) = _residual(mat, pts, 0.05, psi, pmap.electrical)
        e, g = r[:, 0], r[:, 1] - 1.0
        try:
            sol = coupling_k2(mat, Orientation(psi, ph, th), pmap.electrical)
            k2, pol, vel = sol.k2, sol.polarization, sol.v_free
        except Exception as exc:  # noqa: BLE001 - reported on the candidate
            k2, pol, vel = float("nan"), Polarization.OTHER, float(v[0])
            ok = False
            log.info("find_md: k2 failed at (%.2f, %.2f): %s", ph, th, exc)
        out.append(
            MDCandidate(
                orientation=Orientation(psi, ph, th),
                eta_residual=float(e[0]),
                gamma_value=float(g[0]),
                sens_eta=float(abs(e[1] - e[2]) / (2 * sens_step)),
                sens_gamma=float(abs(g[1] - g[2]) / (2 * sens_step)),
                velocity=float(vel),
                polarization=pol,
                k2=float(k2),
                converged=bool(ok),
                iterations=it,
                note="" if ok else "refinement did not converge",
            )
        )
    # final de-duplication: refinement can pull two seeds onto one crossing
    unique = []
    for c in out:
        if all(
            math.hypot(c.orientation.phi - u.orientation.phi, c.orientation.theta - u.orientation.theta) > 0.1
            for u in unique
        ):
            unique.append(c)
    unique.sort(key=lambda c: (-c.k2 if c.k2 == c.k2 else 0.0))
    return unique
