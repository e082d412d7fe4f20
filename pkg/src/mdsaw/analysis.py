"""Resonator linewidth analysis and diffraction-parameter fits from aperture sweeps.

The loss model for a flat cavity of aperture W is

    kappa_i / 2 pi = f0 * |1 + gamma| / (5 pi (W/lambda)^2) + floor,

which is linear in ``|1 + gamma|`` and ``floor``. Only the magnitude
``|1 + gamma|`` is identifiable, so ``gamma`` is reported on a chosen
branch: ``"upper"`` (gamma >= -1) or ``"lower"`` (gamma <= -1).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import lsq_linear

__all__ = [
    "SweepRecord",
    "ApertureSweep",
    "GammaFit",
    "FitError",
    "q_from_linewidth",
    "linewidth_ratio",
    "load_sweep_csv",
    "fit_gamma",
    "diffraction_linewidth",
    "synthetic_sweep",
    "write_sweep_csv",
]

BRANCHES = ("upper", "lower")


class FitError(ValueError):
    pass


def q_from_linewidth(f0_hz: float, kappa_hz: float) -> float:
    """Internal quality factor Q_i = f0 / (kappa_i / 2 pi)."""
    if not (f0_hz > 0 and kappa_hz > 0):
        raise ValueError("f0 and linewidth must be positive")
    return f0_hz / kappa_hz


def linewidth_ratio(gamma_a: float, gamma_b: float) -> float:
    """Diffraction-limited linewidth of a over b at equal aperture: |1+gamma_a| / |1+gamma_b|."""
    den = abs(1.0 + gamma_b)
    if den == 0.0:
        raise ValueError("gamma_b = -1 has zero diffraction linewidth")
    return abs(1.0 + gamma_a) / den


def diffraction_linewidth(f0_hz, gamma, w_over_lambda):
    """kappa_d / 2 pi = f0 |1+gamma| / (5 pi (W/lambda)^2), in Hz."""
    w = np.asarray(w_over_lambda, float)
    return np.asarray(f0_hz, float) * abs(1.0 + gamma) / (5 * np.pi * w**2)


@dataclass(frozen=True)
class SweepRecord:
    w_over_lambda: float
    kappa_i_hz: float
    f0_hz: float
    temperature_label: str = ""


@dataclass
class GammaFit:
    gamma: float
    stderr: float
    abs_one_plus_gamma: float
    floor_hz: float
    floor_stderr: Optional[float]
    floor_fitted: bool
    branch: str
    residuals_hz: list
    residual_rms_hz: float
    residual_per_dof: float
    dof: int
    used_widths: list
    excluded_widths: list
    alternate_gamma: float

    def as_dict(self):
        return dict(self.__dict__)

    def to_json(self, path=None, extra: Optional[dict] = None):
        d = self.as_dict()
        if extra:
            d.update(extra)
        text = json.dumps(d, indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass
class ApertureSweep:
    records: list
    fit: Optional[GammaFit] = field(default=None, repr=False)

    def __post_init__(self):
        recs = [r if isinstance(r, SweepRecord) else SweepRecord(*r) for r in self.records]
        for r in recs:
            if not r.w_over_lambda > 0:
                raise ValueError(f"width must be positive, got {r.w_over_lambda}")
            if not r.kappa_i_hz > 0:
                raise ValueError(f"linewidth must be positive, got {r.kappa_i_hz}")
            if not r.f0_hz > 0:
                raise ValueError(f"f0 must be positive, got {r.f0_hz}")
        self.records = sorted(recs, key=lambda r: r.w_over_lambda)

    @classmethod
    def from_arrays(cls, widths, kappa, f0, temperature_label=""):
        widths = np.asarray(widths, float)
        kappa = np.asarray(kappa, float)
        f0 = np.broadcast_to(np.asarray(f0, float), widths.shape)
        return cls([SweepRecord(float(w), float(k), float(f), temperature_label) for w, k, f in zip(widths, kappa, f0)])

    @property
    def widths(self):
        return np.array([r.w_over_lambda for r in self.records])

    @property
    def kappa(self):
        return np.array([r.kappa_i_hz for r in self.records])

    @property
    def f0(self):
        return np.array([r.f0_hz for r in self.records])

    def __len__(self):
        return len(self.records)


def load_sweep_csv(path) -> ApertureSweep:
    """Read a CSV with header ``w_over_lambda, kappa_i_hz, f0_hz`` and optional ``temperature_label``.

    ``kappa_i_hz`` is the internal linewidth kappa_i / 2 pi. Lines starting
    with ``#`` are ignored.
    """
    with open(path, newline="") as fh:
        rows = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(rows)
    need = {"w_over_lambda", "kappa_i_hz", "f0_hz"}
    cols = {c.strip() for c in (reader.fieldnames or [])}
    if not need <= cols:
        raise ValueError(f"{path}: missing columns {sorted(need - cols)}")
    recs = []
    for n, row in enumerate(reader, start=2):
        row = {k.strip(): (v or "").strip() for k, v in row.items()}
        try:
            recs.append(SweepRecord(
                float(row["w_over_lambda"]), float(row["kappa_i_hz"]), float(row["f0_hz"]),
                row.get("temperature_label", ""),
            ))
        except ValueError as exc:
            raise ValueError(f"{path}: row {n}: {exc}") from None
    return ApertureSweep(recs)


def _choose_branch(a, branch, predicted_gamma):
    if branch is None:
        if predicted_gamma is None:
            branch = "upper"
        else:
            up, lo = a - 1.0, -1.0 - a
            branch = "upper" if abs(up - predicted_gamma) <= abs(lo - predicted_gamma) else "lower"
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    return branch


def fit_gamma(
    sweep: ApertureSweep,
    floor: bool = True,
    exclude: Iterable[float] = (),
    branch: Optional[str] = None,
    predicted_gamma: Optional[float] = None,
) -> GammaFit:
    """Least-squares fit of the aperture-sweep loss model.

    Parameters
    ----------
    floor : fit a constant loss floor (Hz); when False the floor is fixed at 0.
    exclude : widths (W/lambda) to leave out, matched to 1e-9 relative.
    branch : ``"upper"``, ``"lower"`` or None. None picks the branch nearer
        ``predicted_gamma`` when given, otherwise ``"upper"``.

    Both parameters are constrained non-negative.
    """
    w, k, f0 = sweep.widths, sweep.kappa, sweep.f0
    exclude = [float(e) for e in exclude]
    drop = np.array([any(math.isclose(x, e, rel_tol=1e-9) for e in exclude) for x in w], bool)
    unmatched = [e for e in exclude if not any(math.isclose(x, e, rel_tol=1e-9) for x in w)]
    if unmatched:
        raise ValueError(f"excluded widths not in the sweep: {unmatched}")
    w, k, f0 = w[~drop], k[~drop], f0[~drop]
    npar = 2 if floor else 1
    if w.size < max(3, npar + 1):
        raise FitError(f"{w.size} usable records; need at least {max(3, npar + 1)}")
    X = (f0 / (5 * np.pi * w**2))[:, None]
    if floor:
        X = np.column_stack([X, np.ones_like(w)])
    # column scaling keeps the bounded solver well conditioned
    scale = np.abs(X).max(axis=0)
    sol = lsq_linear(X / scale, k, bounds=(0.0, np.inf), method="bvls", tol=1e-14)
    if not sol.success:
        raise FitError(f"least-squares solver failed: {sol.message}")
    p = sol.x / scale
    resid = k - X @ p
    dof = w.size - npar
    s2 = float(resid @ resid) / dof
    try:
        cov = s2 * np.linalg.inv(X.T @ X)
    except np.linalg.LinAlgError:
        raise FitError("design matrix is singular") from None
    a = float(p[0])
    br = _choose_branch(a, branch, predicted_gamma)
    gamma = a - 1.0 if br == "upper" else -1.0 - a
    return GammaFit(
        gamma=gamma,
        stderr=float(math.sqrt(cov[0, 0])),
        abs_one_plus_gamma=a,
        floor_hz=float(p[1]) if floor else 0.0,
        floor_stderr=float(math.sqrt(cov[1, 1])) if floor else None,
        floor_fitted=floor,
        branch=br,
        residuals_hz=resid.tolist(),
        residual_rms_hz=float(np.sqrt(np.mean(resid**2))),
        residual_per_dof=s2,
        dof=dof,
        used_widths=w.tolist(),
        excluded_widths=sorted(exclude),
        alternate_gamma=(-1.0 - a) if br == "upper" else (a - 1.0),
    )


def synthetic_sweep(
    gamma: float,
    widths: Sequence[float],
    f0_hz: float = 500e6,
    floor_hz: float = 0.0,
    noise: float = 0.0,
    seed: int = 0,
    third_order: float = 0.0,
    temperature_label: str = "synthetic",
) -> ApertureSweep:
    """Sweep generated from the loss model with multiplicative Gaussian noise.

    ``third_order`` adds ``third_order * f0 / W^4`` Hz, a stand-in for the
    higher-order diffraction loss that dominates at narrow apertures.
    """
    w = np.asarray(widths, float)
    k = diffraction_linewidth(f0_hz, gamma, w) + floor_hz + third_order * f0_hz / w**4
    if noise:
        k = k * (1 + noise * np.random.default_rng(seed).standard_normal(w.size))
    return ApertureSweep.from_arrays(w, k, f0_hz, temperature_label)


def write_sweep_csv(sweep: ApertureSweep, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["w_over_lambda", "kappa_i_hz", "f0_hz", "temperature_label"])
        for r in sweep.records:
            wr.writerow([repr(r.w_over_lambda), repr(r.kappa_i_hz), repr(r.f0_hz), r.temperature_label])
