"""Crystal material constants, Euler-angle orientations and tensor rotation.

Orientation convention
----------------------
Euler angles (psi, phi, theta) follow the IEEE (Z, X', Z'') convention. The
passive rotation taking crystallographic components into the device frame is

    a = Rz(theta) @ Rx(phi) @ Rz(psi)

with

    Rz(t) = [[ cos t, sin t, 0],      Rx(t) = [[1,      0,     0],
             [-sin t, cos t, 0],               [0,  cos t, sin t],
             [     0,     0, 1]]               [0, -sin t, cos t]]

Rows of ``a`` are the device axes written in crystal coordinates: row 0 is
the propagation direction, row 2 is the outward surface normal. For psi = 0
the normal is (0, -sin phi, cos phi), so phi is the angle between the wafer
normal and crystal Z, and theta rotates the device about that normal.
Tensor components transform as c'_ijkl = a_ip a_jq a_kr a_ls c_pqrs.
"""

from __future__ import annotations

import hashlib
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .units import EPS0, GPA

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "MaterialConstants",
    "Orientation",
    "MaterialError",
    "load_material",
    "parse_material",
    "rotate_tensors",
    "device_frame",
    "bond_matrix",
    "voigt_to_tensor",
    "tensor_to_voigt",
    "piezo_voigt_to_tensor",
    "piezo_tensor_to_voigt",
    "isotropic_material",
    "bundled_material_path",
]

# Voigt index J <-> tensor pair (k, l)
VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
VOIGT_INDEX = np.array([[0, 5, 4], [5, 1, 3], [4, 3, 2]])

CLASS32_RTOL = 1e-3


class MaterialError(ValueError):
    """Material file could not be parsed or violates a physical invariant."""


def voigt_to_tensor(C):
    """6x6 Voigt stiffness -> rank-4 tensor c_ijkl."""
    C = np.asarray(C, dtype=float)
    return C[VOIGT_INDEX[:, :, None, None], VOIGT_INDEX[None, None, :, :]]


def tensor_to_voigt(c):
    C = np.empty((6, 6))
    for I, (i, j) in enumerate(VOIGT_PAIRS):
        for J, (k, l) in enumerate(VOIGT_PAIRS):
            C[I, J] = c[i, j, k, l]
    return C


def piezo_voigt_to_tensor(E):
    """3x6 Voigt piezoelectric stress matrix -> rank-3 tensor e_ijk."""
    E = np.asarray(E, dtype=float)
    return E[:, VOIGT_INDEX]


def piezo_tensor_to_voigt(e):
    E = np.empty((3, 6))
    for J, (k, l) in enumerate(VOIGT_PAIRS):
        E[:, J] = e[:, k, l]
    return E


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _wrap(x, lo, period):
    # leave in-range values untouched so user input round-trips exactly
    if lo <= x < lo + period:
        return x
    x = (x - lo) % period + lo
    return lo if x >= lo + period else x


@dataclass(frozen=True)
class Orientation:
    """IEEE Euler-angle triple in degrees.

    Angles are stored in the canonical ranges psi, phi in [-90, 90] and
    theta in [0, 180). Reduction uses the exact identity
    (psi + 180, -phi, theta + 180) == (psi, phi, theta), followed by two maps
    that leave every surface-wave property unchanged: the opposite face of the
    wafer (phi -> phi -/+ 180, theta -> -theta) and reversal of the
    propagation direction (theta -> theta - 180).
    """

    psi: float = 0.0
    phi: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        psi, phi, theta = float(self.psi), float(self.phi), float(self.theta)
        if not all(math.isfinite(x) for x in (psi, phi, theta)):
            raise ValueError("Euler angles must be finite")
        psi = _wrap(psi, -180.0, 360.0)
        if psi > 90.0:
            psi, phi, theta = psi - 180.0, -phi, theta + 180.0
        elif psi < -90.0:
            psi, phi, theta = psi + 180.0, -phi, theta + 180.0
        phi = _wrap(phi, -180.0, 360.0)
        if phi > 90.0:
            phi, theta = phi - 180.0, -theta
        elif phi < -90.0:
            phi, theta = phi + 180.0, -theta
        theta = _wrap(theta, 0.0, 180.0)
        object.__setattr__(self, "psi", psi + 0.0)
        object.__setattr__(self, "phi", phi + 0.0)
        object.__setattr__(self, "theta", theta + 0.0)

    @classmethod
    def parse(cls, text: str) -> "Orientation":
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(parts) != 3:
            raise ValueError(f"orientation needs three comma-separated angles, got {text!r}")
        return cls(*(float(p) for p in parts))

    def as_tuple(self):
        return (self.psi, self.phi, self.theta)

    def matrix(self):
        return device_frame(self)


def _rz(t):
    c, s = np.cos(t), np.sin(t)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, s, z], -1), np.stack([-s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _rx(t):
    c, s = np.cos(t), np.sin(t)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, s], -1), np.stack([z, -s, c], -1)], -2)


def euler_matrices(psi, phi, theta):
    """Vectorised device-frame matrices for arrays of angles in degrees."""
    psi, phi, theta = np.broadcast_arrays(*(np.radians(np.asarray(x, float)) for x in (psi, phi, theta)))
    return _rz(theta) @ _rx(phi) @ _rz(psi)


def device_frame(o: Orientation) -> np.ndarray:
    """Rotation matrix (3x3) from crystal to device coordinates."""
    return euler_matrices(o.psi, o.phi, o.theta)


def bond_matrix(a):
    """Bond stress-transformation matrix for a (..., 3, 3) rotation.

    For Voigt quantities ``C' = M C M^T`` and ``E' = a E M^T``.
    """
    a = np.asarray(a, float)
    M = np.empty(a.shape[:-2] + (6, 6))
    for I, (i, j) in enumerate(VOIGT_PAIRS):
        for J, (k, l) in enumerate(VOIGT_PAIRS):
            if k == l:
                M[..., I, J] = a[..., i, k] * a[..., j, k]
            else:
                M[..., I, J] = a[..., i, k] * a[..., j, l] + a[..., i, l] * a[..., j, k]
    return M


@dataclass(frozen=True, eq=False)
class MaterialConstants:
    """Density and elastic/piezoelectric/dielectric constants of a crystal.

    ``elastic`` is the 6x6 Voigt stiffness in Pa, ``piezo`` the 3x6
    piezoelectric stress matrix in C/m^2 and ``permittivity`` the clamped
    3x3 dielectric tensor in F/m.
    """

    name: str
    density: float
    elastic: np.ndarray
    piezo: np.ndarray
    permittivity: np.ndarray
    handedness: str = "none"
    temperature_label: str = ""
    symmetry_class: str = "1"

    def __post_init__(self):
        object.__setattr__(self, "density", float(self.density))
        object.__setattr__(self, "elastic", _frozen(self.elastic))
        object.__setattr__(self, "piezo", _frozen(self.piezo))
        object.__setattr__(self, "permittivity", _frozen(self.permittivity))
        self.validate()

    def validate(self):
        if not (self.density > 0 and math.isfinite(self.density)):
            raise MaterialError(f"density must be positive, got {self.density}")
        C, E, eps = self.elastic, self.piezo, self.permittivity
        if C.shape != (6, 6) or E.shape != (3, 6) or eps.shape != (3, 3):
            raise MaterialError("tensor shapes must be elastic 6x6, piezo 3x6, permittivity 3x3")
        for label, M in (("elastic", C), ("permittivity", eps)):
            asym = np.abs(M - M.T)
            if asym.max() > 1e-9 * np.abs(M).max():
                i, j = np.unravel_index(np.argmax(asym), M.shape)
                raise MaterialError(
                    f"{label} matrix is not symmetric: entry ({i + 1},{j + 1}) = {M[i, j]:.6g} "
                    f"but ({j + 1},{i + 1}) = {M[j, i]:.6g}"
                )
            if np.linalg.eigvalsh(M).min() <= 0:
                raise MaterialError(f"{label} matrix is not positive definite")
        if self.symmetry_class == "32":
            _check_class32(C, E, eps)

    def elastic_tensor(self):
        return voigt_to_tensor(self.elastic)

    def piezo_tensor(self):
        return piezo_voigt_to_tensor(self.piezo)

    def replace(self, **changes) -> "MaterialConstants":
        kw = dict(
            name=self.name,
            density=self.density,
            elastic=self.elastic,
            piezo=self.piezo,
            permittivity=self.permittivity,
            handedness=self.handedness,
            temperature_label=self.temperature_label,
            symmetry_class=self.symmetry_class,
        )
        kw.update(changes)
        return MaterialConstants(**kw)

    def without_piezo(self) -> "MaterialConstants":
        return self.replace(piezo=np.zeros((3, 6)), name=self.name + " (no piezo)")

    def fingerprint(self) -> str:
        """Stable content hash used for cache keys."""
        h = hashlib.sha256()
        h.update(np.float64(self.density).tobytes())
        for a in (self.elastic, self.piezo, self.permittivity):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def __repr__(self):
        return (
            f"MaterialConstants({self.name!r}, class {self.symmetry_class}, "
            f"rho={self.density:g} kg/m^3, {self.temperature_label or 'T unspecified'})"
        )


def class32_pattern(c11, c12, c13, c14, c33, c44, e11, e14, eps11, eps33):
    """Voigt matrices of a trigonal class-32 crystal from its independent constants."""
    c66 = 0.5 * (c11 - c12)
    C = np.array(
        [
            [c11, c12, c13, c14, 0, 0],
            [c12, c11, c13, -c14, 0, 0],
            [c13, c13, c33, 0, 0, 0],
            [c14, -c14, 0, c44, 0, 0],
            [0, 0, 0, 0, c44, c14],
            [0, 0, 0, 0, c14, c66],
        ],
        dtype=float,
    )
    E = np.array(
        [[e11, -e11, 0, e14, 0, 0], [0, 0, 0, 0, -e14, -e11], [0, 0, 0, 0, 0, 0]],
        dtype=float,
    )
    eps = np.diag([eps11, eps11, eps33]).astype(float)
    return C, E, eps


def _check_class32(C, E, eps):
    ref_C, ref_E, ref_eps = class32_pattern(
        C[0, 0], C[0, 1], C[0, 2], C[0, 3], C[2, 2], C[3, 3], E[0, 0], E[0, 3], eps[0, 0], eps[2, 2]
    )
    names = {"elastic": "c", "piezo": "e", "permittivity": "eps"}
    for label, got, ref in (("elastic", C, ref_C), ("piezo", E, ref_E), ("permittivity", eps, ref_eps)):
        scale = np.abs(ref).max()
        if scale == 0:
            continue
        dev = np.abs(got - ref)
        if dev.max() > CLASS32_RTOL * scale:
            i, j = np.unravel_index(np.argmax(dev), got.shape)
            raise MaterialError(
                f"{label} constants violate the class-32 pattern: {names[label]}{i + 1}{j + 1} = "
                f"{got[i, j]:.6g}, expected {ref[i, j]:.6g}"
            )


def rotate_tensors(mat: MaterialConstants, o: Orientation) -> MaterialConstants:
    """Express ``mat`` in the device frame of orientation ``o``.

    The rank-4, rank-3 and rank-2 tensors are rotated component-wise and
    projected back to Voigt form.
    """
    a = device_frame(o)
    c = np.einsum("ip,jq,kr,ls,pqrs->ijkl", a, a, a, a, mat.elastic_tensor(), optimize=True)
    e = np.einsum("ip,jq,kr,pqr->ijk", a, a, a, mat.piezo_tensor(), optimize=True)
    eps = a @ mat.permittivity @ a.T
    # rounding can leave ~1e-16 asymmetry; the invariants are symmetric by construction
    C = tensor_to_voigt(c)
    return MaterialConstants(
        name=mat.name,
        density=mat.density,
        elastic=0.5 * (C + C.T),
        piezo=piezo_tensor_to_voigt(e),
        permittivity=0.5 * (eps + eps.T),
        handedness=mat.handedness,
        temperature_label=mat.temperature_label,
        symmetry_class="1",
    )


def rotate_voigt_batch(mat: MaterialConstants, a):
    """Rotate Voigt constants for a stack of frames ``a`` (n, 3, 3) via Bond matrices."""
    M = bond_matrix(a)
    C = M @ mat.elastic @ np.swapaxes(M, -1, -2)
    E = a @ mat.piezo @ np.swapaxes(M, -1, -2)
    eps = a @ mat.permittivity @ np.swapaxes(a, -1, -2)
    return C, E, eps


# --------------------------------------------------------------------------- files

def _voigt_key(prefix, key, rows, cols):
    if not key.startswith(prefix) or len(key) != len(prefix) + 2 or not key[len(prefix):].isdigit():
        raise MaterialError(f"unknown key {key!r}; expected {prefix}IJ")
    i, j = int(key[-2]) - 1, int(key[-1]) - 1
    if not (0 <= i < rows and 0 <= j < cols):
        raise MaterialError(f"index out of range in key {key!r}")
    return i, j


def _read_symmetric(section, prefix, n, label):
    M = np.zeros((n, n))
    seen = {}
    for key, val in section.items():
        i, j = _voigt_key(prefix, key, n, n)
        val = float(val)
        seen[(i, j)] = val
        M[i, j] = val
    for (i, j), val in seen.items():
        if (j, i) in seen and i != j:
            other = seen[(j, i)]
            if abs(val - other) > 1e-12 * max(abs(val), abs(other), 1e-300):
                raise MaterialError(
                    f"{label} matrix is not symmetric: {prefix}{i + 1}{j + 1} = {val} "
                    f"but {prefix}{j + 1}{i + 1} = {other}"
                )
        else:
            M[j, i] = val
    return M


def parse_material(data: dict, name: Optional[str] = None) -> MaterialConstants:
    """Build constants from an already-parsed material document."""
    try:
        meta = data["meta"]
        density = float(meta["density"])
        elastic = _read_symmetric(data["elastic"], "c", 6, "elastic") * GPA
        piezo = np.zeros((3, 6))
        for key, val in data.get("piezo", {}).items():
            i, j = _voigt_key("e", key, 3, 6)
            piezo[i, j] = float(val)
        perm = _read_symmetric(data["permittivity"], "eps", 3, "permittivity") * EPS0
    except KeyError as exc:
        raise MaterialError(f"missing required field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, MaterialError):
            raise
        raise MaterialError(f"bad numeric value: {exc}") from None
    return MaterialConstants(
        name=str(meta.get("name", name or "unnamed")),
        density=density,
        elastic=elastic,
        piezo=piezo,
        permittivity=perm,
        handedness=str(meta.get("handedness", "none")),
        temperature_label=str(meta.get("temperature_label", "")),
        symmetry_class=str(meta.get("symmetry_class", "1")),
    )


def load_material(path) -> MaterialConstants:
    """Load and validate a TOML material file (format documented in README)."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise MaterialError(f"{path}: cannot parse: {exc}") from None
    try:
        return parse_material(data, name=path.stem)
    except MaterialError as exc:
        raise MaterialError(f"{path}: {exc}") from None


def bundled_material_path(name: str = "quartz_293K") -> Path:
    return Path(__file__).parent / "data" / f"{name}.toml"


def isotropic_material(vl=6000.0, vt=3200.0, density=2700.0, eps_r=1.0, name="isotropic") -> MaterialConstants:
    """Synthetic non-piezoelectric isotropic solid with given bulk velocities."""
    mu = density * vt**2
    lam = density * vl**2 - 2 * mu
    C = np.zeros((6, 6))
    C[:3, :3] = lam
    C[[0, 1, 2], [0, 1, 2]] = lam + 2 * mu
    C[[3, 4, 5], [3, 4, 5]] = mu
    return MaterialConstants(
        name=name,
        density=density,
        elastic=C,
        piezo=np.zeros((3, 6)),
        permittivity=np.eye(3) * eps_r * EPS0,
        symmetry_class="isotropic",
    )
