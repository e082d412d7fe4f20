"""Command-line interface.

Every command prints a JSON document on stdout and, with ``--out``, writes
its files there. Failures print a JSON error object on stderr and exit with
1 (computation failed) or 2 (bad usage or input).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import FitError, fit_gamma, load_sweep_csv
from .anisotropy import (
    find_md_orientations,
    local_eta_gamma,
    map_parameter_space,
    q_diffraction,
    velocity_profile,
)
from .beamfield import (
    BeamFieldError,
    aperture_window,
    effective_beam_steering,
    eta_eff_sweep,
    propagate,
    write_binary,
    write_csv,
)
from .materials import MaterialError, Orientation, bundled_material_path, load_material
from .surface_wave import DegenerateRoots, NoSurfaceWave, Surface, coupling_k2, saw_velocity

log = logging.getLogger("mdsaw")

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2

UNITS = """\
units:
  angles (psi, phi, theta, theta0)   degrees
  widths (-W, --width)               wavelengths (W/lambda)
  lengths (--zmax, --dx, --dz)       wavelengths
  frequencies, linewidths            Hz (linewidth = kappa_i / 2 pi)
  velocities                         m/s
  k2                                 percent in output
  material file                      elastic GPa, piezo C/m^2, relative permittivity
"""

DEFAULT_MATERIAL = "quartz_293K"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    parameters: dict
    inputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    timestamp: str = ""

    def __post_init__(self):
        if not self.timestamp:
            self.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def as_dict(self):
        return asdict(self)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _material(args):
    spec = args.material or DEFAULT_MATERIAL
    p = Path(spec)
    if not p.exists():
        bundled = bundled_material_path(spec)
        if bundled.exists():
            p = bundled
        else:
            raise FileNotFoundError(f"material file not found: {spec}")
    mat = load_material(p)
    args._inputs["material"] = {"path": str(spec), "sha256": _sha256(p), "fingerprint": mat.fingerprint()}
    return mat


def _orientation(text):
    try:
        return Orientation.parse(text)
    except (ValueError, TypeError):
        raise argparse.ArgumentTypeError(f"expected psi,phi,theta in degrees, got {text!r}") from None


def _floats(n=None):
    def conv(text):
        try:
            vals = [float(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals
    return conv


def _positive(text):
    x = float(text)
    if not x > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return x


def _out_dir(args):
    if not args.out:
        return None
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _params(args):
    skip = {"func", "_inputs", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _finish(args, result: dict, filename: str):
    manifest = RunManifest(args.command, _clean(_params(args)), args._inputs)
    doc = dict(result)
    doc["manifest"] = manifest.as_dict()
    text = dumps(doc)
    out = _out_dir(args)
    if out is not None:
        (out / filename).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _write_manifest(args, out, files):
    m = RunManifest(args.command, _clean(_params(args)), args._inputs).as_dict()
    m["outputs"] = sorted(files)
    (out / "manifest.json").write_text(dumps(m))


# --------------------------------------------------------------------------- commands


def cmd_velocity(args):
    mat = _material(args)
    surface = Surface.SHORTED if args.shorted else Surface.FREE
    sol = saw_velocity(mat, args.orientation, surface, args.electrical)
    v = sol.v_shorted if args.shorted else sol.v_free
    res = {
        "orientation": dict(zip(("psi", "phi", "theta"), args.orientation.as_tuple())),
        "surface": surface.value,
        "electrical": args.electrical,
        "v_mps": v,
        "v_bulk_mps": sol.v_bulk,
        "polarization": sol.polarization.value,
        "u_sagittal": sol.u_sagittal,
        "u_transverse": sol.u_transverse,
        "diagnostics": sol.diagnostics,
    }
    return _finish(args, res, "velocity.json")


def cmd_k2(args):
    mat = _material(args)
    sol = coupling_k2(mat, args.orientation, args.electrical)
    res = {
        "orientation": dict(zip(("psi", "phi", "theta"), args.orientation.as_tuple())),
        "electrical": args.electrical,
        "v_free_mps": sol.v_free,
        "v_shorted_mps": sol.v_shorted,
        "k2_percent": sol.k2_percent,
        "polarization": sol.polarization.value,
        "u_sagittal": sol.u_sagittal,
        "u_transverse": sol.u_transverse,
    }
    return _finish(args, res, "k2.json")


def _cache(args, out):
    if args.cache:
        return Path(args.cache)
    if out is not None:
        return out / "cache"
    return None


def _map(args, mat, out):
    return map_parameter_space(
        mat,
        phi_range=tuple(args.phi_range),
        theta_range=tuple(args.theta_range),
        resolution=args.resolution,
        psi=0.0,
        electrical=args.electrical,
        with_k2=not getattr(args, "no_k2", False),
        jobs=args.jobs,
        cache_dir=_cache(args, out),
        resume=args.resume,
    )


def cmd_map(args):
    mat = _material(args)
    out = _out_dir(args)
    if out is None:
        raise UsageError("map needs --out for its CSV output")
    pm = _map(args, mat, out)
    pm.to_csv(out / "map.csv")
    holes = [{"phi": p, "theta": t, "reason": r} for p, t, r in pm.holes()]
    (out / "holes.json").write_text(dumps({"holes": holes}))
    _write_manifest(args, out, ["map.csv", "holes.json"])
    sys.stdout.write(dumps({
        "points": int(pm.v.size),
        "holes": len(holes),
        "phi": [float(pm.phi[0]), float(pm.phi[-1])],
        "theta": [float(pm.theta[0]), float(pm.theta[-1])],
        "resolution": args.resolution,
        "files": ["map.csv", "holes.json", "manifest.json"],
    }))
    return EXIT_OK


def cmd_find_md(args):
    mat = _material(args)
    out = _out_dir(args)
    pm = _map(args, mat, out)
    cands = find_md_orientations(pm, mat, keep_unconverged=args.keep_unconverged)
    rows = []
    for i, c in enumerate(cands, start=1):
        rows.append({
            "index": i,
            "phi": round(c.orientation.phi, 4),
            "theta": round(c.orientation.theta, 4),
            "abs_deta_dphi": c.sens_eta,
            "abs_dgamma_dphi_per_deg": c.sens_gamma,
            "v_mps": c.velocity,
            "type": c.polarization.value,
            "k2_percent": 100 * c.k2,
            "eta_residual_deg": c.eta_residual,
            "gamma": c.gamma_value,
            "converged": c.converged,
            "note": c.note,
        })
    if out is not None and args.map_csv:
        pm.to_csv(out / "map.csv")
    return _finish(args, {"candidates": rows, "holes": len(pm.holes())}, "candidates.json")


def cmd_qd(args):
    q = q_diffraction(args.gamma, args.width)
    return _finish(args, {"gamma": args.gamma, "w_over_lambda": args.width, "q_d": q if math.isfinite(q) else "inf"}, "qd.json")


def _profile(mat, phi, theta0s, width, psi, electrical, step=0.05):
    half = aperture_window(width) + 1.0
    lo = math.floor((min(theta0s) - half) / step) * step
    hi = math.ceil((max(theta0s) + half) / step) * step
    th = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
    prof = velocity_profile(mat, phi, th, psi=psi, electrical=electrical, periodic=False)
    bad = ~np.isfinite(prof.v)
    if bad.any():
        raise NoSurfaceWave(
            f"velocity profile has {int(bad.sum())} directions without a surface wave "
            f"between theta = {th[bad][0]:.2f} and {th[bad][-1]:.2f} deg"
        )
    return th, prof.v


def cmd_beamfield(args):
    mat = _material(args)
    out = _out_dir(args)
    prof = _profile(mat, args.phi, [args.theta0], args.width, args.psi, args.electrical)
    res = effective_beam_steering(
        prof, args.width, args.theta0, z_range=(args.zmin, args.zmax), peak_mode=args.peaks,
        n_alpha=args.nodes,
    )
    files = []
    if out is not None:
        z = np.arange(0.0, args.zmax + 0.5 * args.dz, args.dz)
        bf = propagate(prof, args.width, args.theta0, z, n_alpha=args.nodes)
        bf.eta_eff, bf.eta_eff_stderr = res.eta_eff, res.stderr
        write_csv(bf, out / "field.csv")
        files.append("field.csv")
        if args.binary:
            write_binary(bf, out / "field.mdbf")
            files.append("field.mdbf")
        _write_manifest(args, out, files + ["beamfield.json"])
    doc = res.as_dict()
    doc.update({"phi": args.phi, "theta0": args.theta0, "width": args.width, "files": files})
    return _finish(args, doc, "beamfield.json")


def cmd_eta_eff_sweep(args):
    mat = _material(args)
    start, stop, step = args.theta0_range
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    if n < 2:
        raise UsageError("theta0 range must hold at least two points")
    theta0s = start + step * np.arange(n)
    prof = _profile(mat, args.phi, theta0s, args.width, args.psi, args.electrical)
    sw = eta_eff_sweep(
        prof, args.width, theta0s, z_range=(args.zmin, args.zmax), peak_mode=args.peaks, n_alpha=args.nodes,
    )
    doc = sw.as_dict()
    doc["phi"] = args.phi
    return _finish(args, doc, "eta_eff_sweep.json")


def cmd_fit_gamma(args):
    path = Path(args.data)
    if not path.exists():
        bundled = bundled_material_path(args.data).with_suffix(".csv")
        if not bundled.exists():
            raise FileNotFoundError(f"data file not found: {args.data}")
        path = bundled
    args._inputs["data"] = {"path": str(args.data), "sha256": _sha256(path)}
    sweep = load_sweep_csv(path)
    predicted = args.predicted_gamma
    if predicted is None and args.orientation is not None:
        mat = _material(args)
        o = args.orientation
        _, g, _ = local_eta_gamma(mat, [[o.phi, o.theta]], psi=o.psi)
        predicted = float(g[0])
    fit = fit_gamma(sweep, floor=not args.no_floor, exclude=args.exclude or (), branch=args.branch, predicted_gamma=predicted)
    doc = fit.as_dict()
    doc["predicted_gamma"] = predicted
    doc["records"] = len(sweep)
    return _finish(args, doc, "fit_gamma.json")


# --------------------------------------------------------------------------- parser


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("-m", "--material", help=f"material TOML file or bundled name (default {DEFAULT_MATERIAL})")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers (default: all CPUs)")
    p.add_argument("--resolution", type=_positive, default=0.25, help="map grid step, degrees (default 0.25)")
    p.add_argument("--electrical", choices=("open", "vacuum"), default="open",
                   help="free-surface electrical model (default open)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = _Parser(
        prog="mdsaw",
        description="Surface-acoustic-wave velocity, beam steering, diffraction and coupling on rotated crystals.",
        epilog=UNITS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=UNITS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("velocity", cmd_velocity, "surface-wave phase velocity for one orientation")
    p.add_argument("-o", "--orientation", type=_orientation, required=True, help="psi,phi,theta")
    p.add_argument("--shorted", action="store_true", help="electrically shorted surface")

    p = add("k2", cmd_k2, "free and shorted velocities and electromechanical coupling")
    p.add_argument("-o", "--orientation", type=_orientation, required=True, help="psi,phi,theta")

    for name, func, help_ in (
        ("map", cmd_map, "velocity, beam steering, diffraction, k2 and polarisation on a (phi, theta) grid"),
        ("find-md", cmd_find_md, "search psi = 0 cuts for eta = 0 and gamma = -1"),
    ):
        p = add(name, func, help_)
        p.add_argument("--phi-range", type=_floats(2), default=[-90.0, 90.0], help="lo,hi (default -90,90)")
        p.add_argument("--theta-range", type=_floats(2), default=[0.0, 180.0], help="lo,hi (default 0,180)")
        p.add_argument("--cache", help="cache directory (default <out>/cache)")
        p.add_argument("--resume", action="store_true", help="reuse cached map blocks")
        if name == "map":
            p.add_argument("--no-k2", action="store_true", help="skip the shorted-surface solve")
        else:
            p.add_argument("--map-csv", action="store_true", help="also write the map CSV")
            p.add_argument("--keep-unconverged", action="store_true", help="report crossings whose refinement failed")

    p = add("qd", cmd_qd, "diffraction-limited quality factor")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--width", "-W", type=_positive, required=True, help="W/lambda")

    for name, func, help_ in (
        ("beamfield", cmd_beamfield, "angular-spectrum beam field and effective beam steering"),
        ("eta-eff-sweep", cmd_eta_eff_sweep, "effective beam steering against launch angle"),
    ):
        p = add(name, func, help_)
        p.add_argument("--phi", type=float, required=True, help="cut angle")
        p.add_argument("--psi", type=float, default=0.0)
        p.add_argument("-W", "--width", type=_positive, required=True, help="aperture W/lambda")
        p.add_argument("--zmin", type=_positive, default=50.0, help="start of the fit range (default 50)")
        p.add_argument("--zmax", type=_positive, default=2000.0, help="end of the fit range (default 2000)")
        p.add_argument("--peaks", choices=("wavefront", "intensity"), default="wavefront",
                       help="longitudinal peak definition (default wavefront)")
        p.add_argument("--nodes", type=int, default=None, help="angular quadrature nodes (default: automatic, at least 4096)")
        if name == "beamfield":
            p.add_argument("--theta0", type=float, required=True, help="launch angle")
            p.add_argument("--dz", type=_positive, default=10.0, help="z step of the exported field (default 10)")
            p.add_argument("--binary", action="store_true", help="also write the binary grid file")
        else:
            p.add_argument("--theta0-range", type=_floats(3), required=True, help="start,stop,step")

    p = add("fit-gamma", cmd_fit_gamma, "fit gamma to an aperture sweep of internal linewidths")
    p.add_argument("--data", required=True, help="CSV with w_over_lambda,kappa_i_hz,f0_hz, or a bundled name such as sweep_synthetic")
    p.add_argument("--no-floor", action="store_true", help="fix the loss floor at zero")
    p.add_argument("--exclude", type=_floats(), help="widths to leave out, comma-separated")
    p.add_argument("--branch", choices=("upper", "lower"), help="gamma >= -1 or gamma <= -1")
    p.add_argument("--predicted-gamma", type=float, help="pick the branch nearer this value")
    p.add_argument("-o", "--orientation", type=_orientation, help="predict gamma from the material at psi,phi,theta")
    return parser


def _error(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _error("UsageError", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args._inputs = {}
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, MaterialError) as exc:
        return _error(type(exc).__name__, exc, EXIT_USAGE)
    except (NoSurfaceWave, DegenerateRoots, FitError, BeamFieldError) as exc:
        return _error(type(exc).__name__, exc, EXIT_COMPUTE)
    except ValueError as exc:
        return _error(type(exc).__name__, exc, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
