import numpy as np
import pytest

from mdsaw.materials import (
    MaterialError,
    Orientation,
    bond_matrix,
    bundled_material_path,
    device_frame,
    load_material,
    piezo_tensor_to_voigt,
    piezo_voigt_to_tensor,
    rotate_tensors,
    rotate_voigt_batch,
    tensor_to_voigt,
    voigt_to_tensor,
)

GOOD = """
[meta]
name = "test"
density = {density}
symmetry_class = "{cls}"

[elastic]
c11 = 86.74
c12 = {c12}
c13 = 11.91
c14 = -17.91
c22 = 86.74
c23 = 11.91
c24 = 17.91
c33 = 107.2
c44 = 57.94
c55 = 57.94
c56 = -17.91
c66 = {c66}
{extra}

[piezo]
e11 = 0.171
e12 = -0.171
e14 = -0.0406
e25 = 0.0406
e26 = -0.171

[permittivity]
eps11 = 4.428
eps22 = 4.428
eps33 = 4.634
"""


def write(tmp_path, density=2648.0, cls="32", c12=6.99, c66=39.875, extra=""):
    p = tmp_path / "m.toml"
    p.write_text(GOOD.format(density=density, cls=cls, c12=c12, c66=c66, extra=extra))
    return p


def rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_bundled_quartz_loads(quartz):
    assert quartz.symmetry_class == "32"
    assert quartz.density == 2648.0
    assert quartz.elastic[0, 0] == pytest.approx(86.74e9)
    assert quartz.elastic[5, 5] == pytest.approx((quartz.elastic[0, 0] - quartz.elastic[0, 1]) / 2)
    assert quartz.temperature_label == "293 K"


def test_round_trip_file(tmp_path, quartz):
    m = load_material(write(tmp_path))
    assert np.allclose(m.elastic, quartz.elastic)
    assert m.fingerprint() == quartz.fingerprint()


def test_nonsymmetric_elastic_rejected(tmp_path):
    with pytest.raises(MaterialError, match="not symmetric"):
        load_material(write(tmp_path, extra="c21 = 7.5"))


def test_zero_density_rejected(tmp_path):
    with pytest.raises(MaterialError, match="density"):
        load_material(write(tmp_path, density=0.0))


def test_class32_pattern_enforced(tmp_path):
    with pytest.raises(MaterialError, match="class"):
        load_material(write(tmp_path, c66=42.0))
    # advisory for other classes
    m = load_material(write(tmp_path, c66=42.0, cls="1"))
    assert m.elastic[5, 5] == pytest.approx(42e9)


def test_not_positive_definite_rejected(tmp_path):
    with pytest.raises(MaterialError):
        load_material(write(tmp_path, c12=100.0, cls="1"))


def test_parse_error(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[meta\ndensity=")
    with pytest.raises(MaterialError, match="parse"):
        load_material(p)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_material("/nonexistent/quartz.toml")


def test_voigt_round_trip(quartz):
    assert np.array_equal(tensor_to_voigt(voigt_to_tensor(quartz.elastic)), quartz.elastic)
    assert np.array_equal(piezo_tensor_to_voigt(piezo_voigt_to_tensor(quartz.piezo)), quartz.piezo)
    c = voigt_to_tensor(quartz.elastic)
    assert np.allclose(c, c.transpose(1, 0, 2, 3)) and np.allclose(c, c.transpose(2, 3, 0, 1))


def test_identity_rotation(quartz):
    r = rotate_tensors(quartz, Orientation(0, 0, 0))
    assert rel(r.elastic, quartz.elastic) < 1e-15
    assert rel(r.piezo, quartz.piezo) < 1e-15
    assert rel(r.permittivity, quartz.permittivity) < 1e-15
    assert r.density == quartz.density and r.temperature_label == quartz.temperature_label


def test_threefold_symmetry(quartz):
    r = rotate_tensors(quartz, Orientation(0, 0, 120))
    assert rel(r.elastic, quartz.elastic) < 1e-9
    assert rel(r.piezo, quartz.piezo) < 1e-9
    assert rel(r.permittivity, quartz.permittivity) < 1e-9


@pytest.mark.parametrize("phi,theta", [(40.2, 23.4), (-47.25, 0.0), (13.0, 77.0)])
def test_composition(quartz, phi, theta):
    a = rotate_tensors(rotate_tensors(quartz, Orientation(0, phi, 0)), Orientation(0, 0, theta))
    b = rotate_tensors(quartz, Orientation(0, phi, theta))
    assert rel(a.elastic, b.elastic) < 1e-12
    assert rel(a.piezo, b.piezo) < 1e-12
    assert rel(a.permittivity, b.permittivity) < 1e-12


def test_norms_preserved(quartz):
    rng = np.random.default_rng(1)
    c0 = np.linalg.norm(voigt_to_tensor(quartz.elastic))
    e0 = np.linalg.norm(piezo_voigt_to_tensor(quartz.piezo))
    k0 = np.linalg.norm(quartz.permittivity)
    for ang in rng.uniform(-180, 180, (50, 3)):
        r = rotate_tensors(quartz, Orientation(*ang))
        assert abs(np.linalg.norm(voigt_to_tensor(r.elastic)) / c0 - 1) < 1e-12
        assert abs(np.linalg.norm(piezo_voigt_to_tensor(r.piezo)) / e0 - 1) < 1e-12
        assert abs(np.linalg.norm(r.permittivity) / k0 - 1) < 1e-12


def test_bond_matches_full_rotation(quartz):
    rng = np.random.default_rng(2)
    ang = rng.uniform(-90, 90, (20, 3))
    ang[:, 2] += 90.0  # canonical theta, so Orientation keeps the same matrix
    from mdsaw.materials import euler_matrices

    a = euler_matrices(ang[:, 0], ang[:, 1], ang[:, 2])
    C, E, eps = rotate_voigt_batch(quartz, a)
    for k in range(len(ang)):
        r = rotate_tensors(quartz, Orientation(*ang[k]))
        assert rel(C[k], r.elastic) < 1e-12
        assert rel(E[k], r.piezo) < 1e-12
        assert rel(eps[k], r.permittivity) < 1e-12
    M = bond_matrix(a[0])
    assert M.shape == (6, 6)


def test_device_frame_orthonormal():
    rng = np.random.default_rng(3)
    for ang in rng.uniform(-180, 180, (1000, 3)):
        R = device_frame(Orientation(*ang))
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-14
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-14)
    assert np.array_equal(device_frame(Orientation(0, 0, 0)), np.eye(3))


def test_phi90_puts_z_in_wafer_plane():
    R = device_frame(Orientation(0, 90, 0))
    z_dev = R @ np.array([0.0, 0.0, 1.0])
    assert abs(z_dev[2]) < 1e-15  # no component along the surface normal
    assert abs(abs(z_dev[1]) - 1) < 1e-15
    # the surface normal (row 2) is then along -Y in crystal axes
    assert np.allclose(R[2], [0, -1, 0])


def test_theta_rotates_about_normal():
    a = device_frame(Orientation(0, 30, 0))
    b = device_frame(Orientation(0, 30, 50))
    assert np.allclose(a[2], b[2])
    assert np.degrees(np.arccos(a[0] @ b[0])) == pytest.approx(50)


def test_orientation_canonical():
    o = Orientation(0, 40.2, 23.4)
    assert o.as_tuple() == (0.0, 40.2, 23.4)
    assert Orientation.parse(" 0, 40.2 ,23.4") == o
    for ang in [(0, 100, 10), (180, 10, 20), (-120, 300, -500), (0, -90.5, 179.9)]:
        c = Orientation(*ang)
        assert -90 <= c.psi <= 90 and -90 <= c.phi <= 90 and 0 <= c.theta < 180
    # (psi+180, -phi, theta+180) is the same rotation
    assert np.allclose(device_frame(Orientation(10, 20, 30)), Orientation(10, 20, 30).matrix())
    assert Orientation(190, -20, 210) == Orientation(10, 20, 30)
    with pytest.raises(ValueError):
        Orientation.parse("1,2")
    with pytest.raises(ValueError):
        Orientation(float("nan"), 0, 0)


def test_canonical_map_preserves_physics(quartz):
    from mdsaw.surface_wave import solve_directions

    raw = np.array([[0, 130.0, 40.0], [0, 40.0, 200.0], [180, -40.0, 200.0]])
    canon = np.array([Orientation(*r).as_tuple() for r in raw])
    a = solve_directions(quartz, raw).v
    b = solve_directions(quartz, canon).v
    assert np.allclose(a, b, rtol=1e-9)


def test_without_piezo_and_replace(quartz):
    z = quartz.without_piezo()
    assert not z.piezo.any()
    assert z.fingerprint() != quartz.fingerprint()
    with pytest.raises(MaterialError):
        quartz.replace(density=-1.0)
    assert bundled_material_path().exists()
