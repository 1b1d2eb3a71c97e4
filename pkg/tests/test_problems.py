import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspg import mesh as m
from mspg import problems as pr

from conftest import setup


def test_splitmix64_reference_values():
    # published first outputs of SplitMix64 seeded with 0
    assert [hex(v) for v in pr.splitmix64(0, 3)] == [
        "0xe220a8397b1dcdaf", "0x6e789e6aa1b965f4", "0x6c45d188009454f"]


def test_periodic_coefficient_extremes():
    eps = 2.0**-5
    a = pr.periodic_coefficient(eps)
    assert np.isclose(a(np.array([[0.0]]))[0], 1 / 3)
    assert np.isclose(a(np.array([[eps / 2]]))[0], 1.0)
    x = (np.arange(4096) + 0.5) / 4096 * eps
    assert np.isclose(1 / np.mean(1 / a(x[:, None])), 0.5)


def test_periodic_exact_solves_the_ode():
    eps = 2.0**-3
    x = np.linspace(0.01, 0.99, 50)
    d = 1e-5
    A = lambda t: 1 / (2 + np.cos(2 * np.pi * t / eps))
    u = lambda t: pr.periodic_exact(eps, t)
    flux = lambda t: A(t) * (u(t + d) - u(t - d)) / (2 * d)
    assert np.allclose(-(flux(x + d) - flux(x - d)) / (2 * d), 4.0, atol=1e-3)
    assert pr.periodic_exact(eps, 0.0) == 0 and abs(pr.periodic_exact(eps, 1.0)) < 1e-15
    assert np.allclose(pr.periodic_exact_grad(eps, x), (u(x + d) - u(x - d)) / (2 * d), atol=1e-6)


def test_caption_formula_has_flipped_oscillation():
    eps = 2.0**-5
    x = np.linspace(0, 1, 101)
    assert np.allclose(pr.periodic_exact(eps, x) + pr.periodic_caption_formula(eps, x),
                       2 * pr.homogenized_limit(x))


def test_periodic_fine_reference_matches_corrected_formula():
    from mspg.multiscale import reference_solution
    eps = 2.0**-5
    fs, _ = setup(pr.periodic_1d(eps), 2, 12)
    u = reference_solution(fs)
    x = fs.hierarchy.fine.nodes[:, 0]
    M = fs.mass
    rel = lambda e, r: np.sqrt(e @ M @ e / (r @ M @ r))
    ok = rel(u - pr.periodic_exact(eps, x), u)
    caption = rel(u - pr.periodic_caption_formula(eps, x), u)
    assert ok <= 1e-3
    assert caption > 10 * ok  # the printed closed form is off by more than discretization error


def test_periodic_rejections():
    with pytest.raises(pr.ProblemError):
        pr.periodic_1d(0.3)
    with pytest.raises(pr.ProblemError):
        pr.check_periodic_resolution(pr.periodic_1d(2.0**-5), 7)
    pr.check_periodic_resolution(pr.periodic_1d(2.0**-5), 8)


def test_checkerboard_values():
    v = pr.checkerboard_values(7)
    assert v.shape == (64, 64)
    assert v.min() >= 1 and v.max() <= 10
    assert np.array_equal(v, pr.checkerboard_values(7))
    assert np.mean(v != pr.checkerboard_values(8)) > 0.9


def test_checkerboard_sampling_follows_cells():
    p = pr.random_checkerboard(3, grid_level=2)
    vals = pr.checkerboard_values(3, 2)
    msh = m.build_mesh(p.domain, 4)
    a = p.sample_coefficient(msh)
    c = msh.centroids
    assert np.array_equal(a, vals[(c[:, 1] * 4).astype(int), (c[:, 0] * 4).astype(int)])
    with pytest.raises(pr.ProblemError):
        pr.check_checkerboard_resolution(pr.random_checkerboard(1), 5)


def test_helmholtz_1d_exact_satisfies_robin():
    k = 13.0
    p = pr.helmholtz_1d(k)
    one = np.array([[1.0]])
    assert np.isclose(p.exact_grad(one)[0], -1j * k * p.exact(one)[0])
    assert p.exact(np.array([[0.0]]))[0] == 1


def test_scattering_data():
    k = 32.0
    p = pr.scattering_2d(k)
    pts = np.random.default_rng(0).uniform(size=(10, 2))
    assert np.allclose(np.abs(pr.incident_wave(k, pts)), 1)
    v = np.array([[0.25, 0.75]])
    expect = -np.exp(1j * k * (0.25 * np.cos(0.5) + 0.75 * np.sin(0.5)))
    assert np.isclose(p.dirichlet_data(v)[0], expect)


def test_total_field_vanishes_on_scatterer():
    from mspg.multiscale import reference_solution
    p = pr.scattering_2d(4.0)
    fs, _ = setup(p, 2, 4)
    u = reference_solution(fs)
    d = fs.dirichlet_fine
    assert np.abs(u[d] + pr.incident_wave(4.0, fs.hierarchy.fine.nodes[d])).max() < 1e-14


def test_spec_validation():
    with pytest.raises(pr.ProblemError):
        pr.helmholtz_1d(0.0)
    with pytest.raises(pr.ProblemError):
        pr.ProblemSpec("x", pr.HELMHOLTZ, m.square(), kappa=1.0)
    with pytest.raises(pr.ProblemError):
        pr.ProblemSpec("x", "WAVE", m.square())
    bad = pr.ProblemSpec("x", pr.DIFFUSION, m.square(), coefficient=lambda c: -np.ones(len(c)))
    with pytest.raises(pr.ProblemError):
        bad.sample_coefficient(m.build_mesh(m.square(), 1))


def test_canonical_hash():
    assert pr.random_checkerboard(7).digest() == pr.random_checkerboard(7).digest()
    assert pr.random_checkerboard(7).digest() != pr.random_checkerboard(8).digest()
    assert pr.helmholtz_1d(8).digest() != pr.helmholtz_1d(8.5).digest()


def test_config_roundtrip():
    text = pr.write_config({"problem": {"name": "checkerboard", "seed": 9}, "run": {"fine_level": 6}})
    assert text.startswith("[problem]\nname = checkerboard\nseed = 9\n")
    cfg = pr.read_config(text + "# comment\n")
    p = pr.problem_from_config(cfg)
    assert p == pr.random_checkerboard(9)
    assert pr.write_config(cfg) == text
    with pytest.raises(pr.ProblemError):
        pr.problem_from_config(pr.read_config("[problem]\nname = nope\n"))
    with pytest.raises(pr.ProblemError):
        pr.read_config("key without section")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 50))
def test_uniform_mapping_in_range(seed, n):
    u = pr.uniform_from_bits(pr.splitmix64(seed, n), 1.0, 10.0)
    assert np.all((u >= 1) & (u < 10))
