"""Feature planes: bilinear sampling, wrap policies, set compositions, footprints."""

import math

import numpy as np
import pytest
import torch

from spherefield.planes import (
    CartesianPlaneSet,
    FeaturePlane,
    SpherePlaneSet,
    TriGridSet,
    WrapMode,
    sample_bilinear,
    sample_cartesian_set,
    sample_sphere_set,
    sample_trigrid,
    shared_lookup_fraction,
)


def _plane(rng, h, w, c, wrap_u=WrapMode.CLAMP, wrap_v=WrapMode.CLAMP):
    return FeaturePlane(torch.tensor(rng.normal(size=(h, w, c)), dtype=torch.float64),
                        wrap_u=wrap_u, wrap_v=wrap_v)


def _bilinear_oracle(data: np.ndarray, u: float, v: float, wrap_u: bool, wrap_v: bool):
    """Independent index-arithmetic bilinear lookup."""
    h, w, _ = data.shape

    def axis(coord, n, wrap):
        x = coord * n - 0.5
        if wrap:
            x = x % n
            i0 = int(math.floor(x)) % n
            return i0, (i0 + 1) % n, x - math.floor(x)
        x = min(max(x, 0.0), n - 1.0)
        i0 = int(math.floor(x))
        return i0, min(i0 + 1, n - 1), x - math.floor(x)

    iu0, iu1, fu = axis(u, w, wrap_u)
    iv0, iv1, fv = axis(v, h, wrap_v)
    top = data[iv0, iu0] * (1 - fu) + data[iv0, iu1] * fu
    bot = data[iv1, iu0] * (1 - fu) + data[iv1, iu1] * fu
    return top * (1 - fv) + bot * fv


def test_constant_plane_everywhere():
    plane = FeaturePlane(torch.full((5, 9, 3), 2.5, dtype=torch.float64))
    rng = np.random.default_rng(0)
    u = torch.tensor(rng.uniform(-0.5, 1.5, 50))
    v = torch.tensor(rng.uniform(-0.5, 1.5, 50))
    out = sample_bilinear(plane, u, v)
    assert torch.allclose(out, torch.full((50, 3), 2.5, dtype=torch.float64))


def test_texel_centers_exact():
    rng = np.random.default_rng(1)
    plane = _plane(rng, 6, 8, 2)
    for i in (0, 3, 7):
        for j in (0, 2, 5):
            u = torch.tensor([(i + 0.5) / 8])
            v = torch.tensor([(j + 0.5) / 6])
            out = sample_bilinear(plane, u, v)[0]
            np.testing.assert_allclose(out.numpy(), plane.data[j, i].numpy(), atol=1e-12)


def test_linear_between_centers():
    rng = np.random.default_rng(2)
    plane = _plane(rng, 4, 7, 3)
    for t in (0.25, 0.5, 0.8):
        u = torch.tensor([(2 + 0.5 + t) / 7], dtype=torch.float64)
        v = torch.tensor([(1 + 0.5) / 4], dtype=torch.float64)
        expect = (1 - t) * plane.data[1, 2] + t * plane.data[1, 3]
        np.testing.assert_allclose(sample_bilinear(plane, u, v)[0].numpy(), expect.numpy(),
                                   atol=1e-12)


def test_wrap_matches_oracle_and_is_continuous():
    rng = np.random.default_rng(3)
    plane = _plane(rng, 5, 8, 2, wrap_u=WrapMode.WRAP)
    data = plane.data.numpy()
    for u in (0.0, 0.01, 0.99, 1.0, -0.2, 1.3):
        out = sample_bilinear(plane, torch.tensor([u], dtype=torch.float64),
                              torch.tensor([0.4], dtype=torch.float64))[0].numpy()
        np.testing.assert_allclose(out, _bilinear_oracle(data, u, 0.4, True, False), atol=1e-12)
    # continuity across u = 0/1: jump vanishes with delta
    prev = None
    for delta in (1e-2, 1e-3, 1e-4):
        a = sample_bilinear(plane, torch.tensor([1.0 - delta / 8], dtype=torch.float64),
                            torch.tensor([0.4], dtype=torch.float64))
        b = sample_bilinear(plane, torch.tensor([delta / 8], dtype=torch.float64),
                            torch.tensor([0.4], dtype=torch.float64))
        jump = float(torch.linalg.norm(a - b))
        if prev is not None:
            assert jump < prev
        prev = jump
    assert prev < 1e-4


def test_clamp_edge_discontinuity_exists():
    # with CLAMP the two u-edges hold independent values: no blending across
    rng = np.random.default_rng(4)
    plane = _plane(rng, 5, 8, 2, wrap_u=WrapMode.CLAMP)
    a = sample_bilinear(plane, torch.tensor([1.0], dtype=torch.float64),
                        torch.tensor([0.4], dtype=torch.float64))[0]
    b = sample_bilinear(plane, torch.tensor([0.0], dtype=torch.float64),
                        torch.tensor([0.4], dtype=torch.float64))[0]
    assert float(torch.linalg.norm(a - b)) > 0.1


def test_plane_validation():
    with pytest.raises(ValueError):
        FeaturePlane(torch.zeros(1, 4, 2))
    with pytest.raises(ValueError):
        FeaturePlane(torch.zeros(4, 4))


def test_sphere_set_zero_and_r_invariance():
    rng = np.random.default_rng(5)
    zero = SpherePlaneSet.build(rng, resolution=8, channels=3, std=0.0)
    s = torch.tensor([[0.3, 1.0, 0.5]], dtype=torch.float32)
    assert torch.all(sample_sphere_set(zero, s, 0.5) == 0)

    only_tp = SpherePlaneSet.build(rng, resolution=8, channels=3, std=0.0)
    with torch.no_grad():
        only_tp.p_theta_phi.data.normal_(generator=torch.Generator().manual_seed(0))
    for r in (0.05, 0.2, 0.45):
        s = torch.tensor([[r, 1.0, 0.5]], dtype=torch.float32)
        out = sample_sphere_set(only_tp, s, 0.5)
        s0 = torch.tensor([[0.3, 1.0, 0.5]], dtype=torch.float32)
        assert torch.allclose(out, sample_sphere_set(only_tp, s0, 0.5))


def test_sphere_set_matches_manual_composition():
    rng = np.random.default_rng(6)
    planes = SpherePlaneSet.build(rng, resolution=9, channels=4, dtype=torch.float64)
    r_max = 0.5
    coords = np.stack([rng.uniform(0, 0.5, 20), rng.uniform(0, math.pi, 20),
                       rng.uniform(-math.pi, math.pi, 20)], -1)
    out = sample_sphere_set(planes, torch.tensor(coords), r_max).numpy()
    for i, (r, theta, phi) in enumerate(coords):
        expect = (
            _bilinear_oracle(planes.p_theta_r.data.numpy(), theta / math.pi, r / r_max, False, False)
            + _bilinear_oracle(planes.p_phi_r.data.numpy(), (phi + math.pi) / (2 * math.pi),
                               r / r_max, False, False)
            + _bilinear_oracle(planes.p_theta_phi.data.numpy(), (phi + math.pi) / (2 * math.pi),
                               theta / math.pi, False, False)
        )
        np.testing.assert_allclose(out[i], expect, atol=1e-12)


def test_cartesian_set_mirror_shares_p_xy_and_oracle():
    rng = np.random.default_rng(7)
    planes = CartesianPlaneSet.build(rng, resolution=8, channels=3, dtype=torch.float64)
    p = torch.tensor([[0.12, -0.2, 0.31]], dtype=torch.float64)
    mirrored = p * torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64)
    he = 0.5
    u = (0.12 + he) / (2 * he)
    v = (-0.2 + he) / (2 * he)
    direct = _bilinear_oracle(planes.p_xy.data.numpy(), u, v, False, False)
    for q in (p, mirrored):
        out = sample_cartesian_set(planes, q, he)[0].numpy()
        other = (
            _bilinear_oracle(planes.p_xz.data.numpy(), (float(q[0, 0]) + he) / (2 * he),
                             (float(q[0, 2]) + he) / (2 * he), False, False)
            + _bilinear_oracle(planes.p_yz.data.numpy(), (float(q[0, 1]) + he) / (2 * he),
                               (float(q[0, 2]) + he) / (2 * he), False, False)
        )
        np.testing.assert_allclose(out, direct + other, atol=1e-12)

    zero = CartesianPlaneSet.build(rng, resolution=8, channels=3, std=0.0)
    assert torch.all(sample_cartesian_set(zero, p, he) == 0)


def test_trigrid_depth_one_reduces_to_triplane():
    rng = np.random.default_rng(8)
    grid = TriGridSet.build(rng, resolution=8, channels=3, depth=1, dtype=torch.float64)
    planes = CartesianPlaneSet(
        p_xy=FeaturePlane(grid.g_xy[0]), p_xz=FeaturePlane(grid.g_xz[0]),
        p_yz=FeaturePlane(grid.g_yz[0]))
    pts = torch.tensor(np.random.default_rng(9).uniform(-0.5, 0.5, (30, 3)))
    np.testing.assert_allclose(sample_trigrid(grid, pts, 0.5).numpy(),
                               sample_cartesian_set(planes, pts, 0.5).numpy(), atol=1e-12)


def test_trigrid_constant_stacks():
    grid = TriGridSet(g_xy=torch.full((3, 4, 4, 2), 1.5), g_xz=torch.full((3, 4, 4, 2), 1.5),
                      g_yz=torch.full((3, 4, 4, 2), 1.5))
    pts = torch.tensor([[0.1, -0.3, 0.2]])
    np.testing.assert_allclose(sample_trigrid(grid, pts, 0.5).numpy(), [[4.5, 4.5]], atol=1e-6)


def test_trigrid_matches_trilinear_oracle():
    rng = np.random.default_rng(10)
    grid = TriGridSet.build(rng, resolution=6, channels=2, depth=3, dtype=torch.float64)
    he = 0.5
    pts = rng.uniform(-0.5, 0.5, (15, 3))
    out = sample_trigrid(grid, torch.tensor(pts), he).numpy()

    def depth_lerp(stack, u, v, w):
        d = stack.shape[0]
        x = min(max(w * d - 0.5, 0.0), d - 1.0)
        d0 = int(math.floor(x))
        d1 = min(d0 + 1, d - 1)
        f = x - math.floor(x)
        a = _bilinear_oracle(stack[d0].numpy(), u, v, False, False)
        b = _bilinear_oracle(stack[d1].numpy(), u, v, False, False)
        return a * (1 - f) + b * f

    for i, (x, y, z) in enumerate(pts):
        u, v, w = ((c + he) / (2 * he) for c in (x, y, z))
        expect = (depth_lerp(grid.g_xy, u, v, w) + depth_lerp(grid.g_xz, u, w, v)
                  + depth_lerp(grid.g_yz, v, w, u))
        np.testing.assert_allclose(out[i], expect, atol=1e-12)


def test_sampler_gradients_match_finite_differences():
    from spherefield.optim import finite_difference_check

    report = finite_difference_check(["bilinear", "sphere_set", "cartesian_set", "trigrid"],
                                     dtype=torch.float32, seed=4)
    assert report.passed, report.max_errors


# --- lookup footprints -------------------------------------------------------

def _mirror_pairs(rng, n):
    pts = rng.uniform(-0.4, 0.4, (n, 3))
    pts[:, 2] = np.sign(pts[:, 2]) * np.clip(np.abs(pts[:, 2]), 0.08, None)  # stay off z=0
    return np.stack([pts, pts * np.array([1.0, 1.0, -1.0])], axis=1)


def test_shared_fraction_triplane():
    rng = np.random.default_rng(11)
    pairs = _mirror_pairs(rng, 64)
    res = shared_lookup_fraction("tri-plane", pairs, resolution=64)
    assert res["per_plane"]["p_xy"] == 1.0
    assert res["overall"] >= 1.0 / 3.0


def test_shared_fraction_world_sphere_off_equator():
    rng = np.random.default_rng(12)
    pts = rng.uniform(-0.4, 0.4, (64, 3))
    pts[:, 2] = np.sign(pts[:, 2]) * np.clip(np.abs(pts[:, 2]), 0.15, None)
    pairs = np.stack([pts, pts * np.array([1.0, 1.0, -1.0])], axis=1)
    res = shared_lookup_fraction("sphere", pairs, resolution=64)
    assert res["per_plane"]["p_theta_phi"] == 0.0
    assert res["per_plane"]["p_theta_r"] == 0.0
    assert res["per_plane"]["p_phi_r"] == 1.0  # phi and r unchanged by the mirror


def test_shared_fraction_matches_index_oracle():
    rng = np.random.default_rng(13)
    pairs = _mirror_pairs(rng, 40)
    resolution = 32
    res = shared_lookup_fraction("tri-plane", pairs, resolution=resolution)

    def cell(coord):
        x = min(max(coord * resolution - 0.5, 0.0), resolution - 1.0)
        i0 = int(math.floor(x))
        return i0, min(i0 + 1, resolution - 1)

    shared = 0
    for a, b in pairs:
        for axes in ((0, 1), (0, 2), (1, 2)):
            fa = tuple(cell((a[ax] + 0.5)) for ax in axes)
            fb = tuple(cell((b[ax] + 0.5)) for ax in axes)
            shared += fa == fb
    assert res["overall"] == pytest.approx(shared / (len(pairs) * 3))


def test_shared_fraction_validates_pairs():
    with pytest.raises(ValueError):
        shared_lookup_fraction("tri-plane", np.zeros((3, 2, 2)))
    bad = np.zeros((2, 2, 3))
    bad[0, 0] = [0.1, 0.1, 0.1]
    bad[0, 1] = [0.1, 0.1, 0.3]
    with pytest.raises(ValueError):
        shared_lookup_fraction("tri-plane", bad)
