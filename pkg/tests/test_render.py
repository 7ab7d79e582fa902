import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slat3d.config import SCREEN_FILTER_VARIANCE
from slat3d.decoders import CPRadianceField, GaussianSet, TriMesh, VertexField, flexicubes_extract, sphere_sdf_grid
from slat3d.decoders.radiance import assemble_field
from slat3d.multiview import Camera, project, unproject_depth
from slat3d.render import (gaussian_window, image_l1, image_psnr, image_ssim, rasterize_mesh, raymarch_field,
                           splat_gaussians)
from slat3d.sparse import from_dense

CAM = dict(target=(0, 0, 0), up=(0, 1, 0))


def gset(centers, scales, opac, colors):
    c = np.asarray(centers, float)
    n = len(c)
    s = np.broadcast_to(np.asarray(scales, float).reshape(-1, 1), (n, 3)).copy()
    rot = np.tile([1.0, 0, 0, 0], (n, 1))
    anchors = np.clip(np.floor((c + 0.5) * 64), 0, 63).astype(int)
    return GaussianSet(c, s, rot, np.asarray(opac, float), np.asarray(colors, float), anchors, 64)


# -- splatting ----------------------------------------------------------------------


def test_empty_set_renders_background():
    cam = Camera((0, 0, 2), width=9, height=7, **CAM)
    img = splat_gaussians(GaussianSet.empty(), cam, bg=(0.2, 0.3, 0.4))
    assert np.all(img.alpha == 0) and np.allclose(img.rgb, [0.2, 0.3, 0.4])


def test_single_gaussian_peaks_at_centre_and_falls_off():
    cam = Camera((0, 0, 2), width=33, height=33, **CAM)
    img = splat_gaussians(gset([[0, 0, 0]], [0.05], [1.0], [[1, 1, 1]]), cam, bg=(0, 0, 0))
    lum = img.rgb.sum(-1)
    assert np.unravel_index(np.argmax(lum), lum.shape) == (16, 16)
    row = lum[16, 16:]
    assert np.all(np.diff(row) <= 0) and row[0] > row[-1]
    assert np.allclose(lum, lum[::-1, ::-1])
    assert img.check_invariants() == []


def test_three_gaussians_composite_by_hand():
    cam = Camera((0, 0, 2), width=21, height=21, **CAM)
    f = cam.focal
    zs = [0.3, -0.1, 0.2]  # listed out of order on purpose
    scales = [0.04, 0.06, 0.05]
    ops = [0.6, 0.7, 0.5]
    cols = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    bg = np.array([0.1, 0.2, 0.3])
    img = splat_gaussians(gset([[0, 0, z] for z in zs], scales, ops, cols), cam, bg=bg)
    # pixel one to the right of the centre: screen offset (1, 0)
    expect, trans = np.zeros(3), 1.0
    for i in np.argsort([2 - z for z in zs]):
        depth = 2 - zs[i]
        var = (f * scales[i] / depth) ** 2 + SCREEN_FILTER_VARIANCE
        a = ops[i] * np.exp(-0.5 / var)
        expect += trans * a * np.array(cols[i])
        trans *= 1 - a
    expect += trans * bg
    assert np.allclose(img.rgb[10, 11], expect, atol=1e-12)
    assert img.alpha[10, 11] == pytest.approx(1 - trans, abs=1e-12)


def test_opaque_front_gaussian_stops_compositing():
    cam = Camera((0, 0, 2), width=5, height=5, **CAM)
    g = gset([[0, 0, 0.2], [0, 0, -0.2]], [0.2, 0.2], [1.0, 1.0], [[1, 0, 0], [0, 1, 0]])
    img = splat_gaussians(g, cam, bg=(0, 0, 1))
    assert np.allclose(img.rgb[2, 2], [1, 0, 0])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_splatting_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 30
    c = rng.uniform(-0.3, 0.3, (n, 3))
    c[5, 2] = c[6, 2]  # a depth tie
    c[5, :2] = c[6, :2] + 0.01
    g = gset(c, rng.uniform(0.01, 0.08, n), rng.uniform(0.2, 1, n), rng.uniform(0, 1, (n, 3)))
    q = rng.standard_normal((n, 4))
    g = GaussianSet(g.centers, g.scales * rng.uniform(0.5, 1.5, (n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                    g.opacities, g.colors, g.anchors, 64)
    cam = Camera((0.3, -0.2, 2), width=24, height=20, **CAM)
    a = splat_gaussians(g, cam)
    b = splat_gaussians(g.permuted(rng.permutation(n)), cam)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.alpha, b.alpha)


# -- ray marching -------------------------------------------------------------------


def constant_field(n, rgb, sigma):
    structure = from_dense(np.ones((n, n, n), bool))
    m = structure.num_active
    vx = np.zeros((m, 16, 8))
    vx[:, 0] = 1.0
    vc = np.zeros((m, 16, 4))
    vc[:, 0] = [*rgb, sigma]
    return CPRadianceField(structure, vx, vx.copy(), vx.copy(), vc)


def slab_length(origin, d):
    """Independent ray/cube chord length (Kay-Kajiya slabs)."""
    tmin, tmax = -np.inf, np.inf
    for k in range(3):
        if d[k] == 0:
            if abs(origin[k]) >= 0.5:
                return 0.0
            continue
        a, b = (-0.5 - origin[k]) / d[k], (0.5 - origin[k]) / d[k]
        tmin, tmax = max(tmin, min(a, b)), min(tmax, max(a, b))
    return max(tmax - max(tmin, 0.0), 0.0)


def analytic_alpha(cam, sigma):
    basis = cam.basis()
    out = np.zeros((cam.height, cam.width))
    for i in range(cam.height):
        for j in range(cam.width):
            xc = (j + 0.5 - cam.width / 2) / cam.focal
            yc = -(i + 0.5 - cam.height / 2) / cam.focal
            d = xc * basis[0] + yc * basis[1] + basis[2]
            out[i, j] = 1 - np.exp(-sigma * slab_length(np.array(cam.position), d / np.linalg.norm(d)))
    return out


def test_zero_density_is_background():
    cam = Camera((0, 0, 2), width=6, height=6, **CAM)
    img = raymarch_field(assemble_field(constant_field(2, (1, 0, 0), 0.0)), cam, step=0.05, bg=(0, 1, 0))
    assert np.all(img.alpha == 0) and np.allclose(img.rgb, [0, 1, 0]) and np.all(np.isinf(img.depth))


def test_homogeneous_medium_converges_first_order():
    sigma = 2.0
    cam = Camera((0.4, 0.3, 2), width=24, height=24, **CAM)
    field = assemble_field(constant_field(4, (0.5, 0.5, 0.5), sigma))
    ref = analytic_alpha(cam, sigma)
    steps = [1 / 16, 1 / 32, 1 / 64, 1 / 128]
    errs = []
    for s in steps:
        a = raymarch_field(field, cam, step=s).alpha
        assert np.max(np.abs(a - ref)) <= sigma * s
        errs.append(np.mean(np.abs(a - ref)))
    slope = np.polyfit(np.log(steps), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_raymarch_rejects_bad_step():
    cam = Camera((0, 0, 2), width=2, height=2, **CAM)
    with pytest.raises(ValueError):
        raymarch_field(assemble_field(constant_field(2, (1, 1, 1), 1.0)), cam, step=0.0)


def test_raymarch_depth_of_dense_wall():
    cam = Camera((0, 0, 2), width=5, height=5, **CAM)
    img = raymarch_field(assemble_field(constant_field(2, (1, 1, 1), 2000.0)), cam, step=1e-3)
    assert abs(img.depth[2, 2] - 1.5) < 2e-3
    assert img.alpha[2, 2] > 1 - 1e-4


# -- rasterization ------------------------------------------------------------------


def unit_cube():
    v = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(f))


def test_cube_front_face_depth_is_constant():
    cam = Camera((0, 0, 2), width=40, height=40, **CAM)
    img = rasterize_mesh(unit_cube(), cam)
    m = img.planes["mask"] > 0
    assert m.sum() > 100
    assert np.allclose(img.depth[m], 1.5, atol=1e-12)
    assert np.all(np.isinf(img.depth[~m]))
    assert np.allclose(np.abs(img.planes["normal_geo"][m][:, 2]), 1.0)


def test_triangle_area_matches_projection():
    cam = Camera((0, 0, 2), width=200, height=200, **CAM)
    # place a triangle in the z = 0 plane whose projection covers about half the image
    corners = np.array([[2.3, 2.7], [197.6, 2.2], [2.4, 197.1]])
    basis = cam.basis()
    world = []
    for u, v in corners:
        d = (u - 100) / cam.focal * basis[0] - (v - 100) / cam.focal * basis[1] + basis[2]
        t = -cam.position[2] / d[2]
        world.append(np.array(cam.position) + t * d)
    tri = TriMesh(np.array(world), np.array([[0, 1, 2]]))
    p = project(np.array(world), cam)
    area = 0.5 * abs((p.u[1] - p.u[0]) * (p.v[2] - p.v[0]) - (p.u[2] - p.u[0]) * (p.v[1] - p.v[0]))
    count = rasterize_mesh(tri, cam).planes["mask"].sum()
    assert abs(count - area) / area < 0.01


def test_nearer_triangle_wins_in_any_order():
    cam = Camera((0, 0, 2), width=30, height=30, **CAM)
    far = np.array([[-1, -1, -0.2], [1, -1, -0.2], [0, 1, -0.2]])
    near = far * [0.5, 0.5, 1] + [0, 0, 0.4]
    v = np.concatenate([far, near])
    c = np.concatenate([np.tile([1.0, 0, 0], (3, 1)), np.tile([0, 0, 1.0], (3, 1))])
    a = rasterize_mesh(TriMesh(v, np.array([[0, 1, 2], [3, 4, 5]]), c), cam)
    b = rasterize_mesh(TriMesh(v, np.array([[3, 4, 5], [0, 1, 2]]), c), cam)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.rgb, b.rgb)
    only_far = rasterize_mesh(TriMesh(v, np.array([[0, 1, 2]]), c), cam)
    cover = np.isfinite(a.depth)
    assert np.all(a.depth[cover] <= only_far.depth[cover])
    near_px = np.isclose(a.depth, 1.8)
    assert near_px.sum() > 10 and np.allclose(a.rgb[near_px], [0, 0, 1])


def test_rasterize_sphere_normals_face_camera():
    mesh = flexicubes_extract(VertexField.from_dense(sphere_sdf_grid(32, 0.3)))
    cam = Camera((0, 0, 2), width=32, height=32, **CAM)
    img = rasterize_mesh(mesh, cam)
    m = img.planes["mask"] > 0
    assert img.check_invariants() == []
    pts = unproject_depth(np.where(m, img.depth, np.inf), cam)
    to_cam = np.array(cam.position) - pts
    assert np.all(np.sum(img.planes["normal_geo"][m] * to_cam, 1) > 0)
    with pytest.raises(ValueError):
        rasterize_mesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), cam)


def test_rendered_image_save(tmp_path):
    mesh = unit_cube()
    img = rasterize_mesh(mesh, Camera((0, 0, 2), width=16, height=12, **CAM))
    files = img.save(tmp_path / "cube")
    assert all(f.exists() for f in files) and len(files) == 4


# -- image metrics ------------------------------------------------------------------


def ssim_direct(a, b):
    w = gaussian_window()
    k = w.shape[0]
    vals = []
    for c in range(a.shape[2]):
        for i in range(a.shape[0] - k + 1):
            for j in range(a.shape[1] - k + 1):
                x, y = a[i:i + k, j:j + k, c], b[i:i + k, j:j + k, c]
                mx, my = np.sum(w * x), np.sum(w * y)
                vx, vy = np.sum(w * (x - mx) ** 2), np.sum(w * (y - my) ** 2)
                cxy = np.sum(w * (x - mx) * (y - my))
                vals.append(((2 * mx * my + 1e-4) * (2 * cxy + 9e-4)) / ((mx ** 2 + my ** 2 + 1e-4) * (vx + vy + 9e-4)))
    return np.mean(vals)


def test_identical_images():
    a = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
    assert image_l1(a, a) == 0.0 and image_psnr(a, a) == float("inf")
    assert image_ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_constant_offset_l1():
    a = np.random.default_rng(1).uniform(0, 0.8, (12, 12, 3))
    assert image_l1(a, a + 0.1) == pytest.approx(0.1, abs=1e-15)
    assert image_psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_ssim_matches_direct_formula():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (18, 20, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(image_ssim(a, b) - ssim_direct(a, b)) < 1e-8


def test_metric_shape_mismatch():
    with pytest.raises(ValueError):
        image_l1(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        image_ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
