import numpy as np
import pytest

from udfgen.corpus import (
    FAMILIES,
    OPEN_FAMILIES,
    ShapeSpec,
    analytic_udf,
    build_corpus,
    category_of,
    generate_shape,
    read_manifest,
    write_manifest,
)
from udfgen.geometry import DistanceIndex, sample_surface

from conftest import brute_force_distance


class TestGenerateShape:
    def test_sphere_closed(self):
        mesh = generate_shape(ShapeSpec("sphere", {"radius": 0.5, "n_lat": 40, "n_lon": 40}))
        assert mesh.boundary_edge_count() == 0

    def test_open_disk_boundary_is_rim(self):
        mesh = generate_shape(ShapeSpec("open-disk", {"radius": 0.8, "n_phi": 48}))
        assert mesh.boundary_edge_count() == 48

    def test_wavy_sheet_height_field(self):
        spec = ShapeSpec("wavy-sheet", {"amplitude": 0.2, "frequency": 3.0})
        mesh = generate_shape(spec)
        x, y, z = mesh.vertices.T
        assert np.allclose(z, 0.2 * np.sin(3.0 * x) * np.sin(3.0 * y), atol=1e-12)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_topology_matches_family(self, family):
        mesh = generate_shape(ShapeSpec(family))
        boundary = mesh.boundary_edge_count()
        if family in OPEN_FAMILIES:
            assert boundary > 0
        else:
            assert boundary == 0

    @pytest.mark.parametrize("family", FAMILIES)
    def test_inside_unit_box(self, family):
        mesh = generate_shape(ShapeSpec(family))
        assert np.all(np.abs(mesh.vertices) <= 1.0 + 1e-12)

    def test_degenerate_parameters_rejected(self):
        with pytest.raises(ValueError):
            generate_shape(ShapeSpec("torus", {"major": 0.2, "minor": 0.5}))
        with pytest.raises(ValueError):
            generate_shape(ShapeSpec("sphere", {"radius": -1.0}))

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            ShapeSpec("klein-bottle")


class TestAnalyticUdf:
    def test_sphere_point(self):
        spec = ShapeSpec("sphere", {"radius": 0.5})
        assert analytic_udf(spec, np.array([1.0, 0.0, 0.0])) == pytest.approx(0.5)

    def test_torus_center(self):
        spec = ShapeSpec("torus", {"major": 0.6, "minor": 0.2})
        assert analytic_udf(spec, np.zeros(3)) == pytest.approx(0.4)

    def test_disk_above_and_beside(self):
        spec = ShapeSpec("open-disk", {"radius": 0.8})
        assert analytic_udf(spec, np.array([0.0, 0.0, 0.3])) == pytest.approx(0.3)
        assert analytic_udf(spec, np.array([1.0, 0.0, 0.0])) == pytest.approx(0.2)

    def test_no_closed_form(self):
        with pytest.raises(ValueError):
            analytic_udf(ShapeSpec("wavy-sheet"), np.zeros(3))

    @pytest.mark.parametrize("family,params", [
        ("sphere", {"radius": 0.55}),
        ("torus", {"major": 0.6, "minor": 0.18}),
        ("open-disk", {"radius": 0.7}),
    ])
    def test_mesh_distance_converges_to_analytic(self, family, params):
        spec = ShapeSpec(family, params)
        fine = {"sphere": {"n_lat": 48, "n_lon": 64}, "torus": {"n_u": 64, "n_v": 48},
                "open-disk": {"n_r": 24, "n_phi": 96}}[family]
        mesh = generate_shape(ShapeSpec(family, {**params, **fine}))
        edges = mesh.triangle_corners
        max_edge = max(
            np.linalg.norm(edges[:, i] - edges[:, j], axis=1).max()
            for i, j in [(0, 1), (1, 2), (2, 0)]
        )
        index = DistanceIndex(mesh)
        rng = np.random.default_rng(21)
        pts = rng.uniform(-1.0, 1.0, size=(100, 3))
        exact = analytic_udf(spec, pts)
        approx, _ = index.query_many(pts)
        assert np.all(np.abs(approx - exact) < 2.0 * max_edge)


class TestBuildCorpus:
    def test_balanced_families(self):
        shapes = build_corpus(60, seed=4)
        counts = {}
        for s in shapes:
            counts[s.spec.family] = counts.get(s.spec.family, 0) + 1
        assert all(c == 10 for c in counts.values())
        assert len(counts) == 6

    def test_deterministic(self):
        a = build_corpus(12, seed=9)
        b = build_corpus(12, seed=9)
        for sa, sb in zip(a, b):
            assert sa.spec == sb.spec
            assert np.array_equal(sa.mesh.vertices, sb.mesh.vertices)

    def test_meshes_normalized(self):
        for shape in build_corpus(6, seed=1):
            v = shape.mesh.vertices
            lo, hi = v.min(axis=0), v.max(axis=0)
            assert np.allclose((lo + hi) / 2, 0.0, atol=1e-12)
            assert np.max(hi - lo) == pytest.approx(2.0, abs=1e-12)

    def test_category_ids(self):
        shapes = build_corpus(6, seed=0)
        for s in shapes:
            assert s.spec.category == category_of(s.spec.family)

    def test_manifest_round_trip(self, tmp_path):
        shapes = build_corpus(6, seed=2)
        paths = {s.shape_id: f"objs/{s.shape_id}.obj" for s in shapes}
        manifest = tmp_path / "manifest.json"
        write_manifest(shapes, paths, manifest)
        entries = read_manifest(manifest)
        assert len(entries) == 6
        assert entries[0]["shape_id"] == shapes[0].shape_id
        assert entries[0]["obj_path"] == paths[shapes[0].shape_id]


class TestSampling:
    def test_sampled_cloud_near_surface(self):
        # area-weighted sampling stays exactly on each family's surface
        for family in FAMILIES:
            mesh = generate_shape(ShapeSpec(family))
            pts = sample_surface(mesh, 64, seed=3)
            for p in pts[:8]:
                d, _ = brute_force_distance(mesh, p)
                assert d < 1e-12
