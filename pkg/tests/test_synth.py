import math

import numpy as np
import pytest
from pytest import approx

from relspace.errors import GenerationError, InvalidInputError
from relspace.geometry import collision_check, quat_to_matrix, random_quaternion
from relspace.synth import (
    DEFAULT_RELATIONS,
    RELATION_KINDS,
    RelationSpec,
    ShapeSpec,
    generate_dataset,
    generate_scene,
)
from relspace.utils import derive_rng

BOX = ShapeSpec("box", (0.12, 0.10, 0.08))
CYL = ShapeSpec("cylinder", (0.05, 0.08))
BOWL = ShapeSpec("bowl", (0.08, 0.07, 0.06, 0.01))


# -- shape helpers ----------------------------------------------------------


class TestShapeSpec:
    def test_validates_via_solid_rules(self):
        with pytest.raises(InvalidInputError):
            ShapeSpec("sphere", (0.1,))
        with pytest.raises(InvalidInputError):
            ShapeSpec("box", (0.1, -0.1, 0.1))
        with pytest.raises(InvalidInputError):
            ShapeSpec("bowl", (0.05, 0.07, 0.06, 0.01))  # inner >= outer

    def test_half_height(self):
        # [TRIVIAL] half the z-extent of each shape.
        assert BOX.half_height == approx(0.04)
        assert CYL.half_height == approx(0.04)
        assert BOWL.half_height == approx(0.03)

    def test_cavity_properties(self):
        # [TRIVIAL] bowl (0.08, 0.07, 0.06, 0.01): floor at -0.03 + 0.01.
        assert BOWL.cavity_radius == approx(0.07)
        assert BOWL.cavity_floor_z == approx(-0.02)
        with pytest.raises(InvalidInputError):
            BOX.cavity_radius
        with pytest.raises(InvalidInputError):
            CYL.cavity_floor_z

    def test_support_z_box_matches_corner_minimum(self):
        # [DERIVED] oracle: lowest rotated corner, computed independently.
        rng = derive_rng(11, "support-box")
        half = 0.5 * np.asarray(BOX.params)
        corners = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        ) * half
        for _ in range(20):
            q = random_quaternion(rng)
            lowest = -np.min((quat_to_matrix(q) @ corners.T)[2])
            assert BOX.support_z(q) == approx(lowest, abs=1e-12)

    def test_support_z_cylinder_matches_dense_sample(self):
        # [DERIVED] oracle: minimum z over a dense parametric surface sample.
        rng = derive_rng(11, "support-cyl")
        radius, height = CYL.params
        phi = np.linspace(0.0, 2 * math.pi, 720, endpoint=False)
        rim = np.column_stack([radius * np.cos(phi), radius * np.sin(phi)])
        surface = np.vstack(
            [np.column_stack([rim, np.full(len(rim), z)]) for z in (-height / 2, height / 2)]
        )
        for _ in range(20):
            q = random_quaternion(rng)
            lowest = -np.min((quat_to_matrix(q) @ surface.T)[2])
            assert CYL.support_z(q) == approx(lowest, abs=1e-4)
            assert CYL.support_z(q) >= lowest - 1e-12  # never under-estimates

    def test_support_z_upright_is_half_height(self):
        up = np.array([1.0, 0.0, 0.0, 0.0])
        for spec in (BOX, CYL, BOWL):
            assert spec.support_z(up) == approx(spec.half_height, abs=1e-15)

    def test_footprint_radius_bounds_surface(self):
        # Footprint must dominate the horizontal reach of every surface point.
        rng = derive_rng(12, "footprint")
        for spec in (BOX, CYL, BOWL):
            pts = spec.sample_surface(derive_rng(12, "fp", spec.kind), density=60000)
            for _ in range(10):
                q = random_quaternion(rng)
                rotated = (quat_to_matrix(q) @ pts.T).T
                reach = np.hypot(rotated[:, 0], rotated[:, 1]).max()
                assert reach <= spec.footprint_radius(q) + 1e-9
        assert BOX.footprint_radius() == approx(math.hypot(0.06, 0.05))
        assert CYL.footprint_radius() == approx(0.05)
        assert BOWL.footprint_radius() == approx(0.08)


class TestSurfaceSampling:
    @pytest.mark.parametrize("spec", [BOX, CYL, BOWL], ids=lambda s: s.kind)
    def test_samples_lie_on_surface(self, spec):
        pts = spec.sample_surface(derive_rng(3, "surf", spec.kind))
        sdf = spec.solid().signed_distance(pts)
        assert np.max(np.abs(sdf)) < 1e-9

    def test_count_tracks_area_density(self):
        # [DERIVED] box surface area 2(ab+bc+ca); stratified grids match it.
        lx, ly, lz = BOX.params
        area = 2 * (lx * ly + ly * lz + lz * lx)
        density = 30000.0
        pts = BOX.sample_surface(derive_rng(4, "count"), density=density)
        assert len(pts) == approx(area * density, rel=0.25)

    def test_seeded_and_deterministic(self):
        a = BOWL.sample_surface(derive_rng(5, "det"))
        b = BOWL.sample_surface(derive_rng(5, "det"))
        assert np.array_equal(a, b)

    def test_rejects_bad_density(self):
        with pytest.raises(InvalidInputError):
            BOX.sample_surface(derive_rng(0), density=0.0)


# -- relation recipes -------------------------------------------------------


class TestRecipes:
    def test_unit_box_on_top_is_exact(self):
        # [DERIVED] zero jitter: contact at half-height + half-height = 1,
        # yaw 0 -> identity quaternion; both exact in floating point.
        box = ShapeSpec("box", (1.0, 1.0, 1.0))
        spec = RelationSpec("on-top", lateral_jitter=0.0, yaw_range=0.0)
        scene = generate_scene("toy", spec, box, box, derive_rng(0, "toy"), density=500)
        assert np.array_equal(scene.relative_pose.translation, [0.0, 0.0, 1.0])
        assert np.array_equal(scene.relative_pose.rotation, [1.0, 0.0, 0.0, 0.0])

    def test_on_top_rests_on_support_plane(self):
        for i in range(8):
            scene = generate_scene(f"s{i}", "on-top", BOX, CYL, derive_rng(20, "ontop", i))
            placed = scene.relative_pose.apply(scene.target.points)
            top = BOX.half_height
            assert placed[:, 2].min() >= top - 1e-9
            assert placed[:, 2].min() <= top + 0.004  # sampling misses the exact low point

    def test_inclined_is_tilted_and_rests_on_plane(self):
        for i in range(8):
            scene = generate_scene(f"s{i}", "inclined", BOX, CYL, derive_rng(21, "inc", i))
            axis = quat_to_matrix(scene.relative_pose.rotation)[:, 2]
            tilt = math.degrees(math.acos(min(1.0, abs(axis[2]))))
            assert 20.0 - 1e-6 <= tilt <= 40.0 + 1e-6
            placed = scene.relative_pose.apply(scene.target.points)
            assert placed[:, 2].min() >= BOX.half_height - 1e-9

    def test_inside_contained_in_cavity(self):
        small = ShapeSpec("cylinder", (0.02, 0.04))
        for i in range(8):
            scene = generate_scene(f"s{i}", "inside", BOWL, small, derive_rng(22, "in", i))
            placed = scene.relative_pose.apply(scene.target.points)
            assert np.hypot(placed[:, 0], placed[:, 1]).max() < BOWL.cavity_radius
            assert placed[:, 2].min() >= BOWL.cavity_floor_z - 1e-9

    def test_inclined_inside_tilted_and_contained(self):
        small = ShapeSpec("cylinder", (0.02, 0.04))
        for i in range(8):
            scene = generate_scene(
                f"s{i}", "inclined-inside", BOWL, small, derive_rng(23, "iin", i)
            )
            placed = scene.relative_pose.apply(scene.target.points)
            assert np.hypot(placed[:, 0], placed[:, 1]).max() < BOWL.cavity_radius
            axis = quat_to_matrix(scene.relative_pose.rotation)[:, 2]
            assert abs(axis[2]) < 1.0 - 1e-6  # actually tilted

    def test_next_to_keeps_surface_gap(self):
        from scipy.spatial import cKDTree

        for i in range(8):
            scene = generate_scene(f"s{i}", "next-to", BOX, CYL, derive_rng(24, "next", i))
            placed = scene.relative_pose.apply(scene.target.points)
            gap = cKDTree(scene.reference.points).query(placed, k=1)[0].min()
            assert gap >= 0.004  # configured minimum gap minus sampling slack
            # both objects stand on the table plane
            assert placed[:, 2].min() == approx(-BOX.half_height, abs=0.004)

    def test_inside_requires_cavity(self):
        with pytest.raises(GenerationError):
            generate_scene("bad", "inside", BOX, CYL, derive_rng(25, "bad"))

    def test_oversized_target_cannot_fit(self):
        big = ShapeSpec("cylinder", (0.09, 0.04))
        with pytest.raises(GenerationError):
            generate_scene("bad", "inside", BOWL, big, derive_rng(26, "big"))

    def test_unknown_relation_rejected(self):
        with pytest.raises(InvalidInputError):
            RelationSpec.of("under")
        with pytest.raises(InvalidInputError):
            RelationSpec("under")

    def test_defaults_cover_all_kinds(self):
        assert set(DEFAULT_RELATIONS) == set(RELATION_KINDS)


# -- dataset ----------------------------------------------------------------


class TestDataset:
    def test_counts_tags_and_complete_labels(self):
        db = generate_dataset({"on-top": 3, "inside": 2, "next-to": 2}, seed=9)
        assert len(db) == 7
        ids = db.ids()
        assert sum(1 for s in ids if db.scene(s).tags == ("on-top",)) == 3
        assert db.label_count() == 7 * 6 // 2
        assert db.label("on-top-000", "on-top-001") == 1
        assert db.label("on-top-000", "inside-000") == 0

    def test_all_scenes_collision_free(self):
        db = generate_dataset(3, seed=13)
        assert len(db) == 3 * len(RELATION_KINDS)
        for sid in db.ids():
            assert not collision_check(db.scene(sid)), sid

    def test_bitwise_deterministic(self):
        a = generate_dataset(2, seed=31)
        b = generate_dataset(2, seed=31)
        assert a.ids() == b.ids()
        for sid in a.ids():
            sa, sb = a.scene(sid), b.scene(sid)
            assert np.array_equal(sa.reference.points, sb.reference.points)
            assert np.array_equal(sa.target.points, sb.target.points)
            assert np.array_equal(sa.relative_pose.translation, sb.relative_pose.translation)
            assert np.array_equal(sa.relative_pose.rotation, sb.relative_pose.rotation)
        assert a.labeled_pairs() == b.labeled_pairs()

    def test_scene_streams_independent_of_other_counts(self):
        full = generate_dataset(2, seed=31)
        partial = generate_dataset({"on-top": 2, "inside": 1}, seed=31)
        for sid in ("on-top-001", "inside-000"):
            assert np.array_equal(
                full.scene(sid).target.points, partial.scene(sid).target.points
            )
            assert np.array_equal(
                full.scene(sid).relative_pose.rotation,
                partial.scene(sid).relative_pose.rotation,
            )

    def test_validates_counts(self):
        with pytest.raises(InvalidInputError):
            generate_dataset({"floating": 2}, seed=0)
        with pytest.raises(InvalidInputError):
            generate_dataset({"on-top": -1}, seed=0)

    def test_label_pairs_optional(self):
        db = generate_dataset({"on-top": 2}, seed=0, label_pairs=False)
        assert db.label_count() == 0
