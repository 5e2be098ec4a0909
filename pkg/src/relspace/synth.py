"""Synthetic tabletop scenes: parametric shapes, surface sampling, and
seeded generators for six canonical spatial relations.

Shapes are boxes, cylinders, and bowls (see relspace.geometry.Solid for
the parameter conventions).  Surface clouds are stratified-random samples
at a configurable density.  Each relation recipe places the target in
contact with the reference — drop heights come from analytic support
extents, so e.g. a unit box placed on a unit box with zero jitter lands
at translation (0, 0, 1) exactly.  Every generated scene is verified
collision-free; candidate poses are redrawn a bounded number of times.
"""

import math
from dataclasses import dataclass

import numpy as np

from .descriptor import DEFAULT_VOXEL
from .errors import GenerationError, InvalidInputError
from .geometry import (
    PointCloud,
    Pose,
    Scene,
    Solid,
    collision_check,
    quat_from_axis_angle,
    quat_from_yaw,
    quat_multiply,
    quat_to_matrix,
)
from .relationdb import RelationDatabase
from .utils import derive_rng

RELATION_KINDS = (
    "on-top",
    "inside",
    "next-to",
    "inclined",
    "on-top-corner",
    "inclined-inside",
)

DEFAULT_DENSITY = 12000.0  # surface points per square meter

_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)


# ---------------------------------------------------------------------------
# shapes


@dataclass(frozen=True)
class ShapeSpec:
    """A parametric shape to be sampled into a surface cloud.

    Same kinds and full-size parameter tuples as geometry.Solid:
      box (lx, ly, lz); cylinder (radius, height);
      bowl (outer_radius, inner_radius, height, base_thickness).
    """

    kind: str
    params: tuple

    def __post_init__(self):
        checked = Solid(self.kind, tuple(self.params))  # validates kind/params
        object.__setattr__(self, "params", checked.params)

    def solid(self):
        return Solid(self.kind, self.params)

    @property
    def half_height(self):
        if self.kind == "box":
            return 0.5 * self.params[2]
        if self.kind == "cylinder":
            return 0.5 * self.params[1]
        return 0.5 * self.params[2]

    @property
    def cavity_radius(self):
        if self.kind != "bowl":
            raise InvalidInputError(f"{self.kind} has no cavity")
        return self.params[1]

    @property
    def cavity_floor_z(self):
        if self.kind != "bowl":
            raise InvalidInputError(f"{self.kind} has no cavity")
        return -0.5 * self.params[2] + self.params[3]

    def footprint_radius(self, rotation=None):
        """Max horizontal distance of the surface from the local origin,
        after the given rotation (upright if None).  Exact for cylinders
        and bowls; the box value is the corner radius."""
        if self.kind == "box":
            half = 0.5 * np.asarray(self.params)
            if rotation is None:
                return float(math.hypot(half[0], half[1]))
            corners = (quat_to_matrix(rotation) @ (_CORNER_SIGNS * half).T).T
            return float(np.max(np.hypot(corners[:, 0], corners[:, 1])))
        radius = self.params[0]
        height = self.params[1] if self.kind == "cylinder" else self.params[2]
        if rotation is None:
            return float(radius)
        axis = quat_to_matrix(rotation)[:, 2]
        return float(0.5 * height * math.hypot(axis[0], axis[1]) + radius)

    def support_z(self, rotation):
        """Distance from the shape's center down to its lowest surface
        point after the given rotation — the drop height that rests it on
        a horizontal plane through z = 0."""
        matrix = quat_to_matrix(rotation)
        if self.kind == "box":
            half = 0.5 * np.asarray(self.params)
            return float(np.abs(matrix[2, :]) @ half)
        radius = self.params[0]
        height = self.params[1] if self.kind == "cylinder" else self.params[2]
        uz = min(1.0, abs(float(matrix[2, 2])))
        return float(0.5 * height * uz + radius * math.sqrt(1.0 - uz * uz))

    def sample_surface(self, rng, density=DEFAULT_DENSITY):
        """Stratified-random surface sample in the local frame, ~`density`
        points per square meter."""
        if density <= 0:
            raise InvalidInputError("density must be positive")
        if self.kind == "box":
            lx, ly, lz = self.params
            hx, hy, hz = 0.5 * lx, 0.5 * ly, 0.5 * lz
            faces = []
            for z, (w, h) in ((hz, (lx, ly)), (-hz, (lx, ly))):
                uv = _stratified_rect(rng, w, h, density)
                faces.append(np.column_stack([uv[:, 0], uv[:, 1], np.full(len(uv), z)]))
            for x in (hx, -hx):
                uv = _stratified_rect(rng, ly, lz, density)
                faces.append(np.column_stack([np.full(len(uv), x), uv[:, 0], uv[:, 1]]))
            for y in (hy, -hy):
                uv = _stratified_rect(rng, lx, lz, density)
                faces.append(np.column_stack([uv[:, 0], np.full(len(uv), y), uv[:, 1]]))
            return np.vstack(faces)
        if self.kind == "cylinder":
            radius, height = self.params
            side = _stratified_cylinder_side(rng, radius, -0.5 * height, 0.5 * height, density)
            top = _with_z(_stratified_disk(rng, radius, density), 0.5 * height)
            bottom = _with_z(_stratified_disk(rng, radius, density), -0.5 * height)
            return np.vstack([side, top, bottom])
        r_out, r_in, height, base = self.params
        floor_z = -0.5 * height + base
        parts = [
            _stratified_cylinder_side(rng, r_out, -0.5 * height, 0.5 * height, density),
            _stratified_cylinder_side(rng, r_in, floor_z, 0.5 * height, density),
            _with_z(_stratified_disk(rng, r_out, density, r_min=r_in), 0.5 * height),
            _with_z(_stratified_disk(rng, r_out, density), -0.5 * height),
            _with_z(_stratified_disk(rng, r_in, density), floor_z),
        ]
        return np.vstack(parts)


def _with_z(xy, z):
    return np.column_stack([xy, np.full(len(xy), z)])


def _stratified_rect(rng, width, height, density):
    """~density points/m² over [-w/2, w/2] x [-h/2, h/2]: one uniform draw
    per grid cell."""
    per_meter = math.sqrt(density)
    nx = max(1, round(width * per_meter))
    ny = max(1, round(height * per_meter))
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    jitter = rng.uniform(size=(nx * ny, 2))
    xs = (ix.ravel() + jitter[:, 0]) / nx * width - 0.5 * width
    ys = (iy.ravel() + jitter[:, 1]) / ny * height - 0.5 * height
    return np.column_stack([xs, ys])


def _stratified_disk(rng, radius, density, r_min=0.0):
    """Stratified sample of the (annular) disk r_min <= r <= radius: jitter
    a square grid and keep in-band points, guaranteeing a minimum of eight
    points on the band's middle circle."""
    pts = _stratified_rect(rng, 2.0 * radius, 2.0 * radius, density)
    norms = np.hypot(pts[:, 0], pts[:, 1])
    kept = pts[(norms >= r_min) & (norms <= radius)]
    if len(kept) < 8:
        angles = (np.arange(8) + rng.uniform(size=8)) / 8.0 * 2.0 * math.pi
        r_mid = 0.5 * (r_min + radius)
        ring = np.column_stack([r_mid * np.cos(angles), r_mid * np.sin(angles)])
        kept = np.vstack([kept, ring]) if len(kept) else ring
    return kept


def _stratified_cylinder_side(rng, radius, z0, z1, density):
    per_meter = math.sqrt(density)
    n_phi = max(3, round(2.0 * math.pi * radius * per_meter))
    n_z = max(1, round((z1 - z0) * per_meter))
    iphi, iz = np.meshgrid(np.arange(n_phi), np.arange(n_z), indexing="ij")
    jitter = rng.uniform(size=(n_phi * n_z, 2))
    phi = (iphi.ravel() + jitter[:, 0]) / n_phi * 2.0 * math.pi
    z = z0 + (iz.ravel() + jitter[:, 1]) / n_z * (z1 - z0)
    return np.column_stack([radius * np.cos(phi), radius * np.sin(phi), z])


# ---------------------------------------------------------------------------
# relation recipes


@dataclass(frozen=True)
class RelationSpec:
    """Placement parameters for one relation kind.

    Angles are radians; lengths are meters.  `lateral_jitter` is the
    half-range of the uniform in-plane offset, `yaw_range` the half-range
    of the target's yaw, `tilt_range` the (low, high) tilt angle for the
    inclined kinds, `gap_range` the surface gap for next-to, and
    `corner_fraction` how far toward the support's rim the corner
    placement sits."""

    kind: str
    lateral_jitter: float = 0.0
    yaw_range: float = math.pi
    tilt_range: tuple = (0.0, 0.0)
    gap_range: tuple = (0.005, 0.035)
    corner_fraction: float = 0.9

    def __post_init__(self):
        if self.kind not in RELATION_KINDS:
            raise InvalidInputError(
                f"unknown relation kind {self.kind!r}; expected one of {RELATION_KINDS}"
            )

    @staticmethod
    def of(relation):
        if isinstance(relation, RelationSpec):
            return relation
        if relation not in DEFAULT_RELATIONS:
            raise InvalidInputError(
                f"unknown relation kind {relation!r}; expected one of {RELATION_KINDS}"
            )
        return DEFAULT_RELATIONS[relation]


DEFAULT_RELATIONS = {
    "on-top": RelationSpec("on-top", lateral_jitter=0.010),
    "on-top-corner": RelationSpec("on-top-corner", lateral_jitter=0.005),
    "next-to": RelationSpec("next-to", gap_range=(0.005, 0.035)),
    "inclined": RelationSpec(
        "inclined", lateral_jitter=0.008, tilt_range=(math.radians(20.0), math.radians(40.0))
    ),
    "inside": RelationSpec("inside"),
    "inclined-inside": RelationSpec(
        "inclined-inside", tilt_range=(math.radians(12.0), math.radians(25.0))
    ),
}

_FIT_MARGIN = 0.002  # radial clearance kept inside cavities, meters


def _draw_yaw(rng, spec):
    return quat_from_yaw(rng.uniform(-spec.yaw_range, spec.yaw_range))


def _recipe_on_top(rng, ref, tgt, spec):
    rotation = _draw_yaw(rng, spec)
    offset = rng.uniform(-spec.lateral_jitter, spec.lateral_jitter, size=2)
    z = ref.half_height + tgt.support_z(rotation)
    return Pose((offset[0], offset[1], z), rotation)


def _recipe_on_top_corner(rng, ref, tgt, spec):
    rotation = _draw_yaw(rng, spec)
    if ref.kind == "box":
        signs = rng.choice([-1.0, 1.0], size=2)
        base = signs * 0.5 * np.asarray(ref.params[:2]) * spec.corner_fraction
    else:
        beta = rng.uniform(0.0, 2.0 * math.pi)
        r = ref.params[0] * spec.corner_fraction
        base = np.array([r * math.cos(beta), r * math.sin(beta)])
    offset = base + rng.uniform(-spec.lateral_jitter, spec.lateral_jitter, size=2)
    z = ref.half_height + tgt.support_z(rotation)
    return Pose((offset[0], offset[1], z), rotation)


def _recipe_next_to(rng, ref, tgt, spec):
    rotation = _draw_yaw(rng, spec)
    beta = rng.uniform(0.0, 2.0 * math.pi)
    gap = rng.uniform(*spec.gap_range)
    d = ref.footprint_radius() + tgt.footprint_radius(rotation) + gap
    z = tgt.half_height - ref.half_height  # both objects rest on the table
    return Pose((d * math.cos(beta), d * math.sin(beta), z), rotation)


def _recipe_inclined(rng, ref, tgt, spec):
    yaw = _draw_yaw(rng, spec)
    beta = rng.uniform(0.0, 2.0 * math.pi)
    tilt = rng.uniform(*spec.tilt_range)
    rotation = quat_multiply(quat_from_axis_angle((math.cos(beta), math.sin(beta), 0.0), tilt), yaw)
    offset = rng.uniform(-spec.lateral_jitter, spec.lateral_jitter, size=2)
    z = ref.half_height + tgt.support_z(rotation)
    return Pose((offset[0], offset[1], z), rotation)


def _cavity_slack(ref, tgt, rotation):
    return ref.cavity_radius - _FIT_MARGIN - tgt.footprint_radius(rotation)


def _recipe_inside(rng, ref, tgt, spec):
    if ref.kind != "bowl":
        raise GenerationError("'inside' needs a reference with a cavity (bowl)")
    rotation = _draw_yaw(rng, spec)
    slack = _cavity_slack(ref, tgt, rotation)
    if slack <= 0:
        raise GenerationError(
            f"target footprint {tgt.footprint_radius(rotation):.3f} m does not fit "
            f"inside cavity radius {ref.cavity_radius:.3f} m"
        )
    rho = 0.7 * slack * math.sqrt(rng.uniform())
    alpha = rng.uniform(0.0, 2.0 * math.pi)
    z = ref.cavity_floor_z + tgt.support_z(rotation)
    return Pose((rho * math.cos(alpha), rho * math.sin(alpha), z), rotation)


def _recipe_inclined_inside(rng, ref, tgt, spec):
    if ref.kind != "bowl":
        raise GenerationError("'inclined-inside' needs a reference with a cavity (bowl)")
    yaw = _draw_yaw(rng, spec)
    beta = rng.uniform(0.0, 2.0 * math.pi)
    tilt = rng.uniform(*spec.tilt_range)
    axis = (math.cos(beta), math.sin(beta), 0.0)
    rotation = None
    for _ in range(8):  # shrink the tilt until the tilted footprint fits
        candidate = quat_multiply(quat_from_axis_angle(axis, tilt), yaw)
        if _cavity_slack(ref, tgt, candidate) > 0:
            rotation = candidate
            break
        tilt *= 0.7
    if rotation is None:
        raise GenerationError(
            f"target does not fit inside cavity radius {ref.cavity_radius:.3f} m at any tilt"
        )
    slack = _cavity_slack(ref, tgt, rotation)
    rho = 0.5 * slack * math.sqrt(rng.uniform())
    alpha = rng.uniform(0.0, 2.0 * math.pi)
    z = ref.cavity_floor_z + tgt.support_z(rotation)
    return Pose((rho * math.cos(alpha), rho * math.sin(alpha), z), rotation)


_RECIPES = {
    "on-top": _recipe_on_top,
    "on-top-corner": _recipe_on_top_corner,
    "next-to": _recipe_next_to,
    "inclined": _recipe_inclined,
    "inside": _recipe_inside,
    "inclined-inside": _recipe_inclined_inside,
}


# ---------------------------------------------------------------------------
# scene and dataset generation


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return derive_rng(int(seed_or_rng), "synth")


def generate_scene(scene_id, relation, ref_spec, tgt_spec, rng, density=DEFAULT_DENSITY,
                   max_attempts=5):
    """One collision-free scene of `relation` between the two shapes.

    `rng` is a numpy Generator or an integer seed.  Placement draws are
    retried up to `max_attempts` times if a candidate pose collides."""
    spec = RelationSpec.of(relation)
    rng = _as_rng(rng)
    reference = PointCloud(ref_spec.sample_surface(rng, density), ref_spec.solid())
    target = PointCloud(tgt_spec.sample_surface(rng, density), tgt_spec.solid())
    last_error = None
    for _ in range(max_attempts):
        try:
            pose = _RECIPES[spec.kind](rng, ref_spec, tgt_spec, spec)
        except GenerationError as exc:
            last_error = exc
            continue
        scene = Scene(scene_id, reference, target, pose, (spec.kind,))
        if not collision_check(scene):
            return scene
        last_error = GenerationError(f"placement collides for scene {scene_id!r}")
    raise GenerationError(
        f"no feasible placement for scene {scene_id!r} after {max_attempts} attempts"
    ) from last_error


def _random_reference_spec(rng, kind):
    if kind in ("inside", "inclined-inside"):
        return _random_bowl(rng)
    roll = rng.uniform()
    if roll < 0.45:
        dims = (rng.uniform(0.08, 0.16), rng.uniform(0.08, 0.16), rng.uniform(0.05, 0.12))
        return ShapeSpec("box", dims)
    if roll < 0.90:
        return ShapeSpec("cylinder", (rng.uniform(0.04, 0.08), rng.uniform(0.05, 0.12)))
    return _random_bowl(rng)


def _random_bowl(rng):
    r_out = rng.uniform(0.06, 0.10)
    wall = rng.uniform(0.008, 0.012)
    height = rng.uniform(0.05, 0.09)
    base = rng.uniform(0.008, 0.012)
    return ShapeSpec("bowl", (r_out, r_out - wall, height, base))


def _random_target_spec(rng, kind, ref_spec):
    if kind in ("inside", "inclined-inside"):
        fit = ref_spec.cavity_radius - 2.0 * _FIT_MARGIN
        if kind == "inclined-inside" or rng.uniform() < 0.5:
            radius = fit * rng.uniform(0.30, 0.50)
            height = rng.uniform(0.03, 0.06)
            return ShapeSpec("cylinder", (radius, height))
        side = fit * rng.uniform(0.55, 1.10)  # upright corner radius <= 0.79 * fit
        return ShapeSpec("box", (side, side, rng.uniform(0.03, 0.06)))
    if rng.uniform() < 0.5:
        dims = (rng.uniform(0.03, 0.07), rng.uniform(0.03, 0.07), rng.uniform(0.03, 0.07))
        return ShapeSpec("box", dims)
    return ShapeSpec("cylinder", (rng.uniform(0.015, 0.035), rng.uniform(0.03, 0.07)))


def generate_dataset(counts, seed=0, density=DEFAULT_DENSITY, descriptor_voxel=DEFAULT_VOXEL,
                     label_pairs=True):
    """A labeled database of random scenes.

    `counts` is either scenes-per-relation (int) or a {relation: count}
    mapping.  Every scene pair gets a ground-truth label: 1 when the two
    scenes show the same relation kind, else 0 (skipped when `label_pairs`
    is false).  Scene randomness is derived per (seed, relation, index),
    so a scene's content does not depend on the other requested counts."""
    if isinstance(counts, int):
        counts = {kind: counts for kind in RELATION_KINDS}
    unknown = set(counts) - set(RELATION_KINDS)
    if unknown:
        raise InvalidInputError(f"unknown relation kinds: {sorted(unknown)}")
    if any(n < 0 for n in counts.values()):
        raise InvalidInputError("scene counts must be non-negative")

    db = RelationDatabase(descriptor_voxel=descriptor_voxel)
    for kind in RELATION_KINDS:
        for index in range(counts.get(kind, 0)):
            scene_id = f"{kind}-{index:03d}"
            rng = derive_rng(seed, "synth", kind, index)
            scene = None
            last_error = None
            for _ in range(4):  # redraw the shapes if placement is infeasible
                try:
                    ref_spec = _random_reference_spec(rng, kind)
                    tgt_spec = _random_target_spec(rng, kind, ref_spec)
                    scene = generate_scene(scene_id, kind, ref_spec, tgt_spec, rng, density)
                    break
                except GenerationError as exc:
                    last_error = exc
            if scene is None:
                raise GenerationError(f"could not generate scene {scene_id!r}") from last_error
            db.add_scene(scene)
    if label_pairs:
        ids = db.ids()
        kinds = {sid: db.scene(sid).tags[0] for sid in ids}
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                db.set_label(ids[a], ids[b], 1 if kinds[ids[a]] == kinds[ids[b]] else 0)
    return db
