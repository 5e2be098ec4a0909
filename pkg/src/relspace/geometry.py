"""Poses, point clouds, solids, and scenes.

Conventions:
  * World frame is right-handed, z up; gravity points along -z.
  * Quaternions are (w, x, y, z), Hamilton product, unit norm.
  * A Pose maps points from its own frame into the parent frame:
    p_parent = R(q) @ p + t.
  * A Scene stores the reference cloud in the reference frame and the
    target cloud in its own local frame together with relative_pose, the
    pose of the target frame expressed in the reference frame.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError

UNIT_TOL = 1e-9
GRAVITY = np.array([0.0, 0.0, -1.0])


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n <= UNIT_TOL:
        raise InvalidInputError("cannot normalize a zero quaternion")
    return q / n


def quat_multiply(q1, q2):
    """Hamilton product q1 * q2 (apply q2 first, then q1)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q):
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n <= UNIT_TOL:
        raise InvalidInputError("rotation axis must be nonzero")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_from_yaw(angle):
    """Rotation about +z (the gravity axis) by `angle` radians."""
    return np.array([np.cos(0.5 * angle), 0.0, 0.0, np.sin(0.5 * angle)])


def quat_canonical(q):
    """Fix the sign ambiguity: first nonzero component made positive."""
    q = np.asarray(q, dtype=np.float64)
    for v in q:
        if v < 0.0:
            return -q
        if v > 0.0:
            return q.copy()
    return q.copy()


def random_quaternion(rng):
    """Uniform random rotation (normalized 4D Gaussian), canonical sign."""
    while True:
        q = rng.standard_normal(4)
        n = np.linalg.norm(q)
        if n > 1e-6:
            return quat_canonical(q / n)


# ---------------------------------------------------------------------------
# pose

def _frozen_array(values, shape, name):
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidInputError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: translation (3,) and unit quaternion (w, x, y, z)."""

    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,), "translation"))
        rot = _frozen_array(self.rotation, (4,), "rotation")
        if abs(np.linalg.norm(rot) - 1.0) > 1e-6:
            raise InvalidInputError("rotation quaternion must have unit norm")
        object.__setattr__(self, "rotation", rot)

    @staticmethod
    def identity():
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_translation(t):
        return Pose(t, np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_yaw(angle, translation=(0.0, 0.0, 0.0)):
        return Pose(translation, quat_from_yaw(angle))

    @staticmethod
    def from_axis_angle(axis, angle, translation=(0.0, 0.0, 0.0)):
        return Pose(translation, quat_from_axis_angle(axis, angle))

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def compose(self, other):
        """self ∘ other: apply `other` first, then `self`."""
        r = quat_multiply(self.rotation, other.rotation)
        t = self.translation + quat_to_matrix(self.rotation) @ other.translation
        return Pose(t, quat_normalize(r))

    def inverse(self):
        rc = quat_conjugate(self.rotation)
        t = -(quat_to_matrix(rc) @ self.translation)
        return Pose(t, rc)

    def apply(self, points):
        """Transform one point (3,) or many (N, 3) into the parent frame."""
        pts = np.asarray(points, dtype=np.float64)
        rotated = pts @ quat_to_matrix(self.rotation).T
        return rotated + self.translation

    def to_json(self):
        return {"translation": [float(v) for v in self.translation],
                "rotation": [float(v) for v in self.rotation]}

    @staticmethod
    def from_json(obj):
        try:
            return Pose(obj["translation"], obj["rotation"])
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed pose object: {exc}") from exc


# ---------------------------------------------------------------------------
# solids: exact signed-distance descriptions used for collision rejection

_SOLID_KINDS = ("box", "cylinder", "bowl")


def _sdf_box(p, half):
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _sdf_cylinder(p, radius, half_height):
    dr = np.hypot(p[..., 0], p[..., 1]) - radius
    dz = np.abs(p[..., 2]) - half_height
    d = np.stack([dr, dz], axis=-1)
    return np.minimum(np.maximum(dr, dz), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)


@dataclass(frozen=True, eq=False)
class Solid:
    """Analytic solid attached to a cloud: kind, parameters, placement pose.

    Parameter conventions (full sizes, meters):
      box:      (length_x, length_y, length_z)
      cylinder: (radius, height)
      bowl:     (outer_radius, inner_radius, height, base_thickness)
        A capped shell: cylinder of outer_radius minus an open cavity of
        inner_radius reaching down to base_thickness above the bottom.
    All solids are centered on their local origin.
    """

    kind: str
    params: tuple
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.kind not in _SOLID_KINDS:
            raise InvalidInputError(f"unknown solid kind {self.kind!r}")
        params = tuple(float(v) for v in self.params)
        expected = {"box": 3, "cylinder": 2, "bowl": 4}[self.kind]
        if len(params) != expected:
            raise InvalidInputError(f"{self.kind} expects {expected} parameters, got {len(params)}")
        if any(v <= 0 for v in params):
            raise InvalidInputError("solid parameters must be positive")
        if self.kind == "bowl":
            r_out, r_in, height, base = params
            if r_in >= r_out:
                raise InvalidInputError("bowl inner radius must be below outer radius")
            if base >= height:
                raise InvalidInputError("bowl base thickness must be below its height")
        object.__setattr__(self, "params", params)

    def signed_distance(self, points):
        """Signed distance (negative inside material) at world-frame points."""
        local = self.pose.inverse().apply(points)
        if self.kind == "box":
            return _sdf_box(local, 0.5 * np.asarray(self.params))
        if self.kind == "cylinder":
            radius, height = self.params
            return _sdf_cylinder(local, radius, 0.5 * height)
        r_out, r_in, height, base = self.params
        outer = _sdf_cylinder(local, r_out, 0.5 * height)
        # Cavity: open cylinder from the base plate to well above the rim.
        cavity_bottom = -0.5 * height + base
        cavity_top = 0.5 * height + r_out
        center = 0.5 * (cavity_bottom + cavity_top)
        shifted = local - np.array([0.0, 0.0, center])
        cavity = _sdf_cylinder(shifted, r_in, 0.5 * (cavity_top - cavity_bottom))
        return np.maximum(outer, -cavity)

    def interior_probes(self):
        """A few points strictly inside the material, in the parent frame.

        Surface samples of two exactly coincident solids all sit at signed
        distance zero, so penetration tests on surface points alone miss
        full overlap; these probes catch it.
        """
        if self.kind == "box":
            local = np.zeros((1, 3))
        elif self.kind == "cylinder":
            local = np.zeros((1, 3))
        else:
            r_out, r_in, height, base = self.params
            r_mid = 0.5 * (r_in + r_out)
            z_wall = 0.5 * base  # halfway up the wall span [base - h/2, h/2]
            local = np.array([
                [0.0, 0.0, -0.5 * height + 0.5 * base],
                [r_mid, 0.0, z_wall],
                [-r_mid, 0.0, z_wall],
                [0.0, r_mid, z_wall],
                [0.0, -r_mid, z_wall],
            ])
        return self.pose.apply(local)

    def transformed(self, pose):
        return replace(self, pose=pose.compose(self.pose))

    def to_json(self):
        return {"kind": self.kind, "params": list(self.params), "pose": self.pose.to_json()}

    @staticmethod
    def from_json(obj):
        try:
            return Solid(obj["kind"], tuple(obj["params"]), Pose.from_json(obj["pose"]))
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed solid object: {exc}") from exc


# ---------------------------------------------------------------------------
# clouds and scenes

@dataclass(frozen=True, eq=False)
class PointCloud:
    """Surface points of one object in its local frame, plus optional solid."""

    points: np.ndarray
    solid: Solid | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise InvalidInputError("points must be a non-empty (N, 3) array")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class Scene:
    """One demonstrated arrangement of a reference and a target object."""

    id: str
    reference: PointCloud
    target: PointCloud
    relative_pose: Pose
    tags: tuple = ()

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise InvalidInputError("scene id must be a non-empty string")
        object.__setattr__(self, "tags", tuple(str(t) for t in self.tags))


def centroid(points):
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    return pts.mean(axis=0)


def bounding_radius(points):
    """Radius of the centroid-centered bounding sphere."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).max())


def transform_cloud(cloud, pose):
    """Apply a pose to a cloud; the attached solid moves with it."""
    solid = cloud.solid.transformed(pose) if cloud.solid is not None else None
    return PointCloud(pose.apply(cloud.points), solid)


def apply_world_pose(scene, pose):
    """Move the whole scene rigidly: bake the pose into the reference cloud
    and pre-compose it onto the relative pose. Used to probe descriptor
    invariances."""
    return Scene(scene.id, transform_cloud(scene.reference, pose), scene.target,
                 pose.compose(scene.relative_pose), scene.tags)


def voxel_downsample(points, voxel):
    """Replace each occupied voxel-grid cell by the centroid of its points.

    Output rows are ordered by lexicographic (ix, iy, iz) cell index, so the
    result is deterministic and re-running at the same voxel size is a no-op
    (each centroid stays inside its own cell).
    """
    if voxel <= 0:
        raise InvalidInputError("voxel size must be positive")
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError("points must be (N, 3)")
    cells = np.floor(pts / voxel).astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    return sums / counts[:, None]


def downsample_cloud(cloud, voxel):
    return PointCloud(voxel_downsample(cloud.points, voxel), cloud.solid)


def collision_check(scene, epsilon=1e-3):
    """True iff the two objects interpenetrate by more than `epsilon`.

    With solid descriptions on both clouds, each object's surface points and
    interior probes are tested against the other solid's signed distance;
    any value below -epsilon is a collision, so resting contact (distance
    zero) stays feasible.  Without solids, the check falls back to the
    minimum cross-object point distance: closer than epsilon counts as a
    collision.
    """
    if epsilon < 0:
        raise InvalidInputError("epsilon must be non-negative")
    ref = scene.reference
    tgt = scene.target
    placed_points = scene.relative_pose.apply(tgt.points)
    if ref.solid is not None and tgt.solid is not None:
        placed_solid = tgt.solid.transformed(scene.relative_pose)
        probes_t = np.vstack([placed_points, placed_solid.interior_probes()])
        if np.any(ref.solid.signed_distance(probes_t) < -epsilon):
            return True
        probes_r = np.vstack([ref.points, ref.solid.interior_probes()])
        return bool(np.any(placed_solid.signed_distance(probes_r) < -epsilon))
    from scipy.spatial import cKDTree

    tree = cKDTree(ref.points)
    dist, _ = tree.query(placed_points, k=1)
    return bool(np.min(dist) < epsilon)
