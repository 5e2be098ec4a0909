"""Pairwise spatial-relation descriptor.

A scene is summarized by three histograms over all point pairs (p_k from
the reference cloud, p_l from the target cloud placed by the relative
pose):

  h_theta: 9 bins of 20 deg over the angle between (p_k - c_k) and
           (p_l - p_k), where c_k is the reference centroid;
  h_phi:   9 bins of 20 deg over the angle between the plane normals
           n1 = (p_k - c_k) x g and n2 = (p_k - c_k) x (p_l - p_k),
           with g the gravity direction;
  h_dist:  21 bins of 6 cm over the floor(|P_k||P_l| / 10) smallest
           pairwise distances; the last bin keeps everything past 1.20 m.

Each histogram is normalized by its own contribution count, so the
descriptor is invariant to uniform point duplication.  Values exactly on
a bin edge belong to the higher bin, except that the final bin of each
histogram is closed.  Pairs whose defining vectors are shorter than 1e-9
(or whose cross products are, for h_phi) are skipped.

The descriptor is invariant to translating the scene and to rotating it
about the gravity axis, but not to arbitrary rotations: h_phi measures
orientation relative to gravity, which is what lets it tell, say, a lean
from a stack.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidSceneError
from .geometry import GRAVITY, PointCloud, Scene, centroid, voxel_downsample

THETA_BINS = 9
PHI_BINS = 9
DIST_BINS = 21
ANGLE_BIN_WIDTH = 20.0  # degrees
DIST_BIN_WIDTH = 0.06   # meters
DIM = THETA_BINS + PHI_BINS + DIST_BINS
DEGENERATE_NORM = 1e-9
DEFAULT_VOXEL = 0.01
DESCRIPTOR_VERSION = "1"

_PAIR_CHUNK = 4_000_000  # max pair entries materialized at once


@dataclass(frozen=True, eq=False)
class RelationDescriptor:
    """Normalized 39-dim descriptor: [h_theta | h_phi | h_dist]."""

    vector: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64)
        if vec.shape != (DIM,):
            raise InvalidInputError(f"descriptor must have shape ({DIM},)")
        if not np.all(np.isfinite(vec)) or np.any(vec < 0):
            raise InvalidInputError("descriptor entries must be finite and non-negative")
        for name, block in (("h_theta", vec[:THETA_BINS]),
                            ("h_phi", vec[THETA_BINS:THETA_BINS + PHI_BINS]),
                            ("h_dist", vec[THETA_BINS + PHI_BINS:])):
            if abs(block.sum() - 1.0) > 1e-9:
                raise InvalidInputError(f"{name} must sum to 1, got {block.sum()!r}")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def h_theta(self):
        return self.vector[:THETA_BINS]

    @property
    def h_phi(self):
        return self.vector[THETA_BINS:THETA_BINS + PHI_BINS]

    @property
    def h_dist(self):
        return self.vector[THETA_BINS + PHI_BINS:]


def angle_theta(p_k, c_k, p_l):
    """Angle (degrees) at p_k between the outward direction from the
    reference centroid and the direction to the target point."""
    a = np.asarray(p_k, dtype=np.float64) - np.asarray(c_k, dtype=np.float64)
    b = np.asarray(p_l, dtype=np.float64) - np.asarray(p_k, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= DEGENERATE_NORM or nb <= DEGENERATE_NORM:
        raise InvalidInputError("degenerate pair: zero-length direction vector")
    return float(np.degrees(np.arccos(np.clip(a.dot(b) / (na * nb), -1.0, 1.0))))


def angle_phi(p_k, c_k, p_l, gravity=GRAVITY):
    """Angle (degrees) between the gravity reference plane and the point-pair
    plane, both anchored on the direction p_k - c_k."""
    a = np.asarray(p_k, dtype=np.float64) - np.asarray(c_k, dtype=np.float64)
    b = np.asarray(p_l, dtype=np.float64) - np.asarray(p_k, dtype=np.float64)
    n1 = np.cross(a, _unit_gravity(gravity))
    n2 = np.cross(a, b)
    m1, m2 = np.linalg.norm(n1), np.linalg.norm(n2)
    if m1 <= DEGENERATE_NORM or m2 <= DEGENERATE_NORM:
        raise InvalidInputError("degenerate pair: undefined plane normal")
    return float(np.degrees(np.arccos(np.clip(n1.dot(n2) / (m1 * m2), -1.0, 1.0))))


def _unit_gravity(gravity):
    g = np.asarray(gravity, dtype=np.float64)
    n = np.linalg.norm(g)
    if g.shape != (3,) or n <= DEGENERATE_NORM:
        raise InvalidInputError("gravity must be a nonzero 3-vector")
    return g / n


def _bin_counts(values, width, nbins):
    """Counts with floor binning; the final bin is closed and absorbs overflow."""
    if values.size == 0:
        return np.zeros(nbins, dtype=np.int64)
    idx = np.minimum((values / width).astype(np.int64), nbins - 1)
    return np.bincount(idx, minlength=nbins)


class ReferenceContext:
    """Reference-side quantities reused across many target placements."""

    def __init__(self, ref_points, gravity=GRAVITY):
        pts = np.asarray(ref_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise InvalidInputError("reference points must be a non-empty (N, 3) array")
        g = _unit_gravity(gravity)
        self.points = pts
        self.centroid = pts.mean(axis=0)
        a = pts - self.centroid
        self.a = a
        self.na = np.linalg.norm(a, axis=1)
        self.valid_a = self.na > DEGENERATE_NORM
        n1 = np.cross(a, g)
        m1 = np.linalg.norm(n1, axis=1)
        self.valid_n1 = m1 > DEGENERATE_NORM
        with np.errstate(invalid="ignore", divide="ignore"):
            self.unit_n1 = np.where(self.valid_n1[:, None], n1 / np.where(m1 > 0, m1, 1.0)[:, None], 0.0)


def histogram_counts(ref_points, tgt_points, gravity=GRAVITY):
    """Raw bin counts and contribution totals for the three histograms.

    Returns (theta_counts, n_theta, phi_counts, n_phi, dist_counts, n_dist).
    """
    ctx = ref_points if isinstance(ref_points, ReferenceContext) else ReferenceContext(ref_points, gravity)
    tgt = np.asarray(tgt_points, dtype=np.float64)
    if tgt.ndim != 2 or tgt.shape[1] != 3 or tgt.shape[0] == 0:
        raise InvalidInputError("target points must be a non-empty (N, 3) array")

    m = ctx.points.shape[0]
    n = tgt.shape[0]
    n_dist_sel = max(1, (m * n) // 10)

    theta_counts = np.zeros(THETA_BINS, dtype=np.int64)
    phi_counts = np.zeros(PHI_BINS, dtype=np.int64)
    n_theta = 0
    n_phi = 0
    smallest = None  # running buffer of the n_dist_sel smallest distances

    chunk = max(1, _PAIR_CHUNK // m)
    for start in range(0, n, chunk):
        block = tgt[start:start + chunk]
        b = block[None, :, :] - ctx.points[:, None, :]
        nb = np.linalg.norm(b, axis=2)

        valid_b = nb > DEGENERATE_NORM
        mask_t = ctx.valid_a[:, None] & valid_b
        if np.any(mask_t):
            dots = np.einsum("id,ijd->ij", ctx.a, b)
            cos_t = dots[mask_t] / (ctx.na[:, None] * nb)[mask_t]
            theta = np.degrees(np.arccos(np.clip(cos_t, -1.0, 1.0)))
            theta_counts += _bin_counts(theta, ANGLE_BIN_WIDTH, THETA_BINS)
            n_theta += theta.size

        n2 = np.cross(ctx.a[:, None, :], b)
        m2 = np.linalg.norm(n2, axis=2)
        mask_p = ctx.valid_n1[:, None] & (m2 > DEGENERATE_NORM)
        if np.any(mask_p):
            dots2 = np.einsum("id,ijd->ij", ctx.unit_n1, n2)
            cos_p = dots2[mask_p] / m2[mask_p]
            phi = np.degrees(np.arccos(np.clip(cos_p, -1.0, 1.0)))
            phi_counts += _bin_counts(phi, ANGLE_BIN_WIDTH, PHI_BINS)
            n_phi += phi.size

        flat = nb.ravel()
        pool = flat if smallest is None else np.concatenate([smallest, flat])
        if pool.size > n_dist_sel:
            pool = np.partition(pool, n_dist_sel - 1)[:n_dist_sel]
        smallest = pool

    dist_counts = _bin_counts(smallest, DIST_BIN_WIDTH, DIST_BINS)
    return theta_counts, n_theta, phi_counts, n_phi, dist_counts, int(smallest.size)


def descriptor_from_counts(counts):
    """Normalize raw counts into a descriptor; empty histograms are an error."""
    theta_counts, n_theta, phi_counts, n_phi, dist_counts, n_dist = counts
    for name, total in (("h_theta", n_theta), ("h_phi", n_phi), ("h_dist", n_dist)):
        if total == 0:
            raise InvalidSceneError(f"no valid point pairs for {name}")
    vec = np.concatenate([
        theta_counts / n_theta,
        phi_counts / n_phi,
        dist_counts / n_dist,
    ])
    return RelationDescriptor(vec)


def compute_descriptor(scene, voxel=DEFAULT_VOXEL, gravity=GRAVITY):
    """Descriptor of a scene: the target cloud is placed by the relative pose
    and compared pairwise against the reference cloud.

    `voxel` downsamples both clouds in their own local frames first; pass
    None to use the raw points (required when comparing descriptors of
    rigidly re-posed copies of one scene, since the downsample grid is
    axis-aligned and would re-tessellate rotated points).
    """
    if not isinstance(scene, Scene):
        raise InvalidInputError("compute_descriptor expects a Scene")
    ref_pts = scene.reference.points
    tgt_pts = scene.target.points
    if voxel is not None:
        ref_pts = voxel_downsample(ref_pts, voxel)
        tgt_pts = voxel_downsample(tgt_pts, voxel)
    if ref_pts.shape[0] == 0 or tgt_pts.shape[0] == 0:
        raise InvalidSceneError("empty cloud after downsampling")
    placed = scene.relative_pose.apply(tgt_pts)
    return descriptor_from_counts(histogram_counts(ref_pts, placed, gravity))
