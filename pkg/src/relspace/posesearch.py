"""Pose synthesis: find a target placement whose relation to the reference
matches a set of demonstrated descriptors.

The search enumerates a translation grid around the reference centroid
crossed with a set of rotations, scores every candidate by its distance to
the nearest demonstration descriptor, and returns the lowest-loss candidate
that passes collision checking.  Candidates are ranked before any collision
test, so collisions are only evaluated (in ascending loss order) until the
first feasible pose — which is provably the feasible minimum.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .descriptor import (
    DEFAULT_VOXEL,
    ReferenceContext,
    RelationDescriptor,
    compute_descriptor,
    descriptor_from_counts,
    histogram_counts,
)
from .errors import InvalidInputError, InvalidSceneError, NoFeasiblePoseError
from .geometry import (
    GRAVITY,
    PointCloud,
    Pose,
    Scene,
    bounding_radius,
    centroid,
    collision_check,
    quat_from_yaw,
    quat_to_matrix,
    random_quaternion,
    voxel_downsample,
)
from .metrics import MetricModel, distances_to
from .utils import derive_rng

_ROTATION_MODES = ("yaw", "so3")
_COLLISION_MODES = ("lazy", "strict")


def _triple(value, name):
    """Normalize a positive scalar or length-3 sequence to a float 3-tuple."""
    if np.isscalar(value):
        vals = (float(value),) * 3
    else:
        vals = tuple(float(v) for v in value)
        if len(vals) != 3:
            raise InvalidInputError(f"{name} must be a scalar or a length-3 sequence")
    if not all(math.isfinite(v) and v > 0 for v in vals):
        raise InvalidInputError(f"{name} components must be positive and finite")
    return vals


@dataclass(frozen=True)
class SearchConfig:
    """Parameters of the placement search.

    extent            half-width of the translation grid on each axis (m),
                      scalar or per-axis triple; None sizes it automatically
                      to 1.5x the sum of the two objects' bounding radii.
    resolution        translation grid step (m), scalar or per-axis triple.
    rotation_mode     "yaw" enumerates headings in steps of `yaw_step`;
                      "so3" draws `n_rotations` seeded uniform rotations.
    collision_mode    "lazy" stops at the first feasible candidate in loss
                      order; "strict" collision-checks every candidate and
                      reports the feasible count.
    collision_epsilon allowed interpenetration (m); contact stays feasible.
    threads           worker threads for candidate scoring.  Results are
                      identical for any thread count.
    voxel             descriptor downsampling voxel (None = raw points).
    """

    extent: object = None
    resolution: object = 0.03
    rotation_mode: str = "yaw"
    yaw_step: float = math.radians(30.0)
    n_rotations: int = 64
    seed: int = 0
    collision_mode: str = "lazy"
    collision_epsilon: float = 1e-3
    threads: int = 1
    voxel: float | None = DEFAULT_VOXEL

    def __post_init__(self):
        if self.extent is not None:
            object.__setattr__(self, "extent", _triple(self.extent, "extent"))
        object.__setattr__(self, "resolution", _triple(self.resolution, "resolution"))
        if self.rotation_mode not in _ROTATION_MODES:
            raise InvalidInputError(f"rotation_mode must be one of {_ROTATION_MODES}")
        if not (math.isfinite(self.yaw_step) and 0 < self.yaw_step <= 2 * math.pi):
            raise InvalidInputError("yaw_step must lie in (0, 2*pi]")
        if not isinstance(self.n_rotations, int) or self.n_rotations < 1:
            raise InvalidInputError("n_rotations must be a positive integer")
        if self.collision_mode not in _COLLISION_MODES:
            raise InvalidInputError(f"collision_mode must be one of {_COLLISION_MODES}")
        if not (math.isfinite(self.collision_epsilon) and self.collision_epsilon >= 0):
            raise InvalidInputError("collision_epsilon must be non-negative")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise InvalidInputError("threads must be a positive integer")
        if self.voxel is not None and not (math.isfinite(self.voxel) and self.voxel > 0):
            raise InvalidInputError("voxel must be positive or None")


@dataclass(frozen=True)
class PoseCandidate:
    """One scored placement: its pose, descriptor, loss, and feasibility."""

    pose: Pose
    descriptor: RelationDescriptor
    loss: float
    feasible: bool


@dataclass(frozen=True)
class SearchResult:
    """Outcome of a placement search.

    pose / descriptor / loss describe the winning candidate, which is always
    feasible (searches that find nothing feasible raise instead).

    evaluated         number of candidates scored.
    collision_checks  number of candidates collision-tested.
    feasible_count    feasible candidates among all scored (strict mode only).
    translations      size of the translation grid.
    rotations         number of rotations enumerated.
    """

    pose: Pose
    descriptor: RelationDescriptor
    loss: float
    feasible: bool
    evaluated: int
    collision_checks: int
    feasible_count: int | None
    translations: int
    rotations: int

    def candidate(self):
        return PoseCandidate(self.pose, self.descriptor, self.loss, self.feasible)


def candidate_rotations(config=None):
    """The rotation set enumerated by a search, as an (M, 4) quaternion array."""
    cfg = config if config is not None else SearchConfig()
    if cfg.rotation_mode == "yaw":
        n = max(1, int(math.floor(2 * math.pi / cfg.yaw_step + 1e-9)))
        return np.stack([quat_from_yaw(cfg.yaw_step * i) for i in range(n)])
    rng = derive_rng(cfg.seed, "posesearch", "rotations")
    return np.stack([random_quaternion(rng) for _ in range(cfg.n_rotations)])


def _axis_offsets(extent, resolution):
    k = int(math.floor(extent / resolution + 1e-9))
    return resolution * np.arange(-k, k + 1)


def _as_cloud(value, name):
    if isinstance(value, PointCloud):
        return value
    try:
        return PointCloud(value)
    except InvalidInputError as exc:
        raise InvalidInputError(f"{name} must be a PointCloud or an (N, 3) array: {exc}") from exc


def candidate_grid(reference, target, config=None):
    """Translation grid and rotation set a search will enumerate.

    Returns (translations (T, 3), rotations (M, 4)).  Translations are the
    reference centroid plus symmetric per-axis offsets; the centroid itself
    is always on the grid.
    """
    cfg = config if config is not None else SearchConfig()
    ref = _as_cloud(reference, "reference")
    tgt = _as_cloud(target, "target")
    c = centroid(ref.points)
    if cfg.extent is None:
        r = 1.5 * (bounding_radius(ref.points) + bounding_radius(tgt.points))
        extent = (r, r, r)
    else:
        extent = cfg.extent
    axes = [c[i] + _axis_offsets(extent[i], cfg.resolution[i]) for i in range(3)]
    tx, ty, tz = np.meshgrid(*axes, indexing="ij")
    translations = np.stack([tx.ravel(), ty.ravel(), tz.ravel()], axis=1)
    return translations, candidate_rotations(cfg)


def _descriptor_rows(demos, model, voxel):
    """Normalize descriptor-like inputs to an (N, dim) matrix."""
    if isinstance(demos, (RelationDescriptor, Scene, PoseCandidate)) or (
        isinstance(demos, np.ndarray) and demos.ndim == 1
    ):
        demos = [demos]
    rows = []
    for demo in demos:
        if isinstance(demo, Scene):
            demo = compute_descriptor(demo, voxel=voxel)
        if isinstance(demo, PoseCandidate):
            demo = demo.descriptor
        if isinstance(demo, RelationDescriptor):
            demo = demo.vector
        vec = np.asarray(demo, dtype=np.float64)
        if vec.shape != (model.dim,):
            raise InvalidInputError(
                f"descriptor vectors must have shape ({model.dim},), got {vec.shape}"
            )
        rows.append(vec)
    if not rows:
        raise InvalidInputError("at least one demonstration is required")
    return np.stack(rows)


def demo_loss(model, demos, candidate, voxel=DEFAULT_VOXEL):
    """Distance from a candidate descriptor to its nearest demonstration.

    The minimum — never the mean — over the demonstration set, so each
    demonstration acts as a separate mode a candidate may match.
    """
    rows = _descriptor_rows(demos, model, voxel)
    if isinstance(candidate, Scene):
        candidate = compute_descriptor(candidate, voxel=voxel)
    if isinstance(candidate, PoseCandidate):
        candidate = candidate.descriptor
    return float(np.min(distances_to(model, candidate, rows)))


def optimize_pose(reference, target, demos, model, config=None, gravity=GRAVITY):
    """Place `target` relative to `reference` so their relation descriptor is
    as close as possible to the demonstrations.

    reference  PointCloud of the reference object in the world frame; it is
               held stationary.
    target     PointCloud of the object to place, in its local frame.
    demos      demonstration descriptors: RelationDescriptors, descriptor
               vectors, or Scenes (descriptors computed with the configured
               voxel), or a single one of these.
    model      metric used to score candidate descriptors.
    config     SearchConfig; defaults describe a 3 cm / 30 degree scan.

    Returns a SearchResult whose pose is the exact loss minimizer over all
    collision-free grid candidates (ties broken by lexicographic translation,
    then quaternion).  Raises NoFeasiblePoseError when every candidate
    collides; the error carries the best infeasible PoseCandidate and the
    number of candidates scored.
    """
    cfg = config if config is not None else SearchConfig()
    ref = _as_cloud(reference, "reference")
    tgt = _as_cloud(target, "target")
    if not isinstance(model, MetricModel):
        raise InvalidInputError("model must be a MetricModel")
    demo_rows = _descriptor_rows(demos, model, cfg.voxel)

    translations, rotations = candidate_grid(ref, tgt, cfg)
    n_t, n_r = translations.shape[0], rotations.shape[0]
    n = n_t * n_r

    ref_pts = ref.points if cfg.voxel is None else voxel_downsample(ref.points, cfg.voxel)
    tgt_pts = tgt.points if cfg.voxel is None else voxel_downsample(tgt.points, cfg.voxel)
    if ref_pts.shape[0] == 0 or tgt_pts.shape[0] == 0:
        raise InvalidSceneError("empty cloud after downsampling")
    ctx = ReferenceContext(ref_pts, gravity)
    rot_matrices = [quat_to_matrix(q) for q in rotations]
    rotated = [tgt_pts @ m.T for m in rot_matrices]

    def candidate_descriptor(idx):
        ti, ri = divmod(idx, n_r)
        placed = rotated[ri] + translations[ti]
        return descriptor_from_counts(histogram_counts(ctx, placed, gravity))

    losses = np.empty(n, dtype=np.float64)

    def score_range(start, stop):
        for idx in range(start, stop):
            try:
                vec = candidate_descriptor(idx).vector
            except InvalidSceneError:
                losses[idx] = np.inf
                continue
            losses[idx] = np.min(distances_to(model, vec, demo_rows))

    if cfg.threads == 1:
        score_range(0, n)
    else:
        chunk = max(1, -(-n // (cfg.threads * 4)))
        spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for future in [pool.submit(score_range, *span) for span in spans]:
                future.result()

    # Rank by loss, breaking ties lexicographically on translation then
    # quaternion so the winner never depends on enumeration or thread order.
    cand_t = np.repeat(translations, n_r, axis=0)
    cand_q = np.tile(rotations, (n_t, 1))
    order = np.lexsort((
        cand_q[:, 3], cand_q[:, 2], cand_q[:, 1], cand_q[:, 0],
        cand_t[:, 2], cand_t[:, 1], cand_t[:, 0],
        losses,
    ))

    best = None
    best_infeasible = None
    checks = 0
    feasible_count = 0
    for idx in order:
        loss = losses[idx]
        if not np.isfinite(loss):
            break  # infinities sort last; nothing scorable remains
        pose = Pose(cand_t[idx], cand_q[idx])
        checks += 1
        if collision_check(Scene("candidate", ref, tgt, pose), cfg.collision_epsilon):
            if best_infeasible is None:
                best_infeasible = PoseCandidate(
                    pose, candidate_descriptor(idx), float(loss), False
                )
            continue
        feasible_count += 1
        if best is None:
            best = PoseCandidate(pose, candidate_descriptor(idx), float(loss), True)
            if cfg.collision_mode == "lazy":
                break

    if best is None:
        raise NoFeasiblePoseError(
            "no collision-free placement found on the search grid",
            best_infeasible=best_infeasible,
            evaluated_samples=n,
        )
    return SearchResult(
        pose=best.pose,
        descriptor=best.descriptor,
        loss=best.loss,
        feasible=True,
        evaluated=n,
        collision_checks=checks,
        feasible_count=feasible_count if cfg.collision_mode == "strict" else None,
        translations=n_t,
        rotations=n_r,
    )


def average_precision(ranking, relevant):
    """Average precision of a ranked id sequence against a relevant id set."""
    ranked = list(ranking)
    relevant = set(relevant)
    if not relevant:
        raise InvalidInputError("relevant set must be non-empty")
    missing = relevant.difference(ranked)
    if missing:
        raise InvalidInputError(f"relevant ids missing from the ranking: {sorted(missing)}")
    hits = 0
    total = 0.0
    for position, item in enumerate(ranked, start=1):
        if item in relevant:
            hits += 1
            total += hits / position
    return total / len(relevant)


def rank_and_map(candidates, relevant, model, demos, voxel=DEFAULT_VOXEL):
    """Rank identified candidates by demonstration loss and score the ranking.

    candidates  mapping id -> descriptor-like, or an iterable of (id, value)
                pairs; values may be RelationDescriptors, descriptor vectors,
                Scenes, or PoseCandidates.
    relevant    ids that count as correct; must all appear among candidates.

    Returns (ranking, average precision): ids sorted ascending by loss (ties
    keep candidate order), and the mean of the precisions at each relevant
    rank.
    """
    items = list(candidates.items()) if isinstance(candidates, dict) else list(candidates)
    if not items:
        raise InvalidInputError("candidate set must be non-empty")
    ids = [item[0] for item in items]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("candidate ids must be unique")
    rows = _descriptor_rows([item[1] for item in items], model, voxel)
    demo_rows = _descriptor_rows(demos, model, voxel)
    losses = [float(np.min(distances_to(model, row, demo_rows))) for row in rows]
    ranking = tuple(i for _, i in sorted(zip(losses, range(len(ids))), key=lambda p: p[0]))
    ranked_ids = tuple(ids[i] for i in ranking)
    return ranked_ids, average_precision(ranked_ids, relevant)
