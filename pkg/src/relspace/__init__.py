"""Learning and reproducing pairwise spatial relations between 3D objects.

The pipeline: summarize a demonstrated arrangement of two objects as a
39-bin histogram descriptor, learn what "similar relation" means from
labeled pairs with a Mahalanobis metric, interactively refine that notion
from a handful of teacher answers, and search object poses that reproduce
a demonstrated relation in a new scene, rejecting colliding placements.
"""

from .errors import (
    DuplicateIdError,
    GenerationError,
    InvalidInputError,
    InvalidSceneError,
    NoFeasiblePoseError,
    NotFoundError,
    ParseError,
    ProtocolError,
    RelspaceError,
    TrainingError,
)
from .geometry import (
    GRAVITY,
    PointCloud,
    Pose,
    Scene,
    Solid,
    apply_world_pose,
    bounding_radius,
    centroid,
    collision_check,
    downsample_cloud,
    transform_cloud,
    voxel_downsample,
)
from .descriptor import (
    DIM,
    RelationDescriptor,
    angle_phi,
    angle_theta,
    compute_descriptor,
)
from .metrics import MetricModel, distance, euclidean_metric, load_metric, save_metric
from .io import read_cloud, read_cloud_xyz, write_cloud_xyz
from .relationdb import RelationDatabase, ingest_external, load_database, save_database
from .synth import (
    RELATION_KINDS,
    RelationSpec,
    ShapeSpec,
    generate_dataset,
    generate_scene,
)
from .lmnn import TrainConfig, TrainResult, lmnn_loss, train_from_database, train_lmnn
from .teaching import (
    DECISION_LOCAL,
    DECISION_PRIOR,
    FinalizeResult,
    TeachingConfig,
    TeachingSession,
)
from .posesearch import (
    PoseCandidate,
    SearchConfig,
    SearchResult,
    average_precision,
    candidate_grid,
    demo_loss,
    optimize_pose,
    rank_and_map,
)
from .experiments import eval_map, eval_retrieval

__version__ = "0.1.0"
