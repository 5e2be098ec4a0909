"""Mahalanobis metric learning from pairwise similarity labels.

Learns a linear map L so that ||L(a - b)|| is small for descriptor pairs
labeled similar and large for pairs labeled dissimilar.  The objective is
the classic large-margin nearest-neighbor loss over an example set X with
labels y(i, j) in {0, 1} (unknown pairs are simply ignored):

    loss(L) = sum_{i, j in N(i)} d2(i, j)
            + push_weight * sum_{i, j in N(i)} sum_{k: y(i,k)=0}
                  max(0, margin + d2(i, j) - d2(i, k))

where d2 is the squared learned distance and N(i) holds example i's
`k_targets` nearest similar peers under the *initial* Euclidean metric
(the standard fixed target-neighbor assignment).  Optimization is plain
gradient descent on L with an adaptive step: the exact loss is evaluated
every iteration, a step is kept only if it lowers the loss, and the step
size halves on rejection.  The gradient uses the set of margin-violating
triples, re-scanned every `imposter_refresh` iterations and masked by the
current margin in between.  Training is deterministic: no randomness is
involved anywhere.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidInputError, TrainingError
from .metrics import MetricModel

_ACCEPT_GROWTH = 1.1
_REJECT_SHRINK = 0.5
_MIN_STEP = 1e-14


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for metric training.

    k_targets:        similar neighbors pulled toward each example
    margin:           required distance-squared gap before a dissimilar
                      example stops being pushed
    push_weight:      weight of the push term relative to the pull term
    max_iters:        gradient steps (0 returns the identity metric)
    initial_step:     starting gradient step size
    imposter_refresh: iterations between full re-scans for violating triples
    """

    k_targets: int = 3
    margin: float = 1.0
    push_weight: float = 1.0
    max_iters: int = 200
    initial_step: float = 1e-2
    imposter_refresh: int = 10

    def __post_init__(self):
        if self.k_targets < 1:
            raise InvalidInputError("k_targets must be >= 1")
        if self.margin <= 0:
            raise InvalidInputError("margin must be positive")
        if self.push_weight < 0:
            raise InvalidInputError("push_weight must be non-negative")
        if self.max_iters < 0:
            raise InvalidInputError("max_iters must be non-negative")
        if self.initial_step <= 0:
            raise InvalidInputError("initial_step must be positive")
        if self.imposter_refresh < 1:
            raise InvalidInputError("imposter_refresh must be >= 1")


@dataclass(frozen=True)
class TrainResult:
    model: MetricModel
    initial_loss: float
    final_loss: float
    loss_history: tuple  # exact loss after each accepted step
    iterations: int
    target_pairs: tuple  # (i, j) pull pairs actually used


def _check_inputs(vectors, label_matrix):
    X = np.asarray(vectors, dtype=np.float64)
    Y = np.asarray(label_matrix)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidInputError("vectors must be (N >= 2, dim)")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("vectors must be finite")
    n = X.shape[0]
    if Y.shape != (n, n):
        raise InvalidInputError(f"label matrix must be ({n}, {n}), got {Y.shape}")
    if not np.isin(Y, (-1, 0, 1)).all():
        raise InvalidInputError("labels must be -1 (unknown), 0, or 1")
    if not np.array_equal(Y, Y.T):
        raise InvalidInputError("label matrix must be symmetric")
    return X, Y.astype(np.int8)


def _target_neighbors(X, Y, k_targets):
    """Fixed pull pairs: each example's k nearest similar peers under the
    Euclidean metric, ties broken by index."""
    n = X.shape[0]
    d0 = cdist(X, X, "sqeuclidean")
    pairs = []
    lonely = []
    for i in range(n):
        peers = np.flatnonzero(Y[i] == 1)
        peers = peers[peers != i]
        if peers.size == 0:
            lonely.append(i)
            continue
        order = sorted(peers.tolist(), key=lambda j: (d0[i, j], j))
        pairs.extend((i, j) for j in order[:k_targets])
    if lonely:
        warnings.warn(
            f"{len(lonely)} example(s) have no similar peers and contribute no pull "
            f"term: indices {lonely[:10]}{'...' if len(lonely) > 10 else ''}",
            stacklevel=3,
        )
    return pairs


def lmnn_loss(matrix, vectors, label_matrix, config=TrainConfig(), target_pairs=None):
    """Exact loss of the map `matrix` on the given examples.

    Exposed separately so the training objective can be checked against
    independent implementations.  `target_pairs` overrides the pull-pair
    assignment (default: recomputed from the inputs)."""
    X, Y = _check_inputs(vectors, label_matrix)
    L = np.asarray(matrix, dtype=np.float64)
    if target_pairs is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            target_pairs = _target_neighbors(X, Y, config.k_targets)
    Z = X @ L.T
    D2 = cdist(Z, Z, "sqeuclidean")
    pull = sum(D2[i, j] for i, j in target_pairs)
    push = 0.0
    for i, j in target_pairs:
        imposters = np.flatnonzero(Y[i] == 0)
        if imposters.size == 0:
            continue
        hinge = config.margin + D2[i, j] - D2[i, imposters]
        push += float(np.sum(hinge[hinge > 0]))
    return float(pull + config.push_weight * push)


def _violating_triples(D2, Y, target_pairs, margin, slack=0.0):
    """Triples (i, j, k) with margin + d2(i,j) - d2(i,k) > -slack."""
    triples = []
    for i, j in target_pairs:
        imposters = np.flatnonzero(Y[i] == 0)
        if imposters.size == 0:
            continue
        hinge = margin + D2[i, j] - D2[i, imposters]
        for k in imposters[hinge > -slack]:
            triples.append((i, j, int(k)))
    return triples


def _gradient(L, X, target_pairs, triples, D2, margin, push_weight):
    """d loss / d L = 2 L M, M assembled from pull pairs and the triples
    whose hinge is currently positive."""
    dim = X.shape[1]
    E = X[[i for i, _ in target_pairs]] - X[[j for _, j in target_pairs]]
    M = E.T @ E
    if triples and push_weight > 0:
        active = [(i, j, k) for i, j, k in triples if margin + D2[i, j] - D2[i, k] > 0]
        if active:
            A = X[[i for i, _, _ in active]] - X[[j for _, j, _ in active]]
            B = X[[i for i, _, _ in active]] - X[[k for _, _, k in active]]
            M = M + push_weight * (A.T @ A - B.T @ B)
    return 2.0 * (L @ M)


def train_lmnn(vectors, label_matrix, config=None):
    """Learn a Mahalanobis metric from labeled example vectors.

    `label_matrix` is (N, N) with 1 for similar pairs, 0 for dissimilar,
    -1 for unknown (diagonal ignored).  Returns a TrainResult whose
    `.model` is the learned full-rank metric; with `max_iters=0` the model
    is the identity map (plain Euclidean in matrix form)."""
    config = config or TrainConfig()
    X, Y = _check_inputs(vectors, label_matrix)
    n, dim = X.shape

    if config.max_iters == 0:
        model = MetricModel("mahalanobis", dim, np.eye(dim))
        return TrainResult(model, 0.0, 0.0, (), 0, ())

    target_pairs = _target_neighbors(X, Y, config.k_targets)
    if not target_pairs:
        raise TrainingError("no similar pairs among the examples; nothing to learn from")

    L = np.eye(dim)
    Z = X @ L.T
    D2 = cdist(Z, Z, "sqeuclidean")
    loss = lmnn_loss(L, X, Y, config, target_pairs)
    initial_loss = loss
    best_loss, best_L = loss, L.copy()
    history = [loss]
    step = config.initial_step
    triples = _violating_triples(D2, Y, target_pairs, config.margin)
    since_refresh = 0

    for _ in range(config.max_iters):
        if since_refresh >= config.imposter_refresh:
            triples = _violating_triples(D2, Y, target_pairs, config.margin)
            since_refresh = 0
        since_refresh += 1
        grad = _gradient(L, X, target_pairs, triples, D2, config.margin, config.push_weight)
        candidate = L - step * grad
        candidate_loss = lmnn_loss(candidate, X, Y, config, target_pairs)
        if np.isfinite(candidate_loss) and candidate_loss < loss:
            L = candidate
            loss = candidate_loss
            Z = X @ L.T
            D2 = cdist(Z, Z, "sqeuclidean")
            history.append(loss)
            step *= _ACCEPT_GROWTH
            if loss < best_loss:
                best_loss, best_L = loss, L.copy()
        else:
            step *= _REJECT_SHRINK
            if step < _MIN_STEP:
                break

    model = MetricModel("mahalanobis", dim, best_L)
    return TrainResult(
        model, float(initial_loss), float(best_loss), tuple(history),
        len(history) - 1, tuple(target_pairs),
    )


def train_from_database(db, ids=None, config=None):
    """Train on a database's descriptors and stored labels.

    `db` needs only `ids()`, `descriptor_matrix(ids)`, and
    `label_matrix(ids)`; unlabeled pairs are ignored."""
    if ids is None:
        ids = db.ids()
    if len(ids) < 2:
        raise TrainingError("need at least two scenes to train a metric")
    X = db.descriptor_matrix(ids)
    Y = db.label_matrix(ids)
    return train_lmnn(X, Y, config)
