"""Distances between relation descriptors.

Seven kinds are supported.  `euclidean`, `correlation`, and `mahalanobis`
operate on the raw 39-vector; `bhattacharyya`, `kl`, and `js` first
renormalize it to a probability vector (the three blocks sum to 3);
`chi-square` uses the raw vector with the 0/0 := 0 convention.  `kl` is
the only asymmetric kind and smooths both inputs with eps = 1e-6 before
taking the log ratio.  `mahalanobis` is d(a, b) = ||L (a - b)|| for a
learned square matrix L.
"""

from dataclasses import dataclass

import numpy as np

from . import descriptor as _descriptor
from .errors import InvalidInputError
from .utils import read_json, write_json

KL_EPSILON = 1e-6

METRIC_KINDS = (
    "euclidean",
    "chi-square",
    "bhattacharyya",
    "kl",
    "js",
    "correlation",
    "mahalanobis",
)


@dataclass(frozen=True, eq=False)
class MetricModel:
    """A distance function over descriptors: a kind plus, for the learned
    Mahalanobis kind, the linear map L (dim x dim, row-major in files)."""

    kind: str
    dim: int = _descriptor.DIM
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise InvalidInputError(f"unknown metric kind {self.kind!r}")
        if self.dim <= 0:
            raise InvalidInputError("metric dim must be positive")
        if self.kind == "mahalanobis":
            if self.matrix is None:
                raise InvalidInputError("mahalanobis metric requires a matrix")
            mat = np.array(self.matrix, dtype=np.float64)
            if mat.shape != (self.dim, self.dim):
                raise InvalidInputError(f"matrix must be ({self.dim}, {self.dim})")
            if not np.all(np.isfinite(mat)):
                raise InvalidInputError("matrix must be finite")
            mat.setflags(write=False)
            object.__setattr__(self, "matrix", mat)
        elif self.matrix is not None:
            raise InvalidInputError(f"{self.kind} metric takes no matrix")


def euclidean_metric(dim=_descriptor.DIM):
    return MetricModel("euclidean", dim)


def _as_distribution(v):
    total = v.sum()
    if total <= 0:
        raise InvalidInputError("distribution distance needs a positive-sum vector")
    return v / total


def _d_euclidean(a, b):
    return float(np.linalg.norm(a - b))


def _d_chi_square(a, b):
    s = a + b
    num = (a - b) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(s > 0, num / np.where(s > 0, s, 1.0), 0.0)
    return float(0.5 * terms.sum())


def _d_bhattacharyya(a, b):
    p, q = _as_distribution(a), _as_distribution(b)
    bc = np.sqrt(p * q).sum()
    if bc <= 0:
        return float(np.inf)
    return float(max(0.0, -np.log(bc)))


def _d_kl(a, b):
    p, q = _as_distribution(a), _as_distribution(b)
    n = p.size
    p = (p + KL_EPSILON) / (1.0 + n * KL_EPSILON)
    q = (q + KL_EPSILON) / (1.0 + n * KL_EPSILON)
    return float(np.sum(p * np.log(p / q)))


def _d_js(a, b):
    p, q = _as_distribution(a), _as_distribution(b)
    m = 0.5 * (p + q)
    # 0 * log(0) := 0; m is positive wherever p or q is.
    def half(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / m[nz])))
    return 0.5 * half(p) + 0.5 * half(q)


def _d_correlation(a, b):
    da = a - a.mean()
    db = b - b.mean()
    denom = np.linalg.norm(da) * np.linalg.norm(db)
    if denom <= 0:
        raise InvalidInputError("correlation distance undefined for constant vectors")
    r = float(np.clip(da.dot(db) / denom, -1.0, 1.0))
    return 1.0 - r


_BASE_DISPATCH = {
    "euclidean": _d_euclidean,
    "chi-square": _d_chi_square,
    "bhattacharyya": _d_bhattacharyya,
    "kl": _d_kl,
    "js": _d_js,
    "correlation": _d_correlation,
}


def _check_vector(v, dim, name):
    arr = np.asarray(v, dtype=np.float64)
    if isinstance(v, _descriptor.RelationDescriptor):
        arr = v.vector
    if arr.shape != (dim,):
        raise InvalidInputError(f"{name} must have shape ({dim},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite")
    return arr


def distance(model, a, b):
    """Distance between two descriptors (or raw vectors of model.dim)."""
    if isinstance(a, _descriptor.RelationDescriptor):
        a = a.vector
    if isinstance(b, _descriptor.RelationDescriptor):
        b = b.vector
    a = _check_vector(a, model.dim, "a")
    b = _check_vector(b, model.dim, "b")
    if model.kind == "mahalanobis":
        return float(np.linalg.norm(model.matrix @ (a - b)))
    return _BASE_DISPATCH[model.kind](a, b)


def pairwise_squared_mahalanobis(matrix, x):
    """Squared distances ||L(x_i - x_j)||^2 for all row pairs of x."""
    z = x @ matrix.T
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def distances_to(model, query, matrix_rows):
    """Distance from one query vector to each row of a matrix."""
    rows = np.asarray(matrix_rows, dtype=np.float64)
    if isinstance(query, _descriptor.RelationDescriptor):
        query = query.vector
    query = _check_vector(query, model.dim, "query")
    if rows.ndim != 2 or rows.shape[1] != model.dim:
        raise InvalidInputError("rows must be (N, dim)")
    if model.kind == "euclidean":
        return np.linalg.norm(rows - query, axis=1)
    if model.kind == "mahalanobis":
        return np.linalg.norm((rows - query) @ model.matrix.T, axis=1)
    return np.array([_BASE_DISPATCH[model.kind](query, r) for r in rows])


def save_metric(model, path):
    """Write a metric to JSON: {kind, dim, map} with map the row-major L
    (null for kinds without a learned map).  Floats keep their shortest
    round-trip form, so save/load is bit-exact."""
    obj = {"kind": model.kind, "dim": model.dim,
           "map": [float(v) for v in model.matrix.ravel()] if model.matrix is not None else None}
    write_json(path, obj)


def load_metric(path):
    obj = read_json(path)
    try:
        kind = obj["kind"]
        dim = int(obj["dim"])
        flat = obj.get("map")
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed metric file: {exc}") from exc
    matrix = None
    if flat is not None:
        arr = np.asarray(flat, dtype=np.float64)
        if arr.size != dim * dim:
            raise InvalidInputError(f"metric map must have {dim * dim} entries, got {arr.size}")
        matrix = arr.reshape(dim, dim)
    return MetricModel(kind, dim, matrix)
