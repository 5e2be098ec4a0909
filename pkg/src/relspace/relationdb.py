"""Scene database: point-cloud pairs, pairwise labels, cached descriptors.

On disk a database is a directory:

  index.json              {"version", "descriptor_voxel", "scenes": [ids...]}
  scenes/<id>.json        scene manifest (see relspace.io)
  clouds/<id>_ref.xyz     reference cloud
  clouds/<id>_tgt.xyz     target cloud
  labels.jsonl            one {"i", "j", "y"} object per line, sorted by (i, j)
  descriptors.json        cache {"descriptor_version", "voxel", "vectors": {id: [39]}}

The descriptor cache is advisory: it is reused only when both the
descriptor version and the voxel size match, otherwise descriptors are
recomputed on demand.
"""

import json
import os

import numpy as np

from .descriptor import (
    DEFAULT_VOXEL,
    DESCRIPTOR_VERSION,
    DIM,
    GRAVITY,
    RelationDescriptor,
    compute_descriptor,
)
from .errors import DuplicateIdError, InvalidInputError, NotFoundError, ParseError
from .geometry import PointCloud, Pose, Scene
from .io import read_cloud, read_scene_manifest, write_cloud_xyz, write_scene_manifest
from .metrics import MetricModel, distance
from .utils import read_json, write_json

DB_FORMAT_VERSION = "1"


def _pair_key(i, j):
    if i == j:
        raise InvalidInputError(f"a scene cannot be paired with itself: {i!r}")
    return (i, j) if i < j else (j, i)


class RelationDatabase:
    """In-memory store of scenes, pairwise similarity labels, and descriptors."""

    def __init__(self, descriptor_voxel=DEFAULT_VOXEL, gravity=GRAVITY):
        self.descriptor_voxel = descriptor_voxel
        self.gravity = np.asarray(gravity, dtype=np.float64)
        self._scenes = {}
        self._labels = {}
        self._descriptors = {}

    # -- scenes ---------------------------------------------------------

    def __len__(self):
        return len(self._scenes)

    def __contains__(self, scene_id):
        return scene_id in self._scenes

    def ids(self):
        """Scene ids in insertion order."""
        return list(self._scenes.keys())

    def add_scene(self, scene):
        if scene.id in self._scenes:
            raise DuplicateIdError(f"scene id already present: {scene.id!r}")
        self._scenes[scene.id] = scene
        return scene.id

    def scene(self, scene_id):
        try:
            return self._scenes[scene_id]
        except KeyError:
            raise NotFoundError(f"unknown scene id: {scene_id!r}") from None

    # -- labels ---------------------------------------------------------

    def set_label(self, i, j, y):
        if y not in (0, 1):
            raise InvalidInputError(f"label must be 0 or 1, got {y!r}")
        for sid in (i, j):
            if sid not in self._scenes:
                raise NotFoundError(f"unknown scene id: {sid!r}")
        self._labels[_pair_key(i, j)] = int(y)

    def label(self, i, j):
        """The stored label for the pair, or None if unlabeled."""
        return self._labels.get(_pair_key(i, j))

    def labeled_pairs(self):
        """All (i, j, y) triples, sorted by (i, j)."""
        return [(i, j, y) for (i, j), y in sorted(self._labels.items())]

    def label_count(self):
        return len(self._labels)

    # -- descriptors ------------------------------------------------------

    def descriptor(self, scene_id):
        cached = self._descriptors.get(scene_id)
        if cached is None:
            scene = self.scene(scene_id)
            cached = compute_descriptor(scene, voxel=self.descriptor_voxel, gravity=self.gravity)
            self._descriptors[scene_id] = cached
        return cached

    def descriptor_matrix(self, ids=None):
        if ids is None:
            ids = self.ids()
        if not ids:
            return np.zeros((0, DIM), dtype=np.float64)
        return np.stack([self.descriptor(sid).vector for sid in ids])

    def label_matrix(self, ids):
        """(N, N) int8 matrix over `ids`: 0/1 where labeled, -1 elsewhere."""
        n = len(ids)
        out = np.full((n, n), -1, dtype=np.int8)
        index = {sid: k for k, sid in enumerate(ids)}
        for (i, j), y in self._labels.items():
            a, b = index.get(i), index.get(j)
            if a is not None and b is not None:
                out[a, b] = y
                out[b, a] = y
        return out

    # -- queries ----------------------------------------------------------

    def _query_vector(self, query):
        if isinstance(query, str):
            return self.descriptor(query).vector, query
        if isinstance(query, Scene):
            desc = compute_descriptor(query, voxel=self.descriptor_voxel, gravity=self.gravity)
            return desc.vector, None
        if isinstance(query, RelationDescriptor):
            return query.vector, None
        return np.asarray(query, dtype=np.float64), None

    def knn_query(self, query, model, k, candidate_ids=None):
        """The k nearest scenes to `query` under `model`.

        `query` is a scene id, a Scene, a RelationDescriptor, or a raw
        vector.  Returns [(scene_id, distance)] sorted by (distance, id);
        when the query is an id it is excluded from the candidates.
        """
        if k < 1:
            raise InvalidInputError(f"k must be >= 1, got {k}")
        vector, query_id = self._query_vector(query)
        if candidate_ids is None:
            candidate_ids = self.ids()
        candidates = [sid for sid in candidate_ids if sid != query_id]
        scored = sorted(
            ((distance(model, vector, self.descriptor(sid).vector), sid) for sid in candidates),
            key=lambda pair: (pair[0], pair[1]),
        )
        return [(sid, float(d)) for d, sid in scored[:k]]

    def retrieval_success(self, model, test_ids, candidate_ids=None, k=5, threshold=3):
        """Fraction of test scenes whose k nearest candidates include at
        least `threshold` with the same first tag as the query scene."""
        if not test_ids:
            raise InvalidInputError("test_ids must be non-empty")
        hits = 0
        for sid in test_ids:
            tags = self.scene(sid).tags
            if not tags:
                raise InvalidInputError(f"scene {sid!r} has no tags")
            neighbors = self.knn_query(sid, model, k, candidate_ids=candidate_ids)
            same = sum(1 for nid, _ in neighbors if self.scene(nid).tags[:1] == tags[:1])
            hits += 1 if same >= threshold else 0
        return hits / len(test_ids)


# -- persistence ----------------------------------------------------------


def save_database(db, root, include_descriptors=True):
    """Write the database as a directory; see the module docstring for layout."""
    os.makedirs(root, exist_ok=True)
    os.makedirs(os.path.join(root, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(root, "clouds"), exist_ok=True)
    ids = db.ids()
    for sid in ids:
        scene = db.scene(sid)
        ref_rel = os.path.join("..", "clouds", f"{sid}_ref.xyz")
        tgt_rel = os.path.join("..", "clouds", f"{sid}_tgt.xyz")
        write_cloud_xyz(os.path.join(root, "clouds", f"{sid}_ref.xyz"), scene.reference.points)
        write_cloud_xyz(os.path.join(root, "clouds", f"{sid}_tgt.xyz"), scene.target.points)
        write_scene_manifest(os.path.join(root, "scenes", f"{sid}.json"), scene, ref_rel, tgt_rel)
    with open(os.path.join(root, "labels.jsonl"), "w", encoding="utf-8") as fh:
        for i, j, y in db.labeled_pairs():
            fh.write(json.dumps({"i": i, "j": j, "y": y}, sort_keys=True, separators=(",", ":")) + "\n")
    if include_descriptors:
        vectors = {sid: [repr(float(x)) for x in db.descriptor(sid).vector] for sid in ids}
        write_json(
            os.path.join(root, "descriptors.json"),
            {
                "descriptor_version": DESCRIPTOR_VERSION,
                "voxel": None if db.descriptor_voxel is None else repr(float(db.descriptor_voxel)),
                "vectors": vectors,
            },
        )
    write_json(
        os.path.join(root, "index.json"),
        {
            "version": DB_FORMAT_VERSION,
            "descriptor_voxel": None if db.descriptor_voxel is None else repr(float(db.descriptor_voxel)),
            "scenes": ids,
        },
    )


def load_database(root):
    index_path = os.path.join(root, "index.json")
    if not os.path.isfile(index_path):
        raise NotFoundError(f"no database index at {index_path}")
    index = read_json(index_path)
    if index.get("version") != DB_FORMAT_VERSION:
        raise ParseError(f"{index_path}: unsupported database version {index.get('version')!r}")
    raw_voxel = index.get("descriptor_voxel")
    voxel = None if raw_voxel is None else float(raw_voxel)
    db = RelationDatabase(descriptor_voxel=voxel)
    for sid in index["scenes"]:
        db.add_scene(read_scene_manifest(os.path.join(root, "scenes", f"{sid}.json")))

    labels_path = os.path.join(root, "labels.jsonl")
    if os.path.isfile(labels_path):
        with open(labels_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    db.set_label(obj["i"], obj["j"], obj["y"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(f"{labels_path}:{lineno}: {exc}") from exc

    cache_path = os.path.join(root, "descriptors.json")
    if os.path.isfile(cache_path):
        cache = read_json(cache_path)
        cache_voxel = cache.get("voxel")
        cache_voxel = None if cache_voxel is None else float(cache_voxel)
        if cache.get("descriptor_version") == DESCRIPTOR_VERSION and cache_voxel == voxel:
            for sid, values in cache.get("vectors", {}).items():
                if sid in db:
                    vec = np.asarray([float(v) for v in values], dtype=np.float64)
                    db._descriptors[sid] = RelationDescriptor(vec)
    return db


# -- external dataset ingestion -------------------------------------------


def ingest_external(root):
    """Best-effort import of an externally recorded scene directory.

    Expects an index file `scenes.txt` (or `scenes.csv`) whose lines are

        scene_id ref_cloud_path target_cloud_path tx ty tz qw qx qy qz [tag]

    (comma or whitespace separated; 16 row-major matrix entries may stand
    in for the seven pose numbers).  Cloud paths are relative to `root`;
    `.xyz`/`.txt` and ASCII `.pcd` files are accepted.  An optional
    `labels.txt` holds `i j y` triples.  Returns a RelationDatabase.
    """
    index_path = None
    for name in ("scenes.txt", "scenes.csv"):
        candidate = os.path.join(root, name)
        if os.path.isfile(candidate):
            index_path = candidate
            break
    if index_path is None:
        raise NotFoundError(f"no scenes.txt or scenes.csv under {root}")

    db = RelationDatabase()
    with open(index_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.replace(",", " ").split()
            if len(parts) < 10:
                raise ParseError(f"{index_path}:{lineno}: expected id, two paths, and a pose")
            sid, ref_rel, tgt_rel = parts[0], parts[1], parts[2]
            rest = parts[3:]
            tag = None
            if rest and not _is_number(rest[-1]):
                tag = rest[-1]
                rest = rest[:-1]
            try:
                numbers = [float(tok) for tok in rest]
            except ValueError as exc:
                raise ParseError(f"{index_path}:{lineno}: {exc}") from exc
            if len(numbers) == 7:
                pose = Pose(numbers[0:3], numbers[3:7])
            elif len(numbers) == 16:
                matrix = np.asarray(numbers, dtype=np.float64).reshape(4, 4)
                pose = _pose_from_matrix(matrix)
            else:
                raise ParseError(
                    f"{index_path}:{lineno}: pose must be 7 numbers (t, quaternion wxyz) "
                    f"or 16 (row-major 4x4), got {len(numbers)}"
                )
            reference = PointCloud(read_cloud(os.path.join(root, ref_rel)))
            target = PointCloud(read_cloud(os.path.join(root, tgt_rel)))
            db.add_scene(Scene(sid, reference, target, pose, (tag,) if tag else ()))

    labels_path = os.path.join(root, "labels.txt")
    if os.path.isfile(labels_path):
        with open(labels_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                parts = body.replace(",", " ").split()
                if len(parts) != 3:
                    raise ParseError(f"{labels_path}:{lineno}: expected 'i j y'")
                db.set_label(parts[0], parts[1], int(parts[2]))
    return db


def _is_number(token):
    try:
        float(token)
        return True
    except ValueError:
        return False


def _pose_from_matrix(matrix):
    rot = matrix[:3, :3]
    # Orthonormalize against input noise, then extract the quaternion.
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    w = np.sqrt(max(0.0, 1.0 + r[0, 0] + r[1, 1] + r[2, 2])) / 2.0
    if w > 1e-8:
        x = (r[2, 1] - r[1, 2]) / (4 * w)
        y = (r[0, 2] - r[2, 0]) / (4 * w)
        z = (r[1, 0] - r[0, 1]) / (4 * w)
    else:
        # 180-degree rotation: pick the dominant diagonal element.
        k = int(np.argmax(np.diag(r)))
        axes = [(0, 1, 2), (1, 2, 0), (2, 0, 1)][k]
        a, b, c = axes
        q = np.zeros(4)
        q[a + 1] = np.sqrt(max(0.0, 1.0 + r[a, a] - r[b, b] - r[c, c])) / 2.0
        q[b + 1] = (r[a, b] + r[b, a]) / (4 * q[a + 1])
        q[c + 1] = (r[a, c] + r[c, a]) / (4 * q[a + 1])
        q[0] = (r[c, b] - r[b, c]) / (4 * q[a + 1])
        w, x, y, z = q
    return Pose(matrix[:3, 3], np.asarray([w, x, y, z]))
