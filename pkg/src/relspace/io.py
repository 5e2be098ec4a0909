"""File formats: ASCII point clouds and JSON scene manifests.

Cloud files hold one point per line, "x y z" in meters; blank lines and
lines starting with '#' are ignored.  Scene manifests are JSON objects:

  {"id": ..., "reference_cloud": <path>, "target_cloud": <path>,
   "relative_pose": {"translation": [3], "rotation": [4 as w,x,y,z]},
   "reference_solid": <solid or null>, "target_solid": <solid or null>,
   "tags": [...]}

Paths are relative to the manifest's directory unless absolute.
"""

import os

import numpy as np

from .errors import ParseError
from .geometry import PointCloud, Pose, Scene, Solid
from .utils import read_json, write_json


def read_cloud_xyz(path):
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) < 3:
                raise ParseError(f"{path}:{lineno}: expected 'x y z', got {line.strip()!r}")
            try:
                points.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not points:
        raise ParseError(f"{path}: no points")
    return np.asarray(points, dtype=np.float64)


def write_cloud_xyz(path, points, comment=None):
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for x, y, z in pts.tolist():  # repr round-trips doubles exactly
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_cloud_pcd_ascii(path):
    """Minimal ASCII .pcd reader: x, y, z taken from the first three fields."""
    points = []
    in_data = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.strip()
            if not body or body.startswith("#"):
                continue
            if not in_data:
                if body.upper().startswith("DATA"):
                    if "ascii" not in body.lower():
                        raise ParseError(f"{path}: only ascii DATA sections are supported")
                    in_data = True
                continue
            parts = body.split()
            if len(parts) < 3:
                raise ParseError(f"{path}:{lineno}: expected at least three fields")
            try:
                points.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not points:
        raise ParseError(f"{path}: no points")
    return np.asarray(points, dtype=np.float64)


def read_cloud(path):
    if str(path).lower().endswith(".pcd"):
        return read_cloud_pcd_ascii(path)
    return read_cloud_xyz(path)


def scene_manifest(scene, reference_cloud_path, target_cloud_path):
    return {
        "id": scene.id,
        "reference_cloud": reference_cloud_path,
        "target_cloud": target_cloud_path,
        "relative_pose": scene.relative_pose.to_json(),
        "reference_solid": scene.reference.solid.to_json() if scene.reference.solid else None,
        "target_solid": scene.target.solid.to_json() if scene.target.solid else None,
        "tags": list(scene.tags),
    }


def write_scene_manifest(path, scene, reference_cloud_path, target_cloud_path):
    write_json(path, scene_manifest(scene, reference_cloud_path, target_cloud_path))


def read_scene_manifest(path):
    obj = read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        scene_id = obj["id"]
        ref_path = obj["reference_cloud"]
        tgt_path = obj["target_cloud"]
        pose = Pose.from_json(obj["relative_pose"])
        tags = tuple(obj.get("tags") or ())
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed scene manifest: {exc}") from exc

    def _resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    ref_solid = Solid.from_json(obj["reference_solid"]) if obj.get("reference_solid") else None
    tgt_solid = Solid.from_json(obj["target_solid"]) if obj.get("target_solid") else None
    reference = PointCloud(read_cloud(_resolve(ref_path)), ref_solid)
    target = PointCloud(read_cloud(_resolve(tgt_path)), tgt_solid)
    return Scene(scene_id, reference, target, pose, tags)
