"""Command-line surface tying the pipeline together for scripted runs.

Every run with identical flags and inputs produces byte-identical primary
output: results print as canonical JSON (sorted keys, shortest round-trip
floats) with all timing confined to the optional --out file, and every
random choice derives from the single --seed.

Flag resolution order: explicit command line > --config JSON file >
environment (REL_DATA_ROOT for --data-root) > built-in defaults.  Exit
codes: 0 success, 1 domain error (reported as {"error": ...} on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from .descriptor import DEFAULT_VOXEL, THETA_BINS, PHI_BINS, compute_descriptor
from .errors import InvalidInputError, RelspaceError
from .experiments import MAP_RELATIONS, eval_map, eval_retrieval
from .io import read_cloud, read_scene_manifest
from .lmnn import TrainConfig, train_from_database
from .metrics import METRIC_KINDS, MetricModel, load_metric, save_metric
from .posesearch import SearchConfig, optimize_pose
from .relationdb import load_database, save_database
from .synth import RELATION_KINDS, generate_dataset
from .teaching import TeachingConfig, TeachingSession
from .utils import canonical_json, read_json, write_json

_LOG = logging.getLogger("relspace")

_GLOBAL_DEFAULTS = {
    "seed": 0,
    "data_root": None,
    "metric": "euclidean",
    "log": "warning",
    "json": False,
    "threads": 1,
    "dry_run": False,
    "out": None,
}


def _common_flags(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="master random seed; every stream derives from it (default 0)")
    parser.add_argument("--config", default=None,
                        help="JSON file whose keys mirror flags (underscored names)")
    parser.add_argument("--data-root", dest="data_root", default=None,
                        help="dataset directory (fallback: REL_DATA_ROOT)")
    parser.add_argument("--metric", default=None,
                        help="metric kind name or metric JSON file (default euclidean)")
    parser.add_argument("--log", default=None,
                        help="log level for diagnostics on stderr (default warning)")
    parser.add_argument("--json", action=argparse.BooleanOptionalAction, default=None,
                        help="print machine-readable JSON on stdout")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker-thread cap for parallel sections (default 1)")
    parser.add_argument("--dry-run", dest="dry_run", action=argparse.BooleanOptionalAction,
                        default=None, help="compute but write nothing")
    parser.add_argument("--out", default=None,
                        help="write the full result (including wall_time) to this file")


class Settings:
    """Flag values after merging command line, config file, and environment."""

    def __init__(self, args, parser):
        self._args = vars(args)
        self._parser = parser
        self._config = {}
        if args.config is not None:
            try:
                loaded = read_json(args.config)
            except RelspaceError as exc:
                parser.error(f"unreadable config file: {exc}")
            if not isinstance(loaded, dict):
                parser.error("config file must hold a JSON object")
            known = set(self._args) | set(_GLOBAL_DEFAULTS)
            unknown = set(loaded) - known
            if unknown:
                parser.error(f"unknown config keys: {sorted(unknown)}")
            self._config = loaded

    def get(self, name, default=None):
        value = self._args.get(name)
        if value is not None:
            return value
        if name in self._config:
            return self._config[name]
        if name == "data_root" and os.environ.get("REL_DATA_ROOT"):
            return os.environ["REL_DATA_ROOT"]
        if name in _GLOBAL_DEFAULTS:
            base = _GLOBAL_DEFAULTS[name]
            return base if base is not None else default
        return default

    def require_data_root(self):
        root = self.get("data_root")
        if root is None:
            self._parser.error("this command needs --data-root (or REL_DATA_ROOT)")
        return Path(root)


def _resolve_metric(settings):
    """A metric flag is either a baseline kind name or a metric file path."""
    value = settings.get("metric")
    if value in METRIC_KINDS:
        if value == "mahalanobis":
            raise InvalidInputError(
                "a learned metric has no default matrix; pass its JSON file instead"
            )
        return MetricModel(value)
    if Path(value).exists():
        return load_metric(value)
    raise InvalidInputError(
        f"metric {value!r} is neither a known kind {METRIC_KINDS} nor an existing file"
    )


def _emit(settings, payload, text_lines):
    """Print canonical JSON under --json, otherwise the plain-text lines;
    optionally write the payload (plus wall time) to --out."""
    if settings.get("json"):
        sys.stdout.write(canonical_json(payload))
    else:
        for line in text_lines:
            print(line)
    out = settings.get("out")
    if out is not None and not settings.get("dry_run"):
        write_json(out, dict(payload, wall_time=time.time() - settings.started))
    return 0


def _float_triple(text):
    parts = [float(v) for v in str(text).split(",")]
    if len(parts) == 1:
        return parts[0]
    if len(parts) == 3:
        return tuple(parts)
    raise argparse.ArgumentTypeError("expected one number or three comma-separated numbers")


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth(settings, args):
    root = settings.get("out") or settings.get("data_root")
    if root is None and not settings.get("dry_run"):
        settings._parser.error("synth needs --out or --data-root for the dataset directory")
    relations = args.relations.split(",") if args.relations else list(RELATION_KINDS)
    counts = {kind: args.per_relation for kind in relations}
    db = generate_dataset(counts, seed=settings.get("seed"), density=args.density)
    if not settings.get("dry_run"):
        save_database(db, root)
    payload = {
        "scenes": len(db.ids()),
        "relations": relations,
        "per_relation": args.per_relation,
        "labels": db.label_count(),
        "root": None if settings.get("dry_run") else str(root),
        "dry_run": bool(settings.get("dry_run")),
    }
    return _emit(settings, payload, [
        f"generated {payload['scenes']} scenes ({args.per_relation} per relation)"
        + (" [dry run]" if payload["dry_run"] else f" -> {root}")
    ])


def _load_scene(settings, value):
    """A scene argument is a manifest path or an id in the data root."""
    path = Path(value)
    if path.suffix == ".json" or path.exists():
        return read_scene_manifest(path)
    db = load_database(settings.require_data_root())
    return db.scene(value)


def _cmd_descriptor(settings, args):
    scene = _load_scene(settings, args.scene)
    desc = compute_descriptor(scene, voxel=args.voxel)
    vec = desc.vector.tolist()
    payload = {
        "scene": scene.id,
        "h_theta": vec[:THETA_BINS],
        "h_phi": vec[THETA_BINS:THETA_BINS + PHI_BINS],
        "h_dist": vec[THETA_BINS + PHI_BINS:],
        "vector": vec,
    }
    return _emit(settings, payload, [" ".join(repr(v) for v in vec)])


def _cmd_train(settings, args):
    db = load_database(settings.require_data_root())
    config = TrainConfig(
        k_targets=args.k_targets, margin=args.margin, push_weight=args.push_weight,
        max_iters=args.max_iters,
    )
    result = train_from_database(db, config=config)
    if settings.get("out") and not settings.get("dry_run"):
        save_metric(result.model, settings.get("out"))
    payload = {
        "kind": result.model.kind,
        "dim": result.model.dim,
        "scenes": len(db.ids()),
        "labels": db.label_count(),
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "iterations": result.iterations,
        "target_pairs": len(result.target_pairs),
        "metric_file": settings.get("out") if not settings.get("dry_run") else None,
    }
    return _emit(settings, payload, [
        f"trained on {payload['scenes']} scenes: loss {result.initial_loss:.6g} "
        f"-> {result.final_loss:.6g} in {result.iterations} iterations"
    ])


def _cmd_knn(settings, args):
    db = load_database(settings.require_data_root())
    model = _resolve_metric(settings)
    neighbors = db.knn_query(args.scene, model, k=args.k)
    payload = {
        "scene": args.scene,
        "metric": model.kind,
        "neighbors": [{"id": sid, "distance": dist} for sid, dist in neighbors],
    }
    return _emit(settings, payload, [
        f"{sid}\t{dist!r}" for sid, dist in neighbors
    ])


def _eval_db(settings, args):
    root = settings.get("data_root")
    if root is not None:
        return load_database(Path(root))
    return generate_dataset(args.per_relation, seed=settings.get("seed"))


def _cmd_eval_retrieval(settings, args):
    db = _eval_db(settings, args)
    config = TrainConfig(max_iters=args.max_iters) if args.max_iters is not None else None
    report = eval_retrieval(
        db, seed=settings.get("seed"), n_splits=args.splits,
        train_fraction=args.train_frac, k=args.k, threshold=args.threshold,
        train_config=config,
    )
    lines = [
        f"{kind:14s} {row['mean']:.4f} +/- {row['std']:.4f}"
        for kind, row in report["metrics"].items()
    ]
    return _emit(settings, report, lines)


def _cmd_eval_map(settings, args):
    relations = args.relations.split(",") if args.relations else MAP_RELATIONS
    report = eval_map(
        seed=settings.get("seed"), rounds=args.rounds,
        demos_per_round=args.demos_per_round, relations=relations,
        prior_scenes_per_relation=args.prior_per_relation,
        candidates_per_relation=args.candidates,
        relevant_per_relation=args.relevant,
    )
    lines = [
        f"{kind:12s} " + "  ".join(f"round{r}={v:.4f}" for r, v in enumerate(values))
        for kind, values in report["map_per_round"].items()
    ]
    return _emit(settings, report, lines)


def _metric_json(model):
    return {
        "kind": model.kind,
        "dim": model.dim,
        "map": [float(v) for v in model.matrix.ravel()] if model.matrix is not None else None,
    }


def _cmd_teach_offline(settings, args):
    spec = read_json(args.session)
    if not isinstance(spec, dict) or "demo_ids" not in spec:
        raise InvalidInputError("session file must be a JSON object with demo_ids")
    db = load_database(settings.require_data_root())
    prior = _resolve_metric(settings)
    config = TeachingConfig(n_queries=args.queries, epsilon_threshold=args.epsilon)
    session = TeachingSession(
        db, spec["demo_ids"], prior, config=config,
        session_id=str(spec.get("session_id", "offline")),
    )

    answers = spec.get("answers")
    if answers is None:
        # Oracle labeler: a query is similar when it carries the relation
        # tag shared by all demonstrations.
        demo_tags = {db.scene(d).tags[0] for d in spec["demo_ids"] if db.scene(d).tags}
        if len(demo_tags) != 1:
            raise InvalidInputError(
                "oracle labeling needs demonstrations sharing one relation tag; "
                "provide explicit answers instead"
            )
        tag = demo_tags.pop()
        answers = {nb: int(bool(db.scene(nb).tags) and db.scene(nb).tags[0] == tag)
                   for nb in session.queries()}
    session.record_labels({k: int(v) for k, v in dict(answers).items()})
    outcome = session.finalize()

    artifact = {
        "session_id": session.session_id,
        "demo_ids": list(spec["demo_ids"]),
        "queries": list(session.queries()),
        "answers": {k: int(v) for k, v in session.answers().items()},
        "epsilon_nn": outcome.epsilon_nn,
        "decision": outcome.decision,
        "labels": [[i, j, y] for (i, j), y in sorted(outcome.labels.items())],
        "contradictions": [
            {"pair": list(pair), "stored": stored, "derived": derived}
            for pair, stored, derived in outcome.contradictions
        ],
        "metric": _metric_json(outcome.model),
    }
    if args.write_labels and not settings.get("dry_run"):
        for (i, j), y in outcome.labels.items():
            db.set_label(i, j, y)
        save_database(db, settings.require_data_root())
    payload = dict(artifact)
    if settings.get("out") and not settings.get("dry_run"):
        write_json(settings.get("out"), artifact)
    return _emit(settings, payload, [
        f"epsilon_nn={outcome.epsilon_nn} decision={outcome.decision} "
        f"labels={len(outcome.labels)} contradictions={len(outcome.contradictions)}"
    ])


def _cmd_reproduce(settings, args):
    demos = []
    if args.demos is not None:
        demo_path = Path(args.demos)
        manifests = sorted(demo_path.glob("*.json")) if demo_path.is_dir() else [demo_path]
        if not manifests:
            raise InvalidInputError(f"no scene manifests found under {demo_path}")
        for manifest in manifests:
            demos.append(compute_descriptor(read_scene_manifest(manifest), voxel=args.voxel))
    if args.demo_ids:
        db = load_database(settings.require_data_root())
        for sid in args.demo_ids.split(","):
            demos.append(db.descriptor(sid))
    if not demos:
        raise InvalidInputError("reproduce needs --demos manifests and/or --demo-ids")

    reference = read_cloud(args.ref)
    target = read_cloud(args.place)
    model = _resolve_metric(settings)
    config = SearchConfig(
        extent=args.extent,
        resolution=args.resolution,
        rotation_mode=args.rotation_mode,
        yaw_step=math.radians(args.yaw_step_deg),
        n_rotations=args.n_rotations,
        seed=settings.get("seed"),
        collision_mode="strict" if args.strict else "lazy",
        collision_epsilon=args.collision_epsilon,
        threads=settings.get("threads"),
        voxel=args.voxel,
    )
    result = optimize_pose(reference, target, demos, model, config)
    payload = {
        "pose": result.pose.to_json(),
        "loss": result.loss,
        "feasible": result.feasible,
        "evaluated_samples": result.evaluated,
        "collision_checks": result.collision_checks,
        "feasible_count": result.feasible_count,
        "translations": result.translations,
        "rotations": result.rotations,
        "metric": model.kind,
        "demos": len(demos),
    }
    t = result.pose.translation
    return _emit(settings, payload, [
        f"pose translation=({t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}) loss={result.loss:.6g} "
        f"evaluated={result.evaluated}"
    ])


def _cmd_serve(settings, args):
    import uvicorn

    from .service import create_app

    app = create_app(settings.require_data_root())
    uvicorn.run(app, host=args.host, port=args.port, log_level=settings.get("log"))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="relspace",
        description="Learn and reproduce pairwise spatial relations between objects.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    def command(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        _common_flags(p)
        p.set_defaults(handler=handler)
        return p

    p = command("synth", _cmd_synth, "generate a labeled synthetic dataset")
    p.add_argument("--per-relation", dest="per_relation", type=int, default=20)
    p.add_argument("--relations", default=None,
                   help=f"comma list among {','.join(RELATION_KINDS)} (default all)")
    p.add_argument("--density", type=float, default=12000.0,
                   help="surface sample density, points per square meter")

    p = command("descriptor", _cmd_descriptor, "compute a scene's 39-bin descriptor")
    p.add_argument("--scene", required=True, help="scene manifest path or dataset scene id")
    p.add_argument("--voxel", type=float, default=DEFAULT_VOXEL)

    p = command("train", _cmd_train, "learn a Mahalanobis metric from stored labels")
    p.add_argument("--k-targets", dest="k_targets", type=int, default=3)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--push-weight", dest="push_weight", type=float, default=1.0)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=200)

    p = command("knn", _cmd_knn, "nearest neighbors of a scene under a metric")
    p.add_argument("--scene", required=True)
    p.add_argument("-k", type=int, default=5)

    p = command("eval-retrieval", _cmd_eval_retrieval,
                "retrieval success over repeated random splits")
    p.add_argument("--splits", type=int, default=15)
    p.add_argument("--train-frac", dest="train_frac", type=float, default=0.75)
    p.add_argument("--per-relation", dest="per_relation", type=int, default=20,
                   help="scenes per relation when generating (no --data-root)")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)

    p = command("eval-map", _cmd_eval_map,
                "rank candidate arrangements of new objects by demonstration loss")
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--demos-per-round", dest="demos_per_round", type=int, default=5)
    p.add_argument("--relations", default=None)
    p.add_argument("--candidates", type=int, default=75)
    p.add_argument("--relevant", type=int, default=15)
    p.add_argument("--prior-per-relation", dest="prior_per_relation", type=int, default=8)

    p = command("teach-offline", _cmd_teach_offline,
                "replay a teaching session from a file, answering with an oracle")
    p.add_argument("--session", required=True,
                   help="JSON file: {session_id?, demo_ids, answers?}; without "
                        "answers an oracle labels queries by relation tag")
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=0.77)
    p.add_argument("--write-labels", dest="write_labels",
                   action=argparse.BooleanOptionalAction, default=False,
                   help="persist the completed labels into the dataset")

    p = command("reproduce", _cmd_reproduce,
                "search a pose that reproduces demonstrated relations")
    p.add_argument("--demos", default=None,
                   help="scene manifest file, or a directory of them")
    p.add_argument("--demo-ids", dest="demo_ids", default=None,
                   help="comma list of dataset scene ids to use as demonstrations")
    p.add_argument("--ref", required=True, help="reference object cloud (.xyz/.pcd)")
    p.add_argument("--place", required=True, help="cloud of the object to place")
    p.add_argument("--extent", type=_float_triple, default=None)
    p.add_argument("--resolution", type=_float_triple, default=0.03)
    p.add_argument("--rotation-mode", dest="rotation_mode",
                   choices=("yaw", "so3"), default="yaw")
    p.add_argument("--yaw-step-deg", dest="yaw_step_deg", type=float, default=30.0)
    p.add_argument("--n-rotations", dest="n_rotations", type=int, default=64)
    p.add_argument("--collision-epsilon", dest="collision_epsilon", type=float, default=1e-3)
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=False,
                   help="collision-check every candidate, not just best ones")
    p.add_argument("--voxel", type=float, default=DEFAULT_VOXEL)

    p = command("serve", _cmd_serve, "serve the HTTP API and teaching UI")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = Settings(args, parser)
    settings.started = time.time()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, str(settings.get("log")).upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(settings, args)
    except RelspaceError as exc:
        payload = {"error": {"code": type(exc).__name__, "message": str(exc)}}
        sys.stderr.write(canonical_json(payload))
        return 1


if __name__ == "__main__":
    sys.exit(main())
