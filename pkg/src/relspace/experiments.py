"""Evaluation protocols: retrieval success over random splits, and ranking
candidate poses for a relation demonstrated with new objects.

Both protocols are deterministic given their seed and return plain
JSON-serializable dictionaries, so command-line runs can be diffed byte for
byte.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .descriptor import DEFAULT_VOXEL, compute_descriptor
from .errors import InvalidInputError
from .lmnn import TrainConfig, train_from_database
from .metrics import MetricModel, euclidean_metric
from .posesearch import rank_and_map
from .relationdb import RelationDatabase
from .synth import RELATION_KINDS, ShapeSpec, generate_dataset, generate_scene
from .teaching import TeachingConfig, TeachingSession
from .utils import derive_rng

BASELINE_KINDS = ("euclidean", "chi-square", "bhattacharyya", "correlation", "kl", "js")

MAP_RELATIONS = ("on-top", "inside", "next-to", "inclined", "on-top-corner")


def _scene_tag(db, scene_id):
    tags = db.scene(scene_id).tags
    if not tags:
        raise InvalidInputError(f"scene {scene_id!r} has no relation tag")
    return tags[0]


def _stratified_split(groups, rng, train_fraction):
    """Per-tag shuffle and split; every tag keeps at least one scene on
    each side."""
    train_ids, test_ids = [], []
    for tag in sorted(groups):
        ids = groups[tag]
        if len(ids) < 2:
            raise InvalidInputError(f"tag {tag!r} needs at least 2 scenes to split")
        n_train = int(round(train_fraction * len(ids)))
        n_train = min(max(n_train, 1), len(ids) - 1)
        perm = rng.permutation(len(ids))
        train_ids.extend(ids[i] for i in perm[:n_train])
        test_ids.extend(ids[i] for i in perm[n_train:])
    return train_ids, test_ids


def eval_retrieval(db, seed=0, n_splits=15, train_fraction=0.75,
                   baselines=BASELINE_KINDS, k=5, threshold=3, train_config=None):
    """Nearest-neighbor retrieval success over repeated random splits.

    Each split shuffles every relation's scenes, trains the learned metric
    on the training side's labels, and scores each metric by the fraction
    of test scenes for which at least `threshold` of the `k` nearest
    training scenes show the same relation.  Returns per-split rates, means,
    and standard deviations per metric kind (the learned metric reports as
    "mahalanobis").
    """
    if n_splits < 1:
        raise InvalidInputError("n_splits must be at least 1")
    if not 0.0 < train_fraction < 1.0:
        raise InvalidInputError("train_fraction must lie strictly between 0 and 1")
    groups = {}
    for sid in db.ids():
        groups.setdefault(_scene_tag(db, sid), []).append(sid)

    kinds = list(baselines) + ["mahalanobis"]
    per_split = {kind: [] for kind in kinds}
    for split in range(n_splits):
        rng = derive_rng(seed, "eval-retrieval", split)
        train_ids, test_ids = _stratified_split(groups, rng, train_fraction)
        for kind in baselines:
            model = MetricModel(kind)
            per_split[kind].append(
                db.retrieval_success(model, test_ids, candidate_ids=train_ids,
                                     k=k, threshold=threshold)
            )
        trained = train_from_database(db, ids=train_ids, config=train_config)
        per_split["mahalanobis"].append(
            db.retrieval_success(trained.model, test_ids, candidate_ids=train_ids,
                                 k=k, threshold=threshold)
        )

    return {
        "protocol": {
            "seed": seed,
            "splits": n_splits,
            "train_fraction": train_fraction,
            "k": k,
            "threshold": threshold,
            "scenes": len(db.ids()),
        },
        "metrics": {
            kind: {
                "per_split": [float(v) for v in values],
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
            }
            for kind, values in per_split.items()
        },
    }


# Objects every candidate arrangement is built from: an open container as the
# reference so containment relations are realizable, and a small cylinder
# that fits every recipe (resting, leaning, corner, inside, tilted inside).
MAP_REFERENCE_SPEC = ShapeSpec("bowl", (0.12, 0.10, 0.08, 0.012))
MAP_TARGET_SPEC = ShapeSpec("cylinder", (0.035, 0.05))


def _candidate_pool(relation, seed, candidates, relevant, density, voxel):
    """75-style candidate pool: `relevant` scenes of the asked relation and
    an even mix of the other kinds, all between the same two new objects."""
    others = [kind for kind in RELATION_KINDS if kind != relation]
    n_other = candidates - relevant
    if n_other < 0:
        raise InvalidInputError("candidates must be at least the relevant count")
    base, extra = divmod(n_other, len(others))
    counts = [(relation, relevant)] + [
        (kind, base + (1 if i < extra else 0)) for i, kind in enumerate(others)
    ]
    descriptors = {}
    relevant_ids = []
    for kind, count in counts:
        for i in range(count):
            sid = f"cand-{relation}-{kind}-{i:02d}"
            rng = derive_rng(seed, "eval-map", "cand", relation, kind, i)
            scene = generate_scene(sid, kind, MAP_REFERENCE_SPEC, MAP_TARGET_SPEC,
                                   rng, density=density)
            descriptors[sid] = compute_descriptor(scene, voxel=voxel)
            if kind == relation:
                relevant_ids.append(sid)
    return descriptors, set(relevant_ids)


def _fresh_demos(db, relation, round_index, count, seed, density, voxel):
    """Generate `count` new demonstrations of the relation (new random
    objects), add them to the database, and return their ids."""
    child_seed = int(derive_rng(seed, "eval-map", "demo", relation, round_index).integers(2**31))
    pool = generate_dataset({relation: count}, seed=child_seed, density=density,
                            descriptor_voxel=voxel, label_pairs=False)
    demo_ids = []
    for i, sid in enumerate(pool.ids()):
        new_id = f"demo-{relation}-r{round_index}-{i}"
        db.add_scene(replace(pool.scene(sid), id=new_id))
        demo_ids.append(new_id)
    return demo_ids


def eval_map(seed=0, rounds=2, demos_per_round=5, relations=MAP_RELATIONS,
             prior_scenes_per_relation=8, candidates_per_relation=75,
             relevant_per_relation=15, density=12000.0, voxel=DEFAULT_VOXEL,
             teaching_config=None, prior_config=None):
    """Rank candidate arrangements of two new objects by demonstration loss.

    For each relation and round: generate `demos_per_round` fresh
    demonstrations, query their nearest neighbors in the database, answer
    the queries with a relation-tag oracle, and learn a metric through the
    teaching session.  Rank a fixed pool of candidate arrangements of two
    held-out objects (only `relevant_per_relation` show the asked relation)
    and score the ranking by average precision.  After each round the
    demonstrations and the oracle's answers join the database and the prior
    metric is re-learned, so later rounds start from more experience.

    The Euclidean baseline ranks the same pools with the same
    demonstrations.  Returns per-relation, per-round average precisions and
    the mean over relations ("map") per round for both metrics.
    """
    if rounds < 1:
        raise InvalidInputError("rounds must be at least 1")
    if demos_per_round < 2:
        raise InvalidInputError("demos_per_round must be at least 2")
    relations = tuple(relations)
    unknown = set(relations) - set(RELATION_KINDS)
    if unknown:
        raise InvalidInputError(f"unknown relation kinds: {sorted(unknown)}")
    if relevant_per_relation < 1:
        raise InvalidInputError("relevant_per_relation must be at least 1")
    if candidates_per_relation < relevant_per_relation:
        raise InvalidInputError("candidates must be at least the relevant count")

    db = generate_dataset(prior_scenes_per_relation, seed=seed, density=density,
                          descriptor_voxel=voxel)
    prior = train_from_database(db, config=prior_config).model
    euclid = euclidean_metric()
    t_config = teaching_config if teaching_config is not None else TeachingConfig()

    pools = {
        relation: _candidate_pool(relation, seed, candidates_per_relation,
                                  relevant_per_relation, density, voxel)
        for relation in relations
    }

    ap = {
        "euclidean": {relation: [] for relation in relations},
        "mahalanobis": {relation: [] for relation in relations},
    }
    decisions = {relation: [] for relation in relations}
    for round_index in range(rounds):
        for relation in relations:
            demo_ids = _fresh_demos(db, relation, round_index, demos_per_round,
                                    seed, density, voxel)
            session = TeachingSession(
                db, demo_ids, prior,
                config=t_config,
                session_id=f"eval-{relation}-r{round_index}",
            )
            session.record_labels({
                nb: int(_scene_tag(db, nb) == relation) for nb in session.queries()
            })
            outcome = session.finalize()
            decisions[relation].append(outcome.decision)

            demos = [db.descriptor(d) for d in demo_ids]
            candidates, relevant = pools[relation]
            for kind, model in (("euclidean", euclid), ("mahalanobis", outcome.model)):
                _, precision = rank_and_map(candidates, relevant, model, demos, voxel=voxel)
                ap[kind][relation].append(precision)

            # The demonstrations and the teacher's query answers stay in the
            # database; later rounds and other relations build on them.
            for i, a in enumerate(demo_ids):
                for b in demo_ids[i + 1:]:
                    db.set_label(a, b, 1)
            for nb, answer in session.answers().items():
                for d in demo_ids:
                    db.set_label(d, nb, answer)
        prior = train_from_database(db, config=prior_config).model

    per_round = {
        kind: [
            float(np.mean([ap[kind][relation][r] for relation in relations]))
            for r in range(rounds)
        ]
        for kind in ("euclidean", "mahalanobis")
    }
    return {
        "protocol": {
            "seed": seed,
            "rounds": rounds,
            "demos_per_round": demos_per_round,
            "relations": list(relations),
            "candidates_per_relation": candidates_per_relation,
            "relevant_per_relation": relevant_per_relation,
            "prior_scenes_per_relation": prior_scenes_per_relation,
        },
        "per_relation": {
            kind: {relation: [float(v) for v in values] for relation, values in table.items()}
            for kind, table in ap.items()
        },
        "decisions": decisions,
        "map_per_round": per_round,
        "final_map": {kind: per_round[kind][-1] for kind in per_round},
        "random_floor": relevant_per_relation / candidates_per_relation,
    }
