import numpy as np
import pytest
from pytest import approx

from relspace.errors import InvalidInputError, NotFoundError, ProtocolError
from relspace.lmnn import TrainConfig
from relspace.metrics import euclidean_metric
from relspace.relationdb import RelationDatabase
from relspace.synth import generate_dataset, generate_scene, ShapeSpec
from relspace.teaching import (
    DECISION_LOCAL,
    DECISION_PRIOR,
    STATE_COLLECTING,
    STATE_FINALIZED,
    STATE_LABELED,
    TeachingConfig,
    TeachingSession,
)
from relspace.utils import derive_rng


def pool_db(n_per=4, seed=19):
    """Synthetic database without ground-truth labels (a clean pool)."""
    return generate_dataset(
        {"on-top": n_per, "inside": n_per, "next-to": n_per}, seed=seed, label_pairs=False
    )


def add_demos(db, kind="on-top", n=2, seed=77):
    ids = []
    for i in range(n):
        rng = derive_rng(seed, "demo", i)
        scene = generate_scene(
            f"demo-{i}", kind, ShapeSpec("box", (0.1, 0.1, 0.06)),
            ShapeSpec("box", (0.04, 0.04, 0.04)), rng,
        )
        ids.append(db.add_scene(scene))
    return ids


def make_session(db=None, n_demos=2, config=None, **kwargs):
    db = db or pool_db()
    demos = add_demos(db, n=n_demos)
    session = TeachingSession(db, demos, euclidean_metric(), config, **kwargs)
    return db, demos, session


class TestQueries:
    def test_queries_are_dedup_union_of_neighborhoods(self):
        config = TeachingConfig(n_queries=4)
        db, demos, session = make_session(config=config)
        pool = [sid for sid in db.ids() if sid not in demos]
        expected = []
        for did in demos:
            for sid, _ in db.knn_query(did, euclidean_metric(), 4, candidate_ids=pool):
                if sid not in expected:
                    expected.append(sid)
        assert list(session.queries()) == expected
        assert len(set(session.queries())) == len(session.queries())

    def test_identical_demos_ask_each_neighbor_once(self):
        db = pool_db()
        demos = add_demos(db, n=1)
        base = db.scene(demos[0])
        from relspace.geometry import Scene

        second = db.add_scene(
            Scene("demo-copy", base.reference, base.target, base.relative_pose, base.tags)
        )
        session = TeachingSession(db, [demos[0], second], euclidean_metric(),
                                  TeachingConfig(n_queries=5))
        q = session.queries()
        assert len(q) == 5  # perfect overlap collapses to one neighborhood
        assert len(set(q)) == len(q)

    def test_demos_never_queried(self):
        _, demos, session = make_session()
        assert not set(session.queries()) & set(demos)

    def test_pool_smaller_than_q_asks_everything(self):
        db = generate_dataset({"on-top": 2}, seed=23, label_pairs=False)
        demos = add_demos(db, n=1)
        session = TeachingSession(db, demos, euclidean_metric(), TeachingConfig(n_queries=50))
        assert set(session.queries()) == set(db.ids()) - set(demos)


class TestLabeling:
    def test_state_walk_and_epsilon(self):
        config = TeachingConfig(n_queries=4)
        db, demos, session = make_session(config=config)
        assert session.state == STATE_COLLECTING
        q = session.queries()
        with pytest.raises(ProtocolError):
            session.epsilon_nn()
        session.record_labels({q[0]: 1, q[1]: 0})
        assert session.state == STATE_COLLECTING
        assert set(session.pending()) == set(q[2:])
        session.record_labels({sid: 1 for sid in q[2:]})
        assert session.state == STATE_LABELED
        similar = 1 + len(q) - 2
        assert session.epsilon_nn() == approx(similar / len(q))

    def test_relabeling_before_finalize_overwrites(self):
        db, demos, session = make_session()
        q = session.queries()
        session.record_labels({sid: 0 for sid in q})
        session.record_labels({q[0]: 1})
        assert session.answers()[q[0]] == 1
        assert session.epsilon_nn() == approx(1 / len(q))

    def test_rejects_unqueried_scene_and_bad_values(self):
        db, demos, session = make_session()
        with pytest.raises(ProtocolError):
            session.record_labels({"on-top-000" if "on-top-000" not in session.queries()
                                   else "inside-000": 1, "definitely-not-queried": 1})
        with pytest.raises(InvalidInputError):
            session.record_labels({session.queries()[0]: 2})

    def test_constructor_validation(self):
        db = pool_db()
        demos = add_demos(db)
        with pytest.raises(InvalidInputError):
            TeachingSession(db, [], euclidean_metric())
        with pytest.raises(InvalidInputError):
            TeachingSession(db, [demos[0], demos[0]], euclidean_metric())
        with pytest.raises(NotFoundError):
            TeachingSession(db, ["ghost"], euclidean_metric())
        with pytest.raises(InvalidInputError):
            TeachingSession(db, demos, "euclidean")


class TestCompletion:
    def _session_with_answers(self, answers_by_rank, config=None, db=None):
        config = config or TeachingConfig(n_queries=len(answers_by_rank))
        db = db or pool_db()
        demos = add_demos(db, n=2)
        session = TeachingSession(db, demos, euclidean_metric(), config)
        q = session.queries()[: len(answers_by_rank)]
        session.record_labels(dict(zip(q, answers_by_rank)))
        session.record_labels({sid: 0 for sid in session.pending()})
        return db, demos, session

    def test_worked_example(self):
        # [PAPER-STYLE WORKED CASE] demos d1,d2; neighbors a=1, b=1, c=0:
        # demo pairs 1; demo-neighbor = the answer; a-b similar (both 1),
        # a-c and b-c dissimilar (opposite answers).
        db = pool_db()
        demos = add_demos(db, n=2)
        session = TeachingSession(db, demos, euclidean_metric(), TeachingConfig(n_queries=3))
        q = session.queries()
        assert len(q) >= 3
        a, b, c = q[0], q[1], q[2]
        session.record_labels({a: 1, b: 1, c: 0})
        session.record_labels({sid: 0 for sid in session.pending()})
        labels, contradictions = session.complete_labels()
        key = lambda i, j: (i, j) if i < j else (j, i)
        assert labels[key(demos[0], demos[1])] == 1
        assert labels[key(demos[0], a)] == 1
        assert labels[key(demos[1], c)] == 0
        assert labels[key(a, b)] == 1          # similar-similar rule
        assert labels[key(a, c)] == 0          # opposite answers
        assert labels[key(b, c)] == 0
        assert contradictions == ()

    def test_dissimilar_dissimilar_rule(self):
        db, demos, session = self._session_with_answers([0, 0, 1])
        q = session.queries()
        labels, _ = session.complete_labels()
        key = lambda i, j: (i, j) if i < j else (j, i)
        assert labels[key(q[0], q[1])] == 1    # both dissimilar -> same side
        assert labels[key(q[0], q[2])] == 0

    def test_rules_can_be_disabled(self):
        config = TeachingConfig(
            n_queries=3, rule_similar_similar=False, rule_dissimilar_dissimilar=False
        )
        db, demos, session = self._session_with_answers([1, 1, 0], config=config)
        q = session.queries()
        labels, _ = session.complete_labels()
        key = lambda i, j: (i, j) if i < j else (j, i)
        assert key(q[0], q[1]) not in labels   # both similar, rule off -> unknown
        assert labels[key(q[0], q[2])] == 0    # mixed pairs stay direct

    def test_stored_labels_win_and_contradictions_recorded(self):
        db = pool_db()
        demos = add_demos(db, n=2)
        session = TeachingSession(db, demos, euclidean_metric(), TeachingConfig(n_queries=2))
        q = session.queries()
        i, j = sorted([q[0], q[1]])
        db.set_label(i, j, 0)  # ground truth disagrees with the rule below
        session.record_labels({sid: 1 for sid in session.queries()})
        labels, contradictions = session.complete_labels()
        assert labels[(i, j)] == 0             # stored label kept
        assert ((i, j), 0, 1) in contradictions

    def test_completion_requires_all_answers(self):
        db, demos, session = make_session()
        session.record_labels({session.queries()[0]: 1})
        with pytest.raises(ProtocolError):
            session.complete_labels()


class TestFinalize:
    def _run_session(self, n_similar, n_queries, db=None):
        db = db or pool_db(n_per=6)
        demos = add_demos(db, n=1)
        session = TeachingSession(
            db, demos, euclidean_metric(),
            TeachingConfig(n_queries=n_queries, local_train=TrainConfig(max_iters=30)),
        )
        q = session.queries()
        assert len(q) == n_queries
        session.record_labels({sid: (1 if k < n_similar else 0) for k, sid in enumerate(q)})
        return session, session.finalize()

    def test_below_threshold_trains_local_metric(self):
        session, result = self._run_session(n_similar=6, n_queries=8)  # 0.75
        assert result.epsilon_nn == approx(0.75)
        assert result.decision == DECISION_LOCAL
        assert result.model is not session.prior_model
        assert result.model.kind == "mahalanobis"
        assert result.train_result is not None
        assert session.state == STATE_FINALIZED

    def test_above_threshold_keeps_prior(self):
        session, result = self._run_session(n_similar=8, n_queries=10)  # 0.80
        assert result.epsilon_nn == approx(0.80)
        assert result.decision == DECISION_PRIOR
        assert result.model is session.prior_model
        assert result.train_result is None

    def test_exact_threshold_keeps_prior(self):
        # the acceptance gate is >=, so equality keeps the prior
        db = pool_db(n_per=6, seed=29)
        session, result = self._run_session(n_similar=77, n_queries=100, db=_big_db())
        assert result.epsilon_nn == approx(0.77)
        assert result.decision == DECISION_PRIOR

    def test_finalize_locks_the_session(self):
        session, result = self._run_session(n_similar=6, n_queries=8)
        with pytest.raises(ProtocolError):
            session.finalize()
        with pytest.raises(ProtocolError):
            session.record_labels({session.queries()[0]: 1})
        assert session.result is result

    def test_finalize_needs_all_answers(self):
        db, demos, session = make_session()
        with pytest.raises(ProtocolError):
            session.finalize()
        with pytest.raises(ProtocolError):
            session.result

    def test_empty_pool_rejected_by_default(self):
        db = RelationDatabase()
        demos = add_demos(db, n=2)
        with pytest.raises(ProtocolError):
            TeachingSession(db, demos, euclidean_metric())

    def test_empty_pool_degenerate_path_when_allowed(self):
        db = RelationDatabase()
        demos = add_demos(db, n=3)
        session = TeachingSession(
            db, demos, euclidean_metric(),
            TeachingConfig(local_train=TrainConfig(max_iters=5)),
            allow_empty_neighborhood=True,
        )
        assert session.queries() == ()
        assert session.state == STATE_LABELED
        result = session.finalize()
        assert result.decision == DECISION_LOCAL
        assert result.epsilon_nn is None
        key = tuple(sorted([demos[0], demos[1]]))
        assert result.labels[key] == 1

    def test_single_demo_empty_pool_cannot_finalize(self):
        db = RelationDatabase()
        demos = add_demos(db, n=1)
        session = TeachingSession(
            db, demos, euclidean_metric(), allow_empty_neighborhood=True
        )
        with pytest.raises(ProtocolError):
            session.finalize()


def _big_db():
    """A pool with at least 100 scenes for exact-threshold sessions."""
    return generate_dataset(17, seed=47, label_pairs=False)  # 17 * 6 = 102 scenes


class TestConfig:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            TeachingConfig(n_queries=0)
        with pytest.raises(InvalidInputError):
            TeachingConfig(epsilon_threshold=1.5)
