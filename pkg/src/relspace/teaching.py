"""Interactive teaching protocol for a new spatial relation.

A teacher shows a few demonstration scenes of one relation.  The session
then asks about the demonstrations' nearest neighbors in the scene
database (each distinct neighbor exactly once: "does this scene show the
same relation?").  The fraction of similar answers among the queried
neighborhood decides how the relation will be measured:

  * a familiar relation (fraction >= the acceptance threshold) keeps the
    session's prior metric;
  * an unfamiliar one gets a local metric, trained on the demonstrations
    plus the queried neighbors after label completion.

Label completion treats the session as a binary problem — a scene either
shows the taught relation or it does not — so two scenes on the same side
of that line count as a similar pair.  Completion only ever fills pairs
the teacher did not label directly; where a derived value disagrees with
a label already stored in the database, the stored label wins and the
disagreement is recorded.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NotFoundError, ProtocolError
from .lmnn import TrainConfig, train_lmnn
from .metrics import MetricModel
from .relationdb import _pair_key

STATE_COLLECTING = "collecting"
STATE_LABELED = "labeled"
STATE_FINALIZED = "finalized"

DECISION_PRIOR = "prior"
DECISION_LOCAL = "local"


@dataclass(frozen=True)
class TeachingConfig:
    """Protocol knobs.

    n_queries:           neighbors fetched per demonstration (before
                         de-duplication across demonstrations)
    epsilon_threshold:   minimum similar-answer fraction for keeping the
                         prior metric (the gate is >=)
    rule_similar_similar:     derive a similar pair from two neighbors
                              that both show the relation
    rule_dissimilar_dissimilar: derive a similar pair from two neighbors
                              that both do not show the relation
    local_train:         hyperparameters for the local metric
    """

    n_queries: int = 8
    epsilon_threshold: float = 0.77
    rule_similar_similar: bool = True
    rule_dissimilar_dissimilar: bool = True
    # Local problems are tiny (the demonstrations plus at most n_queries
    # neighbors), so each example pulls toward up to four similar peers —
    # with five demonstrations, every demonstration pulls toward all others.
    local_train: TrainConfig = field(default_factory=lambda: TrainConfig(k_targets=4))

    def __post_init__(self):
        if self.n_queries < 1:
            raise InvalidInputError("n_queries must be >= 1")
        if not 0.0 <= self.epsilon_threshold <= 1.0:
            raise InvalidInputError("epsilon_threshold must be in [0, 1]")


@dataclass(frozen=True)
class FinalizeResult:
    decision: str  # DECISION_PRIOR or DECISION_LOCAL
    epsilon_nn: float
    model: MetricModel
    labels: dict  # completed labels over demos + queried neighbors
    contradictions: tuple  # ((i, j), stored_label, derived_label) records
    train_result: object = None  # TrainResult when a local metric was fit


class TeachingSession:
    """One teaching episode: demonstrations, neighbor queries, teacher
    answers, and the finalize decision.

    `demo_ids` are scenes already present in `db` that all show the new
    relation; every other scene in the database is neighbor-pool material.
    The session walks collecting -> labeled -> finalized. An empty
    neighbor pool leaves the similarity question unanswerable and is
    rejected unless `allow_empty_neighborhood` is set, in which case
    finalize always trains the (degenerate, pull-only) local metric on
    the demonstrations alone.
    """

    def __init__(self, db, demo_ids, prior_model, config=None, session_id="session",
                 allow_empty_neighborhood=False):
        self.config = config or TeachingConfig()
        self.db = db
        self.session_id = str(session_id)
        demo_ids = list(demo_ids)
        if not demo_ids:
            raise InvalidInputError("at least one demonstration is required")
        if len(set(demo_ids)) != len(demo_ids):
            raise InvalidInputError("duplicate demonstration ids")
        for did in demo_ids:
            if did not in db:
                raise NotFoundError(f"unknown demonstration scene: {did!r}")
        if not isinstance(prior_model, MetricModel):
            raise InvalidInputError("prior_model must be a MetricModel")
        self.demo_ids = tuple(demo_ids)
        self.prior_model = prior_model
        self._pool = [sid for sid in db.ids() if sid not in set(demo_ids)]
        if not self._pool and not allow_empty_neighborhood:
            raise ProtocolError(
                "the database holds no scenes besides the demonstrations; "
                "there is no neighborhood to assess the relation against"
            )
        self._queries = self._collect_queries()
        self._answers = {}
        self._result = None

    # -- protocol state ---------------------------------------------------

    @property
    def state(self):
        if self._result is not None:
            return STATE_FINALIZED
        if self._queries and len(self._answers) == len(self._queries):
            return STATE_LABELED
        if not self._queries:
            return STATE_LABELED  # degenerate: nothing to ask
        return STATE_COLLECTING

    def _collect_queries(self):
        """Each demonstration's nearest pool neighbors under the prior
        metric, deduplicated in (demonstration order, rank) order."""
        seen = []
        for did in self.demo_ids:
            neighbors = self.db.knn_query(
                did, self.prior_model, self.config.n_queries, candidate_ids=self._pool
            )
            for sid, _ in neighbors:
                if sid not in seen:
                    seen.append(sid)
        return tuple(seen)

    def queries(self):
        """Scene ids the teacher must answer about, in presentation order."""
        return self._queries

    def pending(self):
        return tuple(sid for sid in self._queries if sid not in self._answers)

    def record_labels(self, answers):
        """Store teacher answers {queried_scene_id: 0 or 1}.  May be called
        repeatedly; re-answering a scene overwrites until finalized."""
        if self._result is not None:
            raise ProtocolError("session is finalized; no further labels accepted")
        queried = set(self._queries)
        for sid, y in dict(answers).items():
            if sid not in queried:
                raise ProtocolError(f"scene {sid!r} was not asked about in this session")
            if y not in (0, 1):
                raise InvalidInputError(f"labels must be 0 or 1, got {y!r}")
            self._answers[sid] = int(y)

    def answers(self):
        return dict(self._answers)

    def epsilon_nn(self):
        """Similar-answer fraction over the queried neighborhood."""
        if len(self._answers) != len(self._queries):
            raise ProtocolError(
                f"{len(self._queries) - len(self._answers)} queried scene(s) still unlabeled"
            )
        if not self._queries:
            raise ProtocolError("no neighborhood was available; the fraction is undefined")
        similar = sum(self._answers[sid] for sid in self._queries)
        return similar / len(self._queries)

    # -- label completion -------------------------------------------------

    def complete_labels(self):
        """Labels over demonstrations + queried neighbors, as {(i, j): y}.

        Direct labels: demonstration pairs are similar (they all show the
        relation); each demonstration-neighbor pair takes the teacher's
        answer for that neighbor.  Neighbor-neighbor pairs with opposite
        answers are dissimilar; pairs on the same side become similar when
        the corresponding completion rule is enabled.  Labels already in
        the database take precedence over derived ones; disagreements are
        returned as contradiction records."""
        if self.state == STATE_COLLECTING:
            raise ProtocolError("label completion needs every queried scene answered")
        labels = {}
        contradictions = []
        for a in range(len(self.demo_ids)):
            for b in range(a + 1, len(self.demo_ids)):
                labels[_pair_key(self.demo_ids[a], self.demo_ids[b])] = 1
        for did in self.demo_ids:
            for sid in self._queries:
                labels[_pair_key(did, sid)] = self._answers[sid]
        for a in range(len(self._queries)):
            for b in range(a + 1, len(self._queries)):
                i, j = self._queries[a], self._queries[b]
                ya, yb = self._answers[i], self._answers[j]
                if ya != yb:
                    derived = 0
                elif ya == 1 and self.config.rule_similar_similar:
                    derived = 1
                elif ya == 0 and self.config.rule_dissimilar_dissimilar:
                    derived = 1
                else:
                    derived = None
                stored = self.db.label(i, j)
                if stored is not None:
                    if derived is not None and stored != derived:
                        contradictions.append((_pair_key(i, j), stored, derived))
                    labels[_pair_key(i, j)] = stored
                elif derived is not None:
                    labels[_pair_key(i, j)] = derived
        return labels, tuple(contradictions)

    # -- decision -----------------------------------------------------------

    def finalize(self):
        """Apply the acceptance gate and fix the session's metric.

        With a populated neighborhood: a similar-answer fraction at or
        above the threshold keeps the prior metric, anything below trains
        a local one.  Returns a FinalizeResult; the session then rejects
        further changes."""
        if self._result is not None:
            raise ProtocolError("session is already finalized")
        if not self._queries:
            # Degenerate no-neighborhood path: the fraction is undefined
            # (reported as None) and only the local route remains.
            labels, contradictions = self.complete_labels()
            result = self._train_local(labels, contradictions, epsilon=None)
        else:
            epsilon = self.epsilon_nn()  # raises while answers are missing
            labels, contradictions = self.complete_labels()
            if epsilon >= self.config.epsilon_threshold:
                result = FinalizeResult(
                    DECISION_PRIOR, epsilon, self.prior_model, labels, contradictions
                )
            else:
                result = self._train_local(labels, contradictions, epsilon)
        self._result = result
        return result

    def _train_local(self, labels, contradictions, epsilon):
        members = list(self.demo_ids) + list(self._queries)
        n = len(members)
        if n < 2:
            raise ProtocolError(
                "cannot train a local metric from a single scene; add more "
                "demonstrations or database scenes"
            )
        X = self.db.descriptor_matrix(members)
        Y = np.full((n, n), -1, dtype=np.int8)
        index = {sid: k for k, sid in enumerate(members)}
        for (i, j), y in labels.items():
            Y[index[i], index[j]] = y
            Y[index[j], index[i]] = y
        trained = train_lmnn(X, Y, self.config.local_train)
        return FinalizeResult(
            DECISION_LOCAL, epsilon, trained.model, labels, contradictions, trained
        )

    @property
    def result(self):
        if self._result is None:
            raise ProtocolError("session is not finalized yet")
        return self._result
