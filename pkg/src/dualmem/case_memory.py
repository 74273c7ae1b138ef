"""Case library and the learned case-retrieval policy.

Retrieval runs in four steps:

1. semantic recall of the ``K0`` most cosine-similar *successful* cases;
2. reranking by ``alpha_t * sem_norm + (1 - alpha_t) * val_norm`` where both
   scores are min-max normalized within the candidate set and ``val`` comes
   from the value network;
3. a temperature softmax over the fused scores;
4. ``k`` draws without replacement, each slot exploring uniformly with
   probability ``epsilon``.

After the episode, :meth:`CasePolicy.update_from_episode` turns the terminal
reward into labelled samples, takes one optimizer step and advances the
annealing counter.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dualmem.embedding import as_vector, cosine_many
from dualmem.errors import ConflictError, InvalidInputError, NumericError, ParseError
from dualmem.hyper import HyperParams
from dualmem import value_net as vn


@dataclass
class CaseEntry:
    id: str
    index_text: str
    embedding: np.ndarray
    intent: str = ""
    trajectory: list = field(default_factory=list)
    outcome: str = ""
    success: bool = True
    created_episode: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "index_text": self.index_text,
            "embedding": [float(x) for x in self.embedding],
            "intent": self.intent,
            "trajectory": [dict(step) for step in self.trajectory],
            "outcome": self.outcome,
            "success": bool(self.success),
            "created_episode": int(self.created_episode),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CaseEntry":
        return cls(
            id=str(data["id"]),
            index_text=str(data["index_text"]),
            embedding=as_vector(data["embedding"]),
            intent=data.get("intent", ""),
            trajectory=[{"step": int(s["step"]), "payload": str(s["payload"])} for s in data.get("trajectory", [])],
            outcome=data.get("outcome", ""),
            success=bool(data["success"]),
            created_episode=int(data.get("created_episode", 0)),
        )


@dataclass
class StateQuery:
    query_text: str
    embedding: np.ndarray
    episode_t: int = 0
    masked_skill_ids: frozenset = frozenset()


@dataclass
class ScoredCandidate:
    case_id: str
    s_sem: float
    s_val: float
    s_sem_norm: float
    s_val_norm: float
    fused: float


class CaseLibrary:
    """Append-only case store with brute-force cosine recall.

    Writers serialize through a lock; readers work on an immutable snapshot
    (the success matrix is rebuilt on write, never mutated in place).
    """

    def __init__(self, d: int):
        if d < 2:
            raise InvalidInputError("embedding dimension must be >= 2")
        self.d = d
        self._entries: dict[str, CaseEntry] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()
        self._snapshot = ((), np.zeros((0, d)))
        self.revision = 0

    def __len__(self):
        return len(self._order)

    def __contains__(self, case_id):
        return case_id in self._entries

    def __getitem__(self, case_id) -> CaseEntry:
        return self._entries[case_id]

    def entries(self) -> list:
        return [self._entries[i] for i in self._order]

    def add_case(self, entry: CaseEntry) -> int:
        entry.embedding = as_vector(entry.embedding, self.d)
        with self._lock:
            if entry.id in self._entries:
                raise ConflictError(f"case {entry.id!r} already stored")
            self._entries[entry.id] = entry
            self._order.append(entry.id)
            if entry.success:
                ids, mat = self._snapshot
                self._snapshot = (ids + (entry.id,), np.vstack([mat, entry.embedding[None, :]]))
            self.revision += 1
            return self.revision

    def recall_candidates(self, state: StateQuery, K0: int) -> list:
        """Top-``K0`` successful cases by cosine; ties broken by id ascending."""
        e_s = as_vector(state.embedding, self.d)
        ids, mat = self._snapshot
        if not ids or K0 <= 0:
            return []
        sims = cosine_many(e_s, mat)
        order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))[:K0]
        return [(self._entries[ids[i]], float(sims[i])) for i in order]

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for entry in self.entries():
                fh.write(json.dumps(entry.to_dict()) + "\n")

    @classmethod
    def load(cls, path, d: int | None = None) -> "CaseLibrary":
        path = Path(path)
        lib = None
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    entry = CaseEntry.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad case record: {exc}", path, lineno) from None
                if lib is None:
                    lib = cls(d if d is not None else entry.embedding.shape[0])
                try:
                    lib.add_case(entry)
                except (InvalidInputError, ConflictError) as exc:
                    raise ParseError(str(exc), path, lineno) from None
        if lib is None:
            if d is None:
                raise ParseError("empty case store and no dimension given", path)
            lib = cls(d)
        return lib


def anneal_alpha(t: int, hp: HyperParams) -> float:
    frac = min(t / hp.T_decay, 1.0)
    return hp.alpha_start + (hp.alpha_end - hp.alpha_start) * frac


def minmax(x) -> np.ndarray:
    """Min-max normalize into [0, 1]; a constant vector maps to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def score_candidates(state: StateQuery, candidates, alpha: float, params: vn.ValueNetParams | None) -> list:
    """Fuse normalized semantic and value scores.

    ``candidates`` is the output of :meth:`CaseLibrary.recall_candidates`.
    With ``params=None`` the value score is a constant 0.5 (semantic-only use).
    """
    if not candidates:
        raise InvalidInputError("cannot score an empty candidate set")
    s_sem = np.array([s for _, s in candidates], dtype=np.float64)
    if params is None:
        s_val = np.full(len(candidates), 0.5)
    else:
        Z = vn.build_feature_matrix(state.embedding, np.stack([c.embedding for c, _ in candidates]))
        s_val = vn.forward_batch(params, Z, "eval")
    sem_n = minmax(s_sem)
    val_n = minmax(s_val)
    fused = alpha * sem_n + (1.0 - alpha) * val_n
    return [
        ScoredCandidate(c.id, float(s_sem[i]), float(s_val[i]), float(sem_n[i]), float(val_n[i]), float(fused[i]))
        for i, (c, _) in enumerate(candidates)
    ]


def policy_distribution(scored, tau_c: float) -> np.ndarray:
    if tau_c <= 0:
        raise InvalidInputError("temperature must be positive")
    if not scored:
        raise InvalidInputError("empty candidate set")
    x = np.array([c.fused for c in scored], dtype=np.float64) / tau_c
    x -= x.max()
    p = np.exp(x)
    return p / p.sum()


def select_cases(probs, scored, k: int, epsilon: float, rng) -> list:
    """Draw up to ``k`` distinct ids.

    Every slot first flips an ``epsilon`` coin: heads picks uniformly among
    the remaining candidates, tails samples the remaining softmax mass.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    remaining = list(range(len(scored)))
    chosen = []
    while remaining and len(chosen) < k:
        explore = rng.random() < epsilon
        if explore:
            j = int(rng.integers(len(remaining)))
        else:
            w = probs[remaining]
            cdf = np.cumsum(w)
            u = rng.random() * cdf[-1]
            j = min(int(np.searchsorted(cdf, u, side="right")), len(remaining) - 1)
        chosen.append(scored[remaining.pop(j)].case_id)
    return chosen


def build_training_samples(selected, scored, r: int, rng, hp: HyperParams) -> list:
    """Label ids for one episode: ``[(case_id, label), ...]``.

    Success: selected cases are positives and up to ``n_neg`` negatives are
    drawn from the ``N_bottom`` lowest-fused unselected candidates. Failure:
    selected cases are negatives, nothing is positive.
    """
    if r not in (0, 1):
        raise InvalidInputError("reward must be 0 or 1")
    known = {c.case_id for c in scored}
    if not set(selected) <= known:
        raise InvalidInputError("selected ids must come from the candidate set")
    if r == 0:
        return [(cid, 0) for cid in selected]
    samples = [(cid, 1) for cid in selected]
    chosen = set(selected)
    pool = sorted((c for c in scored if c.case_id not in chosen), key=lambda c: (c.fused, c.case_id))
    pool = pool[: hp.N_bottom]
    n = min(hp.n_neg, len(pool))
    if n:
        picks = rng.choice(len(pool), size=n, replace=False)
        samples.extend((pool[int(i)].case_id, 0) for i in picks)
    return samples


@dataclass
class Retrieval:
    """Everything one retrieval round produced; input to the update."""

    state: StateQuery
    candidates: list
    scored: list
    probs: np.ndarray
    selected: list
    alpha: float


class CasePolicy:
    """Case library plus the trainable reranker and its annealing clock.

    Updates are single-writer; ``params`` is swapped atomically so concurrent
    readers always see a complete parameter set.
    """

    def __init__(self, library: CaseLibrary, params: vn.ValueNetParams, hp: HyperParams,
                 opt_state: vn.AdamState | None = None, t: int = 0):
        self.library = library
        self.params = params
        self.hp = hp
        self.opt_state = opt_state or vn.AdamState(hp.lr, hp.adam_b1, hp.adam_b2, hp.adam_eps)
        self.t = t
        self._lock = threading.Lock()

    def retrieve(self, state: StateQuery, rng, semantic_only: bool = False) -> Retrieval:
        hp = self.hp
        candidates = self.library.recall_candidates(state, hp.K0)
        if not candidates:
            return Retrieval(state, [], [], np.zeros(0), [], 1.0)
        if semantic_only:
            alpha = 1.0
            scored = score_candidates(state, candidates, alpha, None)
        else:
            alpha = anneal_alpha(self.t, hp)
            scored = score_candidates(state, candidates, alpha, self.params)
        probs = policy_distribution(scored, hp.tau_c)
        selected = select_cases(probs, scored, hp.k, hp.epsilon, rng)
        return Retrieval(state, candidates, scored, probs, selected, alpha)

    def update_from_episode(self, retrieval: Retrieval, r: int, sample_rng, dropout_rng):
        """One gradient step on this episode's samples; always advances ``t``.

        Returns ``(params, opt_state, t)``. A :class:`NumericError` from the
        optimizer propagates after the counter has advanced; params are then
        left unchanged.
        """
        return self.update_from_rounds([(retrieval, r)], sample_rng, dropout_rng)

    def update_from_rounds(self, rounds, sample_rng, dropout_rng):
        """Like :meth:`update_from_episode` for an episode with retries.

        ``rounds`` is ``[(retrieval, reward), ...]`` in attempt order. Samples
        from every round go into one batch; the entropy term uses the last
        round's distribution. Still one step and one counter advance.
        """
        with self._lock:
            try:
                rounds = [(ret, r) for ret, r in rounds if ret is not None and ret.scored]
                if rounds:
                    self._apply_update(rounds, sample_rng, dropout_rng)
            finally:
                self.t += 1
            return self.params, self.opt_state, self.t

    def _apply_update(self, rounds, sample_rng, dropout_rng):
        hp = self.hp
        batch = []
        for retrieval, r in rounds:
            labels = build_training_samples(retrieval.selected, retrieval.scored, r, sample_rng, hp)
            e_s = retrieval.state.embedding
            by_id = {c.id: c for c, _ in retrieval.candidates}
            batch.extend(vn.TrainingSample(vn.build_features(e_s, by_id[cid].embedding), y) for cid, y in labels)
        if not batch:
            return
        last = rounds[-1][0]
        Zc = vn.build_feature_matrix(last.state.embedding, np.stack([c.embedding for c, _ in last.candidates]))
        sem_norm = np.array([c.s_sem_norm for c in last.scored])
        s_val = vn.forward_batch(self.params, Zc, "eval")
        ctx = vn.PolicyContext(Zc, sem_norm, last.alpha, hp.tau_c, float(s_val.min()), float(s_val.max()))
        probs, _ = ctx.probs_from_values(s_val)
        _, grads = vn.loss_and_grads(self.params, batch, probs, hp.beta, policy=ctx, train=True, rng=dropout_rng)
        params, opt = vn.train_step(self.params, grads, self.opt_state)
        self.params, self.opt_state = params, opt

    def value_of(self, state: StateQuery, case_id: str) -> float:
        entry = self.library[case_id]
        return vn.forward(self.params, vn.build_features(state.embedding, entry.embedding), "eval")


__all__ = [
    "CaseEntry",
    "CaseLibrary",
    "CasePolicy",
    "NumericError",
    "Retrieval",
    "ScoredCandidate",
    "StateQuery",
    "anneal_alpha",
    "build_training_samples",
    "minmax",
    "policy_distribution",
    "score_candidates",
    "select_cases",
]
