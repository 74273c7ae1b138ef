"""Skill library: utility-gated retrieval, one-round masking, EMA updates."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dualmem.embedding import as_vector, cosine_many
from dualmem.errors import ConflictError, InvalidInputError, NotFoundError, ParseError
from dualmem.hyper import HyperParams


@dataclass
class SkillStats:
    n_uses: int = 0
    n_success: int = 0
    n_fail: int = 0
    last_reward: int | None = None
    frozen: bool = False


@dataclass
class SkillEntry:
    id: str
    index_text: str
    embedding: np.ndarray
    script: str = ""
    doc: str = ""
    params: list = field(default_factory=list)  # [{"name", "description", "kind"}]
    constraints: str = ""
    utility: float = 0.5
    stat: SkillStats = field(default_factory=SkillStats)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "index_text": self.index_text,
            "embedding": [float(x) for x in self.embedding],
            "script": self.script,
            "doc": self.doc,
            "params": [dict(p) for p in self.params],
            "constraints": self.constraints,
            "utility": float(self.utility),
            "stat": {
                "n_uses": self.stat.n_uses,
                "n_success": self.stat.n_success,
                "n_fail": self.stat.n_fail,
                "last_reward": self.stat.last_reward,
                "frozen": self.stat.frozen,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SkillEntry":
        st = data.get("stat", {})
        return cls(
            id=str(data["id"]),
            index_text=str(data["index_text"]),
            embedding=as_vector(data["embedding"]),
            script=data.get("script", ""),
            doc=data.get("doc", ""),
            params=[dict(p) for p in data.get("params", [])],
            constraints=data.get("constraints", ""),
            utility=float(data["utility"]),
            stat=SkillStats(
                n_uses=int(st.get("n_uses", 0)),
                n_success=int(st.get("n_success", 0)),
                n_fail=int(st.get("n_fail", 0)),
                last_reward=st.get("last_reward"),
                frozen=bool(st.get("frozen", False)),
            ),
        )


def skill_similarity(e_s, e_m) -> float:
    """Bounded similarity ``1 / (2 - cos)``, in (0, 1]."""
    c = cosine_many(e_s, np.asarray(e_m, dtype=np.float64)[None, :])[0]
    return float(1.0 / (2.0 - c))


@dataclass
class UtilityChange:
    skill_id: str
    before: float
    after: float
    disposed: str | None = None  # "freeze" | "delete" | None


class SkillLibrary:
    def __init__(self, d: int, hp: HyperParams | None = None):
        self.d = d
        self.hp = hp or HyperParams(d=d)
        self._entries: dict[str, SkillEntry] = {}
        self._pending_masks: set[str] = set()
        self._lock = threading.Lock()
        self.revision = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, skill_id):
        return skill_id in self._entries

    def __getitem__(self, skill_id) -> SkillEntry:
        try:
            return self._entries[skill_id]
        except KeyError:
            raise NotFoundError(f"unknown skill {skill_id!r}") from None

    def entries(self) -> list:
        return list(self._entries.values())

    @property
    def pending_masks(self) -> frozenset:
        return frozenset(self._pending_masks)

    def register_skill(self, entry: SkillEntry) -> int:
        entry.embedding = as_vector(entry.embedding, self.d)
        if not 0.0 <= entry.utility <= 1.0:
            raise InvalidInputError(f"utility {entry.utility} outside [0, 1]")
        with self._lock:
            if entry.id in self._entries:
                raise ConflictError(f"skill {entry.id!r} already registered")
            self._entries[entry.id] = entry
            self.revision += 1
            return self.revision

    def eligible_skills(self, masked_ids=frozenset()) -> list:
        hp = self.hp
        return [
            e for e in self._entries.values()
            if e.utility >= hp.U_min and not e.stat.frozen and e.id not in masked_ids
        ]

    def rank_skills(self, state, consume_masks: bool = True) -> list:
        """One retrieval round: ``[(SkillEntry, score), ...]`` best first.

        Pending masks from the previous round are applied and then cleared,
        so a mask lasts exactly one round.
        """
        hp = self.hp
        with self._lock:
            masked = set(state.masked_skill_ids) | self._pending_masks
            if consume_masks:
                self._pending_masks = set()
        pool = self.eligible_skills(masked)
        if not pool:
            return []
        sims = cosine_many(state.embedding, np.stack([e.embedding for e in pool]))
        s_sem = 1.0 / (2.0 - sims)
        top = sorted(range(len(pool)), key=lambda i: (-s_sem[i], pool[i].id))[: hp.K_skill]
        scored = [(pool[i], hp.lambda_sem * float(s_sem[i]) + hp.lambda_U * pool[i].utility) for i in top]
        scored.sort(key=lambda es: (-es[1], es[0].id))
        return scored[: hp.k_skill]

    def mask_failed(self, skill_id: str) -> None:
        if skill_id not in self._entries:
            raise NotFoundError(f"unknown skill {skill_id!r}")
        with self._lock:
            self._pending_masks.add(skill_id)

    def clear_masks(self) -> None:
        with self._lock:
            self._pending_masks = set()

    def update_skill_utilities(self, called_ids, r: int) -> list:
        """EMA update per call, then dispose of low-utility skills.

        Unknown ids do not block the rest; they are reported together in a
        :class:`NotFoundError` raised after all known ids are applied.
        """
        if r not in (0, 1):
            raise InvalidInputError("reward must be 0 or 1")
        hp = self.hp
        changes = []
        missing = []
        with self._lock:
            for sid in called_ids:
                e = self._entries.get(sid)
                if e is None:
                    missing.append(sid)
                    continue
                before = e.utility
                e.utility = min(1.0, max(0.0, e.utility + hp.eta * (r - e.utility)))
                e.stat.n_uses += 1
                if r == 1:
                    e.stat.n_success += 1
                else:
                    e.stat.n_fail += 1
                e.stat.last_reward = r
                changes.append(UtilityChange(sid, before, e.utility))
            for ch in changes:
                e = self._entries.get(ch.skill_id)
                if e is None or e.stat.frozen:
                    continue
                if e.utility < hp.U_prune and e.stat.n_uses >= hp.n_min:
                    if hp.dispose == "delete":
                        del self._entries[e.id]
                        self._pending_masks.discard(e.id)
                    else:
                        e.stat.frozen = True
                    ch.disposed = hp.dispose
            self.revision += 1
        if missing:
            raise NotFoundError(f"unknown skill ids: {', '.join(missing)}")
        return changes

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for e in self._entries.values():
                fh.write(json.dumps(e.to_dict()) + "\n")

    @classmethod
    def load(cls, path, hp: HyperParams | None = None, d: int | None = None) -> "SkillLibrary":
        path = Path(path)
        lib = None
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    entry = SkillEntry.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad skill record: {exc}", path, lineno) from None
                if lib is None:
                    dim = d if d is not None else entry.embedding.shape[0]
                    lib = cls(dim, hp.replace(d=dim) if hp is not None else None)
                try:
                    lib.register_skill(entry)
                except (InvalidInputError, ConflictError) as exc:
                    raise ParseError(str(exc), path, lineno) from None
        if lib is None:
            if d is None:
                raise ParseError("empty skill store and no dimension given", path)
            lib = cls(d, hp)
        return lib


def new_skill(skill_id: str, index_text: str, embedding, hp: HyperParams, **fields) -> SkillEntry:
    """A fresh entry starting at the initial utility prior."""
    return SkillEntry(id=skill_id, index_text=index_text, embedding=embedding, utility=hp.U_init, **fields)
