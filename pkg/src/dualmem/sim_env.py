"""Synthetic closed-loop environment for exercising retrieval end to end.

Tasks come in families that share a direction in embedding space. Every
task gets its own useful cases plus trap cases that sit *closer* to the
task than the useful ones but never help. Skills are shared per family:
some are useful, the rest are traps planted near the family centre so that
pure semantic ranking prefers them.

An episode retrieves cases and skills, calls the top-ranked skill, and
draws a Bernoulli outcome whose rate depends on whether a useful case was
injected and a useful skill was called. Failures are retried (with the
failed skill masked for one round) up to ``max_retries`` times.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from dualmem.case_memory import CaseEntry, CaseLibrary, CasePolicy, StateQuery
from dualmem.embedding import cosine_many
from dualmem.errors import ConstructionError, InvalidInputError, NotFoundError
from dualmem.hyper import HyperParams
from dualmem.skill_memory import SkillLibrary, new_skill
from dualmem import value_net as vn

MODES = ("learned", "semantic")
# Skills start above the eligibility floor so one unlucky first call does not
# retire them for good (utilities only move when a skill is called).
SIM_SKILL_PRIOR = 0.7
STREAMS = ("world", "init", "policy", "dropout", "samples", "environment")


def make_streams(seed: int, overrides: dict | None = None) -> dict:
    """Independent named generators derived from one seed.

    ``overrides`` maps a stream name to its own seed so one component can be
    replayed or varied without disturbing the others.
    """
    overrides = overrides or {}
    unknown = set(overrides) - set(STREAMS)
    if unknown:
        raise InvalidInputError(f"unknown random streams: {sorted(unknown)}")
    out = {}
    for i, name in enumerate(STREAMS):
        root = overrides.get(name, seed)
        out[name] = np.random.default_rng(np.random.SeedSequence(entropy=int(root), spawn_key=(i,)))
    return out


@dataclass
class WorldConfig:
    n_tasks: int = 20
    n_families: int = 5
    useful_cases_per_task: int = 2
    case_traps_per_task: int = 1
    useful_skills_per_family: int = 2
    skill_traps_per_family: int = 2
    d: int = 64
    p_hi: float = 0.95
    p_base: float = 0.5
    p_lo: float = 0.05
    max_retries: int = 3
    use_cases: bool = True
    use_skills: bool = True
    # isotropic noise scales (relative to unit-norm directions)
    task_spread: float = 0.5
    case_spread: float = 0.7
    case_trap_spread: float = 0.35
    skill_spread: float = 0.8
    skill_trap_spread: float = 0.2
    # weight of the shared latent "works in practice" direction; useful cases
    # lean toward it, traps away from it
    quality_weight: float = 0.4
    max_resample: int = 200
    hyper: HyperParams = field(default_factory=lambda: HyperParams(U_init=SIM_SKILL_PRIOR))

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = HyperParams.from_dict(self.hyper)
        if self.hyper.d != self.d:
            self.hyper = self.hyper.replace(d=self.d)

    def validate(self) -> None:
        counts = (self.n_tasks, self.n_families, self.useful_cases_per_task, self.useful_skills_per_family)
        if min(counts) < 1 or self.case_traps_per_task < 1 or self.skill_traps_per_family < 0:
            raise ConstructionError("world needs >= 1 task, family, useful case, useful skill and case trap")
        if self.n_families > self.n_tasks:
            raise ConstructionError("more families than tasks")
        for p in (self.p_hi, self.p_base, self.p_lo):
            if not 0.0 <= p <= 1.0:
                raise ConstructionError("success probabilities must lie in [0, 1]")
        if not self.p_hi > self.p_base > self.p_lo:
            raise ConstructionError("need p_hi > p_base > p_lo")
        if self.max_retries < 0 or self.d < 2:
            raise ConstructionError("max_retries >= 0 and d >= 2 required")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["hyper"] = self.hyper.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Task:
    task_id: str
    index_text: str
    embedding: np.ndarray
    family: int
    useful_case_ids: frozenset
    useful_skill_ids: frozenset
    trap_case_ids: frozenset
    trap_skill_ids: frozenset


@dataclass
class SyntheticWorld:
    cfg: WorldConfig
    tasks: list
    cases: list
    skills: list
    seed: int | None = None

    def task(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise NotFoundError(f"unknown task {task_id!r}")


def _unit(v):
    return v / np.linalg.norm(v)


def _near(centre, spread, rng):
    d = centre.shape[0]
    return _unit(centre + spread * rng.standard_normal(d) / np.sqrt(d))


def build_world(cfg: WorldConfig, rng, seed: int | None = None) -> SyntheticWorld:
    cfg.validate()
    d = cfg.d
    hp = cfg.hyper
    centres = [_unit(rng.standard_normal(d)) for _ in range(cfg.n_families)]
    families = [i % cfg.n_families for i in range(cfg.n_tasks)]
    task_vecs = [_near(centres[f], cfg.task_spread, rng) for f in families]

    skills = []
    fam_useful_skills = []
    fam_trap_skills = []
    for f, c in enumerate(centres):
        members = [task_vecs[i] for i in range(cfg.n_tasks) if families[i] == f]
        useful = []
        for j in range(cfg.useful_skills_per_family):
            sid = f"skill-f{f:02d}-u{j}"
            skills.append(new_skill(sid, f"family {f} skill {j}", _near(c, cfg.skill_spread, rng), hp,
                                    doc=f"useful operation for family {f}"))
            useful.append(sid)
        useful_vecs = np.stack([s.embedding for s in skills[-len(useful):]])
        traps = []
        for j in range(cfg.skill_traps_per_family):
            for _ in range(cfg.max_resample):
                v = _near(c, cfg.skill_trap_spread, rng)
                if all(cosine_many(t, v[None, :])[0] >= np.median(cosine_many(t, useful_vecs)) for t in members):
                    break
            else:
                raise ConstructionError(f"could not place skill trap {j} for family {f}")
            sid = f"skill-f{f:02d}-trap{j}"
            skills.append(new_skill(sid, f"family {f} lookalike skill {j}", v, hp,
                                    doc=f"plausible but broken operation for family {f}"))
            traps.append(sid)
        fam_useful_skills.append(frozenset(useful))
        fam_trap_skills.append(frozenset(traps))

    quality = _unit(rng.standard_normal(d))
    qw = cfg.quality_weight

    tasks = []
    cases = []
    for i in range(cfg.n_tasks):
        tid = f"task-{i:03d}"
        tv = task_vecs[i]
        useful_ids, useful_vecs = [], []
        for j in range(cfg.useful_cases_per_task):
            v = _unit(_near(tv, cfg.case_spread, rng) + qw * quality)
            cid = f"case-{i:03d}-u{j}"
            cases.append(_case(cid, tid, "reference solution", v))
            useful_ids.append(cid)
            useful_vecs.append(v)
        med = float(np.median(cosine_many(tv, np.stack(useful_vecs))))
        trap_ids = []
        for j in range(cfg.case_traps_per_task):
            for _ in range(cfg.max_resample):
                v = _unit(_near(tv, cfg.case_trap_spread, rng) - qw * quality)
                if cosine_many(tv, v[None, :])[0] >= med:
                    break
            else:
                raise ConstructionError(f"could not place case trap {j} for {tid}")
            cid = f"case-{i:03d}-trap{j}"
            cases.append(_case(cid, tid, "lookalike solution", v))
            trap_ids.append(cid)
        f = families[i]
        tasks.append(Task(tid, f"task {i} family {f}", tv, f, frozenset(useful_ids),
                          fam_useful_skills[f], frozenset(trap_ids), fam_trap_skills[f]))
    return SyntheticWorld(cfg, tasks, cases, skills, seed)


def _case(cid, tid, kind, v) -> CaseEntry:
    return CaseEntry(
        id=cid,
        index_text=f"{tid} {kind}",
        embedding=v,
        intent=f"{kind} for {tid}",
        trajectory=[{"step": 0, "payload": f"run {cid}"}],
        outcome="success",
        success=True,
        created_episode=0,
    )


@dataclass
class Engines:
    cases: CasePolicy
    skills: SkillLibrary


def make_engines(world: SyntheticWorld, init_rng) -> Engines:
    """Fresh, isolated stores seeded from the world's planted memories."""
    hp = world.cfg.hyper
    lib = CaseLibrary(world.cfg.d)
    for c in world.cases:
        lib.add_case(copy.deepcopy(c))
    skills = SkillLibrary(world.cfg.d, hp)
    for s in world.skills:
        skills.register_skill(copy.deepcopy(s))
    params = vn.init_params(world.cfg.d, init_rng, hidden=hp.hidden, p_drop=hp.p_drop)
    return Engines(CasePolicy(lib, params, hp), skills)


@dataclass
class EpisodeOutcome:
    task_id: str
    selected_case_ids: list
    ranked_skill_ids: list
    called_skill_ids: list
    reward: int
    first_attempt_success: bool
    retries: int
    mode: str
    episode: int = 0
    phase: str = "train"
    trap_case_selected: bool = False
    useful_case_prob: float | None = None

    def __post_init__(self):
        if self.retries < 0:
            raise InvalidInputError("retries must be >= 0")
        if self.first_attempt_success and self.retries != 0:
            raise InvalidInputError("a first-attempt success has no retries")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeOutcome":
        return cls(**data)


def run_episode(world: SyntheticWorld, engines: Engines, task_id: str, mode: str, streams: dict,
                episode: int = 0, phase: str = "train", update: bool = True) -> EpisodeOutcome:
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}")
    cfg = world.cfg
    task = world.task(task_id)
    policy = engines.cases
    learned = mode == "learned"
    state = StateQuery(task.index_text, task.embedding, policy.t)

    called = []
    reward = 0
    attempts = 0
    retrieval = None
    rounds = []
    ranked_ids = []
    first_trap = False
    useful_prob = None
    engines.skills.clear_masks()
    for attempt in range(cfg.max_retries + 1):
        attempts += 1
        case_hit = False
        if cfg.use_cases:
            retrieval = policy.retrieve(state, streams["policy"], semantic_only=not learned)
            case_hit = bool(task.useful_case_ids.intersection(retrieval.selected))
            if attempt == 0:
                first_trap = bool(task.trap_case_ids.intersection(retrieval.selected))
                ids = [c.case_id for c in retrieval.scored]
                useful_prob = float(sum(p for cid, p in zip(ids, retrieval.probs) if cid in task.useful_case_ids))
        skill_id = None
        if cfg.use_skills:
            ranked = engines.skills.rank_skills(state)
            ranked_ids = [e.id for e, _ in ranked]
            if ranked:
                skill_id = ranked[0][0].id
                called.append(skill_id)
        skill_hit = skill_id is not None and skill_id in task.useful_skill_ids
        if case_hit and skill_hit:
            p = cfg.p_hi
        elif case_hit or skill_hit:
            p = cfg.p_base
        else:
            p = cfg.p_lo
        reward = int(streams["environment"].random() < p)
        rounds.append((retrieval if cfg.use_cases else None, reward))
        if reward:
            break
        if skill_id is not None and attempt < cfg.max_retries:
            engines.skills.mask_failed(skill_id)
    engines.skills.clear_masks()

    if learned and update:
        policy.update_from_rounds(rounds, streams["samples"], streams["dropout"])
        # every call before the last was followed by a failed verification
        if called:
            if len(called) > 1:
                engines.skills.update_skill_utilities(called[:-1], 0)
            engines.skills.update_skill_utilities(called[-1:], reward)

    retries = attempts - 1
    return EpisodeOutcome(
        task_id=task_id,
        selected_case_ids=list(retrieval.selected) if retrieval is not None else [],
        ranked_skill_ids=ranked_ids,
        called_skill_ids=called,
        reward=reward,
        first_attempt_success=bool(reward and retries == 0),
        retries=retries,
        mode=mode,
        episode=episode,
        phase=phase,
        trap_case_selected=first_trap,
        useful_case_prob=useful_prob,
    )


@dataclass
class ExperimentResult:
    cfg: WorldConfig
    world: SyntheticWorld
    engines: Engines
    outcomes: list
    mode: str
    seed: int


def run_experiment(cfg: WorldConfig, episodes: int, mode: str, seed: int,
                   eval_episodes: int = 0, stream_seeds: dict | None = None) -> ExperimentResult:
    """Round-robin tasks for ``episodes`` training episodes, then optionally
    ``eval_episodes`` more with all updates switched off."""
    if episodes < 1 or eval_episodes < 0:
        raise InvalidInputError("episodes must be >= 1 and eval_episodes >= 0")
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}")
    streams = make_streams(seed, stream_seeds)
    world = build_world(cfg, streams["world"], seed)
    engines = make_engines(world, streams["init"])
    outcomes = []
    n = len(world.tasks)
    for ep in range(episodes + eval_episodes):
        phase = "train" if ep < episodes else "eval"
        task = world.tasks[ep % n]
        outcomes.append(run_episode(world, engines, task.task_id, mode, streams,
                                    episode=ep, phase=phase, update=phase == "train"))
    return ExperimentResult(cfg, world, engines, outcomes, mode, seed)
