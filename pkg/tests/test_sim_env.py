import numpy as np
import pytest

from dualmem.embedding import cosine_many
from dualmem.errors import ConstructionError, InvalidInputError, NotFoundError
from dualmem.sim_env import (
    STREAMS, EpisodeOutcome, WorldConfig, build_world, make_engines, make_streams, run_episode, run_experiment,
)

SMALL = dict(n_tasks=6, n_families=2, d=16)


def small_cfg(**kw):
    return WorldConfig(**{**SMALL, **kw})


def test_streams_independent_and_overridable():
    a, b = make_streams(3), make_streams(3)
    assert set(a) == set(STREAMS)
    assert [a[n].random() for n in STREAMS] == [b[n].random() for n in STREAMS]
    c = make_streams(3, {"policy": 99})
    fresh = make_streams(3)
    for n in STREAMS:
        same = c[n].random() == fresh[n].random()
        assert same == (n != "policy")
    with pytest.raises(InvalidInputError):
        make_streams(3, {"nope": 1})


def test_world_is_deterministic():
    w1 = build_world(WorldConfig(), np.random.default_rng(5))
    w2 = build_world(WorldConfig(), np.random.default_rng(5))
    assert [c.to_dict() for c in w1.cases] == [c.to_dict() for c in w2.cases]
    assert [s.to_dict() for s in w1.skills] == [s.to_dict() for s in w2.skills]


def test_default_world_shape_and_trap_invariant():
    w = build_world(WorldConfig(), np.random.default_rng(0))
    assert (len(w.tasks), len(w.cases), len(w.skills)) == (20, 60, 20)
    by_id = {c.id: c for c in w.cases}
    skills = {s.id: s for s in w.skills}
    for t in w.tasks:
        assert t.useful_case_ids and t.useful_skill_ids and t.trap_case_ids
        useful = np.stack([by_id[i].embedding for i in t.useful_case_ids])
        med = np.median(cosine_many(t.embedding, useful))
        for tid in t.trap_case_ids:
            assert cosine_many(t.embedding, by_id[tid].embedding[None, :])[0] >= med
        useful_s = np.stack([skills[i].embedding for i in t.useful_skill_ids])
        med_s = np.median(cosine_many(t.embedding, useful_s))
        for sid in t.trap_skill_ids:
            assert cosine_many(t.embedding, skills[sid].embedding[None, :])[0] >= med_s


@pytest.mark.parametrize("kw", [dict(n_tasks=0), dict(p_hi=0.4), dict(p_lo=-0.1), dict(n_families=30)])
def test_bad_config_rejected(kw):
    with pytest.raises(ConstructionError):
        build_world(WorldConfig(**kw), np.random.default_rng(0))


def test_infeasible_traps_raise():
    cfg = WorldConfig(case_trap_spread=50.0, max_resample=3)
    with pytest.raises(ConstructionError):
        build_world(cfg, np.random.default_rng(0))


def test_config_roundtrip():
    cfg = small_cfg(p_hi=0.9)
    back = WorldConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.digest() == cfg.digest()
    assert small_cfg(p_hi=0.8).digest() != cfg.digest()
    with pytest.raises(InvalidInputError):
        WorldConfig.from_dict({"bogus": 1})


def _setup(cfg, seed=0):
    streams = make_streams(seed)
    world = build_world(cfg, streams["world"])
    return world, make_engines(world, streams["init"]), streams


def test_guaranteed_success():
    cfg = WorldConfig(n_tasks=1, n_families=1, skill_traps_per_family=0, useful_skills_per_family=1,
                      p_hi=1.0, p_base=0.5, p_lo=0.0, d=16)
    world, eng, streams = _setup(cfg)
    out = run_episode(world, eng, "task-000", "learned", streams)
    assert out.reward == 1 and out.retries == 0 and out.first_attempt_success


def test_guaranteed_failure_uses_all_retries():
    cfg = small_cfg(use_cases=False, use_skills=False, p_lo=0.0)
    world, eng, streams = _setup(cfg)
    out = run_episode(world, eng, "task-000", "learned", streams)
    assert (out.reward, out.retries, out.first_attempt_success) == (0, 3, False)
    assert out.selected_case_ids == [] and out.called_skill_ids == []


def test_unknown_task_and_mode():
    world, eng, streams = _setup(small_cfg())
    with pytest.raises(NotFoundError):
        run_episode(world, eng, "task-999", "learned", streams)
    with pytest.raises(InvalidInputError):
        run_episode(world, eng, "task-000", "greedy", streams)


def test_failed_skill_masked_on_retry():
    cfg = small_cfg(p_hi=0.02, p_base=0.01, p_lo=0.0)
    world, eng, streams = _setup(cfg, seed=2)
    out = run_episode(world, eng, "task-000", "semantic", streams)
    assert out.reward == 0 and out.retries == 3
    calls = out.called_skill_ids
    assert all(a != b for a, b in zip(calls, calls[1:]))
    assert eng.skills.pending_masks == frozenset()


def _stores(eng):
    return ([c.to_dict() for c in eng.cases.library.entries()],
            [s.to_dict() for s in eng.skills.entries()],
            {k: v.tolist() for k, v in eng.cases.params.arrays().items()})


def test_seeded_replay_is_identical():
    runs = []
    for _ in range(2):
        world, eng, streams = _setup(small_cfg(), seed=7)
        outs = [run_episode(world, eng, t.task_id, "learned", streams, episode=i) for i, t in enumerate(world.tasks)]
        runs.append(([o.to_dict() for o in outs], _stores(eng)))
    assert runs[0] == runs[1]


def test_experiment_counts_and_anneal():
    res = run_experiment(small_cfg(), 10, "learned", 1)
    assert len(res.outcomes) == 10 and res.engines.cases.t == 10
    assert [o.task_id for o in res.outcomes[:7]] == [f"task-{i % 6:03d}" for i in range(7)]


def test_eval_phase_freezes_learning():
    res = run_experiment(small_cfg(), 6, "learned", 1, eval_episodes=4)
    assert [o.phase for o in res.outcomes] == ["train"] * 6 + ["eval"] * 4
    assert res.engines.cases.t == 6


def test_semantic_mode_writes_nothing():
    cfg = small_cfg()
    streams = make_streams(4)
    world = build_world(cfg, streams["world"])
    before = make_engines(world, make_streams(4)["init"])
    res = run_experiment(cfg, 30, "semantic", 4)
    assert _stores(before) == _stores(res.engines)
    assert res.engines.cases.t == 0


def test_outcome_invariants():
    with pytest.raises(InvalidInputError):
        EpisodeOutcome("t", [], [], [], 1, True, 2, "learned")
    with pytest.raises(InvalidInputError):
        EpisodeOutcome("t", [], [], [], 0, False, -1, "learned")
    res = run_experiment(small_cfg(), 20, "learned", 3)
    for o in res.outcomes:
        assert o.first_attempt_success == (o.reward == 1 and o.retries == 0)
        assert EpisodeOutcome.from_dict(o.to_dict()) == o


@pytest.mark.slow
def test_useful_case_probability_trend():
    # unique useful memories and deterministic success model
    cfg = WorldConfig(useful_cases_per_task=1, useful_skills_per_family=1, p_hi=1.0, p_base=0.5, p_lo=0.0)
    curves = []
    for seed in range(5):
        res = run_experiment(cfg, 500, "learned", seed)
        probs = np.array([o.useful_case_prob for o in res.outcomes])
        curves.append(probs.reshape(5, 100).mean(axis=1))
    mean = np.mean(curves, axis=0)
    assert all(b >= a for a, b in zip(mean, mean[1:])), mean
