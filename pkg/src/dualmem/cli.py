"""Command-line entry point.

Subcommands: ``simulate``, ``retrieve``, ``skills rank|update``,
``geo compare`` and ``report``. Tables go to stdout as TSV. Exit status is
0 on success, 2 on contract errors and 3 on I/O or parse errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from dualmem import geometry, metrics
from dualmem import value_net as vn
from dualmem.case_memory import CaseLibrary, StateQuery, anneal_alpha, policy_distribution, score_candidates
from dualmem.embedding import HashEmbedder
from dualmem.errors import ContractError, InvalidInputError, NumericError, ParseError
from dualmem.hyper import HyperParams
from dualmem.sim_env import MODES, STREAMS, WorldConfig, run_experiment
from dualmem.skill_memory import SkillLibrary

EXIT_CONTRACT = 2
EXIT_IO = 3


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None


def _hyper(args) -> HyperParams:
    if getattr(args, "hyper", None):
        return HyperParams.from_dict(_read_json(args.hyper))
    return HyperParams()


def _stream_seeds(pairs) -> dict:
    out = {}
    for item in pairs or []:
        name, sep, value = item.partition("=")
        if not sep or name not in STREAMS:
            raise InvalidInputError(f"--stream-seed expects NAME=INT with NAME in {STREAMS}")
        out[name] = int(value)
    return out


def cmd_simulate(args) -> int:
    cfg = WorldConfig.from_dict(_read_json(args.config)) if args.config else WorldConfig()
    res = run_experiment(cfg, args.episodes, args.mode, args.seed, args.eval_episodes,
                         stream_seeds=_stream_seeds(args.stream_seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_outcomes(res.outcomes, out / "outcomes.jsonl")
    res.engines.cases.library.save(out / "cases.jsonl")
    res.engines.skills.save(out / "skills.jsonl")
    vn.save_params(res.engines.cases.params, out / "params.json")
    run = {
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "mode": args.mode,
        "seed": args.seed,
        "episodes": args.episodes,
        "eval_episodes": args.eval_episodes,
        "anneal_t": res.engines.cases.t,
    }
    (out / "run.json").write_text(json.dumps(run, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    report = metrics.aggregate_metrics(res.outcomes, cfg.digest())
    sys.stdout.write(metrics.report_tsv(report, args.mode))
    return 0


def cmd_retrieve(args) -> int:
    hp = _hyper(args)
    lib = CaseLibrary.load(args.store)
    embed = HashEmbedder(lib.d, args.embed_seed)
    state = StateQuery(args.query, embed(args.query), args.t)
    candidates = lib.recall_candidates(state, args.k)
    sys.stdout.write("rank\tcase_id\ts_sem\ts_val\tfused\tprob\n")
    if not candidates:
        return 0
    if args.semantic_only:
        params, alpha = None, 1.0
    else:
        if not args.params:
            raise InvalidInputError("--params is required unless --semantic-only is given")
        params = vn.load_params(args.params)
        if params.d != lib.d:
            raise InvalidInputError(f"params dimension {params.d} != store dimension {lib.d}")
        alpha = anneal_alpha(args.t, hp)
    scored = score_candidates(state, candidates, alpha, params)
    probs = policy_distribution(scored, hp.tau_c)
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].fused, scored[i].case_id))
    for rank, i in enumerate(order, start=1):
        c = scored[i]
        s_val = "NA" if params is None else repr(c.s_val)
        sys.stdout.write(f"{rank}\t{c.case_id}\t{c.s_sem!r}\t{s_val}\t{c.fused!r}\t{float(probs[i])!r}\n")
    return 0


def cmd_skills_rank(args) -> int:
    hp = _hyper(args)
    lib = SkillLibrary.load(args.store, hp)
    embed = HashEmbedder(lib.d, args.embed_seed)
    state = StateQuery(args.query, embed(args.query))
    sys.stdout.write("rank\tskill_id\tutility\tscore\n")
    for rank, (e, score) in enumerate(lib.rank_skills(state), start=1):
        sys.stdout.write(f"{rank}\t{e.id}\t{float(e.utility)!r}\t{float(score)!r}\n")
    return 0


def cmd_skills_update(args) -> int:
    hp = _hyper(args)
    if args.dispose:
        hp = hp.replace(dispose=args.dispose)
    lib = SkillLibrary.load(args.store, hp)
    called = [s for s in args.called.split(",") if s]
    if not called:
        raise InvalidInputError("--called needs at least one skill id")
    try:
        changes = lib.update_skill_utilities(called, args.reward)
        failure = None
    except ContractError as exc:
        changes, failure = None, exc
    lib.save(args.store)
    if failure is not None:
        raise failure
    sys.stdout.write("skill_id\tU_before\tU_after\tdisposition\n")
    for ch in changes:
        sys.stdout.write(f"{ch.skill_id}\t{float(ch.before)!r}\t{float(ch.after)!r}\t{ch.disposed or '-'}\n")
    return 0


def cmd_geo_compare(args) -> int:
    if args.align != "none":
        raise InvalidInputError(f"alignment {args.align!r} is not implemented")
    gen = geometry.load_geometry(args.gen)
    ref = geometry.load_geometry(args.ref)
    iou, cd, hd = geometry.compare(gen, ref, args.points, args.res, np.random.default_rng(args.seed))
    sys.stdout.write(f"{float(iou)!r}\t{float(cd)!r}\t{float(hd)!r}\n")
    return 0


def _load_report(log, phase):
    outcomes = metrics.read_outcomes(log)
    if phase != "all":
        outcomes = [o for o in outcomes if o.phase == phase]
    digest = None
    run = Path(log).with_name("run.json")
    if run.exists():
        digest = _read_json(run).get("config_digest")
    return metrics.aggregate_metrics(outcomes, digest)


def cmd_report(args) -> int:
    rep = _load_report(args.log, args.phase)
    if args.compare is None:
        sys.stdout.write(metrics.report_tsv(rep))
        return 0
    other = _load_report(args.compare, args.phase)
    sys.stdout.write(metrics.comparison_tsv(metrics.compare_modes(rep, other)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualmem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a seeded synthetic experiment")
    s.add_argument("--config", help="world config JSON (defaults if omitted)")
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--episodes", type=int, required=True)
    s.add_argument("--eval-episodes", type=int, default=0, help="extra episodes with updates frozen")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--stream-seed", action="append", metavar="NAME=INT",
                   help=f"re-seed one random stream ({', '.join(STREAMS)})")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("retrieve", help="rank case candidates for a query")
    r.add_argument("--store", required=True)
    r.add_argument("--query", required=True)
    r.add_argument("--k", type=int, default=HyperParams.K0, help="candidates to recall")
    r.add_argument("--params")
    r.add_argument("--t", type=int, default=0, help="annealing step")
    r.add_argument("--semantic-only", action="store_true")
    r.add_argument("--embed-seed", type=int, default=7)
    r.add_argument("--hyper", help="hyperparameter JSON")
    r.set_defaults(func=cmd_retrieve)

    sk = sub.add_parser("skills", help="skill library operations")
    sks = sk.add_subparsers(dest="skills_command", required=True)
    sr = sks.add_parser("rank")
    sr.add_argument("--store", required=True)
    sr.add_argument("--query", required=True)
    sr.add_argument("--embed-seed", type=int, default=7)
    sr.add_argument("--hyper")
    sr.set_defaults(func=cmd_skills_rank)
    su = sks.add_parser("update")
    su.add_argument("--store", required=True)
    su.add_argument("--called", required=True, help="comma-separated skill ids")
    su.add_argument("--reward", type=int, choices=(0, 1), required=True)
    su.add_argument("--dispose", choices=("freeze", "delete"))
    su.add_argument("--hyper")
    su.set_defaults(func=cmd_skills_update)

    g = sub.add_parser("geo", help="geometry metrics")
    gs = g.add_subparsers(dest="geo_command", required=True)
    gc = gs.add_parser("compare")
    gc.add_argument("--gen", required=True)
    gc.add_argument("--ref", required=True)
    gc.add_argument("--points", type=int, default=geometry.DEFAULT_POINTS)
    gc.add_argument("--res", type=int, default=geometry.DEFAULT_RESOLUTION)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--align", choices=("none", "pca"), default="none")
    gc.set_defaults(func=cmd_geo_compare)

    rp = sub.add_parser("report", help="aggregate an outcome log")
    rp.add_argument("--log", required=True)
    rp.add_argument("--compare")
    rp.add_argument("--phase", choices=("all", "train", "eval"), default="all")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
