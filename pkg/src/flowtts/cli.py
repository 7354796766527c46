"""Command-line surface for the toy TTS pipeline.

Every artifact-producing subcommand takes a run directory and writes the
same layout: config.echo (the fully resolved configuration), metrics.tsv
(deterministic given config + seed), checkpoints/ and reports/.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .ar_model import DecodeConfig
from .config import ConfigError, RunConfig, build_run_config, echo_config, parse_kv
from .metrics import cer as cer_metric
from .metrics import cpwer, parse_transcripts, wer as wer_metric
from .preference import apo_round, dpo_train_epoch, pairs_from_lines, pairs_to_lines
from .tensor import ParameterStore
from .toytask import ToyWorld, gen_stream, make_eval_prompts, stage_specs
from .trainer import (
    eval_cer,
    eval_dialogue,
    eval_frame_cer,
    materialize_params,
    train,
    write_metrics,
)


def _load_config(args) -> RunConfig:
    kv: dict[str, str] = {}
    if args.config:
        with open(args.config) as f:
            kv.update(parse_kv(f.read()))
    for item in args.set or []:
        extra = parse_kv(item)
        for k, v in extra.items():
            kv[k] = v
    return build_run_config(kv)


def _prepare_run_dir(run_dir: str, rc: RunConfig, argv) -> None:
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "reports"), exist_ok=True)
    with open(os.path.join(run_dir, "config.echo"), "w") as f:
        f.write(f"# cli: {' '.join(argv)}\n")
        f.write(echo_config(rc))


def _write_rows(path: str, header: str, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write("\t".join(str(c) for c in row) + "\n")


def _held_out(world: ToyWorld, rc: RunConfig, n: int, seed: int):
    return make_eval_prompts(world, n, seed)


def cmd_train(args, argv) -> int:
    rc = _load_config(args)
    _prepare_run_dir(args.run_dir, rc, argv)
    world = ToyWorld(rc.world)
    prompts, excl = make_eval_prompts(world, args.eval_prompts, args.eval_seed)
    params = ParameterStore(rc.train.seed)
    train(params, world, rc.am, rc.fm, rc.train, run_dir=args.run_dir,
          exclude=excl, log_every=args.log_every)
    cers = eval_cer(prompts, params, world, rc.am)
    rows = [(i, f"{c:.6f}") for i, c in enumerate(cers)]
    rows.append(("mean", f"{float(np.mean(cers)):.6f}"))
    _write_rows(os.path.join(args.run_dir, "reports", "eval_cer.tsv"),
                "prompt\tcer", rows)
    return 0


def cmd_sample(args, argv) -> int:
    rc = _load_config(args)
    _prepare_run_dir(args.run_dir, rc, argv)
    world = ToyWorld(rc.world)
    params = ParameterStore.load(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    sample = world.make_sample(rng, args.speakers, args.turns, token_noise=0.0)
    report, hits, n_turns = eval_dialogue(sample, params, world, rc.am, rc.fm)
    cers = eval_cer([sample], params, world, rc.am)
    lines = [
        f"speakers\t{args.speakers}",
        f"turns\t{args.turns}",
        f"reference\t{' '.join(str(s) for s in world.reference_symbols(sample.script))}",
        f"tokens\t{' '.join(str(t) for t in sample.tokens)}",
        f"frames_shape\t{sample.frames.shape[0]}x{sample.frames.shape[1]}",
        f"cer\t{cers[0]:.6f}",
        f"cpcer\t{report.rate:.6f}",
        f"speaker_id_hits\t{hits}/{n_turns}",
    ]
    with open(os.path.join(args.run_dir, "reports", "sample.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    write_metrics(os.path.join(args.run_dir, "metrics.tsv"),
                  [(0, cers[0], report.rate, hits / n_turns, 0.0)])
    print("\n".join(lines))
    return 0


def cmd_eval(args, argv) -> int:
    if args.ref and args.hyp:
        return _eval_files(args, argv)
    if not args.checkpoint:
        print("eval needs either --ref/--hyp files or --checkpoint", file=sys.stderr)
        return 2
    rc = _load_config(args)
    _prepare_run_dir(args.run_dir, rc, argv)
    world = ToyWorld(rc.world)
    params = ParameterStore.load(args.checkpoint)
    prompts, _ = make_eval_prompts(world, args.eval_prompts, args.eval_seed)
    rows = []
    for i, sample in enumerate(prompts):
        c = eval_cer([sample], params, world, rc.am)[0]
        report, hits, n_turns = eval_dialogue(sample, params, world, rc.am, rc.fm)
        rows.append((i, f"{c:.6f}", f"{report.rate:.6f}", f"{hits}/{n_turns}"))
    _write_rows(os.path.join(args.run_dir, "reports", "eval.tsv"),
                "prompt\tcer\tcpcer\tspeaker_hits", rows)
    mean_cer = float(np.mean([float(r[1]) for r in rows]))
    mean_cp = float(np.mean([float(r[2]) for r in rows]))
    write_metrics(os.path.join(args.run_dir, "metrics.tsv"),
                  [(0, mean_cer, mean_cp, 0.0, 0.0)])
    print(f"cer\t{mean_cer:.6f}\ncpcer\t{mean_cp:.6f}")
    return 0


def _eval_files(args, argv) -> int:
    with open(args.ref) as f:
        ref_text = f.read()
    with open(args.hyp) as f:
        hyp_text = f.read()
    if args.metric == "cer":
        value = cer_metric(ref_text.strip(), hyp_text.strip())
        print(f"metric\tcer\nrate\t{value:.6f}")
    elif args.metric == "wer":
        value = wer_metric(ref_text, hyp_text)
        print(f"metric\twer\nrate\t{value:.6f}")
    else:
        report = cpwer(parse_transcripts(ref_text), parse_transcripts(hyp_text))
        value = report.rate
        print(f"metric\tcpwer\nrate\t{report.rate:.6f}\n"
              f"sub\t{report.substitutions}\ndel\t{report.deletions}\n"
              f"ins\t{report.insertions}\nref_len\t{report.ref_len}")
    if args.run_dir:
        rc = _load_config(args)
        _prepare_run_dir(args.run_dir, rc, argv)
        write_metrics(os.path.join(args.run_dir, "metrics.tsv"),
                      [(0, value, 0.0, 0.0, 0.0)])
    return 0


def cmd_apo_pairs(args, argv) -> int:
    rc = _load_config(args)
    _prepare_run_dir(args.run_dir, rc, argv)
    world = ToyWorld(rc.world)
    params = ParameterStore.load(args.checkpoint)
    prompts, _ = make_eval_prompts(world, args.eval_prompts, args.eval_seed,
                                   n_speakers=1, n_turns=1)
    pairs, stats = apo_round(params, prompts, world, rc.am, n=args.n,
                             temperature=args.temperature, seed=args.seed,
                             cap=rc.dpo.pair_cap)
    with open(os.path.join(args.run_dir, "reports", "pairs.tsv"), "w") as f:
        f.write(pairs_to_lines(pairs))
    rows = [(i, float(k), 0.0, 0.0, 0.0) for i, k in enumerate(stats.pairs_per_prompt)]
    write_metrics(os.path.join(args.run_dir, "metrics.tsv"), rows)
    print(f"pairs\t{len(pairs)}\nprompts\t{stats.n_prompts}\n"
          f"skipped\t{stats.n_skipped}\nyield\t{stats.yield_rate:.3f}")
    return 0


def cmd_dpo_train(args, argv) -> int:
    rc = _load_config(args)
    _prepare_run_dir(args.run_dir, rc, argv)
    world = ToyWorld(rc.world)
    params = ParameterStore.load(args.checkpoint)
    ref = params.copy()
    with open(args.pairs) as f:
        pairs = pairs_from_lines(f.read())
    if not pairs:
        print("no pairs to train on", file=sys.stderr)
        return 1
    prompts_raw, _ = make_eval_prompts(world, args.eval_prompts, args.eval_seed,
                                       n_speakers=1, n_turns=1)
    prompts = [(list(s.profiles), s.script) for s in prompts_raw]
    losses = dpo_train_epoch(params, ref, pairs, prompts, rc.am, rc.dpo)
    params.save(os.path.join(args.run_dir, "checkpoints", "dpo"))
    write_metrics(os.path.join(args.run_dir, "metrics.tsv"),
                  [(i, l, 0.0, 0.0, rc.dpo.lr) for i, l in enumerate(losses)])
    print(f"batches\t{len(losses)}\nfinal_loss\t{losses[-1]:.6f}")
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck_suite import run_gradcheck_suite

    reports = run_gradcheck_suite()
    ok = all(r.passed for _, r in reports)
    lines = [f"{name}\t{'pass' if r.passed else 'FAIL'}\t{r.worst:.3e}"
             for name, r in reports]
    if args.run_dir:
        rc = _load_config(args)
        _prepare_run_dir(args.run_dir, rc, argv)
        _write_rows(os.path.join(args.run_dir, "reports", "gradcheck.tsv"),
                    "loss\tstatus\tworst_rel_err", [l.split("\t") for l in lines])
        write_metrics(os.path.join(args.run_dir, "metrics.tsv"),
                      [(i, r.worst, float(r.passed), 0.0, 0.0)
                       for i, (_, r) in enumerate(reports)])
    print("\n".join(lines))
    return 0 if ok else 1


def cmd_gen_data(args, argv) -> int:
    rc = _load_config(args)
    _prepare_run_dir(args.run_dir, rc, argv)
    world = ToyWorld(rc.world)
    stages = stage_specs(rc.world, 1, 1)
    stage = stages[0] if args.stage == 1 else stages[1]
    stream = gen_stream(world, stage, args.seed)
    rows = []
    for i in range(args.n):
        s = next(stream)
        transcript = " ".join(str(x) for x in world.reference_symbols(s.script))
        tokens = " ".join(str(t) for t in s.tokens)
        rows.append((i, len(s.profiles), len(s.script.turns), transcript, tokens))
    _write_rows(os.path.join(args.run_dir, "reports", "data.tsv"),
                "index\tspeakers\tturns\ttranscript\ttokens", rows)
    write_metrics(os.path.join(args.run_dir, "metrics.tsv"),
                  [(i, float(r[1]), float(r[2]), float(len(r[4].split())), 0.0)
                   for i, r in enumerate(rows)])
    print(f"wrote {len(rows)} samples")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowtts", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_dir_required=True):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--set", action="append", default=[],
                        help="inline override, e.g. --set 'train.seed = 3'")
        sp.add_argument("--run-dir", required=run_dir_required, default=None)

    sp = sub.add_parser("train", help="two-stage curriculum training")
    common(sp)
    sp.add_argument("--eval-prompts", type=int, default=8)
    sp.add_argument("--eval-seed", type=int, default=99)
    sp.add_argument("--log-every", type=int, default=1)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="render one dialogue from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--speakers", type=int, default=1)
    sp.add_argument("--turns", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="score transcript files or a checkpoint")
    common(sp, run_dir_required=False)
    sp.add_argument("--metric", choices=("cer", "wer", "cpwer"), default="cer")
    sp.add_argument("--ref", default=None)
    sp.add_argument("--hyp", default=None)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--eval-prompts", type=int, default=8)
    sp.add_argument("--eval-seed", type=int, default=99)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("apo-pairs", help="harvest preference pairs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--eval-prompts", type=int, default=16)
    sp.add_argument("--eval-seed", type=int, default=77)
    sp.set_defaults(fn=cmd_apo_pairs)

    sp = sub.add_parser("dpo-train", help="one preference-optimization epoch")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--eval-prompts", type=int, default=16)
    sp.add_argument("--eval-seed", type=int, default=77)
    sp.set_defaults(fn=cmd_dpo_train)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(sp, run_dir_required=False)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="emit toy dialogue samples")
    common(sp)
    sp.add_argument("--stage", type=int, choices=(1, 2), default=2)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
