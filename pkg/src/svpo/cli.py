"""Command-line front end.

Staged subcommands (gen, annotate, pairs, pretrain, svpo, infer, eval)
read and write documented filenames under --out, so a run can be driven
piecewise or resumed. ablate, sweep, and pipeline are self-contained
drivers. Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .env import Env, EnvConfig, gen_dataset, load_dataset, save_dataset
from .evaluate import (
    ARMS, ExperimentConfig, StageFailure, _stage, build_corpus,
    build_heldout_pairs, eval_accuracy_suite, eval_win_rates,
    experiment_config_from_dict, experiment_config_to_dict, run_gamma_sweep,
    run_matrix, run_pipeline, summary_text,
)
from .infer import SBSConfig, inference_record, save_inference_records
from .mcts import build_forest, load_forests, save_forests
from .model import Model
from .pairs import (
    extract_pairs, extract_sft_solutions, extract_value_targets,
    label_correct, load_pairs, load_solutions, load_value_targets,
    positive_negative_ratio, save_pairs, save_solutions, save_value_targets,
)
from .train import (
    Checkpoint, TrainData, load_checkpoint, parse_kv_text, save_checkpoint,
    save_log_csv, train_loop,
)

DEFAULT_SEEDS = "0,1,2,3,4"
DEFAULT_GAMMAS = "0,0.25,0.5,0.75,1.0"


def load_experiment_config(args) -> ExperimentConfig:
    items: dict = {}
    if args.config:
        items = parse_kv_text(Path(args.config).read_text())
    config = experiment_config_from_dict(items)
    if args.seed is not None:
        import dataclasses
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _env_and_model(out: Path, splits=("train",)):
    env = Env(EnvConfig())
    questions = {}
    for split in splits:
        qs = load_dataset(out / f"questions_{split}.jsonl")
        env.register(qs)
        questions[split] = qs
    return env, Model(env), questions


def cmd_gen(args, config: ExperimentConfig, out: Path) -> int:
    from .evaluate import _dataset_seeds
    train_seed, test_seed = _dataset_seeds(config)
    with _stage("gen"):
        save_dataset(gen_dataset(train_seed, config.n_train,
                                 config.difficulty),
                     out / "questions_train.jsonl")
        save_dataset(gen_dataset(test_seed, config.n_test,
                                 config.difficulty),
                     out / "questions_test.jsonl")
    print(f"wrote questions_train.jsonl and questions_test.jsonl to {out}")
    return 0


def cmd_annotate(args, config: ExperimentConfig, out: Path) -> int:
    env, model, questions = _env_and_model(out)
    with _stage("annotate"):
        params = model.init_params(seed=config.seed)
        forests = []
        for question in questions["train"]:
            forest = build_forest(model, question, params, config.search,
                                  rng_seed=config.seed + question.id)
            forests.append(label_correct(forest))
        save_forests(forests, out / "forests.jsonl")
    print(f"annotated {len(forests)} questions -> forests.jsonl")
    return 0


def cmd_pairs(args, config: ExperimentConfig, out: Path) -> int:
    env, _, _ = _env_and_model(out)
    with _stage("pairs"):
        forests = load_forests(env, out / "forests.jsonl")
        pairs, targets, solutions = [], [], []
        for forest in forests:
            pairs.extend(extract_pairs(forest, config.counts,
                                       rng_seed=config.seed))
            targets.extend(extract_value_targets(forest))
            solutions.extend(extract_sft_solutions(env, forest,
                                                   config.sft_k))
        save_pairs(pairs, out / "pairs.jsonl")
        save_value_targets(targets, out / "value_targets.jsonl")
        save_solutions(solutions, out / "solutions.jsonl")
        stats = {"n_pairs": len(pairs), "n_value_targets": len(targets),
                 "n_solutions": len(solutions),
                 "pos_neg_ratio": round(positive_negative_ratio(pairs), 4)
                 if pairs else 0.0}
        (out / "pair_stats.json").write_text(
            json.dumps(stats, sort_keys=True, indent=2) + "\n")
    print(f"extracted {len(pairs)} pairs "
          f"(1:{stats['pos_neg_ratio']}) -> pairs.jsonl")
    return 0


def cmd_pretrain(args, config: ExperimentConfig, out: Path) -> int:
    env, model, _ = _env_and_model(out)
    with _stage("pretrain"):
        data = TrainData(
            solutions=load_solutions(out / "solutions.jsonl"),
            value_targets=load_value_targets(out / "value_targets.jsonl"))
        init = Checkpoint(params=model.init_params(seed=config.seed),
                          ref_params=None, step=0,
                          config=dict(vars(config.pretrain)))
        log: list = []
        ckpt = train_loop(model, data, config.pretrain, rng_seed=config.seed,
                          init=init, log=log)[-1]
        save_checkpoint(ckpt, out / "ckpt_pretrain.json")
        save_log_csv(log, out / "pretrain_log.csv")
    print(f"pretrained for {ckpt.step} steps -> ckpt_pretrain.json")
    return 0


def cmd_svpo(args, config: ExperimentConfig, out: Path) -> int:
    from .evaluate import apply_ablation, solution_level_pairs
    env, model, _ = _env_and_model(out)
    with _stage("svpo"):
        pairs = load_pairs(out / "pairs.jsonl")
        if config.solution_level_only:
            pairs = solution_level_pairs(env, pairs)
        init = load_checkpoint(out / "ckpt_pretrain.json")
        log: list = []
        ckpt = train_loop(model, TrainData(pairs=pairs),
                          apply_ablation(config), rng_seed=config.seed,
                          init=init, log=log)[-1]
        save_checkpoint(ckpt, out / "ckpt_svpo.json")
        save_log_csv(log, out / "svpo_log.csv")
    print(f"preference-trained to step {ckpt.step} -> ckpt_svpo.json")
    return 0


def cmd_infer(args, config: ExperimentConfig, out: Path) -> int:
    env, model, questions = _env_and_model(out, splits=("test",))
    with _stage("infer"):
        ckpt = load_checkpoint(out / args.ckpt)
        sbs_config = None
        name = f"inference_{args.mode}.jsonl"
        if args.mode == "sbs":
            import dataclasses
            sbs_config = dataclasses.replace(config.sbs, b1=args.b1)
            name = f"inference_sbs_b{args.b1}.jsonl"
        records = [inference_record(model, ckpt.params, q, args.mode,
                                    sbs_config, rng_seed=config.seed)
                   for q in questions["test"]]
        save_inference_records(records, out / name)
        acc = sum(r["correct"] for r in records) / len(records)
    print(f"{args.mode} accuracy {acc:.4f} over {len(records)} questions "
          f"-> {name}")
    return 0


def cmd_eval(args, config: ExperimentConfig, out: Path) -> int:
    env, model, questions = _env_and_model(out, splits=("train", "test"))
    with _stage("eval"):
        sft_ckpt = load_checkpoint(out / "ckpt_pretrain.json")
        svpo_ckpt = load_checkpoint(out / "ckpt_svpo.json")
        pairs = load_pairs(out / "pairs.jsonl")
        train_ids = {q.id for q in questions["train"]}
        heldout = build_heldout_pairs(model, sft_ckpt.params,
                                      questions["test"], config.search,
                                      config.counts, config.seed, train_ids)
        save_pairs(heldout, out / "pairs_heldout.jsonl")

        from .evaluate import Corpus
        corpus = Corpus(env, model, questions["train"], questions["test"],
                        [], pairs, [], [], 0.0, sft_ckpt.params)
        report = {
            "accuracy": {
                "sft": eval_accuracy_suite(corpus, sft_ckpt.params, config),
                "svpo": eval_accuracy_suite(corpus, svpo_ckpt.params, config),
            },
            "win_rate": _rates(eval_win_rates(
                corpus, svpo_ckpt.params, svpo_ckpt.ref_params, heldout,
                config.svpo.beta)),
        }
        (out / "eval.json").write_text(
            json.dumps(_round4(report), sort_keys=True, indent=2) + "\n")
    print(json.dumps(_round4(report["accuracy"]), sort_keys=True))
    return 0


def _rates(rates: dict) -> dict:
    from .evaluate import _win_rates_dict
    return _win_rates_dict(rates)


def _round4(value):
    from .evaluate import _round
    return _round(value)


def _seed_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _gamma_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def cmd_ablate(args, config: ExperimentConfig, out: Path) -> int:
    arms = [arm.strip() for arm in args.arms.split(",") if arm.strip()]
    for arm in arms:
        if arm != "sft" and arm not in ARMS:
            raise StageFailure("ablate", ValueError(f"unknown arm {arm!r}"))
    seeds = _seed_list(args.seeds)
    results = run_matrix(config, seeds, arms, with_win_rates=True)
    rows = []
    for arm in arms:
        for seed in seeds:
            metrics = results[arm][seed]
            row = {"arm": arm, "seed": seed, **metrics["accuracy"]}
            rates = metrics.get("win_rate")
            if rates:
                row.update({
                    "wr_train_implicit": rates["train"]["implicit"],
                    "wr_train_explicit": rates["train"]["explicit"],
                    "wr_heldout_implicit": rates["heldout"]["implicit"],
                    "wr_heldout_explicit": rates["heldout"]["explicit"],
                })
            rows.append(row)
    _write_csv(out / "ablation.csv", rows)
    (out / "ablation.json").write_text(
        json.dumps(_round4(_stringify_keys(results)), sort_keys=True,
                   indent=2) + "\n")
    print(f"ablation over arms {arms} and seeds {seeds} -> ablation.csv")
    return 0


def cmd_sweep(args, config: ExperimentConfig, out: Path) -> int:
    gammas = _gamma_list(args.gammas)
    seeds = _seed_list(args.seeds)
    results = run_gamma_sweep(config, gammas, seeds)
    rows = [{"gamma": gamma, "seed": seed,
             **results[gamma][seed]["accuracy"]}
            for gamma in gammas for seed in seeds]
    _write_csv(out / "sweep.csv", rows)
    (out / "sweep.json").write_text(
        json.dumps(_round4(_stringify_keys(results)), sort_keys=True,
                   indent=2) + "\n")
    print(f"gamma sweep over {gammas} -> sweep.csv")
    return 0


def cmd_pipeline(args, config: ExperimentConfig, out: Path) -> int:
    bundle = run_pipeline(config, out_dir=out)
    print(summary_text(bundle.summary), end="")
    return 0


def _stringify_keys(value):
    if isinstance(value, dict):
        return {str(k): _stringify_keys(v) for k, v in value.items()}
    return value


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svpo",
        description="Step-level value preference optimization on a "
                    "synthetic arithmetic-chain environment.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--config", default=None,
                       help="flat key=value config file")
        p.add_argument("--out", default="out",
                       help="artifact directory (default: ./out)")
        p.set_defaults(func=func)
        return p

    add("gen", cmd_gen, "generate train/test question sets")
    add("annotate", cmd_annotate, "build search forests for the train set")
    add("pairs", cmd_pairs, "extract preference pairs, targets, solutions")
    add("pretrain", cmd_pretrain, "multi-task pretraining stage")
    add("svpo", cmd_svpo, "preference optimization stage")
    p = add("infer", cmd_infer, "decode the test set with a checkpoint")
    p.add_argument("--mode", choices=("greedy", "sbs"), default="greedy")
    p.add_argument("--b1", type=int, default=1, help="beams kept (sbs mode)")
    p.add_argument("--ckpt", default="ckpt_svpo.json",
                   help="checkpoint filename under --out")
    add("eval", cmd_eval, "accuracy and win-rate report for both stages")
    p = add("ablate", cmd_ablate, "train and score ablation arms")
    p.add_argument("--arms", default="full,no_margin,no_mse,sft")
    p.add_argument("--seeds", default=DEFAULT_SEEDS)
    p = add("sweep", cmd_sweep, "margin-width sensitivity sweep")
    p.add_argument("--gammas", default=DEFAULT_GAMMAS)
    p.add_argument("--seeds", default=DEFAULT_SEEDS)
    add("pipeline", cmd_pipeline, "run every stage end to end")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_experiment_config(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, config, out)
    except StageFailure as exc:
        print(f"error in stage {exc.stage!r}: {exc.cause}", file=sys.stderr)
        return 3
    except Exception as exc:
        print(f"error in stage {args.command!r}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
