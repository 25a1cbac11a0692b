"""Evaluation harness: accuracy, preference win-rates, ablation arms,
gamma sweeps, and the end-to-end pipeline.

The pipeline runs one seed end to end: generate questions, annotate the
training split with search trees under the initial policy, extract the
preference corpus, pretrain, run the preference stage, then score both
checkpoints with greedy decoding and beam search and with implicit and
explicit win-rates on training and held-out pairs. Held-out pairs are
built once from the post-pretraining policy and reused for every arm, so
ablations stay comparable.
"""
from __future__ import annotations

import dataclasses
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from .env import Env, EnvConfig, Question, TERMINAL, gen_dataset
from .infer import SBSConfig, greedy_decode, sbs
from .mcts import Forest, SearchConfig, build_forest
from .model import Model, PolicyValueParams
from .pairs import (
    PairCounts, PreferencePair, ValueTarget, extract_pairs,
    extract_sft_solutions, extract_value_targets, label_correct,
    positive_negative_ratio,
)
from .train import (
    Checkpoint, TrainConfig, TrainData, default_pretrain_config,
    default_svpo_config, implicit_reward_diff, train_loop, value_diff,
)

SUMMARY_SCHEMA_VERSION = 1


class EmptyDataset(Exception):
    pass


class StageFailure(Exception):
    """Wraps any error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc


# -- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class WinRateReport:
    implicit_acc: float
    explicit_acc: float
    n_pairs: int
    split: str


def accuracy(model: Model, params: PolicyValueParams,
             questions: list[Question], mode: str,
             sbs_config: SBSConfig | None = None,
             rng_seed: int = 0) -> float:
    """Fraction of questions whose decoded answer equals the truth."""
    if not questions:
        raise EmptyDataset("no questions to evaluate")
    correct = 0
    for question in questions:
        if mode == "greedy":
            solution = greedy_decode(model, params, question)
        elif mode == "sbs":
            solution = sbs(model, params, question, sbs_config or SBSConfig(),
                           rng_seed)
        else:
            raise ValueError(f"unknown inference mode {mode!r}")
        correct += int(solution.correct)
    return correct / len(questions)


def win_rate(model: Model, params: PolicyValueParams,
             ref_params: PolicyValueParams, pairs: list[PreferencePair],
             beta: float, split: str = "train") -> WinRateReport:
    """Fraction of pairs each scorer ranks the winner strictly above the
    loser; exact ties earn half credit."""
    if not pairs:
        raise EmptyDataset("no pairs to evaluate")
    implicit = explicit = 0.0
    for pair in pairs:
        dr_pi = implicit_reward_diff(model, params, ref_params, pair, beta)
        dr_phi = value_diff(model, params, pair)
        implicit += 1.0 if dr_pi > 0 else (0.5 if dr_pi == 0 else 0.0)
        explicit += 1.0 if dr_phi > 0 else (0.5 if dr_phi == 0 else 0.0)
    n = len(pairs)
    return WinRateReport(implicit / n, explicit / n, n, split)


# -- experiment configuration -------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 500
    n_test: int = 200
    difficulty: str = "medium"
    sft_k: int = 4
    max_value_targets: int = 20000
    search: SearchConfig = field(default_factory=SearchConfig)
    counts: PairCounts = field(default_factory=PairCounts)
    pretrain: TrainConfig = field(default_factory=default_pretrain_config)
    svpo: TrainConfig = field(default_factory=default_svpo_config)
    sbs: SBSConfig = field(default_factory=SBSConfig)
    no_margin: bool = False
    no_mse: bool = False
    no_reg: bool = False
    solution_level_only: bool = False

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if self.sft_k < 1:
            raise ValueError("sft_k must be >= 1")
        if self.max_value_targets < 0:
            raise ValueError("max_value_targets must be >= 0")
        if self.pretrain.stage != "pretrain" or self.svpo.stage != "svpo":
            raise ValueError("stage fields do not match their slots")


_SUBCONFIGS = {"search": SearchConfig, "counts": PairCounts,
               "pretrain": TrainConfig, "svpo": TrainConfig,
               "sbs": SBSConfig}


def experiment_config_to_dict(config: ExperimentConfig) -> dict:
    """Flatten to primitive key=value entries (sub-configs get prefixed
    keys, e.g. search_c_puct); stage markers are implied and omitted."""
    out: dict = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name in _SUBCONFIGS:
            for sub in dataclasses.fields(value):
                if sub.name == "stage":
                    continue
                out[f"{f.name}_{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def experiment_config_from_dict(items: dict) -> ExperimentConfig:
    top: dict = {}
    nested: dict[str, dict] = {name: {} for name in _SUBCONFIGS}
    plain = {f.name for f in dataclasses.fields(ExperimentConfig)
             if f.name not in _SUBCONFIGS}
    for key, value in items.items():
        prefix = key.split("_", 1)[0]
        if key in plain:
            top[key] = value
        elif prefix in _SUBCONFIGS and "_" in key:
            sub_key = key.split("_", 1)[1]
            names = {f.name for f in dataclasses.fields(_SUBCONFIGS[prefix])}
            if sub_key not in names or sub_key == "stage":
                raise ValueError(f"unknown config key {key!r}")
            nested[prefix][sub_key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    kwargs: dict = dict(top)
    kwargs["search"] = SearchConfig(**nested["search"])
    kwargs["counts"] = PairCounts(**nested["counts"])
    kwargs["pretrain"] = default_pretrain_config(**nested["pretrain"])
    kwargs["svpo"] = default_svpo_config(**nested["svpo"])
    kwargs["sbs"] = SBSConfig(**nested["sbs"])
    return ExperimentConfig(**kwargs)


ABLATION_FLAGS = ("no_margin", "no_mse", "no_reg", "solution_level_only")


def apply_ablation(config: ExperimentConfig) -> TrainConfig:
    """Preference-stage train config with the flagged loss weights zeroed."""
    svpo = config.svpo
    if config.no_margin:
        svpo = dataclasses.replace(svpo, w_margin=0.0)
    if config.no_mse:
        svpo = dataclasses.replace(svpo, w_mse=0.0)
    if config.no_reg:
        svpo = dataclasses.replace(svpo, w_reg=0.0)
    return svpo


def solution_level_pairs(env: Env,
                         pairs: list[PreferencePair]) -> list[PreferencePair]:
    """Pairs whose two sides are both complete solutions: terminal kind
    with the winner itself ending in an answer."""
    return [p for p in pairs
            if p.kind == "terminal" and p.winner
            and env.vocab[p.winner[-1]].kind == TERMINAL]


# -- pipeline stages ----------------------------------------------------------

@dataclass
class Corpus:
    env: Env
    model: Model
    train_questions: list[Question]
    test_questions: list[Question]
    forests: list[Forest]
    pairs: list[PreferencePair]
    solutions: list
    value_targets: list[ValueTarget]
    pos_neg_ratio: float
    init_params: PolicyValueParams


def _dataset_seeds(config: ExperimentConfig) -> tuple[int, int]:
    # even/odd split keeps question ids disjoint across splits and seeds
    return config.seed * 2, config.seed * 2 + 1


def build_corpus(config: ExperimentConfig) -> Corpus:
    """Generate both splits and annotate the training split with search
    under the initial (untrained) policy."""
    train_seed, test_seed = _dataset_seeds(config)
    env = Env(EnvConfig())
    with _stage("gen"):
        train_questions = gen_dataset(train_seed, config.n_train,
                                      config.difficulty)
        test_questions = gen_dataset(test_seed, config.n_test,
                                     config.difficulty)
        env.register(train_questions)
        env.register(test_questions)
    model = Model(env)
    init_params = model.init_params(seed=config.seed)
    forests, pairs, solutions, targets = [], [], [], []
    with _stage("annotate"):
        for question in train_questions:
            # mixing the id keeps per-question search entropy independent
            forest = build_forest(model, question, init_params, config.search,
                                  rng_seed=config.seed + question.id)
            label_correct(forest)
            forests.append(forest)
    with _stage("pairs"):
        for forest in forests:
            pairs.extend(extract_pairs(forest, config.counts,
                                       rng_seed=config.seed))
            targets.extend(extract_value_targets(forest))
            solutions.extend(extract_sft_solutions(env, forest, config.sft_k))
        ratio = positive_negative_ratio(pairs) if pairs else 0.0
        if config.max_value_targets and len(targets) > config.max_value_targets:
            # deterministic thinning keeps the pretrain stage bounded
            stride = len(targets) / config.max_value_targets
            targets = [targets[int(i * stride)]
                       for i in range(config.max_value_targets)]
    return Corpus(env, model, train_questions, test_questions, forests,
                  pairs, solutions, targets, ratio, init_params)


def pretrain_stage(corpus: Corpus, config: ExperimentConfig) -> Checkpoint:
    with _stage("pretrain"):
        data = TrainData(solutions=corpus.solutions,
                         value_targets=corpus.value_targets)
        init = Checkpoint(params=corpus.init_params, ref_params=None, step=0,
                          config=dict(vars(config.pretrain)))
        return train_loop(corpus.model, data, config.pretrain,
                          rng_seed=config.seed, init=init)[-1]


def svpo_stage(corpus: Corpus, sft_ckpt: Checkpoint,
               config: ExperimentConfig,
               log: list | None = None) -> Checkpoint:
    with _stage("svpo"):
        train_config = apply_ablation(config)
        pairs = corpus.pairs
        if config.solution_level_only:
            pairs = solution_level_pairs(corpus.env, pairs)
        data = TrainData(pairs=pairs)
        return train_loop(corpus.model, data, train_config,
                          rng_seed=config.seed, init=sft_ckpt, log=log)[-1]


def build_heldout_pairs(model: Model, params: PolicyValueParams,
                        test_questions: list[Question],
                        search: SearchConfig, counts: PairCounts,
                        rng_seed: int,
                        train_ids: set[int]) -> list[PreferencePair]:
    """Search the held-out questions with the given policy and extract
    pairs; refuses question sets that overlap the training ids."""
    overlap = train_ids & {q.id for q in test_questions}
    if overlap:
        raise ValueError(f"held-out questions overlap training ids: "
                         f"{sorted(overlap)[:3]}")
    pairs: list[PreferencePair] = []
    for question in test_questions:
        forest = build_forest(model, question, params, search,
                              rng_seed + question.id)
        label_correct(forest)
        pairs.extend(extract_pairs(forest, counts, rng_seed))
    return pairs


def heldout_stage(corpus: Corpus, sft_ckpt: Checkpoint,
                  config: ExperimentConfig) -> list[PreferencePair]:
    with _stage("heldout"):
        train_ids = {q.id for q in corpus.train_questions}
        return build_heldout_pairs(corpus.model, sft_ckpt.params,
                                   corpus.test_questions, config.search,
                                   config.counts, config.seed, train_ids)


def eval_accuracy_suite(corpus: Corpus, params: PolicyValueParams,
                        config: ExperimentConfig) -> dict:
    model, questions = corpus.model, corpus.test_questions
    out = {"greedy": accuracy(model, params, questions, "greedy")}
    for b1 in (1, 3):
        sbs_config = dataclasses.replace(config.sbs, b1=b1)
        out[f"sbs_b{b1}"] = accuracy(model, params, questions, "sbs",
                                     sbs_config, rng_seed=config.seed)
    return out


def eval_win_rates(corpus: Corpus, params: PolicyValueParams,
                   ref_params: PolicyValueParams,
                   heldout: list[PreferencePair], beta: float) -> dict:
    train = win_rate(corpus.model, params, ref_params, corpus.pairs, beta,
                     split="train")
    held = win_rate(corpus.model, params, ref_params, heldout, beta,
                    split="heldout")
    return {"train": train, "heldout": held,
            "gap": {"implicit": train.implicit_acc - held.implicit_acc,
                    "explicit": train.explicit_acc - held.explicit_acc}}


# -- the pipeline -------------------------------------------------------------

@dataclass
class ReportBundle:
    config: ExperimentConfig
    summary: dict
    out_dir: Path | None
    corpus: Corpus
    sft_ckpt: Checkpoint
    svpo_ckpt: Checkpoint
    heldout: list[PreferencePair]


def _round(value, places=4):
    if isinstance(value, float):
        return round(value, places)
    if isinstance(value, dict):
        return {k: _round(v, places) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round(v, places) for v in value]
    return value


def summary_text(summary: dict) -> str:
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"


def run_pipeline(config: ExperimentConfig,
                 out_dir: str | Path | None = None) -> ReportBundle:
    corpus = build_corpus(config)
    sft_ckpt = pretrain_stage(corpus, config)
    log: list = []
    svpo_ckpt = svpo_stage(corpus, sft_ckpt, config, log=log)
    heldout = heldout_stage(corpus, sft_ckpt, config)
    with _stage("eval"):
        beta = config.svpo.beta
        metrics = {
            "accuracy": {
                "sft": eval_accuracy_suite(corpus, sft_ckpt.params, config),
                "svpo": eval_accuracy_suite(corpus, svpo_ckpt.params, config),
            },
            "win_rate": _win_rates_dict(eval_win_rates(
                corpus, svpo_ckpt.params, svpo_ckpt.ref_params, heldout,
                beta)),
            "max_abs_dr": max((row["max_abs_dr"] for row in log),
                              default=0.0),
        }
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "config": experiment_config_to_dict(config),
        "data": {
            "n_train": len(corpus.train_questions),
            "n_test": len(corpus.test_questions),
            "n_pairs": len(corpus.pairs),
            "n_heldout_pairs": len(heldout),
            "n_solutions": len(corpus.solutions),
            "n_value_targets": len(corpus.value_targets),
            "pos_neg_ratio": corpus.pos_neg_ratio,
        },
        "metrics": metrics,
    }
    summary = _round(summary)
    bundle = ReportBundle(config, summary, None, corpus, sft_ckpt, svpo_ckpt,
                          heldout)
    if out_dir is not None:
        bundle.out_dir = Path(out_dir)
        _write_artifacts(bundle, log)
    return bundle


def _win_rates_dict(rates: dict) -> dict:
    out = {}
    for split in ("train", "heldout"):
        report = rates[split]
        out[split] = {"implicit": report.implicit_acc,
                      "explicit": report.explicit_acc,
                      "n_pairs": report.n_pairs}
    out["gap"] = dict(rates["gap"])
    return out


def _write_artifacts(bundle: ReportBundle, log: list) -> None:
    from .env import save_dataset
    from .mcts import save_forests
    from .pairs import save_pairs, save_solutions, save_value_targets
    from .train import save_checkpoint, save_log_csv

    out = bundle.out_dir
    out.mkdir(parents=True, exist_ok=True)
    corpus = bundle.corpus
    save_dataset(corpus.train_questions, out / "questions_train.jsonl")
    save_dataset(corpus.test_questions, out / "questions_test.jsonl")
    save_forests(corpus.forests, out / "forests.jsonl")
    save_pairs(corpus.pairs, out / "pairs.jsonl")
    save_pairs(bundle.heldout, out / "pairs_heldout.jsonl")
    save_value_targets(corpus.value_targets, out / "value_targets.jsonl")
    save_solutions(corpus.solutions, out / "solutions.jsonl")
    save_checkpoint(bundle.sft_ckpt, out / "ckpt_pretrain.json")
    save_checkpoint(bundle.svpo_ckpt, out / "ckpt_svpo.json")
    save_log_csv(log, out / "svpo_log.csv")
    (out / "summary.json").write_text(summary_text(bundle.summary))


# -- seed-averaged experiment matrices ---------------------------------------

ARMS = {
    "full": {},
    "no_margin": {"no_margin": True},
    "no_mse": {"no_mse": True},
    "no_reg": {"no_reg": True},
    "solution_dpo": {"no_margin": True, "no_mse": True, "no_reg": True,
                     "solution_level_only": True},
}


def run_arm(corpus: Corpus, sft_ckpt: Checkpoint, config: ExperimentConfig,
            arm: str, heldout: list[PreferencePair]) -> dict:
    """Train one ablation arm from a shared pretrain checkpoint and score
    it; the arm named `sft` scores the pretrain checkpoint itself."""
    if arm == "sft":
        params = sft_ckpt.params
        ref = sft_ckpt.params
    else:
        arm_config = dataclasses.replace(config, **ARMS[arm])
        ckpt = svpo_stage(corpus, sft_ckpt, arm_config)
        params, ref = ckpt.params, ckpt.ref_params
    out = {"accuracy": eval_accuracy_suite(corpus, params, config)}
    if heldout:
        out["win_rate"] = _win_rates_dict(eval_win_rates(
            corpus, params, ref, heldout, config.svpo.beta))
    return out


def seed_config(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(config, seed=seed)


def run_matrix(config: ExperimentConfig, seeds: list[int], arms: list[str],
               with_win_rates: bool = False) -> dict:
    """arm -> seed -> metrics, sharing corpus, pretrain checkpoint, and
    held-out pairs across arms within each seed."""
    results: dict = {arm: {} for arm in arms}
    for seed in seeds:
        cfg = seed_config(config, seed)
        corpus = build_corpus(cfg)
        sft_ckpt = pretrain_stage(corpus, cfg)
        heldout = heldout_stage(corpus, sft_ckpt, cfg) if with_win_rates \
            else []
        for arm in arms:
            results[arm][seed] = run_arm(corpus, sft_ckpt, cfg, arm, heldout)
    return results


def run_gamma_sweep(config: ExperimentConfig, gammas: list[float],
                    seeds: list[int]) -> dict:
    """gamma -> seed -> accuracy metrics, sharing the corpus and pretrain
    checkpoint across gammas within each seed."""
    results: dict = {gamma: {} for gamma in gammas}
    for seed in seeds:
        cfg = seed_config(config, seed)
        corpus = build_corpus(cfg)
        sft_ckpt = pretrain_stage(corpus, cfg)
        for gamma in gammas:
            sweep_cfg = dataclasses.replace(
                cfg, svpo=dataclasses.replace(cfg.svpo, gamma=gamma))
            ckpt = svpo_stage(corpus, sft_ckpt, sweep_cfg)
            results[gamma][seed] = {
                "accuracy": eval_accuracy_suite(corpus, ckpt.params, cfg)}
    return results


def mean_over_seeds(per_seed: dict, *path: str) -> float:
    values = []
    for metrics in per_seed.values():
        node = metrics
        for key in path:
            node = node[key]
        values.append(node)
    return sum(values) / len(values)
