"""Two-stage training: multi-task pretraining and step-level value
preference optimization.

Pretraining minimizes mean negative sequence log-probability over correct
solutions plus a small mean squared error pulling the value head toward
frozen search targets (reward at terminals, Q inside the tree).

The preference stage scores each winner/loser pair two ways: an implicit
reward difference from policy log-ratios against a frozen reference
policy, and an explicit difference of value-head outputs at the two end
states. Its loss combines a sigmoid preference term on the implicit
difference, a hinge pushing the explicit difference past a margin, a
squared coupling term tying the implicit difference to the explicit one
(the explicit side enters as a constant: the value head receives no
gradient from it), plus the reweighted pretraining terms. In the training
loop those carried terms range over the solution and value-target
datasets, advancing in lockstep with the pair batches; the per-pair loss
helpers fall back to winner-prefix forms of the same terms so a single
pair is still scoreable in isolation. All gradients are assembled
analytically from the model's prefix gradients; the optimizer is plain
mini-batch gradient descent.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Env, Question, Solution
from .model import (
    Gradients, Model, PolicyValueParams, params_from_record, params_to_record,
    spawn_generator,
)
from .pairs import PreferencePair, ValueTarget

_TRAIN_STREAM = 0x7A1

PRETRAIN = "pretrain"
SVPO = "svpo"

LOG_FIELDS = ["step", "stage", "dpo", "margin", "reg", "sft", "mse", "total",
              "grad_norm", "max_abs_dr"]


class EmptyBatch(Exception):
    pass


class MissingCheckpoint(Exception):
    pass


@dataclass
class TrainConfig:
    stage: str = SVPO
    beta: float = 0.1
    gamma: float = 0.5
    w_margin: float = 0.25
    w_mse: float = 0.25
    w_reg: float = 0.001
    w_sft: float = 5.0
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 4

    def __post_init__(self):
        if self.stage not in (PRETRAIN, SVPO):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if min(self.w_margin, self.w_mse, self.w_reg, self.w_sft) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def default_pretrain_config(**overrides) -> TrainConfig:
    """Pretraining: imitation plus a lightly weighted value MSE."""
    base = dict(stage=PRETRAIN, w_sft=1.0, w_mse=0.01, w_margin=0.0,
                w_reg=0.0, lr=0.05, batch_size=32, epochs=8)
    base.update(overrides)
    return TrainConfig(**base)


def default_svpo_config(**overrides) -> TrainConfig:
    base = dict(stage=SVPO, epochs=4)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted term values; total carries the configured weights."""

    dpo: float = 0.0
    margin: float = 0.0
    reg: float = 0.0
    sft: float = 0.0
    mse: float = 0.0
    total: float = 0.0


def combine_total(config: TrainConfig, dpo: float, margin: float, reg: float,
                  sft: float, mse: float) -> float:
    if config.stage == PRETRAIN:
        return config.w_sft * sft + config.w_mse * mse
    return (dpo + config.w_margin * margin + config.w_reg * reg
            + config.w_sft * sft + config.w_mse * mse)


@dataclass
class Checkpoint:
    params: PolicyValueParams
    ref_params: PolicyValueParams | None
    step: int
    config: dict


@dataclass
class TrainData:
    pairs: list[PreferencePair] = field(default_factory=list)
    solutions: list[Solution] = field(default_factory=list)
    value_targets: list[ValueTarget] = field(default_factory=list)


# -- pair-level quantities --------------------------------------------------

def implicit_reward_diff(model: Model, params: PolicyValueParams,
                         ref_params: PolicyValueParams, pair: PreferencePair,
                         beta: float) -> float:
    """beta-scaled difference of policy log-ratios between the winner and
    loser prefixes, measured against the frozen reference policy."""
    question = model.env.question(pair.question_id)
    w = model.seq_logprob(params, question, pair.winner) \
        - model.seq_logprob(ref_params, question, pair.winner)
    l = model.seq_logprob(params, question, pair.loser) \
        - model.seq_logprob(ref_params, question, pair.loser)
    return beta * (w - l)


def value_diff(model: Model, params: PolicyValueParams,
               pair: PreferencePair) -> float:
    """Explicit value gap between the winner and loser end states; the
    tanh head bounds it inside (-2, 2)."""
    question = model.env.question(pair.question_id)
    v_w = model.value(params, model.env.replay(question, pair.winner))
    v_l = model.value(params, model.env.replay(question, pair.loser))
    return v_w - v_l


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    # log(1 + e^x), overflow-safe
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


class _RefCache:
    """Reference log-probabilities never change during a run; cache them."""

    def __init__(self, model: Model, ref_params: PolicyValueParams):
        self.model = model
        self.ref_params = ref_params
        self._logprobs: dict[tuple[int, tuple[int, ...]], float] = {}

    def seq_logprob(self, question: Question, steps: tuple[int, ...]) -> float:
        key = (question.id, steps)
        if key not in self._logprobs:
            self._logprobs[key] = self.model.seq_logprob(
                self.ref_params, question, steps)
        return self._logprobs[key]


def svpo_pair_terms(model: Model, params: PolicyValueParams,
                    ref_params: PolicyValueParams, pair: PreferencePair,
                    config: TrainConfig, ref_cache: _RefCache | None = None,
                    eval_cache: dict | None = None):
    """Per-pair loss terms and their unweighted analytic gradients.

    Returns (LossBreakdown, {term: Gradients}). The coupling term's
    gradient flows only through the implicit difference: the explicit
    value gap is treated as a constant there, so its gradient never
    touches the value head.
    """
    question = model.env.question(pair.question_id)

    def prefix_eval(steps):
        if eval_cache is not None and (question.id, steps) in eval_cache:
            return eval_cache[(question.id, steps)]
        ev = model.grads_logprob_and_value(params, question, steps)
        if eval_cache is not None:
            eval_cache[(question.id, steps)] = ev
        return ev

    w_ev = prefix_eval(pair.winner)
    l_ev = prefix_eval(pair.loser)
    if ref_cache is not None:
        ref_w = ref_cache.seq_logprob(question, pair.winner)
        ref_l = ref_cache.seq_logprob(question, pair.loser)
    else:
        ref_w = model.seq_logprob(ref_params, question, pair.winner)
        ref_l = model.seq_logprob(ref_params, question, pair.loser)

    dr_pi = config.beta * ((w_ev.logprob - ref_w) - (l_ev.logprob - ref_l))
    dr_phi = w_ev.value - l_ev.value

    dpo = _softplus(-dr_pi)
    margin = max(0.0, config.gamma - dr_phi)
    reg = (dr_pi - dr_phi) ** 2
    sft = -w_ev.logprob
    mse = (w_ev.value - pair.q_w) ** 2
    breakdown = LossBreakdown(
        dpo=dpo, margin=margin, reg=reg, sft=sft, mse=mse,
        total=combine_total(config, dpo, margin, reg, sft, mse))

    grads: dict[str, Gradients] = {}

    def from_pi(coef: float) -> Gradients:
        g = Gradients.zeros_like(params)
        g.add_scaled(w_ev.grad_logprob, coef * config.beta)
        g.add_scaled(l_ev.grad_logprob, -coef * config.beta)
        return g

    def from_phi(coef: float) -> Gradients:
        g = Gradients.zeros_like(params)
        g.add_scaled(w_ev.grad_value, coef)
        g.add_scaled(l_ev.grad_value, -coef)
        return g

    grads["dpo"] = from_pi(_sigmoid(dr_pi) - 1.0)
    grads["margin"] = from_phi(-1.0 if dr_phi < config.gamma else 0.0)
    grads["reg"] = from_pi(2.0 * (dr_pi - dr_phi))
    g_sft = Gradients.zeros_like(params)
    g_sft.add_scaled(w_ev.grad_logprob, -1.0)
    grads["sft"] = g_sft
    g_mse = Gradients.zeros_like(params)
    g_mse.add_scaled(w_ev.grad_value, 2.0 * (w_ev.value - pair.q_w))
    grads["mse"] = g_mse
    return breakdown, grads, dr_pi


def svpo_loss(model: Model, params: PolicyValueParams,
              ref_params: PolicyValueParams, pair: PreferencePair,
              config: TrainConfig) -> LossBreakdown:
    breakdown, _, _ = svpo_pair_terms(model, params, ref_params, pair, config)
    return breakdown


def svpo_batch_grad(model: Model, params: PolicyValueParams,
                    ref_params: PolicyValueParams,
                    batch: list[PreferencePair], config: TrainConfig,
                    ref_cache: _RefCache | None = None,
                    solutions: list[Solution] | None = None,
                    targets: list[ValueTarget] | None = None):
    """Mean loss terms and mean weighted gradient for one svpo step.

    The preference terms (dpo, margin, reg) always come from the pair
    batch. The carried pretraining terms come from the solution and
    value-target batches when those are given — the production training
    mix — and fall back to the pair-derived forms (winner NLL, winner
    end-state error against its stored q) when both are omitted.

    Also reports the largest |implicit difference| seen: the probability
    ratio bound never binds while this stays inside the value range.

    The per-term weights are folded into scalar coefficients per pair
    (winner/loser x log-prob/value), which keeps the arithmetic identical
    to weighting svpo_pair_terms output but skips the per-term gradient
    objects. The coupling term's coefficient lands on the log-prob path
    only, so the value head stays structurally untouched by it."""
    if not batch:
        raise EmptyBatch("empty pair batch")
    from_datasets = solutions is not None or targets is not None
    acc = Gradients.zeros_like(params)
    sums = dict(dpo=0.0, margin=0.0, reg=0.0, sft=0.0, mse=0.0)
    eval_cache: dict = {}
    max_abs_dr = 0.0
    for pair in batch:
        question = model.env.question(pair.question_id)
        w_ev = eval_cache.get((question.id, pair.winner))
        if w_ev is None:
            w_ev = model.grads_logprob_and_value(params, question, pair.winner)
            eval_cache[(question.id, pair.winner)] = w_ev
        l_ev = eval_cache.get((question.id, pair.loser))
        if l_ev is None:
            l_ev = model.grads_logprob_and_value(params, question, pair.loser)
            eval_cache[(question.id, pair.loser)] = l_ev
        if ref_cache is not None:
            ref_w = ref_cache.seq_logprob(question, pair.winner)
            ref_l = ref_cache.seq_logprob(question, pair.loser)
        else:
            ref_w = model.seq_logprob(ref_params, question, pair.winner)
            ref_l = model.seq_logprob(ref_params, question, pair.loser)

        dr_pi = config.beta * ((w_ev.logprob - ref_w) - (l_ev.logprob - ref_l))
        dr_phi = w_ev.value - l_ev.value
        max_abs_dr = max(max_abs_dr, abs(dr_pi))

        sums["dpo"] += _softplus(-dr_pi)
        sums["margin"] += max(0.0, config.gamma - dr_phi)
        sums["reg"] += (dr_pi - dr_phi) ** 2

        pi_coef = config.beta * ((_sigmoid(dr_pi) - 1.0)
                                 + config.w_reg * 2.0 * (dr_pi - dr_phi))
        hinge = -config.w_margin if dr_phi < config.gamma else 0.0
        sft_coef = 0.0 if from_datasets else -config.w_sft
        mse_coef = 0.0
        if not from_datasets:
            sums["sft"] += -w_ev.logprob
            sums["mse"] += (w_ev.value - pair.q_w) ** 2
            mse_coef = config.w_mse * 2.0 * (w_ev.value - pair.q_w)
        acc.add_scaled(w_ev.grad_logprob, pi_coef + sft_coef)
        acc.add_scaled(l_ev.grad_logprob, -pi_coef)
        acc.add_scaled(w_ev.grad_value, hinge + mse_coef)
        acc.add_scaled(l_ev.grad_value, -hinge)
    n = len(batch)
    acc.scale(1.0 / n)
    means = {k: v / n for k, v in sums.items()}
    if from_datasets:
        means["sft"], means["mse"] = _dataset_terms(
            model, params, solutions or [], targets or [], config, acc)
    breakdown = LossBreakdown(total=combine_total(config, **means), **means)
    return breakdown, acc, max_abs_dr


def _dataset_terms(model: Model, params: PolicyValueParams,
                   solutions: list[Solution], targets: list[ValueTarget],
                   config: TrainConfig, acc: Gradients) -> tuple[float, float]:
    """Mean solution NLL and value-target error, with their weighted
    gradients added to `acc` in place. Shared by the svpo stage (carried
    pretraining terms) and kept consistent with pretrain_batch_grad."""
    sft = 0.0
    for sol in solutions:
        question = model.env.question(sol.question_id)
        logprob, grad = model.seq_logprob_grad(params, question, sol.steps)
        sft -= logprob
        acc.add_scaled(grad, -config.w_sft / len(solutions))
    sft = sft / len(solutions) if solutions else 0.0
    mse = 0.0
    x_rows: list[np.ndarray] = []
    du_rows: list[np.ndarray] = []
    for tgt in targets:
        question = model.env.question(tgt.question_id)
        state = model.env.replay(question, tgt.prefix)
        v, g, x = model.value_forward(params, state)
        mse += (v - tgt.target) ** 2
        coef = config.w_mse * 2.0 * (v - tgt.target) / len(targets)
        dpre = coef * (1.0 - v * v)
        acc.w_value += dpre * g
        x_rows.append(x)
        du_rows.append((dpre * params.w_value) * (1.0 - g * g))
    if x_rows:
        acc.w_shared += np.asarray(x_rows).T @ np.asarray(du_rows)
    mse = mse / len(targets) if targets else 0.0
    return sft, mse


# -- pretraining quantities -------------------------------------------------

def pretrain_loss(model: Model, params: PolicyValueParams,
                  solutions: list[Solution], targets: list[ValueTarget],
                  config: TrainConfig) -> LossBreakdown:
    """Mean solution NLL plus weighted mean squared value error."""
    if not solutions and not targets:
        raise EmptyBatch("nothing to pretrain on")
    sft = 0.0
    for sol in solutions:
        question = model.env.question(sol.question_id)
        sft -= model.seq_logprob(params, question, sol.steps)
    sft = sft / len(solutions) if solutions else 0.0
    mse = 0.0
    for tgt in targets:
        question = model.env.question(tgt.question_id)
        state = model.env.replay(question, tgt.prefix)
        mse += (model.value(params, state) - tgt.target) ** 2
    mse = mse / len(targets) if targets else 0.0
    return LossBreakdown(sft=sft, mse=mse,
                         total=combine_total(config, 0, 0, 0, sft, mse))


def pretrain_batch_grad(model: Model, params: PolicyValueParams,
                        solutions: list[Solution],
                        targets: list[ValueTarget], config: TrainConfig):
    if not solutions and not targets:
        raise EmptyBatch("nothing to pretrain on")
    acc = Gradients.zeros_like(params)
    sft, mse = _dataset_terms(model, params, solutions, targets, config, acc)
    breakdown = LossBreakdown(sft=sft, mse=mse,
                              total=combine_total(config, 0, 0, 0, sft, mse))
    return breakdown, acc


def max_abs_implicit_diff(model: Model, params: PolicyValueParams,
                          ref_params: PolicyValueParams,
                          pairs: list[PreferencePair], beta: float) -> float:
    return max(abs(implicit_reward_diff(model, params, ref_params, p, beta))
               for p in pairs)


# -- the loop -----------------------------------------------------------------

def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_loop(model: Model, data: TrainData, config: TrainConfig,
               rng_seed: int, init: Checkpoint | None = None,
               log: list | None = None) -> list[Checkpoint]:
    """Run one stage; returns a checkpoint per epoch (last one is final).

    The svpo stage requires an `init` checkpoint (normally the pretrain
    result); its params become both the starting point and the frozen
    reference policy. Deterministic in (data, config, rng_seed, init).
    """
    if config.stage == SVPO:
        if init is None:
            raise MissingCheckpoint("svpo stage needs a pretrain checkpoint")
        if not data.pairs:
            raise EmptyBatch("svpo stage needs preference pairs")
        params = init.params.copy()
        ref_params = init.params.copy()
        ref_cache = _RefCache(model, ref_params)
    else:
        if not data.solutions and not data.value_targets:
            raise EmptyBatch("pretrain stage needs solutions or targets")
        params = init.params.copy() if init else model.init_params(
            seed=rng_seed)
        ref_params = None
        ref_cache = None

    checkpoints: list[Checkpoint] = []
    step = init.step if init else 0
    for epoch in range(config.epochs):
        rng = spawn_generator(_TRAIN_STREAM, rng_seed, epoch)
        if config.stage == SVPO:
            # pairs set the epoch length; the carried pretraining datasets
            # cycle alongside them (permutations drawn in a fixed order)
            pair_batches = _batches(len(data.pairs), config.batch_size, rng)
            n_sol = len(data.solutions)
            n_tgt = len(data.value_targets)
            sol_order = rng.permutation(n_sol) if n_sol else np.array([], int)
            tgt_order = rng.permutation(n_tgt) if n_tgt else np.array([], int)
            for b, idx in enumerate(pair_batches):
                batch = [data.pairs[i] for i in idx]
                sols = _cycle_slice(data.solutions, sol_order, b,
                                    config.batch_size)
                tgts = _cycle_slice(data.value_targets, tgt_order, b,
                                    config.batch_size)
                breakdown, grad, max_dr = svpo_batch_grad(
                    model, params, ref_params, batch, config, ref_cache,
                    solutions=sols, targets=tgts)
                _apply(params, grad, config.lr)
                step += 1
                _log_row(log, step, config.stage, breakdown, grad, max_dr)
        else:
            n_sol = len(data.solutions)
            n_tgt = len(data.value_targets)
            sol_order = rng.permutation(n_sol) if n_sol else np.array([], int)
            tgt_order = rng.permutation(n_tgt) if n_tgt else np.array([], int)
            n_steps = max(_ceil_div(n_sol, config.batch_size),
                          _ceil_div(n_tgt, config.batch_size))
            for b in range(n_steps):
                sols = _cycle_slice(data.solutions, sol_order, b,
                                    config.batch_size)
                tgts = _cycle_slice(data.value_targets, tgt_order, b,
                                    config.batch_size)
                breakdown, grad = pretrain_batch_grad(model, params, sols,
                                                      tgts, config)
                _apply(params, grad, config.lr)
                step += 1
                _log_row(log, step, config.stage, breakdown, grad, 0.0)
        checkpoints.append(Checkpoint(
            params=params.copy(),
            ref_params=ref_params.copy() if ref_params is not None else None,
            step=step, config=dict(vars(config))))
    return checkpoints


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _cycle_slice(items: list, order: np.ndarray, batch_index: int,
                 batch_size: int) -> list:
    # Both pretrain datasets advance in lockstep; the shorter one wraps.
    if len(items) == 0:
        return []
    start = batch_index * batch_size
    return [items[order[(start + i) % len(order)]] for i in range(batch_size)]


def _apply(params: PolicyValueParams, grad: Gradients, lr: float) -> None:
    params.w_shared -= lr * grad.w_shared
    params.w_policy -= lr * grad.w_policy
    params.w_value -= lr * grad.w_value


def _log_row(log, step: int, stage: str, breakdown: LossBreakdown,
             grad: Gradients, max_abs_dr: float) -> None:
    if log is None:
        return
    log.append({"step": step, "stage": stage, "dpo": breakdown.dpo,
                "margin": breakdown.margin, "reg": breakdown.reg,
                "sft": breakdown.sft, "mse": breakdown.mse,
                "total": breakdown.total, "grad_norm": grad.norm(),
                "max_abs_dr": max_abs_dr})


# -- serialization ------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    rec = {"step": ckpt.step, "config": ckpt.config,
           "params": params_to_record(ckpt.params),
           "ref_params": (params_to_record(ckpt.ref_params)
                          if ckpt.ref_params is not None else None)}
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path) as fh:
        rec = json.load(fh)
    return Checkpoint(
        params=params_from_record(rec["params"]),
        ref_params=(params_from_record(rec["ref_params"])
                    if rec["ref_params"] is not None else None),
        step=rec["step"], config=rec["config"])


def save_log_csv(log: list[dict], path: str | Path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(log)


# -- flat key=value config files ----------------------------------------------

def parse_kv_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment. Values are coerced
    to int, float, or bool when they look like one."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _coerce(value)
    return out


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value


def format_kv_text(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def load_train_config(path: str | Path) -> TrainConfig:
    fields = parse_kv_text(Path(path).read_text())
    try:
        return TrainConfig(**fields)
    except TypeError as exc:
        raise ValueError(f"bad train config: {exc}") from exc


def save_train_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(format_kv_text(vars(config)))
