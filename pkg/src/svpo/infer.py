"""Decoding: greedy on the policy alone, and value-guided step-level
beam search.

Beam search keeps up to b1 live prefixes. Each level every live beam
samples b2 distinct next steps at the configured temperature; candidates
that answer are parked, the rest compete on the value head's score of
their new state. A parked candidate is scored with the value of the state
it answered from, since the true reward is not observable at inference
time. The final result is the parked-or-live candidate with the highest
score, so a run that never answers comes back as an unfinished, incorrect
solution rather than an error.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import Question, Solution, State, TERMINAL
from .model import Model, PolicyValueParams, spawn_generator, temper

_SBS_STREAM = 0x5B5


@dataclass
class SBSConfig:
    b1: int = 1
    b2: int = 5
    temperature: float = 0.8
    max_depth: int = 8

    def __post_init__(self):
        if self.b1 < 1 or self.b2 < 1:
            raise ValueError("b1 and b2 must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass(frozen=True)
class BeamCandidate:
    prefix: tuple[int, ...]
    logprob: float
    value_score: float
    finished: bool
    reward: int | None = None


def greedy_decode(model: Model, params: PolicyValueParams,
                  question: Question) -> Solution:
    """Follow the argmax action until an answer is given or depth runs
    out; probability ties break toward the lowest action id."""
    env = model.env
    state = env.initial_state(question)
    steps: list[int] = []
    while state.depth < env.config.max_depth:
        legal, logprobs, _, _ = model.legal_logprobs(params, state)
        pick = min(range(len(legal)),
                   key=lambda i: (-logprobs[i], legal[i].id))
        action = legal[pick]
        steps.append(action.id)
        state = env.transition(state, action)
        if action.kind == TERMINAL:
            break
    return env.build_solution(question, steps)


def _sample_distinct(logprobs: np.ndarray, temperature: float, k: int,
                     rng: np.random.Generator) -> list[int]:
    """k distinct indices drawn sequentially without replacement from the
    tempered distribution. If the remaining mass underflows to zero (very
    low temperatures), the leftovers are treated as uniform."""
    weights = temper(np.asarray(logprobs, dtype=float), temperature)
    remaining = list(range(len(weights)))
    picks: list[int] = []
    for _ in range(min(k, len(remaining))):
        w = weights[remaining]
        total = w.sum()
        p = w / total if total > 0 else np.full(len(w), 1.0 / len(w))
        picks.append(remaining.pop(int(rng.choice(len(remaining), p=p))))
    return picks


def sbs_best(model: Model, params: PolicyValueParams, question: Question,
             config: SBSConfig, rng_seed: int,
             trace: list | None = None) -> BeamCandidate:
    """Run the search and return the winning candidate (see `sbs`).

    Each (level, beam slot) draws from its own seed stream, so the top
    beam's sampling does not depend on how many sibling beams exist.
    """
    env = model.env
    root = env.initial_state(question)
    live: list[tuple[BeamCandidate, State]] = [
        (BeamCandidate((), 0.0, model.value(params, root), False), root)]
    parked: list[BeamCandidate] = []
    level = 0
    while live and level < config.max_depth:
        pool: list[tuple[BeamCandidate, State, int]] = []
        for beam_idx, (beam, state) in enumerate(live):
            legal, logprobs, _, _ = model.legal_logprobs(params, state)
            rng = spawn_generator(_SBS_STREAM, rng_seed, question.id, level,
                                  beam_idx)
            picks = _sample_distinct(logprobs, config.temperature,
                                     config.b2, rng)
            if trace is not None:
                trace.append(("expand", level, beam_idx, beam.prefix,
                              tuple(legal[i].id for i in picks)))
            for i in picks:
                action = legal[i]
                prefix = beam.prefix + (action.id,)
                logprob = beam.logprob + float(logprobs[i])
                if action.kind == TERMINAL:
                    # scored by the value of the state answered from
                    parked.append(BeamCandidate(
                        prefix, logprob, beam.value_score, True,
                        env.terminal_reward(state, action)))
                    continue
                child = env.transition(state, action)
                cand = BeamCandidate(prefix, logprob,
                                     model.value(params, child), False)
                pool.append((cand, child, beam_idx))
        pool.sort(key=lambda t: (-t[0].value_score, -t[0].logprob, t[2]))
        live = [(cand, state) for cand, state, _ in pool[:config.b1]]
        if trace is not None:
            trace.append(("retain", level,
                          tuple(cand.prefix for cand, _ in live)))
        level += 1
    candidates = parked + [cand for cand, _ in live]
    return max(candidates, key=lambda c: (c.value_score, c.logprob))


def sbs(model: Model, params: PolicyValueParams, question: Question,
        config: SBSConfig, rng_seed: int,
        trace: list | None = None) -> Solution:
    """Value-guided step-level beam search; deterministic given the seed."""
    best = sbs_best(model, params, question, config, rng_seed, trace)
    return model.env.build_solution(question, best.prefix)


# -- result records -----------------------------------------------------------

def inference_record(model: Model, params: PolicyValueParams,
                     question: Question, mode: str,
                     sbs_config: SBSConfig | None = None,
                     rng_seed: int = 0) -> dict:
    if mode == "greedy":
        solution = greedy_decode(model, params, question)
        b1 = b2 = score = None
    elif mode == "sbs":
        config = sbs_config or SBSConfig()
        best = sbs_best(model, params, question, config, rng_seed)
        solution = model.env.build_solution(question, best.prefix)
        b1, b2, score = config.b1, config.b2, best.value_score
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    return {"question_id": question.id, "mode": mode, "b1": b1, "b2": b2,
            "steps": list(solution.steps), "predicted": solution.predicted,
            "truth": question.truth, "correct": solution.correct,
            "score": score}


def save_inference_records(records: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def load_inference_records(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
