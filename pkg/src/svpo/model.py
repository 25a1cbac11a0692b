"""Policy-value model over hand-built state features.

One shared hidden layer (d -> h, tanh) feeds two heads: a softmax policy
over the action vocabulary, masked to the legal subset per state, and a
scalar value head with a tanh activation, so values live in (-1, 1) and
pairwise value differences in (-2, 2). All gradients are derived by hand
and exposed analytically; nothing here depends on an autodiff framework.
Log-probabilities are computed in log space with the usual max-shift.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import INTERMEDIATE, TERMINAL, Env, EnvConfig, Question, State
from .env import DepthExceeded, IllegalAction  # re-raised with context

DEFAULT_HIDDEN = 32


class IllegalPrefix(Exception):
    """A step sequence leaves the legal action set at some step."""


@dataclass
class PolicyValueParams:
    """Trainable tensors: shared trunk, policy head, value head."""

    w_shared: np.ndarray  # (d, h)
    w_policy: np.ndarray  # (h, vocab)
    w_value: np.ndarray   # (h,)

    @property
    def d(self) -> int:
        return self.w_shared.shape[0]

    @property
    def h(self) -> int:
        return self.w_shared.shape[1]

    @property
    def vocab(self) -> int:
        return self.w_policy.shape[1]

    def copy(self) -> "PolicyValueParams":
        return PolicyValueParams(self.w_shared.copy(), self.w_policy.copy(),
                                 self.w_value.copy())


@dataclass
class Gradients:
    """Mirrors PolicyValueParams; supports in-place accumulation."""

    w_shared: np.ndarray
    w_policy: np.ndarray
    w_value: np.ndarray

    @staticmethod
    def zeros_like(params: PolicyValueParams) -> "Gradients":
        return Gradients(np.zeros_like(params.w_shared),
                         np.zeros_like(params.w_policy),
                         np.zeros_like(params.w_value))

    def add_scaled(self, other: "Gradients", scale: float = 1.0) -> None:
        self.w_shared += scale * other.w_shared
        self.w_policy += scale * other.w_policy
        self.w_value += scale * other.w_value

    def scale(self, factor: float) -> None:
        self.w_shared *= factor
        self.w_policy *= factor
        self.w_value *= factor

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.w_shared ** 2)
                             + np.sum(self.w_policy ** 2)
                             + np.sum(self.w_value ** 2)))


@dataclass(frozen=True)
class PrefixEval:
    """seq_logprob and end-state value of one prefix, with both gradients."""

    logprob: float
    value: float
    grad_logprob: Gradients
    grad_value: Gradients


def init_params(d: int, h: int, vocab: int, seed: int,
                scale: float = 0.05) -> PolicyValueParams:
    """Small Gaussian init. Exact zeros are a training fixed point (the
    tanh trunk kills every gradient), so training always starts here."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return PolicyValueParams(
        w_shared=scale * rng.standard_normal((d, h)),
        w_policy=scale * rng.standard_normal((h, vocab)),
        w_value=scale * rng.standard_normal(h))


def zeros_params(d: int, h: int, vocab: int) -> PolicyValueParams:
    return PolicyValueParams(np.zeros((d, h)), np.zeros((h, vocab)),
                             np.zeros(h))


class Featurizer:
    """Deterministic feature map for (question, state) pairs.

    Blocks: bias, depth one-hot, last-action one-hot, start one-hot,
    canonical chain length one-hot, op histogram of the chain (order
    deliberately dropped: recovering a workable step order from the
    unordered spec is the learning problem), scratch bucket one-hot with
    out-of-range flags, scaled scratch, and parity.
    """

    def __init__(self, config: EnvConfig, scratch_lo: int = -8,
                 scratch_hi: int = 30):
        self.config = config
        from .env import vocabulary
        self.vocab = vocabulary(config)
        self.n_ops = sum(1 for a in self.vocab if a.kind == INTERMEDIATE)
        self.scratch_lo = scratch_lo
        self.scratch_hi = scratch_hi
        self.n_start = config.start_hi - config.start_lo + 1
        self.n_len = config.max_depth - 1  # chain lengths 1..max_depth-1
        self.n_bucket = scratch_hi - scratch_lo + 1
        self._offsets = {}
        dim = 0
        for name, width in [
            ("bias", 1),
            ("depth", config.max_depth + 1),
            ("last", len(self.vocab)),
            ("start", self.n_start),
            ("chain_len", self.n_len),
            ("hist", self.n_ops),
            ("bucket", self.n_bucket),
            ("flags", 2),
            ("scaled", 1),
            ("parity", 1),
        ]:
            self._offsets[name] = dim
            dim += width
        self.dim = dim
        self._cache: dict[tuple, np.ndarray] = {}

    def block(self, name: str) -> int:
        """Start index of a named feature block (bias, depth, last, ...)."""
        return self._offsets[name]

    def features(self, question: Question, state: State) -> np.ndarray:
        key = (question.id, state.steps)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        x = np.zeros(self.dim)
        off = self._offsets
        x[off["bias"]] = 1.0
        x[off["depth"] + state.depth] = 1.0
        if state.steps:
            x[off["last"] + state.steps[-1]] = 1.0
        x[off["start"] + (question.start - self.config.start_lo)] = 1.0
        x[off["chain_len"] + len(question.chain) - 1] = 1.0
        for aid in question.chain:
            x[off["hist"] + aid] += 0.5
        s = state.scratch
        if s < self.scratch_lo:
            x[off["flags"]] = 1.0
        elif s > self.scratch_hi:
            x[off["flags"] + 1] = 1.0
        else:
            x[off["bucket"] + (s - self.scratch_lo)] = 1.0
        x[off["scaled"]] = s / 16.0
        x[off["parity"]] = float(s % 2)
        self._cache[key] = x
        return x


class Model:
    """Env + featurizer + the parametric policy/value functions.

    Parameters are always passed explicitly, so a single Model instance
    can serve both a live policy and a frozen reference snapshot.
    """

    def __init__(self, env: Env, hidden: int = DEFAULT_HIDDEN,
                 featurizer: Featurizer | None = None):
        self.env = env
        self.featurizer = featurizer or Featurizer(env.config)
        self.hidden = hidden
        self.d = self.featurizer.dim
        self.vocab_size = len(env.vocab)

    # -- constructors -----------------------------------------------------

    def init_params(self, seed: int, scale: float = 0.05) -> PolicyValueParams:
        return init_params(self.d, self.hidden, self.vocab_size, seed, scale)

    def zeros_params(self) -> PolicyValueParams:
        return zeros_params(self.d, self.hidden, self.vocab_size)

    # -- forward ----------------------------------------------------------

    def _hidden(self, params: PolicyValueParams, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ params.w_shared)

    def _question(self, state: State) -> Question:
        return self.env.question(state.question_id)

    def legal_logprobs(self, params: PolicyValueParams, state: State):
        """(legal actions, their log-probs, hidden activations, features)."""
        question = self._question(state)
        x = self.featurizer.features(question, state)
        g = self._hidden(params, x)
        legal = self.env.legal_actions(state)
        ids = np.array([a.id for a in legal])
        logits = g @ params.w_policy[:, ids]
        shifted = logits - logits.max()
        logz = np.log(np.exp(shifted).sum())
        return legal, shifted - logz, g, x

    def step_logprob(self, params: PolicyValueParams, state: State,
                     action_id: int) -> float:
        legal, logprobs, _, _ = self.legal_logprobs(params, state)
        for i, a in enumerate(legal):
            if a.id == action_id:
                return float(logprobs[i])
        raise IllegalAction(f"action {action_id} not legal at depth {state.depth}")

    def seq_logprob(self, params: PolicyValueParams, question: Question,
                    steps) -> float:
        """Sum of step log-probs over a whole prefix; 0.0 for the empty one."""
        total = 0.0
        state = self.env.initial_state(question)
        for aid in steps:
            try:
                total += self.step_logprob(params, state, aid)
                state = self.env.transition(state, self.env.vocab[aid])
            except (IllegalAction, DepthExceeded) as exc:
                raise IllegalPrefix(str(exc)) from exc
        return total

    def value(self, params: PolicyValueParams, state: State) -> float:
        question = self._question(state)
        x = self.featurizer.features(question, state)
        g = self._hidden(params, x)
        return float(np.tanh(g @ params.w_value))

    def sample_step(self, params: PolicyValueParams, state: State,
                    temperature: float, rng) -> int:
        """Sample a legal action id at the given temperature (> 0)."""
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        rng = as_generator(rng)
        legal, logprobs, _, _ = self.legal_logprobs(params, state)
        probs = temper(logprobs, temperature)
        return int(legal[rng.choice(len(legal), p=probs)].id)

    def action_distribution(self, params: PolicyValueParams, state: State):
        """(legal actions, untempered probabilities)."""
        legal, logprobs, _, _ = self.legal_logprobs(params, state)
        return legal, np.exp(logprobs)

    # -- backward ---------------------------------------------------------

    def seq_logprob_grad(self, params: PolicyValueParams, question: Question,
                         steps):
        """(seq_logprob, exact gradient). One backward pass per step; the
        shared-layer contribution is accumulated as a single stacked matmul
        so long prefixes stay cheap."""
        grad = Gradients.zeros_like(params)
        total = 0.0
        state = self.env.initial_state(question)
        x_rows: list[np.ndarray] = []
        du_rows: list[np.ndarray] = []
        for aid in steps:
            try:
                legal, logprobs, g, x = self.legal_logprobs(params, state)
            except DepthExceeded as exc:
                raise IllegalPrefix(str(exc)) from exc
            ids = np.array([a.id for a in legal])
            where = np.nonzero(ids == aid)[0]
            if where.size == 0:
                raise IllegalPrefix(
                    f"action {aid} not legal at depth {state.depth}")
            chosen = int(where[0])
            total += float(logprobs[chosen])
            # d logp(chosen) / d logit_j = delta - p_j on the legal subset
            dlogits = -np.exp(logprobs)
            dlogits[chosen] += 1.0
            grad.w_policy[:, ids] += np.outer(g, dlogits)
            dg = params.w_policy[:, ids] @ dlogits
            x_rows.append(x)
            du_rows.append(dg * (1.0 - g * g))
            state = self.env.transition(state, self.env.vocab[aid])
        if x_rows:
            grad.w_shared += np.asarray(x_rows).T @ np.asarray(du_rows)
        return total, grad

    def value_forward(self, params: PolicyValueParams, state: State):
        """(value, hidden activations, features) — the pieces a caller
        needs to assemble its own chain rule without re-featurizing."""
        question = self._question(state)
        x = self.featurizer.features(question, state)
        g = self._hidden(params, x)
        return float(np.tanh(g @ params.w_value)), g, x

    def value_grad(self, params: PolicyValueParams, state: State):
        """(value, exact gradient of the tanh value head)."""
        v, g, x = self.value_forward(params, state)
        grad = Gradients.zeros_like(params)
        dpre = 1.0 - v * v
        grad.w_value[:] = g * dpre
        dg = params.w_value * dpre
        du = dg * (1.0 - g * g)
        grad.w_shared += np.outer(x, du)
        return v, grad

    def grads_logprob_and_value(self, params: PolicyValueParams,
                                question: Question, steps) -> PrefixEval:
        """Evaluate one prefix: seq_logprob, end-state value, both gradients."""
        logprob, grad_lp = self.seq_logprob_grad(params, question, steps)
        end_state = self.env.replay(question, steps)
        value, grad_v = self.value_grad(params, end_state)
        return PrefixEval(logprob, value, grad_lp, grad_v)


def temper(logprobs: np.ndarray, temperature: float) -> np.ndarray:
    """Renormalized softmax of logprobs / temperature, overflow-safe."""
    z = logprobs / temperature
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng)))


def spawn_generator(*entropy: int) -> np.random.Generator:
    """Deterministic generator from a tuple of integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# -- parameter (de)serialization ------------------------------------------

def params_to_record(params: PolicyValueParams) -> dict:
    return {"d": params.d, "h": params.h, "vocab": params.vocab,
            "w_shared": params.w_shared.tolist(),
            "w_policy": params.w_policy.tolist(),
            "w_value": params.w_value.tolist()}


def params_from_record(rec: dict) -> PolicyValueParams:
    params = PolicyValueParams(
        w_shared=np.asarray(rec["w_shared"], dtype=np.float64),
        w_policy=np.asarray(rec["w_policy"], dtype=np.float64),
        w_value=np.asarray(rec["w_value"], dtype=np.float64))
    expect = (rec["d"], rec["h"], rec["vocab"])
    got = (params.d, params.h, params.vocab)
    if expect != got:
        raise ValueError(f"shape header {expect} does not match tensors {got}")
    return params


def save_params(params: PolicyValueParams, path: str | Path) -> None:
    """JSON dump. Floats are written with shortest round-trip repr, so a
    load reproduces every tensor bit-exactly."""
    with open(path, "w") as fh:
        json.dump(params_to_record(params), fh)


def load_params(path: str | Path) -> PolicyValueParams:
    with open(path) as fh:
        return params_from_record(json.load(fh))


# -- flat-vector helpers (optimizer-free introspection, FD harnesses) ------

def params_to_vec(params: PolicyValueParams) -> np.ndarray:
    return np.concatenate([params.w_shared.ravel(), params.w_policy.ravel(),
                           params.w_value.ravel()])

def vec_to_params(vec: np.ndarray, like: PolicyValueParams) -> PolicyValueParams:
    a = like.w_shared.size
    b = like.w_policy.size
    return PolicyValueParams(
        w_shared=vec[:a].reshape(like.w_shared.shape).copy(),
        w_policy=vec[a:a + b].reshape(like.w_policy.shape).copy(),
        w_value=vec[a + b:].copy())

def grads_to_vec(grad: Gradients) -> np.ndarray:
    return np.concatenate([grad.w_shared.ravel(), grad.w_policy.ravel(),
                           grad.w_value.ravel()])
