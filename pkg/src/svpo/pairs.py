"""Step-level preference data carved out of labeled search forests.

A node is correct when some terminal at or below it holds reward +1.
Each tree is walked from the root: at every level the argmax-Q correct
child becomes the winner, and non-correct nodes become losers of three
kinds — siblings (same parent), cousins (same depth, different parent),
and terminals (wrong complete answers at other depths). With the default
counts (2 siblings, 1 cousin, 1 terminal) each walked level contributes
one positive prefix and up to four negatives, which is where the roughly
1:4 positive:negative ratio comes from. A loser node is never reused
within a question, and when a level has no candidates at all, one loser
is borrowed from another tree of the same forest, sibling-like first.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import Env, Solution
from .mcts import Forest, SearchTree, TreeNode
from .model import spawn_generator

_PAIR_STREAM = 0xBA1

SIBLING = "sibling"
COUSIN = "cousin"
TERMINAL_KIND = "terminal"


class UnlabeledForest(Exception):
    """Raised when extraction runs before label_correct."""


@dataclass
class PairCounts:
    n_sibling: int = 2
    n_cousin: int = 1
    n_terminal: int = 1

    def __post_init__(self):
        if min(self.n_sibling, self.n_cousin, self.n_terminal) < 0:
            raise ValueError("pair counts must be >= 0")


@dataclass(frozen=True)
class PreferencePair:
    """One winner/loser prefix pair. `level` is the length of the shared
    action prefix (where the two step sequences diverge). `tree` records
    which tree's walk emitted the pair; it stays out of the serialized
    schema and exists for ratio accounting."""

    question_id: int
    winner: tuple[int, ...]
    loser: tuple[int, ...]
    kind: str
    q_w: float
    q_l: float
    level: int
    tree: int = 0


@dataclass(frozen=True)
class ValueTarget:
    """Frozen regression target for the value head: terminal nodes carry
    their reward, internal nodes their search Q."""

    question_id: int
    prefix: tuple[int, ...]
    target: float


def label_correct(forest: Forest) -> Forest:
    """Mark every node with a correct terminal at or below it. Idempotent;
    re-labeling a labeled forest is a no-op."""
    for tree in forest.trees:
        for node in tree.nodes:
            node.correct = False
        for node in tree.nodes:
            if node.terminal and node.reward == 1:
                cur: int | None = node.id
                while cur is not None:
                    tree.nodes[cur].correct = True
                    cur = tree.nodes[cur].parent
    forest.labeled = True
    return forest


def _divergence(a: tuple[int, ...], b: tuple[int, ...]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def classify_kind(winner: tuple[int, ...], loser: tuple[int, ...]) -> str:
    """Structural pair kind: equal-length prefixes sharing everything but
    the last action are siblings, other equal-length pairs are cousins,
    and unequal lengths make a terminal pair."""
    if len(winner) != len(loser):
        return TERMINAL_KIND
    if _divergence(winner, loser) == len(winner) - 1:
        return SIBLING
    return COUSIN


def _draw(rng: np.random.Generator, candidates: list, k: int) -> list:
    """Up to k distinct picks, candidate order held stable for determinism."""
    if not candidates or k <= 0:
        return []
    k = min(k, len(candidates))
    idx = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[int(i)] for i in idx]


def extract_pairs(forest: Forest, counts: PairCounts,
                  rng_seed: int) -> list[PreferencePair]:
    """Walk each tree of a labeled forest and emit preference pairs.

    Deterministic in (forest, counts, rng_seed). Skips trees whose roots
    have no correct child.
    """
    if not forest.labeled:
        raise UnlabeledForest("run label_correct before extracting pairs")
    rng = spawn_generator(_PAIR_STREAM, rng_seed, forest.question_id)
    used: set[tuple[int, int]] = set()
    pairs: list[PreferencePair] = []

    def emit(t: int, winner: TreeNode, loser_t: int, loser: TreeNode,
             kind: str) -> None:
        used.add((loser_t, loser.id))
        pairs.append(PreferencePair(
            question_id=forest.question_id, winner=winner.state.steps,
            loser=loser.state.steps, kind=kind, q_w=winner.Q, q_l=loser.Q,
            level=_divergence(winner.state.steps, loser.state.steps),
            tree=t))

    for t, tree in enumerate(forest.trees):
        node = tree.root
        while not node.terminal:
            correct_children = [tree.nodes[c] for c in node.children
                                if tree.nodes[c].correct]
            if not correct_children:
                break
            n_w = min(correct_children, key=lambda n: (-n.Q, n.id))
            depth = n_w.state.depth
            siblings = [tree.nodes[c] for c in node.children
                        if not tree.nodes[c].correct and (t, c) not in used]
            cousins = [n for n in tree.nodes
                       if n.state.depth == depth and not n.correct
                       and n.parent is not None and n.parent != node.id
                       and (t, n.id) not in used]
            terminals = [n for n in tree.nodes
                         if n.terminal and not n.correct
                         and n.state.depth != depth and (t, n.id) not in used]
            if siblings or cousins or terminals:
                for loser in _draw(rng, siblings, counts.n_sibling):
                    emit(t, n_w, t, loser, SIBLING)
                for loser in _draw(rng, cousins, counts.n_cousin):
                    emit(t, n_w, t, loser, COUSIN)
                for loser in _draw(rng, terminals, counts.n_terminal):
                    emit(t, n_w, t, loser, TERMINAL_KIND)
            else:
                borrowed = _cross_tree_fallback(forest, t, n_w, depth, used)
                if borrowed is not None:
                    loser_t, loser = borrowed
                    emit(t, n_w, loser_t, loser,
                         classify_kind(n_w.state.steps, loser.state.steps))
            node = n_w
    return pairs


def _cross_tree_fallback(forest: Forest, t: int, n_w: TreeNode, depth: int,
                         used: set[tuple[int, int]]):
    """One loser from another tree: sibling-like first (same depth, shares
    all but the last action with the winner), then cousin-like (same
    depth), then a wrong terminal at another depth. Deterministic: lowest
    (tree, node id) wins."""
    winner_steps = n_w.state.steps
    sib, cous, term = [], [], []
    for ot, other in enumerate(forest.trees):
        if ot == t:
            continue
        for node in other.nodes:
            if node.correct or node.parent is None or (ot, node.id) in used:
                continue
            if node.state.depth == depth:
                if _divergence(winner_steps, node.state.steps) == depth - 1:
                    sib.append((ot, node))
                else:
                    cous.append((ot, node))
            elif node.terminal:
                term.append((ot, node))
    for pool in (sib, cous, term):
        if pool:
            return min(pool, key=lambda p: (p[0], p[1].id))
    return None


def extract_value_targets(forest: Forest) -> list[ValueTarget]:
    """One frozen target per visited non-root node, in arena order."""
    out = []
    for tree in forest.trees:
        for node in tree.nodes:
            if node.parent is None or node.N < 1:
                continue
            target = float(node.reward) if node.terminal else float(node.Q)
            out.append(ValueTarget(forest.question_id, node.state.steps,
                                   target))
    return out


def extract_sft_solutions(env: Env, forest: Forest, k: int) -> list[Solution]:
    """Up to k distinct correct complete solutions, highest mean path Q
    first (path Q averages the nodes along the root-to-terminal path,
    root excluded)."""
    if not forest.labeled:
        raise UnlabeledForest("run label_correct before extracting solutions")
    question = env.question(forest.question_id)
    ranked: dict[tuple[int, ...], tuple[float, int, int]] = {}
    for t, tree in enumerate(forest.trees):
        for node in tree.nodes:
            if not (node.terminal and node.reward == 1):
                continue
            path = tree.path_ids(node.id)[1:]
            mean_q = sum(tree.nodes[i].Q for i in path) / len(path)
            key = node.state.steps
            cand = (-mean_q, t, node.id)
            if key not in ranked or cand < ranked[key]:
                ranked[key] = cand
    ordered = sorted(ranked.items(), key=lambda kv: kv[1])
    return [env.build_solution(question, steps) for steps, _ in ordered[:k]]


def positive_negative_ratio(pairs: list[PreferencePair]) -> float:
    """Negatives per positive: each emitted pair is one negative example,
    each walked winner prefix (per question and tree) one positive."""
    if not pairs:
        return 0.0
    positives = {(p.question_id, p.tree, p.winner) for p in pairs}
    return len(pairs) / len(positives)


# -- (de)serialization ------------------------------------------------------

def pair_to_record(p: PreferencePair) -> dict:
    return {"question_id": p.question_id, "winner": list(p.winner),
            "loser": list(p.loser), "kind": p.kind, "q_w": p.q_w,
            "q_l": p.q_l, "level": p.level}


def pair_from_record(rec: dict) -> PreferencePair:
    return PreferencePair(
        question_id=rec["question_id"], winner=tuple(rec["winner"]),
        loser=tuple(rec["loser"]), kind=rec["kind"], q_w=rec["q_w"],
        q_l=rec["q_l"], level=rec["level"])


def save_pairs(pairs: list[PreferencePair], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(pair_to_record(p)) + "\n")


def load_pairs(path: str | Path) -> list[PreferencePair]:
    with open(path) as fh:
        return [pair_from_record(json.loads(line))
                for line in fh if line.strip()]


def save_value_targets(targets: list[ValueTarget], path: str | Path) -> None:
    with open(path, "w") as fh:
        for t in targets:
            fh.write(json.dumps({"question_id": t.question_id,
                                 "prefix": list(t.prefix),
                                 "target": t.target}) + "\n")


def load_value_targets(path: str | Path) -> list[ValueTarget]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(ValueTarget(rec["question_id"],
                                       tuple(rec["prefix"]), rec["target"]))
    return out


def save_solutions(solutions: list[Solution], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in solutions:
            fh.write(json.dumps({"question_id": s.question_id,
                                 "steps": list(s.steps),
                                 "predicted": s.predicted,
                                 "correct": s.correct}) + "\n")


def load_solutions(path: str | Path) -> list[Solution]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(Solution(rec["question_id"], tuple(rec["steps"]),
                                    rec["predicted"], rec["correct"]))
    return out
