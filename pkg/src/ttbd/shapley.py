"""Shapley attribution of prunable neurons.

Players are removed one at a time along random permutations starting from the
full coalition. A player's marginal in a permutation is the value before it
is removed minus the value after; averaging over permutations estimates its
Shapley value, and averaging the absolute marginals gives the absolute
Shapley value used to protect neurons the clean task depends on.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Hashable, Sequence

import numpy as np

from .nn import BatchEvaluator, NeuronId, PruneMask

MAX_EXACT_PLAYERS = 12

# A value function maps the set of removed (pruned) players to a scalar.
ValueFn = Callable[[frozenset], float]


class ShapleyError(RuntimeError):
    pass


# ---------------------------------------------------------------- synthetic games

@dataclass
class TableGame:
    """Coalition -> value table over players 0..n-1; coalition bitmask indexes ``values``."""

    n: int
    values: np.ndarray  # (2**n,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (2 ** self.n,):
            raise ValueError(f"need {2 ** self.n} coalition values, got {self.values.shape}")

    @classmethod
    def from_function(cls, n: int, fn: Callable[[frozenset], float]) -> TableGame:
        vals = [fn(frozenset(i for i in range(n) if mask >> i & 1)) for mask in range(2 ** n)]
        return cls(n, np.array(vals))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> TableGame:
        return cls(n, rng.uniform(-1.0, 1.0, size=2 ** n))

    def value(self, coalition) -> float:
        return float(self.values[sum(1 << i for i in coalition)])

    def removal_value_fn(self) -> ValueFn:
        full = (1 << self.n) - 1

        def v(removed: frozenset) -> float:
            return float(self.values[full & ~sum(1 << i for i in removed)])
        return v


def exact_shapley(game: TableGame) -> np.ndarray:
    """Shapley values by enumerating every coalition."""
    n = game.n
    if n > MAX_EXACT_PLAYERS:
        raise ValueError(f"exact enumeration limited to {MAX_EXACT_PLAYERS} players, got {n}")
    weights = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    phi = np.zeros(n)
    v = game.values
    for i in range(n):
        bit = 1 << i
        others = [j for j in range(n) if j != i]
        for s in range(n):
            for subset in combinations(others, s):
                mask = sum(1 << j for j in subset)
                phi[i] += weights[s] * (v[mask | bit] - v[mask])
    return phi


# ---------------------------------------------------------------- Monte-Carlo

@dataclass
class ShapleyReport:
    players: list
    values: np.ndarray
    abs_values: np.ndarray
    iterations: int
    truncation: float
    counts: np.ndarray  # permutations in which each player got a measured marginal
    walk_lengths: list[int] = field(default_factory=list)
    label: str = ""

    def value_of(self, player) -> float:
        return float(self.values[self.players.index(player)])

    def as_dict(self) -> dict:
        return {p: (float(v), float(a)) for p, v, a in zip(self.players, self.values, self.abs_values)}


def permutation_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _walk(players: Sequence, value_fn, full_value: float, order: np.ndarray, eps: float,
          perm_index: int, walk_factory=None):
    n = len(players)
    marg = np.zeros(n)
    measured = np.zeros(n, dtype=np.int64)
    prev = full_value
    removed: set = set()
    stepper = walk_factory() if walk_factory is not None else None
    steps = 0
    for pos in order:
        p = players[pos]
        removed.add(p)
        cur = stepper(p) if stepper is not None else value_fn(frozenset(removed))
        if not np.isfinite(cur):
            raise ShapleyError(f"value function returned {cur} in permutation {perm_index} at step {steps}")
        marg[pos] = prev - cur
        measured[pos] = 1
        prev = cur
        steps += 1
        # eps = 0 disables truncation, so games with negative values walk to the end.
        if eps > 0 and cur < eps:
            break
    return marg, measured, steps


def mc_shapley(players: Sequence[Hashable], value_fn: ValueFn, T: int = 40, eps: float = 0.0,
               seed: int = 0, workers: int = 1, walk_factory=None, label: str = "") -> ShapleyReport:
    """Truncated permutation-sampling Shapley estimate.

    Each permutation walks from the full coalition, removing one player at a
    time; once the value drops below ``eps`` the walk stops and the remaining
    players get marginal 0 for that permutation. ``walk_factory`` optionally
    returns a stateful ``remove(player) -> value`` callable that is cheaper
    than re-evaluating ``value_fn`` from scratch; it must agree with it.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"truncation threshold {eps} outside [0, 1)")
    players = list(players)
    n = len(players)
    full = float(value_fn(frozenset()))
    if not np.isfinite(full):
        raise ShapleyError(f"value function returned {full} for the full coalition")

    def run(t: int):
        order = permutation_rng(seed, t).permutation(n)
        return _walk(players, value_fn, full, order, eps, t, walk_factory)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(T)))
    else:
        results = [run(t) for t in range(T)]
    margs = np.stack([r[0] for r in results])
    counts = np.sum([r[1] for r in results], axis=0)
    return ShapleyReport(
        players=players,
        values=margs.mean(axis=0),
        abs_values=np.abs(margs).mean(axis=0),
        iterations=T,
        truncation=eps,
        counts=counts,
        walk_lengths=[r[2] for r in results],
        label=label,
    )


def permutation_marginals(players, value_fn: ValueFn, order, eps: float = 0.0) -> np.ndarray:
    """Marginals of a single permutation walk (diagnostic helper)."""
    full = float(value_fn(frozenset()))
    return _walk(list(players), value_fn, full, np.asarray(order), eps, 0)[0]


# ---------------------------------------------------------------- model value functions

class AgreementValue:
    """Fraction of an evaluation set whose masked prediction equals the unmasked one.

    With the defender batch as evaluation set this is pseudo-label accuracy;
    with the detected samples it is the attack-success proxy. Either way the
    full model scores 1.
    """

    def __init__(self, evaluator: BatchEvaluator, kind: str):
        self.ev = evaluator
        self.kind = kind

    def __call__(self, removed: frozenset) -> float:
        return self.ev.agreement(PruneMask(removed))

    def walk_factory(self):
        walk = self.ev.walk()
        ref = self.ev.base_labels

        def remove(nid: NeuronId) -> float:
            pred = walk.prune([nid])
            return float(np.mean(pred == ref)) if len(ref) else 1.0
        return remove


def acc_pseudo(model, batch_images: np.ndarray, workers: int = 1) -> AgreementValue:
    return AgreementValue(BatchEvaluator(model, batch_images, workers), "ACC_pseudo")


def asr_detected(model, batch_images: np.ndarray, detected: Sequence[int], workers: int = 1) -> AgreementValue:
    idx = np.asarray(list(detected), dtype=np.intp)
    return AgreementValue(BatchEvaluator(model, batch_images[idx], workers), "ASR_detected")


def neuron_shapley(model, value: AgreementValue, T: int, eps: float, seed: int, workers: int = 1) -> ShapleyReport:
    return mc_shapley(model.neurons(), value, T=T, eps=eps, seed=seed, workers=workers,
                      walk_factory=value.walk_factory, label=value.kind)


# ---------------------------------------------------------------- serialization

def report_to_text(asr: ShapleyReport, acc: ShapleyReport) -> str:
    """Per-neuron table: layer, unit, ASR Shapley, ACC absolute Shapley, sample counts."""
    if list(asr.players) != list(acc.players):
        raise ValueError("ASR and ACC reports cover different players")
    lines = [
        "# shapley-report v1",
        f"# asr: T={asr.iterations} eps={asr.truncation} mean_walk={np.mean(asr.walk_lengths):.2f}",
        f"# acc: T={acc.iterations} eps={acc.truncation} mean_walk={np.mean(acc.walk_lengths):.2f}",
        "layer\tunit\tphi_asr\tphi_abs_acc\tphi_acc\tphi_abs_asr\tsamples_asr\tsamples_acc",
    ]
    for k, (li, ui) in enumerate(asr.players):
        lines.append(f"{li}\t{ui}\t{asr.values[k]:.17g}\t{acc.abs_values[k]:.17g}\t{acc.values[k]:.17g}\t"
                     f"{asr.abs_values[k]:.17g}\t{asr.counts[k]}\t{acc.counts[k]}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> tuple[ShapleyReport, ShapleyReport]:
    header = [l for l in text.splitlines() if l.startswith("#")]
    meta = {}
    for line in header[1:]:
        name, rest = line[2:].split(":", 1)
        meta[name] = dict(kv.split("=") for kv in rest.split())
    rows = [l.split("\t") for l in text.splitlines() if l and not l.startswith("#")][1:]
    players = [NeuronId(int(r[0]), int(r[1])) for r in rows]
    col = lambda j, t=float: np.array([t(r[j]) for r in rows])
    # Only the mean walk length is persisted; keep it as a one-element list.
    asr = ShapleyReport(players, col(2), col(5), int(meta["asr"]["T"]), float(meta["asr"]["eps"]), col(6, int),
                        [float(meta["asr"]["mean_walk"])], label="ASR_detected")
    acc = ShapleyReport(players, col(4), col(3), int(meta["acc"]["T"]), float(meta["acc"]["eps"]), col(7, int),
                        [float(meta["acc"]["mean_walk"])], label="ACC_pseudo")
    return asr, acc
