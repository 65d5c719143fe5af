"""Simulated leaked model: how a (colluded, attacked) copy answers trigger queries.

A position's answer is produced in three stages:

1. with probability ``skew_rate`` the model answers the trigger's main-task
   label (merged models drift towards the main task);
2. otherwise, with probability ``ma_violation_rate`` it answers a symbol none of
   the colluders holds there (a Marking Assumption violation), uniformly;
3. otherwise the collusion strategy picks from the colluders' symbols.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .codebook import Codebook
from .rng import check_seed, substream

STRATEGIES = ("majority", "minority", "interleaving")

# Measured fraction of triggers violating the MA, per collusion size and attack.
PRESETS: dict[str, float] = {
    "single/no-attack": 0.000,
    "single/fine-tune": 0.023,
    "single/prune": 0.190,
    "c2/no-attack": 0.043,
    "c2/fine-tune": 0.151,
    "c2/prune": 0.317,
    "c6/no-attack": 0.056,
    "c6/fine-tune": 0.156,
    "c6/prune": 0.290,
}

PRESET_SIZES = {"single": 1, "c2": 2, "c6": 6}

# Default skew per trigger type, for collusions of two or more.
TRIGGER_SKEW = {"T_R": 0.0, "T_M": 0.1, "T_B": 0.3}


def preset_collusion_size(name: str) -> int:
    if name not in PRESETS:
        raise KeyError(f"unknown channel preset {name!r}; known: {sorted(PRESETS)}")
    return PRESET_SIZES[name.split("/")[0]]


@dataclass(frozen=True)
class ChannelSpec:
    colluders: tuple[int, ...]
    strategy: str = "majority"
    ma_violation_rate: float = 0.0
    skew_rate: float = 0.0
    true_labels: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "colluders", tuple(int(j) for j in self.colluders))
        if not self.colluders:
            raise ValueError("a channel needs at least one colluder")
        if len(set(self.colluders)) != len(self.colluders):
            raise ValueError(f"duplicate colluders in {self.colluders}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.ma_violation_rate < 1.0:
            raise ValueError(f"ma_violation_rate must lie in [0, 1), got {self.ma_violation_rate}")
        if not 0.0 <= self.skew_rate < 1.0:
            raise ValueError(f"skew_rate must lie in [0, 1), got {self.skew_rate}")
        if self.ma_violation_rate + self.skew_rate >= 1.0:
            raise ValueError("ma_violation_rate + skew_rate must be < 1")
        if (self.skew_rate > 0) != (self.true_labels is not None):
            raise ValueError("true_labels must be given exactly when skew_rate > 0")
        if self.true_labels is not None:
            object.__setattr__(self, "true_labels", tuple(int(a) for a in self.true_labels))
        object.__setattr__(self, "seed", check_seed(self.seed))

    @property
    def c(self) -> int:
        return len(self.colluders)

    @classmethod
    def from_preset(cls, name: str, colluders, **kw) -> "ChannelSpec":
        """Majority channel with the preset's violation rate."""
        return cls(colluders=tuple(colluders), ma_violation_rate=PRESETS[name], **kw)

    def with_colluders(self, colluders, seed: int | None = None) -> "ChannelSpec":
        return replace(self, colluders=tuple(colluders), seed=self.seed if seed is None else seed)

    def descriptor(self) -> dict:
        """Everything but the colluder identities and seed."""
        return {
            "strategy": self.strategy,
            "ma_violation_rate": self.ma_violation_rate,
            "skew_rate": self.skew_rate,
        }

    def check_against(self, codebook: Codebook) -> None:
        bad = [j for j in self.colluders if not 0 <= j < codebook.n_users]
        if bad:
            raise IndexError(f"colluders {bad} outside 0..{codebook.n_users - 1}")
        if self.true_labels is not None:
            if len(self.true_labels) != codebook.m:
                raise ValueError(f"true_labels has {len(self.true_labels)} entries, expected m={codebook.m}")
            if min(self.true_labels) < 0 or max(self.true_labels) >= codebook.q:
                raise ValueError("true_labels outside the alphabet")


def _uniform_pick(mask: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Per row, a uniformly random column among those where ``mask`` is set."""
    return np.argmax(np.where(mask, keys, -1.0), axis=1)


def symbol_counts(codebook: Codebook, colluders, positions: np.ndarray) -> np.ndarray:
    """(len(positions), q) counts of each symbol among the colluders."""
    held = codebook.fingerprints[np.asarray(colluders)][:, positions]
    k = held.shape[1]
    counts = np.zeros((k, codebook.q), dtype=np.int64)
    for row in held:
        counts[np.arange(k), row] += 1
    return counts


def channel_outputs(
    spec: ChannelSpec, codebook: Codebook, positions, rng: np.random.Generator
) -> np.ndarray:
    """Fresh (non-memoised) answers at ``positions``; one independent draw each.

    Every call consumes the same number of variates per position, whatever the
    branch taken, so streams stay aligned across specs.
    """
    positions = np.atleast_1d(np.asarray(positions, dtype=np.int64))
    if positions.size and (positions.min() < 0 or positions.max() >= codebook.m):
        raise IndexError(f"positions outside 0..{codebook.m - 1}")
    spec.check_against(codebook)
    k, q = positions.size, codebook.q
    held = codebook.fingerprints[np.asarray(spec.colluders)][:, positions]
    counts = symbol_counts(codebook, spec.colluders, positions)

    u_skew = rng.random(k)
    u_ma = rng.random(k)
    keys_ma = rng.random((k, q))
    keys_tie = rng.random((k, q))
    pick = rng.integers(0, spec.c, size=k)

    present = counts > 0
    if spec.strategy == "majority":
        cand = counts == counts.max(axis=1, keepdims=True)
        out = _uniform_pick(cand, keys_tie)
    elif spec.strategy == "minority":
        low = np.where(present, counts, np.iinfo(np.int64).max).min(axis=1, keepdims=True)
        out = _uniform_pick(present & (counts == low), keys_tie)
    else:
        out = held[pick, np.arange(k)].astype(np.int64)

    violate = (u_ma < spec.ma_violation_rate) & ~present.all(axis=1)
    if violate.any():
        out = np.where(violate, _uniform_pick(~present, keys_ma), out)
    if spec.skew_rate > 0:
        labels = np.asarray(spec.true_labels, dtype=np.int64)[positions]
        out = np.where(u_skew < spec.skew_rate, labels, out)
    return out


def channel_output(spec: ChannelSpec, codebook: Codebook, position: int, rng: np.random.Generator) -> int:
    """A single fresh answer at ``position``."""
    return int(channel_outputs(spec, codebook, [position], rng)[0])


def count_ma_violations(
    spec: ChannelSpec, codebook: Codebook, trials: int, rng: np.random.Generator
) -> tuple[int, int]:
    """(violations, eligible answers) over ``trials`` passes of all positions.

    Positions where the colluders jointly hold every symbol cannot violate the
    assumption and are left out of the denominator.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    positions = np.arange(codebook.m)
    counts = symbol_counts(codebook, spec.colluders, positions)
    eligible = ~(counts > 0).all(axis=1)
    violations = 0
    for _ in range(trials):
        out = channel_outputs(spec, codebook, positions, rng)
        violations += int((counts[positions, out] == 0)[eligible].sum())
    return violations, int(eligible.sum()) * trials


def measure_ma_violation_rate(
    spec: ChannelSpec, codebook: Codebook, trials: int, rng: np.random.Generator
) -> float:
    """Fraction of answers that no colluder holds at that position."""
    violations, eligible = count_ma_violations(spec, codebook, trials, rng)
    return violations / eligible if eligible else 0.0


class Oracle:
    """A fixed suspect model: position -> answered symbol, consistent across queries.

    The answer table is computed once at construction from the spec's seed, so
    the oracle is immutable and safe to share between threads.
    """

    def __init__(self, answers: np.ndarray):
        self._answers = np.asarray(answers, dtype=np.int64)
        self._answers.setflags(write=False)

    def __call__(self, position: int) -> int:
        if not 0 <= position < self._answers.size:
            raise IndexError(f"position {position} outside 0..{self._answers.size - 1}")
        return int(self._answers[position])

    @property
    def answers(self) -> np.ndarray:
        return self._answers

    def __len__(self):
        return self._answers.size


def make_oracle(spec: ChannelSpec, codebook: Codebook) -> Oracle:
    rng = substream(spec.seed, "oracle")
    return Oracle(channel_outputs(spec, codebook, np.arange(codebook.m), rng))


def make_innocent_oracle(codebook: Codebook, seed: int) -> Oracle:
    """A model that never received any fingerprint: answers drawn from the biases."""
    rng = substream(seed, "innocent-oracle")
    cdf = np.cumsum(codebook.bias, axis=1)[:, :-1]
    u = rng.random(codebook.m)
    return Oracle((u[:, None] >= cdf).sum(axis=1))


def random_true_labels(q: int, m: int, seed: int) -> tuple[int, ...]:
    """Main-task labels of the triggers, uniform over the alphabet."""
    return tuple(int(a) for a in substream(seed, "true-labels").integers(0, q, size=m))
