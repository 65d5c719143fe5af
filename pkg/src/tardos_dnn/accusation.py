"""Tardos scores and sequential (SPRT) accusation over trigger queries."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .channel import ChannelSpec, channel_outputs
from .codebook import Codebook
from .rng import substream

DEFAULT_BINS = 256
DEFAULT_SMOOTHING = 1.0


class DuplicatePositionError(ValueError):
    pass


class OracleError(RuntimeError):
    def __init__(self, message: str, positions_consumed: int):
        super().__init__(f"{message} (after {positions_consumed} positions)")
        self.positions_consumed = positions_consumed


class InsufficientUsersError(ValueError):
    pass


class Status(IntEnum):
    ACTIVE = 0
    ACCUSED = 1
    EXONERATED = 2


# --- scores -----------------------------------------------------------------


def score_functions(p):
    """``(U1(p), U0(p)) = (sqrt((1-p)/p), -sqrt(p/(1-p)))``; scalars or arrays."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any((arr <= 0.0) | (arr >= 1.0)) or np.any(np.isnan(arr)):
        raise ValueError("score functions are defined for p in (0, 1) only")
    u1 = np.sqrt((1.0 - arr) / arr)
    u0 = -np.sqrt(arr / (1.0 - arr))
    if arr.ndim == 0:
        return float(u1), float(u0)
    return u1, u0


def position_score(codebook: Codebook, user: int, position: int, symbol: int) -> float:
    """Score of ``user`` at ``position`` given the observed ``symbol``.

    Both branches use the bias of the observed symbol, not of the user's own.
    """
    if not 0 <= user < codebook.n_users:
        raise IndexError(f"user {user} outside 0..{codebook.n_users - 1}")
    if not 0 <= position < codebook.m:
        raise IndexError(f"position {position} outside 0..{codebook.m - 1}")
    if not 0 <= symbol < codebook.q:
        raise IndexError(f"symbol {symbol} outside 0..{codebook.q - 1}")
    u1, u0 = score_functions(float(codebook.bias[position, symbol]))
    return u1 if codebook.fingerprints[user, position] == symbol else u0


def position_scores(codebook: Codebook, position: int, symbol: int) -> np.ndarray:
    """Scores of every user at one position."""
    u1, u0 = score_functions(float(codebook.bias[position, symbol]))
    return np.where(codebook.fingerprints[:, position] == symbol, u1, u0)


def score_matrix(codebook: Codebook, outputs: np.ndarray, positions=None) -> np.ndarray:
    """(n_users, k) per-position scores for answers ``outputs`` at ``positions``."""
    positions = np.arange(codebook.m) if positions is None else np.asarray(positions)
    outputs = np.asarray(outputs, dtype=np.int64)
    p = codebook.bias[positions, outputs]
    u1, u0 = score_functions(p)
    match = codebook.fingerprints[:, positions] == outputs[None, :]
    return np.where(match, u1[None, :], u0[None, :])


# --- empirical score distributions ------------------------------------------


def score_bin_edges(tau: float, nbins: int = DEFAULT_BINS) -> np.ndarray:
    """Equal-width edges covering every attainable score, plus one bin width of margin."""
    half = math.sqrt((1.0 - tau) / tau)
    margin = 2.0 * half / nbins
    return np.linspace(-half - margin, half + margin, nbins + 1)


@dataclass(frozen=True, eq=False)
class ScoreDistributions:
    bin_edges: np.ndarray
    p_col: np.ndarray
    p_inn: np.ndarray
    smoothing: float
    n_samples: dict
    channel_descriptor: dict = field(default_factory=dict)
    score_mean: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        p_col = np.asarray(self.p_col, dtype=np.float64)
        p_inn = np.asarray(self.p_inn, dtype=np.float64)
        nb = edges.size - 1
        if nb < 1 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing with at least one bin")
        if p_col.shape != (nb,) or p_inn.shape != (nb,):
            raise ValueError("empty or mis-sized score distribution")
        for name, mass in (("p_col", p_col), ("p_inn", p_inn)):
            if np.any(mass <= 0) or abs(mass.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be strictly positive and sum to 1")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "p_col", p_col)
        object.__setattr__(self, "p_inn", p_inn)
        object.__setattr__(self, "_llr", np.log(p_col / p_inn))

    @property
    def nbins(self) -> int:
        return self.p_col.size

    def bin_index(self, scores) -> np.ndarray:
        idx = np.searchsorted(self.bin_edges, scores, side="right") - 1
        return np.clip(idx, 0, self.nbins - 1)

    def log_ratio(self, scores, base: float = 10.0) -> np.ndarray:
        """``log_base(P_col / P_inn)`` at the bins of ``scores``."""
        return self._llr[self.bin_index(scores)] / math.log(base)

    @classmethod
    def from_counts(cls, edges, col_counts, inn_counts, smoothing=DEFAULT_SMOOTHING, **kw):
        col = np.asarray(col_counts, dtype=np.float64) + smoothing
        inn = np.asarray(inn_counts, dtype=np.float64) + smoothing
        return cls(
            bin_edges=edges,
            p_col=col / col.sum(),
            p_inn=inn / inn.sum(),
            smoothing=float(smoothing),
            n_samples={"colluder": int(np.sum(col_counts)), "innocent": int(np.sum(inn_counts))},
            **kw,
        )

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "p_col": self.p_col.tolist(),
            "p_inn": self.p_inn.tolist(),
            "smoothing": self.smoothing,
            "n_samples": dict(self.n_samples),
            "channel_descriptor": dict(self.channel_descriptor),
            "score_mean": dict(self.score_mean),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoreDistributions":
        try:
            return cls(
                bin_edges=doc["bin_edges"],
                p_col=doc["p_col"],
                p_inn=doc["p_inn"],
                smoothing=float(doc["smoothing"]),
                n_samples=dict(doc["n_samples"]),
                channel_descriptor=dict(doc.get("channel_descriptor", {})),
                score_mean=dict(doc.get("score_mean", {})),
            )
        except KeyError as exc:
            raise ValueError(f"distribution file lacks field {exc.args[0]!r}") from None


def _estimate_chunk(codebook, channel, c0, seed, trials, edges):
    nb = edges.size - 1
    col = np.zeros(nb, dtype=np.int64)
    inn = np.zeros(nb, dtype=np.int64)
    sums = {}
    positions = np.arange(codebook.m)
    for trial in trials:
        rng = substream(seed, "estimate", trial)
        colluders = np.sort(rng.choice(codebook.n_users, size=c0, replace=False))
        spec = channel.with_colluders(colluders)
        out = channel_outputs(spec, codebook, positions, rng)
        scores = score_matrix(codebook, out, positions)
        bins = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, nb - 1)
        is_col = np.zeros(codebook.n_users, dtype=bool)
        is_col[colluders] = True
        col += np.bincount(bins[is_col].ravel(), minlength=nb)
        inn += np.bincount(bins[~is_col].ravel(), minlength=nb)
        sums[trial] = (scores[is_col].sum(), scores[~is_col].sum())
    return col, inn, sums


def estimate_score_distributions(
    codebook: Codebook,
    channel: ChannelSpec,
    c0: int,
    trials: int,
    seed: int,
    nbins: int = DEFAULT_BINS,
    smoothing: float = DEFAULT_SMOOTHING,
    workers: int = 1,
) -> ScoreDistributions:
    """Pool per-position scores of colluders and innocents over random collusions.

    ``channel`` is a template: its strategy, violation and skew settings are
    kept and its colluders are replaced by ``trials`` random collusions of
    size ``c0``. Trial ``k`` draws from ``substream(seed, "estimate", k)``, so
    the result does not depend on ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if codebook.n_users <= c0:
        raise InsufficientUsersError(f"need more than c0={c0} users, codebook has {codebook.n_users}")
    edges = score_bin_edges(codebook.params.tau, nbins)
    workers = max(1, min(int(workers), trials))
    chunks = [range(k, trials, workers) for k in range(workers)]
    if workers == 1:
        parts = [_estimate_chunk(codebook, channel, c0, seed, chunks[0], edges)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda ch: _estimate_chunk(codebook, channel, c0, seed, ch, edges), chunks))
    col = sum(p[0] for p in parts)
    inn = sum(p[1] for p in parts)
    per_trial = {}
    for p in parts:
        per_trial.update(p[2])
    # float sums merged in trial order so the total is worker-independent
    sums = np.zeros(2)
    for trial in range(trials):
        sums += per_trial[trial]
    n_col, n_inn = int(col.sum()), int(inn.sum())
    descriptor = dict(channel.descriptor(), c0=int(c0), trials=int(trials), seed=int(seed))
    return ScoreDistributions.from_counts(
        edges,
        col,
        inn,
        smoothing,
        channel_descriptor=descriptor,
        score_mean={"colluder": float(sums[0] / n_col), "innocent": float(sums[1] / n_inn)},
    )


# --- SPRT -------------------------------------------------------------------


@dataclass(frozen=True)
class SprtConfig:
    """Thresholds of the per-user SPRT.

    ``a`` and ``b`` default to ``log(eps2 / (1 - eps1))`` and
    ``log((1 - eps2) / eps1)`` in ``log_base``. With ``family_size = n`` the
    false-positive budget ``eps1`` is split evenly over ``n`` users
    (Bonferroni), so ``b`` and ``Z_t`` use ``eps1 / n`` and ``eps1`` bounds the
    rate of accusing anyone in an innocent model.
    """

    eps1: float = 1e-6
    eps2: float = 1e-3
    log_base: float = 10.0
    a: float | None = None
    b: float | None = None
    use_z_threshold: bool = True
    family_size: int = 1

    def __post_init__(self):
        if not (0 < self.eps1 < 1 and 0 < self.eps2 < 1):
            raise ValueError("eps1 and eps2 must lie in (0, 1)")
        if not (self.log_base > 0 and self.log_base != 1):
            raise ValueError(f"invalid log base {self.log_base}")
        if self.family_size < 1:
            raise ValueError("family_size must be >= 1")
        lg = math.log(self.log_base)
        if self.a is None:
            object.__setattr__(self, "a", math.log(self.eps2 / (1 - self.eps1)) / lg)
        if self.b is None:
            object.__setattr__(self, "b", math.log((1 - self.eps2) / self.per_user_eps1) / lg)
        if not self.a < 0 < self.b:
            raise ValueError(f"thresholds must satisfy a < 0 < b, got a={self.a}, b={self.b}")

    @property
    def per_user_eps1(self) -> float:
        return self.eps1 / self.family_size

    def for_family(self, n_users: int) -> "SprtConfig":
        """Same targets with ``eps1`` shared by ``n_users``; explicit thresholds are dropped."""
        return SprtConfig(self.eps1, self.eps2, self.log_base, None, None, self.use_z_threshold, n_users)


@dataclass(frozen=True, eq=False)
class SprtState:
    W: np.ndarray
    S: np.ndarray
    status: np.ndarray
    t: int = 0
    t_star: int | None = None
    consumed: tuple[int, ...] = ()

    @classmethod
    def initial(cls, n_users: int) -> "SprtState":
        return cls(
            W=np.zeros(n_users),
            S=np.zeros(n_users),
            status=np.full(n_users, Status.ACTIVE, dtype=np.int8),
        )

    @property
    def accused(self) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.status == Status.ACCUSED))

    @property
    def decision(self) -> str:
        if (self.status == Status.ACCUSED).any():
            return "accused"
        if (self.status == Status.EXONERATED).all():
            return "exonerated"
        return "undecided"


def z_threshold(t: int, eps1: float, tau: float) -> float:
    """Score level ``Z_t`` above which a user can be accused after ``t`` queries.

    Smallest ``Z`` with ``exp(-(Z^2 / 2t) / (1 + Z / (3 t sqrt(tau)))) <= eps1``.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if not 0 < eps1 < 1:
        raise ValueError(f"eps1 must lie in (0, 1), got {eps1}")
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    L = math.log(1.0 / eps1)
    return L / (3.0 * math.sqrt(tau)) + math.sqrt(L * L / (9.0 * tau) + 2.0 * L * t)


def sprt_step(
    state: SprtState,
    codebook: Codebook,
    dists: ScoreDistributions,
    config: SprtConfig,
    position: int,
    symbol: int,
) -> SprtState:
    """Consume one query answer; returns the updated state (the input is untouched)."""
    if position in state.consumed:
        raise DuplicatePositionError(f"position {position} was already queried")
    if not 0 <= position < codebook.m:
        raise IndexError(f"position {position} outside 0..{codebook.m - 1}")
    if not 0 <= symbol < codebook.q:
        raise IndexError(f"symbol {symbol} outside 0..{codebook.q - 1}")
    active = state.status == Status.ACTIVE
    if not active.any():
        raise ValueError("no active users left; the test has already decided")

    scores = position_scores(codebook, position, symbol)
    W = state.W + np.where(active, dists.log_ratio(scores, config.log_base), 0.0)
    S = state.S + np.where(active, scores, 0.0)
    t = state.t + 1

    accuse = active & (W >= config.b)
    if config.use_z_threshold:
        accuse |= active & (S > z_threshold(t, config.per_user_eps1, codebook.params.tau))
    status = state.status.copy()
    status[accuse] = Status.ACCUSED
    if not accuse.any() and np.all(W < config.a):
        status[active] = Status.EXONERATED

    t_star = state.t_star
    if t_star is None and (status != Status.ACTIVE).any():
        t_star = t
    return replace(state, W=W, S=S, status=status, t=t, t_star=t_star, consumed=state.consumed + (int(position),))


@dataclass(frozen=True)
class AccusationResult:
    decision: str
    accused: tuple[int, ...]
    t_star: int | None
    state: SprtState


def default_query_order(m: int, seed: int) -> np.ndarray:
    return substream(seed, "query-order").permutation(m)


def sequential_accuse(
    codebook: Codebook,
    dists: ScoreDistributions,
    config: SprtConfig,
    oracle,
    query_order=None,
    seed: int = 0,
) -> AccusationResult:
    """Query positions in ``query_order`` until the SPRT decides or positions run out.

    ``oracle`` maps a position to the suspect model's answer. Without an
    explicit order, a permutation is drawn from ``seed``.
    """
    order = default_query_order(codebook.m, seed) if query_order is None else query_order
    state = SprtState.initial(codebook.n_users)
    for position in order:
        position = int(position)
        try:
            symbol = int(oracle(position))
        except Exception as exc:
            raise OracleError(f"oracle failed at position {position}: {exc}", state.t) from exc
        state = sprt_step(state, codebook, dists, config, position, symbol)
        if state.t_star is not None:
            break
    accused = state.accused
    # strongest evidence first
    accused = tuple(sorted(accused, key=lambda j: (-state.W[j], j)))
    return AccusationResult(state.decision, accused, state.t_star, state)


def accuse_answers(
    codebook: Codebook,
    dists: ScoreDistributions,
    config: SprtConfig,
    answers,
    query_order=None,
    seed: int = 0,
    block: int = 64,
) -> AccusationResult:
    """``sequential_accuse`` against a fixed answer table, evaluated in blocks.

    Gives the same decision, t*, accused set and final state, bit for bit, as
    stepping one query at a time: every user stays active until the first
    decision, and cumulative sums are seeded with the running total so the
    additions happen in the same order.
    """
    answers = np.asarray(answers, dtype=np.int64)
    order = default_query_order(codebook.m, seed) if query_order is None else np.asarray(query_order)
    if np.unique(order).size != order.size:
        raise DuplicatePositionError("query order repeats a position")
    n = codebook.n_users
    tau = codebook.params.tau
    W = np.zeros(n)
    S = np.zeros(n)
    scale = math.log(config.log_base)
    for start in range(0, order.size, block):
        pos = order[start : start + block]
        k = pos.size
        scores = score_matrix(codebook, answers[pos], pos)
        inc = dists._llr[dists.bin_index(scores)] / scale
        Wc = np.cumsum(np.concatenate([W[:, None], inc], axis=1), axis=1)[:, 1:]
        Sc = np.cumsum(np.concatenate([S[:, None], scores], axis=1), axis=1)[:, 1:]
        accuse = (Wc >= config.b).any(axis=0)
        if config.use_z_threshold:
            z = np.array([z_threshold(start + j + 1, config.per_user_eps1, tau) for j in range(k)])
            accuse |= (Sc > z[None, :]).any(axis=0)
        exonerate = ~accuse & (Wc < config.a).all(axis=0)
        hit = np.flatnonzero(accuse | exonerate)
        if hit.size:
            j = int(hit[0])
            t = start + j + 1
            W, S = Wc[:, j].copy(), Sc[:, j].copy()
            status = np.full(n, Status.ACTIVE, dtype=np.int8)
            if accuse[j]:
                mask = W >= config.b
                if config.use_z_threshold:
                    mask |= S > z[j]
                status[mask] = Status.ACCUSED
            else:
                status[:] = Status.EXONERATED
            state = SprtState(W, S, status, t, t, tuple(int(x) for x in order[:t]))
            accused = tuple(sorted(state.accused, key=lambda u: (-W[u], u)))
            return AccusationResult(state.decision, accused, t, state)
        W, S = Wc[:, -1].copy(), Sc[:, -1].copy()
    status = np.full(n, Status.ACTIVE, dtype=np.int8)
    state = SprtState(W, S, status, int(order.size), None, tuple(int(x) for x in order))
    return AccusationResult("undecided", (), None, state)


# --- independent-trigger baseline -------------------------------------------


def baseline_independent_fpr(t: int, t_correct: int, p_random: float) -> float:
    """Probability that an unrelated model answers ``t_correct`` of ``t`` private triggers right."""
    if t < 0 or not 0 <= t_correct <= t:
        raise ValueError(f"need 0 <= t_correct <= t, got t={t}, t_correct={t_correct}")
    if not 0 < p_random < 1:
        raise ValueError(f"p_random must lie in (0, 1), got {p_random}")
    return math.comb(t, t_correct) * p_random**t_correct * (1 - p_random) ** (t - t_correct)


def baseline_min_queries(eps1: float, p_random: float) -> int:
    """Fewest all-correct queries that push the baseline FPR to ``eps1`` or below."""
    if not 0 < eps1 < 1:
        raise ValueError(f"eps1 must lie in (0, 1), got {eps1}")
    t = 1
    # relative slack absorbs rounding in p**t (0.1**6 evaluates above 1e-6)
    while baseline_independent_fpr(t, t, p_random) > eps1 * (1 + 1e-9):
        t += 1
    return t
