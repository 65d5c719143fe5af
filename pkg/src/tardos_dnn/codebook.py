"""q-ary Tardos codebooks.

Each of the ``m`` positions (triggers) gets a secret bias vector drawn from the
symmetric Dirichlet distribution with concentration ``kappa``, conditioned on
every component lying in ``[tau, 1 - (q-1) tau]``. Users receive symbols drawn
independently per position from that bias.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import check_seed, substream

FORMAT_VERSION = 1
MAX_ATTEMPTS = 10**6


class SamplingError(RuntimeError):
    """The cutoff Dirichlet rejection loop ran out of attempts."""


class MalformedCodebookError(ValueError):
    pass


class VersionMismatchError(ValueError):
    pass


def derive_tau(c0: int, kappa: float) -> float:
    """Cutoff optimised for ``c0`` colluders: ``c0 ** (-2 / (1 + kappa))``."""
    if c0 < 2:
        raise ValueError(f"c0 must be >= 2, got {c0}")
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return float(c0) ** (-2.0 / (1.0 + kappa))


@dataclass(frozen=True)
class TardosParams:
    q: int
    m: int
    kappa: float
    c0: int
    tau: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.q < 2:
            raise ValueError(f"alphabet size q must be >= 2, got {self.q}")
        if self.m < 1:
            raise ValueError(f"code length m must be >= 1, got {self.m}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.c0 < 2:
            raise ValueError(f"c0 must be >= 2, got {self.c0}")
        if self.tau is None:
            object.__setattr__(self, "tau", derive_tau(self.c0, self.kappa))
        if not 0 < self.tau < 1 / self.q:
            raise ValueError(
                f"tau={self.tau!r} must lie in (0, 1/q={1 / self.q!r}); "
                "pass tau explicitly when kappa is large"
            )
        object.__setattr__(self, "seed", check_seed(self.seed))

    @property
    def p_min(self) -> float:
        return self.tau

    @property
    def p_max(self) -> float:
        return 1.0 - (self.q - 1) * self.tau


# --- cutoff Dirichlet sampling ---------------------------------------------
#
# With p = tau + s*u, s = 1 - q*tau, the cutoff law becomes a density on the
# unit simplex proportional to prod_a (tau + s*u_a)^(kappa-1). For kappa >= 1
# the plain Dirichlet(kappa) proposal with rejection on the box is efficient.
# For kappa < 1 the plain proposal almost never lands inside the box (zero
# acceptances in 2e6 draws at q=10, kappa=0.1, tau=0.038), so u is proposed
# from Dirichlet(beta) and accepted with probability
#     prod_a psi(u_a) / M,   psi(u) = (tau + s*u)^(kappa-1) * u^(1-beta),
# M = (sup_u psi)^q. Both routes are exact.

_BETA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
_PILOT_DRAWS = 4096


def _log_psi_sup(q: int, kappa: float, tau: float, beta: float) -> float:
    s = 1.0 - q * tau
    if beta >= 1.0:
        u_star = 0.0
    else:
        u_star = min(1.0, (1.0 - beta) * tau / (s * (beta - kappa)))
    val = (kappa - 1.0) * math.log(tau + s * u_star)
    if beta < 1.0:
        val += (1.0 - beta) * math.log(u_star)
    return q * val


def _shifted_log_accept(u: np.ndarray, kappa: float, tau: float, beta: float, log_m: float) -> np.ndarray:
    q = u.shape[1]
    s = 1.0 - q * tau
    lw = (kappa - 1.0) * np.log(tau + s * u).sum(axis=1)
    if beta < 1.0:
        with np.errstate(divide="ignore"):
            lw = lw + (1.0 - beta) * np.log(u).sum(axis=1)
    return lw - log_m


def _dirichlet(rng: np.random.Generator, alpha: float, size: tuple[int, int]) -> np.ndarray:
    g = rng.standard_gamma(alpha, size=size)
    tot = g.sum(axis=1, keepdims=True)
    # all-zero rows (possible for tiny alpha) are rejected downstream
    with np.errstate(invalid="ignore", divide="ignore"):
        return g / tot


@functools.lru_cache(maxsize=64)
def _proposal_plan(q: int, kappa: float, tau: float) -> tuple[str, float, float, float]:
    """Pick the proposal with the best pilot acceptance: (kind, beta, log_m, acceptance).

    The pilot runs on a fixed private stream so the choice is a pure function of
    (q, kappa, tau).
    """
    lo, hi = tau, 1.0 - (q - 1) * tau
    rng = np.random.Generator(np.random.PCG64(0x7A2D05))
    x = _dirichlet(rng, kappa, (_PILOT_DRAWS, q))
    best = ("direct", kappa, 0.0, float(np.all((x >= lo) & (x <= hi), axis=1).mean()))
    if kappa >= 1.0:
        return best
    for beta in _BETA_GRID:
        if beta <= kappa:
            continue
        log_m = _log_psi_sup(q, kappa, tau, beta)
        u = _dirichlet(rng, beta, (_PILOT_DRAWS, q))
        la = _shifted_log_accept(u, kappa, tau, beta, log_m)
        acc = float(np.nan_to_num(np.exp(la), nan=0.0).mean())
        if acc > best[3]:
            best = ("shifted", beta, log_m, acc)
    return best


def sample_bias_matrix(
    params: TardosParams, rows: int, rng: np.random.Generator, max_attempts: int = MAX_ATTEMPTS
) -> np.ndarray:
    """``rows`` independent bias vectors, shape (rows, q)."""
    q, kappa, tau = params.q, params.kappa, params.tau
    lo, hi = params.p_min, params.p_max
    if not lo <= hi:
        raise ValueError(f"empty cutoff interval [{lo}, {hi}]")
    kind, beta, log_m, acc = _proposal_plan(q, float(kappa), float(tau))
    out = np.empty((rows, q))
    filled = 0
    since_accept = 0
    while filled < rows:
        need = rows - filled
        batch = int(min(1 << 16, max(64, 1.2 * need / max(acc, 1e-6))))
        if kind == "direct":
            x = _dirichlet(rng, kappa, (batch, q))
            ok = np.all((x >= lo) & (x <= hi), axis=1)
        else:
            u = _dirichlet(rng, beta, (batch, q))
            la = _shifted_log_accept(u, kappa, tau, beta, log_m)
            ok = np.log(rng.random(batch)) < la
            x = np.clip(tau + (1.0 - q * tau) * u, lo, hi)
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            since_accept += batch
            if since_accept > max_attempts:
                raise SamplingError(
                    f"no admissible bias vector after {since_accept} proposals "
                    f"(q={q}, kappa={kappa}, tau={tau})"
                )
            continue
        since_accept = batch - 1 - idx[-1]
        take = idx[:need]
        out[filled : filled + take.size] = x[take]
        filled += take.size
    return out


def sample_bias_vector(
    params: TardosParams, rng: np.random.Generator, max_attempts: int = MAX_ATTEMPTS
) -> np.ndarray:
    """One bias vector from the cutoff symmetric Dirichlet distribution."""
    return sample_bias_matrix(params, 1, rng, max_attempts)[0]


def sample_symbols(bias: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, m) symbols, column i drawn i.i.d. from ``bias[i]``."""
    m, q = bias.shape
    cdf = np.cumsum(bias, axis=1)[:, :-1]
    u = rng.random((n, m))
    x = (u[:, :, None] >= cdf[None, :, :]).sum(axis=2)
    return x.astype(np.int16)


@dataclass(frozen=True, eq=False)
class Codebook:
    params: TardosParams
    bias: np.ndarray
    fingerprints: np.ndarray
    format_version: int = FORMAT_VERSION

    @property
    def n_users(self) -> int:
        return self.fingerprints.shape[0]

    @property
    def q(self) -> int:
        return self.params.q

    @property
    def m(self) -> int:
        return self.params.m

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.params == other.params
            and self.format_version == other.format_version
            and np.array_equal(self.bias, other.bias)
            and np.array_equal(self.fingerprints, other.fingerprints)
        )

    def validate(self) -> None:
        """Raise MalformedCodebookError on the first violated invariant."""
        check_codebook_arrays(self.params, self.bias, self.fingerprints)


def check_codebook_arrays(params: TardosParams, bias: np.ndarray, fingerprints: np.ndarray) -> None:
    q, m = params.q, params.m
    if bias.ndim != 2 or bias.shape != (m, q):
        raise MalformedCodebookError(f"bias shape {bias.shape} != (m, q) = {(m, q)}")
    if not np.all(np.isfinite(bias)):
        raise MalformedCodebookError("bias contains non-finite values")
    sums = bias.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-12)
    if bad.size:
        i = int(bad[0])
        raise MalformedCodebookError(f"bias row {i} sums to {sums[i]!r}, not 1")
    out = (bias < params.p_min) | (bias > params.p_max)
    if out.any():
        i = int(np.flatnonzero(out.any(axis=1))[0])
        raise MalformedCodebookError(
            f"bias row {i} leaves the cutoff interval [{params.p_min}, {params.p_max}]"
        )
    if fingerprints.ndim != 2 or fingerprints.shape[1] != m or fingerprints.shape[0] < 1:
        raise MalformedCodebookError(f"fingerprint shape {fingerprints.shape} does not match m={m}")
    if fingerprints.size and (fingerprints.min() < 0 or fingerprints.max() >= q):
        raise MalformedCodebookError(f"fingerprint symbols outside alphabet 0..{q - 1}")


def generate_codebook(params: TardosParams, n_users: int) -> Codebook:
    """Bias rows and fingerprints, fully determined by ``params.seed``."""
    if n_users < 1:
        raise ValueError(f"n_users must be >= 1, got {n_users}")
    bias = sample_bias_matrix(params, params.m, substream(params.seed, "bias"))
    fingerprints = sample_symbols(bias, n_users, substream(params.seed, "fingerprints"))
    bias.setflags(write=False)
    fingerprints.setflags(write=False)
    return Codebook(params, bias, fingerprints)


def codebook_to_dict(cb: Codebook) -> dict:
    p = cb.params
    return {
        "format_version": cb.format_version,
        "q": p.q,
        "m": p.m,
        "n_users": cb.n_users,
        "kappa": p.kappa,
        "tau": p.tau,
        "c0": p.c0,
        "seed": p.seed,
        "bias": cb.bias.tolist(),
        "fingerprints": cb.fingerprints.tolist(),
    }


def codebook_from_dict(doc: dict) -> Codebook:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"codebook format_version {version!r}, expected {FORMAT_VERSION}")
    try:
        params = TardosParams(
            q=int(doc["q"]),
            m=int(doc["m"]),
            kappa=float(doc["kappa"]),
            c0=int(doc["c0"]),
            tau=float(doc["tau"]),
            seed=int(doc["seed"]),
        )
        bias = np.asarray(doc["bias"], dtype=np.float64)
        fingerprints = np.asarray(doc["fingerprints"], dtype=np.int64)
    except KeyError as exc:
        raise MalformedCodebookError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise MalformedCodebookError(str(exc)) from None
    check_codebook_arrays(params, bias, fingerprints)
    if fingerprints.shape[0] != int(doc.get("n_users", fingerprints.shape[0])):
        raise MalformedCodebookError("n_users does not match the fingerprint rows")
    fingerprints = fingerprints.astype(np.int16)
    bias.setflags(write=False)
    fingerprints.setflags(write=False)
    return Codebook(params, bias, fingerprints, version)


def save_codebook(cb: Codebook, path) -> None:
    # json writes floats with repr(), which round-trips binary64 exactly
    Path(path).write_text(json.dumps(codebook_to_dict(cb)))


def load_codebook(path) -> Codebook:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedCodebookError(f"not a JSON document: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedCodebookError("codebook file must hold a JSON object")
    return codebook_from_dict(doc)
