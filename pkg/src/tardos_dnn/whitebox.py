"""White-box fingerprinting with orthogonal user codes over synthetic weights.

A suspect layer ``w`` (length ``l``) is projected through the secret matrix
``D`` (``l x p``) and compared with each user's basis vector ``s_j``:

    r_j = (w^T D s_j) / ||w^T D||

Training with the exp(-r_j) regulariser is replaced by a closed-form embedding:
gradient steps on that loss move ``w`` inside the column space of ``D``, so the
trained layer is modelled as the base weights plus the minimum-norm vector whose
projection is exactly ``s_j``:

    w_j = w0 + beta * D (D^T D)^{-1} s_j + noise
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import check_seed, substream

MAX_BASIS_RETRIES = 8
TARGET_PROJECTION = 0.95


class DegenerateProjectionError(ValueError):
    pass


class TuningError(RuntimeError):
    pass


@dataclass(frozen=True)
class WhiteboxParams:
    """Synthetic layer and user basis.

    ``noise_sigma`` is relative to RMS(w0); ``None`` means 0.05. With
    ``embed_strength=None`` the strength is tuned so every user's own projection
    reaches ``target_projection``. ``lam`` is the training-time regulariser
    weight, kept as metadata only.
    """

    l: int
    p_dim: int
    n_users: int
    embed_strength: float | None = None
    noise_sigma: float | None = None
    target_projection: float = TARGET_PROJECTION
    seed: int = 0
    lam: float = 1.0

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if self.p_dim < self.n_users:
            raise ValueError(f"p_dim={self.p_dim} cannot host {self.n_users} orthogonal user vectors")
        if self.l < self.p_dim:
            raise ValueError(f"l={self.l} must be >= p_dim={self.p_dim}")
        if self.embed_strength is not None and not self.embed_strength > 0:
            raise ValueError("embed_strength must be positive")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 < self.target_projection < 1:
            raise ValueError("target_projection must lie in (0, 1)")
        object.__setattr__(self, "seed", check_seed(self.seed))

    @property
    def relative_noise(self) -> float:
        return 0.05 if self.noise_sigma is None else self.noise_sigma


def generate_basis(p_dim: int, rng: np.random.Generator) -> np.ndarray:
    """(p_dim, p_dim) orthonormal basis; row j is user j's vector.

    QR of a standard normal matrix, with column signs fixed so the result is
    Haar-distributed.
    """
    if p_dim < 1:
        raise ValueError("p_dim must be >= 1")
    for _ in range(MAX_BASIS_RETRIES):
        a = rng.standard_normal((p_dim, p_dim))
        qm, r = np.linalg.qr(a)
        d = np.diag(r)
        if np.min(np.abs(d)) > 1e-10 * np.max(np.abs(d)):
            return (qm * np.sign(d)).T.copy()
    raise np.linalg.LinAlgError(f"could not draw a non-degenerate {p_dim}x{p_dim} matrix")


def _projected(w: np.ndarray, D: np.ndarray) -> tuple[np.ndarray, float]:
    v = w @ D
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateProjectionError("w^T D is the zero vector")
    return v, norm


def projection(w: np.ndarray, D: np.ndarray, s: np.ndarray) -> float:
    v, norm = _projected(w, D)
    return float(v @ s) / norm


def projections(w: np.ndarray, D: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Projection of ``w`` on every row of ``basis`` at once."""
    v, norm = _projected(w, D)
    return basis @ v / norm


def regularizer(w: np.ndarray, D: np.ndarray, s: np.ndarray) -> tuple[float, np.ndarray]:
    """``exp(-r)`` and its gradient with respect to ``w``.

    With v = D^T w and r = v.s / |v|:  dr/dw = D (s - r v/|v|) / |v|.
    """
    v, norm = _projected(w, D)
    r = float(v @ s) / norm
    e = math.exp(-r)
    dr = D @ (s - r * v / norm) / norm
    return e, -e * dr


@dataclass(frozen=True, eq=False)
class WhiteboxEnsemble:
    params: WhiteboxParams
    D: np.ndarray
    basis: np.ndarray
    w0: np.ndarray
    user_weights: np.ndarray
    embed_strength: float
    # minimum-norm aligned directions, one row per user
    directions: np.ndarray = field(repr=False, default=None)

    @property
    def n_users(self) -> int:
        return self.user_weights.shape[0]

    def user_vector(self, j: int) -> np.ndarray:
        return self.basis[j]

    def r(self, w: np.ndarray) -> np.ndarray:
        """Projections of ``w`` on all users' vectors."""
        return projections(w, self.D, self.basis[: self.n_users])


def embed_users(params: WhiteboxParams) -> WhiteboxEnsemble:
    """Build D, the basis and every user's embedded weights from ``params.seed``.

    Strength rule when not given: start at sqrt(l * p_dim) (the typical size of
    ||w0^T D||) and double until the smallest own projection reaches
    ``target_projection``; at most 40 doublings.
    """
    seed = params.seed
    l, p, n = params.l, params.p_dim, params.n_users
    D = substream(seed, "whitebox", "D").standard_normal((l, p))
    basis = generate_basis(p, substream(seed, "whitebox", "basis"))
    w0 = substream(seed, "whitebox", "w0").standard_normal(l)
    noise = substream(seed, "whitebox", "noise").standard_normal((n, l))
    noise *= params.relative_noise * float(np.sqrt(np.mean(w0**2)))

    # D (D^T D)^{-1} s_j for every user: projects exactly onto s_j
    gram = D.T @ D
    directions = np.linalg.solve(gram, basis[:n].T).T @ D.T

    def build(beta):
        return w0[None, :] + beta * directions + noise

    def own_min(weights):
        proj = weights @ D
        own = np.einsum("ij,ij->i", proj, basis[:n]) / np.linalg.norm(proj, axis=1)
        return float(own.min())

    if params.embed_strength is not None:
        beta = float(params.embed_strength)
        weights = build(beta)
    else:
        beta = math.sqrt(l * p)
        for _ in range(40):
            weights = build(beta)
            if own_min(weights) >= params.target_projection:
                break
            beta *= 2.0
        else:
            raise TuningError(f"own projection stayed below {params.target_projection} up to beta={beta:g}")
    weights.setflags(write=False)
    return WhiteboxEnsemble(params, D, basis, w0, weights, beta, directions)


def collude_average(ensemble: WhiteboxEnsemble, colluders) -> np.ndarray:
    colluders = list(colluders)
    if not colluders:
        raise ValueError("collusion must contain at least one user")
    return ensemble.user_weights[colluders].mean(axis=0)


def attack_finetune(w: np.ndarray, sigma_ft: float, rng: np.random.Generator) -> np.ndarray:
    """Fine-tuning proxy: i.i.d. normal perturbation of scale ``sigma_ft * RMS(w)``."""
    if sigma_ft < 0:
        raise ValueError("sigma_ft must be non-negative")
    if sigma_ft == 0:
        return w.copy()
    rms = float(np.sqrt(np.mean(w**2)))
    return w + sigma_ft * rms * rng.standard_normal(w.shape)


def attack_prune(
    w: np.ndarray, fraction: float, mode: str = "smallest-magnitude", rng: np.random.Generator | None = None
) -> np.ndarray:
    """Zero ``fraction`` of the coordinates, the smallest in magnitude or at random."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    out = w.copy()
    k = int(round(fraction * w.size))
    if k == 0:
        return out
    if mode == "smallest-magnitude":
        idx = np.argpartition(np.abs(w), k - 1)[:k]
    elif mode == "random":
        if rng is None:
            raise ValueError("random pruning needs an rng")
        idx = rng.choice(w.size, size=k, replace=False)
    else:
        raise ValueError(f"unknown pruning mode {mode!r}")
    out[idx] = 0.0
    return out


def accuse_whitebox(ensemble: WhiteboxEnsemble, suspect_w: np.ndarray, threshold: float) -> list[tuple[int, float]]:
    """Users whose projection exceeds ``threshold``, highest first."""
    r = ensemble.r(suspect_w)
    hits = np.flatnonzero(r > threshold)
    return sorted(((int(j), float(r[j])) for j in hits), key=lambda jr: (-jr[1], jr[0]))


def default_threshold(c0: int, p_dim: int) -> float:
    """Midpoint between the weakest colluder's expected projection and the innocent 3-sigma band.

    An innocent projection behaves like a random unit-vector coordinate, with
    standard deviation about 1/sqrt(p_dim).
    """
    return 0.5 * (1.0 / math.sqrt(c0) + 3.0 / math.sqrt(p_dim))


# --- persistence ------------------------------------------------------------


def save_ensemble(ensemble: WhiteboxEnsemble, path) -> None:
    """JSON header only; vectors are regenerated from the seed on load."""
    doc = {"format_version": 1, "params": asdict(ensemble.params), "embed_strength": ensemble.embed_strength}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_ensemble(path) -> WhiteboxEnsemble:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported ensemble format_version {doc.get('format_version')!r}")
    params = WhiteboxParams(**doc["params"])
    ens = embed_users(params)
    if not math.isclose(ens.embed_strength, doc["embed_strength"], rel_tol=1e-12):
        raise ValueError("regenerated embedding strength differs from the stored one")
    return ens


def dump_vectors(ensemble: WhiteboxEnsemble, directory) -> list[Path]:
    """Write D, the basis, w0 and user weights as CSV matrices (debugging aid)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mats = {
        "D.csv": ensemble.D,
        "basis.csv": ensemble.basis,
        "w0.csv": ensemble.w0[None, :],
        "user_weights.csv": ensemble.user_weights,
    }
    written = []
    for name, mat in mats.items():
        path = directory / name
        with path.open("w", newline="") as fh:
            csv.writer(fh).writerows(mat.tolist())
        written.append(path)
    return written
