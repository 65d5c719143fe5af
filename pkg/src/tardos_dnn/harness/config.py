"""Experiment configuration: TOML or JSON recipes -> validated dataclasses.

Schema (all sections optional except where noted)::

    name = "baseline"          # experiment name, used for output file names
    seed = 1                   # master seed (unsigned 64-bit)
    trials = 100               # suspect models simulated per run
    n_users = 100

    [tardos]                   # q, m, kappa, c0; tau derived from c0/kappa if absent
    [sprt]                     # eps1, eps2, log_base, use_z_threshold,
                               # correction = "none" | "bonferroni"
    [channel]                  # strategy, preset | ma_violation_rate, skew_rate,
                               # colluders = "sample:<c>" | [j, ...] | "innocent"
    [estimation]               # trials, collusion_size (default c0), nbins, smoothing
    [whitebox]                 # l, p_dim, target_projection, noise_sigma, ...
    [experiments.<name>]       # per-experiment knobs, see experiments.py
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..accusation import DEFAULT_BINS, DEFAULT_SMOOTHING, SprtConfig
from ..channel import PRESETS, STRATEGIES, preset_collusion_size
from ..codebook import TardosParams
from ..rng import check_seed

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


DESK_M = 200
DESK_TRIALS = 100
FULL_M = 1000
FULL_TRIALS = 500
FULL_USERS = 100


@dataclass(frozen=True)
class ChannelConfig:
    strategy: str = "majority"
    preset: str | None = None
    ma_violation_rate: float = 0.0
    skew_rate: float = 0.0
    colluders: str | tuple[int, ...] = "sample:1"

    @property
    def innocent(self) -> bool:
        return self.colluders == "innocent"

    @property
    def collusion_size(self) -> int:
        if self.innocent:
            return 0
        if isinstance(self.colluders, tuple):
            return len(self.colluders)
        return int(self.colluders.split(":", 1)[1])


@dataclass(frozen=True)
class EstimationConfig:
    trials: int = 100
    collusion_size: int | None = None
    nbins: int = DEFAULT_BINS
    smoothing: float = DEFAULT_SMOOTHING


@dataclass(frozen=True)
class WhiteboxConfig:
    l: int = 4096
    p_dim: int = 256
    target_projection: float = 0.999
    noise_sigma: float | None = None
    embed_strength: float | None = None
    collusion_sizes: tuple[int, ...] = (1, 2, 4, 6)
    attacks: tuple[str, ...] = ("none", "finetune", "prune")
    finetune_sigma: float = 0.5
    prune_fraction: float = 0.8
    trials: int = 200
    threshold: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    tardos: TardosParams
    n_users: int
    sprt: SprtConfig
    correction: str
    channel: ChannelConfig
    estimation: EstimationConfig
    trials: int
    seed: int
    whitebox: WhiteboxConfig | None = None
    experiments: dict = field(default_factory=dict)
    out: str = "results"

    @property
    def sprt_effective(self) -> SprtConfig:
        """SPRT thresholds after the configured multiple-testing correction."""
        if self.correction == "bonferroni":
            return self.sprt.for_family(self.n_users)
        return self.sprt

    @property
    def estimation_size(self) -> int:
        return self.estimation.collusion_size or self.tardos.c0

    def to_dict(self) -> dict:
        """Canonical, output-affecting content (no output directory or thread count)."""
        doc = {
            "name": self.name,
            "seed": self.seed,
            "trials": self.trials,
            "n_users": self.n_users,
            "tardos": asdict(self.tardos),
            "sprt": {
                "eps1": self.sprt.eps1,
                "eps2": self.sprt.eps2,
                "log_base": self.sprt.log_base,
                "use_z_threshold": self.sprt.use_z_threshold,
                "correction": self.correction,
            },
            "channel": asdict(self.channel),
            "estimation": asdict(self.estimation),
            "experiments": self.experiments,
        }
        if isinstance(self.channel.colluders, tuple):
            doc["channel"]["colluders"] = list(self.channel.colluders)
        if self.whitebox is not None:
            doc["whitebox"] = asdict(self.whitebox)
        return doc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _section(doc: dict, key: str) -> dict:
    sec = doc.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{key}] must be a table")
    return dict(sec)


def _reject_unknown(sec: dict, allowed: set[str], where: str) -> None:
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")


def _parse_colluders(value) -> str | tuple[int, ...]:
    if isinstance(value, list):
        if not value:
            raise ConfigError("channel.colluders list is empty")
        return tuple(int(j) for j in value)
    if value == "innocent":
        return value
    if isinstance(value, str) and value.startswith("sample:"):
        try:
            c = int(value.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad colluder spec {value!r}") from None
        if c < 1:
            raise ConfigError("sampled collusion size must be >= 1")
        return value
    raise ConfigError(f"channel.colluders must be a list, 'sample:<c>' or 'innocent', got {value!r}")


def parse_config(doc: dict, *, seed: int | None = None, full_scale: bool = False) -> ExperimentConfig:
    """Validate a raw config mapping; every sub-config is checked before any trial runs."""
    doc = copy.deepcopy(doc)
    _reject_unknown(
        doc,
        {"name", "seed", "trials", "n_users", "out", "tardos", "sprt", "channel", "estimation", "whitebox", "experiments"},
        "top level",
    )
    try:
        master = check_seed(seed if seed is not None else doc.get("seed", 0))
        trials = int(doc.get("trials", FULL_TRIALS if full_scale else DESK_TRIALS))
        n_users = int(doc.get("n_users", FULL_USERS))
        if full_scale:
            trials, n_users = FULL_TRIALS, FULL_USERS
        if trials < 1:
            raise ConfigError("trials must be >= 1")
        if n_users < 1:
            raise ConfigError("n_users must be >= 1")

        t = _section(doc, "tardos")
        _reject_unknown(t, {"q", "m", "kappa", "c0", "tau"}, "[tardos]")
        m = FULL_M if full_scale else int(t.get("m", DESK_M))
        tardos = TardosParams(
            q=int(t.get("q", 10)),
            m=m,
            kappa=float(t.get("kappa", 0.1)),
            c0=int(t.get("c0", 6)),
            tau=None if t.get("tau") is None else float(t["tau"]),
            seed=master,
        )

        s = _section(doc, "sprt")
        _reject_unknown(s, {"eps1", "eps2", "log_base", "use_z_threshold", "correction", "a", "b"}, "[sprt]")
        correction = s.pop("correction", "none")
        if correction not in ("none", "bonferroni"):
            raise ConfigError(f"sprt.correction must be 'none' or 'bonferroni', got {correction!r}")
        sprt = SprtConfig(
            eps1=float(s.get("eps1", 1e-6)),
            eps2=float(s.get("eps2", 1e-3)),
            log_base=float(s.get("log_base", 10.0)),
            a=s.get("a"),
            b=s.get("b"),
            use_z_threshold=bool(s.get("use_z_threshold", True)),
        )

        c = _section(doc, "channel")
        _reject_unknown(c, {"strategy", "preset", "ma_violation_rate", "skew_rate", "colluders"}, "[channel]")
        preset = c.get("preset")
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown channel preset {preset!r}; known: {sorted(PRESETS)}")
        if preset is not None and "ma_violation_rate" in c:
            raise ConfigError("give either channel.preset or channel.ma_violation_rate, not both")
        rho = PRESETS[preset] if preset is not None else float(c.get("ma_violation_rate", 0.0))
        default_colluders = f"sample:{preset_collusion_size(preset)}" if preset else "sample:1"
        channel = ChannelConfig(
            strategy=str(c.get("strategy", "majority")),
            preset=preset,
            ma_violation_rate=rho,
            skew_rate=float(c.get("skew_rate", 0.0)),
            colluders=_parse_colluders(c.get("colluders", default_colluders)),
        )
        if channel.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {channel.strategy!r}")
        if not 0 <= rho < 1 or not 0 <= channel.skew_rate < 1 or rho + channel.skew_rate >= 1:
            raise ConfigError("need 0 <= ma_violation_rate, skew_rate and their sum < 1")
        if isinstance(channel.colluders, tuple) and (
            min(channel.colluders) < 0 or max(channel.colluders) >= n_users
        ):
            raise ConfigError("channel.colluders outside 0..n_users-1")
        if channel.collusion_size > n_users:
            raise ConfigError("collusion larger than the user population")

        e = _section(doc, "estimation")
        _reject_unknown(e, {"trials", "collusion_size", "nbins", "smoothing"}, "[estimation]")
        estimation = EstimationConfig(
            trials=int(e.get("trials", 100)),
            collusion_size=None if e.get("collusion_size") is None else int(e["collusion_size"]),
            nbins=int(e.get("nbins", DEFAULT_BINS)),
            smoothing=float(e.get("smoothing", DEFAULT_SMOOTHING)),
        )
        if estimation.trials < 1 or estimation.nbins < 1 or estimation.smoothing <= 0:
            raise ConfigError("estimation needs trials >= 1, nbins >= 1 and smoothing > 0")
        if (estimation.collusion_size or tardos.c0) >= n_users:
            raise ConfigError("estimation collusion size must be below n_users")

        whitebox = None
        if "whitebox" in doc:
            w = _section(doc, "whitebox")
            allowed = set(WhiteboxConfig.__dataclass_fields__)
            _reject_unknown(w, allowed, "[whitebox]")
            for key in ("collusion_sizes", "attacks"):
                if key in w:
                    w[key] = tuple(w[key])
            whitebox = WhiteboxConfig(**w)
            if whitebox.p_dim < n_users or whitebox.l < whitebox.p_dim:
                raise ConfigError("whitebox needs l >= p_dim >= n_users")
            bad = set(whitebox.attacks) - {"none", "finetune", "prune"}
            if bad:
                raise ConfigError(f"unknown whitebox attacks {sorted(bad)}")
            if max(whitebox.collusion_sizes) >= n_users:
                raise ConfigError("whitebox collusion sizes must be below n_users")

        experiments = _section(doc, "experiments")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None

    return ExperimentConfig(
        name=str(doc.get("name", "experiment")),
        tardos=tardos,
        n_users=n_users,
        sprt=sprt,
        correction=correction,
        channel=channel,
        estimation=estimation,
        trials=trials,
        seed=master,
        whitebox=whitebox,
        experiments=experiments,
        out=str(doc.get("out", "results")),
    )


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def load_config(path=None, *, seed: int | None = None, full_scale: bool = False) -> ExperimentConfig:
    doc = read_config_file(path) if path is not None else {}
    return parse_config(doc, seed=seed, full_scale=full_scale)
