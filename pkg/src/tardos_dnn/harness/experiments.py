"""Monte Carlo experiments over codebook, channel, accusation and whitebox.

Trial ``k`` of an experiment draws its collusion, its model answers and its
query order from streams keyed by (master seed, experiment tag, k), so results
are identical for any number of worker threads.
"""

from __future__ import annotations

import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .. import __version__
from ..accusation import (
    ScoreDistributions,
    SprtConfig,
    accuse_answers,
    baseline_min_queries,
    estimate_score_distributions,
)
from ..channel import (
    PRESETS,
    TRIGGER_SKEW,
    ChannelSpec,
    count_ma_violations,
    make_innocent_oracle,
    make_oracle,
    preset_collusion_size,
    random_true_labels,
)
from ..codebook import Codebook, TardosParams, derive_tau, generate_codebook
from ..rng import derive_seed, substream
from ..whitebox import (
    WhiteboxParams,
    accuse_whitebox,
    attack_finetune,
    attack_prune,
    collude_average,
    default_threshold,
    embed_users,
)
from .config import ExperimentConfig


class TrialError(RuntimeError):
    def __init__(self, trial: int, exc: Exception):
        super().__init__(f"trial {trial} failed: {exc}")
        self.trial = trial


@dataclass
class ExperimentResult:
    name: str
    records: list[dict]
    aggregates: dict
    provenance: dict


@dataclass
class SweepResult:
    """Several labelled runs plus a cross-run summary."""

    name: str
    runs: dict[str, ExperimentResult]
    summary: dict
    provenance: dict


@dataclass
class TableResult:
    name: str
    rows: list[dict]
    summary: dict
    provenance: dict
    histograms: list[dict] = field(default_factory=list)


def provenance(config: ExperimentConfig) -> dict:
    return {"tool": "tardos_dnn", "version": __version__, "config_sha256": config.config_hash(), "seed": config.seed}


# --- aggregation --------------------------------------------------------------


def aggregate(records: list[dict], m: int, guilty: bool) -> dict:
    """Summary statistics; a pure function of the per-trial records."""
    decisions = {"accused": 0, "exonerated": 0, "undecided": 0}
    hist: dict[int, int] = {}
    decided = []
    for r in records:
        decisions[r["decision"]] += 1
        if r["decision"] != "undecided":
            decided.append(r["t_star"])
            hist[r["t_star"]] = hist.get(r["t_star"], 0) + 1
    exonerated = [r["t_star"] for r in records if r["decision"] == "exonerated"]
    n = len(records)
    out = {
        "n_trials": n,
        "m": m,
        "decisions": decisions,
        "t_star_histogram": {str(k): hist[k] for k in sorted(hist)},
        "t_star_mean": statistics.fmean(decided) if decided else None,
        "t_star_median": statistics.median(decided) if decided else None,
        "t_star_max": max(decided) if decided else None,
        "exonerated_t_star_mean": statistics.fmean(exonerated) if exonerated else None,
        "false_positive_rate": sum(r["false_accusation"] for r in records) / n,
    }
    if guilty:
        out["false_negative_rate"] = sum(not r["caught"] for r in records) / n
        out["queries_total_mean"] = statistics.fmean(r["t_star"] for r in records)
    return out


def t_star_histogram_rows(result: ExperimentResult) -> list[tuple[int, int]]:
    return [(int(k), v) for k, v in result.aggregates["t_star_histogram"].items()]


# --- black-box runs -------------------------------------------------------------


@dataclass(frozen=True)
class BlackboxSetup:
    codebook: Codebook
    dists: ScoreDistributions
    sprt: SprtConfig
    channel: ChannelSpec | None  # template; None for innocent models
    collusion: str | tuple[int, ...]  # "sample:c", fixed tuple or "innocent"
    seed: int
    tag: str


def build_codebook(config: ExperimentConfig, params: TardosParams | None = None) -> Codebook:
    return generate_codebook(params or config.tardos, config.n_users)


def channel_template(config: ExperimentConfig, codebook: Codebook, **overrides) -> ChannelSpec:
    ch = config.channel
    skew = overrides.get("skew_rate", ch.skew_rate)
    labels = random_true_labels(codebook.q, codebook.m, derive_seed(config.seed, "true-labels")) if skew > 0 else None
    return ChannelSpec(
        colluders=(0,),
        strategy=overrides.get("strategy", ch.strategy),
        ma_violation_rate=overrides.get("ma_violation_rate", ch.ma_violation_rate),
        skew_rate=skew,
        true_labels=labels,
        seed=0,
    )


def estimate_for(
    config: ExperimentConfig, codebook: Codebook, template: ChannelSpec, tag: str, workers: int = 1
) -> ScoreDistributions:
    est = config.estimation
    return estimate_score_distributions(
        codebook,
        template,
        config.estimation_size,
        est.trials,
        derive_seed(config.seed, "estimate", tag),
        nbins=est.nbins,
        smoothing=est.smoothing,
        workers=workers,
    )


def run_trial(setup: BlackboxSetup, trial: int) -> dict:
    cb = setup.codebook
    key = (setup.seed, setup.tag, trial)
    if setup.collusion == "innocent":
        colluders: tuple[int, ...] = ()
        answers = make_innocent_oracle(cb, derive_seed(*key, "model")).answers
    else:
        if isinstance(setup.collusion, tuple):
            colluders = setup.collusion
        else:
            c = int(setup.collusion.split(":", 1)[1])
            rng = substream(*key, "collusion")
            colluders = tuple(int(j) for j in np.sort(rng.choice(cb.n_users, size=c, replace=False)))
        spec = setup.channel.with_colluders(colluders, seed=derive_seed(*key, "channel"))
        answers = make_oracle(spec, cb).answers
    res = accuse_answers(cb, setup.dists, setup.sprt, answers, seed=derive_seed(*key, "order"))
    accused = list(res.accused)
    return {
        "trial": trial,
        "decision": res.decision,
        "t_star": res.t_star if res.t_star is not None else cb.m,
        "accused": accused,
        "colluders": list(colluders),
        "caught": bool(set(accused) & set(colluders)),
        "false_accusation": bool(set(accused) - set(colluders)),
        "w_max": float(res.state.W.max()),
        "s_max": float(res.state.S.max()),
    }


def run_trials(setup: BlackboxSetup, trials: int, workers: int = 1) -> list[dict]:
    def one(k):
        try:
            return run_trial(setup, k)
        except Exception as exc:
            raise TrialError(k, exc) from exc

    if workers <= 1:
        return [one(k) for k in range(trials)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, range(trials)))


def _setup(config, codebook, dists, template, collusion, tag) -> BlackboxSetup:
    return BlackboxSetup(codebook, dists, config.sprt_effective, template, collusion, config.seed, tag)


def run_experiment(
    config: ExperimentConfig,
    workers: int = 1,
    codebook: Codebook | None = None,
    dists: ScoreDistributions | None = None,
) -> ExperimentResult:
    """``config.trials`` suspect models through the configured channel, each accused sequentially."""
    codebook = codebook or build_codebook(config)
    template = channel_template(config, codebook)
    dists = dists or estimate_for(config, codebook, template, "simulate", workers)
    setup = _setup(config, codebook, dists, template, config.channel.colluders, "simulate")
    records = run_trials(setup, config.trials, workers)
    guilty = config.channel.colluders != "innocent"
    return ExperimentResult(config.name, records, aggregate(records, codebook.m, guilty), provenance(config))


# --- named experiments -------------------------------------------------------------


def experiment_baseline_comparison(config: ExperimentConfig, workers: int = 1) -> SweepResult:
    """Shared-trigger SPRT versus independent per-user triggers.

    The baseline needs ``baseline_min_queries`` all-correct answers per user and
    must query every user, so its total is ``n_users`` times that; shared
    triggers need ``t*`` queries in total.
    """
    opts = config.experiments.get("baseline", {})
    sizes = tuple(opts.get("collusion_sizes", (1, 2, 6)))
    p_random = float(opts.get("p_random", 1.0 / config.tardos.q))
    sprt = config.sprt_effective
    per_user = baseline_min_queries(sprt.eps1, p_random)
    baseline_total = per_user * config.n_users

    codebook = build_codebook(config)
    runs = {}
    summary = {
        "baseline_per_user_t_star": per_user,
        "baseline_total_queries": baseline_total,
        "p_random": p_random,
        "n_users": config.n_users,
        "by_collusion_size": {},
    }
    template = channel_template(config, codebook)
    dists = estimate_for(config, codebook, template, "baseline", workers)
    for c in sizes:
        label = f"c{c}"
        setup = _setup(config, codebook, dists, template, f"sample:{c}", f"baseline-{label}")
        records = run_trials(setup, config.trials, workers)
        res = ExperimentResult(f"{config.name}_baseline_{label}", records, aggregate(records, codebook.m, True), provenance(config))
        runs[label] = res
        totals = [r["t_star"] for r in records]
        summary["by_collusion_size"][label] = {
            "proposed_t_star_mean": statistics.fmean(totals),
            "proposed_t_star_max": max(totals),
            "proposed_total_below_baseline_every_trial": all(t < baseline_total for t in totals),
            "baseline_t_star_per_user": per_user,
        }
    return SweepResult(f"{config.name}_baseline", runs, summary, provenance(config))


def experiment_kappa_sweep(config: ExperimentConfig, kappa_values=None, workers: int = 1) -> SweepResult:
    """t* per concentration parameter, per channel preset, plus innocent exoneration.

    The cutoff is held fixed across the sweep: the configured ``tau`` if given,
    else the value optimised for kappa = 1/q (large kappa would otherwise push
    it past 1/q).
    """
    opts = config.experiments.get("kappa_sweep", {})
    kappas = tuple(kappa_values if kappa_values is not None else opts.get("kappas", (0.1, 100.0)))
    if not kappas:
        raise ValueError("need at least one kappa value")
    presets = tuple(opts.get("presets", ("c2/no-attack", "c6/no-attack", "c2/fine-tune", "c6/prune")))
    innocent = bool(opts.get("include_innocent", True))
    tau = opts.get("tau") or (config.tardos.tau if _tau_given(config) else derive_tau(config.tardos.c0, 1.0 / config.tardos.q))

    runs = {}
    summary: dict = {"tau": tau, "kappas": list(kappas), "median_t_star": {}, "innocent_t_star_mean": {}}
    for kappa in kappas:
        params = replace(config.tardos, kappa=float(kappa), tau=float(tau))
        codebook = build_codebook(config, params)
        klabel = f"kappa={kappa:g}"
        summary["median_t_star"][klabel] = {}
        for name in presets:
            template = channel_template(config, codebook, ma_violation_rate=PRESETS[name])
            dists = estimate_for(config, codebook, template, f"kappa-{kappa:g}-{name}", workers)
            c = preset_collusion_size(name)
            tag = f"kappa-{kappa:g}-{name}"
            records = run_trials(_setup(config, codebook, dists, template, f"sample:{c}", tag), config.trials, workers)
            label = f"{klabel}_{name}"
            runs[label] = ExperimentResult(label, records, aggregate(records, codebook.m, True), provenance(config))
            summary["median_t_star"][klabel][name] = statistics.median(r["t_star"] for r in records)
        if innocent:
            template = channel_template(config, codebook)
            dists = estimate_for(config, codebook, template, f"kappa-{kappa:g}-innocent", workers)
            tag = f"kappa-{kappa:g}-innocent"
            records = run_trials(_setup(config, codebook, dists, None, "innocent", tag), config.trials, workers)
            label = f"{klabel}_innocent"
            agg = aggregate(records, codebook.m, False)
            runs[label] = ExperimentResult(label, records, agg, provenance(config))
            summary["innocent_t_star_mean"][klabel] = agg["t_star_mean"]
    return SweepResult(f"{config.name}_kappa_sweep", runs, summary, provenance(config))


def _tau_given(config: ExperimentConfig) -> bool:
    return config.tardos.tau != derive_tau(config.tardos.c0, config.tardos.kappa)


def experiment_trigger_skew(config: ExperimentConfig, skew_presets: dict | None = None, workers: int = 1) -> SweepResult:
    """t* per trigger type, modelled as the rate at which answers fall back to the main-task label."""
    opts = config.experiments.get("trigger_skew", {})
    skews = dict(skew_presets if skew_presets is not None else opts.get("skews", TRIGGER_SKEW))
    collusion = opts.get("colluders", config.channel.colluders if config.channel.collusion_size > 1 else "sample:2")
    codebook = build_codebook(config)
    runs = {}
    medians = {}
    for label, sigma in skews.items():
        sigma = float(sigma)
        if config.channel.ma_violation_rate + sigma >= 1:
            raise ValueError(f"skew {label}={sigma} plus ma_violation_rate reaches 1")
        template = channel_template(config, codebook, skew_rate=sigma)
        # zero skew shares the plain simulation's streams, so it reproduces that run
        tag = "simulate" if sigma == 0 else f"skew-{label}"
        dists = estimate_for(config, codebook, template, tag, workers)
        records = run_trials(_setup(config, codebook, dists, template, collusion, tag), config.trials, workers)
        runs[label] = ExperimentResult(label, records, aggregate(records, codebook.m, True), provenance(config))
        medians[label] = statistics.median(r["t_star"] for r in records)
    ordered = [medians[k] for k in sorted(skews, key=lambda k: float(skews[k]))]
    summary = {
        "skew_rates": {k: float(v) for k, v in skews.items()},
        "median_t_star": medians,
        "monotone_in_skew": all(a <= b for a, b in zip(ordered, ordered[1:])),
    }
    return SweepResult(f"{config.name}_trigger_skew", runs, summary, provenance(config))


def experiment_ma_table(config: ExperimentConfig, presets=None, workers: int = 1) -> TableResult:
    """Measured violation rate per preset against its configured rate (3-sigma binomial band)."""
    opts = config.experiments.get("ma_table", {})
    names = tuple(presets if presets is not None else opts.get("presets", tuple(PRESETS)))
    extra = dict(opts.get("custom", {}))
    passes = int(opts.get("passes", 5))
    collusions = int(opts.get("collusions", 20))
    codebook = build_codebook(config)
    targets = [(n, PRESETS[n], preset_collusion_size(n)) for n in names]
    targets += [(n, float(v), int(config.channel.collusion_size or 2)) for n, v in extra.items()]

    def measure(item):
        name, rho, c = item
        viol = elig = 0
        for k in range(collusions):
            rng = substream(config.seed, "ma-table", name, k)
            colluders = tuple(int(j) for j in rng.choice(codebook.n_users, size=c, replace=False))
            spec = ChannelSpec(colluders, strategy=config.channel.strategy, ma_violation_rate=rho)
            v, e = count_ma_violations(spec, codebook, passes, rng)
            viol += v
            elig += e
        rate = viol / elig if elig else 0.0
        sigma = math.sqrt(rho * (1 - rho) / elig) if elig else 0.0
        ok = rate == 0.0 if rho == 0 else abs(rate - rho) <= 3 * sigma
        return {
            "preset": name,
            "collusion_size": c,
            "configured_rate": rho,
            "measured_rate": rate,
            "violations": viol,
            "eligible": elig,
            "sigma": sigma,
            "within_3_sigma": ok,
        }

    if workers <= 1:
        rows = [measure(t) for t in targets]
    else:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(measure, targets))
    summary = {"all_within_3_sigma": all(r["within_3_sigma"] for r in rows), "passes": passes, "collusions": collusions}
    return TableResult(f"{config.name}_ma_table", rows, summary, provenance(config))


def experiment_whitebox(config: ExperimentConfig, workers: int = 1) -> TableResult:
    """Projection statistics per collusion size and attack, with the expected 1/sqrt(c) means."""
    wb = config.whitebox
    if wb is None:
        raise ValueError("whitebox experiment needs a [whitebox] section")
    params = WhiteboxParams(
        l=wb.l,
        p_dim=wb.p_dim,
        n_users=config.n_users,
        embed_strength=wb.embed_strength,
        noise_sigma=wb.noise_sigma,
        target_projection=wb.target_projection,
        seed=derive_seed(config.seed, "whitebox"),
    )
    ens = embed_users(params)
    c0 = max(wb.collusion_sizes)
    threshold = wb.threshold if wb.threshold is not None else default_threshold(c0, wb.p_dim)
    edges = np.linspace(-0.2, 1.0, 121)

    def condition(item):
        c, attack = item
        col_r, inn_r = [], []
        misses = false_acc = 0
        for k in range(wb.trials):
            rng = substream(config.seed, "whitebox-trial", c, attack, k)
            colluders = rng.choice(config.n_users, size=c, replace=False)
            w = collude_average(ens, colluders)
            if attack == "finetune":
                w = attack_finetune(w, wb.finetune_sigma, rng)
            elif attack == "prune":
                w = attack_prune(w, wb.prune_fraction)
            r = ens.r(w)
            mask = np.zeros(config.n_users, dtype=bool)
            mask[colluders] = True
            col_r.append(r[mask])
            inn_r.append(r[~mask])
            accused = {j for j, _ in accuse_whitebox(ens, w, threshold)}
            misses += len(set(colluders.tolist()) - accused)
            false_acc += len(accused - set(colluders.tolist()))
        col_r = np.concatenate(col_r)
        inn_r = np.concatenate(inn_r)
        inn_std = float(inn_r.std())
        expected = 1.0 / math.sqrt(c)
        row = {
            "collusion_size": c,
            "attack": attack,
            "colluder_mean_r": float(col_r.mean()),
            "colluder_std_r": float(col_r.std()),
            "innocent_mean_r": float(inn_r.mean()),
            "innocent_std_r": inn_std,
            "expected_colluder_r": expected,
            "relative_error": abs(float(col_r.mean()) - expected) / expected,
            "separation_sigmas": (float(col_r.mean()) - float(inn_r.mean())) / inn_std if inn_std > 0 else math.inf,
            "threshold": threshold,
            "missed_colluders": misses,
            "false_accusations": false_acc,
        }
        hists = [
            {"collusion_size": c, "attack": attack, "group": g, "counts": np.histogram(v, edges)[0].tolist()}
            for g, v in (("colluder", col_r), ("innocent", inn_r))
        ]
        return row, hists

    items = [(c, a) for a in wb.attacks for c in wb.collusion_sizes]
    if workers <= 1:
        out = [condition(it) for it in items]
    else:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(condition, items))
    rows = [o[0] for o in out]
    hists = [h for o in out for h in o[1]]
    clean = [r for r in rows if r["attack"] == "none"]
    summary = {
        "embed_strength": ens.embed_strength,
        "threshold": threshold,
        "hist_edges": edges.tolist(),
        "eq9_colluder_within_5pct": all(r["relative_error"] <= 0.05 for r in clean),
        "innocent_mean_within_0.02": all(abs(r["innocent_mean_r"]) <= 0.02 for r in rows),
        "clean_catch_all": all(r["missed_colluders"] == 0 and r["false_accusations"] == 0 for r in clean),
    }
    return TableResult(f"{config.name}_whitebox", rows, summary, provenance(config), hists)
