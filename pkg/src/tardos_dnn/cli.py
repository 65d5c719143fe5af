"""Command line entry point: ``tardos-dnn <subcommand> [options]``.

Exit status is 0 on success, 1 for usage or configuration errors (including
unreadable or malformed input files) and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .accusation import ScoreDistributions, sequential_accuse
from .codebook import Codebook, MalformedCodebookError, VersionMismatchError, load_codebook, save_codebook
from .harness import experiments as ex
from .harness.config import ConfigError, ExperimentConfig, load_config
from .harness.output import FORMATS, write_result
from .rng import derive_seed
from .whitebox import WhiteboxParams, dump_vectors, embed_users, save_ensemble

log = logging.getLogger("tardos_dnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--out", help="output directory (or file for single-artifact commands)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--format", choices=FORMATS, default="json", help="per-trial record format")
    p.add_argument("--full-scale", action="store_true", help="m=1000, 500 trials, 100 users")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tardos-dnn", description="Tardos traitor tracing for DNN models: simulation harness.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-codebook", help="generate a codebook")
    _common(p)

    p = sub.add_parser("estimate-dists", help="estimate colluder/innocent score distributions")
    _common(p)
    p.add_argument("--codebook", help="codebook JSON (generated from the config when absent)")

    p = sub.add_parser("accuse", help="run the sequential test on a query transcript")
    _common(p)
    p.add_argument("--codebook", required=True)
    p.add_argument("--dists", required=True)
    p.add_argument("--transcript", required=True, help='CSV of "position,symbol" rows, in query order')

    p = sub.add_parser("simulate", help="Monte Carlo accusation runs")
    _common(p)
    p.add_argument("--codebook")
    p.add_argument("--dists")

    for name, help_ in (
        ("sweep-kappa", "t* per concentration parameter"),
        ("trigger-skew", "t* per trigger type"),
        ("ma-table", "measured violation rate per channel preset"),
        ("baseline-compare", "shared triggers versus independent per-user triggers"),
    ):
        _common(sub.add_parser(name, help=help_))

    p = sub.add_parser("whitebox", help="projection statistics of the orthogonal-code scheme")
    _common(p)
    p.add_argument("--dump-vectors", metavar="DIR", help="also write D, basis and weights as CSV")
    return parser


# --- helpers ------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return load_config(args.config, seed=args.seed, full_scale=args.full_scale)


def _out_dir(args, config: ExperimentConfig) -> Path:
    return Path(args.out if args.out else config.out)


def _out_file(args, config: ExperimentConfig, default_name: str) -> Path:
    if args.out and args.out.endswith(".json"):
        return Path(args.out)
    return _out_dir(args, config) / default_name


def _read_codebook(path) -> Codebook:
    try:
        return load_codebook(path)
    except OSError as exc:
        raise ConfigError(f"cannot read codebook {path}: {exc}") from None


def _read_dists(path) -> ScoreDistributions:
    try:
        return ScoreDistributions.from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise ConfigError(f"cannot read distributions {path}: {exc}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed distributions file {path}: {exc}") from None


def read_transcript(path) -> list[tuple[int, int]]:
    """``position,symbol`` rows; a header row and ``#`` comments are skipped."""
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read transcript {path}: {exc}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "position":
                continue
            if len(row) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'position,symbol'")
            try:
                rows.append((int(row[0]), int(row[1])))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-integer entry") from None
    return rows


def _print(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


# --- commands -----------------------------------------------------------------


def cmd_gen_codebook(args) -> int:
    config = _config(args)
    cb = ex.build_codebook(config)
    path = _out_file(args, config, "codebook.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_codebook(cb, path)
    log.info("wrote %s", path)
    return 0


def cmd_estimate_dists(args) -> int:
    config = _config(args)
    cb = _read_codebook(args.codebook) if args.codebook else ex.build_codebook(config)
    template = ex.channel_template(config, cb)
    dists = ex.estimate_for(config, cb, template, "simulate", args.threads)
    path = _out_file(args, config, "dists.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dists.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)
    return 0


def cmd_accuse(args) -> int:
    config = _config(args)
    cb = _read_codebook(args.codebook)
    dists = _read_dists(args.dists)
    rows = read_transcript(args.transcript)
    answers = {}
    for pos, sym in rows:
        if not 0 <= pos < cb.m or not 0 <= sym < cb.q:
            raise ConfigError(f"transcript entry ({pos}, {sym}) outside the codebook")
        if pos in answers:
            raise ConfigError(f"transcript repeats position {pos}")
        answers[pos] = sym
    res = sequential_accuse(cb, dists, config.sprt_effective, answers.__getitem__, query_order=[p for p, _ in rows])
    doc = {
        "decision": res.decision,
        "accused": list(res.accused),
        "t_star": res.t_star,
        "queries_used": res.state.t,
        "W": {str(j): float(res.state.W[j]) for j in res.accused},
    }
    _print(doc)
    if args.out:
        path = _out_file(args, config, "accusation.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_simulate(args) -> int:
    config = _config(args)
    cb = _read_codebook(args.codebook) if args.codebook else None
    if cb is not None and (cb.n_users != config.n_users):
        raise ConfigError(f"codebook has {cb.n_users} users, config says {config.n_users}")
    dists = _read_dists(args.dists) if args.dists else None
    result = ex.run_experiment(config, workers=args.threads, codebook=cb, dists=dists)
    return _finish(args, config, result)


def _finish(args, config, result) -> int:
    paths = write_result(result, _out_dir(args, config), args.format)
    for p in paths:
        log.info("wrote %s", p)
    summary = getattr(result, "aggregates", None) or result.summary
    _print({"name": result.name, "summary": summary})
    return 0


def cmd_sweep_kappa(args) -> int:
    config = _config(args)
    return _finish(args, config, ex.experiment_kappa_sweep(config, workers=args.threads))


def cmd_trigger_skew(args) -> int:
    config = _config(args)
    return _finish(args, config, ex.experiment_trigger_skew(config, workers=args.threads))


def cmd_ma_table(args) -> int:
    config = _config(args)
    return _finish(args, config, ex.experiment_ma_table(config, workers=args.threads))


def cmd_baseline_compare(args) -> int:
    config = _config(args)
    return _finish(args, config, ex.experiment_baseline_comparison(config, workers=args.threads))


def cmd_whitebox(args) -> int:
    config = _config(args)
    if config.whitebox is None:
        raise ConfigError("the whitebox command needs a [whitebox] section in the config")
    result = ex.experiment_whitebox(config, workers=args.threads)
    if args.dump_vectors:
        wb = config.whitebox
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
        dump_vectors(ens, args.dump_vectors)
        save_ensemble(ens, Path(args.dump_vectors) / "ensemble.json")
    return _finish(args, config, result)


COMMANDS = {
    "gen-codebook": cmd_gen_codebook,
    "estimate-dists": cmd_estimate_dists,
    "accuse": cmd_accuse,
    "simulate": cmd_simulate,
    "sweep-kappa": cmd_sweep_kappa,
    "trigger-skew": cmd_trigger_skew,
    "whitebox": cmd_whitebox,
    "ma-table": cmd_ma_table,
    "baseline-compare": cmd_baseline_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MalformedCodebookError, VersionMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
