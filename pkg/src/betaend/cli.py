"""Command-line entry point: ``betaend {simulate,cluster,fit,evaluate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Settings resolve as built-in defaults < ``--config`` JSON file < flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import bursts, evaluation, ingest, io, synthgen
from .estimation import (
    BETAEND,
    FITTERS,
    LOGISTIC,
    FitConfig,
    FitResult,
    config_hash,
    event_table,
    negative_log_likelihood,
    predict,
    split_users,
)
from .simplex import SimplexConfig

log = logging.getLogger("betaend")


class UsageError(Exception):
    """Bad configuration or input path; exit code 2."""


@dataclass
class RunConfig:
    out_dir: str = "."
    seed: int = 0
    threads: int = 1
    threshold: float = bursts.DEFAULT_THRESHOLD
    sweep: tuple[float, ...] = (2 * 3600, 4 * 3600, 6 * 3600, 8 * 3600, 12 * 3600, 24 * 3600)
    histogram_bins: int = 50
    train_fraction: float = 0.8
    tol: float = 1e-8
    restarts: int = 5
    max_evals: int = 200_000
    initial_step: float = 0.5
    initial_beta: float = 0.5
    default_e_c: float | None = None
    singleton_prior: float = ingest.JEFFREYS
    n_bins: int = 20
    age_edges: tuple[int, ...] = evaluation.AGE_EDGES
    min_cohort_certificates: int = evaluation.MIN_COHORT_CERTIFICATES
    model: str = "both"
    delimiter: str = ","

    def validate(self):
        if not 0 < self.train_fraction < 1:
            raise UsageError(f"train_fraction must lie strictly inside (0, 1), got {self.train_fraction}")
        if self.threshold <= 0 or any(t <= 0 for t in self.sweep):
            raise UsageError("thresholds must be positive")
        if self.model not in ("betaend", "logistic", "both"):
            raise UsageError(f"model must be betaend, logistic or both, got {self.model!r}")
        if self.n_bins < 1 or self.histogram_bins < 1:
            raise UsageError("bin counts must be >= 1")
        if self.threads < 1 or self.restarts < 0 or self.max_evals < 1 or not self.tol > 0:
            raise UsageError("threads, restarts, max_evals and tol must be positive")
        if not self.singleton_prior > 0:
            raise UsageError("singleton_prior must be positive")
        if self.default_e_c is not None and not self.default_e_c > 0:
            raise UsageError("default_e_c must be positive")
        return self

    @property
    def models(self):
        return (BETAEND, LOGISTIC) if self.model == "both" else (self.model,)

    def fit_config(self) -> FitConfig:
        opt = SimplexConfig(
            tol=self.tol, max_evals=self.max_evals, restarts=self.restarts, initial_step=self.initial_step, seed=self.seed
        )
        return FitConfig(opt, self.initial_beta, self.default_e_c, singleton_prior=self.singleton_prior)


def resolve_config(args) -> RunConfig:
    settings = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            settings = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    known = {f.name for f in fields(RunConfig)}
    unknown = set(settings) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for name in known:
        if getattr(args, name, None) is not None:
            settings[name] = getattr(args, name)
    for key in ("threshold",):
        if isinstance(settings.get(key), str):
            settings[key] = bursts.parse_duration(settings[key])
    if isinstance(settings.get("sweep"), str):
        settings["sweep"] = tuple(bursts.parse_duration(t) for t in settings["sweep"].split(",") if t.strip())
    for key in ("sweep", "age_edges"):
        if key in settings:
            settings[key] = tuple(settings[key])
    return RunConfig(**settings).validate()


def load_events(path, cfg: RunConfig):
    """Parse, report rejections and deduplicate an event table."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"cannot read events file: {path}")
    if path.stat().st_size == 0:
        return [], []
    with path.open(newline="") as fh:
        try:
            events, rejections = ingest.parse_events(fh, ingest.Schema(delimiter=cfg.delimiter))
        except ingest.SchemaError as exc:
            raise UsageError(str(exc)) from None
    if rejections:
        log.warning("%d rows rejected (first: line %d, %s)", len(rejections), rejections[0].line, rejections[0].reason)
    n_raw = len(events)
    events = ingest.deduplicate(events)
    log.info("events: %d parsed, %d after deduplication", n_raw, len(events))
    return events, rejections


def _write_rejections(rejections, out: Path, cfg):
    if rejections:
        rows = [{"line": r.line, "reason": r.reason} for r in rejections]
        io.atomic_write(out / "rejections.csv", io.rows_to_csv(rows, ["line", "reason"], cfg.delimiter))


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    if args.generator_config:
        path = Path(args.generator_config)
        if not path.is_file():
            raise UsageError(f"generator config not found: {path}")
        gen = synthgen.GeneratorConfig.from_dict(json.loads(path.read_text()))
    else:
        if args.preset not in synthgen.PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; available: {', '.join(sorted(synthgen.PRESETS))}")
        gen = synthgen.PRESETS[args.preset]()
    overrides = {"seed": cfg.seed}
    if args.n_users is not None:
        overrides["n_users"] = args.n_users
    gen = synthgen.GeneratorConfig.from_dict(gen.to_dict() | overrides)
    try:
        events, truth = synthgen.generate(gen)
    except synthgen.ConfigError as exc:
        raise UsageError(str(exc)) from None
    import io as _io

    buf = _io.StringIO()
    ingest.write_events(events, buf, cfg.delimiter)
    io.atomic_write(out / "events.csv", buf.getvalue())
    io.atomic_write(out / "ground_truth.json", truth.to_json(events) + "\n")
    users = len({e.user_id for e in events})
    rate = float(np.mean([e.certified for e in events])) if events else float("nan")
    print(f"users={users} events={len(events)} raw_certificate_rate={rate:.4f}")
    return 0


def cmd_cluster(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    events, rejections = load_events(args.events, cfg)
    _write_rejections(rejections, out, cfg)
    profiles = ingest.group_by_user(events)
    bursts.assign_bursts(profiles, cfg.threshold)
    import io as _io

    buf = _io.StringIO()
    n_rows = bursts.write_assignments(profiles, buf, cfg.delimiter)
    io.atomic_write(out / "bursts.csv", buf.getvalue())
    hist = bursts.gap_histogram(profiles, cfg.histogram_bins)
    io.write_table(
        out / "gap_histogram",
        [
            {"bin": i + 1, "lower_s": lo, "upper_s": hi, "count": int(c)}
            for i, (lo, hi, c) in enumerate(zip(hist.edges[:-1], hist.edges[1:], hist.counts))
        ],
        ["bin", "lower_s", "upper_s", "count"],
        cfg.delimiter,
    )
    sweep = bursts.threshold_sweep(profiles, cfg.sweep)
    io.write_table(
        out / "threshold_sweep",
        [{"threshold_s": t, "threshold_h": t / 3600, "total_bursts": n} for t, n in sweep],
        ["threshold_s", "threshold_h", "total_bursts"],
        cfg.delimiter,
    )
    number, size = bursts.burst_metrics(profiles)
    metrics = {}
    for name, table in (("burst_number", number), ("burst_size", size)):
        io.write_table(out / name, [{"value": k, "frequency": v} for k, v in table.items()], ["value", "frequency"], cfg.delimiter)
        try:
            fit = bursts.fit_curved_powerlaw(table)
            metrics[name] = {"a": fit.a, "b": fit.b, "c": fit.c, "ci95": fit.ci, "rss": fit.rss, "n_points": fit.n_points}
        except bursts.InsufficientDataError as exc:
            metrics[name] = {"error": str(exc)}
    io.write_json(out / "burst_powerlaw.json", metrics)
    log.info("clustered %d registrations into %d bursts at %.0f s", n_rows, sum(len(p.bursts) for p in profiles.values()), cfg.threshold)
    return 0


def _prepare(events, cfg: RunConfig, seed, train_fraction, threshold):
    profiles = ingest.group_by_user(events)
    bursts.assign_bursts(profiles, threshold)
    cert = ingest.certificate_courses(events)
    split = split_users(profiles, seed, train_fraction)
    return profiles, cert, split


def cmd_fit(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    events, rejections = load_events(args.events, cfg)
    _write_rejections(rejections, out, cfg)
    if not events:
        raise UsageError("no events to fit")
    profiles, cert, split = _prepare(events, cfg, cfg.seed, cfg.train_fraction, cfg.threshold)
    train_users = split.train
    records = ingest.course_records(profiles, cert, train_users, cfg.singleton_prior)
    table = event_table(profiles, train_users)
    n_cert_events = sum(1 for e in events if e.course_id in cert)
    n_train_cert = int(np.isin(table.course_id, list(cert)).sum())
    log.info(
        "filter chain: %d deduplicated events -> %d in %d certificate-offering courses -> %d training events (%d users)",
        len(events), n_cert_events, len(cert), n_train_cert, len(train_users),
    )
    meta = {
        "split": {"seed": cfg.seed, "train_fraction": cfg.train_fraction},
        "threshold": cfg.threshold,
        "certificate_courses": sorted(cert),
    }
    fit_cfg = cfg.fit_config()

    def run(model):
        return FITTERS[model](table, records, fit_cfg, seed=cfg.seed, meta=meta)

    if cfg.threads > 1 and len(cfg.models) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run, cfg.models))
    else:
        results = [run(m) for m in cfg.models]
    for res in results:
        if res.degenerate:
            log.warning("%s fit is degenerate: difficulties are not identifiable from this data", res.model)
        if not res.converged:
            log.warning("%s fit stopped at the evaluation cap without converging", res.model)
        io.atomic_write(out / f"fit_{res.model}.json", res.to_json() + "\n")
        shape = f"beta={res.params.beta:.4f}" if res.model == BETAEND else f"gamma={res.params.gamma:.4f}"
        print(f"{res.model}: {shape} nll={res.nll:.3f} evals={res.n_evaluations} converged={res.converged} degenerate={res.degenerate}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    fits = []
    for path in args.fit:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"cannot read fit result: {p}")
        try:
            fits.append(FitResult.from_json(p.read_text()))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"malformed fit result {p}: {exc}") from None
    if len({f.model for f in fits}) != len(fits):
        raise UsageError("at most one fit result per model")
    splits = {json.dumps(f.config.get("split"), sort_keys=True) for f in fits}
    if len(splits) != 1 or not fits[0].config.get("split"):
        raise UsageError("fit results must share one recorded train/test split")
    split_cfg = fits[0].config["split"]
    if not 0 < split_cfg["train_fraction"] < 1:
        raise UsageError("recorded train_fraction leaves an empty test split")
    threshold = fits[0].config.get("threshold", cfg.threshold)
    events, rejections = load_events(args.events, cfg)
    if not events:
        raise UsageError("no events to evaluate")
    profiles, cert, split = _prepare(events, cfg, split_cfg["seed"], split_cfg["train_fraction"], threshold)
    for f in fits:
        unknown = sorted(cert - set(f.courses))
        if unknown:
            raise UsageError(f"{len(unknown)} certificate course(s) absent from the {f.model} fit: {', '.join(unknown[:20])}")
    test_users = split.test
    if not test_users:
        raise UsageError("test split is empty")
    table = event_table(profiles, test_users)
    scored = {f.model: predict(f, table, cert_courses=set(fits[0].courses)) for f in fits}
    models = "-".join(scored)
    tag = config_hash({"fits": [f.config_hash for f in fits], "n_bins": cfg.n_bins, "age_edges": cfg.age_edges,
                       "min_cert": cfg.min_cohort_certificates, "prior": cfg.singleton_prior})
    stem = lambda name: out / f"{name}_{models}_{tag}"  # noqa: E731

    calib = {m: evaluation.calibration_table(s, cfg.n_bins) for m, s in scored.items()}
    io.write_table(stem("calibration"), evaluation.calibration_rows(calib), delimiter=cfg.delimiter)

    singles = ingest.course_records(profiles, cert, test_users, cfg.singleton_prior)
    cohorts = evaluation.cohort_table(scored, singles, cfg.min_cohort_certificates)
    io.write_table(stem("cohorts"), evaluation.cohort_rows(cohorts), delimiter=cfg.delimiter)
    try:
        r2 = evaluation.cohort_correlations(cohorts)
    except evaluation.DegenerateCorrelationError as exc:
        log.warning("cohort correlations undefined: %s", exc)
        r2 = {}

    curve = evaluation.burst_size_curve(scored)
    io.write_table(stem("burst_curve"), evaluation.burst_rows(curve), delimiter=cfg.delimiter)

    heat = evaluation.engagement_effect_matrix(cohorts, {f.model: f.engagement.engagements for f in fits})
    io.write_json(stem("heatmap").with_suffix(".json"), heat.to_dict())
    long_rows = [
        {"first": a, "second": b, "loglog_difference": heat.values[i, j]}
        for i, a in enumerate(heat.order)
        for j, b in enumerate(heat.order)
        if np.isfinite(heat.values[i, j])
    ]
    io.atomic_write(stem("heatmap").with_suffix(".csv"), io.rows_to_csv(long_rows, ["first", "second", "loglog_difference"], cfg.delimiter))

    for grouping in evaluation.GROUPINGS:
        rows = evaluation.group_trends(scored, grouping, cfg.age_edges)
        io.write_table(stem(f"trends_{grouping}"), evaluation.trend_rows(rows, grouping), delimiter=cfg.delimiter)

    j = len(fits[0].courses)
    summary = {
        "models": list(scored),
        "n_test_users": len(test_users),
        "n_test_events": len(table),
        "n_scored_events": len(next(iter(scored.values()))),
        "raw_certificate_rate": evaluation.certificate_rate(table),
        "certificates_per_burst": evaluation.certificates_per_burst(table),
        "n_cohorts": len(cohorts),
        "possible_cohorts": j * (j - 1),
        "cohort_r2": r2,
        "test_nll": {f.model: negative_log_likelihood(f, table) for f in fits},
        "fit_config_hashes": {f.model: f.config_hash for f in fits},
    }
    io.write_json(stem("summary").with_suffix(".json"), summary)
    print(
        f"test events={summary['n_test_events']} raw rate={summary['raw_certificate_rate']:.4f} "
        f"per-burst={summary['certificates_per_burst']:.4f} cohorts={len(cohorts)}/{j * (j - 1)}"
    )
    for m, r in r2.items():
        print(f"{m}: cohort r2 log-odds={r['log_odds']:.3f} log-odds-ratio={r['log_odds_ratio']:.3f}")
    return 0


def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="JSON file of run settings")
    p.add_argument("--seed", type=int, default=default, help="split, optimizer and generator seed")
    p.add_argument("--threads", type=int, default=default, help="worker threads (fits run concurrently)")
    p.add_argument("--out-dir", dest="out_dir", default=default, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="betaend", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic event log with ground truth")
    p.add_argument("--preset", default="fun-like")
    p.add_argument("--generator-config", dest="generator_config")
    p.add_argument("--n-users", dest="n_users", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", parents=[common], help="assign bursts; write gap histogram and threshold sweep")
    p.add_argument("events")
    p.add_argument("--threshold", help="burst gap threshold, e.g. 6h, 8h or seconds")
    p.add_argument("--sweep", help="comma-separated thresholds, e.g. 4h,6h,8h,24h")
    p.add_argument("--histogram-bins", dest="histogram_bins", type=int)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("fit", parents=[common], help="fit beta-END and/or logistic models on the training split")
    p.add_argument("events")
    p.add_argument("--model", choices=["betaend", "logistic", "both"])
    p.add_argument("--threshold")
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-evals", dest="max_evals", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", parents=[common], help="evaluation tables on the test split")
    p.add_argument("events")
    p.add_argument("--fit", action="append", required=True, help="fit result JSON (repeatable)")
    p.add_argument("--bins", dest="n_bins", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"betaend: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"betaend: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
