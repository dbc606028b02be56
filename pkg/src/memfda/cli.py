"""Command-line surface: simulate | reconstruct | fit | bootstrap |
benchmark | ingest.

Every command is deterministic given its flags and seed; every output file
embeds the resolved configuration as '# key=value' header lines.  Exit
codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataio
from .benchmark import DEFAULT_ESTIMATORS, failure_share, run_scenario
from .inference import bootstrap
from .pipeline import canonical_method, fit_two_stage, has_truth, reconstruct
from .simulate import ScenarioConfig, make_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_INT_KEYS = {"n", "T", "J", "D", "seed", "R", "K_n", "B", "threads",
             "slots_per_day", "n_bins", "run_threshold", "min_days"}
_FLOAT_KEYS = {"sigma_x", "rho_x", "level", "fve"}
_LIST_KEYS = {"n_list", "sigma_x_list", "rho_x_list", "D_list", "estimators"}
VALID_CONFIG_KEYS = sorted(_INT_KEYS | _FLOAT_KEYS | _LIST_KEYS)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def parse_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; keys validated."""
    cfg = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in VALID_CONFIG_KEYS:
            raise UsageError(
                f"{path}:{lineno}: unknown config key {key!r}; valid keys: "
                + ", ".join(VALID_CONFIG_KEYS)
            )
        try:
            if key in _INT_KEYS:
                cfg[key] = int(val)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(val)
            elif key == "estimators":
                cfg[key] = [canonical_method(v) for v in val.split(",") if v.strip()]
            else:
                cast = int if key in ("n_list", "D_list") else float
                cfg[key] = [cast(v) for v in val.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return cfg


def _scenario_from(cfg: dict, args) -> ScenarioConfig:
    fields = {k: cfg[k] for k in ("n", "T", "J", "sigma_x", "rho_x", "D", "seed", "R", "K_n")
              if k in cfg}
    if args.seed is not None:
        fields["seed"] = args.seed
    if args.D is not None:
        fields["D"] = args.D
    if args.K is not None:
        fields["K_n"] = args.K
    try:
        return ScenarioConfig(**fields)
    except ValueError as exc:
        raise UsageError(f"invalid scenario: {exc}") from None


def _resolved_meta(config: ScenarioConfig, extra=None) -> dict:
    meta = asdict(config)
    meta.update(extra or {})
    return meta


def _load_sample(data_dir, cfg):
    d = Path(data_dir)
    counts, cov = d / "counts.csv", d / "covariates.csv"
    if not counts.exists() or not cov.exists():
        raise DataError(f"{d}: expected counts.csv and covariates.csv")
    truth = d / "truth.csv"
    n_bins = cfg.get("n_bins")
    slots = cfg.get("slots_per_day")
    if n_bins is None or slots is None:
        # default: slot resolution equals the analysis grid (simulated data)
        _, header, rows, _ = dataio._read_csv(counts)
        max_slot = max(int(r[2]) for r in rows) if rows else 0
        slots = slots or max_slot + 1
        n_bins = n_bins or slots
    return dataio.ingest(
        counts,
        cov,
        slots_per_day=slots,
        n_bins=n_bins,
        run_threshold=cfg.get("run_threshold", 60),
        min_days=cfg.get("min_days", 1),
        truth_path=truth if truth.exists() else None,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args, cfg) -> int:
    config = _scenario_from(cfg, args)
    ds = make_dataset(config)
    sample = ds.as_sample()
    outdir = Path(args.out)
    paths = dataio.export_dataset(sample, outdir, meta=_resolved_meta(config))
    prevalence = float(np.mean(ds.Y))
    print(
        f"simulate: n={config.n} T={config.T} J={config.J} "
        f"prevalence={prevalence:.4f} -> {outdir}"
    )
    return EXIT_OK if paths else EXIT_DATA


def cmd_reconstruct(args, cfg) -> int:
    sample = _load_sample(args.data, cfg)
    method = canonical_method(args.method)
    config_meta = {"method": method, "seed": args.seed or 0}
    rec = reconstruct(sample, method, D=args.D or cfg.get("D", 3),
                      fve_target=cfg.get("fve", 0.99))
    out = Path(args.out) / f"reconstruction_{method}.csv"
    dataio.export_reconstruction(rec, sample.grid, out, meta=config_meta)
    print(f"reconstruct: {method} n={sample.n} T={sample.grid.size} -> {out}")
    return EXIT_OK


def cmd_fit(args, cfg) -> int:
    sample = _load_sample(args.data, cfg)
    method = canonical_method(args.method)
    if method == "Oracle" and not has_truth(sample):
        raise DataError("oracle fit needs truth.csv next to the dataset")
    K_n = args.K or cfg.get("K_n", 15)
    D = args.D or cfg.get("D", 3)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    meta = {"method": method, "K_n": K_n, "D": D, "seed": seed}
    outdir = Path(args.out)

    B = args.B or cfg.get("B")
    if B:
        bands = bootstrap(
            sample, method, K_n=K_n, B=B,
            level=cfg.get("level", 0.95), seed=seed, D=D,
            fve_target=cfg.get("fve", 0.99),
        )
        meta["B"] = B
        dataio.export_curve(
            bands.t, bands.estimate, outdir / f"beta_{method}.csv",
            meta=meta, lower=bands.lower, upper=bands.upper,
        )
        dataio.export_coef_table(
            bands.coef_names, bands.coef_estimate, outdir / f"coefficients_{method}.csv",
            meta=meta, lower=bands.coef_lower, upper=bands.coef_upper,
        )
        dataio.export_bands(bands, outdir / f"bands_{method}.csv", meta=meta)
        print(
            f"fit: {method} with {B} bootstrap replicates "
            f"({bands.n_failed} failed) -> {outdir}"
        )
    else:
        fit = fit_two_stage(sample, method, K_n=K_n, D=D, fve_target=cfg.get("fve", 0.99))
        names = ["Intercept"] + (sample.z_names or
                                 [f"Z{j+1}" for j in range(sample.Z.shape[1])])
        dataio.export_curve(sample.grid.points, fit.beta_curve,
                            outdir / f"beta_{method}.csv", meta=meta)
        dataio.export_coef_table(names, fit.alpha,
                                 outdir / f"coefficients_{method}.csv", meta=meta)
        print(f"fit: {method} converged={fit.converged} -> {outdir}")
    return EXIT_OK


def cmd_benchmark(args, cfg) -> int:
    base = _scenario_from(cfg, args)
    estimators = cfg.get("estimators", list(DEFAULT_ESTIMATORS))
    threads = args.threads or cfg.get("threads") or os.cpu_count() or 1
    outdir = Path(args.out)

    scenarios = []
    for n in cfg.get("n_list", [base.n]):
        for sx in cfg.get("sigma_x_list", [base.sigma_x]):
            for rx in cfg.get("rho_x_list", [base.rho_x]):
                for D in cfg.get("D_list", [base.D]):
                    scenarios.append(
                        base.with_updates(n=int(n), sigma_x=sx, rho_x=rx, D=int(D))
                    )

    combined_rows = []
    worst_share = 0.0
    for sc in scenarios:
        report = run_scenario(sc, estimators, threads=threads,
                              fve_target=cfg.get("fve", 0.99))
        tag = f"n{sc.n}_sx{sc.sigma_x:g}_rx{sc.rho_x:g}_D{sc.D}"
        dataio.export_report(report, outdir / f"report_{tag}.csv",
                             meta={"threads_independent": 1})
        worst_share = max(worst_share, failure_share(report))
        for est in report.estimators:
            combined_rows.append(
                (sc.n, sc.sigma_x, sc.rho_x, sc.D, sc.R, est,
                 *(report.rows[est][m] for m in ("abias2", "avar", "aimse", "cov_avar")),
                 report.failures[est])
            )
        print(f"benchmark: {tag} done ({sc.R} replicates)")
    dataio._write_csv(
        outdir / "report_combined.csv",
        ["n", "sigma_x", "rho_x", "D", "R", "estimator",
         "abias2", "avar", "aimse", "cov_avar", "failures"],
        combined_rows,
        meta=_resolved_meta(base, {"estimators": ",".join(estimators)}),
    )
    if worst_share > 0.05:
        print(f"benchmark: failure share {worst_share:.1%} exceeds 5%", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_ingest(args, cfg) -> int:
    sample = dataio.ingest(
        args.counts,
        args.covariates,
        slots_per_day=cfg.get("slots_per_day", 1440),
        n_bins=cfg.get("n_bins", 24),
        run_threshold=cfg.get("run_threshold", 60),
        min_days=cfg.get("min_days", 4),
    )
    outdir = Path(args.out)
    dataio.export_dataset(sample, outdir)
    print(
        f"ingest: kept {sample.n} subjects x {sample.n_replicates} days "
        f"on a {sample.grid.size}-point grid -> {outdir}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memfda",
        description="Two-stage measurement-error-corrected functional regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, method=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--D", type=int, default=None, help="MP_MEM window size")
        p.add_argument("--K", type=int, default=None, help="number of spline basis functions")
        p.add_argument("--B", type=int, default=None, help="bootstrap replicates")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if method:
            p.add_argument("--method", required=True,
                           help="one of up_mem, mp_mem, pace, average, naive, oracle")

    common(sub.add_parser("simulate", help="generate a synthetic dataset"))
    common(sub.add_parser("reconstruct", help="stage-one reconstruction only"),
           data=True, method=True)
    common(sub.add_parser("fit", help="two-stage fit, optional bootstrap bands"),
           data=True, method=True)
    boot = sub.add_parser("bootstrap", help="two-stage fit with bootstrap bands")
    common(boot, data=True, method=True)
    common(sub.add_parser("benchmark", help="Monte Carlo estimator comparison"))
    ing = sub.add_parser("ingest", help="ingest minute-level actigraphy CSVs")
    common(ing)
    ing.add_argument("--counts", required=True)
    ing.add_argument("--covariates", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config_file(args.config) if args.config else {}
        if args.command == "simulate":
            return cmd_simulate(args, cfg)
        if args.command == "reconstruct":
            return cmd_reconstruct(args, cfg)
        if args.command == "fit":
            return cmd_fit(args, cfg)
        if args.command == "bootstrap":
            if not (args.B or cfg.get("B")):
                raise UsageError("bootstrap requires --B")
            return cmd_fit(args, cfg)
        if args.command == "benchmark":
            return cmd_benchmark(args, cfg)
        if args.command == "ingest":
            return cmd_ingest(args, cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
