"""Command-line front end: ``tpmixqr run`` and ``tpmixqr simulate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit failure,
5 I/O error. Failures print a JSON report on stderr and, when the output
directory is writable, also to ``error.json`` there.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats

from .almath import QuantileConfig
from .data import DataValidationError, PanelDataset, prepare
from .em import FitError, FitOptions, MixtureParams, NumericalError
from .inference import bootstrap_se, select_model, simulate
from .penalized import PenaltyConfig, cross_validate_lambda, fit_penalized

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT, EXIT_IO = 0, 2, 3, 4, 5
DEFAULT_TAUS = (0.1, 0.25, 0.5, 0.75, 0.9)
DEFAULT_G = (1, 2, 3, 4, 5, 6)
SUMMARY_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)
# named sub-streams of the master seed
STREAMS = {"starts": 1, "folds": 2, "bootstrap": 3, "simulation": 4}

log = logging.getLogger("tpmixqr")


class ConfigError(ValueError):
    pass


class RunFailure(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


def substream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed), STREAMS[name]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class RunConfig:
    data_path: str = ""
    output_dir: str = "tpmixqr_out"
    unit_col: str = "unit_id"
    time_col: str = "time"
    y_col: str = "y"
    binary_covariates: list = field(default_factory=list)
    positive_covariates: list = field(default_factory=list)
    taus: list = field(default_factory=lambda: list(DEFAULT_TAUS))
    G_range: list = field(default_factory=lambda: list(DEFAULT_G))
    penalty: str = "off"
    lambda_: float = 0.0
    lambda_grid: Optional[list] = None
    n_folds: int = 10
    bootstrap: int = 0
    bootstrap_multi_start: bool = False
    seed: int = 0
    n_starts: int = 20
    tol: float = 1e-5
    max_iter: int = 500
    standardize: bool = True
    zero_threshold: float = 0.0
    n_jobs: int = 1

    def validate(self):
        if not self.data_path:
            raise ConfigError("data_path is required")
        if not self.positive_covariates and not self.binary_covariates:
            log.debug("no covariates configured; intercept-only model")
        try:
            self.taus = [float(t) for t in self.taus]
            self.G_range = [int(g) for g in self.G_range]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad taus or G_range: {exc}") from None
        if not self.taus or any(not 0 < t < 1 for t in self.taus):
            raise ConfigError("taus must be a nonempty list in (0, 1)")
        if len(set(self.taus)) != len(self.taus):
            raise ConfigError("taus must be distinct")
        if not self.G_range or any(g < 1 for g in self.G_range):
            raise ConfigError("G_range must be a nonempty list of positive integers")
        if self.penalty not in ("off", "fixed", "cv"):
            raise ConfigError("penalty must be one of off, fixed, cv")
        if self.penalty == "fixed" and not self.lambda_ >= 0:
            raise ConfigError("lambda must be nonnegative")
        if self.penalty == "cv":
            try:
                PenaltyConfig(self.lambda_grid, self.n_folds)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.bootstrap == 1 or self.bootstrap < 0:
            raise ConfigError("bootstrap must be 0 (off) or at least 2 replicates")
        if self.n_starts < 1 or self.max_iter < 1 or not self.tol > 0:
            raise ConfigError("n_starts, max_iter and tol must be positive")
        return self


# keys of the TOML file; tables flatten onto RunConfig fields
_TOML_TABLES = {
    "columns": {"unit": "unit_col", "time": "time_col", "y": "y_col",
                "binary": "binary_covariates", "positive": "positive_covariates"},
    "penalty": {"mode": "penalty", "lambda": "lambda_", "grid": "lambda_grid",
                "n_folds": "n_folds"},
    "bootstrap": {"n_replicates": "bootstrap", "multi_start": "bootstrap_multi_start"},
    "fit": {"n_starts": "n_starts", "tol": "tol", "max_iter": "max_iter",
            "standardize": "standardize", "zero_threshold": "zero_threshold"},
}


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    names = {f.name for f in fields(RunConfig)}
    out = {}
    for key, value in raw.items():
        if key in _TOML_TABLES:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            for k, v in value.items():
                if k not in _TOML_TABLES[key]:
                    raise ConfigError(f"unknown key {key}.{k}")
                out[_TOML_TABLES[key][k]] = v
        elif key in names:
            out[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "data_path" in out and not Path(out["data_path"]).is_absolute():
        out["data_path"] = str(Path(path).parent / out["data_path"])
    return out


def _csv_list(text, cast):
    return [cast(v) for v in text.split(",") if v.strip()]


def _g_range(text):
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return _csv_list(text, int)


def build_config(args) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    overrides = {
        "data_path": args.data, "output_dir": args.out, "seed": args.seed,
        "taus": None if args.taus is None else _csv_list(args.taus, float),
        "G_range": None if args.G_range is None else _g_range(args.G_range),
        "penalty": args.penalty, "lambda_": args.lambda_,
        "bootstrap": args.bootstrap, "n_starts": args.n_starts, "n_jobs": args.n_jobs,
        "binary_covariates": None if args.binary is None else _csv_list(args.binary, str),
        "positive_covariates": None if args.positive is None else _csv_list(args.positive, str),
    }
    if args.bootstrap_multi_start:
        overrides["bootstrap_multi_start"] = True
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


# ---------------------------------------------------------------------------
# artifacts


def read_panel(path, cfg: RunConfig) -> PanelDataset:
    try:
        df = pd.read_csv(path, dtype={cfg.unit_col: str}, encoding="utf-8")
    except FileNotFoundError as exc:
        raise RunFailure(EXIT_IO, "io", f"data file not found: {exc.filename}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise RunFailure(EXIT_DATA, "data", f"cannot parse {path}: {exc}") from None
    except OSError as exc:
        raise RunFailure(EXIT_IO, "io", f"cannot read {path}: {exc}") from None
    numeric = [cfg.time_col, cfg.y_col, *cfg.binary_covariates, *cfg.positive_covariates]
    for col in numeric:
        if col in df.columns and not pd.api.types.is_numeric_dtype(df[col]):
            raise RunFailure(EXIT_DATA, "data", f"column {col!r} is not numeric")
    try:
        return PanelDataset.from_frame(df, cfg.binary_covariates, cfg.positive_covariates,
                                       cfg.unit_col, cfg.time_col, cfg.y_col)
    except (DataValidationError, ValueError) as exc:
        raise RunFailure(EXIT_DATA, "data", str(exc)) from None


def summary_table(data: PanelDataset) -> pd.DataFrame:
    """Descriptive statistics of the outcome, overall and on positive values."""
    y = data.outcomes()
    rows = []
    for label, v in (("all", y), ("positive", y[y > 0])):
        row = {"sample": label, "n": int(v.size)}
        if v.size:
            row.update(mean=float(np.mean(v)),
                       sd=float(np.std(v, ddof=1)) if v.size > 1 else float("nan"),
                       skewness=float(stats.skew(v)) if v.size > 2 else float("nan"),
                       kurtosis=float(stats.kurtosis(v, fisher=False))
                       if v.size > 3 else float("nan"),
                       zero_fraction=float(np.mean(v == 0.0)))
            for q in SUMMARY_QUANTILES:
                row[f"q{q:g}"] = float(np.quantile(v, q))
        rows.append(row)
    return pd.DataFrame(rows)


def raw_scale(params: MixtureParams, prep) -> dict:
    """Coefficients on the original covariate scale."""
    gamma = params.gamma / prep.s_scale
    beta = params.beta / prep.x_scale
    return {"gamma": gamma.tolist(), "beta": beta.tolist(),
            "b0": (params.b0 - gamma @ prep.s_center).tolist(),
            "b1": (params.b1 - beta @ prep.x_center).tolist(),
            "sigma": params.sigma, "pi": params.pi.tolist()}


def _num(x):
    return None if x is None or not np.isfinite(x) else float(x)


def coefficient_panels(res, prep, se: Optional[dict], penalized: bool) -> dict:
    p = res.params
    se = se or {}
    names_b = list(prep.names_binary)
    names_p = list(prep.names_positive)
    se_of = (lambda k: _num(se.get(k))) if se else (lambda k: None)
    binary = [{"name": n, "estimate": float(v), "se": se_of(f"gamma[{n}]")}
              for n, v in zip(names_b, p.gamma)]
    positive = [{"name": n, "estimate": float(v),
                 "se": None if penalized else se_of(f"beta[{n}]")}
                for n, v in zip(names_p, p.beta)]
    masses = [{"component": k + 1, "pi": float(p.pi[k]), "pi_se": se_of(f"pi[{k + 1}]"),
               "b0": float(p.b0[k]), "b0_se": se_of(f"b0[{k + 1}]"),
               "b1": float(p.b1[k]),
               "b1_se": None if penalized else se_of(f"b1[{k + 1}]")}
              for k in range(p.G)]
    summary = {"G": p.G, "loglik": res.loglik, "n_parameters": res.n_parameters,
               "aic": res.aic, "bic": res.bic, "lambda": res.lambda_,
               "sigma": p.sigma, "sigma_se": None if penalized else se_of("sigma"),
               "converged": res.converged, "n_iterations": res.n_iterations}
    return {"binary": binary, "positive": positive, "masses": masses, "fit": summary}


def path_rows(tau, panels) -> list:
    rows = []
    for r in panels["binary"]:
        rows.append((tau, "binary", r["name"], 0, r["estimate"], r["se"]))
    for r in panels["positive"]:
        rows.append((tau, "positive", r["name"], 0, r["estimate"], r["se"]))
    for m in panels["masses"]:
        for key in ("b0", "b1", "pi"):
            rows.append((tau, key, key, m["component"], m[key], m[f"{key}_se"]))
    rows.append((tau, "scale", "sigma", 0, panels["fit"]["sigma"], panels["fit"]["sigma_se"]))
    return rows


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _setup_log(out: Path):
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("tpmixqr")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    root.addHandler(handler)
    root.propagate = False
    return handler


def _fit_options(cfg: RunConfig) -> FitOptions:
    return FitOptions(n_starts=cfg.n_starts, tol=cfg.tol, max_iter=cfg.max_iter,
                      seed=substream_seed(cfg.seed, "starts"))


def run(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        handler = _setup_log(out)
    except OSError as exc:
        raise RunFailure(EXIT_IO, "io", f"cannot create output directory: {exc}") from None
    try:
        return _run(cfg, out)
    finally:
        logging.getLogger("tpmixqr").removeHandler(handler)
        handler.close()


def _run(cfg: RunConfig, out: Path) -> int:
    seeds = {name: substream_seed(cfg.seed, name) for name in STREAMS}
    log.info("seed %d; sub-stream seeds %s", cfg.seed, json.dumps(seeds, sort_keys=True))
    data = read_panel(cfg.data_path, cfg)
    try:
        prep = prepare(data, standardize=cfg.standardize, zero_threshold=cfg.zero_threshold)
    except (DataValidationError, ValueError) as exc:
        raise RunFailure(EXIT_DATA, "data", str(exc)) from None
    if prep.n_pos == 0:
        raise RunFailure(EXIT_DATA, "data", "no positive outcomes")
    log.info("%d units, %d observations, %d positive", prep.n_units, prep.n_obs, prep.n_pos)

    summary_table(data).to_csv(out / "summary.csv", index=False)

    opts = _fit_options(cfg)
    table = select_model(prep, cfg.taus, cfg.G_range, opts, n_jobs=cfg.n_jobs)
    for r in table.rows:
        if r.failed:
            log.warning("tau=%g G=%d failed: %s", r.tau, r.G, r.error)
        else:
            res = table.fits[(r.tau, r.G)]
            log.info("tau=%g G=%d loglik=%.10g nu=%d bic=%.10g iterations=%d",
                     r.tau, r.G, r.loglik, r.n_parameters, r.bic, res.n_iterations)
            log.info("tau=%g G=%d trace %s", r.tau, r.G,
                     " ".join(f"{v:.10g}" for v in res.loglik_trace))
            for msg in res.diagnostics:
                log.info("tau=%g G=%d diagnostic: %s", r.tau, r.G, msg)
    table.to_frame().to_csv(out / "selection.csv", index=False)

    paths = []
    for tau in cfg.taus:
        sel = table.selected(tau)
        if sel is None:
            raise RunFailure(EXIT_FIT, "fit", f"every fit failed at tau={tau:g}")
        qcfg = QuantileConfig(tau)
        base = table.fits[(tau, sel.G)]
        final, penalized = base, cfg.penalty != "off"
        cv_rows = None
        if cfg.penalty == "fixed":
            final = fit_penalized(prep, qcfg, sel.G, cfg.lambda_, opts)
        elif cfg.penalty == "cv":
            pcfg = PenaltyConfig(cfg.lambda_grid, cfg.n_folds, seeds["folds"])
            lam, cv = cross_validate_lambda(prep, qcfg, sel.G, pcfg, opts)
            for msg in cv.diagnostics:
                log.info("tau=%g cv diagnostic: %s", tau, msg)
            log.info("tau=%g cv selected lambda %.10g", tau, lam)
            final = fit_penalized(prep, qcfg, sel.G, lam, opts)
            cv_rows = cv.to_frame().to_dict(orient="records")
        se = None
        if cfg.bootstrap:
            boot = bootstrap_se(base, data, qcfg, cfg.bootstrap, seeds["bootstrap"], opts,
                                multi_start=cfg.bootstrap_multi_start,
                                standardize=cfg.standardize,
                                zero_threshold=cfg.zero_threshold, n_jobs=cfg.n_jobs)
            log.info("tau=%g bootstrap: %d replicates, %d failed", tau, boot.n_replicates,
                     boot.n_failed)
            for w in boot.warnings:
                log.warning("tau=%g bootstrap: %s", tau, w)
            se = dict(zip(base.params.parameter_names(list(prep.names_binary),
                                                      list(prep.names_positive)),
                          boot.se.tolist()))
        panels = coefficient_panels(final, prep, se, penalized)
        doc = {"tau": tau, "G": sel.G, "penalty": cfg.penalty, "panels": panels,
               "raw_scale": raw_scale(final.params, prep),
               "standardization": {"binary_center": prep.s_center.tolist(),
                                   "binary_scale": prep.s_scale.tolist(),
                                   "positive_center": prep.x_center.tolist(),
                                   "positive_scale": prep.x_scale.tolist()},
               "seeds": seeds, "bootstrap_replicates": cfg.bootstrap}
        if cv_rows is not None:
            doc["cv"] = [{k: _num(v) for k, v in r.items()} for r in cv_rows]
        _write_json(out / f"coefficients_{tau:g}.json", doc)
        paths.extend(path_rows(tau, panels))

    pd.DataFrame(paths, columns=["tau", "block", "parameter", "component", "estimate", "se"]
                 ).to_csv(out / "paths.csv", index=False)
    log.info("done")
    return EXIT_OK


def simulate_cmd(params_file, template_path, seed, out_path, unit_col="unit_id",
                 time_col="time", y_col="y") -> int:
    """Simulate outcomes at the template's covariates from a JSON parameter file.

    The file mirrors :class:`MixtureParams` plus ``tau``, the covariate name
    lists ``binary_covariates`` / ``positive_covariates`` and ``standardized``
    (default true: coefficients refer to standardized covariates).
    """
    try:
        with open(params_file, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise RunFailure(EXIT_IO, "io", f"cannot read {params_file}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise RunFailure(EXIT_CONFIG, "config", f"invalid parameter file: {exc}") from None
    try:
        params = MixtureParams.from_dict(payload)
        qcfg = QuantileConfig(payload["tau"])
        names_b = list(payload.get("binary_covariates", []))
        names_p = list(payload.get("positive_covariates", []))
        if len(names_b) != params.gamma.size or len(names_p) != params.beta.size:
            raise ValueError("covariate name lists do not match gamma / beta")
    except (KeyError, TypeError, ValueError) as exc:
        raise RunFailure(EXIT_CONFIG, "config", f"invalid parameter file: {exc}") from None
    cfg = RunConfig(data_path=str(template_path), unit_col=unit_col, time_col=time_col,
                    y_col=y_col, binary_covariates=names_b, positive_covariates=names_p)
    template = read_panel(template_path, cfg)
    try:
        sim = simulate(params, template, qcfg, seed, bool(payload.get("standardized", True)))
    except (DataValidationError, ValueError) as exc:
        raise RunFailure(EXIT_DATA, "data", str(exc)) from None
    frame = sim.to_frame(unit_col, time_col, y_col)
    try:
        frame.to_csv(out_path, index=False)
    except OSError as exc:
        raise RunFailure(EXIT_IO, "io", f"cannot write {out_path}: {exc}") from None
    return EXIT_OK


def _parser():
    ap = argparse.ArgumentParser(prog="tpmixqr",
                                 description="Two-part mixture quantile regression")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="fit, select, bootstrap and write artifacts")
    r.add_argument("--config", help="TOML configuration file")
    r.add_argument("--data", help="input CSV")
    r.add_argument("--out", help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--taus", help="comma-separated quantile levels")
    r.add_argument("--G-range", dest="G_range", help="e.g. 1-6 or 1,2,3")
    r.add_argument("--binary", help="comma-separated binary-part covariates")
    r.add_argument("--positive", help="comma-separated positive-part covariates")
    r.add_argument("--penalty", choices=["off", "fixed", "cv"])
    r.add_argument("--lambda", dest="lambda_", type=float)
    r.add_argument("--bootstrap", type=int, help="replicates; 0 disables")
    r.add_argument("--bootstrap-multi-start", action="store_true",
                   help="cold multi-start refits instead of warm starts")
    r.add_argument("--n-starts", type=int)
    r.add_argument("--n-jobs", type=int)
    s = sub.add_parser("simulate", help="simulate outcomes from a parameter file")
    s.add_argument("--params", required=True)
    s.add_argument("--template", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return ap


def _report(exc: RunFailure, out_dir=None):
    report = {"status": "error", "exit_code": exc.code, "kind": exc.kind,
              "message": str(exc)}
    print(json.dumps(report), file=sys.stderr)
    if out_dir:
        try:
            _write_json(Path(out_dir) / "error.json", report)
        except OSError:
            pass


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out_dir = None
    try:
        if args.command == "simulate":
            sim_seed = substream_seed(args.seed, "simulation")
            return simulate_cmd(args.params, args.template, sim_seed, args.out)
        try:
            cfg = build_config(args)
        except ConfigError as exc:
            raise RunFailure(EXIT_CONFIG, "config", str(exc)) from None
        out_dir = cfg.output_dir
        try:
            return run(cfg)
        except RunFailure:
            raise
        except (FitError, NumericalError) as exc:
            raise RunFailure(EXIT_FIT, "fit", str(exc)) from None
        except OSError as exc:
            raise RunFailure(EXIT_IO, "io", str(exc)) from None
    except RunFailure as exc:
        _report(exc, out_dir if exc.code != EXIT_IO else None)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
