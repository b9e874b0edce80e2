"""Command-line front end: ``socal fit | apply | diagnose | evaluate | simulate``.

Settings come from an optional ``key=value`` config file (``--config``) and
are overridden by flags of the same name.  Exit codes: 0 success, 2 input
error, 3 numeric failure, 4 model version mismatch.  Failures print a
one-line JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .binning import BinningError
from .diagnostics import (
    DEFAULT_CELLS,
    evaluation_table,
    marginal_pit_report,
    predictive_pit_report,
)
from .items import InputError, Items, read_items, screen, write_items
from .model import CalibrationModel, FitConfig, NumericFailure, VersionMismatchError, fit_model
from .noise import NoiseKind, NoiseModel
from .posterior import DivisionHazardError, Regularization
from .simulate import (
    CtrSimConfig,
    NormalSimConfig,
    simulate_ctr,
    simulate_normal_quadratic,
    thin_split,
)
from .smoothing import SmoothingError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_VERSION = 0, 2, 3, 4


@dataclass(frozen=True)
class RunConfig:
    noise: str = "poisson"
    bins: int | None = None
    weighting: str = "items"
    family: str | None = None
    bandwidth: float | None = None
    monotone: bool = False
    rho: float = 0.0
    seed: int = 0
    hist_cells: int = DEFAULT_CELLS
    min_offset: float = 0.0
    workers: int = 1
    cumulants: int = 2
    verify: bool = False

    def __post_init__(self):
        NoiseKind(self.noise)
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.hist_cells < 1:
            raise ValueError("hist_cells must be positive")
        if self.min_offset < 0:
            raise ValueError("min_offset must be nonnegative")
        if not 2 <= self.cumulants <= 4:
            raise ValueError("cumulants must be 2, 3 or 4")

    @property
    def noise_model(self) -> NoiseModel:
        return NoiseModel(NoiseKind(self.noise))

    def fit_config(self) -> FitConfig:
        family = self.family or ("gamma" if self.noise == "poisson" else "gaussian-mixture:7")
        return FitConfig(self.bins, self.weighting, family, self.bandwidth, self.monotone,
                         self.workers)


def _coerce(name: str, text: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if "bool" in kind:
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {text!r}")
        return low in ("1", "true", "yes")
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text.strip()


def read_config(path) -> dict:
    """Parse a ``key=value`` file; ``#`` starts a comment, dashes in keys are allowed."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in known:
            raise InputError(f"{path}:{lineno}: unknown or malformed setting {line!r}")
        out[key] = _coerce(key, value)
    return out


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--noise", choices=[k.value for k in NoiseKind])
    p.add_argument("--bins", type=int)
    p.add_argument("--weighting", choices=["items", "y", "offset"])
    p.add_argument("--family", help="gamma | gamma-mixture[:K] | gaussian-mixture[:K]")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--monotone", action="store_const", const=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--hist-cells", type=int)
    p.add_argument("--min-offset", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--cumulants", type=int)
    p.add_argument("--verify", action="store_const", const=True)


def _run_config(args) -> RunConfig:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="socal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a calibration model")
    p.add_argument("input")
    p.add_argument("--model", required=True, help="model file to write")
    p.add_argument("--report", help="per-bin fit report (CSV)")
    _add_run_flags(p)

    p = sub.add_parser("apply", help="score items with a fitted model")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    _add_run_flags(p)

    p = sub.add_parser("diagnose", help="marginal PIT histograms per bin")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="held-out likelihood lift, variance gain, predictive PIT")
    p.add_argument("train")
    p.add_argument("test")
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--pit-output", help="predictive PIT table (CSV)")
    p.add_argument("--with-truth", action="store_true", help="read theta_true from the test file")
    _add_run_flags(p)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("kind", choices=["ctr", "normal"])
    p.add_argument("--output", required=True)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--t-low", type=float, default=1e-4)
    p.add_argument("--t-high", type=float, default=1e-1)
    p.add_argument("--offset-mean", type=float, default=30.0)
    p.add_argument("--theta-family", choices=["lognormal", "gamma"], default="lognormal")
    p.add_argument("--split", type=float,
                   help="also write <stem>_train/<stem>_test files thinned at this fraction")
    p.add_argument("--with-truth", action="store_true", help="include the theta_true column")
    return parser


def _load_items(path, cfg: RunConfig, with_truth=False):
    items = read_items(path, with_truth=with_truth)
    return screen(items, cfg.noise_model)


def _load_model(path) -> CalibrationModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read model {path}: {exc}") from None
    return CalibrationModel.loads(text)


def _check_kind(model: CalibrationModel, cfg: RunConfig, explicit_noise: bool, items: Items):
    if explicit_noise and model.noise.kind.value != cfg.noise:
        raise InputError(f"model is for {model.noise.kind.value} data, not {cfg.noise}")


def _write_table(frame: pd.DataFrame, path):
    frame.to_csv(path, index=False, float_format="%.17g")


def cmd_fit(args) -> dict:
    cfg = _run_config(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        items, reasons = _load_items(args.input, cfg)
        model = fit_model(items, cfg.noise_model, cfg.fit_config())
    rejected = {str(r): int(c) for r, c in zip(*np.unique(reasons[reasons != ""], return_counts=True))}
    model.extra.update({"rejected_rows": rejected, "n_items": len(items),
                        "warnings": [str(w.message) for w in caught]})
    model.save(args.model)
    if args.report:
        _write_table(model.report(), args.report)
    return {"bins": model.spec.count, "items": len(items), "rejected": sum(rejected.values()),
            "converged": int(sum(s == "converged" for s in model.fit_status))}


def score_table(model: CalibrationModel, items: Items, reasons, cfg: RunConfig) -> pd.DataFrame:
    """One scored row per input row; rejected rows keep their place with a flag."""
    good = reasons == ""
    reg = Regularization(cfg.rho)
    scored = model.score(items.subset(good), reg=reg, k_max=cfg.cumulants, verify=cfg.verify)
    frame = pd.DataFrame({"id": items.id, "y": items.y, "offset": items.offset, "t": items.t})
    bins = np.full(len(items), -1, dtype=np.int64)
    bins[good] = scored["bin"]
    frame["bin"] = pd.array(np.where(good, bins, 0), dtype="Int64")
    frame.loc[~good, "bin"] = pd.NA
    names = ["e_prior", "v_prior", "e_post", "v_post"] + ["k3", "k4"][: cfg.cumulants - 2]
    for name in names:
        col = np.full(len(items), np.nan)
        col[good] = scored[name]
        frame[name] = col
    flags = np.array(reasons, dtype=object)
    flags[good] = scored["flags"]
    flags[~good] = ["rejected:" + r for r in reasons[~good]]
    frame["flags"] = flags
    return frame


def cmd_apply(args) -> dict:
    cfg = _run_config(args)
    model = _load_model(args.model)
    if args.noise is None:
        cfg = replace(cfg, noise=model.noise.kind.value)
    _check_kind(model, cfg, args.noise is not None, None)
    items = read_items(args.input)
    _, reasons = screen(items, model.noise)
    frame = score_table(model, items, reasons, cfg)
    _write_table(frame, args.output)
    return {"items": len(items), "rejected": int((reasons != "").sum())}


def cmd_diagnose(args) -> dict:
    cfg = _run_config(args)
    model = _load_model(args.model)
    items, _ = screen(read_items(args.input), model.noise)
    report = marginal_pit_report(model, items, seed=cfg.seed, cells=cfg.hist_cells,
                                 min_offset=cfg.min_offset)
    _write_table(report.to_frame(), args.output)
    return {"bins": model.spec.count, "within_band": report.fraction_within(),
            "skipped": report.skipped}


def cmd_evaluate(args) -> dict:
    cfg = _run_config(args)
    model = _load_model(args.model)
    train, _ = screen(read_items(args.train), model.noise)
    test_all = read_items(args.test, with_truth=args.with_truth)
    # a held-out part may legitimately have zero exposure; keep those rows
    ok = np.isfinite(test_all.y) & np.isfinite(test_all.t) & (test_all.offset >= 0)
    if not ok.all():
        raise InputError(f"{int((~ok).sum())} malformed test rows")
    truth = test_all.theta if args.with_truth else None
    table = evaluation_table(model, train, test_all, truth)
    _write_table(table, args.output)
    out = {"lift_prior": float(table["lift_prior"].iloc[-1]),
           "lift_post": float(table["lift_post"].iloc[-1])}
    if args.pit_output:
        pit = predictive_pit_report(model, train, test_all, seed=cfg.seed, cells=cfg.hist_cells,
                                    min_offset=cfg.min_offset)
        _write_table(pit.to_frame(), args.pit_output)
        out["within_band"] = pit.fraction_within()
    return out


def cmd_simulate(args) -> dict:
    if args.kind == "ctr":
        cfg = CtrSimConfig(args.delta, args.sigma, args.n, args.t_low, args.t_high,
                           args.offset_mean, args.seed, args.theta_family)
        items = simulate_ctr(cfg)
    else:
        items = simulate_normal_quadratic(NormalSimConfig(n_items=args.n, seed=args.seed)).items
    out = Path(args.output)
    write_items(out, items, with_truth=args.with_truth)
    written = [str(out)]
    if args.split is not None:
        if args.kind != "ctr":
            raise InputError("--split applies to count data only")
        train, test = thin_split(items, args.split, seed=args.seed + 1)
        for part, data in (("train", train), ("test", test)):
            path = out.with_name(f"{out.stem}_{part}{out.suffix}")
            write_items(path, data, with_truth=args.with_truth)
            written.append(str(path))
    return {"items": len(items), "files": written}


COMMANDS = {"fit": cmd_fit, "apply": cmd_apply, "diagnose": cmd_diagnose,
            "evaluate": cmd_evaluate, "simulate": cmd_simulate}


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = COMMANDS[args.command](args)
    except VersionMismatchError as exc:
        return _fail(EXIT_VERSION, "version_mismatch", exc)
    except (NumericFailure, DivisionHazardError, SmoothingError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric_failure", exc)
    except (InputError, BinningError, ValueError, KeyError, OSError) as exc:
        return _fail(EXIT_INPUT, "input_error", exc)
    print(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
