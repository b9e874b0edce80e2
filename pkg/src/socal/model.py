"""The fitted calibration model: bins, one adjusted prior per bin, metadata.

``fit_model`` runs binning, per-bin fits, cross-bin smoothing and prior
adjustment.  Models serialize to a version-tagged JSON document whose
numbers carry 17 significant digits, so a save/load round trip is exact.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .binning import BinSpec, assign_bin, bin_diagnostics, build_bins, default_bin_count
from .fitting import BinFit, Family, fit_all_bins
from .items import Items
from .noise import NoiseKind, NoiseModel
from .posterior import summarize_arrays
from .priors import (
    GammaMixturePrior,
    GammaPrior,
    GaussianMixturePrior,
    Prior,
    check_pairing,
)
from .smoothing import CurvePair, adjust_prior, raw_curves, smooth_curves

FORMAT_VERSION = "socal-model/1"
LOG10 = math.log(10.0)
DEFAULT_LOG_BANDWIDTH = 0.3 * LOG10
DEFAULT_RELATIVE_BANDWIDTH = 0.1


class VersionMismatchError(ValueError):
    pass


class NumericFailure(ArithmeticError):
    pass


@dataclass(frozen=True)
class FitConfig:
    bins: int | None = None
    weighting: str = "items"
    family: str = "gamma"
    bandwidth: float | None = None
    monotone: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.bins is not None and self.bins < 1:
            raise ValueError("bins must be at least 1")
        if self.weighting not in ("items", "y", "offset"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        Family.parse(self.family)


@dataclass
class CalibrationModel:
    noise: NoiseModel
    spec: BinSpec
    priors: tuple
    family: Family
    bandwidth: float
    monotone: bool
    fit_loglik: np.ndarray
    fit_status: tuple
    fit_iterations: np.ndarray
    n_items: np.ndarray
    clamped: np.ndarray
    abscissa: np.ndarray
    raw: CurvePair | None = None
    smoothed: CurvePair | None = None
    version: str = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.priors = tuple(self.priors)
        if len(self.priors) != self.spec.count:
            raise ValueError("need exactly one prior per bin")
        for prior in self.priors:
            check_pairing(prior, self.noise)

    def bins(self, t) -> np.ndarray:
        return assign_bin(self.spec, t)

    def prior_for(self, t) -> Prior:
        return self.priors[int(assign_bin(self.spec, float(t)))]

    def score(self, items: Items, reg=None, k_max: int = 2, verify: bool = False) -> dict:
        """Posterior summary columns for every item, in input order."""
        bins = self.bins(items.t)
        cols = None
        order = np.argsort(bins, kind="stable")
        starts = np.searchsorted(bins[order], np.arange(self.spec.count + 1))
        for j in range(self.spec.count):
            idx = order[starts[j]:starts[j + 1]]
            if idx.size == 0:
                continue
            part = summarize_arrays(self.priors[j], self.noise, items.offset[idx], items.y[idx],
                                    k_max=k_max, reg=reg, verify=verify)
            if cols is None:
                cols = {k: np.empty(len(items), dtype=v.dtype) for k, v in part.items()}
            for k, v in part.items():
                cols[k][idx] = v
        if cols is None:
            cols = {}
        cols["bin"] = bins
        return cols

    def report(self) -> pd.DataFrame:
        """Per-bin fit report: curves, convergence and adjustment flags."""
        frame = pd.DataFrame({
            "bin": np.arange(self.spec.count),
            "abscissa": self.abscissa,
            "n_items": self.n_items,
            "loglik": self.fit_loglik,
            "iterations": self.fit_iterations,
            "status": list(self.fit_status),
            "clamped": self.clamped,
        })
        for name, curve in (("raw", self.raw), ("smoothed", self.smoothed)):
            if curve is not None:
                frame[f"{name}_mean"] = curve.mean
                frame[f"{name}_var"] = curve.var
        return frame

    def to_dict(self) -> dict:
        out = {
            "version": self.version,
            "noise": self.noise.kind.value,
            "family": str(self.family),
            "weighting": self.spec.weighting,
            "bandwidth": self.bandwidth,
            "monotone": self.monotone,
            "boundaries": self.spec.boundaries.tolist(),
            "priors": [prior_to_dict(p) for p in self.priors],
            "fit": {
                "loglik": self.fit_loglik.tolist(),
                "status": list(self.fit_status),
                "iterations": [int(i) for i in self.fit_iterations],
                "n_items": [int(i) for i in self.n_items],
                "clamped": [bool(c) for c in self.clamped],
            },
            "abscissa": self.abscissa.tolist(),
            "extra": self.extra,
        }
        for name, curve in (("raw", self.raw), ("smoothed", self.smoothed)):
            if curve is not None:
                out[name] = {"mean": curve.mean.tolist(), "var": curve.var.tolist()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationModel":
        version = data.get("version")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"model format {version!r} is not supported (expected {FORMAT_VERSION!r})"
            )
        abscissa = np.array(data["abscissa"], dtype=float)
        curves = {}
        for name in ("raw", "smoothed"):
            if name in data:
                curves[name] = CurvePair(abscissa, data[name]["mean"], data[name]["var"])
        fit = data["fit"]
        return cls(
            noise=NoiseModel(NoiseKind(data["noise"])),
            spec=BinSpec(np.array(data["boundaries"], dtype=float), data["weighting"]),
            priors=[prior_from_dict(p) for p in data["priors"]],
            family=Family.parse(data["family"]),
            bandwidth=float(data["bandwidth"]),
            monotone=bool(data["monotone"]),
            fit_loglik=np.array(fit["loglik"], dtype=float),
            fit_status=tuple(fit["status"]),
            fit_iterations=np.array(fit["iterations"], dtype=np.int64),
            n_items=np.array(fit["n_items"], dtype=np.int64),
            clamped=np.array(fit["clamped"], dtype=bool),
            abscissa=abscissa,
            raw=curves.get("raw"),
            smoothed=curves.get("smoothed"),
            extra=dict(data.get("extra", {})),
        )

    def dumps(self) -> str:
        return dumps_exact(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "CalibrationModel":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"model file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValueError("model file must hold a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def prior_to_dict(prior: Prior) -> dict:
    if isinstance(prior, GammaPrior):
        return {"kind": "gamma", "shape": prior.shape, "rate": prior.rate}
    if isinstance(prior, GammaMixturePrior):
        return {"kind": "gamma-mixture", "shapes": prior.shapes.tolist(),
                "rates": prior.rates.tolist(), "weights": prior.weights.tolist()}
    if isinstance(prior, GaussianMixturePrior):
        return {"kind": "gaussian-mixture", "means": prior.means.tolist(),
                "sds": prior.sds.tolist(), "weights": prior.weights.tolist()}
    raise TypeError(f"cannot serialize {type(prior).__name__}")


def prior_from_dict(data: dict) -> Prior:
    kind = data["kind"]
    if kind == "gamma":
        return GammaPrior(float(data["shape"]), float(data["rate"]))
    if kind == "gamma-mixture":
        return GammaMixturePrior(data["shapes"], data["rates"], data["weights"])
    if kind == "gaussian-mixture":
        return GaussianMixturePrior(data["means"], data["sds"], data["weights"])
    raise ValueError(f"unknown prior kind {kind!r}")


def _format_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    text = "%.17g" % x
    if not any(c in text for c in ".eE"):
        text += ".0"
    return text


def dumps_exact(obj, indent: int = 1, _level: int = 0) -> str:
    """JSON text with every float at 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        body = ",\n".join(f"{pad}{json.dumps(str(k))}: {dumps_exact(v, indent, _level + 1)}"
                          for k, v in obj.items())
        return "{\n" + body + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        items = list(obj)
        if not items:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in items):
            return "[" + ", ".join(dumps_exact(v, indent, _level + 1) for v in items) + "]"
        body = ",\n".join(pad + dumps_exact(v, indent, _level + 1) for v in items)
        return "[\n" + body + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _bin_weights(items: Items, weighting: str):
    if weighting == "items":
        return None
    return items.y if weighting == "y" else items.offset


def _abscissa(spec: BinSpec, t, noise: NoiseModel) -> np.ndarray:
    if noise.is_poisson:
        return bin_diagnostics(spec, t).mean_log_t
    bins = assign_bin(spec, t)
    return np.bincount(bins, weights=t, minlength=spec.count) / np.maximum(
        np.bincount(bins, minlength=spec.count), 1)


def default_bandwidth(abscissa, noise: NoiseModel) -> float:
    """0.3 decades of t on the Poisson path, 10% of the abscissa range otherwise."""
    if noise.is_poisson:
        return DEFAULT_LOG_BANDWIDTH
    span = float(np.ptp(abscissa))
    return DEFAULT_RELATIVE_BANDWIDTH * span if span > 0 else 1.0


def fit_model(items: Items, noise: NoiseModel, config: FitConfig = FitConfig()) -> CalibrationModel:
    """Bin, fit every bin, smooth the per-bin curves and adjust each prior."""
    if len(items) == 0:
        raise ValueError("no items")
    family = Family.parse(config.family)
    if (family.kind == "gaussian-mixture") == noise.is_poisson:
        raise ValueError(f"prior family {family.kind} does not pair with {noise.kind.value} noise")
    n_bins = config.bins or default_bin_count(len(items))
    spec = build_bins(items.t, n_bins, _bin_weights(items, config.weighting), config.weighting)
    fits: list[BinFit] = fit_all_bins(items.y, items.offset, items.t, spec, family, noise,
                                      workers=config.workers)
    if all(f.prior is None for f in fits):
        raise NumericFailure("every bin failed to fit")
    abscissa = _abscissa(spec, items.t, noise)
    bandwidth = config.bandwidth or default_bandwidth(abscissa, noise)
    raw, weights = raw_curves(fits, abscissa)

    priors = _fill_failed([f.prior for f in fits])
    clamped = np.zeros(spec.count, dtype=bool)
    smoothed = None
    if spec.count >= 2:
        if not np.any(weights > 0):
            # no fit converged cleanly; fall back to every bin that produced a prior
            weights = np.array([f.n_items if f.prior is not None else 0 for f in fits], float)
        smoothed = smooth_curves(raw, bandwidth, weights, monotone=config.monotone)
        adjusted = []
        for j, prior in enumerate(priors):
            new, clamped[j] = adjust_prior(prior, smoothed.mean[j], smoothed.var[j])
            adjusted.append(new)
        priors = adjusted
    return CalibrationModel(
        noise=noise, spec=spec, priors=priors, family=family, bandwidth=float(bandwidth),
        monotone=config.monotone,
        fit_loglik=np.array([f.loglik for f in fits], dtype=float),
        fit_status=tuple(f.status for f in fits),
        fit_iterations=np.array([f.iterations for f in fits], dtype=np.int64),
        n_items=np.array([f.n_items for f in fits], dtype=np.int64),
        clamped=clamped, abscissa=abscissa, raw=raw, smoothed=smoothed,
    )


def _fill_failed(priors: list) -> list:
    # a bin whose fit failed borrows the nearest fitted neighbour's prior;
    # smoothing then moves it onto the curve
    ok = np.array([p is not None for p in priors])
    if ok.all():
        return list(priors)
    good = np.flatnonzero(ok)
    out = []
    for j, p in enumerate(priors):
        if p is None:
            p = priors[int(good[np.argmin(np.abs(good - j))])]
            warnings.warn(f"bin {j} failed to fit; borrowing a neighbour's prior", RuntimeWarning)
        out.append(p)
    return out


def inflate_variance(prior: Prior, factor: float) -> Prior:
    """Same mean, prior variance multiplied by ``factor`` (exact except for
    Gamma mixtures, whose components are each inflated)."""
    if not factor > 0:
        raise ValueError("factor must be positive")
    if isinstance(prior, GammaPrior):
        return GammaPrior(prior.shape / factor, prior.rate / factor)
    if isinstance(prior, GammaMixturePrior):
        return GammaMixturePrior(prior.shapes / factor, prior.rates / factor, prior.weights)
    if isinstance(prior, GaussianMixturePrior):
        mean = float(np.dot(prior.weights, prior.means))
        s = math.sqrt(factor)
        return GaussianMixturePrior(mean + s * (prior.means - mean), s * prior.sds, prior.weights)
    raise TypeError(f"cannot inflate {type(prior).__name__}")


def with_priors(model: CalibrationModel, transform) -> CalibrationModel:
    """Copy of ``model`` with ``transform`` applied to every bin prior."""
    data = model.to_dict()
    out = CalibrationModel.from_dict(data)
    out.priors = tuple(transform(p) for p in model.priors)
    return out
