"""Nuisance classifier: per-class univariate GMMs over a nuisance feature.

The LLR of the two class GMMs measures how much a single nuisance value
(SNR, non-speech proportion) reveals about the class label. An unbiased
protocol keeps it near zero; the Gaussian summary turns the class-mean gap
of the LLRs into a model-based EER.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import audio, metrics
from .manifest import DatasetManifest, partition

LOG_2PI = math.log(2.0 * math.pi)


class TooFewPointsError(ValueError):
    pass


class FeatureExtractionError(RuntimeError):
    def __init__(self, failures: dict[str, str]):
        listing = "; ".join(f"{k}: {v}" for k, v in sorted(failures.items()))
        super().__init__(f"feature extraction failed for {len(failures)} file(s): {listing}")
        self.failures = failures


@dataclass(frozen=True)
class UnivariateGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    variance_floor: float = 0.0
    log_likelihoods: tuple = field(default=(), compare=False)
    converged: bool = True

    @property
    def n_components(self) -> int:
        return int(self.weights.size)

    def component_log_densities(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)[..., None]
        return (np.log(self.weights) - 0.5 * (LOG_2PI + np.log(self.variances))
                - 0.5 * (w - self.means) ** 2 / self.variances)

    def log_density(self, w) -> np.ndarray:
        return logsumexp(self.component_log_densities(w), axis=-1)


@dataclass(frozen=True)
class NuisanceGaussianSummary:
    mu_ell: float
    d_ell: float
    sigma2_ell: float

    @property
    def gaussian_eer(self) -> float:
        return gaussian_eer(self.d_ell)


class NuisanceScore(NamedTuple):
    id: str
    y_cls: int
    feature_value: float
    llr: float


def fit_gmm(values: Sequence[float], n_components: int = 2, seed: int = 0,
            max_iter: int = 500, tol: float = 1e-8) -> UnivariateGmm:
    """Fit a univariate GMM by EM.

    Initialization is deterministic: means at the K evenly spaced interior
    sample quantiles ((k + 0.5) / K), equal weights, and the pooled sample
    variance for every component. Iteration stops when the mean
    log-likelihood gains less than `tol` or after `max_iter` iterations.
    Variances are floored at 1e-6 times the data variance after every
    M-step. `seed` is accepted for interface symmetry; the fit uses no
    randomness.
    """
    x = np.asarray(values, dtype=np.float64)
    k = int(n_components)
    if k < 1:
        raise ValueError("need at least one component")
    if x.size < 10 * k:
        raise TooFewPointsError(f"{x.size} points are too few for {k} components (need {10 * k})")
    data_var = float(np.var(x))
    floor = max(1e-6 * data_var, 1e-12)

    means = np.quantile(x, (np.arange(k) + 0.5) / k)
    variances = np.full(k, max(data_var, floor))
    weights = np.full(k, 1.0 / k)
    history = []
    converged = False
    for _ in range(max_iter + 1):
        log_comp = (np.log(weights) - 0.5 * (LOG_2PI + np.log(variances))
                    - 0.5 * (x[:, None] - means) ** 2 / variances)
        log_norm = logsumexp(log_comp, axis=1)
        history.append(float(log_norm.mean()))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break
        if len(history) > max_iter:
            break
        resp = np.exp(log_comp - log_norm[:, None])
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / nk.sum()
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, floor)
    return UnivariateGmm(weights, means, variances, floor, tuple(history), converged)


def llr(w, pos: UnivariateGmm, neg: UnivariateGmm):
    """log p(w | positive-class GMM) - log p(w | negative-class GMM)."""
    out = pos.log_density(w) - neg.log_density(w)
    return float(out) if np.ndim(out) == 0 else out


def extract_features(manifest: DatasetManifest, feature_kind: str) -> dict[str, float]:
    values: dict[str, float] = {}
    failures: dict[str, str] = {}
    for item in manifest.items:
        try:
            values[item.id] = audio.extract_feature(audio.read_pcm(item.path), feature_kind).value
        except (OSError, ValueError) as exc:
            failures[item.id] = f"{item.path}: {exc}"
    if failures:
        raise FeatureExtractionError(failures)
    return values


@dataclass(frozen=True)
class NuisanceClassifier:
    feature_kind: str
    positive: UnivariateGmm
    negative: UnivariateGmm


def train_nuisance(features: dict[str, float], manifest: DatasetManifest, n_components: int = 2,
                   seed: int = 0, feature_kind: str = "") -> NuisanceClassifier:
    x00, x10, _, _ = partition(manifest)
    if not x00 or not x10:
        raise ValueError("nuisance classifier needs both training classes")
    neg = fit_gmm([features[it.id] for it in x00], n_components, seed)
    pos = fit_gmm([features[it.id] for it in x10], n_components, seed)
    return NuisanceClassifier(feature_kind, pos, neg)


def score_dataset(manifest: DatasetManifest, feature_kind: str, n_components: int = 2, seed: int = 0,
                  features: Optional[dict[str, float]] = None) -> list[NuisanceScore]:
    """Fit GMMs on the X_10 / X_00 training features and score every eval item.

    `features` may carry precomputed feature values keyed by item id.
    """
    if features is None:
        features = extract_features(manifest, feature_kind)
    _, _, x01, x11 = partition(manifest)
    if not x01 and not x11:
        raise ValueError("manifest has no eval items to score")
    clf = train_nuisance(features, manifest, n_components, seed, feature_kind)
    out = []
    for item in sorted(x01 + x11, key=lambda it: it.id):
        value = features[item.id]
        out.append(NuisanceScore(item.id, item.class_label, value, llr(value, clf.positive, clf.negative)))
    return out


def fit_nuisance_summary(scores: Iterable[tuple[float, int]]) -> NuisanceGaussianSummary:
    """Tied-variance Gaussian model of the LLRs: class means and pooled variance."""
    pairs = list(scores)
    ell = np.array([p[0] for p in pairs], dtype=np.float64)
    y = np.array([p[1] for p in pairs])
    neg, pos = ell[y == 0], ell[y == 1]
    if neg.size == 0 or pos.size == 0:
        raise metrics.OneClassError("nuisance summary needs scores from both classes")
    mu0, mu1 = float(neg.mean()), float(pos.mean())
    dof = ell.size - 2
    ss = float(((neg - mu0) ** 2).sum() + ((pos - mu1) ** 2).sum())
    sigma2 = ss / dof if dof > 0 else 0.0
    return NuisanceGaussianSummary(mu0, mu1 - mu0, sigma2)


def gaussian_eer(d_ell: float) -> float:
    """Model-based EER Phi(-d/2) = erfc(d / (2*sqrt(2))) / 2."""
    return 0.5 * math.erfc(float(d_ell) / (2.0 * math.sqrt(2.0)))


def save_scores(scores: Iterable[NuisanceScore], path) -> None:
    lines = ["id,y_cls,feature_value,llr"]
    lines += [f"{s.id},{s.y_cls},{s.feature_value!r},{s.llr!r}" for s in scores]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_summary(summary: NuisanceGaussianSummary, empirical_eer: float, path) -> None:
    text = ("mu_ell,d_ell,sigma2_ell,gaussian_eer,empirical_eer\n"
            f"{summary.mu_ell!r},{summary.d_ell!r},{summary.sigma2_ell!r},"
            f"{summary.gaussian_eer!r},{empirical_eer!r}\n")
    Path(path).write_text(text, encoding="utf-8")
