"""Linear mixed-effects models for detector scores, fit by REML.

Supports fixed effects built from the score-model terms (class, Delta
features, class-split nuisance LLR slopes, ASV trial flags) and up to two
crossed random-intercept factors. Variance ratios gamma_k = sigma2_k /
sigma2_eps are found by cyclic golden-section search on log(gamma) and then
polished with Newton steps on the analytic REML gradient. Fixed effects and
BLUPs come from the penalized least-squares (mixed-model) equations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .interventions import CONFIG_BITS, ConfigQuadruple, config_from_name

LOG_GAMMA_BOUNDS = (-12.0, 12.0)
GOLDEN_TOL = 1e-8
MAX_CYCLES = 50
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0

TERMS = ("intercept", "class", "delta_pos", "delta_neg", "llr_split", "recording", "gender", "country")
FACTORS = ("group_a", "group_b")
_COEF_NAMES = {
    "intercept": ["mu"],
    "class": ["d"],
    "delta_pos": ["beta_bon"],
    "delta_neg": ["beta_spf"],
    "llr_split": ["beta_llr_bon", "beta_llr_spf"],
    "recording": ["beta_recording"],
    "gender": ["beta_gender"],
    "country": ["beta_country"],
}
_COVARIATE_ALIASES = {"recording": ("recording", "R"), "gender": ("gender", "G"), "country": ("country", "C"),
                      "delta_pos": ("delta_pos",), "delta_neg": ("delta_neg",), "llr_split": ("llr",)}


class LmeError(ValueError):
    pass


class MissingCovariateError(LmeError):
    pass


class RankDeficientError(LmeError):
    pass


class ZeroVarianceError(ValueError):
    pass


@dataclass
class ScoreTable:
    """Column-oriented score data: one row per trial."""

    ids: list
    scores: np.ndarray
    y_cls: np.ndarray
    covariates: dict
    group_a: Optional[list] = None
    group_b: Optional[list] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.y_cls = np.asarray(self.y_cls, dtype=np.int64)
        n = self.scores.size
        if not np.all(np.isfinite(self.scores)):
            raise LmeError("scores contain NaN or Inf")
        if len(self.ids) != n or self.y_cls.size != n:
            raise LmeError("ids, scores and labels differ in length")
        if not np.isin(self.y_cls, (0, 1)).all():
            raise LmeError("class labels must be 0 or 1")
        self.covariates = {k: np.asarray(v, dtype=np.float64) for k, v in self.covariates.items()}
        for name, values in self.covariates.items():
            if values.size != n:
                raise LmeError(f"covariate {name!r} has {values.size} values for {n} rows")
        for groups in (self.group_a, self.group_b):
            if groups is not None and len(groups) != n:
                raise LmeError("group column length differs from scores")

    def __len__(self) -> int:
        return self.scores.size

    def subset(self, mask) -> "ScoreTable":
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)

        def pick(seq):
            return None if seq is None else [seq[i] for i in idx]

        return ScoreTable([self.ids[i] for i in idx], self.scores[idx], self.y_cls[idx],
                          {k: v[idx] for k, v in self.covariates.items()}, pick(self.group_a), pick(self.group_b))

    @classmethod
    def from_csv(cls, path, score_column: str = "score", class_column: str = "y_cls",
                 group_a: Optional[str] = None, group_b: Optional[str] = None) -> "ScoreTable":
        """Read one or more delimited score files with a shared header.

        Numeric columns other than id/score/class become covariates.
        """
        paths = [path] if isinstance(path, (str, Path)) else list(path)
        rows, header = [], None
        for p in paths:
            with open(p, newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                if header is not None and reader.fieldnames != header:
                    raise LmeError(f"{p}: header differs from {paths[0]}")
                header = reader.fieldnames
                rows += list(reader)
        if not rows:
            raise LmeError(f"{paths}: no score rows")
        header = list(header)
        for col in (score_column, class_column):
            if col not in header:
                raise LmeError(f"{path}: missing column {col!r}")
        skip = {"id", score_column, class_column, group_a, group_b}
        covariates = {}
        for col in header:
            if col in skip:
                continue
            try:
                covariates[col] = [float(r[col]) for r in rows]
            except (TypeError, ValueError):
                continue  # non-numeric metadata column
        return cls(
            ids=[r["id"] for r in rows] if "id" in header else [str(k) for k in range(len(rows))],
            scores=[float(r[score_column]) for r in rows],
            y_cls=[int(r[class_column]) for r in rows],
            covariates=covariates,
            group_a=[r[group_a] or None for r in rows] if group_a else None,
            group_b=[r[group_b] or None for r in rows] if group_b else None,
        )


@dataclass(frozen=True)
class ModelFormula:
    fixed_terms: tuple
    random_factors: tuple = ()

    def __post_init__(self):
        terms = tuple(self.fixed_terms)
        unknown = [t for t in terms if t not in TERMS]
        if unknown:
            raise LmeError(f"unknown fixed terms {unknown}")
        if "intercept" not in terms or "class" not in terms:
            raise LmeError("intercept and class terms are always required")
        factors = tuple(self.random_factors)
        if any(f not in FACTORS for f in factors):
            raise LmeError(f"random factors must be drawn from {FACTORS}")
        object.__setattr__(self, "fixed_terms", terms)
        object.__setattr__(self, "random_factors", factors)


INTERVENTIONAL = ModelFormula(("intercept", "class", "delta_pos", "delta_neg"))
OBSERVATIONAL = ModelFormula(("intercept", "class", "llr_split"), ("group_a", "group_b"))
ASV = ModelFormula(("intercept", "class", "recording", "gender", "country"), ("group_a",))
FORMULAS = {"interventional": INTERVENTIONAL, "observational": OBSERVATIONAL, "asv": ASV}


@dataclass
class Factor:
    codes: np.ndarray  # level index per row, -1 when the row has no level
    levels: list

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass
class Design:
    y: np.ndarray
    X: np.ndarray
    names: list
    factors: dict = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return self.y.size


@dataclass
class LmeFit:
    names: list
    beta: np.ndarray
    se: np.ndarray
    sigma2_eps: float
    sigma2_a: float
    sigma2_b: float
    marginal_r2: float
    conditional_r2: float
    reml_deviance: float
    n_obs: int
    converged: bool
    blups: dict = field(default_factory=dict)
    log_gamma: dict = field(default_factory=dict)
    certificate: dict = field(default_factory=dict)

    def coef(self, name: str) -> float:
        try:
            return float(self.beta[self.names.index(name)])
        except ValueError:
            raise KeyError(f"fit has no coefficient {name!r}") from None

    def stderr(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def as_dict(self) -> dict:
        return dict(zip(self.names, map(float, self.beta)))


def zscore_normalize(scores) -> np.ndarray:
    """Standardize to mean 0 and sample standard deviation 1 (n-1 denominator)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise ZeroVarianceError("z-scoring needs at least two scores")
    sd = float(np.std(s, ddof=1))
    if not sd > 0.0:
        raise ZeroVarianceError("cannot z-score constant scores")
    return (s - s.mean()) / sd


def _covariate(table: ScoreTable, term: str) -> np.ndarray:
    for key in _COVARIATE_ALIASES[term]:
        if key in table.covariates:
            return table.covariates[key]
    raise MissingCovariateError(f"term {term!r} needs covariate column {_COVARIATE_ALIASES[term][0]!r}")


def _factor(groups: Optional[list], name: str) -> Factor:
    if groups is None:
        raise MissingCovariateError(f"random factor {name!r} needs a grouping column")
    levels = sorted({g for g in groups if g is not None})
    index = {g: k for k, g in enumerate(levels)}
    codes = np.array([-1 if g is None else index[g] for g in groups], dtype=np.int64)
    return Factor(codes, levels)


def build_design(table: ScoreTable, formula: ModelFormula) -> Design:
    """Response, fixed-effect matrix (columns in formula order) and factor codes.

    ``llr_split`` expands to the two class-conditional slope columns
    llr*y and llr*(1-y).
    """
    y = table.y_cls.astype(np.float64)
    columns, names = [], []
    for term in formula.fixed_terms:
        if term == "intercept":
            columns.append(np.ones(len(table)))
        elif term == "class":
            columns.append(y)
        elif term == "llr_split":
            ell = _covariate(table, term)
            columns += [ell * y, ell * (1.0 - y)]
        else:
            columns.append(_covariate(table, term))
        names += _COEF_NAMES[term]
    X = np.column_stack(columns)
    factors = {}
    for name in formula.random_factors:
        factors[name] = _factor(table.group_a if name == "group_a" else table.group_b, name)
    return Design(table.scores.copy(), X, names, factors)


class _Reml:
    """Profiled REML deviance over log variance ratios, from precomputed cross-products."""

    def __init__(self, design: Design, factor_names: Sequence[str]):
        self.y = design.y
        self.X = design.X
        self.n, self.p = design.X.shape
        self.factor_names = list(factor_names)
        self.codes, self.offsets, self.sizes = [], [], []
        offset = 0
        for name in self.factor_names:
            fac = design.factors[name]
            self.codes.append(fac.codes)
            self.offsets.append(offset)
            self.sizes.append(fac.n_levels)
            offset += fac.n_levels
        self.q = offset
        # Z as a list of (row, column) incidences.
        rows, cols = [], []
        for codes, off in zip(self.codes, self.offsets):
            r = np.flatnonzero(codes >= 0)
            rows.append(r)
            cols.append(codes[r] + off)
        self.z_rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        self.z_cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        self.ZtZ = np.zeros((self.q, self.q))
        for ra, ca in zip(rows, cols):
            for rb, cb in zip(rows, cols):
                both = np.zeros((self.n, 2), dtype=np.int64) - 1
                both[ra, 0] = ca
                both[rb, 1] = cb
                keep = (both[:, 0] >= 0) & (both[:, 1] >= 0)
                np.add.at(self.ZtZ, (both[keep, 0], both[keep, 1]), 1.0)
        self.ZtX = np.zeros((self.q, self.p))
        np.add.at(self.ZtX, self.z_cols, self.X[self.z_rows])
        self.Zty = np.bincount(self.z_cols, weights=self.y[self.z_rows], minlength=self.q)
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.y
        self.block = np.repeat(np.arange(len(self.factor_names)), self.sizes) if self.q else np.zeros(0, int)

    def _lambda(self, gamma: np.ndarray) -> np.ndarray:
        return np.sqrt(gamma[self.block]) if self.q else np.zeros(0)

    def solve(self, gamma: np.ndarray) -> dict:
        """Solve the penalized least-squares problem at variance ratios `gamma`."""
        lam = self._lambda(gamma)
        A = (lam[:, None] * self.ZtZ * lam[None, :]) + np.eye(self.q)
        L = cholesky(A, lower=True) if self.q else np.zeros((0, 0))
        cu = solve_triangular(L, lam * self.Zty, lower=True) if self.q else np.zeros(0)
        RZX = solve_triangular(L, lam[:, None] * self.ZtX, lower=True) if self.q else np.zeros((0, self.p))
        M = self.XtX - RZX.T @ RZX
        Lx = cholesky(M, lower=True)
        beta = cho_solve((Lx, True), self.Xty - RZX.T @ cu)
        u = solve_triangular(L.T, cu - RZX @ beta, lower=False) if self.q else np.zeros(0)
        b = lam * u
        fitted_random = np.zeros(self.n)
        if self.q:
            np.add.at(fitted_random, self.z_rows, b[self.z_cols])
        resid = self.y - self.X @ beta - fitted_random
        pwrss = float(resid @ resid + u @ u)
        dof = self.n - self.p
        logdet = 2.0 * float(np.sum(np.log(np.diag(L)))) + 2.0 * float(np.sum(np.log(np.diag(Lx))))
        deviance = logdet + dof * (1.0 + math.log(2.0 * math.pi * pwrss / dof))
        return {"beta": beta, "b": b, "u": u, "resid": resid, "pwrss": pwrss, "deviance": deviance,
                "L": L, "Lx": Lx, "lam": lam}

    def deviance(self, log_gamma: np.ndarray) -> float:
        return self.solve(np.exp(log_gamma))["deviance"]

    def gradient(self, gamma: np.ndarray) -> np.ndarray:
        """d deviance / d gamma_k = tr(Z_k' P Z_k) - (n-p) |Z_k' P y|^2 / (y' P y)."""
        sol = self.solve(gamma)
        lam, L, Lx = sol["lam"], sol["L"], sol["Lx"]
        # Z'V^{-1}Z and Z'V^{-1}X via Woodbury with V = I + Z Lambda Lambda Z'.
        W = solve_triangular(L, lam[:, None] * self.ZtZ, lower=True)
        ZVZ = self.ZtZ - W.T @ W
        Wx = solve_triangular(L, lam[:, None] * self.ZtX, lower=True)
        ZVX = self.ZtX - W.T @ Wx
        ZPZ = ZVZ - ZVX @ cho_solve((Lx, True), ZVX.T)
        Zr = np.bincount(self.z_cols, weights=sol["resid"][self.z_rows], minlength=self.q)
        dof = self.n - self.p
        grad = np.empty(len(self.factor_names))
        for k, (off, size) in enumerate(zip(self.offsets, self.sizes)):
            sl = slice(off, off + size)
            grad[k] = np.trace(ZPZ[sl, sl]) - dof * float(Zr[sl] @ Zr[sl]) / sol["pwrss"]
        return grad


def _golden(f, lo: float, hi: float, tol: float) -> tuple[float, float]:
    """Golden-section minimum of `f` on [lo, hi]; ties move toward the smaller argument."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def _newton_polish(reml: _Reml, log_gamma: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Refine interior log-gamma components by Newton steps on the analytic gradient."""
    lo, hi = LOG_GAMMA_BOUNDS
    x = log_gamma.copy()
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return x

    def grad_log(v):
        gamma = np.exp(v)
        return (reml.gradient(gamma) * gamma)[idx]

    f0 = reml.deviance(x)
    for _ in range(30):
        g = grad_log(x)
        h = 1e-5
        H = np.empty((idx.size, idx.size))
        for j, k in enumerate(idx):
            step = np.zeros_like(x)
            step[k] = h
            H[:, j] = (grad_log(x + step) - grad_log(x - step)) / (2.0 * h)
        H = 0.5 * (H + H.T)
        try:
            if np.any(np.linalg.eigvalsh(H) <= 0):
                break
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        candidate = x.copy()
        candidate[idx] = np.clip(x[idx] - delta, lo, hi)
        f1 = reml.deviance(candidate)
        if f1 > f0 + 1e-9 * max(1.0, abs(f0)):
            break
        x, f0 = candidate, min(f0, f1)
        if np.max(np.abs(delta)) < 1e-13:
            break
    return x


def fit_reml(design: Design, random_factors: Optional[Sequence[str]] = None) -> LmeFit:
    """Fit the mixed model by REML.

    Without random factors this is OLS with the (n - p) residual variance.
    Variance components that the search drives to the lower bound are
    compared against the exact boundary (gamma = 0) and set to zero when the
    boundary is at least as good.

    Raises:
        RankDeficientError: the fixed-effect matrix is rank deficient.
        LmeError: too few observations, or an active factor has < 2 levels.
    """
    factor_names = list(design.factors) if random_factors is None else list(random_factors)
    n, p = design.X.shape
    if n <= p:
        raise LmeError(f"need more observations ({n}) than fixed effects ({p})")
    if np.linalg.matrix_rank(design.X) < p:
        raise RankDeficientError(
            f"fixed-effect matrix with columns {design.names} is rank deficient"
            " (a single corner configuration ties the Delta features to the class; pool several)")
    for name in factor_names:
        if name not in design.factors:
            raise LmeError(f"design has no factor {name!r}")
        if design.factors[name].n_levels < 2:
            raise LmeError(f"factor {name!r} needs at least two levels")

    reml = _Reml(design, factor_names)
    n_f = len(factor_names)
    lo, hi = LOG_GAMMA_BOUNDS
    log_gamma = np.zeros(n_f)
    at_zero = np.zeros(n_f, dtype=bool)
    certificate: dict = {}
    converged = True

    def gamma_of(v, zero):
        g = np.exp(v)
        g[zero] = 0.0
        return g

    if n_f:
        converged = False
        best = reml.solve(gamma_of(log_gamma, at_zero))["deviance"]
        for _cycle in range(MAX_CYCLES):
            previous = log_gamma.copy()
            prev_best = best
            for k in range(n_f):
                def along(v, k=k):
                    trial = log_gamma.copy()
                    trial[k] = v
                    z = at_zero.copy()
                    z[k] = False
                    return reml.solve(gamma_of(trial, z))["deviance"]

                x_k, f_k = _golden(along, lo, hi, GOLDEN_TOL)
                zero_trial = at_zero.copy()
                zero_trial[k] = True
                f_zero = reml.solve(gamma_of(log_gamma, zero_trial))["deviance"]
                log_gamma[k] = x_k
                at_zero[k] = f_zero <= f_k
                best = min(f_k, f_zero)
            if np.max(np.abs(log_gamma - previous)) < 1e-6 and abs(prev_best - best) < 1e-10:
                converged = True
                break
        interior = ~at_zero & (log_gamma > lo + 1e-3) & (log_gamma < hi - 1e-3)
        log_gamma = _newton_polish(reml, log_gamma, interior)
        # optimality certificate: optimum vs both ends of every coordinate search
        final = reml.solve(gamma_of(log_gamma, at_zero))["deviance"]
        for k, name in enumerate(factor_names):
            ends = []
            for v in (lo, hi):
                trial = log_gamma.copy()
                trial[k] = v
                z = at_zero.copy()
                z[k] = False
                ends.append(reml.solve(gamma_of(trial, z))["deviance"])
            certificate[name] = {"deviance": final, "lower_end": ends[0], "upper_end": ends[1]}

    gamma = gamma_of(log_gamma, at_zero)
    sol = reml.solve(gamma)
    dof = n - p
    sigma2 = sol["pwrss"] / dof
    cov_beta = sigma2 * cho_solve((sol["Lx"], True), np.eye(p))
    variances = {name: float(gamma[k] * sigma2) for k, name in enumerate(factor_names)}
    blups = {}
    for k, name in enumerate(factor_names):
        off, size = reml.offsets[k], reml.sizes[k]
        blups[name] = dict(zip(design.factors[name].levels, map(float, sol["b"][off:off + size])))

    fit = LmeFit(
        names=list(design.names),
        beta=sol["beta"],
        se=np.sqrt(np.diag(cov_beta)),
        sigma2_eps=float(sigma2),
        sigma2_a=variances.get("group_a", 0.0),
        sigma2_b=variances.get("group_b", 0.0),
        marginal_r2=0.0,
        conditional_r2=0.0,
        reml_deviance=float(sol["deviance"]),
        n_obs=n,
        converged=converged,
        blups=blups,
        log_gamma={name: (-math.inf if at_zero[k] else float(log_gamma[k])) for k, name in enumerate(factor_names)},
        certificate=certificate,
    )
    fit.marginal_r2, fit.conditional_r2 = conditional_r2(fit, design)
    return fit


def reml_deviance(design: Design, sigma2_ratios: Mapping[str, float]) -> float:
    """REML deviance at given variance ratios (for diagnostics and tests)."""
    names = list(sigma2_ratios)
    reml = _Reml(design, names)
    return reml.solve(np.array([float(sigma2_ratios[k]) for k in names]))["deviance"]


def reml_gradient(design: Design, sigma2_ratios: Mapping[str, float]) -> np.ndarray:
    names = list(sigma2_ratios)
    reml = _Reml(design, names)
    return reml.gradient(np.array([float(sigma2_ratios[k]) for k in names]))


def conditional_r2(fit: LmeFit, design: Design) -> tuple[float, float]:
    """Marginal and conditional R^2 by variance partitioning.

    marginal = v_f / (v_f + s_a + s_b + s_e), conditional = (v_f + s_a + s_b) /
    (v_f + s_a + s_b + s_e), where v_f is the sample variance of the fitted
    fixed-effect predictor.
    """
    v_fixed = float(np.var(design.X @ fit.beta, ddof=1))
    v_random = fit.sigma2_a + fit.sigma2_b
    total = v_fixed + v_random + fit.sigma2_eps
    if total <= 0.0:
        return 0.0, 0.0
    return v_fixed / total, (v_fixed + v_random) / total


def _asv_flags(flags) -> tuple[int, int, int]:
    if isinstance(flags, str):
        return tuple(int(c) for c in flags)
    return tuple(int(b) for b in flags)


def class_mean_difference(fit: LmeFit, config) -> float:
    """E[s | y=1] - E[s | y=0] implied by the fitted model for a configuration.

    `config` is a named or explicit corner configuration for the
    interventional model, or a ``(target_flags, nontarget_flags)`` pair such
    as ``("011", "000")`` for the ASV model.
    """
    d = fit.coef("d")
    if isinstance(config, tuple) and len(config) == 2:
        t, nt = _asv_flags(config[0]), _asv_flags(config[1])
        return (d + fit.coef("beta_recording") * (t[0] - nt[0]) + fit.coef("beta_gender") * (t[1] - nt[1])
                + fit.coef("beta_country") * (t[2] - nt[2]))
    if isinstance(config, str):
        if config not in CONFIG_BITS and config != "IV_ps":
            raise KeyError(f"unknown configuration {config!r}")
        config = config_from_name(config)
    if not isinstance(config, ConfigQuadruple) or not config.is_corner:
        raise KeyError(f"class mean difference needs a corner configuration, got {config!r}")
    tr_neg, tr_pos, te_neg, te_pos = config.rho
    # per-class Delta pattern (delta_pos, delta_neg) of eval trials
    pos = (abs(te_pos - tr_pos), abs(te_pos - tr_neg))
    neg = (abs(te_neg - tr_pos), abs(te_neg - tr_neg))
    return d + fit.coef("beta_bon") * (pos[0] - neg[0]) + fit.coef("beta_spf") * (pos[1] - neg[1])


def format_fit_report(fit: LmeFit) -> str:
    lines = ["name,estimate"]
    lines += [f"{name},{value!r}" for name, value in zip(fit.names, map(float, fit.beta))]
    lines += [f"se_{name},{value!r}" for name, value in zip(fit.names, map(float, fit.se))]
    lines += [
        f"sigma2_eps,{fit.sigma2_eps!r}",
        f"sigma2_a,{fit.sigma2_a!r}",
        f"sigma2_b,{fit.sigma2_b!r}",
        f"marginal_r2,{fit.marginal_r2!r}",
        f"conditional_r2,{fit.conditional_r2!r}",
        f"converged,{int(fit.converged)}",
        f"n_obs,{fit.n_obs}",
    ]
    return "\n".join(lines) + "\n"


def save_fit_report(fit: LmeFit, path) -> None:
    Path(path).write_text(format_fit_report(fit), encoding="utf-8")
