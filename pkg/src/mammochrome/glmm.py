"""Logistic mixed model with crossed random intercepts (reader and case).

correct ~ condition + (1 | reader) + (1 | case), Bernoulli errors.

Fitting is Laplace-approximated maximum likelihood: an inner Newton solve
for the random-effect modes (the joint objective is strictly concave, so
this converges fast), and an outer L-BFGS-B over the fixed effects and the
two log-variances. Standard errors are Wald, from a central-difference
Hessian of the Laplace log-likelihood at the optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import stats as spstats
from scipy.optimize import minimize
from scipy.special import expit

REFERENCE_CONDITION = "grayscale-only"
SUBSETS = ("all", "reference-positive", "reference-negative")

SEPARATION_LIMIT = 15.0  # |beta| beyond this on the logit scale is flagged


@dataclass
class GlmmFit:
    """Fixed effects with Wald stats, variance components, and fit state."""
    coefficients: dict           # name -> {estimate, se, p}
    sigma2_reader: float
    sigma2_case: float
    loglik: float
    converged: bool
    n_trials: int
    subset: str
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients,
            "sigma2_reader": self.sigma2_reader,
            "sigma2_case": self.sigma2_case,
            "loglik": self.loglik,
            "converged": self.converged,
            "n_trials": self.n_trials,
            "subset": self.subset,
            "flags": list(self.flags),
        }


def _bernoulli_loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # sum of y*eta - log(1 + e^eta), stable at both tails
    return float(np.sum(y * eta) - np.sum(np.logaddexp(0.0, eta)))


class _LaplaceProblem:
    """Caches index structure; evaluates the Laplace log-likelihood."""

    def __init__(self, y, X, reader_idx, case_idx, n_readers, n_cases):
        self.y = y
        self.X = X
        self.ridx = reader_idx
        self.cidx = case_idx
        self.R = n_readers
        self.C = n_cases
        self.q = n_readers + n_cases
        self.b_warm = np.zeros(self.q)

    def _joint(self, b, eta_fixed, s2r, s2c) -> float:
        u, v = b[:self.R], b[self.R:]
        eta = eta_fixed + u[self.ridx] + v[self.cidx]
        return (_bernoulli_loglik(eta, self.y)
                - 0.5 * float(u @ u) / s2r - 0.5 * float(v @ v) / s2c)

    def _mode(self, eta_fixed, s2r, s2c, tol=1e-9, max_iter=100):
        """Newton with step halving; returns (b_hat, cholesky of H at mode)."""
        b = self.b_warm.copy()
        obj = self._joint(b, eta_fixed, s2r, s2c)
        chol = None
        for _ in range(max_iter):
            u, v = b[:self.R], b[self.R:]
            eta = eta_fixed + u[self.ridx] + v[self.cidx]
            p = expit(eta)
            w = p * (1.0 - p) + 1e-12
            resid = self.y - p
            grad = np.concatenate([
                np.bincount(self.ridx, weights=resid, minlength=self.R) - u / s2r,
                np.bincount(self.cidx, weights=resid, minlength=self.C) - v / s2c,
            ])
            hu = np.bincount(self.ridx, weights=w, minlength=self.R) + 1.0 / s2r
            hv = np.bincount(self.cidx, weights=w, minlength=self.C) + 1.0 / s2c
            cross = np.zeros((self.R, self.C))
            np.add.at(cross, (self.ridx, self.cidx), w)
            H = np.zeros((self.q, self.q))
            H[:self.R, :self.R] = np.diag(hu)
            H[self.R:, self.R:] = np.diag(hv)
            H[:self.R, self.R:] = cross
            H[self.R:, :self.R] = cross.T
            chol = sla.cho_factor(H, lower=True)
            if np.max(np.abs(grad)) < tol:
                break
            step = sla.cho_solve(chol, grad)
            t = 1.0
            for _ in range(30):
                cand = b + t * step
                cand_obj = self._joint(cand, eta_fixed, s2r, s2c)
                if cand_obj >= obj - 1e-12:
                    b, obj = cand, cand_obj
                    break
                t *= 0.5
            else:
                break  # no improving step; mode is as good as it gets
        self.b_warm = b
        return b, obj, chol

    def loglik(self, beta, log_s2r, log_s2c) -> float:
        s2r, s2c = math.exp(log_s2r), math.exp(log_s2c)
        eta_fixed = self.X @ beta
        b, joint, chol = self._mode(eta_fixed, s2r, s2c)
        logdet_h = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        # joint already holds the quadratic forms; add the prior and Laplace
        # normalizers: -(1/2)(R log 2*pi*s2r + C log 2*pi*s2c) from the
        # random-effect densities, +(q/2) log 2*pi - (1/2) log det H from the
        # Gaussian integral around the mode. The 2*pi terms cancel exactly.
        return (joint
                - 0.5 * (self.R * math.log(s2r) + self.C * math.log(s2c))
                - 0.5 * logdet_h)


def fit_glmm_core(y, X, reader_idx, case_idx, coef_names,
                  subset: str = "all", trace: list | None = None) -> GlmmFit:
    """Fit the crossed-intercept logistic model on prepared arrays.

    trace, when given, collects the Laplace log-likelihood at every
    accepted outer-optimizer iterate (it never decreases).
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    reader_idx = np.asarray(reader_idx)
    case_idx = np.asarray(case_idx)
    n_readers = int(reader_idx.max()) + 1
    n_cases = int(case_idx.max()) + 1
    prob = _LaplaceProblem(y, X, reader_idx, case_idx, n_readers, n_cases)
    k = X.shape[1]

    def neg_ll(theta):
        return -prob.loglik(theta[:k], theta[k], theta[k + 1])

    mean = min(max(float(y.mean()), 1e-3), 1 - 1e-3)
    x0 = np.zeros(k + 2)
    x0[0] = math.log(mean / (1 - mean))
    x0[k] = x0[k + 1] = math.log(0.5)
    bounds = [(-30.0, 30.0)] * k + [(-12.0, 6.0)] * 2
    callback = None
    if trace is not None:
        trace.append(-neg_ll(x0))
        callback = lambda xk: trace.append(-neg_ll(xk))
    res = minimize(neg_ll, x0, method="L-BFGS-B", bounds=bounds, callback=callback,
                   options={"maxiter": 200, "ftol": 1e-11, "gtol": 1e-7})
    theta = res.x
    beta = theta[:k]
    s2r, s2c = math.exp(theta[k]), math.exp(theta[k + 1])

    flags = []
    separated = bool(np.any(np.abs(beta) > SEPARATION_LIMIT))
    if separated:
        flags.append("separation-suspected")
    # projected gradient: components pinned at an active bound do not count
    pg = np.array(res.jac, dtype=np.float64)
    for i, (lo, hi) in enumerate(bounds):
        if theta[i] <= lo + 1e-10 and pg[i] > 0:
            pg[i] = 0.0
        elif theta[i] >= hi - 1e-10 and pg[i] < 0:
            pg[i] = 0.0
    grad_ok = bool(np.max(np.abs(pg)) < 0.05)
    if not grad_ok:
        flags.append("gradient-above-tolerance")

    # Wald covariance from a central-difference Hessian over all parameters
    h = 1e-4
    dim = k + 2
    hess = np.zeros((dim, dim))
    f0 = res.fun
    for i in range(dim):
        for j in range(i, dim):
            ei = np.zeros(dim); ei[i] = h
            ej = np.zeros(dim); ej[j] = h
            if i == j:
                val = (neg_ll(theta + ei) - 2 * f0 + neg_ll(theta - ei)) / h ** 2
            else:
                val = (neg_ll(theta + ei + ej) - neg_ll(theta + ei - ej)
                       - neg_ll(theta - ei + ej) + neg_ll(theta - ei - ej)) / (4 * h ** 2)
            hess[i, j] = hess[j, i] = val
    ses = np.full(k, math.nan)
    try:
        cov = np.linalg.inv(hess)
        diag = np.diag(cov)[:k]
        if np.all(diag > 0):
            ses = np.sqrt(diag)
        else:
            flags.append("hessian-not-pd")
    except np.linalg.LinAlgError:
        flags.append("hessian-singular")

    coefficients = {}
    for name, est, se in zip(coef_names, beta, ses):
        if math.isfinite(se) and se > 0:
            p = float(2.0 * spstats.norm.sf(abs(est / se)))
        else:
            p = math.nan
        coefficients[name] = {"estimate": float(est), "se": float(se), "p": p}

    converged = bool(res.success) and not separated and grad_ok
    return GlmmFit(coefficients=coefficients, sigma2_reader=s2r, sigma2_case=s2c,
                   loglik=float(-res.fun), converged=converged,
                   n_trials=len(y), subset=subset, flags=tuple(flags))


def glmm_fit(trials, subset: str = "all", trace: list | None = None) -> GlmmFit:
    """Fit correct ~ condition + (1|reader) + (1|case) on trial rows.

    Each trial is a mapping with reader_id, case_id, condition, correct
    (0/1), and reference (0/1 truth for the case). subset selects the three
    prespecified models: all trials (accuracy), reference-positive rows
    (sensitivity), or reference-negative rows (specificity).
    """
    if subset not in SUBSETS:
        raise ValueError(f"subset must be one of {SUBSETS}, got {subset!r}")
    rows = list(trials)
    if subset == "reference-positive":
        rows = [t for t in rows if t["reference"] == 1]
    elif subset == "reference-negative":
        rows = [t for t in rows if t["reference"] == 0]
    readers = sorted({t["reader_id"] for t in rows})
    cases = sorted({t["case_id"] for t in rows})
    conditions = sorted({t["condition"] for t in rows})
    if len(readers) < 2 or len(cases) < 2 or len(conditions) < 2:
        raise ValueError(
            f"need >= 2 readers, cases, and conditions in subset {subset!r}; "
            f"got {len(readers)}/{len(cases)}/{len(conditions)}")
    if REFERENCE_CONDITION in conditions:
        conditions = [REFERENCE_CONDITION] + [c for c in conditions
                                              if c != REFERENCE_CONDITION]
    rmap = {r: i for i, r in enumerate(readers)}
    cmap = {c: i for i, c in enumerate(cases)}
    y = np.array([float(t["correct"]) for t in rows])
    ridx = np.array([rmap[t["reader_id"]] for t in rows])
    cidx = np.array([cmap[t["case_id"]] for t in rows])
    X = np.ones((len(rows), len(conditions)))
    names = ["intercept"]
    for j, cond in enumerate(conditions[1:], start=1):
        X[:, j] = [1.0 if t["condition"] == cond else 0.0 for t in rows]
        names.append(f"condition[{cond}]")
    return fit_glmm_core(y, X, ridx, cidx, names, subset=subset, trace=trace)


def simulate_trials(n_readers: int, n_cases: int, beta0: float,
                    beta_condition: float, sigma_reader: float,
                    sigma_case: float, seed: int,
                    conditions=("grayscale-only", "tdce-only"),
                    prevalence: float = 0.5) -> list:
    """Generate Bernoulli trials from the model the fitter assumes.

    Every reader reads every case under every condition; the non-reference
    conditions add beta_condition to the logit. Used by the recovery tests.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    u = rng.normal(0.0, sigma_reader, size=n_readers)
    v = rng.normal(0.0, sigma_case, size=n_cases)
    reference = (rng.random(n_cases) < prevalence).astype(int)
    trials = []
    for r in range(n_readers):
        for c in range(n_cases):
            for cond in conditions:
                eta = beta0 + u[r] + v[c]
                if cond != conditions[0]:
                    eta += beta_condition
                correct = int(rng.random() < expit(eta))
                trials.append({
                    "reader_id": f"R{r:02d}", "case_id": f"C{c:03d}",
                    "condition": cond, "correct": correct,
                    "reference": int(reference[c]),
                })
    return trials
