"""Weighted stretched-exponential fits with a bounded Levenberg-Marquardt solver."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .core import RelaxationParams, decay_signal

PARAM_NAMES = ("contrast", "rate", "stretch", "offset")
DEFAULT_BOUNDS = ((-0.05, 0.5), (1.0, 1e7), (0.3, 1.5), (1e-12, np.inf))


class FitConvergenceError(RuntimeError):
    """Raised when the solver exhausts its iterations; carries the last iterate."""

    def __init__(self, message, last_params=None, diagnostics=None):
        super().__init__(message)
        self.last_params = last_params
        self.diagnostics = diagnostics or {}


def model(tau, theta):
    contrast, rate, stretch, offset = theta
    return contrast * np.exp(-((rate * tau) ** stretch)) + offset


def jacobian(tau, theta):
    contrast, rate, stretch, offset = theta
    x = rate * tau
    u = x ** stretch
    e = np.exp(-u)
    with np.errstate(divide="ignore", invalid="ignore"):
        logx = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0)
    jac = np.empty((len(tau), 4))
    jac[:, 0] = e
    jac[:, 1] = -contrast * e * stretch * u / rate
    jac[:, 2] = -contrast * e * u * logx
    jac[:, 3] = 1.0
    return jac


@dataclass
class LMResult:
    theta: np.ndarray
    cost: float
    n_iter: int
    jac: np.ndarray


def levenberg_marquardt(tau, y, sigma, theta0, free, bounds=DEFAULT_BOUNDS,
                        max_iter=200, xtol=1e-8) -> LMResult:
    """Minimize the weighted residual sum of squares over the ``free`` parameters.

    Marquardt's diagonal scaling makes the damping independent of parameter
    units, which matters here because the rate spans seven decades. Bounds
    are enforced by projection; a component pinned at a bound that the step
    pushes outward is frozen for that iteration.
    """
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    theta = np.clip(np.asarray(theta0, dtype=float), lo, hi)
    free = np.asarray(free, dtype=bool)
    w = 1.0 / sigma

    def resid(th):
        return (model(tau, th) - y) * w

    r = resid(theta)
    cost = 0.5 * r @ r
    lam = 1e-3
    nu = 2.0
    for it in range(1, max_iter + 1):
        jac = jacobian(tau, theta) * w[:, None]
        jac[:, ~free] = 0.0
        g = jac.T @ r
        pinned = ((theta <= lo) & (g > 0)) | ((theta >= hi) & (g < 0))
        active = free & ~pinned
        if not active.any() or np.max(np.abs(g[active])) <= 1e-300:
            return LMResult(theta, cost, it, jac)
        ja = jac[:, active]
        a = ja.T @ ja
        ga = g[active]
        diag = np.maximum(np.diag(a), 1e-300)
        while True:
            try:
                step_a = np.linalg.solve(a + lam * np.diag(diag), -ga)
            except np.linalg.LinAlgError:
                step_a = np.linalg.lstsq(a + lam * np.diag(diag), -ga, rcond=None)[0]
            step = np.zeros(4)
            step[active] = step_a
            trial = np.clip(theta + step, lo, hi)
            actual = trial - theta
            r_new = resid(trial)
            cost_new = 0.5 * r_new @ r_new
            predicted = -(ga @ actual[active]) - 0.5 * actual[active] @ a @ actual[active]
            rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
            if np.isfinite(cost_new) and cost_new < cost and rho > 0:
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                break
            lam *= nu
            nu *= 2.0
            if lam > 1e16:
                # no descent direction left: stationary to working precision
                return LMResult(theta, cost, it, jac)
        rel = np.max(np.abs(actual) / (np.abs(theta) + 1e-12))
        theta, r, cost = trial, r_new, cost_new
        if rel < xtol or cost == 0.0:
            jac = jacobian(tau, theta) * w[:, None]
            jac[:, ~free] = 0.0
            return LMResult(theta, cost, it, jac)
    raise FitConvergenceError(
        f"no convergence after {max_iter} iterations",
        last_params=theta, diagnostics={"cost": cost, "damping": lam})


def initial_guess(tau, y, bounds=DEFAULT_BOUNDS):
    """Parameter-free start: asymptote from the tail, 1/e crossing for the rate."""
    order = np.argsort(tau)
    t = np.asarray(tau, dtype=float)[order]
    v = np.asarray(y, dtype=float)[order]
    c0 = float(v[-2:].mean())
    amp = float(v[0] - c0)
    if amp <= 0:
        amp = max(1e-3, float(np.std(v)))
    level = c0 + amp / math.e
    below = np.nonzero(v < level)[0]
    if len(below) == 0 or below[0] == 0:
        tstar = float(np.median(t)) if len(below) == 0 else float(t[0])
    else:
        i = below[0]
        t0, t1, v0, v1 = t[i - 1], t[i], v[i - 1], v[i]
        tstar = float(t0 + (v0 - level) * (t1 - t0) / (v0 - v1))
    theta = np.array([amp, 1.0 / tstar, 1.0, c0])
    lo = [b[0] for b in bounds]
    hi = [b[1] for b in bounds]
    return np.clip(theta, lo, hi)


@dataclass
class FitResult:
    params: RelaxationParams
    param_sigmas: dict
    covariance: np.ndarray
    bootstrap_intervals: dict
    chi2_reduced: float
    reliable: bool
    notes: str = ""
    n_iter: int = 0
    rss: float = 0.0
    n_points: int = 0
    fixed_stretch: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.params.rate

    @property
    def rate_sigma(self) -> float:
        return self.param_sigmas["rate"]

    def decay_at(self, tau) -> float:
        """Spin part of the fitted curve, offset removed."""
        p = self.params
        return p.contrast * math.exp(-((p.rate * tau) ** p.stretch))


class StretchedExponentialRegressor(RegressorMixin, BaseEstimator):
    """Fit ``contrast * exp(-(rate * tau) ** stretch) + offset`` to a T1 curve.

    ``X`` holds dark times in seconds, one per row. Pass ``sigma`` to
    :meth:`fit` for absolute weights; without it the covariance is rescaled
    by the reduced chi-square.
    """

    def __init__(self, fix_p=None, n_bootstrap=200, max_iter=200, xtol=1e-8,
                 bounds=DEFAULT_BOUNDS, random_state=None, n_jobs=None):
        self.fix_p = fix_p
        self.n_bootstrap = n_bootstrap
        self.max_iter = max_iter
        self.xtol = xtol
        self.bounds = bounds
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _solve(self, tau, y, sigma, theta0):
        free = np.ones(4, dtype=bool)
        if self.fix_p is not None:
            free[2] = False
            theta0 = np.array(theta0, dtype=float)
            theta0[2] = self.fix_p
        return levenberg_marquardt(tau, y, sigma, theta0, free, self.bounds,
                                   self.max_iter, self.xtol)

    def fit(self, X, y, sigma=None):
        tau = check_array(X, ensure_2d=False, dtype=float).reshape(len(X), -1)[:, 0]
        y = check_array(y, ensure_2d=False, dtype=float)
        check_consistent_length(tau, y)
        absolute = sigma is not None
        sigma = np.ones_like(y) if sigma is None else check_array(sigma, ensure_2d=False, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be > 0")
        if np.any(tau < 0):
            raise ValueError("dark times must be >= 0")
        n_free = 4 if self.fix_p is None else 3
        if len(tau) <= n_free:
            raise ValueError(f"need more than {n_free} points, got {len(tau)}")

        res = self._solve(tau, y, sigma, initial_guess(tau, y, self.bounds))
        theta = res.theta
        dof = len(tau) - n_free
        chi2_red = 2 * res.cost / dof
        notes = []

        free = np.ones(4, dtype=bool)
        if self.fix_p is not None:
            free[2] = False
        cov = np.zeros((4, 4))
        jf = res.jac[:, free]
        hess = jf.T @ jf
        singular = False
        # judge conditioning on the unit-diagonal form so parameter scales drop out
        d = np.sqrt(np.clip(np.diag(hess), 1e-300, None))
        scaled = hess / np.outer(d, d)
        try:
            cond = np.linalg.cond(scaled)
            singular = not np.isfinite(cond) or cond > 1e10
            sub = (np.linalg.pinv(scaled) if singular else np.linalg.inv(scaled)) / np.outer(d, d)
        except np.linalg.LinAlgError:
            singular = True
            sub = np.linalg.pinv(hess)
        if not absolute:
            sub = sub * chi2_red
        cov[np.ix_(free, free)] = sub
        if singular:
            notes.append("near-singular curvature")
        sig = np.sqrt(np.clip(np.diag(cov), 0, None))

        self.coef_ = theta
        self.covariance_ = cov
        self.param_sigmas_ = sig
        self.chi2_reduced_ = chi2_red
        self.rss_ = 2 * res.cost
        self.n_iter_ = res.n_iter
        self.n_points_ = len(tau)
        self.params_ = RelaxationParams(*theta)
        self.bootstrap_intervals_ = self._bootstrap(tau, y, sigma, theta)

        reliable = not singular
        if abs(theta[0]) <= sig[0]:
            reliable = False
            notes.append("contrast consistent with zero")
        if not theta[1] > 0 or sig[1] / theta[1] > 1:
            reliable = False
            notes.append("rate relative error exceeds 1")
        self.reliable_ = reliable
        self.notes_ = "; ".join(notes)
        return self

    def _bootstrap(self, tau, y, sigma, theta):
        n = self.n_bootstrap or 0
        intervals = np.column_stack([theta, theta]).astype(float)
        if n <= 0:
            return intervals
        fitted = model(tau, theta)
        k = 4 if self.fix_p is None else 3
        std_res = (y - fitted) / sigma * math.sqrt(len(y) / (len(y) - k))
        seed = 0 if self.random_state is None else self.random_state

        def draw(i):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            y_star = fitted + sigma * rng.choice(std_res, size=len(y), replace=True)
            try:
                return self._solve(tau, y_star, sigma, theta).theta
            except FitConvergenceError as exc:
                return exc.last_params

        if self.n_jobs in (None, 1):
            draws = [draw(i) for i in range(n)]
        else:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                draws = list(pool.map(draw, range(n)))
        draws = np.array(draws)
        lo, hi = np.percentile(draws, [16, 84], axis=0)
        # the interval must contain the point estimate
        intervals[:, 0] = np.minimum(lo, theta)
        intervals[:, 1] = np.maximum(hi, theta)
        self.bootstrap_draws_ = draws
        return intervals

    def predict(self, X):
        check_is_fitted(self, "coef_")
        tau = check_array(X, ensure_2d=False, dtype=float).reshape(len(X), -1)[:, 0]
        return decay_signal(self.params_, tau)

    def to_result(self) -> FitResult:
        check_is_fitted(self, "coef_")
        return FitResult(
            params=self.params_,
            param_sigmas=dict(zip(PARAM_NAMES, map(float, self.param_sigmas_))),
            covariance=self.covariance_,
            bootstrap_intervals={k: (float(lo), float(hi)) for k, (lo, hi)
                                 in zip(PARAM_NAMES, self.bootstrap_intervals_)},
            chi2_reduced=float(self.chi2_reduced_),
            reliable=bool(self.reliable_),
            notes=self.notes_,
            n_iter=int(self.n_iter_),
            rss=float(self.rss_),
            n_points=int(self.n_points_),
            fixed_stretch=self.fix_p,
        )


def fit_stretched(curve, fix_p=None, n_bootstrap=200, random_state=0, n_jobs=None,
                  **kwargs) -> FitResult:
    """Fit a :class:`~fndrelax.analysis.T1Curve` and return a :class:`FitResult`."""
    est = StretchedExponentialRegressor(fix_p=fix_p, n_bootstrap=n_bootstrap,
                                        random_state=random_state, n_jobs=n_jobs, **kwargs)
    est.fit(curve.tau, curve.ratio, sigma=curve.sigma)
    return est.to_result()
