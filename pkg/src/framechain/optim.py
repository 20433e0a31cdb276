"""Quasi-Newton minimization with a strong-Wolfe line search.

The CRF is trained by minimizing the negated regularized log-likelihood
over the whole training set in one batch. The default solver is
limited-memory BFGS (two-loop recursion); a full-matrix BFGS mode and a
fixed-step gradient-descent fallback are available via `method`.

Line search follows the standard bracket-then-zoom scheme with cubic
interpolation; every accepted step satisfies the strong Wolfe conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-5   # sup-norm
    lbfgs_memory: int = 10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_search_steps: int = 30
    method: str = "lbfgs"              # lbfgs | bfgs | gd
    gd_step_size: float = 0.01

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.lbfgs_memory < 1:
            raise ValueError("lbfgs_memory must be >= 1")
        if not 0 < self.wolfe_c1 < 1:
            raise ValueError("wolfe_c1 must lie in (0, 1)")
        if not self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("wolfe_c2 must lie in (c1, 1)")
        if self.max_line_search_steps < 1:
            raise ValueError("max_line_search_steps must be >= 1")
        if self.method not in ("lbfgs", "bfgs", "gd"):
            raise ValueError("unknown method %r" % self.method)


@dataclass
class OptimReport:
    iterations_used: int
    final_objective: float
    final_gradient_norm: float
    objective_trace: list
    converged: bool
    step_lengths: list = field(default_factory=list)
    message: str = ""


def _check_finite(value, grad, where):
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise ValueError("non-finite objective or gradient at %s" % where)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolant on [a, b]; None if degenerate."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sqrt(disc)
    if b < a:
        d2 = -d2
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def _zoom(phi, lo, hi, f0, g0, c1, c2, max_steps):
    """Refine a bracketing interval until a strong-Wolfe point is found.

    lo/hi are (alpha, f, g) triples; lo always has the lower function
    value of points satisfying sufficient decrease.
    """
    for _ in range(max_steps):
        a_lo, f_lo, g_lo = lo
        a_hi, f_hi, g_hi = hi
        a = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        width = abs(a_hi - a_lo)
        lo_a, hi_a = min(a_lo, a_hi), max(a_lo, a_hi)
        if a is None or not np.isfinite(a) or a <= lo_a + 0.05 * width \
                or a >= hi_a - 0.05 * width:
            a = 0.5 * (a_lo + a_hi)
        f, g = phi(a)
        if f > f0 + c1 * a * g0 or f >= f_lo:
            hi = (a, f, g)
        else:
            if abs(g) <= -c2 * g0:
                return a, f, g
            if g * (a_hi - a_lo) >= 0:
                hi = lo
            lo = (a, f, g)
    return None


def _strong_wolfe_search(f_and_grad, x, f0, grad0, direction, c1, c2,
                         max_steps):
    """Bracketing strong-Wolfe line search along `direction`.

    Returns (alpha, f_new, grad_new) or None on failure.
    """
    g0 = float(grad0 @ direction)
    if g0 >= 0:
        return None
    cache = {}

    def phi(a):
        if a not in cache:
            f, g = f_and_grad(x + a * direction)
            cache[a] = (float(f), g)
        f, g = cache[a]
        return f, float(g @ direction)

    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = 1.0
    for i in range(max_steps):
        f, g = phi(a)
        if not np.isfinite(f):
            raise ValueError(
                "non-finite objective in line search at step %g" % a)
        if f > f0 + c1 * a * g0 or (i > 0 and f >= f_prev):
            res = _zoom(phi, (a_prev, f_prev, g_prev), (a, f, g),
                        f0, g0, c1, c2, max_steps)
            break
        if abs(g) <= -c2 * g0:
            res = (a, f, g)
            break
        if g >= 0:
            res = _zoom(phi, (a, f, g), (a_prev, f_prev, g_prev),
                        f0, g0, c1, c2, max_steps)
            break
        a_prev, f_prev, g_prev = a, f, g
        a *= 2.0
    else:
        res = None
    if res is None:
        return None
    alpha = res[0]
    return alpha, cache[alpha][0], cache[alpha][1]


def lbfgs_minimize(f_and_grad, init, config=None):
    """Minimize f from `init`; returns (x, OptimReport).

    `f_and_grad` maps a parameter vector to (value, gradient). Converged
    means the gradient sup-norm fell below `gradient_tolerance`. On line
    search failure the best point so far is returned with
    converged=False and a diagnostic message.
    """
    if config is None:
        config = OptimConfig()
    x = np.asarray(init, dtype=np.float64).copy()
    n = x.shape[0]
    f, grad = f_and_grad(x)
    f = float(f)
    grad = np.asarray(grad, dtype=np.float64)
    _check_finite(f, grad, "initial point")

    trace = [f]
    steps = []
    s_hist, y_hist, rho_hist = [], [], []
    H_full = np.eye(n) if config.method == "bfgs" else None
    gamma = 1.0

    grad_norm = float(np.max(np.abs(grad)))
    if grad_norm <= config.gradient_tolerance:
        return x, OptimReport(0, f, grad_norm, trace, True,
                              message="initial point already converged")

    message = ""
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        if config.method == "gd":
            direction = -grad
        elif config.method == "bfgs":
            direction = -(H_full @ grad)
        else:
            direction = _two_loop(grad, s_hist, y_hist, rho_hist, gamma)
        if float(grad @ direction) >= 0:
            # fall back to steepest descent if curvature info went bad
            direction = -grad

        if config.method == "gd":
            alpha = config.gd_step_size
            f_new, grad_new = f_and_grad(x + alpha * direction)
            f_new = float(f_new)
            grad_new = np.asarray(grad_new, dtype=np.float64)
            _check_finite(f_new, grad_new, "iteration %d" % it)
            if f_new > f:
                message = "gradient step increased objective at iteration %d" % it
                it -= 1
                break
        else:
            result = _strong_wolfe_search(
                f_and_grad, x, f, grad, direction,
                config.wolfe_c1, config.wolfe_c2,
                config.max_line_search_steps)
            if result is None:
                message = "line search failed at iteration %d" % it
                it -= 1
                break
            alpha, f_new, grad_new = result
            grad_new = np.asarray(grad_new, dtype=np.float64)
            _check_finite(f_new, grad_new, "iteration %d" % it)

        s = alpha * direction
        y = grad_new - grad
        sy = float(s @ y)
        if sy > 1e-16:
            if config.method == "bfgs":
                rho = 1.0 / sy
                V = np.eye(n) - rho * np.outer(s, y)
                H_full = V @ H_full @ V.T + rho * np.outer(s, s)
            else:
                s_hist.append(s)
                y_hist.append(y)
                rho_hist.append(1.0 / sy)
                if len(s_hist) > config.lbfgs_memory:
                    s_hist.pop(0)
                    y_hist.pop(0)
                    rho_hist.pop(0)
                gamma = sy / float(y @ y)

        x = x + s
        f, grad = f_new, grad_new
        trace.append(f)
        steps.append(alpha)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= config.gradient_tolerance:
            converged = True
            break

    grad_norm = float(np.max(np.abs(grad)))
    if not converged and not message:
        message = "iteration budget exhausted"
    return x, OptimReport(it, f, grad_norm, trace, converged,
                          step_lengths=steps, message=message)


def _two_loop(grad, s_hist, y_hist, rho_hist, gamma):
    """L-BFGS two-loop recursion for the search direction."""
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist),
                         reversed(rho_hist)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    r = gamma * q
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist),
                              reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return -r


def train_crf(data, init, config=None):
    """Fit CRF parameters by minimizing the negated objective over the
    entire dataset per evaluation. Returns (trained model, OptimReport)."""
    from . import crf

    if config is None:
        config = OptimConfig()
    label_set, d = init.label_set, init.d
    for obs, labels in data.items:
        if obs.d != d:
            raise ValueError("feature dimension mismatch: model d=%d, "
                             "sequence d=%d" % (d, obs.d))
        if np.any(labels.labels >= label_set.K):
            raise ValueError("label index out of range for K=%d" % label_set.K)

    def neg_objective(theta):
        model = crf.CrfModel.from_vector(label_set, d, theta)
        value, grad = crf.objective_and_gradient(model, data)
        return -value, -grad

    theta, report = lbfgs_minimize(neg_objective, init.to_vector(), config)
    return crf.CrfModel.from_vector(label_set, d, theta), report
