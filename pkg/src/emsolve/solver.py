"""High-order exponential-integrator sampling on a precomputed coefficient table.

The local update transits from an anchor state to a later lambda by Taylor
expansion of the reparameterized model output g; the needed lambda-derivatives
of g are estimated from previous function values, either by solving the small
polynomial-matching linear system exactly (full order) or by a
divided-difference recurrence that uses only the nearest k+1 values for the
k-th derivative ("pseudo" order, more stable at very few steps).

The global multistep sampler caches states and noise predictions, re-derives
g values against each step's anchor, and optionally refines each step with a
corrector that reuses the new model evaluation (no extra NFE).  A sampling
run is strictly sequential; independent runs can share the immutable tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .integrals import CoefficientProvider, EkCache, IntegralTable
from .models import ModelSpec
from .schedule import Schedule, TimeGrid

CORRECTOR_NONE = "none"
CORRECTOR_FULL = "full"
CORRECTOR_HALF = "half"

_MAX_PREDICTOR_ORDER = 3


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Sampler settings: predictor order, corrector strategy, timestep grid.

    ``order`` is the predictor's order (1 to 3).  A corrector of the same
    order runs after each step when ``corrector`` is "full" ("half" restricts
    it to the late, low-t part of sampling); ``pseudo_corrector`` raises the
    corrector to order+1 using the divided-difference derivative estimates.
    ``pseudo_predictor`` switches the predictor's derivative estimation to the
    divided-difference form at the same order.
    """

    order: int
    grid: TimeGrid
    corrector: str = CORRECTOR_NONE
    pseudo_predictor: bool = False
    pseudo_corrector: bool = False

    def __post_init__(self):
        if not 1 <= self.order <= _MAX_PREDICTOR_ORDER:
            raise ValueError(
                f"order must be in [1, {_MAX_PREDICTOR_ORDER}] (got {self.order}); "
                "4th order is available as the pseudo corrector on an order-3 run"
            )
        if self.corrector not in (CORRECTOR_NONE, CORRECTOR_FULL, CORRECTOR_HALF):
            raise ValueError(f"unknown corrector {self.corrector!r}")
        if self.corrector != CORRECTOR_NONE and self.order < 2:
            raise ValueError("a corrector has order >= 2; use order >= 2 or corrector='none'")
        if self.pseudo_corrector and self.corrector == CORRECTOR_NONE:
            raise ValueError("pseudo_corrector requires a corrector strategy")


@dataclass
class SolverState:
    """Ring buffers of cached states and noise predictions, aligned to steps."""

    capacity: int
    positions: list = field(default_factory=list)
    states: list = field(default_factory=list)
    noises: list = field(default_factory=list)

    def push(self, pos: int, x: np.ndarray, eps: np.ndarray):
        self.positions.append(pos)
        self.states.append(x)
        self.noises.append(eps)
        if len(self.positions) > self.capacity:
            del self.positions[0], self.states[0], self.noises[0]

    def fetch(self, pos: int):
        i = self.positions.index(pos)
        return self.states[i], self.noises[i]


@dataclass(frozen=True, eq=False)
class DerivativeStack:
    """Scaled derivative estimates g_hat[k] ~= g^(k)/k! for k = 0..n."""

    deltas: np.ndarray
    g_hat: list


def _check_deltas(deltas):
    deltas = np.asarray(deltas, dtype=float)
    n = len(deltas)
    if n < 1 or n > _MAX_PREDICTOR_ORDER:
        raise ValueError(f"need 1..{_MAX_PREDICTOR_ORDER} offsets, got {n}")
    if np.any(deltas == 0.0) or len(np.unique(deltas)) != n:
        raise ValueError(f"lambda offsets must be nonzero and distinct, got {deltas}")
    return deltas


def estimate_derivatives(deltas, g_diffs):
    """Solve the polynomial-matching system for (g^(1), g^(2)/2!, ..., g^(n)/n!).

    ``deltas[k]`` is the lambda offset of extra point k from the anchor and
    ``g_diffs[k]`` the difference of its g value from the anchor's.  The n x n
    system is solved by elimination with partial pivoting.
    """
    deltas = _check_deltas(deltas)
    n = len(deltas)
    if n == 1:
        return [np.asarray(g_diffs[0]) / deltas[0]]
    rhs = np.stack([np.asarray(g, dtype=float) for g in g_diffs])
    tail = rhs.shape[1:]
    matrix = np.vander(deltas, n + 1, increasing=True)[:, 1:]
    sol = np.linalg.solve(matrix, rhs.reshape(n, -1))
    return [sol[k].reshape(tail) for k in range(n)]


def estimate_derivatives_pseudo(deltas, g_values):
    """Divided-difference estimates matching :func:`estimate_derivatives` output.

    ``g_values`` holds the anchor's g first, then the g at each delta.  The
    k-th returned entry (g^(k)/k!) uses only the first k+1 points, via the
    triangular recurrence of divided differences, so it equals the exact
    solve only for k = n or on exactly-polynomial data.
    """
    deltas = _check_deltas(deltas)
    n = len(deltas)
    if len(g_values) != n + 1:
        raise ValueError(f"need {n + 1} g values (anchor first), got {len(g_values)}")
    if n == 1:
        return [(np.asarray(g_values[1]) - np.asarray(g_values[0])) / deltas[0]]
    offsets = np.concatenate([[0.0], deltas])
    table = [np.asarray(g, dtype=float) for g in g_values]
    out = []
    for k in range(1, n + 1):
        table = [
            (table[i + 1] - table[i]) / (offsets[i + k] - offsets[i])
            for i in range(len(table) - 1)
        ]
        out.append(table[0])
    return out


def explicit_vandermonde_solution(deltas, g_diffs):
    """Closed-form top coefficient g^(n)/n! from the partial-fraction inverse row."""
    deltas = _check_deltas(deltas)
    offsets = np.concatenate([[0.0], deltas])
    total = 0.0
    for p in range(1, len(offsets)):
        denom = np.prod([offsets[p] - offsets[q] for q in range(len(offsets)) if q != p])
        total = total + np.asarray(g_diffs[p - 1]) / denom
    return total


def lupdate(
    tab: IntegralTable,
    cache: EkCache | None,
    anchor: tuple,
    extras: list,
    j_t: int,
    pseudo: bool = False,
):
    """One local transition from the anchor grid point to grid point ``j_t``.

    ``anchor`` is (grid index, state, g value); ``extras`` is a
    nearest-first list of (grid index, g value) pairs supplying the higher
    derivative estimates.  All g values must be expressed against this
    anchor.  Returns the approximated state at ``j_t``.
    """
    j_s, x_s, g_s = anchor
    grid = tab.lambda_grid
    lam_s, lam_t = float(grid[j_s]), float(grid[j_t])
    if lam_t < lam_s:
        raise ValueError(f"target lambda {lam_t} precedes anchor lambda {lam_s}")
    coeffs = CoefficientProvider(tab, cache)
    sched = tab.ems.schedule

    stack = _derivative_stack(grid, j_s, g_s, extras, pseudo)
    total = np.zeros_like(np.asarray(x_s, dtype=float))
    for k, g_hat_k in enumerate(stack.g_hat):
        total = total + math.factorial(k) * g_hat_k * coeffs.Ek(j_s, j_t, k)

    alpha_s = sched.alpha_lambda(lam_s)
    alpha_t = sched.alpha_lambda(lam_t)
    return alpha_t * coeffs.A(j_s, j_t) * (x_s / alpha_s - coeffs.int_EB(j_s, j_t) - total)


def _derivative_stack(grid, j_s, g_s, extras, pseudo) -> DerivativeStack:
    if not extras:
        return DerivativeStack(deltas=np.empty(0), g_hat=[np.asarray(g_s, dtype=float)])
    deltas = np.array([grid[j] - grid[j_s] for j, _ in extras])
    if pseudo:
        scaled = estimate_derivatives_pseudo(deltas, [g_s] + [g for _, g in extras])
    else:
        scaled = estimate_derivatives(deltas, [g - g_s for _, g in extras])
    return DerivativeStack(deltas=deltas, g_hat=[np.asarray(g_s, dtype=float)] + scaled)


def _snap_grid(tab: IntegralTable, grid: TimeGrid):
    """Snap sampling lambdas to table indices; they must stay strictly increasing."""
    idx = [tab.ems.index_of(lam) for lam in grid.lambdas]
    if np.any(np.diff(idx) <= 0):
        raise ValueError(
            "sampling grid is finer than the coefficient table; "
            "increase the table's timestep count"
        )
    return idx


def multistep_sample(
    model: ModelSpec,
    sched: Schedule,
    tab: IntegralTable,
    cfg: SolverConfig,
    x_init,
):
    """Multistep predictor-corrector sampling over the configured grid.

    Runs exactly ``M`` noise-prediction calls for an ``M``-interval grid:
    one on the initial state and one per step except the last (the
    corrector reuses the step's evaluation instead of adding one).  Early
    steps ramp the order up as history becomes available.  Returns the final
    state and a per-step trace.
    """
    idx = _snap_grid(tab, cfg.grid)
    lams = tab.ems.lambda_grid[idx]
    ts = np.asarray(sched.t_of_lambda(lams), dtype=float)
    num_steps = len(idx) - 1
    cache = EkCache()
    coeffs = CoefficientProvider(tab, cache)
    half_threshold = 0.5 * sched.t_domain[1]

    x0 = np.asarray(x_init, dtype=float)
    state = SolverState(capacity=cfg.order + 1)
    state.push(0, x0, model.eps(sched, x0, lams[0]))
    trace = []

    for m in range(1, num_steps + 1):
        n_m = min(cfg.order, m)
        j_anchor = idx[m - 1]
        x_prev, _ = state.fetch(m - 1)

        def g_at(pos, x, eps):
            a, b, c = coeffs.g_abc(j_anchor, idx[pos])
            return a * x + b * eps + c

        g_anchor = g_at(m - 1, *state.fetch(m - 1))
        extras = [(idx[p], g_at(p, *state.fetch(p))) for p in range(m - 2, m - 1 - n_m, -1)]
        x_pred = lupdate(
            tab, cache, (j_anchor, x_prev, g_anchor), extras, idx[m], pseudo=cfg.pseudo_predictor
        )

        if m == num_steps:
            trace.append(_trace_row(ts[m], lams[m], x_pred, None, None))
            return x_pred, trace

        eps_pred = model.eps(sched, x_pred, lams[m])
        g_new = g_at(m, x_pred, eps_pred)

        n_c = n_m + 1 if cfg.pseudo_corrector else n_m
        apply_corrector = (
            cfg.corrector != CORRECTOR_NONE
            and n_c >= 2
            and (cfg.corrector == CORRECTOR_FULL or ts[m] <= half_threshold)
        )
        if apply_corrector:
            corr_extras = [(idx[m], g_new)] + [
                (idx[p], g_at(p, *state.fetch(p))) for p in range(m - 2, m - n_c, -1)
            ]
            x_corr = lupdate(
                tab,
                cache,
                (j_anchor, x_prev, g_anchor),
                corr_extras,
                idx[m],
                pseudo=cfg.pseudo_corrector,
            )
            # adjust the cached noise prediction so the corrected pair maps to
            # the same g value: a*dx + b*(l/sigma)*dx = 0 by construction
            eps_corr = eps_pred + tab.ems.l[idx[m]] * (x_corr - x_pred) / sched.sigma_lambda(
                lams[m]
            )
            state.push(m, x_corr, eps_corr)
            trace.append(_trace_row(ts[m], lams[m], x_corr, eps_corr, g_new))
        else:
            state.push(m, x_pred, eps_pred)
            trace.append(_trace_row(ts[m], lams[m], x_pred, eps_pred, g_new))

    return state.states[-1], trace


def _trace_row(t, lam, x, eps, g):
    return {
        "t": float(t),
        "lambda": float(lam),
        "x": np.asarray(x, dtype=float).tolist(),
        "eps": None if eps is None else np.asarray(eps, dtype=float).tolist(),
        "eps_norm": None if eps is None else float(np.linalg.norm(eps)),
        "g_norm": None if g is None else float(np.linalg.norm(g)),
    }


def singlestep_sample(
    model: ModelSpec,
    sched: Schedule,
    tab: IntegralTable,
    cfg: SolverConfig,
    x_init,
):
    """Singlestep sampling: independent macro steps of ``order`` substeps each.

    Derivatives are built only from values inside the current macro step,
    all anchored at its first point.  When the grid length is not a multiple
    of the order, the final macro step runs at the remainder's (lower)
    order.  Corrector and pseudo flags do not apply to this path.
    """
    idx = _snap_grid(tab, cfg.grid)
    lams = tab.ems.lambda_grid[idx]
    total = len(idx) - 1
    cache = EkCache()
    coeffs = CoefficientProvider(tab, cache)

    x = np.asarray(x_init, dtype=float)
    eps = model.eps(sched, x, lams[0])
    start = 0
    while start < total:
        width = min(cfg.order, total - start)
        j_anchor = idx[start]
        members = [(start, x, eps)]  # (position, state, noise) within the macro step
        for i in range(width):
            a, b, c = coeffs.g_abc(j_anchor, idx[start])
            g_anchor = a * members[0][1] + b * members[0][2] + c
            extras = []
            for pos, xs, es in reversed(members[1:]):
                aa, bb, cc = coeffs.g_abc(j_anchor, idx[pos])
                extras.append((idx[pos], aa * xs + bb * es + cc))
            x = lupdate(tab, cache, (j_anchor, members[0][1], g_anchor), extras, idx[start + i + 1])
            if start + i + 1 != total:
                eps = model.eps(sched, x, lams[start + i + 1])
                members.append((start + i + 1, x, eps))
        start += width
    return x


def ddim_step(sched: Schedule, x_s, eps_s, t_s: float, t_t: float):
    """Classical first-order deterministic update from t_s down to t_t."""
    if t_t > t_s:
        raise ValueError(f"need t_t <= t_s, got {t_t} > {t_s}")
    alpha_s = sched.alpha(t_s)
    alpha_t = sched.alpha(t_t)
    sigma_s = sched.sigma(t_s)
    sigma_t = sched.sigma(t_t)
    x_s = np.asarray(x_s, dtype=float)
    return (alpha_t / alpha_s) * x_s - alpha_t * (sigma_s / alpha_s - sigma_t / alpha_t) * np.asarray(
        eps_s, dtype=float
    )


def ddim_sample(model: ModelSpec, sched: Schedule, timesteps, x_init):
    """Run the first-order baseline over a decreasing sequence of timesteps."""
    ts = np.asarray(timesteps, dtype=float)
    x = np.asarray(x_init, dtype=float)
    for i in range(len(ts) - 1):
        eps = model.eps(sched, x, sched.lambda_of_t(ts[i]))
        x = ddim_step(sched, x, eps, float(ts[i]), float(ts[i + 1]))
    return x
