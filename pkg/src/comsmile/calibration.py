"""Local-vol calibration: quote normalization, level/skew fixed point, Anderson acceleration."""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .black import black_call, implied_vol
from .localvol import ETA_MAX, ETA_MIN, LocalVolSurface
from .market_data import EQUITY_STYLE, DiscountCurve, FuturesCurve, VolQuote, VolQuoteSet
from .meanrev import MeanReversion, as_mean_reversion
from .pde import DT_MAX, CallSurface, PdeGrid, solve_dupire
from .spot_model import CalibratedSpotModel, effective_strike

log = logging.getLogger(__name__)

BP = 1e-4


class CalibrationError(RuntimeError):
    """Quote normalization failure or a calibration that cannot start."""


# ---------------------------------------------------------------------------
# quote normalization


@dataclass(frozen=True)
class NormalizedQuote:
    quote: VolQuote
    F0: float
    k: float
    sigma: float
    premium: float


@dataclass(frozen=True)
class QuoteGrid:
    """Normalized quotes grouped by expiry pillar, each pillar sorted by effective strike."""

    times: Tuple[float, ...]
    pillars: Tuple[Tuple[NormalizedQuote, ...], ...]

    @property
    def strikes(self) -> List[np.ndarray]:
        return [np.array([q.k for q in p]) for p in self.pillars]

    @property
    def vols(self) -> List[np.ndarray]:
        return [np.array([q.sigma for q in p]) for p in self.pillars]

    @property
    def atm_indices(self) -> List[int]:
        # nearest node to k = 1; argmin keeps the lower strike on ties
        return [int(np.argmin(np.abs(k - 1.0))) for k in self.strikes]

    def __len__(self):
        return sum(len(p) for p in self.pillars)


def normalize_quotes(quotes: VolQuoteSet, curve: FuturesCurve, discount: Optional[DiscountCurve],
                     a) -> QuoteGrid:
    """Map futures-option quotes onto normalized-spot strikes and vols.

    A future-style premium ``F0 c_BS(t, K/F0, sigma)`` equals
    ``F0 e^{-A} c(t, k_F)``, so the normalized target is
    ``e^{A} c_BS(t, K/F0, sigma)`` at strike ``k_F``.  Equity-style premiums
    are first deflated by ``P_0(T_p)``; the result is the same target.

    Raises
    ------
    CalibrationError
        If an effective strike is not positive, a premium leaves the Black
        band, or two quotes land on the same normalized node.
    """
    a = as_mean_reversion(a)
    by_t: Dict[float, List[NormalizedQuote]] = {}
    for q in quotes:
        F0 = float(curve(q.t_last))
        A = float(a.integral(q.expiry, q.t_last))
        k = float(effective_strike(a, q.expiry, q.t_last, q.strike, F0))
        if not k > 0:
            raise CalibrationError(
                f"quote {q.contract}@{q.strike}: strike at or below absorbing level "
                f"{F0 * (1 - math.exp(-A)):.6g}")
        if q.style == EQUITY_STYLE and discount is not None and not float(discount(q.payment_time)) > 0:
            raise CalibrationError(f"quote {q.contract}@{q.strike}: no discount factor at payment")
        # an equity-style premium carries P_0(T_p) on both sides, so after
        # deflation both styles share this target
        target = math.exp(A) * float(black_call(q.expiry, q.strike / F0, q.vol))
        if A == 0.0:
            sigma = q.vol
        else:
            try:
                sigma = float(implied_vol(target, q.expiry, k))
            except ValueError as exc:
                raise CalibrationError(f"quote {q.contract}@{q.strike}: {exc}") from None
        by_t.setdefault(round(q.expiry, 12), []).append(NormalizedQuote(q, F0, k, sigma, target))
    times, pillars = [], []
    for t in sorted(by_t):
        row = tuple(sorted(by_t[t], key=lambda n: n.k))
        ks = np.array([n.k for n in row])
        if np.any(np.diff(ks) <= 1e-10):
            raise CalibrationError(f"two quotes share a normalized strike at expiry {t}")
        times.append(row[0].quote.expiry)
        pillars.append(row)
    if not pillars:
        raise CalibrationError("no quotes to calibrate")
    return QuoteGrid(tuple(times), tuple(pillars))


# ---------------------------------------------------------------------------
# model vols and the fixed-point map


def model_vols(surface: CallSurface, grid: QuoteGrid) -> List[np.ndarray]:
    """Normalized implied vols of the model at every quote node."""
    out = []
    for t, k in zip(grid.times, grid.strikes):
        c = np.atleast_1d(surface.price(t, k))
        lower = np.maximum(1.0 - k, 0.0)
        c = np.clip(c, lower + 1e-300, 1.0 - 1e-16)
        try:
            out.append(np.atleast_1d(implied_vol(c, t, k)))
        except ValueError as exc:
            raise CalibrationError(f"model price outside Black band at t={t}: {exc}") from None
    return out


def futures_vols(vols: Sequence[np.ndarray], grid: QuoteGrid, a) -> List[np.ndarray]:
    """Convert normalized vols back to futures-option Black vols at the quoted strikes."""
    a = as_mean_reversion(a)
    out = []
    for t, sig, pillar in zip(grid.times, vols, grid.pillars):
        if a.is_zero:
            out.append(np.asarray(sig, float))
            continue
        decay = np.exp(-np.array([float(a.integral(t, n.quote.t_last)) for n in pillar]))
        k = np.array([n.k for n in pillar])
        moneyness = np.array([n.quote.strike / n.F0 for n in pillar])
        c = decay * black_call(t, k, np.asarray(sig, float))
        out.append(np.atleast_1d(implied_vol(c, t, moneyness)))
    return out


def _skew(k: np.ndarray, v: np.ndarray) -> np.ndarray:
    if k.size < 2:
        return np.zeros_like(v)
    return np.gradient(v, k, edge_order=1)


@dataclass
class StepInfo:
    clipped: int = 0
    stalled: bool = False


def update_nodes(eta: Sequence[np.ndarray], target: Sequence[np.ndarray],
                 model: Sequence[np.ndarray], strikes: Sequence[np.ndarray],
                 atm: Sequence[int], mode: str = "level_skew") -> List[np.ndarray]:
    """Apply the asymptotic correction to every pillar (no clipping).

    ``mode="level_skew"`` scales by the ATM vol ratio and adds
    ``2 (skew_mkt - skew_model) (k_j - k_atm)`` off the ATM node;
    ``mode="level"`` scales each node by its own vol ratio.
    """
    out = []
    for e, s_mkt, s_mod, k, j in zip(eta, target, model, strikes, atm):
        e = np.asarray(e, float)
        if mode == "level":
            out.append(e * s_mkt / s_mod)
            continue
        if mode != "level_skew":
            raise ValueError(f"unknown update mode {mode!r}")
        new = e * (s_mkt[j] / s_mod[j])
        corr = 2.0 * (_skew(k, s_mkt) - _skew(k, s_mod)) * (k - k[j])
        corr[j] = 0.0
        out.append(new + corr)
    return out


def fixed_point_step(eta: LocalVolSurface, grid: QuoteGrid, a, pde_grid: PdeGrid,
                     mode: str = "level_skew", damping: float = 0.5):
    """One calibration update: a single PDE solve, then the node correction.

    Returns ``(new_surface, model_vols, info)``.  Nodes are clipped to the
    surface bounds; if every node clips, the step is damped by ``damping``
    and reported as a stall.
    """
    surface = solve_dupire(eta, a, pde_grid)
    vols = model_vols(surface, grid)
    new = np.concatenate(update_nodes(eta.values, grid.vols, vols, grid.strikes,
                                      grid.atm_indices, mode))
    old = eta.node_vector()
    clipped = np.clip(new, eta.eta_min, eta.eta_max)
    n_clip = int(np.sum(clipped != new))
    info = StepInfo(n_clip, n_clip == new.size)
    if info.stalled:
        log.warning("every local-vol node clipped; damping the update by %s", damping)
        clipped = np.clip(old + damping * (clipped - old), eta.eta_min, eta.eta_max)
    return eta.with_nodes(clipped), vols, info


# ---------------------------------------------------------------------------
# Anderson acceleration


@dataclass
class AAState:
    """History of iterates and images for Anderson mixing with memory ``m``."""

    m: int = 5
    ridge: float = 1e-10
    xs: deque = field(default_factory=deque)
    gs: deque = field(default_factory=deque)
    fallbacks: int = 0

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("memory depth must be non-negative")
        self.xs = deque(self.xs, maxlen=self.m + 1)
        self.gs = deque(self.gs, maxlen=self.m + 1)

    @property
    def depth(self) -> int:
        return max(len(self.xs) - 1, 0)


def anderson_accelerate(state: AAState, x, fx) -> np.ndarray:
    """Record ``(x, f(x))`` and return the next iterate.

    Minimizes ``|sum_j alpha_j (f(x_j) - x_j)|`` subject to ``sum alpha = 1``
    in difference form, ``gamma = argmin |r_i - dR gamma|^2 + ridge |dR|^2 |gamma|^2``,
    and returns ``f(x_i) - dG gamma``.  With ``m = 0`` this is ``f(x)``.
    """
    x = np.atleast_1d(np.asarray(x, float))
    g = np.atleast_1d(np.asarray(fx, float))
    state.xs.append(x.copy())
    state.gs.append(g.copy())
    if state.m == 0 or len(state.xs) == 1:
        return g.copy()
    X = np.array(state.xs)
    G = np.array(state.gs)
    R = G - X
    r = R[-1]
    dR = np.diff(R, axis=0).T
    dG = np.diff(G, axis=0).T
    lam = state.ridge * float(np.sum(dR * dR))
    lhs = dR.T @ dR + lam * np.eye(dR.shape[1])
    try:
        gamma = np.linalg.solve(lhs, dR.T @ r)
    except np.linalg.LinAlgError:
        gamma = None
    if gamma is None or not np.all(np.isfinite(gamma)):
        state.fallbacks += 1
        log.info("singular Anderson system; taking a plain fixed-point step")
        return g.copy()
    return g - dG @ gamma


def anderson_solve(f: Callable[[np.ndarray], np.ndarray], x0, m: int = 5, tol: float = 1e-10,
                   max_iter: int = 100, ridge: float = 1e-10):
    """Iterate ``x <- AA(x, f(x))`` until ``|f(x) - x|_inf < tol``.

    Returns ``(x, iterations, residual_history)`` where ``x`` is the last
    evaluated image ``f(x)``.
    """
    state = AAState(m, ridge)
    x = np.atleast_1d(np.asarray(x0, float))
    history = []
    for i in range(max_iter + 1):
        fx = np.atleast_1d(np.asarray(f(x), float))
        res = float(np.max(np.abs(fx - x)))
        history.append(res)
        if res < tol:
            return fx, i, history
        x = anderson_accelerate(state, x, fx)
    return x, max_iter, history


# ---------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class CalibrationConfig:
    aa_memory: int = 5
    ridge: float = 1e-10
    tol_bp: float = 0.01
    threshold_bp: float = 0.1
    max_iter: int = 50
    mode: str = "level_skew"
    damping: float = 0.5
    eta_min: float = ETA_MIN
    eta_max: float = ETA_MAX
    time_interp: str = "flat"
    n_k: int = 2000
    concentration: float = 0.1
    dt_max: float = DT_MAX
    grading: float = 0.01


@dataclass
class IterationRecord:
    iteration: int
    max_bp: float
    rms_bp: float
    aa_depth: int
    clipped: int


@dataclass
class CalibrationReport:
    history: List[IterationRecord]
    nodes: List[np.ndarray]
    converged: bool
    iterations: int
    best_iteration: int
    threshold_bp: float
    flagged_pillars: List[float]
    elapsed: float
    max_slope: float
    aa_fallbacks: int = 0

    @property
    def max_bp(self) -> float:
        return self.history[self.best_iteration].max_bp

    def iterations_to(self, threshold_bp: float) -> Optional[int]:
        """First iteration whose max error is within ``threshold_bp``."""
        for rec in self.history:
            if rec.max_bp <= threshold_bp:
                return rec.iteration
        return None

    def to_rows(self) -> List[dict]:
        return [{"iteration": r.iteration, "max_bp": r.max_bp, "rms_bp": r.rms_bp,
                 "aa_depth": r.aa_depth, "clipped": r.clipped} for r in self.history]


def build_pde_grid(grid: QuoteGrid, config: CalibrationConfig) -> PdeGrid:
    sig = max(float(np.max(v)) for v in grid.vols)
    kmax_quote = max(float(np.max(k)) for k in grid.strikes)
    return PdeGrid.build(grid.times, sigma_max=max(sig, 0.2), n_k=config.n_k,
                         dt_max=config.dt_max, max_strike=kmax_quote,
                         concentration=config.concentration, grading=config.grading)


def _errors_bp(vols, grid: QuoteGrid, a) -> np.ndarray:
    fut = futures_vols(vols, grid, a)
    mkt = [np.array([n.quote.vol for n in p]) for p in grid.pillars]
    return np.concatenate([(f - m) / BP for f, m in zip(fut, mkt)])


def calibrate(quotes: VolQuoteSet, curve: FuturesCurve, discount: Optional[DiscountCurve], a,
              config: CalibrationConfig = CalibrationConfig(),
              initial: Optional[LocalVolSurface] = None,
              pde_grid: Optional[PdeGrid] = None) -> Tuple[CalibratedSpotModel, CalibrationReport]:
    """Fit local-vol nodes at the quotes' effective strikes.

    Starts from the normalized market vols (or ``initial``) and iterates the
    level/skew correction, mixed by Anderson acceleration with memory
    ``config.aa_memory`` (0 gives the plain fixed point).  Stops once the max
    futures-vol error is below ``config.tol_bp``; the run counts as converged
    if the best iterate is within ``config.threshold_bp``.  The best iterate
    is returned either way.
    """
    started = time.perf_counter()
    a = as_mean_reversion(a)
    grid = normalize_quotes(quotes, curve, discount, a)
    if pde_grid is None:
        pde_grid = build_pde_grid(grid, config)
    if initial is None:
        eta = LocalVolSurface(grid.times, tuple(grid.strikes), tuple(grid.vols), config.time_interp,
                              config.eta_min, config.eta_max)
    else:
        # resample onto this run's nodes; exact when the nodes already match
        eta = LocalVolSurface(grid.times, tuple(grid.strikes),
                              tuple(np.asarray(initial(t, k), float) for t, k in zip(grid.times, grid.strikes)),
                              config.time_interp, config.eta_min, config.eta_max)
    state = AAState(config.aa_memory, config.ridge)
    history: List[IterationRecord] = []
    best: Tuple[float, int, LocalVolSurface] = (math.inf, 0, eta)
    for it in range(config.max_iter + 1):
        x = eta.node_vector()
        new, vols, info = fixed_point_step(eta, grid, a, pde_grid, config.mode, config.damping)
        err = _errors_bp(vols, grid, a)
        rec = IterationRecord(it, float(np.max(np.abs(err))), float(np.sqrt(np.mean(err * err))),
                              state.depth, info.clipped)
        history.append(rec)
        log.debug("iteration %d: max %.4g bp, rms %.4g bp", it, rec.max_bp, rec.rms_bp)
        if rec.max_bp < best[0]:
            best = (rec.max_bp, it, eta)
        if rec.max_bp < config.tol_bp or it == config.max_iter:
            break
        nxt = anderson_accelerate(state, x, new.node_vector())
        eta = eta.with_nodes(np.clip(nxt, config.eta_min, config.eta_max))
    _, best_it, best_eta = best
    flagged = [t for t, k, j in zip(grid.times, grid.strikes, grid.atm_indices)
               if k.size > 1 and j in (0, k.size - 1)]
    report = CalibrationReport(history, [np.array(v) for v in best_eta.values],
                               history[best_it].max_bp <= config.threshold_bp, len(history) - 1,
                               best_it, config.threshold_bp, flagged,
                               time.perf_counter() - started, best_eta.max_slope(),
                               state.fallbacks)
    model = CalibratedSpotModel(curve, a, best_eta, pde_grid,
                                {"calibration": {"converged": report.converged,
                                                 "max_bp": report.max_bp,
                                                 "iterations": report.iterations}})
    return model, report
