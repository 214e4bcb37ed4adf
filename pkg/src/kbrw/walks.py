"""The spine walk under mass-1 exponential tilts.

Everything here is a plain one-dimensional random walk: first-passage
ensembles, ladder structure, the renewal function of the barrier problem,
Tanaka's pathwise construction of the walk conditioned to stay positive, the
min-record reweighting on top of it, and Doob h-transform stepping.

Conventions (fixed package-wide): the barrier at a is crossed downward when
S < a strictly and upward when S > a strictly; ascending ladder epochs are
strict records, descending ladders are strict records of -S; tau_star, the
return time used by the renewal function, is weak (first j >= 1 with
S_j >= 0).

All simulators take an explicit numpy Generator and are deterministic given
it; replica-level parallelism is layered on top by the command-line runner
through the block seed schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .estimates import EstimateWithCI, binomial_estimate
from .models import IidModel, PatternModel, FiniteStep, lattice_span, log_laplace

MASS_TOL = 1e-8          # |psi(rho)| must be below this for a probability tilt
DEFAULT_MAX_STEPS = 10 ** 7
_MEM_ELEMENTS = 1 << 23  # soft cap on elements per simulation chunk


class StoppingReason(Enum):
    HIT_ABOVE = 1
    HIT_BELOW = 2
    MAX_STEPS = 3


@dataclass
class WalkPath:
    start: float
    increments: np.ndarray
    stopping_reason: StoppingReason
    lower: float | None = None
    upper: float | None = None

    @property
    def positions(self) -> np.ndarray:
        out = np.empty(self.increments.size + 1)
        out[0] = self.start
        np.cumsum(self.increments, out=out[1:])
        out[1:] += self.start
        return out

    @property
    def final(self) -> float:
        return float(self.start + self.increments.sum())

    def overshoot(self) -> float:
        if self.stopping_reason is not StoppingReason.HIT_ABOVE:
            raise ValueError("path did not cross the upper level")
        return self.final - self.upper

    def undershoot(self) -> float:
        if self.stopping_reason is not StoppingReason.HIT_BELOW:
            raise ValueError("path did not cross the lower level")
        return self.lower - self.final


@dataclass
class LadderDecomposition:
    epochs: list            # [(sigma_n, H_n)] strict ascending records
    descending_epochs: list  # strict ascending records of -S, heights > 0


@dataclass
class TiltedWalk:
    """The walk whose step law is the e^{rho z}-tilt of the offspring intensity."""

    model: object
    rho: float
    step: object             # displacement law with sample/support/probs
    drift: float             # psi'(rho)
    variance: float          # psi''(rho)
    span: float | None       # lattice span of the step support, None if continuous
    name: str = ""
    _h1_cache: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def is_lattice(self) -> bool:
        return self.span is not None

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.step.sample(rng, n)


def make_tilted_walk(model, rho) -> TiltedWalk:
    """Build the spine walk for a mass-1 tilt.

    ``rho`` is a number or one of "star", "plus", "minus"; the tilt must
    satisfy |psi(rho)| <= 1e-8 (psi-roots, and rho_star in the critical case
    where it is itself a root).
    """
    if isinstance(rho, str):
        an = model.analytics()
        table = {"star": an.rho_star, "plus": an.rho_plus, "minus": an.rho_minus}
        if rho not in table:
            raise ValueError(f"unknown tilt name {rho!r}")
        value = table[rho]
        if value is None:
            raise ValueError(f"tilt {rho!r} undefined in the {an.regime.value} regime")
        name = rho
    else:
        value, name = float(rho), ""
    psi, dpsi, d2psi = log_laplace(model, value)
    if abs(psi) > MASS_TOL:
        raise ValueError(f"psi({value}) = {psi:.3e}: not a probability tilt")

    if isinstance(model, IidModel):
        step = model.step.tilted(value)
    elif isinstance(model, PatternModel):
        sup = model.displacement_support()
        weights = np.zeros(sup.size)
        for q, pat in zip(model.atom_probs, model.patterns):
            for z in pat:
                weights[np.searchsorted(sup, z)] += q * math.exp(value * z)
        step = FiniteStep(sup, weights / weights.sum())
    else:
        raise TypeError("unsupported model type")
    sup = step.support()
    span = lattice_span(sup) if sup is not None else None
    return TiltedWalk(model=model, rho=value, step=step, drift=dpsi,
                      variance=d2psi, span=span, name=name)


def cramer_gamma(values, probs) -> float:
    """The positive root of E[e^{-gamma X}] = 1 for a positive-drift step law.

    Gives the bound P(walk from h ever drops below 0) <= e^{-gamma h}.
    """
    vals = np.asarray(values, float)
    p = np.asarray(probs, float)
    if float((vals * p).sum()) <= 0:
        raise ValueError("Cramer root needs positive drift")
    f = lambda g: float((p * np.exp(-g * vals)).sum()) - 1.0
    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise ArithmeticError("no Cramer root below 1e6")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# first passage


@dataclass
class PassageEnsemble:
    reasons: np.ndarray      # StoppingReason values as int8
    finals: np.ndarray
    n_steps: np.ndarray
    lower: float | None
    upper: float | None

    @property
    def hit_above(self) -> np.ndarray:
        return self.reasons == StoppingReason.HIT_ABOVE.value

    @property
    def hit_below(self) -> np.ndarray:
        return self.reasons == StoppingReason.HIT_BELOW.value

    @property
    def truncated(self) -> np.ndarray:
        return self.reasons == StoppingReason.MAX_STEPS.value

    @property
    def truncated_fraction(self) -> float:
        return float(self.truncated.mean())

    def overshoots(self) -> np.ndarray:
        return self.finals[self.hit_above] - self.upper

    def undershoots(self) -> np.ndarray:
        return self.lower - self.finals[self.hit_below]

    def p_hit_upper(self, label: str = "") -> EstimateWithCI:
        est = binomial_estimate(int(self.hit_above.sum()), self.reasons.size, label=label)
        est.truncated_fraction = self.truncated_fraction
        return est


def passage_ensemble(walk: TiltedWalk, x, n_replicas: int, rng, *,
                     lower: float | None = 0.0, upper: float | None = None,
                     max_steps: int = DEFAULT_MAX_STEPS) -> PassageEnsemble:
    """First-passage outcomes for n_replicas independent walks started at x.

    ``x`` may be a scalar or an array of per-replica starts.  Barriers are
    strict on both sides; a replica that exhausts max_steps is reported as
    MAX_STEPS, never silently dropped.
    """
    if lower is None and upper is None:
        raise ValueError("need at least one barrier")
    starts = np.broadcast_to(np.asarray(x, float), (n_replicas,)).copy()
    reasons = np.zeros(n_replicas, np.int8)
    finals = np.empty(n_replicas)
    steps = np.zeros(n_replicas, np.int64)

    # immediate crossings (tau = inf{k >= 0}) resolve before any step
    if upper is not None:
        m = starts > upper
        reasons[m] = StoppingReason.HIT_ABOVE.value
        finals[m] = starts[m]
    if lower is not None:
        m = (reasons == 0) & (starts < lower)
        reasons[m] = StoppingReason.HIT_BELOW.value
        finals[m] = starts[m]

    active = np.flatnonzero(reasons == 0)
    pos = starts[active]
    used = np.zeros(active.size, np.int64)
    chunk = 16
    while active.size:
        chunk = min(2 * chunk, max(16, _MEM_ELEMENTS // active.size))
        c = int(min(chunk, max_steps - used.min()))
        c = max(c, 1)
        inc = walk.sample(rng, active.size * c).reshape(active.size, c)
        np.cumsum(inc, axis=1, out=inc)
        cum = inc
        cum += pos[:, None]
        hit = np.zeros(cum.shape, bool)
        if lower is not None:
            hit |= cum < lower
        if upper is not None:
            hit |= cum > upper
        any_hit = hit.any(axis=1)
        stop = np.argmax(hit, axis=1)

        done_rows = np.flatnonzero(any_hit)
        if done_rows.size:
            idx = active[done_rows]
            fin = cum[done_rows, stop[done_rows]]
            finals[idx] = fin
            steps[idx] = used[done_rows] + stop[done_rows] + 1
            if lower is not None and upper is not None:
                below = fin < lower
                reasons[idx] = np.where(below, StoppingReason.HIT_BELOW.value,
                                        StoppingReason.HIT_ABOVE.value)
            elif lower is not None:
                reasons[idx] = StoppingReason.HIT_BELOW.value
            else:
                reasons[idx] = StoppingReason.HIT_ABOVE.value

        keep = np.flatnonzero(~any_hit)
        active = active[keep]
        pos = cum[keep, -1]
        used = used[keep] + c
        if active.size:
            exhausted = used >= max_steps
            if exhausted.any():
                idx = active[exhausted]
                reasons[idx] = StoppingReason.MAX_STEPS.value
                finals[idx] = pos[exhausted]
                steps[idx] = used[exhausted]
                active = active[~exhausted]
                pos = pos[~exhausted]
                used = used[~exhausted]
    return PassageEnsemble(reasons=reasons, finals=finals, n_steps=steps,
                           lower=lower, upper=upper)


def simulate_until_passage(walk: TiltedWalk, x: float, rng, *,
                           upper: float | None = None, lower: float | None = None,
                           max_steps: int = 10 ** 6) -> WalkPath:
    """One path with its increments kept, stopped at the first strict crossing."""
    if upper is None and lower is None and max_steps >= DEFAULT_MAX_STEPS:
        raise ValueError("need a barrier or a finite max_steps")
    if upper is not None and x > upper:
        return WalkPath(x, np.empty(0), StoppingReason.HIT_ABOVE, lower, upper)
    if lower is not None and x < lower:
        return WalkPath(x, np.empty(0), StoppingReason.HIT_BELOW, lower, upper)
    pieces = []
    pos = x
    used = 0
    chunk = 64
    while used < max_steps:
        c = int(min(chunk, max_steps - used))
        inc = walk.sample(rng, c)
        cum = pos + np.cumsum(inc)
        hit = np.zeros(c, bool)
        if lower is not None:
            hit |= cum < lower
        if upper is not None:
            hit |= cum > upper
        if hit.any():
            stop = int(np.argmax(hit))
            pieces.append(inc[:stop + 1])
            reason = (StoppingReason.HIT_BELOW
                      if lower is not None and cum[stop] < lower
                      else StoppingReason.HIT_ABOVE)
            return WalkPath(x, np.concatenate(pieces), reason, lower, upper)
        pieces.append(inc)
        pos = float(cum[-1])
        used += c
        chunk = min(2 * chunk, 1 << 16)
    return WalkPath(x, np.concatenate(pieces), StoppingReason.MAX_STEPS, lower, upper)


def ladder_decompose(path: WalkPath) -> LadderDecomposition:
    """Strict ascending ladder epochs/heights, and the same for the mirror walk.

    Ascending heights are absolute positions S at the record times; descending
    heights are positive descent depths start - S, so they match the
    undershoot magnitudes used by the duality estimator.
    """
    pos = path.positions
    if pos.size < 2:
        return LadderDecomposition([], [])

    def strict_records(v):
        out = []
        best = v[0]
        for j in range(1, v.size):
            if v[j] > best:
                best = v[j]
                out.append((j, float(v[j])))
        return out

    mirror = path.start - (pos - path.start)
    descending = [(j, float(h - path.start)) for j, h in strict_records(mirror)]
    return LadderDecomposition(epochs=strict_records(pos),
                               descending_epochs=descending)


# ---------------------------------------------------------------------------
# renewal function


@dataclass
class RenewalEstimate:
    x_grid: np.ndarray
    r_values: list           # EstimateWithCI per grid point
    method: str              # "VisitCount" | "LadderDuality" | "ClosedForm"
    raw_violations: int = 0  # monotonicity violations before isotonic cleanup
    truncated_fraction: float = 0.0
    certification_bound: float = 0.0
    span: float | None = None

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.r_values])

    def isotonic_values(self) -> np.ndarray:
        return np.maximum.accumulate(self.values())

    def evaluate(self, x) -> np.ndarray:
        """R(x) by linear interpolation on the isotonic table; 0 below 0."""
        xs = np.asarray(x, float)
        top = self.x_grid[-1]
        if np.any(xs > top + 1e-12):
            raise ValueError(
                f"renewal table covers [0, {top}], needed up to {float(np.max(xs))}")
        vals = np.interp(xs, self.x_grid, self.isotonic_values())
        return np.where(xs < 0.0, 0.0, vals)


def _check_grid(x_grid) -> np.ndarray:
    grid = np.asarray(x_grid, float)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("x_grid must be strictly increasing")
    if grid[0] < 0:
        raise ValueError("x_grid must start at 0 or above")
    return grid


def _finish_renewal(grid, sums, sumsq, n, method, truncated, cert_bound, span):
    ests = []
    for k in range(grid.size):
        mean = sums[k] / n
        var = max(sumsq[k] / n - mean * mean, 0.0)
        ests.append(EstimateWithCI(
            value=float(mean), stderr=float(math.sqrt(var / n)), n_effective=float(n),
            truncated_fraction=truncated, label=f"R({grid[k]:g})"))
    vals = np.array([e.value for e in ests])
    violations = int(np.sum(np.diff(vals) < 0))
    return RenewalEstimate(x_grid=grid, r_values=ests, method=method,
                           raw_violations=violations, truncated_fraction=truncated,
                           certification_bound=cert_bound, span=span)


def renewal_function(walk: TiltedWalk, x_grid, n_replicas: int, rng, *,
                     method: str = "VisitCount",
                     max_steps: int = 10 ** 6,
                     block: int = 1 << 15) -> RenewalEstimate:
    """Estimate R(x) = E[# visits j < tau_star with S_j >= -x] on a grid.

    ``method`` "VisitCount" counts visits directly on walks run to tau_star
    (weak first nonnegative time, j >= 1); "LadderDuality" builds the renewal
    count 1 + #{n: H_1^- + ... + H_n^- <= x} from strict descending ladder
    heights.  Both require drift >= 0; recurrent zero-drift walks are capped
    at max_steps per replica with the truncated fraction reported (their
    partial counts bias R downward, which the duality cross-check bounds).
    """
    if walk.drift < -1e-9:
        raise ValueError("renewal function needs drift >= 0 (star or plus tilt)")
    grid = _check_grid(x_grid)
    if method == "VisitCount":
        return _renewal_visit_count(walk, grid, n_replicas, rng, max_steps, block)
    if method == "LadderDuality":
        return _renewal_duality(walk, grid, n_replicas, rng, max_steps, block)
    raise ValueError(f"unknown renewal method {method!r}")


def _renewal_visit_count(walk, grid, n_replicas, rng, max_steps, block):
    G = grid.size
    x_max = grid[-1]
    sums = np.zeros(G)
    sumsq = np.zeros(G)
    n_trunc = 0
    done_total = 0
    while done_total < n_replicas:
        b = min(block, n_replicas - done_total)
        done_total += b
        hist = np.zeros((b, G + 1), np.int64)
        trunc = np.zeros(b, bool)
        rows = np.arange(b)          # active -> block row
        pos = np.zeros(rows.size)
        used = np.zeros(rows.size, np.int64)
        chunk = 16
        while rows.size:
            chunk = min(2 * chunk, max(16, _MEM_ELEMENTS // rows.size))
            c = int(max(1, min(chunk, max_steps - used.min())))
            cum = walk.sample(rng, rows.size * c).reshape(rows.size, c)
            np.cumsum(cum, axis=1, out=cum)
            cum += pos[:, None]
            done = cum >= 0.0
            any_done = done.any(axis=1)
            stop = np.where(any_done, np.argmax(done, axis=1), c)
            # count strictly-negative visits before the stop, within window
            live = np.arange(c)[None, :] < stop[:, None]
            live &= cum >= -x_max
            ri, ci = np.nonzero(live)
            if ri.size:
                bins = np.searchsorted(grid, -cum[ri, ci], side="left")
                keys = rows[ri] * (G + 1) + bins
                hist += np.bincount(keys, minlength=hist.size).reshape(hist.shape)
            keep = ~any_done
            rows = rows[keep]
            pos = cum[keep, -1]
            used = used[keep] + c
            if rows.size:
                ex = used >= max_steps
                if ex.any():
                    trunc[rows[ex]] = True
                    rows, pos, used = rows[~ex], pos[~ex], used[~ex]
        counts = 1 + np.cumsum(hist[:, :G], axis=1, dtype=np.float64)
        sums += counts.sum(axis=0)
        sumsq += (counts * counts).sum(axis=0)
        n_trunc += int(trunc.sum())
    return _finish_renewal(grid, sums, sumsq, n_replicas, "VisitCount",
                           n_trunc / n_replicas, 0.0, walk.span)


def _renewal_duality(walk, grid, n_replicas, rng, max_steps, block):
    G = grid.size
    x_max = grid[-1]
    sup = walk.step.support()
    if walk.span is not None and sup is not None and abs(walk.drift) <= 1e-9 \
            and abs(float(np.min(sup)) + walk.span) <= 1e-12:
        # skip-free-down at zero drift: every descending ladder height is one
        # span and the ladder sequence never dies, so the duality sum
        # 1 + #{n: n*span <= x} is exact with no sampling at all
        values = np.floor(grid / walk.span + 1e-9) + 1.0
        ests = [EstimateWithCI(value=float(v), stderr=0.0, n_effective=math.inf,
                               label=f"R({x:g})") for v, x in zip(values, grid)]
        return RenewalEstimate(x_grid=grid, r_values=ests, method="LadderDuality",
                               span=walk.span)
    # drift-up walks terminate their ladder sequence with a Cramer certificate
    cutoff = None
    cert_per_event = 0.0
    if walk.drift > 1e-9:
        gamma = cramer_gamma(walk.step.support(), walk.step.probs()) \
            if walk.step.support() is not None else None
        if gamma is None:
            # continuous drift-up law: calibrate gamma from the mgf directly
            f = lambda g: walk.step.mgf_parts(-g)[0] - 1.0
            hi = 1.0
            while f(hi) < 0:
                hi *= 2.0
            lo = 0.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if f(mid) < 0 else (lo, mid)
            gamma = 0.5 * (lo + hi)
        cutoff = max(40.0 / gamma, x_max + 1.0)
        cert_per_event = math.exp(-gamma * cutoff)

    sums = np.zeros(G)
    sumsq = np.zeros(G)
    n_trunc = 0
    cert_bound = 0.0
    done_total = 0
    while done_total < n_replicas:
        b = min(block, n_replicas - done_total)
        done_total += b
        hist = np.zeros((b, G + 1), np.int64)
        trunc = np.zeros(b, bool)
        rows = np.arange(b)
        T = np.zeros(b)              # ladder partial sums per block row
        while rows.size:
            # one descending-ladder search for every active row
            ens = passage_ensemble(walk, 0.0, rows.size, rng,
                                   lower=0.0, upper=cutoff, max_steps=max_steps)
            found = ens.hit_below
            if cutoff is not None:
                cert_bound += cert_per_event * int(ens.hit_above.sum())
            trunc[rows[ens.truncated]] = True
            idx = rows[found]
            T[idx] += -ens.finals[found]
            ok = T[idx] <= x_max
            if ok.any():
                bins = np.searchsorted(grid, T[idx[ok]], side="left")
                np.add.at(hist, (idx[ok], bins), 1)
            rows = idx[ok]
        counts = 1 + np.cumsum(hist[:, :G], axis=1, dtype=np.float64)
        sums += counts.sum(axis=0)
        sumsq += (counts * counts).sum(axis=0)
        n_trunc += int(trunc.sum())
    return _finish_renewal(grid, sums, sumsq, n_replicas, "LadderDuality",
                           n_trunc / n_replicas, cert_bound / n_replicas, walk.span)


def closed_form_renewal(walk: TiltedWalk, x_grid) -> RenewalEstimate:
    """Exact R(x) for unit-up/unit-down lattice walks.

    Descending ladder heights are deterministic (= span), so R is a pure
    geometric sum: critical R(x) = floor(x/span)+1; drift-up R(x) =
    sum_{k<=floor(x/span)} r^k with r the ruin probability p_down/p_up.
    """
    sup = walk.step.support()
    if sup is None or walk.span is None:
        raise ValueError("closed-form renewal needs a lattice step law")
    s = walk.span
    vals = set(np.round(np.asarray(sup, float) / s).astype(int).tolist())
    if vals != {-1, 1}:
        raise ValueError("closed-form renewal implemented for +-span steps only")
    p_up = float(walk.step.probs()[np.argmax(sup)])
    grid = _check_grid(x_grid)
    m = np.floor(grid / s + 1e-9).astype(np.int64)
    if abs(walk.drift) <= 1e-9:
        r = 1.0
        values = (m + 1).astype(float)
    elif walk.drift > 0:
        r = (1.0 - p_up) / p_up
        values = (1.0 - r ** (m + 1)) / (1.0 - r)
    else:
        raise ValueError("closed-form renewal needs drift >= 0")
    ests = [EstimateWithCI(value=float(v), stderr=0.0, n_effective=math.inf,
                           label=f"R({x:g})") for v, x in zip(values, grid)]
    return RenewalEstimate(x_grid=grid, r_values=ests, method="ClosedForm",
                           span=s)


def estimate_C_R(walk: TiltedWalk, n_replicas: int, rng, *,
                 probe_t: float = 50.0,
                 max_steps: int = 10 ** 6) -> EstimateWithCI:
    """The renewal-limit constant C_R = lim R(x)/R-growth-unit.

    Critical tilt: 1/E[-S at first passage below 0] (mean undershoot from 0).
    Drift-up tilt: 1/P(never below 0), certified by a Cramer cutoff.  The
    returned extra dict carries the first-passage consistency probe
    C_R * t * P(up before down) (critical) or C_R * P(up before down)
    (drift-up), both of which approach 1.
    """
    if walk.drift < -1e-9:
        raise ValueError("C_R defined for drift >= 0 tilts")
    if abs(walk.drift) <= 1e-9:
        ens = passage_ensemble(walk, 0.0, n_replicas, rng,
                               lower=0.0, upper=None, max_steps=max_steps)
        under = ens.undershoots()
        mean = float(under.mean())
        se_mean = float(under.std(ddof=1) / math.sqrt(under.size))
        est = EstimateWithCI(value=1.0 / mean, stderr=se_mean / mean ** 2,
                             n_effective=float(under.size),
                             truncated_fraction=ens.truncated_fraction,
                             label="C_R")
        method = "undershoot"
        cert = 0.0
    else:
        sup = walk.step.support()
        if sup is not None:
            gamma = cramer_gamma(sup, walk.step.probs())
        else:
            f = lambda g: walk.step.mgf_parts(-g)[0] - 1.0
            hi = 1.0
            while f(hi) < 0:
                hi *= 2.0
            lo = 0.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if f(mid) < 0 else (lo, mid)
            gamma = 0.5 * (lo + hi)
        cutoff = 40.0 / gamma
        ens = passage_ensemble(walk, 0.0, n_replicas, rng,
                               lower=0.0, upper=cutoff, max_steps=max_steps)
        p = binomial_estimate(int(ens.hit_above.sum()), n_replicas)
        est = EstimateWithCI(value=1.0 / p.value, stderr=p.stderr / p.value ** 2,
                             n_effective=float(n_replicas),
                             truncated_fraction=ens.truncated_fraction,
                             label="C_R")
        method = "survival"
        cert = math.exp(-gamma * cutoff)

    probe = passage_ensemble(walk, 0.0, n_replicas, rng,
                             lower=0.0, upper=probe_t, max_steps=max_steps)
    p_probe = probe.p_hit_upper()
    if abs(walk.drift) <= 1e-9:
        product = est.value * probe_t * p_probe.value
    else:
        product = est.value * p_probe.value
    est.extra.update(method=method, probe_t=probe_t, probe_product=float(product),
                     probe_p=p_probe.value, certification_bound=cert)
    return est


# ---------------------------------------------------------------------------
# Tanaka's pathwise construction of the walk conditioned to stay positive


@dataclass
class TanakaEnsemble:
    zeta: np.ndarray         # (n_replicas, n_steps + 1); NaN tail where truncated
    truncated: np.ndarray    # replicas whose covering block never completed

    @property
    def truncated_fraction(self) -> float:
        return float(self.truncated.mean())

    def complete(self) -> np.ndarray:
        return self.zeta[~self.truncated]


def tanaka_ensemble(walk: TiltedWalk, n_steps: int, n_replicas: int, rng, *,
                    max_steps: int = 10 ** 6) -> TanakaEnsemble:
    """Paths of the conditioned-to-stay-positive walk via ladder-block surgery.

    Run the raw walk and, at every strict ascending ladder epoch, emit the
    just-completed block reversed and reflected: for sigma' < j <= sigma the
    conditioned value is zeta_j = S_{sigma'} + S_sigma - S_{sigma - (j - sigma')}.
    The path zeta_1..zeta_n is complete once a ladder epoch lands at or past n.
    Blocks are heavy-tailed for zero-drift walks, so replicas whose covering
    block is still open after max_steps raw steps come back truncated (NaN
    tail) rather than biased.
    """
    n = int(n_steps)
    if n < 0:
        raise ValueError("n_steps must be >= 0")
    Z = np.full((n_replicas, n + 1), np.nan)
    Z[:, 0] = 0.0
    truncated = np.zeros(n_replicas, bool)
    if n == 0:
        return TanakaEnsemble(Z, truncated)

    L = 2 * (n + 1)                     # ring of raw positions, covers lookbacks
    orig = np.arange(n_replicas)
    S = np.zeros(n_replicas)
    M = np.zeros(n_replicas)            # raw S at the last strict ladder epoch
    sig = np.zeros(n_replicas, np.int64)
    ring = np.zeros((n_replicas, L))
    t = 0
    chunk = 16
    while orig.size and t < max_steps:
        na = orig.size
        chunk = min(2 * chunk, max(16, _MEM_ELEMENTS // na))
        c = int(min(chunk, max_steps - t))
        cum = walk.sample(rng, na * c).reshape(na, c)
        np.cumsum(cum, axis=1, out=cum)
        cum += S[:, None]
        crun = np.maximum.accumulate(cum, axis=1)
        prev_run = np.concatenate(
            [np.full((na, 1), -np.inf), crun[:, :-1]], axis=1)
        rec = cum > np.maximum(M[:, None], prev_run)

        er, ec = np.nonzero(rec)        # row-major: events time-ordered per row
        if er.size:
            tau = t + ec + 1
            ev_val = cum[er, ec]
            first = np.ones(er.size, bool)
            first[1:] = er[1:] != er[:-1]
            prev_tau = np.empty(er.size, np.int64)
            prev_val = np.empty(er.size)
            prev_tau[first] = sig[er[first]]
            prev_val[first] = M[er[first]]
            later = np.flatnonzero(~first)
            prev_tau[later] = tau[later - 1]
            prev_val[later] = ev_val[later - 1]

            hi = np.minimum(tau, n)
            ell = hi - prev_tau
            keep = np.flatnonzero(ell > 0)
            if keep.size:
                ell_k = ell[keep]
                total = int(ell_k.sum())
                starts = np.cumsum(ell_k) - ell_k
                offs = np.arange(total) - np.repeat(starts, ell_k) + 1
                rep_er = np.repeat(er[keep], ell_k)
                back = np.repeat(tau[keep], ell_k) - offs
                incol = back - t - 1
                ring_vals = ring[rep_er, back % L]
                s_back = np.where(incol >= 0,
                                  cum[rep_er, np.maximum(incol, 0)], ring_vals)
                jj = np.repeat(prev_tau[keep], ell_k) + offs
                Z[np.repeat(orig[er[keep]], ell_k), jj] = \
                    np.repeat(prev_val[keep] + ev_val[keep], ell_k) - s_back

            last = np.ones(er.size, bool)
            last[:-1] = er[:-1] != er[1:]
            sig[er[last]] = tau[last]
            M[er[last]] = ev_val[last]

        if c >= L:
            cols = (np.arange(L) + t + c - L + 1) % L
            ring[:, cols] = cum[:, c - L:]
        else:
            cols = (np.arange(c) + t + 1) % L
            ring[:, cols] = cum
        S = cum[:, -1]
        t += c

        alive = sig < n
        if not alive.all():
            orig, S, M, sig, ring = (a[alive] for a in (orig, S, M, sig, ring))
    truncated[orig] = True

    done = ~truncated
    body = Z[done][:, 1:]
    assert not np.isnan(body).any() and (body > 0.0).all(), \
        "conditioned path must be strictly positive"
    return TanakaEnsemble(Z, truncated)


def tanaka_conditioned_walk(walk: TiltedWalk, n_steps: int, rng, *,
                            max_steps: int = 10 ** 6) -> WalkPath:
    """A single conditioned path; raises if the covering block never closes."""
    ens = tanaka_ensemble(walk, n_steps, 1, rng, max_steps=max_steps)
    if ens.truncated[0]:
        raise RuntimeError(f"covering ladder block still open after {max_steps} steps")
    zeta = ens.zeta[0]
    return WalkPath(start=0.0, increments=np.diff(zeta), stopping_reason=None)


def first_ladder_height_mean(walk: TiltedWalk, rng, *, n_replicas: int = 200_000,
                             max_steps: int = 10 ** 6) -> tuple:
    """(E[H_1], stderr, truncated_fraction) for the first strict ascending ladder.

    Skip-free-up lattice walks (max step = +span) have H_1 = span exactly;
    otherwise Monte Carlo with truncated replicas excluded and reported.
    Cached on the walk instance: the constant is reused by every reweighted
    sample.
    """
    if walk._h1_cache is not None:
        return walk._h1_cache
    sup = walk.step.support()
    if walk.span is not None and sup is not None \
            and abs(float(np.max(sup)) - walk.span) <= 1e-12:
        walk._h1_cache = (walk.span, 0.0, 0.0)
        return walk._h1_cache
    ens = passage_ensemble(walk, 0.0, n_replicas, rng,
                           lower=None, upper=0.0, max_steps=max_steps)
    h = ens.finals[ens.hit_above]
    if h.size == 0:
        raise RuntimeError("no ladder epochs observed; drift too negative?")
    walk._h1_cache = (float(h.mean()),
                      float(h.std(ddof=1) / math.sqrt(h.size)),
                      ens.truncated_fraction)
    return walk._h1_cache


@dataclass
class MinRecordEnsemble:
    zeta: np.ndarray         # underlying conditioned paths
    weights: np.ndarray      # zeta at the last-min epoch / E[H_1]
    sigma_tilde: np.ndarray  # last epoch achieving the running minimum
    flagged: np.ndarray      # truncated, or sigma_tilde inside the guard window
    e_h1: float
    e_h1_stderr: float

    @property
    def flagged_fraction(self) -> float:
        return float(self.flagged.mean())

    def valid(self) -> np.ndarray:
        return ~self.flagged


def hat_s_ensemble(walk: TiltedWalk, n_steps: int, n_replicas: int, rng, *,
                   guard: int | None = None, max_steps: int = 10 ** 6,
                   e_h1: tuple | None = None) -> MinRecordEnsemble:
    """Reweighted conditioned paths whose weighted law is the min-record chain.

    Weight = zeta_{sigma_tilde} / E[H_1] with sigma_tilde the last epoch in
    1..n at the path minimum.  A sample whose sigma_tilde falls within
    ``guard`` (default n/5) of the horizon cannot be certified as final (a
    later epoch could still undercut the minimum) and is flagged; flagged
    samples carry weight but should be excluded and accounted by the caller.
    """
    n = int(n_steps)
    if n < 1:
        raise ValueError("need n_steps >= 1")
    if guard is None:
        guard = max(1, n // 5)
    if e_h1 is None:
        e_h1 = first_ladder_height_mean(walk, rng)
    tk = tanaka_ensemble(walk, n, n_replicas, rng, max_steps=max_steps)
    body = np.where(np.isnan(tk.zeta[:, 1:]), np.inf, tk.zeta[:, 1:])
    rev_arg = body.shape[1] - 1 - np.argmin(body[:, ::-1], axis=1)
    sigma = rev_arg + 1
    weights = body[np.arange(n_replicas), rev_arg] / e_h1[0]
    flagged = tk.truncated | (sigma > n - guard)
    weights[tk.truncated] = np.nan
    return MinRecordEnsemble(zeta=tk.zeta, weights=weights, sigma_tilde=sigma,
                             flagged=flagged, e_h1=e_h1[0], e_h1_stderr=e_h1[1])


def hat_s_sampler(walk: TiltedWalk, n_steps: int, rng, *,
                  guard: int | None = None,
                  max_steps: int = 10 ** 6) -> tuple:
    """(path, weight, sigma_hat, flagged) for one reweighted conditioned path.

    sigma_hat, the last running-minimum epoch of the emitted path, coincides
    with sigma_tilde of the underlying conditioned path: the reweighting
    changes the law, not the realized values.
    """
    ens = hat_s_ensemble(walk, n_steps, 1, rng, guard=guard, max_steps=max_steps)
    path = WalkPath(start=0.0, increments=np.diff(ens.zeta[0]),
                    stopping_reason=None)
    return (path, float(ens.weights[0]), int(ens.sigma_tilde[0]),
            bool(ens.flagged[0]))


# ---------------------------------------------------------------------------
# Doob h-transform stepping


def _h_function(renewal, boundary: str, span: float | None):
    base = renewal if callable(renewal) else renewal.evaluate
    if boundary == "nonnegative":
        return lambda z: base(np.maximum(z, -1.0)) * (np.asarray(z) >= 0.0)
    if boundary == "positive":
        if span is not None:
            return lambda z: base(np.maximum(np.asarray(z) - span, -1.0)) \
                * (np.asarray(z) >= span - 1e-12)
        return lambda z: base(np.maximum(z, -1.0)) * (np.asarray(z) > 0.0)
    raise ValueError(f"unknown boundary {boundary!r}")


def conditioned_step(walk: TiltedWalk, renewal, y: float, rng, *,
                     boundary: str = "nonnegative") -> float:
    """One move of the renewal-h-transformed walk from y.

    ``renewal`` is a RenewalEstimate (its isotonic interpolant is used) or a
    callable h.  Lattice walks step by the exact reweighted categorical;
    continuous walks use acceptance-rejection with the table maximum as the
    envelope, raising if a proposal leaves the covered range.
    """
    return float(conditioned_chain(walk, renewal, y, 1, 1, rng,
                                   boundary=boundary)[0, -1])


def conditioned_chain(walk: TiltedWalk, renewal, x0, n_steps: int,
                      n_replicas: int, rng, *,
                      boundary: str = "nonnegative") -> np.ndarray:
    """(n_replicas, n_steps+1) paths of the h-transformed walk from x0."""
    h = _h_function(renewal, boundary, walk.span)
    pos = np.broadcast_to(np.asarray(x0, float), (n_replicas,)).copy()
    out = np.empty((n_replicas, n_steps + 1))
    out[:, 0] = pos
    sup = walk.step.support()
    if sup is not None:
        sup = np.asarray(sup, float)
        probs = np.asarray(walk.step.probs(), float)
        for k in range(1, n_steps + 1):
            w = probs[None, :] * h(pos[:, None] + sup[None, :])
            tot = w.sum(axis=1)
            if np.any(tot <= 0.0):
                bad = float(pos[np.argmin(tot)])
                raise ValueError(f"h vanishes on every move from y = {bad}")
            u = rng.random(n_replicas) * tot
            idx = (np.cumsum(w, axis=1) < u[:, None]).sum(axis=1)
            idx = np.minimum(idx, sup.size - 1)
            pos = pos + sup[idx]
            out[:, k] = pos
        return out

    if callable(renewal):
        raise ValueError("continuous h-chains need a RenewalEstimate table")
    top = renewal.x_grid[-1]
    envelope = float(renewal.isotonic_values()[-1])
    for k in range(1, n_steps + 1):
        pending = np.arange(n_replicas)
        nxt = np.empty(n_replicas)
        while pending.size:
            z = pos[pending] + walk.sample(rng, pending.size)
            if np.any(z > top + 1e-12):
                raise ValueError(
                    f"renewal table covers [0, {top}]; proposal reached "
                    f"{float(z.max()):.3f}, extend the grid")
            acc = rng.random(pending.size) * envelope < h(z)
            nxt[pending[acc]] = z[acc]
            pending = pending[~acc]
        pos = nxt
        out[:, k] = pos
    return out
