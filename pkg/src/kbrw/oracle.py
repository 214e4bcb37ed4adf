"""Exact enumeration oracles.

Two independent engines cross-check the Monte Carlo machinery:

* linear DP over the position lattice for expected counts (killed-tree alive
  counts, leaf counts, level first-crossers, tilted sums) and for lattice walk
  functionals (barrier-hitting probabilities, stopped exponentials, ruin);
* exhaustive enumeration of every offspring outcome of a small tree, for
  arbitrary functionals, with compensated summation.

Both engines require finite displacement support on a common lattice span;
models with continuous displacements are checked against closed forms instead.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .models import (
    IidModel,
    PatternModel,
    lattice_span,
)


class KahanSum:
    """Compensated accumulator; float(s) gives the running sum."""

    __slots__ = ("s", "c")

    def __init__(self):
        self.s = 0.0
        self.c = 0.0

    def add(self, x: float) -> None:
        y = float(x) - self.c
        t = self.s + y
        self.c = (t - self.s) - y
        self.s = t

    def __float__(self) -> float:
        return float(self.s)


# ---------------------------------------------------------------------------
# lattice helpers


def _intensity(model) -> tuple[np.ndarray, np.ndarray]:
    """Displacements z and E[# children at displacement z] for one particle."""
    if isinstance(model, IidModel):
        vals = model.step.support()
        if vals is None:
            raise ValueError("oracle DP needs finite displacement support")
        return np.asarray(vals, float), model.nu.mean() * model.step.probs()
    if isinstance(model, PatternModel):
        table: dict[float, float] = {}
        for q, pat in zip(model.atom_probs, model.patterns):
            for z in pat:
                table[float(z)] = table.get(float(z), 0.0) + q
        vals = np.array(sorted(table))
        return vals, np.array([table[v] for v in vals])
    raise TypeError("unsupported model type")


def _to_grid(value: float, span: float, what: str) -> int:
    k = value / span
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"{what}={value} is not on the lattice with span {span}")
    return int(round(k))


# ---------------------------------------------------------------------------
# expected counts in the tree, by linear DP


@dataclass
class TreeDPResult:
    depth: int
    alive: np.ndarray          # alive[g] = E[# particles alive at generation g]
    leaves: np.ndarray         # leaves[g] = E[# children killed at generation g]
    crossers: np.ndarray       # first-crossers of `level` at generation g (0 if no level)
    wsum: np.ndarray           # E[sum_alive e^{rho V}] per generation (if rho given)
    vwsum: np.ndarray          # E[sum_alive V e^{rho V}] per generation
    rho: float | None
    level: float | None
    barrier: bool

    @property
    def expected_crossers_total(self) -> float:
        return float(self.crossers.sum())


def tree_expectations(model, x: float, depth: int, *, barrier: bool = True,
                      level: float | None = None, rho: float | None = None) -> TreeDPResult:
    """Exact expectations of additive tree functionals on a lattice model.

    Killed-tree convention: a child strictly below 0 is removed at birth (and
    counted in ``leaves``); with ``level`` set, a particle strictly above the
    level is absorbed there (counted in ``crossers``) and not expanded, which
    is the stopping-line bookkeeping.  ``barrier=False`` disables the killing
    (free tree), for additive-martingale expectations.
    """
    vals, intens = _intensity(model)
    span = lattice_span(vals)
    if span is None:
        raise ValueError("displacement support is not a lattice")
    steps = np.array([_to_grid(v, span, "displacement") for v in vals])
    x_idx = _to_grid(x, span, "start")
    lvl_idx = None
    if level is not None:
        # crossing is strict: position index > level/span
        lvl = level / span
        lvl_idx = math.floor(lvl + 1e-9)

    # measure over position indices, as a dict {index: expected count}
    cur = {x_idx: 1.0}
    if barrier and x_idx * span < 0:
        raise ValueError("start below the barrier")
    alive = np.zeros(depth + 1)
    leaves = np.zeros(depth + 1)
    crossers = np.zeros(depth + 1)
    wsum = np.zeros(depth + 1)
    vwsum = np.zeros(depth + 1)

    def tally(g: int) -> None:
        alive[g] = sum(cur.values())
        if rho is not None:
            wsum[g] = sum(m * math.exp(rho * (k * span)) for k, m in cur.items())
            vwsum[g] = sum(m * (k * span) * math.exp(rho * (k * span)) for k, m in cur.items())

    tally(0)
    for g in range(1, depth + 1):
        nxt: dict[int, float] = {}
        for k, mass in cur.items():
            for s, lam in zip(steps, intens):
                kk = k + int(s)
                child_mass = mass * lam
                if barrier and kk < 0:
                    leaves[g] += child_mass
                    continue
                if lvl_idx is not None and kk > lvl_idx:
                    crossers[g] += child_mass
                    continue
                nxt[kk] = nxt.get(kk, 0.0) + child_mass
        cur = nxt
        tally(g)
    return TreeDPResult(depth=depth, alive=alive, leaves=leaves, crossers=crossers,
                        wsum=wsum, vwsum=vwsum, rho=rho, level=level, barrier=barrier)


# ---------------------------------------------------------------------------
# exhaustive enumeration of small trees


class EnumTree:
    """One realized outcome of the first ``depth`` generations.

    Nodes are stored breadth-first in birth order; node 0 is the root.  A node
    is alive if its whole ancestry (including itself) stayed >= 0; killed
    children are present with alive=False and are never expanded.  With a
    level set, first-crossers are flagged and not expanded either.
    """

    def __init__(self, x: float, alive: bool = True):
        self.pos = [x]
        self.parent = [-1]
        self.gen = [0]
        self.alive = [alive]
        self.crossed = [False]
        self.nu = [None]

    def leaves_killed(self) -> int:
        return sum(1 for a in self.alive if not a)

    def alive_at(self, g: int) -> int:
        return sum(1 for i in range(len(self.pos))
                   if self.gen[i] == g and self.alive[i] and not self.crossed[i])

    def crossers(self) -> int:
        return sum(1 for i in range(len(self.pos)) if self.crossed[i])

    def tilted_sum(self, rho: float, g: int) -> float:
        return sum(math.exp(rho * self.pos[i]) for i in range(len(self.pos))
                   if self.gen[i] == g and self.alive[i])

    def derivative_sum(self, rho: float, g: int) -> float:
        # derivative-martingale summand with positions rescaled by rho
        return -sum(rho * self.pos[i] * math.exp(rho * self.pos[i])
                    for i in range(len(self.pos)) if self.gen[i] == g and self.alive[i])


def _node_outcomes(model) -> list[tuple[float, tuple[float, ...]]]:
    if isinstance(model, PatternModel):
        return [(float(q), tuple(p)) for q, p in zip(model.atom_probs, model.patterns)]
    if isinstance(model, IidModel):
        sup = model.step.support()
        if sup is None:
            raise ValueError("exhaustive enumeration needs finite displacement support")
        sp = model.step.probs()
        out = []
        nv, np_ = model.nu.pmf()
        for k, pk in zip(nv, np_):
            if k == 0:
                out.append((float(pk), ()))
                continue
            for combo in itertools.product(range(len(sup)), repeat=int(k)):
                pr = float(pk) * math.prod(sp[c] for c in combo)
                out.append((pr, tuple(float(sup[c]) for c in combo)))
        return out
    raise TypeError("unsupported model type")


@dataclass
class EnumerationResult:
    value: float
    n_terms: int
    prob_mass: float
    error_bound: float = 0.0
    meta: dict = field(default_factory=dict)


def enumerate_tree_expectation(model, x: float, depth: int, functional,
                               *, barrier: bool = True, level: float | None = None,
                               max_terms: int = 10 ** 8) -> EnumerationResult:
    """E[functional(EnumTree)] over every offspring outcome, exactly.

    The functional sees each fully realized outcome; weighted terms are
    accumulated with compensated summation.  Raises once more than
    ``max_terms`` outcomes would be visited.
    """
    outcomes = _node_outcomes(model)
    acc = KahanSum()
    mass = KahanSum()
    state = {"terms": 0}

    if barrier and x < 0:
        raise ValueError("start below the barrier")
    tree = EnumTree(x, alive=(not barrier) or x >= 0.0)

    def expandable(i: int) -> bool:
        return tree.alive[i] and not tree.crossed[i]

    def do_level(frontier: list[int], g: int, prob: float) -> None:
        if g == depth or not frontier:
            state["terms"] += 1
            if state["terms"] > max_terms:
                raise RuntimeError(f"enumeration exceeds max_terms={max_terms}")
            acc.add(prob * functional(tree))
            mass.add(prob)
            return

        def assign(j: int, prob_j: float, chosen: list[tuple[float, ...]]) -> None:
            if j == len(frontier):
                base = len(tree.pos)
                nxt = []
                for node, disp in zip(frontier, chosen):
                    tree.nu[node] = len(disp)
                    for z in disp:
                        p = tree.pos[node] + z
                        tree.pos.append(p)
                        tree.parent.append(node)
                        tree.gen.append(g + 1)
                        ok = (not barrier) or p >= 0.0
                        crossed = level is not None and ok and p > level
                        tree.alive.append(ok)
                        tree.crossed.append(crossed)
                        tree.nu.append(None)
                        if ok and not crossed:
                            nxt.append(len(tree.pos) - 1)
                do_level(nxt, g + 1, prob_j)
                del tree.pos[base:]
                del tree.parent[base:]
                del tree.gen[base:]
                del tree.alive[base:]
                del tree.crossed[base:]
                del tree.nu[base:]
                for node in frontier:
                    tree.nu[node] = None
                return
            for q, disp in outcomes:
                chosen.append(disp)
                assign(j + 1, prob_j * q, chosen)
                chosen.pop()

        assign(0, prob, [])

    root_frontier = [0] if expandable(0) else []
    do_level(root_frontier, 0, 1.0)
    pm = float(mass)
    if abs(pm - 1.0) > 1e-9:
        raise ArithmeticError(f"enumeration probability mass {pm} != 1")
    return EnumerationResult(value=float(acc), n_terms=state["terms"], prob_mass=pm)


# ---------------------------------------------------------------------------
# exact spine-step measure (model side of the spine marginal check)


def spine_signature_measure(model, rho: float) -> dict[tuple[float, int], float]:
    """Exact one-generation law of (spine displacement, litter size).

    Computed straight from the model's raw tables: picking a depth-1 child
    with weight e^{rho z} inside the size-biased tree gives
    P(step=z, nu=k) = P(pattern has count k) * (# of z in pattern) * e^{rho z}
    summed over patterns (normalized by e^{psi(rho)}, which is 1 at a mass-1
    tilt).  Used as the enumeration side against the sampler's own tables.
    """
    table: dict[tuple[float, int], float] = {}
    if isinstance(model, IidModel):
        sup = model.step.support()
        if sup is None:
            raise ValueError("needs finite displacement support")
        sp = model.step.probs()
        nv, np_ = model.nu.pmf()
        for k, pk in zip(nv, np_):
            if k == 0:
                continue
            for z, pz in zip(sup, sp):
                key = (float(z), int(k))
                table[key] = table.get(key, 0.0) + float(pk) * int(k) * float(pz) * math.exp(rho * float(z))
    elif isinstance(model, PatternModel):
        for q, pat in zip(model.atom_probs, model.patterns):
            k = len(pat)
            for z in pat:
                key = (float(z), int(k))
                table[key] = table.get(key, 0.0) + float(q) * math.exp(rho * float(z))
    else:
        raise TypeError("unsupported model type")
    total = sum(table.values())
    return {k: v / total for k, v in table.items()}


# ---------------------------------------------------------------------------
# lattice walk functionals


@dataclass
class WalkOracle:
    p_hit_upper: float
    p_hit_lower: float
    p_survive: float            # mass absorbed at the upper cutoff (drift-up runs)
    e_rho_lower: float          # E[e^{-rho S_tau}; hit lower] (nan if rho not given)
    e_rho_upper: float
    undershoot: dict            # position -> probability, at the lower barrier
    overshoot: dict             # position -> probability, at the upper barrier
    residual_mass: float
    error_bound: float
    n_steps: int


def walk_functional(step_values, step_probs, x: float, *, lower: float | None = 0.0,
                    upper: float | None = None, rho: float | None = None,
                    horizon: int | None = None, tol: float = 1e-15,
                    max_steps: int = 10 ** 6) -> WalkOracle:
    """Exact lattice DP for a walk with finite step support.

    ``lower`` kills on S < lower (strict), ``upper`` absorbs on S > upper
    (strict).  With only one barrier and positive drift away from it, pass the
    other as a cutoff and read ``error_bound``: the Cramer bound on mass that
    would still have hit the barrier beyond the cutoff.
    """
    vals = np.asarray(step_values, float)
    probs = np.asarray(step_probs, float)
    if abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError("step probabilities must sum to 1")
    span = lattice_span(vals)
    if span is None:
        raise ValueError("step support is not a lattice")
    steps = [( _to_grid(v, span, "step"), float(p)) for v, p in zip(vals, probs)]
    xi = _to_grid(x, span, "start")
    lo = None if lower is None else _to_grid(lower, span, "lower")
    up = None if upper is None else _to_grid(upper, span, "upper")
    if lo is not None and xi < lo:
        raise ValueError("start below lower barrier")
    if up is not None and xi > up:
        raise ValueError("start above upper barrier")

    cur = {xi: 1.0}
    p_lower = KahanSum()
    p_upper = KahanSum()
    e_lower = KahanSum()
    e_upper = KahanSum()
    under: dict[float, float] = {}
    over: dict[float, float] = {}
    n = 0
    limit = horizon if horizon is not None else max_steps
    while cur and n < limit:
        n += 1
        nxt: dict[int, float] = {}
        for k, mass in cur.items():
            for s, p in steps:
                kk = k + s
                m = mass * p
                if lo is not None and kk < lo:
                    p_lower.add(m)
                    posn = kk * span
                    under[posn] = under.get(posn, 0.0) + m
                    if rho is not None:
                        e_lower.add(m * math.exp(-rho * posn))
                    continue
                if up is not None and kk > up:
                    p_upper.add(m)
                    posn = kk * span
                    over[posn] = over.get(posn, 0.0) + m
                    if rho is not None:
                        e_upper.add(m * math.exp(-rho * posn))
                    continue
                nxt[kk] = nxt.get(kk, 0.0) + m
        cur = nxt
        if horizon is None and sum(cur.values()) < tol:
            break
    residual = sum(cur.values())
    if horizon is None and residual >= tol and n >= limit:
        raise RuntimeError("walk DP did not absorb within max_steps")

    # Cramer bound for interpreting the upper cutoff as "never hits lower":
    # gamma > 0 with sum p e^{-gamma v} = 1 exists iff drift > 0, and
    # P(ever drop below `lower` from height h) <= e^{-gamma (h - lower + span)}.
    drift = float((vals * probs).sum())
    err = 0.0
    if up is not None and lo is not None and drift > 0:
        f = lambda g: sum(p * math.exp(-g * (s * span)) for s, p in steps) - 1.0
        hi = 1.0
        while f(hi) < 0 and hi < 1e4:
            hi *= 2.0
        g_lo, g_hi = 1e-12, hi
        for _ in range(200):
            mid = 0.5 * (g_lo + g_hi)
            if f(mid) < 0:
                g_lo = mid
            else:
                g_hi = mid
        gamma = 0.5 * (g_lo + g_hi)
        err = float(p_upper) * math.exp(-gamma * ((up - lo) * span + span))

    return WalkOracle(
        p_hit_upper=float(p_upper), p_hit_lower=float(p_lower),
        p_survive=float(p_upper) if (up is not None and lo is not None and drift > 0) else 0.0,
        e_rho_lower=float(e_lower) if rho is not None else math.nan,
        e_rho_upper=float(e_upper) if rho is not None else math.nan,
        undershoot=under, overshoot=over,
        residual_mass=residual, error_bound=err, n_steps=n)


def h_chain_marginal(step_values, step_probs, h, x0: float, k: int) -> dict[float, float]:
    """Exact k-step marginal of the Doob h-transform chain (lattice steps).

    ``h`` maps positions to harmonic-function values; transitions are
    p(y->z) proportional to p(z-y) h(z), which is a probability kernel when h
    is harmonic for the killed walk (checked to 1e-9 at every visited y).
    """
    vals = np.asarray(step_values, float)
    probs = np.asarray(step_probs, float)
    cur = {float(x0): 1.0}
    for _ in range(k):
        nxt: dict[float, float] = {}
        for y, mass in cur.items():
            hy = h(y)
            if hy <= 0:
                raise ValueError(f"h({y}) <= 0 on a reachable state")
            tot = 0.0
            moves = []
            for v, p in zip(vals, probs):
                hz = h(y + v)
                w = p * hz / hy
                if w > 0:
                    moves.append((y + v, w))
                    tot += w
            if abs(tot - 1.0) > 1e-9:
                raise ArithmeticError(f"h is not harmonic at y={y}: kernel mass {tot}")
            for z, w in moves:
                nxt[z] = nxt.get(z, 0.0) + mass * w
        cur = nxt
    return cur
