"""Forward simulation of the branching walk killed below zero.

The forest engine runs many replica trees at once on flat numpy arrays: one
frontier of (position, tree id, probe bitmask) rows, expanded a generation at
a time with repeat/bincount bookkeeping.  Trees are never materialized beyond
the frontier except on explicit request for the exploration replay.

Conventions: a child born strictly below 0 is killed on the spot and counted
as a leaf of the barrier line; a child at exactly 0 survives.  Crossing a
probe level is strict (position > level), recorded once per line of descent,
and only the largest probe stops expansion; the smaller ones are pure
bookkeeping barriers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimates import EstimateWithCI, binomial_estimate, from_samples
from .models import IidModel, PatternModel, Regime, log_laplace


@dataclass
class SimCaps:
    max_particles: int = 10 ** 7    # births per tree, alive or killed
    max_generations: int = 10 ** 5


@dataclass
class TreeRecord:
    start_x: float
    total_progeny_Z: int
    leaf_count: int
    exploration_Y_Z: int
    H_levels: dict
    Z0L: dict
    overshoot_measures: dict
    max_position: float
    truncated: bool
    generations_simulated: int
    # (parent index, child count) per alive particle in birth order, only
    # filled by the materializing simulator; index 0 is the root, parent -1
    exploration: np.ndarray | None = None


@dataclass
class ForestResult:
    start_x: float
    probe_levels: np.ndarray
    Z: np.ndarray
    leaves: np.ndarray
    Y: np.ndarray
    H: np.ndarray            # (n_levels, n_replicas)
    Z0L: np.ndarray          # (n_levels, n_replicas)
    max_position: np.ndarray
    truncated: np.ndarray
    generations: np.ndarray
    overshoots: dict         # level -> (tree ids, overshoot values), if collected

    @property
    def n_replicas(self) -> int:
        return self.Z.size

    @property
    def truncated_fraction(self) -> float:
        return float(self.truncated.mean())

    def record(self, i: int) -> TreeRecord:
        levels = self.probe_levels
        over = {}
        for lv, (ids, vals) in self.overshoots.items():
            over[lv] = vals[ids == i].tolist()
        return TreeRecord(
            start_x=self.start_x,
            total_progeny_Z=int(self.Z[i]),
            leaf_count=int(self.leaves[i]),
            exploration_Y_Z=int(self.Y[i]),
            H_levels={float(lv): int(self.H[k, i]) for k, lv in enumerate(levels)},
            Z0L={float(lv): int(self.Z0L[k, i]) for k, lv in enumerate(levels)},
            overshoot_measures=over,
            max_position=float(self.max_position[i]),
            truncated=bool(self.truncated[i]),
            generations_simulated=int(self.generations[i]),
        )


def _spawn(model, pos, rng):
    """Children of one frontier: nu per parent, flat (parent index, displacement)."""
    n = pos.size
    if isinstance(model, IidModel):
        nu = model.nu.sample(rng, n).astype(np.int64)
        parent = np.repeat(np.arange(n), nu)
        disp = model.step.sample(rng, int(nu.sum()))
        return nu, parent, disp
    if isinstance(model, PatternModel):
        layout = getattr(model, "_flat_layout", None)
        if layout is None:
            sizes = np.array([p.size for p in model.patterns], np.int64)
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
            layout = (sizes, offsets, np.concatenate(model.patterns))
            model._flat_layout = layout
        sizes_tab, offsets_tab, flat = layout
        atom = model.sample_atom(rng, n)
        nu = sizes_tab[atom]
        parent = np.repeat(np.arange(n), nu)
        starts = np.cumsum(nu) - nu
        within = np.arange(parent.size) - np.repeat(starts, nu)
        disp = flat[np.repeat(offsets_tab[atom], nu) + within]
        return nu, parent, disp
    raise TypeError("unsupported model type")


def simulate_killed_forest(model, x, probe_levels, n_replicas: int, rng,
                           caps: SimCaps = SimCaps(), *,
                           collect_overshoots: bool = False) -> ForestResult:
    """n_replicas independent killed trees from x, reduced to counters.

    x is a single start height or one per replica.  Exceeding a cap marks the
    tree truncated and freezes its partial counts; nothing is dropped
    silently.  probe_levels must all lie above every start.
    """
    xarr = np.broadcast_to(np.asarray(x, float), (n_replicas,))
    if np.any(xarr < 0):
        raise ValueError("root below the barrier")
    regime = model.analytics().regime
    if regime not in (Regime.CRITICAL, Regime.SUBCRITICAL):
        raise ValueError(f"total progeny is infinite in regime {regime.value}")
    levels = np.sort(np.asarray(probe_levels, float))
    if levels.size > 8:
        raise ValueError("at most 8 probe levels (bitmask bookkeeping)")
    if levels.size and np.any(levels < xarr.max()):
        raise ValueError("probe levels must not lie below a start position")
    nl = levels.size
    top = levels[-1] if nl else math.inf

    Z = np.ones(n_replicas, np.int64)
    leaves = np.zeros(n_replicas, np.int64)
    Y = np.ones(n_replicas, np.int64)
    births = np.ones(n_replicas, np.int64)
    H = np.zeros((nl, n_replicas), np.int64)
    Z0L = np.zeros((nl, n_replicas), np.int64)
    max_pos = xarr.astype(float).copy()
    truncated = np.zeros(n_replicas, bool)
    gen_last = np.zeros(n_replicas, np.int64)
    over_ids = [[] for _ in range(nl)]
    over_vals = [[] for _ in range(nl)]

    fpos = xarr.astype(float).copy()
    ftree = np.arange(n_replicas, dtype=np.int64)
    fmask = np.zeros(n_replicas, np.uint8)
    g = 0
    while ftree.size and g < caps.max_generations:
        g += 1
        nu, parent, disp = _spawn(model, fpos, rng)
        incoming = np.bincount(ftree, weights=nu, minlength=n_replicas)
        over_budget = births + incoming.astype(np.int64) > caps.max_particles
        if over_budget.any():
            # freeze over-budget trees before this generation is booked
            truncated |= over_budget
            keep_row = ~over_budget[ftree]
            child_keep = keep_row[parent]
            remap = np.cumsum(keep_row) - 1
            parent = remap[parent[child_keep]]
            disp = disp[child_keep]
            nu = nu[keep_row]
            fpos, ftree, fmask = fpos[keep_row], ftree[keep_row], fmask[keep_row]
        if ftree.size == 0:
            break
        births += np.bincount(ftree, weights=nu, minlength=n_replicas).astype(np.int64)
        Y += np.bincount(ftree, weights=nu - 1, minlength=n_replicas).astype(np.int64)
        gen_last[np.unique(ftree)] = g

        cpos = fpos[parent] + disp
        ctree = ftree[parent]
        cmask = fmask[parent]

        dead = cpos < 0.0
        if dead.any():
            leaves += np.bincount(ctree[dead], minlength=n_replicas)
            for k in range(nl):
                unc = dead & ((cmask & np.uint8(1 << k)) == 0)
                Z0L[k] += np.bincount(ctree[unc], minlength=n_replicas)

        alive = ~dead
        cpos, ctree, cmask = cpos[alive], ctree[alive], cmask[alive]
        if cpos.size:
            Z += np.bincount(ctree, minlength=n_replicas)
            np.maximum.at(max_pos, ctree, cpos)
            for k in range(nl):
                bit = np.uint8(1 << k)
                nc = (cpos > levels[k]) & ((cmask & bit) == 0)
                if nc.any():
                    H[k] += np.bincount(ctree[nc], minlength=n_replicas)
                    if collect_overshoots:
                        over_ids[k].append(ctree[nc].copy())
                        over_vals[k].append(cpos[nc] - levels[k])
                    cmask[nc] |= bit
        cont = cpos <= top
        fpos, ftree, fmask = cpos[cont], ctree[cont], cmask[cont]
    if ftree.size:
        truncated[np.unique(ftree)] = True

    overshoots = {}
    if collect_overshoots:
        for k in range(nl):
            ids = np.concatenate(over_ids[k]) if over_ids[k] else np.empty(0, np.int64)
            vals = np.concatenate(over_vals[k]) if over_vals[k] else np.empty(0)
            overshoots[float(levels[k])] = (ids, vals)
    return ForestResult(start_x=float(xarr[0]), probe_levels=levels, Z=Z,
                        leaves=leaves, Y=Y, H=H, Z0L=Z0L, max_position=max_pos,
                        truncated=truncated, generations=gen_last,
                        overshoots=overshoots)


def simulate_killed_tree(model, x: float, probe_levels, rng,
                         caps: SimCaps = SimCaps(), *,
                         materialize: bool = False) -> TreeRecord:
    """One killed tree; with materialize=True the (parent, nu) skeleton of the
    alive particles is kept for the exploration replay (probe-free trees only,
    since frozen crossers have no recorded offspring)."""
    if not materialize:
        forest = simulate_killed_forest(model, x, probe_levels, 1, rng,
                                        caps, collect_overshoots=True)
        return forest.record(0)
    if len(list(probe_levels)):
        raise ValueError("materialized trees are probe-free")
    if x < 0:
        raise ValueError("root below the barrier")
    parents = [-1]
    nus = [0]
    max_position = float(x)
    frontier = [0]
    fpos = np.array([float(x)])
    leaf_count = 0
    truncated = False
    g = 0
    gen_last = 0
    while fpos.size and g < caps.max_generations:
        g += 1
        nu, parent, disp = _spawn(model, fpos, rng)
        if len(parents) + parent.size > caps.max_particles:
            truncated = True
            break
        gen_last = g
        for i, count in enumerate(nu):
            nus[frontier[i]] = int(count)
        cpos = fpos[parent] + disp
        dead = cpos < 0.0
        leaf_count += int(dead.sum())
        alive = np.flatnonzero(~dead)
        base = len(parents)
        for j in alive:
            parents.append(frontier[parent[j]])
            nus.append(0)
        if alive.size:
            max_position = max(max_position, float(cpos[alive].max()))
        frontier = list(range(base, base + alive.size))
        fpos = cpos[alive]
    truncated = truncated or fpos.size > 0
    skel = np.column_stack([np.asarray(parents, np.int64),
                            np.asarray(nus, np.int64)])
    n_alive = skel.shape[0]
    expanded = n_alive - fpos.size      # frontier at exit was never expanded
    y = 1 + int(skel[:, 1].sum()) - expanded
    return TreeRecord(start_x=float(x), total_progeny_Z=n_alive,
                      leaf_count=leaf_count, exploration_Y_Z=y,
                      H_levels={}, Z0L={}, overshoot_measures={},
                      max_position=max_position, truncated=truncated,
                      generations_simulated=gen_last, exploration=skel)


def exploration_check(record: TreeRecord):
    """Replay the exploration depth-first and compare Y_Z with the leaf count.

    Y_k = 1 + sum_{i<=k} (nu(U_i) - 1) over explored particles in depth-first
    order; on a complete killed tree the terminal value is exactly #L[0].
    Returns True/False, or None (indeterminate) on a truncated record.
    """
    if record.truncated:
        return None
    if record.exploration is None:
        raise ValueError("record has no materialized exploration")
    skel = record.exploration
    n = skel.shape[0]
    children = [[] for _ in range(n)]
    for i in range(1, n):
        children[int(skel[i, 0])].append(i)
    y = 1
    stack = [0]
    visited = 0
    while stack:
        u = stack.pop()
        visited += 1
        y += int(skel[u, 1]) - 1
        stack.extend(reversed(children[u]))
    assert visited == n, "exploration skeleton is not a tree"
    return y == record.leaf_count


# ---------------------------------------------------------------------------
# additive and derivative martingales on the free (unkilled) walk


@dataclass
class MartingaleSample:
    generation_n: int
    additive_W_n: float
    derivative_dW_n: float
    M_rho_minus_n: float | None
    extinct: bool


@dataclass
class MartingaleFlow:
    generations: np.ndarray
    W: np.ndarray            # (n_replicas, n_max+1), tilt rho_W
    dW: np.ndarray           # same shape, minus sum of rho* V e^{rho* V}
    M: np.ndarray | None     # subcritical only, tilt rho_minus
    extinct: np.ndarray
    truncated: np.ndarray
    rho_W: float
    rho_star: float
    rho_minus: float | None
    pruned_mass_fraction: float

    def trajectory(self, i: int) -> list:
        out = []
        for g in self.generations:
            out.append(MartingaleSample(
                generation_n=int(g),
                additive_W_n=float(self.W[i, g]),
                derivative_dW_n=float(self.dW[i, g]),
                M_rho_minus_n=None if self.M is None else float(self.M[i, g]),
                extinct=bool(self.extinct[i]) and self.W[i, g] == 0.0))
        return out


def martingale_levels(model, x: float, n_max: int, n_replicas: int, rng, *,
                      prune_eps: float = 1e-8,
                      freeze_above: float | None = None,
                      max_particles: int = 10 ** 6) -> MartingaleFlow:
    """Generation-by-generation martingale sums on free trees from x.

    Critical models track W_n at rho* and the derivative sum
    -sum rho* V e^{rho* V}; subcritical models track W_n at rho_plus and
    M_n at rho_minus (the derivative column is still filled, it just is not
    a martingale away from criticality).

    Particles whose lead weight e^{rho_ref V} drops below prune_eps (and the
    whole frontier of a tree past max_particles births) are not expanded;
    their conditional expected contribution to every later generation is
    credited instead, so all recorded means stay exactly unbiased while the
    tail variance is deliberately given up.  Trees that needed the forced
    frontier credit are flagged truncated.

    freeze_above adds the same exact-credit treatment at an upper level: a
    child born strictly above it is replaced by its current weights.  The
    mean of every recorded column is unchanged (optional stopping at the
    crossing line), but the weight a single particle can reach is bounded
    by e^{rho * freeze_above}, which tames the upper-tail variance that
    otherwise makes deep-generation mean tests uncalibratable.  In the
    subcritical regime the dW column is not a martingale, so its frozen
    values are not exact credits there; use it at criticality only.
    """
    an = model.analytics()
    if an.regime is Regime.CRITICAL:
        rho_w, rho_minus = an.rho_star, None
    elif an.regime is Regime.SUBCRITICAL:
        rho_w, rho_minus = an.rho_plus, an.rho_minus
    else:
        raise ValueError(f"martingales defined for critical/subcritical, "
                         f"got {an.regime.value}")
    rho_star = an.rho_star
    rho_ref = rho_minus if rho_minus is not None else rho_star

    W = np.zeros((n_replicas, n_max + 1))
    dW = np.zeros((n_replicas, n_max + 1))
    Mm = np.zeros((n_replicas, n_max + 1)) if rho_minus is not None else None
    extinct = np.zeros(n_replicas, bool)
    truncated = np.zeros(n_replicas, bool)
    credW = np.zeros(n_replicas)
    creddW = np.zeros(n_replicas)
    credM = np.zeros(n_replicas)
    births = np.ones(n_replicas, np.int64)
    pruned_mass = 0.0
    total_mass = 0.0

    pos = np.full(n_replicas, float(x))
    tree = np.arange(n_replicas, dtype=np.int64)
    for g in range(n_max + 1):
        wvals = np.exp(rho_w * pos)
        W[:, g] = np.bincount(tree, weights=wvals, minlength=n_replicas) + credW
        dvals = -rho_star * pos * np.exp(rho_star * pos)
        dW[:, g] = np.bincount(tree, weights=dvals, minlength=n_replicas) + creddW
        if Mm is not None:
            mvals = np.exp(rho_minus * pos)
            Mm[:, g] = np.bincount(tree, weights=mvals,
                                   minlength=n_replicas) + credM
        if g == n_max or tree.size == 0:
            break

        nu, parent, disp = _spawn(model, pos, rng)
        incoming = np.bincount(tree, weights=nu, minlength=n_replicas)
        over = births + incoming.astype(np.int64) > max_particles
        cpos = pos[parent] + disp
        ctree = tree[parent]
        lead = np.exp(rho_ref * cpos)
        total_mass += float(lead.sum())
        drop = (lead < prune_eps) | over[ctree]
        if freeze_above is not None:
            drop |= cpos > freeze_above
        if drop.any():
            dt = ctree[drop]
            dp = cpos[drop]
            credW += np.bincount(dt, weights=np.exp(rho_w * dp),
                                 minlength=n_replicas)
            creddW += np.bincount(dt, weights=-rho_star * dp * np.exp(rho_star * dp),
                                  minlength=n_replicas)
            if Mm is not None:
                credM += np.bincount(dt, weights=np.exp(rho_minus * dp),
                                     minlength=n_replicas)
            pruned_mass += float(lead[drop].sum())
            truncated |= over
        keep = ~drop
        pos, tree = cpos[keep], ctree[keep]
        births += incoming.astype(np.int64)

    alive_trees = np.zeros(n_replicas, bool)
    alive_trees[np.unique(tree)] = True
    extinct = ~alive_trees & (credW == 0.0)
    return MartingaleFlow(generations=np.arange(n_max + 1), W=W, dW=dW, M=Mm,
                          extinct=extinct, truncated=truncated, rho_W=rho_w,
                          rho_star=rho_star, rho_minus=rho_minus,
                          pruned_mass_fraction=pruned_mass / max(total_mass, 1e-300))


def martingale_trajectory(model, x: float, n_max: int, rng, *,
                          prune_eps: float = 1e-8,
                          max_particles: int = 10 ** 6) -> list:
    """Single-replica convenience wrapper around martingale_levels."""
    flow = martingale_levels(model, x, n_max, 1, rng, prune_eps=prune_eps,
                             max_particles=max_particles)
    return flow.trajectory(0)


def stopped_line_tilted_mass(model, x: float, t: float, n_replicas: int, rng, *,
                             rho=None, prune_eps: float = 1e-3,
                             max_generations: int = 300,
                             block: int = 5000) -> EstimateWithCI:
    """Mean of sum e^{rho V} over the first-crossing line of level t, free tree.

    For mass-1 tilts with nonnegative drift every line of descent crosses t
    with Q-probability one, so a particle at v below t can be replaced by its
    conditional mean contribution e^{rho v} with zero bias.  Pruning and the
    generation cap therefore only trade collected mass for credited mass; the
    split is reported as credited_fraction.  The default prune_eps is coarse
    on purpose: simulating the raw measure, the population in the band grows
    like 2^g until paths fall below the pruning line, so every extra decade
    of eps multiplies the work.
    """
    an = model.analytics()
    if rho is None:
        rho = an.rho_star if an.regime is Regime.CRITICAL else an.rho_plus
    psi, dpsi, _ = log_laplace(model, rho)
    if abs(psi) > 1e-8:
        raise ValueError("stopped line mass needs a mass-1 tilt")
    if dpsi < -1e-9:
        raise ValueError("negative-drift tilt: the crossing line is defective")
    if t <= x:
        raise ValueError("level must lie above the start")
    floor_w = prune_eps * math.exp(rho * x)

    mass = np.zeros(n_replicas)
    credited = np.zeros(n_replicas)
    for lo in range(0, n_replicas, block):
        nb = min(block, n_replicas - lo)
        pos = np.full(nb, float(x))
        tree = np.arange(nb, dtype=np.int64)
        g = 0
        while tree.size and g < max_generations:
            g += 1
            nu, parent, disp = _spawn(model, pos, rng)
            cpos = pos[parent] + disp
            ctree = tree[parent]
            w = np.exp(rho * cpos)
            crossed = cpos > t
            if crossed.any():
                mass[lo:lo + nb] += np.bincount(ctree[crossed], weights=w[crossed],
                                                minlength=nb)
            prune = ~crossed & (w < floor_w)
            if prune.any():
                credited[lo:lo + nb] += np.bincount(ctree[prune], weights=w[prune],
                                                    minlength=nb)
            keep = ~crossed & ~prune
            pos, tree = cpos[keep], ctree[keep]
        if tree.size:
            # generation cap: leftover frontier credited at its conditional mean
            credited[lo:lo + nb] += np.bincount(tree, weights=np.exp(rho * pos),
                                                minlength=nb)
    total = mass + credited
    est = from_samples(total, label="line mass")
    est.extra.update(rho=float(rho),
                     credited_fraction=float(credited.sum() / max(total.sum(), 1e-300)),
                     target=math.exp(rho * x))
    return est


# ---------------------------------------------------------------------------
# conditioned overshoot datasets at a crossing level


@dataclass
class YaglomDataset:
    t: float
    rho: float
    H: np.ndarray                 # crosser counts, survivors only
    overshoots: list              # one array of overshoot values per survivor
    tilted_mass: np.ndarray       # sum e^{rho (V - t)} per survivor
    min_overshoot: np.ndarray
    p_survival: EstimateWithCI
    n_replicas: int
    truncated_fraction: float

    @property
    def n_survivors(self) -> int:
        return self.H.size


def yaglom_samples(model, x: float, t: float, n_replicas: int, rng,
                   caps: SimCaps = SimCaps(), *, rho=None) -> YaglomDataset:
    """Overshoot datasets conditioned on reaching level t in the killed tree."""
    an = model.analytics()
    if rho is None:
        rho = an.rho_star if an.regime is Regime.CRITICAL else an.rho_plus
    forest = simulate_killed_forest(model, x, [t], n_replicas, rng, caps,
                                    collect_overshoots=True)
    h_all = forest.H[0]
    ids, vals = forest.overshoots[float(t)]
    surv = np.flatnonzero(h_all > 0)
    p_surv = binomial_estimate(surv.size, n_replicas, label="P(H(t)>0)")
    if surv.size == 0:
        raise RuntimeError(
            f"no replica reached level {t}: P(H(t)>0) <= {3.0 / n_replicas:.2e} "
            f"with 95% confidence at this budget; lower t or switch to the "
            f"spine estimator")
    order = np.argsort(ids, kind="stable")
    ids_s, vals_s = ids[order], vals[order]
    bounds = np.searchsorted(ids_s, surv)
    bounds = np.append(bounds, ids_s.size)
    overshoots = [vals_s[bounds[k]:bounds[k + 1]] for k in range(surv.size)]
    tilted = np.array([float(np.exp(rho * o).sum()) for o in overshoots])
    mins = np.array([float(o.min()) for o in overshoots])
    return YaglomDataset(t=float(t), rho=float(rho), H=h_all[surv],
                         overshoots=overshoots, tilted_mass=tilted,
                         min_overshoot=mins, p_survival=p_surv,
                         n_replicas=n_replicas,
                         truncated_fraction=forest.truncated_fraction)
