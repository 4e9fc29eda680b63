"""Intra-batch expert replication planning for one (micro_batch, layer).

Replicas of an expert may only live on GPUs of its home node, and each GPU
offers `r` replica slots shared by all experts (the home copy is free).
Given a placement, the token-splitting subproblem - what fraction of each
source's tokens every copy serves - is a linear program: the nested maxima
of the time model are linearized with auxiliary upper-bound variables, and
fractions are modeled as deviations from home-only serving so the origin
is always feasible.

The planner is an incremental greedy: repeatedly give the bottleneck GPU's
hottest expert one more replica on the cheapest candidate GPU, re-solve the
split LP (warm-started), and stop when slots, candidates, or improvement
run out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import chain, combinations

import numpy as np

from . import costmodel as cm
from .lp import DenseSimplex, LPError
from .reorder import ReorderPlan
from .topology import ClusterTopology, HardwareProfile, TrafficClass

IMPROVE_RTOL = 1e-9
ENUM_GUARD = 2**20


class InstanceTooLargeError(ValueError):
    """The exact enumeration oracle refuses instances past the guard."""


@dataclass(frozen=True)
class ReplicaConfig:
    """Per-GPU replica slot budget; the home copy does not count."""

    slots_per_gpu: int = 2

    def __post_init__(self) -> None:
        if self.slots_per_gpu < 0:
            raise ValueError("slots_per_gpu must be >= 0")


@dataclass
class ReplicaPlacement:
    """Home assignment plus non-home replica GPUs per expert."""

    home: np.ndarray                       # (E,) home GPU per expert
    replicas: dict[int, list[int]] = field(default_factory=dict)

    def copies(self, e: int) -> list[int]:
        return [int(self.home[e])] + self.replicas.get(e, [])

    def slot_usage(self, num_gpus: int) -> np.ndarray:
        used = np.zeros(num_gpus, dtype=int)
        for gpus in self.replicas.values():
            for g in gpus:
                used[g] += 1
        return used

    def serving(self, gpu: int) -> list[int]:
        """Experts with a copy (home or replica) on `gpu`, ascending."""
        out = list(np.flatnonzero(self.home == gpu))
        out.extend(e for e, gpus in self.replicas.items() if gpu in gpus)
        return sorted(set(int(e) for e in out))


@dataclass
class SplitPlan:
    """Per-source token fractions over each replicated expert's copies.

    fractions[e] has shape (G, len(copies(e))), columns ordered like
    ReplicaPlacement.copies(e). Experts absent from the dict are served
    entirely by their home copy.
    """

    fractions: dict[int, np.ndarray] = field(default_factory=dict)

    def to_split_map(self, placement: ReplicaPlacement) -> cm.SplitMap:
        return {
            e: (np.array(placement.copies(e)), frac)
            for e, frac in self.fractions.items()
        }


@dataclass
class ReplicationEntry:
    placement: ReplicaPlacement
    split: SplitPlan
    objective: float


@dataclass
class ReplicationPlan:
    """Replication decisions per (micro_batch, layer)."""

    entries: dict[tuple[int, int], ReplicationEntry] = field(default_factory=dict)


def candidate_gpus(e: int, home: np.ndarray, topo: ClusterTopology) -> list[int]:
    """GPUs eligible for replicas of e: its home node, home GPU excluded."""
    h = int(home[e])
    return [g for g in topo.node_gpus(topo.node_of(h)) if g != h]


def validate_placement(placement: ReplicaPlacement, topo: ClusterTopology, cfg: ReplicaConfig | None = None) -> None:
    for e, gpus in placement.replicas.items():
        cands = set(candidate_gpus(e, placement.home, topo))
        for g in gpus:
            if g not in cands:
                raise ValueError(f"replica of expert {e} on GPU {g} leaves its home node or duplicates home")
        if len(set(gpus)) != len(gpus):
            raise ValueError(f"duplicate replica GPUs for expert {e}")
    if cfg is not None:
        used = placement.slot_usage(topo.num_gpus)
        if (used > cfg.slots_per_gpu).any():
            raise ValueError(
                f"replica slots exceeded: usage {used.tolist()}, limit {cfg.slots_per_gpu}"
            )


def validate_split(split: SplitPlan, placement: ReplicaPlacement, x: np.ndarray, tol: float = 1e-6) -> None:
    """Conservation (fractions sum to 1 on routed entries) and coupling
    (mass only on placed copies, all fractions within [0, 1])."""
    x = np.asarray(x, dtype=np.float64)
    for e, frac in split.fractions.items():
        k = len(placement.copies(e))
        if frac.shape != (x.shape[0], k):
            raise ValueError(f"split for expert {e} has shape {frac.shape}, expected {(x.shape[0], k)}")
        if frac.min() < -tol or frac.max() > 1 + tol:
            raise ValueError(f"split fractions for expert {e} escape [0, 1]")
        active = x[:, e] > 0
        if active.any():
            err = np.abs(frac[active].sum(axis=1) - 1.0).max()
            if err > tol:
                raise ValueError(f"split for expert {e} violates conservation by {err:.3e}")


# ---------------------------------------------------------------------------
# token-splitting LP


class TokenSplitLP:
    """Warm-startable LP minimizing max-comp + max-comm over split fractions.

    Rows 0..G-1 bound the computation time of each GPU, rows G..5G-1 bound
    the four link-direction times; both bounds are shifted so the home-only
    split sits at the origin. An expert's first replica only appends bounded
    columns (v <= 1 doubles as the fraction budget); a second replica
    materializes one budget row per routed source.
    """

    N_AUX = 4  # pc, qc, pm, qm: signed deviations of the two maxima

    def __init__(self, x: np.ndarray, home: np.ndarray, topo: ClusterTopology, model, hw: HardwareProfile):
        self.x = np.asarray(x, dtype=np.float64)
        self.home = np.asarray(home)
        self.topo = topo
        g = topo.num_gpus
        self.comp_unit = 6.0 * model.hidden_size * model.intermediate_size / hw.flops_per_gpu
        self.link_units = np.array([
            hw.bytes_per_token / hw.bw_nvlink,
            hw.bytes_per_token / hw.bw_nvlink,
            hw.bytes_per_token / hw.bw_rdma,
            hw.bytes_per_token / hw.bw_rdma,
        ])

        base = cm.compute_loads(self.x, self.home, topo)
        comp_consts = cm.comp_time(base.comp, model, hw)
        comm_consts = cm.comm_row_times(base, hw).ravel()  # (4G,) in [dir][gpu] order
        self.t0_comp = float(comp_consts.max())
        self.t0_comm = float(comm_consts.max())

        n_aux_rows = 5 * g
        a = np.zeros((n_aux_rows, self.N_AUX))
        a[:g, 0] = -1.0   # pc
        a[:g, 1] = 1.0    # qc
        a[g:, 2] = -1.0   # pm
        a[g:, 3] = 1.0    # qm
        b = np.concatenate([self.t0_comp - comp_consts, self.t0_comm - comm_consts])
        c = np.array([1.0, -1.0, 1.0, -1.0])
        self.solver = DenseSimplex(c, a, b)
        self.var_meta: list[tuple[int, int, int]] = []  # (source, expert, gpu) per v column
        self.col_pos: dict[tuple[int, int, int], int] = {}
        self.sum_rows: dict[tuple[int, int], int] = {}
        self.rows_built: set[int] = set()
        self.replicas: dict[int, list[int]] = {}
        self._charge_cache: dict[tuple[int, int], np.ndarray] = {}

    def _pair_charge(self, j: int, g: int) -> np.ndarray:
        """Time charge on the 5G bound rows per token moved from j to g."""
        key = (j, g)
        cached = self._charge_cache.get(key)
        if cached is not None:
            return cached
        gq = self.topo.num_gpus
        vec = np.zeros(5 * gq)
        vec[g] += self.comp_unit
        cls = int(self.topo.class_matrix[j, g])
        u_nv = self.link_units[0]
        u_rd = self.link_units[2]

        def comm(direction: int, gpu: int, unit: float) -> None:
            vec[gq + direction * gq + gpu] += unit

        if cls == TrafficClass.NV:
            comm(0, j, u_nv); comm(1, g, u_nv)       # dispatch
            comm(0, g, u_nv); comm(1, j, u_nv)       # combine
        elif cls == TrafficClass.SR:
            comm(2, j, u_rd); comm(3, g, u_rd)
            comm(2, g, u_rd); comm(3, j, u_rd)
        elif cls == TrafficClass.CR:
            rj = int(self.topo.relay_matrix[j, g])   # relay on j's node
            rg = int(self.topo.relay_matrix[g, j])   # relay on g's node
            comm(0, j, u_nv); comm(1, rj, u_nv); comm(2, rj, u_rd); comm(3, g, u_rd)
            comm(0, g, u_nv); comm(1, rg, u_nv); comm(2, rg, u_rd); comm(3, j, u_rd)
        self._charge_cache[key] = vec
        return vec

    def add_replica(self, e: int, gpu: int) -> None:
        prior = self.replicas.get(e, [])
        if gpu in prior or gpu == self.home[e]:
            raise ValueError(f"expert {e} already has a copy on GPU {gpu}")
        self.replicas.setdefault(e, []).append(gpu)
        sources = np.flatnonzero(self.x[:, e] > 0)
        if sources.size == 0:
            return
        if prior and e not in self.rows_built:
            # second replica: the fraction budget now couples two columns,
            # so the v <= 1 bounds no longer suffice
            for j in sources:
                j = int(j)
                pos = self.col_pos[(j, e, prior[0])]
                self.solver.add_row({pos: 1.0}, 1.0)
                self.sum_rows[(j, e)] = self.solver.num_rows - 1
            self.rows_built.add(e)
        m = self.solver.num_rows
        gq = self.topo.num_gpus
        cols = np.zeros((m, sources.size))
        for idx, j in enumerate(sources):
            j = int(j)
            delta = self._pair_charge(j, gpu) - self._pair_charge(j, int(self.home[e]))
            cols[: 5 * gq, idx] = self.x[j, e] * delta
            if e in self.rows_built:
                cols[self.sum_rows[(j, e)], idx] = 1.0
            self.col_pos[(j, e, gpu)] = self.N_AUX + len(self.var_meta)
            self.var_meta.append((j, e, gpu))
        self.solver.add_columns(cols, np.zeros(sources.size), upper_new=np.ones(sources.size))

    def solve(self) -> float:
        """Optimize; returns the exact objective T0 + signed deviations."""
        try:
            obj = self.solver.solve()
        except LPError as err:
            raise LPError(
                f"token-split LP failed ({err}); instance: G={self.topo.num_gpus}, "
                f"replicas={self.replicas}"
            ) from err
        return self.t0_comp + self.t0_comm + obj

    def snapshot(self) -> dict:
        return {
            "solver": self.solver.snapshot(),
            "var_meta": list(self.var_meta),
            "col_pos": dict(self.col_pos),
            "sum_rows": dict(self.sum_rows),
            "rows_built": set(self.rows_built),
            "replicas": {e: list(g) for e, g in self.replicas.items()},
        }

    def restore(self, snap: dict) -> None:
        self.solver.restore(snap["solver"])
        self.var_meta = list(snap["var_meta"])
        self.col_pos = dict(snap["col_pos"])
        self.sum_rows = dict(snap["sum_rows"])
        self.rows_built = set(snap["rows_built"])
        self.replicas = {e: list(g) for e, g in snap["replicas"].items()}

    def split_plan(self) -> SplitPlan:
        values = self.solver.solution()[self.N_AUX:]
        plan = SplitPlan()
        g = self.topo.num_gpus
        for e, gpus in self.replicas.items():
            copies = [int(self.home[e])] + gpus
            frac = np.zeros((g, len(copies)))
            frac[:, 0] = 1.0
            plan.fractions[e] = frac
        for (j, e, gpu), v in zip(self.var_meta, values):
            frac = plan.fractions[e]
            col = ([int(self.home[e])] + self.replicas[e]).index(gpu)
            frac[j, col] = v
        for e, frac in plan.fractions.items():
            routed = np.flatnonzero(self.x[:, e] > 0)
            frac[routed, 0] = 1.0 - frac[routed, 1:].sum(axis=1)
            np.clip(frac, 0.0, 1.0, out=frac)
            sums = frac[routed].sum(axis=1, keepdims=True)
            frac[routed] /= sums
        return plan


def solve_token_split_lp(
    x: np.ndarray,
    placement: ReplicaPlacement,
    topo: ClusterTopology,
    model,
    hw: HardwareProfile,
) -> SplitPlan:
    """Optimal token fractions for a fixed replica placement."""
    validate_placement(placement, topo)
    lp = TokenSplitLP(x, placement.home, topo, model, hw)
    for e in sorted(placement.replicas):
        for gpu in placement.replicas[e]:
            lp.add_replica(e, gpu)
    lp.solve()
    split = lp.split_plan()
    validate_split(split, placement, x)
    return split


# ---------------------------------------------------------------------------
# planners


def _exact_objective(x, placement: ReplicaPlacement, split: SplitPlan, topo, model, hw) -> float:
    loads = cm.compute_loads(x, placement.home, topo, splits=split.to_split_map(placement))
    return cm.moe_time(loads, model, hw).t_moe


def _bottleneck_scores(x, placement, split, topo, model, hw) -> np.ndarray:
    loads = cm.compute_loads(x, placement.home, topo, splits=split.to_split_map(placement))
    est = cm.moe_time(loads, model, hw)
    return est.comp_times + est.comm_times


def _served_tokens(x: np.ndarray, placement: ReplicaPlacement, split: SplitPlan, e: int, gpu: int) -> float:
    copies = placement.copies(e)
    if e in split.fractions:
        col = copies.index(gpu)
        return float((x[:, e] * split.fractions[e][:, col]).sum())
    return float(x[:, e].sum()) if copies[0] == gpu else 0.0


MAX_TRIALS_PER_STEP = 8


def _bottleneck_candidates(comp_t: np.ndarray, comm_t: np.ndarray) -> list[int]:
    """GPUs supporting the comp or comm maximum, hottest first.

    Only these can lower max-comp + max-comm when relieved, so they are the
    placements worth trying before concluding that replication is done.
    """
    cands: set[int] = set()
    for values in (comp_t, comm_t):
        top = values.max()
        cands.update(np.flatnonzero(values >= top * (1.0 - 1e-9)).tolist())
    scores = comp_t + comm_t
    ranked = sorted(cands, key=lambda g: (-scores[g], g))
    return ranked[:MAX_TRIALS_PER_STEP]


def greedy_replicate(
    x: np.ndarray,
    plan: ReorderPlan,
    topo: ClusterTopology,
    model,
    hw: HardwareProfile,
    cfg: ReplicaConfig,
) -> tuple[ReplicaPlacement, SplitPlan]:
    """Incremental greedy replication with LP re-splitting after each step.

    Each step replicates a bottleneck GPU's most-loaded expert onto the
    cheapest candidate GPU with a free slot, then re-solves the token split.
    A placement that fails to improve the exact objective by more than 1e-9
    relative is rolled back; because the LP equalizes the load of several
    GPUs at the maximum, every GPU supporting the current maxima gets a
    trial before the search stops.
    """
    x = np.asarray(x, dtype=np.float64)
    home = np.asarray(plan.assignment)
    placement = ReplicaPlacement(home=home)
    split = SplitPlan()
    if cfg.slots_per_gpu == 0 or x.sum() == 0:
        return placement, split

    lp = TokenSplitLP(x, home, topo, model, hw)
    best_obj = _exact_objective(x, placement, split, topo, model, hw)
    slots = placement.slot_usage(topo.num_gpus)

    while (slots < cfg.slots_per_gpu).any():
        loads = cm.compute_loads(x, home, topo, splits=split.to_split_map(placement))
        est = cm.moe_time(loads, model, hw)
        scores = est.comp_times + est.comm_times
        accepted = False
        for g_b in _bottleneck_candidates(est.comp_times, est.comm_times):
            served = sorted(
                ((e, _served_tokens(x, placement, split, e, g_b)) for e in placement.serving(g_b)),
                key=lambda item: (-item[1], item[0]),
            )
            e_star = g_t = None
            for e, _load in served:
                targets = [
                    g for g in candidate_gpus(e, home, topo)
                    if g not in placement.replicas.get(e, []) and slots[g] < cfg.slots_per_gpu
                ]
                if targets:
                    e_star = e
                    g_t = min(targets, key=lambda g: (scores[g], g))
                    break
            if e_star is None:
                continue

            snap = lp.snapshot()
            lp.add_replica(e_star, g_t)
            lp.solve()
            trial_placement = ReplicaPlacement(home=home, replicas={
                e: list(gpus) for e, gpus in lp.replicas.items()
            })
            trial_split = lp.split_plan()
            trial_obj = _exact_objective(x, trial_placement, trial_split, topo, model, hw)
            if trial_obj < best_obj * (1.0 - IMPROVE_RTOL):
                placement = trial_placement
                split = trial_split
                best_obj = trial_obj
                slots = placement.slot_usage(topo.num_gpus)
                accepted = True
                break
            lp.restore(snap)
        if not accepted:
            break

    validate_placement(placement, topo, cfg)
    validate_split(split, placement, x)
    return placement, split


def _powerset(items: list[int]):
    return chain.from_iterable(combinations(items, k) for k in range(len(items) + 1))


def exact_milp_small(
    x: np.ndarray,
    plan: ReorderPlan,
    topo: ClusterTopology,
    model,
    hw: HardwareProfile,
    cfg: ReplicaConfig,
) -> tuple[ReplicaPlacement, SplitPlan]:
    """Enumerate every feasible placement, solving the split LP for each.

    Test oracle only: guarded to at most 2^20 candidate placements.
    """
    x = np.asarray(x, dtype=np.float64)
    home = np.asarray(plan.assignment)
    num_experts = x.shape[1]
    cands = [candidate_gpus(e, home, topo) for e in range(num_experts)]
    total = 1
    for c in cands:
        total *= 2 ** len(c)
        if total > ENUM_GUARD:
            raise InstanceTooLargeError(
                f"placement space exceeds {ENUM_GUARD}; refusing exact enumeration"
            )

    best: tuple[float, ReplicaPlacement, SplitPlan] | None = None

    def recurse(e: int, slots: np.ndarray, chosen: dict[int, list[int]]) -> None:
        nonlocal best
        if e == num_experts:
            placement = ReplicaPlacement(home=home, replicas={k: list(v) for k, v in chosen.items() if v})
            split = solve_token_split_lp(x, placement, topo, model, hw)
            obj = _exact_objective(x, placement, split, topo, model, hw)
            if best is None or obj < best[0] - 1e-15:
                best = (obj, placement, split)
            return
        for subset in _powerset(cands[e]):
            ok = all(slots[g] < cfg.slots_per_gpu for g in subset)
            if not ok:
                continue
            for g in subset:
                slots[g] += 1
            if subset:
                chosen[e] = list(subset)
            recurse(e + 1, slots, chosen)
            chosen.pop(e, None)
            for g in subset:
                slots[g] -= 1

    recurse(0, np.zeros(topo.num_gpus, dtype=int), {})
    assert best is not None
    return best[1], best[2]


# ---------------------------------------------------------------------------
# reporting helpers


def round_split(split: SplitPlan, placement: ReplicaPlacement, x: np.ndarray) -> dict[int, np.ndarray]:
    """Integer token counts per copy via largest-remainder rounding.

    Per (source, expert) row the integer counts sum exactly to x[j, e]; each
    count deviates from x*y by less than one token.
    """
    x = np.asarray(x, dtype=np.float64)
    out: dict[int, np.ndarray] = {}
    for e, frac in split.fractions.items():
        k = frac.shape[1]
        counts = np.zeros((x.shape[0], k), dtype=np.int64)
        for j in range(x.shape[0]):
            target = x[j, e]
            if target <= 0:
                continue
            raw = frac[j] * target
            floors = np.floor(raw).astype(np.int64)
            short = int(round(target - floors.sum()))
            if short > 0:
                remainders = raw - floors
                order = np.lexsort((np.arange(k), -remainders))
                floors[order[:short]] += 1
            counts[j] = floors
        out[e] = counts
    return out


def replica_memory(model, cfg: ReplicaConfig, scheme: str) -> int:
    """Bytes of replica-slot parameter memory per GPU for the buffer scheme."""
    if scheme == "per-layer":
        return model.num_layers * cfg.slots_per_gpu * model.param_bytes
    if scheme == "layer-shared":
        return cfg.slots_per_gpu * model.param_bytes
    raise ValueError(f"unknown buffer scheme {scheme!r}; expected 'per-layer' or 'layer-shared'")


# ---------------------------------------------------------------------------
# plan file round trip


def replication_plan_to_dict(plan: ReplicationPlan) -> dict:
    entries = []
    for (mb, layer) in sorted(plan.entries):
        entry = plan.entries[(mb, layer)]
        rows = []
        for e, frac in sorted(entry.split.fractions.items()):
            copies = entry.placement.copies(e)
            for j in range(frac.shape[0]):
                for col, gpu in enumerate(copies):
                    if frac[j, col] > 0:
                        rows.append([int(j), int(e), int(gpu), float(frac[j, col])])
        entries.append({
            "micro_batch": mb,
            "layer": layer,
            "replicas": [[int(e), int(g)] for e in sorted(entry.placement.replicas) for g in entry.placement.replicas[e]],
            "splits": rows,
            "objective": entry.objective,
        })
    return {"version": 1, "entries": entries}


def replication_plan_from_dict(data: dict, home_per_layer: dict[int, np.ndarray], num_gpus: int) -> ReplicationPlan:
    plan = ReplicationPlan()
    for entry in data["entries"]:
        mb, layer = entry["micro_batch"], entry["layer"]
        home = home_per_layer[layer]
        placement = ReplicaPlacement(home=home)
        for e, g in entry["replicas"]:
            placement.replicas.setdefault(int(e), []).append(int(g))
        split = SplitPlan()
        for j, e, gpu, value in entry["splits"]:
            e = int(e)
            if e not in split.fractions:
                split.fractions[e] = np.zeros((num_gpus, len(placement.copies(e))))
            col = placement.copies(e).index(int(gpu))
            split.fractions[e][int(j), col] = value
        plan.entries[(mb, layer)] = ReplicationEntry(placement=placement, split=split, objective=entry["objective"])
    return plan
