"""Inter-batch expert reordering and the data-locality sample pass.

The reordering search is swap-based simulated annealing over
capacity-preserving expert-to-GPU assignments, seeded from a
longest-processing-time greedy plan. Chains propose uniformly random
expert pairs on distinct hosts, score moves with the log-sum-exp
surrogate of the MoE time, accept worsening moves with Metropolis
probability exp(-(T' - T) / theta), and cool theta geometrically from
the initial objective until it drops below the termination threshold.

State is cached per GPU and updated incrementally per swap from a
precomputed per-(expert, host) contribution tensor; a periodic full
refresh bounds floating-point drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import costmodel as cm
from .topology import ClusterTopology, HardwareProfile, TrafficClass

REFRESH_EVERY = 4096


@dataclass
class ReorderPlan:
    """Capacity-preserving expert-to-GPU assignment for one MoE layer."""

    assignment: np.ndarray  # (E,) GPU id per expert

    def experts_on(self, gpu: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == gpu)

    def copy(self) -> "ReorderPlan":
        return ReorderPlan(self.assignment.copy())

    def validate(self, topo: ClusterTopology) -> None:
        if len(self.assignment) % topo.num_gpus != 0:
            raise ValueError("expert count not divisible by GPU count")
        counts = np.bincount(self.assignment, minlength=topo.num_gpus)
        m = len(self.assignment) // topo.num_gpus
        if (counts != m).any():
            raise ValueError(
                f"plan is not capacity-preserving: counts {counts.tolist()}, expected {m} per GPU"
            )


@dataclass(frozen=True)
class AnnealConfig:
    """Chain seeds, cooling schedule and objective smoothing for annealing."""

    seeds: tuple[int, ...] = tuple(range(16))
    cooling_rate: float = 0.9995
    termination_eps: float | None = None  # absolute; None derives eps_frac * theta0
    eps_frac: float = 1e-3
    beta: float = 20.0

    def __post_init__(self) -> None:
        if len(self.seeds) < 1:
            raise ValueError("need at least one annealing seed")
        if not 0 < self.cooling_rate < 1:
            raise ValueError(f"cooling_rate must be in (0, 1), got {self.cooling_rate}")
        if self.termination_eps is not None and not self.termination_eps > 0:
            raise ValueError("termination_eps must be > 0")
        if not self.eps_frac > 0:
            raise ValueError("eps_frac must be > 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")

    def eps_for(self, theta0: float) -> float:
        if self.termination_eps is not None:
            return self.termination_eps
        return self.eps_frac * theta0


@dataclass
class SamplePlacement:
    """Sample-to-source-GPU assignment within the data-parallel group."""

    source_gpu: np.ndarray  # (S,)


# ---------------------------------------------------------------------------
# incremental load accounting


def _dest_contrib(col: np.ndarray, host: int, topo: ClusterTopology) -> np.ndarray:
    """(5, G) load contribution of serving per-source masses `col` at `host`.

    Rows: comp, nvlink_tx, nvlink_rx, rdma_tx, rdma_rx. Covers dispatch and
    the mirrored combine.
    """
    g = topo.num_gpus
    out = np.zeros((5, g))
    out[0, host] = col.sum()
    cls = topo.class_matrix[:, host]

    nv = np.where(cls == TrafficClass.NV, col, 0.0)
    sr = np.where(cls == TrafficClass.SR, col, 0.0)
    cr = np.where(cls == TrafficClass.CR, col, 0.0)
    nv_sum, sr_sum, cr_sum = nv.sum(), sr.sum(), cr.sum()

    # dispatch: source j -> host
    out[1] += nv + cr                      # nvlink tx at sources
    out[2, host] += nv_sum                 # nvlink rx at host
    out[3] += sr                           # rdma tx at sources
    out[4, host] += sr_sum + cr_sum        # rdma rx at host
    relay_mass = np.bincount(topo.relay_matrix[:, host], weights=cr, minlength=g)
    out[2] += relay_mass                   # nvlink rx at source-side relays
    out[3] += relay_mass                   # rdma tx at source-side relays

    # combine: host -> source j, same class, mirrored charges
    out[1, host] += nv_sum + cr_sum
    out[2] += nv
    out[3, host] += sr_sum
    out[4] += sr + cr
    relay_back = np.bincount(topo.relay_matrix[host, :], weights=cr, minlength=g)
    out[2] += relay_back                   # relays on the host's node
    out[3] += relay_back
    return out


def _source_contrib(mass_by_dst: np.ndarray, src: int, topo: ClusterTopology) -> np.ndarray:
    """(5, G) load contribution of source `src` sending mass_by_dst[g] to each GPU."""
    g = topo.num_gpus
    out = np.zeros((5, g))
    out[0] += mass_by_dst
    cls = topo.class_matrix[src, :]

    nv = np.where(cls == TrafficClass.NV, mass_by_dst, 0.0)
    sr = np.where(cls == TrafficClass.SR, mass_by_dst, 0.0)
    cr = np.where(cls == TrafficClass.CR, mass_by_dst, 0.0)
    nv_sum, sr_sum, cr_sum = nv.sum(), sr.sum(), cr.sum()

    # dispatch: src -> destinations
    out[1, src] += nv_sum + cr_sum
    out[2] += nv
    out[3, src] += sr_sum
    out[4] += sr + cr
    relay_mass = np.bincount(topo.relay_matrix[src, :], weights=cr, minlength=g)
    out[2] += relay_mass
    out[3] += relay_mass

    # combine: destinations -> src
    out[1] += nv + cr
    out[2, src] += nv_sum
    out[3] += sr
    out[4, src] += sr_sum + cr_sum
    relay_back = np.bincount(topo.relay_matrix[:, src], weights=cr, minlength=g)
    out[2] += relay_back
    out[3] += relay_back
    return out


def _time_units(model, hw: HardwareProfile) -> tuple[float, np.ndarray]:
    comp_unit = 6.0 * model.hidden_size * model.intermediate_size / hw.flops_per_gpu
    row_units = np.array([
        hw.bytes_per_token / hw.bw_nvlink,
        hw.bytes_per_token / hw.bw_nvlink,
        hw.bytes_per_token / hw.bw_rdma,
        hw.bytes_per_token / hw.bw_rdma,
    ])
    return comp_unit, row_units


def _lse(values: np.ndarray, beta: float) -> float:
    m = values.max()
    return float(m + math.log(np.exp(beta * (values - m)).sum()) / beta)


class AnnealState:
    """Cached loads for one placement; swaps update in O(G)."""

    def __init__(self, x: np.ndarray, assignment: np.ndarray, topo: ClusterTopology,
                 model, hw: HardwareProfile, beta: float = 20.0):
        self.x = np.asarray(x, dtype=np.float64)
        self.topo = topo
        self.beta = beta
        self.assignment = np.asarray(assignment).copy()
        num_experts = self.x.shape[1]
        g = topo.num_gpus
        self.contrib = np.zeros((num_experts, g, 5, g))
        for e in range(num_experts):
            col = self.x[:, e]
            for h in range(g):
                self.contrib[e, h] = _dest_contrib(col, h, topo)
        self.comp_unit, self.row_units = _time_units(model, hw)
        self._swaps_since_refresh = 0
        self.refresh()

    def fork(self, assignment: np.ndarray) -> "AnnealState":
        """A new state over the same inputs, sharing the contribution tensor."""
        clone = object.__new__(AnnealState)
        clone.x = self.x
        clone.topo = self.topo
        clone.beta = self.beta
        clone.assignment = np.asarray(assignment).copy()
        clone.contrib = self.contrib
        clone.comp_unit = self.comp_unit
        clone.row_units = self.row_units
        clone._swaps_since_refresh = 0
        clone.refresh()
        return clone

    def refresh(self) -> None:
        """Recompute cached loads from the contribution tensor."""
        self.loads5 = self.contrib[np.arange(len(self.assignment)), self.assignment].sum(axis=0)
        self._swaps_since_refresh = 0

    def swap_delta(self, e_a: int, e_b: int) -> np.ndarray:
        ga, gb = self.assignment[e_a], self.assignment[e_b]
        return (
            self.contrib[e_a, gb] - self.contrib[e_a, ga]
            + self.contrib[e_b, ga] - self.contrib[e_b, gb]
        )

    def apply_swap(self, e_a: int, e_b: int, delta: np.ndarray | None = None) -> None:
        if delta is None:
            delta = self.swap_delta(e_a, e_b)
        self.loads5 += delta
        self.assignment[e_a], self.assignment[e_b] = self.assignment[e_b], self.assignment[e_a]
        self._swaps_since_refresh += 1
        if self._swaps_since_refresh >= REFRESH_EVERY:
            self.refresh()

    def times(self, loads5: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        loads5 = self.loads5 if loads5 is None else loads5
        return loads5[0] * self.comp_unit, loads5[1:] * self.row_units[:, None]

    def exact_time(self, loads5: np.ndarray | None = None) -> float:
        comp_t, rows_t = self.times(loads5)
        return float(comp_t.max() + rows_t.max())

    def smoothed_time(self, loads5: np.ndarray | None = None) -> float:
        # LSE of per-GPU inner LSEs collapses to one LSE over all link terms
        comp_t, rows_t = self.times(loads5)
        return _lse(comp_t, self.beta) + _lse(rows_t.ravel(), self.beta)

    def load_vector(self) -> cm.LoadVector:
        return cm.LoadVector(
            comp=self.loads5[0].copy(),
            nvlink_tx=self.loads5[1].copy(),
            nvlink_rx=self.loads5[2].copy(),
            rdma_tx=self.loads5[3].copy(),
            rdma_rx=self.loads5[4].copy(),
            expert_load=self.x.sum(axis=0),
        )


def incremental_swap_update(state: AnnealState, e_a: int, e_b: int) -> AnnealState:
    """Swap the hosts of two experts, updating cached loads incrementally."""
    state.apply_swap(e_a, e_b)
    return state


# ---------------------------------------------------------------------------
# planning


def lpt_initial(x_batch: np.ndarray, topo: ClusterTopology) -> ReorderPlan:
    """Longest-processing-time greedy: heaviest expert to the least-loaded GPU.

    Ties go to the lowest GPU index; equal expert loads place the lower
    expert index first.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    num_experts = x.shape[1]
    g = topo.num_gpus
    if num_experts % g != 0:
        raise ValueError(f"{num_experts} experts not divisible by {g} GPUs")
    cap = num_experts // g
    loads = x.sum(axis=0)
    order = np.lexsort((np.arange(num_experts), -loads))
    gpu_load = np.zeros(g)
    gpu_count = np.zeros(g, dtype=int)
    assignment = np.zeros(num_experts, dtype=np.int64)
    for e in order:
        open_gpus = np.flatnonzero(gpu_count < cap)
        target = open_gpus[np.argmin(gpu_load[open_gpus])]
        assignment[e] = target
        gpu_load[target] += loads[e]
        gpu_count[target] += 1
    return ReorderPlan(assignment)


def static_plan(num_experts: int, topo: ClusterTopology) -> ReorderPlan:
    """Contiguous expert blocks: experts [g*M, (g+1)*M) live on GPU g."""
    g = topo.num_gpus
    if num_experts % g != 0:
        raise ValueError(f"{num_experts} experts not divisible by {g} GPUs")
    return ReorderPlan(np.repeat(np.arange(g), num_experts // g))


def _run_chain(shared: AnnealState, assignment0: np.ndarray, cfg: AnnealConfig, seed: int) -> np.ndarray:
    """One annealing chain; returns its best-so-far placement."""
    state = shared.fork(assignment0)
    num_experts = len(assignment0)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    t_cur = state.smoothed_time()
    theta = t_cur if t_cur > 0 else 1.0
    eps = cfg.eps_for(theta)
    best_assign = state.assignment.copy()
    best_t = t_cur
    if state.topo.num_gpus < 2 or num_experts < 2:
        return best_assign
    while theta > eps:
        while True:
            e_a, e_b = rng.integers(0, num_experts, size=2)
            if e_a != e_b and state.assignment[e_a] != state.assignment[e_b]:
                break
        delta = state.swap_delta(e_a, e_b)
        t_new = state.smoothed_time(state.loads5 + delta)
        diff = t_new - t_cur
        if diff < 0 or rng.random() < math.exp(-min(diff / theta, 745.0)):
            state.apply_swap(e_a, e_b, delta)
            t_cur = t_new
            if t_cur < best_t:
                best_t = t_cur
                best_assign = state.assignment.copy()
        theta *= cfg.cooling_rate
    return best_assign


def anneal_reorder(
    x_batch: np.ndarray,
    topo: ClusterTopology,
    model,
    hw: HardwareProfile,
    cfg: AnnealConfig,
    extra_initial_plans: Sequence[ReorderPlan] = (),
) -> ReorderPlan:
    """Swap-based simulated annealing from the LPT plan.

    Returns the plan with the lowest exact MoE time among the LPT plan, any
    extra initial candidates, and every chain's best-so-far plan (first
    minimum wins, chains in seed order), so the result is never worse than
    the LPT initialization.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    base = lpt_initial(x, topo)
    shared = AnnealState(x, base.assignment, topo, model, hw, beta=cfg.beta)

    candidates = [base.assignment]
    for plan in extra_initial_plans:
        plan.validate(topo)
        candidates.append(np.asarray(plan.assignment))
    for seed in cfg.seeds:
        candidates.append(_run_chain(shared, base.assignment, cfg, seed))

    best = candidates[0]
    best_t = math.inf
    for assign in candidates:
        t = shared.fork(assign).exact_time()
        if t < best_t:
            best_t = t
            best = assign
    return ReorderPlan(np.asarray(best).copy())


# ---------------------------------------------------------------------------
# data-locality sample placement


class _SampleState:
    """Per-(micro_batch, layer) cached loads under a sample placement."""

    def __init__(self, trace, topo, beta: float, comp_unit: float, row_units: np.ndarray,
                 dst_mass: np.ndarray, placement: np.ndarray | None = None):
        self.trace = trace
        self.topo = topo
        self.beta = beta
        self.samples = trace.samples
        self.comp_unit = comp_unit
        self.row_units = row_units
        self.dst_mass = dst_mass
        s = self.samples
        mb_count = trace.num_micro_batches
        layers = trace.model.num_layers
        g = topo.num_gpus
        self.loads5 = np.zeros((mb_count, layers, 5, g))
        self.totals = np.zeros((mb_count, g))
        if placement is None:
            placement = s.source_gpu.astype(np.int64)
        self.placement = np.asarray(placement, dtype=np.int64).copy()
        for i in range(s.num_samples):
            self._apply_sample(i, int(self.placement[i]), sign=1.0)

    def fork(self, placement: np.ndarray) -> "_SampleState":
        return _SampleState(self.trace, self.topo, self.beta, self.comp_unit,
                            self.row_units, self.dst_mass, placement=placement)

    def _apply_sample(self, i: int, gpu: int, sign: float) -> None:
        mb = int(self.samples.micro_batch[i])
        for layer in range(self.dst_mass.shape[1]):
            self.loads5[mb, layer] += sign * _source_contrib(self.dst_mass[i, layer], gpu, self.topo)
        self.totals[mb, gpu] += sign * float(self.samples.tokens[i])

    def move(self, i: int, new_gpu: int) -> None:
        self._apply_sample(i, int(self.placement[i]), sign=-1.0)
        self._apply_sample(i, new_gpu, sign=1.0)
        self.placement[i] = new_gpu

    def entry_smoothed(self, mb: int) -> float:
        total = 0.0
        for layer in range(self.loads5.shape[1]):
            comp_t = self.loads5[mb, layer, 0] * self.comp_unit
            rows_t = self.loads5[mb, layer, 1:] * self.row_units[:, None]
            total += _lse(comp_t, self.beta) + _lse(rows_t.ravel(), self.beta)
        return total

    def entry_exact(self, mb: int) -> float:
        total = 0.0
        for layer in range(self.loads5.shape[1]):
            comp_t = self.loads5[mb, layer, 0] * self.comp_unit
            rows_t = self.loads5[mb, layer, 1:] * self.row_units[:, None]
            total += float(comp_t.max() + rows_t.max())
        return total

    def entry_comm(self, mb: int) -> float:
        total = 0.0
        for layer in range(self.loads5.shape[1]):
            rows_t = self.loads5[mb, layer, 1:] * self.row_units[:, None]
            total += float(rows_t.max())
        return total

    def smoothed_total(self) -> float:
        return sum(self.entry_smoothed(mb) for mb in range(self.loads5.shape[0]))

    def exact_total(self) -> float:
        return sum(self.entry_exact(mb) for mb in range(self.loads5.shape[0]))


def _build_sample_state(trace, plans: Sequence[ReorderPlan], topo, model, hw, beta: float,
                        placement: np.ndarray | None = None) -> _SampleState:
    if trace.samples is None:
        raise ValueError("trace has no sample table")
    s = trace.samples
    layers = trace.model.num_layers
    g = topo.num_gpus
    comp_unit, row_units = _time_units(model, hw)
    # per-sample, per-layer destination masses under the expert plans
    dst_mass = np.zeros((s.num_samples, layers, g))
    for layer in range(layers):
        hosts = plans[layer].assignment
        for i in range(s.num_samples):
            dst_mass[i, layer] = np.bincount(
                hosts, weights=s.counts[i, layer].astype(np.float64), minlength=g
            )
    return _SampleState(trace, topo, beta, comp_unit, row_units, dst_mass, placement=placement)


def greedy_sample_initial(trace, plans: Sequence[ReorderPlan], topo, model, hw,
                          beta: float = 20.0, band: float = 0.10) -> SamplePlacement:
    """Longest-first greedy: each sample goes to the GPU with the lowest
    resulting per-micro-batch communication time, within the token band."""
    state = _build_sample_state(trace, plans, topo, model, hw, beta)
    s = trace.samples
    g = topo.num_gpus
    for i in range(s.num_samples):
        state._apply_sample(i, int(state.placement[i]), sign=-1.0)
    mean = _mb_means(trace, g)
    order = np.lexsort((np.arange(s.num_samples), -s.tokens.astype(np.int64)))
    placement = np.zeros(s.num_samples, dtype=np.int64)
    for i in order:
        mb = int(s.micro_batch[i])
        hi = (1.0 + band) * mean[mb]
        fits = [gpu for gpu in range(g) if state.totals[mb, gpu] + s.tokens[i] <= hi + 1e-9]
        if not fits:
            fits = [int(np.argmin(state.totals[mb]))]
        best_gpu, best_obj = fits[0], math.inf
        for gpu in fits:
            state._apply_sample(i, gpu, sign=1.0)
            obj = state.entry_comm(mb)
            state._apply_sample(i, gpu, sign=-1.0)
            if obj < best_obj - 1e-15:
                best_obj = obj
                best_gpu = gpu
        state._apply_sample(i, best_gpu, sign=1.0)
        placement[i] = best_gpu
        state.placement[i] = best_gpu
    return SamplePlacement(source_gpu=placement)


def _mb_means(trace, g: int) -> dict[int, float]:
    s = trace.samples
    return {
        mb: float(s.tokens[s.micro_batch == mb].sum()) / g
        for mb in range(trace.num_micro_batches)
    }


def _run_sample_chain(base: _SampleState, initial: np.ndarray, mean: dict[int, float],
                      cfg: AnnealConfig, band: float, seed: int) -> np.ndarray:
    state = base.fork(initial)
    s = state.samples
    num_samples = s.num_samples
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    t_cur = state.smoothed_total()
    theta = t_cur if t_cur > 0 else 1.0
    eps = cfg.eps_for(theta)
    best_assign = state.placement.copy()
    best_t = t_cur
    while theta > eps:
        i, j = rng.integers(0, num_samples, size=2)
        gi, gj = int(state.placement[i]), int(state.placement[j])
        if i == j or gi == gj:
            theta *= cfg.cooling_rate
            continue
        mbi, mbj = int(s.micro_batch[i]), int(s.micro_batch[j])
        before = state.entry_smoothed(mbi) + (state.entry_smoothed(mbj) if mbj != mbi else 0.0)
        state.move(i, gj)
        state.move(j, gi)
        in_band = True
        for mb, gpu in {(mbi, gi), (mbi, gj), (mbj, gi), (mbj, gj)}:
            lo, hi = (1.0 - band) * mean[mb], (1.0 + band) * mean[mb]
            if not (lo - 1e-9 <= state.totals[mb, gpu] <= hi + 1e-9):
                in_band = False
        after = state.entry_smoothed(mbi) + (state.entry_smoothed(mbj) if mbj != mbi else 0.0)
        diff = after - before
        if in_band and (diff < 0 or rng.random() < math.exp(-min(max(diff, 0.0) / theta, 745.0))):
            t_cur += diff
            if t_cur < best_t:
                best_t = t_cur
                best_assign = state.placement.copy()
        else:
            state.move(i, gi)
            state.move(j, gj)
        theta *= cfg.cooling_rate
    return best_assign


def anneal_sample_placement(
    trace,
    plans: Sequence[ReorderPlan],
    topo,
    model,
    hw: HardwareProfile,
    cfg: AnnealConfig,
    band: float = 0.10,
) -> SamplePlacement:
    """Second annealing round: swap sample source GPUs under fixed expert plans.

    The objective is the smoothed MoE time summed over every micro-batch and
    layer; moves that would leave a GPU's token total outside the +/-band
    around the per-micro-batch mean are rejected. The returned placement is
    never worse than the greedy initial one in summed exact time.
    """
    if trace.samples is None:
        raise ValueError("trace has no sample table")
    initial = greedy_sample_initial(trace, plans, topo, model, hw, beta=cfg.beta, band=band)
    g = topo.num_gpus
    base = _build_sample_state(trace, plans, topo, model, hw, cfg.beta, placement=initial.source_gpu)
    mean = _mb_means(trace, g)

    candidates = [initial.source_gpu.copy()]
    if g >= 2 and trace.samples.num_samples >= 2:
        for seed in cfg.seeds:
            candidates.append(_run_sample_chain(base, initial.source_gpu, mean, cfg, band, seed))

    best = candidates[0]
    best_exact = base.fork(best).exact_total()
    for cand in candidates[1:]:
        t = base.fork(cand).exact_total()
        if t < best_exact:
            best_exact = t
            best = cand
    return SamplePlacement(source_gpu=np.asarray(best).copy())


def apply_plan(
    x: np.ndarray,
    plan: ReorderPlan,
    placement: SamplePlacement | None = None,
    trace=None,
    micro_batch: int | None = None,
    layer: int | None = None,
) -> np.ndarray:
    """Re-express one routing matrix under an expert plan and sample placement.

    Expert relocation never changes matrix values (only traffic classes);
    relocated samples move their token counts between source rows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != len(plan.assignment):
        raise ValueError(f"matrix has {x.shape[1]} experts, plan covers {len(plan.assignment)}")
    out = x.copy()
    if placement is None:
        return out
    if trace is None or trace.samples is None or micro_batch is None or layer is None:
        raise ValueError("sample relocation requires the trace with samples plus micro_batch and layer")
    s = trace.samples
    for i in np.flatnonzero(s.micro_batch == micro_batch):
        src = int(s.source_gpu[i])
        dst = int(placement.source_gpu[i])
        if src == dst:
            continue
        counts = s.counts[i, layer].astype(np.float64)
        out[src] -= counts
        out[dst] += counts
    if out.min() < 0:
        raise ValueError("sample relocation produced negative counts; matrix does not match the trace")
    return out


def rewrite_trace_matrices(trace, placement: SamplePlacement) -> np.ndarray:
    """All (MB, L, G, E) matrices with sample rows moved to their new sources."""
    s = trace.samples
    if s is None:
        raise ValueError("trace has no sample table")
    out = trace.matrices.astype(np.float64).copy()
    for i in range(s.num_samples):
        src = int(s.source_gpu[i])
        dst = int(placement.source_gpu[i])
        if src == dst:
            continue
        mb = int(s.micro_batch[i])
        counts = s.counts[i].astype(np.float64)  # (L, E)
        out[mb, :, src, :] -= counts
        out[mb, :, dst, :] += counts
    if out.min() < 0:
        raise ValueError("sample relocation produced negative counts")
    return out
