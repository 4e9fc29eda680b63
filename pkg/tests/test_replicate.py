import numpy as np
import pytest

from moebalance import costmodel as cm
from moebalance import replicate as rep
from moebalance import reorder as ro
from moebalance import routing as rt
from moebalance.topology import HardwareProfile, build_topology

UNIT_MODEL = rt.ModelProfile(num_layers=1, num_experts=2, top_k=1, hidden_size=1, intermediate_size=1)
COMM_FREE = HardwareProfile(6.0, 1e18, 1e18, 1.0)  # comp unit 1 s/token


def twelve_vs_four():
    topo = build_topology(1, 2, COMM_FREE)
    x = np.array([[12.0, 0.0], [0.0, 4.0]])
    plan = ro.ReorderPlan(np.array([0, 1]))
    return x, plan, topo


def objective(x, placement, split, topo, model, hw):
    loads = cm.compute_loads(x, placement.home, topo, splits=split.to_split_map(placement))
    return cm.moe_time(loads, model, hw).t_moe


def random_instance(rng, max_experts=4, max_gpus=4):
    """Small random instance on a 1-node or 2x2 topology with O(1) times."""
    shape = rng.choice(["1x2", "1x3", "2x2", "1x4"])
    nodes, gpn = {"1x2": (1, 2), "1x3": (1, 3), "2x2": (2, 2), "1x4": (1, 4)}[shape]
    g = nodes * gpn
    per_gpu = int(rng.integers(1, max(2, max_experts // g + 1)))
    num_experts = g * per_gpu
    hw = HardwareProfile(6.0, float(rng.uniform(20, 200)), float(rng.uniform(5, 50)), 1.0)
    topo = build_topology(nodes, gpn, hw)
    model = rt.ModelProfile(num_layers=1, num_experts=num_experts, top_k=1,
                            hidden_size=1, intermediate_size=1)
    x = rng.integers(0, 30, size=(g, num_experts)).astype(float)
    plan = ro.lpt_initial(x, topo)
    return x, plan, topo, model, hw


class TestTokenSplitLP:
    def test_home_only_forced(self):
        x, plan, topo = twelve_vs_four()
        placement = rep.ReplicaPlacement(home=plan.assignment)
        split = rep.solve_token_split_lp(x, placement, topo, UNIT_MODEL, COMM_FREE)
        assert split.fractions == {}
        assert objective(x, placement, split, topo, UNIT_MODEL, COMM_FREE) == pytest.approx(12.0)

    def test_analytic_two_thirds_split(self):
        x, plan, topo = twelve_vs_four()
        placement = rep.ReplicaPlacement(home=plan.assignment, replicas={0: [1]})
        split = rep.solve_token_split_lp(x, placement, topo, UNIT_MODEL, COMM_FREE)
        assert split.fractions[0][0] == pytest.approx([2 / 3, 1 / 3], abs=1e-9)
        loads = cm.compute_loads(x, plan.assignment, topo, splits=split.to_split_map(placement))
        np.testing.assert_allclose(loads.comp, [8.0, 8.0], atol=1e-9)

    def test_never_worse_than_home_only(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            x, plan, topo, model, hw = random_instance(rng)
            home_only = rep.ReplicaPlacement(home=plan.assignment)
            base = objective(x, home_only, rep.SplitPlan(), topo, model, hw)
            e = int(rng.integers(0, x.shape[1]))
            cands = rep.candidate_gpus(e, plan.assignment, topo)
            if not cands:
                continue
            placement = rep.ReplicaPlacement(home=plan.assignment, replicas={e: [cands[0]]})
            split = rep.solve_token_split_lp(x, placement, topo, model, hw)
            rep.validate_split(split, placement, x)
            assert objective(x, placement, split, topo, model, hw) <= base + 1e-9 * max(base, 1.0)

    def test_conservation_and_coupling_hold(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x, plan, topo, model, hw = random_instance(rng)
            placement = rep.ReplicaPlacement(home=plan.assignment)
            for e in range(x.shape[1]):
                cands = rep.candidate_gpus(e, plan.assignment, topo)
                if cands and rng.random() < 0.5:
                    placement.replicas[e] = list(rng.choice(cands, size=1))
            split = rep.solve_token_split_lp(x, placement, topo, model, hw)
            rep.validate_split(split, placement, x, tol=1e-6)

    def test_second_replica_keeps_budget(self):
        # three copies of one expert; fractions per source still sum to one
        hw = HardwareProfile(6.0, 1e18, 1e18, 1.0)
        topo = build_topology(1, 3, hw)
        model = rt.ModelProfile(num_layers=1, num_experts=3, top_k=1, hidden_size=1, intermediate_size=1)
        x = np.array([[30.0, 0, 0], [0, 3.0, 0], [0, 0, 3.0]])
        plan = ro.ReorderPlan(np.array([0, 1, 2]))
        placement = rep.ReplicaPlacement(home=plan.assignment, replicas={0: [1, 2]})
        split = rep.solve_token_split_lp(x, placement, topo, model, hw)
        rep.validate_split(split, placement, x)
        loads = cm.compute_loads(x, plan.assignment, topo, splits=split.to_split_map(placement))
        np.testing.assert_allclose(loads.comp, [12.0, 12.0, 12.0], atol=1e-6)

    def test_infeasible_placement_rejected(self):
        x, plan, topo = twelve_vs_four()
        off_node = rep.ReplicaPlacement(home=plan.assignment, replicas={0: [0]})
        with pytest.raises(ValueError):
            rep.solve_token_split_lp(x, off_node, topo, UNIT_MODEL, COMM_FREE)


class TestGreedy:
    def test_zero_slots_home_only(self):
        x, plan, topo = twelve_vs_four()
        placement, split = rep.greedy_replicate(x, plan, topo, UNIT_MODEL, COMM_FREE, rep.ReplicaConfig(0))
        assert placement.replicas == {}
        assert split.fractions == {}

    def test_zero_tokens_home_only(self):
        _, plan, topo = twelve_vs_four()
        x = np.zeros((2, 2))
        placement, split = rep.greedy_replicate(x, plan, topo, UNIT_MODEL, COMM_FREE, rep.ReplicaConfig(1))
        assert placement.replicas == {}

    def test_twelve_vs_four_single_iteration(self):
        x, plan, topo = twelve_vs_four()
        placement, split = rep.greedy_replicate(x, plan, topo, UNIT_MODEL, COMM_FREE, rep.ReplicaConfig(1))
        assert placement.replicas == {0: [1]}
        loads = cm.compute_loads(x, plan.assignment, topo, splits=split.to_split_map(placement))
        np.testing.assert_allclose(loads.comp, [8.0, 8.0], atol=1e-6)
        assert rt.skewness(loads.comp) == pytest.approx(1.0, abs=1e-9)

    def test_never_worse_than_home_only_and_slots_respected(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            x, plan, topo, model, hw = random_instance(rng)
            r = int(rng.integers(0, 3))
            cfg = rep.ReplicaConfig(r)
            placement, split = rep.greedy_replicate(x, plan, topo, model, hw, cfg)
            rep.validate_placement(placement, topo, cfg)
            rep.validate_split(split, placement, x)
            base = objective(x, rep.ReplicaPlacement(home=plan.assignment), rep.SplitPlan(), topo, model, hw)
            got = objective(x, placement, split, topo, model, hw)
            assert got <= base + 1e-9 * max(base, 1.0)

    def test_candidate_locality(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            x, plan, topo, model, hw = random_instance(rng)
            placement, _ = rep.greedy_replicate(x, plan, topo, model, hw, rep.ReplicaConfig(2))
            for e, gpus in placement.replicas.items():
                home_node = topo.node_of(int(plan.assignment[e]))
                for g in gpus:
                    assert topo.node_of(g) == home_node


class TestExactOracle:
    def test_r_zero_unique(self):
        x, plan, topo = twelve_vs_four()
        placement, split = rep.exact_milp_small(x, plan, topo, UNIT_MODEL, COMM_FREE, rep.ReplicaConfig(0))
        assert placement.replicas == {}

    def test_matches_greedy_on_analytic_instance(self):
        x, plan, topo = twelve_vs_four()
        cfg = rep.ReplicaConfig(1)
        p_g, s_g = rep.greedy_replicate(x, plan, topo, UNIT_MODEL, COMM_FREE, cfg)
        p_o, s_o = rep.exact_milp_small(x, plan, topo, UNIT_MODEL, COMM_FREE, cfg)
        got = objective(x, p_o, s_o, topo, UNIT_MODEL, COMM_FREE)
        assert got == pytest.approx(objective(x, p_g, s_g, topo, UNIT_MODEL, COMM_FREE), rel=1e-9)

    def test_objective_non_increasing_in_r(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            x, plan, topo, model, hw = random_instance(rng)
            values = []
            for r in (0, 1, 2):
                placement, split = rep.exact_milp_small(x, plan, topo, model, hw, rep.ReplicaConfig(r))
                values.append(objective(x, placement, split, topo, model, hw))
            assert values[1] <= values[0] + 1e-9
            assert values[2] <= values[1] + 1e-9

    def test_oracle_never_above_greedy(self):
        rng = np.random.default_rng(13)
        for _ in range(15):
            x, plan, topo, model, hw = random_instance(rng)
            cfg = rep.ReplicaConfig(1)
            p_g, s_g = rep.greedy_replicate(x, plan, topo, model, hw, cfg)
            p_o, s_o = rep.exact_milp_small(x, plan, topo, model, hw, cfg)
            assert (objective(x, p_o, s_o, topo, model, hw)
                    <= objective(x, p_g, s_g, topo, model, hw) + 1e-9)

    def test_guard_rejects_huge_spaces(self):
        hw = HardwareProfile(1e12, 1e9, 1e8, 1.0)
        topo = build_topology(1, 8, hw)
        model = rt.ModelProfile(num_layers=1, num_experts=64, top_k=1)
        x = np.ones((8, 64))
        plan = ro.static_plan(64, topo)
        with pytest.raises(rep.InstanceTooLargeError):
            rep.exact_milp_small(x, plan, topo, model, hw, rep.ReplicaConfig(2))


class TestRoundSplit:
    def test_one_hot_exact(self):
        x = np.array([[10.0, 0.0], [0.0, 4.0]])
        placement = rep.ReplicaPlacement(home=np.array([0, 1]), replicas={0: [1]})
        split = rep.SplitPlan(fractions={0: np.array([[1.0, 0.0], [1.0, 0.0]])})
        counts = rep.round_split(split, placement, x)
        assert counts[0][0].tolist() == [10, 0]

    def test_exact_halves(self):
        x = np.array([[10.0, 0.0], [0.0, 4.0]])
        placement = rep.ReplicaPlacement(home=np.array([0, 1]), replicas={0: [1]})
        split = rep.SplitPlan(fractions={0: np.array([[0.5, 0.5], [0.5, 0.5]])})
        assert rep.round_split(split, placement, x)[0][0].tolist() == [5, 5]

    def test_largest_remainder(self):
        x = np.array([[10.0, 0.0], [0.0, 4.0]])
        placement = rep.ReplicaPlacement(home=np.array([0, 1]), replicas={0: [1]})
        split = rep.SplitPlan(fractions={0: np.array([[2 / 3, 1 / 3], [1.0, 0.0]])})
        assert rep.round_split(split, placement, x)[0][0].tolist() == [7, 3]

    def test_counts_conserve_and_stay_close(self):
        rng = np.random.default_rng(17)
        x = rng.integers(0, 50, size=(4, 6)).astype(float)
        placement = rep.ReplicaPlacement(home=np.zeros(6, dtype=int), replicas={2: [1, 3]})
        raw = rng.dirichlet([1, 1, 1], size=4)
        split = rep.SplitPlan(fractions={2: raw})
        counts = rep.round_split(split, placement, x)[2]
        for j in range(4):
            assert counts[j].sum() == int(x[j, 2])
            assert (np.abs(counts[j] - raw[j] * x[j, 2]) < 1.0).all()


class TestReplicaMemory:
    def test_zero_slots(self):
        model = rt.ModelProfile(num_layers=48, num_experts=8, top_k=1, expert_param_bytes=1000)
        assert rep.replica_memory(model, rep.ReplicaConfig(0), "per-layer") == 0
        assert rep.replica_memory(model, rep.ReplicaConfig(0), "layer-shared") == 0

    def test_layer_shared_is_l_times_smaller(self):
        model = rt.ModelProfile(num_layers=48, num_experts=8, top_k=1, expert_param_bytes=1000)
        per_layer = rep.replica_memory(model, rep.ReplicaConfig(2), "per-layer")
        shared = rep.replica_memory(model, rep.ReplicaConfig(2), "layer-shared")
        assert per_layer == 48 * shared
        assert shared == 2 * 1000

    def test_single_layer_schemes_coincide(self):
        model = rt.ModelProfile(num_layers=1, num_experts=8, top_k=1, expert_param_bytes=5)
        assert (rep.replica_memory(model, rep.ReplicaConfig(3), "per-layer")
                == rep.replica_memory(model, rep.ReplicaConfig(3), "layer-shared"))

    def test_unknown_scheme(self):
        model = rt.ModelProfile(num_layers=1, num_experts=8, top_k=1)
        with pytest.raises(ValueError):
            rep.replica_memory(model, rep.ReplicaConfig(1), "global")


class TestPlanSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(19)
        x, plan, topo, model, hw = random_instance(rng)
        placement, split = rep.greedy_replicate(x, plan, topo, model, hw, rep.ReplicaConfig(2))
        entry = rep.ReplicationEntry(placement, split, 1.5)
        original = rep.ReplicationPlan(entries={(0, 0): entry})
        data = rep.replication_plan_to_dict(original)
        loaded = rep.replication_plan_from_dict(data, {0: plan.assignment}, topo.num_gpus)
        got = loaded.entries[(0, 0)]
        assert got.placement.replicas == placement.replicas
        assert got.objective == 1.5
        for e, frac in split.fractions.items():
            np.testing.assert_allclose(got.split.fractions[e], frac, atol=1e-12)
