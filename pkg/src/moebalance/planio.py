"""On-disk plan formats produced by `solve` and consumed by `simulate`.

reorder.json      per-layer expert->GPU arrays, optional sample->GPU array,
                  and the exact/smoothed objective achieved per layer
replication.json  per (micro_batch, layer): replica list, split table rows
                  (source_gpu, expert, serving_gpu, fraction), objective
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import replicate as rep
from . import reorder as ro
from .sim import PlanBundle


class PlanFormatError(ValueError):
    """Raised for malformed or mismatched plan files."""


def save_reorder_plan(path: str | Path, trace_id: str, plans: list[ro.ReorderPlan],
                      objectives: list[dict], sample_placement: ro.SamplePlacement | None,
                      config: dict) -> None:
    payload = {
        "version": 1,
        "trace_id": trace_id,
        "num_layers": len(plans),
        "plans": [plan.assignment.tolist() for plan in plans],
        "objectives": objectives,
        "sample_placement": sample_placement.source_gpu.tolist() if sample_placement else None,
        "config": config,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_reorder_plan(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing reorder plan file: {p}")
    data = json.loads(p.read_text())
    if data.get("version") != 1:
        raise PlanFormatError(f"unsupported reorder plan version in {p}")
    data["plans"] = [ro.ReorderPlan(np.asarray(a, dtype=np.int64)) for a in data["plans"]]
    if data.get("sample_placement") is not None:
        data["sample_placement"] = ro.SamplePlacement(np.asarray(data["sample_placement"], dtype=np.int64))
    return data


def save_replication_plan(path: str | Path, trace_id: str, plan: rep.ReplicationPlan) -> None:
    payload = rep.replication_plan_to_dict(plan)
    payload["trace_id"] = trace_id
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_replication_plan(path: str | Path, home_per_layer: dict[int, np.ndarray], num_gpus: int) -> tuple[rep.ReplicationPlan, str]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing replication plan file: {p}")
    data = json.loads(p.read_text())
    if data.get("version") != 1:
        raise PlanFormatError(f"unsupported replication plan version in {p}")
    plan = rep.replication_plan_from_dict(data, home_per_layer, num_gpus)
    return plan, data.get("trace_id", "")


def load_plan_bundle(plans_dir: str | Path, trace) -> PlanBundle:
    """Assemble a PlanBundle for `simulate` from a solve output directory."""
    root = Path(plans_dir)
    reorder_path = root / "reorder.json"
    replication_path = root / "replication.json"
    if not reorder_path.is_file():
        raise FileNotFoundError(f"missing plan file for relibra: {reorder_path}")
    reorder_data = load_reorder_plan(reorder_path)
    if reorder_data["trace_id"] and reorder_data["trace_id"] != trace.trace_id():
        raise PlanFormatError(
            f"reorder plan {reorder_path} was solved for trace {reorder_data['trace_id']}, "
            f"not {trace.trace_id()}"
        )
    plans = reorder_data["plans"]
    if len(plans) != trace.model.num_layers:
        raise PlanFormatError("reorder plan layer count disagrees with the trace")
    homes = {layer: plans[layer].assignment for layer in range(len(plans))}
    if not replication_path.is_file():
        raise FileNotFoundError(f"missing plan file for relibra: {replication_path}")
    replication, rep_trace_id = load_replication_plan(replication_path, homes, trace.topo.num_gpus)
    if rep_trace_id and rep_trace_id != trace.trace_id():
        raise PlanFormatError(f"replication plan {replication_path} belongs to a different trace")
    return PlanBundle(
        reorder=plans,
        sample_placement=reorder_data.get("sample_placement"),
        replication=replication,
    )
