"""Per-token routing statistics: expert utilization and task specialization.

A ``RoutingTrace`` collects, for every (layer, FFN slot, token) routing
decision, the selected expert indices and weights plus the task the sample
belongs to. From a trace we derive expert utilization vectors and per-task
routing distributions with pairwise Jensen-Shannon divergences (base-2, so
values live in [0, 1] bits).

Recording is append-only within one evaluation pass; analysis is pure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SMOOTHING_EPS = 1e-12


class EmptyTraceError(ValueError):
    """Raised when statistics are requested for a slot with no records."""


@dataclass(frozen=True)
class RouteRecord:
    layer: int
    slot: str
    token_pos: int
    task_id: str
    indices: tuple[int, ...]
    weights: tuple[float, ...]


class RoutingTrace:
    """Append-only routing log; attach via ``model.forward(..., trace=...)``."""

    def __init__(self, n_experts: int):
        self.n_experts = n_experts
        self.records: list[RouteRecord] = []
        self._task: str = "unknown"

    def __len__(self) -> int:
        return len(self.records)

    def set_context(self, task_id: str) -> None:
        """Task label for subsequently recorded tokens."""
        self._task = task_id

    def record(self, layer: int, slot: str, indices: np.ndarray,
               weights: np.ndarray) -> None:
        """Store one forward call's routing: indices/weights are [T, K]."""
        for pos in range(indices.shape[0]):
            self.records.append(RouteRecord(
                layer, slot, pos, self._task,
                tuple(int(i) for i in indices[pos]),
                tuple(float(w) for w in weights[pos])))

    def slots(self) -> list[tuple[int, str]]:
        """Distinct (layer, slot) pairs present, sorted."""
        return sorted({(r.layer, r.slot) for r in self.records})

    def select(self, layer: int, slot: str) -> list[RouteRecord]:
        return [r for r in self.records if r.layer == layer and r.slot == slot]


def utilization(trace: RoutingTrace, layer: int, slot: str) -> np.ndarray:
    """Fraction of token-routings per expert (each of the K selections
    counts once). Entries sum to one."""
    records = trace.select(layer, slot)
    if not records:
        raise EmptyTraceError(f"no routing records for layer {layer}, "
                              f"slot {slot!r}")
    counts = np.zeros(trace.n_experts, dtype=np.float64)
    for r in records:
        for i in r.indices:
            counts[i] += 1.0
    return counts / counts.sum()


def _task_counts(records: list[RouteRecord], n_experts: int
                 ) -> dict[str, np.ndarray]:
    by_task: dict[str, np.ndarray] = {}
    for r in records:
        row = by_task.setdefault(r.task_id, np.zeros(n_experts, dtype=np.float64))
        for i in r.indices:
            row[i] += 1.0
    return by_task


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence between two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def task_affinity(trace: RoutingTrace, layer: int, slot: str
                  ) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Per-task routing distributions and their pairwise divergences.

    Returns (task names, rows [tasks, N] each summing to one, JSD matrix
    [tasks, tasks] in bits). Tasks with zero routed tokens are excluded with
    a warning; fewer than two populated tasks is an error.
    """
    records = trace.select(layer, slot)
    if not records:
        raise EmptyTraceError(f"no routing records for layer {layer}, "
                              f"slot {slot!r}")
    by_task = _task_counts(records, trace.n_experts)
    empty = [t for t, row in by_task.items() if row.sum() == 0]
    for t in empty:
        warnings.warn(f"task {t!r} has no routed tokens; excluded")
        del by_task[t]
    if len(by_task) < 2:
        raise EmptyTraceError(
            f"task affinity needs at least two populated tasks, "
            f"got {sorted(by_task)}")
    tasks = sorted(by_task)
    rows = np.stack([by_task[t] + SMOOTHING_EPS for t in tasks])
    rows /= rows.sum(axis=1, keepdims=True)
    k = len(tasks)
    jsd = np.zeros((k, k), dtype=np.float64)
    for i in range(k):
        for j in range(i + 1, k):
            jsd[i, j] = jsd[j, i] = jensen_shannon(rows[i], rows[j])
    return tasks, rows, jsd


def mean_pairwise_jsd(jsd: np.ndarray) -> float:
    """Mean of the strict upper triangle of a pairwise JSD matrix."""
    k = jsd.shape[0]
    pairs = [jsd[i, j] for i in range(k) for j in range(i + 1, k)]
    return float(np.mean(pairs))


# -- serialization -----------------------------------------------------------

def export_trace(trace: RoutingTrace, path) -> None:
    """CSV: layer, slot, token position, task, K indices, K weights."""
    if not trace.records:
        raise EmptyTraceError("cannot export an empty trace")
    k = len(trace.records[0].indices)
    idx_cols = ",".join(f"idx_{i}" for i in range(k))
    w_cols = ",".join(f"weight_{i}" for i in range(k))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"layer,slot,token_position,task_id,{idx_cols},{w_cols}\n")
        for r in trace.records:
            idx = ",".join(str(i) for i in r.indices)
            ws = ",".join(repr(w) for w in r.weights)
            fh.write(f"{r.layer},{r.slot},{r.token_pos},{r.task_id},{idx},{ws}\n")


def load_trace(path, n_experts: int) -> RoutingTrace:
    """Inverse of ``export_trace``; repr-formatted weights round-trip exactly."""
    trace = RoutingTrace(n_experts)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        k = sum(1 for c in header if c.startswith("idx_"))
        for line in fh:
            cells = line.rstrip("\n").split(",")
            layer, slot, pos, task = cells[:4]
            indices = tuple(int(v) for v in cells[4:4 + k])
            weights = tuple(float(v) for v in cells[4 + k:4 + 2 * k])
            trace.records.append(RouteRecord(
                int(layer), slot, int(pos), task, indices, weights))
    return trace


def summary_table(trace: RoutingTrace) -> str:
    """Human-readable per-slot utilization and mean task divergence."""
    lines = ["layer slot   mean-JSD  utilization"]
    for layer, slot in trace.slots():
        util = utilization(trace, layer, slot)
        try:
            _, _, jsd = task_affinity(trace, layer, slot)
            mj = f"{mean_pairwise_jsd(jsd):8.4f}"
        except EmptyTraceError:
            mj = "     n/a"
        frac = " ".join(f"{u:.3f}" for u in util)
        lines.append(f"{layer:>5} {slot:<6} {mj}  {frac}")
    return "\n".join(lines)


def summary_csv(trace: RoutingTrace, path) -> None:
    """Machine-readable per-slot summary: utilization plus mean JSD."""
    with open(path, "w", encoding="utf-8") as fh:
        n = trace.n_experts
        util_cols = ",".join(f"util_{i}" for i in range(n))
        fh.write(f"layer,slot,mean_pairwise_jsd,{util_cols}\n")
        for layer, slot in trace.slots():
            util = utilization(trace, layer, slot)
            try:
                _, _, jsd = task_affinity(trace, layer, slot)
                mj = repr(mean_pairwise_jsd(jsd))
            except EmptyTraceError:
                mj = ""
            fh.write(f"{layer},{slot},{mj},"
                     + ",".join(repr(u) for u in util) + "\n")
