"""Branch surgery: turn selected shared layers into per-task copies.

Selection modes:

* ``top_conflict``  -- the top-K layers of a conflict ranking.
* ``random_layers`` -- a uniform random K-subset (control baseline).
* ``random_params`` -- a random subset matching the top-K plan's parameter
                       count to within 10% (control baseline).
* ``first_k`` / ``last_k`` -- the K layers nearest the input / the output.

``verify_one_step_dominance`` compares one gradient step on the branched
network against one step on the unmodified network, loss against loss on
the same batch, and separately reports the first-order gap that predicts
the winner.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlreadyTaskSpecificError,
    KTooLargeError,
    UnknownUnitError,
    WeightsNotNormalizedError,
)
from .network import (
    PER_TASK,
    SHARED,
    NetworkSpec,
    ParamStore,
    ParamUnit,
    backward_per_task,
    task_loss,
)
from .profiler import LayerRanking
from .rng import RngState

MODES = ("top_conflict", "random_layers", "random_params", "first_k", "last_k")


@dataclass
class SurgeryPlan:
    mode: str
    k: int
    selected: list[str]  # profiled-layer ids, selection order
    units: list[str]  # underlying unit ids (selection may be merged layers)
    param_delta: int  # (T-1) * sum of selected unit elements
    severity: float | None = None
    scores: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "k": self.k,
                "selected": self.selected,
                "units": self.units,
                "param_delta": self.param_delta,
                "severity": self.severity,
                "scores": self.scores,
            },
            indent=2,
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "SurgeryPlan":
        d = json.loads(text)
        return SurgeryPlan(
            mode=d["mode"],
            k=int(d["k"]),
            selected=list(d["selected"]),
            units=list(d["units"]),
            param_delta=int(d["param_delta"]),
            severity=d.get("severity"),
            scores={k: int(v) for k, v in d.get("scores", {}).items()},
        )


def _units_of(layer_ids, layer_units: dict[str, list[str]]) -> list[str]:
    units = []
    for lid in layer_ids:
        units.extend(layer_units[lid])
    return units


def _elements(store: ParamStore, unit_ids) -> int:
    sizes = {u.key: u.value.size for u in store}
    return sum(sizes[uid] for uid in unit_ids)


def select_layers(
    ranking: LayerRanking,
    mode: str,
    k: int,
    rng: RngState | None = None,
    *,
    spec: NetworkSpec,
    store: ParamStore,
    severity: float | None = None,
) -> SurgeryPlan:
    """Pick the layer set to branch, under one of the selection modes.

    ``ranking.network_order`` supplies the input-to-output order used by
    ``first_k``/``last_k``; the random modes consume the given rng.
    """
    if mode not in MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    layers = ranking.network_order
    if k > len(layers):
        raise KTooLargeError(f"K={k} but only {len(layers)} shared layers")
    layer_units = {
        lid: [lid] if lid in spec.branch_map else _merged_units(spec, lid) for lid in layers
    }
    t = spec.num_tasks

    if mode == "top_conflict":
        chosen = ranking.ranked[:k]
    elif mode == "first_k":
        chosen = layers[:k]
    elif mode == "last_k":
        chosen = layers[-k:]
    elif mode == "random_layers":
        if rng is None:
            raise ValueError("random_layers needs an rng")
        idx = sorted(rng.fork("rsl").choice_without_replacement(len(layers), k).tolist())
        chosen = [layers[i] for i in idx]
    else:  # random_params: match the top-K plan's element count to +/-10%
        if rng is None:
            raise ValueError("random_params needs an rng")
        target = _elements(store, _units_of(ranking.ranked[:k], layer_units))
        chosen = _sample_matching_params(layers, layer_units, store, target, rng.fork("rsp"))

    units = _units_of(chosen, layer_units)
    delta = (t - 1) * _elements(store, units)
    return SurgeryPlan(
        mode=mode,
        k=k,
        selected=list(chosen),
        units=units,
        param_delta=delta,
        severity=severity,
        scores={lid: ranking.scores.get(lid, 0) for lid in chosen},
    )


def _merged_units(spec: NetworkSpec, layer_id: str) -> list[str]:
    units = [uid for uid in spec.branch_map if uid.rsplit(".", 1)[0] == layer_id]
    if not units:
        raise UnknownUnitError(f"{layer_id} names no trunk units")
    return sorted(units)


def _sample_matching_params(layers, layer_units, store, target, rng, attempts=2000):
    sizes = {lid: _elements(store, layer_units[lid]) for lid in layers}
    lo, hi = 0.9 * target, 1.1 * target
    best = None
    best_err = float("inf")
    for _ in range(attempts):
        order = rng.permutation(len(layers))
        total = 0
        subset = []
        for i in order:
            lid = layers[int(i)]
            if total + sizes[lid] <= hi:
                subset.append(lid)
                total += sizes[lid]
            if total >= lo:
                break
        err = abs(total - target)
        if lo <= total <= hi:
            return sorted(subset, key=layers.index)
        if err < best_err:
            best, best_err = subset, err
    if best is None or not (lo <= sum(sizes[lid] for lid in best) <= hi):
        raise ValueError(
            f"could not assemble a random subset within 10% of {target} elements"
        )
    return sorted(best, key=layers.index)


def apply_surgery(
    spec: NetworkSpec, store: ParamStore, plan: SurgeryPlan
) -> tuple[NetworkSpec, ParamStore]:
    """Clone each selected unit into T per-task copies initialized from it.

    Everything else is copied untouched; forward passes immediately after
    surgery are bit-identical to the original network for every task.
    """
    t = spec.num_tasks
    for uid in plan.units:
        if uid not in spec.branch_map:
            raise UnknownUnitError(f"{uid} is not a trunk unit of this network")
        if spec.branch_map[uid] == PER_TASK:
            raise AlreadyTaskSpecificError(f"{uid} is already task-specific")
    new_map = dict(spec.branch_map)
    for uid in plan.units:
        new_map[uid] = PER_TASK
    new_spec = NetworkSpec(
        input_shape=spec.input_shape,
        trunk=list(spec.trunk),
        heads=[list(h) for h in spec.heads],
        branch_map=new_map,
    )
    selected = set(plan.units)
    new_units: list[ParamUnit] = []
    for unit in store:
        if unit.key in selected:
            for i in range(t):
                new_units.append(ParamUnit(f"{unit.key}#t{i}", unit.key, i, unit.value.copy()))
        else:
            new_units.append(ParamUnit(unit.key, unit.unit_id, unit.owner, unit.value.copy()))
    return new_spec, ParamStore(new_units)


@dataclass
class DominanceResult:
    verdict: str  # "Dominates" | "AssumptionViolated" | "Inconclusive"
    assumption_ok: bool
    margins: dict[tuple[int, int, str], float]
    min_margin: float
    gap_terms: dict[tuple[int, int], float]
    min_gap: float
    loss_branched: float
    loss_plain: float
    alpha_used: float


def _grad_for_unit(grads, task: int, uid: str) -> np.ndarray:
    return grads.per_task[task][uid].reshape(-1)


def assumption_margins(grads, plan: SurgeryPlan, num_tasks: int):
    """Margins of the pairwise condition and first-order gaps, per the plan.

    For every ordered task pair (i, j) and planned layer the condition
    cos(phi_ij)*||g_i|| < ||g_j|| must hold; the margin is the slack
    ||g_j|| - (g_i . g_j)/||g_j||.  The gap for a pair is
    sum over planned layers of ||g_i||^2 - g_i . g_j, which first-order
    analysis shows is the per-pair advantage of branching.
    """
    layer_units: dict[str, list[str]] = {}
    for lid in plan.selected:
        layer_units[lid] = [u for u in plan.units if u == lid or u.rsplit(".", 1)[0] == lid]
    margins: dict[tuple[int, int, str], float] = {}
    gap_terms: dict[tuple[int, int], float] = {}
    for i in range(num_tasks):
        for j in range(num_tasks):
            if i == j:
                continue
            gap = 0.0
            for lid, uids in layer_units.items():
                gi = np.concatenate([_grad_for_unit(grads, i, u) for u in uids])
                gj = np.concatenate([_grad_for_unit(grads, j, u) for u in uids])
                ni = float(np.linalg.norm(gi))
                nj = float(np.linalg.norm(gj))
                dot = float(gi @ gj)
                margins[(i, j, lid)] = nj - (dot / nj) if nj > 0.0 else -float("inf")
                gap += ni * ni - dot
            gap_terms[(i, j)] = gap
    return margins, gap_terms


def verify_one_step_dominance(
    spec: NetworkSpec,
    store: ParamStore,
    plan: SurgeryPlan,
    batches,
    loss_kinds,
    weights,
    alpha: float,
    alpha_floor: float = 1e-8,
) -> DominanceResult:
    """Compare one gradient step with and without branching the planned layers.

    Checks the pairwise norm/cosine condition on every planned layer, then
    performs both updates from the same starting point:

    * branched: each task's clone of a planned unit steps along that task's
      own gradient; remaining shared units step along the weighted sum.
    * plain: every shared unit steps along the weighted sum.

    Private units step identically on both sides.  The verdict compares the
    summed true (not Taylor) task losses on the same batch; the first-order
    gap that predicts branching to win is reported per ordered task pair.
    If the losses disagree with the prediction at the requested step size,
    the step is halved and retried down to ``alpha_floor``.
    """
    w = np.asarray(weights, dtype=np.float64)
    t = spec.num_tasks
    if w.shape != (t,) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise WeightsNotNormalizedError(f"need {t} weights summing to 1, got {w!r}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    for uid in plan.units:
        if spec.branch_map.get(uid) != SHARED:
            raise UnknownUnitError(f"planned unit {uid} is not currently shared")

    grads = backward_per_task(store, spec, batches, loss_kinds)
    margins, gap_terms = assumption_margins(grads, plan, t)
    assumption_ok = all(m > 0.0 for m in margins.values())
    min_margin = min(margins.values()) if margins else float("inf")
    min_gap = min(gap_terms.values()) if gap_terms else float("inf")

    def losses_at(a: float) -> tuple[float, float]:
        plain = store.copy()
        for unit in plain:
            if unit.owner is None:
                combined = sum(
                    w[i] * grads.per_task[i][unit.key] for i in range(t)
                )
                unit.value -= a * combined.reshape(unit.value.shape)
            else:
                g = grads.per_task[unit.owner].get(unit.key)
                if g is not None:
                    unit.value -= a * g.reshape(unit.value.shape)
        branched_spec, branched = apply_surgery(spec, store, plan)
        planned = set(plan.units)
        for unit in branched:
            origin = unit.unit_id
            if origin in planned:
                g = grads.per_task[unit.owner][origin]
                unit.value -= a * g.reshape(unit.value.shape)
            elif unit.owner is None:
                combined = sum(
                    w[i] * grads.per_task[i][unit.key] for i in range(t)
                )
                unit.value -= a * combined.reshape(unit.value.shape)
            else:
                g = grads.per_task[unit.owner].get(unit.key)
                if g is not None:
                    unit.value -= a * g.reshape(unit.value.shape)
        loss_plain = sum(
            task_loss(plain, spec, x, y, kind, i)
            for i, ((x, y), kind) in enumerate(zip(batches, loss_kinds))
        )
        loss_branched = sum(
            task_loss(branched, branched_spec, x, y, kind, i)
            for i, ((x, y), kind) in enumerate(zip(batches, loss_kinds))
        )
        return loss_branched, loss_plain

    alpha_used = alpha
    loss_branched, loss_plain = losses_at(alpha_used)
    if assumption_ok:
        while loss_branched >= loss_plain and alpha_used / 2.0 >= alpha_floor:
            alpha_used /= 2.0
            loss_branched, loss_plain = losses_at(alpha_used)

    if not assumption_ok:
        verdict = "AssumptionViolated"
    elif loss_branched < loss_plain:
        verdict = "Dominates"
    else:
        verdict = "Inconclusive"
    return DominanceResult(
        verdict=verdict,
        assumption_ok=assumption_ok,
        margins=margins,
        min_margin=min_margin,
        gap_terms=gap_terms,
        min_gap=min_gap,
        loss_branched=loss_branched,
        loss_plain=loss_plain,
        alpha_used=alpha_used,
    )


def random_dominance_instance(rng: RngState):
    """One random small-network instance for the dominance check.

    Returns (spec, store, plan, batches, loss_kinds, weights).  The caller
    filters on the margins; no filtering happens here.
    """
    from . import layers as L
    from .network import build_network

    t = 2 + int(rng.integers(0, 2))
    d_in = 3 + int(rng.integers(0, 3))
    hidden = 4 + int(rng.integers(0, 4))
    feat = 3 + int(rng.integers(0, 3))
    d_out = 1 + int(rng.integers(0, 3))
    spec = NetworkSpec(
        input_shape=(d_in,),
        trunk=[L.dense(d_in, hidden), L.relu(), L.dense(hidden, feat)],
        heads=[[L.dense(feat, d_out)] for _ in range(t)],
    )
    store = build_network(spec, rng.fork("params"))
    # perturb parameters so task heads are not identical at the probe point
    for unit in store:
        unit.value = unit.value + 0.3 * rng.fork("jitter", unit.key).standard_normal(unit.value.shape)

    n = 4 + int(rng.integers(0, 5))
    x = rng.fork("inputs").standard_normal((n, d_in))
    batches = []
    for i in range(t):
        y = 1.5 * rng.fork("targets", i).standard_normal((n, d_out))
        batches.append((x, y))
    loss_kinds = ["squared_error"] * t

    shared_weights = [uid for uid in spec.branch_map if uid.endswith(".weight")]
    n_pick = 1 + int(rng.integers(0, 2))
    idx = rng.fork("pick").choice_without_replacement(len(shared_weights), min(n_pick, len(shared_weights)))
    units = sorted(shared_weights[int(i)] for i in idx)
    sizes = {u.key: u.value.size for u in store}
    plan = SurgeryPlan(
        mode="top_conflict",
        k=len(units),
        selected=list(units),
        units=list(units),
        param_delta=(t - 1) * sum(sizes[u] for u in units),
    )
    e = -np.log(rng.fork("weights").uniform(size=t))
    weights = e / e.sum()
    return spec, store, plan, batches, loss_kinds, weights


def run_dominance_suite(
    n_instances: int,
    alpha: float,
    seed: int,
    margin_min: float = 1e-3,
    max_draws: int = 100000,
):
    """Generate random instances whose margins clear ``margin_min`` and verify each.

    Returns (results, n_dominates).
    """
    root = RngState(seed)
    results = []
    draws = 0
    while len(results) < n_instances:
        draws += 1
        if draws > max_draws:
            raise RuntimeError("could not assemble enough instances passing the margin filter")
        inst_rng = root.fork("instance", draws)
        spec, store, plan, batches, loss_kinds, weights = random_dominance_instance(inst_rng)
        grads = backward_per_task(store, spec, batches, loss_kinds)
        margins, _ = assumption_margins(grads, plan, spec.num_tasks)
        if min(margins.values()) < margin_min:
            continue
        res = verify_one_step_dominance(spec, store, plan, batches, loss_kinds, weights, alpha)
        results.append(res)
    n_dom = sum(1 for r in results if r.verdict == "Dominates")
    return results, n_dom
