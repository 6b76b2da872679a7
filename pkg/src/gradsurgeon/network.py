"""Shared-trunk networks with per-task heads and a branch map.

The branch map assigns every trunk parameter unit to ``shared`` (one tensor
used by all tasks) or ``per_task`` (T value-tracked copies, one per task).
Head units are always private to their task.  Surgery edits exactly this
map; everything else (shapes, ordering, unit ids) stays stable so that
pre/post reports can be aligned by unit id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import (
    NonFiniteLossError,
    ShapeMismatchError,
    UnknownTaskError,
    UnknownUnitError,
)
from .rng import RngState

SHARED = "shared"
PER_TASK = "per_task"

LOSS_KINDS = ("squared_error", "cross_entropy")


@dataclass
class NetworkSpec:
    """Architecture plus sharing assignment.

    ``branch_map`` has one entry per trunk parameter unit.  Heads are listed
    per task and are reachable only by their own task.
    """

    input_shape: tuple
    trunk: list[L.LayerSpec]
    heads: list[list[L.LayerSpec]]
    branch_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(e) for e in self.input_shape)
        if not self.branch_map:
            self.branch_map = {uid: SHARED for uid, _ in trunk_units(self)}
        self.validate()

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    def validate(self):
        shape = self.input_shape
        for idx, layer in enumerate(self.trunk):
            shape = L.output_shape(layer, shape, f"trunk[{idx}]")
        for t, head in enumerate(self.heads):
            hshape = shape
            for idx, layer in enumerate(head):
                hshape = L.output_shape(layer, hshape, f"head{t}[{idx}]")
        declared = set(self.branch_map)
        actual = {uid for uid, _ in trunk_units(self)}
        if declared != actual:
            raise UnknownUnitError(
                f"branch_map keys {sorted(declared ^ actual)} do not match trunk units"
            )
        for uid, owner in self.branch_map.items():
            if owner not in (SHARED, PER_TASK):
                raise ValueError(f"branch_map[{uid!r}] must be 'shared' or 'per_task'")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "trunk": [s.to_dict() for s in self.trunk],
            "heads": [[s.to_dict() for s in head] for head in self.heads],
            "branch_map": dict(sorted(self.branch_map.items())),
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            input_shape=tuple(d["input_shape"]),
            trunk=[L.LayerSpec.from_dict(s) for s in d["trunk"]],
            heads=[[L.LayerSpec.from_dict(s) for s in h] for h in d["heads"]],
            branch_map=dict(d.get("branch_map", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        return NetworkSpec.from_dict(json.loads(text))


def trunk_units(spec: NetworkSpec):
    """Yield (unit_id, shape) for every trunk parameter unit, input to output."""
    out = []
    for idx, layer in enumerate(spec.trunk):
        for name, shape in L.param_shapes(layer).items():
            out.append((f"trunk.{idx}.{name}", shape))
    return out


def head_units(spec: NetworkSpec, task: int):
    out = []
    for idx, layer in enumerate(spec.heads[task]):
        for name, shape in L.param_shapes(layer).items():
            out.append((f"head{task}.{idx}.{name}", shape))
    return out


def _unit_layer(spec: NetworkSpec, unit_id: str) -> L.LayerSpec:
    scope, idx, _ = unit_id.split(".")
    if scope == "trunk":
        return spec.trunk[int(idx)]
    return spec.heads[int(scope[4:])][int(idx)]


@dataclass
class ParamUnit:
    key: str  # storage key; per-task trunk copies are "<unit_id>#t<i>"
    unit_id: str  # logical id; for clones this is the origin unit
    owner: int | None  # None = shared, else owning task
    value: np.ndarray


class ParamStore:
    """Ordered mapping of storage keys to parameter tensors."""

    def __init__(self, units: list[ParamUnit]):
        self.units: dict[str, ParamUnit] = {u.key: u for u in units}
        if len(self.units) != len(units):
            raise ValueError("duplicate storage keys")

    def __iter__(self):
        return iter(self.units.values())

    def key_for(self, spec: NetworkSpec, unit_id: str, task: int) -> str:
        if unit_id.startswith("trunk.") and spec.branch_map[unit_id] == PER_TASK:
            return f"{unit_id}#t{task}"
        return unit_id

    def value(self, spec: NetworkSpec, unit_id: str, task: int) -> np.ndarray:
        key = self.key_for(spec, unit_id, task)
        if key not in self.units:
            raise UnknownUnitError(f"no parameter stored under {key!r}")
        return self.units[key].value

    def copy(self) -> "ParamStore":
        return ParamStore(
            [ParamUnit(u.key, u.unit_id, u.owner, u.value.copy()) for u in self]
        )


def _init_value(shape: tuple, fan_in: int, is_weight: bool, rng: RngState) -> np.ndarray:
    if not is_weight or fan_in == 0:
        return np.zeros(shape, dtype=np.float64)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float64)


def _init_fork_tag(unit_id: str) -> str:
    # Heads that are architecturally identical start from identical values:
    # the fork tag drops the task index so symmetric tasks stay symmetric
    # and per-task trunk copies are born equal to each other.
    if unit_id.startswith("head"):
        scope, idx, name = unit_id.split(".")
        return f"head.{idx}.{name}"
    return unit_id


def build_network(spec: NetworkSpec, rng: RngState) -> ParamStore:
    """Deterministic initialization: fan-in-scaled uniform weights, zero biases.

    Every unit draws from its own forked stream keyed by the unit id, so the
    values of one unit never depend on which other units exist.  The same
    spec + seed always gives bit-identical parameters.
    """
    spec.validate()
    units: list[ParamUnit] = []
    for unit_id, shape in trunk_units(spec):
        layer = _unit_layer(spec, unit_id)
        is_weight = unit_id.endswith(".weight")
        value = _init_value(shape, L.weight_fan_in(layer), is_weight, rng.fork("init", unit_id))
        if spec.branch_map[unit_id] == SHARED:
            units.append(ParamUnit(unit_id, unit_id, None, value))
        else:
            for t in range(spec.num_tasks):
                units.append(ParamUnit(f"{unit_id}#t{t}", unit_id, t, value.copy()))
    for t in range(spec.num_tasks):
        for unit_id, shape in head_units(spec, t):
            layer = _unit_layer(spec, unit_id)
            is_weight = unit_id.endswith(".weight")
            tag = _init_fork_tag(unit_id)
            value = _init_value(shape, L.weight_fan_in(layer), is_weight, rng.fork("init", tag))
            units.append(ParamUnit(unit_id, unit_id, t, value))
    return ParamStore(units)


def _layer_params(store: ParamStore, spec: NetworkSpec, scope: str, idx: int, task: int):
    layer = spec.trunk[idx] if scope == "trunk" else spec.heads[task][idx]
    prefix = f"trunk.{idx}" if scope == "trunk" else f"head{task}.{idx}"
    return {
        name: store.value(spec, f"{prefix}.{name}", task)
        for name in L.param_shapes(layer)
    }


def forward(store: ParamStore, spec: NetworkSpec, x: np.ndarray, task: int) -> np.ndarray:
    """Forward pass for one task; per-task trunk units resolve to the task's copy."""
    y, _ = _forward_with_caches(store, spec, x, task)
    return y


def _forward_with_caches(store: ParamStore, spec: NetworkSpec, x: np.ndarray, task: int):
    if not 0 <= task < spec.num_tasks:
        raise UnknownTaskError(f"task {task} out of range (T={spec.num_tasks})")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatchError(
            f"input shape {tuple(x.shape[1:])} does not match spec {spec.input_shape}"
        )
    caches = []
    for idx, layer in enumerate(spec.trunk):
        params = _layer_params(store, spec, "trunk", idx, task)
        x, cache = L.forward(layer, params, x)
        caches.append(("trunk", idx, params, cache))
    for idx, layer in enumerate(spec.heads[task]):
        params = _layer_params(store, spec, "head", idx, task)
        x, cache = L.forward(layer, params, x)
        caches.append(("head", idx, params, cache))
    return x, caches


def loss_value(kind: str, pred: np.ndarray, target: np.ndarray) -> float:
    """Mean batch loss. squared_error is 0.5*||pred-y||^2 per example."""
    n = pred.shape[0]
    if kind == "squared_error":
        diff = pred.reshape(n, -1) - target.reshape(n, -1)
        return float(0.5 * np.sum(diff * diff) / n)
    if kind == "cross_entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.log(pred)
        terms = np.where(target > 0, target * logp, 0.0)
        return float(-np.sum(terms) / n)
    raise ValueError(f"unknown loss kind {kind!r}")


def _per_example_losses(kind: str, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    n = pred.shape[0]
    if kind == "squared_error":
        diff = pred.reshape(n, -1) - target.reshape(n, -1)
        return 0.5 * np.sum(diff * diff, axis=1)
    if kind == "cross_entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.log(pred)
        return -np.sum(np.where(target > 0, target * logp, 0.0), axis=1)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_grad(kind: str, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    n = pred.shape[0]
    if kind == "squared_error":
        return (pred - target.reshape(pred.shape)) / n
    if kind == "cross_entropy":
        grad = np.zeros_like(pred)
        np.divide(target, pred, out=grad, where=target > 0)
        return -grad / n
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass
class TaskGradients:
    """Per-task gradients keyed by storage key.

    A task only has entries for units it touches: shared trunk units, its
    own per-task trunk copies and its own head units.  Gradients w.r.t.
    another task's private units are structurally absent.
    """

    per_task: list[dict[str, np.ndarray]]
    losses: list[float]

    @property
    def num_tasks(self) -> int:
        return len(self.per_task)

    def shared_layer_grads(self, unit_id: str) -> list[np.ndarray]:
        return [g[unit_id].reshape(-1) for g in self.per_task]

    def concat_shared(self, store: ParamStore) -> list[np.ndarray]:
        """Per-task gradient over all shared units, concatenated in store order."""
        keys = [u.key for u in store if u.owner is None]
        return [np.concatenate([g[k].reshape(-1) for k in keys]) for g in self.per_task]


def task_loss(store: ParamStore, spec: NetworkSpec, x, target, kind: str, task: int) -> float:
    pred = forward(store, spec, x, task)
    return loss_value(kind, pred, target)


def backward_per_task(
    store: ParamStore,
    spec: NetworkSpec,
    batches: list[tuple[np.ndarray, np.ndarray]],
    loss_kinds: list[str],
) -> TaskGradients:
    """Exact reverse-mode gradients of each task's mean batch loss.

    Tasks are differentiated independently; there is no cross-task mixing.
    Raises :class:`NonFiniteLossError` naming the task and first offending
    batch index when a loss comes out NaN/Inf.
    """
    if len(batches) != spec.num_tasks or len(loss_kinds) != spec.num_tasks:
        raise UnknownTaskError("one (inputs, targets) batch and loss kind required per task")
    per_task: list[dict[str, np.ndarray]] = []
    losses: list[float] = []
    for t, ((x, target), kind) in enumerate(zip(batches, loss_kinds)):
        if len(x) == 0:
            raise ValueError(f"task {t} received an empty batch")
        target = np.asarray(target, dtype=np.float64)
        pred, caches = _forward_with_caches(store, spec, x, t)
        per_example = _per_example_losses(kind, pred, target)
        bad = np.flatnonzero(~np.isfinite(per_example))
        if bad.size:
            raise NonFiniteLossError(
                f"task {t}: non-finite loss at batch index {int(bad[0])}",
                task=t,
                batch_index=int(bad[0]),
            )
        losses.append(float(per_example.mean()))
        grads: dict[str, np.ndarray] = {}
        dy = loss_grad(kind, pred, target)
        for scope, idx, params, cache in reversed(caches):
            layer = spec.trunk[idx] if scope == "trunk" else spec.heads[t][idx]
            prefix = f"trunk.{idx}" if scope == "trunk" else f"head{t}.{idx}"
            dy, param_grads = L.backward(layer, params, cache, dy)
            for name, g in param_grads.items():
                key = store.key_for(spec, f"{prefix}.{name}", t)
                grads[key] = g
        per_task.append(grads)
    return TaskGradients(per_task=per_task, losses=losses)


@dataclass
class ParamCounts:
    total: int
    shared: int
    per_task: list[int]

    @property
    def total_bytes(self) -> int:
        return self.total * 8

    @property
    def shared_bytes(self) -> int:
        return self.shared * 8


def param_counts(store: ParamStore, num_tasks: int | None = None) -> ParamCounts:
    """Element counts; bytes are elements * 8 (float64 storage)."""
    owners = [u.owner for u in store]
    t = num_tasks if num_tasks is not None else (max((o for o in owners if o is not None), default=-1) + 1)
    shared = sum(u.value.size for u in store if u.owner is None)
    per_task = [0] * t
    for u in store:
        if u.owner is not None:
            per_task[u.owner] += u.value.size
    return ParamCounts(total=shared + sum(per_task), shared=shared, per_task=per_task)
