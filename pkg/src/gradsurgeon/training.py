"""Deterministic training loop, evaluation and the profile/surgery pipeline.

The loop is plain SGD (optionally Adam) with step decay.  Each iteration
computes per-task gradients on one shared input batch, combines the
shared-unit gradients with the configured balancer, applies raw per-task
gradients to private units, and optionally profiles layer-wise conflicts
on the raw (pre-combination) task gradients.

The pipeline runs the three phases end to end: profile for a window,
rank and branch the most conflicted layers, then retrain the modified
network from scratch (a full re-initialization from the same seed, so the
comparison isolates the architectural change).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .balancers import make_balancer
from .datasets import MultiTaskDataset
from .errors import EmptySplitError, NonFiniteLossError, ZeroReferenceError
from .network import (
    NetworkSpec,
    ParamStore,
    backward_per_task,
    build_network,
    forward,
    loss_value,
    param_counts,
)
from .profiler import (
    ConflictReport,
    LayerRanking,
    ProfilerConfig,
    accumulate,
    profile_iteration,
    profiled_layers,
    rank_layers,
)
from .rng import RngState
from .surgery import SurgeryPlan, apply_surgery, select_layers


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 100
    batch_size: int = 32
    lr: float = 0.05
    decay_milestones: tuple = ()
    decay_factor: float = 1.0
    optimizer: str = "sgd"  # or "adam"
    balancer: str = "joint"
    balancer_params: dict = field(default_factory=dict)
    profile_balancer: str | None = None  # balancer used during the profiling phase
    window_fraction: float = 0.25
    val_fraction: float = 0.2
    severity: float = -0.1
    merge_weight_bias: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay factor must be in (0, 1]")
        if not 0 < self.window_fraction <= 1:
            raise ValueError("window fraction must be in (0, 1]")
        self.decay_milestones = tuple(int(m) for m in self.decay_milestones)

    @property
    def window_iterations(self) -> int:
        return max(1, int(round(self.window_fraction * self.iterations)))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "decay_milestones": list(self.decay_milestones),
            "decay_factor": self.decay_factor,
            "optimizer": self.optimizer,
            "balancer": self.balancer,
            "balancer_params": self.balancer_params,
            "profile_balancer": self.profile_balancer,
            "window_fraction": self.window_fraction,
            "val_fraction": self.val_fraction,
            "severity": self.severity,
            "merge_weight_bias": self.merge_weight_bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class TrainResult:
    store: ParamStore
    log: list[dict]
    report: ConflictReport | None = None


class _Sgd:
    def __init__(self, store: ParamStore):
        pass

    def step(self, store: ParamStore, key: str, grad: np.ndarray, lr: float):
        store.units[key].value -= lr * grad


class _Adam:
    def __init__(self, store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {u.key: np.zeros_like(u.value) for u in store}
        self.v = {u.key: np.zeros_like(u.value) for u in store}
        self.t = {u.key: 0 for u in store}

    def step(self, store: ParamStore, key: str, grad: np.ndarray, lr: float):
        self.t[key] += 1
        t = self.t[key]
        self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * grad
        self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * grad * grad
        mhat = self.m[key] / (1 - self.beta1**t)
        vhat = self.v[key] / (1 - self.beta2**t)
        store.units[key].value -= lr * mhat / (np.sqrt(vhat) + self.eps)


def _make_optimizer(name: str, store: ParamStore):
    if name == "sgd":
        return _Sgd(store)
    if name == "adam":
        return _Adam(store)
    raise ValueError(f"unknown optimizer {name!r}")


def _lr_at(config: TrainConfig, iteration: int) -> float:
    passed = sum(1 for m in config.decay_milestones if iteration >= m)
    return config.lr * (config.decay_factor**passed)


def _batch_indices(n: int, batch_size: int, iterations: int, rng: RngState):
    """Seeded epoch shuffles sliced into fixed-size batches."""
    order = np.array([], dtype=np.int64)
    epoch = 0
    pos = 0
    for _ in range(iterations):
        if pos + batch_size > len(order):
            order = rng.fork("epoch", epoch).permutation(n)
            epoch += 1
            pos = 0
        yield order[pos : pos + batch_size]
        pos += batch_size


def train(
    spec: NetworkSpec,
    dataset: MultiTaskDataset,
    config: TrainConfig,
    store: ParamStore | None = None,
    profile: bool = False,
    profile_iterations: int | None = None,
    record_sink=None,
    balancer_name: str | None = None,
) -> TrainResult:
    """Run the training loop; deterministic given (spec, dataset, config).

    When ``profile`` is set, the first ``profile_iterations`` (default: the
    config window) accumulate a conflict report from the raw per-task
    gradients of each iteration, before any combination rule touches them.
    """
    root = RngState(config.seed)
    train_split, _ = dataset.split(config.val_fraction, root.fork("split"))
    if store is None:
        store = build_network(spec, root.fork("params"))
    optimizer = _make_optimizer(config.optimizer, store)
    name = balancer_name if balancer_name is not None else config.balancer
    balancer = make_balancer(name, config.balancer_params)
    batch_size = min(config.batch_size, len(train_split))

    report = None
    window = 0
    prof_cfg = None
    if profile:
        window = profile_iterations if profile_iterations is not None else config.window_iterations
        prof_cfg = ProfilerConfig(
            severity=config.severity,
            window=window,
            merge_weight_bias=config.merge_weight_bias,
        )
        layer_ids = [lid for lid, _ in profiled_layers(spec, config.merge_weight_bias)]
        report = ConflictReport(
            severity=config.severity, bin_edges=prof_cfg.bin_edges, layer_ids=layer_ids
        )

    log: list[dict] = []
    shared_keys = [u.key for u in store if u.owner is None]
    sizes = {k: store.units[k].value.size for k in shared_keys}
    batches_iter = _batch_indices(len(train_split), batch_size, config.iterations, root.fork("batches"))
    for it, idx in enumerate(batches_iter):
        x = train_split.inputs[idx]
        batches = [(x, y[idx]) for y in train_split.targets]
        try:
            grads = backward_per_task(store, spec, batches, train_split.loss_kinds)
        except NonFiniteLossError as e:
            e.iteration = it
            raise
        if report is not None and it < window:
            rec = profile_iteration(grads, spec, prof_cfg, it)
            accumulate(report, rec)
            if record_sink is not None:
                record_sink.write(rec.to_json_line() + "\n")
        lr = _lr_at(config, it)
        entry = {
            "iteration": it,
            "lr": lr,
            "task_losses": [float(v) for v in grads.losses],
        }
        if shared_keys:
            out = balancer(grads.concat_shared(store), root.fork("balancer", it))
            offset = 0
            for key in shared_keys:
                size = sizes[key]
                piece = out.update[offset : offset + size].reshape(store.units[key].value.shape)
                optimizer.step(store, key, piece, lr)
                offset += size
            if out.weights is not None:
                entry["weights"] = [float(v) for v in out.weights]
            entry["balancer"] = out.diagnostics
        for t in range(spec.num_tasks):
            for key, g in grads.per_task[t].items():
                if store.units[key].owner is not None:
                    optimizer.step(store, key, g, lr)
        log.append(entry)
    return TrainResult(store=store, log=log, report=report)


def evaluate(store: ParamStore, spec: NetworkSpec, dataset: MultiTaskDataset) -> list[dict]:
    """Per-task metric values on a split; never mutates parameters."""
    if len(dataset) == 0:
        raise EmptySplitError("evaluation split is empty")
    out = []
    for t in range(dataset.num_tasks):
        pred = forward(store, spec, dataset.inputs, t)
        target = dataset.targets[t]
        kind = dataset.metric_kinds[t]
        if kind == "accuracy":
            value = float(np.mean(np.argmax(pred, axis=1) == np.argmax(target, axis=1)))
        elif kind == "mse":
            diff = pred.reshape(len(pred), -1) - target.reshape(len(target), -1)
            value = float(np.mean(np.sum(diff * diff, axis=1)))
        else:
            raise ValueError(f"unknown metric kind {kind!r}")
        out.append({kind: value, "loss": loss_value(dataset.loss_kinds[t], pred, target)})
    return out


def summed_validation_loss(store: ParamStore, spec: NetworkSpec, val: MultiTaskDataset) -> float:
    return float(
        sum(
            loss_value(val.loss_kinds[t], forward(store, spec, val.inputs, t), val.targets[t])
            for t in range(val.num_tasks)
        )
    )


@dataclass
class MetricsReport:
    """Per-task metric values against single-task references.

    ``delta_per_task[j]`` is the mean signed relative change of task j's
    criteria versus its reference, with the sign flipped for lower-is-better
    criteria; ``delta`` averages that over tasks.  Both are fractions; the
    CSV export shows percentages.
    """

    values: list[list[float]]  # [task][criterion]
    references: list[list[float]]
    lower_better: list[list[int]]  # 1 = lower is better
    delta_per_task: list[float]
    delta: float

    def to_csv(self) -> str:
        lines = ["task,criterion,value,reference,lower_better,delta_pct"]
        for j, (vals, refs, flags) in enumerate(
            zip(self.values, self.references, self.lower_better)
        ):
            for i, (m, s, l) in enumerate(zip(vals, refs, flags)):
                contrib = 100.0 * ((-1.0) ** l) * (m - s) / s
                lines.append(f"{j},{i},{m!r},{s!r},{l},{contrib!r}")
            lines.append(f"{j},task_mean,,,,{100.0 * self.delta_per_task[j]!r}")
        lines.append(f"all,overall,,,,{100.0 * self.delta!r}")
        return "\n".join(lines) + "\n"


def relative_improvement(values, references, lower_better) -> MetricsReport:
    """Signed mean relative change versus the single-task references."""
    if len(values) != len(references) or len(values) != len(lower_better):
        raise ValueError("values, references and lower_better must align per task")
    deltas = []
    for j, (vals, refs, flags) in enumerate(zip(values, references, lower_better)):
        if len(vals) != len(refs) or len(vals) != len(flags):
            raise ValueError(f"task {j}: criterion lists must have equal length")
        total = 0.0
        for m, s, l in zip(vals, refs, flags):
            if s == 0:
                raise ZeroReferenceError(f"task {j} has a zero single-task reference")
            total += ((-1.0) ** l) * (m - s) / s
        deltas.append(total / len(vals))
    return MetricsReport(
        values=[list(map(float, v)) for v in values],
        references=[list(map(float, r)) for r in references],
        lower_better=[list(map(int, f)) for f in lower_better],
        delta_per_task=deltas,
        delta=sum(deltas) / len(deltas),
    )


@dataclass
class PipelineResult:
    plan: SurgeryPlan
    spec: NetworkSpec
    store: ParamStore
    report: ConflictReport
    ranking: LayerRanking
    log: list[dict]
    metrics: list[dict]
    param_total: int


def run_surgery_pipeline(
    spec: NetworkSpec,
    dataset: MultiTaskDataset,
    config: TrainConfig,
    k: int,
    mode: str = "top_conflict",
    record_sink=None,
) -> PipelineResult:
    """Profile for the window, branch the K most conflicted layers, retrain.

    Phase 3 re-initializes every parameter from the config seed, so the
    final parameters depend only on (post-surgery architecture, seed), never
    on phase-1 training state.  ``k == 0`` degenerates to plain training.
    """
    root = RngState(config.seed)
    window = config.window_iterations
    profile_name = config.profile_balancer or "joint"
    phase1_config = replace(config, iterations=window)
    phase1 = train(
        spec,
        dataset,
        phase1_config,
        profile=True,
        profile_iterations=window,
        record_sink=record_sink,
        balancer_name=profile_name,
    )
    ranking = rank_layers(phase1.report)
    probe_store = build_network(spec, root.fork("params"))
    plan = select_layers(
        ranking, mode, k, root.fork("select"), spec=spec, store=probe_store,
        severity=config.severity,
    )
    new_spec, _ = apply_surgery(spec, probe_store, plan) if plan.units else (spec, probe_store)
    final = train(new_spec, dataset, config)
    _, val = dataset.split(config.val_fraction, RngState(config.seed).fork("split"))
    metrics = evaluate(final.store, new_spec, val)
    return PipelineResult(
        plan=plan,
        spec=new_spec,
        store=final.store,
        report=phase1.report,
        ranking=ranking,
        log=final.log,
        metrics=metrics,
        param_total=param_counts(final.store, new_spec.num_tasks).total,
    )


def log_to_jsonl(log: list[dict]) -> str:
    return "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in log)
