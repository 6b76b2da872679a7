"""Per-layer gradient-conflict profiling.

For every shared layer and every unordered task pair the profiler records
the cosine between the two task gradients, counts the pairs whose cosine
falls strictly below a severity threshold (the layer's conflict score for
that iteration), accumulates scores and a cosine histogram across
iterations, and ranks layers by accumulated score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateIterationError,
    LayerSetMismatchError,
    MissingGradientError,
    NotSharedError,
    SeverityOutOfRangeError,
    ZeroNormError,
)
from .network import PER_TASK, SHARED, NetworkSpec, ParamStore, TaskGradients, trunk_units
from .tensorops import cosine

#: Histogram intervals, listed from friendly to hostile cosines:
#: [0, 1.0], [-0.01, 0), [-0.02, -0.01), [-0.03, -0.02), [-1.0, -0.03).
#: Each bin includes its lower edge; the first bin also includes 1.0.
DEFAULT_BIN_EDGES = (1.0, 0.0, -0.01, -0.02, -0.03, -1.0)


def histogram_bins_default() -> tuple:
    return DEFAULT_BIN_EDGES


def validate_severity(severity: float):
    if not (-1.0 < severity <= 0.0):
        raise SeverityOutOfRangeError(f"severity must satisfy -1 < S <= 0, got {severity}")


def validate_bin_edges(edges) -> tuple:
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2 or edges[0] != 1.0 or edges[-1] != -1.0:
        raise ValueError("bin edges must start at 1.0 and end at -1.0")
    if any(a <= b for a, b in zip(edges[1:], edges[:-1])):
        raise ValueError("bin edges must be strictly descending")
    return edges


def bin_index(value: float, edges=DEFAULT_BIN_EDGES) -> int:
    """0-based bin for a cosine; bins take [lower, upper), bin 0 takes [e1, 1.0]."""
    for i in range(len(edges) - 1):
        lo, hi = edges[i + 1], edges[i]
        if value >= lo and (value < hi or i == 0):
            return i
    raise ValueError(f"cosine {value} outside [-1, 1]")


@dataclass
class ProfilerConfig:
    severity: float = -0.1
    window: int = 0  # iterations profiled; 0 means "set by the trainer"
    bin_edges: tuple = DEFAULT_BIN_EDGES
    merge_weight_bias: bool = False

    def __post_init__(self):
        validate_severity(self.severity)
        self.bin_edges = validate_bin_edges(self.bin_edges)


def profiled_layers(spec: NetworkSpec, merge_weight_bias: bool = False) -> list[tuple[str, list[str]]]:
    """Shared layers to profile: (layer_id, unit_ids), in trunk order.

    With ``merge_weight_bias`` the weight and bias of one module are treated
    as a single layer whose gradient is their concatenation.
    """
    shared = [uid for uid, _ in trunk_units(spec) if spec.branch_map[uid] == SHARED]
    if not merge_weight_bias:
        return [(uid, [uid]) for uid in shared]
    groups: dict[str, list[str]] = {}
    for uid in shared:
        scope, idx, _ = uid.split(".")
        groups.setdefault(f"{scope}.{idx}", []).append(uid)
    return sorted(groups.items(), key=lambda kv: int(kv[0].split(".")[1]))


@dataclass(frozen=True)
class PairCosine:
    pair: tuple[int, int]  # (i, j) with i < j
    value: float
    zero_norm: bool  # sentinel: one of the gradients had zero norm


def pairwise_cosines(
    grads: TaskGradients,
    spec: NetworkSpec,
    unit_ids,
) -> list[PairCosine]:
    """Cosines for all C(T,2) unordered task pairs at one shared layer.

    ``unit_ids`` may be a single unit id or a group of ids (merged layer);
    gradients are concatenated over the group.  A pair with a zero-norm
    gradient is recorded as cos = 0 and flagged: a zero gradient neither
    helps nor hurts any task, so such pairs are never counted as conflicts.
    """
    if isinstance(unit_ids, str):
        unit_ids = [unit_ids]
    for uid in unit_ids:
        if spec.branch_map.get(uid) == PER_TASK:
            raise NotSharedError(f"{uid} is task-specific; conflicts are defined on shared layers")
        if spec.branch_map.get(uid) is None:
            raise NotSharedError(f"{uid} is not a trunk unit")
    vecs = []
    for t in range(grads.num_tasks):
        try:
            vecs.append(np.concatenate([grads.per_task[t][uid].reshape(-1) for uid in unit_ids]))
        except KeyError as e:
            raise MissingGradientError(f"task {t} has no gradient for {e.args[0]}", task=t)
    out = []
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            try:
                out.append(PairCosine((i, j), cosine(vecs[i], vecs[j]), False))
            except ZeroNormError:
                out.append(PairCosine((i, j), 0.0, True))
    return out


def s_conflict_score(cosines: list[PairCosine], severity: float) -> int:
    """Number of task pairs whose cosine is strictly below the severity threshold."""
    validate_severity(severity)
    return sum(1 for c in cosines if not c.zero_norm and c.value < severity)


@dataclass
class ConflictRecord:
    """All pairwise cosines and per-layer scores for one iteration."""

    iteration: int
    cosines: dict[str, list[PairCosine]]
    scores: dict[str, int]

    def to_json_line(self) -> str:
        payload = {
            "iteration": self.iteration,
            "layers": {
                lid: [[list(c.pair), c.value, c.zero_norm] for c in cs]
                for lid, cs in self.cosines.items()
            },
            "scores": self.scores,
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json_line(line: str) -> "ConflictRecord":
        d = json.loads(line)
        cosines = {
            lid: [PairCosine((int(p[0]), int(p[1])), float(v), bool(z)) for p, v, z in cs]
            for lid, cs in d["layers"].items()
        }
        return ConflictRecord(int(d["iteration"]), cosines, {k: int(v) for k, v in d["scores"].items()})


def profile_iteration(
    grads: TaskGradients,
    spec: NetworkSpec,
    config: ProfilerConfig,
    iteration: int,
) -> ConflictRecord:
    cosines = {}
    scores = {}
    for layer_id, unit_ids in profiled_layers(spec, config.merge_weight_bias):
        cs = pairwise_cosines(grads, spec, unit_ids)
        cosines[layer_id] = cs
        scores[layer_id] = s_conflict_score(cs, config.severity)
    return ConflictRecord(iteration, cosines, scores)


@dataclass
class ConflictReport:
    """Accumulated scores and cosine histogram over a profiling window."""

    severity: float
    bin_edges: tuple
    layer_ids: list[str]  # trunk order; also the ranking tie-break order
    scores: dict[str, int] = field(default_factory=dict)
    histogram: dict[str, list[int]] = field(default_factory=dict)
    iterations: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.bin_edges = validate_bin_edges(self.bin_edges)
        for lid in self.layer_ids:
            self.scores.setdefault(lid, 0)
            self.histogram.setdefault(lid, [0] * (len(self.bin_edges) - 1))

    @property
    def num_bins(self) -> int:
        return len(self.bin_edges) - 1

    def total_counts(self) -> list[int]:
        totals = [0] * self.num_bins
        for counts in self.histogram.values():
            for i, c in enumerate(counts):
                totals[i] += c
        return totals

    def bin_percentages(self) -> list[float]:
        totals = self.total_counts()
        grand = sum(totals)
        if grand == 0:
            return [0.0] * self.num_bins
        return [100.0 * c / grand for c in totals]

    def severe_fraction(self, threshold: float = -0.01) -> float:
        """Fraction of cosine samples in bins at or below ``threshold``."""
        totals = self.total_counts()
        grand = sum(totals)
        if grand == 0:
            return 0.0
        severe = sum(
            c for i, c in enumerate(totals) if self.bin_edges[i] <= threshold
        )
        return severe / grand


def accumulate(report: ConflictReport, record: ConflictRecord) -> ConflictReport:
    """Fold one iteration's record into the report (score sums + histogram)."""
    if record.iteration in report.iterations:
        raise DuplicateIterationError(f"iteration {record.iteration} already accumulated")
    if set(record.scores) != set(report.layer_ids):
        raise LayerSetMismatchError("record and report cover different layer sets")
    for lid in report.layer_ids:
        report.scores[lid] += record.scores[lid]
        counts = report.histogram[lid]
        for c in record.cosines[lid]:
            counts[bin_index(c.value, report.bin_edges)] += 1
    report.iterations.append(record.iteration)
    return report


def report_from_records(records, severity, bin_edges, layer_ids) -> ConflictReport:
    report = ConflictReport(severity=severity, bin_edges=tuple(bin_edges), layer_ids=list(layer_ids))
    for rec in records:
        accumulate(report, rec)
    return report


@dataclass
class LayerRanking:
    """Layers ordered by descending conflict score.

    ``network_order`` is the layer enumeration order (input to output) and
    doubles as the tie-break: equal scores keep that order.
    """

    ranked: list[str]
    network_order: list[str]
    scores: dict[str, int]

    def position(self, layer_id: str) -> int:
        return self.ranked.index(layer_id)

    def to_dict(self) -> dict:
        return {
            "ranked": self.ranked,
            "network_order": self.network_order,
            "scores": self.scores,
        }

    @staticmethod
    def from_dict(d: dict) -> "LayerRanking":
        return LayerRanking(
            ranked=list(d["ranked"]),
            network_order=list(d["network_order"]),
            scores={k: int(v) for k, v in d["scores"].items()},
        )


def rank_layers(report: ConflictReport) -> LayerRanking:
    if not report.layer_ids:
        raise ValueError("report covers no layers")
    order = {lid: i for i, lid in enumerate(report.layer_ids)}
    ranked = sorted(report.layer_ids, key=lambda lid: (-report.scores[lid], order[lid]))
    return LayerRanking(ranked=ranked, network_order=list(report.layer_ids), scores=dict(report.scores))


def permutation_distance(a: LayerRanking, b: LayerRanking) -> float:
    """Mean absolute displacement between two rankings of the same layer set."""
    if set(a.ranked) != set(b.ranked):
        raise LayerSetMismatchError("rankings cover different layer sets")
    pos_a = {lid: i for i, lid in enumerate(a.ranked)}
    pos_b = {lid: i for i, lid in enumerate(b.ranked)}
    return sum(abs(pos_a[lid] - pos_b[lid]) for lid in pos_a) / len(pos_a)


def report_to_csv(report: ConflictReport) -> str:
    """CSV export: one row per layer with score, rank and per-bin percentages."""
    ranking = rank_layers(report)
    header = ["layer_unit_id", "layer_name", "s_score", "rank"]
    header += [f"bin_{i + 1}_pct" for i in range(report.num_bins)]
    lines = [",".join(header)]
    for lid in report.layer_ids:
        counts = report.histogram[lid]
        total = sum(counts)
        pcts = [(100.0 * c / total) if total else 0.0 for c in counts]
        row = [lid, _layer_name(lid), str(report.scores[lid]), str(ranking.position(lid) + 1)]
        row += [repr(p) for p in pcts]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _layer_name(layer_id: str) -> str:
    parts = layer_id.split(".")
    if len(parts) == 3:
        return f"{parts[0]}[{parts[1]}].{parts[2]}"
    return f"{parts[0]}[{parts[1]}]"
