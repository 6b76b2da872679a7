"""Command-line entry point.

Stages communicate through files only: ``profile`` writes a conflict report
and ranking, ``surgery`` turns a ranking into a plan plus a modified
network spec, ``train`` consumes a spec and writes logs and metrics,
``report`` merges runs into one table, ``verify-theorem`` runs the
one-step dominance suite, ``datagen`` materializes a dataset.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .datasets import (
    MultiTaskDataset,
    gen_conflict_rig,
    load_dataset,
    rig_trunk_spec,
    save_dataset,
)
from .errors import GradSurgeonError
from .network import NetworkSpec, build_network, param_counts
from .profiler import LayerRanking, rank_layers, report_to_csv
from .rng import RngState
from .surgery import SurgeryPlan, apply_surgery, run_dominance_suite, select_layers
from .training import (
    TrainConfig,
    evaluate,
    log_to_jsonl,
    relative_improvement,
    run_surgery_pipeline,
    summed_validation_loss,
    train,
)


class UsageError(Exception):
    pass


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config {p} is not valid JSON: {e}")


def _train_config(cfg: dict, seed_override: int | None) -> TrainConfig:
    tc = TrainConfig.from_dict(cfg.get("train", {}))
    if seed_override is not None:
        tc.seed = seed_override
    return tc


def _dataset_from_config(cfg: dict, seed: int) -> MultiTaskDataset:
    ds = cfg.get("dataset", {})
    kind = ds.get("kind", "conflict_rig")
    if kind == "conflict_rig":
        return gen_conflict_rig(
            dim=ds.get("dim", 8),
            n_samples=ds.get("n_samples", 512),
            seed=ds.get("seed", seed),
            amp_primary=ds.get("amp_primary", 4.0),
            amp_bypass=ds.get("amp_bypass", 1.0),
        )
    if kind == "file":
        return load_dataset(ds["path"])
    raise UsageError(f"unknown dataset kind {kind!r}")


def _network_from_config(cfg: dict, dataset: MultiTaskDataset) -> NetworkSpec:
    net = cfg.get("network", {})
    if "path" in net:
        return NetworkSpec.from_json(Path(net["path"]).read_text())
    if dataset.metadata.get("kind") == "conflict_rig":
        return rig_trunk_spec(dataset.metadata["dim"])
    raise UsageError("config needs network.path unless the dataset is a conflict rig")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_datagen(args) -> int:
    cfg = _load_config(args.config)
    ds = _dataset_from_config(cfg, args.seed if args.seed is not None else 0)
    out = _out_dir(args)
    save_dataset(ds, out / "dataset.npz")
    print(f"wrote {out / 'dataset.npz'} ({len(ds)} samples, {ds.num_tasks} tasks)")
    return 0


def _cmd_profile(args) -> int:
    cfg = _load_config(args.config)
    tc = _train_config(cfg, args.seed)
    if args.s is not None:
        tc.severity = args.s
    dataset = _dataset_from_config(cfg, tc.seed)
    spec = _network_from_config(cfg, dataset)
    out = _out_dir(args)
    with open(out / "conflict_records.jsonl", "w") as sink:
        result = train(
            spec,
            dataset,
            tc,
            profile=True,
            record_sink=sink,
            balancer_name=tc.profile_balancer or "joint",
        )
    (out / "conflict_report.csv").write_text(report_to_csv(result.report))
    ranking = rank_layers(result.report)
    (out / "ranking.json").write_text(json.dumps(ranking.to_dict(), indent=2, sort_keys=True))
    (out / "network.json").write_text(spec.to_json())
    print(f"profiled {len(result.report.iterations)} iterations over "
          f"{len(result.report.layer_ids)} shared layers")
    print(f"top layer: {ranking.ranked[0]} (score {ranking.scores[ranking.ranked[0]]})")
    return 0


def _cmd_surgery(args) -> int:
    cfg = _load_config(args.config) if args.config else {}
    report_dir = Path(args.ranking).parent if args.ranking else None
    ranking_path = Path(args.ranking) if args.ranking else Path(args.out) / "ranking.json"
    if not ranking_path.exists():
        raise UsageError(f"ranking file not found: {ranking_path}")
    ranking = LayerRanking.from_dict(json.loads(ranking_path.read_text()))
    spec_path = Path(args.network) if args.network else ranking_path.parent / "network.json"
    if not spec_path.exists():
        raise UsageError(f"network spec not found: {spec_path}")
    spec = NetworkSpec.from_json(spec_path.read_text())
    seed = args.seed if args.seed is not None else cfg.get("train", {}).get("seed", 0)
    store = build_network(spec, RngState(seed).fork("params"))
    plan = select_layers(
        ranking,
        args.mode,
        args.k,
        RngState(seed).fork("select"),
        spec=spec,
        store=store,
        severity=args.s,
    )
    new_spec, _ = apply_surgery(spec, store, plan)
    out = _out_dir(args)
    (out / "plan.json").write_text(plan.to_json())
    (out / "network_modified.json").write_text(new_spec.to_json())
    print(f"selected {len(plan.selected)} layer(s): {', '.join(plan.selected)}")
    print(f"parameter delta: +{plan.param_delta} elements")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    tc = _train_config(cfg, args.seed)
    if args.balancer:
        tc.balancer = args.balancer
    if args.alpha is not None:
        tc.lr = args.alpha
    dataset = _dataset_from_config(cfg, tc.seed)
    spec = _network_from_config(cfg, dataset)
    result = train(spec, dataset, tc)
    out = _out_dir(args)
    (out / "log.jsonl").write_text(log_to_jsonl(result.log))
    root = RngState(tc.seed)
    _, val = dataset.split(tc.val_fraction, root.fork("split"))
    metrics = evaluate(result.store, spec, val)
    counts = param_counts(result.store, spec.num_tasks)
    payload = {
        "metrics": metrics,
        "summed_validation_loss": summed_validation_loss(result.store, spec, val),
        "param_total": counts.total,
        "param_shared": counts.shared,
        "balancer": tc.balancer,
    }
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"trained {tc.iterations} iterations with {tc.balancer}; "
          f"summed validation loss {payload['summed_validation_loss']:.6f}")
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_config(args.config)
    tc = _train_config(cfg, args.seed)
    if args.s is not None:
        tc.severity = args.s
    dataset = _dataset_from_config(cfg, tc.seed)
    spec = _network_from_config(cfg, dataset)
    out = _out_dir(args)
    with open(out / "conflict_records.jsonl", "w") as sink:
        result = run_surgery_pipeline(spec, dataset, tc, k=args.k, record_sink=sink)
    (out / "plan.json").write_text(result.plan.to_json())
    (out / "network_modified.json").write_text(result.spec.to_json())
    (out / "conflict_report.csv").write_text(report_to_csv(result.report))
    (out / "log.jsonl").write_text(log_to_jsonl(result.log))
    root = RngState(tc.seed)
    _, val = dataset.split(tc.val_fraction, root.fork("split"))
    payload = {
        "metrics": result.metrics,
        "summed_validation_loss": summed_validation_loss(result.store, result.spec, val),
        "param_total": result.param_total,
        "selected": result.plan.selected,
    }
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"branched {len(result.plan.selected)} layer(s); "
          f"summed validation loss {payload['summed_validation_loss']:.6f}")
    return 0


def _cmd_verify_theorem(args) -> int:
    results, n_dom = run_dominance_suite(args.instances, args.alpha, args.seed)
    min_margin = min(r.min_margin for r in results)
    min_gap = min(r.min_gap for r in results)
    for i, r in enumerate(results):
        if args.verbose:
            print(
                f"instance {i}: {r.verdict} margin={r.min_margin:.3e} gap={r.min_gap:.3e} "
                f"branched={r.loss_branched:.9f} plain={r.loss_plain:.9f}"
            )
    print(f"{n_dom}/{len(results)} Dominates")
    print(f"min margin {min_margin:.6e}, min first-order gap {min_gap:.6e}")
    return 0 if n_dom == len(results) else 2


def _cmd_report(args) -> int:
    runs = [Path(p) for p in args.runs.split(",")]
    refs = None
    if args.single_task:
        refs = json.loads(Path(args.single_task).read_text())
    rows = []
    baseline_severe = None
    for run in runs:
        metrics_path = run / "metrics.json"
        if not metrics_path.exists():
            raise UsageError(f"{run} has no metrics.json")
        payload = json.loads(metrics_path.read_text())
        row = {
            "run": run.name,
            "metrics": payload["metrics"],
            "param_total": payload.get("param_total"),
            "summed_validation_loss": payload.get("summed_validation_loss"),
        }
        if refs is not None:
            values = [[list(m.values())[0]] for m in payload["metrics"]]
            directions = [[1 if list(m.keys())[0] == "mse" else 0] for m in payload["metrics"]]
            rep = relative_improvement(values, [[r] for r in refs["references"]], directions)
            stored = payload.get("delta")
            if stored is not None and abs(stored - rep.delta) > 1e-9:
                raise UsageError(
                    f"{run}: stored delta {stored} disagrees with recomputation {rep.delta}"
                )
            row["delta_pct"] = 100.0 * rep.delta
        csv_path = run / "conflict_report.csv"
        if csv_path.exists():
            severe = _severe_fraction_from_csv(csv_path.read_text())
            row["severe_pct"] = 100.0 * severe
            if baseline_severe is None:
                baseline_severe = severe
            row["reduction_pct"] = (
                100.0 * (1.0 - severe / baseline_severe) if baseline_severe else 0.0
            )
        rows.append(row)
    out = _out_dir(args)
    header = ["run", "param_total", "summed_validation_loss", "delta_pct", "severe_pct", "reduction_pct"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if row.get(h) is None else repr(row.get(h)) if isinstance(row.get(h), float) else str(row.get(h)) for h in header))
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    (out / "summary.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    print(f"wrote {out / 'summary.csv'} ({len(rows)} runs)")
    return 0


def _severe_fraction_from_csv(text: str) -> float:
    # conflict_report.csv rows carry per-bin percentages per layer; the severe
    # mass is everything in bins whose lower edge is at or below -0.01.
    lines = [l for l in text.strip().splitlines() if l]
    header = lines[0].split(",")
    bin_cols = [i for i, h in enumerate(header) if h.startswith("bin_")]
    from .profiler import DEFAULT_BIN_EDGES

    severe_bins = [
        i for i in range(len(DEFAULT_BIN_EDGES) - 1) if DEFAULT_BIN_EDGES[i + 1] <= -0.01 + 1e-12
    ]
    total = 0.0
    severe = 0.0
    for line in lines[1:]:
        cells = line.split(",")
        pcts = [float(cells[c]) for c in bin_cols]
        total += sum(pcts)
        severe += sum(pcts[b] for b in severe_bins)
    return severe / total if total else 0.0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsurgeon")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("datagen", help="materialize a dataset")
    common(p)
    p.set_defaults(func=_cmd_datagen)

    p = sub.add_parser("profile", help="train for the window and write the conflict report")
    common(p)
    p.add_argument("--s", type=float, default=None, help="conflict severity threshold")
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("surgery", help="turn a ranking into a plan and a modified network")
    common(p, config_required=False)
    p.add_argument("--ranking", default=None, help="ranking.json from profile (default: <out>/ranking.json)")
    p.add_argument("--network", default=None, help="network.json (default: next to the ranking)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", default="top_conflict",
                   choices=["top_conflict", "random_layers", "random_params", "first_k", "last_k"])
    p.add_argument("--s", type=float, default=None)
    p.set_defaults(func=_cmd_surgery)

    p = sub.add_parser("train", help="full training run")
    common(p)
    p.add_argument("--balancer", default=None,
                   choices=["joint", "mgda", "pcgrad", "graddrop", "cagrad"])
    p.add_argument("--alpha", type=float, default=None, help="override the learning rate")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("pipeline", help="profile, branch top-K layers, retrain from scratch")
    common(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--s", type=float, default=None)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("verify-theorem", help="run the one-step dominance suite")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--alpha", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=_cmd_verify_theorem)

    p = sub.add_parser("report", help="merge run outputs into one summary table")
    p.add_argument("--runs", required=True, help="comma-separated run directories")
    p.add_argument("--single-task", default=None, help="JSON file with single-task references")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except GradSurgeonError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
