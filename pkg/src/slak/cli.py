"""Command line entry point: ``slak {gen-synth,run,search,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .agents import AgentError, client_from_env, propose_metapaths, run_communication_round
from .dataio import (
    DataError,
    RegionIndicatorTable,
    SplitSpec,
    SyntheticSpec,
    dump_json,
    file_sha256,
    generate_synthetic,
    split,
)
from .fusion import EmbeddingProvider
from .kg import KGError, SchemaError, load_kg, load_schema
from .metapath import MetaPathError, format_metapath, load_metapath_file, save_metapath_file
from .model import (
    SLAKConfig,
    TaskContext,
    TrainingError,
    TrainResult,
    task_descriptions,
    train_round2_task,
    train_single,
)
from .search import GAConfig, SearchError, genetic_search, random_search

logger = logging.getLogger("slak")

ABLATIONS = ("no_self_update", "no_rec", "no_trans", "no_attn")
ROUND1_REQUIRED = ("metapaths.txt", "embeddings.npy")


class CLIError(RuntimeError):
    pass


# ---------------------------------------------------------------- data


class Dataset:
    def __init__(self, data_dir: str | Path):
        d = Path(data_dir)
        if not d.is_dir():
            raise CLIError(f"data directory {d} does not exist")
        for name in ("entities.tsv", "facts.tsv", "indicators.csv"):
            if not (d / name).exists():
                raise CLIError(f"data directory {d} is missing {name}")
        self.dir = d
        self.schema = load_schema(d / "schema.tsv") if (d / "schema.tsv").exists() else load_schema()
        self.kg = load_kg(d / "entities.tsv", d / "facts.tsv", self.schema)
        self.table = RegionIndicatorTable.load(d / "indicators.csv")
        self.table.validate(self.kg)
        self.tasks = list(self.table.indicators)

    def hashes(self) -> dict[str, str]:
        return {p.name: file_sha256(p) for p in sorted(self.dir.iterdir()) if p.is_file()}


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _round(x: float) -> float:
    return float(f"{x:.12g}")


# ---------------------------------------------------------------- gen-synth


def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec.load(args.spec)
    ds = generate_synthetic(spec)
    ds.write(args.out)
    print(f"wrote {ds.manifest['n_entities']} entities, {ds.manifest['n_facts']} facts, "
          f"{len(ds.indicators.indicators)} indicators to {args.out}")
    for ind, r2 in sorted(ds.manifest["oracle_r2_heldout"].items()):
        print(f"  {ind:14s} count-feature oracle held-out R2 = {r2:.3f}")
    return 0


# ---------------------------------------------------------------- run


def _save_task(out: Path, result: TrainResult, data: Dataset, splits, transcripts=()) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    est = result.estimator
    est.model_.params.save(out / "checkpoint.bin")
    np.save(out / "embeddings.npy", result.region_embeddings)
    (out / "regions.txt").write_text("\n".join(data.kg.regions) + "\n", encoding="utf-8")
    save_metapath_file(result.metapaths, out / "metapaths.txt")
    metrics = {split_name: {k: _round(v) for k, v in m.items()} for split_name, m in result.metrics.items()}
    dump_json({"task": result.task, "metrics": metrics, "best_epoch": est.best_epoch_,
               "best_val_mse": _round(est.best_val_mse_), "n_epochs": est.n_epochs_}, out / "metrics.json")
    dump_json([{k: _round(v) for k, v in h.items()} for h in est.history_], out / "history.json")

    which = {r: name for name, regs in splits.items() for r in regs}
    regions = data.kg.regions
    pred = est.predict(np.asarray(regions, dtype=object))
    truth = data.table.values(result.task, regions)
    _write_csv(out / "predictions.csv", ["region_id", "split", "truth", "prediction"],
               [(r, which.get(r, ""), repr(float(t)), repr(_round(p))) for r, t, p in zip(regions, truth, pred)])

    attention = {"metapaths": [format_metapath(m, with_label=False) for m in result.metapaths]}
    if est.metapath_weights_ is not None:
        w = est.metapath_weights_
        attention["metapath_weights_mean"] = [_round(x) for x in w.mean(axis=0)]
        attention["metapath_weights_std"] = [_round(x) for x in w.std(axis=0)]
    cross = result.extra.get("cross_tasks")
    if cross:
        attention["cross_tasks"] = list(cross)
        if est.task_weights_ is not None:
            attention["task_weights_mean"] = [_round(x) for x in est.task_weights_.mean(axis=0)]
            attention["task_weights_std"] = [_round(x) for x in est.task_weights_.std(axis=0)]
    dump_json(attention, out / "attention.json")
    if est.metapath_weights_ is not None:
        _write_csv(out / "attention_regions.csv", ["region_id"] + [f"metapath_{k}" for k in range(len(result.metapaths))],
                   [[r] + [repr(_round(x)) for x in row] for r, row in zip(regions, est.metapath_weights_)])
    tdir = out / "transcripts"
    for k, tr in enumerate(transcripts):
        tr.save(tdir / f"{k:02d}_{tr.purpose.replace(':', '_')}.txt")
    return {"fit_seconds": est.fit_seconds_, "n_epochs": est.n_epochs_}


def _check_round1(run_dir: Path, tasks) -> None:
    for task in tasks:
        for name in ROUND1_REQUIRED:
            path = run_dir / "round1" / task / name
            if not path.exists():
                raise CLIError(f"round 2 needs round-1 artifact {path} (run --round 1 first)")


def _parallel(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def cmd_run(args) -> int:
    config = SLAKConfig.load(args.config)
    flags = [f for chunk in (args.ablate or []) for f in chunk.split(",") if f]
    unknown = [f for f in flags if f not in ABLATIONS]
    if unknown:
        raise CLIError(f"unknown ablation flags {unknown}; choose from {list(ABLATIONS)}")
    for f in flags:
        setattr(config, f, True)
    data = Dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = sorted(data.tasks)
    workers = args.workers or len(tasks)
    descriptions = task_descriptions()
    for t in tasks:
        if t not in descriptions:
            raise CLIError(f"no task description for indicator {t!r}")
    splits = split(data.kg.regions, SplitSpec(seed=config.seed))
    provider = EmbeddingProvider.from_env(cache_dir=out / "cache" / "embeddings")
    clients = {t: client_from_env(t, mock=args.mock_agents, fixture_dir=args.fixtures) for t in tasks}
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    manifest.update({
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config.to_dict(),
        "ablations": config.ablations,
        "seed": config.seed,
        "split": {"ratios": list(SplitSpec().ratios), "seed": config.seed},
        "schema_sha256": data.schema.digest(),
        "kg_sha256": data.kg.digest(),
        "data_dir": str(data.dir),
        "data_files": data.hashes(),
        "embedding_provider": provider.describe(),
        "agents": {t: c.describe() for t, c in clients.items()},
        "command": sys.argv[1:],
    })
    timings = manifest.setdefault("timings", {})

    if args.round in ("1", "all"):
        t0 = time.perf_counter()
        contexts = {}
        transcripts = {}
        for t in tasks:
            paths, tr = propose_metapaths(clients[t], t, config.n_metapaths, descriptions[t], data.schema)
            contexts[t] = TaskContext(t, paths, descriptions[t])
            transcripts[t] = [tr]
        timings["round1_agents"] = time.perf_counter() - t0

        def fit1(t):
            return train_single(contexts[t], data.kg, data.table, splits, config, provider)

        t0 = time.perf_counter()
        results = dict(zip(tasks, _parallel(fit1, tasks, workers)))
        timings["round1_training"] = time.perf_counter() - t0
        manifest["round1"] = {t: {"metapaths": [format_metapath(m) for m in contexts[t].metapaths],
                                  **_save_task(out / "round1" / t, results[t], data, splits, transcripts[t])}
                              for t in tasks}
        for t in tasks:
            print(f"round 1 {t:14s} val R2 {results[t].metrics['val']['R2']:.3f}  test R2 {results[t].metrics['test']['R2']:.3f}")

    if args.round in ("2", "all"):
        _check_round1(out, tasks)
        contexts = {}
        for t in tasks:
            d = out / "round1" / t
            contexts[t] = TaskContext(t, load_metapath_file(d / "metapaths.txt", data.schema), descriptions[t],
                                      np.load(d / "embeddings.npy"))
        t0 = time.perf_counter()
        comm = run_communication_round(
            clients, {t: c.metapaths for t, c in contexts.items()}, config.n_metapaths, descriptions,
            no_self_update=config.no_self_update, no_rec=config.no_rec, schema=data.schema,
        )
        timings["round2_agents"] = time.perf_counter() - t0
        comm_dir = out / "round2" / "communication"
        for k, tr in enumerate(comm.transcripts):
            tr.save(comm_dir / f"{k:02d}_{tr.task}_{tr.purpose.replace(':', '_')}.txt")
        for t in tasks:
            if not comm.paths[t]:
                raise CLIError(f"task {t!r} has no meta-paths after communication (check ablation flags)")

        def fit2(t):
            return train_round2_task(t, contexts, comm.paths[t], data.kg, data.table, splits, config, provider)

        t0 = time.perf_counter()
        results = dict(zip(tasks, _parallel(fit2, tasks, workers)))
        timings["round2_training"] = time.perf_counter() - t0
        manifest["round2"] = {
            t: {
                "metapaths": [format_metapath(m) for m in comm.paths[t]],
                "pre_dedup_size": comm.pre_dedup_sizes[t],
                "duplicates_dropped": comm.duplicates[t],
                "cross_tasks": results[t].extra["cross_tasks"],
                "ablations": config.ablations,
                **_save_task(out / "round2" / t, results[t], data, splits),
            }
            for t in tasks
        }
        timing_keys = ("fit_seconds",)
        dump_json({"ablations": config.ablations,
                   "round1_embeddings": {t: f"round1/{t}/embeddings.npy" for t in tasks},
                   "tasks": {t: {k: v for k, v in manifest["round2"][t].items() if k not in timing_keys} for t in tasks}},
                  out / "round2" / "manifest.json")
        for t in tasks:
            print(f"round 2 {t:14s} val R2 {results[t].metrics['val']['R2']:.3f}  test R2 {results[t].metrics['test']['R2']:.3f}")
    dump_json(manifest, manifest_path)
    return 0


# ---------------------------------------------------------------- search


def cmd_search(args) -> int:
    config = SLAKConfig.load(args.config)
    data = Dataset(args.data)
    if args.task not in data.tasks:
        raise CLIError(f"indicator {args.task!r} not in {data.tasks}")
    splits = split(data.kg.regions, SplitSpec(seed=config.seed))
    provider = EmbeddingProvider.from_env(cache_dir=Path(args.out) / "cache" / "embeddings")
    description = task_descriptions().get(args.task, args.task)

    def fitness(ind) -> float:
        ctx = TaskContext(args.task, list(ind.genes), description)
        return train_single(ctx, data.kg, data.table, splits, config, provider).metrics["val"]["R2"]

    seed = config.seed if args.seed is None else args.seed
    if args.algo == "ga":
        result = genetic_search(GAConfig(generations=args.generations, seed=seed), fitness, data.schema)
        header = ("genetic algorithm: 5 individuals per generation, top-2 become parents, the best parent "
                  "is carried over unchanged, the other 4 slots are crossover children (one swapped gene) "
                  "with 10% per-gene mutation")
    else:
        result = random_search(fitness, args.generations, 5, seed, data.schema)
        header = "random search: independent random individuals, 5 per iteration"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "history.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"# {header}\n# task={args.task} seed={seed} fitness=validation R2\n")
        fh.write("generation\tindex\tfitness\tseconds\tgenes\n")
        for rec in result.history:
            fh.write(f"{rec.generation}\t{rec.index}\t{rec.fitness!r}\t{rec.seconds:.3f}\t{' | '.join(rec.genes)}\n")
    save_metapath_file(result.best.genes, out / "best_metapaths.txt")
    dump_json({"algo": args.algo, "task": args.task, "seed": seed, "best_fitness": result.best_fitness,
               "best": result.best.dsl(), "evaluations": len(result.history)}, out / "best.json")
    print(f"{args.algo}: {len(result.history)} evaluations, best validation R2 {result.best_fitness:.3f}")
    return 0


# ---------------------------------------------------------------- report


def _load_round(run: Path, rnd: str) -> dict[str, dict]:
    base = run / rnd
    if not base.is_dir():
        return {}
    out = {}
    for d in sorted(base.iterdir()):
        if (d / "metrics.json").exists():
            out[d.name] = {
                "metrics": json.loads((d / "metrics.json").read_text())["metrics"],
                "attention": json.loads((d / "attention.json").read_text()) if (d / "attention.json").exists() else {},
                "dir": d,
            }
    return out


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise CLIError(f"unknown run directory {run}")
    r1, r2 = _load_round(run, "round1"), _load_round(run, "round2")
    if not r1 and not r2:
        raise CLIError(f"run directory {run} has no round1/round2 metrics")
    out = run / "report"
    out.mkdir(exist_ok=True)
    tasks = sorted(set(r1) | set(r2))
    split_name = args.split
    rows = []
    for t in tasks:
        for m in ("MAE", "RMSE", "R2"):
            a = r1.get(t, {}).get("metrics", {}).get(split_name, {}).get(m)
            b = r2.get(t, {}).get("metrics", {}).get(split_name, {}).get(m)
            change = None if a is None or b is None else b - a
            rows.append((t, m, a, b, change))
    fmt = lambda x: "" if x is None else f"{x:.6g}"  # noqa: E731
    _write_csv(out / "metrics.csv", ["task", "metric", "round1", "round2", "change"],
               [(t, m, fmt(a), fmt(b), fmt(c)) for t, m, a, b, c in rows])
    lines = [f"{split_name} split: round 1 (single task) vs round 2 (with communication)", "",
             f"{'task':14s} {'metric':6s} {'round1':>10s} {'round2':>10s} {'change':>10s}"]
    for t, m, a, b, c in rows:
        lines.append(f"{t:14s} {m:6s} {fmt(a):>10s} {fmt(b):>10s} {fmt(c):>10s}")
    table_text = "\n".join(lines) + "\n"
    (out / "metrics.txt").write_text(table_text, encoding="utf-8")

    err_rows, att_rows = [], []
    for rnd, results in (("round1", r1), ("round2", r2)):
        for t in sorted(results):
            pred_file = results[t]["dir"] / "predictions.csv"
            if pred_file.exists():
                with open(pred_file, encoding="utf-8", newline="") as fh:
                    for row in csv.DictReader(fh):
                        err = float(row["prediction"]) - float(row["truth"])
                        err_rows.append((rnd, t, row["region_id"], row["split"], row["truth"], row["prediction"], f"{err:.6g}"))
            att = results[t]["attention"]
            for k, mp in enumerate(att.get("metapaths", [])):
                if "metapath_weights_mean" in att:
                    att_rows.append((rnd, t, "metapath", mp, f"{att['metapath_weights_mean'][k]:.6g}",
                                     f"{att['metapath_weights_std'][k]:.6g}"))
            for k, other in enumerate(att.get("cross_tasks", [])):
                if "task_weights_mean" in att:
                    att_rows.append((rnd, t, "task", other, f"{att['task_weights_mean'][k]:.6g}",
                                     f"{att['task_weights_std'][k]:.6g}"))
    _write_csv(out / "region_errors.csv", ["round", "task", "region_id", "split", "truth", "prediction", "error"], err_rows)
    _write_csv(out / "attention_summary.csv", ["round", "task", "source_kind", "source", "mean_weight", "std_weight"], att_rows)
    print(table_text, end="")
    return 0


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slak", description="Meta-path driven region indicator prediction on a location KG")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a planted-signal synthetic dataset")
    g.add_argument("--spec", required=True, help="synthetic spec YAML (see configs/synth_*.yaml)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_synth)

    r = sub.add_parser("run", help="agent meta-path selection plus round 1 and/or round 2 training")
    r.add_argument("--config", required=True, help="experiment config YAML (SLAKConfig fields)")
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--out", required=True, help="run directory, e.g. runs/<name>")
    r.add_argument("--mock-agents", action="store_true", help="use fixture-driven agents even if LLM_ENDPOINT is set")
    r.add_argument("--fixtures", default=None, help="directory of mock agent fixtures (default: shipped ones)")
    r.add_argument("--ablate", action="append", help=f"comma separated flags from {', '.join(ABLATIONS)}")
    r.add_argument("--round", choices=("1", "2", "all"), default="all")
    r.add_argument("--workers", type=int, default=None, help="parallel task trainings (default: number of tasks)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("search", help="random search or genetic algorithm over 6-path individuals")
    s.add_argument("--algo", choices=("ga", "random"), required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--task", default="user_activity")
    s.add_argument("--generations", type=int, default=6, help="GA generations or random-search iterations")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None, help="output directory (default runs/search-<algo>)")
    s.set_defaults(func=cmd_search)

    rep = sub.add_parser("report", help="tables, per-region errors and attention summaries for a run")
    rep.add_argument("--run", required=True)
    rep.add_argument("--split", default="test", choices=("train", "val", "test"))
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "out", "") is None and args.command == "search":
        args.out = f"runs/search-{args.algo}"
    try:
        return args.func(args)
    except (CLIError, DataError, SchemaError, KGError, MetaPathError, AgentError, TrainingError, SearchError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
