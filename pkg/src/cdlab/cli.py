"""Command-line entry point: ``generate``, ``run``, ``report`` and ``study``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import secrets
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, system_hash, with_overrides
from .container import ContainerError
from .data import DatasetFile, load_dataset, save_dataset
from .harness import (
    PerformanceMatrix,
    TrainingError,
    average_forgetting,
    average_performance,
    binarization_study,
    format_study,
    prepare_system,
    run_sequence_all,
)
from .seeding import derive_seed
from .simulate import generate_dataset
from .subnet import Strategy

log = logging.getLogger("cdlab")


class UsageError(Exception):
    """Bad invocation, configuration or missing inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# rendering


def format_heatmap(M: PerformanceMatrix, title: str = "") -> str:
    """Fixed-width grid of MSE values; undefined entries print as ``-``."""
    labels = [f"{k + 1}:{n}" for k, n in enumerate(M.names)]
    width = max(9, *(len(l) + 1 for l in labels))
    lines = [title] if title else []
    lines.append(" " * width + "".join(f"{l:>{width}}" for l in labels))
    for i, label in enumerate(labels):
        cells = [
            f"{M.values[i, j]:>{width}.4f}" if M.defined(i, j) else f"{'-':>{width}}"
            for j in range(M.n)
        ]
        lines.append(f"{label:<{width}}" + "".join(cells))
    return "\n".join(lines)


def matrix_to_csv(M: PerformanceMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    labels = [f"{k + 1}:{n}" for k, n in enumerate(M.names)]
    w.writerow(["after"] + labels)
    for i, label in enumerate(labels):
        w.writerow([label] + [repr(float(M.values[i, j])) if M.defined(i, j) else "" for j in range(M.n)])
    return buf.getvalue()


def matrix_from_csv(text: str) -> PerformanceMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    names = [h.split(":", 1)[1] for h in rows[0][1:]]
    M = PerformanceMatrix.empty(names)
    for i, row in enumerate(rows[1:]):
        for j, cell in enumerate(row[1:]):
            if cell:
                M.set(i, j, float(cell))
    return M


def _stats(values: Sequence[float | None]) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "values": list(values)}
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return {"mean": float(np.mean(vals)), "std": std, "values": list(values)}


def _fmt(stat: dict) -> str:
    if stat["mean"] is None:
        return "-"
    return f"{stat['mean']:.4f}±{stat['std']:.4f}"


# ---------------------------------------------------------------------------
# commands


def _effective_seed(seed: int, fix_seed: bool) -> int:
    if fix_seed:
        return seed
    return derive_seed(seed, secrets.randbits(63))


def _unique_systems(cfg: ExperimentConfig):
    seen = {}
    for s in cfg.systems():
        seen.setdefault(s.name, s)
    return list(seen.values())


def cmd_generate(cfg: ExperimentConfig, out: Path, overwrite: bool, fix_seed: bool) -> Path:
    seed = _effective_seed(cfg.seed, fix_seed)
    systems = _unique_systems(cfg)
    files = {s.name: out / f"{s.name}.cdl" for s in systems}
    manifest_path = out / "manifest.json"
    existing = [str(p) for p in [*files.values(), manifest_path] if p.exists()]
    if existing and not overwrite:
        raise UsageError(f"refusing to overwrite existing outputs (pass --overwrite): {', '.join(existing)}")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in systems:
        sys_seed = derive_seed(seed, "data", s.name)
        log.info("generating %s (%d train, %d test)", s.name, cfg.n_train, cfg.n_test)
        ds = DatasetFile(
            s,
            sys_seed,
            generate_dataset(s, cfg.n_train, derive_seed(sys_seed, "train")),
            generate_dataset(s, cfg.n_test, derive_seed(sys_seed, "test")),
        )
        save_dataset(files[s.name], ds)
        entries.append(
            {
                "name": s.name,
                "file": files[s.name].name,
                "seed": sys_seed,
                "config_hash": system_hash(s),
                "config": s.to_dict(),
                "n_train": cfg.n_train,
                "n_test": cfg.n_test,
            }
        )
    manifest = {
        "schema_version": 1,
        "seed": seed,
        "sequence": [s.name for s in cfg.systems()],
        "systems": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def _load_datasets(cfg: ExperimentConfig, data_dir: Path) -> dict[str, DatasetFile]:
    systems = _unique_systems(cfg)
    missing = [str(data_dir / f"{s.name}.cdl") for s in systems if not (data_dir / f"{s.name}.cdl").exists()]
    if missing:
        raise UsageError(f"missing dataset files (run `generate` first): {', '.join(missing)}")
    out = {}
    for s in systems:
        ds = load_dataset(data_dir / f"{s.name}.cdl")
        if ds.config != s:
            raise UsageError(f"dataset {s.name}.cdl was generated for a different system config")
        out[s.name] = ds
    return out


def _trainlog_rows(r: int, names: list[str], logs: list[list[float]], method: str):
    """``(system label, row)`` pairs; Joint trains once, filed under ``joint``."""
    stages = [(len(names) - 1, "joint", logs[0])] if method == "Joint" else [
        (pos, names[pos], losses) for pos, losses in enumerate(logs)
    ]
    for pos, name, losses in stages:
        for epoch, loss in enumerate(losses, 1):
            yield name, [r, pos + 1, epoch, repr(loss)]


def _write_trainlogs(method_dir: Path, rows: dict[str, list]) -> None:
    for name, body in rows.items():
        with (method_dir / f"trainlog_{name}.csv").open("w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["repeat", "position", "epoch", "loss"])
            w.writerows(body)


def cmd_run(cfg: ExperimentConfig, data_dir: Path, out: Path, overwrite: bool, fix_seed: bool) -> dict:
    summary_path = out / "summary.json"
    if summary_path.exists() and not overwrite:
        raise UsageError(f"refusing to overwrite existing results in {out} (pass --overwrite)")
    datasets = _load_datasets(cfg, data_dir)
    seed = _effective_seed(cfg.seed, fix_seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(with_overrides(cfg, seed=seed).dumps(), encoding="utf-8")
    seq = cfg.systems()
    names = [s.name for s in seq]
    results: dict[str, dict] = {m: {"AP": [], "AF": [], "selection_accuracy": []} for m in cfg.methods}
    trainlogs: dict[str, dict[str, list]] = {m: {} for m in cfg.methods}
    for r in range(cfg.repeats):
        rseed = derive_seed(seed, "repeat", r)
        systems = [
            prepare_system(datasets[s.name], cfg.windows, derive_seed(rseed, "windows", s.name)) for s in seq
        ]
        for method in cfg.methods:
            log.info("repeat %d/%d method %s", r + 1, cfg.repeats, method)
            method_dir = out / method
            method_dir.mkdir(exist_ok=True)
            res = run_sequence_all(systems, method, (cfg.selection,), cfg.train, cfg.model, rseed)
            M = res.matrices[cfg.selection]
            (method_dir / f"matrix_{r}.csv").write_text(matrix_to_csv(M), encoding="utf-8")
            (method_dir / f"heatmap_{r}.txt").write_text(
                format_heatmap(M, f"{method} {cfg.sequence_label()} repeat {r}") + "\n", encoding="utf-8"
            )
            for name, row in _trainlog_rows(r, names, res.train_logs, method):
                trainlogs[method].setdefault(name, []).append(row)
            info = {"method": method, "sequence": names, "repeat": r, "seed": rseed}
            save_checkpoint(method_dir / f"checkpoint_{r}.cdl", Checkpoint(res.backbone, res.scores, res.pool, info))
            results[method]["AP"].append(average_performance(M))
            results[method]["AF"].append(average_forgetting(M))
            results[method]["selection_accuracy"].append(
                {str(k): v for k, v in res.selection_accuracy.items()}
            )
    for method, rows in trainlogs.items():
        _write_trainlogs(out / method, rows)
    summary = {
        "sequence": cfg.sequence_label(),
        "systems": names,
        "selection": cfg.selection,
        "seed": seed,
        "repeats": cfg.repeats,
        "methods": {
            m: {
                "AP": _stats(v["AP"]),
                "AF": _stats(v["AF"]),
                "selection_accuracy": v["selection_accuracy"],
            }
            for m, v in results.items()
        },
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def _read_results(path: Path) -> tuple[str, dict[str, list[PerformanceMatrix]]]:
    if not (path / "summary.json").exists():
        raise UsageError(f"{path} holds no results (summary.json missing)")
    summary = json.loads((path / "summary.json").read_text(encoding="utf-8"))
    mats = {}
    for method in summary["methods"]:
        files = sorted((path / method).glob("matrix_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
        if not files:
            raise UsageError(f"{path / method} holds no matrix CSVs")
        mats[method] = [matrix_from_csv(f.read_text(encoding="utf-8")) for f in files]
    return summary["sequence"], mats


def cmd_report(dirs: Sequence[Path]) -> str:
    """AP/AF per method (rows) and sequence (columns), recomputed from the matrix CSVs."""
    if not dirs:
        raise UsageError("report needs at least one results directory")
    columns = [_read_results(d) for d in dirs]
    methods = list(dict.fromkeys(m for _, mats in columns for m in mats))
    head = f"{'method':<10}" + "".join(f"{seq + ' AP':>22}{seq + ' AF':>22}" for seq, _ in columns)
    lines = [head]
    for m in methods:
        row = f"{m:<10}"
        for _, mats in columns:
            if m not in mats:
                row += f"{'-':>22}{'-':>22}"
                continue
            ap = _stats([average_performance(M) for M in mats[m]])
            af = _stats([average_forgetting(M) for M in mats[m]])
            row += f"{_fmt(ap):>22}{_fmt(af):>22}"
        lines.append(row)
    for seq, mats in columns:
        for m, ms in mats.items():
            mean = PerformanceMatrix(np.mean([M.values for M in ms], axis=0), ms[0].names)
            lines.append("")
            lines.append(format_heatmap(mean, f"{m} on {seq} (mean MSE over {len(ms)} repeat(s))"))
    return "\n".join(lines)


def cmd_study(cfg: ExperimentConfig, data_dir: Path, out: Path, overwrite: bool, fix_seed: bool) -> str:
    path = out / "study.json"
    if path.exists() and not overwrite:
        raise UsageError(f"refusing to overwrite {path} (pass --overwrite)")
    datasets = _load_datasets(cfg, data_dir)
    seed = _effective_seed(cfg.seed, fix_seed)
    systems = [
        prepare_system(datasets[s.name], cfg.windows, derive_seed(seed, "windows", s.name)) for s in cfg.systems()
    ]
    strategies = [Strategy("fast")] + [Strategy("topk", r) for r in cfg.study_ratios]
    rows = binarization_study(systems, strategies, cfg.train, cfg.model, seed, cfg.selection)
    table = format_study(rows)
    best_topk = min(r["AP"] for r in rows[1:]) if len(rows) > 1 else None
    verdict = (
        "no top-k ratio requested"
        if best_topk is None
        else f"fast selection {'beats' if rows[0]['AP'] < best_topk else 'does not beat'} every top-k ratio on AP"
    )
    text = f"{table}\n{verdict}\n"
    out.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"seed": seed, "rows": rows, "verdict": verdict}, indent=2) + "\n", encoding="utf-8")
    (out / "study.txt").write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdlab", description="Continual dynamics learning with mask-switching graph ODEs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", type=Path, help="experiment JSON (defaults to the smoke preset)")
        sp.add_argument("--out", type=Path, help=out_help)
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        sp.add_argument("--fix-seed", action="store_true", help="use the master seed as is (no OS entropy)")

    common(sub.add_parser("generate", help="simulate and save one dataset per system"), "dataset directory")
    run = sub.add_parser("run", help="train a sequence and write performance matrices")
    common(run, "results directory")
    run.add_argument("--data", type=Path, help="dataset directory (defaults to config data_dir)")
    run.add_argument("--repeats", type=int, help="number of repeats override")
    study = sub.add_parser("study", help="compare fast and top-k binarization")
    common(study, "results directory")
    study.add_argument("--data", type=Path, help="dataset directory (defaults to config data_dir)")
    report = sub.add_parser("report", help="summarize one or more results directories")
    report.add_argument("dirs", nargs="+", type=Path)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    repeats = getattr(args, "repeats", None)
    if repeats is not None and repeats < 1:
        raise ConfigError([f"repeats: must be an integer >= 1 (got {repeats})"])
    if args.seed is not None and args.seed < 0:
        raise ConfigError([f"seed: must be an integer >= 0 (got {args.seed})"])
    return with_overrides(cfg, seed=args.seed, repeats=repeats)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.dirs))
            return 0
        cfg = _config(args)
        if args.command == "generate":
            path = cmd_generate(cfg, args.out or Path(cfg.data_dir), args.overwrite, args.fix_seed)
            print(f"wrote {path}")
        elif args.command == "run":
            out = args.out or Path(cfg.out_dir)
            summary = cmd_run(cfg, args.data or Path(cfg.data_dir), out, args.overwrite, args.fix_seed)
            for m, s in summary["methods"].items():
                print(f"{m:<10} AP {_fmt(s['AP'])}  AF {_fmt(s['AF'])}")
            print(f"results in {out}")
        else:
            out = args.out or Path(cfg.out_dir)
            print(cmd_study(cfg, args.data or Path(cfg.data_dir), out, args.overwrite, args.fix_seed), end="")
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, ad.NonFiniteError, ContainerError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
