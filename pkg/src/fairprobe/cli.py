"""``fairprobe`` command line: synth, prep, train, eval, stats, project, preprocess-image.

Every command accepts ``--config FILE`` holding a JSON object whose keys are
the long option names (dashes or underscores); explicit flags win over the
file. Strategy knobs go under a nested ``"strategy"`` object or through
repeated ``--set key=value`` flags. The seed falls back to ``FAIRPROBE_SEED``.

Errors print one line ``error[CODE]: message`` to stderr and exit with
2 (config), 3 (data) or 4 (numeric). Files written by a failed command are
removed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from ._io import atomic_path
from .dataio import DatasetBundle, get_task, load_bundle, read_pgm, save_bundle, select_samples
from .dataio import preprocess_image, split_patients, write_pgm
from .errors import ConfigError, DataError, DimensionError, FairprobeError
from .metrics import (
    MetricRow,
    MetricsReport,
    confusion,
    f1_macro,
    markdown_table,
    signed_rank_statistic,
    significance_stars,
    subgroup_report,
    wilcoxon_one_sided,
)
from .numerics import pca_project
from .strategies import STRATEGIES, StrategyConfig, TrainedModel, grid_search, train, write_history
from .synthbench import REFERENCE_CONFIGS, SynthConfig, generate, reference_config

log = logging.getLogger("fairprobe")

MANIFEST_NAME = "manifest.csv"
EMBEDDINGS_NAME = "embeddings.fmbe"
SEED_ENV = "FAIRPROBE_SEED"


class _Outputs:
    """Tracks files a command writes so a failure can remove all of them."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path: str | Path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def rollback(self) -> None:
        for p in self.paths:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


# -- option plumbing ---------------------------------------------------------

def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _opt(args: argparse.Namespace, cfg: dict[str, Any], name: str, default: Any = None) -> Any:
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def _seed(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    value = _opt(args, cfg, "seed")
    if value is None:
        value = os.environ.get(SEED_ENV)
    if value is None:
        return 0
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"seed {value!r} is not an integer") from None


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _strategy_overrides(args: argparse.Namespace, cfg: dict[str, Any]) -> dict[str, Any]:
    over = dict(cfg.get("strategy") or {})
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        over[key.strip().replace("-", "_")] = _parse_value(value)
    for name in ("epochs", "batch_size", "learning_rate"):
        value = getattr(args, name, None)
        if value is not None:
            over[name] = value
    return over


def _bundle_paths(args: argparse.Namespace, cfg: dict[str, Any]) -> tuple[Path, Path]:
    data = _opt(args, cfg, "data")
    manifest = _opt(args, cfg, "manifest")
    embeddings = _opt(args, cfg, "embeddings")
    if data:
        manifest = manifest or Path(data) / MANIFEST_NAME
        embeddings = embeddings or Path(data) / EMBEDDINGS_NAME
    if not manifest or not embeddings:
        raise ConfigError("give --data DIR or both --manifest and --embeddings")
    return Path(manifest), Path(embeddings)


def _load(args, cfg) -> DatasetBundle:
    manifest, embeddings = _bundle_paths(args, cfg)
    for p in (manifest, embeddings):
        if not p.exists():
            raise DataError(f"input file {p} does not exist")
    return load_bundle(manifest, embeddings)


def _out_dir(args, cfg) -> Path:
    out = _opt(args, cfg, "out")
    if not out:
        raise ConfigError("--out is required")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_split(bundle: DatasetBundle) -> None:
    if any(r.split is None for r in bundle.records):
        raise DataError("bundle has scans without a split; run `fairprobe prep` first")


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg, outputs: _Outputs) -> int:
    name = _opt(args, cfg, "fixture")
    seed_given = _opt(args, cfg, "seed") is not None or SEED_ENV in os.environ
    overrides = {"seed": _seed(args, cfg)} if seed_given else {}
    if name in REFERENCE_CONFIGS:
        config = reference_config(name, **overrides)
    elif name:
        path = Path(name)
        if not path.exists():
            raise ConfigError(f"{name!r} is neither a reference fixture {REFERENCE_CONFIGS} nor a file")
        data = json.loads(path.read_text(encoding="utf-8"))
        data.update(overrides)
        config = SynthConfig.from_dict(data)
    else:
        raise ConfigError("synth needs --fixture S1|S2|S3|FILE")
    out = _out_dir(args, cfg)
    bundle = generate(config)
    save_bundle(bundle, outputs.add(out / MANIFEST_NAME), outputs.add(out / EMBEDDINGS_NAME))
    print(f"wrote {len(bundle.records)} scans from {len(bundle.dataset_ids)} datasets to {out}")
    return 0


def cmd_prep(args, cfg, outputs: _Outputs) -> int:
    task = get_task(_opt(args, cfg, "task", "diagnosis"))
    cap = int(_opt(args, cfg, "cap", 1000))
    fraction = float(_opt(args, cfg, "split_fraction", 0.70))
    seed = _seed(args, cfg)
    if cap < 1:
        raise ConfigError("cap must be >= 1")
    bundle = _load(args, cfg)
    selected = select_samples(bundle, task, cap=cap, seed=seed)
    prepared = split_patients(selected, fraction, seed=seed)
    out = _out_dir(args, cfg)
    save_bundle(prepared, outputs.add(out / MANIFEST_NAME), outputs.add(out / EMBEDDINGS_NAME))
    n_train = sum(r.split == "train" for r in prepared.records)
    print(f"kept {len(prepared.records)} of {len(bundle.records)} scans "
          f"({n_train} train / {len(prepared.records) - n_train} test)")
    return 0


def _strategy_list(value: Any) -> list[str]:
    if value is None:
        return ["wce"]
    items = value.split(",") if isinstance(value, str) else list(value)
    items = [s.strip() for s in items if s.strip()]
    for s in items:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
    return items


def _fit(bundle: DatasetBundle, config: StrategyConfig, name: str, out: Path, grid: bool,
         outputs: _Outputs, scope: str | None = None) -> TrainedModel:
    if grid:
        result = grid_search(bundle, config)
        path = outputs.add(out / f"grid-{name}.csv")
        with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["batch_size", "learning_rate", "cv_accuracy"])
            for bs, lr, acc in result.candidates:
                w.writerow([bs, repr(lr), repr(acc)])
        config = result.config
        log.info("%s: grid search picked batch %d, lr %g", name, config.batch_size, config.learning_rate)
    model = train(bundle, config, scope=scope)
    model.save(outputs.add(out / f"{name}.fmpb"))
    write_history(outputs.add(out / f"{name}.history.csv"), model)
    print(f"trained {name} on {len(bundle.records)} scans")
    return model


def cmd_train(args, cfg, outputs: _Outputs) -> int:
    task = _opt(args, cfg, "task", "diagnosis")
    mode = _opt(args, cfg, "mode", "pooled")
    if mode not in ("individual", "pooled"):
        raise ConfigError("mode must be 'individual' or 'pooled'")
    grid = bool(_opt(args, cfg, "grid_search", False))
    seed = _seed(args, cfg)
    over = _strategy_overrides(args, cfg)
    bundle = _load(args, cfg)
    _require_split(bundle)
    train_set = bundle.where(split="train")
    out = _out_dir(args, cfg)

    def config_for(strategy: str) -> StrategyConfig:
        data = {"seed": seed, **over, "strategy": strategy, "task": task}
        return StrategyConfig.from_dict(data)

    if mode == "individual":
        base = config_for("wce")
        for ds in train_set.dataset_ids:
            _fit(train_set.where(dataset_id=ds), base, f"individual-{ds}", out, grid, outputs, scope=ds)
        return 0
    for strategy in _strategy_list(_opt(args, cfg, "strategies")):
        name = "unified" if strategy == "wce" else strategy
        config = config_for(strategy)
        _fit(train_set, config, name, out, grid and strategy != "fades", outputs)
    return 0


def _checkpoints(args, cfg) -> list[Path]:
    paths = []
    for item in _opt(args, cfg, "checkpoints") or []:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.fmpb")))
        elif p.exists():
            paths.append(p)
        else:
            raise DataError(f"checkpoint {p} does not exist")
    if not paths:
        raise ConfigError("no checkpoints given (use --checkpoints FILE|DIR ...)")
    return paths


def _individual_rows(model: TrainedModel, test: DatasetBundle) -> list[MetricRow]:
    """Internal, external and overall F1 for a model trained on one dataset."""
    task = get_task(model.task)
    K = task.num_classes
    ds = model.scope
    y = test.labels(task)
    pred = model.predict(test.features())
    datasets = np.array([r.dataset_id for r in test.records], dtype=object)
    per = {}
    for other in test.dataset_ids:
        sel = datasets == other
        per[other] = f1_macro(confusion(y[sel], pred[sel], K))
    rows = [MetricRow("f1", task.name, f"individual-{ds}", o, value=v) for o, v in per.items()]
    external = [v for o, v in per.items() if o != ds]
    rows += [
        MetricRow("f1_internal", task.name, "individual", ds, value=per.get(ds)),
        MetricRow("f1_external", task.name, "individual", ds,
                  value=float(np.mean(external)) if external else None),
        MetricRow("f1_overall", task.name, "individual", ds, value=f1_macro(confusion(y, pred, K))),
    ]
    return rows


def cmd_eval(args, cfg, outputs: _Outputs) -> int:
    bundle = _load(args, cfg)
    _require_split(bundle)
    test = bundle.where(split="test")
    attrs = _opt(args, cfg, "attributes", "dataset,density,age")
    attrs = [a.strip() for a in attrs.split(",")] if isinstance(attrs, str) else list(attrs)
    out = _out_dir(args, cfg)
    report = MetricsReport()
    individual: list[TrainedModel] = []
    pooled: list[tuple[str, TrainedModel]] = []
    for path in _checkpoints(args, cfg):
        model = TrainedModel.load(path)
        if model.feature_dim != bundle.feature_dim:
            raise DimensionError(f"{path.name}: checkpoint expects {model.feature_dim}-dim embeddings, "
                            f"bundle has {bundle.feature_dim}")
        if model.scope is not None:
            individual.append(model)
        else:
            pooled.append((path.stem, model))

    for model in individual:
        report.extend(_individual_rows(model, test))
    if individual:
        task = individual[0].task
        for metric in ("f1_internal", "f1_overall"):
            vals = {r.dataset: r.value for r in report.rows
                    if r.metric == metric and r.value is not None}
            if vals:
                report.rows.append(MetricRow(f"{metric}_mean", task, "individual", "all",
                                             value=float(np.mean(list(vals.values())))))
        internal = {r.dataset: r.value for r in report.select(metric="f1_internal")}
        for ds, v in sorted(internal.items()):
            report.rows.append(MetricRow("f1", task, "individual", ds, value=v))
    for name, model in pooled:
        report.extend(subgroup_report(test, model, strategy=name, attributes=attrs))

    report.to_csv(outputs.add(out / "report.csv"))
    entries = [(s, report.f1_by_dataset(s)) for s in report.strategies()
               if not s.startswith("individual-") and report.f1_by_dataset(s)]
    names = [e[0] for e in entries]
    baselines = {s: "unified" for s in names if s != "unified"} if "unified" in names else {}
    table = markdown_table(entries, baselines, title="per-dataset macro-F1 (mean ± std)")
    path = outputs.add(out / "table.md")
    with atomic_path(path) as tmp:
        Path(tmp).write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_stats(args, cfg, outputs: _Outputs) -> int:
    path_a = _opt(args, cfg, "report_a")
    path_b = _opt(args, cfg, "report_b") or path_a
    strat_a = _opt(args, cfg, "strategy_a")
    strat_b = _opt(args, cfg, "strategy_b") or strat_a
    direction = _opt(args, cfg, "direction", "greater")
    metric = _opt(args, cfg, "metric", "f1")
    if not path_a or not strat_a:
        raise ConfigError("stats needs --report-a and --strategy-a")
    if direction not in ("greater", "less"):
        raise ConfigError("direction must be 'greater' or 'less'")
    for p in {path_a, path_b}:
        if not Path(p).exists():
            raise DataError(f"report {p} does not exist")
    a = MetricsReport.from_csv(path_a).f1_by_dataset(strat_a, metric)
    b = MetricsReport.from_csv(path_b).f1_by_dataset(strat_b, metric)
    keys = sorted(set(a) & set(b))
    if not keys:
        raise DataError(f"reports share no dataset keys ({sorted(a)} vs {sorted(b)})")
    x = [a[k] for k in keys]
    y = [b[k] for k in keys]
    w_plus, _ = signed_rank_statistic(x, y)
    p = wilcoxon_one_sided(x, y, direction)
    stars = significance_stars(p)
    header = ["strategy_a", "strategy_b", "metric", "direction", "n", "w_plus", "p_value", "stars"]
    row = [strat_a, strat_b, metric, direction, len(keys), repr(float(w_plus)), repr(p), stars]
    out = _opt(args, cfg, "out")
    if out:
        path = outputs.add(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerow(row)
    print(f"{strat_a} vs {strat_b} ({direction}, n={len(keys)}): p={p:.6g} {stars}".rstrip())
    return 0


def cmd_project(args, cfg, outputs: _Outputs) -> int:
    bundle = _load(args, cfg)
    out = _opt(args, cfg, "out")
    if not out:
        raise ConfigError("--out is required")
    result = pca_project(bundle.features(), 2)
    path = outputs.add(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "dim1", "dim2", "dataset_id", "density"])
        for rec, (d1, d2) in zip(bundle.records, result.projection):
            w.writerow([rec.sample_id, repr(float(d1)), repr(float(d2)), rec.dataset_id, rec.density or ""])
    ratio = ", ".join(f"{v:.3f}" for v in result.explained_variance_ratio)
    print(f"projected {len(bundle.records)} scans; explained variance ratio {ratio}")
    return 0


def cmd_preprocess_image(args, cfg, outputs: _Outputs) -> int:
    src = _opt(args, cfg, "input")
    dst = _opt(args, cfg, "output")
    if not src or not dst:
        raise ConfigError("preprocess-image needs --input and --output")
    if not Path(src).exists():
        raise DataError(f"image {src} does not exist")
    image = preprocess_image(read_pgm(src), int(_opt(args, cfg, "threshold", 40)))
    write_pgm(outputs.add(dst), image)
    print(f"wrote {image.shape[1]}x{image.shape[0]} image to {dst}")
    return 0


# -- parser ------------------------------------------------------------------

def _add_bundle_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help=f"directory holding {MANIFEST_NAME} and {EMBEDDINGS_NAME}")
    p.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--embeddings", help="FMBE embedding file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairprobe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fairprobe {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option defaults")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic embedding bundle")
    p.add_argument("--fixture", help="S1, S2, S3 or a SynthConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")

    p = command("prep", cmd_prep, "select labelled scans and split patients")
    _add_bundle_args(p)
    p.add_argument("--task", choices=("diagnosis", "density"))
    p.add_argument("--cap", type=int, help="max patients per dataset and class (default 1000)")
    p.add_argument("--split-fraction", type=float, help="train share of patients (default 0.70)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")

    p = command("train", cmd_train, "train probes and mitigation strategies")
    _add_bundle_args(p)
    p.add_argument("--task", choices=("diagnosis", "density"))
    p.add_argument("--mode", choices=("individual", "pooled"))
    p.add_argument("--strategies", help=f"comma list from {','.join(STRATEGIES)} (pooled mode)")
    p.add_argument("--grid-search", action="store_true", default=None,
                   help="pick batch size and learning rate by 3-fold patient CV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="strategy config override")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="checkpoint directory")

    p = command("eval", cmd_eval, "evaluate checkpoints on the test split")
    _add_bundle_args(p)
    p.add_argument("--checkpoints", nargs="+", help="checkpoint files or directories")
    p.add_argument("--attributes", help="subgroup attributes (default dataset,density,age)")
    p.add_argument("--out", help="report directory")

    p = command("stats", cmd_stats, "one-sided signed-rank test between two strategies")
    p.add_argument("--report-a")
    p.add_argument("--report-b", help="defaults to --report-a")
    p.add_argument("--strategy-a")
    p.add_argument("--strategy-b", help="defaults to --strategy-a")
    p.add_argument("--direction", choices=("greater", "less"), help="alternative: A greater/less than B")
    p.add_argument("--metric", help="per-dataset metric (default f1)")
    p.add_argument("--out", help="CSV for the result row")

    p = command("project", cmd_project, "2-D PCA coordinates of the embeddings")
    _add_bundle_args(p)
    p.add_argument("--out", help="output CSV")

    p = command("preprocess-image", cmd_preprocess_image, "threshold and crop a grayscale PGM")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--threshold", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    outputs = _Outputs()
    try:
        cfg = _load_config(getattr(args, "config", None))
        return args.func(args, cfg, outputs)
    except FairprobeError as exc:
        outputs.rollback()
        msg = " ".join(str(exc).split())
        print(f"error[{exc.code}]: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        outputs.rollback()
        print(f"error[E_IO]: {exc}", file=sys.stderr)
        return DataError.exit_code
    except BaseException:
        outputs.rollback()
        raise


if __name__ == "__main__":
    sys.exit(main())
