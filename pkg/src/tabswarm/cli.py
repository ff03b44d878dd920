"""Experiment command line: correlate, baselines, search, report.

One JSON config file drives the whole experiment. Every knob is
validated up front (all problems reported in one pass), every artifact
lands under the configured output directory, and every file embeds the
config digest plus master seed so any number is traceable to its run.
Artifacts contain no wall-clock values; re-running a subcommand with the
same config and seed rewrites byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, datasets, pixmap, report, search as search_mod, transformer
from .pso import SwarmConfig

_DERIVE_SYNTH = 11
_DERIVE_SPLIT = 12
_DERIVE_SWARM = 13
_DERIVE_FOREST = 14

_DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "data": {},
    "split": {"test_fraction": 0.2},
    "baselines": {
        "tree": {"max_depth": 8, "min_leaf": 1},
        "forest": {"n_trees": 100, "max_depth": 8, "m_try": 4},
        "boosted": {"n_trees": 100, "max_depth": 3, "learning_rate": 0.1},
    },
    "search": {
        "n_particles": 30,
        "max_iters": 100,
        "w_start": 0.9,
        "w_end": 0.4,
        "c1": 2.0,
        "c2": 2.0,
        "vmax_fraction": 0.2,
        "learning_rate_bounds": [1e-4, 1e-1],
        "n_layers_bounds": [1, 4],
        "d_model_menu": [16, 32, 64, 128, 256, 512],
        "n_heads_menu": [1, 2, 4, 8],
        "d_ff_multiplier": 4,
        "batch_size": 32,
        "epochs": 50,
        "fitness_epochs": 10,
        "holdout_fraction": 0.25,
        "fixed_config": None,
    },
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in errors))


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _merge(defaults, override):
    if not isinstance(defaults, dict):
        return override
    merged = dict(defaults)
    for key, value in override.items():
        merged[key] = _merge(defaults.get(key), value) if key in defaults else value
    return merged


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings plus the canonical digest."""

    resolved: dict
    seed: int
    output_dir: Path
    digest: str

    @property
    def stamp(self) -> str:
        return f"config_digest={self.digest} seed={self.seed}"


def resolve_config(raw: dict, seed_override=None, out_override=None) -> ExperimentConfig:
    """Fill defaults, apply CLI overrides, and validate every field,
    reporting all problems at once."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    known = set(_DEFAULTS)
    for key in raw:
        if key not in known:
            errors.append(f"unknown top-level key {key!r}")
    resolved = _merge(_DEFAULTS, {k: v for k, v in raw.items() if k in known})
    if seed_override is not None:
        resolved["seed"] = seed_override
    if out_override is not None:
        resolved["output_dir"] = str(out_override)

    if not isinstance(resolved["seed"], int) or resolved["seed"] < 0:
        errors.append("seed must be a non-negative integer")

    data = resolved["data"]
    has_csv = "csv" in data
    has_synth = "synthetic" in data
    if has_csv == has_synth:
        errors.append("data needs exactly one of 'csv' or 'synthetic'")
    if has_synth:
        synth = data["synthetic"]
        if not isinstance(synth, dict):
            errors.append("data.synthetic must be an object")
        else:
            if not isinstance(synth.get("n_rows"), int) or synth.get("n_rows", 0) < 20:
                errors.append("data.synthetic.n_rows must be an integer >= 20")
            noise = synth.get("noise", 0.0)
            if not isinstance(noise, (int, float)) or not 0.0 <= noise < 0.5:
                errors.append("data.synthetic.noise must be in [0, 0.5)")
            if "seed" in synth and (not isinstance(synth["seed"], int) or synth["seed"] < 0):
                errors.append("data.synthetic.seed must be a non-negative integer")

    split = resolved["split"]
    if not 0.0 < split.get("test_fraction", 0.0) < 1.0:
        errors.append("split.test_fraction must be in (0, 1)")

    b = resolved["baselines"]
    for model, fields in (
        ("tree", ("max_depth", "min_leaf")),
        ("forest", ("n_trees", "max_depth", "m_try")),
        ("boosted", ("n_trees", "max_depth")),
    ):
        for field_name in fields:
            value = b.get(model, {}).get(field_name)
            minimum = 0 if (model, field_name) == ("boosted", "n_trees") else 1
            if not isinstance(value, int) or value < minimum:
                errors.append(f"baselines.{model}.{field_name} must be an integer >= {minimum}")
    eta = b.get("boosted", {}).get("learning_rate")
    if not isinstance(eta, (int, float)) or eta < 0:
        errors.append("baselines.boosted.learning_rate must be >= 0")

    seed = resolved["seed"] if isinstance(resolved["seed"], int) else 0
    s = resolved["search"]
    try:
        swarm = SwarmConfig(
            n_particles=s["n_particles"],
            max_iters=s["max_iters"],
            w_start=s["w_start"],
            w_end=s["w_end"],
            c1=s["c1"],
            c2=s["c2"],
            vmax_fraction=s["vmax_fraction"],
            seed=s.get("seed", _derive_seed(seed, _DERIVE_SWARM)),
        )
        search_mod.HyperSearchSpec(
            swarm=swarm,
            learning_rate_bounds=tuple(s["learning_rate_bounds"]),
            n_layers_bounds=tuple(s["n_layers_bounds"]),
            d_model_menu=tuple(s["d_model_menu"]),
            n_heads_menu=tuple(s["n_heads_menu"]),
            d_ff_multiplier=s["d_ff_multiplier"],
            batch_size=s["batch_size"],
            epochs=s["epochs"],
            fitness_epochs=s["fitness_epochs"],
            holdout_fraction=s["holdout_fraction"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"search: {exc}")
    fixed = s.get("fixed_config")
    if fixed is not None:
        needed = {"learning_rate", "n_layers", "d_model", "n_heads"}
        if not isinstance(fixed, dict) or not needed <= set(fixed):
            errors.append(f"search.fixed_config needs keys {sorted(needed)}")

    if errors:
        raise ConfigError(errors)

    # digest identifies the computation, not its destination directory
    computation = {k: v for k, v in resolved.items() if k != "output_dir"}
    canonical = json.dumps(computation, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode()).hexdigest()[:12]
    return ExperimentConfig(
        resolved=resolved,
        seed=resolved["seed"],
        output_dir=Path(resolved["output_dir"]),
        digest=digest,
    )


def load_config(path, seed_override=None, out_override=None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
    return resolve_config(raw, seed_override, out_override)


def _load_dataset(cfg: ExperimentConfig) -> datasets.Dataset:
    data = cfg.resolved["data"]
    if "csv" in data:
        path = Path(data["csv"])
        if not path.exists():
            raise datasets.DataError(f"data file not found: {path}")
        schema = tuple(data.get("schema", datasets.FEATURE_NAMES))
        with open(path, "rb") as fh:
            return datasets.load_csv(fh, schema=schema)
    synth = data["synthetic"]
    return datasets.synthesize_dataset(
        synth["n_rows"],
        float(synth.get("noise", 0.0)),
        synth.get("seed", _derive_seed(cfg.seed, _DERIVE_SYNTH)),
    )


def _prepared_splits(cfg: ExperimentConfig):
    ds = _load_dataset(cfg)
    if ds.feature_names != datasets.FEATURE_NAMES:
        raise datasets.DataError(
            "model training needs the full 13-column schema; "
            f"got columns {ds.feature_names}"
        )
    split_seed = cfg.resolved["split"].get("seed", _derive_seed(cfg.seed, _DERIVE_SPLIT))
    train_ds, test_ds = datasets.stratified_split(
        ds, cfg.resolved["split"]["test_fraction"], seed=split_seed
    )
    scaler = datasets.fit_scaler(train_ds)
    return datasets.apply_scaler(scaler, train_ds), datasets.apply_scaler(scaler, test_ds)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _write_report_artifacts(out: Path, rep: report.EvaluationReport, stamp: str) -> None:
    buf = io.StringIO()
    report.confusion_to_csv(rep.confusion, buf, comment=stamp)
    _write_text(out / f"confusion_{rep.model}.csv", buf.getvalue())
    buf = io.StringIO()
    pixmap.confusion_pixmap(buf, rep.confusion.counts, (stamp, f"model={rep.model}"))
    _write_text(out / f"confusion_{rep.model}.pgm", buf.getvalue())
    _write_text(out / f"report_{rep.model}.json", rep.to_json() + "\n")


def cmd_correlate(cfg: ExperimentConfig) -> int:
    ds = _load_dataset(cfg)
    matrix = datasets.pearson_matrix(ds)
    out = cfg.output_dir

    buf = io.StringIO()
    datasets.correlation_to_csv(matrix, buf, comment=cfg.stamp)
    _write_text(out / "correlation_matrix.csv", buf.getvalue())
    buf = io.StringIO()
    pixmap.correlation_pixmap(buf, matrix.values, (cfg.stamp,))
    _write_text(out / "correlation_heatmap.pgm", buf.getvalue())

    print(f"correlation matrix over {len(matrix.names)} columns ({cfg.stamp})")
    print("strongest off-diagonal pairs:")
    for a, b, r in datasets.strongest_pairs(matrix, k=5):
        print(f"  {a} ~ {b}: r = {r:+.4f}")
    return 0


def cmd_baselines(cfg: ExperimentConfig, threads: int = 1) -> int:
    train_s, test_s = _prepared_splits(cfg)
    b = cfg.resolved["baselines"]
    out = cfg.output_dir

    tree = baselines.fit_tree(
        train_s.features, train_s.targets,
        max_depth=b["tree"]["max_depth"], min_leaf=b["tree"]["min_leaf"],
    )
    forest = baselines.fit_forest(
        train_s.features, train_s.targets,
        n_trees=b["forest"]["n_trees"], max_depth=b["forest"]["max_depth"],
        m_try=b["forest"]["m_try"], seed=_derive_seed(cfg.seed, _DERIVE_FOREST),
        threads=threads,
    )
    boosted = baselines.fit_boosted(
        train_s.features, train_s.targets,
        n_trees=b["boosted"]["n_trees"], max_depth=b["boosted"]["max_depth"],
        learning_rate=b["boosted"]["learning_rate"],
    )

    predictions = {
        "decision_tree": baselines.predict_tree(tree, test_s.features),
        "random_forest": baselines.predict_forest(forest, test_s.features),
        "boosted_trees": baselines.predict_boosted(boosted, test_s.features),
    }
    for name, y_pred in predictions.items():
        rep = report.evaluate(name, test_s.targets, y_pred, seed=cfg.seed, config_digest=cfg.digest)
        _write_report_artifacts(out, rep, cfg.stamp)
        print(f"{name}: test accuracy {rep.metrics.accuracy:.3f}")
    return 0


def _comparison_outputs(cfg: ExperimentConfig, reports: list[report.EvaluationReport]) -> None:
    table = report.comparison_report(reports)
    buf = io.StringIO()
    table.to_csv(buf, comment=cfg.stamp)
    _write_text(cfg.output_dir / "comparison.csv", buf.getvalue())
    _write_text(cfg.output_dir / "comparison.txt", table.to_text())
    print(table.to_text(), end="")


def _stored_reports(out: Path, skip: str | None = None) -> list[report.EvaluationReport]:
    reports = []
    for path in sorted(out.glob("report_*.json")):
        rep = report.EvaluationReport.from_json(path.read_text())
        if rep.model != skip:
            reports.append(rep)
    return reports


def cmd_search(cfg: ExperimentConfig, threads: int = 1) -> int:
    train_s, test_s = _prepared_splits(cfg)
    s = cfg.resolved["search"]
    out = cfg.output_dir
    swarm = SwarmConfig(
        n_particles=s["n_particles"], max_iters=s["max_iters"],
        w_start=s["w_start"], w_end=s["w_end"], c1=s["c1"], c2=s["c2"],
        vmax_fraction=s["vmax_fraction"],
        seed=s.get("seed", _derive_seed(cfg.seed, _DERIVE_SWARM)),
    )
    spec = search_mod.HyperSearchSpec(
        swarm=swarm,
        learning_rate_bounds=tuple(s["learning_rate_bounds"]),
        n_layers_bounds=tuple(s["n_layers_bounds"]),
        d_model_menu=tuple(s["d_model_menu"]),
        n_heads_menu=tuple(s["n_heads_menu"]),
        d_ff_multiplier=s["d_ff_multiplier"],
        batch_size=s["batch_size"],
        epochs=s["epochs"],
        fitness_epochs=s["fitness_epochs"],
        holdout_fraction=s["holdout_fraction"],
    )

    if s.get("fixed_config"):
        fixed = s["fixed_config"]
        final_cfg = search_mod.make_config(
            spec,
            {k: fixed[k] for k in ("learning_rate", "n_layers", "d_model", "n_heads")},
            epochs=s["epochs"],
            seed=search_mod.final_retrain_seed(spec),
        )
        params, train_report = transformer.train(final_cfg, train_s, test_s)
        best_config = final_cfg
        print(f"trained fixed config {fixed} ({cfg.stamp})")
    else:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "search_log.csv"
        with open(log_path, "w", newline="\n") as fh:
            fh.write(f"# {cfg.stamp}\n")
            fh.write("iteration,particle,lr,n_layers,d_model,n_heads,fitness\n")

        def append_rows(_iteration, rows):
            # append-per-iteration so an interrupted run keeps every
            # completed iteration on disk
            with open(log_path, "a", newline="\n") as fh:
                fh.write(search_mod.iteration_rows_csv(rows))

        result = search_mod.search(spec, train_s, threads=threads, iteration_callback=append_rows)
        params = result.final_params
        best_config = result.best_config

        buf = io.StringIO()
        search_mod.convergence_csv(result, buf, comment=cfg.stamp)
        _write_text(out / "convergence.csv", buf.getvalue())

        best_experiment = json.loads(json.dumps(cfg.resolved))  # deep copy
        best_experiment["search"]["fixed_config"] = {
            "learning_rate": best_config.learning_rate,
            "n_layers": best_config.n_layers,
            "d_model": best_config.d_model,
            "n_heads": best_config.n_heads,
        }
        _write_text(
            out / "best_config.json",
            json.dumps(best_experiment, indent=2, sort_keys=True) + "\n",
        )
        print(
            f"search best validation accuracy {result.best_accuracy:.3f} "
            f"with {best_config.n_layers} layers, d_model {best_config.d_model}, "
            f"{best_config.n_heads} heads, lr {best_config.learning_rate:.2e}"
        )

    transformer.save_params(params, out / "model.bin")
    labels, _ = transformer.predict(params, best_config, test_s)
    rep = report.evaluate(
        "transformer_pso", test_s.targets, labels, seed=cfg.seed, config_digest=cfg.digest
    )
    _write_report_artifacts(out, rep, cfg.stamp)
    print(f"transformer_pso: test accuracy {rep.metrics.accuracy:.3f}")

    _comparison_outputs(cfg, _stored_reports(out))
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    reports = _stored_reports(cfg.output_dir)
    if not reports:
        print(f"no report_*.json files under {cfg.output_dir}", file=sys.stderr)
        return 1
    _comparison_outputs(cfg, reports)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabswarm",
        description="Swarm-tuned transformer vs tree baselines on tabular heart-risk data.",
    )
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument(
        "--threads", type=int, default=1,
        help="worker threads for fitness evaluation and forest fitting "
        "(1 = fully serial reference mode; results are identical)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("correlate", help="export the Pearson correlation matrix and heatmap")
    sub.add_parser("baselines", help="train and evaluate the three tree baselines")
    sub.add_parser("search", help="run the swarm search and evaluate the tuned transformer")
    sub.add_parser("report", help="rebuild the comparison table from stored reports")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    try:
        if args.command == "correlate":
            return cmd_correlate(cfg)
        if args.command == "baselines":
            return cmd_baselines(cfg, threads=args.threads)
        if args.command == "search":
            return cmd_search(cfg, threads=args.threads)
        return cmd_report(cfg)
    except (datasets.DataError, baselines.SingleClass, transformer.NonFiniteLoss, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
