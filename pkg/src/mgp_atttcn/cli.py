"""Command-line entry points tying the pipeline together.

Commands: generate, train, evaluate, explain, baselines. Every command
takes `--config PATH` (INI, see config.py) plus optional `--seed`,
`--threads` and `--out` overrides. Report paths write both the delimited
data files and a rendered PNG next to them.

Exit codes: 0 ok, 1 usage/config, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import baselines, data, eval_metrics, mgp, plots, training
from .config import RunConfig, load_run_config, require_dir, require_file
from .errors import ConfigError, DataError, InputError, MgpAttTcnError, NumericalError
from .model import ATTENTION_ABLATIONS, MgpAttTcn, load_checkpoint, save_checkpoint
from .seeds import derive


def _write_jsonl_rows(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# ----------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    g = cfg.section("generate")
    seed = cfg.seed
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    true_params = data.default_generator_params(g["m_vitals"], g["m_labs"], g["lengthscales"])
    series, truth = data.generate_synthetic(
        g["n_patients"],
        g["m_vitals"],
        g["m_labs"],
        true_params=true_params,
        label_effect=g["label_effect"],
        seed=derive(seed, "generate"),
        case_fraction=g["case_fraction"],
        span_hours=(g["span_min_hours"], g["span_max_hours"]),
        vitals_per_hour=g["vitals_per_hour"],
        labs_per_hour=g["labs_per_hour"],
        drift_window=g["drift_window_hours"],
        admission_units=g["admission_units"],
    )
    cases = [s for s in series if s.label == 1]
    controls = [s for s in series if s.label == 0]
    if not cases or not controls:
        raise DataError("generator produced a single class; adjust case_fraction")
    matched = data.match_controls(
        cases, controls, derive(seed, "match"), g["min_observations"], g["max_observations"]
    )
    cases = [data.truncate_to_recent(c, g["max_observations"]) for c in cases]
    horizons = range(g["max_horizon"] + 1)
    augmented = [
        copy
        for s in cases + matched
        for copy in data.horizon_augment(s, horizons, g["min_observations"])
    ]
    splits = data.split_normalize(augmented, (0.8, 0.1, 0.1), derive(seed, "split"))
    stats = data.dataset_statistics(splits.all_series())
    data.save_dataset(
        out_dir,
        splits,
        data.feature_names(g["m_vitals"], g["m_labs"]),
        data.static_names(g["admission_units"]),
        truth,
        stats,
    )
    plots.save_horizon_counts(stats, out_dir / "stats.png")
    print(f"wrote dataset to {out_dir}")
    for row in stats:
        print(
            f"  horizon {row['horizon']}: {row['n_series']} records "
            f"({row['n_cases']} cases), {row['obs_mean']:.1f} +- {row['obs_std']:.1f} obs"
        )
    return 0


# ----------------------------------------------------------------------


def _train_config_from(cfg: RunConfig) -> training.TrainConfig:
    t = cfg.section("train")
    return training.TrainConfig(
        s_count=t["s_count"],
        batch_size=t["batch_size"],
        max_epochs=t["max_epochs"],
        learning_rate=t["learning_rate"],
        seed=cfg.seed,
        ablation=t["ablation"],
        kernel_size=t["kernel_size"],
        n_blocks=t["n_blocks"],
        hidden_channels=t["hidden_channels"],
        dropout=t["dropout"],
        l2=t["l2"],
        patience=t["patience"],
        n_grid=t["n_grid"],
        init_lengthscales=t["init_lengthscales"],
        init_noise=t["init_noise"],
        mc_seed_mode=t["mc_seed_mode"],
        freeze_mgp=t["freeze_mgp"],
        eval_s_count=t["eval_s_count"],
    )


def write_train_outputs(out_dir: Path, result: training.TrainResult, config: training.TrainConfig):
    extra = {f"last.{k}": v for k, v in result.model.state_arrays().items()}
    extra.update(result.optimizer_arrays or {})
    meta = {
        "epoch": result.epochs_run,
        "best_epoch": result.best_epoch,
        "best_val_auroc": result.best_val_auroc,
        "train_config": config.to_dict(),
    }
    # live tensors hold the best-validation weights; last.* and opt.* allow resuming
    result.model.load_state_arrays(result.best_arrays)
    save_checkpoint(out_dir / "checkpoint.mgpatt", result.model, meta, extra)
    _write_csv(
        out_dir / "history.csv",
        ["epoch", "train_loss", "val_auroc", "val_aupr"],
        [[h["epoch"], repr(h["train_loss"]), repr(h["val_auroc"]), repr(h["val_aupr"])] for h in result.history],
    )
    if result.history:
        plots.save_training_history(result.history, out_dir / "history.png")


def cmd_train(cfg: RunConfig) -> int:
    t = cfg.section("train")
    splits, _ = data.load_dataset(require_dir(t["data_dir"], "data"))
    config = _train_config_from(cfg)
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    if t["search_trials"] > 0:
        results = training.random_search(
            splits, config, training.SearchSpace(), t["search_trials"], derive(cfg.seed, "search")
        )
        _write_csv(
            out_dir / "search.csv",
            ["rank", "trial", "val_auroc", "val_aupr", "best_epoch", "settings"],
            [
                [rank, r.index, repr(r.val_auroc), repr(r.val_aupr), r.best_epoch, json.dumps(r.settings)]
                for rank, r in enumerate(results)
            ],
        )
        config = replace(config, **results[0].settings)
        print(f"search done: best trial {results[0].index} val AUROC {results[0].val_auroc:.3f}")

    start_state = None
    if t["resume"]:
        _, meta, extra = load_checkpoint(require_file(t["resume"], "checkpoint"))
        arrays = {k[len("last.") :]: v for k, v in extra.items() if k.startswith("last.")}
        arrays.update({k: v for k, v in extra.items() if k.startswith("opt.")})
        start_state = {"arrays": arrays, "epoch": int(meta.get("epoch", 0))}
        print(f"resuming from {t['resume']} at epoch {start_state['epoch']}")

    result = training.train(splits, config, start_state)
    write_train_outputs(out_dir, result, config)
    last = result.history[-1] if result.history else {"val_auroc": float("nan")}
    print(
        f"trained {result.epochs_run} epochs; best val AUROC {result.best_val_auroc:.3f} "
        f"at epoch {result.best_epoch}; final val AUROC {last['val_auroc']:.3f}"
    )
    print(f"checkpoint: {out_dir / 'checkpoint.mgpatt'}")
    return 0


# ----------------------------------------------------------------------


def _load_model_and_split(section: dict):
    splits, sidecar = data.load_dataset(require_dir(section["data_dir"], "data"))
    model, meta, _ = load_checkpoint(require_file(section["checkpoint"], "checkpoint"))
    if model.config.m_dynamic != splits.m_features:
        raise DataError(
            f"checkpoint expects {model.config.m_dynamic} dynamic features, dataset has {splits.m_features}"
        )
    return splits, sidecar, model, meta


def cmd_evaluate(cfg: RunConfig) -> int:
    e = cfg.section("evaluate")
    if e["split"] not in ("train", "validation", "test"):
        raise ConfigError(f"unknown split {e['split']!r}")
    splits, _, model, _ = _load_model_and_split(e)
    series = getattr(splits, e["split"])
    if not series:
        raise DataError(f"split {e['split']} is empty")
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    probs = training.evaluate_scores(
        model, series, e["s_count"], derive(cfg.seed, "evaluate"), threads=cfg.threads
    )
    labels = np.array([s.label for s in series])
    horizons = np.array([s.horizon for s in series])
    _write_csv(
        out_dir / "scores.csv",
        ["patient_id", "horizon", "label", "p_case"],
        [[s.patient_id, s.horizon, s.label, repr(float(p))] for s, p in zip(series, probs)],
    )
    rows = eval_metrics.metric_report(probs, labels, horizons, e["bootstrap_n"], derive(cfg.seed, "bootstrap"))
    _write_jsonl_rows(out_dir / "metrics.jsonl", rows)
    plots.save_metrics_by_horizon({"mgp-atttcn": rows}, out_dir / "metrics.png")
    for row in rows:
        auc = row["auroc"]
        shown = f"{auc['mean']:.3f} +- {auc['std']:.3f}" if auc else "n/a"
        print(f"horizon {row['horizon']}: AUROC {shown} ({row['n_cases']}/{row['n_controls']} cases/controls)")
    return 0


# ----------------------------------------------------------------------


def cmd_explain(cfg: RunConfig) -> int:
    x = cfg.section("explain")
    splits, sidecar, model, _ = _load_model_and_split(x)
    if model.config.ablation not in ATTENTION_ABLATIONS:
        raise DataError(f"ablation {model.config.ablation!r} has no attention trace to export")
    wanted = (x["patient_id"], x["horizon"])
    series = next(
        (s for s in splits.all_series() if (s.patient_id, s.horizon) == wanted), None
    )
    if series is None:
        raise DataError(f"patient {wanted[0]!r} with horizon {wanted[1]} not found in the dataset")
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    with torch.no_grad():
        post = mgp.posterior(series, model.mgp_params, model.config.n_grid)
        out = model.forward_batch(
            [series], x["s_count"], [derive(cfg.seed, "explain", series.patient_id, series.horizon)],
            want_traces=True,
        )
    trace = out.traces[0]
    n, m = model.config.n_grid, model.config.m_dynamic
    mean = post.mean.numpy().reshape(n, m)
    std = np.sqrt(np.clip(np.diagonal(post.cov.numpy()), 0.0, None)).reshape(n, m)
    grid_times = np.arange(-(n - 1), 1, dtype=float)

    # faithfulness: the exported contributions alone must reproduce the probabilities
    score = trace.contributions.sum(axis=(0, 1))
    recomputed = np.exp(score - score.max())
    recomputed /= recomputed.sum()
    if np.max(np.abs(recomputed - trace.probabilities)) > 1e-10:
        raise NumericalError("exported contributions do not reproduce the prediction")

    feature_ids = sorted(int(k) for k in sidecar["feature_names"])
    names = [sidecar["feature_names"][str(k)] for k in feature_ids]
    channel_names = names + list(sidecar["static_names"])

    rows = []
    for j in range(n):
        rows.append(
            {
                "format_version": 1,
                "row": j,
                "time": float(grid_times[j]),
                "masked": bool(post.mask[j]),
                "alpha": trace.alpha[j].tolist(),
                "beta": trace.beta[j].tolist(),
                "contributions": trace.contributions[j].tolist(),
                "posterior_mean": mean[j].tolist(),
                "posterior_std": std[j].tolist(),
            }
        )
    _write_jsonl_rows(out_dir / "trace.jsonl", rows)
    with open(out_dir / "explain_summary.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "format_version": 1,
                "patient_id": series.patient_id,
                "horizon": series.horizon,
                "label": series.label,
                "probabilities": trace.probabilities.tolist(),
                "p_case": float(trace.probabilities[1]),
                "lengthscales": model.mgp_params.lengthscales.detach().numpy().tolist(),
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    _write_csv(
        out_dir / "observations.csv",
        ["t", "f", "v"],
        [[repr(float(t)), int(k), repr(float(v))] for t, k, v in zip(series.times, series.features, series.values)],
    )
    with torch.no_grad():
        covs = [np.asarray(torch_cov) for torch_cov in _cluster_covariances(model)]
    for idx, cov in enumerate(covs):
        _write_csv(out_dir / f"covariance_cluster{idx}.csv", names, [[repr(float(v)) for v in row] for row in cov])
    plots.save_feature_covariances(
        covs, model.mgp_params.lengthscales.detach().numpy().tolist(), names, out_dir / "covariance.png"
    )
    plots.save_patient_journey(
        {
            "grid_times": grid_times,
            "posterior_mean": mean,
            "posterior_std": std,
            "alpha": trace.alpha,
            "contributions": trace.contributions,
            "mask": post.mask,
            "feature_names": channel_names,
            "obs_times": series.times,
            "obs_features": series.features,
            "obs_values": series.values,
        },
        out_dir / "journey.png",
    )
    print(
        f"patient {series.patient_id} horizon {series.horizon}: "
        f"p(case) = {trace.probabilities[1]:.3f} (label {series.label})"
    )
    print(f"trace and figures in {out_dir}")
    return 0


def _cluster_covariances(model: MgpAttTcn):
    from . import kernels

    return [kernels.feature_cov(factor).detach().numpy() for _, factor in model.mgp_params.clusters]


# ----------------------------------------------------------------------


def _hourly_features(series_list, n_hours, m):
    mats = [baselines.hourly_impute(s, n_hours, m) for s in series_list]
    x = np.stack([mat.values.reshape(-1) for mat in mats])
    return x, mats


def cmd_baselines(cfg: RunConfig) -> int:
    b = cfg.section("baselines")
    splits, sidecar = data.load_dataset(require_dir(b["data_dir"], "data"))
    m = splits.m_features
    n_hours = b["n_hours"]
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    results = {}
    all_rows = []

    if "logreg" in b["models"]:
        balanced = data.oversample_minority(splits.train, derive(seed, "bl-logreg-balance"))
        x_train, _ = _hourly_features(balanced, n_hours, m)
        y_train = np.array([s.label for s in balanced])
        clf = baselines.ridge_logreg_fit(x_train, y_train, b["l2"])
        x_test, _ = _hourly_features(splits.test, n_hours, m)
        probs = clf.predict_proba(x_test)
        labels = np.array([s.label for s in splits.test])
        horizons = np.array([s.horizon for s in splits.test])
        rows = eval_metrics.metric_report(probs, labels, horizons, b["bootstrap_n"], derive(seed, "bl-logreg"))
        results["logreg-hourly"] = rows
        all_rows += [{"model": "logreg-hourly", **row} for row in rows]

    if "insight" in b["models"]:
        required = list(b["insight_required"]) or list(range(m))
        kept_train = [s for s in splits.train if baselines.insight_filter(s, required)]
        kept_test = [s for s in splits.test if baselines.insight_filter(s, required)]
        counts = []
        for h in eval_metrics.HORIZONS:
            total = [s for s in splits.test if s.horizon == h]
            kept = [s for s in kept_test if s.horizon == h]
            counts.append([h, len(total), len(kept), sum(s.label for s in kept)])
        _write_csv(out_dir / "insight_counts.csv", ["horizon", "n_total", "n_kept", "n_kept_cases"], counts)
        if not kept_train or not kept_test:
            raise DataError("InSight filter removed every patient; relax insight_required")
        balanced = data.oversample_minority(kept_train, derive(seed, "bl-insight-balance"))
        train_mats = [baselines.hourly_impute(s, n_hours, m) for s in balanced]
        thresholds = baselines.fit_insight_thresholds(train_mats)
        x_train = np.stack([baselines.insight_vector(mat, thresholds).vector for mat in train_mats])
        y_train = np.array([s.label for s in balanced])
        clf = baselines.ridge_logreg_fit(x_train, y_train, b["l2"])
        test_mats = [baselines.hourly_impute(s, n_hours, m) for s in kept_test]
        x_test = np.stack([baselines.insight_vector(mat, thresholds).vector for mat in test_mats])
        probs = clf.predict_proba(x_test)
        labels = np.array([s.label for s in kept_test])
        horizons = np.array([s.horizon for s in kept_test])
        rows = eval_metrics.metric_report(probs, labels, horizons, b["bootstrap_n"], derive(seed, "bl-insight"))
        results["insight"] = rows
        all_rows += [{"model": "insight", **row} for row in rows]
        if b["export_features"]:
            header = ["patient_id", "horizon", "label"] + baselines.insight_feature_names(n_hours, m)
            _write_csv(
                out_dir / "insight_features_test.csv",
                header,
                [
                    [s.patient_id, s.horizon, s.label] + [repr(float(v)) for v in x]
                    for s, x in zip(kept_test, x_test)
                ],
            )

    if not results:
        raise ConfigError("no baseline selected; models must include logreg and/or insight")
    _write_jsonl_rows(out_dir / "baseline_metrics.jsonl", all_rows)
    plots.save_metrics_by_horizon(results, out_dir / "baseline_metrics.png", title="Baselines by horizon")
    for name, rows in results.items():
        for row in rows:
            auc = row["auroc"]
            shown = f"{auc['mean']:.3f} +- {auc['std']:.3f}" if auc else "n/a"
            print(f"{name}: horizon {row['horizon']} AUROC {shown}")
    return 0


# ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems -> exit code 1, not argparse's 2
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgp-atttcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None, help="override [common] seed")
        p.add_argument("--threads", type=int, default=None, help="override [common] threads")
        p.add_argument("--out", default=None, help="override [common] out_dir")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "baselines": cmd_baselines,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {"seed": args.seed, "threads": args.threads, "out_dir": args.out}
        cfg = load_run_config(args.config, overrides)
        torch.set_num_threads(max(1, cfg.threads))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except MgpAttTcnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
