"""Command-line entry point: ``gtnp <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .baselines import BaselineConfig, train_baseline
from .config import ConfigError, config_hash, load_config, synth_config, train_config
from .data import DataError, DomainDataset, load_dataset, load_manifest, save_dataset, synth_generate
from .losses import NumericalAbort
from .metrics import compute_metrics, roc_auc, roc_report, write_roc_csv
from .model import GTNPModel, load_model
from .train import fit, init_state, predict_proba, prepare_domains, save_state
from .uncertainty import GlobalTrace, uncertainty_report, write_report

log = logging.getLogger("gtnp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _dump(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"]}


def _load_domains(cfg: dict) -> tuple[DomainDataset, DomainDataset]:
    data = cfg["data"]
    if "synth" in data:
        return synth_generate(synth_config(cfg))
    source = replace(load_dataset(data["source"]), domain="source")
    target = replace(load_dataset(data["target"]), domain="target")
    return source, target


def evaluate(model: GTNPModel, ds: DomainDataset) -> dict:
    """Metrics and one-vs-rest ROC of a model on a dataset."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if ds.shape != model.input_shape:
        raise DataError(f"dataset sample shape {ds.shape} does not match checkpoint input {model.input_shape}")
    probs = predict_proba(model, ds.X)
    out = compute_metrics(probs.argmax(axis=1), ds.labels, model.class_count).as_dict()
    out["roc"] = roc_report(roc_auc(probs, ds.labels))
    out["n"] = len(ds)
    return out


def _eval_split(ds: DomainDataset) -> DomainDataset:
    """The test-tagged part of a dataset, or all of it when nothing is tagged."""
    test = ds.test()
    return test if len(test) else ds


# ------------------------------------------------------------------- commands
def cmd_synth(cfg: dict, out: Path) -> dict:
    if "synth" not in cfg["data"]:
        raise ConfigError("synth needs a data.synth block")
    source, target = synth_generate(synth_config(cfg))
    stamp = _stamp(cfg)
    save_dataset(source, out / "source", stamp)
    save_dataset(target, out / "target", stamp)
    return {"source": str(out / "source"), "target": str(out / "target")}


def cmd_prepare(manifest: Path, out: Path) -> dict:
    datasets = load_manifest(manifest)
    written = {}
    for cond, ds in sorted(datasets.items()):
        written[cond] = str(save_dataset(ds, out / cond, {"manifest": str(manifest), "condition": cond}))
    return written


def cmd_pretrain_gcn(cfg: dict, out: Path) -> dict:
    tc = train_config(cfg)
    source, target = prepare_domains(*_load_domains(cfg), tc)
    state = init_state(tc, source, target)
    stamp = _stamp(cfg)
    save_state(out / "gcn_checkpoint.bin", state, stamp)
    _dump(out / "gcn_history.json", {**stamp, "selection": state.gcn_source, "history": state.gcn_history})
    return {"checkpoint": str(out / "gcn_checkpoint.bin"), "final": state.gcn_history[-1] if state.gcn_history else None}


def cmd_train(cfg: dict, out: Path) -> dict:
    tc = train_config(cfg)
    stamp = _stamp(cfg)
    source, target = prepare_domains(*_load_domains(cfg), tc)
    save_dataset(source, out / "data" / "source", stamp)
    save_dataset(target, out / "data" / "target", stamp)

    trace_path = out / "trace.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    state, trace = fit(tc, source, target, trace_path=trace_path)
    # first line of the step trace carries the run stamp
    body = trace_path.read_text(encoding="utf-8")
    trace_path.write_text(json.dumps(stamp, sort_keys=True) + "\n" + body, encoding="utf-8")
    save_state(out / "checkpoint.bin", state, stamp)
    _dump(out / "epochs.json", {**stamp, "epochs": trace["epochs"], "gcn": trace["gcn"], "gcn_selection": trace["gcn_source"]})

    metrics = {**stamp, "train_config": tc.to_dict(), "gtnp": {}, "baselines": {}}
    for name, ds in (("source_test", source.test()), ("target_test", target.test())):
        if len(ds):
            metrics["gtnp"][name] = evaluate(state.model, ds)
    if len(target.test()):
        probs = predict_proba(state.model, target.test().X)
        _write_roc_csvs(out / "roc", roc_auc(probs, target.test().labels), stamp)
    first, last = trace["epochs"][0], trace["epochs"][-1]
    metrics["convergence"] = {
        "kl_qp_epoch0": first["kl_qp_mean"],
        "kl_qp_final": last["kl_qp_mean"],
        "global_var_epoch0": first["global_latent"]["var_avg"],
        "global_var_final": last["global_latent"]["var_avg"],
        "global_mean_final": last["global_latent"]["mean_avg"],
    }
    for variant in cfg["baselines"]:
        _, rep = train_baseline(BaselineConfig.from_train_config(variant, tc), source, target)
        metrics["baselines"][variant] = {k: v for k, v in rep.items() if k != "history"}
    _dump(out / "metrics.json", metrics)

    test = target.test()
    if len(test):
        unc = cfg["uncertainty"]
        report, draws = uncertainty_report(
            state.model, test, unc["n_draws"], cfg["seed"], unc["select"], GlobalTrace.from_epochs(trace["epochs"])
        )
        write_report(out / "uncertainty", report, draws, stamp)
    return metrics


def _write_roc_csvs(directory: Path, curves, stamp: dict) -> None:
    for path in write_roc_csv(directory, curves, stem="target_roc"):
        body = path.read_text(encoding="utf-8")
        path.write_text(f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n" + body, encoding="utf-8")


def cmd_eval(checkpoint: Path, dataset: Path, out: Path) -> dict:
    model, _, meta = _load_checkpoint(checkpoint)
    ds = _eval_split(load_dataset(dataset))
    result = {"config_hash": meta.get("config_hash"), "seed": meta.get("seed"), "checkpoint": str(checkpoint), "dataset": str(dataset)}
    result["metrics"] = evaluate(model, ds)
    _dump(out / "eval_metrics.json", result)
    return result


def cmd_uncertainty(checkpoint: Path, dataset: Path, out: Path, n_draws: int, select, seed: int) -> dict:
    model, _, meta = _load_checkpoint(checkpoint)
    ds = _eval_split(load_dataset(dataset))
    if ds.shape != model.input_shape:
        raise DataError(f"dataset sample shape {ds.shape} does not match checkpoint input {model.input_shape}")
    report, draws = uncertainty_report(model, ds, n_draws, seed, select)
    write_report(out, report, draws, {"config_hash": meta.get("config_hash"), "seed": seed})
    return {"samples": len(report["samples"])}


def cmd_report(run: Path, out: Path) -> dict:
    """Collate a training run into report.json and a plot-ready per-epoch CSV."""
    try:
        metrics = json.loads((run / "metrics.json").read_text(encoding="utf-8"))
        epochs = json.loads((run / "epochs.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{run} does not look like a training run: {exc}") from exc
    stamp = {"config_hash": metrics.get("config_hash"), "seed": metrics.get("seed")}
    accuracy = {"gtnp": metrics["gtnp"].get("target_test", {}).get("accuracy")}
    for variant, rep in metrics.get("baselines", {}).items():
        accuracy[variant] = rep.get("target_test", {}).get("accuracy")
    summary = {**stamp, "target_accuracy": accuracy, "convergence": metrics.get("convergence")}
    _dump(out / "report.json", summary)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epochs.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "kl_qp_mean", "global_mean", "global_var", "tau", "target_test_acc"])
        for e in epochs["epochs"]:
            w.writerow([e["epoch"], repr(e["kl_qp_mean"]), repr(e["global_latent"]["mean_avg"]),
                        repr(e["global_latent"]["var_avg"]), repr(e["tau"]), repr(e.get("target_test_acc"))])
    return summary


def _load_checkpoint(path: Path):
    try:
        return load_model(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# ----------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtnp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")
        return p

    common(sub.add_parser("synth", help="generate synthetic source/target datasets"))
    p = sub.add_parser("prepare", help="window raw signals listed in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(sub.add_parser("pretrain-gcn", help="pretrain the GCN and freeze the reference graphs"))
    common(sub.add_parser("train", help="full run: GCN, GTNP, baselines, metrics, uncertainty"))
    for name, helptext in (("eval", "evaluate a checkpoint on a dataset"), ("uncertainty", "local uncertainty report")):
        p = common(sub.add_parser(name, help=helptext), config_required=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True, help="dataset directory (its test split is used when tagged)")
        if name == "uncertainty":
            p.add_argument("--n-draws", type=int, default=None)
            p.add_argument("--select", type=int, nargs="*", default=None, help="sample ids that get KDE blocks")
    p = sub.add_parser("report", help="collate a training run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "prepare":
            result = cmd_prepare(Path(args.manifest), Path(args.out))
        elif args.command == "report":
            result = cmd_report(Path(args.run), Path(args.out or args.run))
        elif args.command in ("eval", "uncertainty"):
            cfg = load_config(args.config, args.seed, args.out) if args.config else None
            out = Path(args.out) if args.out else Path(cfg["output_dir"]) if cfg else Path(".")
            if args.command == "eval":
                result = cmd_eval(Path(args.checkpoint), Path(args.dataset), out)
            else:
                unc = cfg["uncertainty"] if cfg else {"n_draws": 100, "select": []}
                n_draws = args.n_draws if args.n_draws is not None else unc["n_draws"]
                if n_draws < 1:
                    raise ConfigError("--n-draws must be at least 1")
                select = args.select if args.select is not None else unc["select"]
                seed = args.seed if args.seed is not None else cfg["seed"] if cfg else 0
                result = cmd_uncertainty(Path(args.checkpoint), Path(args.dataset), out, n_draws, select, seed)
        else:
            cfg = load_config(args.config, args.seed, args.out)
            out = Path(cfg["output_dir"])
            command = {"synth": cmd_synth, "pretrain-gcn": cmd_pretrain_gcn, "train": cmd_train}[args.command]
            result = command(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining validation failures (e.g. n_ref larger than the training set) are configuration problems
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "train":
        summary = {k: v.get("accuracy") for k, v in result["gtnp"].items()}
        summary.update({k: v.get("target_test", {}).get("accuracy") for k, v in result["baselines"].items()})
        print(json.dumps(summary, sort_keys=True))
    elif args.command == "eval":
        m = result["metrics"]
        print(json.dumps({"accuracy": m["accuracy"], "macro_f1": m["macro_f1"], "n": m["n"]}, sort_keys=True))
    else:
        print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
