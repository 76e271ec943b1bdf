"""Command line entry point: ``attn-tta <verb> --config FILE [--set key=value ...]``.

Verbs: train, search, adapt-eval, analyze-entropy, analyze-tail.
On failure the process exits nonzero and prints ``{"error": ..., "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .analysis import attention_tail_histogram, entropy_accuracy_curve
from .config import ConfigFileError, ExperimentConfig, load_config
from .data import make_stream, pooled_specs
from .engine import read_jsonl
from .vit import VisionTransformer

log = logging.getLogger("attn_tta")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _out(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_train(cfg: ExperimentConfig) -> dict:
    model, tlog = harness.train(cfg)
    d = _out(cfg)
    model.save(cfg.checkpoint_path)
    (d / "train_log.json").write_text(json.dumps(tlog.__dict__, indent=2))
    if tlog.diverged:
        raise RuntimeError(f"training diverged at epoch {tlog.stopped_epoch}; "
                           f"last good weights saved to {cfg.checkpoint_path}")
    return {"checkpoint": str(cfg.checkpoint_path), "heldout_accuracy": tlog.heldout_accuracy}


def cmd_search(cfg: ExperimentConfig) -> dict:
    model = VisionTransformer.load(cfg.checkpoint_path)
    _, test = harness.build_data(cfg)
    streams = harness.corruption_streams(cfg, test, "search")
    res = harness.hyperparameter_search(model, streams, harness.default_grid(cfg),
                                        cfg.carry_across_corruptions)
    (_out(cfg) / "search.json").write_text(res.to_json())
    return {"best_mca": res.best_mca, "baseline_mca": res.baseline_mca}


def _policy(cfg: ExperimentConfig):
    if cfg.policy_source == "config":
        return cfg.policy()
    if cfg.policy_source == "search":
        path = Path(cfg.out_dir) / "search.json"
        best = json.loads(path.read_text())["best"]
        key = "sgd" if cfg.optimizer == "sgd" else f"adam/{cfg.reset_optimizer_state}"
        if key not in best:
            raise ConfigFileError(f"search.json has no best policy for {key!r}")
        return harness.policy_from_dict(best[key])
    raise ConfigFileError("policy_source must be 'config' or 'search'")


def cmd_adapt_eval(cfg: ExperimentConfig) -> dict:
    model = VisionTransformer.load(cfg.checkpoint_path)
    _, test = harness.build_data(cfg)
    policy = _policy(cfg)
    report, records = harness.evaluate(
        model, policy, harness.corruption_streams(cfg, test, "eval"),
        harness.clean_stream(cfg, test, "eval"), cfg.carry_across_corruptions,
        seeds={"model": cfg.model_seed, "data": cfg.data_seed, "test": cfg.test_seed,
               "corruption": cfg.corruption_seed, "order": cfg.order_seed},
        severities=cfg.severities)
    harness.write_report(report, records, _out(cfg), cfg.episodes_path)
    print(harness.format_table(report))
    return {"mca": report.mca, "mca_baseline": report.mca_baseline, "valid": report.valid}


def cmd_analyze_entropy(cfg: ExperimentConfig) -> dict:
    records = read_jsonl(cfg.episodes_path)
    curve = entropy_accuracy_curve(records, cfg.entropy_bins, cfg.entropy_source)
    path = _out(cfg) / "entropy_bins.csv"
    curve.to_csv(path)
    return {"bins": curve.num_bins, "records": len(records), "csv": str(path)}


def cmd_analyze_tail(cfg: ExperimentConfig) -> dict:
    model = VisionTransformer.load(cfg.checkpoint_path)
    _, test = harness.build_data(cfg)
    if cfg.tail_corruption == "clean":
        stream = make_stream(test, None, "search", cfg.order_seed)
    else:
        stream = make_stream(test, pooled_specs(cfg.tail_corruption, cfg.severities,
                                                cfg.corruption_seed), "search", cfg.order_seed)
    hist = attention_tail_histogram(model, stream, cfg.tail_fraction, cfg.order_seed,
                                    cfg.tail_min_weight, cfg.tail_bins_per_decade, cfg.layer)
    path = _out(cfg) / "tail_hist.csv"
    hist.to_csv(path)
    return {"entries": hist.total, "samples": hist.num_samples, "csv": str(path)}


COMMANDS = {
    "train": cmd_train,
    "search": cmd_search,
    "adapt-eval": cmd_adapt_eval,
    "analyze-entropy": cmd_analyze_entropy,
    "analyze-tail": cmd_analyze_tail,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attn-tta", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", "-c", help="key = value config file")
    p.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except (ConfigFileError, ValueError, OSError) as exc:
        return _fail(EXIT_CONFIG, exc)
    try:
        summary = COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - reported as JSON on stderr
        log.debug("command failed", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
