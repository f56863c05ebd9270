"""Command-line frontend: reproducible train / eval / synth / gradcheck runs.

Every command takes an --out directory and leaves a run manifest there, on
success and on failure alike.  Exit codes: 0 on success, 1 for validation
errors, 2 for numerical failures (non-finite loss, gradient check over
tolerance).  Flag precedence: explicit flags > --config JSON > --profile >
built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import tempfile
import time

import numpy as np

from . import __version__
from . import data as datamod
from . import evaluation, plots, trainer
from .trainer import TrainConfig, load_checkpoint, save_checkpoint


def _atomic_write(path, payload) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(payload, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_manifest(out_dir, command, config, seed, inputs, outputs,
                    started, error=None) -> str:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "version": f"pairsupcon-{__version__}",
        "duration_seconds": round(time.time() - started, 6),
        "error": error,
    }
    path = os.path.join(out_dir, "manifest.json")
    _atomic_write(path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _load_config_overrides(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise ValueError("--config must hold a JSON object")
    return overrides


def _resolve_train_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.profile:
        config = config.with_profile(args.profile)
    if args.config:
        merged = config.to_dict()
        merged.update(_load_config_overrides(args.config))
        config = TrainConfig.from_dict(merged)
    flag_fields = {
        "tau": args.tau, "beta": args.beta, "batch_size": args.batch,
        "epochs": args.epochs, "seed": args.seed, "dim": args.d,
        "objective": args.objective,
    }
    updates = {k: v for k, v in flag_fields.items() if v is not None}
    if args.uniform_negatives:
        updates["hard_negatives"] = False
    if updates:
        config = TrainConfig.from_dict({**config.to_dict(), **updates})
    config.validate()
    return config


def _cmd_train(args) -> tuple[dict, dict, int]:
    config = _resolve_train_config(args)
    pairs, skipped = datamod.load_nli(args.data)
    print(f"loaded {len(pairs)} pairs from {args.data} ({skipped} neutral skipped)")
    print(f"config: {json.dumps(config.to_dict(), sort_keys=True)}")
    result = trainer.train(config, pairs)

    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(result.params, config, result.vocab, ckpt_path)
    vocab_path = os.path.join(args.out, "vocab.txt")
    result.vocab.save(vocab_path)

    trace_path = os.path.join(args.out, "trace.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "total", "cls-term", "id-term"])
        for row in result.trace:
            writer.writerow([row.step, row.epoch, repr(row.total),
                             repr(row.classification), repr(row.instance)])
    plot_path = os.path.join(args.out, "trace.png")
    plots.save_trace_plot(result.trace, plot_path)

    final = result.trace[-1]
    print(f"finished {len(result.trace)} steps; final total loss {final.total:.6f}")
    outputs = {"checkpoint": ckpt_path, "trace": trace_path,
               "trace_plot": plot_path, "vocab": vocab_path}
    return config.to_dict(), outputs, 0


def _embedding_inputs(args):
    params, config, vocab = load_checkpoint(args.checkpoint)
    records = datamod.load_labeled(args.data)
    x, y = evaluation.embed_labeled(records, vocab, params)
    return params, config, vocab, x, y


def _finish_report(args, report) -> tuple[dict, int]:
    report_path = os.path.join(args.out, "report.json")
    _atomic_write(report_path, report.to_json() + "\n")
    plot_path = os.path.join(args.out, "report.png")
    plots.save_report_plot(report, plot_path)
    print(report.to_json())
    return {"report": report_path, "report_plot": plot_path}, 0


def _cmd_eval_cluster(args) -> tuple[dict, dict, int]:
    _, _, _, x, y = _embedding_inputs(args)
    k = args.k
    if k is None:
        k = int(np.unique(y).size)
        print(f"--k not given; using {k} distinct labels")
    report = evaluation.clustering_eval(x, y, k, n_runs=args.runs,
                                        base_seed=args.seed)
    outputs, code = _finish_report(args, report)
    resolved = {"k": k, "runs": args.runs, "seed": args.seed,
                "checkpoint": args.checkpoint}
    return resolved, outputs, code


def _cmd_eval_sts(args) -> tuple[dict, dict, int]:
    params, _, vocab = load_checkpoint(args.checkpoint)
    scored = datamod.load_scored(args.data)
    report = evaluation.sts_eval(params, vocab, scored)
    outputs, code = _finish_report(args, report)
    return {"pairs": len(scored), "checkpoint": args.checkpoint}, outputs, code


def _cmd_eval_fewshot(args) -> tuple[dict, dict, int]:
    _, _, _, x, y = _embedding_inputs(args)
    report = evaluation.fewshot_probe(x, y, shots=args.shots, sets=args.sets,
                                      seed=args.seed)
    outputs, code = _finish_report(args, report)
    resolved = {"shots": args.shots, "sets": args.sets, "seed": args.seed,
                "checkpoint": args.checkpoint}
    return resolved, outputs, code


def _cmd_synth(args) -> tuple[dict, dict, int]:
    pairs, heldout = datamod.synth_generate(
        args.classes, args.per_class, args.cross_rate, args.seed,
        overlap=args.overlap, heldout_per_class=args.heldout_per_class)
    pairs_path = os.path.join(args.out, "pairs.jsonl")
    labeled_path = os.path.join(args.out, "labeled.jsonl")
    datamod.save_nli(pairs, pairs_path)
    datamod.save_labeled(heldout, labeled_path)
    cross = datamod.synth_cross_fraction(pairs)
    print(f"wrote {len(pairs)} pairs and {len(heldout)} labeled texts "
          f"(empirical cross-topic fraction {cross:.4f})")
    resolved = {"classes": args.classes, "per_class": args.per_class,
                "cross_rate": args.cross_rate, "overlap": args.overlap,
                "heldout_per_class": args.heldout_per_class,
                "empirical_cross_fraction": cross}
    return resolved, {"pairs": pairs_path, "labeled": labeled_path}, 0


def _cmd_gradcheck(args) -> tuple[dict, dict, int]:
    results = trainer.loss_gradient_suite(trials=args.trials, seed=args.seed)
    worst = 0.0
    for trial in results:
        status = "pass" if trial.max_rel_err <= args.tolerance else "FAIL"
        print(f"trial {trial.trial:2d} (M={trial.m}, d={trial.dim}, "
              f"tau={trial.tau}): max rel err {trial.max_rel_err:.3e} [{status}]")
        worst = max(worst, trial.max_rel_err)
    passed = worst <= args.tolerance
    print(f"gradient suite: {'pass' if passed else 'FAIL'} "
          f"(worst {worst:.3e}, tolerance {args.tolerance:.1e})")
    report = {"trials": args.trials, "tolerance": args.tolerance,
              "max_rel_err": worst, "passed": passed}
    report_path = os.path.join(args.out, "gradcheck.json")
    _atomic_write(report_path, json.dumps(report, sort_keys=True) + "\n")
    resolved = {"trials": args.trials, "tolerance": args.tolerance,
                "seed": args.seed}
    return resolved, {"report": report_path}, 0 if passed else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairsupcon",
        description="pair-supervised contrastive embeddings: train and evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    train_p = sub.add_parser("train", help="train on a pair corpus")
    train_p.add_argument("--data", required=True, help="pair corpus (JSONL)")
    train_p.add_argument("--out", required=True)
    train_p.add_argument("--tau", type=float)
    train_p.add_argument("--beta", type=float)
    train_p.add_argument("--batch", type=int)
    train_p.add_argument("--epochs", type=int)
    train_p.add_argument("--seed", type=int)
    train_p.add_argument("--d", type=int, help="representation width")
    train_p.add_argument("--profile", choices=sorted(trainer.PROFILES),
                         help="preset batch size / learning rates / epochs")
    train_p.add_argument("--objective", choices=trainer.OBJECTIVES)
    train_p.add_argument("--uniform-negatives", action="store_true",
                         help="disable importance weighting of negatives")
    train_p.add_argument("--config", help="JSON file of config overrides")
    train_p.set_defaults(func=_cmd_train)

    cluster_p = sub.add_parser("eval-cluster", help="k-means clustering accuracy")
    cluster_p.add_argument("--checkpoint", required=True)
    cluster_p.add_argument("--data", required=True, help="labeled corpus (JSONL)")
    cluster_p.add_argument("--out", required=True)
    cluster_p.add_argument("--k", type=int, help="clusters (default: #labels)")
    cluster_p.add_argument("--runs", type=int, default=10)
    cluster_p.add_argument("--seed", type=int, default=0)
    cluster_p.set_defaults(func=_cmd_eval_cluster)

    sts_p = sub.add_parser("eval-sts", help="scored-pair rank correlation")
    sts_p.add_argument("--checkpoint", required=True)
    sts_p.add_argument("--data", required=True, help="scored pairs (TSV)")
    sts_p.add_argument("--out", required=True)
    sts_p.set_defaults(func=_cmd_eval_sts)

    fewshot_p = sub.add_parser("eval-fewshot", help="few-shot probe accuracy")
    fewshot_p.add_argument("--checkpoint", required=True)
    fewshot_p.add_argument("--data", required=True, help="labeled corpus (JSONL)")
    fewshot_p.add_argument("--out", required=True)
    fewshot_p.add_argument("--shots", type=int, default=16)
    fewshot_p.add_argument("--sets", type=int, default=5)
    fewshot_p.add_argument("--seed", type=int, default=0)
    fewshot_p.set_defaults(func=_cmd_eval_fewshot)

    synth_p = sub.add_parser("synth", help="generate a synthetic topic corpus")
    synth_p.add_argument("--classes", type=int, required=True)
    synth_p.add_argument("--per-class", type=int, required=True)
    synth_p.add_argument("--cross-rate", type=float, required=True)
    synth_p.add_argument("--seed", type=int, default=0)
    synth_p.add_argument("--out", required=True)
    synth_p.add_argument("--overlap", type=float, default=0.0,
                         help="vocabulary overlap of the first two topics")
    synth_p.add_argument("--heldout-per-class", type=int, default=64)
    synth_p.set_defaults(func=_cmd_synth)

    grad_p = sub.add_parser("gradcheck", help="finite-difference loss check")
    grad_p.add_argument("--trials", type=int, default=20)
    grad_p.add_argument("--tolerance", type=float, default=1e-4)
    grad_p.add_argument("--seed", type=int, default=0)
    grad_p.add_argument("--out", required=True)
    grad_p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    started = time.time()
    seed = getattr(args, "seed", None)
    inputs = {key: getattr(args, key) for key in ("data", "checkpoint", "config")
              if getattr(args, key, None)}
    try:
        resolved, outputs, code = args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}")
        _write_manifest(args.out, args.command, None, seed, inputs, {},
                        started, error=str(exc))
        return 1
    except (FloatingPointError, AssertionError) as exc:
        print(f"numerical failure: {exc}")
        _write_manifest(args.out, args.command, None, seed, inputs, {},
                        started, error=str(exc))
        return 2
    outputs["manifest"] = os.path.join(args.out, "manifest.json")
    _write_manifest(args.out, args.command, resolved, seed, inputs, outputs,
                    started)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
