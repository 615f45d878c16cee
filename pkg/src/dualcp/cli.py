"""Command-line surface: synth / prototypes / train / eval / verify.

Every run writes a manifest (resolved config, seed, git description) next
to its outputs so results can be reproduced bit-exactly. Hyperparameter
defaults: threshold 0.85, alpha 0.5, lr 0.1, 20 epochs, batch 128, weight
decay 2e-4, momentum 0.9.
"""
from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import errors, prototypes, protocol, store, synth, verify
from .calibrator import CalibratorArch, TrainConfig

BANK_FILE = "bank.dcpb"
MEMORY_FILE = "memory.dcm"
HISTORY_FILE = "history.json"
REPORT_FILE = "report.json"
TIMING_FILE = "timing.json"


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            check=False,
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _write_json(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_run_manifest(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(
        {"command": command, "config": config, "git": _git_describe()},
        out_dir / f"manifest_{command}.json",
    )


def _positive_int(kind: str):
    def parse(raw: str) -> int:
        value = int(raw)
        if value < 1:
            raise argparse.ArgumentTypeError(f"{kind} must be >= 1, got {value}")
        return value

    return parse


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=0.5, help="coarse-term weight in the loss")
    p.add_argument("--lr", type=float, default=0.1, help="initial learning rate")
    p.add_argument("--epochs", type=_positive_int("epochs"), default=20)
    p.add_argument("--batch", type=_positive_int("batch"), default=128)
    p.add_argument("--weight-decay", type=float, default=2e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--warm-start", action="store_true",
                   help="start each domain from the previous domain's weights")
    p.add_argument("--layers", type=_positive_int("layers"), default=2)
    p.add_argument("--hidden-mult", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualcp",
        description="Domain-incremental learning on embedding files with "
        "dual-level concept prototypes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate the synthetic benchmark")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=_positive_int("classes"), default=20)
    p_synth.add_argument("--domains", type=_positive_int("domains"), default=3)
    p_synth.add_argument("--dim", type=_positive_int("dim"), default=64)
    p_synth.add_argument("--per-class", type=_positive_int("per-class"), default=50)
    p_synth.add_argument("--test-per-class", type=_positive_int("test-per-class"), default=10)
    p_synth.add_argument("--domain-shift", type=float, default=0.5)
    p_synth.add_argument("--class-noise", type=float, default=0.08)
    p_synth.add_argument("--group-plan", default=None,
                         help="comma-separated group sizes, e.g. 3,2,2,1")
    p_synth.add_argument("--seed", type=int, default=0)

    p_proto = sub.add_parser("prototypes", help="build a prototype bank from guidance")
    p_proto.add_argument("--guidance", required=True)
    p_proto.add_argument("--out", required=True)
    p_proto.add_argument("--p", type=float, default=0.85, help="similarity threshold")
    p_proto.add_argument("--vanilla", action="store_true",
                         help="ungrouped bank (one singleton group per class)")

    p_train = sub.add_parser("train", help="run the incremental protocol")
    p_train.add_argument("--embeddings", required=True, help="training container")
    p_train.add_argument("--test", required=True, help="test container")
    p_train.add_argument("--bank", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=0)
    _add_train_flags(p_train)

    p_eval = sub.add_parser("eval", help="emit the evaluation report")
    p_eval.add_argument("--run", required=True, help="directory written by train")
    p_eval.add_argument("--test", required=True)
    p_eval.add_argument("--bank", required=True)
    p_eval.add_argument("--csv", action="store_true",
                        help="also dump per-row predictions")

    p_verify = sub.add_parser("verify", help="run the built-in check suites")
    p_verify.add_argument("--seed", type=int, default=0)

    return parser


def cmd_synth(args) -> int:
    plan = None
    if args.group_plan:
        try:
            plan = tuple(int(s) for s in args.group_plan.split(","))
        except ValueError:
            print(f"error: bad --group-plan {args.group_plan!r}", file=sys.stderr)
            return 2
    spec = synth.SynthSpec(
        num_classes=args.classes,
        num_domains=args.domains,
        dim=args.dim,
        per_class=args.per_class,
        test_per_class=args.test_per_class,
        group_plan=plan,
        domain_shift=args.domain_shift,
        class_noise=args.class_noise,
        seed=args.seed,
    )
    data = synth.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.save(data.train, out / "train.dcp")
    store.save(data.test, out / "test.dcp")
    store.save_guidance(data.guidance, out / "guidance.dcp")
    _write_run_manifest(out, "synth", {
        "classes": spec.num_classes, "domains": spec.num_domains, "dim": spec.dim,
        "per_class": spec.per_class, "test_per_class": spec.test_per_class,
        "group_plan": list(spec.group_plan), "domain_shift": spec.domain_shift,
        "class_noise": spec.class_noise, "intra_cosine": spec.intra_cosine,
        "seed": spec.seed,
    })
    print(f"wrote {out / 'train.dcp'} ({len(data.train)} rows), "
          f"{out / 'test.dcp'} ({len(data.test)} rows), {out / 'guidance.dcp'}")
    return 0


def cmd_prototypes(args) -> int:
    gm = store.load_guidance(args.guidance)
    if args.vanilla:
        bank = prototypes.build_vanilla_bank(gm)
    else:
        bank = prototypes.build_dual_bank(gm, args.p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prototypes.save_bank(bank, out / BANK_FILE)
    _write_run_manifest(out, "prototypes", {
        "guidance": str(args.guidance), "p": args.p, "vanilla": args.vanilla,
        "num_groups": bank.num_groups, "num_classes": bank.num_classes,
    })
    sizes = [len(g) for g in bank.grouping.groups]
    print(f"wrote {out / BANK_FILE}: {bank.num_classes} classes in "
          f"{bank.num_groups} groups (sizes {sizes})")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        alpha=args.alpha,
        lr0=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        weight_decay=args.weight_decay,
        momentum=args.momentum,
        seed=args.seed,
        warm_start=args.warm_start,
        arch=CalibratorArch(num_layers=args.layers, hidden_multiplier=args.hidden_mult),
    )


def _config_dict(cfg: TrainConfig) -> dict:
    return {
        "alpha": cfg.alpha, "lr0": cfg.lr0, "epochs": cfg.epochs,
        "batch_size": cfg.batch_size, "weight_decay": cfg.weight_decay,
        "momentum": cfg.momentum, "seed": cfg.seed, "warm_start": cfg.warm_start,
        "arch": {
            "num_layers": cfg.arch.num_layers,
            "hidden_multiplier": cfg.arch.hidden_multiplier,
            "activation": cfg.arch.activation,
        },
    }


def cmd_train(args) -> int:
    train_set = store.load(args.embeddings)
    test_set = store.load(args.test)
    bank = prototypes.load_bank(args.bank)
    cfg = _train_config(args)
    started = time.perf_counter()
    result = protocol.run_protocol(train_set, test_set, bank, cfg)
    elapsed = time.perf_counter() - started
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    protocol.save_memory(result.memory, out / MEMORY_FILE, meta=_config_dict(cfg))
    _write_json({
        "accuracy_matrix": _matrix_jsonable(result.accuracy),
        "epoch_losses": result.epoch_losses,
        "config": _config_dict(cfg),
    }, out / HISTORY_FILE)
    _write_run_manifest(out, "train", {
        "embeddings": str(args.embeddings), "test": str(args.test),
        "bank": str(args.bank), **_config_dict(cfg),
    })
    final = protocol.average_accuracy(result.accuracy)
    print(f"trained {train_set.num_domains} domains in {elapsed:.1f}s, "
          f"final average accuracy {final:.4f}")
    return 0


def _matrix_jsonable(matrix: protocol.AccuracyMatrix) -> list[list[float | None]]:
    out: list[list[float | None]] = []
    for i, row in enumerate(matrix.values):
        out.append([float(v) if j >= i else None for j, v in enumerate(row)])
    return out


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    test_set = store.load(args.test)
    bank = prototypes.load_bank(args.bank)
    memory, meta = protocol.load_memory(run_dir / MEMORY_FILE)
    history = json.loads((run_dir / HISTORY_FILE).read_text())
    matrix = protocol.AccuracyMatrix(np.array(
        [[np.nan if v is None else v for v in row]
         for row in history["accuracy_matrix"]]
    ))

    started = time.perf_counter()
    feats = test_set.features.astype(np.float64)
    predictions, identified = protocol.predict_batch(feats, memory, bank)
    id_acc = protocol.domain_id_accuracy(test_set, memory)
    elapsed = time.perf_counter() - started

    t = matrix.num_domains
    report = {
        "accuracy_matrix": _matrix_jsonable(matrix),
        "average_accuracy": protocol.average_accuracy(matrix),
        "forgetting": protocol.forgetting(matrix) if t >= 2 else None,
        "domain_id_accuracy": id_acc,
        "num_domains": t,
        "num_classes": bank.num_classes,
        "config": meta,
    }
    _write_json(report, run_dir / REPORT_FILE)
    # wall time kept out of the report so identical runs stay byte-identical
    _write_json({"eval_wall_time_seconds": elapsed}, run_dir / TIMING_FILE)
    if args.csv:
        with open(run_dir / "predictions.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["true_label", "predicted_label", "identified_domain"])
            for truth, pred, dom in zip(test_set.labels, predictions, identified):
                writer.writerow([int(truth), int(pred), int(dom)])
    print(f"wrote {run_dir / REPORT_FILE}: average accuracy "
          f"{report['average_accuracy']:.4f}, forgetting {report['forgetting']}, "
          f"eval took {elapsed:.2f}s")
    return 0


def cmd_verify(args) -> int:
    results = verify.run_all(args.seed)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.detail}")
        failed += 0 if r.passed else 1
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "prototypes": cmd_prototypes,
        "train": cmd_train,
        "eval": cmd_eval,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except errors.DualCPError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
