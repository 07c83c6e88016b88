"""Dice evaluation, the annotation-budget ablation and the ``boxadapt`` CLI."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradsuite
from . import synthdata as sd
from .segnet import HEADS, CheckpointError, ConfigError, SegModel, build, load_checkpoint
from .trainer import (TrainConfig, TrainConfigError, copy_source_head_to_target, run_baseline,
                      train_stage1, train_stage2)

log = logging.getLogger(__name__)

THRESHOLD = 0.5
EVAL_CHUNK = 16


def dice(pred_mask, truth_mask) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(truth_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shapes {a.shape} and {b.shape} differ")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


@dataclass
class MetricsReport:
    run_id: str
    config: dict
    split: str
    head: str
    stage: str
    seed: int
    mean_dice: float
    per_sample: list = field(default_factory=list)  # [{"id": ..., "dice": ...}]
    pixel_accuracy: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def predict_split(model: SegModel, images: np.ndarray, head: str) -> np.ndarray:
    """Probability maps (N, H, W) computed in fixed-size chunks."""
    out = [model.predict(head, images[i:i + EVAL_CHUNK].astype(model.dtype, copy=False))
           for i in range(0, len(images), EVAL_CHUNK)]
    return np.concatenate(out)[:, 0] if out else np.zeros((0,) + images.shape[2:])


def evaluate(checkpoint, split: sd.Split, head: str = "target", split_name: str = "eval",
             run_id: str = "", config: dict | None = None, stage: str = "",
             out=None) -> MetricsReport:
    """Threshold the head's probabilities at 0.5 and score every sample.

    ``checkpoint`` is a path or an in-memory model; files are only read.
    """
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}, got {head!r}")
    if split.masks is None:
        raise ValueError(f"split {split_name!r} has no ground-truth masks")
    model = checkpoint if isinstance(checkpoint, SegModel) else load_checkpoint(checkpoint)
    if not stage:
        stage = model.state
    probs = predict_split(model, split.images, head)
    pred = probs >= THRESHOLD
    truth = split.masks.astype(bool)
    scores = [dice(p, t) for p, t in zip(pred, truth)]
    report = MetricsReport(
        run_id=run_id, config=config or {}, split=split_name, head=head, stage=stage,
        seed=int(model.seed), mean_dice=float(np.mean(scores)) if scores else 0.0,
        per_sample=[{"id": i, "dice": s} for i, s in zip(split.ids, scores)],
        pixel_accuracy=float((pred == truth).mean()) if scores else 0.0)
    if out is not None:
        report.write(out)
    return report


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationSpec:
    budgets: tuple = (0, 1, 3, 10)
    stages: tuple = (1, 2)
    repetitions: int = 1

    def validate(self, slices_per_patient: int | None = None) -> None:
        b = list(self.budgets)
        if not b or b != sorted(b) or len(set(b)) != len(b) or b[0] < 0:
            raise ValueError(f"budgets must be distinct, ascending and >= 0, got {b}")
        if not set(self.stages) <= {1, 2} or not self.stages:
            raise ValueError(f"stages must be a subset of (1, 2), got {self.stages}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def annotated(self, budget: int, slices_per_patient: int) -> int:
        """Slices actually boxed: a budget above the slice count boxes every slice."""
        return min(budget, slices_per_patient)


ABLATION_COLUMNS = ("budget", "annotated_slices", "stage", "seed", "dice")


def _slices_per_patient(manifest: sd.Manifest) -> int:
    counts: dict[str, int] = {}
    for r in manifest:
        if r["role"] in ("target-unlabeled", "target-weak"):
            counts[r["patient"]] = counts.get(r["patient"], 0) + 1
    if not counts:
        raise ValueError("manifest has no target training slices")
    return min(counts.values())


def ablate(spec: AblationSpec, config: TrainConfig, manifest: sd.Manifest, out=None) -> list[dict]:
    """Stage I and Stage II eval Dice of the target network per annotation budget.

    Budget 0 is the source-only model (its source head, the only one it
    trains) followed by box-free self-training.
    """
    spec.validate()
    n_slices = _slices_per_patient(manifest)
    source = sd.load_split(manifest, "source-labeled")
    ev = sd.load_split(manifest, "eval")
    rows = []
    for rep in range(spec.repetitions):
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": config.seed + rep})
        for budget in spec.budgets:
            k = spec.annotated(budget, n_slices)
            m = sd.select_annotated(manifest, k, seed=cfg.seed)
            unl = sd.load_split(m, "target-unlabeled")
            weak = sd.load_split(m, "target-weak")
            model = build(cfg.net, cfg.seed)
            if k == 0:
                model, _ = train_stage1(model, source, None, cfg, lambda_pu=0)
                s1_head = "source"
            else:
                model, _ = train_stage1(model, source, weak, cfg)
                s1_head = "target"
            scores = {1: evaluate(model, ev, s1_head).mean_dice}
            if 2 in spec.stages:
                if k == 0:
                    copy_source_head_to_target(model)
                    model, _ = train_stage2(model, unl, None, cfg)
                else:
                    model, _ = train_stage2(model, unl, weak, cfg)
                scores[2] = evaluate(model, ev, "target").mean_dice
            for stage in spec.stages:
                rows.append({"budget": budget, "annotated_slices": k, "stage": stage,
                             "seed": cfg.seed, "dice": scores[stage]})
                log.info("ablate budget=%d stage=%d dice=%.4f", budget, stage, scores[stage])
    if out is not None:
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({**r, "dice": f"{r['dice']:.6f}"})
    return rows


# ---------------------------------------------------------------------------
# command line


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON training config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--manifest", type=Path, help="dataset manifest.jsonl")

    p = _Parser(prog="boxadapt", description="Box-supervised domain adaptation on synthetic slices")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic benchmark")
    g.add_argument("--patients", type=int, default=20)
    g.add_argument("--slices", type=int, default=7)
    g.add_argument("--eval-patients", type=int, default=4)
    g.add_argument("--annotated", type=int, default=3, help="boxed slices per target patient")

    t = sub.add_parser("train", parents=[common], help="run Stage I or Stage II")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--checkpoint", type=Path, help="Stage I checkpoint (required for --stage 2)")

    b = sub.add_parser("baseline", parents=[common], help="train a baseline")
    b.add_argument("--kind", choices=("source-only", "self-train-no-box"), required=True)

    e = sub.add_parser("eval", parents=[common], help="Dice of a checkpoint on a split")
    e.add_argument("--checkpoint", type=Path, help="omit to score a freshly initialized model")
    e.add_argument("--head", choices=HEADS, default="target")
    e.add_argument("--split", choices=sd.ROLES, default="eval")

    a = sub.add_parser("ablate", parents=[common], help="annotation-budget ablation")
    a.add_argument("--budgets", default="0,1,3,10", help="comma-separated slices per patient")
    a.add_argument("--repetitions", type=int, default=1)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--instances", type=int, default=20)
    return p


def _load_config(args) -> TrainConfig:
    d = {}
    if args.config is not None:
        try:
            d = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise TrainConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise TrainConfigError(f"{args.config}: config must be a JSON object")
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _need(args, *names) -> None:
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


def _out_dir(args) -> Path:
    _need(args, "out")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _manifest(args) -> sd.Manifest:
    _need(args, "manifest")
    return sd.read_manifest(args.manifest)


def _write_run(out: Path, cfg: TrainConfig, runlog) -> None:
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    runlog.write_csv(out / "runlog.csv")


def _cmd_gen_data(args) -> int:
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    m = sd.generate_dataset(out, patients=args.patients, slices=args.slices,
                            eval_patients=args.eval_patients, seed=seed)
    m = sd.select_annotated(m, args.annotated, seed=seed)
    sd.write_manifest(m, out / "manifest.jsonl")
    print(f"wrote {len(m.records)} slices to {out / 'manifest.jsonl'}")
    return 0


def _cmd_train(args) -> int:
    if args.stage == 2:
        _need(args, "checkpoint")
    cfg = _load_config(args)
    m = _manifest(args)
    out = _out_dir(args)
    weak = sd.load_split(m, "target-weak")
    if args.stage == 1:
        model, runlog = train_stage1(build(cfg.net, cfg.seed), sd.load_split(m, "source-labeled"),
                                     weak, cfg, checkpoint=out / "stage1.ckpt")
    else:
        model = load_checkpoint(args.checkpoint, expected_config=cfg.net)
        model, runlog = train_stage2(model, sd.load_split(m, "target-unlabeled"), weak, cfg,
                                     checkpoint=out / "stage2.ckpt")
    _write_run(out, cfg, runlog)
    report = evaluate(model, sd.load_split(m, "eval"), "target", run_id=out.name,
                      config=cfg.to_dict(), stage=f"stage{args.stage}",
                      out=out / f"metrics_stage{args.stage}.json")
    print(f"stage {args.stage} eval dice {report.mean_dice:.4f}")
    return 0


def _cmd_baseline(args) -> int:
    cfg = _load_config(args)
    m = _manifest(args)
    out = _out_dir(args)
    model, runlog = run_baseline(args.kind, sd.load_split(m, "source-labeled"),
                                 sd.load_split(m, "target-unlabeled"),
                                 sd.load_split(m, "target-weak"), cfg, out_dir=out)
    _write_run(out, cfg, runlog)
    head = "source" if args.kind == "source-only" else "target"
    report = evaluate(model, sd.load_split(m, "eval"), head, run_id=out.name,
                      config=cfg.to_dict(), stage=args.kind, out=out / f"metrics_{args.kind}.json")
    print(f"{args.kind} eval dice {report.mean_dice:.4f}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    m = _manifest(args)
    split = sd.load_split(m, args.split, with_masks=True)
    if len(split) == 0:
        raise ValueError(f"split {args.split!r} is empty")
    if args.checkpoint is not None:
        model, stage = load_checkpoint(args.checkpoint), ""
    else:
        model, stage = build(cfg.net, cfg.seed), "untrained"
    out = None
    if args.out is not None:
        out = _out_dir(args) / "metrics.json"
    report = evaluate(model, split, args.head, split_name=args.split,
                      run_id=args.out.name if args.out else "", config=cfg.to_dict(),
                      stage=stage, out=out)
    print(f"mean dice {report.mean_dice:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    m = _manifest(args)
    out = _out_dir(args)
    try:
        budgets = tuple(int(x) for x in args.budgets.split(","))
    except ValueError:
        raise UsageError(f"--budgets must be comma-separated integers, got {args.budgets!r}")
    spec = AblationSpec(budgets=budgets, repetitions=args.repetitions)
    rows = ablate(spec, cfg, m, out=out / "ablation.csv")
    for r in rows:
        print(f"budget {r['budget']:>3} stage {r['stage']} seed {r['seed']} dice {r['dice']:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    return 0 if gradsuite.main(args.instances, 0 if args.seed is None else args.seed) else 2


COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "baseline": _cmd_baseline,
            "eval": _cmd_eval, "ablate": _cmd_ablate, "gradcheck": _cmd_gradcheck}

VALIDATION_ERRORS = (UsageError, ValueError, TypeError, KeyError, OSError, CheckpointError,
                     sd.RasterError, ConfigError)


def dispatch(argv=None) -> int:
    """Run one subcommand.  Exit 0 on success, 1 on bad input, 2 on a runtime failure."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        if isinstance(exc, FloatingPointError):
            print(f"boxadapt: runtime failure: {exc}", file=sys.stderr)
            return 2
        msg = str(exc).strip()
        print(f"boxadapt: error: {msg.splitlines()[0] if msg else type(exc).__name__}",
              file=sys.stderr)
        if isinstance(exc, UsageError) and "\n" in msg:
            print(msg.split("\n", 1)[1], file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"boxadapt: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    sys.exit(dispatch())
