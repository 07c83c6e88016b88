"""Adam, the step-decay schedule and the two-stage training protocol."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import grid as G
from .losses import PULossConfig, stage1_loss, stage2_loss
from .segnet import NetConfig, SegModel, StateError, build, save_checkpoint
from .synthdata import Split

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = ("iteration", "stage", "loss_total", "loss_seg", "loss_pu",
                  "loss_self_da", "loss_self_box", "lr", "seconds")


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.5, 0.999)
    adam_eps: float = 1e-8
    batch: int = 4
    iters_stage1: int = 2000
    iters_stage2: int = 2000
    lr_decay: float = 0.9
    decay_interval: int | None = None
    alpha: float = 0.5
    tau: float = 0.5
    lambda_seg: float = 1.0
    lambda_pu: float = 1.0
    pu_normalization: str = "per-set-mean"
    pu_clip_mode: str = "plain-max"
    net: NetConfig = field(default_factory=NetConfig)
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise TrainConfigError(f"lr must be > 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise TrainConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.batch < 1:
            raise TrainConfigError(f"batch must be >= 1, got {self.batch}")
        if self.iters_stage1 < 0 or self.iters_stage2 < 0:
            raise TrainConfigError("iteration counts must be >= 0")
        if self.decay_interval is not None and self.decay_interval < 1:
            raise TrainConfigError("decay_interval must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise TrainConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        self.pu_config  # validates the enumerations
        self.net.validate()

    @property
    def pu_config(self) -> PULossConfig:
        try:
            return PULossConfig(self.pu_normalization, self.pu_clip_mode)
        except ValueError as exc:
            raise TrainConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "net" in d:
            try:
                d["net"] = NetConfig.from_dict(d["net"])
            except (ValueError, TypeError) as exc:
                raise TrainConfigError(f"net: {exc}") from None
        try:
            return cls(**d)
        except TypeError as exc:
            raise TrainConfigError(str(exc)) from None


def lr_at(iteration: int, config: TrainConfig, iterations: int | None = None) -> float:
    """Base lr decayed by ``lr_decay`` every ``decay_interval`` iterations.

    Without an explicit interval the schedule decays ten times over
    ``iterations`` (default: the Stage I length).
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    interval = config.decay_interval
    if interval is None:
        n = config.iters_stage1 if iterations is None else iterations
        interval = max(n // 10, 1)
    return config.lr * config.lr_decay ** (iteration // interval)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, state: AdamState, lr: float, betas=(0.5, 0.999), eps: float = 1e-8,
              grads: dict | None = None, iteration: int | None = None) -> None:
    """One bias-corrected Adam update of ``params`` (name -> Node) in place.

    Gradients default to each node's ``grad``.  Pass only trainable
    parameters; anything not in ``params`` is untouched.
    """
    b1, b2 = betas
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if not np.isfinite(g).all():
            raise G.NonFiniteError(f"non-finite gradient for {name} at iteration {iteration}")
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


class RunLog:
    def __init__(self):
        self.rows: list[dict] = []

    def append(self, **row) -> None:
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"] \
                and row["stage"] == self.rows[-1]["stage"]:
            raise ValueError("RunLog iterations must increase")
        self.rows.append({c: row.get(c) for c in RUNLOG_COLUMNS})

    def extend(self, other: "RunLog") -> None:
        self.rows.extend(other.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RUNLOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: "" if v is None else (f"{v:.8g}" if isinstance(v, float) else v)
                            for k, v in r.items()})


def _value(node):
    return None if node is None else float(node.value)


def _sampler(seed: int, stage: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, stream])


def train_stage1(model: SegModel, source: Split, target_weak: Split | None, config: TrainConfig,
                 checkpoint: str | Path | None = None, lambda_pu: float | None = None,
                 iterations: int | None = None) -> tuple[SegModel, RunLog]:
    """Joint source CE + PU box training with a shared encoder.

    ``lambda_pu=0`` gives the source-only baseline; the target split is then
    never read.
    """
    if not model.shared:
        raise StateError("Stage I needs a model whose encoder is still shared")
    lam_pu = config.lambda_pu if lambda_pu is None else lambda_pu
    n_iter = config.iters_stage1 if iterations is None else iterations
    if len(source) == 0:
        raise ValueError("Stage I needs a non-empty source split")
    use_target = lam_pu != 0
    if use_target and (target_weak is None or len(target_weak) == 0):
        raise ValueError("Stage I needs a non-empty target-weak split when lambda_pu != 0")
    src_rng = _sampler(config.seed, 1, 0)
    tgt_rng = _sampler(config.seed, 1, 1)
    pu_cfg = config.pu_config
    state = AdamState()
    runlog = RunLog()
    params = model.trainable_parameters()
    if not use_target:
        params = model.head_parameters("source")
    dtype = model.dtype
    t0 = time.perf_counter()
    for it in range(n_iter):
        lr = lr_at(it, config, n_iter)
        si = src_rng.integers(0, len(source), size=config.batch)
        xs = source.images[si].astype(dtype, copy=False)
        src_pred = model.forward("source", xs)
        if use_target:
            ti = tgt_rng.integers(0, len(target_weak), size=config.batch)
            xt = target_weak.images[ti].astype(dtype, copy=False)
            t_gt = model.forward("target", xt)
            t_gs = model.predict("source", xt)
            boxes = target_weak.boxes[ti]
        else:
            t_gt = t_gs = boxes = None
        total, seg, pu = stage1_loss(src_pred, source.masks[si], t_gt, t_gs, boxes, pu_cfg,
                                     (config.lambda_seg, lam_pu))
        model.zero_grad()
        G.backward(total)
        adam_step(params, state, lr, config.betas, config.adam_eps, iteration=it)
        model.iteration += 1
        runlog.append(iteration=it, stage=1, loss_total=_value(total), loss_seg=_value(seg),
                      loss_pu=_value(pu), lr=lr, seconds=time.perf_counter() - t0)
        if it % 200 == 0:
            log.info("stage1 it=%d loss=%.4f", it, float(total.value))
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return model, runlog


def train_stage2(model: SegModel, target_unlabeled: Split | None, target_weak: Split | None,
                 config: TrainConfig, checkpoint: str | Path | None = None,
                 iterations: int | None = None) -> tuple[SegModel, RunLog]:
    """Self-training of the target head with mixed and box-refined pseudo labels.

    ``model`` is the Stage I result (shared encoder); it is unshared and its
    source side frozen here.  The lr schedule restarts.
    """
    if not model.shared:
        raise StateError("Stage II starts from a shared Stage I model")
    has_u = target_unlabeled is not None and len(target_unlabeled) > 0
    has_w = target_weak is not None and len(target_weak) > 0
    if not (has_u or has_w):
        raise ValueError("Stage II needs target-unlabeled or target-weak samples")
    n_iter = config.iters_stage2 if iterations is None else iterations
    model.unshare_and_freeze_source()
    params = model.trainable_parameters()
    u_rng = _sampler(config.seed, 2, 0)
    w_rng = _sampler(config.seed, 2, 1)
    state = AdamState()
    runlog = RunLog()
    dtype = model.dtype
    t0 = time.perf_counter()
    for it in range(n_iter):
        lr = lr_at(it, config, n_iter)
        xu = xw = bw = None
        if has_u:
            xu = target_unlabeled.images[u_rng.integers(0, len(target_unlabeled), config.batch)]
            xu = xu.astype(dtype, copy=False)
        if has_w:
            wi = w_rng.integers(0, len(target_weak), config.batch)
            xw = target_weak.images[wi].astype(dtype, copy=False)
            bw = target_weak.boxes[wi]
        total, da, sb = stage2_loss(model, xu, xw, bw, config.alpha, config.tau)
        model.zero_grad()
        G.backward(total)
        adam_step(params, state, lr, config.betas, config.adam_eps, iteration=it)
        model.iteration += 1
        runlog.append(iteration=it, stage=2, loss_total=_value(total), loss_self_da=_value(da),
                      loss_self_box=_value(sb), lr=lr, seconds=time.perf_counter() - t0)
        if it % 200 == 0:
            log.info("stage2 it=%d loss=%.4f", it, float(total.value))
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return model, runlog


def copy_source_head_to_target(model: SegModel) -> None:
    """Start the target head from the source head (used when it was never trained)."""
    for k, v in model.heads["source"].items():
        model.heads["target"][k].value[...] = v.value


def run_baseline(kind: str, source: Split, target_unlabeled: Split | None,
                 target_weak: Split | None, config: TrainConfig,
                 out_dir: str | Path | None = None) -> tuple[SegModel, RunLog]:
    """``source-only`` or ``self-train-no-box``.

    Source-only is Stage I with a zero PU weight.  The box-free variant then
    self-trains with every target training slice treated as unlabelled.
    """
    if kind not in ("source-only", "self-train-no-box"):
        raise ValueError(f"unknown baseline {kind!r}")
    out = Path(out_dir) if out_dir is not None else None
    model = build(config.net, config.seed)
    model, runlog = train_stage1(model, source, None, config, lambda_pu=0,
                                 checkpoint=out / "stage1.ckpt" if out else None)
    if kind == "source-only":
        return model, runlog
    parts = [s for s in (target_unlabeled, target_weak) if s is not None and len(s)]
    if not parts:
        raise ValueError("self-train-no-box needs target training images")
    merged = Split(sum((s.ids for s in parts), []), np.concatenate([s.images for s in parts]))
    copy_source_head_to_target(model)
    model, log2 = train_stage2(model, merged, None, config,
                               checkpoint=out / "stage2.ckpt" if out else None)
    runlog.extend(log2)
    return model, runlog
