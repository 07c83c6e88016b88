"""Training objectives for box-supervised domain adaptation.

Every loss takes probability maps (already clamped away from 0 and 1) of
shape (H, W), (B, H, W) or (B, 1, H, W) and returns a scalar Node equal to
the mean of the per-image losses.

PU roles: pixels outside every box are the labelled *positive* class
(background); pixels inside a box are *unlabelled* (object plus some
background).  ``prior`` is the background fraction of an image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import grid as G

PRIOR_EPS = 0.01


@dataclass(frozen=True)
class BoxMask:
    """Rasterized union of half-open rectangles (r0, c0, r1, c1)."""

    rects: tuple
    height: int
    width: int

    def __post_init__(self):
        rects = tuple(tuple(int(v) for v in r) for r in self.rects)
        for r0, c0, r1, c1 in rects:
            if not (0 <= r0 <= r1 <= self.height and 0 <= c0 <= c1 <= self.width):
                raise ValueError(f"box {(r0, c0, r1, c1)} outside {self.height}x{self.width} image")
        object.__setattr__(self, "rects", rects)

    @property
    def w(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=np.uint8)
        for r0, c0, r1, c1 in self.rects:
            m[r0:r1, c0:c1] = 1
        return m


@dataclass(frozen=True)
class PriorEstimate:
    value: float
    provenance: str = "estimated-from-source"

    def __post_init__(self):
        if not PRIOR_EPS <= self.value <= 1 - PRIOR_EPS:
            raise ValueError(f"prior {self.value} outside [{PRIOR_EPS}, {1 - PRIOR_EPS}]")


@dataclass(frozen=True)
class PULossConfig:
    normalization: str = "per-set-mean"
    clip_mode: str = "plain-max"

    def __post_init__(self):
        if self.normalization not in ("per-set-mean", "per-image"):
            raise ValueError(f"unknown PU normalization {self.normalization!r}")
        if self.clip_mode not in ("plain-max", "defit"):
            raise ValueError(f"unknown PU clip mode {self.clip_mode!r}")


def _batched(pred) -> G.Node:
    node = pred if isinstance(pred, G.Node) else G.constant(pred)
    nd = node.value.ndim
    if nd == 2:
        return G.reshape(node, (1, 1) + node.shape)
    if nd == 3:
        return G.reshape(node, (node.shape[0], 1) + node.shape[1:])
    if nd == 4 and node.shape[1] == 1:
        return node
    raise G.ShapeError(f"expected (H,W), (B,H,W) or (B,1,H,W) probabilities, got {node.shape}")


def _batched_array(a, shape, dtype, what: str) -> np.ndarray:
    a = a.w if isinstance(a, BoxMask) else a
    if isinstance(a, Sequence) and a and isinstance(a[0], BoxMask):
        a = np.stack([b.w for b in a])
    a = np.asarray(a.value if isinstance(a, G.Node) else a)
    if a.size == int(np.prod(shape)) and a.shape[-2:] == shape[-2:]:
        return a.reshape(shape).astype(dtype)
    raise G.ShapeError(f"{what} shape {a.shape} does not match predictions {shape}")


def _priors(prior, batch: int, dtype) -> np.ndarray:
    if isinstance(prior, PriorEstimate):
        vals = [prior.value] * batch
    elif np.ndim(prior) == 0:
        vals = [float(prior)] * batch
    else:
        vals = [p.value if isinstance(p, PriorEstimate) else float(p) for p in prior]
    if len(vals) != batch:
        raise G.ShapeError(f"{len(vals)} priors for a batch of {batch}")
    return np.asarray(vals, dtype=dtype)


def _per_image_weighted_sum(values: G.Node, weights: np.ndarray) -> G.Node:
    return G.reduce(G.mul(values, G.constant(weights)), "sum", "image")


def _neg_log(p: G.Node) -> G.Node:
    return G.neg(G.log(p))


def _neg_log1m(p: G.Node) -> G.Node:
    return G.neg(G.log(G.add_const(G.neg(p), 1.0)))


def seg_ce_loss(pred, mask) -> G.Node:
    """Mean binary cross-entropy over all pixels."""
    p = _batched(pred)
    y = _batched_array(mask, p.shape, p.dtype, "mask")
    ce = G.add(G.mul(_neg_log(p), G.constant(y)), G.mul(_neg_log1m(p), G.constant(1 - y)))
    return G.mean_all(ce)


def estimate_prior(source_pred_on_target) -> PriorEstimate:
    """Background fraction: 1 - mean foreground probability, clamped to [0.01, 0.99]."""
    v = np.asarray(source_pred_on_target.value if isinstance(source_pred_on_target, G.Node)
                   else source_pred_on_target, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot estimate a prior from an empty grid")
    pi = 1.0 - float(v.sum()) / v.size
    return PriorEstimate(min(max(pi, PRIOR_EPS), 1 - PRIOR_EPS))


def estimate_priors(source_pred_on_target) -> list[PriorEstimate]:
    """One :func:`estimate_prior` per image of a batch."""
    v = _batched(G.constant(np.asarray(
        source_pred_on_target.value if isinstance(source_pred_on_target, G.Node)
        else source_pred_on_target))).value[:, 0]
    return [estimate_prior(img) for img in v]


def _clip_nonneg(x: G.Node, defit: bool) -> G.Node:
    """max(0, x) per element.

    With ``defit`` the backward pass follows the gradient of ``-x`` wherever
    ``x < 0`` instead of stopping, so the network is pushed back toward a
    non-negative correction.
    """
    v = x.value
    pos = v > 0
    factor = np.where(pos, 1, -1 if defit else 0).astype(v.dtype)
    out = np.where(pos, v, 0).astype(v.dtype)
    return G._make("clip_nonneg", out, (x,), lambda g: (g * factor,))


def pu_box_loss(target_pred, box, prior, cfg: PULossConfig = PULossConfig()) -> G.Node:
    """Non-negative PU risk with background as the labelled class.

    L = pi * E_P[-log(1-p)] + max(0, E_U[-log p] - pi * E_P[-log p])

    ``P`` is outside the boxes, ``U`` inside.  With ``per-image``
    normalization each E_S becomes a sum over S divided by the pixel count.
    """
    p = _batched(target_pred)
    B, _, H, W = p.shape
    w = _batched_array(box, p.shape, np.float64, "box")
    inside, outside = w, 1 - w
    if cfg.normalization == "per-set-mean":
        n_u = inside.sum(axis=(1, 2, 3), keepdims=True)
        n_p = outside.sum(axis=(1, 2, 3), keepdims=True)
        wu = np.divide(inside, n_u, out=np.zeros_like(inside), where=n_u > 0)
        wp = np.divide(outside, n_p, out=np.zeros_like(outside), where=n_p > 0)
    else:
        wu, wp = inside / (H * W), outside / (H * W)
    wu, wp = wu.astype(p.dtype), wp.astype(p.dtype)
    pi = G.constant(_priors(prior, B, p.dtype))

    nl = _neg_log(p)
    positive_risk = G.mul(pi, _per_image_weighted_sum(_neg_log1m(p), wp))
    correction = G.sub(_per_image_weighted_sum(nl, wu),
                       G.mul(pi, _per_image_weighted_sum(nl, wp)))
    per_image = G.add(positive_risk, _clip_nonneg(correction, cfg.clip_mode == "defit"))
    return G.mean_all(per_image)


def mix_pseudo(source_pred, target_pred, alpha: float) -> np.ndarray:
    """Soft pseudo label (1 - alpha) * s + alpha * t, detached from any graph."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    s = np.asarray(source_pred.value if isinstance(source_pred, G.Node) else source_pred)
    t = np.asarray(target_pred.value if isinstance(target_pred, G.Node) else target_pred)
    if s.shape != t.shape:
        raise G.ShapeError(f"mix_pseudo: shapes {s.shape} and {t.shape} differ")
    return ((1 - alpha) * s + alpha * t).astype(t.dtype)


def self_da_loss(target_pred, q) -> G.Node:
    """Soft-target binary cross-entropy against a detached pseudo label."""
    p = _batched(target_pred)
    qa = _batched_array(q, p.shape, p.dtype, "pseudo label")
    ce = G.add(G.mul(_neg_log(p), G.constant(qa)), G.mul(_neg_log1m(p), G.constant(1 - qa)))
    return G.mean_all(ce)


def self_box_loss(target_pred, source_pred, box, tau: float = 0.5) -> G.Node:
    """Cross-entropy against the box-intersected source pseudo mask.

    Inside a box, pixels the source head calls foreground (>= tau) are
    foreground targets and the rest are ignored; outside every box pixels
    are background.  Normalized by the full pixel count.
    """
    p = _batched(target_pred)
    s = _batched_array(source_pred, p.shape, np.float64, "source prediction")
    w = _batched_array(box, p.shape, np.float64, "box")
    fg = ((w == 1) & (s >= tau)).astype(p.dtype)
    bg = (w == 0).astype(p.dtype)
    terms = G.add(G.mul(_neg_log(p), G.constant(fg)), G.mul(_neg_log1m(p), G.constant(bg)))
    return G.mean_all(terms)


def stage1_loss(src_pred, src_mask, tgt_pred_by_gt, tgt_pred_by_gs, box,
                cfg: PULossConfig = PULossConfig(), weights=(1.0, 1.0)):
    """Weighted source CE plus PU box loss.

    Returns ``(total, seg, pu)``.  The per-image prior is the background
    fraction the source head (detached) predicts over the whole image.  A
    zero PU weight skips the target branch entirely.
    """
    lam_seg, lam_pu = weights
    seg = seg_ce_loss(src_pred, src_mask)
    total = G.mul_const(seg, lam_seg)
    if lam_pu == 0:
        return total, seg, None
    priors = estimate_priors(tgt_pred_by_gs)
    pu = pu_box_loss(tgt_pred_by_gt, box, priors, cfg)
    return G.add(total, G.mul_const(pu, lam_pu)), seg, pu


def stage2_loss(model, unlabeled, weak_images, weak_boxes, alpha: float = 0.5, tau: float = 0.5):
    """Self-training objective on a batch of target images.

    ``unlabeled`` and ``weak_images`` are (B, 1, H, W) arrays (either may be
    empty or None).  Pseudo targets are recomputed from the model's current
    weights.  Returns ``(total, self_da, self_box)``; an empty subset
    contributes a zero term and ``None`` in its slot.
    """
    has_u = unlabeled is not None and len(unlabeled) > 0
    has_w = weak_images is not None and len(weak_images) > 0
    if not (has_u or has_w):
        raise G.ContractError("stage2_loss needs unlabeled or weakly-labelled samples")
    da = sb = None
    parts = []
    if has_u:
        s = model.predict("source", unlabeled)
        t = model.forward("target", unlabeled)
        da = self_da_loss(t, mix_pseudo(s, t, alpha))
        parts.append(da)
    if has_w:
        s = model.predict("source", weak_images)
        t = model.forward("target", weak_images)
        sb = self_box_loss(t, s, weak_boxes, tau)
        parts.append(sb)
    total = parts[0] if len(parts) == 1 else G.add(parts[0], parts[1])
    return total, da, sb
