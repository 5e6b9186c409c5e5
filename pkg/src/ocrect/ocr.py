"""Out-of-candidate rectification.

Per pixel: detect predictions outside the image's tag set, split classes into
an in-candidate (IC) group and an out-of-candidate (OC) group, and push every
OC logit below every IC logit by a margin with a smooth ranking loss

    L = log(1 + sum_{k in IC} exp(-z_k) * sum_{l in OC} exp(z_l + delta))

All arithmetic runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import BACKGROUND, IGNORE

SOFTPLUS_LINEAR_ABOVE = 30.0


class Split(str, Enum):
    ALL = "all"
    MAX = "max"
    ADA = "ada"


class PixelSelect(str, Enum):
    NONE = "none"
    IC = "ic"
    OC = "oc"
    ALL = "all"


@dataclass(frozen=True)
class OcrConfig:
    alpha: float = 1.0
    delta: float = 2.0
    t: float = 0.2
    split: Split = Split.ADA
    pixel_select: PixelSelect = PixelSelect.OC

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "pixel_select", PixelSelect(self.pixel_select))
        if self.alpha < 0 or self.t < 0:
            raise ValueError("alpha and t must be non-negative")


@dataclass(frozen=True)
class GroupSplit:
    ic: tuple[int, ...]
    oc: tuple[int, ...]
    anchor: int


@dataclass
class PixelLossResult:
    value: float
    grad: np.ndarray


def _tag_tuple(tags) -> tuple[int, ...]:
    return tuple(getattr(tags, "tags", tags))


def candidate_mask(tags, num_total: int) -> np.ndarray:
    """Boolean vector over all C+1 classes, True for background and the tags."""
    cand = np.zeros(num_total, dtype=bool)
    cand[BACKGROUND] = True
    cand[list(_tag_tuple(tags))] = True
    return cand


def _matrix(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def masked_logsumexp(x: np.ndarray, mask: np.ndarray, axis: int = 0) -> np.ndarray:
    """log(sum(exp(x)) over entries where mask is True); -inf where the mask is empty."""
    xm = np.where(mask, x, -np.inf)
    m = xm.max(axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(xm - safe).sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + safe
    return np.squeeze(out, axis=axis)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > SOFTPLUS_LINEAR_ABOVE, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR_ABOVE))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- single pixel

def oc_mask(logits_pixel, tags) -> int:
    """1 if the unrestricted argmax is a foreground class outside the tags."""
    z = np.asarray(logits_pixel, dtype=np.float64)
    pred = int(np.argmax(z))
    return int(not candidate_mask(tags, z.shape[0])[pred])


def split_groups(logits_pixel, tags, m, cfg: OcrConfig) -> GroupSplit:
    z = np.asarray(logits_pixel, dtype=np.float64)
    cand = candidate_mask(tags, z.shape[0])
    anchor = int(np.argmax(np.where(cand, z, -np.inf)))
    oc = tuple(int(k) for k in np.flatnonzero(~cand))
    if cfg.split is Split.ALL:
        ic = tuple(int(k) for k in np.flatnonzero(cand))
    elif cfg.split is Split.MAX:
        ic = (anchor,)
    else:
        p = softmax(z)
        keep = cand & (p[anchor] - p * _matrix(m)[anchor] < cfg.t)
        keep[anchor] = True
        ic = tuple(int(k) for k in np.flatnonzero(keep))
    return GroupSplit(ic=ic, oc=oc, anchor=anchor)


def rect_loss_pixel(logits_pixel, split: GroupSplit, delta: float) -> PixelLossResult:
    z = np.asarray(logits_pixel, dtype=np.float64)
    if not split.ic:
        raise ValueError("rectification loss needs a non-empty IC group")
    grad = np.zeros_like(z)
    if not split.oc:
        return PixelLossResult(0.0, grad)
    ic, oc = list(split.ic), list(split.oc)
    a = masked_logsumexp(-z[ic], np.ones(len(ic), bool))
    b = masked_logsumexp(z[oc] + delta, np.ones(len(oc), bool))
    s = a + b
    sig = float(sigmoid(s))
    grad[ic] = -sig * np.exp(-z[ic] - a)
    grad[oc] = sig * np.exp(z[oc] + delta - b)
    return PixelLossResult(float(softplus(s)), grad)


# ---------------------------------------------------------------- whole map

def select_mask(logits: np.ndarray, tags, pixel_select: PixelSelect) -> np.ndarray:
    """(H, W) float mask of pixels the rectification loss applies to."""
    k, h, w = logits.shape
    pixel_select = PixelSelect(pixel_select)
    if pixel_select is PixelSelect.NONE:
        return np.zeros((h, w))
    if pixel_select is PixelSelect.ALL:
        return np.ones((h, w))
    cand = candidate_mask(tags, k)
    moc = (~cand)[np.argmax(logits, axis=0)]
    return (moc if pixel_select is PixelSelect.OC else ~moc).astype(np.float64)


def ic_group_map(logits: np.ndarray, tags, m, cfg: OcrConfig):
    """Vectorized split: returns (ic mask (K, H, W), oc mask (K,), anchor (H, W))."""
    z = np.asarray(logits, dtype=np.float64)
    k = z.shape[0]
    cand = candidate_mask(tags, k)
    anchor = np.argmax(np.where(cand[:, None, None], z, -np.inf), axis=0)
    onehot = np.arange(k)[:, None, None] == anchor[None]
    if cfg.split is Split.ALL:
        ic = np.broadcast_to(cand[:, None, None], z.shape).copy()
    elif cfg.split is Split.MAX:
        ic = onehot
    else:
        p = softmax(z, axis=0)
        p_anchor = np.take_along_axis(p, anchor[None], axis=0)
        corr = np.moveaxis(_matrix(m)[anchor], -1, 0)  # (K, H, W) = M[anchor, k]
        ic = (cand[:, None, None] & (p_anchor - p * corr < cfg.t)) | onehot
    return ic, ~cand, anchor


def rect_loss_map(logits: np.ndarray, tags, m, cfg: OcrConfig):
    """Per-pixel rectification loss (H, W) and its gradient (K, H, W), before pixel selection."""
    z = np.asarray(logits, dtype=np.float64)
    ic, oc, _ = ic_group_map(z, tags, m, cfg)
    if not oc.any():
        return np.zeros(z.shape[1:]), np.zeros_like(z)
    ocb = np.broadcast_to(oc[:, None, None], z.shape)
    a = masked_logsumexp(-z, ic, axis=0)
    b = masked_logsumexp(z + cfg.delta, ocb, axis=0)
    s = a + b
    sig = sigmoid(s)
    grad = -sig * np.exp(np.where(ic, -z - a, -np.inf))
    grad += sig * np.exp(np.where(ocb, np.minimum(z + cfg.delta - b, 0.0), -np.inf))
    return softplus(s), grad


def ocr_loss_map(logits: np.ndarray, pseudo: np.ndarray, tags, m, cfg: OcrConfig):
    """Masked rectification loss averaged over all H*W pixels, with its gradient.

    Ignore-label pixels contribute nothing but still count in the denominator.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 3 or pseudo.shape != z.shape[1:]:
        raise ValueError(f"logits {z.shape} and pseudo mask {pseudo.shape} disagree")
    n = z.shape[1] * z.shape[2]
    sel = select_mask(z, tags, cfg.pixel_select) * (pseudo != IGNORE)
    if not sel.any():
        return 0.0, np.zeros_like(z)
    value, grad = rect_loss_map(z, tags, m, cfg)
    return float(np.sum(sel * value) / n), grad * (sel / n)[None]
