"""Per-pixel linear classifier trained with SGD on L_seg + alpha * L_rec."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corr import CorrelationMatrix
from .data import IGNORE, FormatError, SyntheticSample
from .metrics import evaluate
from .ocr import OcrConfig, PixelSelect, ocr_loss_map

MODEL_MAGIC = b"OCRM"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, pixel, what):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}, pixel {pixel}")
        self.epoch, self.batch, self.pixel = epoch, batch, pixel


@dataclass
class LinearPixelModel:
    weights: np.ndarray  # (C+1, F)
    bias: np.ndarray  # (C+1,)

    @classmethod
    def init(cls, num_total, num_features, seed, scale=0.01):
        rng = np.random.default_rng([seed, 1])
        return cls(rng.standard_normal((num_total, num_features)) * scale, np.zeros(num_total))

    def logits(self, features: np.ndarray) -> np.ndarray:
        f, h, w = features.shape
        z = self.weights @ features.reshape(f, h * w) + self.bias[:, None]
        return z.reshape(-1, h, w)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=0).astype(np.uint8)

    def copy(self):
        return LinearPixelModel(self.weights.copy(), self.bias.copy())


def save_model(model: LinearPixelModel, path) -> None:
    k, f = model.weights.shape
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<3I", k, f, 1))
        fh.write(model.weights.astype("<f4").tobytes())
        fh.write(model.bias.astype("<f4").tobytes())


def load_model(path) -> LinearPixelModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC or len(data) < 16:
        raise FormatError(f"{path}: not an OCRM model file")
    k, f, _ = struct.unpack("<3I", data[4:16])
    if len(data) != 16 + 4 * (k * f + k):
        raise FormatError(f"{path}: payload size does not match {k}x{f} header")
    vals = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    if not np.isfinite(vals).all():
        raise FormatError(f"{path}: non-finite parameter")
    return LinearPixelModel(vals[:k * f].reshape(k, f).copy(), vals[k * f:].copy())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_gamma: float = 0.95
    seed: int = 0
    ocr_enabled: bool = True
    ocr_warmup: int = 0  # first epoch with rectification active
    standardize: bool = True  # run SGD on per-channel standardized features
    ocr: OcrConfig = field(default_factory=OcrConfig)

    def effective_ocr(self) -> OcrConfig:
        if not self.ocr_enabled:
            return replace(self.ocr, pixel_select=PixelSelect.NONE)
        return self.ocr


def seg_ce_loss(logits: np.ndarray, pseudo: np.ndarray):
    """Mean pixelwise cross-entropy over non-ignore pixels, with its gradient."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 3 or pseudo.shape != z.shape[1:]:
        raise ValueError(f"logits {z.shape} and pseudo mask {pseudo.shape} disagree")
    valid = pseudo != IGNORE
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(z)
    shifted = z - z.max(axis=0, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    labels = np.where(valid, pseudo, 0).astype(np.int64)
    picked = np.take_along_axis(logp, labels[None], axis=0)[0]
    value = -np.sum(picked[valid]) / n
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[None], np.take_along_axis(grad, labels[None], axis=0) - 1.0, axis=0)
    grad *= valid[None] / n
    return float(value), grad


def combined_loss(logits, pseudo, tags, m, cfg: OcrConfig):
    """L_seg + alpha * L_rec; returns (value, grad, (seg, rec))."""
    seg, g_seg = seg_ce_loss(logits, pseudo)
    rec, g_rec = ocr_loss_map(logits, pseudo, tags, m, cfg)
    return seg + cfg.alpha * rec, g_seg + cfg.alpha * g_rec, (seg, rec)


def sgd_momentum_step(params, grads, velocity, lr, momentum, weight_decay):
    """v <- mu v - lr (g + lambda w);  w <- w + v. Updates in place."""
    for w, g, v in zip(params, grads, velocity):
        v *= momentum
        v -= lr * (g + weight_decay * w)
        w += v


def _batch_loss_and_grad(model, batch, m, ocr_cfg, epoch, b, scale=None, shift=None):
    """Mean gradient over the batch's images with respect to (W, b).

    With `scale`/`shift` given, `model` acts on (x - shift) / scale, which is
    how standardized training is carried out without copying the features.
    """
    dw = np.zeros_like(model.weights)
    db = np.zeros_like(model.bias)
    seg_sum = rec_sum = 0.0
    for s in batch:
        x = s.features.reshape(s.features.shape[0], -1).astype(np.float64)
        if scale is not None:
            x = (x - shift[:, None]) / scale[:, None]
        z = (model.weights @ x + model.bias[:, None]).reshape(-1, *s.features.shape[1:])
        _, gz, (seg, rec) = combined_loss(z, s.pseudo_mask, s.tags, m, ocr_cfg)
        if not (math.isfinite(seg) and math.isfinite(rec)) or not np.isfinite(gz).all():
            bad = np.argwhere(~np.isfinite(gz).all(axis=0))
            pixel = (s.image_id, tuple(int(v) for v in bad[0])) if len(bad) else (s.image_id, None)
            raise TrainingDiverged(epoch, b, pixel, "loss")
        g = gz.reshape(gz.shape[0], -1)
        dw += g @ x.T
        db += g.sum(axis=1)
        seg_sum += seg
        rec_sum += rec
    n = len(batch)
    return dw / n, db / n, seg_sum / n, rec_sum / n


def feature_stats(samples):
    """Per-channel mean and standard deviation over every pixel of `samples`.

    Non-finite entries are skipped here so that training reports them itself.
    """
    f = samples[0].features.shape[0]
    total = np.zeros(f)
    sq = np.zeros(f)
    n = np.zeros(f)
    for s in samples:
        x = s.features.reshape(f, -1).astype(np.float64)
        ok = np.isfinite(x)
        x = np.where(ok, x, 0.0)
        total += x.sum(axis=1)
        sq += (x * x).sum(axis=1)
        n += ok.sum(axis=1)
    n = np.maximum(n, 1)
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 0.0))
    return mean, np.where(std > 1e-12, std, 1.0)


def _to_raw(model, scale, shift):
    w = model.weights / scale[None, :]
    return LinearPixelModel(w, model.bias - w @ shift)


def _to_standardized(model, scale, shift):
    return LinearPixelModel(model.weights * scale[None, :], model.bias + model.weights @ shift)


def evaluate_model(model, samples, num_total):
    preds = [model.predict(s.features) for s in samples]
    return evaluate(preds, [s.gt_mask for s in samples], [s.tags for s in samples], num_total)


def _record(model, epoch, train_set, eval_set, m, ocr_cfg, num_total, lr):
    seg = rec = 0.0
    for s in train_set:
        _, _, (a, r) = combined_loss(model.logits(s.features), s.pseudo_mask, s.tags, m, ocr_cfg)
        seg += a
        rec += r
    rec_out = {"epoch": epoch, "lr": lr, "l_seg": seg / len(train_set), "l_rec": rec / len(train_set)}
    if eval_set:
        rep = evaluate_model(model, eval_set, num_total)
        rec_out.update(miou=rep.miou, oc_image_error_rate=rep.oc_image_error_rate,
                       oc_pixel_fraction=rep.oc_pixel_fraction)
    return rec_out


def train(dataset: list[SyntheticSample], corr: CorrelationMatrix, cfg: TrainConfig,
          eval_set: list[SyntheticSample] | None = None, model: LinearPixelModel | None = None):
    """Train a LinearPixelModel; returns (model, log).

    Log record 0 is evaluated before any update; record e (1..epochs) after epoch e.
    With cfg.standardize the optimizer works on standardized features (a fixed
    linear reparametrization); the returned model always acts on raw features.
    """
    if not dataset:
        raise ValueError("empty training set")
    num_total = corr.values.shape[0]
    num_features = dataset[0].features.shape[0]
    if cfg.standardize:
        shift, scale = feature_stats(dataset)
    else:
        shift, scale = np.zeros(num_features), np.ones(num_features)
    if model is None:
        inner = LinearPixelModel.init(num_total, num_features, cfg.seed)
    else:
        inner = _to_standardized(model, scale, shift)
    rng = np.random.default_rng([cfg.seed, 2])
    vel = [np.zeros_like(inner.weights), np.zeros_like(inner.bias)]
    ocr_cfg = cfg.effective_ocr()
    off = replace(ocr_cfg, pixel_select=PixelSelect.NONE)
    lr = cfg.learning_rate
    args = (dataset, eval_set, corr, ocr_cfg, num_total)
    log = [_record(_to_raw(inner, scale, shift), 0, *args, lr=lr)]
    for epoch in range(1, cfg.epochs + 1):
        active = ocr_cfg if epoch - 1 >= cfg.ocr_warmup else off
        order = rng.permutation(len(dataset))
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            dw, db, _, _ = _batch_loss_and_grad(inner, batch, corr, active, epoch, b, scale, shift)
            with np.errstate(over="ignore", invalid="ignore"):
                sgd_momentum_step([inner.weights, inner.bias], [dw, db], vel, lr, cfg.momentum, cfg.weight_decay)
            if not (np.isfinite(inner.weights).all() and np.isfinite(inner.bias).all()):
                raise TrainingDiverged(epoch, b, None, "parameter update")
        log.append(_record(_to_raw(inner, scale, shift), epoch, *args, lr=lr))
        lr *= cfg.lr_decay_gamma
    return _to_raw(inner, scale, shift), log
