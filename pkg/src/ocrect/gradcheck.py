"""Central finite-difference validation of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corr import build_correlation
from .data import IGNORE, TagSet
from .ocr import OcrConfig, PixelSelect, Split, rect_loss_pixel, split_groups
from .train import combined_loss, seg_ce_loss

TOLERANCE = 1e-4


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); zero when both vanish."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if den == 0:
        return 0.0
    return float(num / max(den, 1e-300))


@dataclass
class GradcheckReport:
    trials: int
    max_error: dict = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_error.values())


def _random_problem(rng, max_classes):
    c = int(rng.integers(2, max_classes + 1))
    k = int(rng.integers(1, c))  # proper subset, so the OC group is never empty
    tags = TagSet("p", tuple(int(v) for v in rng.choice(np.arange(1, c + 1), size=k, replace=False)))
    corpus = [TagSet(f"c{i}", tuple(int(v) for v in rng.choice(np.arange(1, c + 1), size=int(rng.integers(1, c + 1)),
                                                              replace=False))) for i in range(12)]
    return c, tags, build_correlation(corpus, c)


def run_gradcheck(trials: int = 100, max_classes: int = 10, seed: int = 0, perturb: float = 0.0,
                  h: float = 1e-5) -> GradcheckReport:
    """Compare analytic and numeric gradients of L_rec, L_seg and the combined loss.

    Logits are drawn from N(0, 2^2). Every trial visits all three split strategies.
    `perturb` is added to each analytic gradient (negative control).
    """
    rng = np.random.default_rng(seed)
    errs = {"rect": 0.0, "seg": 0.0, "combined": 0.0}
    selects = [PixelSelect.OC, PixelSelect.ALL, PixelSelect.IC]
    for trial in range(trials):
        c, tags, m = _random_problem(rng, max_classes)
        z = rng.normal(0.0, 2.0, size=c + 1)
        for split in Split:
            cfg = OcrConfig(split=split)

            def f(v):
                return rect_loss_pixel(v, split_groups(v, tags, m, cfg), cfg.delta).value

            g = rect_loss_pixel(z, split_groups(z, tags, m, cfg), cfg.delta).grad + perturb
            errs["rect"] = max(errs["rect"], relative_error(g, numeric_grad(f, z, h)))

        zmap = rng.normal(0.0, 2.0, size=(c + 1, 3, 3))
        pseudo = rng.integers(0, c + 1, size=(3, 3)).astype(np.uint8)
        pseudo[rng.random((3, 3)) < 0.15] = IGNORE
        g = seg_ce_loss(zmap, pseudo)[1] + perturb
        errs["seg"] = max(errs["seg"], relative_error(g, numeric_grad(lambda v: seg_ce_loss(v, pseudo)[0], zmap, h)))

        cfg = OcrConfig(split=list(Split)[trial % 3], pixel_select=selects[trial % 3])
        g = combined_loss(zmap, pseudo, tags, m, cfg)[1] + perturb
        num = numeric_grad(lambda v: combined_loss(v, pseudo, tags, m, cfg)[0], zmap, h)
        errs["combined"] = max(errs["combined"], relative_error(g, num))
    return GradcheckReport(trials=trials, max_error=errs)
