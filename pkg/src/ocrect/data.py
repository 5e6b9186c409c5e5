"""Domain types, on-disk formats and the synthetic scene generator.

Class index 0 is background; foreground classes are 1..C. Masks use 255 as
the ignore label.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BACKGROUND = 0
IGNORE = 255
LOGITS_MAGIC = b"OCRL"


class FormatError(ValueError):
    """Raised when a file does not follow its declared format."""


class ValidationError(ValueError):
    """Raised when parsed data violates a domain invariant."""


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    num_foreground: int

    def __post_init__(self):
        if self.num_foreground < 1:
            raise ValidationError("label space needs at least one foreground class")

    @property
    def num_classes(self) -> int:
        return self.num_foreground + 1


@dataclass(frozen=True)
class TagSet:
    image_id: str
    tags: tuple[int, ...]

    def __post_init__(self):
        tags = tuple(sorted(set(int(t) for t in self.tags)))
        if not tags:
            raise ValidationError(f"{self.image_id}: empty tag set")
        if tags[0] < 1:
            raise ValidationError(f"{self.image_id}: background (0) or negative index is not a tag")
        object.__setattr__(self, "tags", tags)

    def validate(self, num_classes: int) -> "TagSet":
        """Check every tag lies in 1..num_classes (C, foreground count)."""
        if self.tags[-1] > num_classes:
            raise ValidationError(f"{self.image_id}: tag {self.tags[-1]} outside 1..{num_classes}")
        return self

    def __contains__(self, k):
        return k in self.tags

    def __iter__(self):
        return iter(self.tags)

    def __len__(self):
        return len(self.tags)


@dataclass
class SyntheticSample:
    features: np.ndarray  # (F, H, W)
    gt_mask: np.ndarray  # (H, W) uint8
    pseudo_mask: np.ndarray  # (H, W) uint8
    tags: TagSet
    relabeled_regions: int = 0
    total_regions: int = 0

    @property
    def image_id(self) -> str:
        return self.tags.image_id


# ---------------------------------------------------------------- tags

def read_tags(path, num_classes: int | None = None) -> list[TagSet]:
    """Read a JSON-lines tag file. Each line: ``{"id": str, "tags": [int, ...]}``."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id, tags = rec["id"], rec["tags"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed tag record ({exc})") from None
            if not isinstance(tags, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in tags):
                raise FormatError(f"{path}:{lineno}: 'tags' must be a list of integers")
            try:
                ts = TagSet(str(image_id), tuple(tags))
                if num_classes is not None:
                    ts.validate(num_classes)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            out.append(ts)
    return out


def write_tags(tag_sets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ts in tag_sets:
            fh.write(json.dumps({"id": ts.image_id, "tags": list(ts.tags)}) + "\n")


# ---------------------------------------------------------------- masks

def validate_mask(mask: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise ValidationError(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    if mask.dtype != np.uint8:
        if mask.min() < 0 or mask.max() > IGNORE:
            raise ValidationError("mask values must lie in 0..255")
        mask = mask.astype(np.uint8)
    if num_classes is not None:
        bad = (mask > num_classes) & (mask != IGNORE)
        if bad.any():
            v = int(mask[bad][0])
            raise ValidationError(f"mask value {v} outside 0..{num_classes} and not ignore")
    return mask


def _pgm_tokens(data: bytes, count: int):
    """Yield the first `count` whitespace-separated header tokens and the payload offset."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise FormatError("truncated PGM header")
        tokens.append(data[i:j])
        i = j
    # exactly one whitespace byte separates maxval from the raster
    if i >= n or not data[i:i + 1].isspace():
        raise FormatError("truncated PGM header")
    return tokens, i + 1


def read_mask(path, num_classes: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    tokens, offset = _pgm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: empty image")
    payload = data[offset:]
    if len(payload) != width * height:
        raise FormatError(f"{path}: expected {width * height} pixel bytes, found {len(payload)}")
    mask = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
    if num_classes is not None:
        try:
            validate_mask(mask, num_classes)
        except ValidationError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return mask


def write_mask(mask: np.ndarray, path, num_classes: int | None = None) -> None:
    mask = validate_mask(mask, num_classes)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(mask).tobytes())


# ---------------------------------------------------------------- logits

def write_logits(logits: np.ndarray, path, magic: bytes = LOGITS_MAGIC) -> None:
    """Write a (K, H, W) array as magic + three uint32 LE dims + float32 LE payload."""
    arr = np.asarray(logits)
    if arr.ndim != 3:
        raise ValidationError(f"expected a (K, H, W) array, got shape {arr.shape}")
    arr = arr.astype("<f4")
    if not np.isfinite(arr).all():
        raise ValidationError("logits contain non-finite values")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_logits(path, magic: bytes = LOGITS_MAGIC) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    k, h, w = struct.unpack("<3I", data[4:16])
    expected = k * h * w * 4
    if len(data) - 16 != expected:
        raise FormatError(
            f"{path}: header declares {k}x{h}x{w} = {k * h * w} reals, payload holds {(len(data) - 16) / 4:g}")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(k, h, w).copy()
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: non-finite value in payload")
    return arr


# ---------------------------------------------------------------- synthetic scenes

@dataclass(frozen=True)
class SynthParams:
    """Knobs of the generator beyond the positional arguments."""
    prototype_scale: float = 1.0
    pixel_noise: float = 0.3
    background_noise: float = 0.5
    instance_noise: float = 0.0
    confusion_blend: float = 0.0
    context_dims: int | None = None  # trailing scene-code channels; None means F // 2
    context_scale: float = 1.0
    context_noise: float = 0.1
    min_size: int = 4
    max_objects: int = 3
    region_grid: tuple[int, int] = field(default=(2, 2))


def _place_rect(rng, height, width, lo, hi_frac=0.5):
    hi_h = max(lo, int(height * hi_frac))
    hi_w = max(lo, int(width * hi_frac))
    rh = int(rng.integers(lo, hi_h + 1))
    rw = int(rng.integers(lo, hi_w + 1))
    y0 = int(rng.integers(0, height - rh + 1))
    x0 = int(rng.integers(0, width - rw + 1))
    return y0, x0, rh, rw


def generate_synthetic(seed: int, num_images: int, num_classes: int, num_features: int,
                       height: int, width: int, noise_rate: float = 0.3,
                       params: SynthParams | None = None) -> list[SyntheticSample]:
    """Generate rectangle scenes with per-pixel features and noisy pseudo masks.

    Each scene is background plus 1-3 rectangles of distinct foreground
    classes. The leading feature channels hold the class prototype plus a
    per-object Gaussian offset plus per-pixel Gaussian noise; the trailing
    `context_dims` channels hold the sum of the present classes' scene codes,
    so image-level evidence is visible to a per-pixel model. Each rectangle is cut into a grid of
    sub-regions; every sub-region is independently relabeled, with probability
    `noise_rate`, to a different foreground class drawn uniformly from the
    whole label space.
    """
    p = params or SynthParams()
    if not 0 <= noise_rate < 1:
        raise GenerationError(f"noise_rate must lie in [0, 1), got {noise_rate}")
    if num_classes < 1 or num_classes > 254:
        raise GenerationError("num_classes must lie in 1..254")
    if num_features < 1 or num_images < 0:
        raise GenerationError("need num_features >= 1 and num_images >= 0")
    if height < p.min_size or width < p.min_size:
        raise GenerationError(f"{height}x{width} image cannot hold a {p.min_size}x{p.min_size} rectangle")

    rng = np.random.default_rng(seed)
    cdims = num_features // 2 if p.context_dims is None else p.context_dims
    if not 0 <= cdims < num_features:
        raise GenerationError("context_dims must leave at least one appearance feature")
    app = num_features - cdims
    prototypes = np.zeros((num_classes + 1, num_features))
    prototypes[:, :app] = rng.standard_normal((num_classes + 1, app)) * p.prototype_scale
    codes = rng.standard_normal((num_classes + 1, cdims)) * p.context_scale
    gy, gx = p.region_grid
    samples = []
    for n in range(num_images):
        k = int(rng.integers(1, min(p.max_objects, num_classes) + 1))
        classes = rng.choice(np.arange(1, num_classes + 1), size=k, replace=False)
        gt = np.zeros((height, width), dtype=np.uint8)
        rects = []
        for c in classes:
            y0, x0, rh, rw = _place_rect(rng, height, width, p.min_size)
            gt[y0:y0 + rh, x0:x0 + rw] = c
            rects.append((int(c), y0, x0, rh, rw))

        offsets = rng.standard_normal((len(rects) + 1, num_features)) * p.instance_noise
        feats = prototypes[gt].transpose(2, 0, 1).copy()
        feats += offsets[0][:, None, None] * (gt == 0)
        pseudo = gt.copy()
        relabeled = total = 0
        for i, (c, y0, x0, rh, rw) in enumerate(rects):
            sl = (slice(y0, y0 + rh), slice(x0, x0 + rw))
            visible = gt[sl] == c
            feats[:, sl[0], sl[1]] += offsets[i + 1][:, None, None] * visible
            ys = np.linspace(0, rh, gy + 1).astype(int)
            xs = np.linspace(0, rw, gx + 1).astype(int)
            for a in range(gy):
                for b in range(gx):
                    flip = rng.random() < noise_rate
                    new = int(rng.integers(1, num_classes)) if num_classes > 1 else c
                    if new >= c:
                        new += 1
                    region = visible[ys[a]:ys[a + 1], xs[b]:xs[b + 1]]
                    if not region.any():
                        continue
                    total += 1
                    if flip and num_classes > 1:
                        relabeled += 1
                        rows = slice(y0 + ys[a], y0 + ys[a + 1])
                        cols = slice(x0 + xs[b], x0 + xs[b + 1])
                        pseudo[rows, cols][region] = new
                        shift = p.confusion_blend * (prototypes[new] - prototypes[c])
                        feats[:, rows, cols] += shift[:, None, None] * region
        sigma = np.where(gt == BACKGROUND, p.background_noise, p.pixel_noise)
        feats[:app] += rng.standard_normal((app, height, width)) * sigma
        if cdims:
            ctx = codes[classes].sum(axis=0) + rng.standard_normal(cdims) * p.context_noise
            feats[app:] = ctx[:, None, None] + rng.standard_normal((cdims, height, width)) * p.context_noise
        present = sorted(int(v) for v in np.unique(gt) if v != BACKGROUND)
        samples.append(SyntheticSample(
            features=feats.astype(np.float32), gt_mask=gt, pseudo_mask=pseudo,
            tags=TagSet(f"img{n:04d}", tuple(present)),
            relabeled_regions=relabeled, total_regions=total))
    return samples


# ---------------------------------------------------------------- dataset directories

def write_dataset(samples: list[SyntheticSample], out_dir, meta: dict, num_eval: int = 0) -> None:
    """Lay out samples as tags.jsonl, gt/, pseudo/, features/ and meta.json."""
    out = Path(out_dir)
    for sub in ("gt", "pseudo", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_train = len(samples) - num_eval
    for s in samples:
        write_mask(s.gt_mask, out / "gt" / f"{s.image_id}.pgm")
        write_mask(s.pseudo_mask, out / "pseudo" / f"{s.image_id}.pgm")
        write_logits(s.features, out / "features" / f"{s.image_id}.ocrl")
    write_tags([s.tags for s in samples], out / "tags.jsonl")
    meta = dict(meta, train=[s.image_id for s in samples[:n_train]],
                eval=[s.image_id for s in samples[n_train:]])
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_dataset(data_dir):
    """Return (meta, train samples, eval samples) from a directory made by write_dataset."""
    root = Path(data_dir)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{root}: unreadable meta.json ({exc})") from None
    c = int(meta["num_classes"])
    tags = {t.image_id: t for t in read_tags(root / "tags.jsonl", c)}

    def load(ids):
        out = []
        for i in ids:
            if i not in tags:
                raise FormatError(f"{root}: no tags for image {i}")
            out.append(SyntheticSample(
                features=read_logits(root / "features" / f"{i}.ocrl"),
                gt_mask=read_mask(root / "gt" / f"{i}.pgm", c),
                pseudo_mask=read_mask(root / "pseudo" / f"{i}.pgm", c),
                tags=tags[i]))
        return out

    return meta, load(meta["train"]), load(meta.get("eval", []))
