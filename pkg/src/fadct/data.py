"""Corpus ingestion, augmentation, and the synthetic band-labelled dataset.

Corpora live on disk as `root/<class_name>/<image>.ppm` with lexicographic
class and file ordering, so loading is deterministic. Binary PPM (P6) is
the one required format; anything undecodable is skipped with a warning.

The synthetic generator builds each sample directly in DCT space: white
coefficient noise everywhere plus a class-specific fixed sign pattern on
the coefficients whose normalized frequency index falls inside the class
band. Classes therefore differ in *where* their energy sits on the
spectrum, which is the structure the learnable cutoffs are supposed to
recover.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bands import frequency_index
from .dct import plan_for
from .rng import Rng

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Unusable corpus layout or undecodable mandatory input."""


@dataclass
class ImageSample:
    pixels: np.ndarray          # (3, S, S) float64 in [0, 1]
    label: int
    source_id: str


# ---------------------------------------------------------------------------
# PPM (P6) codec
# ---------------------------------------------------------------------------


def _read_ppm_tokens(buf: bytes, count: int):
    """First `count` whitespace-separated header tokens, skipping # comments.

    Returns (tokens, offset of the byte right after the single whitespace
    that terminates the last token).
    """
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(buf):
            raise DataError("truncated header")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] != b"\n":
                i += 1
            i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(buf) and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
                i += 1
            tokens.append(buf[start:i])
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise DataError("header not terminated by whitespace")
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    """Decode a binary P6 file to a (3, H, W) float array in [0, 1]."""
    buf = Path(path).read_bytes()
    try:
        tokens, offset = _read_ppm_tokens(buf, 4)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: non-numeric header fields") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid dimensions {width}x{height} maxval {maxval}")
    two_byte = maxval > 255
    need = width * height * 3 * (2 if two_byte else 1)
    raw = buf[offset:offset + need]
    if len(raw) < need:
        raise DataError(f"{path}: expected {need} pixel bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype=">u2" if two_byte else np.uint8)
    img = flat.reshape(height, width, 3).transpose(2, 0, 1)
    return img.astype(np.float64) / float(maxval)


def write_ppm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    """Encode a (3, H, W) array in [0, 1] as binary P6."""
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise DataError(f"write_ppm expects (3, H, W) pixels, got {pixels.shape}")
    if not 0 < maxval < 65536:
        raise DataError(f"invalid maxval {maxval}")
    q = np.rint(np.clip(pixels, 0.0, 1.0) * maxval)
    q = q.astype(">u2" if maxval > 255 else np.uint8)
    h, w = pixels.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


def decode_image(path) -> np.ndarray:
    """Decoder boundary: P6 is the only built-in format."""
    return read_ppm(path)


# ---------------------------------------------------------------------------
# resizing and corpus loading
# ---------------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resampling of (C, H, W)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def grid(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ri, ri2, rf = grid(h, out_h)
    ci, ci2, cf = grid(w, out_w)
    top = img[:, ri][:, :, ci] * (1 - cf) + img[:, ri][:, :, ci2] * cf
    bot = img[:, ri2][:, :, ci] * (1 - cf) + img[:, ri2][:, :, ci2] * cf
    return top * (1 - rf[None, :, None]) + bot * rf[None, :, None]


def load_corpus(root, image_size: int):
    """Load `root/<class>/<image>.ppm` into samples.

    Returns (samples, class_map, skipped_count). Class indices follow the
    lexicographic order of directory names; files are ordered by name inside
    each class. Undecodable files are skipped with a warning; a class
    directory with no decodable image is a hard error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"corpus root {root} contains no class directories")
    class_map = {d.name: i for i, d in enumerate(class_dirs)}
    samples, skipped = [], 0
    for d in class_dirs:
        label = class_map[d.name]
        loaded_any = False
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            try:
                img = decode_image(f)
            except (DataError, OSError) as exc:
                skipped += 1
                log.warning("skipping unreadable image %s: %s", f, exc)
                continue
            img = np.clip(resize_bilinear(img, image_size, image_size), 0.0, 1.0)
            samples.append(ImageSample(img, label, f"{d.name}/{f.name}"))
            loaded_any = True
        if not loaded_any:
            raise DataError(f"class directory {d} contains no decodable image")
    return samples, class_map, skipped


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.0
    vflip_prob: float = 0.0
    crop_scale_min: float = 1.0
    crop_scale_max: float = 1.0
    jitter_strength: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: float = 1.0
    spectral_noise_std: float = 0.0
    band_mask_prob: float = 0.0
    band_mask_width: float = 0.1

    def __post_init__(self):
        for name in ("hflip_prob", "vflip_prob", "blur_prob", "band_mask_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name}={v} must lie in [0, 1]")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise DataError(f"crop scale range ({self.crop_scale_min}, "
                            f"{self.crop_scale_max}) must satisfy 0 < min <= max <= 1")
        if self.jitter_strength < 0 or self.blur_sigma <= 0 or \
                self.spectral_noise_std < 0 or self.band_mask_width <= 0:
            raise DataError("augmentation strengths must be nonnegative "
                            "(blur sigma and mask width positive)")

    @property
    def enabled(self) -> bool:
        return (self.hflip_prob > 0 or self.vflip_prob > 0 or self.crop_scale_min < 1.0
                or self.jitter_strength > 0 or self.blur_prob > 0
                or self.spectral_noise_std > 0 or self.band_mask_prob > 0)


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = _gauss_kernel(sigma)
    pad = len(k) // 2
    out = np.empty_like(img)
    work = np.pad(img, ((0, 0), (pad, pad), (0, 0)), mode="edge")
    for c in range(img.shape[0]):
        out[c] = np.apply_along_axis(lambda col: np.convolve(col, k, "valid"), 0, work[c])
    work = np.pad(out, ((0, 0), (0, 0), (pad, pad)), mode="edge")
    for c in range(img.shape[0]):
        out[c] = np.apply_along_axis(lambda row: np.convolve(row, k, "valid"), 1, work[c])
    return out


def augment_spatial(sample: ImageSample, cfg: AugmentConfig, rng: Rng) -> ImageSample:
    """Crop / flips / color jitter / blur, in that fixed order.

    Random draws happen unconditionally in a fixed sequence so that two
    calls with equal seeds produce identical outputs regardless of which
    branches fire.
    """
    img = sample.pixels
    s = img.shape[1]

    # random resized crop (area scale in [min, max], square aspect)
    scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
    side = max(1, int(round(s * np.sqrt(scale))))
    side = min(side, s)
    top = rng.randint(s - side + 1)
    left = rng.randint(s - side + 1)
    if side != s:
        img = resize_bilinear(img[:, top:top + side, left:left + side], s, s)

    if rng.uniform() < cfg.hflip_prob:
        img = img[:, :, ::-1]
    if rng.uniform() < cfg.vflip_prob:
        img = img[:, ::-1, :]

    # per-channel affine jitter
    scales = rng.uniforms(3, 1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength)
    shifts = rng.uniforms(3, -cfg.jitter_strength, cfg.jitter_strength)
    if cfg.jitter_strength > 0:
        img = img * scales[:, None, None] + shifts[:, None, None]

    if rng.uniform() < cfg.blur_prob:
        img = _blur(img, cfg.blur_sigma)

    return ImageSample(np.clip(img, 0.0, 1.0), sample.label, sample.source_id)


def augment_spectral(sample: ImageSample, cfg: AugmentConfig, rng: Rng) -> ImageSample:
    """Coefficient-domain perturbation: white noise plus random band erasure."""
    s = sample.pixels.shape[1]
    plan = plan_for(s, s)
    coeffs = plan.dct2_array(sample.pixels)

    if cfg.spectral_noise_std > 0:
        coeffs = coeffs + cfg.spectral_noise_std * rng.normals(coeffs.shape)

    if rng.uniform() < cfg.band_mask_prob:
        f = frequency_index(s, s).data
        start = rng.uniform(0.0, 1.0 - cfg.band_mask_width)
        erase = (f >= start) & (f <= start + cfg.band_mask_width)
        coeffs = coeffs * np.where(erase, 0.0, 1.0)

    img = np.clip(plan.idct2_array(coeffs), 0.0, 1.0)
    return ImageSample(img, sample.label, sample.source_id)


# ---------------------------------------------------------------------------
# synthetic band-discriminative corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    intervals: tuple = ((0.0, 0.2), (0.4, 0.6), (0.8, 1.0))
    image_size: int = 32
    amplitude: float = 1.0
    noise_std: float = 0.25
    train_per_class: int = 40
    val_per_class: int = 10
    test_per_class: int = 10
    seed: int = 0

    def __post_init__(self):
        self.intervals = tuple((float(a), float(b)) for a, b in self.intervals)
        if not self.intervals:
            raise DataError("synthetic spec needs at least one class interval")
        for a, b in self.intervals:
            if not (0.0 <= a <= b <= 1.0):
                raise DataError(f"class interval [{a}, {b}] must lie inside [0, 1]")
        if self.amplitude < 0 or self.noise_std < 0:
            raise DataError("amplitude and noise std must be nonnegative")
        if self.amplitude == 0.0 and len(set(self.intervals)) < len(self.intervals):
            raise DataError("two classes share an identical interval with zero "
                            "amplitude; they would be indistinguishable by construction")
        if self.image_size < 2:
            raise DataError("synthetic images must be at least 2x2")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 0:
            raise DataError("per-class sample counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return len(self.intervals)

    def class_name(self, c: int) -> str:
        return f"band{c}"

    def describe(self) -> str:
        lines = [f"intervals = {','.join(f'{a}:{b}' for a, b in self.intervals)}",
                 f"image_size = {self.image_size}",
                 f"amplitude = {self.amplitude}",
                 f"noise_std = {self.noise_std}",
                 f"train_per_class = {self.train_per_class}",
                 f"val_per_class = {self.val_per_class}",
                 f"test_per_class = {self.test_per_class}",
                 f"seed = {self.seed}"]
        return "\n".join(lines) + "\n"


def band_region_mask(spec: SynthSpec, c: int) -> np.ndarray:
    f = frequency_index(spec.image_size, spec.image_size).data
    a, b = spec.intervals[c]
    return (f >= a) & (f <= b)


def class_pattern(spec: SynthSpec, c: int) -> np.ndarray:
    """Deterministic per-class sign pattern on the class's band coefficients."""
    rng = Rng(spec.seed).derive(f"pattern:{c}")
    signs = np.where(rng.uniforms(3 * spec.image_size ** 2) < 0.5, -1.0, 1.0)
    signs = signs.reshape(3, spec.image_size, spec.image_size)
    return signs * band_region_mask(spec, c)[None, :, :]


def _synth_sample(spec: SynthSpec, pattern: np.ndarray, label: int,
                  sid: str, rng: Rng) -> ImageSample:
    coeffs = spec.amplitude * pattern
    if spec.noise_std > 0:
        coeffs = coeffs + spec.noise_std * rng.normals(coeffs.shape)
    img = plan_for(spec.image_size, spec.image_size).idct2_array(coeffs)
    lo, hi = img.min(), img.max()
    img = np.full_like(img, 0.5) if hi - lo < 1e-12 else (img - lo) / (hi - lo)
    return ImageSample(img, label, sid)


def generate_synth(spec: SynthSpec) -> dict:
    """Seeded train/val/test corpora; sample ids are split-disjoint."""
    counts = {"train": spec.train_per_class, "val": spec.val_per_class,
              "test": spec.test_per_class}
    base = Rng(spec.seed)
    splits = {}
    for split, per_class in counts.items():
        samples = []
        for c in range(spec.num_classes):
            pattern = class_pattern(spec, c)
            for i in range(per_class):
                sid = f"{spec.class_name(c)}_{split}_{i:04d}"
                samples.append(_synth_sample(spec, pattern, c, sid,
                                             base.derive(f"sample:{sid}")))
        splits[split] = samples
    return splits


def write_corpus(splits: dict, spec: SynthSpec, out_dir) -> None:
    """corpus layout: out/<split>/<class>/<id>.ppm, plus a spec.txt record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, samples in splits.items():
        for sample in samples:
            d = out / split / spec.class_name(sample.label)
            d.mkdir(parents=True, exist_ok=True)
            write_ppm(d / f"{sample.source_id}.ppm", sample.pixels)
    (out / "spec.txt").write_text(spec.describe())
