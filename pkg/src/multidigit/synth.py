"""Procedural multi-character images with exact labels and character boxes.

Glyphs come from Pillow's bundled default font, so no external data is
needed. Each sample is rendered from its own RNG stream seeded by
``(seed, index)``; any subset can be regenerated independently and in
parallel.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .dataio import DatasetManifest, Sample, write_image, write_manifest


@dataclass(frozen=True)
class SynthConfig:
    alphabet: str = "0123456789"
    max_len: int = 5
    # relative weight of lengths 1..len(length_weights); must not exceed max_len
    length_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    overflow_rate: float = 0.0
    canvas: tuple[int, int] = (64, 160)
    channels: int = 1
    font_size: tuple[int, int] = (16, 30)
    rotation: float = 8.0  # degrees, per glyph
    shear: float = 0.25
    char_scale_jitter: float = 0.12
    spacing: tuple[float, float] = (-0.08, 0.35)  # gap as a fraction of font size
    baseline_jitter: float = 0.08
    min_contrast: float = 0.25
    noise: float = 0.08
    blur: float = 0.8
    distractor_rate: float = 0.5
    clutter_lines: int = 3
    bold_rate: float = 0.3

    def length_probs(self) -> np.ndarray:
        """Probabilities of lengths ``1 .. max_len`` followed by overflow."""
        w = np.zeros(self.max_len + 1)
        w[: len(self.length_weights)] = self.length_weights
        w[: self.max_len] *= (1.0 - self.overflow_rate) / w[: self.max_len].sum()
        w[self.max_len] = self.overflow_rate
        return w

    def __post_init__(self):
        if len(self.length_weights) > self.max_len:
            raise ValueError("length_weights covers lengths beyond max_len")
        if not 0.0 <= self.overflow_rate < 1.0:
            raise ValueError("overflow_rate must be in [0, 1)")
        if sum(self.length_weights) <= 0:
            raise ValueError("length_weights must have positive mass")


@functools.lru_cache(maxsize=64)
def _font(size: int):
    return ImageFont.load_default(size=size)


def _glyph(ch: str, size: int, angle: float, shear: float, bold: bool) -> np.ndarray:
    """Alpha mask of one glyph, tightly cropped, values in [0, 1]."""
    pad = size
    im = Image.new("L", (3 * size, 3 * size), 0)
    ImageDraw.Draw(im).text((pad, pad // 2), ch, fill=255, font=_font(size), stroke_width=1 if bold else 0, stroke_fill=255)
    c = 1.5 * size
    a = math.radians(angle)
    cos, sin = math.cos(a), math.sin(a)
    # inverse map output -> input: rotation composed with horizontal shear
    m = np.array([[cos, -sin + shear * cos], [sin, cos + shear * sin]])
    coeffs = (m[0, 0], m[0, 1], c - m[0, 0] * c - m[0, 1] * c, m[1, 0], m[1, 1], c - m[1, 0] * c - m[1, 1] * c)
    im = im.transform(im.size, Image.AFFINE, coeffs, resample=Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    ys, xs = np.nonzero(arr > 0.5)
    if len(ys) == 0:
        return np.zeros((1, 1), np.float32)
    return arr[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]


def _paste(canvas: np.ndarray, alpha: np.ndarray, color: np.ndarray, x: int, y: int) -> None:
    h, w = alpha.shape
    ch, cw = canvas.shape[:2]
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, cw), min(y + h, ch)
    if x1 <= x0 or y1 <= y0:
        return
    a = alpha[y0 - y : y1 - y, x0 - x : x1 - x, None]
    canvas[y0:y1, x0:x1] = canvas[y0:y1, x0:x1] * (1 - a) + color * a


def _layout(rng, text: str, cfg: SynthConfig, size: int, bold: bool):
    glyphs, offsets = [], []
    x = 0.0
    for ch in text:
        s = max(6, int(round(size * (1 + rng.uniform(-cfg.char_scale_jitter, cfg.char_scale_jitter)))))
        g = _glyph(ch, s, rng.uniform(-cfg.rotation, cfg.rotation), rng.uniform(-cfg.shear, cfg.shear), bold)
        dy = rng.uniform(-cfg.baseline_jitter, cfg.baseline_jitter) * size + (size - g.shape[0]) * 0.5
        glyphs.append(g)
        offsets.append((x, dy))
        x += g.shape[1] + rng.uniform(*cfg.spacing) * size
    return glyphs, offsets


def sample_text(rng: np.random.Generator, cfg: SynthConfig) -> str:
    probs = cfg.length_probs()
    bucket = int(rng.choice(len(probs), p=probs))
    length = bucket + 1 if bucket < cfg.max_len else cfg.max_len + int(rng.integers(1, 3))
    return "".join(cfg.alphabet[i] for i in rng.integers(0, len(cfg.alphabet), size=length))


def render(rng: np.random.Generator, text: str, cfg: SynthConfig):
    """Render ``text`` on a cluttered canvas; returns ``(pixels, boxes)``.

    Pixels are quantized to 8 bits so in-memory and PNG copies agree.
    """
    ch, cw = cfg.canvas
    nc = cfg.channels
    bg = rng.uniform(0, 1, size=nc)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    fg = np.clip(bg + sign * rng.uniform(cfg.min_contrast, 0.8, size=nc), 0, 1)
    if np.abs(fg - bg).mean() < cfg.min_contrast:
        fg = np.where(bg > 0.5, bg - cfg.min_contrast - 0.1, bg + cfg.min_contrast + 0.1).clip(0, 1)

    yy, xx = np.mgrid[0:ch, 0:cw].astype(np.float32)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx / cw + np.sin(theta) * yy / ch) * rng.uniform(-0.25, 0.25)
    canvas = (bg[None, None, :] + ramp[:, :, None]).astype(np.float32)

    draw_im = Image.new("L", (cw, ch), 0)
    draw = ImageDraw.Draw(draw_im)
    for _ in range(int(rng.integers(0, cfg.clutter_lines + 1))):
        pts = [tuple(rng.uniform([0, 0], [cw, ch])) for _ in range(2)]
        draw.line(pts, fill=int(rng.integers(60, 256)), width=int(rng.integers(1, 3)))
    clutter = np.asarray(draw_im, np.float32)[:, :, None] / 255.0 * 0.5
    clutter_color = rng.uniform(0, 1, size=nc)
    canvas = canvas * (1 - clutter) + clutter_color * clutter

    bold = rng.random() < cfg.bold_rate
    size = int(rng.integers(cfg.font_size[0], cfg.font_size[1] + 1))
    while True:
        glyphs, offsets = _layout(rng, text, cfg, size, bold)
        width = offsets[-1][0] + glyphs[-1].shape[1]
        height = max(o[1] + g.shape[0] for g, o in zip(glyphs, offsets)) - min(o[1] for o in offsets)
        if width <= cw - 4 and height <= ch - 4 or size <= 8:
            break
        size = max(8, int(size * 0.85))
    top = min(o[1] for o in offsets)
    x0 = rng.uniform(2, max(2.0, cw - width - 2))
    y0 = rng.uniform(2, max(2.0, ch - height - 2)) - top

    boxes = []
    for g, (gx, gy) in zip(glyphs, offsets):
        x, y = int(round(x0 + gx)), int(round(y0 + gy))
        _paste(canvas, g, fg, x, y)
        boxes.append((float(x), float(y), float(g.shape[1]), float(g.shape[0])))

    # unlabeled neighbours just outside the labeled run, as on real house fronts
    for side in (-1, 1):
        if rng.random() >= cfg.distractor_rate / 2:
            continue
        dch = cfg.alphabet[int(rng.integers(len(cfg.alphabet)))]
        g = _glyph(dch, size, rng.uniform(-cfg.rotation, cfg.rotation), 0.0, bold)
        gap = rng.uniform(0.6, 1.2) * size
        if side < 0:
            x = int(round(x0 - gap - g.shape[1]))
        else:
            x = int(round(x0 + width + gap))
        y = int(round(y0 + top + rng.uniform(-0.2, 0.2) * size))
        _paste(canvas, g, np.clip(fg + rng.uniform(-0.2, 0.2, size=nc), 0, 1), x, y)

    if cfg.blur > 0:
        from scipy.ndimage import gaussian_filter

        sigma = rng.uniform(0, cfg.blur)
        if sigma > 0.05:
            canvas = gaussian_filter(canvas, sigma=(sigma, sigma, 0))
    canvas = canvas + rng.normal(0, rng.uniform(0, cfg.noise), size=canvas.shape)
    canvas = np.clip(canvas, 0, 1)
    canvas = (np.rint(canvas * 255.0) / 255.0).astype(np.float32)
    return canvas, boxes


def synth_generate(
    cfg: SynthConfig,
    count: int,
    seed: int = 0,
    out_dir=None,
    render_images: bool = True,
    start: int = 0,
) -> DatasetManifest:
    """Generate ``count`` samples.

    With ``out_dir`` the images are written as PNGs under ``out_dir/images``
    together with ``out_dir/manifest.jsonl``; the returned manifest always
    keeps the pixels in memory as well. ``render_images=False`` draws labels
    only (the label stream is identical).
    """
    samples = []
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        (root / "images").mkdir(parents=True, exist_ok=True)
    for i in range(start, start + count):
        rng = np.random.default_rng([seed, i])
        text = sample_text(rng, cfg)
        sid = f"{i:06d}"
        s = Sample(sid, text)
        if render_images:
            pixels, boxes = render(rng, text, cfg)
            s.array = pixels
            s.boxes = boxes
            if root is not None:
                s.image = f"images/{sid}.png"
                write_image(root / s.image, pixels)
        samples.append(s)
    manifest = DatasetManifest(cfg.alphabet, cfg.max_len, samples, root)
    if root is not None:
        write_manifest(manifest, root / "manifest.jsonl")
    return manifest
