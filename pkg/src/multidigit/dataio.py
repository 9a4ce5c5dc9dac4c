"""Datasets, preprocessing and augmentation.

Manifests are JSON-lines files. The first record is a header::

    {"alphabet": "0123456789", "max_len": 5}

and every following record describes one sample::

    {"id": "000017", "image": "images/000017.png", "label": "700",
     "boxes": [[x, y, w, h], ...]}

Image paths are relative to the manifest's directory. Boxes are optional
and, when present, there is one per character of ``label``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .sequence_head import SequenceLabel


class ManifestError(ValueError):
    pass


class LabelIndexError(ManifestError, IndexError):
    """A label uses a character outside the manifest's alphabet."""


Box = tuple[float, float, float, float]


@dataclass
class Sample:
    id: str
    text: str
    image: str | None = None
    boxes: list[Box] | None = None
    array: np.ndarray | None = field(default=None, repr=False, compare=False)

    def label(self, alphabet: str, max_len: int) -> SequenceLabel:
        return SequenceLabel.from_text(self.text, alphabet, max_len)

    def load(self, root: Path | str | None = None) -> np.ndarray:
        """Pixels as float32 ``(H, W, C)`` in ``[0, 1]``."""
        if self.array is not None:
            return self.array
        if self.image is None:
            raise ManifestError(f"sample {self.id} has neither an image path nor pixels")
        path = Path(root or ".") / self.image
        return read_image(path)


@dataclass
class DatasetManifest:
    alphabet: str
    max_len: int
    samples: list[Sample] = field(default_factory=list)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> list[SequenceLabel]:
        return [s.label(self.alphabet, self.max_len) for s in self.samples]

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(self.alphabet, self.max_len, [self.samples[i] for i in indices], self.root)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (self.alphabet, self.max_len, self.samples) == (other.alphabet, other.max_len, other.samples)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def _check_label(text: str, alphabet: str, where: str) -> None:
    for ch in text:
        if ch not in alphabet:
            raise LabelIndexError(f"{where}: character {ch!r} in label {text!r} is not in the alphabet {alphabet!r}")


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    header = None
    samples: list[Sample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if header is None:
                if "alphabet" not in rec or "max_len" not in rec:
                    raise ManifestError(f"{path}:{lineno}: first record must hold 'alphabet' and 'max_len'")
                header = rec
                if len(set(header["alphabet"])) != len(header["alphabet"]):
                    raise ManifestError(f"{path}:{lineno}: alphabet has repeated characters")
                continue
            try:
                sid, text = str(rec["id"]), str(rec["label"])
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            _check_label(text, header["alphabet"], f"{path}:{lineno} (sample {sid})")
            boxes = rec.get("boxes")
            if boxes is not None:
                boxes = [tuple(float(v) for v in b) for b in boxes]
                if len(boxes) != len(text):
                    raise ManifestError(f"{path}:{lineno}: sample {sid} has {len(boxes)} boxes for {len(text)} characters")
            image = rec.get("image")
            if check_images and image is not None and not (root / image).is_file():
                raise ManifestError(f"sample {sid}: image file {root / image} not found")
            samples.append(Sample(sid, text, image, boxes))
    if header is None:
        raise ManifestError(f"{path}: empty manifest (no header record)")
    return DatasetManifest(header["alphabet"], int(header["max_len"]), samples, root)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"alphabet": manifest.alphabet, "max_len": manifest.max_len}) + "\n")
        for s in manifest.samples:
            rec = {"id": s.id, "image": s.image, "label": s.text}
            if s.boxes is not None:
                rec["boxes"] = [list(b) for b in s.boxes]
            fh.write(json.dumps(rec) + "\n")
    return path


# --------------------------------------------------------------------------
# geometry


def union_box(boxes) -> Box:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        raise ValueError("need at least one box")
    x0 = boxes[:, 0].min()
    y0 = boxes[:, 1].min()
    x1 = (boxes[:, 0] + boxes[:, 2]).max()
    y1 = (boxes[:, 1] + boxes[:, 3]).max()
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def expand_box(box: Box, fraction: float = 0.3) -> Box:
    """Grow a box by ``fraction`` of its size along each axis, about its center."""
    x, y, w, h = box
    dw, dh = w * fraction, h * fraction
    return (x - dw / 2, y - dh / 2, w + dw, h + dh)


def _sample_axis(img_len: int, coords: np.ndarray):
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    i1 = i0 + 1
    valid0 = (i0 >= 0) & (i0 < img_len)
    valid1 = (i1 >= 0) & (i1 < img_len)
    return np.clip(i0, 0, img_len - 1), np.clip(i1, 0, img_len - 1), frac, valid0, valid1


def resize_region(image: np.ndarray, box: Box, size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample the region ``box`` of ``image`` to ``size``.

    Pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``. Area outside the image
    reads as zero.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    x, y, w, h = box
    out_h, out_w = size
    ys = y + (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = x + (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    r0, r1, fy, vr0, vr1 = _sample_axis(img.shape[0], ys)
    c0, c1, fx, vc0, vc1 = _sample_axis(img.shape[1], xs)

    def gather(r, vr, c, vc):
        vals = img[r][:, c]
        return vals * (vr[:, None] & vc[None, :])[:, :, None]

    fy = fy[:, None, None].astype(np.float32)
    fx = fx[None, :, None].astype(np.float32)
    top = gather(r0, vr0, c0, vc0) * (1 - fx) + gather(r0, vr0, c1, vc1) * fx
    bottom = gather(r1, vr1, c0, vc0) * (1 - fx) + gather(r1, vr1, c1, vc1) * fx
    return (top * (1 - fy) + bottom * fy).astype(np.float32)


def crop_and_resize(image: np.ndarray, boxes, size: tuple[int, int] = (64, 64), expand: float = 0.3) -> np.ndarray:
    """Crop the union of the character boxes, grown by ``expand``, and
    resize it to ``size``."""
    if boxes is None or len(boxes) == 0:
        raise ValueError("crop_and_resize needs at least one character box")
    region = expand_box(union_box(boxes), expand)
    return resize_region(image, region, size)


def random_shift_crop(
    image: np.ndarray,
    rng: np.random.Generator | None = None,
    size: tuple[int, int] = (54, 54),
    train: bool = True,
    offset: tuple[int, int] | None = None,
    expected: tuple[int, int] | None = (64, 64),
) -> np.ndarray:
    """Cut a ``size`` window at a uniformly random offset (train) or the
    center (eval). ``offset`` forces the top-left corner."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if expected is not None and (h, w) != tuple(expected):
        raise ValueError(f"expected a {expected[0]}x{expected[1]} image, got {h}x{w}")
    ch, cw = size
    if ch > h or cw > w:
        raise ValueError(f"crop {size} does not fit in {h}x{w}")
    if offset is None:
        if train:
            if rng is None:
                raise ValueError("random crops need an rng")
            offset = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)))
        else:
            offset = ((h - ch) // 2, (w - cw) // 2)
    oy, ox = offset
    if not (0 <= oy <= h - ch and 0 <= ox <= w - cw):
        raise ValueError(f"offset {offset} out of range")
    return image[oy : oy + ch, ox : ox + cw]


def mean_subtract(image: np.ndarray) -> np.ndarray:
    """Subtract the image's own mean over all pixels and channels."""
    image = np.asarray(image)
    dtype = image.dtype if image.dtype.kind == "f" else np.float32
    return (image - image.mean(dtype=np.float64)).astype(dtype)


# --------------------------------------------------------------------------
# whole-dataset preparation


@dataclass(frozen=True)
class Pipeline:
    """Crop geometry shared by training and inference."""

    resize: tuple[int, int] = (64, 64)
    crop: tuple[int, int] = (54, 54)
    expand: float = 0.3

    @classmethod
    def for_input(cls, input_shape, margin: float = 64 / 54, expand: float = 0.3) -> "Pipeline":
        h, w = input_shape[:2]
        return cls((int(round(h * margin)), int(round(w * margin))), (h, w), expand)

    def to_dict(self) -> dict:
        return {"resize": list(self.resize), "crop": list(self.crop), "expand": self.expand}

    @classmethod
    def from_dict(cls, d: dict) -> "Pipeline":
        return cls(tuple(d["resize"]), tuple(d["crop"]), float(d["expand"]))

    def stage_one(self, image: np.ndarray, boxes) -> np.ndarray:
        if boxes:
            return crop_and_resize(image, boxes, self.resize, self.expand)
        h, w = image.shape[:2]
        return resize_region(image, (0.0, 0.0, float(w), float(h)), self.resize)

    def stage_two(self, image: np.ndarray, rng=None, train: bool = False) -> np.ndarray:
        crop = random_shift_crop(image, rng, self.crop, train=train, expected=self.resize)
        return mean_subtract(crop)

    def __call__(self, image, boxes, rng=None, train: bool = False) -> np.ndarray:
        return self.stage_two(self.stage_one(image, boxes), rng, train)


def to_channels(img: np.ndarray, channels: int | None, name: str = "image") -> np.ndarray:
    """Average to grayscale or replicate gray to ``channels`` as needed."""
    if channels is None or img.shape[2] == channels:
        return img
    if img.shape[2] == 4:
        img = img[:, :, :3]
        if channels == 3:
            return img
    if channels == 1:
        return img.mean(axis=2, keepdims=True)
    if img.shape[2] == 1:
        return np.repeat(img, channels, axis=2)
    raise ValueError(f"{name} has {img.shape[2]} channels, model expects {channels}")


def load_resized(manifest: DatasetManifest, pipeline: Pipeline, channels: int | None = None) -> np.ndarray:
    """Stage-one crops of every sample stacked as ``(B, h, w, C)`` float32."""
    h, w = pipeline.resize
    out = None
    for i, s in enumerate(manifest.samples):
        img = to_channels(s.load(manifest.root), channels, s.id)
        crop = pipeline.stage_one(img, s.boxes)
        if out is None:
            out = np.empty((len(manifest), h, w, crop.shape[2]), dtype=np.float32)
        out[i] = crop
    if out is None:
        out = np.empty((0, h, w, channels or 1), dtype=np.float32)
    return out


def augment_batch(resized: np.ndarray, pipeline: Pipeline, rng=None, train: bool = False) -> np.ndarray:
    """Stage two (shift crop, mean subtraction) over a batch of stage-one crops."""
    ch, cw = pipeline.crop
    out = np.empty((len(resized), ch, cw, resized.shape[3]), dtype=np.float32)
    for i, img in enumerate(resized):
        out[i] = pipeline.stage_two(img, rng, train)
    return out
