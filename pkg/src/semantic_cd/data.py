"""SECOND-layout datasets: loading, change-mask derivation and toy synthesis.

A dataset root holds four sibling directories, ``im1/``, ``im2/``, ``label1/``
and ``label2/``, with one ``<id>.png`` per sample in each. Labels are
single-channel 8-bit images whose value is the class index; 0 marks pixels
that did not change.
"""

from __future__ import annotations

import colorsys
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    EmptyDataset,
    LabelOutOfRange,
    MissingDirectory,
    ShapeError,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

NO_CHANGE = "no change"
SUBDIRS = ("im1", "im2", "label1", "label2")
SPLITS = ("train", "val", "test")

SECOND_CLASSES = (
    NO_CHANGE,
    "low vegetation",
    "non-vegetated ground surface",
    "tree",
    "water",
    "building",
    "playground",
)
SECOND_PALETTE = (
    (255, 255, 255),
    (0, 128, 0),
    (128, 128, 128),
    (0, 255, 0),
    (0, 0, 255),
    (128, 0, 0),
    (255, 0, 0),
)


def _normalize_name(name: str) -> str:
    return re.sub(r"\s+", " ", name.strip().lower())


def _spread_palette(n: int) -> list[tuple[int, int, int]]:
    out = []
    for k in range(n):
        r, g, b = colorsys.hsv_to_rgb((k * 0.618034) % 1.0, 0.85, 0.9)
        out.append((round(r * 255), round(g * 255), round(b * 255)))
    return out


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names; index 0 is always the no-change sentinel.

    The order fixes the channel order of every cost volume and semantic mask.
    """

    names: tuple[str, ...]
    palette: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        names = tuple(_normalize_name(n) for n in self.names)
        if len(names) < 2:
            raise ValueError("a vocabulary needs the no-change class plus at least one class")
        if any(not n for n in names):
            raise ValueError("class names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")
        if names[0] != NO_CHANGE:
            raise ValueError(f"names[0] must be {NO_CHANGE!r}, got {names[0]!r}")
        object.__setattr__(self, "names", names)

        palette = tuple(tuple(int(v) for v in c) for c in self.palette)
        if not palette:
            if names == SECOND_CLASSES:
                palette = SECOND_PALETTE
            else:
                palette = ((255, 255, 255),) + tuple(_spread_palette(len(names) - 1))
        if len(palette) != len(names) or any(len(c) != 3 for c in palette):
            raise ValueError("palette must hold one RGB triple per class")
        object.__setattr__(self, "palette", palette)

    no_change_index = 0

    @property
    def C(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(_normalize_name(name))

    @classmethod
    def second(cls) -> "ClassVocabulary":
        return cls(SECOND_CLASSES, SECOND_PALETTE)

    @classmethod
    def from_json(cls, obj) -> "ClassVocabulary":
        """Accept either a bare list of names or ``{"names": [...], "palette": [...]}``."""
        if isinstance(obj, dict):
            return cls(tuple(obj["names"]), tuple(map(tuple, obj.get("palette", ()))))
        return cls(tuple(obj))

    def to_json(self) -> dict:
        return {"names": list(self.names), "palette": [list(c) for c in self.palette]}

    @classmethod
    def load(cls, path: str | Path) -> "ClassVocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


@dataclass
class BiTemporalSample:
    image_pre: np.ndarray  # H x W x 3 float32 in [0, 1]
    image_post: np.ndarray
    label_pre: np.ndarray  # H x W int64
    label_post: np.ndarray
    change_mask: np.ndarray  # H x W uint8 in {0, 1}
    sample_id: str
    # pixels marked changed in one label map but not the other
    n_disagreements: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.label_pre.shape


@dataclass
class DatasetManifest:
    root: Path
    sample_ids: list[str]
    vocabulary: ClassVocabulary
    split: str = "train"
    incomplete: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __iter__(self):
        return iter(self.sample_ids)

    def to_json(self) -> dict:
        return {
            "root": str(self.root),
            "split": self.split,
            "vocabulary": list(self.vocabulary.names),
            "sample_ids": list(self.sample_ids),
        }

    def samples(self):
        for sid in self.sample_ids:
            yield load_sample(self, sid)


def derive_change_mask(label_pre: np.ndarray, label_post: np.ndarray) -> np.ndarray:
    """Binary change mask: a pixel is changed if either epoch carries a class."""
    label_pre = np.asarray(label_pre)
    label_post = np.asarray(label_post)
    if label_pre.shape != label_post.shape:
        raise ShapeMismatch(f"label shapes differ: {label_pre.shape} vs {label_post.shape}")
    return ((label_pre != 0) | (label_post != 0)).astype(np.uint8)


def _sample_paths(root: Path, sid: str) -> dict[str, Path]:
    return {sub: root / sub / f"{sid}.png" for sub in SUBDIRS}


def _read_label(path: Path, vocabulary: ClassVocabulary) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "P"):
                arr = np.asarray(im, dtype=np.uint8)
            elif im.mode in ("RGB", "RGBA"):
                arr = _rgb_label_to_index(np.asarray(im.convert("RGB")), vocabulary, path)
            else:
                raise DecodeError(f"{path}: unsupported label mode {im.mode}")
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    if arr.size and int(arr.max()) >= vocabulary.C:
        raise LabelOutOfRange(f"{path}: label value {int(arr.max())} >= C={vocabulary.C}")
    return arr.astype(np.int64)


def _rgb_label_to_index(rgb: np.ndarray, vocabulary: ClassVocabulary, path: Path) -> np.ndarray:
    # colour-coded labels as in the original SECOND release
    out = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    for k, color in enumerate(vocabulary.palette):
        out[np.all(rgb == np.asarray(color, dtype=np.uint8), axis=-1)] = k
    if np.any(out == 255):
        raise DecodeError(f"{path}: colour not in the vocabulary palette")
    return out


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def load_second_directory(
    root: str | Path,
    vocabulary: ClassVocabulary | None = None,
    split: str = "train",
    check_labels: bool = True,
) -> DatasetManifest:
    """Index a SECOND-layout directory.

    Samples missing from any of the four subdirectories are left out of
    ``sample_ids`` and listed in ``manifest.incomplete``. When no vocabulary is
    given, ``root/vocabulary.json`` is used if present, else the SECOND classes.
    """
    root = Path(root)
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    missing = [s for s in SUBDIRS if not (root / s).is_dir()]
    if missing:
        raise MissingDirectory(f"{root}: missing subdirectories {missing}")
    if vocabulary is None:
        vocab_file = root / "vocabulary.json"
        vocabulary = ClassVocabulary.load(vocab_file) if vocab_file.exists() else ClassVocabulary.second()

    stems = [{p.stem for p in (root / s).glob("*.png")} for s in SUBDIRS]
    complete = set.intersection(*stems)
    incomplete = sorted(set.union(*stems) - complete)
    if incomplete:
        log.warning("%s: %d incomplete samples: %s", root, len(incomplete), incomplete)
    if not complete:
        raise EmptyDataset(f"{root}: no complete samples")

    sample_ids = sorted(complete)
    if check_labels:
        for sid in sample_ids:
            paths = _sample_paths(root, sid)
            _read_label(paths["label1"], vocabulary)
            _read_label(paths["label2"], vocabulary)
    return DatasetManifest(root, sample_ids, vocabulary, split, incomplete)


def load_sample(manifest: DatasetManifest, sample_id: str) -> BiTemporalSample:
    if sample_id not in manifest.sample_ids:
        raise KeyError(sample_id)
    paths = _sample_paths(manifest.root, sample_id)
    im1 = _read_image(paths["im1"])
    im2 = _read_image(paths["im2"])
    lb1 = _read_label(paths["label1"], manifest.vocabulary)
    lb2 = _read_label(paths["label2"], manifest.vocabulary)
    shapes = {im1.shape[:2], im2.shape[:2], lb1.shape, lb2.shape}
    if len(shapes) != 1:
        raise ShapeMismatch(f"{sample_id}: spatial shapes disagree {sorted(shapes)}")
    mask = derive_change_mask(lb1, lb2)
    disagree = int(np.count_nonzero((lb1 != 0) != (lb2 != 0)))
    return BiTemporalSample(im1, im2, lb1, lb2, mask, sample_id, disagree)


@dataclass
class SyntheticSpec:
    n_samples: int = 8
    H: int = 64
    W: int = 64
    vocabulary: ClassVocabulary = field(default_factory=ClassVocabulary.second)
    seed: int = 7
    # rectangle corners snap to this grid
    patch_size: int = 8


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _random_rect(rng: np.random.Generator, gh: int, gw: int) -> tuple[int, int, int, int]:
    hmax = max(2, gh // 2)
    wmax = max(2, gw // 2)
    h = int(rng.integers(2, hmax + 1)) if gh >= 2 else 1
    w = int(rng.integers(2, wmax + 1)) if gw >= 2 else 1
    y = int(rng.integers(0, gh - h + 1))
    x = int(rng.integers(0, gw - w + 1))
    return y, x, h, w


def _synth_one(rng: np.random.Generator, spec: SyntheticSpec):
    H, W, p = spec.H, spec.W, spec.patch_size
    C = spec.vocabulary.C
    colors = np.asarray(spec.vocabulary.palette, dtype=np.float64) / 255.0
    gh, gw = H // p, W // p

    base = rng.uniform(0.3, 0.55) * np.array([1.0, 0.85, 0.7])
    texture = base + rng.normal(0.0, 0.03, size=(H, W, 3))
    gain = rng.uniform(0.92, 1.08)  # illumination shift between epochs, not a change
    pre, post = texture.copy(), texture * gain
    lb_pre = np.zeros((H, W), dtype=np.uint8)
    lb_post = np.zeros((H, W), dtype=np.uint8)

    def paint(img, rect, k):
        y, x, h, w = rect
        sl = (slice(y * p, (y + h) * p), slice(x * p, (x + w) * p))
        img[sl] = colors[k] + rng.normal(0.0, 0.02, size=img[sl].shape)
        return sl

    # unchanged objects look the same at both epochs and stay labelled 0
    for _ in range(int(rng.integers(0, 3))):
        rect = _random_rect(rng, gh, gw)
        k = int(rng.integers(1, C))
        sl = paint(pre, rect, k)
        post[sl] = pre[sl]
        lb_pre[sl] = 0
        lb_post[sl] = 0
    # changed objects go from class a to class b; painted last so at least one survives
    for _ in range(int(rng.integers(1, 4))):
        rect = _random_rect(rng, gh, gw)
        a = int(rng.integers(1, C))
        b = int(rng.integers(1, C - 1))
        b = b + 1 if b >= a else b
        sl = paint(pre, rect, a)
        paint(post, rect, b)
        lb_pre[sl] = a
        lb_post[sl] = b
    return _to_uint8(pre), _to_uint8(post), lb_pre, lb_post


def generate_synthetic_dataset(spec: SyntheticSpec, out: str | Path, split: str = "train") -> DatasetManifest:
    """Write a seeded toy dataset in SECOND layout and return its manifest.

    Every sample holds 1-3 rectangles that switch class between epochs and
    0-2 distractor rectangles that do not. Each class is painted with its
    palette colour, so the semantic task is learnable from appearance alone.
    Identical specs produce byte-identical files.
    """
    C = spec.vocabulary.C
    if C < 3:
        raise ValueError("synthetic data needs at least two non-background classes")
    if spec.H % spec.patch_size or spec.W % spec.patch_size:
        raise ShapeError(f"H, W must be multiples of {spec.patch_size}")
    if spec.n_samples < 1:
        raise ValueError("n_samples must be positive")
    out = Path(out)
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    spec.vocabulary.save(out / "vocabulary.json")

    rng = np.random.default_rng(spec.seed)
    width = max(5, len(str(spec.n_samples - 1)))
    for i in range(spec.n_samples):
        sid = f"{i:0{width}d}"
        im1, im2, lb1, lb2 = _synth_one(rng, spec)
        for sub, arr in zip(SUBDIRS, (im1, im2, lb1, lb2)):
            Image.fromarray(arr).save(out / sub / f"{sid}.png", optimize=False)
    return load_second_directory(out, spec.vocabulary, split)


def collate(samples: Sequence[BiTemporalSample]):
    """Stack samples into ``(img1, img2, label1, label2, mask)`` torch tensors."""
    import torch

    img1 = torch.from_numpy(np.stack([s.image_pre for s in samples])).permute(0, 3, 1, 2).contiguous()
    img2 = torch.from_numpy(np.stack([s.image_post for s in samples])).permute(0, 3, 1, 2).contiguous()
    lb1 = torch.from_numpy(np.stack([s.label_pre for s in samples]))
    lb2 = torch.from_numpy(np.stack([s.label_post for s in samples]))
    mask = torch.from_numpy(np.stack([s.change_mask for s in samples])).float()
    return img1, img2, lb1, lb2, mask
