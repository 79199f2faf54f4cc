"""Synthetic paired corpus: X-ray-like images, CT-like volumes and templated reports.

Each sample is generated from its own derived random stream, so a corpus is
the same bytes regardless of generation order. Reports name the lesion class
and its in-plane location but never a slice index: the text says *what*, the
model must find *where*.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import stream

CLASSES = ("nodule", "effusion", "opacity", "none")

SPECIAL = ("[PAD]", "[CLS]")
WORDS = (
    # lesion words
    "nodule", "effusion", "opacity",
    # descriptors
    "small", "large", "rounded", "dense", "hazy", "patchy", "layering", "pleural", "focal", "faint",
    # locations
    "upper", "lower", "left", "right", "base", "zone", "lobe",
    # function words
    "present", "in", "the", "is", "seen", "there", "a", "no", "noted", "at",
    # normal findings and filler
    "lungs", "are", "clear", "heart", "size", "normal", "acute", "cardiopulmonary", "process",
    "mediastinum", "unremarkable", "osseous", "abnormality", "stable", "appearance", "otherwise",
    "study", "within", "limits", "contour", "trachea", "midline", ".",
)


class Vocabulary:
    """Bijective token <-> id map; ids 0 and 1 are [PAD] and [CLS]."""

    def __init__(self, tokens: Sequence[str] = SPECIAL + WORDS):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if len(tokens) > 256:
            raise ValueError("vocabulary is limited to 256 tokens")
        self.tokens = tuple(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.ids[w] for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.ids["[PAD]"]

    @property
    def cls_id(self) -> int:
        return self.ids["[CLS]"]


VOCAB = Vocabulary()


@dataclass(frozen=True)
class LesionSpec:
    """Per-class compositing parameters.

    ``delta`` is the additive intensity of a lesion voxel; ``radius`` bounds
    the blob radius in pixels (effusions use it as the fluid band height).
    """

    classes: tuple[str, ...] = CLASSES
    delta: dict = field(default_factory=lambda: {"nodule": 0.35, "effusion": 0.25, "opacity": 0.22})
    radius: dict = field(default_factory=lambda: {"nodule": (1.5, 2.6), "effusion": (5.0, 9.0), "opacity": (3.5, 5.5)})
    image_size: int = 32
    depth: int = 16
    background_mean: float = 0.3
    background_amplitude: float = 0.05
    noise_std: float = 0.02
    run_length: tuple[int, int] = (2, 4)

    def __post_init__(self):
        unknown = set(self.classes) - set(CLASSES)
        if unknown or not self.classes:
            raise ValueError(f"unknown lesion classes {sorted(unknown)}")
        spread = 3 * self.background_amplitude + 4 * self.noise_std
        peak = max(self.delta[c] * (2.0 if c == "opacity" else 1.0) for c in self.classes if c != "none") if set(self.classes) - {"none"} else 0.0
        if self.background_mean + spread + peak > 1.0 + 1e-9 or self.background_mean - spread < 0:
            raise ValueError("lesion/background intensities would leave [0, 1]")


@dataclass
class SyntheticSample:
    kind: int  # 2 or 3
    pixels: np.ndarray  # (H, W) or (S, H, W), float32
    label: int
    lesion_slices: tuple[int, ...]
    report: list[int]

    def __eq__(self, other):
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.label == other.label
            and tuple(self.lesion_slices) == tuple(other.lesion_slices)
            and list(self.report) == list(other.report)
            and self.pixels.shape == other.pixels.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
        )


# ---------------------------------------------------------------------------
# rendering


def _background(rng: np.random.Generator, shape, spec: LesionSpec) -> np.ndarray:
    smooth = gaussian_filter(rng.standard_normal(shape), sigma=4.0, mode="wrap")
    smooth /= smooth.std() + 1e-12
    base = spec.background_mean + spec.background_amplitude * np.clip(smooth, -3, 3)
    return base + spec.noise_std * np.clip(rng.standard_normal(shape), -4, 4)


def _lesion_mask(rng: np.random.Generator, name: str, spec: LesionSpec):
    """In-plane mask (H, W) of per-pixel lesion intensity, plus location words."""
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    side = "left" if rng.random() < 0.5 else "right"
    # radiological convention: patient left is image right
    x_lo, x_hi = (n / 2, n) if side == "left" else (0, n / 2)
    lo, hi = spec.radius[name]
    r = rng.uniform(lo, hi)
    if name == "effusion":
        top = n - r
        meniscus = top + 2.0 * ((xx - (x_lo + x_hi) / 2) / (n / 4)) ** 2
        mask = (yy >= meniscus) & (xx >= x_lo) & (xx < x_hi)
        return mask * spec.delta[name], ("lower", side, "base")
    vert = "upper" if rng.random() < 0.5 else "lower"
    y_lo, y_hi = (0, n / 2) if vert == "upper" else (n / 2, n)
    margin = r + 1
    cy = rng.uniform(y_lo + margin, y_hi - margin)
    cx = rng.uniform(x_lo + margin, x_hi - margin)
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
    if name == "opacity":
        texture = gaussian_filter(rng.standard_normal((n, n)), 1.0)
        texture /= texture.std() + 1e-12
        return mask * spec.delta[name] * (1.0 + 0.4 * np.clip(texture, -2.5, 2.5)), (vert, side, "zone")
    return mask * spec.delta[name], (vert, side, "zone")


_FILLERS = (
    "heart size is normal .",
    "mediastinum is unremarkable .",
    "no acute osseous abnormality .",
    "trachea is midline .",
    "heart contour is stable .",
    "otherwise stable appearance .",
)
_NORMAL = (
    "lungs are clear .",
    "no acute cardiopulmonary process .",
    "study within normal limits .",
)
_DESCRIPTORS = {
    "nodule": ("small", "rounded", "dense", "focal"),
    "opacity": ("hazy", "patchy", "faint", "focal"),
    "effusion": ("small", "large", "layering", "pleural"),
}


def render_report(rng: np.random.Generator, name: str, location: tuple[str, str, str] | None) -> list[str]:
    """Three or more clauses; lesion words appear only for the lesion present."""
    if name == "none":
        first = _NORMAL[rng.integers(len(_NORMAL))].split()
        extra = [_NORMAL[rng.integers(len(_NORMAL))]]
    else:
        vert, side, place = location
        desc = _DESCRIPTORS[name][rng.integers(4)]
        if name == "effusion":
            variants = (
                f"{desc} {side} effusion is present .",
                f"there is a {desc} effusion at the {side} base .",
            )
        else:
            variants = (
                f"{desc} {name} present in the {vert} {side} {place} .",
                f"there is a {desc} {name} in the {vert} {side} {place} .",
                f"{name} is seen in the {vert} {side} lobe .",
            )
        first = variants[rng.integers(len(variants))].split()
        extra = []
    fillers = list(_FILLERS)
    rng.shuffle(fillers)
    words = list(first)
    for clause in extra + fillers[:2]:
        words.extend(clause.split())
    return words


def parse_report(ids: Sequence[int], vocab: Vocabulary = VOCAB) -> str:
    """Rule-based decoder: the lesion word present, or ``"none"``."""
    words = set(vocab.decode(ids))
    found = [c for c in CLASSES[:-1] if c in words]
    if len(found) > 1:
        raise ValueError(f"report names several lesion classes: {found}")
    return found[0] if found else "none"


def generate_2d_sample(seed: int, spec: LesionSpec | None = None, index: int = 0, label: int | None = None) -> SyntheticSample:
    spec = spec or LesionSpec()
    rng = stream(seed, "sample2d", index)
    if label is None:
        label = index % len(spec.classes)
    name = spec.classes[label]
    n = spec.image_size
    img = _background(rng, (n, n), spec)
    location = None
    if name != "none":
        mask, location = _lesion_mask(rng, name, spec)
        img = img + mask
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    report = VOCAB.encode(render_report(rng, name, location))
    return SyntheticSample(2, img, CLASSES.index(name), (), report)


def generate_3d_sample(seed: int, spec: LesionSpec | None = None, index: int = 0, label: int | None = None) -> SyntheticSample:
    spec = spec or LesionSpec()
    rng = stream(seed, "sample3d", index)
    if label is None:
        label = index % len(spec.classes)
    name = spec.classes[label]
    n, s = spec.image_size, spec.depth
    vol = _background(rng, (s, n, n), spec)
    location = None
    truth: tuple[int, ...] = ()
    if name != "none":
        mask, location = _lesion_mask(rng, name, spec)
        lo, hi = spec.run_length
        run = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, s - run + 1))
        truth = tuple(range(start, start + run))
        vol[start : start + run] += mask[None]
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    report = VOCAB.encode(render_report(rng, name, location))
    return SyntheticSample(3, vol, CLASSES.index(name), truth, report)


def generate_corpus(n_2d: int, n_3d: int, seed: int, spec: LesionSpec | None = None) -> list[SyntheticSample]:
    """``n_2d`` images followed by ``n_3d`` volumes; classes cycle so the corpus is balanced."""
    spec = spec or LesionSpec()
    samples = [generate_2d_sample(seed, spec, i) for i in range(n_2d)]
    samples += [generate_3d_sample(seed, spec, i) for i in range(n_3d)]
    return samples


# ---------------------------------------------------------------------------
# on-disk format

MAGIC = b"UMDI"
FORMAT_VERSION = 1


class DatasetError(Exception):
    """Base class for dataset file problems."""


class DatasetMagicError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetCorruptError(DatasetError):
    pass


def encode_dataset(samples: Sequence[SyntheticSample]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", FORMAT_VERSION, len(samples))
    for smp in samples:
        if smp.kind not in (2, 3) or smp.pixels.ndim != smp.kind:
            raise ValueError(f"sample kind {smp.kind} does not match pixel shape {smp.pixels.shape}")
        out += struct.pack("<B", smp.kind)
        out += struct.pack(f"<{smp.kind}H", *smp.pixels.shape)
        out += struct.pack("<BB", smp.label, len(smp.lesion_slices))
        out += bytes(smp.lesion_slices)
        out += struct.pack(f"<H{len(smp.report)}H", len(smp.report), *smp.report)
        out += np.ascontiguousarray(smp.pixels, dtype="<f4").tobytes()
    return bytes(out)


def decode_dataset(buf: bytes) -> list[SyntheticSample]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DatasetTruncatedError(f"file ends at byte {len(view)}, needed {pos + n}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(view[:4]) != MAGIC:
        if len(view) < 4:
            raise DatasetTruncatedError("file shorter than the magic number")
        raise DatasetMagicError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    take(4)
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"dataset version {version}, reader supports {FORMAT_VERSION}")
    (count,) = struct.unpack("<I", take(4))
    samples = []
    for _ in range(count):
        (kind,) = struct.unpack("<B", take(1))
        if kind not in (2, 3):
            raise DatasetCorruptError(f"unknown sample kind {kind}")
        dims = struct.unpack(f"<{kind}H", take(2 * kind))
        label, n_slices = struct.unpack("<BB", take(2))
        lesion = tuple(take(n_slices))
        (n_tokens,) = struct.unpack("<H", take(2))
        report = list(struct.unpack(f"<{n_tokens}H", take(2 * n_tokens)))
        size = int(np.prod(dims))
        pixels = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        samples.append(SyntheticSample(kind, pixels, label, lesion, report))
    if pos != len(view):
        raise DatasetCorruptError(f"{len(view) - pos} trailing bytes after {count} samples")
    return samples


def write_dataset(samples: Sequence[SyntheticSample], path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(samples))


def read_dataset(path) -> list[SyntheticSample]:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
