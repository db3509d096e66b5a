"""BreakHis-style dataset ingestion, stratified splits and a synthetic texture generator."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .metrics import CLASS_NAMES

log = logging.getLogger(__name__)

MAGNIFICATIONS = ("40X", "100X", "200X", "400X")
BENIGN = ("A", "F", "PT", "TA")
MALIGNANT = ("DC", "LC", "MC", "PC")
FULL_NAMES = {
    "A": "adenosis", "F": "fibroadenoma", "PT": "phyllodes_tumor", "TA": "tubular_adenoma",
    "DC": "ductal_carcinoma", "LC": "lobular_carcinoma", "MC": "mucinous_carcinoma", "PC": "papillary_carcinoma",
}
# images per (sub-class, magnification) in the public BreakHis release
CLASS_COUNTS = {
    "F": (253, 260, 264, 237),
    "A": (114, 113, 111, 106),
    "TA": (149, 150, 140, 130),
    "PT": (109, 121, 108, 115),
    "DC": (864, 903, 896, 788),
    "LC": (156, 170, 163, 137),
    "MC": (205, 222, 196, 169),
    "PC": (145, 142, 135, 138),
}

_CLASS_LOOKUP = {}
for _abbr, _full in FULL_NAMES.items():
    for _key in (_abbr, _full, _full.replace("_", " "), _full.replace("_", "-"), _full.replace("_", "")):
        _CLASS_LOOKUP[_key.lower()] = _abbr


def class_index(name: str) -> int:
    return CLASS_NAMES.index(normalize_class(name))


def normalize_class(name: str) -> str:
    key = name.strip().lower()
    if key not in _CLASS_LOOKUP:
        raise DataError(f"unknown class {name!r}; expected one of {', '.join(CLASS_NAMES)}")
    return _CLASS_LOOKUP[key]


def normalize_magnification(token: str) -> str:
    t = token.strip().upper()
    if not t.endswith("X"):
        t += "X"
    if t not in MAGNIFICATIONS:
        raise ValueError(f"unknown magnification {token!r}; expected one of {', '.join(MAGNIFICATIONS)}")
    return t


@dataclass(frozen=True)
class SampleDescriptor:
    path: str
    class_name: str
    magnification: str

    @property
    def label(self) -> int:
        return CLASS_NAMES.index(self.class_name)


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int
    class_name: str
    magnification: str
    source_path: str


@dataclass
class ScanResult:
    samples: list
    skipped: list = field(default_factory=list)
    root: str = ""

    def counts(self) -> dict:
        """{class: {magnification: n}}"""
        c = Counter((s.class_name, s.magnification) for s in self.samples)
        return {k: {m: c[(k, m)] for m in MAGNIFICATIONS} for k in CLASS_NAMES}

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


# ------------------------------------------------------------------ scanning
def scan_dataset(root, layout: str = "breakhis-tree") -> ScanResult:
    """List every PNG under ``root``.

    ``breakhis-tree``: ``{benign|malignant}/{sub-class}/{magnification}/*.png``
    (sub-class as abbreviation or full name, deeper nesting tolerated).
    ``manifest``: ``root`` is a CSV file (or a directory holding ``manifest.csv``)
    with columns ``path,class_name,magnification``; relative paths resolve
    against the CSV's directory.
    """
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    if layout == "manifest":
        return _scan_manifest(root)
    if layout != "breakhis-tree":
        raise ValueError(f"unknown layout {layout!r}; expected breakhis-tree or manifest")
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    samples, skipped = [], []
    for group in sorted(p for p in root.iterdir() if p.is_dir()):
        if group.name.lower() not in ("benign", "malignant"):
            raise DataError(f"unexpected directory {group.name!r} under {root}; expected benign/ or malignant/")
        for sub in sorted(p for p in group.iterdir() if p.is_dir()):
            cls = normalize_class(sub.name)
            expected = BENIGN if group.name.lower() == "benign" else MALIGNANT
            if cls not in expected:
                raise DataError(f"class {sub.name!r} filed under {group.name}/")
            for mag_dir in sorted(p for p in sub.iterdir() if p.is_dir()):
                try:
                    mag = normalize_magnification(mag_dir.name)
                except ValueError as exc:
                    raise DataError(str(exc)) from None
                for path in sorted(mag_dir.rglob("*")):
                    if not path.is_file() or path.suffix.lower() != ".png":
                        continue
                    if not os.access(path, os.R_OK):
                        skipped.append((str(path), "unreadable"))
                        continue
                    samples.append(SampleDescriptor(str(path.relative_to(root)), cls, mag))
    if not samples:
        log.warning("no images found under %s", root)
    for path, reason in skipped:
        log.warning("skipped %s: %s", path, reason)
    return ScanResult(samples, skipped, str(root.resolve()))


def _scan_manifest(root: Path) -> ScanResult:
    manifest = root / "manifest.csv" if root.is_dir() else root
    if not manifest.is_file():
        raise DataError(f"manifest {manifest} not found")
    base = manifest.parent
    samples, skipped = [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "class_name", "magnification"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"manifest {manifest} lacks columns {sorted(missing)}")
        for row in reader:
            try:
                mag = normalize_magnification(row["magnification"])
            except ValueError as exc:
                raise DataError(str(exc)) from None
            cls = normalize_class(row["class_name"])
            full = base / row["path"]
            if not full.is_file() or not os.access(full, os.R_OK):
                skipped.append((str(full), "missing or unreadable"))
                continue
            samples.append(SampleDescriptor(row["path"], cls, mag))
    samples.sort(key=lambda s: s.path)
    if not samples:
        log.warning("manifest %s lists no readable images", manifest)
    return ScanResult(samples, skipped, str(base.resolve()))


def filter_magnification(samples, magnification: str | None) -> list:
    if magnification is None or magnification.lower() in ("all", "pooled"):
        return list(samples)
    mag = normalize_magnification(magnification)
    return [s for s in samples if s.magnification == mag]


# ------------------------------------------------------------------ splitting
@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int
    ratios: tuple
    stratification: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def paths(xs):
            return [s.path for s in xs]

        return {"seed": self.seed, "ratios": list(self.ratios), "train": paths(self.train),
                "val": paths(self.val), "test": paths(self.test), "stratification": self.stratification}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def split_sizes(n: int, ratios: tuple) -> list:
    """Largest-remainder apportionment of n items: each size within 1 of ratio*n."""
    exact = [r * n for r in ratios]
    sizes = [int(math.floor(e + 1e-9)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def _interleave(sizes: list) -> list:
    """Split index per position, always picking the split furthest behind its pro-rata share."""
    n = sum(sizes)
    counts = [0] * len(sizes)
    out = []
    for c in range(1, n + 1):
        deficits = [sizes[s] * c / n - counts[s] for s in range(len(sizes))]
        s = max(range(len(sizes)), key=lambda j: (deficits[j], -j))
        counts[s] += 1
        out.append(s)
    return out


def split(samples, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Stratified, seeded train/val/test split.

    Per class, split sizes come from largest-remainder rounding (each within
    one sample of ``ratio * n_class``).  The class's samples are grouped by
    magnification, shuffled within each group, and dealt to the splits in an
    evenly interleaved pattern, so every magnification stratum also receives
    close to its proportional share.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    samples = sorted(samples, key=lambda s: s.path)
    rng = np.random.default_rng(seed)
    by_class = OrderedDict((k, []) for k in CLASS_NAMES)
    for s in samples:
        by_class[s.class_name].append(s)
    active = sum(1 for r in ratios if r > 0)
    parts = ([], [], [])
    strat = {}
    for cls, items in by_class.items():
        if not items:
            continue
        if len(items) < active:
            raise ValueError(f"class {cls} has {len(items)} samples, fewer than the {active} non-empty splits")
        ordered = []
        for mag in MAGNIFICATIONS:
            group = [s for s in items if s.magnification == mag]
            perm = rng.permutation(len(group))
            ordered.extend(group[i] for i in perm)
        strat[cls] = {m: {"train": 0, "val": 0, "test": 0} for m in MAGNIFICATIONS}
        for s, which in zip(ordered, _interleave(split_sizes(len(ordered), ratios))):
            parts[which].append(s)
            strat[cls][s.magnification][("train", "val", "test")[which]] += 1
    return DatasetSplit(parts[0], parts[1], parts[2], seed, ratios, strat)


# ----------------------------------------------------------------- decoding
def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize (C,H,W) with half-pixel centres and edge clamping."""
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bottom = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def decode_png(path) -> np.ndarray:
    """Decode to (3,H,W) float64 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return rgb.transpose(2, 0, 1)


def load_and_preprocess(descriptor: SampleDescriptor, target_resolution, root=".") -> Sample:
    if isinstance(target_resolution, int):
        target_resolution = (target_resolution, target_resolution)
    path = Path(root) / descriptor.path
    img = bilinear_resize(decode_png(path), *target_resolution)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, descriptor.label, descriptor.class_name, descriptor.magnification, str(path))


def decode_threads() -> int:
    raw = os.environ.get("MULTINET_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer MULTINET_THREADS=%r", raw)
    return min(8, os.cpu_count() or 1)


def load_arrays(descriptors, target_resolution, root) -> tuple:
    """Decode descriptors in parallel; results keep the input order."""
    descriptors = list(descriptors)
    if not descriptors:
        size = target_resolution if isinstance(target_resolution, int) else target_resolution[0]
        return np.zeros((0, 3, size, size), dtype=np.float32), np.zeros(0, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=decode_threads()) as pool:
        samples = list(pool.map(lambda d: load_and_preprocess(d, target_resolution, root), descriptors))
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------- synthetic
@dataclass(frozen=True)
class SyntheticSpec:
    """Eight oriented-grating textures with per-class tint plus Gaussian pixel noise.

    Classes stay linearly separable on raw pixels for ``noise <= 0.1``.
    """

    images_per_class: int = 8
    resolution: int = 64
    noise: float = 0.05
    seed: int = 0
    classes: int = 8

    def __post_init__(self):
        if self.classes != len(CLASS_NAMES):
            raise ValueError(f"synthetic data has exactly {len(CLASS_NAMES)} classes")
        if self.images_per_class < 1:
            raise ValueError("images_per_class must be >= 1")
        if self.resolution < 4:
            raise ValueError("resolution must be >= 4")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def texture(self, k: int) -> tuple:
        """(cycles across the image, orientation in radians, RGB tint) for class index k."""
        freq = (3.0, 6.0)[k // 4]
        theta = (k % 4) * math.pi / 4
        tint = (0.6 + 0.4 * math.cos(2 * math.pi * k / 8),
                0.6 + 0.4 * math.cos(2 * math.pi * k / 8 + 2.1),
                0.6 + 0.4 * math.cos(2 * math.pi * k / 8 + 4.2))
        return freq, theta, tint


def synthetic_image(spec: SyntheticSpec, k: int, rng: np.random.Generator) -> np.ndarray:
    n = spec.resolution
    freq, theta, tint = spec.texture(k)
    yy, xx = np.mgrid[0:n, 0:n] / n
    wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)))
    img = np.stack([0.5 + 0.35 * t * wave for t in tint]) + 0.1 * (np.array(tint)[:, None, None] - 0.6)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> ScanResult:
    """Write a breakhis-tree of PNGs (magnifications assigned round-robin)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    for k, cls in enumerate(CLASS_NAMES):
        group = "benign" if cls in BENIGN else "malignant"
        for i in range(spec.images_per_class):
            mag = MAGNIFICATIONS[i % len(MAGNIFICATIONS)]
            d = out / group / cls / mag
            d.mkdir(parents=True, exist_ok=True)
            pixels = np.round(synthetic_image(spec, k, rng) * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(pixels, "RGB").save(d / f"{cls}_{mag}_{i:04d}.png")
    return scan_dataset(out)
