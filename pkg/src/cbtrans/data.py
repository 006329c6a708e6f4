"""Dataset scanning, coarse-domain aggregation, batch loading, and a
synthetic shape dataset with ground-truth content/style factors.

Dataset layout on disk: ``root/<domain_name>/*.png|jpg``. The synthetic
generator renders one shape category per domain (circle, square, triangle,
... cyclically); the shape's position and rotation are content factors, its
hue and texture frequency are style factors, and every image's factors are
recorded in ``factors.csv`` so content preservation and style adoption are
measurable on model outputs.
"""

from __future__ import annotations

import csv
import fnmatch
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import DatasetError, normalize_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

LEDGER_FILENAME = "factors.csv"

SHAPE_NAMES = ("circle", "square", "triangle", "pentagon", "hexagon")

TEXTURE_FREQUENCIES = {"low": 2.0, "mid": 4.0, "high": 7.0}

POSITION_RANGE = (0.2, 0.8)

_SUPERSAMPLE = 4
_SHAPE_RADIUS = 0.22  # circumradius as a fraction of image size


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest root
    label: int
    split: str  # "train" or "test"


@dataclass
class DatasetManifest:
    root: Path
    domains: list
    entries: list

    @property
    def num_domains(self):
        return len(self.domains)

    def indices(self, split=None, label=None):
        return [i for i, e in enumerate(self.entries)
                if (split is None or e.split == split)
                and (label is None or e.label == label)]


def scan_dataset(root, test_per_domain=0):
    """Build a deterministic manifest from a domain-per-directory tree.

    Files are ordered lexicographically; the last ``test_per_domain`` files
    of each domain form the test split.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not domains:
        raise DatasetError(f"dataset root {root} has no domain directories")
    entries = []
    for label, domain in enumerate(domains):
        files = sorted(p.name for p in (root / domain).iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"domain {domain!r} has no images")
        if len(files) <= test_per_domain:
            raise DatasetError(
                f"domain {domain!r} has {len(files)} images, needs at least "
                f"one train entry beyond test_per_domain={test_per_domain}")
        split_at = len(files) - test_per_domain
        for i, name in enumerate(files):
            path = f"{domain}/{name}"
            try:
                with Image.open(root / path) as img:
                    img.verify()
            except Exception as exc:
                raise DatasetError(f"undecodable image {path}: {exc}") from exc
            split = "train" if i < split_at else "test"
            entries.append(ManifestEntry(path=path, label=label, split=split))
    return DatasetManifest(root=root, domains=domains, entries=entries)


# ---------------------------------------------------------------------------
# Coarse-domain aggregation


@dataclass
class AggregationMap:
    """Ordered ``(name_pattern, coarse_name)`` rules, first match wins."""

    rules: list

    def resolve(self, fine_name):
        for pattern, coarse in self.rules:
            if fnmatch.fnmatchcase(fine_name, pattern):
                return coarse
        return None


def parse_aggregation_text(text):
    rules = []
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" not in line:
            raise DatasetError(
                f"aggregation line {line_no}: expected 'pattern -> name', "
                f"got {raw_line!r}")
        pattern, _, coarse = line.partition("->")
        rules.append((pattern.strip(), coarse.strip()))
    return AggregationMap(rules=rules)


def load_aggregation_map(path):
    return parse_aggregation_text(Path(path).read_text(encoding="utf-8"))


def apply_aggregation(manifest, aggregation):
    """Relabel fine domains to coarse ones; entry multiset is preserved."""
    mapping = {}
    unmatched = []
    for fine in manifest.domains:
        coarse = aggregation.resolve(fine)
        if coarse is None:
            unmatched.append(fine)
        else:
            mapping[fine] = coarse
    if unmatched:
        raise DatasetError(
            f"domains match no aggregation rule: {', '.join(unmatched)}")
    coarse_domains = sorted(set(mapping.values()))
    coarse_label = {name: i for i, name in enumerate(coarse_domains)}
    entries = [
        ManifestEntry(path=e.path,
                      label=coarse_label[mapping[manifest.domains[e.label]]],
                      split=e.split)
        for e in manifest.entries
    ]
    return DatasetManifest(root=manifest.root, domains=coarse_domains,
                           entries=entries)


# ---------------------------------------------------------------------------
# Synthetic factor-controlled dataset


@dataclass
class SyntheticFactorSpec:
    num_domains: int = 2
    image_size: int = 32
    samples_per_domain: int = 500
    seed: int = 0


@dataclass(frozen=True)
class FactorRecord:
    filename: str
    domain: str
    pos_x: float
    pos_y: float
    rotation: float
    hue: float
    texture: str


def shape_for_domain(domain_index):
    return SHAPE_NAMES[domain_index % len(SHAPE_NAMES)]


def _hue_to_rgb(hue):
    """Fully saturated RGB for a hue in [0, 1)."""
    h6 = (hue % 1.0) * 6.0
    r = np.clip(abs(h6 - 3.0) - 1.0, 0.0, 1.0)
    g = np.clip(2.0 - abs(h6 - 2.0), 0.0, 1.0)
    b = np.clip(2.0 - abs(h6 - 4.0), 0.0, 1.0)
    return np.array([r, g, b])


def _shape_mask(dx, dy, shape, rotation, radius):
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    sides = {"triangle": 3, "square": 4, "pentagon": 5, "hexagon": 6}[shape]
    apothem = radius * math.cos(math.pi / sides)
    inside = np.ones(dx.shape, dtype=bool)
    for k in range(sides):
        angle = rotation + 2.0 * math.pi * (k + 0.5) / sides
        inside &= dx * math.cos(angle) + dy * math.sin(angle) <= apothem
    return inside


def render_shape(image_size, shape, pos_x, pos_y, rotation, hue, texture):
    """Render one sample as uint8 RGB on a black background, antialiased.

    Texture modulates only the value channel (sinusoidal stripes along the
    rotated axis), so the mean foreground hue stays exactly at ``hue``.
    """
    ss = _SUPERSAMPLE
    size = image_size * ss
    coords = np.arange(size) + 0.5
    xx, yy = np.meshgrid(coords, coords)
    dx = xx - pos_x * size
    dy = yy - pos_y * size
    mask = _shape_mask(dx, dy, shape, rotation, _SHAPE_RADIUS * size)
    axis = dx * math.cos(rotation) + dy * math.sin(rotation)
    freq = TEXTURE_FREQUENCIES[texture]
    value = 0.75 + 0.25 * np.sin(2.0 * math.pi * freq * axis / size)
    field = np.where(mask, value, 0.0)
    rgb = field[:, :, None] * _hue_to_rgb(hue)[None, None, :]
    rgb = rgb.reshape(image_size, ss, image_size, ss, 3).mean(axis=(1, 3))
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(spec, out_dir):
    """Write the synthetic dataset and its factor ledger.

    Returns the scanned manifest (all entries train) and the ledger records.
    Deterministic for a fixed spec.seed, including file bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    lo, hi = POSITION_RANGE
    textures = sorted(TEXTURE_FREQUENCIES)
    records = []
    for k in range(spec.num_domains):
        shape = shape_for_domain(k)
        domain = f"d{k:02d}_{shape}"
        domain_dir = out_dir / domain
        domain_dir.mkdir(parents=True, exist_ok=True)
        for i in range(spec.samples_per_domain):
            pos_x = float(rng.uniform(lo, hi))
            pos_y = float(rng.uniform(lo, hi))
            rotation = float(rng.uniform(0.0, 2.0 * math.pi))
            hue = float(rng.uniform(0.0, 1.0))
            texture = textures[int(rng.integers(len(textures)))]
            pixels = render_shape(spec.image_size, shape, pos_x, pos_y,
                                  rotation, hue, texture)
            filename = f"{domain}/{i:05d}.png"
            Image.fromarray(pixels).save(out_dir / filename)
            records.append(FactorRecord(filename=filename, domain=domain,
                                        pos_x=pos_x, pos_y=pos_y,
                                        rotation=rotation, hue=hue,
                                        texture=texture))
    write_factor_ledger(records, out_dir / LEDGER_FILENAME)
    if spec.samples_per_domain == 0:
        manifest = DatasetManifest(root=out_dir, domains=[], entries=[])
    else:
        manifest = scan_dataset(out_dir, test_per_domain=0)
    return manifest, records


def write_factor_ledger(records, path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["filename", "domain", "pos_x", "pos_y", "rotation",
                         "hue", "texture"])
        for r in records:
            writer.writerow([r.filename, r.domain, repr(r.pos_x),
                             repr(r.pos_y), repr(r.rotation), repr(r.hue),
                             r.texture])


def read_factor_ledger(path):
    records = {}
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            record = FactorRecord(filename=row["filename"],
                                  domain=row["domain"],
                                  pos_x=float(row["pos_x"]),
                                  pos_y=float(row["pos_y"]),
                                  rotation=float(row["rotation"]),
                                  hue=float(row["hue"]),
                                  texture=row["texture"])
            records[record.filename] = record
    return records


# ---------------------------------------------------------------------------
# Batch loading


def _decode(path, image_size):
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"failed to decode {path}: {exc}") from exc


def load_batch(manifest, indices, image_size, rng=None, flip=False):
    """Decode and normalize a batch of manifest entries.

    With ``flip=True`` each train-split image is mirrored with probability
    1/2, drawn from the provided data stream; test entries never flip.
    """
    images = torch.empty(len(indices), 3, image_size, image_size)
    labels = torch.empty(len(indices), dtype=torch.int64)
    for slot, index in enumerate(indices):
        entry = manifest.entries[index]
        pixels = normalize_image(_decode(manifest.root / entry.path, image_size))
        tensor = torch.from_numpy(pixels).permute(2, 0, 1)
        if flip and rng is not None and entry.split == "train":
            if rng.uniform() < 0.5:
                tensor = torch.flip(tensor, dims=[-1])
        images[slot] = tensor
        labels[slot] = entry.label
    return images, labels


class LoadedDataset:
    """Manifest decoded once into memory, indexed by domain and split."""

    def __init__(self, manifest, image_size, flip_augment=False):
        if not manifest.entries:
            raise DatasetError("manifest has no entries")
        self.manifest = manifest
        self.image_size = image_size
        self.flip_augment = flip_augment
        self.images, self.labels = load_batch(
            manifest, range(len(manifest.entries)), image_size)
        self.num_domains = manifest.num_domains
        self.train_by_domain = [manifest.indices(split="train", label=k)
                                for k in range(self.num_domains)]
        self.test_by_domain = [manifest.indices(split="test", label=k)
                               for k in range(self.num_domains)]
        for k, rows in enumerate(self.train_by_domain):
            if not rows:
                raise DatasetError(
                    f"domain {manifest.domains[k]!r} has no train entries")
        self.train_indices = manifest.indices(split="train")

    def batch(self, indices, rng=None):
        images = self.images[list(indices)].clone()
        labels = self.labels[list(indices)]
        if self.flip_augment and rng is not None:
            for slot, index in enumerate(indices):
                if self.manifest.entries[index].split == "train":
                    if rng.uniform() < 0.5:
                        images[slot] = torch.flip(images[slot], dims=[-1])
        return images, labels


# ---------------------------------------------------------------------------
# Foreground measurement (ground-truth oracles for the synthetic data)


def measure_foreground(image, value_threshold=0.15):
    """Centroid (pixels) and circular-mean hue of the non-black foreground.

    Accepts a [3,H,W] tensor in [-1,1]. The centroid is the unweighted mask
    centroid; the hue average is chroma-weighted, which ignores gray pixels.
    Returns ``None`` when no pixel clears the value threshold.
    """
    rgb = np.asarray(image, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {rgb.shape}")
    rgb = (rgb + 1.0) / 2.0
    value = rgb.max(axis=0)
    chroma = value - rgb.min(axis=0)
    mask = value > value_threshold
    if not mask.any():
        return None
    rows, cols = np.nonzero(mask)
    centroid = (float(cols.mean()) + 0.5, float(rows.mean()) + 0.5)
    r, g, b = rgb[0], rgb[1], rgb[2]
    safe_chroma = np.where(chroma > 0, chroma, 1.0)
    hue6 = np.where(
        value == r, (g - b) / safe_chroma,
        np.where(value == g, (b - r) / safe_chroma + 2.0,
                 (r - g) / safe_chroma + 4.0))
    angle = hue6 / 6.0 * 2.0 * math.pi
    weights = np.where(chroma > 0, chroma, 0.0) * mask
    total = weights.sum()
    if total <= 0:
        hue = None
    else:
        mean_sin = float((np.sin(angle) * weights).sum() / total)
        mean_cos = float((np.cos(angle) * weights).sum() / total)
        hue = (math.atan2(mean_sin, mean_cos) / (2.0 * math.pi)) % 1.0
    return {"centroid": centroid, "hue": hue, "area": int(mask.sum())}


def circular_hue_distance(h1, h2):
    delta = abs(h1 - h2) % 1.0
    return min(delta, 1.0 - delta)
