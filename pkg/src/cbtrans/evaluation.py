"""Translation sweeps and metrics: pairwise perceptual diversity, Frechet
distance between feature distributions, and the content-code leakage probe.

Both metrics consume features from a pluggable extractor. The desk-scale
default is a fixed, seeded, randomly initialized convolutional stack shipped
in-repo, so the test suite needs no pretrained network; users may register
pretrained extractors for full-scale evaluation. All evaluation runs on the
averaged (EMA) parameters with noise-free content codes and is a
deterministic function of (checkpoint, dataset, seed, extractor).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import DatasetError, denormalize_image
from .networks import TranslationModel


class RandomConvExtractor:
    """Deterministic random-weight convolutional feature stack."""

    def __init__(self, seed=77, channels=(16, 32, 64)):
        self.name = f"randconv-{seed}-" + "x".join(str(c) for c in channels)
        self.deterministic = True
        rng = np.random.Generator(np.random.PCG64(seed))
        self.weights = []
        in_ch = 3
        for out_ch in channels:
            fan_in = in_ch * 9
            w = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (out_ch, in_ch, 3, 3))
            self.weights.append(torch.from_numpy(w).float())
            in_ch = out_ch

    @torch.no_grad()
    def layer_features(self, images):
        """Per-layer activation stacks for a [B,3,H,W] batch."""
        h = images.float()
        features = []
        for weight in self.weights:
            h = F.leaky_relu(F.conv2d(h, weight, stride=2, padding=1), 0.2)
            features.append(h)
        return features

    @torch.no_grad()
    def pooled_features(self, images):
        """Spatially pooled final-layer features, [B, D]."""
        return self.layer_features(images)[-1].mean(dim=(2, 3))


def _normalized_layers(image, extractor):
    # One image per call so results are independent of batch composition.
    layers = extractor.layer_features(image.unsqueeze(0))
    normalized = []
    for layer in layers:
        norm = layer.pow(2).sum(dim=1, keepdim=True).sqrt()
        normalized.append(layer / (norm + 1e-10))
    return normalized


def _layer_distance(layers_a, layers_b):
    total = 0.0
    for a, b in zip(layers_a, layers_b):
        total += float((a - b).pow(2).sum(dim=1).mean())
    return total


def lpips_distance(a, b, extractor):
    """Perceptual distance: channel-normalized feature differences, spatially
    averaged and summed over extractor layers."""
    return _layer_distance(_normalized_layers(a, extractor),
                           _normalized_layers(b, extractor))


def lpips_diversity(translations, extractor):
    """Mean perceptual distance over all unordered pairs of translations."""
    if len(translations) < 2:
        raise ValueError("lpips_diversity needs at least 2 translations")
    cached = [_normalized_layers(t, extractor) for t in translations]
    distances = [_layer_distance(cached[i], cached[j])
                 for i, j in itertools.combinations(range(len(cached)), 2)]
    return float(np.mean(distances))


# ---------------------------------------------------------------------------
# Frechet distance


def _psd_sqrt(matrix):
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    if values.min() < -1e-6:
        raise np.linalg.LinAlgError(
            f"covariance not positive semi-definite (min eigenvalue "
            f"{values.min():.3e}); apply shrinkage")
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def fid(features_a, features_b, shrinkage=1e-6):
    """Frechet distance between Gaussian fits of two feature matrices.

    ``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`` with the matrix
    square root taken by eigendecomposition of the symmetrized product.
    Ridge shrinkage is applied when a matrix has fewer than 10x dim rows.
    """
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 rows per feature matrix")
    dim = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if len(a) < 10 * dim:
        cov_a = cov_a + shrinkage * np.eye(dim)
    if len(b) < 10 * dim:
        cov_b = cov_b + shrinkage * np.eye(dim)
    sqrt_a = _psd_sqrt(cov_a)
    product = sqrt_a @ cov_b @ sqrt_a
    values = np.linalg.eigvalsh((product + product.T) / 2.0)
    if values.min() < -1e-6:
        raise np.linalg.LinAlgError(
            f"covariance product not positive semi-definite "
            f"(min eigenvalue {values.min():.3e})")
    trace_sqrt = np.sqrt(np.clip(values, 0.0, None)).sum()
    distance = (np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a)
                + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(float(distance), 0.0)


# ---------------------------------------------------------------------------
# Inference over averaged parameters


def _as_image_batch(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    return x, False


class InferenceModel:
    """Noise-free translator built from a checkpoint's averaged parameters."""

    def __init__(self, config, parameters, dtype=torch.float32):
        self.config = config
        self.model = TranslationModel(config).to(dtype)
        self.model.load_state_dict({k: v.to(dtype)
                                    for k, v in parameters.items()})
        self.model.eval()
        self.model.requires_grad_(False)

    @classmethod
    def from_checkpoint(cls, checkpoint, use_ema=True, dtype=torch.float32):
        params = (checkpoint.ema_parameters if use_ema
                  else checkpoint.parameters)
        return cls(checkpoint.config, params, dtype=dtype)

    def _labels(self, y, batch):
        if torch.is_tensor(y):
            return y.to(torch.int64)
        return torch.full((batch,), int(y), dtype=torch.int64)

    @torch.no_grad()
    def content_code(self, x):
        batch, single = _as_image_batch(x)
        code = self.model.content_encoder(batch)
        return code.squeeze(0) if single else code

    @torch.no_grad()
    def translate_reference(self, x, x_ref, y_target):
        batch, single = _as_image_batch(x)
        refs, _ = _as_image_batch(x_ref)
        if len(refs) == 1 and len(batch) > 1:
            refs = refs.expand(len(batch), -1, -1, -1)
        labels = self._labels(y_target, len(batch))
        style = self.model.style_encoder(refs, labels)
        out = self.model.generator(self.model.content_encoder(batch), style)
        return out.squeeze(0) if single else out

    @torch.no_grad()
    def translate_sampling(self, x, y_target, z):
        batch, single = _as_image_batch(x)
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if len(z) == 1 and len(batch) > 1:
            z = z.expand(len(batch), -1)
        labels = self._labels(y_target, len(batch))
        style = self.model.mapping(z, labels)
        out = self.model.generator(self.model.content_encoder(batch), style)
        return out.squeeze(0) if single else out


def translate_reference(checkpoint, x, x_ref, y_target):
    """One-shot reference-guided translation (builds the model per call;
    use InferenceModel directly for sweeps)."""
    return InferenceModel.from_checkpoint(checkpoint).translate_reference(
        x, x_ref, y_target)


def translate_sampling(checkpoint, x, y_target, z):
    """One-shot sampling-based translation."""
    return InferenceModel.from_checkpoint(checkpoint).translate_sampling(
        x, y_target, z)


# ---------------------------------------------------------------------------
# Leakage probe


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    num_domains: int
    n_train: int
    n_test: int


def linear_probe_accuracy(train_features, train_labels, test_features,
                          test_labels, max_iter=1000):
    """Fit a linear softmax classifier and return its test accuracy."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    scaler = StandardScaler().fit(train_features)
    classifier = LogisticRegression(max_iter=max_iter)
    classifier.fit(scaler.transform(train_features), train_labels)
    return float(classifier.score(scaler.transform(test_features),
                                  test_labels))


def _flat_codes(model, dataset, rows, batch_size=64):
    chunks = []
    for start in range(0, len(rows), batch_size):
        batch = dataset.images[rows[start:start + batch_size]]
        chunks.append(model.content_code(batch).flatten(1).numpy())
    return np.concatenate(chunks, axis=0)


def leakage_probe(checkpoint_or_model, dataset, max_iter=1000):
    """Train a linear classifier mapping mean content codes to domains.

    Accuracy near chance indicates no domain information in the content
    representation; accuracy near 1 indicates leakage.
    """
    if dataset.num_domains < 2:
        raise DatasetError("leakage probe needs at least 2 domains")
    model = checkpoint_or_model
    if not isinstance(model, InferenceModel):
        model = InferenceModel.from_checkpoint(model)
    train_rows = [i for rows in dataset.train_by_domain for i in rows]
    test_rows = [i for rows in dataset.test_by_domain for i in rows]
    if not test_rows:
        raise DatasetError("leakage probe needs a nonempty test split")
    train_x = _flat_codes(model, dataset, train_rows)
    test_x = _flat_codes(model, dataset, test_rows)
    train_y = dataset.labels[train_rows].numpy()
    test_y = dataset.labels[test_rows].numpy()
    accuracy = linear_probe_accuracy(train_x, train_y, test_x, test_y,
                                     max_iter=max_iter)
    return ProbeResult(accuracy=accuracy, chance=1.0 / dataset.num_domains,
                       num_domains=dataset.num_domains,
                       n_train=len(train_rows), n_test=len(test_rows))


# ---------------------------------------------------------------------------
# Full evaluation sweep


@dataclass
class CellMetrics:
    lpips_diversity: float  # None when fewer than 2 repeats
    fid: float
    n_inputs: int
    n_translations: int


@dataclass
class MetricsReport:
    cells: dict
    leakage: ProbeResult
    metadata: dict

    def to_records(self):
        """Machine-readable form: one CSV record per cell."""
        lines = ["source,target,strategy,lpips_diversity,fid,"
                 "n_inputs,n_translations"]
        for (src, tgt, strategy), cell in self.cells.items():
            lp = "" if cell.lpips_diversity is None \
                else repr(cell.lpips_diversity)
            lines.append(f"{src},{tgt},{strategy},{lp},{cell.fid!r},"
                         f"{cell.n_inputs},{cell.n_translations}")
        return "\n".join(lines) + "\n"

    def to_table(self):
        """Human-readable grid: LPIPS (higher=more diverse) and FID
        (lower=closer to the target domain) per strategy."""
        header = (f"{'source':<16}{'target':<16}"
                  f"{'ref LPIPS^':>12}{'ref FID_v':>12}"
                  f"{'smp LPIPS^':>12}{'smp FID_v':>12}")
        lines = [header, "-" * len(header)]
        pairs = sorted({(s, t) for (s, t, _) in self.cells})
        for src, tgt in pairs:
            row = f"{src:<16}{tgt:<16}"
            for strategy in ("reference", "sampling"):
                cell = self.cells.get((src, tgt, strategy))
                if cell is None:
                    row += f"{'-':>12}{'-':>12}"
                    continue
                lp = ("-" if cell.lpips_diversity is None
                      else f"{cell.lpips_diversity:.4f}")
                row += f"{lp:>12}{cell.fid:>12.4f}"
            lines.append(row)
        if self.leakage is not None:
            lines.append("")
            lines.append(f"leakage accuracy: {self.leakage.accuracy:.4f} "
                         f"(chance {self.leakage.chance:.4f})")
        lines.append("")
        meta = ", ".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        lines.append(f"[{meta}]")
        return "\n".join(lines) + "\n"


def run_evaluation(checkpoint, dataset, extractor=None, num_repeats=10,
                   seed=0, include_self=False, probe=True):
    """Translate every test image to every other domain with both strategies,
    then score diversity per input and realism per (source, target) cell."""
    model = InferenceModel.from_checkpoint(checkpoint)
    if extractor is None:
        extractor = RandomConvExtractor()
    config = model.config
    rng = np.random.Generator(np.random.PCG64(seed))
    num_domains = dataset.num_domains
    cells = {}
    for src in range(num_domains):
        src_rows = dataset.test_by_domain[src]
        if not src_rows:
            raise DatasetError(
                f"domain {dataset.manifest.domains[src]!r} has no test entries")
        for tgt in range(num_domains):
            if src == tgt and not include_self:
                continue
            tgt_rows = dataset.test_by_domain[tgt]
            if not tgt_rows:
                raise DatasetError(
                    f"domain {dataset.manifest.domains[tgt]!r} has no "
                    f"test entries")
            real_tgt = dataset.images[tgt_rows]
            for strategy in ("reference", "sampling"):
                translated = []
                diversities = []
                for row in src_rows:
                    x = dataset.images[row]
                    batch = x.unsqueeze(0).repeat(num_repeats, 1, 1, 1)
                    if strategy == "reference":
                        picks = rng.integers(len(tgt_rows), size=num_repeats)
                        refs = dataset.images[[tgt_rows[int(i)]
                                               for i in picks]]
                        outs = model.translate_reference(batch, refs, tgt)
                    else:
                        z = torch.from_numpy(
                            rng.normal(size=(num_repeats, config.latent_dim))
                        ).float()
                        outs = model.translate_sampling(batch, tgt, z)
                    if num_repeats >= 2:
                        diversities.append(
                            lpips_diversity(list(outs), extractor))
                    translated.append(outs)
                all_outs = torch.cat(translated, dim=0)
                cell_fid = fid(extractor.pooled_features(all_outs).numpy(),
                               extractor.pooled_features(real_tgt).numpy())
                cells[(dataset.manifest.domains[src],
                       dataset.manifest.domains[tgt], strategy)] = CellMetrics(
                    lpips_diversity=(float(np.mean(diversities))
                                     if diversities else None),
                    fid=cell_fid,
                    n_inputs=len(src_rows),
                    n_translations=len(all_outs))
    leakage = leakage_probe(model, dataset) if probe else None
    metadata = {"checkpoint_step": checkpoint.step,
                "extractor": extractor.name, "seed": seed,
                "num_repeats": num_repeats}
    return MetricsReport(cells=cells, leakage=leakage, metadata=metadata)


# ---------------------------------------------------------------------------
# Comparison grid emitter


def save_translation_grid(model, contents, references, reference_labels,
                          path):
    """Write a PNG grid: first row the style references, first column the
    content inputs, each inner cell the reference-guided translation."""
    size = model.config.image_size
    rows, cols = len(contents) + 1, len(references) + 1
    canvas = np.zeros((rows * size, cols * size, 3), dtype=np.uint8)

    def paste(r, c, image):
        pixels = denormalize_image(image.numpy()).transpose(1, 2, 0)
        canvas[r * size:(r + 1) * size, c * size:(c + 1) * size] = pixels

    for j, (ref, _) in enumerate(zip(references, reference_labels)):
        paste(0, j + 1, ref)
    for i, content in enumerate(contents):
        paste(i + 1, 0, content)
        for j, (ref, label) in enumerate(zip(references, reference_labels)):
            paste(i + 1, j + 1,
                  model.translate_reference(content, ref, int(label)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
