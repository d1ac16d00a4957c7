"""FID, Inception Score, GAN-train / GAN-test and a match-head pair accuracy,
with a small trainable CNN standing in for the pretrained feature network."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .labelspace import Encoding

EIG_CLIP = 1e-6


class DimensionMismatch(ValueError):
    pass


class NonPSD(ValueError):
    pass


class FeatureExtractor(Protocol):
    def embed(self, images: np.ndarray) -> np.ndarray: ...

    def classify(self, images: np.ndarray) -> np.ndarray: ...


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        n, d = feats.shape
        if n < d:
            warnings.warn(f"{n} samples for {d}-dimensional features; covariance is rank deficient")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False).reshape(d, d), n)

    def merge(self, other: "GaussianStats") -> "GaussianStats":
        """Statistics of the union of two sample sets."""
        n = self.n + other.n
        mean = (self.n * self.mean + other.n * other.mean) / n
        def scatter(s):
            return (s.n - 1) * s.cov + s.n * np.outer(s.mean - mean, s.mean - mean)
        return GaussianStats(mean, (scatter(self) + scatter(other)) / (n - 1), n)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -EIG_CLIP * scale:
        raise NonPSD(f"covariance has eigenvalue {vals.min():.3g}")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(stats_real: GaussianStats, stats_fake: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of the square root is taken through the symmetric form
    ``S1^(1/2) S2 S1^(1/2)``, which has the same spectrum as ``S1 S2``;
    negative eigenvalues down to -1e-6 (relative) are clipped to zero.
    """
    mu1, mu2 = np.asarray(stats_real.mean, float), np.asarray(stats_fake.mean, float)
    s1, s2 = np.asarray(stats_real.cov, float), np.asarray(stats_fake.cov, float)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise DimensionMismatch(f"{mu1.shape}/{s1.shape} vs {mu2.shape}/{s2.shape}")
    _psd_sqrt(s2)  # validates
    r1 = _psd_sqrt(s1)
    m = r1 @ s2 @ r1
    vals = np.linalg.eigvalsh((m + m.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)


def inception_score(probs, folds: int = 10) -> Tuple[float, float]:
    """Mean and std over folds of exp(E_x KL(p(y|x) || p(y)))."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) < folds:
        raise ValueError(f"need at least {folds} probability rows")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
        raise ValueError("rows must be probability vectors")
    scores = []
    for part in np.array_split(p, folds):
        # exactly rounded column sums keep identical rows at KL = 0
        marginal = np.array([[math.fsum(col) / len(part) for col in part.T]])
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(math.fsum(kl.sum(axis=1)) / len(part)))
    return float(np.mean(scores)), float(np.std(scores))


# ---- small CNN used as feature extractor and attribute classifier --------

class SmallCNN(nn.Module):
    def __init__(self, n_out: int, width: int = 32, emb_dim: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
            nn.Linear(8 * width, emb_dim), nn.ReLU(),
        )
        self.out = nn.Linear(emb_dim, n_out)

    def forward(self, x):
        return self.out(self.features(x))


@dataclass
class ClassifierSpec:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    width: int = 32
    seed: int = 0


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def _fit(model: nn.Module, images: np.ndarray, targets: torch.Tensor, loss_fn, spec: ClassifierSpec):
    gen = torch.Generator().manual_seed(spec.seed + 1)
    x_all = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
    model.train()
    for _ in range(spec.epochs):
        order = torch.randperm(len(x_all), generator=gen)
        for sl in _batches(len(order), spec.batch_size):
            idx = order[sl]
            opt.zero_grad()
            loss_fn(model(x_all[idx]), targets[idx]).backward()
            opt.step()
    model.eval()
    return model


def _new_model(n_out: int, spec: ClassifierSpec) -> SmallCNN:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        return SmallCNN(n_out, spec.width)


def _forward(fn, images: np.ndarray, batch: int = 256) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    with torch.no_grad():
        outs = [fn(torch.from_numpy(x[sl])).numpy() for sl in _batches(len(x), batch)]
    return np.concatenate(outs) if outs else np.zeros((0,))


class CNNExtractor:
    """Class-posterior CNN; its 64-d penultimate layer gives FID embeddings."""

    def __init__(self, model: SmallCNN):
        self.model = model.eval()

    def embed(self, images: np.ndarray) -> np.ndarray:
        return _forward(self.model.features, images).astype(np.float64)

    def classify(self, images: np.ndarray) -> np.ndarray:
        return _forward(lambda x: F.softmax(self.model(x).double(), dim=1), images)


def train_extractor(images: np.ndarray, class_ids: Sequence[int], n_classes: int,
                    spec: Optional[ClassifierSpec] = None) -> CNNExtractor:
    spec = spec or ClassifierSpec()
    model = _new_model(n_classes, spec)
    y = torch.as_tensor(np.asarray(class_ids), dtype=torch.long)
    return CNNExtractor(_fit(model, images, y, F.cross_entropy, spec))


class AttributeClassifier:
    def __init__(self, model: SmallCNN, encoding: Encoding):
        self.model = model.eval()
        self.encoding = Encoding(encoding)

    def predict(self, images: np.ndarray) -> np.ndarray:
        logits = _forward(self.model, images)
        if self.encoding is Encoding.ONE_HOT:
            return np.eye(logits.shape[1], dtype=int)[logits.argmax(axis=1)]
        return (logits > 0).astype(int)

    def accuracy(self, images: np.ndarray, labels) -> float:
        return attribute_accuracy(self.predict(images), labels, self.encoding)


def attribute_accuracy(pred, labels, encoding) -> float:
    """Mean per-attribute accuracy for binary labels, top-1 for one-hot."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if Encoding(encoding) is Encoding.ONE_HOT:
        return float(np.mean(pred.argmax(axis=1) == labels.argmax(axis=1)))
    return float(np.mean(pred == labels))


def train_attribute_classifier(images: np.ndarray, labels, encoding,
                               spec: Optional[ClassifierSpec] = None) -> AttributeClassifier:
    spec = spec or ClassifierSpec()
    labels = np.asarray(labels)
    model = _new_model(labels.shape[1], spec)
    if Encoding(encoding) is Encoding.ONE_HOT:
        y = torch.as_tensor(labels.argmax(axis=1), dtype=torch.long)
        loss_fn = F.cross_entropy
    else:
        y = torch.as_tensor(labels, dtype=torch.float32)
        loss_fn = F.binary_cross_entropy_with_logits
    return AttributeClassifier(_fit(model, images, y, loss_fn, spec), encoding)


# ---- protocols that involve the generator --------------------------------

def translate(G, images: np.ndarray, labels, batch: int = 128) -> np.ndarray:
    """``G(images, labels)`` in eval mode, batched, as float32 numpy."""
    param = next(G.parameters())
    x = np.asarray(images)
    y = np.asarray(labels, dtype=np.float64)
    outs = []
    was_training = G.training
    G.eval()
    with torch.no_grad():
        for sl in _batches(len(x), batch):
            xt = torch.as_tensor(x[sl], dtype=param.dtype)
            yt = torch.as_tensor(y[sl], dtype=param.dtype)
            outs.append(G(xt, yt).float().numpy())
    G.train(was_training)
    return np.concatenate(outs)


def fid_protocol(G, test_images: np.ndarray, classes, extractor: FeatureExtractor,
                 per_domain: bool = False):
    """FID between the test images and their translations to every class, pooled.

    With ``per_domain`` returns ``(pooled, {class_index: fid})``.
    """
    classes = [tuple(c) for c in getattr(classes, "classes", classes)]
    real = GaussianStats.from_features(extractor.embed(test_images))
    fake_feats = []
    per: Dict[int, float] = {}
    for j, c in enumerate(classes):
        feats = extractor.embed(translate(G, test_images, [c] * len(test_images)))
        fake_feats.append(feats)
        if per_domain:
            per[j] = frechet_distance(real, GaussianStats.from_features(feats))
    pooled = frechet_distance(real, GaussianStats.from_features(np.concatenate(fake_feats)))
    return (pooled, per) if per_domain else pooled


def _targets(n: int, classes, seed: int, source_labels=None):
    if source_labels is not None:
        return np.asarray(source_labels)
    classes = np.asarray([tuple(c) for c in getattr(classes, "classes", classes)])
    rng = np.random.default_rng(seed)
    return classes[rng.integers(0, len(classes), size=n)]


def gan_train(G, train_images, test_images, test_labels, classes, encoding,
              spec: Optional[ClassifierSpec] = None, train_labels=None) -> float:
    """Accuracy on real test data of a classifier trained on translated train data.

    Train images are translated to uniformly sampled target classes which
    become their ground truth; pass ``train_labels`` to translate each image
    to its own label instead.
    """
    spec = spec or ClassifierSpec()
    targets = _targets(len(train_images), classes, spec.seed, train_labels)
    synthetic = translate(G, train_images, targets)
    clf = train_attribute_classifier(synthetic, targets, encoding, spec)
    return clf.accuracy(test_images, test_labels)


def gan_test(G, train_images, train_labels, test_images, classes, encoding,
             spec: Optional[ClassifierSpec] = None, test_labels=None) -> float:
    """Accuracy on translated test data of a classifier trained on real train data."""
    spec = spec or ClassifierSpec()
    clf = train_attribute_classifier(train_images, train_labels, encoding, spec)
    targets = _targets(len(test_images), classes, spec.seed + 7, test_labels)
    return clf.accuracy(translate(G, test_images, targets), targets)


def match_pair_accuracy(D, head, images: np.ndarray, class_ids: Sequence[int],
                        n_pairs: int = 1000, seed: int = 0) -> float:
    """Accuracy of P(matched) > 0.5 on balanced random matched/mismatched image pairs."""
    rng = np.random.default_rng(seed)
    ids = np.asarray(class_ids)
    by_class = {c: np.flatnonzero(ids == c) for c in np.unique(ids)}
    keys = [c for c in by_class if len(by_class[c]) >= 2]
    a_idx, b_idx, truth = [], [], []
    for t in range(n_pairs):
        c = keys[rng.integers(len(keys))]
        a, b = rng.choice(by_class[c], size=2, replace=False)
        if t % 2:
            others = [k for k in by_class if k != c]
            k = others[rng.integers(len(others))]
            b = rng.choice(by_class[k])
        a_idx.append(a)
        b_idx.append(b)
        truth.append(t % 2 == 0)
    param = next(D.parameters())
    x = torch.as_tensor(np.asarray(images), dtype=param.dtype)
    with torch.no_grad():
        emb = torch.cat([D.embed(x[sl]) for sl in _batches(len(x), 256)])
        p = head(emb[torch.as_tensor(a_idx)], emb[torch.as_tensor(b_idx)])[:, 0].numpy()
    return float(np.mean((p > 0.5) == np.asarray(truth)))
