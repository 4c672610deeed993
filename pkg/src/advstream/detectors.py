"""Single-image detectors.

Three independent ways to flag one frame as adversarial:

* divergence: compare classifier softmax outputs before and after a
  brightness squeeze, score = min (or max) of the two directed KL divergences;
* mahalanobis: distance of intermediate features from class-conditional
  Gaussians fitted on labeled data;
* denoise: entropy-adaptive quantization plus optional smoothing, flagging
  frames whose predicted label changes under denoising.

Every continuous score is oriented so that higher means more adversarial.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .classifier import GradUnsupportedError, SoftmaxVector
from .imaging import (
    BrightnessSpec,
    FilterSpec,
    Image,
    brightness_transform,
    pixel_entropy,
    quantize,
    spatial_smooth,
)

PROB_FLOOR = 1e-12


class DetectorError(Exception):
    pass


class SingularCovarianceError(DetectorError):
    pass


class TopologyMismatchError(DetectorError):
    pass


# ---------------------------------------------------------------------------
# KL divergence + brightness squeeze


def _floor_and_renormalize(p: np.ndarray) -> np.ndarray:
    q = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    return q / q.sum()


def kl_divergence(p, q) -> float:
    """D_KL(p || q) in nats, with both sides floored at 1e-12 so it is total."""
    p = p.probs if isinstance(p, SoftmaxVector) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, SoftmaxVector) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DetectorError("KL arguments must have equal length")
    p = _floor_and_renormalize(p)
    q = _floor_and_renormalize(q)
    return float(np.sum(p * np.log(p / q)))


@dataclass(frozen=True)
class DivergenceConfig:
    """Brightness-squeeze detector config: transform, KL combiner, threshold."""

    transform: BrightnessSpec = BrightnessSpec("set", 200)
    combiner: str = "min"
    threshold: float = 0.0

    def __post_init__(self):
        if self.combiner not in ("min", "max"):
            raise DetectorError("combiner must be 'min' or 'max'")
        if self.threshold < 0:
            raise DetectorError("threshold must be non-negative")

    def to_json(self) -> dict:
        return {
            "transform": {"mode": self.transform.mode, "value": self.transform.value},
            "combiner": self.combiner,
            "threshold": self.threshold,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DivergenceConfig":
        t = doc["transform"]
        return cls(BrightnessSpec(t["mode"], t["value"]), doc["combiner"], doc["threshold"])


def divergence_score(clf, img: Image, cfg: DivergenceConfig) -> float:
    """Combined KL divergence between softmax outputs of x and its squeeze."""
    squeezed = brightness_transform(img, cfg.transform)
    p = clf.softmax_of(img)
    q = clf.softmax_of(squeezed)
    a, b = kl_divergence(p, q), kl_divergence(q, p)
    return min(a, b) if cfg.combiner == "min" else max(a, b)


def threshold_verdict(score: float, tau: float) -> int:
    """1 (adversarial) iff the score strictly exceeds the threshold."""
    return 1 if score > tau else 0


# ---------------------------------------------------------------------------
# Mahalanobis detector


@dataclass(frozen=True)
class LayerStats:
    means: dict  # label -> 1-D array
    cov: np.ndarray
    inv_cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.cov.shape[0]


@dataclass(frozen=True)
class MahalanobisStats:
    """Fitted per-layer class means and shared (ridge-regularized) covariance."""

    layers: tuple  # tuple of LayerStats
    alpha: np.ndarray
    eps: float
    ridge: float
    classifier_fingerprint: str
    class_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.min() < 0 or abs(a.sum() - 1.0) > 1e-9 or a.size != len(self.layers):
            raise DetectorError("alpha must be non-negative and sum to 1 per layer")
        object.__setattr__(self, "alpha", a)

    def to_json(self) -> dict:
        return {
            "layers": [
                {
                    "dim": ls.dim,
                    "means": {str(k): v.tolist() for k, v in ls.means.items()},
                    "cov": ls.cov.tolist(),
                    "inv_cov": ls.inv_cov.tolist(),
                }
                for ls in self.layers
            ],
            "alpha": self.alpha.tolist(),
            "eps": self.eps,
            "ridge": self.ridge,
            "classifier_fingerprint": self.classifier_fingerprint,
            "class_counts": {str(k): int(v) for k, v in self.class_counts.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MahalanobisStats":
        layers = tuple(
            LayerStats(
                means={k: np.asarray(v, dtype=np.float64) for k, v in e["means"].items()},
                cov=np.asarray(e["cov"], dtype=np.float64),
                inv_cov=np.asarray(e["inv_cov"], dtype=np.float64),
            )
            for e in doc["layers"]
        )
        return cls(
            layers=layers,
            alpha=np.asarray(doc["alpha"], dtype=np.float64),
            eps=float(doc["eps"]),
            ridge=float(doc["ridge"]),
            classifier_fingerprint=doc["classifier_fingerprint"],
            class_counts=doc.get("class_counts", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "MahalanobisStats":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


RIDGE_FACTOR = 1e-6


def fit_mahalanobis(clf, labeled, alpha=None, eps=0.001) -> MahalanobisStats:
    """Fit per-layer class means and a shared covariance from (Image, label) pairs.

    The covariance pools centered features from all classes and divides by the
    total sample count; its inverse is taken after adding a small ridge
    proportional to the mean diagonal.
    """
    if not labeled:
        raise DetectorError("empty training set")
    by_class = {}
    stacks = []
    for img, label in labeled:
        stacks.append(clf.features_of(img))
        by_class.setdefault(label, []).append(len(stacks) - 1)
    for label, idxs in by_class.items():
        if len(idxs) < 2:
            raise DetectorError(f"class {label!r} needs at least two samples")
    n_layers = len(stacks[0].layers)
    total = len(stacks)
    layers = []
    for layer in range(n_layers):
        feats = np.stack([s.layers[layer] for s in stacks])
        means = {}
        scatter = np.zeros((feats.shape[1], feats.shape[1]))
        for label, idxs in by_class.items():
            mu = feats[idxs].mean(axis=0)
            means[label] = mu
            centered = feats[idxs] - mu
            scatter += centered.T @ centered
        cov = scatter / total
        lam = RIDGE_FACTOR * np.trace(cov) / cov.shape[0]
        ridged = cov + lam * np.eye(cov.shape[0])
        try:
            inv_cov = np.linalg.inv(ridged)
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError(
                f"layer {layer} covariance singular even after ridge"
            ) from exc
        if not np.isfinite(inv_cov).all():
            raise SingularCovarianceError(f"layer {layer} inverse is not finite")
        layers.append(LayerStats(means=means, cov=cov, inv_cov=inv_cov))
    if alpha is None:
        alpha = np.full(n_layers, 1.0 / n_layers)
    return MahalanobisStats(
        layers=tuple(layers),
        alpha=np.asarray(alpha, dtype=np.float64),
        eps=eps,
        ridge=RIDGE_FACTOR,
        classifier_fingerprint=clf.fingerprint(),
        class_counts={str(k): len(v) for k, v in by_class.items()},
    )


def _quadratic(diff: np.ndarray, inv_cov: np.ndarray) -> float:
    return float(diff @ inv_cov @ diff)


def mahalanobis_score(clf, stats: MahalanobisStats, img: Image) -> float:
    """Adversarial score: minus the layer-weighted max-confidence statistic.

    Per layer the closest class is found by Mahalanobis distance, the input is
    nudged down that distance's gradient by eps (when the backend can
    differentiate), and the confidence is the negated distance to the best
    class at the nudged point. Higher return value = more anomalous.
    """
    if stats.classifier_fingerprint != clf.fingerprint():
        raise TopologyMismatchError("stats were fitted against a different classifier")
    base = clf.features_of(img)
    if base.dims() != tuple(ls.dim for ls in stats.layers):
        raise TopologyMismatchError("feature dims do not match fitted stats")
    score = 0.0
    for layer, (ls, a) in enumerate(zip(stats.layers, stats.alpha)):
        f = base.layers[layer]
        labels = list(ls.means)
        dists = [_quadratic(f - ls.means[c], ls.inv_cov) for c in labels]
        closest = labels[int(np.argmin(dists))]
        f_hat = f
        if stats.eps > 0 and getattr(clf, "supports_grad", False):
            try:
                grad = clf.grad_mahalanobis(img, layer, ls.means[closest], ls.inv_cov)
                x_hat = img.data / 255.0 - stats.eps * grad
                f_hat = clf.features_of_normalized(x_hat).layers[layer]
            except (GradUnsupportedError, AttributeError):
                f_hat = f
        confidence = max(
            -_quadratic(f_hat - ls.means[c], ls.inv_cov) for c in labels
        )
        score += a * confidence
    return -score


# ---------------------------------------------------------------------------
# Entropy-adaptive denoising detector


DEFAULT_INTERVAL_MAP = ((1.0, 2), (4.0, 8), (6.0, 32), (math.inf, 128))


@dataclass(frozen=True)
class DenoiseConfig:
    """Entropy-driven denoising: codebook size by entropy, optional smoothing.

    interval_map is a step function given as (upper bound in bits, codewords)
    pairs, ascending; the first bucket whose bound is >= H applies.
    """

    interval_map: tuple = DEFAULT_INTERVAL_MAP
    smoothing_threshold: float = 4.0
    filter: FilterSpec = FilterSpec("box", 3)

    def __post_init__(self):
        prev_bound, prev_n = -math.inf, 2
        for bound, n in self.interval_map:
            if not 2 <= n <= 256:
                raise DetectorError("codeword counts must lie in [2, 256]")
            if bound <= prev_bound or n < prev_n:
                raise DetectorError("interval map must be ascending and non-decreasing")
            prev_bound, prev_n = bound, n
        if self.interval_map[-1][0] != math.inf:
            raise DetectorError("interval map must cover all entropies (last bound inf)")

    def intervals_for(self, entropy_bits: float) -> int:
        for bound, n in self.interval_map:
            if entropy_bits <= bound:
                return n
        raise AssertionError("unreachable: map covers [0, inf]")

    def to_json(self) -> dict:
        return {
            "interval_map": [[b if b != math.inf else "inf", n] for b, n in self.interval_map],
            "smoothing_threshold": self.smoothing_threshold,
            "filter": {"shape": self.filter.shape, "size": self.filter.size},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DenoiseConfig":
        imap = tuple(
            (math.inf if b == "inf" else float(b), int(n)) for b, n in doc["interval_map"]
        )
        f = doc["filter"]
        return cls(imap, float(doc["smoothing_threshold"]), FilterSpec(f["shape"], f["size"]))


def denoise_detect(clf, img: Image, cfg: DenoiseConfig):
    """Flag the frame iff denoising flips the predicted label.

    Returns (verdict, denoised image).
    """
    h = pixel_entropy(img)
    q = quantize(img, cfg.intervals_for(h))
    if pixel_entropy(q) > cfg.smoothing_threshold:
        denoised = spatial_smooth(q, cfg.filter)
    else:
        denoised = q
    same = clf.softmax_of(img).argmax == clf.softmax_of(denoised).argmax
    return (0 if same else 1), denoised
