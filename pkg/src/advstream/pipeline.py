"""Sequence ingestion, end-to-end detection runs, profiles, synthetic data.

Recorded videos are stood in for by JSON manifests listing per-frame raster
paths plus a presence flag (replacing an object detector's gating), and by a
seeded synthetic generator that renders clean/adversarial sequence pairs
differing only inside a drifting patch.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import accuracy
from .detectors import (
    DenoiseConfig,
    DivergenceConfig,
    MahalanobisStats,
    denoise_detect,
    divergence_score,
    mahalanobis_score,
    threshold_verdict,
)
from .imaging import Image, load_ppm, save_ppm
from .timeseries import ABSENT, ALL, WindowState

PROFILE_VERSION = 1


class PipelineError(Exception):
    pass


class FingerprintMismatchError(PipelineError):
    pass


class ProfileVersionError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class FrameRef:
    path: str
    present: bool = True


@dataclass(frozen=True)
class SequenceManifest:
    object_id: str
    ground_truth: str  # "clean" | "adversarial" | "unknown"
    frames: tuple  # FrameRef

    def __post_init__(self):
        if self.ground_truth not in ("clean", "adversarial", "unknown"):
            raise PipelineError(f"bad ground truth {self.ground_truth!r}")
        if not self.frames:
            raise PipelineError("manifest needs at least one frame")
        object.__setattr__(self, "frames", tuple(self.frames))


def load_manifest(path) -> SequenceManifest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        frames = tuple(FrameRef(f["path"], bool(f["present"])) for f in doc["frames"])
        manifest = SequenceManifest(doc["object_id"], doc["ground_truth"], frames)
    except KeyError as exc:
        raise PipelineError(f"manifest {path} missing field {exc}") from exc
    # frame paths resolve relative to the manifest file
    base = os.path.dirname(os.path.abspath(path))
    resolved = tuple(
        replace(f, path=f.path if os.path.isabs(f.path) else os.path.join(base, f.path))
        for f in manifest.frames
    )
    return replace(manifest, frames=resolved)


def save_manifest(manifest: SequenceManifest, path) -> None:
    doc = {
        "object_id": manifest.object_id,
        "ground_truth": manifest.ground_truth,
        "frames": [{"path": f.path, "present": f.present} for f in manifest.frames],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Calibration profiles


@dataclass(frozen=True)
class CalibrationProfile:
    """Persisted detector setup: kind, config, threshold, classifier binding."""

    detector: str  # "kl" | "md" | "ed"
    config: object  # DivergenceConfig | MahalanobisStats | DenoiseConfig
    threshold: float | None
    classifier_fingerprint: str
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = {"kl": DivergenceConfig, "md": MahalanobisStats, "ed": DenoiseConfig}
        if self.detector not in expected:
            raise PipelineError(f"unknown detector kind {self.detector!r}")
        if not isinstance(self.config, expected[self.detector]):
            raise PipelineError(
                f"config type {type(self.config).__name__} does not match "
                f"detector {self.detector!r}"
            )


def save_profile(profile: CalibrationProfile, path) -> None:
    """Write the profile JSON; md stats go to a sibling .stats.json file."""
    doc = {
        "version": PROFILE_VERSION,
        "detector": profile.detector,
        "threshold": profile.threshold,
        "classifier_fingerprint": profile.classifier_fingerprint,
        "notes": profile.notes,
    }
    if profile.detector == "md":
        stats_path = os.path.splitext(path)[0] + ".stats.json"
        profile.config.save(stats_path)
        doc["config"] = {"stats_path": os.path.basename(stats_path)}
    else:
        doc["config"] = profile.config.to_json()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_profile(path) -> CalibrationProfile:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("version")
    if version != PROFILE_VERSION:
        raise ProfileVersionError(
            f"profile version {version!r} unsupported (expected {PROFILE_VERSION})"
        )
    detector = doc["detector"]
    if detector == "kl":
        config = DivergenceConfig.from_json(doc["config"])
    elif detector == "ed":
        config = DenoiseConfig.from_json(doc["config"])
    elif detector == "md":
        stats_path = os.path.join(
            os.path.dirname(os.path.abspath(path)), doc["config"]["stats_path"]
        )
        if not os.path.exists(stats_path):
            raise PipelineError(f"profile references missing stats file {stats_path}")
        config = MahalanobisStats.load(stats_path)
    else:
        raise PipelineError(f"unknown detector kind {detector!r}")
    return CalibrationProfile(
        detector=detector,
        config=config,
        threshold=doc.get("threshold"),
        classifier_fingerprint=doc["classifier_fingerprint"],
        notes=doc.get("notes", {}),
    )


# ---------------------------------------------------------------------------
# End-to-end runs


@dataclass(frozen=True)
class FrameReport:
    index: int
    present: bool
    score: float | None
    verdict: int | None
    s: float | None
    stream_verdict: str


@dataclass(frozen=True)
class SequenceReport:
    rows: tuple  # FrameReport
    acc: float | None  # only when ground truth known


def score_frame(profile: CalibrationProfile, clf, img: Image):
    """Single-image (score, verdict) under the profile's detector."""
    if profile.detector == "kl":
        score = divergence_score(clf, img, profile.config)
        return score, threshold_verdict(score, profile.threshold)
    if profile.detector == "md":
        score = mahalanobis_score(clf, profile.config, img)
        return score, threshold_verdict(score, profile.threshold)
    verdict, _ = denoise_detect(clf, img, profile.config)
    return float(verdict), verdict


def run_sequence(manifest: SequenceManifest, profile: CalibrationProfile, clf,
                 capacity=ALL) -> SequenceReport:
    """Score every frame, fold the vote window, report per-frame and Acc."""
    if profile.classifier_fingerprint != clf.fingerprint():
        raise FingerprintMismatchError(
            "profile was calibrated against a different classifier"
        )
    state = WindowState(capacity=capacity)
    rows = []
    stream = []
    for i, frame in enumerate(manifest.frames):
        if not frame.present:
            state, sv = state.step(ABSENT)
            rows.append(FrameReport(i, False, None, None, None, sv.value))
            stream.append(sv)
            continue
        if not os.path.exists(frame.path):
            raise PipelineError(f"frame path does not exist: {frame.path}")
        img = load_ppm(frame.path)
        score, verdict = score_frame(profile, clf, img)
        state, sv = state.step(verdict)
        rows.append(FrameReport(i, True, score, verdict, sv.s, sv.value))
        stream.append(sv)
    acc = None
    if manifest.ground_truth != "unknown":
        acc = accuracy(stream, manifest.ground_truth)
    return SequenceReport(tuple(rows), acc)


def report_csv(report: SequenceReport) -> str:
    out = io.StringIO()
    out.write("frame,present,score,verdict,s,stream_verdict\n")
    for r in report.rows:
        score = "" if r.score is None else f"{r.score:.6g}"
        verdict = "" if r.verdict is None else str(r.verdict)
        s = "" if r.s is None else f"{r.s:.6g}"
        out.write(f"{r.index},{int(r.present)},{score},{verdict},{s},{r.stream_verdict}\n")
    if report.acc is not None:
        out.write(f"# acc={report.acc:.6g}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Synthetic sequences


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the clean/adversarial pair generator.

    A seeded blocky base pattern is rendered centered at a per-frame scale
    (the approach schedule), i.i.d. pixel noise is added, and the adversarial
    twin additionally composites a seeded patch whose location drifts.
    """

    frames: int = 100
    height: int = 32
    width: int = 32
    base_seed: int = 7
    noise_amplitude: int = 8
    patch_size: int = 8
    patch_seed: int = 11
    patch_drift: int = 1  # max per-frame location step, pixels
    scale_start: float = 0.4
    scale_end: float = 1.0

    def __post_init__(self):
        if self.frames < 1:
            raise PipelineError("need at least one frame")
        if self.patch_size < 0 or self.patch_size > min(self.height, self.width):
            raise PipelineError("patch must fit inside the frame")
        if not (0.0 < self.scale_start <= self.scale_end <= 1.0):
            raise PipelineError("scale schedule must satisfy 0 < start <= end <= 1")

    def to_json(self) -> dict:
        return {
            "frames": self.frames, "height": self.height, "width": self.width,
            "base_seed": self.base_seed, "noise_amplitude": self.noise_amplitude,
            "patch_size": self.patch_size, "patch_seed": self.patch_seed,
            "patch_drift": self.patch_drift,
            "scale_start": self.scale_start, "scale_end": self.scale_end,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SynthSpec":
        return cls(**doc)


def _base_pattern(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.base_seed)
    blocks = rng.integers(0, 256, size=(8, 8, 3))
    # nearest-neighbor upsample to frame size
    yi = (np.arange(spec.height) * 8 // spec.height).clip(0, 7)
    xi = (np.arange(spec.width) * 8 // spec.width).clip(0, 7)
    return blocks[np.ix_(yi, xi)].astype(np.float64)


def _patch_pattern(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.patch_seed)
    # dark saturated two-color mosaic: low V, so a V-flattening brightness
    # squeeze rescales patch pixels far more than typical scene content
    mask = rng.integers(0, 2, size=(spec.patch_size, spec.patch_size))
    a = rng.integers(0, 80, size=3)
    a[rng.integers(0, 3)] = 0
    b = np.array([80, 80, 80]) - a
    return np.where(mask[..., None] == 0, a, b).astype(np.uint8)


def generate_synthetic(spec: SynthSpec, seed: int, out_dir):
    """Render a clean/adversarial manifest pair plus their PPM frames.

    The two sequences share base pattern, scale schedule and noise draws; the
    frames differ only inside the patch footprint. Fully determined by
    (spec, seed).
    """
    os.makedirs(out_dir, exist_ok=True)
    base = _base_pattern(spec)
    patch = _patch_pattern(spec)
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    ph = patch.shape[0]
    loc = None
    clean_frames, adv_frames = [], []
    for t in range(spec.frames):
        frac = t / (spec.frames - 1) if spec.frames > 1 else 1.0
        scale = spec.scale_start + (spec.scale_end - spec.scale_start) * frac
        sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
        yi = (np.arange(sh) * h // sh).clip(0, h - 1)
        xi = (np.arange(sw) * w // sw).clip(0, w - 1)
        canvas = np.full((h, w, 3), 128.0)
        y0, x0 = (h - sh) // 2, (w - sw) // 2
        canvas[y0 : y0 + sh, x0 : x0 + sw] = base[np.ix_(yi, xi)]
        if spec.noise_amplitude > 0:
            canvas = canvas + rng.integers(
                -spec.noise_amplitude, spec.noise_amplitude + 1, size=canvas.shape
            )
        clean_px = np.clip(canvas, 0, 255).astype(np.uint8)
        adv_px = clean_px.copy()
        if ph > 0:
            if loc is None:
                loc = ((h - ph) // 2, (w - ph) // 2)
            else:
                dy, dx = rng.integers(-spec.patch_drift, spec.patch_drift + 1, size=2)
                loc = (
                    int(np.clip(loc[0] + dy, 0, h - ph)),
                    int(np.clip(loc[1] + dx, 0, w - ph)),
                )
            adv_px[loc[0] : loc[0] + ph, loc[1] : loc[1] + ph] = patch
        for kind, px, frames in (("clean", clean_px, clean_frames),
                                 ("adv", adv_px, adv_frames)):
            name = f"{kind}_{t:04d}.ppm"
            save_ppm(Image(h, w, 3, px), os.path.join(out_dir, name))
            frames.append(FrameRef(name, True))
    clean_manifest = SequenceManifest("synthetic", "clean", tuple(clean_frames))
    adv_manifest = SequenceManifest("synthetic", "adversarial", tuple(adv_frames))
    save_manifest(clean_manifest, os.path.join(out_dir, "clean.json"))
    save_manifest(adv_manifest, os.path.join(out_dir, "adversarial.json"))
    # re-load so frame paths come back absolute, same as any other manifest
    return (
        load_manifest(os.path.join(out_dir, "clean.json")),
        load_manifest(os.path.join(out_dir, "adversarial.json")),
    )
