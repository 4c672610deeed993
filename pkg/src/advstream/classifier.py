"""Classifier backends: a self-contained linear model and a sidecar client.

Every backend exposes the same surface: labels, declared input shape, softmax
over labels, a stack of per-layer feature vectors, and (optionally) the input
gradient of a Mahalanobis quadratic form. Inputs are normalized to [0,1] at
this boundary (pixel level / 255) so feature statistics and gradients are
scale-consistent.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .imaging import Image


class ClassifierError(Exception):
    pass


class ShapeMismatchError(ClassifierError):
    pass


class GradUnsupportedError(ClassifierError):
    """Raised when a backend cannot differentiate; callers fall back to eps=0."""


class ProtocolError(ClassifierError):
    """Sidecar broke the wire contract (bad handshake, id, dims, or sums)."""


@dataclass(frozen=True)
class SoftmaxVector:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ClassifierError("softmax must be a non-empty vector")
        if p.min() < 0.0 or p.max() > 1.0 or abs(p.sum() - 1.0) > 1e-9:
            raise ClassifierError("softmax entries must lie in [0,1] and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class FeatureStack:
    layers: tuple  # tuple of 1-D float arrays

    def __post_init__(self):
        object.__setattr__(
            self,
            "layers",
            tuple(np.asarray(v, dtype=np.float64).reshape(-1) for v in self.layers),
        )

    def dims(self):
        return tuple(v.size for v in self.layers)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def fingerprint_of(handshake: dict) -> str:
    """Stable hash of a backend's declared topology, for profile/stats drift checks."""
    blob = json.dumps(handshake, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LinearModel:
    """Softmax-linear test model: logits = W (x/255) + b."""

    labels: tuple
    height: int
    width: int
    channels: int
    weights: np.ndarray  # (|C|, m)
    bias: np.ndarray  # (|C|,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        m = self.height * self.width * self.channels
        if w.shape != (len(self.labels), m) or b.shape != (len(self.labels),):
            raise ClassifierError("weight/bias shapes do not match labels and input")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ClassifierError("model parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "labels", tuple(self.labels))


def load_linear_model(path) -> LinearModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return LinearModel(
            labels=tuple(doc["labels"]),
            height=int(doc["h"]),
            width=int(doc["w"]),
            channels=int(doc["c"]),
            weights=np.asarray(doc["weights"], dtype=np.float64),
            bias=np.asarray(doc["bias"], dtype=np.float64),
        )
    except KeyError as exc:
        raise ClassifierError(f"linear model file missing field {exc}") from exc


def save_linear_model(model: LinearModel, path) -> None:
    doc = {
        "labels": list(model.labels),
        "h": model.height,
        "w": model.width,
        "c": model.channels,
        "weights": model.weights.tolist(),
        "bias": model.bias.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


class LinearClassifier:
    """Backend around a LinearModel.

    Exposes two layers: layer 0 is the normalized flattened input, layer 1 the
    logits. Every Mahalanobis quantity is analytic here, which is what makes
    this the normative test backend.
    """

    def __init__(self, model: LinearModel):
        self.model = model

    @property
    def labels(self):
        return self.model.labels

    @property
    def input_shape(self):
        return (self.model.height, self.model.width, self.model.channels)

    @property
    def layer_dims(self):
        m = self.model.height * self.model.width * self.model.channels
        return (m, len(self.model.labels))

    @property
    def supports_grad(self) -> bool:
        return True

    def handshake(self) -> dict:
        h, w, c = self.input_shape
        return {
            "type": "hello",
            "labels": list(self.labels),
            "input": {"h": h, "w": w, "c": c},
            "layers": list(self.layer_dims),
            "grad": True,
        }

    def fingerprint(self) -> str:
        return fingerprint_of(self.handshake())

    def _normalize(self, img: Image) -> np.ndarray:
        if (img.height, img.width, img.channels) != self.input_shape:
            raise ShapeMismatchError(
                f"image shape {(img.height, img.width, img.channels)} "
                f"does not match classifier input {self.input_shape}"
            )
        return img.data.astype(np.float64) / 255.0

    def softmax_of(self, img: Image) -> SoftmaxVector:
        x = self._normalize(img)
        return SoftmaxVector(_softmax(self.model.weights @ x + self.model.bias))

    def features_of(self, img: Image) -> FeatureStack:
        x = self._normalize(img)
        return FeatureStack((x, self.model.weights @ x + self.model.bias))

    def features_of_normalized(self, x: np.ndarray) -> FeatureStack:
        """Feature stack at an arbitrary normalized input vector (float path)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return FeatureStack((x, self.model.weights @ x + self.model.bias))

    def grad_mahalanobis(self, img: Image, layer: int, mean, inv_cov) -> np.ndarray:
        """Gradient of (f_l(x) - mu)^T S^-1 (f_l(x) - mu) w.r.t. normalized input."""
        mean = np.asarray(mean, dtype=np.float64)
        inv_cov = np.asarray(inv_cov, dtype=np.float64)
        x = self._normalize(img)
        if layer == 0:
            return 2.0 * inv_cov @ (x - mean)
        if layer == 1:
            z = self.model.weights @ x + self.model.bias
            return 2.0 * self.model.weights.T @ (inv_cov @ (z - mean))
        raise ClassifierError(f"linear backend has no layer {layer}")


class SidecarClassifier:
    """Client for an external model process speaking the line protocol.

    One JSON object per line. The sidecar speaks first with a hello line
    declaring labels, input shape, layer dims and gradient support; after
    that it answers requests in order, echoing ids.
    """

    def __init__(self, reader, writer, closer=None):
        self._reader = reader
        self._writer = writer
        self._closer = closer
        self._next_id = 0
        hello = self._read_line()
        if hello.get("type") != "hello":
            raise ProtocolError(f"expected hello, got {hello!r}")
        try:
            self.labels = tuple(hello["labels"])
            inp = hello["input"]
            self.input_shape = (int(inp["h"]), int(inp["w"]), int(inp["c"]))
            self.layer_dims = tuple(int(d) for d in hello["layers"])
            self.supports_grad = bool(hello["grad"])
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed hello: {exc}") from exc
        self._hello = hello

    @classmethod
    def spawn(cls, argv) -> "SidecarClassifier":
        proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True
        )
        return cls(proc.stdout, proc.stdin, closer=lambda: _stop_process(proc))

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "SidecarClassifier":
        sock = socket.create_connection((host, port), timeout=timeout)
        reader = sock.makefile("r", encoding="utf-8")
        writer = sock.makefile("w", encoding="utf-8")
        return cls(reader, writer, closer=sock.close)

    def close(self):
        if self._closer is not None:
            self._closer()
            self._closer = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def handshake(self) -> dict:
        return dict(self._hello)

    def fingerprint(self) -> str:
        return fingerprint_of(
            {
                "type": "hello",
                "labels": list(self.labels),
                "input": {
                    "h": self.input_shape[0],
                    "w": self.input_shape[1],
                    "c": self.input_shape[2],
                },
                "layers": list(self.layer_dims),
                "grad": self.supports_grad,
            }
        )

    def _read_line(self) -> dict:
        line = self._reader.readline()
        if not line:
            raise ProtocolError("sidecar closed the stream")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"non-JSON line from sidecar: {exc}") from exc

    def _roundtrip(self, op: str, img: Image, grad_args=None) -> dict:
        if (img.height, img.width, img.channels) != self.input_shape:
            raise ShapeMismatchError(
                f"image shape {(img.height, img.width, img.channels)} "
                f"does not match sidecar input {self.input_shape}"
            )
        rid = self._next_id
        self._next_id += 1
        req = {
            "id": rid,
            "op": op,
            "image": base64.b64encode(img.pixels.tobytes()).decode("ascii"),
        }
        if grad_args is not None:
            req["grad_args"] = grad_args
        self._writer.write(json.dumps(req) + "\n")
        self._writer.flush()
        resp = self._read_line()
        if resp.get("id") != rid:
            raise ProtocolError(f"id mismatch: sent {rid}, got {resp.get('id')!r}")
        if "error" in resp:
            raise ClassifierError(f"sidecar error: {resp['error']}")
        return resp

    def softmax_of(self, img: Image) -> SoftmaxVector:
        resp = self._roundtrip("softmax", img)
        probs = resp.get("softmax")
        if not isinstance(probs, list) or len(probs) != len(self.labels):
            raise ProtocolError("softmax response has wrong arity")
        try:
            return SoftmaxVector(np.asarray(probs, dtype=np.float64))
        except ClassifierError as exc:
            raise ProtocolError(f"non-normalized sidecar softmax: {exc}") from exc

    def features_of(self, img: Image) -> FeatureStack:
        resp = self._roundtrip("features", img)
        feats = resp.get("features")
        if not isinstance(feats, list):
            raise ProtocolError("features response missing feature list")
        stack = FeatureStack(tuple(np.asarray(v, dtype=np.float64) for v in feats))
        if stack.dims() != self.layer_dims:
            raise ProtocolError(
                f"feature dims {stack.dims()} differ from declared {self.layer_dims}"
            )
        return stack

    def grad_mahalanobis(self, img: Image, layer: int, mean, inv_cov) -> np.ndarray:
        if not self.supports_grad:
            raise GradUnsupportedError("sidecar declared grad=false")
        args = {
            "layer": int(layer),
            "mean": np.asarray(mean, dtype=np.float64).tolist(),
            "inv_cov": np.asarray(inv_cov, dtype=np.float64).tolist(),
        }
        resp = self._roundtrip("grad", img, grad_args=args)
        grad = resp.get("grad")
        m = self.input_shape[0] * self.input_shape[1] * self.input_shape[2]
        if not isinstance(grad, list) or len(grad) != m:
            raise ProtocolError("grad response has wrong arity")
        return np.asarray(grad, dtype=np.float64)


def _stop_process(proc: subprocess.Popen):
    try:
        proc.stdin.close()
    except OSError:
        pass
    try:
        proc.wait(timeout=5)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()
