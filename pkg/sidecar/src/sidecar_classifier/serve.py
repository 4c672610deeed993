"""Request loop for the classifier wire protocol.

Newline-delimited UTF-8 JSON, one object per line. The sidecar writes the
hello line first, then answers requests in order, echoing ids. A malformed
request yields an error response (id echoed when recoverable) and the loop
continues; only transport loss ends the session.
"""

import base64
import json

import numpy as np
import torch

from .model import LoadedModel


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def handshake_of(model: LoadedModel) -> dict:
    h, w, c = model.input_shape
    return {
        "type": "hello",
        "labels": list(model.labels),
        "input": {"h": h, "w": w, "c": c},
        "layers": list(model.layer_dims),
        "grad": True,
    }


def _decode_image(model: LoadedModel, payload) -> torch.Tensor:
    if not isinstance(payload, str):
        raise ValueError("image field must be a base64 string")
    raw = np.frombuffer(base64.b64decode(payload, validate=True), dtype=np.uint8)
    if raw.size != model.in_dim:
        raise ValueError(f"image has {raw.size} bytes, expected {model.in_dim}")
    return torch.from_numpy(raw.astype(np.float64) / 255.0)


def _op_softmax(model: LoadedModel, x: torch.Tensor, req: dict) -> dict:
    with torch.no_grad():
        probs = torch.softmax(model.net(x), dim=0)
    probs = probs / probs.sum()  # renormalize so the sum invariant holds exactly
    return {"softmax": probs.tolist()}


def _op_features(model: LoadedModel, x: torch.Tensor, req: dict) -> dict:
    with torch.no_grad():
        acts = model.net.activations(x)
    return {"features": [a.tolist() for a in acts]}


def _op_grad(model: LoadedModel, x: torch.Tensor, req: dict) -> dict:
    args = req.get("grad_args")
    if not isinstance(args, dict):
        raise ValueError("grad request needs grad_args")
    layer = int(args["layer"])
    if not 0 <= layer < len(model.layer_dims):
        raise ValueError(f"layer {layer} out of range")
    mean = torch.tensor(args["mean"], dtype=torch.float64)
    inv_cov = torch.tensor(args["inv_cov"], dtype=torch.float64)
    if mean.shape != (model.layer_dims[layer],):
        raise ValueError("mean has wrong dimension")
    if inv_cov.shape != (model.layer_dims[layer],) * 2:
        raise ValueError("inv_cov has wrong shape")
    x = x.clone().requires_grad_(True)
    feat = model.net.activations(x)[layer]
    diff = feat - mean
    (diff @ inv_cov @ diff).backward()
    return {"grad": x.grad.tolist()}


_OPS = {"softmax": _op_softmax, "features": _op_features, "grad": _op_grad}


def handle_request(model: LoadedModel, line: str) -> dict:
    try:
        req = json.loads(line)
    except json.JSONDecodeError as exc:
        return {"id": None, "error": f"bad JSON: {exc}"}
    rid = req.get("id") if isinstance(req, dict) else None
    if not isinstance(req, dict):
        return {"id": None, "error": "request must be a JSON object"}
    op = _OPS.get(req.get("op"))
    if op is None:
        return {"id": rid, "error": f"unknown op {req.get('op')!r}"}
    try:
        body = op(model, _decode_image(model, req.get("image")), req)
    except (ValueError, KeyError, TypeError, base64.binascii.Error) as exc:
        return {"id": rid, "error": str(exc)}
    return {"id": rid, **body}


def serve(model: LoadedModel, reader, writer) -> None:
    torch.set_num_threads(1)
    writer.write(canonical(handshake_of(model)) + "\n")
    writer.flush()
    for line in reader:
        if not line.strip():
            continue
        writer.write(canonical(handle_request(model, line)) + "\n")
        writer.flush()
