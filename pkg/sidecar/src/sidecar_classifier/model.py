"""The served network and its checkpoint format.

A checkpoint is a torch file holding the label names, the input shape and a
state dict for TinyNet. Everything runs in float64 on a single thread so
repeated requests produce bit-identical responses.
"""

from importlib import resources

import torch
from torch import nn

BUNDLED_MODEL = "tiny.pt"
FIXTURE_SEED = 20240817


class TinyNet(nn.Module):
    """Two tanh hidden layers over the flattened normalized image."""

    def __init__(self, in_dim: int, hidden: tuple, n_labels: int):
        super().__init__()
        dims = [in_dim, *hidden]
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(hidden))
        )
        self.head = nn.Linear(dims[-1], n_labels)

    def activations(self, x: torch.Tensor) -> list:
        """Per-layer feature vectors: each hidden activation, then logits."""
        out = []
        for layer in self.hidden:
            x = torch.tanh(layer(x))
            out.append(x)
        out.append(self.head(x))
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.activations(x)[-1]


class LoadedModel:
    def __init__(self, labels, input_shape, net):
        self.labels = tuple(labels)
        self.input_shape = tuple(input_shape)  # (h, w, c)
        self.net = net
        self.layer_dims = tuple(
            layer.out_features for layer in (*net.hidden, net.head)
        )

    @property
    def in_dim(self) -> int:
        h, w, c = self.input_shape
        return h * w * c


def build_fixture() -> dict:
    """The committed test model: seeded random init, 32x32x3 in, 10 labels."""
    torch.manual_seed(FIXTURE_SEED)
    net = TinyNet(32 * 32 * 3, (64, 32), 10).double()
    return {
        "labels": [f"class{i}" for i in range(10)],
        "input": [32, 32, 3],
        "hidden": [64, 32],
        "state": net.state_dict(),
    }


def bundled_model_path() -> str:
    return str(resources.files("sidecar_classifier").joinpath("models", BUNDLED_MODEL))


def load_model(path) -> LoadedModel:
    doc = torch.load(path, weights_only=True)
    h, w, c = doc["input"]
    net = TinyNet(h * w * c, tuple(doc["hidden"]), len(doc["labels"])).double()
    net.load_state_dict(doc["state"])
    net.eval()
    return LoadedModel(doc["labels"], (h, w, c), net)
