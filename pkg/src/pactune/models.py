"""Small MLP classifiers with an explicit backbone/head parameter split.

The head is always the final linear layer; everything before it is the
backbone. Fine-tuning replaces the head and (by default) freezes the first
layer, which plays the role of a fixed feature embedding. Models are plain
values: numpy arrays in dataclasses, no shared mutable state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad


class ParamGroup(str, Enum):
    BACKBONE = "backbone"
    HEAD = "head"


@dataclass
class MLPClassifier:
    """Fully-connected classifier; ``layer_sizes = [d_in, hidden..., classes]``."""

    layer_sizes: list[int]
    weights: list[np.ndarray]  # per layer, shape (fan_in, fan_out)
    biases: list[np.ndarray]  # per layer, shape (fan_out,)
    activation: str = "tanh"
    freeze_first_layer: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def group_of(self, layer: int) -> ParamGroup:
        return ParamGroup.HEAD if layer == self.n_layers - 1 else ParamGroup.BACKBONE

    def layer_is_trainable(self, layer: int) -> bool:
        return not (self.freeze_first_layer and layer == 0)

    def copy(self) -> "MLPClassifier":
        return MLPClassifier(
            layer_sizes=list(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            freeze_first_layer=self.freeze_first_layer,
        )

    def forward(self, x: np.ndarray, params=None) -> ad.Tensor:
        """Logits for a batch; records on a tape when ``params`` are tape tensors.

        ``params`` optionally substitutes the model's own weights with a list of
        ``(w, b)`` pairs (arrays or Tensors) of matching shapes, which is how the
        training objectives run the forward pass at perturbed parameters.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ad.ShapeError(
                f"forward: batch shape {x.shape} does not match input size "
                f"{self.input_dim}")
        if params is None:
            params = list(zip(self.weights, self.biases))
        elif len(params) != self.n_layers:
            raise ad.ShapeError(
                f"forward: expected {self.n_layers} (w, b) pairs, got {len(params)}")
        act = ad.tanh if self.activation == "tanh" else ad.relu
        h = ad.as_tensor(x)
        for i, (w, b) in enumerate(params):
            h = ad.add_bias(ad.matmul(h, ad.as_tensor(w)), ad.as_tensor(b))
            if i < self.n_layers - 1:
                h = act(h)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        if np.asarray(x).shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argmax(self.forward(x).data, axis=1)


def init_weights(layer_sizes, rng: np.random.Generator, activation: str = "tanh",
                 freeze_first_layer: bool = False) -> MLPClassifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("layer_sizes needs at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPClassifier(list(layer_sizes), weights, biases, activation,
                         freeze_first_layer)


def replace_head(model: MLPClassifier, rng: np.random.Generator,
                 n_classes: int | None = None) -> MLPClassifier:
    """Fresh final layer for a (possibly different) class count; backbone kept bit-identical."""
    out = model.copy()
    k = model.n_classes if n_classes is None else int(n_classes)
    fan_in = model.layer_sizes[-2]
    bound = 1.0 / np.sqrt(fan_in)
    out.weights[-1] = rng.uniform(-bound, bound, size=(fan_in, k))
    out.biases[-1] = np.zeros(k)
    out.layer_sizes = list(model.layer_sizes[:-1]) + [k]
    return out


@dataclass
class GroupPacker:
    """Flat-vector view of the trainable parameters, split by group.

    Entry order is fixed (layer index, weights before bias), so packed
    vectors, noise arrays, and optimizer moments all line up.
    """

    entries: dict = field(default_factory=dict)  # group -> list of (layer, kind, start, stop, shape)
    sizes: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: MLPClassifier) -> "GroupPacker":
        entries = {ParamGroup.BACKBONE: [], ParamGroup.HEAD: []}
        offsets = {ParamGroup.BACKBONE: 0, ParamGroup.HEAD: 0}
        for layer in range(model.n_layers):
            if not model.layer_is_trainable(layer):
                continue
            group = model.group_of(layer)
            for kind, arr in (("w", model.weights[layer]), ("b", model.biases[layer])):
                start = offsets[group]
                stop = start + arr.size
                entries[group].append((layer, kind, start, stop, arr.shape))
                offsets[group] = stop
        return cls(entries=entries, sizes={g: offsets[g] for g in entries})

    def pack(self, model: MLPClassifier, group: ParamGroup) -> np.ndarray:
        out = np.empty(self.sizes[group])
        for layer, kind, start, stop, _ in self.entries[group]:
            arr = model.weights[layer] if kind == "w" else model.biases[layer]
            out[start:stop] = arr.ravel()
        return out

    def unpack_into(self, model: MLPClassifier, group: ParamGroup,
                    flat: np.ndarray) -> None:
        if flat.shape != (self.sizes[group],):
            raise ValueError(
                f"unpack_into: expected shape ({self.sizes[group]},), got {flat.shape}")
        for layer, kind, start, stop, shape in self.entries[group]:
            values = flat[start:stop].reshape(shape)
            if kind == "w":
                model.weights[layer] = values.copy()
            else:
                model.biases[layer] = values.copy()


CHECKPOINT_VERSION = 1


def save_checkpoint(model: MLPClassifier, path, provenance: dict) -> None:
    """Versioned JSON checkpoint; decimal float serialization round-trips exactly."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "params": [
            {"w": model.weights[i].ravel().tolist(), "b": model.biases[i].tolist()}
            for i in range(model.n_layers)
        ],
        "groups": [model.group_of(i).value for i in range(model.n_layers)],
        "provenance": {
            "seed": provenance.get("seed"),
            "task": provenance.get("task"),
            "epoch": provenance.get("epoch"),
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n",
                          encoding="utf-8")


def load_checkpoint(path, activation: str = "tanh",
                    freeze_first_layer: bool = False) -> MLPClassifier:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {doc.get('version')}")
    sizes = doc["layer_sizes"]
    weights, biases = [], []
    for i, layer in enumerate(doc["params"]):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        weights.append(np.asarray(layer["w"], dtype=np.float64).reshape(fan_in, fan_out))
        biases.append(np.asarray(layer["b"], dtype=np.float64))
    return MLPClassifier(list(sizes), weights, biases, activation, freeze_first_layer)


def checkpoint_provenance(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))["provenance"]
