"""Dense ReLU classifiers and their exact piecewise-affine local structure.

A network built from dense layers with ReLU activations is affine on each
activation region of the input space.  Given an anchor point, one forward
pass yields the affine restriction (V, a per layer) and the half-space
description of the region containing the point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ReluNet",
    "ActivationPattern",
    "RegionDescription",
    "forward",
    "forward_batch",
    "classify",
    "activation_pattern",
    "region_description",
    "affine_maps",
    "random_net",
    "load_model",
    "save_model",
]


def _frozen_array(a, dtype=np.float64):
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ReluNet:
    """Fully connected ReLU classifier.

    ``weights[l]`` has shape (n_l, n_{l-1}) and ``biases[l]`` shape (n_l,).
    ReLU is applied after every layer except the last one, whose K outputs
    are the class logits.  A net with a single layer (no hidden units) is
    allowed and is a plain affine classifier.

    Instances are immutable: all parameter arrays are read-only, so a net
    can be shared freely across threads.
    """

    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws = tuple(_frozen_array(w) for w in self.weights)
        bs = tuple(_frozen_array(b) for b in self.biases)
        if len(ws) == 0 or len(ws) != len(bs):
            raise ValueError("need exactly one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(
                    f"layer {i}: weight shape {w.shape} and bias shape {b.shape} do not match")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: parameters must be finite")
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i}: expects {w.shape[1]} inputs but previous layer "
                    f"has {ws[i - 1].shape[0]} units")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(w.shape[0] for w in self.weights[:-1])

    @property
    def num_hidden_units(self) -> int:
        return int(sum(self.hidden_sizes))

    @property
    def layer_sizes(self) -> tuple:
        return (self.input_dim,) + tuple(w.shape[0] for w in self.weights)

    def with_parameters(self, weights, biases) -> "ReluNet":
        """New net with the same architecture and different parameters."""
        return ReluNet(tuple(weights), tuple(biases))


@dataclass(frozen=True)
class ActivationPattern:
    """Per-hidden-layer preactivation signs.

    ``deltas[l][i]`` is sign(g_i) in {-1, 0, +1}; ``sigmas[l][i]`` is 1 iff
    g_i > 0, so units sitting exactly on their hyperplane count as inactive.
    """

    deltas: tuple
    sigmas: tuple

    def key(self) -> tuple:
        return tuple(bytes(s) for s in self.sigmas)


@dataclass(frozen=True)
class RegionDescription:
    """Affine maps and half-space description of one activation region.

    ``v_maps[l]`` (n_l x d) and ``a_maps[l]`` give the affine form of every
    layer on the region; the last entry is the affine output map.  The
    region itself is the set of z with
    ``orientations[i] * (normals[i]@z + offsets[i]) >= 0`` for all i, one
    constraint per hidden unit (``unit_index[i] = (layer, unit)``).
    """

    pattern: ActivationPattern
    v_maps: tuple
    a_maps: tuple
    normals: np.ndarray
    offsets: np.ndarray
    orientations: np.ndarray
    unit_index: np.ndarray

    @property
    def output_map(self):
        return self.v_maps[-1], self.a_maps[-1]

    @property
    def num_halfspaces(self) -> int:
        return self.normals.shape[0]


def _check_input(net: ReluNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input has shape {x.shape}, expected ({net.input_dim},)")
    return x


def forward(net: ReluNet, x):
    """Evaluate the net at x.

    Returns (logits, preactivations), where preactivations is the list of
    hidden pre-ReLU vectors g^(l).
    """
    x = _check_input(net, x)
    preacts = []
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        g = w @ h + b
        preacts.append(g)
        h = np.maximum(g, 0.0)
    logits = net.weights[-1] @ h + net.biases[-1]
    return logits, preacts


def forward_batch(net: ReluNet, xs):
    """Batched forward pass; xs has shape (B, d).

    Returns (logits (B, K), preactivations list of (B, n_l)).
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != net.input_dim:
        raise ValueError(f"batch has shape {xs.shape}, expected (B, {net.input_dim})")
    preacts = []
    h = xs
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        g = h @ w.T + b
        preacts.append(g)
        h = np.maximum(g, 0.0)
    logits = h @ net.weights[-1].T + net.biases[-1]
    return logits, preacts


def classify(net: ReluNet, x) -> int:
    """Predicted class in 1..K; exact logit ties go to the smallest index."""
    logits, _ = forward(net, x)
    return int(np.argmax(logits)) + 1


def classify_batch(net: ReluNet, xs) -> np.ndarray:
    logits, _ = forward_batch(net, xs)
    return np.argmax(logits, axis=1) + 1


def activation_pattern(net: ReluNet, x) -> ActivationPattern:
    _, preacts = forward(net, x)
    deltas = tuple(np.sign(g).astype(np.int8) for g in preacts)
    sigmas = tuple((g > 0).astype(np.uint8) for g in preacts)
    return ActivationPattern(deltas, sigmas)


def affine_maps(net: ReluNet, sigmas):
    """V^(l), a^(l) for every layer given the hidden activity masks.

    The masks fix which ReLU units pass their input through, which makes
    every layer affine: layer l computes V^(l) z + a^(l) for any z whose
    activation pattern matches the masks.
    """
    v_list, a_list = [], []
    v = a = None
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        if l == 0:
            v = w.copy()
            a = b.copy()
        else:
            m = np.asarray(sigmas[l - 1], dtype=np.float64)
            v = w @ (v * m[:, None])
            a = w @ (a * m) + b
        v_list.append(v)
        a_list.append(a)
    return v_list, a_list


def region_description(net: ReluNet, x) -> RegionDescription:
    """Affine maps and half-space constraints of the region containing x."""
    x = _check_input(net, x)
    pattern = activation_pattern(net, x)
    v_list, a_list = affine_maps(net, pattern.sigmas)
    d = net.input_dim
    if net.num_hidden_layers > 0:
        normals = np.vstack([v for v in v_list[:-1]])
        offsets = np.concatenate([a for a in a_list[:-1]])
        orientations = np.concatenate([dl for dl in pattern.deltas]).astype(np.int8)
        unit_index = np.array(
            [(l, j) for l, v in enumerate(v_list[:-1]) for j in range(v.shape[0])],
            dtype=np.int64,
        )
    else:
        normals = np.zeros((0, d))
        offsets = np.zeros(0)
        orientations = np.zeros(0, dtype=np.int8)
        unit_index = np.zeros((0, 2), dtype=np.int64)
    return RegionDescription(
        pattern=pattern,
        v_maps=tuple(v_list),
        a_maps=tuple(a_list),
        normals=normals,
        offsets=offsets,
        orientations=orientations,
        unit_index=unit_index,
    )


def random_net(layer_sizes, seed=0, bias_scale=0.0) -> ReluNet:
    """Net with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights.

    Biases are zero unless bias_scale > 0, in which case they are uniform
    in (-bias_scale, bias_scale).
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"bad layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, n in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(n, fan_in)))
        if bias_scale > 0:
            biases.append(rng.uniform(-bias_scale, bias_scale, size=n))
        else:
            biases.append(np.zeros(n))
    return ReluNet(tuple(weights), tuple(biases))


def save_model(net: ReluNet, path) -> None:
    doc = {
        "input_dim": net.input_dim,
        "num_classes": net.num_classes,
        "layers": [
            {
                "rows": int(w.shape[0]),
                "cols": int(w.shape[1]),
                "weights": [float(v) for v in w.ravel(order="C")],
                "bias": [float(v) for v in b],
            }
            for w, b in zip(net.weights, net.biases)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> ReluNet:
    """Load a model JSON document, validating the layer dimension chain."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    for key in ("input_dim", "num_classes", "layers"):
        if key not in doc:
            raise ValueError(f"{path}: missing key {key!r}")
    layers = doc["layers"]
    if not isinstance(layers, list) or not layers:
        raise ValueError(f"{path}: 'layers' must be a non-empty list")
    weights, biases = [], []
    prev = int(doc["input_dim"])
    for i, layer in enumerate(layers):
        for key in ("rows", "cols", "weights", "bias"):
            if key not in layer:
                raise ValueError(f"{path}: layer {i} missing key {key!r}")
        rows, cols = int(layer["rows"]), int(layer["cols"])
        if cols != prev:
            raise ValueError(
                f"{path}: layer {i} has {cols} columns, expected {prev}")
        w = np.asarray(layer["weights"], dtype=np.float64)
        if w.size != rows * cols:
            raise ValueError(
                f"{path}: layer {i} carries {w.size} weights, expected {rows * cols}")
        b = np.asarray(layer["bias"], dtype=np.float64)
        if b.size != rows:
            raise ValueError(f"{path}: layer {i} bias length {b.size}, expected {rows}")
        weights.append(w.reshape(rows, cols))
        biases.append(b)
        prev = rows
    if prev != int(doc["num_classes"]):
        raise ValueError(
            f"{path}: last layer has {prev} rows, expected num_classes="
            f"{doc['num_classes']}")
    return ReluNet(tuple(weights), tuple(biases))
