"""
The two recurrent networks: price network (inputs Q, t/T) and control network
(inputs t, X, price). Elman-style cell: layer 1 is the hidden state,
h' = tanh(W1 x + U h + b1); layers 2-4 are sigmoid; layer 5 is linear.

Activations are laid out column-wise (features x batch), so one column per
agent or per supply path; the weights are shared across columns and each
column carries its own hidden state.
"""

from __future__ import annotations

import struct
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from diffgraph import Node, ShapeError, Tape
from market_model import SupplyPath

ACTIVATIONS = ("tanh", "sigmoid", "sigmoid", "sigmoid", "identity")
CONTROL_DIMS = (16, 32, 32, 32, 1)
PRICE_DIMS = (16, 16, 16, 16, 1)
CONTROL_INPUTS = 3  # t, X, price
PRICE_INPUTS = 2  # Q, t/T

CHECKPOINT_MAGIC = b"MFGP"
CHECKPOINT_VERSION = 1
NETWORK_TAGS = {"control": 0, "price": 1}
_HEADER = struct.Struct("<4sIBB")
_LAYER = struct.Struct("<II")


class CheckpointError(ValueError):
    """Checkpoint bytes are corrupt, truncated or do not match the expected network."""


@dataclass(frozen=True)
class RnnParams:
    tag: str
    input_dim: int
    dims: tuple[int, ...]
    weights: dict[str, np.ndarray]

    @property
    def hidden_dim(self) -> int:
        return self.dims[0]

    def names(self) -> list[str]:
        """Parameter names in checkpoint order: W1, U, b1, W2, b2, ..."""
        order = ["W1", "U", "b1"]
        for layer in range(2, len(self.dims) + 1):
            order += [f"W{layer}", f"b{layer}"]
        return order

    def copy(self) -> RnnParams:
        return RnnParams(self.tag, self.input_dim, self.dims, {k: v.copy() for k, v in self.weights.items()})

    def with_weights(self, weights: dict[str, np.ndarray]) -> RnnParams:
        return RnnParams(self.tag, self.input_dim, self.dims, weights)


def _check_layout(tag: str, dims, input_dim: int) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if tag not in NETWORK_TAGS:
        raise ValueError(f"network tag must be one of {sorted(NETWORK_TAGS)}, got {tag!r}")
    if len(dims) != len(ACTIVATIONS):
        raise ValueError(f"expected {len(ACTIVATIONS)} layers, got dims {dims}")
    if dims[-1] != 1 or min(dims) < 1 or input_dim < 1:
        raise ValueError(f"invalid layer dims {dims} / input dim {input_dim}: output layer must have width 1")
    return dims


def layer_shapes(dims: tuple[int, ...], input_dim: int) -> dict[str, tuple[int, int]]:
    shapes = {"U": (dims[0], dims[0])}
    fan_in = input_dim
    for layer, width in enumerate(dims, start=1):
        shapes[f"W{layer}"] = (width, fan_in)
        shapes[f"b{layer}"] = (width, 1)
        fan_in = width
    return shapes


def init_params(dims, input_dim: int, rng: np.random.Generator, tag: str = "control") -> RnnParams:
    """Glorot-uniform weights, zero biases; U uses the hidden width for both fans."""
    dims = _check_layout(tag, dims, input_dim)
    weights = {}
    for name, shape in layer_shapes(dims, input_dim).items():
        if name.startswith("b"):
            weights[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return RnnParams(tag, input_dim, dims, weights)


def zero_params(dims, input_dim: int, tag: str = "control") -> RnnParams:
    dims = _check_layout(tag, dims, input_dim)
    weights = {name: np.zeros(shape) for name, shape in layer_shapes(dims, input_dim).items()}
    return RnnParams(tag, input_dim, dims, weights)


def control_params(rng: np.random.Generator) -> RnnParams:
    return init_params(CONTROL_DIMS, CONTROL_INPUTS, rng, tag="control")


def price_params(rng: np.random.Generator) -> RnnParams:
    return init_params(PRICE_DIMS, PRICE_INPUTS, rng, tag="price")


def param_count(params: RnnParams) -> int:
    return int(sum(w.size for w in params.weights.values()))


class BoundNetwork:
    """Parameters recorded on a tape, as trainable leaves or as constants."""

    def __init__(self, params: RnnParams, tape: Tape, trainable: bool = False, prefix: str = "") -> None:
        self.params = params
        self.tape = tape
        self.nodes: dict[str, Node] = {}
        for name in params.names():
            value = params.weights[name]
            self.nodes[name] = tape.param(value, prefix + name) if trainable else tape.const(value)

    @classmethod
    def wrap(cls, params: RnnParams, tape: Tape, nodes: dict[str, Node], prefix: str = "") -> BoundNetwork:
        """Bind leaves that already live on the tape (used by the finite-difference check)."""
        net = cls.__new__(cls)
        net.params, net.tape = params, tape
        net.nodes = {name: nodes[prefix + name] for name in params.names()}
        return net

    def zero_state(self, batch: int) -> Node:
        return self.tape.const(np.zeros((self.params.hidden_dim, batch)))


def cell_step(net: BoundNetwork, h: Node, inputs: Node) -> tuple[Node, Node]:
    """One recurrent step for a batch of columns; returns (output 1 x B, next hidden state)."""
    tape, w = net.tape, net.nodes
    if inputs.shape[0] != net.params.input_dim:
        raise ShapeError(f"{net.params.tag} network expects {net.params.input_dim} input rows, got {inputs.shape[0]}")
    if h.shape != (net.params.hidden_dim, inputs.shape[1]):
        raise ShapeError(f"hidden state shape {h.shape} does not match batch {inputs.shape[1]}")
    h_next = tape.tanh(tape.add(tape.add(tape.matmul(w["W1"], inputs), tape.matmul(w["U"], h)), w["b1"]))
    a = h_next
    for layer in range(2, len(net.params.dims)):
        a = tape.sigmoid(tape.add(tape.matmul(w[f"W{layer}"], a), w[f"b{layer}"]))
    last = len(net.params.dims)
    out = tape.identity(tape.add(tape.matmul(w[f"W{last}"], a), w[f"b{last}"]))
    return out, h_next


def unroll_price(net: BoundNetwork, q: np.ndarray, t: np.ndarray, horizon: float) -> list[Node]:
    """
    Price sequence for supply paths q (J x (K+1)); returns K+1 nodes of shape 1 x J.
    Step k sees only (Q[k], t[k]/T) plus the hidden state, so prices never anticipate.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    batch = q.shape[0]
    h = net.zero_state(batch)
    prices = []
    for k in range(q.shape[1]):
        features = np.vstack([q[:, k], np.full(batch, t[k] / horizon)])
        out, h = cell_step(net, h, net.tape.const(features))
        prices.append(out)
    return prices


def price_path(params: RnnParams, supply: SupplyPath, horizon: float | None = None) -> np.ndarray:
    """Numeric price sequence for one supply path (no gradients)."""
    tape = Tape()
    net = BoundNetwork(params, tape)
    horizon = supply.t[-1] if horizon is None else horizon
    nodes = unroll_price(net, supply.q[None, :], supply.t, horizon)
    return np.array([node.value[0, 0] for node in nodes])


def euler_advance(dt: float) -> Callable[[Node, Node], Node]:
    def advance(x: Node, v: Node) -> Node:
        return x + v * dt

    return advance


def unroll_control(
    net: BoundNetwork,
    t: np.ndarray,
    x0: np.ndarray,
    prices: list[Node],
    advance: Callable[[Node, Node], Node],
    expand: np.ndarray | None = None,
    terminal: bool = True,
) -> tuple[list[Node], list[Node]]:
    """
    Interleave control outputs with state updates.

    x0 holds one column per agent; prices[k] has one column per supply path and
    `expand` (paths x agents, 0/1) routes each path's price to its agents.
    Returns (X[0..K], v[0..K]) or v[0..K-1] when terminal is False.
    """
    tape = net.tape
    x = tape.const(np.atleast_2d(np.asarray(x0, dtype=np.float64)).reshape(1, -1))
    batch = x.shape[1]
    expand_node = tape.const(expand) if expand is not None else None
    h = net.zero_state(batch)
    steps = len(t) - 1
    states, controls = [x], []
    for k in range(steps + 1):
        if k == steps and not terminal:
            break
        price = prices[k] if expand_node is None else tape.matmul(prices[k], expand_node)
        if price.shape[1] != batch:
            raise ShapeError(f"price batch {price.shape[1]} does not match {batch} agents")
        features = tape.concat([tape.const(np.full((1, batch), t[k])), x, price], axis=0)
        v, h = cell_step(net, h, features)
        controls.append(v)
        if k < steps:
            x = advance(x, v)
            states.append(x)
    return states, controls


def save_params(params: RnnParams) -> bytes:
    """Checkpoint bytes: header, per-layer (in, out) dims, then float64 LE weights in names() order."""
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, NETWORK_TAGS[params.tag], len(params.dims))
    fan_in = params.input_dim
    layers = b""
    for width in params.dims:
        layers += _LAYER.pack(fan_in, width)
        fan_in = width
    body = b"".join(np.ascontiguousarray(params.weights[name], dtype="<f8").tobytes() for name in params.names())
    return header + layers + body


def load_params(data: bytes) -> RnnParams:
    if len(data) < _HEADER.size:
        raise CheckpointError(f"checkpoint truncated: {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, tag_code, layer_count = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    tags = {code: name for name, code in NETWORK_TAGS.items()}
    if tag_code not in tags:
        raise CheckpointError(f"unknown network tag {tag_code}")
    offset = _HEADER.size
    if len(data) < offset + layer_count * _LAYER.size:
        raise CheckpointError("checkpoint truncated inside the layer table")
    layers = [_LAYER.unpack_from(data, offset + i * _LAYER.size) for i in range(layer_count)]
    offset += layer_count * _LAYER.size
    for (_, prev_out), (next_in, _) in zip(layers, layers[1:]):
        if prev_out != next_in:
            raise CheckpointError(f"layer table does not chain: {layers}")
    try:
        dims = _check_layout(tags[tag_code], [out for _, out in layers], layers[0][0] if layers else 0)
    except ValueError as e:
        raise CheckpointError(f"invalid layer table: {e}") from None
    input_dim = layers[0][0]
    shapes = layer_shapes(dims, input_dim)
    skeleton = RnnParams(tags[tag_code], input_dim, dims, {})
    expected = offset + 8 * sum(shapes[n][0] * shapes[n][1] for n in skeleton.names())
    if len(data) != expected:
        raise CheckpointError(f"checkpoint length {len(data)} differs from declared length {expected}")
    weights = {}
    for name in skeleton.names():
        rows, cols = shapes[name]
        count = rows * cols
        weights[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(rows, cols)
        offset += 8 * count
    return skeleton.with_weights(weights)
