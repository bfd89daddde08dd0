"""Forward network: attention message passing with per-node recurrence.

Each layer runs a shared-weight attention aggregation on every time step's
graph, then feeds each node's aggregated sequence through that node's own
gated recurrent unit. Two layers are stacked. A sliding window of the final
per-node states (strictly earlier steps only) is concatenated and mapped by
a shared affine head, rectified so predictions stay nonnegative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericError

CHECKPOINT_VERSION = "dglr-ckpt-1"
LEAKY_SLOPE = 0.2
ACTIVATIONS = {"elu": ad.elu, "tanh": ad.tanh, "relu": ad.relu}


@dataclass
class GnnLayerParams:
    """One message-passing layer: a projection shared across time steps and
    an attention vector scoring (center, neighbor) projection pairs."""

    weight: Tensor     # (k_out, k_in)
    attention: Tensor  # (2 * k_out,)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class NodeGruParams:
    """Recurrent gate parameters with one independent set per node.

    Fields are stacked on a leading node axis of size ``num_nodes``, or 1
    when a single set is shared by every node. ``w_*`` act on the current
    layer input, ``p_*`` on the previous state, ``b_*`` are biases.
    """

    w_update: Tensor  # (g, k, k)
    p_update: Tensor  # (g, k, k)
    b_update: Tensor  # (g, k)
    w_reset: Tensor
    p_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    p_cand: Tensor
    b_cand: Tensor

    @property
    def num_sets(self) -> int:
        return self.w_update.shape[0]


@dataclass
class HeadParams:
    """Affine map from the concatenated window of states to one value,
    shared across nodes and time."""

    weight: Tensor  # (window * k,)
    bias: Tensor    # ()


@dataclass
class ModelParams:
    layer1: GnnLayerParams
    gru1: NodeGruParams
    layer2: GnnLayerParams
    gru2: NodeGruParams
    head: HeadParams
    num_nodes: int
    num_features: int
    embedding_dim: int
    window: int
    shared_gru: bool = False
    activation: str = "elu"

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("layer1.weight", self.layer1.weight),
            ("layer1.attention", self.layer1.attention),
            ("layer2.weight", self.layer2.weight),
            ("layer2.attention", self.layer2.attention),
        ]
        for prefix, gru in (("gru1", self.gru1), ("gru2", self.gru2)):
            for gate in ("update", "reset", "cand"):
                out.append((f"{prefix}.w_{gate}", getattr(gru, f"w_{gate}")))
                out.append((f"{prefix}.p_{gate}", getattr(gru, f"p_{gate}")))
                out.append((f"{prefix}.b_{gate}", getattr(gru, f"b_{gate}")))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def validate(self) -> None:
        n, d, k, w = self.num_nodes, self.num_features, self.embedding_dim, self.window
        g = 1 if self.shared_gru else n
        expected = {
            "layer1.weight": (k, d),
            "layer1.attention": (2 * k,),
            "layer2.weight": (k, k),
            "layer2.attention": (2 * k,),
            "head.weight": (w * k,),
            "head.bias": (),
        }
        for prefix in ("gru1", "gru2"):
            for gate in ("update", "reset", "cand"):
                expected[f"{prefix}.w_{gate}"] = (g, k, k)
                expected[f"{prefix}.p_{gate}"] = (g, k, k)
                expected[f"{prefix}.b_{gate}"] = (g, k)
        for name, tensor in self.parameters():
            if tensor.shape != expected[name]:
                raise DimensionError(
                    f"parameter {name} has shape {tensor.shape}, expected {expected[name]}"
                )
        if self.activation not in ACTIVATIONS:
            raise DimensionError(f"unknown activation {self.activation!r}")

    def copy_data(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_data(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters():
            t.data = np.array(snapshot[name], dtype=np.float64)


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = float(np.sqrt(1.0 / fan_in))
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def _init_gru(rng: np.random.Generator, num_sets: int, k: int) -> NodeGruParams:
    fields = {}
    for gate in ("update", "reset", "cand"):
        fields[f"w_{gate}"] = _uniform(rng, (num_sets, k, k), k)
        fields[f"p_{gate}"] = _uniform(rng, (num_sets, k, k), k)
        fields[f"b_{gate}"] = _uniform(rng, (num_sets, k), k)
    return NodeGruParams(**fields)


def init_params(
    num_nodes: int,
    num_features: int,
    embedding_dim: int,
    window: int,
    *,
    rng: np.random.Generator,
    shared_gru: bool = False,
    activation: str = "elu",
) -> ModelParams:
    """Fan-in-scaled uniform initialization; draw order is fixed so a seed
    fully determines the parameters."""
    k = embedding_dim
    g = 1 if shared_gru else num_nodes
    layer1 = GnnLayerParams(
        weight=_uniform(rng, (k, num_features), num_features),
        attention=_uniform(rng, (2 * k,), 2 * k),
    )
    gru1 = _init_gru(rng, g, k)
    layer2 = GnnLayerParams(
        weight=_uniform(rng, (k, k), k),
        attention=_uniform(rng, (2 * k,), 2 * k),
    )
    gru2 = _init_gru(rng, g, k)
    head = HeadParams(
        weight=_uniform(rng, (window * k,), window * k),
        bias=_uniform(rng, (), window * k),
    )
    params = ModelParams(
        layer1=layer1,
        gru1=gru1,
        layer2=layer2,
        gru2=gru2,
        head=head,
        num_nodes=num_nodes,
        num_features=num_features,
        embedding_dim=embedding_dim,
        window=window,
        shared_gru=shared_gru,
        activation=activation,
    )
    params.validate()
    return params


# -- message passing ----------------------------------------------------------


def _attention_batch(layer: GnnLayerParams, x: Tensor, adjacency: np.ndarray):
    """Attention weights and projected features for a (t, n, k_in) input batch.

    Per step, the score of neighbor j for center i is a leaky-rectified dot
    product of the attention vector with the concatenated projections of i
    and j, softmax-normalized over i's neighbor support (entries with
    positive adjacency, which always include i itself).
    """
    k = layer.out_dim
    t, n, _ = x.shape
    proj = ad.matmul(x, ad.transpose_last2(layer.weight))  # (t, n, k)
    score_center = ad.dot_last(proj, layer.attention[:k])  # (t, n)
    score_neighbor = ad.dot_last(proj, layer.attention[k:])
    logits = ad.leaky_relu(
        ad.add(score_center.reshape((t, n, 1)), score_neighbor.reshape((t, 1, n))),
        LEAKY_SLOPE,
    )
    alpha = ad.masked_softmax(logits, adjacency > 0, axis=-1)
    return alpha, proj


def _gnn_batch(layer: GnnLayerParams, x: Tensor, adjacency: np.ndarray, activation: str) -> Tensor:
    alpha, proj = _attention_batch(layer, x, adjacency)
    weighted = ad.mul(alpha, adjacency)
    return ACTIVATIONS[activation](ad.matmul(weighted, proj))


def attention_coefficients(layer: GnnLayerParams, features, adjacency) -> Tensor:
    """Dense (n, n) attention matrix for a single step; zero outside support."""
    x = ad.as_tensor(features)
    n = x.shape[0]
    adj = np.asarray(adjacency, dtype=np.float64)
    alpha, _ = _attention_batch(layer, x.reshape((1, n, x.shape[1])), adj[None])
    return alpha[0]


def gnn_forward(layer: GnnLayerParams, features, adjacency, activation: str = "elu") -> Tensor:
    """One step of attention-weighted aggregation: each node's new feature is
    the activation of the sum of its neighbors' projections, weighted by both
    the attention coefficient and the adjacency entry."""
    x = ad.as_tensor(features)
    n = x.shape[0]
    if x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"features have {x.shape[1]} channels, layer expects {layer.in_dim}"
        )
    adj = np.asarray(adjacency, dtype=np.float64)
    out = _gnn_batch(layer, x.reshape((1, n, x.shape[1])), adj[None], activation)
    return out[0]


# -- recurrence ----------------------------------------------------------------


def _nodewise_matvec(matrices: Tensor, vectors: Tensor) -> Tensor:
    """Apply node i's matrix to node i's vector: (g, k, k) x (..., n, k).

    A leading matrix axis of size 1 broadcasts one shared set over all nodes.
    """
    shape = vectors.shape
    out = ad.matmul(matrices, vectors.reshape(shape + (1,)))
    return out.reshape(shape)


def _gru_gates(gru: NodeGruParams, in_update: Tensor, in_reset: Tensor, in_cand: Tensor, state: Tensor) -> Tensor:
    """Advance one step given precomputed input-side projections (bias included)."""
    update = ad.sigmoid(ad.add(in_update, _nodewise_matvec(gru.p_update, state)))
    reset = ad.sigmoid(ad.add(in_reset, _nodewise_matvec(gru.p_reset, state)))
    cand = ad.tanh(ad.add(in_cand, _nodewise_matvec(gru.p_cand, ad.mul(reset, state))))
    return ad.add(ad.mul(ad.sub(1.0, update), state), ad.mul(update, cand))


def gru_step(gru: NodeGruParams, inputs, state) -> Tensor:
    """One recurrence step for every node: sigmoid update/reset gates, a
    tanh candidate on the reset-gated state, and a convex blend of old state
    and candidate. States start at zero at the first step."""
    x = ad.as_tensor(inputs)
    h = ad.as_tensor(state)
    in_update = ad.add(_nodewise_matvec(gru.w_update, x), gru.b_update)
    in_reset = ad.add(_nodewise_matvec(gru.w_reset, x), gru.b_reset)
    in_cand = ad.add(_nodewise_matvec(gru.w_cand, x), gru.b_cand)
    return _gru_gates(gru, in_update, in_reset, in_cand, h)


def _gru_scan(gru: NodeGruParams, inputs: Tensor, layer_name: str) -> Tensor:
    """Run the recurrence over a (t, n, k) input sequence; returns all states."""
    t, n, k = inputs.shape
    in_update = ad.add(_nodewise_matvec(gru.w_update, inputs), gru.b_update)
    in_reset = ad.add(_nodewise_matvec(gru.w_reset, inputs), gru.b_reset)
    in_cand = ad.add(_nodewise_matvec(gru.w_cand, inputs), gru.b_cand)
    state = ad.as_tensor(np.zeros((n, k)))
    states = []
    for step in range(t):
        state = _gru_gates(gru, in_update[step], in_reset[step], in_cand[step], state)
        if not np.isfinite(state.data).all():
            raise NumericError(f"non-finite activation in {layer_name} at step {step}")
        states.append(state)
    return ad.stack(states, axis=0)


# -- full forward ---------------------------------------------------------------


@dataclass
class ForwardResult:
    """All intermediate activations of one forward pass.

    ``predictions[m]`` targets step ``prediction_steps[m]`` and is computed
    from final-layer states of strictly earlier steps only.
    """

    gnn1: Tensor     # (t, n, k)
    states1: Tensor  # (t, n, k)
    gnn2: Tensor     # (t, n, k)
    states2: Tensor  # (t, n, k)
    predictions: Tensor        # (t - window, n)
    prediction_steps: np.ndarray

    @property
    def embeddings(self) -> Tensor:
        return self.states2


def _check_finite(tensor: Tensor, layer_name: str) -> None:
    if not np.isfinite(tensor.data).all():
        step = int(np.argwhere(~np.isfinite(tensor.data))[0][0])
        raise NumericError(f"non-finite activation in {layer_name} at step {step}")


def forward_all(params: ModelParams, adjacency: np.ndarray, features) -> ForwardResult:
    """Run both layers over all steps and emit windowed predictions.

    ``adjacency`` is a (t, n, n) stack of row-stochastic matrices;
    ``features`` is (t, n, d). Prediction for step t concatenates the final
    states of steps t-window .. t-1, so at least window + 1 steps are needed.
    """
    x = ad.as_tensor(features)
    adj = np.asarray(adjacency, dtype=np.float64)
    t, n, d = x.shape
    w = params.window
    if n != params.num_nodes:
        raise DimensionError(f"dataset has {n} locations, model expects {params.num_nodes}")
    if d != params.num_features:
        raise DimensionError(f"dataset has {d} features, model expects {params.num_features}")
    if adj.shape != (t, n, n):
        raise DimensionError(f"adjacency stack must be ({t}, {n}, {n}), got {adj.shape}")
    if t < w + 1:
        raise DimensionError(f"need at least window + 1 = {w + 1} steps, got {t}")

    gnn1 = _gnn_batch(params.layer1, x, adj, params.activation)
    _check_finite(gnn1, "layer 1 attention aggregation")
    states1 = _gru_scan(params.gru1, gnn1, "layer 1 recurrence")
    gnn2 = _gnn_batch(params.layer2, states1, adj, params.activation)
    _check_finite(gnn2, "layer 2 attention aggregation")
    states2 = _gru_scan(params.gru2, gnn2, "layer 2 recurrence")

    history = ad.concat([states2[k : t - w + k] for k in range(w)], axis=-1)
    preds = ad.relu(ad.add(ad.dot_last(history, params.head.weight), params.head.bias))
    return ForwardResult(
        gnn1=gnn1,
        states1=states1,
        gnn2=gnn2,
        states2=states2,
        predictions=preds,
        prediction_steps=np.arange(w, t),
    )


# -- checkpointing ---------------------------------------------------------------


def params_to_dict(params: ModelParams, *, seed: int) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "dims": {
            "num_nodes": params.num_nodes,
            "num_features": params.num_features,
            "embedding_dim": params.embedding_dim,
            "window": params.window,
        },
        "seed": seed,
        "shared_gru": params.shared_gru,
        "activation": params.activation,
        "params": {name: t.data.tolist() for name, t in params.parameters()},
    }


def params_from_dict(payload: dict) -> ModelParams:
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DimensionError(
            f"unsupported checkpoint version {payload.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION!r}"
        )
    dims = payload["dims"]
    rng = np.random.default_rng(0)
    params = init_params(
        dims["num_nodes"],
        dims["num_features"],
        dims["embedding_dim"],
        dims["window"],
        rng=rng,
        shared_gru=payload["shared_gru"],
        activation=payload["activation"],
    )
    params.load_data({k: np.asarray(v, dtype=np.float64) for k, v in payload["params"].items()})
    params.validate()
    return params


def save_checkpoint(path, params: ModelParams, *, seed: int, extra: dict | None = None) -> None:
    payload = params_to_dict(params, seed=seed)
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    return params_from_dict(payload), payload
