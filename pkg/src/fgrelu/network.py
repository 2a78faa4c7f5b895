"""Architecture description and unrolling of feedback networks.

A network is an ordered list of layers.  Dense and (transposed)
convolution layers carry weights and an activation; pooling, batch-norm
and dropout layers attach to the preceding weighted layer, forming a
*block*.  A feedback edge runs top-down from a later block (source) to an
earlier weighted layer (target) whose activation is a gated ReLU.

Unrolling stacks the whole network ``timesteps`` times with shared
weights.  At pass 1 every gate sees zero feedback; at pass ``p >= 2`` a
target's feedback is the sum over its incoming edges of
``W_edge @ h_source`` where ``h_source`` is the source block's output at
pass ``p - 1`` (globally average-pooled to one value per filter when the
source is convolutional).  A convolutional target receives one feedback
scalar per filter, shared by every spatial position.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import activation as act
from . import tensor as T
from .autograd import Node, Tape, primitive
from .errors import DimensionError, ParameterError, SpecError

WEIGHTED = ("dense", "conv2d", "conv2d_transpose")
ATTACHED = ("max_pool", "batch_norm", "dropout", "activation")
GATED = ("fg_relu", "fg_relu_threshold")
ACTIVATIONS = ("relu", "sigmoid", "softmax", "none") + GATED


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: Optional[int] = None  # units (dense) or filters (conv)
    kernel: Optional[int] = None
    stride: int = 1
    padding: str = "valid"
    activation: str = "none"
    rate: Optional[float] = None  # dropout; None -> NetworkSpec.dropout_rate
    name: Optional[str] = None
    gain_override: Optional[object] = None

    def __post_init__(self):
        if self.kind not in WEIGHTED + ATTACHED:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.kind in WEIGHTED and (self.size is None or self.size < 1):
            raise SpecError(f"{self.kind} layer needs a positive size")
        if self.kind in ("conv2d", "conv2d_transpose") and not self.kernel:
            raise SpecError(f"{self.kind} layer needs a kernel size")
        if self.gain_override is not None and not np.isscalar(self.gain_override):
            object.__setattr__(self, "gain_override", tuple(float(g) for g in self.gain_override))

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED

    @property
    def gated(self) -> bool:
        return self.activation in GATED


@dataclass(frozen=True, eq=False)
class FeedbackEdge:
    """Top-down connection; ``weights`` is (target units, source units) when given."""

    source: int
    target: int
    weights: Optional[np.ndarray] = None


def dense(size, activation="relu", name=None, **kw) -> LayerSpec:
    return LayerSpec("dense", size=size, activation=activation, name=name, **kw)


def conv(filters, kernel, activation="relu", name=None, **kw) -> LayerSpec:
    return LayerSpec("conv2d", size=filters, kernel=kernel, activation=activation, name=name, **kw)


def deconv(filters, kernel, activation="relu", name=None, **kw) -> LayerSpec:
    return LayerSpec("conv2d_transpose", size=filters, kernel=kernel, activation=activation,
                     name=name, **kw)


def infer_shapes(input_shape: Sequence[int], layers: Sequence[LayerSpec]) -> list[tuple]:
    """Per-sample output shape of every layer."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            shape = (layer.size,)
        elif layer.kind == "conv2d":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: conv2d needs (C, H, W) input, got {shape}")
            k = layer.kernel
            ho = T.conv_output_size(shape[1], k, layer.stride, layer.padding)
            wo = T.conv_output_size(shape[2], k, layer.stride, layer.padding)
            if ho < 1 or wo < 1:
                raise SpecError(f"layer {i}: kernel {k} too large for input {shape}")
            shape = (layer.size, ho, wo)
        elif layer.kind == "conv2d_transpose":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: conv2d_transpose needs (C, H, W) input, got {shape}")
            s, k = layer.stride, layer.kernel
            shape = (layer.size, (shape[1] - 1) * s + k, (shape[2] - 1) * s + k)
        elif layer.kind == "max_pool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise SpecError(f"layer {i}: max_pool needs spatial input >= 2x2, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        shapes.append(shape)
    return shapes


def units(layer: LayerSpec) -> int:
    """Feedback width of a weighted layer: units (dense) or filters (conv)."""
    return layer.size


def weighted_indices(layers: Sequence[LayerSpec]) -> list[int]:
    return [i for i, l in enumerate(layers) if l.weighted]


def comprehensive_edges(layers: Sequence[LayerSpec]) -> list[FeedbackEdge]:
    """Every gated layer receives an edge from every weighted layer above it.

    Weights are zero placeholders of shape (target units, source units).
    """
    idx = weighted_indices(layers)
    edges = []
    for a, t in enumerate(idx):
        if not layers[t].gated:
            continue
        for s in idx[a + 1:]:
            edges.append(FeedbackEdge(s, t, np.zeros((units(layers[t]), units(layers[s])))))
    return edges


def compute_feedback(edge: FeedbackEdge, source_activations: np.ndarray) -> np.ndarray:
    """Feedback delivered by one edge for a batch of source activations.

    ``source_activations`` is (N, m) for a dense source or (N, m, H, W) for a
    conv source, which is averaged over space first.  Returns (N, n).
    """
    h = np.asarray(source_activations)
    if h.ndim == 4:
        h = h.mean(axis=(2, 3))
    w = edge.weights
    if h.ndim != 2 or h.shape[1] != w.shape[1]:
        raise DimensionError(
            f"feedback weights {w.shape} cannot consume source activations {np.shape(source_activations)}")
    return h @ w.T


def sum_feedback(edges: Sequence[FeedbackEdge], prev_activations: dict, n_units: int,
                 batch: int = 1) -> np.ndarray:
    """Sum of :func:`compute_feedback` over ``edges`` (all sharing one target).

    ``prev_activations`` maps source layer index to its activations.  With
    no edges the result is zeros of shape (batch, n_units).
    """
    targets = {e.target for e in edges}
    if len(targets) > 1:
        raise SpecError(f"sum_feedback: edges target different layers {sorted(targets)}")
    total = np.zeros((batch, n_units))
    for e in edges:
        total = total + compute_feedback(e, prev_activations[e.source])
    return total


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    feedback_edges: tuple = ()
    timesteps: int = 1
    fg_params: act.FgReluParams = field(default_factory=act.FgReluParams)
    dropout_rate: float = 0.0
    detach_feedback: bool = False

    def __post_init__(self):
        layers = []
        for i, layer in enumerate(self.layers):
            if layer.name is None:
                layer = dataclasses.replace(layer, name=f"L{i}")
            layers.append(layer)
        object.__setattr__(self, "layers", tuple(layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "feedback_edges", tuple(self.feedback_edges))
        self._validate()

    def _validate(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate layer names {names}")
        if self.timesteps < 1:
            raise SpecError(f"timesteps must be >= 1, got {self.timesteps}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not self.layers or not self.layers[0].weighted:
            raise SpecError("the first layer must be dense or convolutional")
        self.shapes  # shape inference raises on inconsistency
        seen = set()
        for e in self.feedback_edges:
            n = len(self.layers)
            if not (0 <= e.target < n and 0 <= e.source < n):
                raise SpecError(f"edge {e.source}->{e.target} refers to a missing layer")
            if e.source <= e.target:
                raise SpecError(f"edge {e.source}->{e.target} is not top-down")
            src, tgt = self.layers[e.source], self.layers[e.target]
            if not (src.weighted and tgt.weighted):
                raise SpecError(f"edge {e.source}->{e.target} must join weighted layers")
            if not tgt.gated:
                raise SpecError(f"edge target {tgt.name} has activation {tgt.activation!r}, "
                                "not a gated ReLU")
            if (e.source, e.target) in seen:
                raise SpecError(f"duplicate edge {e.source}->{e.target}")
            seen.add((e.source, e.target))
            if e.weights is not None and np.shape(e.weights) != (units(tgt), units(src)):
                raise SpecError(f"edge {src.name}->{tgt.name} weights {np.shape(e.weights)} "
                                f"!= {(units(tgt), units(src))}")
        if self.active_edges and self.timesteps < 2:
            raise SpecError("feedback needs at least two timesteps")

    @property
    def shapes(self) -> list:
        return infer_shapes(self.input_shape, self.layers)

    def override_for(self, i: int):
        """Gain override in force for layer ``i``, or None."""
        layer = self.layers[i]
        if layer.gain_override is not None:
            return layer.gain_override
        if self.fg_params.gain_override is not None and layer.activation in ("relu",) + GATED:
            if i != self.output_layer:
                return self.fg_params.gain_override
        return None

    @property
    def output_layer(self) -> int:
        return weighted_indices(self.layers)[-1]

    @property
    def active_edges(self) -> tuple:
        """Edges whose target is not overridden (overrides bypass feedback)."""
        return tuple(e for e in self.feedback_edges if self.override_for(e.target) is None)

    def gated_layers(self) -> list[int]:
        """Layers that receive feedback through at least one active edge."""
        return sorted({e.target for e in self.active_edges})

    def edge_name(self, e: FeedbackEdge) -> str:
        return f"fb/{self.layers[e.source].name}->{self.layers[e.target].name}"

    def block_end(self, i: int) -> int:
        """Index of the last layer belonging to the block started by layer ``i``."""
        j = i
        while j + 1 < len(self.layers) and not self.layers[j + 1].weighted:
            j += 1
        return j

    def replace(self, **changes) -> "NetworkSpec":
        return dataclasses.replace(self, **changes)

    def without_feedback(self) -> "NetworkSpec":
        """Twin network: no edges, gated activations swapped for ReLU, one pass."""
        layers = tuple(dataclasses.replace(l, activation="relu") if l.gated else l
                       for l in self.layers)
        return dataclasses.replace(self, layers=layers, feedback_edges=(), timesteps=1)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        fg = dataclasses.asdict(self.fg_params)
        return {
            "input_shape": list(self.input_shape),
            "layers": [{k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in dataclasses.asdict(l).items()} for l in self.layers],
            "feedback_edges": [{"source": e.source, "target": e.target}
                               for e in self.feedback_edges],
            "timesteps": self.timesteps,
            "fg_params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in fg.items()},
            "dropout_rate": self.dropout_rate,
            "detach_feedback": self.detach_feedback,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            feedback_edges=tuple(FeedbackEdge(e["source"], e["target"])
                                 for e in d.get("feedback_edges", ())),
            timesteps=d.get("timesteps", 1),
            fg_params=act.FgReluParams(**d.get("fg_params", {})),
            dropout_rate=d.get("dropout_rate", 0.0),
            detach_feedback=d.get("detach_feedback", False),
        )


# ---------------------------------------------------------------------------
# parameters

def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, parameter name).

    Keeps initial weights identical across networks that differ only in
    extra parameters such as feedback edges.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _uniform(seed, name, shape, fan_in, dtype):
    limit = 1.0 / np.sqrt(fan_in)
    return param_rng(seed, name).uniform(-limit, limit, size=shape).astype(dtype)


def init_params(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> tuple[dict, dict]:
    """Initial trainable parameters and batch-norm running statistics."""
    params, state = {}, {}
    shapes = spec.shapes
    prev = spec.input_shape
    for i, layer in enumerate(spec.layers):
        n = layer.name
        if layer.kind == "dense":
            fan_in = int(np.prod(prev))
            params[f"{n}/W"] = _uniform(seed, f"{n}/W", (layer.size, fan_in), fan_in, dtype)
            params[f"{n}/b"] = np.zeros(layer.size, dtype=dtype)
        elif layer.kind == "conv2d":
            k, c_in = layer.kernel, prev[0]
            params[f"{n}/W"] = _uniform(seed, f"{n}/W", (layer.size, c_in, k, k), c_in * k * k,
                                        dtype)
            params[f"{n}/b"] = np.zeros(layer.size, dtype=dtype)
        elif layer.kind == "conv2d_transpose":
            k, c_in = layer.kernel, prev[0]
            params[f"{n}/W"] = _uniform(seed, f"{n}/W", (c_in, layer.size, k, k), c_in * k * k,
                                        dtype)
            params[f"{n}/b"] = np.zeros(layer.size, dtype=dtype)
        elif layer.kind == "batch_norm":
            c = prev[0]
            params[f"{n}/gamma"] = np.ones(c, dtype=dtype)
            params[f"{n}/beta"] = np.zeros(c, dtype=dtype)
            state[f"{n}/mean"] = np.zeros(c, dtype=dtype)
            state[f"{n}/var"] = np.ones(c, dtype=dtype)
        if layer.weighted and layer.activation == "fg_relu_threshold" \
                and spec.override_for(i) is None:
            a0 = spec.fg_params.alpha if spec.fg_params.alpha is not None else 0.0
            params[f"{n}/alpha"] = np.array([a0], dtype=dtype)
        prev = shapes[i]
    for e in spec.active_edges:
        shape = (units(spec.layers[e.target]), units(spec.layers[e.source]))
        w = np.zeros(shape) if e.weights is None else np.array(e.weights)
        params[spec.edge_name(e)] = w.astype(dtype)
    return params, state


def param_count(params: dict) -> int:
    return int(sum(np.size(v) for v in params.values()))


# ---------------------------------------------------------------------------
# unrolling

@primitive("zero_feedback")
class _ZeroFeedback:
    """Zero feedback of shape (N, units) for gates without incoming signal."""

    @staticmethod
    def fwd(v, a):
        return np.zeros((v[0].shape[0], a["units"]), dtype=v[0].dtype), None

    bwd = staticmethod(lambda g, v, out, c, a: (None,))


def _hidden(spec: NetworkSpec) -> list[int]:
    return [i for i in weighted_indices(spec.layers) if i != spec.output_layer]


def unroll(spec: NetworkSpec, params: dict, *, state: Optional[dict] = None,
           training: bool = False, noise: bool = False, loss: Optional[str] = None) -> Tape:
    """Instantiate the layer stack ``spec.timesteps`` times on one tape.

    Placeholders: ``x`` (bound once, read by every pass); ``target`` when a
    loss is requested; ``dropout/<layer>`` masks when training (one per
    dropout layer, shared by all passes); ``noise/<layer>/p<k>`` added to
    hidden pre-activations when ``noise`` is set.

    Named nodes: ``out/p<k>`` per pass, ``<layer>/p<k>/mu_d`` for each gate,
    ``<layer>/p<k>/block`` for each block output, and ``loss`` computed on
    the final pass only.
    """
    tape = Tape(params)
    state = state if state is not None else {}
    shapes = spec.shapes
    x = tape.placeholder("x")
    hidden = set(_hidden(spec))
    incoming: dict[int, list[FeedbackEdge]] = {}
    for e in spec.active_edges:
        incoming.setdefault(e.target, []).append(e)
    edge_sources = {e.source for e in spec.active_edges}

    blocks_prev: dict[int, Node] = {}
    out = None
    for p in range(1, spec.timesteps + 1):
        h = x
        blocks: dict[int, Node] = {}
        owner = None
        prev_shape = spec.input_shape
        for i, layer in enumerate(spec.layers):
            n = layer.name
            tag = f"{n}/p{p}"
            if layer.weighted:
                owner = i
                if layer.kind == "dense":
                    if len(prev_shape) != 1:
                        h = tape.apply("reshape", h, shape=(int(np.prod(prev_shape)),))
                    h = tape.apply("matmul_t", h, tape.parameter(f"{n}/W"))
                elif layer.kind == "conv2d":
                    h = tape.apply("conv2d", h, tape.parameter(f"{n}/W"), stride=layer.stride,
                                   padding=layer.padding)
                else:
                    h = tape.apply("conv2d_transpose", h, tape.parameter(f"{n}/W"),
                                   stride=layer.stride)
                h = tape.apply("add_bias", h, tape.parameter(f"{n}/b"))
                if noise and i in hidden:
                    h = tape.apply("add", h, tape.placeholder(f"noise/{n}/p{p}"))
                tape.named[f"{tag}/mu_s"] = h
                h = _activate(tape, spec, i, h, p, incoming.get(i, ()), blocks_prev, shapes[i])
            elif layer.kind == "max_pool":
                h = tape.apply("max_pool2d", h)
            elif layer.kind == "batch_norm":
                run = (state.get(f"{n}/mean"), state.get(f"{n}/var"))
                h = tape.apply("batch_norm", h, tape.parameter(f"{n}/gamma"),
                               tape.parameter(f"{n}/beta"), training=training, running=run,
                               name=f"{tag}/bn")
            elif layer.kind == "dropout":
                if training and _rate(spec, layer) > 0.0:
                    h = tape.apply("mul", h, tape.placeholder(f"dropout/{n}"))
            elif layer.kind == "activation":
                h = _plain_activation(tape, layer.activation, h)
            prev_shape = shapes[i]
            if owner is not None and spec.block_end(owner) == i:
                blocks[owner] = h
                tape.named[f"{spec.layers[owner].name}/p{p}/block"] = h
        out = h
        tape.named[f"out/p{p}"] = out
        blocks_prev = {i: blocks[i] for i in edge_sources}
    tape.meta["spec"] = spec
    tape.meta["final"] = out
    if loss is not None:
        target = tape.placeholder("target")
        tape.apply(loss, out, target, name="loss")
    return tape


def _rate(spec, layer):
    return spec.dropout_rate if layer.rate is None else layer.rate


def _plain_activation(tape, kind, h):
    if kind == "none":
        return h
    if kind in GATED:
        kind = "relu"
    return tape.apply(kind, h)


def _activate(tape, spec, i, h, p, edges, blocks_prev, out_shape):
    layer = spec.layers[i]
    n = layer.name
    override = spec.override_for(i)
    if override is not None:
        return tape.apply("gain_override", h, override=override, name=f"{n}/p{p}/act")
    if not layer.gated:
        return _plain_activation(tape, layer.activation, h)
    n_units = units(layer)
    if p == 1 or not edges:
        mu_d = tape.apply("zero_feedback", h, units=n_units)
    else:
        mu_d = None
        for e in edges:
            src = blocks_prev[e.source]
            if spec.detach_feedback:
                src = tape.apply("stop_gradient", src)
            if len(spec.shapes[spec.block_end(e.source)]) == 3:
                src = tape.apply("global_avg_pool", src)
            term = tape.apply("matmul_t", src, tape.parameter(spec.edge_name(e)))
            mu_d = term if mu_d is None else tape.apply("add", mu_d, term)
    tape.named[f"{n}/p{p}/mu_d"] = mu_d
    if len(out_shape) == 3:
        mu_d = tape.apply("broadcast_filters", mu_d, spatial=out_shape[1:])
    if layer.activation == "fg_relu":
        return tape.apply("fg_relu", h, mu_d, params=spec.fg_params, name=f"{n}/p{p}/act")
    return tape.apply("fg_relu_threshold", h, mu_d, tape.parameter(f"{n}/alpha"),
                      params=spec.fg_params, name=f"{n}/p{p}/act")


def shared_dropout_masks(spec: NetworkSpec, rng: np.random.Generator, batch_size: int,
                         training: bool = True, dtype=np.float64) -> dict:
    """One inverted-dropout mask per dropout layer, reused by every pass."""
    shapes = spec.shapes
    masks = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind != "dropout":
            continue
        rate = _rate(spec, layer)
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
        shape = (batch_size,) + tuple(shapes[i])
        if not training or rate == 0.0:
            masks[f"dropout/{layer.name}"] = np.ones(shape, dtype=dtype)
        else:
            keep = rng.random(shape) >= rate
            masks[f"dropout/{layer.name}"] = keep.astype(dtype) / (1.0 - rate)
    return masks


def update_running_stats(tape: Tape, state: dict, momentum: float = 0.9):
    """Fold the batch statistics of every batch-norm node into ``state``."""
    for node in tape.nodes:
        if node.kind == "batch_norm" and node.attrs["training"] and node.cache is not None:
            layer = node.name.split("/")[0]
            _, _, mean, var = node.cache
            state[f"{layer}/mean"] = momentum * state[f"{layer}/mean"] + (1 - momentum) * mean
            state[f"{layer}/var"] = momentum * state[f"{layer}/var"] + (1 - momentum) * var


# ---------------------------------------------------------------------------
# model wrapper and checkpoints

class Network:
    """A :class:`NetworkSpec` together with its parameter values."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float64,
                 params: Optional[dict] = None, state: Optional[dict] = None):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        if params is None:
            params, init_state = init_params(spec, seed, self.dtype)
            state = init_state if state is None else state
        self.params = params
        self.state = state if state is not None else {}
        self._tapes: dict = {}

    @property
    def n_params(self) -> int:
        return param_count(self.params)

    def tape(self, *, training=False, noise=False, loss=None) -> Tape:
        """Cached unrolled tape for a given mode (batch-norm stats are re-read)."""
        key = (training, noise, loss)
        if key not in self._tapes or not training:
            # eval tapes capture running stats at build time, so rebuild them
            self._tapes[key] = unroll(self.spec, self.params, state=self.state,
                                      training=training, noise=noise, loss=loss)
        return self._tapes[key]

    def __call__(self, x, passes=False):
        tape = self.tape()
        tape.forward({"x": np.asarray(x, dtype=self.dtype)})
        if passes:
            return [tape[f"out/p{p}"].value for p in range(1, self.spec.timesteps + 1)]
        return tape.output.value if "loss" not in tape.named else tape.meta["final"].value


def save_checkpoint(path, net: Network, rng_state: Optional[dict] = None):
    """Write spec, parameters, batch-norm state and RNG state to one ``.npz`` container."""
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    arrays.update({f"state/{k}": v for k, v in net.state.items()})
    header = {"spec": net.spec.to_dict(), "seed": net.seed, "dtype": net.dtype.name,
              "rng_state": rng_state}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Network, Optional[dict]]:
    with open(path, "rb") as fh:
        data = np.load(io.BytesIO(fh.read()))
    header = json.loads(bytes(data["__header__"]).decode())
    params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    state = {k[len("state/"):]: data[k] for k in data.files if k.startswith("state/")}
    spec = NetworkSpec.from_dict(header["spec"])
    net = Network(spec, seed=header["seed"], dtype=header["dtype"], params=params, state=state)
    return net, header.get("rng_state")
