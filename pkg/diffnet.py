"""
DiffNet - Minimal differentiable feed-forward kernel on numpy
Reverse-mode Tensor graph, ReLU MLPs with layer norm and inverted dropout, losses,
Adam, stop-gradient, finite-difference checking and the checkpoint codec
"""

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, log_softmax as _log_softmax

from error_handler import ConfigurationError, ShapeError, StaleCacheError

EPS_CLIP = 1e-7
LAYER_NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "cfodds-checkpoint/1"

SeedLike = Union[None, int, np.random.Generator]
Gradients = Dict[str, np.ndarray]


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Turn an int seed (or an existing generator) into a numpy Generator"""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Reverse-mode graph
# ---------------------------------------------------------------------------

class Tensor:
    """A numpy array that remembers how it was computed"""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")
    # ndarray (op) Tensor defers to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _backward_fn: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        """Propagate gradients to every leaf; grads from a previous call are discarded"""
        order = _topological_order(self)
        for node in order:
            node.grad = None

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise ShapeError(f"Output gradient shape {seed.shape} != output shape {self.data.shape}")
        self.grad = seed

        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            parent_grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __truediv__(self, scalar: float): return mul(self, 1.0 / float(scalar))
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def stop_gradient(value) -> Tensor:
    """Same values, no route back to the input"""
    return Tensor(as_tensor(value).data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0
    return _result(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def clip(a, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def tensor_sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward_fn)


def tensor_mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) / count


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(np.concatenate([p.data for p in parts], axis=axis), parts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def columns(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        grad[:, start:stop] = g
        return (grad,)

    return _result(a.data[:, start:stop], (a,), backward_fn)


def take_rows(table, indices: np.ndarray) -> Tensor:
    """Row gather (embedding lookup); gradients scatter-add back"""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return _result(table.data[indices], (table,), backward_fn)


def layer_norm(z, gain, shift, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise normalization followed by a learned gain and shift"""
    z, gain, shift = as_tensor(z), as_tensor(gain), as_tensor(shift)
    centered = z.data - z.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    normalized = centered * inv_std

    def backward_fn(g):
        d_norm = g * gain.data
        d_z = inv_std * (d_norm
                         - d_norm.mean(axis=1, keepdims=True)
                         - normalized * (d_norm * normalized).mean(axis=1, keepdims=True))
        return d_z, _unbroadcast(g * normalized, gain.shape), _unbroadcast(g, shift.shape)

    return _result(normalized * gain.data + shift.data, (z, gain, shift), backward_fn)


def log_softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax(a.data, axis=axis)
    return _result(out, (a,),
                   lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def pairwise_sq_dists(x, y) -> Tensor:
    """Matrix of squared euclidean distances ||x_i - y_j||^2"""
    x, y = as_tensor(x), as_tensor(y)
    out = cdist(x.data, y.data, "sqeuclidean")

    def backward_fn(g):
        gx = 2.0 * (x.data * g.sum(axis=1, keepdims=True) - g @ y.data)
        gy = 2.0 * (y.data * g.sum(axis=0)[:, None] - g.T @ x.data)
        return gx, gy

    return _result(out, (x, y), backward_fn)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _scalar_or_array(data: np.ndarray):
    return float(data) if data.ndim == 0 else data


def binary_cross_entropy(prob, label, eps_clip: float = EPS_CLIP):
    """Elementwise -[y log p + (1-y) log(1-p)] on probabilities clamped to [eps, 1-eps]"""
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    p = clip(as_tensor(prob), eps_clip, 1.0 - eps_clip)
    loss = -(y * log(p) + (1.0 - y) * log(1.0 - p))
    return loss if isinstance(prob, Tensor) else _scalar_or_array(loss.data)


def multi_output_mean_bce(probs, labels, eps_clip: float = EPS_CLIP):
    """Mean dimension-wise cross-entropy (averaged over every entry)"""
    loss = tensor_mean(binary_cross_entropy(as_tensor(probs), labels, eps_clip))
    return loss if isinstance(probs, Tensor) else float(loss.data)


def softmax_cross_entropy(logits, labels):
    """Per-row cross-entropy of a softmax over logits against integer labels"""
    logits_t = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    one_hot = np.eye(logits_t.shape[1])[labels]
    loss = -tensor_sum(log_softmax(logits_t, axis=1) * one_hot, axis=1)
    return loss if isinstance(logits, Tensor) else loss.data


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dim: int
    num_hidden_layers: int
    output_dim: int
    dropout_prob: float = 0.0
    layer_norm: bool = False
    activation: str = "relu"

    def validate(self) -> None:
        for name in ("input_dim", "hidden_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"NetworkSpec.{name} must be >= 1 (got {getattr(self, name)})")
        if self.num_hidden_layers < 0:
            raise ConfigurationError(f"NetworkSpec.num_hidden_layers must be >= 0 (got {self.num_hidden_layers})")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigurationError(f"NetworkSpec.dropout_prob must be in [0, 1) (got {self.dropout_prob})")
        if self.activation != "relu":
            raise ConfigurationError(f"Unsupported activation '{self.activation}' (only relu)")

    def layer_dims(self) -> List[int]:
        return [self.input_dim] + [self.hidden_dim] * self.num_hidden_layers + [self.output_dim]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        dims = self.layer_dims()
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            shapes[f"layer{i}.weight"] = (fan_in, fan_out)
            shapes[f"layer{i}.bias"] = (fan_out,)
            if self.layer_norm and i < self.num_hidden_layers:
                shapes[f"layer{i}.gain"] = (fan_out,)
                shapes[f"layer{i}.shift"] = (fan_out,)
        return shapes

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkSpec":
        return cls(**data)


@dataclass
class NetworkParams:
    """Named parameter arrays; several networks can share one instance under prefixes"""
    arrays: Dict[str, np.ndarray]
    version: int = 0

    def token(self) -> Tuple[int, int]:
        return (id(self), self.version)

    def leaves(self) -> Dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad=True) for name, arr in self.arrays.items()}

    def copy(self) -> "NetworkParams":
        return NetworkParams({name: arr.copy() for name, arr in self.arrays.items()}, version=self.version)

    def check_shapes(self, spec: NetworkSpec, prefix: str = "") -> None:
        for name, shape in spec.param_shapes().items():
            arr = self.arrays.get(prefix + name)
            if arr is None:
                raise ShapeError(f"Missing parameter '{prefix + name}'")
            if arr.shape != shape:
                raise ShapeError(f"Parameter '{prefix + name}' has shape {arr.shape}, spec expects {shape}")

    def num_values(self) -> int:
        return int(sum(arr.size for arr in self.arrays.values()))


def init_params(spec: NetworkSpec, seed: SeedLike, prefix: str = "") -> NetworkParams:
    """He-normal hidden weights, LeCun-normal output weights, zero biases, unit gains"""
    spec.validate()
    rng = make_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in spec.param_shapes().items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            layer = int(name[len("layer"):name.index(".")])
            scale = np.sqrt((2.0 if layer < spec.num_hidden_layers else 1.0) / shape[0])
            arrays[prefix + name] = rng.normal(0.0, scale, size=shape)
        elif kind == "gain":
            arrays[prefix + name] = np.ones(shape)
        else:
            arrays[prefix + name] = np.zeros(shape)
    return NetworkParams(arrays)


def network_graph(spec: NetworkSpec, leaves: Dict[str, Tensor], inputs: Tensor,
                  mode: str = "eval", rng: Optional[np.random.Generator] = None,
                  prefix: str = "") -> Tuple[Tensor, List[np.ndarray]]:
    """Build the graph of one feed-forward pass; returns outputs and the dropout masks used"""
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval' (got '{mode}')")
    if inputs.data.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ShapeError(f"Expected inputs with {spec.input_dim} columns, got shape {inputs.shape}")

    masks: List[np.ndarray] = []
    hidden = inputs
    for i in range(spec.num_hidden_layers):
        hidden = hidden @ leaves[f"{prefix}layer{i}.weight"] + leaves[f"{prefix}layer{i}.bias"]
        if spec.layer_norm:
            hidden = layer_norm(hidden, leaves[f"{prefix}layer{i}.gain"], leaves[f"{prefix}layer{i}.shift"])
        hidden = relu(hidden)
        if mode == "train" and spec.dropout_prob > 0:
            if rng is None:
                rng = make_rng(None)
            mask = (rng.random(hidden.shape) >= spec.dropout_prob) / (1.0 - spec.dropout_prob)
            masks.append(mask)
            hidden = hidden * mask
    last = spec.num_hidden_layers
    return hidden @ leaves[f"{prefix}layer{last}.weight"] + leaves[f"{prefix}layer{last}.bias"], masks


@dataclass
class ForwardCache:
    spec: NetworkSpec
    params_token: Tuple[int, int]
    inputs: Tensor
    output: Tensor
    leaves: Dict[str, Tensor] = field(repr=False)
    dropout_masks: List[np.ndarray] = field(default_factory=list, repr=False)


def _as_batch(batch_inputs) -> np.ndarray:
    batch = np.asarray(batch_inputs, dtype=np.float64)
    return batch[None, :] if batch.ndim == 1 else batch


def forward(spec: NetworkSpec, params: NetworkParams, batch_inputs, mode: str = "eval",
            seed: SeedLike = None) -> Tuple[np.ndarray, ForwardCache]:
    """Run the network; the cache keeps everything backward needs (including dropout masks)"""
    params.check_shapes(spec)
    leaves = params.leaves()
    inputs = Tensor(_as_batch(batch_inputs), requires_grad=True)
    output, masks = network_graph(spec, leaves, inputs, mode=mode,
                                  rng=make_rng(seed) if mode == "train" else None)
    cache = ForwardCache(spec=spec, params_token=params.token(), inputs=inputs,
                         output=output, leaves=leaves, dropout_masks=masks)
    return output.data.copy(), cache


def backward(spec: NetworkSpec, params: NetworkParams, cache: Optional[ForwardCache],
             output_gradient, return_input_grad: bool = False
             ) -> Tuple[Gradients, Optional[np.ndarray]]:
    """Exact reverse-mode gradients of a cached forward pass; the cache can be reused"""
    if cache is None:
        raise StaleCacheError("No forward cache supplied to backward")
    if cache.spec != spec or cache.params_token != params.token():
        raise StaleCacheError("Forward cache does not belong to these parameters (updated since forward?)")

    cache.output.backward(_as_batch(output_gradient).reshape(cache.output.shape))
    grads = {name: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data))
             for name, leaf in cache.leaves.items()}
    input_grad = None
    if return_input_grad:
        input_grad = cache.inputs.grad.copy() if cache.inputs.grad is not None else np.zeros_like(cache.inputs.data)
    return grads, input_grad


def collect_gradients(leaves: Dict[str, Tensor]) -> Gradients:
    return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
            for name, leaf in leaves.items()}


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float
    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: NetworkParams, learning_rate: float) -> OptimizerState:
    return OptimizerState(
        learning_rate=learning_rate,
        first_moment={name: np.zeros_like(arr) for name, arr in params.arrays.items()},
        second_moment={name: np.zeros_like(arr) for name, arr in params.arrays.items()},
    )


def adam_step(state: OptimizerState, params: NetworkParams,
              grads: Gradients) -> Tuple[NetworkParams, OptimizerState]:
    """Bias-corrected Adam update, applied in place"""
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, arr in params.arrays.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != arr.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {grad.shape}, parameter has {arr.shape}")
        m = state.first_moment[name] = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * grad
        v = state.second_moment[name] = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * grad ** 2
        arr -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    params.version += 1
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), atol)


def gradient_check(loss_fn: Callable[[NetworkParams], float], params: NetworkParams,
                   analytic: Gradients, h: float = 1e-5, names: Optional[Iterable[str]] = None,
                   atol: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences of loss_fn"""
    worst = 0.0
    for name in (names if names is not None else params.arrays):
        arr = params.arrays[name]
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + h
            upper = loss_fn(params)
            flat[k] = original - h
            lower = loss_fn(params)
            flat[k] = original
            numeric.reshape(-1)[k] = (upper - lower) / (2.0 * h)
        if numeric.size:
            worst = max(worst, float(relative_error(analytic[name], numeric, atol).max()))
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float64 sidecar
# ---------------------------------------------------------------------------

def encode_checkpoint(spec_dict: Dict, params: NetworkParams, seed: int, step: int,
                      extra: Optional[Dict] = None) -> Tuple[Dict, bytes]:
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.arrays.items():
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    manifest = {"format": CHECKPOINT_FORMAT, "spec": spec_dict, "seed": int(seed), "step": int(step),
                "arrays": entries}
    if extra:
        manifest.update(extra)
    return manifest, b"".join(chunks)


def decode_checkpoint(manifest: Dict, payload: bytes) -> NetworkParams:
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"Unsupported checkpoint format: {manifest.get('format')}")
    values = np.frombuffer(payload, dtype="<f8")
    expected = sum(entry["count"] for entry in manifest["arrays"])
    if values.size != expected:
        raise ShapeError(f"Checkpoint payload holds {values.size} values, manifest declares {expected}")
    arrays = {}
    for entry in manifest["arrays"]:
        chunk = values[entry["offset"]:entry["offset"] + entry["count"]]
        arrays[entry["name"]] = chunk.astype(np.float64).reshape(entry["shape"])
    return NetworkParams(arrays)


def manifest_json(manifest: Dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True)
