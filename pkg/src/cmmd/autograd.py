"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at least
one input requires a gradient.  ``backward`` replays the tape in reverse and
accumulates gradients in a fixed order, so identical inputs always produce
bit-identical gradients.
"""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "apply", "backward", "grad_check", "grad_check_params",
    "MlpSpec", "ParameterStore", "init_mlp", "mlp_forward",
    "write_checkpoint", "read_checkpoint", "CheckpointError",
]

KINDS = (
    "matmul", "add", "mul", "sub", "neg", "exp", "log", "softplus", "sigmoid",
    "square", "sum", "mean", "concat", "slice", "dropout", "clip", "transpose",
    "log_softmax", "sqdist",
)


class Tensor:
    """A float64 array that may take part in differentiation."""

    __slots__ = ("values", "requires_grad", "name", "grad")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item: tensor of shape {self.shape} is not a single value")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other): return apply("add", self, other)
    def __radd__(self, other): return apply("add", other, self)
    def __sub__(self, other): return apply("sub", self, other)
    def __rsub__(self, other): return apply("sub", other, self)
    def __mul__(self, other): return apply("mul", self, other)
    def __rmul__(self, other): return apply("mul", other, self)
    def __matmul__(self, other): return apply("matmul", self, other)
    def __neg__(self): return apply("neg", self)
    def __getitem__(self, index): return apply("slice", self, index=index)

    def exp(self): return apply("exp", self)
    def log(self): return apply("log", self)
    def square(self): return apply("square", self)
    def sum(self, axis=None): return apply("sum", self, axis=axis)
    def mean(self, axis=None): return apply("mean", self, axis=axis)
    def clip(self, lo, hi): return apply("clip", self, lo=lo, hi=hi)

    @property
    def T(self): return apply("transpose", self)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict = field(default_factory=dict)


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded on it.  A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def current() -> "Tape | None":
        stack = _tape_stack()
        return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_error(kind: str, *shapes) -> ValueError:
    joined = " and ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{kind}: incompatible shapes {joined}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_sigmoid = expit


def _forward(kind: str, xs: list[np.ndarray], attrs: dict, saved: dict) -> np.ndarray:
    if kind == "matmul":
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _shape_error(kind, a.shape, b.shape)
        return a @ b
    if kind in ("add", "mul", "sub"):
        a, b = xs
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise _shape_error(kind, a.shape, b.shape) from None
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        return a * b
    x = xs[0]
    if kind == "neg":
        return -x
    if kind == "exp":
        out = np.exp(x)
        saved["out"] = out
        return out
    if kind == "log":
        if np.any(x <= 0):
            raise ValueError(f"log: non-positive input (min {x.min():.3g}); clamp before taking logs")
        return np.log(x)
    if kind == "softplus":
        return _softplus(x)
    if kind == "sigmoid":
        out = _sigmoid(x)
        saved["out"] = out
        return out
    if kind == "square":
        return x * x
    if kind in ("sum", "mean"):
        axis = attrs.get("axis")
        if kind == "sum":
            return np.asarray(x.sum(axis=axis))
        return np.asarray(x.mean(axis=axis))
    if kind == "concat":
        if any(a.ndim != xs[0].ndim or a.shape[:-1] != xs[0].shape[:-1] for a in xs):
            raise _shape_error(kind, *(a.shape for a in xs))
        return np.concatenate(xs, axis=-1)
    if kind == "slice":
        return x[attrs["index"]]
    if kind == "transpose":
        if x.ndim != 2:
            raise ValueError(f"transpose: expected a matrix, got shape {x.shape}")
        return x.T
    if kind == "clip":
        saved["mask"] = (x >= attrs["lo"]) & (x <= attrs["hi"])
        return np.clip(x, attrs["lo"], attrs["hi"])
    if kind == "log_softmax":
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        saved["out"] = out
        return out
    if kind == "sqdist":
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise _shape_error(kind, a.shape, b.shape)
        d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
        return np.maximum(d, 0.0)
    if kind == "dropout":
        rate = attrs["rate"]
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
        if not attrs["train"] or rate == 0.0:
            saved["mask"] = None
            return x
        keep = attrs["rng"].random(x.shape) >= rate
        mask = keep / (1.0 - rate)
        saved["mask"] = mask
        return x * mask
    raise ValueError(f"unknown operation kind {kind!r}")


def apply(kind: str, *inputs, tape: Tape | None = None, **attrs) -> Tensor:
    """Run operation ``kind`` on ``inputs`` and record it when differentiable."""
    tensors = tuple(_as_tensor(x) for x in inputs)
    saved: dict = {}
    values = _forward(kind, [t.values for t in tensors], attrs, saved)
    needs_grad = any(t.requires_grad for t in tensors)
    out = Tensor(values, requires_grad=needs_grad)
    if needs_grad:
        tape = tape if tape is not None else Tape.current()
        if tape is None:
            raise RuntimeError(f"{kind}: differentiable inputs but no active tape")
        saved.update(attrs)
        tape.nodes.append(_Node(kind, tensors, out, saved))
    return out


def sigmoid(x): return apply("sigmoid", x)
def softplus(x): return apply("softplus", x)
def log_softmax(x): return apply("log_softmax", x)
def concat(xs): return apply("concat", *xs)
def sqdist(a, b): return apply("sqdist", a, b)
def dropout(x, rate, train, rng): return apply("dropout", x, rate=rate, train=train, rng=rng)


def _backward_rule(node: _Node, g: np.ndarray) -> list[np.ndarray | None]:
    kind = node.kind
    xs = [t.values for t in node.inputs]
    s = node.saved
    if kind == "matmul":
        a, b = xs
        return [g @ b.T, a.T @ g]
    if kind == "add":
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]
    if kind == "sub":
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]
    if kind == "mul":
        a, b = xs
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    if kind == "neg":
        return [-g]
    if kind == "exp":
        return [g * s["out"]]
    if kind == "log":
        return [g / xs[0]]
    if kind == "softplus":
        return [g * _sigmoid(xs[0])]
    if kind == "sigmoid":
        out = s["out"]
        return [g * out * (1.0 - out)]
    if kind == "square":
        return [2.0 * g * xs[0]]
    if kind in ("sum", "mean"):
        x = xs[0]
        axis = s.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        full = np.broadcast_to(g, x.shape)
        if kind == "mean":
            count = x.size if axis is None else x.shape[axis]
            return [full / count]
        return [np.array(full)]
    if kind == "concat":
        grads, start = [], 0
        for x in xs:
            width = x.shape[-1]
            grads.append(g[..., start:start + width])
            start += width
        return grads
    if kind == "slice":
        full = np.zeros_like(xs[0])
        index = s["index"]
        parts = index if isinstance(index, tuple) else (index,)
        if any(isinstance(p, (list, np.ndarray)) for p in parts):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return [full]
    if kind == "transpose":
        return [g.T]
    if kind == "clip":
        return [g * s["mask"]]
    if kind == "log_softmax":
        soft = np.exp(s["out"])
        return [g - soft * g.sum(axis=-1, keepdims=True)]
    if kind == "sqdist":
        a, b = xs
        ga = 2.0 * (a * g.sum(axis=1, keepdims=True) - g @ b)
        gb = 2.0 * (b * g.sum(axis=0)[:, None] - g.T @ a)
        return [ga, gb]
    if kind == "dropout":
        mask = s["mask"]
        return [g if mask is None else g * mask]
    raise ValueError(f"no backward rule for {kind!r}")


def backward(tape: Tape, loss: Tensor, params: "ParameterStore | None" = None) -> dict[str, np.ndarray]:
    """Differentiate scalar ``loss`` with respect to every leaf on ``tape``.

    Leaf tensors receive ``.grad``; the returned map is keyed by leaf name
    (unnamed leaves are omitted from the map).  Leaves that ``loss`` does not
    depend on get zero gradients, including every entry of ``params``.
    """
    if loss.values.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)
    if params is not None:
        for _, t in params.items():
            leaves.setdefault(id(t), t)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, _backward_rule(node, g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result: dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.values) if g is None else np.asarray(g, dtype=np.float64)
        if leaf.name is not None:
            result[leaf.name] = leaf.grad
    return result


def grad_check(function: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences."""
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    x0 = np.array(point, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = function(leaf)
    backward(tape, out)
    analytic = leaf.grad

    def value(x):
        v = function(Tensor(x)).item()
        if not np.isfinite(v):
            raise FloatingPointError("grad_check: non-finite function value")
        return v

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fd = (value(plus.reshape(x0.shape)) - value(minus.reshape(x0.shape))) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: "ParameterStore",
                      h: float = 1e-5, paths=None) -> dict[str, float]:
    """Per-parameter worst relative error of ``loss_fn`` gradients.

    ``loss_fn`` must be deterministic (re-seed any rng inside it).
    """
    params.requires_grad_(True)
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)
    params.requires_grad_(False)
    report = {}
    for path in paths or params.paths():
        values = params[path].values
        flat = values.reshape(-1)
        analytic = grads.get(path, np.zeros_like(values)).reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"grad_check: non-finite loss perturbing {path}")
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(analytic[i])))
        report[path] = worst
    return report


# ---------------------------------------------------------------------------
# parameters and MLPs

class ParameterStore:
    """Named parameters, iterated in lexicographic path order."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, Tensor] = {}
        for path, values in (entries or {}).items():
            self[path] = values

    def __setitem__(self, path: str, values) -> None:
        arr = values.values if isinstance(values, Tensor) else values
        self._data[path] = Tensor(np.array(arr, dtype=np.float64), name=path)

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._data[path]
        except KeyError:
            raise KeyError(f"missing parameter {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._data

    def __len__(self) -> int:
        return len(self._data)

    def __iter__(self) -> Iterator[str]:
        return iter(self.paths())

    def paths(self) -> list[str]:
        return sorted(self._data)

    def items(self):
        return [(p, self._data[p]) for p in self.paths()]

    def requires_grad_(self, flag: bool = True) -> "ParameterStore":
        for t in self._data.values():
            t.requires_grad = flag
        return self

    def copy(self) -> "ParameterStore":
        return ParameterStore({p: t.values.copy() for p, t in self._data.items()})

    def num_values(self) -> int:
        return sum(t.values.size for t in self._data.values())


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "softplus"
    dropout_rate: float = 0.0
    output_heads: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if len(self.layer_widths) < 2 or any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"MlpSpec needs >= 2 positive widths, got {self.layer_widths}")
        if self.hidden_activation not in ("softplus", "sigmoid", "identity"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        heads = self.output_heads or (("out", self.layer_widths[-1]),)
        if sum(w for _, w in heads) != self.layer_widths[-1]:
            raise ValueError(f"heads {heads} do not partition output width {self.layer_widths[-1]}")
        object.__setattr__(self, "output_heads", tuple(heads))

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1


def layer_paths(prefix: str, index: int) -> tuple[str, str]:
    return f"{prefix}.layer{index}.weight", f"{prefix}.layer{index}.bias"


def init_mlp(spec: MlpSpec, params: ParameterStore, prefix: str, rng: np.random.Generator) -> None:
    """Glorot-uniform weights, zero biases."""
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w_path, b_path = layer_paths(prefix, i)
        params[w_path] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[b_path] = np.zeros(fan_out)


_ACTIVATIONS = {
    "softplus": softplus,
    "sigmoid": sigmoid,
    "identity": lambda x: x,
}


def mlp_forward(spec: MlpSpec, params: ParameterStore, prefix: str, x: Tensor,
                train: bool = False, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    x = _as_tensor(x)
    if x.shape[-1] != spec.layer_widths[0]:
        raise ValueError(f"{prefix}: input width {x.shape[-1]} != expected {spec.layer_widths[0]}")
    act = _ACTIVATIONS[spec.hidden_activation]
    h = x
    for i in range(spec.num_layers):
        w_path, b_path = layer_paths(prefix, i)
        h = h @ params[w_path] + params[b_path]
        if i < spec.num_layers - 1:
            h = act(h)
            if train and spec.dropout_rate > 0:
                if rng is None:
                    raise ValueError(f"{prefix}: dropout in train mode needs an rng")
                h = dropout(h, spec.dropout_rate, True, rng)
    if len(spec.output_heads) == 1:
        return {spec.output_heads[0][0]: h}
    heads, start = {}, 0
    for name, width in spec.output_heads:
        heads[name] = h[:, start:start + width]
        start += width
    return heads


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"CMMDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], manifest: str = "") -> None:
    """Write named float64 arrays (sorted by path) plus a text manifest."""
    text = manifest.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a CMMD checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (text_len,) = struct.unpack("<I", take(4))
    manifest = take(text_len).decode("utf-8")
    (count,) = struct.unpack("<Q", take(8))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return tensors, manifest
