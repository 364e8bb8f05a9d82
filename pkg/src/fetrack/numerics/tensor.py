"""Dense tensors and the reverse-mode gradient tape.

A :class:`Tensor` is a thin wrapper over a contiguous row-major numpy array.
Primitives in :mod:`fetrack.numerics.ops` record themselves on the innermost
active :class:`GradTape`; :meth:`GradTape.gradient` replays the recorded
operations in exact reverse execution order.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from fetrack.errors import ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected f32 or f64") from None
    return np.dtype(precision)


class Tensor:
    """An n-d float array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar; all route through recorded primitives
    def __add__(self, other):
        from fetrack.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from fetrack.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from fetrack.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from fetrack.numerics import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from fetrack.numerics import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, idx):
        from fetrack.numerics import ops
        return ops.getitem(self, idx)


class Parameter(Tensor):
    """A trainable leaf; ``requires_grad`` may be switched off to freeze it."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable
    op: str


class GradTape:
    """Ordered record of executed primitives.

    Use as a context manager; every primitive whose inputs require gradients
    is appended while the tape is innermost. ``gradient`` walks the record
    backwards, so the last recorded op is the first one differentiated.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = w * w
    >>> tape.gradient(y, [w])[0]
    array([4.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tapes must be exited in LIFO order"
        stack.pop()
        return False

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list:
        """Return dtarget/dsource for each source (zeros if unreachable)."""
        if seed is None:
            if target.data.size != 1:
                raise ShapeError(f"gradient of non-scalar target {target.shape} needs a seed")
            seed = np.ones_like(target.data)
        seed = np.asarray(seed, dtype=target.dtype)
        if seed.shape != target.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match target {target.shape}")
        grads = {id(target): seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def recording(inputs: Sequence[Tensor]) -> GradTape | None:
    stack = _tape_stack()
    if not stack:
        return None
    if any(t.requires_grad for t in inputs):
        return stack[-1]
    return None


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out_data`` and register ``vjp`` on the active tape if needed.

    ``vjp(g)`` maps the output cotangent to one cotangent (or None) per input.
    """
    out = Tensor(out_data)
    tape = recording(inputs)
    if tape is not None:
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), vjp, op))
    return out


class Module:
    """Container that discovers parameters and sub-modules by attribute order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def freeze(self, frozen: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = not frozen
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter and float buffer in place."""
        dtype = resolve_dtype(dtype)
        for m in self.modules():
            for key, val in vars(m).items():
                if isinstance(val, Tensor):
                    val.data = val.data.astype(dtype)
                elif isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    setattr(m, key, val.astype(dtype))
                elif isinstance(val, list):
                    for item in val:
                        if isinstance(item, Tensor):
                            item.data = item.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus float buffers (e.g. batch-norm running stats)."""
        out = {}
        for m_name, m in _named_modules(self, ""):
            for key, val in vars(m).items():
                if isinstance(val, Parameter):
                    out[m_name + key] = val.data
                elif isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    out[m_name + key] = val
                elif isinstance(val, list):
                    for i, item in enumerate(val):
                        if isinstance(item, Parameter):
                            out[f"{m_name}{key}.{i}"] = item.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for m_name, m in _named_modules(self, ""):
            for key, val in list(vars(m).items()):
                if isinstance(val, Parameter):
                    val.data = _checked(state[m_name + key], val.data, m_name + key)
                elif isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    setattr(m, key, _checked(state[m_name + key], val, m_name + key))
                elif isinstance(val, list):
                    for i, item in enumerate(val):
                        if isinstance(item, Parameter):
                            k = f"{m_name}{key}.{i}"
                            item.data = _checked(state[k], item.data, k)


def _checked(new, old, name):
    new = np.asarray(new)
    if new.shape != old.shape:
        raise ShapeError(f"{name}: stored shape {new.shape} != model shape {old.shape}")
    return np.array(new, dtype=old.dtype)


def _named_modules(mod: Module, prefix: str):
    yield prefix, mod
    for key, val in vars(mod).items():
        if isinstance(val, Module):
            yield from _named_modules(val, f"{prefix}{key}.")
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if isinstance(item, Module):
                    yield from _named_modules(item, f"{prefix}{key}.{i}.")
