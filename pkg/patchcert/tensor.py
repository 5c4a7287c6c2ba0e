"""
Tensor Engine

Dense tensors backed by NumPy arrays with a recorded computation graph and
reverse-mode gradients. Every differentiable operation is a ``Function``
subclass (see ``patchcert.functional``); applying one records the node on the
output tensor, and ``Tensor.backward`` walks the recorded graph in reverse
topological order.

The engine computes in 32-bit floats. Gradient checks can switch a block of
code to float64 with ``use_dtype``.
"""

import contextlib
import logging
import threading
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from patchcert.errors import DimensionError, GraphStateError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

# Graph recording and dtype are per thread so independent graphs can be
# built concurrently.
_state = threading.local()


def get_dtype() -> np.dtype:
    """Return the floating dtype new tensors are created with."""
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def use_dtype(dtype: Any) -> Iterator[None]:
    """Create tensors with ``dtype`` inside the block."""
    previous = get_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which
    maps the gradient of the output to one gradient (or None) per input.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        """Run the forward pass and record the node when gradients are needed."""
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, creator=fn if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum ``grad`` over the axes broadcasting added to reach ``shape``."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    A dense array node in the computation graph.

    Leaf tensors (no creator) with ``requires_grad`` receive ``.grad`` after
    ``backward``; intermediate results only carry the gradient transiently.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name
        self.grad: Optional[np.ndarray] = None

    # -- array protocol -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- operators ------------------------------------------------------

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        from patchcert import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        from patchcert import functional as F

        return F.add(self, F.neg(as_tensor(other)))

    def __rsub__(self, other: Union["Tensor", float]) -> "Tensor":
        from patchcert import functional as F

        return F.add(F.neg(self), other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from patchcert import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from patchcert import functional as F

        return F.neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from patchcert import functional as F

        return F.matmul(self, other)

    def abs(self) -> "Tensor":
        from patchcert import functional as F

        return F.abs_(self)

    def relu(self) -> "Tensor":
        from patchcert import functional as F

        return F.relu_forward(self)

    def reshape(self, *shape: int) -> "Tensor":
        from patchcert import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        from patchcert import functional as F

        return F.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        from patchcert import functional as F

        return F.mean(self)

    # -- reverse mode ---------------------------------------------------

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """
        Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        The recorded graph is released afterwards, so a second call without a
        new forward pass raises GraphStateError.

        Args:
            grad: Seed gradient; defaults to 1 for single-element tensors
        """
        if self.creator is None:
            raise GraphStateError(
                "backward() called on a tensor without a recorded forward graph"
            )
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.data.dtype)
            if seed.shape != self.shape:
                raise DimensionError("seed gradient shape mismatch", seed.shape, self.shape)

        order = self._topological_order()
        pending: Dict[int, np.ndarray] = {id(self): seed}

        for node in order:
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            fn = node.creator
            assert fn is not None
            input_grads = fn.backward(node_grad)
            for inp, inp_grad in zip(fn.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue
                if inp.creator is None:
                    inp._accumulate(inp_grad)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + inp_grad
                else:
                    pending[id(inp)] = inp_grad

        for node in order:
            node.creator = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            grad = Function.unbroadcast(grad, self.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def _topological_order(self) -> List["Tensor"]:
        """Non-leaf nodes reachable from self, outputs before inputs."""
        visited = set()
        post: List[Tensor] = []
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                post.append(node)
                continue
            if id(node) in visited or node.creator is None:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for inp in node.creator.inputs:
                if inp.creator is not None and id(inp) not in visited:
                    stack.append((inp, False))
        post.reverse()
        return post


class Parameter(Tensor):
    """
    A trainable leaf tensor.

    The gradient always exists and has the value's shape; parameters off the
    loss path keep an exactly-zero gradient.
    """

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Parameter({label}shape={self.shape})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    return value if isinstance(value, Tensor) else Tensor(value)
