"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of primitives the relation modules and the detection head
need are provided. Operations record onto the active :class:`GradTape` when
at least one input is tracked; otherwise they are plain numpy computations.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "mega_active_tape", default=None
)
_KINK_PROBE: contextvars.ContextVar["list[float] | None"] = contextvars.ContextVar(
    "mega_kink_probe", default=None
)


class Tensor:
    """A float64 array, optionally tracked for gradients.

    Leaf parameters are created with ``requires_grad=True``. Results of
    recorded operations are tracked too; everything else is a constant.
    """

    __slots__ = ("data", "tracked", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite entries in tensor {name or ''}".strip())
        self.data = arr
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked}{tag})"


Matrix = Tensor


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records primitive operations and replays them backwards.

    Use as a context manager; one tape per training step, single writer.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._nodes.append((out, inputs, vjp))

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. ``params``; untouched ones are zero."""
        if loss.data.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = []
        for p in params:
            g = grads.get(id(p))
            result.append(np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64))
        return result


class no_tape:
    """Suspend recording inside the block (results are untracked constants)."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.tracked = False
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.record(out, inputs, vjp)
    return out


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ContractViolation(f"{op}: expected a matrix, got shape {t.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} are not conformant")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _require_2d(a, "transpose")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over ``a``'s rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    raise ContractViolation(f"add: shapes {a.shape} and {b.shape} are not conformant")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    probe = _KINK_PROBE.get()
    if probe is not None and a.data.size:
        probe.append(float(np.abs(a.data).min()))
    mask = a.data > 0  # subgradient at 0 is 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractViolation(f"take_rows: index out of range for {n} rows")
    return _emit(a.data[idx], (a,), vjp, "take_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    _require_2d(a, "slice_cols")

    def vjp(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return (out,)

    return _emit(a.data[:, start:stop].copy(), (a,), vjp, "slice_cols")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractViolation("concat_rows: nothing to concatenate")
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ContractViolation(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractViolation("concat_cols: nothing to concatenate")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp, "concat_cols")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum_all")


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a non-empty real vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation("softmax: input must be a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("softmax: input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(logits) -> Tensor:
    logits = as_tensor(logits)
    _require_2d(logits, "softmax_rows")
    if logits.shape[1] == 0:
        raise ContractViolation("softmax_rows: empty rows")
    x = logits.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit(p, (logits,), vjp, "softmax_rows")


def gated_softmax_rows(logits, gates) -> Tensor:
    """Row-normalise ``gate * exp(logit)``.

    Rows whose gates are all zero fall back to a plain softmax over the logits.
    ``gates`` must be nonnegative.
    """
    logits, gates = as_tensor(logits), as_tensor(gates)
    _require_2d(logits, "gated_softmax_rows")
    if logits.shape != gates.shape:
        raise ContractViolation(
            f"gated_softmax_rows: logits {logits.shape} vs gates {gates.shape}"
        )
    if logits.shape[1] == 0:
        raise ContractViolation("gated_softmax_rows: empty rows")
    x, gate = logits.data, gates.data
    if np.any(gate < 0):
        raise ContractViolation("gated_softmax_rows: gates must be nonnegative")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    u = gate * e
    s = u.sum(axis=1, keepdims=True)
    dead = s[:, 0] <= 0.0
    s_safe = np.where(dead[:, None], 1.0, s)
    w = u / s_safe
    if dead.any():
        fallback = e[dead] / e[dead].sum(axis=1, keepdims=True)
        w[dead] = fallback
    # d w_j / d g_k = (e_k / s) (delta_jk - w_j); zero on fallback rows
    e_over_s = np.where(dead[:, None], 0.0, e / s_safe)

    def vjp(g):
        centered = g - (g * w).sum(axis=1, keepdims=True)
        return (w * centered, e_over_s * centered)

    return _emit(w, (logits, gates), vjp, "gated_softmax_rows")


def log_softmax_rows(logits) -> Tensor:
    logits = as_tensor(logits)
    _require_2d(logits, "log_softmax_rows")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit(out, (logits,), vjp, "log_softmax_rows")


def pick(a, rows, cols) -> Tensor:
    """Vector of ``a[rows[i], cols[i]]``."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _emit(a.data[rows, cols], (a,), vjp, "pick")


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss, quadratic below ``beta``."""
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    quad = ax < beta
    out = np.where(quad, 0.5 * x * x / beta, ax - 0.5 * beta)
    deriv = np.where(quad, x / beta, np.sign(x))
    return _emit(out, (a,), lambda g: (g * deriv,), "smooth_l1")


def linear(x, weight, bias, activation: str = "none") -> Tensor:
    """``x @ weight.T + bias``, optionally followed by ReLU."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _require_2d(x, "linear")
    _require_2d(weight, "linear")
    if x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ContractViolation(
            f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape} not conformant"
        )
    if activation not in ("none", "relu"):
        raise ContractViolation(f"linear: unknown activation {activation!r}")
    out = add(matmul(x, transpose(weight)), bias)
    return relu(out) if activation == "relu" else out


# ---------------------------------------------------------------- helpers


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name=None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@contextlib.contextmanager
def kink_margin():
    """Collect the smallest ``|x|`` fed to any ReLU inside the block.

    Yields a list; ``min(list)`` is how far the evaluation point sits from
    the nearest non-differentiable point of the recorded ReLUs (gates
    included). Central differences are only meaningful when the probe
    step cannot cross it.
    """
    seen: list[float] = []
    token = _KINK_PROBE.set(seen)
    try:
        yield seen
    finally:
        _KINK_PROBE.reset(token)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` (mutated in place while
    probing). Relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    params = list(params)
    with GradTape() as tape:
        loss = f()
    analytic = tape.gradient(loss, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + epsilon
                up = float(f().data)
                flat[i] = orig - epsilon
                down = float(f().data)
            except NumericError as exc:
                raise NumericError(f"grad_check: non-finite value probing coordinate {i} of {p!r}") from exc
            finally:
                flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"grad_check: non-finite value probing coordinate {i} of {p!r}")
            numeric = (up - down) / (2 * epsilon)
            err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
