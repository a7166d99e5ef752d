"""Deterministic float32 tensor engine with reverse-mode autodiff.

Dense row-major arrays with shape metadata, a small set of 2-D kernels,
an execution tape that replays backward closures in exact reverse order,
a counter-based seeded RNG, and a finite-difference gradient checker.

Conventions the rest of the package relies on:

* float32 in all production paths; float64 arrays are accepted so the
  gradient checker can evaluate a high-precision twin of a computation
  (numpy promotion carries the wider dtype through downstream kernels);
* every kernel validates its output is finite, NaN/Inf raises;
* matmul is the only operation that counts toward ``Tape.matmul_flops``
  (exactly 2*p*q*r per [p,q] x [q,r] product); other kernels accumulate
  nominal per-element costs in ``Tape.other_flops``;
* with no active tape, kernels run plain forward with nothing recorded,
  which is the inference fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy a kernel's contract."""


class NonFiniteError(ArithmeticError):
    """A kernel produced NaN or Inf, or a checked loss was not finite."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense row-major numeric array plus an optional gradient buffer.

    ``data`` is a numpy array (float32 unless a float64 verification twin
    is being evaluated). Kernel outputs are treated as immutable once
    written; parameters are mutated in place only by the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Backward replays the recorded closures in exact reverse execution
    order; gradients accumulate additively into ``Tensor.grad``. The tape
    also owns the FLOP and activation meters for its execution context,
    so concurrent tapes never contend on shared counters.
    """

    def __init__(self):
        self._nodes: list[Callable[[], None]] = []
        self.matmul_flops = 0
        self.other_flops = 0
        self.activation_bytes = 0
        self.op_count = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._nodes.append(backward_fn)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Seed ``loss.grad`` and run all recorded closures in reverse."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not math.isfinite(float(loss.data.reshape(-1)[0])):
            raise NonFiniteError("backward: loss is not finite")
        loss.grad = np.full_like(loss.data, seed)
        for node in reversed(self._nodes):
            node()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_finite(arr: np.ndarray, op: str) -> None:
    # One fused reduction instead of isfinite().all(); NaN/Inf poison the sum.
    if not math.isfinite(float(np.sum(arr, dtype=np.float64))):
        raise NonFiniteError(f"{op}: output contains NaN or Inf")


def _finish(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    op: str,
    backward_builder: Callable[[Tensor], Callable[[], None]] | None,
) -> Tensor:
    """Wrap a kernel result: finiteness check, meters, tape registration."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.activation_bytes += out_data.nbytes
        tape.op_count += 1
        if backward_builder is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            tape.record(backward_builder(out))
    return out


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward dA = dC.B^T, dB = A^T.dC; counts 2pqr FLOPs."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    p, q = a.shape
    r = b.shape[1]
    tape = active_tape()
    if tape is not None:
        tape.matmul_flops += 2 * p * q * r

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)

        return backward

    return _finish(a.data @ b.data, (a, b), "matmul", build)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.shape}")

    def build(out: Tensor):
        def backward():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, np.ascontiguousarray(out.grad.T))

        return backward

    return _finish(np.ascontiguousarray(a.data.T), (a,), "transpose", build)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    tape = active_tape()
    if tape is not None:
        tape.other_flops += a.size

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, g)

        return backward

    return _finish(a.data + b.data, (a, b), "add", build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    tape = active_tape()
    if tape is not None:
        tape.other_flops += a.size

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g * b.data)
            if b.requires_grad:
                _accumulate(b, g * a.data)

        return backward

    return _finish(a.data * b.data, (a, b), "mul", build)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a compile-time scalar (not differentiated through s)."""
    tape = active_tape()
    if tape is not None:
        tape.other_flops += a.size

    def build(out: Tensor):
        def backward():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad * s)

        return backward

    return _finish(a.data * s, (a,), "scale", build)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an [n, d] matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
    tape = active_tape()
    if tape is not None:
        tape.other_flops += x.size

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                _accumulate(x, g)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=0))

        return backward

    return _finish(x.data + b.data, (x, b), "add_bias", build)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D operand, got {x.shape}")
    # Rows spanning the full float32 range overflow the shift to -inf;
    # exp(-inf) = 0 is exactly the saturated probability we want.
    with np.errstate(over="ignore"):
        z = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    tape = active_tape()
    if tape is not None:
        tape.other_flops += 5 * x.size

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            dot = (g * out.data).sum(axis=1, keepdims=True)
            _accumulate(x, out.data * (g - dot))

        return backward

    return _finish(y, (x,), "softmax_rows", build)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row standardization followed by the (gamma, beta) affine map."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D operand, got {x.shape}")
    n, d = x.shape
    if d == 0:
        raise ShapeError("layer_norm: zero-length rows")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: parameter shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    if not eps > 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gamma.data + beta.data
    tape = active_tape()
    if tape is not None:
        tape.other_flops += 8 * x.size

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=0))
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.data
                mean_gx = gx.mean(axis=1, keepdims=True)
                mean_gx_xhat = (gx * xhat).mean(axis=1, keepdims=True)
                _accumulate(x, inv_std * (gx - mean_gx - xhat * mean_gx_xhat))

        return backward

    return _finish(y, (x, gamma, beta), "layer_norm", build)


# tanh-approximation constants, pinned so reimplementations agree bit-closely:
# sqrt(2/pi) to 16 digits, cubic coefficient exactly 0.044715.
GELU_SQRT_2_OVER_PI = 0.7978845608028654
GELU_CUBIC = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation with pinned constants."""
    u = GELU_SQRT_2_OVER_PI * (x.data + GELU_CUBIC * (x.data * x.data * x.data))
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)
    tape = active_tape()
    if tape is not None:
        tape.other_flops += 14 * x.size

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None or not x.requires_grad:
                return
            du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * (x.data * x.data))
            local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            _accumulate(x, g * local)

        return backward

    return _finish(y, (x,), "gelu", build)


def slice_rows(x: Tensor, i0: int, i1: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_rows needs a 2-D operand, got {x.shape}")
    if not (0 <= i0 <= i1 <= x.shape[0]):
        raise ShapeError(f"slice_rows: range [{i0}, {i1}) outside {x.shape}")

    def build(out: Tensor):
        def backward():
            if out.grad is not None and x.requires_grad:
                g = np.zeros_like(x.data)
                g[i0:i1] = out.grad
                _accumulate(x, g)

        return backward

    return _finish(x.data[i0:i1].copy(), (x,), "slice_rows", build)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D operand, got {x.shape}")
    if not (0 <= j0 <= j1 <= x.shape[1]):
        raise ShapeError(f"slice_cols: range [{j0}, {j1}) outside {x.shape}")

    def build(out: Tensor):
        def backward():
            if out.grad is not None and x.requires_grad:
                g = np.zeros_like(x.data)
                g[:, j0:j1] = out.grad
                _accumulate(x, g)

        return backward

    return _finish(np.ascontiguousarray(x.data[:, j0:j1]), (x,), "slice_cols", build)


def delete_rows(x: Tensor, i0: int, i1: int) -> Tensor:
    """Remove rows [i0, i1), keeping the rest in order."""
    if x.data.ndim != 2:
        raise ShapeError(f"delete_rows needs a 2-D operand, got {x.shape}")
    if not (0 <= i0 <= i1 <= x.shape[0]):
        raise ShapeError(f"delete_rows: range [{i0}, {i1}) outside {x.shape}")
    kept = np.concatenate([x.data[:i0], x.data[i1:]], axis=0)

    def build(out: Tensor):
        def backward():
            if out.grad is not None and x.requires_grad:
                g = np.zeros_like(x.data)
                g[:i0] = out.grad[:i0]
                g[i1:] = out.grad[i0:]
                _accumulate(x, g)

        return backward

    return _finish(kept, (x,), "delete_rows", build)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: empty part list")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError(f"concat_rows: inconsistent widths {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            for p, o0, o1 in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accumulate(p, g[o0:o1])

        return backward

    return _finish(np.concatenate([p.data for p in parts], axis=0), tuple(parts), "concat_rows", build)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty part list")
    height = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != height:
            raise ShapeError(f"concat_cols: inconsistent heights {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def build(out: Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            for p, o0, o1 in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accumulate(p, np.ascontiguousarray(g[:, o0:o1]))

        return backward

    return _finish(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat_cols", build)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def build(out: Tensor):
        def backward():
            if out.grad is not None and x.requires_grad:
                _accumulate(x, out.grad.reshape(x.shape))

        return backward

    return _finish(x.data.reshape(shape).copy(), (x,), "reshape", build)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum all elements into a shape-(1,) tensor."""
    tape = active_tape()
    if tape is not None:
        tape.other_flops += x.size

    def build(out: Tensor):
        def backward():
            if out.grad is not None and x.requires_grad:
                _accumulate(x, np.full_like(x.data, out.grad.reshape(-1)[0]))

        return backward

    return _finish(x.data.sum(dtype=x.data.dtype).reshape(1), (x,), "reduce_sum", build)


# ---------------------------------------------------------------------------
# Seeded RNG
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX_M1 = 0xBF58476D1CE4E5B9
_MIX_M2 = 0x94D049BB133111EB
_SPLIT_SALT = 0xA0761D6478BD642F
_FNV_BASIS = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_M1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_M2) & _MASK64
    return z ^ (z >> 31)


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MIX_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MIX_M2)
    return z ^ (z >> np.uint64(31))


def _tag64(tag) -> int:
    """Map a stream label (int, str, or tuple of those) to 64 bits (FNV-1a)."""
    if isinstance(tag, int):
        return tag & _MASK64
    if isinstance(tag, str):
        h = _FNV_BASIS
        for byte in tag.encode("utf-8"):
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
        return h
    if isinstance(tag, tuple):
        h = _FNV_BASIS
        for part in tag:
            h = _mix64(h ^ _tag64(part))
        return h
    raise TypeError(f"unsupported rng tag type: {type(tag).__name__}")


class Rng:
    """Counter-based deterministic random stream (SplitMix64 family).

    Sample ``i`` of stream ``seed`` is ``mix64(seed + (i+1)*GAMMA mod 2^64)``
    with GAMMA = 0x9E3779B97F4A7C15 and mix64 the SplitMix64 finalizer
    (xor-shift 30, mul 0xBF58476D1CE4E5B9, xor-shift 27, mul
    0x94D049BB133111EB, xor-shift 31). The same seed therefore yields the
    same stream on every platform. ``split`` derives an independent
    sub-stream as a pure function of (seed, tag) without consuming from
    this stream.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def split(self, tag) -> "Rng":
        return Rng(_mix64(self.seed ^ _mix64(_tag64(tag) ^ _SPLIT_SALT)))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64_vec(np.uint64(self.seed) + idx * np.uint64(_GAMMA))

    def next_u64(self) -> int:
        self.counter += 1
        return _mix64((self.seed + self.counter * _GAMMA) & _MASK64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """float32 samples in [low, high); 24-bit mantissa-exact base draws."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(40)).astype(np.float64) * 2.0**-24
        out = (low + u * (high - low)).astype(np.float32)
        return out.reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """float32 Gaussian samples via Box-Muller (cosine branch)."""
        n = int(np.prod(shape)) if shape else 1
        raw = self._raw(2 * n)
        u1 = ((raw[:n] >> np.uint64(40)).astype(np.float64) + 1.0) * 2.0**-24  # (0, 1]
        u2 = (raw[n:] >> np.uint64(40)).astype(np.float64) * 2.0**-24  # [0, 1)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (mean + std * z).astype(np.float32).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n); j = next_u64() mod (i+1)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    frozen: bool
    rel_err: float | None = None
    checked: int = 0


@dataclass
class GradCheckReport:
    """Per-parameter comparison of tape gradients vs central differences."""

    checks: list[ParamCheck] = field(default_factory=list)
    step: float = 1e-3
    tol: float = 1e-4
    loss: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.frozen or (c.rel_err is not None and c.rel_err < self.tol) for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        errs = [c.rel_err for c in self.checks if c.rel_err is not None]
        return max(errs) if errs else 0.0

    def __str__(self) -> str:
        lines = [f"grad_check: loss={self.loss:.6g} step={self.step:g} tol={self.tol:g}"]
        for c in self.checks:
            status = "frozen" if c.frozen else f"rel_err={c.rel_err:.3e} ({c.checked} entries)"
            lines.append(f"  {c.name}: {status}")
        lines.append(f"  -> {'PASS' if self.passed else 'FAIL'} (max rel_err {self.max_rel_err:.3e})")
        return "\n".join(lines)


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-3,
    tol: float = 1e-4,
    sample_limit: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must rebuild its computation from the current parameter values on
    every call. The difference quotient is evaluated on a float64 twin of
    the perturbed parameter; numpy promotion then carries float64 through
    every kernel the perturbation reaches, so the quotient is accurate far
    below the float32 tolerance while unperturbed branches cancel exactly.
    With ``sample_limit`` set, only a seeded deterministic subset of each
    parameter's entries is probed (large tensors stay affordable).
    """
    if not (1e-4 <= step <= 1e-2):
        raise ValueError(f"grad_check: step {step} outside [1e-4, 1e-2]")

    with Tape() as tape:
        loss = f()
        if loss.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got {loss.shape}")
        loss_value = float(loss.data.reshape(-1)[0])
        if not math.isfinite(loss_value):
            raise NonFiniteError(f"grad_check aborted: loss is {loss_value}")
        tape.backward(loss)

    analytic: dict[str, np.ndarray | None] = {}
    for name, t in params.items():
        if not t.requires_grad:
            analytic[name] = None
        elif t.grad is None:
            analytic[name] = np.zeros_like(t.data)  # parameter unused by f
        else:
            analytic[name] = t.grad.copy()
        t.grad = None

    report = GradCheckReport(step=step, tol=tol, loss=loss_value)
    for name, t in params.items():
        if analytic[name] is None:
            report.checks.append(ParamCheck(name=name, frozen=True))
            continue
        size = t.data.size
        if sample_limit is not None and size > sample_limit:
            idx = Rng(seed ^ _tag64(name)).permutation(size)[:sample_limit]
            idx = np.sort(idx)
        else:
            idx = np.arange(size)
        original = t.data
        work = original.astype(np.float64)
        t.data = work
        fd = np.empty(len(idx), dtype=np.float64)
        try:
            for k, flat_i in enumerate(idx):
                base = work.flat[flat_i]
                work.flat[flat_i] = base + step
                up = float(f().data.reshape(-1)[0])
                work.flat[flat_i] = base - step
                down = float(f().data.reshape(-1)[0])
                work.flat[flat_i] = base
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError(
                        f"grad_check aborted: non-finite loss while perturbing {name}[{flat_i}]"
                    )
                fd[k] = (up - down) / (2.0 * step)
        finally:
            t.data = original
        got = analytic[name].reshape(-1)[idx].astype(np.float64)
        report.checks.append(
            ParamCheck(name=name, frozen=False, rel_err=_relative_error(got, fd), checked=len(idx))
        )
    return report
