"""Matrix-free linear operators: forward/adjoint application, power-method
norms, scaling, composition and block stacking.

Every operator maps flat float64 vectors to flat float64 vectors.  Concrete
imaging operators carry the array shapes they reshape to internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "OperatorShape",
    "LinearOperator",
    "MatrixOperator",
    "IdentityOperator",
    "DiagonalOperator",
    "ScaledOperator",
    "ComposedOperator",
    "SumOperator",
    "BlockOperator",
    "PowerMethodError",
    "identity",
    "diagonal",
    "scale",
    "compose",
    "stack",
    "op_norm",
    "power_method",
    "adjoint_mismatch",
]


@dataclass(frozen=True)
class OperatorShape:
    domain_len: int
    codomain_len: int

    def __post_init__(self):
        if self.domain_len <= 0 or self.codomain_len <= 0:
            raise ValueError(f"operator dimensions must be positive, got {self}")

    @property
    def T(self) -> "OperatorShape":
        return OperatorShape(self.codomain_len, self.domain_len)


class PowerMethodError(RuntimeError):
    """Raised when the power method exhausts ``max_iter``.

    The last norm estimate is kept in ``estimate``.
    """

    def __init__(self, message, estimate):
        super().__init__(message)
        self.estimate = estimate


class LinearOperator:
    """Base class.  Subclasses implement ``_apply`` and ``_adjoint`` on flat
    vectors of the right length; dimension checks happen here."""

    def __init__(self, domain_len: int, codomain_len: int):
        self.shape = OperatorShape(int(domain_len), int(codomain_len))

    @property
    def domain_len(self) -> int:
        return self.shape.domain_len

    @property
    def codomain_len(self) -> int:
        return self.shape.codomain_len

    def apply(self, x) -> np.ndarray:
        x = _as_vector(x, self.domain_len, "apply")
        return self._apply(x)

    def adjoint(self, y) -> np.ndarray:
        y = _as_vector(y, self.codomain_len, "adjoint")
        return self._adjoint(y)

    __call__ = apply

    def _apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def T(self) -> "LinearOperator":
        return _Adjoint(self)

    def __matmul__(self, other: "LinearOperator") -> "LinearOperator":
        return compose(self, other)

    def __mul__(self, c: float) -> "LinearOperator":
        return scale(self, c)

    __rmul__ = __mul__

    def __add__(self, other: "LinearOperator") -> "LinearOperator":
        return SumOperator([self, other])

    def to_dense(self) -> np.ndarray:
        """Materialize the matrix column by column (small operators only)."""
        out = np.empty((self.codomain_len, self.domain_len))
        e = np.zeros(self.domain_len)
        for j in range(self.domain_len):
            e[j] = 1.0
            out[:, j] = self.apply(e)
            e[j] = 0.0
        return out

    def __repr__(self):
        return f"{type(self).__name__}({self.codomain_len}x{self.domain_len})"


def _as_vector(v, n: int, where: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size != n:
        raise ValueError(f"{where}: expected {n} elements, got {v.size}")
    return v.reshape(-1)


class _Adjoint(LinearOperator):
    def __init__(self, op: LinearOperator):
        super().__init__(op.codomain_len, op.domain_len)
        self.op = op

    def _apply(self, x):
        return self.op._adjoint(x)

    def _adjoint(self, y):
        return self.op._apply(y)

    @property
    def T(self):
        return self.op


class MatrixOperator(LinearOperator):
    """Dense matrix wrapper."""

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("matrix must be 2-D")
        super().__init__(matrix.shape[1], matrix.shape[0])
        self.matrix = matrix

    def _apply(self, x):
        return self.matrix @ x

    def _adjoint(self, y):
        return self.matrix.T @ y


class IdentityOperator(LinearOperator):
    def __init__(self, n: int):
        super().__init__(n, n)

    def _apply(self, x):
        return x.copy()

    _adjoint = _apply


class DiagonalOperator(LinearOperator):
    def __init__(self, d):
        d = np.asarray(d, dtype=np.float64).reshape(-1)
        super().__init__(d.size, d.size)
        self.d = d

    def _apply(self, x):
        return self.d * x

    _adjoint = _apply


class ScaledOperator(LinearOperator):
    def __init__(self, op: LinearOperator, c: float):
        super().__init__(op.domain_len, op.codomain_len)
        self.op = op
        self.c = float(c)

    def _apply(self, x):
        return self.c * self.op._apply(x)

    def _adjoint(self, y):
        return self.c * self.op._adjoint(y)


class ComposedOperator(LinearOperator):
    """``outer @ inner``; the adjoint runs ``inner.T @ outer.T``."""

    def __init__(self, outer: LinearOperator, inner: LinearOperator):
        if inner.codomain_len != outer.domain_len:
            raise ValueError(
                f"cannot compose: inner codomain {inner.codomain_len} "
                f"!= outer domain {outer.domain_len}"
            )
        super().__init__(inner.domain_len, outer.codomain_len)
        self.outer = outer
        self.inner = inner

    def _apply(self, x):
        return self.outer._apply(self.inner._apply(x))

    def _adjoint(self, y):
        return self.inner._adjoint(self.outer._adjoint(y))


class SumOperator(LinearOperator):
    def __init__(self, ops: Sequence[LinearOperator], coeffs: Sequence[float] | None = None):
        ops = list(ops)
        if not ops:
            raise ValueError("empty sum")
        for op in ops[1:]:
            if op.shape != ops[0].shape:
                raise ValueError("summands must share shape")
        super().__init__(ops[0].domain_len, ops[0].codomain_len)
        self.ops = ops
        self.coeffs = [1.0] * len(ops) if coeffs is None else [float(c) for c in coeffs]

    def _apply(self, x):
        out = self.coeffs[0] * self.ops[0]._apply(x)
        for c, op in zip(self.coeffs[1:], self.ops[1:]):
            out += c * op._apply(x)
        return out

    def _adjoint(self, y):
        out = self.coeffs[0] * self.ops[0]._adjoint(y)
        for c, op in zip(self.coeffs[1:], self.ops[1:]):
            out += c * op._adjoint(y)
        return out


class BlockOperator(LinearOperator):
    """Vertical stack of operators sharing one domain.

    Block ``i`` applies as ``scalings[i] * blocks[i] / norms[i]`` and owns the
    contiguous slice ``offsets[i]:offsets[i+1]`` of the stacked codomain.
    Norms are taken as given; compute them with :func:`op_norm` once and
    reuse them.
    """

    def __init__(self, blocks, norms, scalings):
        blocks = list(blocks)
        if not blocks:
            raise ValueError("need at least one block")
        n = blocks[0].domain_len
        for i, b in enumerate(blocks):
            if b.domain_len != n:
                raise ValueError(f"block {i} domain {b.domain_len} != {n}")
        norms = np.asarray(norms, dtype=np.float64).reshape(-1)
        scalings = np.asarray(scalings, dtype=np.float64).reshape(-1)
        if norms.size != len(blocks) or scalings.size != len(blocks):
            raise ValueError("blocks, norms and scalings must have equal length")
        if np.any(~(norms > 0)):
            raise ValueError("block norms must be positive")
        sizes = [b.codomain_len for b in blocks]
        super().__init__(n, sum(sizes))
        self.blocks = blocks
        self.norms = norms
        self.scalings = scalings
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._coef = scalings / norms

    def __len__(self):
        return len(self.blocks)

    def with_scalings(self, scalings) -> "BlockOperator":
        """Same blocks and cached norms, new per-block scalings."""
        return BlockOperator(self.blocks, self.norms, scalings)

    def split(self, y: np.ndarray) -> list[np.ndarray]:
        return [y[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self))]

    def apply_blocks(self, x) -> list[np.ndarray]:
        x = _as_vector(x, self.domain_len, "apply")
        return [c * b._apply(x) for c, b in zip(self._coef, self.blocks)]

    def adjoint_blocks(self, ys: Sequence[np.ndarray]) -> np.ndarray:
        if len(ys) != len(self.blocks):
            raise ValueError("one dual vector per block required")
        out = np.zeros(self.domain_len)
        for c, b, y in zip(self._coef, self.blocks, ys):
            out += c * b.adjoint(y)
        return out

    def _apply(self, x):
        return np.concatenate(self.apply_blocks(x))

    def _adjoint(self, y):
        return self.adjoint_blocks(self.split(y))


def identity(n: int) -> IdentityOperator:
    return IdentityOperator(n)


def diagonal(d) -> DiagonalOperator:
    return DiagonalOperator(d)


def scale(op: LinearOperator, c: float) -> ScaledOperator:
    return ScaledOperator(op, c)


def compose(outer: LinearOperator, inner: LinearOperator) -> ComposedOperator:
    return ComposedOperator(outer, inner)


def stack(blocks, norms=None, scalings=None) -> BlockOperator:
    """Stack operators into a :class:`BlockOperator`.

    Missing ``norms`` default to 1 (no normalization), missing ``scalings``
    to 1.
    """
    blocks = list(blocks)
    if norms is None:
        norms = np.ones(len(blocks))
    if scalings is None:
        scalings = np.ones(len(blocks))
    return BlockOperator(blocks, norms, scalings)


def power_method(
    gram: Callable[[np.ndarray], np.ndarray],
    n: int,
    tol: float = 1e-6,
    max_iter: int = 5000,
    seed: int = 0,
    history: list | None = None,
) -> float:
    """Largest eigenvalue of a symmetric positive semidefinite map.

    The estimate is the Rayleigh quotient ``<v, gram(v)>`` of the unit
    iterate, which never decreases for PSD maps.  Iteration stops when two
    successive estimates differ by less than ``tol * estimate``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        gv = gram(v)
        new = float(v @ gv)
        if history is not None:
            history.append(new)
        nrm = np.linalg.norm(gv)
        if nrm == 0.0:
            return 0.0
        v = gv / nrm
        if abs(new - est) < tol * new:
            return new
        est = new
    raise PowerMethodError(
        f"power method did not converge in {max_iter} iterations", est
    )


def op_norm(op: LinearOperator, tol: float = 1e-6, max_iter: int = 5000, seed: int = 0) -> float:
    """Spectral norm ``||K||_2`` from the power method on ``K^T K``."""
    lam = power_method(
        lambda v: op._adjoint(op._apply(v)), op.domain_len, tol=tol, max_iter=max_iter, seed=seed
    )
    return float(np.sqrt(lam))


def adjoint_mismatch(op: LinearOperator, n_pairs: int = 20, seed: int = 0) -> float:
    """Worst relative violation of ``<Kx, y> = <x, K^T y>`` over random pairs.

    The error is normalized by ``|Kx||y| + |x||K^T y|``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        x = rng.standard_normal(op.domain_len)
        y = rng.standard_normal(op.codomain_len)
        kx = op.apply(x)
        kty = op.adjoint(y)
        scale_ = np.linalg.norm(kx) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(kty)
        if scale_ == 0.0:
            continue
        worst = max(worst, abs(kx @ y - x @ kty) / scale_)
    return worst
