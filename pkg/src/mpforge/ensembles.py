"""Rotationally invariant measurement matrices kept in SVD-factored form.

A matrix ``A = U diag(s) V^T`` of shape ``M x N`` (``M <= N``) is represented by
its factors. ``U`` and ``V`` are Haar distributed and ``s`` is drawn i.i.d. from
a bounded :class:`SingularValueLaw`. Nothing in the solvers ever needs ``A``
itself, so the dense matrix is only built on request for test oracles.

For large Monte Carlo sweeps only the first ``M`` columns of ``V`` enter
``A``; :func:`sample_rri_matrix` can therefore return a *thin* factorization
whose ``v`` is an ``N x M`` Haar-distributed Stiefel frame. Thin and full
factorizations give the same operator law.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InvalidConfig, InvalidDimension

__all__ = [
    "SingularValueLaw",
    "MatrixFactorization",
    "sample_haar",
    "sample_stiefel",
    "sample_singular_values",
    "sample_rri_matrix",
    "apply",
    "apply_transpose",
    "identity_factorization",
    "export_factorization",
    "load_factorization",
]

LAW_KINDS = ("uniform", "two-point", "constant", "geometric")
MODES = ("orthogonal", "right")
_MAGIC = b"MPF1"


@lru_cache(maxsize=8)
def _legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


@dataclass(frozen=True)
class SingularValueLaw:
    """Distribution of the singular values of the design matrix.

    Parameters
    ----------
    kind
        ``"uniform"`` on ``[0, s_max]``; ``"two-point"``, equal to ``value``
        with probability ``mass`` and zero otherwise; ``"constant"`` equal to
        ``value``; ``"geometric"``, log-spaced between ``s_max / kappa`` and
        ``s_max`` (condition number ``kappa`` exactly).
    """

    kind: str = "uniform"
    s_max: float = 4.0
    value: float = 1.0
    mass: float = 1.0
    kappa: float = 100.0

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise InvalidConfig(f"unsupported singular value law {self.kind!r}", field="model.law.kind")
        if not (np.isfinite(self.s_max) and self.s_max > 0):
            raise InvalidConfig("s_max must be positive and finite", field="model.law.s_max")
        if self.kind in ("constant", "two-point") and not (0 <= self.value <= self.s_max):
            raise InvalidConfig("value must lie in [0, s_max]", field="model.law.value")
        if self.kind == "two-point" and not (0 <= self.mass <= 1):
            raise InvalidConfig("mass must lie in [0, 1]", field="model.law.mass")
        if self.kind == "geometric" and not (np.isfinite(self.kappa) and self.kappa >= 1):
            raise InvalidConfig("kappa must be >= 1", field="model.law.kappa")

    @classmethod
    def uniform(cls, s_max: float = 4.0) -> "SingularValueLaw":
        return cls("uniform", s_max=s_max)

    @classmethod
    def constant(cls, value: float, s_max: float | None = None) -> "SingularValueLaw":
        return cls("constant", s_max=max(value, 1e-300) if s_max is None else s_max, value=value)

    @classmethod
    def two_point(cls, value: float, mass: float, s_max: float | None = None) -> "SingularValueLaw":
        return cls("two-point", s_max=max(value, 1e-300) if s_max is None else s_max, value=value, mass=mass)

    @classmethod
    def geometric(cls, kappa: float, s_max: float = 4.0) -> "SingularValueLaw":
        return cls("geometric", s_max=s_max, kappa=kappa)

    def nodes(self, n: int = 400) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes and probability weights for expectations under the law."""
        if self.kind == "constant":
            return np.array([self.value]), np.array([1.0])
        if self.kind == "two-point":
            return np.array([self.value, 0.0]), np.array([self.mass, 1.0 - self.mass])
        x, w = _legendre(n)
        if self.kind == "uniform":
            return 0.5 * self.s_max * (x + 1.0), 0.5 * w
        lo, hi = np.log(self.s_max / self.kappa), np.log(self.s_max)
        if hi == lo:
            return np.array([self.s_max]), np.array([1.0])
        return np.exp(lo + 0.5 * (hi - lo) * (x + 1.0)), 0.5 * w

    def expect(self, fn: Callable[[np.ndarray], np.ndarray], n: int = 400) -> float:
        """``E[fn(S)]`` for ``S`` drawn from the law."""
        s, w = self.nodes(n)
        return float(np.dot(w, fn(s)))

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        return sample_singular_values(self, m, rng)


def _check_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_haar(n: int, rng) -> np.ndarray:
    """Haar-distributed ``n x n`` orthogonal matrix (QR with sign correction)."""
    return sample_stiefel(n, n, rng)


def sample_stiefel(n: int, k: int, rng) -> np.ndarray:
    """First ``k`` columns of a Haar ``n x n`` orthogonal matrix."""
    if n < 1 or k < 1 or k > n:
        raise InvalidDimension(f"need 1 <= k <= n, got n={n}, k={k}")
    rng = _check_rng(rng)
    g = rng.standard_normal((n, k))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def sample_singular_values(law: SingularValueLaw, m: int, rng) -> np.ndarray:
    """Draw ``m`` singular values from ``law``."""
    if not isinstance(law, SingularValueLaw):
        raise InvalidConfig("law must be a SingularValueLaw")
    if m < 1:
        raise InvalidDimension("m must be >= 1")
    rng = _check_rng(rng)
    if law.kind == "constant":
        return np.full(m, float(law.value))
    if law.kind == "uniform":
        return rng.uniform(0.0, law.s_max, size=m)
    if law.kind == "two-point":
        return np.where(rng.random(m) < law.mass, float(law.value), 0.0)
    # geometric: deterministic log-spacing, randomly ordered
    if m == 1:
        return np.array([law.s_max])
    s = law.s_max * np.geomspace(1.0 / law.kappa, 1.0, m)
    return rng.permutation(s)


@dataclass(frozen=True, eq=False)
class MatrixFactorization:
    """``A = u @ diag(s) @ v[:, :m].T`` with ``u`` of size ``m x m``.

    ``v`` is either ``n x n`` (full) or ``n x m`` (thin). Arrays are made
    read-only so one factorization can be shared between workers.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    u_is_identity: bool = field(default=False)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        s = np.asarray(self.s, dtype=float).ravel()
        v = np.asarray(self.v, dtype=float)
        m = s.size
        if u.shape != (m, m):
            raise InvalidDimension(f"u must be {m}x{m}, got {u.shape}")
        if v.ndim != 2 or v.shape[0] < m or v.shape[1] not in (m, v.shape[0]):
            raise InvalidDimension(f"v must be n x n or n x m with n >= m, got {v.shape}")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise InvalidConfig("singular values must be finite and non-negative")
        for a in (u, s, v):
            a.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "v", v)

    def check_orthogonality(self, tol: float = 1e-10) -> None:
        """Raise :class:`InvalidDimension` unless both factors have orthonormal columns."""
        for name, q in (("u", self.u), ("v", self.v)):
            if np.max(np.abs(q.T @ q - np.eye(q.shape[1])), initial=0.0) > tol:
                raise InvalidDimension(f"{name} is not orthogonal within {tol:g}")

    @property
    def m(self) -> int:
        return self.s.size

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def delta(self) -> float:
        return self.m / self.n

    @property
    def thin(self) -> bool:
        return self.v.shape[1] != self.n

    @property
    def v_m(self) -> np.ndarray:
        """The ``n x m`` block of ``v`` that actually enters ``A``."""
        return self.v[:, : self.m]

    @property
    def s_padded(self) -> np.ndarray:
        """Singular values zero-padded to length ``n``."""
        out = np.zeros(self.n)
        out[: self.m] = self.s
        return out

    def _u_mul(self, x):
        return x if self.u_is_identity else self.u @ x

    def _ut_mul(self, y):
        return y if self.u_is_identity else self.u.T @ y

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise InvalidDimension(f"expected leading dimension {self.n}, got {x.shape[0]}")
        sv = self.s if x.ndim == 1 else self.s[:, None]
        return self._u_mul(sv * (self.v_m.T @ x))

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.m:
            raise InvalidDimension(f"expected leading dimension {self.m}, got {y.shape[0]}")
        sv = self.s if y.ndim == 1 else self.s[:, None]
        return self.v_m @ (sv * self._ut_mul(y))

    def dense(self) -> np.ndarray:
        """Materialize ``A``. Intended for tests and small examples."""
        return (self.u * self.s) @ self.v_m.T


def apply(fac: MatrixFactorization, x: np.ndarray) -> np.ndarray:
    """``A @ x`` through the factors."""
    return fac.apply(x)


def apply_transpose(fac: MatrixFactorization, y: np.ndarray) -> np.ndarray:
    """``A.T @ y`` through the factors."""
    return fac.apply_transpose(y)


def identity_factorization(n: int) -> MatrixFactorization:
    eye = np.eye(n)
    return MatrixFactorization(eye, np.ones(n), eye)


def sample_rri_matrix(m: int, n: int, law: SingularValueLaw | None = None, mode: str = "orthogonal",
                      rng=None, *, thin: bool = False) -> MatrixFactorization:
    """Sample a rotationally invariant ``m x n`` matrix.

    ``mode="orthogonal"`` draws both ``U`` and ``V`` from Haar measure;
    ``mode="right"`` fixes ``U = I`` so only right invariance holds.
    With ``thin=True`` only the ``n x m`` part of ``V`` is generated.
    """
    if m < 1 or n < 1:
        raise InvalidDimension("dimensions must be positive")
    if m > n:
        raise InvalidDimension(f"need m <= n, got m={m}, n={n}")
    if mode not in MODES:
        raise InvalidConfig(f"mode must be one of {MODES}", field="model.mode")
    law = SingularValueLaw() if law is None else law
    rng = _check_rng(rng)
    s = sample_singular_values(law, m, rng)
    v = sample_stiefel(n, m, rng) if thin else sample_haar(n, rng)
    if mode == "orthogonal":
        return MatrixFactorization(sample_haar(m, rng), s, v)
    return MatrixFactorization(np.eye(m), s, v, u_is_identity=True)


def export_factorization(fac: MatrixFactorization, path: str | Path) -> None:
    """Write ``fac`` in the ``MPF1`` binary layout.

    Header: the 4 magic bytes then ``m`` and ``n`` as little-endian u64.
    Body: ``s`` followed by ``U`` and ``V``, all column-major float64.
    """
    if fac.thin:
        raise InvalidDimension("only full factorizations can be exported")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<QQ", fac.m, fac.n))
        for a in (fac.s, fac.u, fac.v):
            fh.write(np.asarray(a, dtype="<f8").tobytes(order="F"))


def load_factorization(path: str | Path) -> MatrixFactorization:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise InvalidConfig("not an MPF1 file")
    m, n = struct.unpack("<QQ", raw[4:20])
    body = np.frombuffer(raw[20:], dtype="<f8")
    if body.size != m + m * m + n * n:
        raise InvalidDimension("truncated MPF1 file")
    s = body[:m]
    u = body[m : m + m * m].reshape((m, m), order="F")
    v = body[m + m * m :].reshape((n, n), order="F")
    fac = MatrixFactorization(u.copy(), s.copy(), v.copy())
    fac.check_orthogonality()
    return fac
