"""Sparse precision matrices for Matern fields and triangular bivariate systems.

A field solving ``b (kappa^2 - Laplacian) x = W`` is represented on the mesh
through the operator ``K = b (kappa^2 C + G)`` and precision ``K' C^-1 K``.
The bivariate system stacks two such operators in lower-triangular form,

    [K11   0 ] [x1]   [W1]
    [K21  K22] [x2] = [W2],

so that ``x1`` is Matern and ``x2`` mixes its own Matern part with ``x1``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from math import gamma as gamma_fn
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from .cholesky import Factor, factorize
from .mesh import FemMatrices, Mesh

KAPPA_MIN = 1e-8


class UnsupportedOperatorError(ValueError):
    pass


class RangeUndefinedError(ValueError):
    """The correlation curve never falls to the requested threshold."""


@dataclass(frozen=True)
class UniParams:
    b: float
    kappa: float
    alpha: int = 2

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"b must be positive, got {self.b}")
        if not self.kappa > KAPPA_MIN:
            raise ValueError(f"kappa must exceed {KAPPA_MIN}, got {self.kappa}")
        if self.alpha != 2:
            raise UnsupportedOperatorError("only alpha = 2 is supported")

    @classmethod
    def unit_variance(cls, kappa: float) -> "UniParams":
        """Scale ``b`` so the continuous field has marginal variance one."""
        return cls(b=1.0 / (2.0 * np.sqrt(np.pi) * kappa), kappa=kappa)


@dataclass(frozen=True)
class BiParams:
    b11: float
    kappa11: float
    b21: float
    kappa21: float
    b22: float
    kappa22: float

    def __post_init__(self):
        for name in ("b11", "b22"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("kappa11", "kappa21", "kappa22"):
            if not getattr(self, name) > KAPPA_MIN:
                raise ValueError(f"{name} must exceed {KAPPA_MIN}")
        if not np.isfinite(self.b21):
            raise ValueError("b21 must be finite")

    @property
    def first(self) -> UniParams:
        return UniParams(self.b11, self.kappa11)

    @property
    def second(self) -> UniParams:
        return UniParams(self.b22, self.kappa22)


@dataclass(frozen=True, eq=False)
class PrecisionMatrix:
    """Precision of ``n_replicates`` independent copies of an ``n_fields`` field.

    Entries are ordered replicate-major, then field, then mesh node, so node
    ``k`` of field ``f`` in replicate ``r`` sits at
    ``(r * n_fields + f) * n_nodes + k``.
    """

    Q: sp.csc_matrix
    n_fields: int
    n_nodes: int
    labels: tuple[str, ...] = ()
    n_replicates: int = 1

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    def index(self, node: int, field: int = 0, replicate: int = 0) -> int:
        return (replicate * self.n_fields + field) * self.n_nodes + node

    def block(self, field: int, replicate: int = 0) -> slice:
        start = self.index(0, field, replicate)
        return slice(start, start + self.n_nodes)

    def field_index(self, field: int | str) -> int:
        if isinstance(field, str):
            return self.labels.index(field)
        return int(field)

    def to_coo_text(self) -> str:
        """Debug dump as ``row col value`` lines (upper triangle included)."""
        coo = self.Q.tocoo()
        return "".join(f"{r} {c} {float(v)!r}\n" for r, c, v in zip(coo.row, coo.col, coo.data))


def operator_matrix(fem: FemMatrices, b: float, kappa: float, alpha: int = 2) -> sp.csc_matrix:
    """Discrete ``b (kappa^2 - Laplacian)^(alpha / 2)`` for alpha in {0, 2}."""
    if alpha == 0:
        return (b * fem.C).tocsc()
    if alpha == 2:
        if kappa < 0:
            raise ValueError("kappa must be non-negative")
        return (b * (kappa**2 * fem.C + fem.G)).tocsc()
    raise UnsupportedOperatorError(f"alpha must be 0 or 2, got {alpha}")


class OperatorBasis:
    """``C``, ``G`` and ``G C^-1 G`` stored as data arrays on one pattern.

    With lumped (diagonal) ``C`` every product of two operators is a
    combination of these three matrices,

        K_i' C^-1 K_j = b_i b_j (k_i^2 k_j^2 C + (k_i^2 + k_j^2) G + G C^-1 G),

    so precisions for any theta share one sparsity pattern and are built by
    vector arithmetic on the data arrays.
    """

    def __init__(self, fem: FemMatrices):
        n = fem.n
        G = sp.csc_matrix(fem.G)
        H = (G @ fem.C_inv @ G).tocsc()
        H = (0.5 * (H + H.T)).tocsc()
        ones = lambda M: sp.csc_matrix((np.ones(M.nnz), M.indices, M.indptr), shape=M.shape)
        pattern = (sp.identity(n, format="csc") + ones(G) + ones(H)).tocsc()
        pattern.sort_indices()
        self.n = n
        self.indptr = pattern.indptr.copy()
        self.indices = pattern.indices.copy()
        self.c = align(pattern, fem.C)
        self.g = align(pattern, G)
        self.h = align(pattern, H)

    @property
    def nnz(self) -> int:
        return self.indices.size

    def product(self, b1: float, k1: float, b2: float, k2: float) -> np.ndarray:
        """Data of ``K_1' C^-1 K_2``."""
        a1, a2 = k1 * k1, k2 * k2
        return (b1 * b2) * ((a1 * a2) * self.c + (a1 + a2) * self.g + self.h)

    def matrix(self, data) -> sp.csc_matrix:
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


def _keys(M: sp.csc_matrix) -> np.ndarray:
    M = sp.csc_matrix(M)
    M.sort_indices()
    cols = np.repeat(np.arange(M.shape[1], dtype=np.int64), np.diff(M.indptr))
    return cols * M.shape[0] + M.indices.astype(np.int64)


def position_map(pattern: sp.csc_matrix, M: sp.spmatrix) -> np.ndarray:
    """Index into ``pattern.data`` of every stored entry of ``M`` (CSC order)."""
    kp, km = _keys(pattern), _keys(M)
    pos = np.searchsorted(kp, km)
    if np.any(pos >= kp.size) or np.any(kp[np.minimum(pos, kp.size - 1)] != km):
        raise ValueError("matrix has entries outside the pattern")
    return pos


def align(pattern: sp.csc_matrix, M: sp.spmatrix) -> np.ndarray:
    """Data of ``M`` laid out on ``pattern`` (zeros where ``M`` has no entry)."""
    M = sp.csc_matrix(M)
    M.sort_indices()
    out = np.zeros(pattern.nnz)
    out[position_map(pattern, M)] = M.data
    return out


_BASES: "weakref.WeakKeyDictionary[FemMatrices, OperatorBasis]" = weakref.WeakKeyDictionary()


def operator_basis(fem: FemMatrices) -> OperatorBasis:
    basis = _BASES.get(fem)
    if basis is None:
        basis = _BASES[fem] = OperatorBasis(fem)
    return basis


class BlockLayout:
    """Fixed 2x2 block pattern over an operator basis.

    ``coupled=False`` leaves the off-diagonal blocks structurally empty.
    Coupled layouts keep their off-diagonal pattern even when the coupling
    is zero, so the symbolic factorization never changes with theta.
    """

    def __init__(self, basis: OperatorBasis, coupled: bool):
        m = basis.nnz
        lab = lambda k: basis.matrix(k * m + 1.0 + np.arange(m))
        blocks = [[lab(0), lab(1) if coupled else None], [lab(1) if coupled else None, lab(2)]]
        S = sp.bmat(blocks, format="csc")
        S.sort_indices()
        self.n = 2 * basis.n
        self.coupled = coupled
        self.indptr = S.indptr.copy()
        self.indices = S.indices.copy()
        self._slot = S.data.astype(np.int64) - 1

    def assemble(self, d11, d12, d22) -> sp.csc_matrix:
        zero = np.zeros_like(d11)
        stacked = np.concatenate([d11, d12 if d12 is not None else zero, d22])
        return sp.csc_matrix(
            (stacked[self._slot], self.indices, self.indptr), shape=(self.n, self.n)
        )


_LAYOUTS: "weakref.WeakKeyDictionary[OperatorBasis, dict]" = weakref.WeakKeyDictionary()


def block_layout(basis: OperatorBasis, coupled: bool) -> BlockLayout:
    cache = _LAYOUTS.setdefault(basis, {})
    if coupled not in cache:
        cache[coupled] = BlockLayout(basis, coupled)
    return cache[coupled]


def uni_precision(fem: FemMatrices, p: UniParams, label: str = "x") -> PrecisionMatrix:
    basis = operator_basis(fem)
    Q = basis.matrix(basis.product(p.b, p.kappa, p.b, p.kappa))
    return PrecisionMatrix(Q, 1, fem.n, (label,))


def bi_blocks(fem: FemMatrices, p: BiParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Basis data of the (first, first), (first, second), (second, second) blocks."""
    basis = operator_basis(fem)
    q11 = basis.product(p.b11, p.kappa11, p.b11, p.kappa11)
    if p.b21 != 0:
        q11 = q11 + basis.product(p.b21, p.kappa21, p.b21, p.kappa21)
    q12 = basis.product(p.b21, p.kappa21, p.b22, p.kappa22)
    q22 = basis.product(p.b22, p.kappa22, p.b22, p.kappa22)
    return q11, q12, q22


def bi_precision(
    fem: FemMatrices, p: BiParams, order: Sequence[str] = ("first", "second")
) -> PrecisionMatrix:
    """Joint precision of the triangular system, fields stacked in ``order``.

    Blocks are ``K11' C^-1 K11 + K21' C^-1 K21``, ``K21' C^-1 K22`` and
    ``K22' C^-1 K22``; with ``b21 = 0`` the fields decouple exactly.
    """
    q11, q12, q22 = bi_blocks(fem, p)
    Q = block_layout(operator_basis(fem), True).assemble(q11, q12, q22)
    return PrecisionMatrix(Q, 2, fem.n, tuple(order))


def replicate(prec: PrecisionMatrix, J: int) -> PrecisionMatrix:
    if J < 1:
        raise ValueError("J must be at least 1")
    if J == 1:
        return prec
    Q = sp.block_diag([prec.Q] * J, format="csc")
    return PrecisionMatrix(Q, prec.n_fields, prec.n_nodes, prec.labels, prec.n_replicates * J)


def matern_correlation(h, kappa: float, nu: float = 1.0) -> np.ndarray:
    """Matern correlation ``2^(1-nu)/Gamma(nu) (kappa h)^nu K_nu(kappa h)``."""
    h = np.asarray(h, dtype=float)
    x = kappa * np.abs(h)
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    out[pos] = 2.0 ** (1.0 - nu) / gamma_fn(nu) * xp**nu * kv(nu, xp)
    return out


def marginal_variances(factor: Factor, indices, batch: int = 256) -> np.ndarray:
    """Diagonal of ``Q^-1`` at ``indices``, one triangular solve per entry."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty(indices.size)
    for start in range(0, indices.size, batch):
        idx = indices[start : start + batch]
        E = sp.csc_matrix(
            (np.ones(idx.size), (idx, np.arange(idx.size))), shape=(factor.n, idx.size)
        )
        w = factor.whiten(E)
        out[start : start + idx.size] = np.sum(w * w, axis=0)
    return out


def correlation_curve(
    prec: PrecisionMatrix,
    mesh: Mesh,
    ref_node: int,
    field_pair: tuple[int | str, int | str] = (0, 0),
    max_dist: float | None = None,
    factor: Factor | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Correlation between field ``i`` at ``ref_node`` and field ``j`` elsewhere.

    Field indices are 0-based (or labels). Only nodes within ``max_dist`` of
    the reference are returned; each is normalised by its own marginal
    standard deviation. Output is sorted by distance.
    """
    if not mesh.interior[ref_node]:
        raise ValueError(f"reference node {ref_node} is not interior")
    fi, fj = (prec.field_index(f) for f in field_pair)
    factor = factor if factor is not None else factorize(prec.Q)
    col = prec.index(ref_node, fi)
    e = np.zeros(prec.dim)
    e[col] = 1.0
    v = factor.solve(e)

    dist = np.linalg.norm(mesh.vertices - mesh.vertices[ref_node], axis=1)
    nodes = np.arange(prec.n_nodes) if max_dist is None else np.flatnonzero(dist <= max_dist)
    idx = np.array([prec.index(k, fj) for k in nodes], dtype=np.int64)
    var_j = marginal_variances(factor, idx)
    corr = v[idx] / np.sqrt(v[col] * var_j)
    order = np.argsort(dist[nodes], kind="stable")
    return dist[nodes][order], corr[order]


def cross_correlation(prec: PrecisionMatrix, node: int, factor: Factor | None = None) -> float:
    """Zero-lag correlation between the two fields at ``node``."""
    if prec.n_fields != 2:
        raise ValueError("cross-correlation needs a bivariate precision")
    factor = factor if factor is not None else factorize(prec.Q)
    i, j = prec.index(node, 0), prec.index(node, 1)
    e = np.zeros(prec.dim)
    e[i] = 1.0
    v = factor.solve(e)
    var_j = marginal_variances(factor, [j])[0]
    return float(v[j] / np.sqrt(v[i] * var_j))


def correlation_range(distances, correlations, threshold: float = 0.1) -> float:
    """First distance at which the correlation falls to ``threshold``.

    Linear interpolation between the bracketing curve points.
    """
    d = np.asarray(distances, dtype=float)
    c = np.asarray(correlations, dtype=float)
    order = np.argsort(d, kind="stable")
    d, c = d[order], c[order]
    below = np.flatnonzero(c <= threshold)
    if below.size == 0:
        raise RangeUndefinedError(
            f"correlation never reaches {threshold} within {d.max():.3g} km; mesh too small"
        )
    k = below[0]
    if k == 0:
        return float(d[0])
    d0, d1, c0, c1 = d[k - 1], d[k], c[k - 1], c[k]
    if c0 == c1:
        return float(d1)
    return float(d0 + (c0 - threshold) * (d1 - d0) / (c0 - c1))


def binned_curve(distances, correlations, width: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean correlation per distance bin; smooths direction-dependent scatter."""
    d = np.asarray(distances, dtype=float)
    c = np.asarray(correlations, dtype=float)
    bins = np.floor(d / width).astype(np.int64)
    uniq, inv = np.unique(bins, return_inverse=True)
    out_d = np.bincount(inv, weights=d) / np.bincount(inv)
    out_c = np.bincount(inv, weights=c) / np.bincount(inv)
    return out_d, out_c


def central_node(mesh: Mesh) -> int:
    """Interior vertex closest to the centroid of the interior vertices."""
    inner = np.flatnonzero(mesh.interior)
    centre = mesh.vertices[inner].mean(axis=0)
    return int(inner[np.argmin(np.linalg.norm(mesh.vertices[inner] - centre, axis=1))])
