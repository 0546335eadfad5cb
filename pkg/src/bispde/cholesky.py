"""Sparse LDL' factorization with a fill-reducing ordering.

CHOLMOD (scikit-sparse) is used when importable; otherwise SuperLU from scipy
is run in symmetric mode without pivoting, which yields the same factor up to
the ordering. Both backends expose ``Q[p][:, p] = L D L'`` with unit lower
triangular ``L``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:
    from sksparse import cholmod as _cholmod
except ImportError:  # pragma: no cover - exercised on machines without CHOLMOD
    _cholmod = None

HAVE_CHOLMOD = _cholmod is not None


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """The matrix handed to the factorization is not numerically SPD."""


def _as_csc(Q) -> sp.csc_matrix:
    Q = sp.csc_matrix(Q, dtype=float)
    Q.sort_indices()
    return Q


class Factor:
    """Factorization of one SPD matrix.

    ``whiten(b)`` returns ``D^-1/2 L^-1 P b`` so that ``|whiten(b)|^2`` equals
    ``b' Q^-1 b``; ``color(u)`` returns ``P' L^-T D^-1/2 u``, which has
    covariance ``Q^-1`` for standard normal ``u``.
    """

    def __init__(self, n: int, d: np.ndarray):
        self.n = n
        self.d = d

    def logdet(self) -> float:
        return float(np.sum(np.log(self.d)))

    def solve(self, b):  # pragma: no cover - abstract
        raise NotImplementedError

    def whiten(self, b):  # pragma: no cover - abstract
        raise NotImplementedError

    def color(self, u):  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def permutation(self) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


def _scale(v, s):
    v = np.asarray(v, dtype=float)
    return v * (s if v.ndim == 1 else s[:, None])


def _check_pivots(d: np.ndarray) -> None:
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        bad = int(np.flatnonzero(~(np.isfinite(d) & (d > 0)))[0])
        raise NotPositiveDefiniteError(f"non-positive pivot at position {bad}")


class _CholmodFactor(Factor):
    def __init__(self, f):
        self._f = f
        d = np.asarray(f.D(), dtype=float)
        _check_pivots(d)
        super().__init__(d.size, d)
        self._isd = 1.0 / np.sqrt(d)

    def solve(self, b):
        return self._f.solve_A(np.asarray(b, dtype=float))

    def whiten(self, b):
        b = b if sp.issparse(b) else np.asarray(b, dtype=float)
        pb = self._f.apply_P(b)
        if sp.issparse(pb):
            pb = pb.toarray()
        w = self._f.solve_L(pb, use_LDLt_decomposition=True)
        return _scale(w, self._isd)

    def color(self, u):
        v = _scale(u, self._isd)
        return self._f.apply_Pt(self._f.solve_Lt(v, use_LDLt_decomposition=True))

    @property
    def permutation(self) -> np.ndarray:
        return np.asarray(self._f.P())


class _SuperLUFactor(Factor):
    def __init__(self, Q: sp.csc_matrix):
        n = Q.shape[0]
        try:
            lu = spla.splu(
                Q,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(str(exc)) from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefiniteError("SuperLU pivoted off the diagonal")
        d = lu.U.diagonal().copy()
        _check_pivots(d)
        super().__init__(n, d)
        # perm_c[k] is the new position of original index k.
        self._order = np.argsort(lu.perm_c)
        self._L = lu.L.tocsr()
        self._Lt = self._L.T.tocsr()
        self._lu = lu
        self._isd = 1.0 / np.sqrt(d)

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))

    def whiten(self, b):
        b = b.toarray() if sp.issparse(b) else np.asarray(b, dtype=float)
        w = spla.spsolve_triangular(self._L, b[self._order], lower=True, unit_diagonal=True)
        return _scale(w, self._isd)

    def color(self, u):
        v = _scale(u, self._isd)
        w = spla.spsolve_triangular(self._Lt, v, lower=False, unit_diagonal=True)
        out = np.empty_like(w)
        out[self._order] = w
        return out

    @property
    def permutation(self) -> np.ndarray:
        return self._order


class Symbolic:
    """Ordering and symbolic analysis for a fixed sparsity pattern.

    Matrices passed to :meth:`factorize` must share the pattern they were
    analysed with (extra explicit zeros are fine).
    """

    def __init__(self, Q, backend: str | None = None):
        self.backend = backend or ("cholmod" if HAVE_CHOLMOD else "superlu")
        if self.backend == "cholmod" and not HAVE_CHOLMOD:
            raise RuntimeError("CHOLMOD backend requested but scikit-sparse is missing")
        Q = _as_csc(Q)
        self.shape = Q.shape
        self._sym = _cholmod.analyze(Q, mode="simplicial") if self.backend == "cholmod" else None

    def factorize(self, Q) -> Factor:
        Q = _as_csc(Q)
        if Q.shape != self.shape:
            raise ValueError(f"shape {Q.shape} does not match analysed {self.shape}")
        if self.backend == "cholmod":
            try:
                f = self._sym.cholesky(Q)
            except _cholmod.CholmodNotPositiveDefiniteError as exc:
                raise NotPositiveDefiniteError(str(exc)) from exc
            return _CholmodFactor(f)
        return _SuperLUFactor(Q)


def factorize(Q, backend: str | None = None) -> Factor:
    """One-shot factorization of an SPD sparse matrix."""
    return Symbolic(Q, backend).factorize(Q)


def logdet(Q, backend: str | None = None) -> float:
    return factorize(Q, backend).logdet()
