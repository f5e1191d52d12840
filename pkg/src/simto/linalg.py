"""Sparse symmetric positive-definite factorization.

CHOLMOD (through cvxopt) when it is importable, SuperLU otherwise.  Both paths
expose the same ``solve`` and raise :class:`NotPositiveDefinite` where the
failure can be detected (SuperLU cannot tell an indefinite matrix apart).
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:  # pragma: no cover - exercised implicitly when available
    import cvxopt
    import cvxopt.cholmod as _cholmod

    _cholmod.options["print"] = 0
    HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover
    HAVE_CHOLMOD = False


class NotPositiveDefinite(ArithmeticError):
    pass


class CholeskySolver:
    """Factorizes a sequence of matrices, reusing the symbolic analysis while the pattern repeats."""

    def __init__(self, backend: str | None = None):
        self.backend = backend or ("cholmod" if HAVE_CHOLMOD else "splu")
        if self.backend not in ("cholmod", "splu"):
            raise ValueError(f"unknown backend {self.backend!r}")
        self._pattern = None
        self._symbolic = None
        self._factor = None
        self.shape = None

    def factor(self, A) -> "CholeskySolver":
        A = sp.csc_matrix(A)
        self.shape = A.shape
        if self.backend == "splu":
            try:
                self._factor = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise NotPositiveDefinite(str(exc)) from exc
            return self
        L = sp.tril(A, format="csc")
        L.sum_duplicates()
        cols = np.repeat(np.arange(L.shape[1], dtype=np.int64), np.diff(L.indptr))
        M = cvxopt.spmatrix(cvxopt.matrix(L.data.astype(float)), cvxopt.matrix(L.indices.astype(np.int64)),
                            cvxopt.matrix(cols), L.shape)
        pattern = (L.shape, L.indptr.tobytes(), L.indices.tobytes())
        if pattern != self._pattern:
            self._symbolic = _cholmod.symbolic(M, uplo="L")
            self._pattern = pattern
        self._factor = None
        try:
            _cholmod.numeric(M, self._symbolic)
        except ArithmeticError as exc:
            # the symbolic object now holds a failed factor; rebuild it on next use
            self._pattern = None
            raise NotPositiveDefinite(str(exc)) from exc
        self._factor = self._symbolic
        return self

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._factor is None:
            raise RuntimeError("no valid factorization")
        b = np.asarray(b, dtype=float)
        if self.backend == "splu":
            return self._factor.solve(b)
        B = cvxopt.matrix(np.array(b, dtype=float, order="F").reshape(self.shape[0], -1))
        _cholmod.solve(self._factor, B)
        return np.array(B).reshape(b.shape)


def SparseCholesky(A, backend: str | None = None) -> CholeskySolver:
    """One-shot factorization of ``A``."""
    return CholeskySolver(backend).factor(A)
