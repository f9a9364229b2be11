"""Small dense linear-algebra helpers shared by the filters and the solver."""

import numpy as np
from scipy import linalg

from .errors import ConditioningError

JITTER = 1e-9


def symmetrize(P):
    return 0.5 * (P + P.T)


def cholesky(S, what="matrix"):
    """Lower Cholesky factor of ``S``, retrying once with ``S + 1e-9 I``."""
    S = symmetrize(np.asarray(S, dtype=float))
    try:
        return linalg.cholesky(S, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(S + JITTER * np.eye(S.shape[0]), lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ConditioningError(f"{what} is not positive definite") from exc


def spd_solve(S, B, what="matrix"):
    """Solve ``S X = B`` for symmetric positive-definite ``S``."""
    L = cholesky(S, what)
    return linalg.cho_solve((L, True), B, check_finite=False)


def spd_inverse(S, what="matrix"):
    return symmetrize(spd_solve(S, np.eye(S.shape[0]), what))


def logdet_spd(S, what="matrix"):
    L = cholesky(S, what)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def psd_sqrt(S):
    """Symmetric square root of a PSD matrix; tolerates singular input."""
    w, V = np.linalg.eigh(symmetrize(np.asarray(S, dtype=float)))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T
