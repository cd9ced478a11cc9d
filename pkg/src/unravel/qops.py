"""Dense linear algebra on operators and superoperators of small quantum systems.

Operators are ``d x d`` complex numpy arrays.  Superoperators act on the
row-major flattening of an operator, so that ``res(A @ X @ B)`` equals
``kron(A, B.T) @ res(X)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SELF_ADJOINT_TOL = 1e-10
CP_TOL = 1e-9
KRAUS_CUTOFF = 1e-12
CHANNEL_SUM_TOL = 1e-10


class NotSelfAdjointPreserving(ValueError):
    """Raised when a reshuffled superoperator is not Hermitian."""


def _dim_of_super(S: np.ndarray) -> int:
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"superoperator must be square, got shape {S.shape}")
    d = int(round(np.sqrt(S.shape[0])))
    if d * d != S.shape[0]:
        raise ValueError(f"superoperator size {S.shape[0]} is not a perfect square")
    return d


def reshape(M: np.ndarray) -> np.ndarray:
    """Flatten a square matrix row by row into a vector of length d**2."""
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return M.reshape(-1).copy()


def unreshape(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`reshape`."""
    v = np.asarray(v)
    d = int(round(np.sqrt(v.size)))
    if d * d != v.size:
        raise ValueError(f"vector length {v.size} is not a perfect square")
    return v.reshape(d, d).copy()


def reshuffle(S: np.ndarray) -> np.ndarray:
    """Choi-type index permutation of a superoperator.

    The entry at row ``(i, j)`` and column ``(m, n)`` of the output is the
    entry of ``S`` at row ``(i, m)`` and column ``(j, n)``.  The map is an
    involution.
    """
    d = _dim_of_super(S)
    T = np.asarray(S).reshape(d, d, d, d)  # indices i, m, j, n
    return T.transpose(0, 2, 1, 3).reshape(d * d, d * d).copy()


def superop_from_kraus(ops, signs=None) -> np.ndarray:
    """Superoperator of ``rho -> sum_n s_n V_n rho V_n^dagger``."""
    ops = [np.asarray(V, dtype=complex) for V in ops]
    if signs is None:
        signs = [1.0] * len(ops)
    d = ops[0].shape[0]
    S = np.zeros((d * d, d * d), dtype=complex)
    for s, V in zip(signs, ops):
        S += s * np.kron(V, V.conj())
    return S


def apply_superop(S: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return unreshape(np.asarray(S) @ reshape(rho))


def is_trace_preserving(S: np.ndarray, tol: float = 1e-12) -> bool:
    d = _dim_of_super(S)
    one = reshape(np.eye(d))
    return bool(np.max(np.abs(one @ S - one)) <= tol)


@dataclass(frozen=True)
class ChoiReport:
    eigenvalues: np.ndarray  # descending
    cp: bool
    min_eigenvalue: float


def _hermitian_reshuffled(S: np.ndarray, tol: float) -> np.ndarray:
    C = reshuffle(S)
    scale = max(1.0, float(np.max(np.abs(C))))
    defect = float(np.max(np.abs(C - C.conj().T)))
    if defect > tol * scale:
        raise NotSelfAdjointPreserving(
            f"dynamics not self-adjoint preserving: reshuffled matrix is not Hermitian "
            f"(defect {defect:.3e})"
        )
    return (C + C.conj().T) / 2


def choi_spectrum(S: np.ndarray, cp_tol: float = CP_TOL,
                  sa_tol: float = SELF_ADJOINT_TOL) -> ChoiReport:
    """Spectrum of the reshuffled matrix, descending, with a complete-positivity verdict."""
    C = _hermitian_reshuffled(S, sa_tol)
    ev = np.linalg.eigvalsh(C)[::-1]
    return ChoiReport(eigenvalues=ev, cp=bool(ev[-1] >= -cp_tol), min_eigenvalue=float(ev[-1]))


@dataclass(frozen=True)
class SignedKrausSet:
    signs: tuple
    operators: tuple

    def apply(self, rho: np.ndarray) -> np.ndarray:
        out = np.zeros_like(np.asarray(rho, dtype=complex))
        for s, V in zip(self.signs, self.operators):
            out += s * (V @ rho @ V.conj().T)
        return out

    def superoperator(self) -> np.ndarray:
        return superop_from_kraus(self.operators, self.signs)

    def __len__(self):
        return len(self.operators)


def _fix_phase(v: np.ndarray) -> np.ndarray:
    # make the largest-magnitude component real and positive
    k = int(np.argmax(np.abs(v)))
    a = v[k]
    if a == 0:
        return v
    return v * (abs(a) / a)


def kraus_decompose(S: np.ndarray, cutoff: float = KRAUS_CUTOFF,
                    sa_tol: float = SELF_ADJOINT_TOL) -> SignedKrausSet:
    """Signed operator-sum representation from the spectral decomposition of the reshuffled matrix.

    Eigenvectors are scaled by the square root of the absolute eigenvalue and
    folded back into ``d x d`` operators; the sign of each eigenvalue becomes
    the sign of the corresponding term.
    """
    d = _dim_of_super(S)
    C = _hermitian_reshuffled(S, sa_tol)
    ev, vecs = np.linalg.eigh(C)
    order = np.argsort(-ev, kind="stable")
    signs, ops = [], []
    for k in order:
        f = ev[k]
        if abs(f) < cutoff:
            continue
        v = _fix_phase(vecs[:, k]) * np.sqrt(abs(f))
        signs.append(1 if f > 0 else -1)
        ops.append(v.reshape(d, d))
    return SignedKrausSet(signs=tuple(signs), operators=tuple(ops))


@dataclass(frozen=True)
class ChannelSumReport:
    """Result of :func:`check_channel_sum`.

    ``proportional`` is true when the channel sum is ``g`` times the identity.
    Otherwise ``g`` is the largest eigenvalue of the sum and ``deficiency`` is
    ``g * 1 - sum L^dagger L``.
    """
    proportional: bool
    g: float
    deficiency: np.ndarray
    deficiency_psd: bool


def channel_sum(channels) -> np.ndarray:
    channels = [np.asarray(L, dtype=complex) for L in channels]
    if not channels:
        raise ValueError("empty channel list")
    d = channels[0].shape[0]
    for L in channels:
        if L.shape != (d, d):
            raise ValueError(f"dimension mismatch: expected {(d, d)}, got {L.shape}")
    return sum(L.conj().T @ L for L in channels)


def check_channel_sum(channels, tol: float = CHANNEL_SUM_TOL) -> ChannelSumReport:
    P = channel_sum(channels)
    d = P.shape[0]
    P = (P + P.conj().T) / 2
    g = float(np.real(np.trace(P))) / d
    if g > 0 and np.max(np.abs(P - g * np.eye(d))) <= tol:
        return ChannelSumReport(True, g, np.zeros((d, d), dtype=complex), True)
    ev = np.linalg.eigvalsh(P)
    gstar = float(ev[-1])
    D = gstar * np.eye(d) - P
    psd = bool(np.linalg.eigvalsh(D)[0] >= -tol)
    return ChannelSumReport(False, gstar, D, psd)


# standard operators; basis vector e1 is the excited state
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)
SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)


def gell_mann(d: int) -> list:
    """Generalized Gell-Mann matrices, Hermitian, traceless, Tr(A B) = 2 delta."""
    mats = []
    for j in range(d):
        for k in range(j + 1, d):
            S = np.zeros((d, d), dtype=complex)
            S[j, k] = S[k, j] = 1
            mats.append(S)
            A = np.zeros((d, d), dtype=complex)
            A[j, k] = -1j
            A[k, j] = 1j
            mats.append(A)
    for l in range(1, d):
        D = np.zeros((d, d), dtype=complex)
        D[np.arange(l), np.arange(l)] = 1
        D[l, l] = -l
        mats.append(D * np.sqrt(2.0 / (l * (l + 1))))
    return mats


def gell_mann_diagonal(d: int) -> list:
    return gell_mann(d)[d * (d - 1):]


def normalized_traceless_basis(d: int) -> list:
    """Orthonormal (Hilbert-Schmidt) traceless basis of d x d matrices."""
    return [M / np.sqrt(2) for M in gell_mann(d)]
