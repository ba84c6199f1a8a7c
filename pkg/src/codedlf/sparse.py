"""Sparse-coding baselines: OMP, ADMM basis pursuit denoising, K-SVD and
online dictionary learning, plus patchwise light field reconstruction.

The inverse problem is min ||alpha||_0 s.t. ||i - Phi D alpha||^2 < eps,
attacked greedily (OMP) or through the l1 relaxation (BPDN via ADMM). The
effective per-patch system A = matrix_form(Phi_patch) @ D has high mutual
coherence, so there is no recovery guarantee; :func:`mutual_coherence` is a
diagnostic only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .lightfield import (
    CodedImage,
    LightField,
    SensingTensor,
    extract_patch,
    matrix_form,
    patch_grid,
    stitch_patches,
)

log = logging.getLogger(__name__)


class SparseSolveError(RuntimeError):
    """Sparse coding failed (e.g. ill-conditioned support refit)."""


@dataclass(frozen=True)
class Dictionary:
    """Column-normalized atom matrix [k, s]; k = patch dimension, s = atom count."""

    atoms: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.atoms, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"dictionary must be 2-D, got shape {arr.shape}")
        norms = np.linalg.norm(arr, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("dictionary columns must have unit euclidean norm")
        object.__setattr__(self, "atoms", arr)

    @property
    def patch_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]


@dataclass
class SparseCode:
    """Solution of one sparse coding problem."""

    coeffs: np.ndarray
    support: np.ndarray
    converged: bool = True
    objective_history: list[float] = field(default_factory=list)


def _normalize_columns(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=0)
    norms[norms == 0] = 1.0
    return mat / norms


def omp(
    A: np.ndarray,
    y: np.ndarray,
    max_nnz: int,
    residual_tol: float = 0.0,
) -> SparseCode:
    """Orthogonal matching pursuit.

    Greedily grows the support by the atom of maximal absolute correlation
    with the residual (inner products against norm-normalized columns), then
    refits all active coefficients by least squares. Stops once ``max_nnz``
    atoms are active or the squared residual norm drops to ``residual_tol``.

    Args:
        A: system matrix [m, s] with nonzero columns.
        y: measurement vector [m].
        max_nnz: sparsity budget, at most min(m, s).
        residual_tol: early-exit threshold on ||y - A alpha||^2.

    Raises:
        SparseSolveError: the least-squares refit became ill-conditioned.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, s = A.shape
    if max_nnz > min(m, s):
        raise ValueError(f"max_nnz={max_nnz} exceeds min(m, s)={min(m, s)}")
    col_norms = np.linalg.norm(A, axis=0)
    if np.any(col_norms == 0):
        raise ValueError("system matrix has zero columns")
    An = A / col_norms

    coeffs = np.zeros(s)
    support: list[int] = []
    residual = y.copy()
    sol = np.zeros(0)
    for _ in range(max_nnz):
        if residual @ residual <= residual_tol:
            break
        corr = np.abs(An.T @ residual)
        corr[support] = -1.0  # never reselect an active atom
        best = int(np.argmax(corr))
        if corr[best] <= 1e-14:
            break
        support.append(best)
        sub = A[:, support]
        sol, _, rank, sv = np.linalg.lstsq(sub, y, rcond=None)
        if rank < len(support) or sv[0] / max(sv[-1], 1e-300) > 1e12:
            raise SparseSolveError(f"ill-conditioned support {support}")
        residual = y - sub @ sol
    coeffs[support] = sol
    return SparseCode(coeffs=coeffs, support=np.asarray(support, dtype=np.int64))


def _soft_threshold(x: np.ndarray, tau: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def admm_bpdn(
    A: np.ndarray,
    y: np.ndarray,
    lam: float,
    rho: float = 1.0,
    iters: int = 500,
    tol: float = 1e-6,
    adapt_rho: bool = False,
    track_objective: bool = False,
) -> SparseCode:
    """Basis pursuit denoising min 0.5 ||A a - y||^2 + lam ||a||_1 via ADMM.

    Splitting a = z with scaled dual u; the a-update solves a cached
    normal-equation factorization (matrix inversion lemma when m < s), the
    z-update is soft thresholding. Returns when both the primal residual
    ||a - z|| and dual residual ||rho (z - z_old)|| fall below ``tol``, else
    after ``iters`` sweeps with ``converged=False`` on the best iterate.

    ``adapt_rho`` enables standard residual balancing (rho doubles/halves
    when one residual dominates the other by 10x).
    """
    if lam < 0 or rho <= 0:
        raise ValueError("need lam >= 0 and rho > 0")
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, s = A.shape
    Aty = A.T @ y

    def factorize(rho_now: float):
        if m >= s:
            return scipy.linalg.cho_factor(A.T @ A + rho_now * np.eye(s))
        return scipy.linalg.cho_factor(A @ A.T + rho_now * np.eye(m))

    def solve(q: np.ndarray, fact, rho_now: float) -> np.ndarray:
        if m >= s:
            return scipy.linalg.cho_solve(fact, q)
        # (A^T A + rho I)^-1 q = q/rho - A^T (A A^T + rho I)^-1 A q / rho
        return q / rho_now - A.T @ scipy.linalg.cho_solve(fact, A @ q) / rho_now

    fact = factorize(rho)
    a = np.zeros(s)
    z = np.zeros(s)
    u = np.zeros(s)
    history: list[float] = []
    converged = False
    for _ in range(iters):
        a = solve(Aty + rho * (z - u), fact, rho)
        z_old = z
        z = _soft_threshold(a + u, lam / rho)
        u = u + a - z
        if track_objective:
            r = A @ z - y
            history.append(0.5 * float(r @ r) + lam * float(np.abs(z).sum()))
        r_primal = np.linalg.norm(a - z)
        r_dual = rho * np.linalg.norm(z - z_old)
        if r_primal < tol and r_dual < tol:
            converged = True
            break
        if adapt_rho:
            if r_primal > 10 * r_dual:
                rho *= 2.0
                u /= 2.0
                fact = factorize(rho)
            elif r_dual > 10 * r_primal:
                rho /= 2.0
                u *= 2.0
                fact = factorize(rho)
    support = np.flatnonzero(z)
    return SparseCode(
        coeffs=z,
        support=support,
        converged=converged,
        objective_history=history,
    )


def _omp_code_matrix(D: np.ndarray, X: np.ndarray, nnz: int) -> np.ndarray:
    """OMP-code every column of X against D; returns codes [s, n]."""
    s = D.shape[1]
    codes = np.zeros((s, X.shape[1]))
    for j in range(X.shape[1]):
        codes[:, j] = omp(D, X[:, j], max_nnz=nnz).coeffs
    return codes


def ksvd(
    patches: np.ndarray,
    s: int,
    iters: int = 10,
    seed: int = 0,
    nnz: int | None = None,
) -> tuple[Dictionary, list[float]]:
    """K-SVD dictionary learning on patch columns.

    Alternates OMP sparse coding with rank-1 atom/coefficient updates from
    the SVD of each atom's restricted residual. Atoms that no patch uses are
    re-seeded from the currently worst-represented patch. Returns the learned
    dictionary and the per-iteration mean squared training error (which is
    non-increasing up to the dead-atom resets).

    Args:
        patches: training patches [k, n], n >= s.
        s: number of atoms.
        iters: alternation sweeps.
        seed: init seed (atoms start as random training patches).
        nnz: per-patch sparsity for the coding step (default max(1, k // 10)).
    """
    X = np.asarray(patches, dtype=np.float64)
    k, n = X.shape
    if n < s:
        raise ValueError(f"need at least as many patches ({n}) as atoms ({s})")
    if nnz is None:
        nnz = max(1, k // 10)
    rng = np.random.default_rng(seed)
    init_idx = rng.choice(n, size=s, replace=False)
    D = _normalize_columns(X[:, init_idx] + 1e-8 * rng.standard_normal((k, s)))

    errors: list[float] = []
    for _ in range(iters):
        codes = _omp_code_matrix(D, X, nnz)
        resid_all = X - D @ codes
        for atom in range(s):
            used = np.flatnonzero(np.abs(codes[atom]) > 1e-12)
            if used.size == 0:
                worst = int(np.argmax((resid_all**2).sum(axis=0)))
                D[:, atom] = _normalize_columns(X[:, [worst]])[:, 0]
                continue
            # residual with atom k removed, restricted to patches using it
            E = X[:, used] - D @ codes[:, used] + np.outer(D[:, atom], codes[atom, used])
            U, sv, Vt = np.linalg.svd(E, full_matrices=False)
            D[:, atom] = U[:, 0]
            codes[atom, used] = sv[0] * Vt[0]
            resid_all[:, used] = E - np.outer(D[:, atom], codes[atom, used])
        errors.append(float((resid_all**2).mean()))
    return Dictionary(_normalize_columns(D)), errors


def online_dict_learn(
    patch_stream,
    D0: Dictionary,
    steps: int,
    lam: float,
    bpdn_iters: int = 200,
) -> Dictionary:
    """Online dictionary learning over a stream of patch mini-batches.

    Per mini-batch: BPDN-code the patches against the current dictionary,
    fold the codes into the accumulated sufficient statistics
    (sum a a^T, sum x a^T), then sweep block-coordinate atom updates and
    re-normalize every column to unit norm.

    ``patch_stream`` yields arrays [k, b]; ``steps`` batches are consumed
    (zero steps returns ``D0`` unchanged).
    """
    if steps == 0:
        return D0
    D = D0.atoms.copy()
    k, s = D.shape
    stat_a = np.zeros((s, s))
    stat_b = np.zeros((k, s))
    it = iter(patch_stream)
    for _ in range(steps):
        try:
            batch = np.asarray(next(it), dtype=np.float64)
        except StopIteration:
            break
        if batch.ndim == 1:
            batch = batch[:, None]
        codes = np.column_stack(
            [admm_bpdn(D, batch[:, j], lam=lam, iters=bpdn_iters).coeffs for j in range(batch.shape[1])]
        )
        stat_a += codes @ codes.T
        stat_b += batch @ codes.T
        for atom in range(s):
            if stat_a[atom, atom] < 1e-12:
                continue
            u = D[:, atom] + (stat_b[:, atom] - D @ stat_a[:, atom]) / stat_a[atom, atom]
            norm = np.linalg.norm(u)
            if norm > 1e-12:
                D[:, atom] = u / norm
    return Dictionary(D)


def default_atom_count(patch_dim: int, overcompleteness: int = 4) -> int:
    return overcompleteness * patch_dim


def mutual_coherence(A: np.ndarray) -> float:
    """Largest absolute normalized inner product between distinct columns."""
    An = _normalize_columns(np.asarray(A, dtype=np.float64))
    gram = np.abs(An.T @ An)
    np.fill_diagonal(gram, 0.0)
    return float(gram.max())


def recon_sparse(
    image: CodedImage,
    phi: SensingTensor,
    D: Dictionary,
    solver: str = "admm",
    patch: int = 8,
    overlap: int = 2,
    lam: float = 0.001,
    max_nnz: int = 12,
    admm_iters: int = 500,
    return_failures: bool = False,
):
    """Patchwise sparse reconstruction of the light field from a coded image.

    For each patch location the effective system A = matrix_form(phi_patch) @ D
    is solved for a sparse code ``alpha`` ('omp' or 'admm'), the patch estimate
    is D @ alpha, and overlapping patches (grid stride = patch - overlap) are
    blended by averaging. A patch whose solve fails is filled with zeros and
    its grid index recorded.

    The effective columns carry the attenuation, so their norms are tiny and
    uneven; both solvers therefore work on the column-normalized system. For
    ADMM, ``lam`` is relative: the per-patch threshold is
    ``lam * max|A_n^T y|`` on the normalized system.
    """
    if solver not in ("omp", "admm"):
        raise ValueError(f"unknown solver {solver!r}")
    nv = phi.nv
    expected_k = patch * patch * nv * nv * 3
    if D.patch_dim != expected_k:
        raise ValueError(
            f"dictionary patch dimension {D.patch_dim} does not match "
            f"patch={patch}, nv={nv} (expected {expected_k})"
        )
    stride = max(1, patch - overlap)
    specs = patch_grid(image.height, image.width, patch, stride)
    pieces: list[tuple[LightField, object]] = []
    failures: list[int] = []
    for idx, spec in enumerate(specs):
        phi_p = extract_patch(phi, spec)
        y = extract_patch(image, spec).data.reshape(-1).astype(np.float64)
        A = matrix_form(phi_p) @ D.atoms
        try:
            if solver == "omp":
                code = omp(A, y, max_nnz=max_nnz)
                est = D.atoms @ code.coeffs
            else:
                norms = np.linalg.norm(A, axis=0)
                norms[norms == 0] = 1.0
                An = A / norms
                lam_abs = lam * float(np.abs(An.T @ y).max())
                code = admm_bpdn(An, y, lam=lam_abs, iters=admm_iters)
                est = D.atoms @ (code.coeffs / norms)
        except (SparseSolveError, np.linalg.LinAlgError) as exc:
            log.warning("patch %d solve failed: %s", idx, exc)
            failures.append(idx)
            est = np.zeros(expected_k)
        est = np.clip(est, 0.0, 1.0).reshape(patch, patch, nv, nv, 3)
        pieces.append((LightField(est), spec))
    lf = stitch_patches(pieces, (image.height, image.width))
    if return_failures:
        return lf, failures
    return lf
