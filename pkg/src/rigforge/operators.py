"""Discrete Laplace-Beltrami machinery and spectral heat diffusion.

The stiffness matrix uses the classic cotangent weights summed per face, the
mass matrix is barycentric-lumped (one third of incident face area), and heat
diffusion is evaluated exactly in a truncated generalized eigenbasis as
``phi * exp(-lambda * t) * phi^T * M * u``. A single implicit backward-Euler
step ``(M + t L)^{-1} M u`` is available behind the same interface for
cross-validation at full basis size.

Degenerate geometry never produces NaNs: cotangents are clamped and lumped
masses floored (see COT_CLAMP / MASS_FLOOR_REL).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ChecksumMismatch, ShapeMismatch, SolverFailure, VersionMismatch
from .mesh import TriMesh, face_areas_normals, mean_edge_length

COT_CLAMP = 1e4
MASS_FLOOR_REL = 1e-10  # floor = MASS_FLOOR_REL * total surface area
DEFAULT_K = 128


def cotan_laplacian(mesh: TriMesh) -> sp.csr_matrix:
    """Cotangent stiffness matrix L (positive semidefinite, row sums zero).

    L_ij = -1/2 (cot a_ij + cot b_ij) for each edge ij, accumulated per face;
    diagonal entries make rows sum to zero. Cotangents of degenerate corners
    are clamped to +-COT_CLAMP.
    """
    v, f = mesh.vertices, mesh.faces
    n = len(v)
    rows, cols, vals = [], [], []
    # corner k of a face is opposite edge (i, j)
    for k, (i, j) in enumerate([(1, 2), (2, 0), (0, 1)]):
        e1 = v[f[:, i]] - v[f[:, k]]
        e2 = v[f[:, j]] - v[f[:, k]]
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        dot = (e1 * e2).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = np.where(cross > 0, dot / np.where(cross > 0, cross, 1.0), 0.0)
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        w = 0.5 * cot
        rows += [f[:, i], f[:, j], f[:, i], f[:, j]]
        cols += [f[:, j], f[:, i], f[:, i], f[:, j]]
        vals += [-w, -w, w, w]
    L = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    L.sum_duplicates()
    return L


def lumped_mass(mesh: TriMesh) -> np.ndarray:
    """Barycentric lumped mass: one third of incident face area per vertex.

    Entries are floored at MASS_FLOOR_REL times the total area so isolated
    vertices and degenerate fans stay strictly positive.
    """
    areas, _ = face_areas_normals(mesh.vertices, mesh.faces)
    m = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(m, mesh.faces[:, k], areas / 3.0)
    total = areas.sum()
    floor = MASS_FLOOR_REL * (total if total > 0 else 1.0)
    return np.maximum(m, floor)


@dataclass(frozen=True)
class Eigenbasis:
    """Truncated generalized eigenpairs of L phi = lambda M phi.

    evals : (k,) ascending, >= -1e-8
    evecs : (n, k), M-orthonormal, first significant coefficient positive
    """

    evals: np.ndarray
    evecs: np.ndarray

    @property
    def k(self) -> int:
        return len(self.evals)

    @property
    def n(self) -> int:
        return self.evecs.shape[0]


def _fix_signs(evecs: np.ndarray) -> np.ndarray:
    out = evecs.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        thresh = 1e-12 * max(np.abs(col).max(), 1e-300)
        nz = np.nonzero(np.abs(col) > thresh)[0]
        if len(nz) and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def eigenbasis(L: sp.spmatrix, M: np.ndarray, k: int) -> Eigenbasis:
    """Smallest-k generalized eigenpairs, M-orthonormal, ascending.

    Uses shift-invert Lanczos with a fixed start vector; falls back to a dense
    solve for k close to n where ARPACK cannot operate.
    """
    n = L.shape[0]
    if k > n:
        raise ShapeMismatch(f"k={k} exceeds n={n}")
    Mdiag = np.asarray(M, dtype=np.float64)
    if k >= n - 1 or n < 64:
        evals, evecs = _dense_eigh(L, Mdiag, k)
    else:
        Mmat = sp.diags(Mdiag)
        v0 = np.random.default_rng(0).standard_normal(n)
        scale = abs(L.diagonal()).max() + 1.0
        try:
            evals, evecs = spla.eigsh(
                L.tocsc(), k=k, M=Mmat.tocsc(), sigma=-1e-8 * scale, which="LM", v0=v0
            )
        except (spla.ArpackNoConvergence, RuntimeError) as exc:
            raise SolverFailure(f"eigensolver failed: {exc}") from exc
    order = np.argsort(evals)
    evals = evals[order]
    evecs = evecs[:, order]
    # kill numerically negative zeros from shift-invert round-off
    evals = np.where(np.abs(evals) < 1e-10, np.maximum(evals, 0.0), evals)
    return Eigenbasis(evals=evals, evecs=_fix_signs(evecs))


def _dense_eigh(L: sp.spmatrix, Mdiag: np.ndarray, k: int):
    import scipy.linalg

    A = np.asarray(L.todense())
    A = 0.5 * (A + A.T)
    evals, evecs = scipy.linalg.eigh(A, np.diag(Mdiag))
    return evals[:k], evecs[:, :k]


class DiffusionTimes:
    """Per-channel learnable diffusion time, softplus-parameterized.

    The stored raw value maps to an always-nonnegative effective time via
    softplus; init_for_mesh seeds the effective time near the squared mean
    edge length so diffusion starts at a geometry-aware scale.
    """

    def __init__(self, raw: np.ndarray):
        self.raw = np.asarray(raw, dtype=np.float64)

    @staticmethod
    def init_for_mesh(mesh: TriMesh, channels: int) -> "DiffusionTimes":
        t0 = max(mean_edge_length(mesh) ** 2, 1e-8)
        return DiffusionTimes.from_times(np.full(channels, t0))

    @staticmethod
    def from_times(times: np.ndarray) -> "DiffusionTimes":
        t = np.asarray(times, dtype=np.float64)
        # inverse softplus, stable for both tails
        raw = np.where(t > 30, t, np.log(np.expm1(np.maximum(t, 1e-12))))
        return DiffusionTimes(raw)

    def times(self) -> np.ndarray:
        return softplus(self.raw)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def spectral_diffuse(
    u: np.ndarray, times: np.ndarray, basis: Eigenbasis, M: np.ndarray
) -> np.ndarray:
    """Exact heat flow of per-vertex features in the truncated basis.

    u : (n, c); times : (c,) nonnegative per-channel times.
    Returns phi exp(-lambda t_c) phi^T M u per channel.
    """
    u = np.asarray(u, dtype=np.float64)
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if u.ndim != 2 or u.shape[0] != basis.n or u.shape[1] != len(t):
        raise ShapeMismatch(
            f"features {u.shape} incompatible with basis n={basis.n}, channels={len(t)}"
        )
    coef = basis.evecs.T @ (M[:, None] * u)  # (k, c)
    decay = np.exp(-np.outer(basis.evals, t))  # (k, c)
    return basis.evecs @ (decay * coef)


def spectral_diffuse_vjp(
    u: np.ndarray,
    times: np.ndarray,
    basis: Eigenbasis,
    M: np.ndarray,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian products of spectral_diffuse w.r.t. u and times."""
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    decay = np.exp(-np.outer(basis.evals, t))  # (k, c)
    g_coef = basis.evecs.T @ grad_out  # (k, c)
    grad_u = M[:, None] * (basis.evecs @ (decay * g_coef))
    coef = basis.evecs.T @ (M[:, None] * u)
    grad_t = -np.sum(basis.evals[:, None] * decay * coef * g_coef, axis=0)
    return grad_u, grad_t


def implicit_diffuse(
    u: np.ndarray, times: np.ndarray, L: sp.spmatrix, M: np.ndarray
) -> np.ndarray:
    """Single backward-Euler step (M + t L)^{-1} M u, per channel."""
    u = np.asarray(u, dtype=np.float64)
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if u.shape[1] != len(t):
        raise ShapeMismatch("channel count does not match times length")
    Mmat = sp.diags(M)
    out = np.empty_like(u)
    for c, tc in enumerate(t):
        A = (Mmat + tc * L).tocsc()
        out[:, c] = spla.spsolve(A, M * u[:, c])
    return out


def implicit_filter_diffuse(
    u: np.ndarray, times: np.ndarray, basis: Eigenbasis, M: np.ndarray
) -> np.ndarray:
    """Backward-Euler transfer function 1/(1 + lambda t) in the basis."""
    u = np.asarray(u, dtype=np.float64)
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    coef = basis.evecs.T @ (M[:, None] * u)
    filt = 1.0 / (1.0 + np.outer(basis.evals, t))
    return basis.evecs @ (filt * coef)


@dataclass(frozen=True)
class SurfaceOperators:
    """Everything the network needs per mesh: L, M, and the truncated basis."""

    L: sp.csr_matrix
    M: np.ndarray
    basis: Eigenbasis
    mean_edge: float

    @property
    def n(self) -> int:
        return len(self.M)

    @property
    def k(self) -> int:
        return self.basis.k


def build_operators(mesh: TriMesh, k: int | None = None,
                    per_component: bool = True) -> SurfaceOperators:
    """Assemble L, M, and a truncated eigenbasis for a mesh.

    With ``per_component`` (the default) the k modes are allocated across
    connected components in proportion to vertex count (minimum 4 each), and
    solved block-wise. Small disconnected components such as eyeballs have
    high-frequency spectra; a globally-smallest-k basis starves them down to
    near-constant features, which makes their deformations inexpressible.
    Per-block modes are exact global eigenpairs since L and M are
    block-diagonal across components.
    """
    L = cotan_laplacian(mesh)
    M = lumped_mass(mesh)
    if k is None:
        k = min(DEFAULT_K, mesh.n_vertices - 1)
    n_comp = mesh.n_components
    if not per_component or n_comp == 1:
        basis = eigenbasis(L, M, k)
        return SurfaceOperators(L=L, M=M, basis=basis, mean_edge=mean_edge_length(mesh))
    labels = mesh.component_id
    n = mesh.n_vertices
    counts = np.bincount(labels, minlength=n_comp)
    alloc = np.maximum(np.round(k * counts / n).astype(int), np.minimum(4, counts - 1))
    alloc = np.minimum(alloc, counts - 1)
    # trim overshoot from the largest allocations
    while alloc.sum() > k:
        alloc[np.argmax(alloc)] -= 1
    evals_parts, evecs_parts, owners = [], [], []
    for c in range(n_comp):
        idx = np.nonzero(labels == c)[0]
        sub = eigenbasis(L[idx][:, idx].tocsr(), M[idx], int(alloc[c]))
        evals_parts.append(sub.evals)
        evecs_parts.append(sub.evecs)
        owners.append(idx)
    evals = np.concatenate(evals_parts)
    order = np.argsort(evals, kind="stable")
    evecs = np.zeros((n, len(evals)))
    col = 0
    for idx, part in zip(owners, evecs_parts):
        evecs[idx, col : col + part.shape[1]] = part
        col += part.shape[1]
    basis = Eigenbasis(evals=evals[order], evecs=evecs[:, order])
    return SurfaceOperators(L=L, M=M, basis=basis, mean_edge=mean_edge_length(mesh))


# --- operator cache file -----------------------------------------------------
# layout (little-endian):
#   magic "RFOP" | u32 version | u64 n | u64 k | u64 nnz | f64 mean_edge
#   f64 evals[k] | f64 evecs[n*k] | f64 M[n]
#   i64 indptr[n+1] | i64 indices[nnz] | f64 data[nnz]

_RFOP_MAGIC = b"RFOP"
_RFOP_VERSION = 1


def save_operators(ops: SurfaceOperators, path: str | Path) -> None:
    L = ops.L.tocsr()
    L.sort_indices()
    n, k = ops.n, ops.k
    header = _RFOP_MAGIC + struct.pack(
        "<IQQQd", _RFOP_VERSION, n, k, L.nnz, ops.mean_edge
    )
    parts = [
        header,
        ops.basis.evals.astype("<f8").tobytes(),
        ops.basis.evecs.astype("<f8").tobytes(),
        ops.M.astype("<f8").tobytes(),
        L.indptr.astype("<i8").tobytes(),
        L.indices.astype("<i8").tobytes(),
        L.data.astype("<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_operators(path: str | Path) -> SurfaceOperators:
    blob = Path(path).read_bytes()
    if blob[:4] != _RFOP_MAGIC:
        raise ChecksumMismatch(f"{path}: bad magic")
    version, n, k, nnz, mean_edge = struct.unpack("<IQQQd", blob[4:40])
    if version != _RFOP_VERSION:
        raise VersionMismatch(f"{path}: version {version}")
    expected = 40 + 8 * (k + n * k + n + (n + 1) + nnz + nnz)
    if len(blob) != expected:
        raise ChecksumMismatch(f"{path}: truncated ({len(blob)} != {expected})")
    off = 40

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()

    evals = take(k, "<f8")
    evecs = take(n * k, "<f8").reshape(n, k)
    M = take(n, "<f8")
    indptr = take(n + 1, "<i8")
    indices = take(nnz, "<i8")
    data = take(nnz, "<f8")
    L = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    return SurfaceOperators(
        L=L, M=M, basis=Eigenbasis(evals=evals, evecs=evecs), mean_edge=mean_edge
    )
