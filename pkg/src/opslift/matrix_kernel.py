"""Complex Hermitian linear algebra on small dense matrices.

Everything downstream (cones at matrix levels, completely positive maps,
Gram certificates) reduces to a handful of primitives implemented here:
PSD tests, PSD square roots, rank-1 decompositions, tensor/congruence
products, and the real-symmetric embedding that lets one real eigensolver
(and one real SDP kernel) serve Hermitian data.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .errors import NotPsdError, ShapeMismatchError

DEFAULT_TOL = 1e-8

# Relative asymmetry above which a would-be Hermitian input is rejected
# instead of silently symmetrized.
_ASYM_LIMIT = 1e-6


class HermMatrix:
    """An immutable complex Hermitian matrix.

    The constructor symmetrizes ``(H + H*)/2`` and then checks that the
    correction was within round-off; larger asymmetry is a caller bug and
    raises.  Entries must be finite.
    """

    __slots__ = ("mat",)

    def __init__(self, entries, *, _trusted: bool = False):
        a = np.array(entries, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeMismatchError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a.view(float))):
            raise ValueError("matrix entries must be finite")
        if not _trusted:
            asym = np.linalg.norm(a - a.conj().T)
            if asym > _ASYM_LIMIT * max(1.0, np.linalg.norm(a)):
                raise ValueError(f"matrix is not Hermitian (asymmetry {asym:.3e})")
            a = (a + a.conj().T) / 2
        a.setflags(write=False)
        object.__setattr__(self, "mat", a)

    def __setattr__(self, name, value):
        raise AttributeError("HermMatrix is immutable")

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def __repr__(self) -> str:
        return f"HermMatrix(dim={self.dim})"

    def __add__(self, other: "HermMatrix") -> "HermMatrix":
        return HermMatrix(self.mat + as_herm(other).mat, _trusted=True)

    def __sub__(self, other: "HermMatrix") -> "HermMatrix":
        return HermMatrix(self.mat - as_herm(other).mat, _trusted=True)

    def __mul__(self, scalar: float) -> "HermMatrix":
        return HermMatrix(self.mat * float(scalar), _trusted=True)

    __rmul__ = __mul__

    def __neg__(self) -> "HermMatrix":
        return HermMatrix(-self.mat, _trusted=True)

    def norm(self) -> float:
        """Frobenius norm."""
        return float(np.linalg.norm(self.mat))

    def trace(self) -> float:
        return float(np.trace(self.mat).real)

    def allclose(self, other: "HermMatrix", tol: float = 1e-12) -> bool:
        o = as_herm(other)
        return np.allclose(self.mat, o.mat, atol=tol, rtol=0.0)

    def to_json(self) -> dict:
        out = {"dim": self.dim, "re": self.mat.real.tolist()}
        if np.any(self.mat.imag != 0.0):
            out["im"] = self.mat.imag.tolist()
        return out

    @staticmethod
    def from_json(data: dict) -> "HermMatrix":
        dim = int(data["dim"])
        re = np.asarray(data["re"], dtype=float).reshape(dim, dim)
        im = data.get("im")
        if im is None:
            return HermMatrix(re)
        return HermMatrix(re + 1j * np.asarray(im, dtype=float).reshape(dim, dim))


def as_herm(h) -> HermMatrix:
    """Coerce an array-like into a HermMatrix (no copy if already one)."""
    if isinstance(h, HermMatrix):
        return h
    return HermMatrix(h)


def identity(dim: int) -> HermMatrix:
    return HermMatrix(np.eye(dim), _trusted=True)


def zero(dim: int) -> HermMatrix:
    return HermMatrix(np.zeros((dim, dim)), _trusted=True)


# ---------------------------------------------------------------------------
# Trace-orthonormal Hermitian basis
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def herm_basis(dim: int) -> tuple[HermMatrix, ...]:
    """The canonical trace-orthonormal basis of the Hermitian matrices.

    Ordering: E_ii for i = 0..dim-1, then for each pair i < j (lexicographic)
    the real element (E_ij + E_ji)/sqrt(2) followed by the imaginary element
    (i E_ij - i E_ji)/sqrt(2).  Coefficient extraction against this basis is
    a plain trace inner product.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    out = []
    for i in range(dim):
        e = np.zeros((dim, dim), dtype=complex)
        e[i, i] = 1.0
        out.append(HermMatrix(e, _trusted=True))
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    for i in range(dim):
        for j in range(i + 1, dim):
            e = np.zeros((dim, dim), dtype=complex)
            e[i, j] = inv_sqrt2
            e[j, i] = inv_sqrt2
            out.append(HermMatrix(e, _trusted=True))
            e = np.zeros((dim, dim), dtype=complex)
            e[i, j] = 1j * inv_sqrt2
            e[j, i] = -1j * inv_sqrt2
            out.append(HermMatrix(e, _trusted=True))
    return tuple(out)


def herm_coords(h) -> np.ndarray:
    """Real coordinates of a Hermitian matrix in the canonical basis."""
    m = as_herm(h).mat
    dim = m.shape[0]
    coords = np.empty(dim * dim)
    coords[:dim] = m.diagonal().real
    sqrt2 = np.sqrt(2.0)
    k = dim
    for i in range(dim):
        for j in range(i + 1, dim):
            coords[k] = sqrt2 * m[i, j].real
            coords[k + 1] = -sqrt2 * m[i, j].imag
            k += 2
    return coords


def herm_from_coords(coords: np.ndarray, dim: int) -> HermMatrix:
    """Inverse of :func:`herm_coords`."""
    coords = np.asarray(coords, dtype=float)
    if coords.shape != (dim * dim,):
        raise ShapeMismatchError(f"expected {dim * dim} coordinates, got {coords.shape}")
    m = np.zeros((dim, dim), dtype=complex)
    np.fill_diagonal(m, coords[:dim])
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    k = dim
    for i in range(dim):
        for j in range(i + 1, dim):
            m[i, j] = (coords[k] - 1j * coords[k + 1]) * inv_sqrt2
            m[j, i] = (coords[k] + 1j * coords[k + 1]) * inv_sqrt2
            k += 2
    return HermMatrix(m, _trusted=True)


# ---------------------------------------------------------------------------
# Real-symmetric embedding
# ---------------------------------------------------------------------------

def realify(h) -> np.ndarray:
    """Embed H = A + iB as the real symmetric block matrix [[A, -B], [B, A]].

    The embedding is a PSD-order isomorphism onto its image; eigenvalues of
    H appear with doubled multiplicity.
    """
    m = as_herm(h).mat
    a, b = m.real, m.imag
    return np.block([[a, -b], [b, a]])


def herm_from_realified(y: np.ndarray) -> HermMatrix:
    """Project a real symmetric 2s x 2s matrix back to Hermitian s x s.

    For y = realify(H) this recovers H exactly; in general it averages away
    the component that no Hermitian functional can see.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[0] != y.shape[1] or y.shape[0] % 2:
        raise ShapeMismatchError(f"expected an even square matrix, got {y.shape}")
    s = y.shape[0] // 2
    a = (y[:s, :s] + y[s:, s:]) / 2
    b = (y[s:, :s] - y[:s, s:]) / 2
    return HermMatrix(a + 1j * b)


def eigh_herm(h) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian matrix through the real kernel.

    Eigenvalues ascending.  The realified matrix has every eigenvalue twice;
    complex eigenvectors are recovered one per pair by clustering the doubled
    spectrum and extracting an orthonormal complex basis of each cluster.
    Returns ``(w, V)`` with columns V[:, k] satisfying H V[:,k] = w[k] V[:,k]
    up to cluster width.
    """
    hm = as_herm(h)
    s = hm.dim
    w2, v2 = np.linalg.eigh(realify(hm))
    scale = max(1.0, float(np.max(np.abs(w2))))
    gap = 256 * np.finfo(float).eps * scale * max(1, s)

    # Cluster the doubled spectrum; force even cluster sizes.
    clusters: list[list[int]] = [[0]]
    for k in range(1, 2 * s):
        if w2[k] - w2[k - 1] <= gap:
            clusters[-1].append(k)
        else:
            clusters.append([k])
    merged: list[list[int]] = []
    for c in clusters:
        if merged and len(merged[-1]) % 2 == 1:
            merged[-1].extend(c)
        else:
            merged.append(list(c))
    if len(merged[-1]) % 2 == 1:  # cannot happen for exact input; be safe
        if len(merged) > 1:
            merged[-2].extend(merged.pop())
        else:
            raise np.linalg.LinAlgError("could not pair the realified spectrum")

    vals = np.empty(s)
    vecs = np.empty((s, s), dtype=complex)
    pos = 0
    for c in merged:
        k = len(c) // 2
        cand = v2[:s, c] + 1j * v2[s:, c]  # each real pair maps to one direction
        u, sv, _ = np.linalg.svd(cand, full_matrices=False)
        vals[pos:pos + k] = float(np.mean(w2[c]))
        vecs[:, pos:pos + k] = u[:, :k]
        pos += k
    return vals, vecs


def min_eig(h) -> float:
    """Smallest eigenvalue, via the real-symmetric embedding."""
    return float(np.linalg.eigvalsh(realify(h))[0])


# ---------------------------------------------------------------------------
# PSD primitives
# ---------------------------------------------------------------------------

class PsdCheck(NamedTuple):
    is_psd: bool
    min_eig: float


def psd_check(h, tol: float = DEFAULT_TOL) -> PsdCheck:
    """Test positive semidefiniteness: PSD iff min eigenvalue >= -tol."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    me = min_eig(h)
    return PsdCheck(me >= -tol, me)


def psd_sqrt(h, tol: float = DEFAULT_TOL) -> HermMatrix:
    """The positive semidefinite square root of a PSD matrix.

    Eigenvalues in [-tol, 0) are clipped to 0; below -tol raises.
    """
    w, v = eigh_herm(h)
    if w[0] < -tol:
        raise NotPsdError(f"matrix is not PSD (min eigenvalue {w[0]:.3e})", w[0])
    w = np.maximum(w, 0.0)
    q = (v * np.sqrt(w)) @ v.conj().T
    return HermMatrix(q)


def rank1_decompose(p, tol: float = DEFAULT_TOL) -> list[np.ndarray]:
    """Write a PSD matrix as a sum of rank-1 terms q q*.

    Returns one vector per eigenvalue above tol, so the count equals the
    numerical rank; the vectors are scaled eigenvectors.
    """
    w, v = eigh_herm(p)
    if w[0] < -tol:
        raise NotPsdError(f"matrix is not PSD (min eigenvalue {w[0]:.3e})", w[0])
    return [np.sqrt(w[k]) * v[:, k] for k in range(len(w)) if w[k] > tol]


def kron(a, b) -> HermMatrix:
    """Tensor product of Hermitian matrices (Hermitian again)."""
    return HermMatrix(np.kron(as_herm(a).mat, as_herm(b).mat), _trusted=True)


def conjugate(v: np.ndarray, x) -> HermMatrix:
    """The congruence V* X V for a rectangular complex V; preserves PSD."""
    xm = as_herm(x).mat
    v = np.asarray(v, dtype=complex)
    if v.ndim == 1:
        v = v.reshape(-1, 1)
    if v.shape[0] != xm.shape[0]:
        raise ShapeMismatchError(
            f"V has {v.shape[0]} rows but X has dimension {xm.shape[0]}")
    return HermMatrix(v.conj().T @ xm @ v)


def direct_sum(a, b) -> HermMatrix:
    """Block-diagonal sum diag(A, B)."""
    am, bm = as_herm(a).mat, as_herm(b).mat
    out = np.zeros((am.shape[0] + bm.shape[0],) * 2, dtype=complex)
    out[:am.shape[0], :am.shape[0]] = am
    out[am.shape[0]:, am.shape[0]:] = bm
    return HermMatrix(out, _trusted=True)


def random_herm(rng: np.random.Generator, dim: int, scale: float = 1.0) -> HermMatrix:
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return HermMatrix(scale * (g + g.conj().T) / 2, _trusted=True)


def random_psd(rng: np.random.Generator, dim: int, rank: int | None = None,
               scale: float = 1.0) -> HermMatrix:
    r = dim if rank is None else rank
    g = rng.standard_normal((dim, r)) + 1j * rng.standard_normal((dim, r))
    return HermMatrix(scale * (g @ g.conj().T) / r, _trusted=True)


def coeffs_as_herms(mats: Sequence) -> tuple[HermMatrix, ...]:
    """Coerce a sequence of array-likes to HermMatrix values of equal size."""
    out = tuple(as_herm(m) for m in mats)
    if out and any(m.dim != out[0].dim for m in out):
        raise ShapeMismatchError("coefficient matrices must share one size")
    return out
