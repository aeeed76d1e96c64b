"""Greedy sparse coding against a fixed dictionary.

Two routes to the same answer: :func:`omp_encode` is the reference pursuit
(explicit residual, dense least squares per round) and
:func:`batch_encode_columns` is the production path, which precomputes the
atom Gram matrix once and runs every signal in lockstep with a progressively
extended Cholesky factor.  Supports match exactly; coefficients agree to
1e-8.  Ties in the correlation argmax break toward the lowest atom index in
both routes.

A round stops contributing atoms once the residual norm falls to 1e-12 or no
atom correlates with the residual above 1e-12.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dictionary import Dictionary
from .grid import PatchMatrix, as_grid, extract_all_patches, patch_cover_counts, zero_mean_columns

CORR_TOL = 1e-12
RESID_TOL = 1e-12
PIVOT_TOL = 1e-10


class EncodeError(ValueError):
    pass


@dataclass
class SparseVector:
    """Sorted sparse coefficient vector: ``indices`` strictly increasing, < dim."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int32)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise EncodeError("indices/values must be matching 1-D arrays")
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise EncodeError("indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise EncodeError("index out of range")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


@dataclass
class SparseCodeMap:
    """Per-pixel sparse vectors over a grid, stored as padded index/value rows.

    ``indices`` and ``values`` have shape ``(width*height, capacity)``; valid
    entries are sorted ascending and left-packed, padding slots hold index -1
    and value 0.  Row order is row-major over pixels (y outer, x inner).
    """

    width: int
    height: int
    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        n = self.width * self.height
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int32)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.shape[0] != n:
            raise EncodeError(
                f"expected ({n}, cap) index/value arrays, got {self.indices.shape}"
            )

    @classmethod
    def from_raw(cls, width, height, dim, indices, values) -> "SparseCodeMap":
        """Build from arbitrary padded rows: sorts, left-packs, drops zeros."""
        idx = np.asarray(indices, dtype=np.int32)
        val = np.asarray(values, dtype=np.float64)
        if idx.ndim == 1:
            idx = idx[:, None]
            val = val[:, None]
        invalid = (idx < 0) | (val == 0.0)
        key = np.where(invalid, np.iinfo(np.int32).max, idx)
        order = np.argsort(key, axis=1, kind="stable")
        idx = np.take_along_axis(np.where(invalid, -1, idx), order, axis=1)
        val = np.take_along_axis(np.where(invalid, 0.0, val), order, axis=1)
        cap = max(1, int((idx >= 0).sum(axis=1).max(initial=0)))
        return cls(width, height, dim, idx[:, :cap], val[:, :cap])

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseCodeMap":
        dense = np.asarray(dense, dtype=np.float64)
        h, w, dim = dense.shape
        flat = dense.reshape(h * w, dim)
        nnz = np.count_nonzero(flat, axis=1)
        cap = max(1, int(nnz.max(initial=0)))
        idx = np.full((h * w, cap), -1, dtype=np.int32)
        val = np.zeros((h * w, cap))
        rows, cols = np.nonzero(flat)
        slot = np.concatenate([np.arange(c) for c in np.bincount(rows, minlength=h * w)])
        idx[rows, slot] = cols
        val[rows, slot] = flat[rows, cols]
        return cls(w, h, dim, idx, val)

    @property
    def capacity(self) -> int:
        return self.indices.shape[1]

    def nnz_per_cell(self) -> np.ndarray:
        return (self.indices >= 0).sum(axis=1)

    def cell(self, x: int, y: int) -> SparseVector:
        row = y * self.width + x
        valid = self.indices[row] >= 0
        return SparseVector(self.indices[row, valid], self.values[row, valid], self.dim)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.height * self.width, self.dim))
        rows, slots = np.nonzero(self.indices >= 0)
        out[rows, self.indices[rows, slots]] = self.values[rows, slots]
        return out.reshape(self.height, self.width, self.dim)


@dataclass
class GramCache:
    """Atom Gram matrix keyed by the fingerprint of the producing dictionary."""

    gram: np.ndarray
    dict_fingerprint: str

    def __post_init__(self):
        g = np.asarray(self.gram, dtype=np.float64)
        if np.max(np.abs(g - g.T)) > 1e-12:
            raise EncodeError("gram matrix not symmetric")
        if np.max(np.abs(np.diag(g) - 1.0)) > 1e-8:
            raise EncodeError("gram diagonal deviates from 1")
        self.gram = g


def build_gram_cache(D: Dictionary) -> GramCache:
    g = D.atoms.T @ D.atoms
    return GramCache(0.5 * (g + g.T), D.fingerprint())


def omp_encode(x: np.ndarray, D: Dictionary) -> SparseVector:
    """Reference orthogonal matching pursuit for a single patch column.

    Each round selects the atom with maximal absolute correlation against the
    current residual, then re-solves least squares on the whole support.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != D.geometry.dim:
        raise EncodeError(f"signal length {x.size} != patch dim {D.geometry.dim}")
    support: list[int] = []
    coef = np.zeros(0)
    residual = x
    for _ in range(D.sparsity):
        corr = D.atoms.T @ residual
        lam = int(np.argmax(np.abs(corr)))
        if abs(corr[lam]) <= CORR_TOL:
            break
        support.append(lam)
        coef, *_ = np.linalg.lstsq(D.atoms[:, support], x, rcond=None)
        residual = x - D.atoms[:, support] @ coef
        if np.linalg.norm(residual) <= RESID_TOL:
            break
    order = np.argsort(support)
    idx = np.asarray(support, dtype=np.int32)[order]
    val = coef[order] if len(support) else np.zeros(0)
    keep = val != 0.0
    return SparseVector(idx[keep], val[keep], D.atom_count)


def batch_encode_columns(
    X: np.ndarray,
    atoms: np.ndarray,
    sparsity: int,
    gram: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lockstep batch OMP over the columns of ``X`` using the atom Gram matrix.

    Returns ``(indices, values)`` of shape ``(n, sparsity)`` in selection
    order, padded with -1.  Per signal the selected support and (to 1e-8) the
    coefficients match :func:`omp_encode`; the Gram matrix is computed once
    and never per signal.

    The Cholesky factor of each signal's support Gram is extended one row per
    round; if its pivot drops below 1e-10 (near-dependent support) that signal
    falls back to a direct normal-equation solve for the remaining rounds.
    """
    X = np.asarray(X, dtype=np.float64)
    dim, n = X.shape
    L = atoms.shape[1]
    K = int(sparsity)
    G = gram if gram is not None else atoms.T @ atoms
    alpha0 = X.T @ atoms  # (n, L)
    xsq = np.einsum("dn,dn->n", X, X)

    sup = np.full((n, K), -1, dtype=np.int32)
    gamma = np.zeros((n, K))
    Lfac = np.zeros((n, K, K))
    alpha = alpha0.copy()
    active = np.ones(n, dtype=bool)
    broken = np.zeros(n, dtype=bool)

    for k in range(K):
        if not active.any():
            break
        amag = np.abs(alpha)
        amag[~active] = -1.0
        lam = np.argmax(amag, axis=1)
        active &= amag[np.arange(n), lam] > CORR_TOL
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        lam_a = lam[act]
        if k == 0:
            Lfac[act, 0, 0] = np.sqrt(G[lam_a, lam_a])
        else:
            b = G[sup[act, :k], lam_a[:, None]]
            w = np.zeros_like(b)
            for i in range(k):
                acc = np.einsum("nj,nj->n", Lfac[act, i, :i], w[:, :i]) if i else 0.0
                w[:, i] = (b[:, i] - acc) / Lfac[act, i, i]
            piv2 = G[lam_a, lam_a] - np.einsum("nj,nj->n", w, w)
            bad = piv2 <= PIVOT_TOL
            broken[act[bad]] = True
            Lfac[act, k, :k] = w
            Lfac[act, k, k] = np.sqrt(np.where(bad, 1.0, piv2))
        sup[act, k] = lam_a

        a0s = np.take_along_axis(alpha0[act], sup[act, :k + 1], axis=1)
        m = k + 1
        y = np.zeros((act.size, m))
        for i in range(m):
            acc = np.einsum("nj,nj->n", Lfac[act, i, :i], y[:, :i]) if i else 0.0
            y[:, i] = (a0s[:, i] - acc) / Lfac[act, i, i]
        g = np.zeros((act.size, m))
        for i in range(m - 1, -1, -1):
            acc = (
                np.einsum("nj,nj->n", Lfac[act][:, i + 1:m, i], g[:, i + 1:m])
                if i < m - 1
                else 0.0
            )
            g[:, i] = (y[:, i] - acc) / Lfac[act, i, i]
        for pos in np.flatnonzero(broken[act]):
            s = sup[act[pos], :m]
            g[pos], *_ = np.linalg.lstsq(G[np.ix_(s, s)], alpha0[act[pos], s], rcond=None)
        gamma[act, :m] = g

        beta = np.zeros((act.size, L))
        for j in range(m):
            beta += g[:, j, None] * G[sup[act, j]]
        alpha[act] = alpha0[act] - beta
        eps = xsq[act] - np.einsum("nk,nk->n", g, a0s)
        active[act[eps <= RESID_TOL * RESID_TOL]] = False

    gamma[sup < 0] = 0.0
    return sup, gamma


def batch_omp_encode(X: PatchMatrix, D: Dictionary, cache: GramCache) -> list[SparseVector]:
    """Encode every column of a patch matrix; one sparse vector per column."""
    if cache.dict_fingerprint != D.fingerprint():
        raise EncodeError("stale gram cache: fingerprint does not match dictionary")
    if X.geometry.dim != D.geometry.dim:
        raise EncodeError("patch geometry does not match dictionary")
    idx, val = batch_encode_columns(X.columns, D.atoms, D.sparsity, gram=cache.gram)
    out = []
    for row_i, row_v in zip(idx, val):
        valid = (row_i >= 0) & (row_v != 0.0)
        order = np.argsort(row_i[valid])
        out.append(SparseVector(row_i[valid][order], row_v[valid][order], D.atom_count))
    return out


def encode_image(img: np.ndarray, D: Dictionary, cache: GramCache | None = None) -> SparseCodeMap:
    """Sparse-code the centered patch of every pixel of ``img``.

    Patches are per-channel mean-removed first when the dictionary was
    trained that way; border patches replicate edge pixels.
    """
    img = as_grid(img)
    if img.shape[2] != D.geometry.channels:
        raise EncodeError(
            f"image has {img.shape[2]} channels, dictionary expects {D.geometry.channels}"
        )
    h, w = img.shape[:2]
    cols = extract_all_patches(img, D.geometry)
    if D.zero_mean_input:
        cols = zero_mean_columns(cols, D.geometry)
    gram = cache.gram if cache is not None else None
    idx, val = batch_encode_columns(cols, D.atoms, D.sparsity, gram=gram)
    return SparseCodeMap.from_raw(w, h, D.atom_count, idx, val)


def reconstruct_image(Z: SparseCodeMap, D: Dictionary) -> np.ndarray:
    """Superimpose each pixel's weighted atoms as centered patches and average.

    Every output pixel divides its accumulated value by the number of patch
    windows covering it (``side**2`` in the interior, fewer near borders).
    Contributions that would land outside the grid are dropped.
    """
    if Z.dim != D.atom_count:
        raise EncodeError(f"map dim {Z.dim} != atom count {D.atom_count}")
    geom = D.geometry
    h, w = Z.height, Z.width
    n = h * w
    patches = np.zeros((n, geom.dim))
    for s in range(Z.capacity):
        valid = Z.indices[:, s] >= 0
        if not valid.any():
            continue
        patches[valid] += D.atoms[:, Z.indices[valid, s]].T * Z.values[valid, s, None]
    m, c = geom.side, geom.channels
    r = geom.radius
    grid_patches = patches.reshape(h, w, m, m, c)
    acc = np.zeros((h + 2 * r, w + 2 * r, c))
    for dy in range(m):
        for dx in range(m):
            acc[dy:dy + h, dx:dx + w] += grid_patches[:, :, dy, dx]
    out = acc[r:r + h, r:r + w]
    counts = patch_cover_counts(h, w, m)
    return out / counts[:, :, None]


# ---------------------------------------------------------------------------
# serialization: magic "SLZM", then per cell nnz u16 + (u32 index, f32 value)


_ZMAGIC = b"SLZM"


def save_code_map(Z: SparseCodeMap, path) -> None:
    parts = [_ZMAGIC, struct.pack("<III", Z.width, Z.height, Z.dim)]
    nnz = Z.nnz_per_cell().astype(np.uint16)
    for row in range(Z.height * Z.width):
        k = int(nnz[row])
        parts.append(struct.pack("<H", k))
        if k:
            rec = np.empty(k, dtype=[("i", "<u4"), ("v", "<f4")])
            rec["i"] = Z.indices[row, :k]
            rec["v"] = Z.values[row, :k]
            parts.append(rec.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_code_map(path) -> SparseCodeMap:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _ZMAGIC:
        raise EncodeError(f"bad magic {blob[:4]!r}")
    w, h, dim = struct.unpack_from("<III", blob, 4)
    off = 16
    rows_idx, rows_val = [], []
    for _ in range(w * h):
        (k,) = struct.unpack_from("<H", blob, off)
        off += 2
        rec = np.frombuffer(blob, dtype=[("i", "<u4"), ("v", "<f4")], count=k, offset=off)
        off += 8 * k
        rows_idx.append(rec["i"].astype(np.int32))
        rows_val.append(rec["v"].astype(np.float64))
    cap = max(1, max((r.size for r in rows_idx), default=0))
    idx = np.full((w * h, cap), -1, dtype=np.int32)
    val = np.zeros((w * h, cap))
    for r, (ri, rv) in enumerate(zip(rows_idx, rows_val)):
        idx[r, :ri.size] = ri
        val[r, :rv.size] = rv
    return SparseCodeMap(w, h, dim, idx, val)
