"""Unsupervised patch dictionary training.

Dictionaries hold unit-norm atoms over flat patch columns.  Training
alternates greedy sparse coding of the sample set with sequential rank-one
atom updates, and additionally steers atoms away from each other by shrinking
each updated atom against the signed sum of its neighbors (mutual-incoherence
penalty, weight ``lam``).  The tracked objective is::

    ||X - D Z||_F^2 + lam * sum_{i != j} |d_i . d_j|
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .grid import PatchGeometry, PatchMatrix

_MAGIC = b"SLDC"
_VERSION = 1


class DictionaryError(ValueError):
    pass


@dataclass
class Dictionary:
    """Bank of ``atom_count`` unit-norm atoms over ``geometry`` patch columns.

    ``atoms`` has shape ``(geometry.dim, atom_count)``.  ``sparsity`` is the
    nonzero budget per code; ``zero_mean_input`` marks dictionaries trained on
    (and expecting) per-channel mean-removed patches.
    """

    geometry: PatchGeometry
    atoms: np.ndarray
    sparsity: int
    zero_mean_input: bool = False

    def __post_init__(self):
        self.atoms = np.ascontiguousarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2 or self.atoms.shape[0] != self.geometry.dim:
            raise DictionaryError(
                f"atoms must be ({self.geometry.dim}, L), got {self.atoms.shape}"
            )
        if not 1 <= self.sparsity <= self.atom_count:
            raise DictionaryError(
                f"need L >= K >= 1, got L={self.atom_count}, K={self.sparsity}"
            )
        norms = np.linalg.norm(self.atoms, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-8):
            raise DictionaryError("atom norms deviate from 1 by more than 1e-8")

    @property
    def atom_count(self) -> int:
        return self.atoms.shape[1]

    def fingerprint(self) -> str:
        """Content hash covering geometry, sparsity, flags, and atom bytes."""
        h = hashlib.sha256()
        h.update(
            struct.pack(
                "<IIIIB",
                self.geometry.side,
                self.geometry.channels,
                self.atom_count,
                self.sparsity,
                int(self.zero_mean_input),
            )
        )
        h.update(np.ascontiguousarray(self.atoms.T).tobytes())
        return h.hexdigest()


@dataclass
class MiKsvdConfig:
    """Training knobs: incoherence weight, sweep count, seed, dead-atom policy.

    ``rel_stop`` ends training early once the relative objective improvement
    drops below it.
    """

    lam: float = 1e-2
    iterations: int = 25
    seed: int = 0
    replace_unused_atoms: bool = True
    rel_stop: float = 1e-4

    def __post_init__(self):
        if self.iterations < 1:
            raise DictionaryError("iterations must be >= 1")
        if self.lam < 0:
            raise DictionaryError("lam must be >= 0")


def init_dictionary(X: PatchMatrix, atom_count: int, sparsity: int, seed: int) -> Dictionary:
    """Seed a dictionary with ``atom_count`` normalized training patches.

    Samples columns without replacement (seeded permutation), skipping
    zero-norm patches.
    """
    norms = np.linalg.norm(X.columns, axis=0)
    usable = np.flatnonzero(norms > 0)
    if usable.size < atom_count:
        raise DictionaryError(
            f"only {usable.size} nonzero patches available for {atom_count} atoms"
        )
    rng = np.random.default_rng(seed)
    order = usable[rng.permutation(usable.size)[:atom_count]]
    atoms = X.columns[:, order] / norms[order]
    return Dictionary(X.geometry, atoms, sparsity)


def coherence_penalty(D: Dictionary) -> float:
    """Sum of |d_i . d_j| over all ordered pairs i != j."""
    gram = D.atoms.T @ D.atoms
    return float(np.sum(np.abs(gram)) - np.sum(np.abs(np.diag(gram))))


def _objective(X: np.ndarray, atoms: np.ndarray, codes: np.ndarray, lam: float) -> float:
    resid = X - atoms @ codes
    gram = atoms.T @ atoms
    coh = np.sum(np.abs(gram)) - np.sum(np.abs(np.diag(gram)))
    return float(np.sum(resid * resid) + lam * coh)


def _update_atoms(X, atoms, codes, lam, replace_unused):
    """Sequential per-atom sweep: rank-one refit plus incoherence shrinkage.

    For each atom, the residual restricted to its supporting signals is refit
    by one power-iteration step (d <- normalize(E g)); a second candidate
    shrinks that direction against sign(d_j . d) d_j summed over the other
    atoms and renormalizes.  A candidate (including keeping the current atom)
    is chosen by its share of the objective on the restricted residual,

        -||E^T d||^2 + 2 lam sum_{j != i} |d^T d_j|,

    so the sweep never increases the objective.  The supported coefficients
    are then re-solved by least squares on the chosen atom.
    """
    dim, atom_count = atoms.shape
    residual = X - atoms @ codes
    for i in range(atom_count):
        support = np.flatnonzero(codes[i] != 0.0)
        if support.size == 0:
            if replace_unused:
                worst = int(np.argmax(np.sum(residual * residual, axis=0)))
                cand = X[:, worst]
                norm = np.linalg.norm(cand)
                if norm > 0:
                    atoms[:, i] = cand / norm
            continue
        g = codes[i, support]
        # restricted residual with atom i's own contribution restored
        E = residual[:, support] + np.outer(atoms[:, i], g)
        candidates = [atoms[:, i]]
        p = E @ g
        pn = np.linalg.norm(p)
        if pn > 0:
            d_plain = p / pn
            candidates.append(d_plain)
            if lam > 0 and atom_count > 1:
                others = np.delete(np.arange(atom_count), i)
                corr = atoms[:, others].T @ d_plain
                u = atoms[:, others] @ np.sign(corr)
                for scale in (0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0):
                    d_shrunk = d_plain - scale * lam * u
                    dn = np.linalg.norm(d_shrunk)
                    if dn > 0:
                        candidates.append(d_shrunk / dn)

        def _score(d):
            fit = E.T @ d
            coh = 0.0
            if lam > 0 and atom_count > 1:
                dots = atoms.T @ d
                coh = np.sum(np.abs(dots)) - np.abs(dots[i])
            return -float(fit @ fit) + 2.0 * lam * coh, fit

        best_score, g_new = _score(candidates[0])
        d = candidates[0]
        for cand in candidates[1:]:
            score, fit = _score(cand)
            if score < best_score:
                best_score, g_new, d = score, fit, cand
        residual[:, support] = E - np.outer(d, g_new)
        atoms[:, i] = d
        codes[i, support] = g_new
    return atoms, codes


def mi_ksvd_train(
    X: PatchMatrix,
    cfg: MiKsvdConfig,
    atom_count: int,
    sparsity: int,
    init: Dictionary | None = None,
) -> tuple[Dictionary, list[float]]:
    """Train a dictionary on a patch matrix; returns (dictionary, objective trace).

    Each iteration encodes every column at sparsity ``sparsity`` against the
    current atoms, runs the atom-update sweep, and appends the objective
    evaluated with the refreshed coefficients.  The coding step keeps the
    previous iteration's (refreshed) coefficients for any signal the fresh
    pursuit fails to improve, which together with the accept-tested atom
    updates keeps the recorded trace non-increasing.  Stops early when the
    relative improvement drops below ``cfg.rel_stop``.
    """
    from .encode import batch_encode_columns  # deferred: encode imports Dictionary

    if X.count == 0:
        raise DictionaryError("empty training set")
    if sparsity > atom_count:
        raise DictionaryError(f"K={sparsity} exceeds L={atom_count}")
    D = init if init is not None else init_dictionary(X, atom_count, sparsity, cfg.seed)
    atoms = D.atoms.copy()
    data = X.columns
    trace: list[float] = []
    prev_codes = None
    for _ in range(cfg.iterations):
        idx, val = batch_encode_columns(data, atoms, sparsity)
        codes = np.zeros((X.count, atom_count))
        rows, slots = np.nonzero(idx >= 0)
        codes[rows, idx[rows, slots]] = val[rows, slots]
        codes = np.ascontiguousarray(codes.T)
        if prev_codes is not None:
            err_new = np.sum((data - atoms @ codes) ** 2, axis=0)
            err_old = np.sum((data - atoms @ prev_codes) ** 2, axis=0)
            worse = err_new > err_old
            codes[:, worse] = prev_codes[:, worse]
        atoms, codes = _update_atoms(data, atoms, codes, cfg.lam, cfg.replace_unused_atoms)
        prev_codes = codes
        trace.append(_objective(data, atoms, codes, cfg.lam))
        if len(trace) >= 2 and trace[-2] > 0:
            if (trace[-2] - trace[-1]) / trace[-2] < cfg.rel_stop:
                break
    norms = np.linalg.norm(atoms, axis=0)
    atoms = atoms / np.where(norms > 0, norms, 1.0)
    atoms[:, norms == 0] = D.atoms[:, norms == 0]
    trained = Dictionary(X.geometry, atoms, sparsity, zero_mean_input=D.zero_mean_input)
    return trained, trace


# ---------------------------------------------------------------------------
# serialization: binary record and lossless JSON debug dump


def save_dictionary(D: Dictionary, path) -> None:
    """Write the binary dictionary record (magic ``SLDC``, little-endian f64)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(
            struct.pack(
                "<IIIIIB",
                _VERSION,
                D.geometry.side,
                D.geometry.channels,
                D.atom_count,
                D.sparsity,
                int(D.zero_mean_input),
            )
        )
        # column-major: atoms are contiguous
        f.write(np.ascontiguousarray(D.atoms.T, dtype="<f8").tobytes())


def load_dictionary(path) -> Dictionary:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise DictionaryError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        version, side, channels, L, K, zm = struct.unpack("<IIIIIB", f.read(21))
        if version != _VERSION:
            raise DictionaryError(f"unsupported version {version}")
        geom = PatchGeometry(side, channels)
        raw = f.read(8 * geom.dim * L)
        atoms = np.frombuffer(raw, dtype="<f8").reshape(L, geom.dim).T
    return Dictionary(geom, atoms.copy(), K, zero_mean_input=bool(zm))


def dictionary_to_json(D: Dictionary) -> str:
    """Lossless JSON debug dump (atom values via float hex)."""
    doc = {
        "side": D.geometry.side,
        "channels": D.geometry.channels,
        "atom_count": D.atom_count,
        "sparsity": D.sparsity,
        "zero_mean_input": D.zero_mean_input,
        "atoms_hex": [[v.hex() for v in col] for col in D.atoms.T],
    }
    return json.dumps(doc, indent=1)


def dictionary_from_json(text: str) -> Dictionary:
    doc = json.loads(text)
    atoms = np.array(
        [[float.fromhex(v) for v in col] for col in doc["atoms_hex"]]
    ).T
    geom = PatchGeometry(doc["side"], doc["channels"])
    return Dictionary(geom, atoms, doc["sparsity"], zero_mean_input=doc["zero_mean_input"])
