"""Learned transfer from sparse feature stacks to per-pixel labelings.

For every retained position of an ``m x m`` output patch (and every label
channel) an independent L2-regularized logistic classifier maps the feature
vector of the center pixel to that position's label.  At prediction time each
pixel's classifier outputs are scattered as a patch around the pixel, weighted
by a Gaussian averaging kernel, and normalized by the accumulated weight.

The kernel is adaptively thinned: beyond scheduled radii only a deterministic
checkerboard-style subset of offsets is kept, and each kept weight is divided
by its local keep fraction so total mass stays approximately invariant.
Classifiers for discarded offsets are neither trained nor evaluated.

Feature vectors carry an always-present constant slot at the last index
(value exactly 1) in addition to the stack features, so the feature dimension
is the stack dimension plus one.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .encode import SparseCodeMap
from .grid import as_grid, extract_patch, PatchGeometry
from .seeds import derive_seed

log = logging.getLogger(__name__)

_MAGIC = b"SLTM"
_VERSION = 1


class TransferError(ValueError):
    pass


def gaussian_weight(dx: float, dy: float, sigma: float) -> float:
    """Normalized 2-D Gaussian evaluated at an integer offset."""
    return float(np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) / (2.0 * np.pi * sigma * sigma))


def _keep_offset(dx: int, dy: int, level: int) -> bool:
    """Checkerboard-style thinning: each level halves the kept lattice."""
    for _ in range(level):
        if (dx + dy) % 2 != 0:
            return False
        dx, dy = (dx + dy) // 2, (dx - dy) // 2
    return True


def default_density_schedule(side: int) -> list[tuple[float, float]]:
    """Full density near the center, halved to side/3, quartered beyond."""
    return [(side / 6.0, 0.5), (side / 3.0, 0.25)]


@dataclass
class AveragingKernel:
    """Thinned Gaussian weights on a set of patch offsets.

    ``offsets`` holds the kept (dx, dy) pairs ordered row-major;
    ``weights[i]`` is the Gaussian at ``offsets[i]`` divided by
    ``density[i]``, the local keep fraction there.
    """

    side: int
    sigma: float
    schedule: list[tuple[float, float]]
    offsets: np.ndarray
    weights: np.ndarray
    density: np.ndarray

    @property
    def count(self) -> int:
        return len(self.offsets)


def build_adaptive_kernel(
    side: int, sigma: float, schedule: list[tuple[float, float]] | None = None
) -> AveragingKernel:
    """Construct the thinned averaging kernel for an ``side x side`` patch.

    ``schedule`` lists (radius, keep_fraction) with radii increasing and
    fractions in (0, 1] non-increasing: every offset within the first radius
    is kept; past each radius the matching fraction applies (snapped to the
    nearest power-of-two checkerboard density).  Defaults to
    :func:`default_density_schedule`.
    """
    if side < 1 or side % 2 == 0:
        raise TransferError(f"kernel side must be odd, got {side}")
    if sigma <= 0:
        raise TransferError("sigma must be positive")
    if schedule is None:
        schedule = default_density_schedule(side)
    if not schedule:
        raise TransferError("empty density schedule")
    radii = [r for r, _ in schedule]
    fracs = [f for _, f in schedule]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise TransferError("schedule radii must be strictly increasing")
    if any(not 0 < f <= 1 for f in fracs) or any(b > a for a, b in zip(fracs, fracs[1:])):
        raise TransferError("schedule fractions must be in (0, 1] and non-increasing")
    r = side // 2
    offsets, weights, density = [], [], []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            dist = float(np.hypot(dx, dy))
            frac = 1.0
            for radius, f in schedule:
                if dist > radius:
                    frac = f
            level = max(0, round(-np.log2(frac)))
            rho = 2.0 ** (-level)
            if not _keep_offset(dx, dy, level):
                continue
            offsets.append((dx, dy))
            density.append(rho)
            weights.append(gaussian_weight(dx, dy, sigma) / rho)
    return AveragingKernel(
        side,
        float(sigma),
        [(float(a), float(b)) for a, b in schedule],
        np.array(offsets, dtype=np.int32).reshape(-1, 2),
        np.array(weights),
        np.array(density),
    )


@dataclass
class RectifiedCode:
    """Sparse nonnegative feature vector with a constant-1 slot at the end."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise TransferError("rectified features must be nonnegative")
        if self.indices.size == 0 or self.indices[-1] != self.dim - 1 or self.values[-1] != 1.0:
            raise TransferError("constant slot (last index, value 1) missing")


@dataclass
class LabelPatchSet:
    """Training pairs: per-sample center features and ground-truth patches.

    ``indices``/``values`` hold the stack features (constant slot implied);
    ``patches`` has shape (n, m, m, h) with values in {0, 1}.
    """

    feature_dim: int
    indices: np.ndarray
    values: np.ndarray
    patches: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.patches):
            raise TransferError("codes and patches must have equal lengths")

    @property
    def count(self) -> int:
        return len(self.patches)

    @property
    def patch_side(self) -> int:
        return self.patches.shape[1]

    @property
    def label_channels(self) -> int:
        return self.patches.shape[3]

    def code(self, i: int) -> RectifiedCode:
        valid = self.indices[i] >= 0
        idx = np.append(self.indices[i][valid], self.feature_dim - 1)
        val = np.append(self.values[i][valid], 1.0)
        return RectifiedCode(idx, val, self.feature_dim)


def sample_training_pairs(
    stacks: list[SparseCodeMap],
    truths: list[np.ndarray],
    m: int,
    h: int,
    count: int,
    seed: int,
    balance: float | None = None,
) -> LabelPatchSet:
    """Draw (center feature vector, m x m truth patch) pairs from aligned grids.

    ``balance`` oversamples centers whose truth is positive in any channel to
    the given fraction.  ``count`` covering every pixel (with no balance)
    enumerates all locations instead of sampling.
    """
    if len(stacks) != len(truths) or not stacks:
        raise TransferError("stacks and truths must be nonempty and aligned")
    if count < 1:
        raise TransferError("count must be >= 1")
    truths = [as_grid(t, channels=h) for t in truths]
    for Z, t in zip(stacks, truths):
        if (t.shape[0], t.shape[1]) != (Z.height, Z.width):
            raise TransferError("stack/truth grids misaligned")
    dim = stacks[0].dim
    total = sum(Z.width * Z.height for Z in stacks)
    locations: list[tuple[int, int, int]] = []
    if balance is None and count >= total:
        for i, Z in enumerate(stacks):
            for y in range(Z.height):
                for x in range(Z.width):
                    locations.append((i, x, y))
    else:
        rng = np.random.default_rng(seed)
        pools = {"pos": [], "neg": []}
        for i, t in enumerate(truths):
            posmask = t.max(axis=2) > 0.5
            ys, xs = np.nonzero(posmask)
            pools["pos"].extend((i, int(x), int(y)) for x, y in zip(xs, ys))
            ys, xs = np.nonzero(~posmask)
            pools["neg"].extend((i, int(x), int(y)) for x, y in zip(xs, ys))
        if balance is not None:
            if not pools["pos"]:
                raise TransferError("no positive samples")
            n_pos = int(round(count * balance))
            n_neg = count - n_pos
            neg_pool = pools["neg"] if pools["neg"] else pools["pos"]
            for k in rng.integers(0, len(pools["pos"]), size=n_pos):
                locations.append(pools["pos"][k])
            for k in rng.integers(0, len(neg_pool), size=n_neg):
                locations.append(neg_pool[k])
        else:
            everything = pools["pos"] + pools["neg"]
            for k in rng.integers(0, len(everything), size=count):
                locations.append(everything[k])
    cap = max(Z.capacity for Z in stacks)
    n = len(locations)
    idx = np.full((n, cap), -1, dtype=np.int32)
    val = np.zeros((n, cap))
    patches = np.zeros((n, m, m, h))
    geom = PatchGeometry(m, h)
    for row, (i, x, y) in enumerate(locations):
        Z = stacks[i]
        cell = y * Z.width + x
        idx[row, :Z.capacity] = Z.indices[cell]
        val[row, :Z.capacity] = Z.values[cell]
        patches[row] = extract_patch(truths[i], (x, y), geom).reshape(m, m, h)
    return LabelPatchSet(dim + 1, idx, val, patches)


@dataclass
class Classifier:
    """One logistic unit: full-length weight vector (dropped dims zero) + bias."""

    drop_seed: int
    bias: float
    weights: np.ndarray


@dataclass
class TransferModel:
    patch_side: int
    label_channels: int
    feature_dim: int
    kernel: AveragingKernel
    drop_fraction: float
    classifiers: list[Classifier] = field(default_factory=list)

    def classifier(self, position: int, channel: int) -> Classifier:
        return self.classifiers[position * self.label_channels + channel]


def drop_mask(seed: int, feature_dim: int, drop_fraction: float) -> np.ndarray:
    """Deterministic retention mask; the constant slot is droppable, bias is not."""
    if drop_fraction <= 0:
        return np.ones(feature_dim, dtype=bool)
    rng = np.random.default_rng(seed)
    return rng.random(feature_dim) >= drop_fraction


def logistic_loss_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, reg: float):
    """Loss and gradient of L2-regularized logistic regression.

    ``params`` is the weight vector with the bias appended last; the bias is
    not regularized.
    """
    w = params[:-1]
    b = params[-1]
    s = y * (X @ w + b)
    loss = float(np.logaddexp(0.0, -s).sum() + 0.5 * reg * (w @ w))
    # d/ds log(1 + exp(-s)) = -sigmoid(-s)
    coef = -y * _sigmoid(-s)
    grad_w = X.T @ coef + reg * w
    grad_b = coef.sum()
    return loss, np.append(grad_w, grad_b)


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def _fit_classifier(X: np.ndarray, labels: np.ndarray, reg: float, mask: np.ndarray,
                    max_iter: int = 200) -> tuple[float, np.ndarray]:
    """Returns (bias, full-length weights) for one output position/channel."""
    dim = X.shape[1]
    y = np.where(labels > 0.5, 1.0, -1.0)
    n_pos = int((y > 0).sum())
    if n_pos == 0 or n_pos == len(y):
        bias = float(np.log((n_pos + 0.5) / (len(y) - n_pos + 0.5)))
        log.debug("single-class training set; classifier degenerates to bias-only")
        return bias, np.zeros(dim)
    kept = np.flatnonzero(mask)
    Xk = X[:, kept]
    x0 = np.zeros(len(kept) + 1)
    res = minimize(
        logistic_loss_grad,
        x0,
        args=(Xk, y, reg),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-8},
    )
    w = np.zeros(dim)
    w[kept] = res.x[:-1]
    return float(res.x[-1]), w


def train_transfer(
    data: LabelPatchSet,
    kernel: AveragingKernel,
    reg_strength: float = 1.0,
    drop_seed: int = 0,
    drop_fraction: float = 0.5,
    workers: int = 1,
) -> TransferModel:
    """Fit one logistic classifier per retained kernel offset and label channel.

    Each classifier gets its own seeded retention mask dropping
    ``drop_fraction`` of the feature dimensions (the bias is never dropped).
    Offsets the kernel discards get no classifier at all.
    """
    if data.count == 0:
        raise TransferError("empty training set")
    if kernel.side != data.patch_side:
        raise TransferError(
            f"kernel side {kernel.side} != data patch side {data.patch_side}"
        )
    m = data.patch_side
    h = data.label_channels
    dim = data.feature_dim
    r = m // 2
    X = np.zeros((data.count, dim))
    rows, slots = np.nonzero(data.indices >= 0)
    X[rows, data.indices[rows, slots]] = data.values[rows, slots]
    X[:, dim - 1] = 1.0

    jobs = []
    for pos in range(kernel.count):
        dx, dy = kernel.offsets[pos]
        for ch in range(h):
            jobs.append((pos, ch, data.patches[:, r + dy, r + dx, ch]))

    def run(job):
        pos, ch, labels = job
        seed = derive_seed(drop_seed, "mask", pos, ch)
        mask = drop_mask(seed, dim, drop_fraction)
        bias, w = _fit_classifier(X, labels, reg_strength, mask)
        return Classifier(seed, bias, w)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            classifiers = list(pool.map(run, jobs))
    else:
        classifiers = [run(j) for j in jobs]
    return TransferModel(m, h, dim, kernel, drop_fraction, classifiers)


def score_sparse(weights, bias: float, code: RectifiedCode) -> float:
    """Evaluate one classifier on a sparse code, touching only stored indices.

    Performs exactly ``nnz`` weight lookups (the constant slot is one of the
    stored indices), independent of the feature dimension.
    """
    total = bias
    for i, v in zip(code.indices, code.values):
        total += weights[i] * v
    return total


def predict_labeling(stack: SparseCodeMap, model: TransferModel) -> np.ndarray:
    """Reconstruct an h-channel label map in [0, 1] from a feature stack.

    Every pixel's retained classifiers emit sigmoid outputs for their patch
    positions; outputs scatter around the pixel weighted by the kernel, and
    each output pixel divides by its accumulated kernel weight.
    """
    if model.feature_dim != stack.dim + 1:
        raise TransferError(
            f"model expects feature dim {model.feature_dim}, stack gives {stack.dim + 1}"
        )
    h_img, w_img = stack.height, stack.width
    hch = model.label_channels
    num = np.zeros((h_img, w_img, hch))
    den = np.zeros((h_img, w_img))
    idx = np.maximum(stack.indices, 0)
    pad = stack.indices < 0
    for pos in range(model.kernel.count):
        dx, dy = (int(v) for v in model.kernel.offsets[pos])
        wgt = model.kernel.weights[pos]
        ty0, ty1 = max(0, dy), min(h_img, h_img + dy)
        tx0, tx1 = max(0, dx), min(w_img, w_img + dx)
        sy0, sy1 = ty0 - dy, ty1 - dy
        sx0, sx1 = tx0 - dx, tx1 - dx
        den[ty0:ty1, tx0:tx1] += wgt
        for ch in range(hch):
            clf = model.classifier(pos, ch)
            gathered = clf.weights[idx] * stack.values
            gathered[pad] = 0.0
            scores = gathered.sum(axis=1) + clf.weights[stack.dim] + clf.bias
            probs = _sigmoid(scores).reshape(h_img, w_img)
            num[ty0:ty1, tx0:tx1, ch] += wgt * probs[sy0:sy1, sx0:sx1]
    out = num / den[:, :, None]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# serialization: magic "SLTM"


def save_transfer_model(model: TransferModel, path) -> None:
    k = model.kernel
    parts = [_MAGIC, struct.pack("<IIId", _VERSION, model.patch_side, model.label_channels, k.sigma)]
    parts.append(struct.pack("<I", len(k.schedule)))
    for radius, frac in k.schedule:
        parts.append(struct.pack("<dd", radius, frac))
    parts.append(struct.pack("<Id", model.feature_dim, model.drop_fraction))
    parts.append(struct.pack("<I", k.count))
    for dx, dy in k.offsets:
        parts.append(struct.pack("<ii", int(dx), int(dy)))
    for clf in model.classifiers:
        kept = np.flatnonzero(drop_mask(clf.drop_seed, model.feature_dim, model.drop_fraction))
        parts.append(struct.pack("<QdI", clf.drop_seed, clf.bias, len(kept)))
        parts.append(clf.weights[kept].astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_transfer_model(path) -> TransferModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise TransferError(f"bad magic {blob[:4]!r}")
    off = 4
    version, side, hch, sigma = struct.unpack_from("<IIId", blob, off)
    off += 20
    if version != _VERSION:
        raise TransferError(f"unsupported version {version}")
    (n_sched,) = struct.unpack_from("<I", blob, off)
    off += 4
    schedule = []
    for _ in range(n_sched):
        radius, frac = struct.unpack_from("<dd", blob, off)
        off += 16
        schedule.append((radius, frac))
    feature_dim, drop_fraction = struct.unpack_from("<Id", blob, off)
    off += 12
    (n_pos,) = struct.unpack_from("<I", blob, off)
    off += 4
    stored = []
    for _ in range(n_pos):
        dx, dy = struct.unpack_from("<ii", blob, off)
        off += 8
        stored.append((dx, dy))
    kernel = build_adaptive_kernel(side, sigma, schedule)
    if [tuple(o) for o in kernel.offsets] != stored:
        raise TransferError("stored kernel offsets do not match the rebuilt kernel")
    classifiers = []
    for _ in range(n_pos * hch):
        drop_seed, bias, n_kept = struct.unpack_from("<QdI", blob, off)
        off += 20
        vals = np.frombuffer(blob, dtype="<f4", count=n_kept, offset=off).astype(np.float64)
        off += 4 * n_kept
        kept = np.flatnonzero(drop_mask(drop_seed, feature_dim, drop_fraction))
        if len(kept) != n_kept:
            raise TransferError("stored weight count does not match the drop mask")
        w = np.zeros(feature_dim)
        w[kept] = vals
        classifiers.append(Classifier(drop_seed, bias, w))
    return TransferModel(side, hch, feature_dim, kernel, drop_fraction, classifiers)
