"""Multipath sparse coding network.

An image is resized to several scales and each scale is coded against
per-patch-size dictionaries (layer 1).  Selected layer-1 outputs are
rectified, pooled, subsampled, and coded again (layer 2).  All maps listed as
concatenation sources are rectified, upsampled back to the original pixel
grid, and concatenated with disjoint index offsets into one sparse
nonnegative feature vector per pixel (the feature stack).

Coefficient rectification splits a signed value into nonnegative halves:
value v at index i becomes max(v, 0) at i and max(-v, 0) at dim + i, so a
map's dimensionality doubles while its nonzero count is unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dictionary import Dictionary, MiKsvdConfig, mi_ksvd_train
from .encode import SparseCodeMap, encode_image
from .grid import PatchGeometry, PatchMatrix, as_grid, rescale, upsample_map_index, zero_mean_columns
from .seeds import derive_seed

# the feature stack is a sparse code map over the original pixel grid
FeatureStack = SparseCodeMap


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class PoolSpec:
    window: int
    stride: int

    def __post_init__(self):
        if not self.window >= self.stride >= 1:
            raise NetworkError(f"need window >= stride >= 1, got {self.window}/{self.stride}")


@dataclass
class Layer1Path:
    name: str
    patch_side: int
    atom_count: int
    sparsity: int
    feeds_layer2: bool = False
    pool: PoolSpec | None = None


@dataclass
class Layer2Path:
    name: str
    source: str
    patch_side: int
    atom_count: int
    sparsity: int


@dataclass
class NetworkSpec:
    """Declarative architecture: scales, coding paths, pooling, and wiring."""

    scales: list[float]
    layer1: list[Layer1Path]
    layer2: list[Layer2Path] = field(default_factory=list)
    concat: list[str] = field(default_factory=list)
    channels: int = 1
    zero_mean: bool = True

    def validate(self) -> None:
        if not self.scales or any(not 0 < s <= 1 for s in self.scales):
            raise NetworkError("scales must be nonempty with values in (0, 1]")
        names = [p.name for p in self.layer1] + [p.name for p in self.layer2]
        if len(set(names)) != len(names):
            raise NetworkError("path names must be unique")
        l1 = {p.name: p for p in self.layer1}
        for p in self.layer1:
            if p.feeds_layer2 and p.pool is None:
                raise NetworkError(f"path {p.name} feeds layer 2 but has no pool spec")
        for p in self.layer2:
            src = l1.get(p.source)
            if src is None or not src.feeds_layer2 or src.pool is None:
                raise NetworkError(
                    f"layer-2 path {p.name} must source a pooled layer-1 path, got {p.source!r}"
                )
        if not self.concat:
            raise NetworkError("concat source list is empty")
        for name in self.concat:
            if name not in names:
                raise NetworkError(f"unknown concat source {name!r}")

    def path(self, name: str) -> Layer1Path | Layer2Path:
        for p in self.layer1 + self.layer2:
            if p.name == name:
                return p
        raise NetworkError(f"unknown path {name!r}")

    @property
    def feature_dim(self) -> int:
        """Final per-pixel dimensionality: scales x sum over concat of 2L."""
        self.validate()
        return len(self.scales) * sum(2 * self.path(n).atom_count for n in self.concat)

    def max_nnz_per_pixel(self) -> int:
        """Upper bound on stack nonzeros: each map contributes at most its K."""
        self.validate()
        return len(self.scales) * sum(self.path(n).sparsity for n in self.concat)

    def block_layout(self) -> list[tuple[int, str, int, int]]:
        """Ordered (scale_index, path_name, offset, width) concatenation blocks."""
        self.validate()
        out = []
        offset = 0
        for si in range(len(self.scales)):
            for name in self.concat:
                width = 2 * self.path(name).atom_count
                out.append((si, name, offset, width))
                offset += width
        return out

    def dictionary_geometry(self, name: str) -> PatchGeometry:
        p = self.path(name)
        if isinstance(p, Layer1Path):
            return PatchGeometry(p.patch_side, self.channels)
        src = self.path(p.source)
        return PatchGeometry(p.patch_side, 2 * src.atom_count)

    def to_json(self, dictionary_files: dict[str, str] | None = None) -> str:
        doc = {
            "scales": list(self.scales),
            "channels": self.channels,
            "zero_mean": self.zero_mean,
            "layer1": [
                {
                    "name": p.name,
                    "patch_side": p.patch_side,
                    "atom_count": p.atom_count,
                    "sparsity": p.sparsity,
                    "feeds_layer2": p.feeds_layer2,
                    "pool": None if p.pool is None else {"window": p.pool.window, "stride": p.pool.stride},
                }
                for p in self.layer1
            ],
            "layer2": [
                {
                    "name": p.name,
                    "source": p.source,
                    "patch_side": p.patch_side,
                    "atom_count": p.atom_count,
                    "sparsity": p.sparsity,
                }
                for p in self.layer2
            ],
            "concat": list(self.concat),
        }
        if dictionary_files is not None:
            doc["dictionaries"] = dict(dictionary_files)
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> tuple["NetworkSpec", dict[str, str]]:
        doc = json.loads(text)
        layer1 = [
            Layer1Path(
                p["name"],
                p["patch_side"],
                p["atom_count"],
                p["sparsity"],
                p.get("feeds_layer2", False),
                None if p.get("pool") is None else PoolSpec(p["pool"]["window"], p["pool"]["stride"]),
            )
            for p in doc["layer1"]
        ]
        layer2 = [
            Layer2Path(p["name"], p["source"], p["patch_side"], p["atom_count"], p["sparsity"])
            for p in doc.get("layer2", [])
        ]
        spec = cls(
            scales=list(doc["scales"]),
            layer1=layer1,
            layer2=layer2,
            concat=list(doc["concat"]),
            channels=doc.get("channels", 1),
            zero_mean=doc.get("zero_mean", True),
        )
        spec.validate()
        return spec, dict(doc.get("dictionaries", {}))


def rectify(Z: SparseCodeMap) -> SparseCodeMap:
    """Split signed coefficients into nonnegative halves; dim doubles."""
    pos = Z.values > 0
    neg = Z.values < 0
    idx = np.where(pos, Z.indices, np.where(neg, Z.indices + Z.dim, -1)).astype(np.int32)
    val = np.abs(Z.values)
    return SparseCodeMap.from_raw(Z.width, Z.height, 2 * Z.dim, idx, val)


def pool_hybrid_avg_max(Z: SparseCodeMap, spec: PoolSpec) -> SparseCodeMap:
    """Window pooling that averages only the strictly nonzero entries.

    Output dims are ceil(input / stride); the window for output cell (i, j)
    starts at (j * stride, i * stride) and is clipped at the grid border.  A
    channel that is zero everywhere in the window pools to zero.
    """
    if np.any(Z.values < 0):
        raise NetworkError("pooling expects rectified (nonnegative) input")
    dense = Z.to_dense()
    h, w, dim = dense.shape
    oh = math.ceil(h / spec.stride)
    ow = math.ceil(w / spec.stride)
    # summed-area tables over values and nonzero counts
    sums = np.zeros((h + 1, w + 1, dim))
    cnts = np.zeros((h + 1, w + 1, dim))
    np.cumsum(dense, axis=0, out=sums[1:, 1:])
    np.cumsum(sums[1:, 1:], axis=1, out=sums[1:, 1:])
    np.cumsum(dense != 0, axis=0, out=cnts[1:, 1:])
    np.cumsum(cnts[1:, 1:], axis=1, out=cnts[1:, 1:])
    y0 = np.arange(oh) * spec.stride
    x0 = np.arange(ow) * spec.stride
    y1 = np.minimum(y0 + spec.window, h)
    x1 = np.minimum(x0 + spec.window, w)
    box = (
        sums[y1[:, None], x1[None, :]]
        - sums[y0[:, None], x1[None, :]]
        - sums[y1[:, None], x0[None, :]]
        + sums[y0[:, None], x0[None, :]]
    )
    num = (
        cnts[y1[:, None], x1[None, :]]
        - cnts[y0[:, None], x1[None, :]]
        - cnts[y1[:, None], x0[None, :]]
        + cnts[y0[:, None], x0[None, :]]
    )
    out = np.divide(box, num, out=np.zeros_like(box), where=num > 0)
    return SparseCodeMap.from_dense(out)


def upsample_map(Z: SparseCodeMap, target_w: int, target_h: int) -> SparseCodeMap:
    """Nearest-neighbor replication of a sparse map onto a larger grid."""
    if target_w < Z.width or target_h < Z.height:
        raise NetworkError("upsample target smaller than source")
    ys = upsample_map_index(Z.height, target_h)
    xs = upsample_map_index(Z.width, target_w)
    rows = (ys[:, None] * Z.width + xs[None, :]).reshape(-1)
    return SparseCodeMap(target_w, target_h, Z.dim, Z.indices[rows], Z.values[rows])


def concat_maps(blocks: list[tuple[int, SparseCodeMap | None]], width: int, height: int,
                dim: int) -> SparseCodeMap:
    """Concatenate maps at their index offsets; ``None`` blocks contribute nothing."""
    idx_parts, val_parts = [], []
    n = width * height
    for offset, Z in blocks:
        if Z is None:
            continue
        if (Z.width, Z.height) != (width, height):
            raise NetworkError("concat source grid mismatch")
        shifted = np.where(Z.indices >= 0, Z.indices + offset, -1).astype(np.int32)
        idx_parts.append(shifted)
        val_parts.append(Z.values)
    if not idx_parts:
        return SparseCodeMap(width, height, dim, np.full((n, 1), -1, np.int32), np.zeros((n, 1)))
    return SparseCodeMap.from_raw(
        width, height, dim, np.hstack(idx_parts), np.hstack(val_parts)
    )


def forward(img: np.ndarray, spec: NetworkSpec, dicts: dict[str, Dictionary]) -> FeatureStack:
    """Run the network on one image and return its per-pixel feature stack.

    A scale is skipped (contributing an all-zero block) when the rescaled
    image is smaller than the largest layer-1 patch side.
    """
    spec.validate()
    img = as_grid(img, channels=spec.channels)
    _check_dicts(spec, dicts)
    h, w = img.shape[:2]
    needed = {p.name for p in spec.layer1 if p.feeds_layer2 or p.name in spec.concat}
    max_side = max(p.patch_side for p in spec.layer1)
    blocks: list[tuple[int, SparseCodeMap | None]] = []
    layout = spec.block_layout()
    for si, scale in enumerate(spec.scales):
        scaled = rescale(img, scale)
        skip = min(scaled.shape[0], scaled.shape[1]) < max_side
        maps: dict[str, SparseCodeMap] = {}
        if not skip:
            for p in spec.layer1:
                if p.name in needed:
                    maps[p.name] = rectify(encode_image(scaled, dicts[p.name]))
            for p2 in spec.layer2:
                src = spec.path(p2.source)
                pooled = pool_hybrid_avg_max(maps[src.name], src.pool)
                maps[p2.name] = rectify(encode_image(pooled.to_dense(), dicts[p2.name]))
        for bsi, name, offset, _ in layout:
            if bsi != si:
                continue
            Z = maps.get(name)
            blocks.append((offset, None if (skip or Z is None) else upsample_map(Z, w, h)))
    return concat_maps(blocks, w, h, spec.feature_dim)


def _check_dicts(spec: NetworkSpec, dicts: dict[str, Dictionary]) -> None:
    for p in spec.layer1 + spec.layer2:
        D = dicts.get(p.name)
        if D is None:
            raise NetworkError(f"missing dictionary for path {p.name!r}")
        geom = spec.dictionary_geometry(p.name)
        if D.geometry != geom or D.atom_count != p.atom_count or D.sparsity != p.sparsity:
            raise NetworkError(f"dictionary for path {p.name!r} does not match the spec")


def _sample_grid_patches(grids, geom: PatchGeometry, count: int, rng,
                         zero_mean: bool) -> PatchMatrix:
    """Uniform seeded draws of patch columns over a list of (grid, tag) pairs."""
    usable = [g for g in grids if min(g.shape[0], g.shape[1]) >= 1]
    if not usable:
        raise NetworkError("no grids to sample from")
    picks = rng.integers(0, len(usable), size=count)
    r = geom.radius
    cols = np.empty((geom.dim, count))
    pos = 0
    for gi in range(len(usable)):
        take = np.flatnonzero(picks == gi)
        if take.size == 0:
            continue
        g = usable[gi]
        gh, gw = g.shape[:2]
        cx = rng.integers(0, gw, size=take.size)
        cy = rng.integers(0, gh, size=take.size)
        padded = np.pad(g, ((r, r), (r, r), (0, 0)), mode="edge")
        offs = np.arange(geom.side)
        win = padded[
            (cy[:, None, None] + offs[None, :, None]),
            (cx[:, None, None] + offs[None, None, :]),
        ]
        cols[:, pos:pos + take.size] = win.reshape(take.size, geom.dim).T
        pos += take.size
    if zero_mean:
        cols = zero_mean_columns(cols, geom)
    return PatchMatrix(geom, cols)


def train_network_dictionaries(
    corpus: list[np.ndarray],
    spec: NetworkSpec,
    cfg: MiKsvdConfig,
    samples_per_dict: int = 100_000,
) -> dict[str, Dictionary]:
    """Train every path dictionary bottom-up on a corpus of images.

    Layer-1 dictionaries train on raw (optionally mean-removed) patches drawn
    across all usable scales; layer-2 dictionaries train on patches drawn
    from the pooled rectified maps their source path produces on the corpus.
    The draw order is seeded per path, so results do not depend on scheduling.
    """
    spec.validate()
    if not corpus:
        raise NetworkError("empty training corpus")
    corpus = [as_grid(im, channels=spec.channels) for im in corpus]
    max_side = max(p.patch_side for p in spec.layer1)
    scaled_all = []
    for im in corpus:
        for s in spec.scales:
            g = rescale(im, s)
            if min(g.shape[0], g.shape[1]) >= max_side:
                scaled_all.append(g)
    dicts: dict[str, Dictionary] = {}
    for p in spec.layer1:
        rng = np.random.default_rng(derive_seed(cfg.seed, "dict", p.name))
        geom = PatchGeometry(p.patch_side, spec.channels)
        X = _sample_grid_patches(scaled_all, geom, samples_per_dict, rng, spec.zero_mean)
        sub_cfg = MiKsvdConfig(
            lam=cfg.lam,
            iterations=cfg.iterations,
            seed=derive_seed(cfg.seed, "init", p.name),
            replace_unused_atoms=cfg.replace_unused_atoms,
            rel_stop=cfg.rel_stop,
        )
        D, _ = mi_ksvd_train(X, sub_cfg, p.atom_count, p.sparsity)
        D.zero_mean_input = spec.zero_mean
        dicts[p.name] = D
    for p2 in spec.layer2:
        src = spec.path(p2.source)
        pooled_grids = []
        for im in corpus:
            for s in spec.scales:
                g = rescale(im, s)
                if min(g.shape[0], g.shape[1]) < max_side:
                    continue
                Z = rectify(encode_image(g, dicts[src.name]))
                pooled_grids.append(pool_hybrid_avg_max(Z, src.pool).to_dense())
        rng = np.random.default_rng(derive_seed(cfg.seed, "dict", p2.name))
        geom = spec.dictionary_geometry(p2.name)
        X = _sample_grid_patches(pooled_grids, geom, samples_per_dict, rng, zero_mean=False)
        sub_cfg = MiKsvdConfig(
            lam=cfg.lam,
            iterations=cfg.iterations,
            seed=derive_seed(cfg.seed, "init", p2.name),
            replace_unused_atoms=cfg.replace_unused_atoms,
            rel_stop=cfg.rel_stop,
        )
        D, _ = mi_ksvd_train(X, sub_cfg, p2.atom_count, p2.sparsity)
        dicts[p2.name] = D
    return dicts


def reference_architecture() -> NetworkSpec:
    """The bundled six-scale, eight-dictionary architecture (see data/paper.json)."""
    scales = [2.0 ** (-k / 2) for k in range(6)]
    layer1 = [
        Layer1Path("pool5x64", 5, 64, 2, feeds_layer2=True, pool=PoolSpec(3, 2)),
        Layer1Path("pool11x64", 11, 64, 2, feeds_layer2=True, pool=PoolSpec(5, 4)),
        Layer1Path("cat5x512", 5, 512, 4),
        Layer1Path("cat11x512", 11, 512, 4),
        Layer1Path("cat21x512", 21, 512, 4),
        Layer1Path("cat31x512", 31, 512, 4),
    ]
    layer2 = [
        Layer2Path("deep5x512", "pool5x64", 5, 512, 4),
        Layer2Path("deep11x512", "pool11x64", 5, 512, 4),
    ]
    concat = ["cat5x512", "cat11x512", "cat21x512", "cat31x512", "deep5x512", "deep11x512"]
    return NetworkSpec(scales, layer1, layer2, concat, channels=3, zero_mean=True)
