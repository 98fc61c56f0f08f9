"""Graph-based superpixel segmentation and pseudo-label episode construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import ImageSlice, TransformSpec, apply_paired_transform
from .errors import ConfigError, EpisodeConstructionError, SelectionExhaustedError


@dataclass
class FelzParams:
    k_scale: float = 0.1
    sigma: float = 0.8
    min_size: int = 6

    def __post_init__(self):
        if self.k_scale <= 0:
            raise ConfigError("k_scale must be > 0")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.min_size < 1:
            raise ConfigError("min_size must be >= 1")


@dataclass
class SuperpixelMap:
    labels: np.ndarray
    n_segments: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        present = np.unique(self.labels)
        if not np.array_equal(present, np.arange(self.n_segments)):
            raise ConfigError("labels must be contiguous 0..n_segments-1")

    def segment_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_segments)


@dataclass
class FewShotEpisode:
    support_image: ImageSlice
    support_mask: np.ndarray
    query_image: ImageSlice
    query_mask: np.ndarray
    n_ways: int = 1
    n_shots: int = 1

    def __post_init__(self):
        shape = self.support_image.pixels.shape
        for grid in (self.support_mask, self.query_image.pixels, self.query_mask):
            if grid.shape != shape:
                raise ConfigError("episode grids must share one shape")
        for mask in (self.support_mask, self.query_mask):
            if not np.all(np.isin(mask, (0, 1))):
                raise ConfigError("episode masks must be {0,1}-valued")
        if self.support_mask.sum() < 1:
            raise ConfigError("support mask needs at least one foreground pixel")


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n  # max internal edge weight per component

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int, weight: float) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.internal[ra] = max(self.internal[ra], self.internal[rb], weight)


def grid_edges(intensity: np.ndarray):
    """4-connected edges as (weight, row, col, direction) with direction
    0 = right neighbor, 1 = down neighbor; returned sorted ascending with
    lexicographic tie-breaking on (row, col, direction)."""
    h, w = intensity.shape
    edges = []
    g = intensity.astype(np.float64)
    for r in range(h):
        for c in range(w):
            if c + 1 < w:
                edges.append((abs(g[r, c] - g[r, c + 1]), r, c, 0))
            if r + 1 < h:
                edges.append((abs(g[r, c] - g[r + 1, c]), r, c, 1))
    edges.sort()
    return edges


def _edge_endpoints(r: int, c: int, direction: int, w: int) -> tuple[int, int]:
    a = r * w + c
    b = a + 1 if direction == 0 else a + w
    return a, b


def felzenszwalb_segment(image: ImageSlice, params: FelzParams) -> SuperpixelMap:
    """Efficient graph-based segmentation on the 4-connected pixel grid.

    Components merge along ascending edge weight whenever the edge weight
    does not exceed min(Int(C1)+k/|C1|, Int(C2)+k/|C2|); a final pass walks
    the same sorted edges merging any component still under min_size.
    """
    g = image.pixels.astype(np.float64)
    if params.sigma > 0:
        g = ndimage.gaussian_filter(g, sigma=params.sigma, mode="nearest")
    h, w = g.shape
    edges = grid_edges(g)
    uf = _UnionFind(h * w)
    k = params.k_scale
    for weight, r, c, direction in edges:
        a, b = _edge_endpoints(r, c, direction, w)
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb:
            continue
        threshold = min(
            uf.internal[ra] + k / uf.size[ra],
            uf.internal[rb] + k / uf.size[rb],
        )
        if weight <= threshold:
            uf.union(ra, rb, weight)
    if params.min_size > 1:
        for weight, r, c, direction in edges:
            a, b = _edge_endpoints(r, c, direction, w)
            ra, rb = uf.find(a), uf.find(b)
            if ra == rb:
                continue
            if uf.size[ra] < params.min_size or uf.size[rb] < params.min_size:
                uf.union(ra, rb, weight)
    roots = np.array([uf.find(i) for i in range(h * w)])
    labels = relabel_contiguous(roots.reshape(h, w))
    return SuperpixelMap(labels=labels, n_segments=int(labels.max()) + 1)


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    """Relabel segments 0..n-1 in row-major order of first occurrence."""
    mapping: dict[int, int] = {}
    out = np.empty_like(labels, dtype=np.int64)
    flat_in, flat_out = labels.ravel(), out.ravel()
    for i, lab in enumerate(flat_in):
        lab = int(lab)
        if lab not in mapping:
            mapping[lab] = len(mapping)
        flat_out[i] = mapping[lab]
    return out


def select_pseudo_label(spmap: SuperpixelMap, min_fg: int, rng_seed: int) -> np.ndarray:
    """Uniformly pick one segment of size >= min_fg; return its binary mask."""
    sizes = spmap.segment_sizes()
    eligible = np.flatnonzero(sizes >= min_fg)
    if eligible.size == 0:
        raise SelectionExhaustedError(
            f"no segment has >= {min_fg} pixels (largest is {int(sizes.max())})"
        )
    rng = np.random.default_rng(rng_seed)
    chosen = int(eligible[rng.integers(0, eligible.size)])
    return (spmap.labels == chosen).astype(np.uint8)


def build_episode(image: ImageSlice, pseudo_mask: np.ndarray, spec: TransformSpec,
                  seed: int, max_attempts: int = 10) -> FewShotEpisode:
    """Support = the untransformed (image, pseudo mask); query = a paired
    random transform of both.  Resamples the transform while the query
    foreground comes out empty."""
    if pseudo_mask.sum() < 1:
        raise ConfigError("pseudo mask has empty foreground")
    for attempt in range(max_attempts):
        q_img, q_mask = apply_paired_transform(image, pseudo_mask, spec,
                                               seed=seed + attempt)
        if q_mask.sum() >= 1:
            return FewShotEpisode(
                support_image=image, support_mask=pseudo_mask.astype(np.uint8),
                query_image=q_img, query_mask=q_mask,
            )
    raise EpisodeConstructionError(
        f"query foreground vanished in {max_attempts} consecutive transforms"
    )
