"""
Region-based cross-modality mixing.

An image is cut into a grid of square patches. Two centered rectangles
split the grid into a center region (inside the inner rectangle), a
sub-center ring and the outer remainder. For each region a fixed fraction
of its patches keeps the source modality and the rest is copied from the
identity-paired image of the other modality.
"""

from dataclasses import dataclass

import numpy as np

from .errors import require

CENTER, SUB_CENTER, OUTER = 0, 1, 2
REGION_NAMES = ("C", "S", "O")


@dataclass(frozen=True)
class MixRatios:
    a_c: float = 0.65
    a_s: float = 0.70
    a_o: float = 0.75

    def __post_init__(self):
        for v in (self.a_c, self.a_s, self.a_o):
            require(0.0 <= v <= 1.0, f"mix ratio {v} outside [0,1]")

    def as_tuple(self):
        return (self.a_c, self.a_s, self.a_o)


@dataclass(frozen=True)
class RegionMap:
    grid_h: int
    grid_w: int
    patch_size: int
    region_of: np.ndarray  # [grid_h, grid_w] labels in {CENTER, SUB_CENTER, OUTER}
    phi1: tuple
    phi2: tuple

    def counts(self):
        return tuple(int((self.region_of == r).sum()) for r in (CENTER, SUB_CENTER, OUTER))


def _centered_box(grid_h, grid_w, frac):
    bh = int(round(frac[0] * grid_h))
    bw = int(round(frac[1] * grid_w))
    top = (grid_h - bh) // 2
    left = (grid_w - bw) // 2
    return top, top + bh, left, left + bw


def partition_regions(h, w, patch_size, phi1=(2 / 3, 1 / 3), phi2=(5 / 6, 2 / 3)):
    """Label every patch of an h x w image as center, sub-center or outer.

    ``phi1``/``phi2`` are (height_frac, width_frac) of the inner and outer
    rectangles. Odd margins put the extra patch below/right of the box.
    """
    require(patch_size > 0 and h % patch_size == 0 and w % patch_size == 0,
            f"{h}x{w} image is not divisible into {patch_size}px patches")
    require(all(0 <= f <= 1 for f in (*phi1, *phi2)), "rectangle fractions must be in [0,1]")
    require(phi1[0] <= phi2[0] and phi1[1] <= phi2[1], "inner rectangle must fit inside the outer one")
    gh, gw = h // patch_size, w // patch_size
    labels = np.full((gh, gw), OUTER, dtype=np.int64)
    t, b, l, r = _centered_box(gh, gw, phi2)
    labels[t:b, l:r] = SUB_CENTER
    t, b, l, r = _centered_box(gh, gw, phi1)
    labels[t:b, l:r] = CENTER
    return RegionMap(gh, gw, patch_size, labels, tuple(phi1), tuple(phi2))


def kept_counts(region_map, ratios):
    # the epsilon absorbs float noise such as 0.29 * 100 = 28.999...
    return tuple(int(np.floor(a * n + 1e-9)) for a, n in zip(ratios.as_tuple(), region_map.counts()))


def sample_masks(region_map, ratios, rng):
    """Binary patch mask: 1 keeps the source modality, 0 takes the other one.

    Exactly floor(A_i * |r_i|) patches of region i are set, chosen uniformly
    without replacement.
    """
    mask = np.zeros(region_map.region_of.shape, dtype=np.uint8)
    flat = mask.reshape(-1)
    labels = region_map.region_of.reshape(-1)
    for region, keep in zip((CENTER, SUB_CENTER, OUTER), kept_counts(region_map, ratios)):
        idx = np.flatnonzero(labels == region)
        order = rng.permutation(idx.size)
        flat[idx[order[:keep]]] = 1
    return mask


def expand_mask(mask, patch_size):
    return np.kron(mask, np.ones((patch_size, patch_size), dtype=mask.dtype))


def mix_images(source, other, mask):
    """Per-patch selection: pixels under mask==1 come from ``source``."""
    source = np.asarray(source)
    other = np.asarray(other)
    require(source.shape == other.shape and source.ndim == 3, "images must share a [C,H,W] shape")
    _, h, w = source.shape
    gh, gw = mask.shape
    require(h % gh == 0 and w % gw == 0 and h // gh == w // gw,
            f"mask grid {mask.shape} does not tile a {h}x{w} image")
    pix = expand_mask(mask, h // gh).astype(bool)
    return np.where(pix[None], source, other)


def mix_pair(x_v, x_i, mask_v, mask_i):
    """Return (mixed visible, mixed infrared) for one identity-paired couple."""
    return mix_images(x_v, x_i, mask_v), mix_images(x_i, x_v, mask_i)


def concat_mixed(batch_v, batch_i):
    """Stack mixed images along the batch axis, visible half first."""
    require(len(batch_v) == len(batch_i), f"{len(batch_v)} visible vs {len(batch_i)} infrared images")
    return np.concatenate([np.stack(list(batch_v)), np.stack(list(batch_i))], axis=0)


def pedmix_batch(x_v, x_i, region_map, ratios, rng):
    """Mix an index-aligned batch ([N,3,H,W] each) into a [2N,3,H,W] batch.

    Visible and infrared outputs draw independent masks.
    """
    require(x_v.shape == x_i.shape, "visible and infrared batches must align")
    mixed_v, mixed_i = [], []
    for a, b in zip(x_v, x_i):
        mv = sample_masks(region_map, ratios, rng)
        mi = sample_masks(region_map, ratios, rng)
        va, ib = mix_pair(a, b, mv, mi)
        mixed_v.append(va)
        mixed_i.append(ib)
    return concat_mixed(mixed_v, mixed_i)


def channel_augment(x_v, rng):
    """With probability 0.5 return the image unchanged, otherwise copy one
    randomly chosen channel into all three."""
    x_v = np.asarray(x_v)
    require(x_v.ndim == 3 and x_v.shape[0] == 3, "channel_augment expects a [3,H,W] image")
    if rng.random() < 0.5:
        return x_v.copy()
    c = int(rng.integers(3))
    return np.repeat(x_v[c : c + 1], 3, axis=0)
