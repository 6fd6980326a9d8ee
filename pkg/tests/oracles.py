"""Independent reference implementations used to check the package.

These deliberately avoid the package's own helpers: masks are enumerated
entry by entry, transforms use dense DFT matrices, surfaces and distances
are computed by brute force.
"""

import itertools
import math

import numpy as np


def centred_frequency(k, n):
    """Frequency of FFT bin ``k`` in centred coordinates, range [-ceil(n/2)+1, floor(n/2)]."""
    f = k if k <= n // 2 else k - n
    assert -math.ceil(n / 2) + 1 <= f <= n // 2
    return f


def mask_by_enumeration(extents, alpha):
    out = np.zeros(extents)
    for idx in itertools.product(*(range(n) for n in extents)):
        if all(abs(centred_frequency(k, n)) <= alpha * n for k, n in zip(idx, extents)):
            out[idx] = 1.0
    return out


def ones_count(H, W, alpha):
    return (2 * math.floor(alpha * H) + 1) * (2 * math.floor(alpha * W) + 1)


def dft_matrix(n):
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n)


def codes_by_dft(x, alpha):
    """Content/style split of a 2D image through explicit DFT matrices."""
    H, W = x.shape
    Fh, Fw = dft_matrix(H), dft_matrix(W)
    spec = Fh @ x @ Fw.T
    m = mask_by_enumeration((H, W), alpha)
    inv = lambda s: (np.conj(Fh) @ s @ np.conj(Fw).T) / (H * W)  # noqa: E731
    return inv(spec * (1 - m)).real, inv(spec * m).real


def surface_voxels(mask):
    """Voxels of ``mask`` having at least one of six face neighbours outside it (or outside the grid)."""
    pts = []
    shape = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not (0 <= nb[axis] < shape[axis]) or not mask[tuple(nb)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return pts


def assd_brute(pred, gt, cls, spacing):
    sp = np.array(surface_voxels(pred == cls), dtype=np.float64).reshape(-1, 3) * spacing
    sg = np.array(surface_voxels(gt == cls), dtype=np.float64).reshape(-1, 3) * spacing
    if len(sp) == 0 and len(sg) == 0:
        return 0.0
    if len(sp) == 0 or len(sg) == 0:
        return float("nan")
    # full pairwise distance matrix, no spatial index
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(-1))
    total = d.min(axis=1).sum() + d.min(axis=0).sum()
    return total / (len(sp) + len(sg))


def dice_brute(pred, gt, cls):
    inter = 0
    npred = ngt = 0
    for a, b in zip(pred.ravel(), gt.ravel()):
        inter += (a == cls) and (b == cls)
        npred += a == cls
        ngt += b == cls
    if npred + ngt == 0:
        return 1.0
    return 2.0 * inter / (npred + ngt)


def tissue_centroids(labels, spacing):
    """Physical centroid (mm, grid-centred) of every tissue class present."""
    out = {}
    centre = (np.asarray(labels.shape) - 1) / 2.0
    for c in range(1, 7):
        idx = np.argwhere(labels == c)
        if len(idx):
            out[c] = (idx.mean(axis=0) - centre) * np.asarray(spacing)
    return out
