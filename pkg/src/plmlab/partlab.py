"""Instance cropping and part-level multi-labels.

A crop is kept at its original position on a zero canvas (``embed_crop``)
so the same fixed-input labeling network can score it. Bit ``j`` of an
instance's part-label vector is set when at least one of its crops is
classified as ``j``.
"""

import csv
from dataclasses import dataclass

import numpy as np

from plmlab.autodiff import Tensor
from plmlab.errors import DomainError
from plmlab.rng import substream

STRATEGIES = ("uniform", "random", "emphasized")


@dataclass(frozen=True)
class Crop:
    row: int
    col: int
    grid: np.ndarray  # (h, w) features cut from the parent

    @property
    def size(self):
        return self.grid.shape


@dataclass
class CropSet:
    parent: int
    crops: list

    @property
    def K(self):
        return len(self.crops)


def _check_size(x, k):
    H, W = x.shape
    if not 1 <= k <= min(H, W):
        raise DomainError(f"crop size {k} does not fit a {H}x{W} instance")


def uniform_offsets(H, W, k):
    return [(0, 0), (0, W - k), (H - k, 0), (H - k, W - k), ((H - k) // 2, (W - k) // 2)]


def _cut(x, offsets, k, parent):
    return CropSet(parent, [Crop(r, c, x[r:r + k, c:c + k].copy()) for r, c in offsets])


def crop_uniform(x, k, parent=0):
    """Four corners plus the centre, each ``k x k``."""
    x = np.asarray(x, dtype=np.float64)
    _check_size(x, k)
    return _cut(x, uniform_offsets(*x.shape, k), k, parent)


def random_offsets(H, W, k, n_crops, rng):
    rows = rng.integers(0, H - k + 1, size=n_crops)
    cols = rng.integers(0, W - k + 1, size=n_crops)
    return list(zip(rows.tolist(), cols.tolist()))


def crop_random(x, k, n_crops=5, seed=0, parent=0):
    x = np.asarray(x, dtype=np.float64)
    _check_size(x, k)
    rng = substream(seed, f"crops/{parent}")
    return _cut(x, random_offsets(*x.shape, k, n_crops, rng), k, parent)


def saliency_map(f_l, x):
    """Gradient-times-input magnitude of the top logit, per feature.

    Accepts one instance (H, W) or a batch (n, H, W); rows are independent,
    so one backward pass through the summed top logits serves the batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    batch = x[None] if single else x
    n = len(batch)
    xt = Tensor(batch.reshape(n, -1), requires_grad=True)
    logits = f_l(xt)
    top = np.argmax(logits.data, axis=1)
    logits[np.arange(n), top].sum().backward()
    scores = np.abs(xt.grad * xt.data).reshape(batch.shape)
    return scores[0] if single else scores


def top_feature_mask(s, m):
    """Boolean mask of the ``m`` highest scores; ties go to the lower row-major index."""
    flat = np.asarray(s, dtype=np.float64).ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:m]] = True
    return mask.reshape(np.shape(s))


def crop_emphasized(x, s, m, parent=0):
    """Two full-size sub-instances: top-``m`` salient features masked, and the rest masked."""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= m < x.size:
        raise DomainError(f"emphasis count m={m} must lie in [1, {x.size})")
    top = top_feature_mask(s, m)
    return CropSet(parent, [Crop(0, 0, np.where(top, 0.0, x)), Crop(0, 0, np.where(top, x, 0.0))])


def embed_crop(crop, H, W):
    h, w = crop.size
    if crop.row < 0 or crop.col < 0 or crop.row + h > H or crop.col + w > W:
        raise DomainError("crop does not fit the parent bounds")
    canvas = np.zeros((H, W))
    canvas[crop.row:crop.row + h, crop.col:crop.col + w] = crop.grid
    return canvas


def bits_from_predictions(pred, c):
    """(n, K) crop predictions -> (n, c) existential bit vectors."""
    pred = np.asarray(pred)
    bits = np.zeros((pred.shape[0], c), dtype=np.int8)
    rows = np.repeat(np.arange(pred.shape[0]), pred.shape[1])
    bits[rows, pred.ravel()] = 1
    return bits


def assign_part_labels(f_l, crops, H, W):
    """Part-label vector for one CropSet (argmax ties go to the lowest class)."""
    canvases = np.stack([embed_crop(cr, H, W) for cr in crops.crops])
    pred = np.argmax(f_l.logits(canvases), axis=-1)
    return bits_from_predictions(pred[None], f_l.out_features)[0]


@dataclass
class CropPlan:
    """Crop geometry for a whole dataset.

    Window strategies store per-instance offsets (n, K, 2) and the size k;
    the emphasized strategy stores the per-instance top-m masks (n, H, W).
    """

    strategy: str
    k: int | None = None
    offsets: np.ndarray | None = None
    top_masks: np.ndarray | None = None

    @property
    def K(self):
        return 2 if self.strategy == "emphasized" else self.offsets.shape[1]


def plan_crops(X, strategy, k=None, n_crops=5, seed=0, m=None, f_l=None, index=None, chunk=512):
    X = np.asarray(X, dtype=np.float64)
    n, H, W = X.shape
    index = np.arange(n) if index is None else np.asarray(index)
    if strategy == "uniform":
        _check_size(X[0], k)
        offsets = np.broadcast_to(np.array(uniform_offsets(H, W, k)), (n, 5, 2)).copy()
        return CropPlan(strategy, k, offsets)
    if strategy == "random":
        _check_size(X[0], k)
        offsets = np.array([random_offsets(H, W, k, n_crops, substream(seed, f"crops/{int(p)}"))
                            for p in index]).reshape(n, n_crops, 2)
        return CropPlan(strategy, k, offsets)
    if strategy == "emphasized":
        if m is None or not 1 <= m < H * W:
            raise DomainError(f"emphasis count m={m} must lie in [1, {H * W})")
        masks = np.empty((n, H, W), dtype=bool)
        for start in range(0, n, chunk):
            s = saliency_map(f_l, X[start:start + chunk])
            for i, si in enumerate(s):
                masks[start + i] = top_feature_mask(si, m)
        return CropPlan(strategy, top_masks=masks)
    raise DomainError(f"unknown crop strategy {strategy!r}")


def crop_views(X, plan, rows=None):
    """Embedded crops (len(rows), K, H, W) for the instances ``rows`` of ``X``.

    A window crop zero-embedded at its offset is the instance times the
    window indicator, which is how it is built here.
    """
    X = np.asarray(X, dtype=np.float64)
    rows = np.arange(len(X)) if rows is None else np.asarray(rows)
    H, W = X.shape[1:]
    if plan.strategy == "emphasized":
        top = plan.top_masks[rows]
        x = X[rows]
        return np.stack([np.where(top, 0.0, x), np.where(top, x, 0.0)], axis=1)
    k = plan.k
    out = np.zeros((len(rows), plan.K, H, W))
    for a, i in enumerate(rows):
        for j, (r, c) in enumerate(plan.offsets[i]):
            out[a, j, r:r + k, c:c + k] = X[i, r:r + k, c:c + k]
    return out


def label_with_plan(f_l, X, plan, chunk=512):
    """Part-label table (n, c) from an existing crop plan."""
    X = np.asarray(X, dtype=np.float64)
    c = f_l.out_features
    parts = [np.zeros((0, c), dtype=np.int8)]
    for start in range(0, len(X), chunk):
        views = crop_views(X, plan, np.arange(start, min(start + chunk, len(X))))
        b, K = views.shape[:2]
        pred = np.argmax(f_l.logits(views.reshape(b * K, -1)), axis=-1).reshape(b, K)
        parts.append(bits_from_predictions(pred, c))
    return np.concatenate(parts)


def part_labels_batch(f_l, X, strategy="uniform", k=None, n_crops=5, seed=0, m=None, index=None):
    """Plan the crops and label them in one call."""
    plan = plan_crops(X, strategy, k, n_crops, seed, m, f_l, index)
    return label_with_plan(f_l, X, plan)


def write_part_labels(path, bits, index=None):
    bits = np.asarray(bits)
    index = np.arange(len(bits)) if index is None else index
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + [f"bit_{j + 1}" for j in range(bits.shape[1])])
        for i, row in zip(index, bits):
            w.writerow([int(i)] + [int(v) for v in row])


def read_part_labels(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int8)
