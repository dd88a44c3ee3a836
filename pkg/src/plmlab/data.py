"""Clean datasets, label-noise injection, splits and on-disk export.

Class labels are 0-based integers throughout. Noise provenance
(``true_T`` / per-instance flip rows, clean labels) is stored on
``NoisyDataset`` for evaluation only; training code reads
``instances`` and ``noisy_labels``.
"""

import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from plmlab.errors import ConfigurationError, DomainError, FormatError
from plmlab.rng import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NOISE_KINDS = ("symmetric", "pair", "idn")


@dataclass
class CleanDataset:
    instances: np.ndarray  # (n, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, c)
    c: int
    seed: int | None = None

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.instances.ndim != 3:
            raise FormatError(f"instances must be (n, H, W), got {self.instances.shape}")
        if len(self.instances) != len(self.labels):
            raise FormatError("instances and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.c):
            raise DomainError(f"labels must lie in [0, {self.c})")

    def __len__(self):
        return len(self.labels)

    @property
    def H(self):
        return self.instances.shape[1]

    @property
    def W(self):
        return self.instances.shape[2]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return CleanDataset(self.instances[idx], self.labels[idx], self.c, self.seed)


@dataclass
class NoisyDataset:
    instances: np.ndarray
    noisy_labels: np.ndarray
    clean_labels: np.ndarray  # evaluation only
    c: int
    noise_kind: str
    rate: float
    true_T: np.ndarray  # (c, c) for class-dependent noise, (n, c) flip rows for idn
    seed: int | None = None
    index: np.ndarray = field(default=None)  # positions in the originating dataset

    def __post_init__(self):
        if self.index is None:
            self.index = np.arange(len(self.noisy_labels))

    def __len__(self):
        return len(self.noisy_labels)

    @property
    def H(self):
        return self.instances.shape[1]

    @property
    def W(self):
        return self.instances.shape[2]

    @property
    def class_dependent(self):
        return self.noise_kind != "idn"

    def noise_rows(self):
        """Per-instance ground-truth rows ``P(noisy | clean, x)``, exactly as injected."""
        if self.class_dependent:
            return self.true_T[self.clean_labels]
        return self.true_T

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        rows = self.true_T if self.class_dependent else self.true_T[idx]
        return NoisyDataset(
            self.instances[idx], self.noisy_labels[idx], self.clean_labels[idx],
            self.c, self.noise_kind, self.rate, rows, self.seed, self.index[idx],
        )

    def flat(self):
        return self.instances.reshape(len(self), -1)


# -- clean data ---------------------------------------------------------


def _template_cells(c, H, W):
    g = max(2, math.ceil(math.sqrt(c)))
    ph, pw = H // g, W // g
    if ph < 2 or pw < 2:
        raise ConfigurationError(f"{c} classes do not fit a template grid on a {H}x{W} image")
    # corners first so c=2 puts the two classes at opposite corners
    corners = [0, g * g - 1, g - 1, g * (g - 1)]
    order = corners + [k for k in range(g * g) if k not in corners]
    return [(divmod(k, g), ph, pw) for k in order[:c]]


def class_templates(c, H, W):
    """One binary template per class: a bright patch at a class-specific grid cell."""
    templates = np.zeros((c, H, W))
    for k, ((gr, gc), ph, pw) in enumerate(_template_cells(c, H, W)):
        templates[k, gr * ph:(gr + 1) * ph, gc * pw:(gc + 1) * pw] = 1.0
    return templates


def gen_synthetic(c, per_class_n, H=16, W=16, noise_scale=0.1, seed=0, stream="synthetic"):
    """Class-balanced template images plus clipped Gaussian pixel noise.

    ``stream`` names the pixel-noise substream, so a test split drawn with
    another name is independent of the training split.
    """
    if c < 2:
        raise ConfigurationError("need at least two classes")
    if H < 8 or W < 8:
        raise ConfigurationError("synthetic images must be at least 8x8")
    templates = class_templates(c, H, W)
    rng = substream(seed, stream)
    labels = np.repeat(np.arange(c), per_class_n)
    x = templates[labels]
    if noise_scale > 0:
        x = x + rng.normal(0.0, noise_scale, size=x.shape)
    return CleanDataset(np.clip(x, 0.0, 1.0), labels, c, seed)


# -- IDX ------------------------------------------------------------------


def _open_bytes(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path, limit=None):
    raw = _open_bytes(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x}")
    if len(raw) < 16 + n * rows * cols:
        raise FormatError(f"{path}: truncated, expected {n} images of {rows}x{cols}")
    k = n if limit is None else min(n, limit)
    data = np.frombuffer(raw, dtype=np.uint8, count=k * rows * cols, offset=16)
    return data.reshape(k, rows, cols), n


def read_idx_labels(path, limit=None):
    raw = _open_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(raw) < 8 + n:
        raise FormatError(f"{path}: truncated, expected {n} labels")
    k = n if limit is None else min(n, limit)
    return np.frombuffer(raw, dtype=np.uint8, count=k, offset=8).astype(np.int64), n


def load_idx(images_path, labels_path, limit=None, c=10):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images, n_img = read_idx_images(images_path, limit)
    labels, n_lab = read_idx_labels(labels_path, limit)
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} != label count {n_lab}")
    return CleanDataset(images.astype(np.float64) / 255.0, labels, c)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (n, rows, cols) and labels (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- noise injection ----------------------------------------------------


def symmetric_T(c, eps):
    T = np.full((c, c), eps / (c - 1))
    np.fill_diagonal(T, 1.0 - eps)
    return T


def pair_T(c, eps):
    T = np.eye(c) * (1.0 - eps)
    for i in range(c):
        T[i, (i + 1) % c] += eps
    return T


def _check_rate(eps):
    if not 0.0 <= eps < 1.0:
        raise DomainError(f"noise rate must lie in [0, 1), got {eps}")


def sample_rows(rows, rng):
    """Draw one class per row of a (n, c) stochastic matrix."""
    u = rng.random(len(rows))
    cdf = np.cumsum(rows, axis=1)
    out = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(out, rows.shape[1] - 1)


def _class_dependent(clean, T, kind, eps, seed):
    rng = substream(seed, "noise")
    noisy = sample_rows(T[clean.labels], rng)
    return NoisyDataset(
        clean.instances, noisy, clean.labels.copy(), clean.c, kind, float(eps), T, seed,
    )


def inject_symmetric(clean, eps, seed=0):
    _check_rate(eps)
    return _class_dependent(clean, symmetric_T(clean.c, eps), "symmetric", eps, seed)


def inject_pair(clean, eps, seed=0):
    _check_rate(eps)
    return _class_dependent(clean, pair_T(clean.c, eps), "pair", eps, seed)


def idn_rows(clean, eps, seed=0, std=0.1):
    """Per-instance flip rows for instance-dependent noise.

    Each instance gets a flip probability drawn from N(eps, std^2)
    truncated to [0, 1] (exactly 0 when ``eps == 0``). A fixed Gaussian
    projection of the unit-normalised instance scores the classes; the
    clean class is excluded, the rest are softmax-normalised and share the
    flip probability.
    """
    _check_rate(eps)
    rng = substream(seed, "idn")
    n, c = len(clean), clean.c
    x = clean.instances.reshape(n, -1)
    if eps == 0:
        q = np.zeros(n)
    else:
        a, b = (0.0 - eps) / std, (1.0 - eps) / std
        q = truncnorm.rvs(a, b, loc=eps, scale=std, size=n, random_state=rng)
    proj = rng.normal(size=(x.shape[1], c))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    scores = (x / np.where(norms > 0, norms, 1.0)) @ proj
    scores[np.arange(n), clean.labels] = -np.inf
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    rows = q[:, None] * e / e.sum(axis=1, keepdims=True)
    rows[np.arange(n), clean.labels] = 1.0 - q
    return rows


def inject_idn(clean, eps, seed=0, std=0.1):
    rows = idn_rows(clean, eps, seed, std)
    noisy = sample_rows(rows, substream(seed, "noise"))
    return NoisyDataset(
        clean.instances, noisy, clean.labels.copy(), clean.c, "idn", float(eps), rows, seed,
    )


def inject(clean, kind, eps, seed=0):
    if kind == "symmetric":
        return inject_symmetric(clean, eps, seed)
    if kind == "pair":
        return inject_pair(clean, eps, seed)
    if kind == "idn":
        return inject_idn(clean, eps, seed)
    raise ConfigurationError(f"unknown noise kind {kind!r}")


def empirical_confusion(clean_labels, noisy_labels, c):
    counts = np.zeros((c, c))
    np.add.at(counts, (clean_labels, noisy_labels), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    return counts / np.where(totals > 0, totals, 1.0)


# -- splits ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float = 0.1
    seed: int = 0


def split_indices(n, spec):
    if not 0.0 < spec.val_fraction < 1.0:
        raise ConfigurationError("validation fraction must lie in (0, 1)")
    n_val = int(round(spec.val_fraction * n))
    if n_val == 0 or n_val == n:
        raise ConfigurationError(f"split of {n} items at {spec.val_fraction} leaves an empty side")
    perm = substream(spec.seed, "split").permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split_train_val(dataset, spec):
    """Random partition; the validation side keeps its noisy labels."""
    train_idx, val_idx = split_indices(len(dataset), spec)
    return dataset.subset(train_idx), dataset.subset(val_idx)


# -- directory export -----------------------------------------------------


def _write_labels(path, index, clean, noisy):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "clean_label", "noisy_label"])
        for i, a, b in zip(index, clean, noisy):
            w.writerow([int(i), int(a), int(b)])


def _read_labels(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    clean = np.array([int(r["clean_label"]) for r in rows], dtype=np.int64)
    noisy = np.array([int(r["noisy_label"]) for r in rows], dtype=np.int64)
    return clean, noisy


def write_matrix_csv(path, M):
    M = np.asarray(M)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([str(j) for j in range(M.shape[1])])
        for row in M:
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows])


def export_dataset(out_dir, noisy, test=None, extra=None):
    """Write manifest.json, images.f32 and labels.csv (plus the clean test split)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "c": int(noisy.c), "H": int(noisy.H), "W": int(noisy.W), "n": len(noisy),
        "noise_kind": noisy.noise_kind, "eps": noisy.rate, "seed": noisy.seed,
    }
    noisy.instances.astype("<f4").tofile(out / "images.f32")
    _write_labels(out / "labels.csv", np.arange(len(noisy)), noisy.clean_labels, noisy.noisy_labels)
    write_matrix_csv(out / ("true_T.csv" if noisy.class_dependent else "noise_rows.csv"), noisy.true_T)
    if test is not None:
        manifest["n_test"] = len(test)
        test.instances.astype("<f4").tofile(out / "test_images.f32")
        _write_labels(out / "test_labels.csv", np.arange(len(test)), test.labels, test.labels)
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset_dir(path):
    """Inverse of ``export_dataset``: returns (manifest, NoisyDataset, CleanDataset | None)."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable dataset manifest ({exc})") from exc
    c, H, W, n = manifest["c"], manifest["H"], manifest["W"], manifest["n"]
    x = np.fromfile(path / "images.f32", dtype="<f4")
    if x.size != n * H * W:
        raise FormatError(f"{path}/images.f32 holds {x.size} values, expected {n * H * W}")
    clean, noisy_labels = _read_labels(path / "labels.csv")
    kind = manifest["noise_kind"]
    rows_file = "true_T.csv" if kind != "idn" else "noise_rows.csv"
    true_T = read_matrix_csv(path / rows_file)
    noisy = NoisyDataset(
        x.reshape(n, H, W).astype(np.float64), noisy_labels, clean, c, kind,
        manifest["eps"], true_T, manifest["seed"],
    )
    test = None
    if manifest.get("n_test"):
        nt = manifest["n_test"]
        xt = np.fromfile(path / "test_images.f32", dtype="<f4")
        if xt.size != nt * H * W:
            raise FormatError(f"{path}/test_images.f32 has the wrong size")
        test_labels, _ = _read_labels(path / "test_labels.csv")
        test = CleanDataset(xt.reshape(nt, H, W).astype(np.float64), test_labels, c)
    return manifest, noisy, test
