"""Training stages of the PLM pipeline and its baselines.

Stage order for the PLM variants::

    labeler -> crops -> part_labels -> joint_posterior -> estimate_T -> classifier

``forward_baseline`` runs ``estimator -> estimate_T -> classifier`` and
``ce_baseline`` a single plain cross-entropy stage.
"""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from plmlab.autodiff import (
    EPS_CLIP,
    SGD,
    Mlp,
    Tensor,
    binary_cross_entropy,
    clamp,
    cross_entropy,
    lr_schedule,
    predict_proba,
    softmax,
    vecmat,
)
from plmlab.data import SplitSpec, split_train_val
from plmlab.errors import ConfigurationError, TrainingError
from plmlab.partlab import label_with_plan, plan_crops
from plmlab.rng import substream
from plmlab.transition import estimate_T_from_posteriors, u_forward

VARIANTS = ("plm_f", "plm_r", "forward_baseline", "ce_baseline")
STAGES = {
    "plm_f": ("labeler", "crops", "part_labels", "joint_posterior", "estimate_T", "classifier"),
    "plm_r": ("labeler", "crops", "part_labels", "joint_posterior", "estimate_T", "classifier"),
    "forward_baseline": ("estimator", "estimate_T", "classifier"),
    "ce_baseline": ("classifier",),
}


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    milestones: tuple = ()
    factor: float = 100.0


@dataclass
class TrainConfig:
    epochs_labeler: int = 20
    epochs_joint: int = 20
    epochs_classifier: int = 20
    batch_size: int = 128
    hidden: tuple = (256, 128)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    crop_strategy: str = "uniform"
    crop_size: int | None = None  # default: 22/28 of the shorter side
    n_crops: int = 5
    emphasis_m: int | None = None
    n_anchors: int = 10
    slack_lr_scale: float = 0.1
    val_fraction: float = 0.1
    seed: int = 0
    variant: str = "plm_f"

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimConfig(**self.optimizer)
        if min(self.epochs_labeler, self.epochs_joint, self.epochs_classifier) < 1:
            raise ConfigurationError("every stage needs at least one epoch")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["optimizer"]["milestones"] = list(self.optimizer.milestones)
        return d


@dataclass
class StageArtifacts:
    config: dict
    seed: int
    stages: list = field(default_factory=list)
    timings_ms: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (epoch, stage, train_loss, val_acc, lr)
    models: dict = field(default_factory=dict)
    T_hat: np.ndarray | None = None
    delta_T: np.ndarray | None = None
    part_labels: np.ndarray | None = None
    train_index: np.ndarray | None = None
    val_index: np.ndarray | None = None

    @property
    def classifier(self):
        return self.models["g"]

    @property
    def T_revised(self):
        """Projected ``T + dT`` of a PLM-R run, else the anchor estimate."""
        return self.T_hat if self.delta_T is None else revised_T(self.T_hat, self.delta_T)

    @property
    def posterior_estimator(self):
        """Network whose softmax estimates the noisy class posterior."""
        for name in ("g_e", "f_l", "g"):
            if name in self.models:
                return self.models[name]
        raise KeyError("no posterior estimator")


# -- losses -------------------------------------------------------------


def joint_loss(ge_out, U, noisy_label, part_bits):
    """``0.5 * (CE(g_e, noisy) + BCE(U^T g_e, part bits))`` on a batch."""
    return 0.5 * (cross_entropy(ge_out, noisy_label) + binary_cross_entropy(vecmat(ge_out, U), part_bits))


def _as_batch_U(U, n):
    if isinstance(U, Tensor):
        return U
    U = np.asarray(U, dtype=np.float64)
    return Tensor(np.broadcast_to(U, (n,) + U.shape[-2:]) if U.ndim == 2 else U)


def corrected_risk(g_out, T, U, noisy_label, part_bits, weights=None):
    """``0.5 * [w * CE(T^T g, noisy) + BCE(U^T T^T g, part bits)]``.

    ``T`` may be an array or a Tensor (``T + dT`` for the slack variant).
    The composed part posterior is clamped to ``[EPS_CLIP, 1]``.
    """
    n = g_out.shape[0]
    p_noisy = g_out @ T
    q = clamp(vecmat(p_noisy, _as_batch_U(U, n)), EPS_CLIP, 1.0)
    return 0.5 * (cross_entropy(p_noisy, noisy_label, weights) + binary_cross_entropy(q, part_bits))


def forward_risk(g_out, T, noisy_label):
    return cross_entropy(g_out @ T, noisy_label)


def revised_T(T, delta_T):
    """``T + dT`` kept row-stochastic: dT rows are centred, entries clipped at
    zero, rows renormalised.

    Unconstrained, the likelihood terms keep rewarding larger entries and the
    slack grows instead of correcting T.
    """
    track = isinstance(delta_T, Tensor)
    D = delta_T if track else Tensor(np.asarray(delta_T, dtype=np.float64))
    D = D - D.mean(axis=1, keepdims=True)
    M = clamp(Tensor(np.asarray(T, dtype=np.float64)) + D, 0.0, np.inf)
    M = M / clamp(M.sum(axis=1, keepdims=True), EPS_CLIP, np.inf)
    return M if track else M.data


def reweight(g_out, T, delta_T, label):
    """Importance weights ``g_y / ((T + dT)^T g)_y`` per row, denominator clamped.

    ``T + dT`` is the projected matrix of ``revised_T``. Gradients reach
    ``delta_T`` only; ``g`` enters as a constant.
    """
    g = g_out.data if isinstance(g_out, Tensor) else np.asarray(g_out, dtype=np.float64)
    label = np.asarray(label)
    rows = np.arange(len(label))
    TT = revised_T(T, delta_T if isinstance(delta_T, Tensor) else np.asarray(delta_T, dtype=np.float64))
    TT = TT if isinstance(TT, Tensor) else Tensor(TT)
    den = clamp((Tensor(g) @ TT)[rows, label], EPS_CLIP, np.inf)
    w = Tensor(g[rows, label]) / den
    return w if isinstance(delta_T, Tensor) else w.data


# -- generic loop -------------------------------------------------------


def _accuracy(pred, labels):
    return float(np.mean(pred == labels)) if len(labels) else 0.0


def _fit(stage, models, loss_fn, n, epochs, cfg, val_fn, history, extra=None):
    """Minibatch SGD over ``models`` (plus optional ``extra`` (param, lr_scale) pairs).

    Returns the validation accuracy of the restored best checkpoint (ties keep
    the earliest epoch).
    """
    oc = cfg.optimizer
    params = [p for m in models for p in m.parameters()]
    groups = [(SGD(params, oc.lr, oc.momentum, oc.weight_decay), 1.0)]
    for p, scale in extra or ():
        groups.append((SGD([p], oc.lr * scale, oc.momentum, oc.weight_decay), scale))
    tracked = params + [p for p, _ in extra or ()]
    rng = substream(cfg.seed, f"shuffle/{stage}")
    best_acc, best_state = -1.0, None
    for epoch in range(epochs):
        lr = lr_schedule(oc.schedule, epoch, epochs, oc.lr, oc.milestones, oc.factor)
        for opt, scale in groups:
            opt.lr = lr * scale
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            for opt, _ in groups:
                opt.zero_grad()
            loss = loss_fn(idx)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"{stage}: non-finite loss at epoch {epoch}", stage, epoch)
            loss.backward()
            for opt, _ in groups:
                opt.step()
            total += value * len(idx)
        acc = val_fn()
        history.append((epoch, stage, total / n, acc, lr))
        if acc > best_acc:
            best_acc, best_state = acc, [p.data.copy() for p in tracked]
    for p, data in zip(tracked, best_state):
        p.data = data
        p.grad = None
    return best_acc


def _new_mlp(d, out, cfg, name):
    return Mlp([d, *cfg.hidden, out], rng=substream(cfg.seed, f"init/{name}"))


def _xb(X, idx):
    return Tensor(X[idx])


# -- stages -------------------------------------------------------------


def train_ce(train, val, cfg, epochs, name, history):
    """Plain cross-entropy on noisy labels (labeler, Forward estimator, CE baseline)."""
    X, y = train.flat(), train.noisy_labels
    Xv, yv = val.flat(), val.noisy_labels
    model = _new_mlp(X.shape[1], train.c, cfg, "labeler")
    _fit(
        name, [model], lambda idx: cross_entropy(softmax(model(_xb(X, idx))), y[idx]),
        len(X), epochs, cfg, lambda: _accuracy(np.argmax(model.logits(Xv), 1), yv), history,
    )
    return model


def train_labeler(train, cfg, val=None, history=None):
    val = train if val is None else val
    return train_ce(train, val, cfg, cfg.epochs_labeler, "labeler", [] if history is None else history)


def default_crop_size(H, W):
    return max(1, int(round(min(H, W) * 22 / 28)))


def make_crop_plan(f_l, dataset, strategy="uniform", k_or_m=None, seed=0, n_crops=5):
    if strategy == "emphasized":
        m = k_or_m if k_or_m is not None else (dataset.H * dataset.W) // 4
        return plan_crops(dataset.instances, strategy, m=m, f_l=f_l, index=dataset.index)
    k = k_or_m if k_or_m is not None else default_crop_size(dataset.H, dataset.W)
    return plan_crops(dataset.instances, strategy, k=k, n_crops=n_crops, seed=seed, index=dataset.index)


def build_part_labels(f_l, dataset, strategy="uniform", k_or_m=None, seed=0, n_crops=5):
    """Part-label table, one row of c bits per instance of ``dataset``."""
    plan = make_crop_plan(f_l, dataset, strategy, k_or_m, seed, n_crops)
    return label_with_plan(f_l, dataset.instances, plan)


def train_joint_posterior(train, part_labels, cfg, val=None, history=None, g_u=None, freeze_u=False):
    """Jointly fit g_e and g_u on ``joint_loss``; returns (g_e, g_u)."""
    history = [] if history is None else history
    val = train if val is None else val
    X, y, bits = train.flat(), train.noisy_labels, np.asarray(part_labels, dtype=np.float64)
    Xv, yv = val.flat(), val.noisy_labels
    c = train.c
    g_e = _new_mlp(X.shape[1], c, cfg, "estimator")
    g_u = _new_mlp(X.shape[1], c * c, cfg, "s2m") if g_u is None else g_u

    def loss(idx):
        xb = _xb(X, idx)
        U = u_forward(g_u, xb)
        if freeze_u:
            U = U.detach()
        return joint_loss(softmax(g_e(xb)), U, y[idx], bits[idx])

    models = [g_e] if freeze_u else [g_e, g_u]
    _fit("joint_posterior", models, loss, len(X), cfg.epochs_joint, cfg,
         lambda: _accuracy(np.argmax(g_e.logits(Xv), 1), yv), history)
    return g_e, g_u


def _noisy_val_fn(model, Xv, yv, T_of):
    return lambda: _accuracy(np.argmax(predict_proba(model, Xv) @ T_of(), 1), yv)


def train_plm_classifier(train, part_labels, T, g_u, cfg, val=None, history=None):
    """Fit g under the composed risk with g_u frozen (its U is precomputed)."""
    history = [] if history is None else history
    val = train if val is None else val
    X, y, bits = train.flat(), train.noisy_labels, np.asarray(part_labels, dtype=np.float64)
    U_all = u_forward(g_u, X)
    T = np.asarray(T, dtype=np.float64)
    g = _new_mlp(X.shape[1], train.c, cfg, "classifier")
    _fit(
        "classifier", [g],
        lambda idx: corrected_risk(softmax(g(_xb(X, idx))), T, U_all[idx], y[idx], bits[idx]),
        len(X), cfg.epochs_classifier, cfg,
        _noisy_val_fn(g, val.flat(), val.noisy_labels, lambda: T), history,
    )
    return g


def train_forward_baseline(train, T, cfg, val=None, history=None):
    history = [] if history is None else history
    val = train if val is None else val
    X, y = train.flat(), train.noisy_labels
    T = np.asarray(T, dtype=np.float64)
    g = _new_mlp(X.shape[1], train.c, cfg, "classifier")
    _fit(
        "classifier", [g], lambda idx: forward_risk(softmax(g(_xb(X, idx))), T, y[idx]),
        len(X), cfg.epochs_classifier, cfg,
        _noisy_val_fn(g, val.flat(), val.noisy_labels, lambda: T), history,
    )
    return g


def train_plm_r(train, part_labels, T, g_u, cfg, val=None, history=None):
    """Fit g and the slack dT on the reweighted composed risk; returns (g, dT)."""
    history = [] if history is None else history
    val = train if val is None else val
    X, y, bits = train.flat(), train.noisy_labels, np.asarray(part_labels, dtype=np.float64)
    U_all = u_forward(g_u, X)
    T = np.asarray(T, dtype=np.float64)
    c = train.c
    g = _new_mlp(X.shape[1], c, cfg, "classifier")
    delta_T = Tensor(np.zeros((c, c)), requires_grad=True)

    def loss(idx):
        g_out = softmax(g(_xb(X, idx)))
        w = reweight(g_out, T, delta_T, y[idx])
        return corrected_risk(g_out, revised_T(T, delta_T), U_all[idx], y[idx], bits[idx], weights=w)

    extra = [(delta_T, cfg.slack_lr_scale)]
    _fit("classifier", [g], loss, len(X), cfg.epochs_classifier, cfg,
         _noisy_val_fn(g, val.flat(), val.noisy_labels, lambda: revised_T(T, delta_T.data)), history,
         extra=extra)
    return g, delta_T.data.copy()


class _Clock:
    def __init__(self, art):
        self.art = art

    def __call__(self, name):
        return _Timed(self.art, name)


class _Timed:
    def __init__(self, art, name):
        self.art, self.name = art, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, exc_type, exc, tb):
        self.art.timings_ms[self.name] = (time.perf_counter() - self.t0) * 1e3
        if exc_type is None:
            self.art.stages.append(self.name)
        elif not isinstance(exc, TrainingError):
            raise TrainingError(f"stage {self.name} failed: {exc}", self.name) from exc


def run_pipeline(cfg, dataset):
    """Run every stage of ``cfg.variant`` on a NoisyDataset (split internally)."""
    train, val = split_train_val(dataset, SplitSpec(cfg.val_fraction, cfg.seed))
    art = StageArtifacts(config=cfg.to_dict(), seed=cfg.seed,
                         train_index=train.index, val_index=val.index)
    stage = _Clock(art)
    h = art.history
    v = cfg.variant

    if v == "ce_baseline":
        with stage("classifier"):
            art.models["g"] = train_ce(train, val, cfg, cfg.epochs_labeler, "classifier", h)
        return art

    if v == "forward_baseline":
        with stage("estimator"):
            f = train_ce(train, val, cfg, cfg.epochs_labeler, "estimator", h)
            art.models["f_l"] = f
        with stage("estimate_T"):
            art.T_hat = estimate_T_from_posteriors(predict_proba(f, train.flat()), cfg.n_anchors)
        with stage("classifier"):
            art.models["g"] = train_forward_baseline(train, art.T_hat, cfg, val, h)
        return art

    with stage("labeler"):
        f_l = train_labeler(train, cfg, val, h)
        art.models["f_l"] = f_l
    k_or_m = cfg.emphasis_m if cfg.crop_strategy == "emphasized" else cfg.crop_size
    with stage("crops"):
        plan = make_crop_plan(f_l, train, cfg.crop_strategy, k_or_m, cfg.seed, cfg.n_crops)
    with stage("part_labels"):
        art.part_labels = label_with_plan(f_l, train.instances, plan)
    with stage("joint_posterior"):
        g_e, g_u = train_joint_posterior(train, art.part_labels, cfg, val, h)
        art.models["g_e"], art.models["g_u"] = g_e, g_u
    with stage("estimate_T"):
        art.T_hat = estimate_T_from_posteriors(predict_proba(g_e, train.flat()), cfg.n_anchors)
    with stage("classifier"):
        if v == "plm_f":
            art.models["g"] = train_plm_classifier(train, art.part_labels, art.T_hat, g_u, cfg, val, h)
        else:
            art.models["g"], art.delta_T = train_plm_r(train, art.part_labels, art.T_hat, g_u, cfg, val, h)
    return art
