"""Desk-scale per-pixel segmenter wiring samplers, schedules, and metrics together.

The model is deliberately tiny and fixed: two 3x3 convolutions (1->8 with
ReLU, 8->num_classes+1), run in float64 with hand-written forward/backward so
gradients stay checkable against finite differences.  The loss is
cross-entropy plus soft Dice, equally weighted.  Optimization is Adam with
decoupled weight decay.  Everything is driven by explicit seeds; two runs
with the same inputs produce byte-identical logs and parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import generator_from_seed
from .budget import (
    CalibratedSchedule,
    EarlyStopState,
    FixedPlan,
    ScheduleSpec,
    calibrate,
    early_stop_update,
    iterations_per_epoch as budget_ipe,
    lr_at,
)
from .corpus import SplitSpec, make_splits
from .metrics import dice_score
from .refine import hu_window_normalize
from .samplers import SamplerConfig, make_sampler

DICE_EPSILON = 1e-5
HIDDEN_CHANNELS = 8
KERNEL = 3


def _weight_matrix(w):
    # (O,C,ky,kx) -> (ky*kx*C, O), matching the patch-tensor row order below
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, w.shape[0])


def _conv_forward(x, w, b):
    """3x3 same-padding convolution; returns output and the patch tensor.

    The patch tensor is laid out (ky, kx, C, N, H, W) so the forward and both
    backward contractions are single BLAS matrix products on zero-copy views.
    """
    n, cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((KERNEL, KERNEL, cin, n, h, wd), dtype=x.dtype)
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            for c in range(cin):
                cols[ky, kx, c] = xp[:, c, ky : ky + h, kx : kx + wd]
    out = cols.reshape(KERNEL * KERNEL * cin, -1).T @ _weight_matrix(w) + b
    return np.ascontiguousarray(out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2)), cols


def _conv_backward(dout, cols, w):
    _, _, cin, n, h, wd = cols.shape
    out_ch = w.shape[0]
    colsv = cols.reshape(KERNEL * KERNEL * cin, n * h * wd)
    doutv = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(out_ch, -1)
    dw = (doutv @ colsv.T).reshape(out_ch, KERNEL, KERNEL, cin).transpose(0, 3, 1, 2)
    db = dout.sum(axis=(0, 2, 3))
    dcols = (_weight_matrix(w) @ doutv).reshape(KERNEL, KERNEL, cin, n, h, wd)
    dxp = np.zeros((cin, n, h + 2, wd + 2), dtype=dout.dtype)
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            dxp[:, :, ky : ky + h, kx : kx + wd] += dcols[ky, kx]
    dx = np.ascontiguousarray(dxp[:, :, 1 : 1 + h, 1 : 1 + wd].transpose(1, 0, 2, 3))
    return dx, dw, db


class ToyModel:
    """Fixed two-layer convolutional per-pixel classifier over flat parameters."""

    def __init__(self, num_classes):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.out_channels = num_classes + 1
        self.shapes = (
            (HIDDEN_CHANNELS, 1, KERNEL, KERNEL),
            (HIDDEN_CHANNELS,),
            (self.out_channels, HIDDEN_CHANNELS, KERNEL, KERNEL),
            (self.out_channels,),
        )
        self._sizes = [int(np.prod(s)) for s in self.shapes]
        self.n_params = sum(self._sizes)

    def init_params(self, seed):
        """Uniform +-1/sqrt(fan_in) per layer, drawn from the init stream of seed.

        Biases use their weight layer's fan-in bound. Draw order is fixed
        (w1, b1, w2, b2) so parameter vectors are reproducible from the seed.
        """
        rng = generator_from_seed(seed, "init")
        chunks = []
        for i, shape in enumerate(self.shapes):
            weight_shape = self.shapes[i if len(shape) > 1 else i - 1]
            bound = 1.0 / math.sqrt(int(np.prod(weight_shape[1:])))
            chunks.append(rng.uniform(-bound, bound, size=shape))
        return np.concatenate([c.ravel() for c in chunks])

    def unpack(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        views = []
        offset = 0
        for shape, size in zip(self.shapes, self._sizes):
            views.append(params[offset : offset + size].reshape(shape))
            offset += size
        return views

    def forward(self, params, x):
        """Logits for a batch (N,1,H,W) plus the cache backward() needs."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (N,1,H,W), got {x.shape}")
        w1, b1, w2, b2 = self.unpack(params)
        pre, cols1 = _conv_forward(x, w1, b1)
        act = np.maximum(pre, 0.0)
        logits, cols2 = _conv_forward(act, w2, b2)
        cache = (cols1, pre, cols2, w1, w2)
        return logits, cache

    def backward(self, cache, dlogits):
        """Gradient of the loss w.r.t. the flat parameter vector."""
        cols1, pre, cols2, w1, w2 = cache
        dact, dw2, db2 = _conv_backward(dlogits, cols2, w2)
        dpre = dact * (pre > 0.0)
        _, dw1, db1 = _conv_backward(dpre, cols1, w1)
        return np.concatenate([dw1.ravel(), db1.ravel(), dw2.ravel(), db2.ravel()])


def loss(logits, labels, epsilon=DICE_EPSILON):
    """Cross-entropy plus soft Dice, equally weighted; returns (value, dL/dlogits).

    CE is the mean over all pixels of -log softmax at the reference class.
    The Dice term is 1 minus the mean over foreground classes of
    (2*sum(p_c*g_c)+eps)/(sum(p_c)+sum(g_c)+eps), sums running over the whole
    batch; a class is skipped only when both sums are exactly zero.  Accepts
    (C+1,H,W) or (N,C+1,H,W) logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    single = logits.ndim == 3
    if single:
        logits = logits[None]
        labels = labels[None]
    if logits.ndim != 4:
        raise ValueError(f"expected logits of rank 3 or 4, got {logits.ndim}")
    n, n_ch, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_ch:
        raise ValueError(f"labels out of range [0, {n_ch - 1}]")

    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    sumexp = exps.sum(axis=1, keepdims=True)
    p = exps / sumexp

    n_pix = n * h * w
    ni, hi, wi = np.ogrid[:n, :h, :w]
    gathered = shifted[ni, labels, hi, wi]
    ce = float((np.log(sumexp[:, 0]) - gathered).mean())
    p_at_label = p[ni, labels, hi, wi]

    # per-class sums over the whole batch, foreground classes only
    flat_labels = labels.ravel()
    gsum = np.bincount(flat_labels, minlength=n_ch)[1:].astype(np.float64)
    inter = np.bincount(flat_labels, weights=p_at_label.ravel(), minlength=n_ch)[1:]
    psum = p[:, 1:].sum(axis=(0, 2, 3))
    keep = ~((psum == 0.0) & (gsum == 0.0))
    n_kept = int(keep.sum())
    denom = psum + gsum + epsilon
    per_class = (2.0 * inter + epsilon) / denom
    dice_term = 1.0 - float(per_class[keep].mean()) if n_kept else 0.0

    # dL/dp_c(q) for the dice term is const_c - g_coef_c * [label(q) == c]
    # (zero for background and skipped classes); with the softmax chain rule
    # the full gradient collapses to two dense passes plus a scatter at the
    # labelled positions, which also absorbs the cross-entropy's -onehot term.
    const_full = np.zeros(n_ch)
    g_coef_full = np.zeros(n_ch)
    if n_kept:
        const_full[1:] = np.where(keep, (2.0 * inter + epsilon) / denom**2, 0.0) / n_kept
        g_coef_full[1:] = np.where(keep, 2.0 / denom, 0.0) / n_kept
    inner = np.einsum("nchw,c->nhw", p, const_full)
    inner -= p_at_label * g_coef_full[labels]
    grad = p * (
        (1.0 / n_pix) + const_full[None, :, None, None] - inner[:, None, :, :]
    )
    grad[ni, labels, hi, wi] -= (1.0 / n_pix) + p_at_label * g_coef_full[labels]

    if single:
        grad = grad[0]
    return ce + dice_term, grad


@dataclass
class OptimState:
    """Adam moments plus hyperparameters; weight decay is decoupled."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def for_params(cls, n_params, lr=1e-4, weight_decay=1e-2):
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr, weight_decay=weight_decay)


def optimizer_step(params, grads, state, lr=None):
    """One decoupled-weight-decay Adam update; returns (new params, state).

    The gradient-based term uses bias-corrected moments; weight decay then
    shrinks the parameters directly, scaled by the same learning rate.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match params {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient")
    step_lr = state.lr if lr is None else lr
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params = params - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params = params - step_lr * state.weight_decay * params
    return params, state


@dataclass
class TrainLog:
    """Per-iteration loss/LR trace plus per-evaluation validation metrics."""

    class_ids: tuple
    iterations: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    stop_reason: str = ""

    def to_csv(self):
        cols = ["kind", "iter", "lr", "train_loss", "val_loss", "mean_fg_dice"]
        cols += [f"dice_{c}" for c in self.class_ids]
        lines = [",".join(cols)]
        # interleave by iteration, train row before the eval row at equal index
        rows = []
        for it, lr, tl in self.iterations:
            rows.append((it, 0, ["train", str(it), repr(lr), repr(tl), "", ""] + [""] * len(self.class_ids)))
        for it, val_loss, per_class, mean_fg in self.evaluations:
            row = ["eval", str(it), "", "", repr(val_loss), repr(mean_fg)]
            row += [repr(per_class[c]) if c in per_class else "" for c in self.class_ids]
            rows.append((it, 1, row))
        rows.sort(key=lambda r: (r[0], r[1]))
        lines += [",".join(r[2]) for r in rows]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TrainResult:
    params: np.ndarray
    log: TrainLog
    splits: object
    iters_per_epoch: int
    total_iterations: int
    epochs_run: int
    stop_reason: str
    schedule: object


def _mean_fg_dice(pred_stack, ref_stack, class_ids):
    """Global per-class Dice over stacked slices, averaged over classes present
    in reference or prediction; (per_class, mean) with absent classes at 1.0."""
    per_class = {}
    values = []
    for cid in class_ids:
        pm = pred_stack == cid
        rm = ref_stack == cid
        d = dice_score(pm, rm)
        per_class[cid] = d
        if pm.any() or rm.any():
            values.append(d)
    mean = float(np.mean(values)) if values else 1.0
    return per_class, mean


def _load_split(dataset, slice_ids):
    xs, ys = [], []
    for sid in slice_ids:
        image = dataset.volumes.image(sid).data
        labels = dataset.volumes.labels(sid).data
        xs.append(hu_window_normalize(image))
        ys.append(labels.astype(np.int64))
    return np.stack(xs)[:, None, :, :], np.stack(ys)


def _forward_chunks(model, params, x, chunk=64):
    outs = []
    for start in range(0, len(x), chunk):
        logits, _ = model.forward(params, x[start : start + chunk])
        outs.append(logits)
    return np.concatenate(outs)


def predict_labels(model, params, images):
    """Argmax class map for raw HU images of shape (N,H,W) or (H,W)."""
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    x = hu_window_normalize(images)[:, None, :, :]
    logits = _forward_chunks(model, params, x)
    pred = np.argmax(logits, axis=1).astype(np.uint8)
    return pred[0] if single else pred


def train(dataset, sampler_config, protocol, seed=0, splits=None, split_spec=None):
    """Run one training protocol to completion; fully determined by its arguments.

    ``protocol`` is a ScheduleSpec (epoch-based with LR decay and early
    stopping), a CalibratedSchedule (the same, in calibrated epochs), or a
    FixedPlan (constant LR, fixed iteration count, periodic evaluation).  The
    single ``seed`` drives parameter init and the sampler stream; the split
    seed comes from ``split_spec`` (or defaults to ``seed``).
    """
    catalog = dataset.catalog
    table = dataset.table
    if splits is None:
        splits = make_splits(table, split_spec or SplitSpec(seed=seed))
    if not splits.validation:
        raise ValueError("validation split is empty")
    if not splits.train:
        raise ValueError("train split is empty")

    train_table = table.subset(splits.train)
    config = dc_replace(sampler_config, seed=seed)
    sampler = make_sampler(train_table, config)
    ipe = sampler.iterations_per_epoch()

    model = ToyModel(len(catalog))
    params = model.init_params(seed)
    opt = OptimState.for_params(model.n_params)

    train_x, train_y = _load_split(dataset, splits.train)
    val_x, val_y = _load_split(dataset, splits.validation)
    row_of = {sid: i for i, sid in enumerate(splits.train)}

    log = TrainLog(class_ids=catalog.class_ids)

    def run_eval(iteration):
        logits = _forward_chunks(model, params, val_x)
        val_loss, _ = loss(logits, val_y)
        pred = np.argmax(logits, axis=1)
        per_class, mean_fg = _mean_fg_dice(pred, val_y, catalog.class_ids)
        log.evaluations.append((iteration, val_loss, per_class, mean_fg))
        return mean_fg

    def run_iteration(iteration, lr):
        nonlocal params, opt
        batch = sampler.next_batch()
        rows = [row_of[sid] for sid in batch.slice_ids]
        x = train_x[rows]
        y = train_y[rows]
        logits, cache = model.forward(params, x)
        value, dlogits = loss(logits, y)
        grads = model.backward(cache, dlogits)
        params, opt = optimizer_step(params, grads, opt, lr=lr)
        log.iterations.append((iteration, lr, value))

    iteration = 0
    if isinstance(protocol, FixedPlan):
        for _ in range(protocol.iterations):
            run_iteration(iteration, protocol.base_lr)
            iteration += 1
            if iteration % protocol.eval_every == 0:
                run_eval(iteration - 1)
        log.stop_reason = "fixed_budget_complete"
        epochs_run = 0
        schedule = protocol
    else:
        if isinstance(protocol, CalibratedSchedule):
            if protocol.iters_per_epoch != ipe:
                raise ValueError(
                    f"schedule calibrated for {protocol.iters_per_epoch} iterations per epoch, "
                    f"but the sampler runs {ipe}"
                )
            spec = protocol.to_schedule_spec()
        elif isinstance(protocol, ScheduleSpec):
            spec = protocol
        else:
            raise TypeError(f"unsupported protocol {type(protocol).__name__}")
        stopper = EarlyStopState(patience=spec.patience_epochs)
        epochs_run = 0
        log.stop_reason = "max_epochs"
        for epoch in range(spec.max_epochs):
            lr = lr_at(spec, epoch)
            for _ in range(ipe):
                run_iteration(iteration, lr)
                iteration += 1
            epochs_run = epoch + 1
            mean_fg = run_eval(iteration - 1)
            stopper = early_stop_update(stopper, epoch, mean_fg)
            if stopper.stopped:
                log.stop_reason = "early_stop"
                break
        schedule = spec

    return TrainResult(
        params=params,
        log=log,
        splits=splits,
        iters_per_epoch=ipe,
        total_iterations=iteration,
        epochs_run=epochs_run,
        stop_reason=log.stop_reason,
        schedule=schedule,
    )


def resolve_protocol(name, sampler_ipe, base_lr=1e-4, milestones=(30, 45), gamma=0.1,
                     patience_epochs=20, max_epochs=200, fixed_iterations=3000,
                     eval_every=100, reference_ipe=500):
    """Protocol object for a name: ``epoch``, ``fixed[:N]``, or ``calibrated``.

    ``calibrated`` converts the epoch schedule through ``reference_ipe`` into
    the sampler's own epochs, which requires knowing ``sampler_ipe`` up front.
    """
    if name == "epoch":
        return ScheduleSpec(
            base_lr=base_lr,
            milestones=milestones,
            gamma=gamma,
            patience_epochs=patience_epochs,
            max_epochs=max_epochs,
            iters_per_epoch=sampler_ipe,
        )
    if name == "fixed" or name.startswith("fixed:"):
        iters = fixed_iterations if name == "fixed" else int(name.split(":", 1)[1])
        return FixedPlan(iterations=iters, base_lr=base_lr, eval_every=eval_every)
    if name == "calibrated":
        spec = ScheduleSpec(
            base_lr=base_lr,
            milestones=milestones,
            gamma=gamma,
            patience_epochs=patience_epochs,
            max_epochs=max_epochs,
            iters_per_epoch=reference_ipe,
        )
        return calibrate(spec, reference_ipe, sampler_ipe)
    raise ValueError(f"unknown protocol {name!r}")


class ToySegmenter(BaseEstimator):
    """Estimator facade over train(): fit on a loaded dataset, predict label maps.

    Parameters are stored verbatim; fit() resolves splits, sampler, and
    protocol, runs training, and exposes the result as fitted attributes
    (``params_``, ``log_``, ``result_``).
    """

    def __init__(
        self,
        strategy="episodic",
        protocol="epoch",
        seed=0,
        batch_size=16,
        classes_per_episode=2,
        supports_per_class=3,
        queries_per_class=3,
        episodes_per_epoch=500,
        supervision_source="queries",
        base_lr=1e-4,
        milestones=(30, 45),
        gamma=0.1,
        patience_epochs=20,
        max_epochs=200,
        fixed_iterations=3000,
        eval_every=100,
        reference_ipe=500,
        dev_fraction=0.85,
        folds=5,
        fold=0,
        subsample_fraction=None,
    ):
        self.strategy = strategy
        self.protocol = protocol
        self.seed = seed
        self.batch_size = batch_size
        self.classes_per_episode = classes_per_episode
        self.supports_per_class = supports_per_class
        self.queries_per_class = queries_per_class
        self.episodes_per_epoch = episodes_per_epoch
        self.supervision_source = supervision_source
        self.base_lr = base_lr
        self.milestones = milestones
        self.gamma = gamma
        self.patience_epochs = patience_epochs
        self.max_epochs = max_epochs
        self.fixed_iterations = fixed_iterations
        self.eval_every = eval_every
        self.reference_ipe = reference_ipe
        self.dev_fraction = dev_fraction
        self.folds = folds
        self.fold = fold
        self.subsample_fraction = subsample_fraction

    def fit(self, dataset, y=None):
        split_spec = SplitSpec(
            dev_fraction=self.dev_fraction,
            folds=self.folds,
            fold=self.fold,
            subsample_fraction=self.subsample_fraction,
            seed=self.seed,
        )
        splits = make_splits(dataset.table, split_spec)
        config = SamplerConfig(
            strategy=self.strategy,
            batch_size=self.batch_size,
            classes_per_episode=self.classes_per_episode,
            supports_per_class=self.supports_per_class,
            queries_per_class=self.queries_per_class,
            episodes_per_epoch=self.episodes_per_epoch,
            supervision_source=self.supervision_source,
            seed=self.seed,
        )
        if self.strategy == "episodic":
            ipe = self.episodes_per_epoch
        else:
            ipe = budget_ipe(len(splits.train), batch_size=self.batch_size)
        protocol = resolve_protocol(
            self.protocol,
            ipe,
            base_lr=self.base_lr,
            milestones=self.milestones,
            gamma=self.gamma,
            patience_epochs=self.patience_epochs,
            max_epochs=self.max_epochs,
            fixed_iterations=self.fixed_iterations,
            eval_every=self.eval_every,
            reference_ipe=self.reference_ipe,
        )
        result = train(dataset, config, protocol, seed=self.seed, splits=splits)
        self.result_ = result
        self.params_ = result.params
        self.log_ = result.log
        self.model_ = ToyModel(len(dataset.catalog))
        self.classes_ = np.asarray(dataset.catalog.class_ids)
        return self

    def predict(self, X):
        if not hasattr(self, "params_"):
            raise RuntimeError("not fitted; call fit(dataset) first")
        return predict_labels(self.model_, self.params_, X)

    def score(self, X, y):
        """Mean foreground Dice of predictions against reference label maps."""
        pred = self.predict(X)
        _, mean_fg = _mean_fg_dice(np.asarray(pred), np.asarray(y), tuple(self.classes_))
        return mean_fg
