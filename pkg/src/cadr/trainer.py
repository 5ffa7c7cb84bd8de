"""Training loop tying the pieces together.

Each step follows a fixed order: sample labeled/unlabeled batches, augment,
forward both weak passes, update the EMA class prior from their combined
softmax outputs, pseudo-label from weak probabilities, derive acceptance
thresholds, forward the strong passes, assemble losses for the configured
mode, and take one heavy-ball SGD step with L2 weight decay folded into the
gradient. The full four-component loss report is computed every step in every
mode; the mode only decides which components the gradient uses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import imputation, metrics, propensity
from .data import Dataset
from .errors import ConfigError, DivergenceError
from .estimator import BatchGrads, CadrBatchState, LossComponents, loss_components
from .model import (AugmentConfig, ModelParams, OptimizerState, augment, backward, forward,
                    init_optimizer, init_params, predict, sgd_step, softmax)

TRAIN_MODES = ("baseline", "cap", "cai", "trivial_combo", "cadr")

# Modes whose supervised term is propensity-weighted, and modes whose
# acceptance thresholds are class-aware rather than fixed at tau_o.
_CAP_MODES = ("cap", "trivial_combo", "cadr")
_CAI_MODES = ("cai", "trivial_combo", "cadr")

# Weight on the gradient path through the prior's dependence on the batch
# marginal, for modes carrying the propensity term. The EMA smooths the
# prior's value; this scales how hard the marginal is steered. 1.0 treats the
# prior as the raw batch marginal and over-rotates at desk scale; (1 - mu)
# is the literal EMA derivative and is too slow to matter.
PRIOR_PATH_GAIN = 0.3


@dataclass
class RunConfig:
    """Hyper-parameters for one training run. Defaults are the desk-scale set."""

    mode: str = "cadr"
    max_iters: int = 3000
    labeled_batch: int = 64
    unlabeled_ratio: int = 7
    hidden_dim: int = 64
    tau_o: float = 0.95
    beta: float = 0.5
    mu: float = 0.99
    lambda_u: float = 1.0
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0005
    eval_every: int = 100
    seed: int = 0
    weak_noise_scale: float = 0.05
    strong_noise_scale: float = 0.15
    strong_mask_fraction: float = 0.25
    force_uniform_prior: bool = False

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.labeled_batch < 1:
            raise ConfigError("labeled_batch must be >= 1")
        if self.unlabeled_ratio < 0:
            raise ConfigError("unlabeled_ratio must be >= 0")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if not 0 < self.tau_o <= 1:
            raise ConfigError("tau_o must be in (0, 1]")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0 <= self.mu < 1:
            raise ConfigError("mu must be in [0, 1)")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        # learning_rate/momentum ranges are enforced by init_optimizer,
        # noise scales and mask fraction by AugmentConfig.


@dataclass
class EvalRecord:
    step: int
    mean_acc: float
    gm_acc: float
    per_class_recall: np.ndarray
    l_cap: float
    l_cai: float
    l_supp: float
    l_cadr: float
    loss_total: float
    accepted_counts: np.ndarray


@dataclass
class TrainHistory:
    records: list[EvalRecord] = field(default_factory=list)

    def append(self, rec: EvalRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ConfigError("history steps must be strictly increasing")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def save_history(history: TrainHistory, path) -> None:
    """History CSV: one row per evaluation, stable column order and formatting."""
    if not history.records:
        raise ConfigError("refusing to write an empty history")
    c = len(history.records[0].per_class_recall)
    header = (["step", "mean_acc", "gm_acc"]
              + [f"recall_{k}" for k in range(c)]
              + ["l_cap", "l_cai", "l_supp", "l_cadr", "loss_total"]
              + [f"accepted_{k}" for k in range(c)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in history.records:
            row = ([r.step, repr(float(r.mean_acc)), repr(float(r.gm_acc))]
                   + [repr(float(v)) for v in r.per_class_recall]
                   + [repr(float(v)) for v in (r.l_cap, r.l_cai, r.l_supp, r.l_cadr,
                                               r.loss_total)]
                   + [int(v) for v in r.accepted_counts])
            writer.writerow(row)


def load_history(path) -> TrainHistory:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty history file")
    header = rows[0]
    recall_cols = [i for i, h in enumerate(header) if h.startswith("recall_")]
    accepted_cols = [i for i, h in enumerate(header) if h.startswith("accepted_")]
    idx = {h: i for i, h in enumerate(header)}
    history = TrainHistory()
    for row in rows[1:]:
        history.append(EvalRecord(
            step=int(row[idx["step"]]),
            mean_acc=float(row[idx["mean_acc"]]),
            gm_acc=float(row[idx["gm_acc"]]),
            per_class_recall=np.array([float(row[i]) for i in recall_cols]),
            l_cap=float(row[idx["l_cap"]]),
            l_cai=float(row[idx["l_cai"]]),
            l_supp=float(row[idx["l_supp"]]),
            l_cadr=float(row[idx["l_cadr"]]),
            loss_total=float(row[idx["loss_total"]]),
            accepted_counts=np.array([int(row[i]) for i in accepted_cols]),
        ))
    return history


class _IndexStream:
    """Cycles a sample pool in shuffled order, reshuffling on wraparound."""

    def __init__(self, indices: np.ndarray, batch: int, rng: np.random.Generator):
        self.indices = np.asarray(indices)
        self.batch = batch
        self.rng = rng
        self.order = rng.permutation(self.indices) if self.indices.size else self.indices
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.batch == 0 or self.indices.size == 0:
            return np.zeros(0, dtype=np.int64)
        out = []
        while len(out) < self.batch:
            if self.pos >= self.order.size:
                self.order = self.rng.permutation(self.indices)
                self.pos = 0
            take = min(self.batch - len(out), self.order.size - self.pos)
            out.extend(self.order[self.pos:self.pos + take].tolist())
            self.pos += take
        return np.array(out, dtype=np.int64)


@dataclass
class StepBatch:
    """Augmented views of one step's samples; produced by TrainState.next_batch."""

    labeled_weak: np.ndarray
    labeled_strong: np.ndarray
    labels: np.ndarray
    unlabeled_weak: np.ndarray
    unlabeled_strong: np.ndarray


@dataclass
class TrainState:
    params: ModelParams
    opt: OptimizerState
    prior: propensity.ClassPrior
    aug_cfg: AugmentConfig
    step: int = 0


def step_losses(params: ModelParams, prior: propensity.ClassPrior, batch: StepBatch,
                cfg: RunConfig, mode: str | None = None,
                ) -> tuple[propensity.ClassPrior, LossComponents, float, BatchGrads]:
    """Pure per-step computation: prior update, loss assembly, mode objective.

    Returns (updated prior, components, mode total, upstream gradients).
    Exposed separately from train_step so two modes can be evaluated on
    identical parameters and batches.
    """
    mode = cfg.mode if mode is None else mode
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown mode {mode!r}")

    probs_lw = softmax(forward(params, batch.labeled_weak))
    b_u = batch.unlabeled_weak.shape[0]
    probs_uw = softmax(forward(params, batch.unlabeled_weak)) if b_u else np.zeros((0, probs_lw.shape[1]))

    marginal = propensity.batch_class_marginal(np.concatenate([probs_lw, probs_uw], axis=0))
    if cfg.force_uniform_prior:
        new_prior = propensity.uniform_prior(prior.probs.shape[0], prior.momentum)
    else:
        new_prior = propensity.update_prior(prior, marginal)

    lab_pseudo, lab_conf = imputation.argmax_confidence(probs_lw)
    unlab_pseudo, unlab_conf = imputation.argmax_confidence(probs_uw)

    if mode in _CAI_MODES:
        taus = imputation.class_thresholds(new_prior,
                                           imputation.ThresholdConfig(cfg.tau_o, cfg.beta))
        lab_taus = taus[lab_pseudo]
        unlab_taus = taus[unlab_pseudo]
    else:
        lab_taus = np.full(lab_pseudo.shape, cfg.tau_o)
        unlab_taus = np.full(unlab_pseudo.shape, cfg.tau_o)

    # Modes that carry the propensity term also train through the prior's
    # dependence on the predicted class marginal. A forced-uniform prior has
    # no such dependence.
    prior_scale = 0.0
    if mode in _CAP_MODES and not cfg.force_uniform_prior:
        prior_scale = PRIOR_PATH_GAIN

    comps = loss_components(CadrBatchState(
        labeled_weak_probs=probs_lw,
        labels=batch.labels,
        labeled_strong_logits=forward(params, batch.labeled_strong),
        labeled_pseudo=lab_pseudo,
        labeled_conf=lab_conf,
        labeled_thresholds=lab_taus,
        unlabeled_strong_logits=forward(params, batch.unlabeled_strong),
        unlabeled_pseudo=unlab_pseudo,
        unlabeled_conf=unlab_conf,
        unlabeled_thresholds=unlab_taus,
        prior=new_prior,
        lambda_u=cfg.lambda_u,
        prior_grad_scale=prior_scale,
        unlabeled_weak_probs=probs_uw,
    ))

    g_uw = None
    if mode in ("baseline", "cai"):
        total = comps.l_cai
        g_lw = comps.sup_ce_g_labeled_weak
        g_ls = None
    elif mode == "cap":
        total = comps.l_cap + comps.l_cai_unlabeled
        g_lw = comps.cap_g_labeled_weak
        g_ls = None
    elif mode == "trivial_combo":
        total = comps.l_cap + comps.l_cai
        g_lw = comps.cap_g_labeled_weak + comps.sup_ce_g_labeled_weak
        g_ls = None
    else:  # cadr; CAI's CE and supp's -CE cancel, leaving the CAP rows
        total = comps.report.l_cadr
        g_lw = comps.cap_g_labeled_weak
        g_ls = comps.supp_g_labeled_strong
    if comps.cap_prior_g_labeled_weak is not None:
        g_lw = g_lw + comps.cap_prior_g_labeled_weak
        g_uw = comps.cap_prior_g_unlabeled_weak
    grads = BatchGrads(labeled_weak=g_lw, labeled_strong=g_ls,
                       unlabeled_strong=comps.cai_g_unlabeled_strong,
                       unlabeled_weak=g_uw)
    return new_prior, comps, float(total), grads


def train_step(state: TrainState, labeled: tuple[np.ndarray, np.ndarray],
               unlabeled: np.ndarray, cfg: RunConfig,
               rngs: dict[str, np.random.Generator]) -> LossComponents:
    """One optimization step on raw (un-augmented) batches; mutates state."""
    x_l, y_l = labeled
    batch = StepBatch(
        labeled_weak=augment(x_l, state.aug_cfg, "weak", rngs["weak_l"]),
        labeled_strong=augment(x_l, state.aug_cfg, "strong", rngs["strong_l"]),
        labels=y_l,
        unlabeled_weak=augment(unlabeled, state.aug_cfg, "weak", rngs["weak_u"]),
        unlabeled_strong=augment(unlabeled, state.aug_cfg, "strong", rngs["strong_u"]),
    )
    new_prior, comps, total, bgrads = step_losses(state.params, state.prior, batch, cfg)
    state.prior = new_prior

    grads = None
    for inputs, rows in ((batch.labeled_weak, bgrads.labeled_weak),
                         (batch.labeled_strong, bgrads.labeled_strong),
                         (batch.unlabeled_strong, bgrads.unlabeled_strong),
                         (batch.unlabeled_weak, bgrads.unlabeled_weak)):
        if rows is None or inputs.shape[0] == 0:
            continue
        g = backward(state.params, inputs, rows)
        if grads is None:
            grads = g
        else:
            for acc, t in zip(grads.tensors(), g.tensors()):
                acc += t
    if cfg.weight_decay:
        for acc, theta in zip(grads.tensors(), state.params.tensors()):
            acc += cfg.weight_decay * theta

    try:
        sgd_step(state.params, state.opt, grads)
    except DivergenceError as e:
        raise DivergenceError(f"training diverged at step {state.step + 1}",
                              step=state.step + 1) from e
    state.step += 1
    return comps


def _evaluate(params: ModelParams, features: np.ndarray, labels: np.ndarray,
              class_count: int) -> tuple[float, float, np.ndarray]:
    cm = metrics.confusion(predict(params, features), labels, class_count)
    return metrics.mean_accuracy(cm), metrics.gm_accuracy(cm), metrics.per_class_recall(cm)


def run(dataset: Dataset, cfg: RunConfig, eval_data: Dataset | None = None,
        prior_log_path=None, imputation_log_path=None) -> tuple[TrainHistory, TrainState]:
    """Train for cfg.max_iters steps; evaluate every cfg.eval_every steps.

    Evaluation uses un-augmented features: eval_data when given, otherwise the
    training features against their ground-truth labels (which masking never
    removes). Accepted-pseudo-label counts are accumulated per class between
    evaluations. Two calls with the same inputs produce identical histories.
    """
    labeled_idx = dataset.labeled_indices()
    if labeled_idx.size == 0:
        raise ConfigError("training requires at least one labeled sample")
    if eval_data is not None:
        if eval_data.class_count != dataset.class_count:
            raise ConfigError("eval class_count differs from training data")
        if eval_data.feature_dim != dataset.feature_dim:
            raise ConfigError("eval feature_dim differs from training data")
    eval_x = dataset.features if eval_data is None else eval_data.features
    eval_y = dataset.labels if eval_data is None else eval_data.labels

    root = np.random.SeedSequence(cfg.seed)
    ss = root.spawn(7)
    params = init_params(dataset.feature_dim, cfg.hidden_dim, dataset.class_count,
                         seed=ss[0], dtype=np.float32)
    opt = init_optimizer(params, cfg.learning_rate, cfg.momentum)
    feature_std = float(dataset.features.std())
    if feature_std == 0:
        feature_std = 1.0
    state = TrainState(
        params=params,
        opt=opt,
        prior=propensity.uniform_prior(dataset.class_count, cfg.mu),
        aug_cfg=AugmentConfig(
            weak_noise_sigma=cfg.weak_noise_scale * feature_std,
            strong_noise_sigma=cfg.strong_noise_scale * feature_std,
            strong_mask_fraction=cfg.strong_mask_fraction,
        ),
    )
    labeled_stream = _IndexStream(labeled_idx, cfg.labeled_batch,
                                  np.random.Generator(np.random.PCG64(ss[1])))
    unlabeled_stream = _IndexStream(dataset.unlabeled_indices(),
                                    cfg.labeled_batch * cfg.unlabeled_ratio,
                                    np.random.Generator(np.random.PCG64(ss[2])))
    rngs = {name: np.random.Generator(np.random.PCG64(s))
            for name, s in zip(("weak_l", "strong_l", "weak_u", "strong_u"), ss[3:])}

    prior_rows = []
    imputation_rows = []
    history = TrainHistory()
    accepted_window = np.zeros(dataset.class_count, dtype=np.int64)
    for t in range(1, cfg.max_iters + 1):
        li = labeled_stream.next()
        ui = unlabeled_stream.next()
        comps = train_step(state, (dataset.features[li], dataset.labels[li]),
                           dataset.features[ui], cfg, rngs)
        accepted_window += _accepted_counts(comps, dataset.class_count)
        if prior_log_path is not None:
            prior_rows.append([t] + [repr(float(v)) for v in state.prior.probs])
        if imputation_log_path is not None:
            taus = imputation.class_thresholds(
                state.prior, imputation.ThresholdConfig(cfg.tau_o, cfg.beta))
            imputation_rows.append(
                [t] + [int(v) for v in _accepted_counts(comps, dataset.class_count)]
                + [repr(float(v)) for v in taus])

        if t % cfg.eval_every == 0 or t == cfg.max_iters:
            mean_acc, gm_acc, recalls = _evaluate(state.params, eval_x, eval_y,
                                                  dataset.class_count)
            r = comps.report
            history.append(EvalRecord(
                step=t, mean_acc=mean_acc, gm_acc=gm_acc, per_class_recall=recalls,
                l_cap=r.l_cap, l_cai=r.l_cai, l_supp=r.l_supp, l_cadr=r.l_cadr,
                loss_total=float(_mode_total(comps, cfg.mode)),
                accepted_counts=accepted_window.copy(),
            ))
            accepted_window[:] = 0

    if prior_log_path is not None:
        _write_rows(prior_log_path,
                    ["step"] + [f"prior_{k}" for k in range(dataset.class_count)], prior_rows)
    if imputation_log_path is not None:
        _write_rows(imputation_log_path,
                    ["step"] + [f"accepted_{k}" for k in range(dataset.class_count)]
                    + [f"tau_{k}" for k in range(dataset.class_count)], imputation_rows)
    return history, state


def _accepted_counts(comps: LossComponents, class_count: int) -> np.ndarray:
    """Accepted unlabeled pseudo-labels per pseudo-class for one step."""
    if comps.unlabeled_pseudo.size == 0:
        return np.zeros(class_count, dtype=np.int64)
    return np.bincount(comps.unlabeled_pseudo[comps.accepted_unlabeled],
                       minlength=class_count)


def _mode_total(comps: LossComponents, mode: str) -> float:
    if mode in ("baseline", "cai"):
        return comps.l_cai
    if mode == "cap":
        return comps.l_cap + comps.l_cai_unlabeled
    if mode == "trivial_combo":
        return comps.l_cap + comps.l_cai
    return comps.report.l_cadr


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
