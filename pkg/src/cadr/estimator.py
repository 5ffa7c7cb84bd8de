"""Doubly robust loss assembly and its unbiasedness checks.

The combined objective adds three pieces, each normalized by the full batch
size N: the propensity-weighted supervised term, the thresholded imputation
term (which also carries plain supervised cross-entropy), and a supplementary
correction. For a labeled sample the three collapse to L_s/p + (1 - 1/p) L_u I,
the classic doubly robust form: unbiased when either the propensity model or
the imputation is right. The dr_identity_* functions check both collapse
directions algebraically; monte_carlo_unbiasedness checks the missingness
average statistically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import P_LO, cross_entropy, cross_entropy_grad, softmax
from .propensity import ClassPrior, cap_terms, inverse_weights

# Simulation-facing ops floor a genuine labeling probability at 1e-3:
# standard IPW clipping so near-degenerate propensities cannot blow up the
# correction.
SIM_P_FLOOR = 1e-3
# The training path clips the inverse weight itself much tighter. There the
# weight turns negative on confidently-correct labels and the supplementary
# coefficient (1 - w) scales a whole cross-entropy term by it; one order of
# magnitude is the most a desk-scale run absorbs without the supplementary
# term drowning every other gradient.
IPW_CAP = 10.0
IDENTITY_TOL = 1e-9


@dataclass
class LossReport:
    """Per-batch component values; l_cadr is always their sum.

    per_sample_terms rows are (sample id, m, p, L_s, L_u, indicator) with NaN
    in slots that do not apply (p and L_s for unlabeled samples). p is the
    propensity value the loss actually used: reciprocal of the clipped inverse
    weight, +inf where the weight is zero.
    """

    l_cap: float
    l_cai: float
    l_supp: float
    l_cadr: float
    per_sample_terms: list = field(default_factory=list)


@dataclass
class BatchGrads:
    """Upstream d(loss)/d(logits) rows per forward pass; None where no gradient flows."""

    labeled_weak: np.ndarray | None
    labeled_strong: np.ndarray | None
    unlabeled_strong: np.ndarray | None
    unlabeled_weak: np.ndarray | None = None


@dataclass
class CadrBatchState:
    """Everything cadr_loss needs about one training batch.

    Weak-pass probabilities provide pseudo-labels, confidences and propensity
    inputs (all detached); strong-pass logits are what the unsupervised loss
    differentiates. Labeled samples carry their own pseudo-labels because the
    supplementary term evaluates the imputation loss on them too.
    """

    labeled_weak_probs: np.ndarray
    labels: np.ndarray
    labeled_strong_logits: np.ndarray
    labeled_pseudo: np.ndarray
    labeled_conf: np.ndarray
    labeled_thresholds: np.ndarray
    unlabeled_strong_logits: np.ndarray
    unlabeled_pseudo: np.ndarray
    unlabeled_conf: np.ndarray
    unlabeled_thresholds: np.ndarray
    prior: ClassPrior
    lambda_u: float = 1.0
    # Weight of the gradient path through the prior's dependence on the
    # current batch marginal (the log P_hat(y) term of the propensity-adjusted
    # loss). 0 keeps the prior fully detached; the trainer enables it for
    # modes that carry the propensity term. Requires unlabeled_weak_probs.
    prior_grad_scale: float = 0.0
    unlabeled_weak_probs: np.ndarray | None = None


def clipped_inverse_weights(p_y_given_x: np.ndarray, p_hat_y: np.ndarray) -> np.ndarray:
    w = inverse_weights(p_y_given_x, p_hat_y)
    return np.clip(w, -IPW_CAP, IPW_CAP)


def _floored_inverse(p: np.ndarray) -> np.ndarray:
    # Simulation-facing path: p is a genuine labeling probability in (0, 1].
    return 1.0 / np.maximum(np.asarray(p, dtype=np.float64), SIM_P_FLOOR)


def _check_labeled_propensities(m: np.ndarray, p: np.ndarray) -> None:
    labeled_p = np.asarray(p, dtype=np.float64)[np.asarray(m) == 0]
    if labeled_p.size and (np.any(~np.isfinite(labeled_p)) or np.any(labeled_p <= 0)):
        raise ConfigError("labeled samples need finite positive propensities")


def supp_loss(m: np.ndarray, p: np.ndarray, l_u: np.ndarray,
              indicators: np.ndarray, l_s: np.ndarray) -> float:
    """(1/N) sum (1-m)(1 - 1/p) L_u I  -  (1/N) sum (1-m) L_s.

    m is the missingness bit (1 = unlabeled), so only labeled samples
    contribute. Propensity entries for unlabeled samples are ignored.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ConfigError("supp_loss needs a non-empty batch")
    _check_labeled_propensities(m, p)
    w = np.where(m == 0, _floored_inverse(np.where(m == 0, p, 1.0)), 0.0)
    lab = 1.0 - m
    first = lab * (1.0 - w) * np.asarray(l_u, dtype=np.float64) * np.asarray(indicators)
    second = lab * np.asarray(l_s, dtype=np.float64)
    return float(first.mean() - second.mean())


def dr_identity_scenario1(m: np.ndarray, p: np.ndarray, l_u: np.ndarray,
                          indicators: np.ndarray) -> float:
    """Accurate-propensity collapse: L_CAI's unlabeled part + L_supp's first term.

    Returns (1/N) sum (1 - (1-m)/p) L_u I, asserting it matches the
    component-wise sum to 1e-9. The supervised cross-entropy terms cancel
    between the two components, so they do not appear here.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ConfigError("scenario 1 needs a non-empty batch")
    _check_labeled_propensities(m, p)
    l_u = np.asarray(l_u, dtype=np.float64)
    ind = np.asarray(indicators, dtype=np.float64)
    w = np.where(m == 0, _floored_inverse(np.where(m == 0, p, 1.0)), 0.0)

    simplified = float(((1.0 - (1.0 - m) * w) * l_u * ind).mean())
    cai_unlabeled = float((m * l_u * ind).mean())
    supp_first = float(((1.0 - m) * (1.0 - w) * l_u * ind).mean())
    if not math.isclose(simplified, cai_unlabeled + supp_first,
                        rel_tol=0.0, abs_tol=IDENTITY_TOL):
        raise AssertionError(
            f"scenario-1 identity violated: {simplified} vs {cai_unlabeled + supp_first}"
        )
    return simplified


def dr_identity_scenario2(m: np.ndarray, p: np.ndarray, l_s: np.ndarray,
                          l_u: np.ndarray, indicators: np.ndarray) -> float:
    """Ideal-imputation collapse: L_CAP + L_supp as one difference term.

    Returns (1/N) sum ((1-m)/p - (1-m)) (L_s - L_u I), asserting it matches
    the component path, where the CAP term uses its raw L_s/p form.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ConfigError("scenario 2 needs a non-empty batch")
    _check_labeled_propensities(m, p)
    l_s = np.asarray(l_s, dtype=np.float64)
    l_u = np.asarray(l_u, dtype=np.float64)
    ind = np.asarray(indicators, dtype=np.float64)
    w = np.where(m == 0, _floored_inverse(np.where(m == 0, p, 1.0)), 0.0)
    lab = 1.0 - m

    direct = float(((lab * w - lab) * (l_s - l_u * ind)).mean())
    cap_raw = float((lab * w * l_s).mean())
    supp = supp_loss(m, p, l_u, ind, l_s)
    if not math.isclose(direct, cap_raw + supp, rel_tol=0.0, abs_tol=IDENTITY_TOL):
        raise AssertionError(
            f"scenario-2 identity violated: {direct} vs {cap_raw + supp}"
        )
    return direct


@dataclass
class DrSimulationConfig:
    """Fixed per-sample quantities for the Monte Carlo unbiasedness check.

    Only the missingness bits are random across trials: each sample is labeled
    (m=0) with probability propensities[i], independently per trial.
    """

    n_samples: int
    trials: int
    propensities: np.ndarray
    loss_s: np.ndarray
    loss_u: np.ndarray
    indicators: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        self.propensities = np.asarray(self.propensities, dtype=np.float64)
        self.loss_s = np.asarray(self.loss_s, dtype=np.float64)
        self.loss_u = np.asarray(self.loss_u, dtype=np.float64)
        if self.indicators is None:
            self.indicators = np.ones(self.n_samples, dtype=np.float64)
        else:
            self.indicators = np.asarray(self.indicators, dtype=np.float64)
        for name, vec in (("propensities", self.propensities), ("loss_s", self.loss_s),
                          ("loss_u", self.loss_u), ("indicators", self.indicators)):
            if vec.shape != (self.n_samples,):
                raise ConfigError(f"{name} must have length n_samples={self.n_samples}")
            if not np.all(np.isfinite(vec)):
                raise ConfigError(f"{name} must be finite")
        if np.any(self.propensities <= 0) or np.any(self.propensities > 1):
            raise ConfigError("propensities must lie in (0, 1]")
        if not np.all(np.isin(self.indicators, (0.0, 1.0))):
            raise ConfigError("indicators must be 0 or 1")


def monte_carlo_unbiasedness(cfg: DrSimulationConfig, scenario: int) -> tuple[float, float]:
    """Average a scenario identity over random missingness draws.

    Each trial gets its own random stream derived from (seed, trial index), so
    results do not depend on execution order. Returns (mean, stderr) across
    trials; an unbiased estimator should have |mean| within a few stderr of 0.
    """
    if scenario not in (1, 2):
        raise ConfigError("scenario must be 1 or 2")
    if cfg.trials < 100:
        raise ConfigError("at least 100 trials required for a meaningful standard error")
    values = np.empty(cfg.trials, dtype=np.float64)
    p = cfg.propensities
    for t in range(cfg.trials):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, t))))
        m = (rng.random(cfg.n_samples) >= p).astype(np.float64)
        if scenario == 1:
            values[t] = dr_identity_scenario1(m, p, cfg.loss_u, cfg.indicators)
        else:
            values[t] = dr_identity_scenario2(m, p, cfg.loss_s, cfg.loss_u, cfg.indicators)
    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / math.sqrt(cfg.trials)) if cfg.trials > 1 else 0.0
    return mean, stderr


@dataclass
class LossComponents:
    """Component values plus per-component gradient blocks, all scaled by 1/N.

    The trainer composes mode objectives from these without re-deriving any
    math: e.g. the plain FixMatch-style objective is l_sup_ce + l_cai_unlabeled
    with gradients sup_ce_g + cai_unlabeled_g.
    """

    report: LossReport
    l_cap: float
    l_sup_ce: float
    l_cai_unlabeled: float
    l_cai: float
    l_supp: float
    cap_g_labeled_weak: np.ndarray
    sup_ce_g_labeled_weak: np.ndarray
    cai_g_unlabeled_strong: np.ndarray | None
    supp_g_labeled_strong: np.ndarray
    accepted_unlabeled: np.ndarray
    unlabeled_pseudo: np.ndarray
    # Gradient of the propensity term through the batch-marginal part of the
    # prior; None when the prior is detached (prior_grad_scale == 0).
    cap_prior_g_labeled_weak: np.ndarray | None = None
    cap_prior_g_unlabeled_weak: np.ndarray | None = None


def loss_components(state: CadrBatchState) -> LossComponents:
    """Evaluate every per-sample quantity and component once.

    All components are normalized by N = labeled + unlabeled batch size, so
    the report satisfies l_cadr = l_cap + l_cai + l_supp to float64 roundoff.
    Propensities, pseudo-labels, confidences, thresholds and the prior are
    all detached: gradients flow only through logits.
    """
    b_l = state.labeled_weak_probs.shape[0]
    b_u = state.unlabeled_strong_logits.shape[0]
    if b_l == 0:
        raise ConfigError("loss assembly needs at least one labeled sample")
    n = b_l + b_u

    # Supervised pieces on the labeled weak pass.
    cap_values, cap_rows = cap_terms(state.labeled_weak_probs, state.labels, state.prior)
    l_s = cross_entropy(state.labeled_weak_probs, state.labels)
    ce_rows = cross_entropy_grad(state.labeled_weak_probs, state.labels)

    # Detached propensity weights of the true labels.
    idx = np.arange(b_l)
    p_y = state.labeled_weak_probs[idx, state.labels]
    p_hat = state.prior.probs[np.asarray(state.labels)]
    w = clipped_inverse_weights(p_y, p_hat)

    # Imputation pieces: strong passes against detached pseudo-labels.
    lab_ind = (state.labeled_conf > state.labeled_thresholds).astype(np.float64)
    lab_strong_probs = softmax(state.labeled_strong_logits)
    l_u_lab = state.lambda_u * cross_entropy(lab_strong_probs, state.labeled_pseudo)
    lab_u_rows = state.lambda_u * cross_entropy_grad(lab_strong_probs, state.labeled_pseudo)

    if b_u:
        unlab_ind = (state.unlabeled_conf > state.unlabeled_thresholds).astype(np.float64)
        unlab_strong_probs = softmax(state.unlabeled_strong_logits)
        l_u_unlab = state.lambda_u * cross_entropy(unlab_strong_probs, state.unlabeled_pseudo)
        unlab_u_rows = state.lambda_u * cross_entropy_grad(unlab_strong_probs,
                                                           state.unlabeled_pseudo)
    else:
        unlab_ind = np.zeros(0)
        l_u_unlab = np.zeros(0)
        unlab_u_rows = None

    l_cap = float(cap_values.sum() / n)
    l_sup_ce = float(l_s.sum() / n)
    l_cai_unlabeled = float((l_u_unlab * unlab_ind).sum() / n)
    l_cai = l_cai_unlabeled + l_sup_ce
    l_supp = float(((1.0 - w) * l_u_lab * lab_ind).sum() / n) - l_sup_ce

    report = LossReport(
        l_cap=l_cap,
        l_cai=l_cai,
        l_supp=l_supp,
        l_cadr=l_cap + l_cai + l_supp,
    )
    p_used = np.divide(1.0, w, out=np.full_like(w, np.inf), where=w != 0.0)
    for i in range(b_l):
        report.per_sample_terms.append(
            (i, 0, float(p_used[i]), float(l_s[i]), float(l_u_lab[i]), float(lab_ind[i]))
        )
    for j in range(b_u):
        report.per_sample_terms.append(
            (b_l + j, 1, float("nan"), float("nan"), float(l_u_unlab[j]), float(unlab_ind[j]))
        )

    prior_g_lab = prior_g_unlab = None
    if state.prior_grad_scale > 0.0:
        prior_g_lab, prior_g_unlab = _prior_marginal_grads(state, n)

    return LossComponents(
        report=report,
        l_cap=l_cap,
        l_sup_ce=l_sup_ce,
        l_cai_unlabeled=l_cai_unlabeled,
        l_cai=l_cai,
        l_supp=l_supp,
        cap_g_labeled_weak=cap_rows / n,
        sup_ce_g_labeled_weak=ce_rows / n,
        cai_g_unlabeled_strong=(unlab_ind[:, None] * unlab_u_rows / n) if b_u else None,
        supp_g_labeled_strong=((1.0 - w) * lab_ind)[:, None] * lab_u_rows / n,
        accepted_unlabeled=unlab_ind.astype(bool),
        unlabeled_pseudo=np.asarray(state.unlabeled_pseudo, dtype=np.int64),
        cap_prior_g_labeled_weak=prior_g_lab,
        cap_prior_g_unlabeled_weak=prior_g_unlab,
    )


def _prior_marginal_grads(state: CadrBatchState,
                          n: int) -> tuple[np.ndarray, np.ndarray | None]:
    """d/d(weak logits) of the (1/N) sum log P_hat(y_i) propensity term.

    The prior's value is the moving average, but its current-step input is the
    batch marginal over every weak-pass row, so each row j receives
    J_softmax(z_j)^T a where a_c = scale * count(y==c) / (N^2 * P_hat(c)).
    """
    counts = np.bincount(np.asarray(state.labels), minlength=state.prior.probs.shape[0])
    denom = n * n * np.clip(state.prior.probs, P_LO, None)
    a = state.prior_grad_scale * counts / denom

    def rows(probs: np.ndarray) -> np.ndarray:
        inner = probs @ a
        return probs * a[None, :] - inner[:, None] * probs

    g_lab = rows(np.asarray(state.labeled_weak_probs, dtype=np.float64))
    if state.unlabeled_weak_probs is None or state.unlabeled_weak_probs.shape[0] == 0:
        return g_lab, None
    return g_lab, rows(np.asarray(state.unlabeled_weak_probs, dtype=np.float64))


def cadr_loss(state: CadrBatchState) -> tuple[LossReport, BatchGrads]:
    """Full doubly robust objective: report plus its upstream gradients.

    The supervised cross-entropy inside l_cai cancels against l_supp's
    subtraction exactly (same per-sample values), so the labeled weak-pass
    gradient reduces to the propensity-weighted rows alone.
    """
    c = loss_components(state)
    g_lw = c.cap_g_labeled_weak
    if c.cap_prior_g_labeled_weak is not None:
        g_lw = g_lw + c.cap_prior_g_labeled_weak
    return c.report, BatchGrads(
        labeled_weak=g_lw,
        labeled_strong=c.supp_g_labeled_strong,
        unlabeled_strong=c.cai_g_unlabeled_strong,
        unlabeled_weak=c.cap_prior_g_unlabeled_weak,
    )
