"""Training loop: mode wiring, batch streams, histories, determinism."""

import numpy as np
import pytest

from cadr.data import MnarConfig, SyntheticSpec, apply_mnar_mask, generate_synthetic
from cadr.errors import ConfigError, DivergenceError
from cadr.imputation import ImputedLabel, cai_loss
from cadr.model import augment, forward, init_params, softmax
from cadr.propensity import uniform_prior
from cadr.trainer import (
    RunConfig,
    StepBatch,
    TrainHistory,
    EvalRecord,
    _IndexStream,
    load_history,
    run,
    save_history,
    step_losses,
)


def _toy_dataset(seed=0, c=4, per_class=60, d=8, n_max=10, gamma=5.0):
    spec = SyntheticSpec(class_count=c, feature_dim=d, samples_per_class=per_class,
                         class_separation=4.0, noise_scale=1.0, seed=seed)
    return apply_mnar_mask(generate_synthetic(spec),
                           MnarConfig(mode="exponential", gamma_l=gamma,
                                      n_max=n_max, seed=seed + 1))


def _small_cfg(mode="cadr", **kw):
    base = dict(mode=mode, max_iters=30, labeled_batch=16, unlabeled_ratio=3,
                hidden_dim=16, eval_every=10, seed=0)
    base.update(kw)
    return RunConfig(**base)


# ---------------------------------------------------------------- RunConfig

def test_runconfig_default_hyperparameters():
    cfg = RunConfig()
    assert cfg.tau_o == 0.95
    assert cfg.lambda_u == 1.0
    assert cfg.unlabeled_ratio == 7
    assert cfg.labeled_batch == 64
    assert cfg.learning_rate == 0.03
    assert cfg.momentum == 0.9
    assert cfg.mu == 0.99
    assert cfg.beta == 0.5
    assert cfg.mode == "cadr"
    assert cfg.max_iters == 3000


def test_runconfig_validation():
    with pytest.raises(ConfigError):
        RunConfig(mode="fixmatch")
    with pytest.raises(ConfigError):
        RunConfig(labeled_batch=0)
    with pytest.raises(ConfigError):
        RunConfig(tau_o=1.5)
    with pytest.raises(ConfigError):
        RunConfig(mu=1.0)
    with pytest.raises(ConfigError):
        RunConfig(beta=-0.1)
    with pytest.raises(ConfigError):
        RunConfig(eval_every=0)


# ------------------------------------------------------------ TrainHistory

def _record(step, c=3):
    return EvalRecord(step=step, mean_acc=0.5, gm_acc=0.4,
                      per_class_recall=np.full(c, 0.5), l_cap=0.1, l_cai=0.2,
                      l_supp=-0.05, l_cadr=0.25, loss_total=0.2,
                      accepted_counts=np.arange(c))


def test_history_enforces_monotone_steps():
    hist = TrainHistory()
    hist.append(_record(10))
    hist.append(_record(20))
    with pytest.raises(ConfigError):
        hist.append(_record(20))
    with pytest.raises(ConfigError):
        hist.append(_record(5))


def test_history_column_accessor():
    hist = TrainHistory()
    for s in (10, 20, 30):
        hist.append(_record(s))
    np.testing.assert_array_equal(hist.column("step"), [10, 20, 30])
    np.testing.assert_allclose(hist.column("mean_acc"), [0.5, 0.5, 0.5])


def test_history_round_trip_and_byte_stability(tmp_path):
    ds = _toy_dataset()
    history, _ = run(ds, _small_cfg())
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    save_history(history, p1)
    back = load_history(p1)
    assert len(back.records) == len(history.records)
    for a, b in zip(history.records, back.records):
        assert a.step == b.step
        assert a.mean_acc == b.mean_acc
        assert a.gm_acc == b.gm_acc
        np.testing.assert_array_equal(a.per_class_recall, b.per_class_recall)
        assert (a.l_cap, a.l_cai, a.l_supp, a.l_cadr) == (b.l_cap, b.l_cai,
                                                          b.l_supp, b.l_cadr)
        np.testing.assert_array_equal(a.accepted_counts, b.accepted_counts)
    save_history(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_save_history_refuses_empty(tmp_path):
    with pytest.raises(ConfigError):
        save_history(TrainHistory(), tmp_path / "x.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ConfigError):
        load_history(tmp_path / "empty.csv")


# ------------------------------------------------------------ index stream

def test_index_stream_epoch_cycling():
    rng = np.random.default_rng(0)
    pool = np.arange(7)
    stream = _IndexStream(pool, 7, rng)
    seen = [stream.next() for _ in range(3)]
    for batch in seen:
        np.testing.assert_array_equal(np.sort(batch), pool)
    # Reshuffled between epochs, not a fixed ordering.
    assert any(not np.array_equal(seen[0], b) for b in seen[1:])


def test_index_stream_small_pool_wraps():
    rng = np.random.default_rng(1)
    stream = _IndexStream(np.array([3, 5]), 5, rng)
    batch = stream.next()
    assert batch.shape == (5,)
    assert set(batch.tolist()) == {3, 5}


def test_index_stream_zero_batch():
    stream = _IndexStream(np.arange(4), 0, np.random.default_rng(2))
    assert stream.next().size == 0


# -------------------------------------------------------------- mode wiring

def _manual_batch(params, ds, cfg, seed=0):
    rng = np.random.default_rng(seed)
    li = ds.labeled_indices()[:cfg.labeled_batch]
    ui = ds.unlabeled_indices()[:cfg.labeled_batch * cfg.unlabeled_ratio]
    noise = lambda shape: rng.standard_normal(shape).astype(np.float32)
    x_l = ds.features[li]
    x_u = ds.features[ui]
    return StepBatch(
        labeled_weak=x_l + 0.01 * noise(x_l.shape),
        labeled_strong=x_l + 0.05 * noise(x_l.shape),
        labels=ds.labels[li],
        unlabeled_weak=x_u + 0.01 * noise(x_u.shape),
        unlabeled_strong=x_u + 0.05 * noise(x_u.shape),
    )


def test_baseline_step_is_fixmatch_composition():
    # Baseline must equal plain CE plus fixed-threshold pseudo-label CE,
    # assembled here independently from the imputation module.
    ds = _toy_dataset(seed=3)
    cfg = _small_cfg(mode="baseline")
    params = init_params(ds.feature_dim, cfg.hidden_dim, ds.class_count, seed=5)
    prior = uniform_prior(ds.class_count, cfg.mu)
    batch = _manual_batch(params, ds, cfg)

    new_prior, comps, total, grads = step_losses(params, prior, batch, cfg)

    probs_uw = softmax(forward(params, batch.unlabeled_weak))
    imputed = [ImputedLabel(int(np.argmax(row)), float(row.max())) for row in probs_uw]
    taus = np.full(len(imputed), cfg.tau_o)
    probs_lw = softmax(forward(params, batch.labeled_weak))
    expected_loss, g_u, g_l = cai_loss(forward(params, batch.unlabeled_strong),
                                       imputed, taus, probs_lw, batch.labels)
    np.testing.assert_allclose(total, expected_loss, atol=1e-12)
    np.testing.assert_allclose(grads.labeled_weak, g_l, atol=1e-12)
    np.testing.assert_allclose(grads.unlabeled_strong, g_u, atol=1e-12)
    assert grads.labeled_strong is None


def test_trivial_combo_total_is_cap_plus_cai():
    ds = _toy_dataset(seed=4)
    cfg = _small_cfg(mode="trivial_combo")
    params = init_params(ds.feature_dim, cfg.hidden_dim, ds.class_count, seed=6)
    prior = uniform_prior(ds.class_count, cfg.mu)
    batch = _manual_batch(params, ds, cfg)
    _, comps, total, _ = step_losses(params, prior, batch, cfg)
    np.testing.assert_allclose(total, comps.l_cap + comps.l_cai, atol=1e-12)
    assert comps.report.l_supp != 0.0


def test_cadr_total_is_report_sum():
    ds = _toy_dataset(seed=5)
    cfg = _small_cfg(mode="cadr")
    params = init_params(ds.feature_dim, cfg.hidden_dim, ds.class_count, seed=7)
    prior = uniform_prior(ds.class_count, cfg.mu)
    batch = _manual_batch(params, ds, cfg)
    _, comps, total, _ = step_losses(params, prior, batch, cfg)
    r = comps.report
    np.testing.assert_allclose(total, r.l_cadr, atol=1e-12)
    np.testing.assert_allclose(r.l_cadr, r.l_cap + r.l_cai + r.l_supp, atol=1e-9)


def test_step_losses_pure_and_prior_updates():
    ds = _toy_dataset(seed=6)
    cfg = _small_cfg(mode="cadr", mu=0.9)
    params = init_params(ds.feature_dim, cfg.hidden_dim, ds.class_count, seed=8)
    prior = uniform_prior(ds.class_count, cfg.mu)
    batch = _manual_batch(params, ds, cfg)
    p1, _, t1, _ = step_losses(params, prior, batch, cfg)
    p2, _, t2, _ = step_losses(params, prior, batch, cfg)
    assert t1 == t2
    np.testing.assert_array_equal(p1.probs, p2.probs)
    # Input prior untouched; returned prior is the EMA update.
    np.testing.assert_array_equal(prior.probs, np.full(ds.class_count,
                                                       1 / ds.class_count))
    assert not np.array_equal(p1.probs, prior.probs)


def test_forced_uniform_prior_stays_uniform():
    ds = _toy_dataset(seed=7)
    cfg = _small_cfg(mode="cadr", force_uniform_prior=True)
    params = init_params(ds.feature_dim, cfg.hidden_dim, ds.class_count, seed=9)
    prior = uniform_prior(ds.class_count, cfg.mu)
    batch = _manual_batch(params, ds, cfg)
    new_prior, comps, _, _ = step_losses(params, prior, batch, cfg)
    np.testing.assert_array_equal(new_prior.probs,
                                  np.full(ds.class_count, 1 / ds.class_count))
    assert comps.cap_prior_g_labeled_weak is None


# ---------------------------------------------------------------------- run

def test_run_zero_iters_empty_history():
    ds = _toy_dataset(seed=8)
    history, state = run(ds, _small_cfg(max_iters=0))
    assert history.records == []
    assert state.step == 0
    for t in state.params.tensors():
        assert np.isfinite(t).all()


def test_run_eval_cadence():
    ds = _toy_dataset(seed=9)
    history, _ = run(ds, _small_cfg(max_iters=10, eval_every=4))
    np.testing.assert_array_equal(history.column("step"), [4, 8, 10])


def test_run_deterministic():
    ds = _toy_dataset(seed=10)
    cfg = _small_cfg(mode="cadr", max_iters=40, eval_every=20)
    h1, s1 = run(ds, cfg)
    h2, s2 = run(ds, cfg)
    for a, b in zip(h1.records, h2.records):
        assert a.step == b.step
        assert a.mean_acc == b.mean_acc
        assert a.loss_total == b.loss_total
        np.testing.assert_array_equal(a.accepted_counts, b.accepted_counts)
    for ta, tb in zip(s1.params.tensors(), s2.params.tensors()):
        np.testing.assert_array_equal(ta, tb)


def test_run_seed_changes_trajectory():
    ds = _toy_dataset(seed=11)
    h1, _ = run(ds, _small_cfg(seed=0, max_iters=20, eval_every=20))
    h2, _ = run(ds, _small_cfg(seed=1, max_iters=20, eval_every=20))
    assert h1.records[-1].loss_total != h2.records[-1].loss_total


def test_run_all_modes_complete():
    ds = _toy_dataset(seed=12)
    for mode in ("baseline", "cap", "cai", "trivial_combo", "cadr"):
        history, _ = run(ds, _small_cfg(mode=mode, max_iters=20, eval_every=10))
        assert len(history.records) == 2
        rec = history.records[-1]
        assert np.isfinite(rec.loss_total)
        assert 0 <= rec.mean_acc <= 1
        assert rec.accepted_counts.shape == (ds.class_count,)


def test_run_holdout_evaluation_and_validation():
    ds = _toy_dataset(seed=13)
    spec = SyntheticSpec(class_count=4, feature_dim=8, samples_per_class=20,
                         class_separation=4.0, noise_scale=1.0, seed=99)
    holdout = generate_synthetic(spec)
    history, _ = run(ds, _small_cfg(max_iters=10, eval_every=10), eval_data=holdout)
    assert len(history.records) == 1
    bad = generate_synthetic(SyntheticSpec(class_count=3, feature_dim=8,
                                           samples_per_class=20, class_separation=4.0,
                                           noise_scale=1.0, seed=98))
    with pytest.raises(ConfigError):
        run(ds, _small_cfg(), eval_data=bad)


def test_run_requires_labeled_samples():
    ds = _toy_dataset(seed=14)
    unlabeled = type(ds)(features=ds.features, labels=ds.labels,
                         missing_mask=np.ones(ds.n_samples, dtype=bool),
                         class_count=ds.class_count)
    with pytest.raises(ConfigError):
        run(unlabeled, _small_cfg())


def test_run_divergence_reports_step():
    ds = _toy_dataset(seed=15)
    cfg = _small_cfg(learning_rate=1e9, max_iters=50, eval_every=50)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as exc:
            run(ds, cfg)
    assert exc.value.step is not None
    assert exc.value.step >= 1


def test_run_writes_diagnostic_logs(tmp_path):
    ds = _toy_dataset(seed=16)
    prior_log = tmp_path / "prior.csv"
    imp_log = tmp_path / "imputation.csv"
    run(ds, _small_cfg(max_iters=5, eval_every=5),
        prior_log_path=prior_log, imputation_log_path=imp_log)
    prior_lines = prior_log.read_text().strip().splitlines()
    assert prior_lines[0] == "step," + ",".join(f"prior_{k}" for k in range(4))
    assert len(prior_lines) == 6
    imp_lines = imp_log.read_text().strip().splitlines()
    assert imp_lines[0].startswith("step,accepted_0")
    assert "tau_0" in imp_lines[0]
    assert len(imp_lines) == 6


def test_separable_toy_reaches_high_accuracy_all_modes():
    spec = SyntheticSpec(class_count=2, feature_dim=2, samples_per_class=100,
                         class_separation=10.0, noise_scale=0.1, seed=1)
    ds = apply_mnar_mask(generate_synthetic(spec),
                         MnarConfig(mode="mcar", n_max=40, seed=2))
    for mode in ("baseline", "cadr"):
        cfg = RunConfig(mode=mode, max_iters=200, labeled_batch=32,
                        unlabeled_ratio=2, hidden_dim=16, eval_every=200, seed=3)
        history, _ = run(ds, cfg)
        assert history.records[-1].mean_acc >= 0.99
