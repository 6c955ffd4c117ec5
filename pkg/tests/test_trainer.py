import dataclasses

import numpy as np
import pytest

from ptsfa import numerics, trainer
from ptsfa.datagen import PointCloudDataset, generate_domain
from ptsfa.errors import ConfigError
from ptsfa.experiment import make_benchmark
from ptsfa.losses import AugmentationContext
from ptsfa.model import encode_dataset, init_params

SMALL = trainer.RunConfig(epochs=6, warmup=2, tau=2, seed=3)


@pytest.fixture(scope="module")
def data():
    return make_benchmark(seed=1, classes=3, points=32, train_per_class=6, test_per_class=4)


def _params_snapshot(store):
    def hook(report, params):
        store.append(params.copy())

    return hook


def test_one_report_per_epoch_and_schedules(data):
    out = trainer.train(SMALL, data)
    assert [r.epoch for r in out.reports] == list(range(6))
    assert [r.stage for r in out.reports] == [-1, -1, 0, 0, 1, 1]
    assert [s.stage for s in out.stages] == [0, 1]
    for r in out.reports:
        assert r.lr == numerics.cosine_lr(r.epoch, 6, SMALL.lr0)
        assert r.lam == r.epoch / 6 * SMALL.lambda0
        assert 0.0 <= r.src_acc <= 1.0 and 0.0 <= r.tgt_acc <= 1.0
    assert out.reports[0].losses.ida_s == 0.0 and out.reports[0].losses.ida_t == 0.0


def test_same_seed_same_reports(data):
    a = trainer.train(SMALL, data)
    b = trainer.train(SMALL, data)
    assert a.reports == b.reports
    for name, arr in a.params.as_dict().items():
        assert np.array_equal(arr, getattr(b.params, name)), name


def test_seed_changes_the_run(data):
    a = trainer.train(SMALL, data)
    b = trainer.train(dataclasses.replace(SMALL, seed=4), data)
    assert not np.array_equal(a.params.W1, b.params.W1)


def test_warmup_ignores_target_data(data):
    other = trainer.Datasets(
        data.source_train,
        data.source_test,
        generate_domain(3, 6, 32, seed=99),
        data.target_test,
    )
    snaps_a, snaps_b = [], []
    trainer.train(SMALL, data, on_epoch_end=_params_snapshot(snaps_a))
    trainer.train(SMALL, other, on_epoch_end=_params_snapshot(snaps_b))
    for epoch in range(SMALL.warmup):
        for name, arr in snaps_a[epoch].as_dict().items():
            assert np.array_equal(arr, getattr(snaps_b[epoch], name)), (epoch, name)
    assert not np.array_equal(snaps_a[-1].W2, snaps_b[-1].W2)


def test_null_objective_only_decays(data):
    cfg = dataclasses.replace(SMALL, warmup=0, alpha=0.0, beta=0.0, gamma=0.0)
    start = init_params(3, trainer._streams(cfg.seed)[0])
    out = trainer.train(cfg, data)
    n_batches = -(-max(len(data.source_train), len(data.target_train)) // cfg.batch_source)
    factor = 1.0
    for epoch in range(cfg.epochs):
        lr = numerics.cosine_lr(epoch, cfg.epochs, cfg.lr0)
        factor *= (1.0 - lr * cfg.weight_decay) ** n_batches
    for name, arr in out.params.as_dict().items():
        np.testing.assert_allclose(arr, getattr(start, name) * factor, rtol=1e-12, atol=0,
                                   err_msg=name)


def test_null_objective_has_zero_gradient(data):
    rng = np.random.default_rng(0)
    p = init_params(3, rng)
    p.W[:] = rng.normal(size=p.W.shape)
    D = p.W.shape[1]
    ctx = AugmentationContext(rng.normal(size=(3, D)), np.ones((3, D)), 0.2)
    src, tgt = data.source_train, data.target_train
    _, grads, _ = trainer.objective_and_grads(
        p, src.points[:4], src.labels[:4], tgt.points[:4], tgt.labels[:4], ctx,
        rng.normal(size=(3, D)), np.ones(3, bool), 2.0, 0.0, 0.0, 0.0,
    )
    for name, g in grads.items():
        assert not g.any(), name


def test_stage_context_is_frozen(data, monkeypatch):
    seen = []
    orig = trainer.objective_and_grads

    def spy(params, sp, sy, tp, ty, ctx, means, valid, *args):
        seen.append((ctx.delta_mu.copy(), ctx.cov.copy(), means.copy(), ty.copy(), ctx.lam))
        return orig(params, sp, sy, tp, ty, ctx, means, valid, *args)

    monkeypatch.setattr(trainer, "objective_and_grads", spy)
    reports = trainer.train(SMALL, data).reports
    per_epoch = -(-max(len(data.source_train), len(data.target_train)) // SMALL.batch_source)
    assert len(seen) == per_epoch * 4
    for stage in range(2):
        block = seen[stage * 2 * per_epoch : (stage + 1) * 2 * per_epoch]
        for dmu, cov, means, _, lam in block:
            assert np.array_equal(dmu, block[0][0])
            assert np.array_equal(cov, block[0][1])
            assert np.array_equal(means, block[0][2])
            assert lam in (reports[2 + 2 * stage].lam, reports[3 + 2 * stage].lam)


def test_tsfa_plan_and_weights():
    cfg = trainer.RunConfig(method="tsfa")
    plan = cfg.plan()
    assert (plan.sigma_s0, plan.sigma_t0, plan.delta_sigma_s, plan.delta_sigma_t) == (0, 1, 0, 0)
    assert cfg.weights() == (1.0, 0.0, 0.0)
    assert trainer.RunConfig(method="ptsfa").weights() == (1.0, 0.0, 0.0)
    assert trainer.RunConfig().weights() == (1.0, 1.0, 1.0)


def test_source_only_never_adapts(data):
    out = trainer.train(dataclasses.replace(SMALL, method="source_only"), data)
    assert out.stages == []
    assert all(r.losses.ida_t == 0.0 for r in out.reports)


def test_evaluate_zero_model():
    ds = generate_domain(5, 2, 16, seed=0)
    res = trainer.evaluate(init_params(5, np.random.default_rng(0)), ds)
    assert res.accuracy == pytest.approx(0.2)
    np.testing.assert_array_equal(res.confusion[:, 0], 2)
    np.testing.assert_array_equal(res.per_class_counts, np.bincount(ds.labels))


def test_evaluate_perfect_predictor():
    rng = np.random.default_rng(1)
    p = init_params(3, rng)
    p.W[:] = rng.normal(size=p.W.shape)
    pts = generate_domain(3, 4, 16, seed=2).points[:10]
    feats = encode_dataset(pts, p)
    labels = np.argmax(feats @ p.W.T + p.b, axis=1)
    res = trainer.evaluate(p, PointCloudDataset(pts, labels, 3))
    assert res.accuracy == 1.0
    assert np.trace(res.confusion) == 10


def test_dataset_mismatch(data):
    bad = trainer.Datasets(data.source_train, data.source_test,
                           generate_domain(4, 2, 32, seed=0), data.target_test)
    with pytest.raises(ConfigError, match="num_classes"):
        trainer.train(SMALL, bad)


def test_spl_thresholds_exact():
    th = trainer.spl_thresholds(trainer.RunConfig())
    assert th == [0.8, 0.81, 0.82, 0.83, 0.84, 0.85, 0.86, 0.87, 0.88, 0.89]


def test_spl_frozen_counts_non_increasing(data):
    p = trainer.train(SMALL, data).params
    cfg = dataclasses.replace(SMALL, lr0=0.0, spl_threshold0=0.3, spl_step=0.05)
    before = p.copy()
    _, records = trainer.spl_finetune(p, cfg, data, epochs_per_circle=1)
    counts = [r.selected for r in records]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert np.array_equal(p.W, before.W)


def test_spl_unreachable_threshold_runs_source_only(data):
    p = trainer.train(SMALL, data).params
    cfg = dataclasses.replace(SMALL, spl_threshold0=1.01, spl_circles=2)
    _, records = trainer.spl_finetune(p, cfg, data, epochs_per_circle=1)
    assert [r.selected for r in records] == [0, 0]


def test_config_text_round_trip():
    cfg = trainer.RunConfig(epochs=7, warmup=2, full_covariance=True, method="ptsfa", kappa=0.5)
    assert trainer.RunConfig.from_text(cfg.to_text()) == cfg


def test_config_errors():
    with pytest.raises(ConfigError, match="'bogus'"):
        trainer.RunConfig.from_text("epochs = 5\nbogus = 1\n")
    with pytest.raises(ConfigError, match="'epochs'"):
        trainer.RunConfig.from_text("epochs = five\n")
    with pytest.raises(ConfigError, match="line 1"):
        trainer.RunConfig.from_text("epochs 5\n")
    with pytest.raises(ConfigError):
        trainer.RunConfig(method="nope")
    with pytest.raises(ConfigError):
        trainer.RunConfig(epochs=5, warmup=5)


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "run.cfg").write_text("data_dir = data  # comment\nseed = 2\n")
    cfg = trainer.RunConfig.from_file(tmp_path / "run.cfg")
    assert cfg.split_path("target_test") == tmp_path / "data" / "target_test.pcds"
    assert cfg.seed == 2
    with pytest.raises(ConfigError):
        trainer.RunConfig().split_path("source_train")
