"""Smoke tests for the uivim extension module."""

import math

import numpy as np
import pytest

import uivim


def test_forward_signal_anchor():
    p = uivim.IvimParams(0.001, 0.01, 0.0, 1.0)
    assert uivim.forward_signal(p, 500.0) == pytest.approx(math.exp(-0.5), rel=1e-12)
    assert uivim.forward_signal(p, 0.0) == 1.0


def test_signal_gradient_matches_fd():
    p = uivim.IvimParams(0.001, 0.05, 0.3, 1.0)
    g = uivim.signal_gradient(p, 100.0)
    h = 1e-7
    hi = uivim.IvimParams(0.001, 0.05, 0.3 + h, 1.0)
    lo = uivim.IvimParams(0.001, 0.05, 0.3 - h, 1.0)
    fd = (uivim.forward_signal(hi, 100.0) - uivim.forward_signal(lo, 100.0)) / (2 * h)
    assert g[2] == pytest.approx(fd, rel=1e-6)


def test_dataset_generation_shapes_and_determinism():
    ranges = uivim.ParamRanges()
    sched = uivim.BValueSchedule.defaults()
    noise = uivim.NoiseSpec(15.0, 7, True)
    ds = uivim.generate_dataset(ranges, sched, 64, noise)
    assert ds.n_voxels == 64
    assert ds.signals.shape == (64, 11)
    assert ds.signals.dtype == np.float32
    assert ds.truth.shape == (64, 4)
    again = uivim.generate_dataset(ranges, sched, 64, noise)
    np.testing.assert_array_equal(ds.signals, again.signals)
    threaded = uivim.generate_dataset(ranges, sched, 64, noise, False, 4)
    np.testing.assert_array_equal(ds.signals, threaded.signals)


def test_dataset_roundtrip(tmp_path):
    ranges = uivim.ParamRanges()
    sched = uivim.BValueSchedule.defaults()
    ds = uivim.generate_dataset(ranges, sched, 16, uivim.NoiseSpec(20.0, 3, True))
    path = str(tmp_path / "a.ivds")
    uivim.save_dataset(path, ds)
    back = uivim.load_dataset(path)
    np.testing.assert_array_equal(ds.signals, back.signals)
    np.testing.assert_array_equal(ds.truth, back.truth)
    assert back.schedule.b == ds.schedule.b


def test_masks_counts_and_coverage():
    cfg = uivim.MaskConfig()
    cfg.n_samples = 4
    cfg.width = 8
    cfg.drop_rate = 0.5
    cfg.seed = 2
    masks = uivim.generate_masks(cfg)
    rows = masks.rows
    assert rows.shape == (4, 8)
    assert (rows.sum(axis=1) == 4).all()
    assert (rows.sum(axis=0) >= 1).all()


def _train_tiny(seed=5):
    ranges = uivim.ParamRanges()
    sched = uivim.BValueSchedule([0, 50, 150, 400, 800, 1000])
    ds = uivim.generate_dataset(ranges, sched, 192, uivim.NoiseSpec(15.0, seed, True))
    cfg = uivim.TrainingConfig()
    cfg.max_epochs = 2
    cfg.patience = 2
    cfg.batch_size = 64
    cfg.seed = seed
    net = uivim.init_network(sched, ranges, cfg.drop_rate, cfg.n_samples, cfg.seed)
    result = uivim.train(net, ds, cfg)
    return ranges, sched, ds, net, result


def test_training_and_prediction():
    ranges, sched, ds, net, result = _train_tiny()
    assert result.epochs_run >= 1
    assert len(result.train_loss) == result.epochs_run

    voxel = ds.signals[0].astype(np.float64)
    pred = uivim.predict_with_uncertainty(net, voxel)
    assert len(pred.samples) == 4
    mean = pred.mean
    assert ranges.d.min < mean.d < ranges.d.max
    assert ranges.dstar.min < mean.dstar < ranges.dstar.max
    assert ranges.f.min < mean.f < ranges.f.max
    assert ranges.s0.min < mean.s0 < ranges.s0.max
    sample_d = np.array([s.d for s in pred.samples])
    assert pred.mean.d == pytest.approx(sample_d.mean(), rel=1e-12)
    assert pred.std.d == pytest.approx(sample_d.std(), rel=1e-9, abs=1e-15)


def test_model_roundtrip(tmp_path):
    _, _, _, net, _ = _train_tiny(seed=9)
    path = str(tmp_path / "m.uivm")
    uivim.save_model(path, net)
    back = uivim.load_model(path)
    assert back.schedule.b == net.schedule.b
    assert back.seed == net.seed
    voxel = np.full(6, 0.8)
    a = uivim.predict_with_uncertainty(net, voxel)
    b = uivim.predict_with_uncertainty(back, voxel)
    assert a.mean.as_array() == b.mean.as_array()


def test_quantize_pack_simulate_agree(tmp_path):
    _, sched, ds, net, _ = _train_tiny(seed=11)
    folded = uivim.fold_batchnorm(net)
    store = uivim.pack_weights(folded)
    assert store.n_samples == 4
    assert store.packed_words() < store.dense_words()

    path = str(tmp_path / "w.uivq")
    uivim.save_store(path, store)
    back = uivim.load_store(path)
    assert back.packed_words() == store.packed_words()

    voxels = uivim.quantize_vector(ds.signals[:32].astype(np.float64).ravel())
    cfg = uivim.AcceleratorConfig()
    cfg.batch_size = 8
    res = uivim.simulate_batch_functional(store, voxels, 32, cfg, uivim.Schedule.batch_level)
    assert res.params.shape == (32 * 4, 4)
    for v in range(4):
        for s in range(4):
            ref = uivim.quantized_forward(back, voxels[v * 6 : (v + 1) * 6], s)
            got = res.params[v * 4 + s]
            assert got[0] == ref.d
            assert got[3] == ref.s0


def test_fixed_point_anchors():
    assert uivim.Q_SCALE == 4096
    assert uivim.quantize(0.5) == 2048
    assert uivim.quantize(100.0) == 32767
    assert uivim.quantize(-8.0) == -32768
    assert uivim.dequantize(2048) == 0.5


def test_latency_and_loads():
    cfg = uivim.AcceleratorConfig()
    assert uivim.pu_latency(cfg, 104) == 18
    assert uivim.count_weight_loads(cfg, uivim.Schedule.batch_level) == 4
    assert uivim.count_weight_loads(cfg, uivim.Schedule.sampling_level) == 256


def test_sweep_and_requirement():
    ranges = uivim.ParamRanges()
    sched = uivim.BValueSchedule([0, 50, 150, 400, 800, 1000])
    net = uivim.init_network(sched, ranges, 0.5, 4, 3)
    report = uivim.snr_sweep(net, ranges, sched, [5.0, 15.0], 8, 1)
    assert [row.snr for row in report.rows] == [5.0, 15.0]
    assert report.mode == "single-net"
    verdict = uivim.check_requirement(report, 0.05)
    assert isinstance(verdict.passed, bool)
    csv = uivim.sweep_csv(report)
    assert csv.startswith("snr,parameter,")


def test_timing_reports():
    ranges = uivim.ParamRanges()
    sched = uivim.BValueSchedule.profile104()
    net = uivim.init_network(sched, ranges, 0.5, 4, 21)
    store = uivim.pack_weights(uivim.fold_batchnorm(net))
    cfg = uivim.AcceleratorConfig()
    timing = uivim.estimate_timing(store, cfg, uivim.Schedule.batch_level)
    assert timing.total_cycles > 0
    assert timing.analytic_vs_event <= 0.10
    resources = uivim.estimate_resources(store, cfg)
    assert resources.dsp_used == 32 * 32
    assert resources.voxel_words == 20000 * 104
    sweep = uivim.pe_sweep_csv(store, cfg, uivim.Schedule.batch_level, [4, 8])
    assert sweep.count("\n") == 3
