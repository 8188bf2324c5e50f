import numpy as np
import pytest

from dntdf.arch import DecoderConfig, build_model
from dntdf.data import synth_generate
from dntdf.metrics import metric_report
from dntdf.train import (RunConfig, TrainingDiverged, evaluate, load_config, load_model, parse_config, predict,
                         save_model, train)


def small_cfg(**kw):
    base = dict(epochs=1, synth_n=8, input_size=64, augment=False)
    base.update(kw)
    return RunConfig(**base)


def test_parse_config_grammar():
    text = """
    # comment line
    backbone = tiny      # trailing comment
    r = 2
    lr = 1e-3
    scales = 0.8, 1.0, 1.2
    widths = [8, 16, 32, 64, 128]
    augment = false
    model = "out/model.npz"
    """
    got = parse_config(text)
    assert got == {"backbone": "tiny", "r": 2, "lr": 1e-3, "scales": [0.8, 1.0, 1.2],
                   "widths": [8, 16, 32, 64, 128], "augment": False, "model": "out/model.npz"}


def test_parse_config_errors():
    with pytest.raises(ValueError, match="line 1"):
        parse_config("no equals sign")
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"epochz": 3})


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)
    with pytest.raises(ValueError):
        RunConfig(scales=())


def test_lr_drop_schedule():
    cfg = RunConfig(epochs=30, lr=1e-3)
    assert cfg.drop_epoch == 24
    assert cfg.lr_at(23) == 1e-3 and cfg.lr_at(24) == pytest.approx(1e-4)
    assert RunConfig(epochs=210).drop_epoch == 168


def test_lr_log_drops_at_configured_epoch():
    data = synth_generate(2, 64, 0)
    res = train(small_cfg(epochs=5, lr_drop_epoch=3), data)
    assert res.lr_log[:2] == [1e-3, 1e-3]
    assert res.lr_log[2:] == [pytest.approx(1e-4)] * 3


def test_overfit_one_sample():
    # first synthetic sample, default lr held constant; one step per epoch
    data = synth_generate(1, 64, 0)
    res = train(small_cfg(epochs=200, lr_drop_epoch=10**9), data)
    assert res.steps == 200
    assert res.epoch_loss[-1] < 0.1 * res.epoch_loss[0]


def test_lr_zero_leaves_parameters():
    data = synth_generate(3, 64, 0)
    cfg = small_cfg(epochs=2, lr=0.0, augment=True)
    g = build_model("tiny", cfg.decoder_config(), 64, seed=cfg.seed)
    before = [p.data.copy() for p in g.parameters()]
    train(cfg, data, graph=g)
    for a, p in zip(before, g.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_training_is_deterministic():
    data = synth_generate(4, 64, 0)
    a = train(small_cfg(epochs=2, augment=True), data)
    b = train(small_cfg(epochs=2, augment=True), data)
    assert a.epoch_loss == b.epoch_loss
    for p, q in zip(a.graph.parameters(), b.graph.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_batch_size_two_runs():
    res = train(small_cfg(batch_size=2), synth_generate(4, 64, 0))
    assert res.steps == 2


def test_divergence_guard():
    data = synth_generate(2, 64, 0)
    g = build_model("tiny", DecoderConfig(r=2), 64)
    g.parameters()[0].data[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(small_cfg(), data, graph=g)


def test_evaluate_oracle_and_constant_models():
    data = synth_generate(3, 64, 0)

    class Oracle:
        input_size = (64, 64)

        def __call__(self, x):
            from dntdf.tensor import Tensor
            idx = [i for i, s in enumerate(data) if np.array_equal(s.image, x.data[0])][0]
            return Tensor(data[idx].mask[None, None])

    rep = evaluate(Oracle(), data)
    assert rep.fmax == 1.0 and rep.mae == 0.0
    half = np.zeros((64, 64))
    half[:, :32] = 1
    assert metric_report([np.full((64, 64), 0.5)], [half]).mae == 0.5
    with pytest.raises(ValueError):
        evaluate(Oracle(), [])


def test_predict_threads_match_serial(monkeypatch):
    g = build_model("tiny", None, 64)
    imgs = [s.image for s in synth_generate(4, 64, 0)]
    serial = predict(g, imgs, threads=1)
    monkeypatch.setenv("DNTDF_THREADS", "3")
    parallel = predict(g, imgs)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a, b)


def test_save_load_roundtrip(tmp_path):
    g = build_model("tiny", DecoderConfig(r=2, pcsp_count=2), 64, seed=9)
    save_model(g, tmp_path / "m.npz")
    h = load_model(tmp_path / "m.npz")
    assert h.config == g.config
    img = synth_generate(1, 64, 0)[0].image[None]
    from dntdf.tensor import Tensor
    np.testing.assert_array_equal(g(Tensor(img)).data, h(Tensor(img)).data)


def test_load_config_resolves_paths(tmp_path):
    (tmp_path / "run.cfg").write_text("epochs = 3\nmodel = m.npz\n")
    cfg = load_config(tmp_path / "run.cfg")
    assert cfg.epochs == 3 and cfg.model == str(tmp_path / "m.npz")
