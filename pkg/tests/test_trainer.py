import numpy as np
import pytest

from orthospot.autodiff import Tensor
from orthospot.errors import NumericError
from orthospot.model import ModelConfig, init_params
from orthospot.trainer import (METRICS_HEADER, FeatureStore, PlateauScheduler, TrainConfig, Trainer, TrainState,
                               derive_seed, fit, monitored, sgd_step, substream)

TINY_SIZES = dict(tconv_channels=4, tconv_width=3, gru_hidden=6, gru_layers=1)


class OneWeight:
    """Minimal stand-in exposing the parameter interface sgd_step uses."""

    def __init__(self, w):
        self.w = Tensor(np.array([w], dtype=np.float64), requires_grad=True)

    def named_tensors(self):
        return {"w": self.w}

    def tensors(self):
        return [self.w]


def state_for(w, lr=0.01):
    return TrainState.fresh(OneWeight(w), lr)


def test_sgd_first_step_hand_value():
    st = state_for(0.0)
    sgd_step(st, [np.array([1.0])], TrainConfig(weight_decay=0.0))
    assert st.params.w.value[0] == pytest.approx(-0.01, abs=1e-15)


def test_sgd_zero_gradient_fixed_point():
    st = state_for(0.7)
    for _ in range(5):
        sgd_step(st, [np.zeros(1)], TrainConfig(weight_decay=0.0))
    assert st.params.w.value[0] == 0.7


def test_sgd_weight_decay_only():
    st = state_for(2.0)
    sgd_step(st, [np.zeros(1)], TrainConfig(momentum=0.0))
    assert st.params.w.value[0] == pytest.approx(2.0 - 0.01 * 0.001 * 2.0, abs=1e-15)


def test_sgd_momentum_accumulates():
    st = state_for(0.0)
    cfg = TrainConfig(weight_decay=0.0)
    sgd_step(st, [np.ones(1)], cfg)
    sgd_step(st, [np.ones(1)], cfg)
    # v1 = 1, v2 = 0.9 + 1
    assert st.params.w.value[0] == pytest.approx(-0.01 * (1 + 1.9), abs=1e-15)
    assert st.step == 2


def test_sgd_rejects_non_finite():
    st = state_for(0.0)
    with pytest.raises(NumericError, match="w"):
        sgd_step(st, [np.array([np.nan])], TrainConfig())


def run_schedule(metrics, **cfg):
    config = TrainConfig(**cfg)
    st = state_for(0.0, lr=config.lr_init)
    sched = PlateauScheduler(config)
    lrs = []
    for epoch, m in enumerate(metrics, start=1):
        lrs.append(st.lr)
        _, stop = sched.update(st, m)
        if stop:
            return lrs, epoch
    return lrs, None


def test_scheduler_strict_improvement_never_decays():
    lrs, stopped = run_schedule([0.5 - 0.01 * i for i in range(30)])
    assert set(lrs) == {0.01} and stopped is None


def test_scheduler_flat_metric_scripted():
    # epoch 1 sets the best; epochs 2..11 are flat
    lrs, stopped = run_schedule([0.3] * 20)
    assert stopped == 11
    # lr in force during each epoch: halved after the 3rd, 6th and 9th flat epoch
    assert lrs == [0.01] * 4 + [0.005] * 3 + [0.0025] * 3 + [0.00125]


def test_scheduler_improvement_resets_counter():
    lrs, stopped = run_schedule([0.5, 0.5, 0.5, 0.5, 0.4] + [0.4] * 12)
    assert lrs[4] == 0.005  # decayed once before the improvement
    assert stopped == 15


def test_scheduler_stop_patience_one():
    _, stopped = run_schedule([0.3, 0.3, 0.3], stop_patience=1)
    assert stopped == 2


def test_monitored():
    assert monitored(0.1, 0.3, "max") == 0.3
    assert monitored(0.1, 0.3, "min") == 0.1
    assert monitored(0.1, 0.3, "kws") == 0.1
    assert monitored(0.1, 0.3, "sv") == 0.3


def test_config_validation():
    for bad in (dict(batch_size=0), dict(momentum=1.0), dict(scenario_mode="three"), dict(orth_mode="x"),
                dict(lambda_orth=-1.0), dict(monitor="avg"), dict(input_norm="z")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_substreams_are_independent_and_stable():
    a = substream(0, "init").random(3)
    assert np.array_equal(a, substream(0, "init").random(3))
    assert not np.array_equal(a, substream(0, "shuffle").random(3))
    assert derive_seed(0, "split") == derive_seed(0, "split") != derive_seed(1, "split")


def test_two_scenario_rows_have_no_middle_scenarios(small_split):
    trainer = Trainer(small_split, TrainConfig(scenario_mode="two"), FeatureStore())
    rows, _ = trainer.draw_batch(np.arange(len(small_split.train)), np.random.default_rng(0))
    assert rows.shape[1] == 3
    clips = small_split.train
    for a, s1, s4 in rows:
        assert clips[s1].keyword_id == clips[a].keyword_id and clips[s1].speaker_id == clips[a].speaker_id
        assert clips[s4].keyword_id != clips[a].keyword_id and clips[s4].speaker_id != clips[a].speaker_id


def test_run_epoch_deterministic_and_finite(small_split):
    def one_epoch():
        cfg = TrainConfig(batch_size=16, check_grad_coverage=True)
        feats = FeatureStore()
        trainer = Trainer(small_split, cfg, feats)
        params = init_params(trainer.model_config(**TINY_SIZES), 0)
        st = TrainState.fresh(params, cfg.lr_init)
        m = trainer.run_epoch(st, substream(0, "shuffle"), substream(0, "sampler"))
        return m, params

    m1, p1 = one_epoch()
    m2, p2 = one_epoch()
    assert m1.breakdown.as_row() == m2.breakdown.as_row()
    for a, b in zip(p1.tensors(), p2.tensors()):
        assert np.array_equal(a.value, b.value)
    assert np.isfinite(m1.breakdown.l_orth) and m1.breakdown.l_orth >= 0
    assert m1.n_batches == int(np.ceil(len(small_split.train) / 16))


def test_fit_writes_outputs(tmp_path, small_split):
    cfg = TrainConfig(batch_size=32, max_epochs=2)
    result = fit(cfg, small_split, TINY_SIZES, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER and len(lines) == 3
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    assert 1 <= result.best_epoch <= 2
    assert result.best_params.input_mean is not None
    assert all(np.isfinite(float(v)) for v in lines[1].split(","))


def test_model_config_from_trainer(small_split):
    trainer = Trainer(small_split, TrainConfig(), FeatureStore())
    cfg = trainer.model_config(**TINY_SIZES)
    assert isinstance(cfg, ModelConfig)
    assert (cfg.n_keywords, cfg.n_speakers) == (4, 6)
