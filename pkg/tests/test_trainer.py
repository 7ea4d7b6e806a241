import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from semguide import trainer
from semguide.dataset import DatasetSpec, generate_synthetic
from semguide.segnet import NonFiniteLossError
from semguide.trainer import (
    Checkpoint,
    ConfigError,
    FrozenWeightsChanged,
    TrainConfig,
    TrainingDiverged,
    apply_overrides,
    dump_config,
    load_config,
    parse_kv,
    poly_lr,
    read_metric_csv,
    train_caae,
    train_seg,
    weights_hash,
    write_metric_csv,
)

TINY = dict(
    patch_size=8, enc_dim=16, enc_depth=2, enc_heads=2, dec_depth=1,
    seg_dim=16, seg_depth=2, seg_heads=2, class_dim=4, crop_size=32, batch_size=2, U=2,
)


def cfg(stage, **kw):
    return TrainConfig.for_stage(stage, **{**TINY, "epochs": 1, **kw})


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(DatasetSpec(num_images=4, image_size=32, min_shape_size=8, max_shape_size=14, seed=0))


@pytest.fixture(scope="module")
def caae_ckpt(data):
    return train_caae(data, cfg("caae"))


# schedule


def test_poly_examples():
    assert poly_lr(0, 100, 0.025) == 0.025
    assert poly_lr(100, 100, 0.025) == 0.0
    assert abs(poly_lr(50, 100, 0.025, 0.9) - 0.013397) < 1e-6


def test_poly_past_end_warns_and_clamps():
    with pytest.warns(UserWarning, match="clamped"):
        assert poly_lr(101, 100, 0.1) == 0.0


@given(st.integers(1, 500), st.floats(0.1, 3.0), st.floats(1e-4, 1.0))
def test_poly_non_increasing(max_iter, power, lr):
    vals = [poly_lr(i, max_iter, lr, power) for i in range(max_iter + 1)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[0] == lr and vals[-1] == 0.0


# config


def test_config_invariants():
    for kw in ({"base_lr": 0.0}, {"poly_power": 0.0}, {"epochs": 0}, {"stage": "x"}, {"sigma": -1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_kv_round_trip(tmp_path):
    c = cfg("seg", sigma=0.05, loss_cb=False)
    (tmp_path / "c.cfg").write_text("# comment\n" + dump_config(c))
    back = load_config(tmp_path / "c.cfg")
    assert back == c


def test_kv_parsing_and_errors():
    assert parse_kv("a = 1  # note\n\n b=x y \n") == {"a": "1", "b": "x y"}
    with pytest.raises(ConfigError, match="line 2"):
        parse_kv("a = 1\nnonsense\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(TrainConfig(), {"colour": "red"})
    with pytest.raises(ConfigError, match="boolean"):
        apply_overrides(TrainConfig(), {"loss_cf": "maybe"})
    with pytest.raises(ConfigError, match="epochs"):
        apply_overrides(TrainConfig(), {"epochs": "many"})
    c = apply_overrides(TrainConfig(), {"epochs": "3", "loss_cf": "false", "sigma": "0.1", "token_merge": "max"})
    assert (c.epochs, c.loss_cf, c.sigma, c.token_merge) == (3, False, 0.1, "max")


def test_metric_csv_round_trip(tmp_path):
    rows = [(1, "ss", 0.5), (1, "recon", 1 / 3)]
    write_metric_csv(rows, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,term,value"
    assert read_metric_csv(tmp_path / "log.csv") == rows


# stage 1


def test_caae_log_has_one_entry_per_epoch(data):
    ck = train_caae(data, cfg("caae", epochs=2))
    epochs = [e for e, t, _ in ck.metric_log if t == "ss"]
    assert epochs == [1, 2]
    assert {t for _, t, _ in ck.metric_log} == {"ss", "recon", "total"}
    assert ck.iteration == 4
    assert all(not p.requires_grad for p in ck.model.parameters())


def test_caae_same_seed_same_weights(data, caae_ckpt):
    again = train_caae(data, cfg("caae"))
    assert weights_hash(again.model) == weights_hash(caae_ckpt.model)
    other = train_caae(data, cfg("caae", seed=1))
    assert weights_hash(other.model) != weights_hash(caae_ckpt.model)


def test_caae_rejects_wrong_stage(data):
    with pytest.raises(ConfigError, match="stage=caae"):
        train_caae(data, cfg("seg"))
    with pytest.raises(ValueError, match="empty"):
        train_caae([], cfg("caae"))


def test_caae_divergence_returns_last_good(data, monkeypatch):
    calls = {"n": 0}
    real = trainer.ClassAwareAutoEncoder.losses

    def flaky(self, *a, **k):
        out = real(self, *a, **k)
        calls["n"] += 1
        if calls["n"] > 2:  # second epoch
            out["total"] = out["total"] * float("nan")
        return out

    monkeypatch.setattr(trainer.ClassAwareAutoEncoder, "losses", flaky)
    with pytest.raises(TrainingDiverged) as err:
        train_caae(data, cfg("caae", epochs=3))
    assert err.value.last_good.epoch == 1
    assert all(torch.isfinite(p).all() for p in err.value.last_good.model.parameters())


def test_checkpoint_round_trip_and_bitwise_bytes(tmp_path, caae_ckpt):
    caae_ckpt.save(tmp_path / "a.ckpt")
    caae_ckpt.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = Checkpoint.load(tmp_path / "a.ckpt")
    assert back.stage == "caae" and back.config == caae_ckpt.config
    assert weights_hash(back.model) == weights_hash(caae_ckpt.model)
    assert back.metric_log == caae_ckpt.metric_log


def test_resume_is_bitwise(data, tmp_path):
    full = train_caae(data, cfg("caae", epochs=2))
    saved = []
    train_caae(data, cfg("caae", epochs=2), on_epoch=lambda ck: saved.append(ck))
    saved[0].save(tmp_path / "e1.ckpt")
    resumed = train_caae(data, cfg("caae", epochs=2), resume=Checkpoint.load(tmp_path / "e1.ckpt"))
    assert weights_hash(resumed.model) == weights_hash(full.model)
    assert resumed.metric_log == full.metric_log


# stage 2


def test_seg_logs_all_terms_and_cf_only_zeros(data, caae_ckpt):
    ck = train_seg(data, caae_ckpt, cfg("seg", loss_cb=False, loss_as=False, loss_ac=False, loss_ss=False))
    vals = {t: v for _, t, v in ck.metric_log}
    assert set(vals) == {"cf", "cb", "as", "ac", "ss", "total"}
    assert vals["cb"] == vals["as"] == vals["ac"] == vals["ss"] == 0.0
    assert vals["cf"] > 0


@pytest.mark.parametrize("flags", [(cb, a, ac) for cb in (0, 1) for a in (0, 1) for ac in (0, 1)])
def test_every_flag_combination_is_finite(data, caae_ckpt, flags):
    cb, a, ac = flags
    ck = train_seg(data, caae_ckpt, cfg("seg", loss_cb=bool(cb), loss_as=bool(a), loss_ac=bool(ac)))
    assert all(math.isfinite(v) for _, _, v in ck.metric_log)


def test_seg_same_seed_same_curves(data, caae_ckpt):
    a = train_seg(data, caae_ckpt, cfg("seg", epochs=2))
    b = train_seg(data, caae_ckpt, cfg("seg", epochs=2))
    assert a.metric_log == b.metric_log
    assert weights_hash(a.model) == weights_hash(b.model)


def test_seg_preconditions(data, caae_ckpt):
    with pytest.raises(ConfigError, match="U=3"):
        train_seg(data, caae_ckpt, cfg("seg", U=3))
    with pytest.raises(ConfigError, match="stage=seg"):
        train_seg(data, caae_ckpt, cfg("caae"))
    seg = train_seg(data, caae_ckpt, cfg("seg"))
    with pytest.raises(ValueError, match="not a CAAE"):
        train_seg(data, seg, cfg("seg"))


def test_seg_detects_frozen_weight_drift(data, caae_ckpt, monkeypatch):
    real = trainer.compute_seg_losses

    def tamper(net, caae, *a, **k):
        with torch.no_grad():
            caae.w_s.add_(1e-3)
        return real(net, caae, *a, **k)

    monkeypatch.setattr(trainer, "compute_seg_losses", tamper)
    victim = copy.deepcopy(caae_ckpt)
    with pytest.raises(FrozenWeightsChanged, match="epoch 1"):
        train_seg(data, victim, cfg("seg"))


def test_seg_divergence_names_term(data, caae_ckpt, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteLossError("cb", float("inf"))

    monkeypatch.setattr(trainer, "compute_seg_losses", boom)
    with pytest.raises(TrainingDiverged, match="cb") as err:
        train_seg(data, caae_ckpt, cfg("seg"))
    assert err.value.last_good is None


def test_caae_untouched_by_stage_two(data, caae_ckpt):
    before = weights_hash(caae_ckpt.model)
    S = caae_ckpt.model.semantics.clone()
    train_seg(data, caae_ckpt, cfg("seg", epochs=2))
    assert weights_hash(caae_ckpt.model) == before
    assert torch.equal(caae_ckpt.model.semantics, S)
