import numpy as np
import pytest
import torch

from passion.backbone import BackboneConfig, MultiModalSegNet
from passion.config import ConfigError, ExperimentConfig, format_config, parse_config_text
from passion.preference import PreferenceState, read_rp_log
from passion.train import build_method_loss, load_data, poly_lr, run_experiment


def tiny(**kw):
    base = dict(n_train=6, n_test=2, shape=(40, 40), epochs=2, width=4, depth=3, plots=False)
    base.update(kw)
    return ExperimentConfig(**base)


def test_poly_lr_schedule():
    lrs = [poly_lr(2e-4, t, 50) for t in range(51)]
    assert lrs[0] == 2e-4 and lrs[-1] == 0.0
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert abs(poly_lr(1.0, 25, 50, 0.9) - 0.5**0.9) < 1e-15


def test_moddrop_keeps_a_survivor():
    rule = build_method_loss("moddrop")
    rng = np.random.default_rng(0)
    assert all(rule.visible({2}, rng) == {2} for _ in range(50))
    seen = [rule.visible({0, 1, 2}, rng) for _ in range(400)]
    assert all(1 <= len(v) <= 3 for v in seen)
    assert len(set(seen)) == 7
    assert build_method_loss("baseline").visible({0, 2}, rng) == {0, 2}


def test_build_method_loss_errors():
    with pytest.raises(ValueError):
        build_method_loss("mystery")
    with pytest.raises(ValueError):
        build_method_loss("passion", {"colour": True})
    with pytest.raises(ValueError):
        build_method_loss("baseline", {"pixel": False})


def one_forward(present=(0, 1, 2), seed=0):
    torch.manual_seed(seed)
    net = MultiModalSegNet(BackboneConfig(width=4, depth=3))
    x = torch.randn(1, 3, 16, 16)
    y = torch.randint(0, 3, (1, 16, 16))
    return net(x, set(present), need_uni_pyramids=True), y


@pytest.mark.parametrize("present", [(0, 1, 2), (1,), (0, 2)])
def test_baseline_minus_passion_off_is_reg_sum(present):
    pyr, y = one_forward(present)
    state = PreferenceState.from_missing_rates([0.2, 0.5, 0.8])
    base = build_method_loss("baseline")(pyr, y, state)
    off = build_method_loss("passion", dict(pixel=False, proto=False, delta=False, beta=False))(pyr, y, state)
    assert set(base.reg) == set(present)
    assert torch.equal(off.total, off.seg)
    diff = base.total - off.total
    reg = sum(base.reg.values())
    assert abs(diff.item() - reg.item()) <= 1e-6 * max(1.0, reg.item())


def test_pixel_only_rule():
    pyr, y = one_forward()
    state = PreferenceState.from_missing_rates([0.2, 0.5, 0.8])
    out = build_method_loss("passion", dict(proto=False, delta=False, beta=False))(pyr, y, state)
    assert out.proto == {}
    want = out.seg + sum(0.5 * state.beta[m] * out.pixel[m] for m in (0, 1, 2))
    torch.testing.assert_close(out.total, want)


def test_delta_off_enables_every_proto_term():
    pyr, y = one_forward()
    state = PreferenceState.from_missing_rates([0.2, 0.5, 0.8])
    on = build_method_loss("passion")(pyr, y, state)
    off = build_method_loss("passion", dict(delta=False))(pyr, y, state)
    assert set(off.proto) == {0, 1, 2}
    assert set(on.proto) == {m for m, d in on.pref.delta.items() if d}


def test_passion_all_off_matches_baseline_seg_first_step():
    a = run_experiment(tiny(method="baseline", epochs=1), write=False)
    b = run_experiment(tiny(method="passion", pixel=False, proto=False, delta=False, beta=False, epochs=1), write=False)
    assert a.loss_trace[0]["seg"] == b.loss_trace[0]["total"] == b.loss_trace[0]["seg"]
    assert all(r["pixel"] == 0 and r["proto"] == 0 for r in b.loss_trace)


def test_smoke_run_writes_artifacts(tmp_path):
    res = run_experiment(tiny(plots=True), out_dir=tmp_path)
    for name in ("resolved_config.txt", "presence.txt", "checkpoint.npz", "rp_log.csv", "loss_trace.csv",
                 "eval_report.csv", "eval_report.txt", "summary.json", "rp_curves.png", "dice_by_subset.png"):
        assert (tmp_path / name).stat().st_size > 0, name
    rows = read_rp_log(tmp_path / "rp_log.csv")
    assert len(rows) == 2 * 3
    assert [r["epoch"] for r in rows] == [0, 0, 0, 1, 1, 1]
    assert len(res.loss_trace) == 2 * 6
    # resolved config round-trips
    assert parse_config_text((tmp_path / "resolved_config.txt").read_text()) == res.config


def test_beta_frozen_unless_steered():
    base = run_experiment(tiny(method="baseline"), write=False)
    init = base.history[0][2]
    assert all(np.array_equal(h[2], init) for h in base.history)
    np.testing.assert_allclose(init, 1 / (1 - np.array([0.2, 0.5, 0.8])), rtol=0.5)
    steered = run_experiment(tiny(), write=False)
    prev = 1 / (1 - np.asarray(steered.presence.entries.shape[0] - steered.presence.entries.sum(0)) / 6)
    for _, mean, beta in steered.history:
        np.testing.assert_allclose(beta, np.maximum(prev - 0.01 * mean, 0.1), rtol=0, atol=1e-12)
        prev = beta


def test_runs_are_reproducible():
    a = run_experiment(tiny(), write=False)
    b = run_experiment(tiny(), write=False)
    assert a.report.to_csv() == b.report.to_csv()
    assert a.loss_trace == b.loss_trace


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(method="baseline", pixel=False)
    with pytest.raises(ConfigError):
        ExperimentConfig(missing_rates=(0.1, 0.2))
    with pytest.raises(ConfigError):
        ExperimentConfig(epochs=0)
    with pytest.raises(ConfigError):
        parse_config_text("lr = 1e-3\nbogus = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("epochs = many\n")


def test_config_text_round_trip():
    cfg = ExperimentConfig(profiles=[[1], None, []], shape=(32, 48), noise=0.25, method="moddrop")
    text = format_config(cfg)
    assert "# fraction of training samples lacking each modality" in text
    assert parse_config_text(text) == cfg


def test_presence_inconsistency_detected(tmp_path):
    from passion.presence import sample_presence, save_manifest

    save_manifest(sample_presence((0.5, 0.5), 6, 0), tmp_path / "p.txt")
    with pytest.raises(ValueError, match="does not match"):
        load_data(tiny(presence_path=str(tmp_path / "p.txt")))
