import matplotlib.pyplot as plt
import numpy as np
import pytest

from passion.metrics import EvalReport, all_subsets
from passion.plots import dice_figure, emit_dice_plot, emit_rp_plot, rp_figure
from passion.preference import PreferenceState, accumulate, read_rp_log, relative_preference, update_beta, write_rp_log


def rp_rows(tmp_path, M=4, epochs=5, seed=0):
    rng = np.random.default_rng(seed)
    s = PreferenceState(np.ones(M))
    for _ in range(epochs):
        for _ in range(3):
            accumulate(s, relative_preference(dict(enumerate(rng.uniform(0.1, 2, M))), set(range(M))))
        update_beta(s)
    return read_rp_log(write_rp_log(s.history, tmp_path / "rp.csv"))


def test_curves_equal_csv_values(tmp_path):
    rows = rp_rows(tmp_path)
    fig = rp_figure(rows)
    lines = {ln.get_label(): ln for ln in fig.axes[0].get_lines()}
    assert sorted(k for k in lines if not k.startswith("_")) == [f"modality {m}" for m in range(4)]
    for m in range(4):
        want = [r["mean_RP"] for r in rows if r["modality"] == m]
        got = list(lines[f"modality {m}"].get_ydata())
        assert got == want
    zero = lines["_zero"]
    assert set(zero.get_ydata()) == {0.0}
    plt.close(fig)


def test_constant_zero_log_gives_flat_curves():
    rows = [{"epoch": e, "modality": m, "mean_RP": 0.0, "beta": 1.0} for e in range(3) for m in range(2)]
    fig = rp_figure(rows)
    for ln in fig.axes[0].get_lines():
        assert set(ln.get_ydata()) == {0.0}
    plt.close(fig)


def test_emitted_files(tmp_path):
    path = emit_rp_plot(rp_rows(tmp_path, M=3), tmp_path / "rp.png", "run")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    subsets = all_subsets(2)
    report = EvalReport(2, ("region1",), subsets, {(s, "region1"): 0.5 for s in subsets}, {(s, "region1"): 1.0 for s in subsets})
    fig = dice_figure(report)
    heights = [p.get_height() for p in fig.axes[0].patches]
    assert heights == [0.5, 0.5, 0.5]
    plt.close(fig)
    assert emit_dice_plot(report, tmp_path / "d.png").stat().st_size > 0


def test_empty_log_rejected():
    with pytest.raises(ValueError):
        rp_figure([])
