"""Rotary position encoding: rotation algebra and timeline alignment."""

import numpy as np
import numpy.testing as npt
import pytest

from tafusion.posenc import (PosEncConfigError, RateSpec, RotaryBank, apply_posenc,
                             positions_for, rope_rotate, sinusoidal_table,
                             tarope_positions)
from tafusion.tensor import Tensor


def test_bank_frequencies_strictly_decreasing():
    bank = RotaryBank(head_dim=8)
    assert (np.diff(bank.freqs) < 0).all()
    assert bank.freqs[0] == 1.0


def test_bank_rejects_odd_head_dim():
    with pytest.raises(PosEncConfigError):
        RotaryBank(head_dim=5)


def test_rates_must_be_positive():
    with pytest.raises(PosEncConfigError):
        RateSpec(0.0, 30.0)


def test_zero_position_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 8))
    out = rope_rotate(Tensor(x), [0.0], RotaryBank(8))
    npt.assert_array_equal(out.data, x)


def test_quarter_rotation():
    bank = RotaryBank(head_dim=2)   # single pair, frequency 1
    out = rope_rotate(Tensor([[1.0, 0.0]]), [np.pi / 2], bank)
    npt.assert_allclose(out.data, [[0.0, 1.0]], atol=1e-12)


def test_rotation_preserves_row_norms():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 16))
    out = rope_rotate(Tensor(x), rng.uniform(0, 100, 6), RotaryBank(16))
    npt.assert_allclose(np.linalg.norm(out.data, axis=1),
                        np.linalg.norm(x, axis=1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("shift", [1, 3, 17])
def test_shift_invariance_of_logits(shift):
    """<rope(q, n), rope(k, m)> depends only on n - m."""
    rng = np.random.default_rng(2)
    bank = RotaryBank(8)
    q = rng.normal(size=(1, 8))
    k = rng.normal(size=(1, 8))
    for n, m in [(0, 5), (3, 3), (12, 7)]:
        base = rope_rotate(Tensor(q), [n], bank).data @ rope_rotate(Tensor(k), [m], bank).data.T
        moved = rope_rotate(Tensor(q), [n + shift], bank).data @ \
            rope_rotate(Tensor(k), [m + shift], bank).data.T
        assert abs(base - moved).max() < 1e-9


def test_tarope_audio_positions_unchanged():
    rates = RateSpec(50.0, 30.0)
    assert tarope_positions("audio", [10], rates) == [10.0]


def test_tarope_video_rescaled_paper_rates():
    rates = RateSpec(50.0, 30.0)
    assert tarope_positions("video", [3], rates) == [5.0]
    npt.assert_allclose(tarope_positions("video", [7], rates), [35.0 / 3.0], rtol=1e-15)


def test_tarope_rejects_negative_indices():
    with pytest.raises(PosEncConfigError):
        tarope_positions("audio", [-1], RateSpec(50, 30))


def test_tarope_cross_modal_time_invariance():
    """Logit(audio n=5, video m=3) == logit(audio 10, video 6) at 50/30 FPS."""
    rng = np.random.default_rng(3)
    bank = RotaryBank(8)
    rates = RateSpec(50.0, 30.0)
    q = rng.normal(size=(1, 8))
    k = rng.normal(size=(1, 8))

    def logit(n, m):
        pa = tarope_positions("audio", [n], rates)
        pv = tarope_positions("video", [m], rates)
        return float((rope_rotate(Tensor(q), pa, bank).data
                      @ rope_rotate(Tensor(k), pv, bank).data.T).item())

    assert abs(logit(5, 3) - logit(10, 6)) < 1e-9
    # +0.1 s on both timelines: audio +5 frames, video +3 frames
    for n, m in [(0, 0), (7, 2), (20, 11)]:
        assert abs(logit(n, m) - logit(n + 5, m + 3)) < 1e-9


def test_tarope_equal_rates_degenerates_to_rope():
    rates = RateSpec(30.0, 30.0)
    idx = [0, 1, 2, 9]
    assert tarope_positions("video", idx, rates) == [float(i) for i in idx]
    modalities = ["audio", "video", "video", "audio"]
    npt.assert_array_equal(positions_for("tarope", modalities, idx, rates),
                           positions_for("rope", modalities, idx, rates))


def test_apply_posenc_rope_zero_index_identity():
    rng = np.random.default_rng(4)
    q = Tensor(rng.normal(size=(1, 8)))
    k = Tensor(rng.normal(size=(1, 8)))
    q2, k2 = apply_posenc("rope", q, k, ["audio"], [0], None, RotaryBank(8))
    npt.assert_array_equal(q2.data, q.data)
    npt.assert_array_equal(k2.data, k.data)


def test_apply_posenc_additive_variants_leave_qk_untouched():
    rng = np.random.default_rng(5)
    q = Tensor(rng.normal(size=(3, 8)))
    k = Tensor(rng.normal(size=(3, 8)))
    for variant in ("sinusoidal", "learnable"):
        q2, k2 = apply_posenc(variant, q, k, ["audio"] * 3, [0, 1, 2], None, RotaryBank(8))
        assert q2 is q and k2 is k


def test_apply_posenc_unknown_variant():
    q = Tensor(np.zeros((1, 8)))
    with pytest.raises(PosEncConfigError):
        apply_posenc("fourier", q, q, ["audio"], [0], None, RotaryBank(8))


def test_apply_posenc_tiles_bank_per_head():
    """Two heads rotate identically: rotating 16 cols == rotating each 8-col head."""
    rng = np.random.default_rng(6)
    bank = RotaryBank(8)
    x = rng.normal(size=(4, 16))
    idx = [0, 2, 5, 9]
    full, _ = apply_posenc("rope", Tensor(x), Tensor(x), ["audio"] * 4, idx, None, bank)
    for h in range(2):
        head = rope_rotate(Tensor(x[:, 8 * h:8 * (h + 1)]), idx, bank)
        npt.assert_allclose(full.data[:, 8 * h:8 * (h + 1)], head.data, atol=1e-15)


def test_positions_metadata_length_checked():
    q = Tensor(np.zeros((2, 8)))
    with pytest.raises(PosEncConfigError):
        apply_posenc("rope", q, q, ["audio"], [0], None, RotaryBank(8))


def test_sinusoidal_table_shape_and_range():
    table = sinusoidal_table(10, 8)
    assert table.shape == (10, 8)
    assert (np.abs(table) <= 1.0).all()
    # position 0: sines are 0, cosines are 1
    npt.assert_array_equal(table[0, 0::2], np.zeros(4))
    npt.assert_array_equal(table[0, 1::2], np.ones(4))
