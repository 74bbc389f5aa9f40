import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from idccrn_vae.errors import InvalidInputError
from idccrn_vae.spectral import (
    ComplexSpectrogram,
    StftConfig,
    TimeSignal,
    apply_mask,
    istft,
    magnitude,
    read_wav,
    stft,
    write_wav,
)

CFG = StftConfig()


def dft_frame(x, frame, cfg=CFG):
    """Direct DFT summation of frame ``frame`` (Hann-windowed, zero-padded)."""
    n = np.arange(cfg.frame_length)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.frame_length)
    start = frame * cfg.hop - (cfg.frame_length // 2 if cfg.center else 0)
    idx = start + n
    seg = np.where((idx >= 0) & (idx < x.size), x[np.clip(idx, 0, x.size - 1)], 0.0)
    k = np.arange(cfg.n_bins)[:, None]
    return (w * seg * np.exp(-2j * np.pi * k * n / cfg.fft_length)).sum(axis=1)


def interior(length, cfg=CFG):
    return slice(cfg.frame_length, length - cfg.frame_length)


def test_zero_signal_gives_zero_spectrogram():
    spec = stft(torch.zeros(1200, dtype=torch.float64))
    assert spec.bins.shape[-2] == 257
    assert torch.count_nonzero(spec.bins) == 0


def test_frame_count_pads_tail():
    plain = StftConfig(center=False)
    spec = stft(torch.zeros(1201, dtype=torch.float64), plain)
    # frames start at 0, 300, 600, 900 -> the last one is zero-padded
    assert spec.n_frames == 4
    assert plain.n_frames(400) == 1
    # centred: 200 zeros each side, frames start at -200, 100, ..., 1300
    assert stft(torch.zeros(1201, dtype=torch.float64)).n_frames == 6
    assert CFG.n_frames(400) == 3


@pytest.mark.parametrize("cfg", [CFG, StftConfig(center=False), StftConfig(hop=100)])
def test_frames_match_direct_dft(rng, cfg):
    x = rng.standard_normal(2000)
    spec = stft(torch.from_numpy(x), cfg).bins.numpy()
    for frame in (0, 1, 2, spec.shape[-1] - 1):
        np.testing.assert_allclose(spec[:, frame], dft_frame(x, frame, cfg), atol=1e-10)


@pytest.mark.parametrize("k", [5, 40, 128])
def test_bin_centre_cosine_concentrates(k):
    n = np.arange(4000)
    x = np.cos(2 * np.pi * k * (16000 / 512) * n / 16000)
    mag = stft(torch.from_numpy(x)).bins.abs().numpy()
    sidelobe = 10 ** (-31 / 20)
    for frame in range(1, mag.shape[-1] - 2):
        col = mag[:, frame]
        assert col.argmax() == k
        far = np.abs(np.arange(col.size) - k) > 3
        assert col[far].max() <= sidelobe * col[k]
        np.testing.assert_allclose(col, np.abs(dft_frame(x, frame)), atol=1e-9)


def test_parseval_single_frames(rng):
    x = rng.standard_normal(400 * 5)
    spec = stft(torch.from_numpy(x), StftConfig(center=False)).bins.numpy()
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400)
    for f in range(spec.shape[-1] - 1):
        seg = x[f * 300 : f * 300 + 400] * w
        col = np.abs(spec[:, f]) ** 2
        one_sided = (col[0] + 2 * col[1:-1].sum() + col[-1]) / 512
        assert abs(one_sided - seg @ seg) / (seg @ seg) <= 1e-8


@given(
    arrays(np.float64, 1500, elements=st.floats(-1, 1)),
    arrays(np.float64, 1500, elements=st.floats(-1, 1)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_stft_linear(x, y, a, b):
    lhs = stft(torch.from_numpy(a * x + b * y)).bins
    rhs = a * stft(torch.from_numpy(x)).bins + b * stft(torch.from_numpy(y)).bins
    assert torch.allclose(lhs, rhs, atol=1e-10, rtol=0)


@pytest.mark.parametrize("hop", [300, 100, 200])
def test_round_trip_interior(rng, hop):
    cfg = StftConfig(hop=hop)
    x = rng.standard_normal(4000)
    y = istft(stft(torch.from_numpy(x), cfg)).numpy()
    assert y.shape == x.shape
    assert np.abs(y - x)[interior(4000)].max() <= 1e-6


@given(st.integers(1200, 6000))
def test_round_trip_any_length(length):
    x = np.random.default_rng(length).standard_normal(length)
    y = istft(stft(torch.from_numpy(x))).numpy()
    assert y.size == length
    assert np.abs(y - x)[interior(length)].max() <= 1e-6


@pytest.mark.parametrize("hop", [300, 100])
def test_centred_round_trip_covers_every_sample(rng, hop):
    x = rng.standard_normal(3333)
    y = istft(stft(torch.from_numpy(x), StftConfig(hop=hop))).numpy()
    assert np.abs(y - x).max() <= 1e-6


def test_uncentred_round_trip_loses_only_window_zeros(rng):
    x = rng.standard_normal(4000)
    y = istft(stft(torch.from_numpy(x), StftConfig(center=False))).numpy()
    bad = np.flatnonzero(np.abs(y - x) > 1e-6)
    assert set(bad) <= {0, 1, 3999}


def test_spectral_errors_are_not_amplified_at_the_edges(rng):
    # a perturbation of the spectrogram maps to a time-domain error of
    # comparable energy everywhere, including the first and last samples
    x = rng.standard_normal(4000)
    spec = stft(torch.from_numpy(x))
    noise = 1e-3 * torch.complex(torch.randn(spec.shape, dtype=torch.float64), torch.randn(spec.shape, dtype=torch.float64))
    err = istft(ComplexSpectrogram(spec.bins + noise, CFG, 4000)).numpy() - x
    per_sample = np.sqrt(np.mean(err[400:-400] ** 2))
    assert np.abs(err).max() < 20 * per_sample


def test_round_trip_linear(rng):
    x, y = rng.standard_normal(4000), rng.standard_normal(4000)
    sx, sy = stft(torch.from_numpy(x)), stft(torch.from_numpy(y))
    out = istft(ComplexSpectrogram(sx.bins + sy.bins, CFG, 4000)).numpy()
    assert np.abs(out - (x + y))[interior(4000)].max() <= 1e-6


def test_zero_spectrogram_inverts_to_zero():
    out = istft(ComplexSpectrogram(torch.zeros(257, 10, dtype=torch.complex128)))
    assert torch.count_nonzero(out) == 0


def test_short_signal_rejected():
    with pytest.raises(InvalidInputError):
        stft(torch.zeros(399))


def test_bad_bin_count_rejected():
    with pytest.raises(InvalidInputError):
        ComplexSpectrogram(torch.zeros(256, 4, dtype=torch.complex64))
    spec = ComplexSpectrogram(torch.zeros(257, 4, dtype=torch.complex64))
    spec.bins = torch.zeros(200, 4, dtype=torch.complex64)
    with pytest.raises(InvalidInputError):
        istft(spec)


def test_config_invariants():
    with pytest.raises(InvalidInputError):
        StftConfig(hop=500)
    with pytest.raises(InvalidInputError):
        StftConfig(frame_length=600)
    assert CFG.n_bins == 257


def test_magnitude():
    spec = torch.tensor([[3 + 4j]], dtype=torch.complex128)
    assert magnitude(spec).item() == 5.0
    assert torch.count_nonzero(magnitude(torch.zeros(3, 2, dtype=torch.complex64))) == 0


def test_magnitude_phase_invariant(rng):
    bins = torch.from_numpy(rng.standard_normal((257, 6)) + 1j * rng.standard_normal((257, 6)))
    rot = torch.exp(1j * torch.from_numpy(rng.uniform(0, 2 * np.pi, (257, 6))))
    assert torch.allclose(magnitude(bins * rot), magnitude(bins), atol=1e-12)


def test_apply_mask_examples(rng):
    Y = ComplexSpectrogram(torch.from_numpy(rng.standard_normal((257, 5)) + 1j * rng.standard_normal((257, 5))))
    assert torch.equal(apply_mask(Y, torch.ones_like(Y.bins)).bins, Y.bins)
    assert torch.count_nonzero(apply_mask(Y, torch.zeros_like(Y.bins)).bins) == 0
    single = ComplexSpectrogram(torch.full((257, 1), 2 + 0j, dtype=torch.complex128))
    out = apply_mask(single, torch.full((257, 1), 0.5 + 0.5j, dtype=torch.complex128))
    assert out.bins[0, 0] == 1 + 1j


def test_apply_mask_bilinear(rng):
    def c():
        return torch.from_numpy(rng.standard_normal((257, 3)) + 1j * rng.standard_normal((257, 3)))

    Y1, Y2, M = c(), c(), c()
    lhs = apply_mask(ComplexSpectrogram(2 * Y1 + 3 * Y2), M).bins
    rhs = 2 * apply_mask(ComplexSpectrogram(Y1), M).bins + 3 * apply_mask(ComplexSpectrogram(Y2), M).bins
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_apply_mask_shape_mismatch():
    Y = ComplexSpectrogram(torch.zeros(257, 5, dtype=torch.complex64))
    with pytest.raises(InvalidInputError):
        apply_mask(Y, torch.zeros(257, 4, dtype=torch.complex64))


@pytest.mark.parametrize("fmt,tol", [("pcm16", 1 / 32768), ("float32", 1e-7)])
def test_wav_round_trip(tmp_path, rng, fmt, tol):
    x = 0.5 * rng.uniform(-1, 1, 1600)
    path = write_wav(tmp_path / "a.wav", TimeSignal(x), fmt=fmt)
    back = read_wav(path)
    assert back.sample_rate == 16000
    assert np.abs(back.samples - x).max() <= tol


def test_wav_rejects_stereo_and_other_rates(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "st.wav", 16000, np.zeros((100, 2), dtype=np.int16))
    wavfile.write(tmp_path / "8k.wav", 8000, np.zeros(100, dtype=np.int16))
    with pytest.raises(InvalidInputError, match="mono"):
        read_wav(tmp_path / "st.wav")
    with pytest.raises(InvalidInputError, match="16000"):
        read_wav(tmp_path / "8k.wav")


def test_time_signal_invariants():
    with pytest.raises(InvalidInputError):
        TimeSignal(np.array([]))
    with pytest.raises(InvalidInputError):
        TimeSignal(np.array([0.0, np.nan]))
    with pytest.raises(InvalidInputError):
        TimeSignal(np.zeros(10), sample_rate=8000)
