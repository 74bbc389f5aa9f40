import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from idccrn_vae.errors import InvalidInputError
from idccrn_vae.networks import (
    N_BINS,
    ComplexConv2d,
    ComplexLSTM,
    Decoder,
    Discriminator,
    Encoder,
    EncoderConfig,
    complex_cat,
    decode,
    encode,
    features_to_spec,
    spec_to_features,
)
from idccrn_vae.spectral import ComplexSpectrogram, StftConfig, apply_mask

TINY = EncoderConfig(channels=[2, 3, 4, 4, 5, 5], latent_dim=4, lstm_hidden=8)


def spec(b=2, n=7, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.complex(torch.randn(b, N_BINS, n, generator=g), torch.randn(b, N_BINS, n, generator=g))


@pytest.fixture
def nets():
    torch.manual_seed(0)
    enc, dec = Encoder(TINY), Decoder(TINY)
    return enc.eval(), dec.eval()


def test_config_defaults_and_validation():
    cfg = EncoderConfig()
    assert cfg.channels == [32, 64, 128, 128, 256, 256]
    assert cfg.kernel == (5, 2) and cfg.stride == (2, 1)
    assert cfg.bottleneck_bins == 4
    with pytest.raises(InvalidInputError):
        EncoderConfig(channels=[8, 8, 8])
    with pytest.raises(InvalidInputError):
        EncoderConfig(latent_dim=0)


def test_features_round_trip_and_dc_dropped():
    s = spec()
    feat = spec_to_features(s)
    assert feat.shape == (2, 2, 256, 7)
    back = features_to_spec(feat)
    assert torch.all(back[:, 0] == 0)
    assert torch.allclose(back[:, 1:], s[:, 1:])
    with pytest.raises(InvalidInputError):
        spec_to_features(s[:, :100])


def test_complex_cat_keeps_real_then_imag_layout():
    a = torch.arange(4.0).reshape(1, 4, 1, 1)  # re [0,1], im [2,3]
    b = torch.arange(10.0, 12.0).reshape(1, 2, 1, 1)  # re [10], im [11]
    assert complex_cat(a, b).flatten().tolist() == [0, 1, 10, 2, 3, 11]


@pytest.mark.parametrize("transposed", [False, True])
def test_complex_conv_matches_complex_arithmetic(transposed):
    torch.manual_seed(1)
    conv = ComplexConv2d(3, 2, (5, 2), (2, 1), transposed=transposed)
    with torch.no_grad():
        conv.bias_re.normal_()
        conv.bias_im.normal_()
    xr, xi = torch.randn(2, 3, 16, 6), torch.randn(2, 3, 16, 6)
    y = conv(torch.cat([xr, xi], 1))
    # oracle: (xr + i xi) * (Wr + i Wi) with four real convolutions
    if transposed:
        def op(x, w):
            return F.conv_transpose2d(x, w, stride=(2, 1), padding=(2, 0), output_padding=(1, 0))[..., :6]
    else:
        def op(x, w):
            return F.conv2d(F.pad(x, (1, 0, 0, 0)), w, stride=(2, 1), padding=(2, 0))
    wr, wi = conv.weight_re, conv.weight_im
    yr = op(xr, wr) - op(xi, wi) + conv.bias_re[:, None, None]
    yi = op(xr, wi) + op(xi, wr) + conv.bias_im[:, None, None]
    assert torch.allclose(y, torch.cat([yr, yi], 1), atol=1e-5)
    assert y.shape[-2] == (32 if transposed else 8)


def test_complex_conv_is_causal_in_time():
    torch.manual_seed(2)
    for transposed in (False, True):
        conv = ComplexConv2d(1, 1, (5, 2), (2, 1), transposed=transposed)
        x = torch.randn(1, 2, 8, 10)
        x2 = x.clone()
        x2[..., 6:] += 5.0
        y, y2 = conv(x), conv(x2)
        assert torch.allclose(y[..., :6], y2[..., :6])
        assert not torch.allclose(y[..., 6:], y2[..., 6:])


def test_complex_lstm_cross_terms():
    torch.manual_seed(3)
    lstm = ComplexLSTM(3, 4)
    xr, xi = torch.randn(2, 5, 3), torch.randn(2, 5, 3)
    hr, hi = lstm(xr, xi)
    rr, ri = lstm.lstm_re(xr)[0], lstm.lstm_re(xi)[0]
    ir, ii = lstm.lstm_im(xr)[0], lstm.lstm_im(xi)[0]
    assert torch.allclose(hr, rr - ii, atol=1e-6)
    assert torch.allclose(hi, ri + ir, atol=1e-6)


def test_encoder_shapes_and_valid_posteriors(nets):
    enc, _ = nets
    out = encode(enc, spec(n=9))
    assert out.speech.mu.shape == (2, 9, 4)
    assert out.speech.is_valid()
    assert out.noise is None and out.skips is None
    dual = Encoder(EncoderConfig(**{**TINY.to_dict(), "dual_head": True})).eval()
    out2 = dual(spec(n=9), use_skips=True)
    assert out2.noise.mu.shape == (2, 9, 4)
    assert [s.shape[-2] for s in out2.skips] == [128, 64, 32, 16, 8, 4]


def test_encoder_accepts_spectrogram_objects(nets):
    enc, _ = nets
    bins = spec(b=1, n=5)
    a = encode(enc, ComplexSpectrogram(bins, StftConfig(), 1500))
    assert torch.equal(a.speech.mu, encode(enc, bins).speech.mu)


def test_encoder_and_decoder_are_causal(nets):
    enc, dec = nets
    s = spec(n=10)
    s2 = s.clone()
    s2[..., 7:] *= 3.0
    a, b = enc(s).speech.mu, enc(s2).speech.mu
    assert torch.allclose(a[:, :7], b[:, :7], atol=1e-6)
    z = torch.randn(2, 10, 4, dtype=torch.complex64)
    z2 = z.clone()
    z2[:, 7:] += 1.0
    assert torch.allclose(dec(z)[..., :7], dec(z2)[..., :7], atol=1e-6)


def test_decoder_output_shape_and_zero_dc(nets):
    _, dec = nets
    out = decode(dec, torch.randn(3, 6, 4, dtype=torch.complex64))
    assert out.shape == (3, N_BINS, 6) and out.is_complex()
    assert torch.all(out[:, 0] == 0)


def test_skipless_decoder_depends_only_on_latent(nets):
    enc, dec = nets
    s = spec()
    z = enc(s).speech.mu
    # perturbing encoder intermediates cannot reach a skip-free decoder
    with torch.no_grad():
        enc.blocks[2].conv.weight_re.add_(1.0)
    assert torch.equal(dec(z), dec(z.clone()))
    with pytest.raises(InvalidInputError):
        dec(z, enc(s, use_skips=True).skips)


def test_add_skips_preserves_output_until_trained(nets):
    enc, dec = nets
    s = spec()
    out = enc(s, use_skips=True)
    before = dec(out.speech.mu)
    dec.add_skips()
    after = dec(out.speech.mu, out.skips)
    assert torch.allclose(before, after, atol=1e-6)
    with pytest.raises(InvalidInputError):
        dec(out.speech.mu)
    # the new weights are trainable and do open the skip path
    loss = (after.abs() ** 2).sum()
    loss.backward()
    assert dec.blocks[0].conv.weight_re.grad[TINY.channels[-1]:].abs().sum() > 0


def test_skip_decoder_uses_encoder_features():
    torch.manual_seed(4)
    enc, dec = Encoder(TINY).eval(), Decoder(TINY, skips=True).eval()
    s = spec()
    out = enc(s, use_skips=True)
    z = out.speech.mu
    other = [f + 1.0 for f in out.skips]
    assert not torch.allclose(dec(z, out.skips), dec(z, other))


def test_zero_output_weights_give_zero_mask():
    torch.manual_seed(5)
    dec = Decoder(TINY).eval()
    last = dec.blocks[-1].conv
    with torch.no_grad():
        for p in (last.weight_re, last.weight_im, last.bias_re, last.bias_im):
            p.zero_()
    mask = dec(torch.randn(1, 5, 4, dtype=torch.complex64))
    assert torch.all(mask == 0)
    noisy = ComplexSpectrogram(spec(b=1, n=5)[0], StftConfig(), 1500)
    assert torch.all(apply_mask(noisy, mask[0]).bins == 0)


def test_discriminator_scores_one_per_utterance():
    torch.manual_seed(6)
    disc = Discriminator(TINY)
    assert disc(spec(b=3, n=8)).shape == (3,)


@given(st.integers(1, 12))
def test_any_frame_count_round_trips_shapes(n):
    torch.manual_seed(0)
    enc, dec = Encoder(TINY).eval(), Decoder(TINY, skips=True).eval()
    out = enc(spec(b=1, n=n), use_skips=True)
    assert dec(out.speech.mu, out.skips).shape == (1, N_BINS, n)


def test_gradients_reach_every_parameter():
    torch.manual_seed(7)
    enc, dec = Encoder(TINY), Decoder(TINY)
    s = spec(n=6)
    out = enc(s)
    loss = (dec(out.speech.mu) - s).abs().pow(2).mean() + out.speech.sigma.mean() + out.speech.delta.abs().mean()
    loss.backward()
    missing = [n for n, p in list(enc.named_parameters()) + list(dec.named_parameters()) if p.grad is None]
    assert missing == []
    assert np.isfinite(loss.item())
