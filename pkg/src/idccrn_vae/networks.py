"""Complex conv-recurrent encoder, mirrored decoder and discriminator.

Complex feature maps are real tensors ``(B, 2C, F, T)`` whose first ``C``
channels hold the real part and last ``C`` the imaginary part.  The DC
bin is dropped before the first convolution (256 = 4 * 2**6 bins) and
restored as zero at the decoder output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError
from .latent import ComplexDiagGaussian, constrain_raw_outputs

N_BINS = 257


@dataclass
class EncoderConfig:
    channels: list[int] = field(default_factory=lambda: [32, 64, 128, 128, 256, 256])
    kernel: tuple[int, int] = (5, 2)
    stride: tuple[int, int] = (2, 1)
    latent_dim: int = 128
    lstm_hidden: int = 256
    bidirectional: bool = False
    dual_head: bool = False

    def __post_init__(self):
        self.channels = list(self.channels)
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        if len(self.channels) != 6:
            raise InvalidInputError("the encoder has exactly six conv stages")
        if self.latent_dim <= 0 or self.lstm_hidden <= 0:
            raise InvalidInputError("latent_dim and lstm_hidden must be positive")

    @property
    def bottleneck_bins(self) -> int:
        return (N_BINS - 1) // self.stride[0] ** len(self.channels)

    def to_dict(self) -> dict:
        return asdict(self)


def complex_cat(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ar, ai = a.chunk(2, dim=1)
    br, bi = b.chunk(2, dim=1)
    return torch.cat([ar, br, ai, bi], dim=1)


def spec_to_features(bins: torch.Tensor) -> torch.Tensor:
    """(B, 257, N) complex -> (B, 2, 256, N) real, DC removed."""
    if bins.ndim != 3 or bins.shape[1] != N_BINS:
        raise InvalidInputError(f"expected a (batch, {N_BINS}, frames) spectrogram, got {tuple(bins.shape)}")
    x = bins[:, 1:, :]
    return torch.stack([x.real, x.imag], dim=1).to(torch.get_default_dtype())


def features_to_spec(feat: torch.Tensor) -> torch.Tensor:
    """(B, 2, 256, N) real -> (B, 257, N) complex with zero DC."""
    z = torch.complex(feat[:, 0], feat[:, 1])
    return F.pad(z, (0, 0, 1, 0))


class ComplexConv2d(nn.Module):
    """(a + ib) * (Wr + iWi) as one real convolution with a block kernel."""

    def __init__(self, in_ch, out_ch, kernel, stride, transposed=False):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.transposed = tuple(kernel), tuple(stride), transposed
        shape = (in_ch, out_ch, *kernel) if transposed else (out_ch, in_ch, *kernel)
        fan_in = in_ch * kernel[0] * kernel[1]
        bound = 1.0 / math.sqrt(2 * fan_in)
        self.weight_re = nn.Parameter(torch.empty(shape).uniform_(-bound, bound))
        self.weight_im = nn.Parameter(torch.empty(shape).uniform_(-bound, bound))
        self.bias_re = nn.Parameter(torch.zeros(out_ch))
        self.bias_im = nn.Parameter(torch.zeros(out_ch))

    def block_weight(self):
        wr, wi = self.weight_re, self.weight_im
        if self.transposed:
            # rows index input channels: [xr; xi] -> [yr, yi]
            return torch.cat([torch.cat([wr, wi], 1), torch.cat([-wi, wr], 1)], 0)
        return torch.cat([torch.cat([wr, -wi], 1), torch.cat([wi, wr], 1)], 0)

    def forward(self, x):
        bias = torch.cat([self.bias_re, self.bias_im])
        kf, kt = self.kernel
        if self.transposed:
            y = F.conv_transpose2d(
                x, self.block_weight(), bias, stride=self.stride, padding=(kf // 2, 0),
                output_padding=(self.stride[0] - 1, 0),
            )
            # transposed time kernel grows T by kt - 1; keep the causal part
            return y[..., : x.shape[-1]]
        x = F.pad(x, (kt - 1, 0, 0, 0))
        return F.conv2d(x, self.block_weight(), bias, stride=self.stride, padding=(kf // 2, 0))


class ComplexBlock(nn.Module):
    """Complex conv, split real/imag batch norm, PReLU on each component."""

    def __init__(self, in_ch, out_ch, kernel, stride, transposed=False, activation=True):
        super().__init__()
        self.conv = ComplexConv2d(in_ch, out_ch, kernel, stride, transposed)
        self.norm = nn.BatchNorm2d(2 * out_ch) if activation else None
        self.act = nn.PReLU() if activation else None

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.act(self.norm(x))
        return x


class ComplexLSTM(nn.Module):
    """Split-complex LSTM: real LSTMs on real/imag parts with cross terms."""

    def __init__(self, input_size, hidden_size, bidirectional=False):
        super().__init__()
        self.lstm_re = nn.LSTM(input_size, hidden_size, batch_first=True, bidirectional=bidirectional)
        self.lstm_im = nn.LSTM(input_size, hidden_size, batch_first=True, bidirectional=bidirectional)
        self.output_size = hidden_size * (2 if bidirectional else 1)

    def forward(self, xr, xi):
        both = torch.cat([xr, xi], dim=0)
        rr, ri = self.lstm_re(both)[0].chunk(2, dim=0)
        ir, ii = self.lstm_im(both)[0].chunk(2, dim=0)
        return rr - ii, ri + ir


class LatentHead(nn.Module):
    """Projects complex LSTM states to raw (mu, log-variance, relation) outputs."""

    def __init__(self, hidden, latent_dim):
        super().__init__()
        self.latent_dim = latent_dim
        self.proj = nn.Linear(2 * hidden, 5 * latent_dim)

    def forward(self, hr, hi) -> ComplexDiagGaussian:
        raw = self.proj(torch.cat([hr, hi], dim=-1))
        mu_re, mu_im, s, t, phase = raw.split(self.latent_dim, dim=-1)
        return constrain_raw_outputs(torch.complex(mu_re, mu_im), s, t, phase)


class EncoderOutput(NamedTuple):
    speech: ComplexDiagGaussian
    noise: ComplexDiagGaussian | None
    skips: list | None


class Encoder(nn.Module):
    """Six complex conv blocks, a complex LSTM and one or two latent heads.

    Latents are per frame: distribution parameters have shape (B, N, L).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = [1] + cfg.channels
        self.blocks = nn.ModuleList(
            ComplexBlock(chans[i], chans[i + 1], cfg.kernel, cfg.stride) for i in range(len(cfg.channels))
        )
        self.rnn = ComplexLSTM(cfg.channels[-1] * cfg.bottleneck_bins, cfg.lstm_hidden, cfg.bidirectional)
        self.speech_head = LatentHead(self.rnn.output_size, cfg.latent_dim)
        self.noise_head = LatentHead(self.rnn.output_size, cfg.latent_dim) if cfg.dual_head else None

    def trunk_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith(("speech_head", "noise_head"))]

    def forward(self, bins: torch.Tensor, use_skips: bool = False) -> EncoderOutput:
        x = spec_to_features(bins)
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        b, c2, f, n = x.shape
        c = c2 // 2
        xr = x[:, :c].permute(0, 3, 1, 2).reshape(b, n, c * f)
        xi = x[:, c:].permute(0, 3, 1, 2).reshape(b, n, c * f)
        hr, hi = self.rnn(xr, xi)
        speech = self.speech_head(hr, hi)
        noise = self.noise_head(hr, hi) if self.noise_head is not None else None
        return EncoderOutput(speech, noise, skips if use_skips else None)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`: complex LSTM, projection, six transposed blocks.

    With ``skips=True`` every stage takes the matching encoder block output
    concatenated channel-wise (U-Net style).  :meth:`add_skips` grows a
    skip-free decoder into a skip decoder whose new weights start at zero,
    so its output is unchanged until those weights are trained.
    """

    def __init__(self, cfg: EncoderConfig, skips: bool = False):
        super().__init__()
        self.cfg = cfg
        self.skips = skips
        self.rnn = ComplexLSTM(cfg.latent_dim, cfg.lstm_hidden, cfg.bidirectional)
        self.proj = nn.Linear(2 * self.rnn.output_size, 2 * cfg.channels[-1] * cfg.bottleneck_bins)
        rev = cfg.channels[::-1] + [1]
        mult = 2 if skips else 1
        self.blocks = nn.ModuleList(
            ComplexBlock(
                mult * rev[i], rev[i + 1], cfg.kernel, cfg.stride, transposed=True,
                activation=i < len(cfg.channels) - 1,
            )
            for i in range(len(cfg.channels))
        )

    @torch.no_grad()
    def add_skips(self) -> "Decoder":
        if self.skips:
            return self
        for block in self.blocks:
            conv = block.conv
            for name in ("weight_re", "weight_im"):
                w = getattr(conv, name)
                grown = torch.cat([w, torch.zeros_like(w)], dim=0)
                setattr(conv, name, nn.Parameter(grown))
            conv.in_ch *= 2
        self.skips = True
        return self

    def forward(self, z: torch.Tensor, skips: list | None = None) -> torch.Tensor:
        """Decode latents ``z`` (B, N, L) complex to a (B, 257, N) complex tensor."""
        if self.skips and (skips is None or len(skips) != len(self.blocks)):
            raise InvalidInputError("this decoder needs the six encoder skip feature maps")
        if not self.skips and skips is not None:
            raise InvalidInputError("decoder was built without skip connections")
        b, n, _ = z.shape
        hr, hi = self.rnn(z.real.to(torch.get_default_dtype()), z.imag.to(torch.get_default_dtype()))
        h = self.proj(torch.cat([hr, hi], dim=-1))
        c, f = self.cfg.channels[-1], self.cfg.bottleneck_bins
        x = h.reshape(b, n, 2 * c, f).permute(0, 2, 3, 1)
        for i, block in enumerate(self.blocks):
            if self.skips:
                skip = skips[-1 - i]
                if skip.shape != x.shape:
                    raise InvalidInputError(f"skip shape {tuple(skip.shape)} != decoder stage {tuple(x.shape)}")
                x = complex_cat(x, skip)
            x = block(x)
        return features_to_spec(x)


class Discriminator(nn.Module):
    """Real conv stack + real LSTM; one scalar score per utterance."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = [2] + cfg.channels
        layers = []
        for i in range(len(cfg.channels)):
            layers.append(
                nn.Sequential(
                    nn.ConstantPad2d((cfg.kernel[1] - 1, 0, 0, 0), 0.0),
                    nn.Conv2d(chans[i], chans[i + 1], cfg.kernel, cfg.stride, padding=(cfg.kernel[0] // 2, 0)),
                    nn.BatchNorm2d(chans[i + 1]),
                    nn.PReLU(),
                )
            )
        self.blocks = nn.Sequential(*layers)
        self.rnn = nn.LSTM(cfg.channels[-1] * cfg.bottleneck_bins, cfg.lstm_hidden, batch_first=True)
        self.head = nn.Linear(cfg.lstm_hidden, 1)

    def forward(self, bins: torch.Tensor) -> torch.Tensor:
        x = self.blocks(spec_to_features(bins))
        b, c, f, n = x.shape
        h, _ = self.rnn(x.permute(0, 3, 1, 2).reshape(b, n, c * f))
        return self.head(h).squeeze(-1).mean(-1)


def encode(encoder: Encoder, spec, use_skips: bool = False) -> EncoderOutput:
    bins = spec.bins if hasattr(spec, "bins") else spec
    return encoder(bins, use_skips=use_skips)


def decode(decoder: Decoder, z: torch.Tensor, skips=None) -> torch.Tensor:
    return decoder(z, skips)


def discriminate(disc: Discriminator, spec) -> torch.Tensor:
    bins = spec.bins if hasattr(spec, "bins") else spec
    return disc(bins)
