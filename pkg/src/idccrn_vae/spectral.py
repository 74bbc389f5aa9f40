"""STFT analysis/synthesis, masking and WAV I/O.

Spectrograms are stored one-sided with frequency on the second-to-last axis
and frames on the last axis, i.e. ``(..., F, N)``.  Synthesis uses weighted
overlap-add normalised by the summed squared analysis window, so the
400/300 Hann pair reconstructs exactly even though it is not COLA.

With ``center=True`` (default) the signal is padded by half a frame on
both sides, so every real sample sits well inside at least one window.
Without it the first and last samples see window values near zero and
the normalisation divides spectral errors by almost nothing there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

from .errors import InvalidInputError

SAMPLE_RATE = 16000
WINDOW_FLOOR = 1e-8


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 400
    hop: int = 300
    fft_length: int = 512
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_length <= self.fft_length:
            raise InvalidInputError(
                f"need 0 < hop <= frame_length <= fft_length, got "
                f"{self.hop}/{self.frame_length}/{self.fft_length}"
            )
        if self.window != "hann":
            raise InvalidInputError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_length // 2 + 1

    @property
    def offset(self) -> int:
        """Zeros inserted before the first sample."""
        return self.frame_length // 2 if self.center else 0

    def n_frames(self, length: int) -> int:
        padded = length + 2 * self.offset
        return 1 + math.ceil(max(padded - self.frame_length, 0) / self.hop)

    def analysis_window(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.hann_window(self.frame_length, periodic=True, dtype=dtype, device=device)


@dataclass
class TimeSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidInputError("time signal must be a nonempty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("time signal contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise InvalidInputError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """One-sided complex STFT with shape ``(..., F, N)``.

    ``length`` is the number of time samples the spectrogram was computed
    from; :func:`istft` trims its output to it when known.
    """

    bins: torch.Tensor
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None

    def __post_init__(self):
        if not torch.is_complex(self.bins):
            raise InvalidInputError("spectrogram bins must be a complex tensor")
        if self.bins.ndim < 2 or self.bins.shape[-2] != self.config.n_bins:
            raise InvalidInputError(
                f"expected {self.config.n_bins} frequency bins, got shape {tuple(self.bins.shape)}"
            )

    @property
    def n_frames(self) -> int:
        return self.bins.shape[-1]

    @property
    def shape(self):
        return self.bins.shape


def _as_tensor(signal) -> torch.Tensor:
    if isinstance(signal, TimeSignal):
        signal = signal.samples
    if isinstance(signal, np.ndarray):
        signal = torch.from_numpy(np.ascontiguousarray(signal))
    if not isinstance(signal, torch.Tensor):
        signal = torch.as_tensor(signal)
    if not torch.is_floating_point(signal):
        signal = signal.to(torch.get_default_dtype())
    return signal


def stft(signal, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """Hann-windowed one-sided STFT of a (batched) real signal ``(..., T)``.

    With ``cfg.center`` half a frame of zeros is prepended and appended;
    the tail is then zero-padded so that the last frame is complete.  Each
    ``frame_length`` frame is zero-padded to ``fft_length`` before the FFT.
    """
    cfg = cfg or StftConfig()
    x = _as_tensor(signal)
    length = x.shape[-1]
    if length < cfg.frame_length:
        raise InvalidInputError(f"signal of {length} samples is shorter than one frame ({cfg.frame_length})")
    if not torch.isfinite(x).all():
        raise InvalidInputError("signal contains non-finite samples")
    n_frames = cfg.n_frames(length)
    pad = (n_frames - 1) * cfg.hop + cfg.frame_length - length - cfg.offset
    x = F.pad(x, (cfg.offset, pad))
    frames = x.unfold(-1, cfg.frame_length, cfg.hop) * cfg.analysis_window(x.dtype, x.device)
    spec = torch.fft.rfft(frames, n=cfg.fft_length)
    return ComplexSpectrogram(spec.transpose(-1, -2), cfg, length)


def _overlap_add(frames: torch.Tensor, hop: int) -> torch.Tensor:
    # frames: (B, N, W) -> (B, (N-1)*hop + W)
    batch, n_frames, width = frames.shape
    total = (n_frames - 1) * hop + width
    out = F.fold(
        frames.transpose(1, 2),
        output_size=(1, total),
        kernel_size=(1, width),
        stride=(1, hop),
    )
    return out.reshape(batch, total)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> torch.Tensor:
    """Inverse of :func:`stft` by normalised weighted overlap-add.

    Returns a real tensor ``(..., T)``.  ``T`` is ``length`` if given, else
    the length recorded on ``spec``, else the full padded span.
    """
    cfg = spec.config
    bins = spec.bins
    if bins.shape[-2] != cfg.n_bins:
        raise InvalidInputError(f"expected {cfg.n_bins} bins, got {bins.shape[-2]}")
    lead = bins.shape[:-2]
    n_frames = bins.shape[-1]
    frames = torch.fft.irfft(bins.transpose(-1, -2), n=cfg.fft_length)[..., : cfg.frame_length]
    win = cfg.analysis_window(frames.dtype, frames.device)
    frames = (frames * win).reshape(-1, n_frames, cfg.frame_length)
    ola = _overlap_add(frames, cfg.hop)
    wsum = _overlap_add((win * win).expand(1, n_frames, -1), cfg.hop)
    out = ola / wsum.clamp_min(WINDOW_FLOOR)
    out = out.reshape(*lead, -1)[..., cfg.offset :]
    length = length if length is not None else spec.length
    if length is None:
        out = out[..., : out.shape[-1] - cfg.offset]
    else:
        if length > out.shape[-1]:
            out = F.pad(out, (0, length - out.shape[-1]))
        out = out[..., :length]
    return out


def magnitude(spec) -> torch.Tensor:
    bins = spec.bins if isinstance(spec, ComplexSpectrogram) else spec
    return bins.abs()


def apply_mask(noisy: ComplexSpectrogram, mask) -> ComplexSpectrogram:
    """Element-wise complex masking ``X_hat = Y * M``."""
    m = mask.bins if isinstance(mask, ComplexSpectrogram) else torch.as_tensor(mask)
    if m.shape != noisy.bins.shape:
        raise InvalidInputError(f"mask shape {tuple(m.shape)} does not match spectrogram {tuple(noisy.bins.shape)}")
    return ComplexSpectrogram(noisy.bins * m, noisy.config, noisy.length)


def read_wav(path) -> TimeSignal:
    """Read a mono 16 kHz WAV (PCM16 or float32) into floats in [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if rate != SAMPLE_RATE:
        raise InvalidInputError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    return TimeSignal(samples, rate)


def write_wav(path, signal, fmt: str = "pcm16") -> Path:
    """Write a mono 16 kHz WAV; ``fmt`` is ``"pcm16"`` or ``"float32"``."""
    path = Path(path)
    if isinstance(signal, TimeSignal):
        samples = signal.samples
    else:
        samples = np.asarray(signal.detach().cpu() if isinstance(signal, torch.Tensor) else signal)
    if samples.ndim != 1:
        raise InvalidInputError("only mono signals can be written")
    if fmt == "pcm16":
        data = np.round(np.clip(samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    elif fmt == "float32":
        data = samples.astype(np.float32)
    else:
        raise InvalidInputError(f"unknown WAV format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, SAMPLE_RATE, data)
    return path
