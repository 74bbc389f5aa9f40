"""Inference pipeline, SI-SDR scoring, latent diagnostics and result tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import CorpusManifest, fit_length, mix_at_snr
from .errors import ConfigurationError, InvalidInputError
from .latent import kl_to_prior, sample_like
from .networks import Decoder, Encoder
from .spectral import ComplexSpectrogram, StftConfig, TimeSignal, apply_mask, istft, read_wav, stft
from .training import load_decoder, load_nsvae, load_vae

Z95 = 1.959963984540054


def si_sdr_metric(est, ref) -> float:
    """SI-SDR in dB; +inf without distortion, -inf for a zero (or orthogonal) estimate."""
    est = np.asarray(est.samples if isinstance(est, TimeSignal) else est, dtype=np.float64)
    ref = np.asarray(ref.samples if isinstance(ref, TimeSignal) else ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise InvalidInputError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0:
        raise InvalidInputError("reference signal has zero energy")
    target = (float(est @ ref) / ref_energy) * ref
    dist = target - est
    num, den = float(target @ target), float(dist @ dist)
    if num == 0:
        return -math.inf
    if den == 0:
        return math.inf
    return 10 * math.log10(num / den)


# ---------------------------------------------------------------- enhance


class Enhancer:
    """Frozen NSVAE encoder + decoder.

    With a mask-mode decoder the pipeline is stft -> encode -> decode mask
    -> Y * M -> istft; a spectrogram-mode decoder (before fine-tuning)
    outputs the speech estimate directly.  The decoder is fed the posterior
    mean unless ``sample_latent`` is set.
    """

    def __init__(self, nsvae: Encoder, decoder: Decoder, stft_cfg: StftConfig | None = None,
                 output_mode: str = "mask", sample_latent: bool = False, seed: int = 0):
        if output_mode not in ("mask", "spectrogram"):
            raise ConfigurationError(f"unknown decoder output mode {output_mode!r}")
        self.nsvae = nsvae.eval()
        self.decoder = decoder.eval()
        self.stft_cfg = stft_cfg or StftConfig()
        self.output_mode = output_mode
        self.sample_latent = sample_latent
        self.generator = torch.Generator().manual_seed(seed)

    @classmethod
    def from_checkpoints(cls, nsvae_ckpt, decoder_ckpt, **kwargs) -> "Enhancer":
        nsvae, n_manifest = load_nsvae(nsvae_ckpt)
        decoder, d_manifest = load_decoder(decoder_ckpt)
        if n_manifest["network"] != d_manifest["network"] or n_manifest["stft"] != d_manifest["stft"]:
            raise ConfigurationError("NSVAE and decoder checkpoints have incompatible architecture configs")
        stft_cfg = StftConfig(**n_manifest["stft"])
        return cls(nsvae, decoder, stft_cfg, d_manifest.get("output_mode", "mask"), **kwargs)

    @torch.no_grad()
    def enhance_spectrogram(self, Y: ComplexSpectrogram) -> ComplexSpectrogram:
        bins = Y.bins if Y.bins.ndim == 3 else Y.bins.unsqueeze(0)
        bins = bins.to(torch.complex64 if torch.get_default_dtype() == torch.float32 else torch.complex128)
        out = self.nsvae(bins, use_skips=self.decoder.skips)
        z = sample_like(out.speech, self.generator) if self.sample_latent else out.speech.mu
        dec = self.decoder(z, out.skips)
        if self.output_mode == "mask":
            est = apply_mask(ComplexSpectrogram(bins, Y.config, Y.length), dec)
        else:
            est = ComplexSpectrogram(dec, Y.config, Y.length)
        if Y.bins.ndim == 2:
            est = ComplexSpectrogram(est.bins[0], est.config, est.length)
        return est

    def __call__(self, noisy) -> TimeSignal:
        sig = noisy if isinstance(noisy, TimeSignal) else TimeSignal(np.asarray(noisy))
        x = torch.from_numpy(sig.samples).to(torch.get_default_dtype())
        Y = stft(x, self.stft_cfg)
        out = istft(self.enhance_spectrogram(Y), len(sig))
        return TimeSignal(out.double().numpy(), sig.sample_rate)


def enhance(nsvae_ckpt, decoder_ckpt, noisy: TimeSignal, sample_latent: bool = False) -> TimeSignal:
    return Enhancer.from_checkpoints(nsvae_ckpt, decoder_ckpt, sample_latent=sample_latent)(noisy)


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    rows: list[dict]
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.rows:
            raise InvalidInputError("a report needs at least one row")
        if not self.columns:
            self.columns = [k for k, v in self.rows[0].items() if k != "id" and isinstance(v, (int, float))]

    def aggregate(self, column: str) -> tuple[float, float | None]:
        """Mean and 95% normal-approximation half-width (None for one row)."""
        vals = np.array([float(r[column]) for r in self.rows], dtype=np.float64)
        mean = float(vals.mean())
        if vals.size < 2:
            return mean, None
        return mean, float(Z95 * vals.std(ddof=1) / math.sqrt(vals.size))

    @property
    def aggregates(self) -> dict:
        return {c: self.aggregate(c) for c in self.columns}

    def render(self) -> str:
        width = max(12, *(len(c) + 2 for c in self.columns))
        head = f"{'id':<24}" + "".join(f"{c:>{width}}" for c in self.columns)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{str(r['id']):<24}" + "".join(f"{float(r[c]):>{width}.2f}" for c in self.columns))
        lines.append("-" * len(head))
        cells = []
        for c in self.columns:
            mean, hw = self.aggregate(c)
            cells.append(f"{mean:.2f} (±{hw:.2f})" if hw is not None else f"{mean:.2f} (±n/a)")
        lines.append(f"{'mean (95% CI)':<24}" + "".join(f"{s:>{width + 4}}" for s in cells))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["id", *self.columns])
        for r in self.rows:
            w.writerow([r["id"], *(repr(float(r[c])) for c in self.columns)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        rows = [{"id": rec[0], **{c: float(v) for c, v in zip(header[1:], rec[1:])}} for rec in reader if rec]
        return cls(rows, header[1:])


def report(rows: list[dict], columns: list[str] | None = None) -> MetricsReport:
    return MetricsReport(list(rows), list(columns or []))


def evaluate(enhancer: Enhancer, manifest: CorpusManifest, split: str = "test", snr_db: float = 0.0,
             seed: int = 0, limit: int | None = None) -> MetricsReport:
    """Score enhancement on synthetic mixtures of ``split`` at a fixed input SNR."""
    speech, noise = manifest.select(split, "speech"), manifest.select(split, "noise")
    if not speech or not noise:
        raise InvalidInputError(f"split {split!r} has no speech or no noise")
    rng = np.random.default_rng(seed)
    rows = []
    for entry in speech[:limit]:
        x = read_wav(manifest.path_of(entry)).samples
        n_entry = noise[int(rng.integers(len(noise)))]
        v = fit_length(read_wav(manifest.path_of(n_entry)).samples, x.size, rng)
        y, _ = mix_at_snr(x, v, snr_db)
        xhat = enhancer(TimeSignal(y)).samples
        before, after = si_sdr_metric(y, x), si_sdr_metric(xhat, x)
        rows.append({"id": entry.id, "si_sdr_in": before, "si_sdr_out": after, "si_sdr_gain": after - before})
    return report(rows)


# ---------------------------------------------------------------- latents


@dataclass
class LatentDiagnostics:
    kll: float
    recon_si_sdr: float
    n_utterances: int
    per_utterance: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"kll": self.kll, "recon_si_sdr": self.recon_si_sdr, "n_utterances": self.n_utterances}


@torch.no_grad()
def latent_diagnostics(vae, manifest: CorpusManifest, split: str = "validation", kind: str | None = None) -> LatentDiagnostics:
    """Mean frame-averaged KL to the prior and mean reconstruction SI-SDR over a split.

    ``vae`` is a checkpoint path or an ``(encoder, decoder)`` pair.  The
    decoder reconstructs from the posterior mean.
    """
    if isinstance(vae, (str, Path)):
        enc, dec, m = load_vae(vae)
        kind = kind or m.get("kind", "speech")
        stft_cfg = StftConfig(**m["stft"])
    else:
        enc, dec = vae
        stft_cfg = StftConfig()
    kind = kind or "speech"
    enc.eval(), dec.eval()
    entries = manifest.select(split, kind)
    if not entries:
        raise InvalidInputError(f"split {split!r} has no {kind} utterances")
    rows = []
    for e in entries:
        x = torch.from_numpy(read_wav(manifest.path_of(e)).samples).to(torch.get_default_dtype())
        X = stft(x.unsqueeze(0), stft_cfg)
        out = enc(X.bins, use_skips=dec.skips)
        kll = kl_to_prior(out.speech).mean().item()
        est = dec(out.speech.mu, out.skips)
        xhat = istft(ComplexSpectrogram(est, stft_cfg, X.length))[0]
        rows.append({"id": e.id, "kll": kll, "recon_si_sdr": si_sdr_metric(xhat.double().numpy(), x.double().numpy())})
    return LatentDiagnostics(
        float(np.mean([r["kll"] for r in rows])),
        float(np.mean([r["recon_si_sdr"] for r in rows])),
        len(rows),
        rows,
    )
