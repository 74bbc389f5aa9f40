"""Synthetic corpus generation, SNR mixing and batched (X, V, Y) streams.

The synthetic corpus stands in for DNS-style speech/noise collections.
"Speakers" are harmonic sources with their own pitch range and formant
envelope; noise "sources" are coloured broadband or amplitude-modulated
band-limited processes.  Every source belongs to exactly one split.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from scipy import signal as sps

from .errors import InvalidInputError
from .spectral import SAMPLE_RATE, ComplexSpectrogram, StftConfig, read_wav, stft, write_wav

SPLITS = ("pretrain", "nsvae", "validation", "test")
KINDS = ("speech", "noise")
TARGET_RMS = 10 ** (-25 / 20)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def snr_db(speech: np.ndarray, noise: np.ndarray) -> float:
    return 10 * math.log10(power(speech) / power(noise))


def fit_length(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Tile (random circular offset) or randomly crop ``noise`` to ``length``."""
    if noise.size >= length:
        start = int(rng.integers(0, noise.size - length + 1))
        return noise[start : start + length]
    offset = int(rng.integers(0, noise.size))
    reps = math.ceil((length + offset) / noise.size)
    return np.tile(noise, reps)[offset : offset + length]


def mix_at_snr(speech: np.ndarray, noise: np.ndarray, snr: float) -> tuple[np.ndarray, float]:
    """Return ``(speech + gain * noise, gain)`` with the requested full-utterance SNR."""
    speech = np.asarray(speech, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if speech.shape != noise.shape:
        raise InvalidInputError(f"speech/noise lengths differ: {speech.shape} vs {noise.shape}")
    p_s, p_v = power(speech), power(noise)
    if p_s <= 0 or p_v <= 0:
        raise InvalidInputError("speech and noise must both have nonzero energy")
    if math.isinf(snr) and snr > 0:
        return speech.copy(), 0.0
    gain = math.sqrt(p_s / (p_v * 10 ** (snr / 10)))
    return speech + gain * noise, gain


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthConfig:
    n_speakers: int = 200
    n_noise_sources: int = 100
    utterances_per_source: int = 20
    duration_range: tuple[float, float] = (1.0, 4.0)
    split_fractions: dict = field(
        default_factory=lambda: {"pretrain": 0.45, "nsvae": 0.36, "validation": 0.09, "test": 0.10}
    )
    level_rms: float = TARGET_RMS

    def __post_init__(self):
        self.duration_range = tuple(self.duration_range)
        if set(self.split_fractions) != set(SPLITS):
            raise InvalidInputError(f"split_fractions must cover exactly {SPLITS}")
        if abs(sum(self.split_fractions.values()) - 1) > 1e-9:
            raise InvalidInputError("split fractions must sum to 1")


def allocate(n: int, fractions: dict) -> dict:
    """Largest-remainder split of ``n`` items; every split gets at least one if n allows."""
    raw = {k: n * fractions[k] for k in SPLITS}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    for k in sorted(SPLITS, key=lambda k: raw[k] - counts[k], reverse=True)[: n - sum(counts.values())]:
        counts[k] += 1
    for k in SPLITS:
        if counts[k] == 0 and fractions[k] > 0:
            donor = max(counts, key=counts.get)
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[k] += 1
    return counts


def _normalise(x: np.ndarray, rms: float) -> np.ndarray:
    return x * (rms / max(math.sqrt(power(x)), 1e-12))


def _speaker_params(rng):
    return {
        "f0": float(rng.uniform(90, 260)),
        "formants": sorted(float(f) for f in rng.uniform([300, 900, 2000], [900, 2200, 3800])),
        "bandwidths": [float(b) for b in rng.uniform([80, 120, 200], [200, 300, 500])],
        "tilt_db_per_oct": float(rng.uniform(-9, -5)),
        "vibrato_hz": float(rng.uniform(3, 7)),
    }


def _speech(params, n, rng):
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    pos = int(rng.integers(0, SAMPLE_RATE // 10))
    while pos < n:
        dur = int(rng.uniform(0.12, 0.4) * SAMPLE_RATE)
        seg = slice(pos, min(pos + dur, n))
        m = seg.stop - seg.start
        if m <= 0:
            break
        tt = t[seg] - t[seg.start]
        f0 = params["f0"] * rng.uniform(0.85, 1.2) * (1 + rng.uniform(-0.15, 0.15) * tt / max(tt[-1], 1e-3))
        f0 = f0 * (1 + 0.02 * np.sin(2 * np.pi * params["vibrato_hz"] * tt))
        phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
        shift = rng.uniform(0.9, 1.1)
        seg_sig = np.zeros(m)
        for h in range(1, int(7600 / f0.max()) + 1):
            freq = h * f0.mean()
            amp = 10 ** (params["tilt_db_per_oct"] * math.log2(freq / 100) / 20)
            env = sum(
                math.exp(-0.5 * ((freq - fc * shift) / bw) ** 2) for fc, bw in zip(params["formants"], params["bandwidths"])
            )
            seg_sig += amp * (0.05 + env) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        ramp = np.minimum(1.0, np.minimum(tt, tt[-1] - tt) / 0.03)
        out[seg] += seg_sig * ramp * rng.uniform(0.5, 1.0)
        pos = seg.stop + int(rng.uniform(0.03, 0.25) * SAMPLE_RATE)
    return out


def _noise_params(rng, index):
    if index % 2 == 0:
        lo = float(rng.uniform(20, 1500))
        return {"family": "broadband", "low_hz": lo, "high_hz": float(rng.uniform(lo + 2500, 7900)),
                "order": int(rng.integers(1, 4)), "tilt": float(rng.uniform(-0.5, 0.5))}
    centres = sorted(float(c) for c in rng.uniform(200, 6000, size=3))
    return {"family": "modulated", "centres": centres, "width_hz": float(rng.uniform(300, 900)),
            "mod_hz": float(rng.uniform(0.5, 8)), "floor": float(rng.uniform(0.2, 0.6))}


def _noise(params, n, rng):
    white = rng.standard_normal(n)
    if params["family"] == "broadband":
        sos = sps.butter(params["order"], [params["low_hz"], params["high_hz"]], "bandpass", fs=SAMPLE_RATE, output="sos")
        out = sps.sosfilt(sos, white)
        return out + params["tilt"] * np.concatenate([[0.0], np.diff(out)])
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for c in params["centres"]:
        lo, hi = max(c - params["width_hz"] / 2, 20), min(c + params["width_hz"] / 2, 7900)
        sos = sps.butter(2, [lo, hi], "bandpass", fs=SAMPLE_RATE, output="sos")
        band = sps.sosfilt(sos, rng.standard_normal(n))
        mod = params["floor"] + (1 - params["floor"]) * 0.5 * (1 + np.sin(2 * np.pi * params["mod_hz"] * t + rng.uniform(0, 6.3)))
        out += band * mod
    return out + 0.3 * sps.sosfilt(sps.butter(1, 4000, fs=SAMPLE_RATE, output="sos"), white)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    id: str
    path: str
    kind: str
    split: str
    source: str


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    seed: int
    root: Path = Path(".")
    config: dict = field(default_factory=dict)

    def select(self, split: str, kind: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split and e.kind == kind]

    def path_of(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def check_disjoint(self) -> None:
        seen = {}
        for e in self.entries:
            if seen.setdefault((e.kind, e.source), e.split) != e.split:
                raise InvalidInputError(f"source {e.source} appears in splits {seen[(e.kind, e.source)]} and {e.split}")

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "config": self.config, "entries": [asdict(e) for e in self.entries]}, indent=1
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read manifest {path}: {exc}") from exc
        entries = [ManifestEntry(**e) for e in raw["entries"]]
        for e in entries:
            if e.kind not in KINDS or e.split not in SPLITS:
                raise InvalidInputError(f"bad manifest entry {e}")
        m = cls(entries, int(raw["seed"]), path.parent, raw.get("config", {}))
        m.check_disjoint()
        return m


def synth_corpus(cfg: SynthConfig, out_dir, seed: int = 0) -> CorpusManifest:
    """Write a deterministic synthetic corpus (WAV + manifest.json) to ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    root_rng = np.random.default_rng(seed)
    entries = []
    for kind, n_sources in (("speech", cfg.n_speakers), ("noise", cfg.n_noise_sources)):
        counts = allocate(n_sources, cfg.split_fractions)
        order = root_rng.permutation(n_sources)
        split_of = {}
        start = 0
        for split in SPLITS:
            for idx in order[start : start + counts[split]]:
                split_of[int(idx)] = split
            start += counts[split]
        for src in range(n_sources):
            src_rng = np.random.default_rng([seed, KINDS.index(kind), src])
            params = _speaker_params(src_rng) if kind == "speech" else _noise_params(src_rng, src)
            source = f"{kind[:2]}{src:03d}"
            for u in range(cfg.utterances_per_source):
                n = int(src_rng.uniform(*cfg.duration_range) * SAMPLE_RATE)
                audio = _speech(params, n, src_rng) if kind == "speech" else _noise(params, n, src_rng)
                audio = _normalise(audio, cfg.level_rms)
                rel = Path(kind) / f"{source}_{u:03d}.wav"
                write_wav(out_dir / rel, audio, fmt="float32")
                entries.append(ManifestEntry(f"{source}_{u:03d}", rel.as_posix(), kind, split_of[src], source))
    manifest = CorpusManifest(entries, seed, out_dir, {"synth": asdict(cfg)})
    manifest.check_disjoint()
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------- batching


@dataclass
class MixSpec:
    speech_id: str
    noise_id: str
    snr_db: float
    gain: float


@dataclass
class Batch:
    x: torch.Tensor
    v: torch.Tensor
    y: torch.Tensor
    X: ComplexSpectrogram
    V: ComplexSpectrogram
    Y: ComplexSpectrogram
    mixes: list[MixSpec]

    def __len__(self):
        return self.x.shape[0]


@lru_cache(maxsize=8192)
def _load(path: str) -> np.ndarray:
    return read_wav(path).samples


def batch_iterator(
    manifest: CorpusManifest,
    split: str,
    batch_size: int = 15,
    snr_range: tuple[float, float] = (-10.0, 15.0),
    seed: int = 0,
    segment: int | None = None,
    stft_cfg: StftConfig | None = None,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield shuffled batches of aligned clean/noise/mixture signals and spectrograms.

    Each speech utterance of ``split`` is paired with a random noise
    utterance from the same split.  With ``segment`` every item is cropped
    (random offset) to that many samples; otherwise a batch must hold
    equal-length utterances, so use ``batch_size=1`` for full utterances.
    """
    stft_cfg = stft_cfg or StftConfig()
    speech = manifest.select(split, "speech")
    noise = manifest.select(split, "noise")
    if not speech or not noise:
        raise InvalidInputError(f"split {split!r} has no speech or no noise entries")
    if batch_size <= 0:
        raise InvalidInputError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(speech)) if shuffle else np.arange(len(speech))
    for start in range(0, len(order), batch_size):
        xs, vs, ys, mixes = [], [], [], []
        for idx in order[start : start + batch_size]:
            s_entry = speech[int(idx)]
            n_entry = noise[int(rng.integers(len(noise)))]
            x = _load(str(manifest.path_of(s_entry)))
            if segment is not None:
                x = fit_length(x, segment, rng)
            v = fit_length(_load(str(manifest.path_of(n_entry))), x.size, rng)
            snr = float(rng.uniform(*snr_range)) if snr_range[0] != snr_range[1] else float(snr_range[0])
            y, gain = mix_at_snr(x, v, snr)
            xs.append(x)
            vs.append(gain * v)
            ys.append(y)
            mixes.append(MixSpec(s_entry.id, n_entry.id, snr, gain))
        if len({a.size for a in xs}) != 1:
            raise InvalidInputError("utterances in a batch differ in length; set segment or batch_size=1")
        dtype = torch.get_default_dtype()
        x_t, v_t, y_t = (torch.from_numpy(np.stack(a)).to(dtype) for a in (xs, vs, ys))
        yield Batch(x_t, v_t, y_t, stft(x_t, stft_cfg), stft(v_t, stft_cfg), stft(y_t, stft_cfg), mixes)
