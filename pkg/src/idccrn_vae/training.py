"""Three-stage training: VAE pretraining, NSVAE latent matching, decoder fine-tuning."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Batch, CorpusManifest, batch_iterator
from .errors import ConfigurationError, DivergenceError, MissingCheckpointError
from .latent import kl_between, sample_like
from .losses import adversarial_losses, frame_kl, nsvae_loss, pretrain_loss, recon_loss, si_sdr_loss
from .networks import Decoder, Discriminator, Encoder, EncoderConfig
from .spectral import SAMPLE_RATE, ComplexSpectrogram, apply_mask, istft, stft

log = logging.getLogger(__name__)

DISC_COLLAPSE_LEVEL = 1e-4
DISC_COLLAPSE_EPOCHS = 5


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class PlateauState:
    """Learning-rate halving and early-stopping bookkeeping.

    ``best`` may be seeded with the loss of the untrained model so that
    epoch 1 has to beat it.  ``stale`` counts epochs since the last
    improvement (early stop); ``stale_lr`` additionally resets whenever the
    rate is halved.
    """

    lr_scale: float = 1.0
    best: float = math.inf
    stale: int = 0
    stale_lr: int = 0
    halving_patience: int = 3
    stop_patience: int = 20
    halved: bool = False
    stop: bool = False


def lr_schedule_step(state: PlateauState, validation_loss: float) -> PlateauState:
    if validation_loss < state.best:
        return replace(state, best=validation_loss, stale=0, stale_lr=0, halved=False, stop=False)
    stale, stale_lr = state.stale + 1, state.stale_lr + 1
    halved = stale_lr >= state.halving_patience
    return replace(
        state,
        stale=stale,
        stale_lr=0 if halved else stale_lr,
        lr_scale=state.lr_scale * (0.5 if halved else 1.0),
        halved=halved,
        stop=stale >= state.stop_patience,
    )


# ---------------------------------------------------------------- run log


@dataclass
class RunLog:
    stage: str
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def record(self, **entry) -> None:
        if self.epochs and entry["epoch"] <= self.epochs[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        self.epochs.append(entry)

    def losses(self, key: str = "val_loss") -> list[float]:
        return [e[key] for e in self.epochs]

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(dict(e, stage=self.stage, config_hash=self.config_hash)) + "\n")
        if self.extra:
            path.with_suffix(".extra.json").write_text(json.dumps(self.extra, indent=2))
        return path

    @classmethod
    def read(cls, path) -> "RunLog":
        path = Path(path)
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        stage = rows[0]["stage"] if rows else ""
        chash = rows[0]["config_hash"] if rows else ""
        for r in rows:
            r.pop("stage", None)
            r.pop("config_hash", None)
        extra_path = path.with_suffix(".extra.json")
        extra = json.loads(extra_path.read_text()) if extra_path.exists() else {}
        return cls(stage, chash, rows, extra)


# ---------------------------------------------------------------- helpers


@dataclass
class StageResult:
    checkpoint: Path
    runlog: RunLog
    modules: dict


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def _segment(cfg: ExperimentConfig):
    s = cfg.train.segment_seconds
    return None if s is None else int(round(s * SAMPLE_RATE))


def _batches(cfg: ExperimentConfig, manifest, split, seed, snr_range=None):
    t = cfg.train
    it = batch_iterator(
        manifest, split, t.batch_size, snr_range or t.snr_range, seed, _segment(cfg), cfg.stft,
    )
    for i, batch in enumerate(it):
        if t.max_batches_per_epoch is not None and i >= t.max_batches_per_epoch:
            return
        yield batch


def _validation_batches(cfg, manifest):
    # fixed seed: every epoch sees the same validation crops and mixtures
    return list(_batches(cfg, manifest, "validation", seed=10_000 + cfg.train.seed))


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int):
    if not torch.isfinite(loss):
        raise DivergenceError(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")


def _clip(params, cfg):
    if cfg.train.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)


def _freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _run_epochs(
    cfg: ExperimentConfig,
    stage: str,
    optimizers: list[torch.optim.Optimizer],
    train_epoch: Callable[[int], dict],
    validate: Callable[[], float],
    save_best: Callable[[int, float], None],
    runlog: RunLog,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> RunLog:
    t = cfg.train
    base_lrs = [[g["lr"] for g in opt.param_groups] for opt in optimizers]
    baseline = validate()
    state = PlateauState(best=baseline, halving_patience=t.lr_halving_patience, stop_patience=t.early_stop_patience)
    runlog.extra["initial_val_loss"] = baseline
    save_best(0, baseline)
    start = time.perf_counter()
    for epoch in range(1, t.max_epochs + 1):
        stats = train_epoch(epoch)
        val = validate()
        if not math.isfinite(val):
            raise DivergenceError(f"{stage}: non-finite validation loss at epoch {epoch}")
        improved = val < state.best
        lr_now = base_lrs[0][0] * state.lr_scale
        state = lr_schedule_step(state, val)
        if improved:
            save_best(epoch, val)
        for opt, lrs in zip(optimizers, base_lrs):
            for g, lr0 in zip(opt.param_groups, lrs):
                g["lr"] = lr0 * state.lr_scale
        runlog.record(
            epoch=epoch, val_loss=val, lr=lr_now, halved=state.halved, stopped=state.stop,
            improved=improved, wall_time=time.perf_counter() - start, **stats,
        )
        if on_epoch:
            on_epoch(epoch, stats)
        log.info("%s epoch %d train %.4f val %.4f lr %.2e", stage, epoch, stats.get("train_loss", float("nan")), val, lr_now)
        if state.stop:
            break
    runlog.extra["best_val_loss"] = state.best
    return runlog


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def _manifest(cfg: ExperimentConfig, stage: str, epoch: int, val: float, **extra) -> dict:
    return {
        "stage": stage, "epoch": epoch, "val_loss": val, "network": cfg.network.to_dict(),
        "stft": asdict(cfg.stft), "config_hash": cfg.config_hash(), **extra,
    }


def _copy_state(modules: dict) -> dict:
    return {k: copy.deepcopy(m.state_dict()) for k, m in modules.items()}


def _restore(modules: dict, states: dict) -> None:
    for k, m in modules.items():
        m.load_state_dict(states[k])


# ---------------------------------------------------------------- loading


def _net_cfg(manifest: dict, dual_head: bool | None = None) -> EncoderConfig:
    net = dict(manifest["network"])
    if dual_head is not None:
        net["dual_head"] = dual_head
    return EncoderConfig(**net)


def load_vae(path) -> tuple[Encoder, Decoder, dict]:
    """Load a pretrained (or fine-tuned) VAE: encoder, decoder and its manifest."""
    manifest, states = load_checkpoint(path)
    if "encoder" not in states and "decoder" not in states:
        raise ConfigurationError(f"{path} holds no VAE components")
    cfg = _net_cfg(manifest, dual_head=False)
    enc = Encoder(cfg)
    dec = Decoder(cfg, skips=bool(manifest.get("decoder_skips", False)))
    if "encoder" in states:
        enc.load_state_dict(states["encoder"])
    dec.load_state_dict(states["decoder"])
    return enc, dec, manifest


def load_nsvae(path) -> tuple[Encoder, dict]:
    manifest, states = load_checkpoint(path)
    if "nsvae" not in states:
        raise ConfigurationError(f"{path} is not an NSVAE checkpoint")
    enc = Encoder(_net_cfg(manifest, dual_head=True))
    enc.load_state_dict(states["nsvae"])
    return enc, manifest


def load_decoder(path) -> tuple[Decoder, dict]:
    manifest, states = load_checkpoint(path)
    if "decoder" not in states:
        raise ConfigurationError(f"{path} holds no decoder")
    dec = Decoder(_net_cfg(manifest, dual_head=False), skips=bool(manifest.get("decoder_skips", False)))
    dec.load_state_dict(states["decoder"])
    return dec, manifest


def _require(path, what):
    if path is None or not (Path(path) / "manifest.json").is_file():
        raise MissingCheckpointError(f"missing {what} checkpoint: {path}")


# ---------------------------------------------------------------- stage 1


def pretrain_vae(cfg: ExperimentConfig, manifest: CorpusManifest, kind: str, out_dir) -> StageResult:
    """Train a CVAE (``kind="speech"``) or NVAE (``kind="noise"``) with the beta-VAE loss."""
    if kind not in ("speech", "noise"):
        raise ValueError("kind must be 'speech' or 'noise'")
    stage = "pretrain_cvae" if kind == "speech" else "pretrain_nvae"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    set_determinism(t.seed)
    net = replace(cfg.network, dual_head=False)
    skips = t.skip_connections_pretrain
    enc, dec = Encoder(net), Decoder(net, skips=skips)
    modules = {"encoder": enc, "decoder": dec}
    params = list(enc.parameters()) + list(dec.parameters())
    opt = _adam(params, t.lr)
    gen = torch.Generator().manual_seed(t.seed + 1)
    val_batches = _validation_batches(cfg, manifest)
    target = (lambda b: b.X.bins) if kind == "speech" else (lambda b: b.V.bins)
    runlog = RunLog(stage, cfg.config_hash())

    def forward(batch: Batch, generator):
        out = enc(target(batch), use_skips=skips)
        z = sample_like(out.speech, generator)
        est = dec(z, out.skips)
        rec = recon_loss(est, target(batch))
        kl = frame_kl(out.speech)
        return rec + t.weights.beta * kl, rec, kl

    def train_epoch(epoch):
        enc.train(), dec.train()
        tot = rec_tot = kl_tot = 0.0
        n = 0
        for step, batch in enumerate(_batches(cfg, manifest, "pretrain", seed=t.seed * 7919 + epoch)):
            loss, rec, kl = forward(batch, gen)
            _check_finite(loss, stage, epoch, step)
            opt.zero_grad()
            loss.backward()
            _clip(params, cfg)
            opt.step()
            k = len(batch)
            tot, rec_tot, kl_tot, n = tot + loss.item() * k, rec_tot + rec.item() * k, kl_tot + kl.item() * k, n + k
        return {"train_loss": tot / n, "train_recon": rec_tot / n, "train_kl": kl_tot / n}

    @torch.no_grad()
    def validate():
        enc.eval(), dec.eval()
        vgen = torch.Generator().manual_seed(t.seed + 2)
        tot = n = 0
        for batch in val_batches:
            loss, _, _ = forward(batch, vgen)
            tot, n = tot + loss.item() * len(batch), n + len(batch)
        return tot / n

    best = {}

    def save_best(epoch, val):
        best.update(epoch=epoch, val=val, states=_copy_state(modules))

    _run_epochs(cfg, stage, [opt], train_epoch, validate, save_best, runlog)
    _restore(modules, best["states"])
    enc.eval(), dec.eval()
    ckpt = save_checkpoint(
        out_dir / "checkpoint", modules,
        _manifest(cfg, stage, best["epoch"], best["val"], kind=kind, decoder_skips=skips, output_mode="spectrogram",
                  beta=t.weights.beta),
    )
    runlog.write(out_dir / "runlog.jsonl")
    return StageResult(ckpt, runlog, modules)


# ---------------------------------------------------------------- stage 2


def train_nsvae(cfg: ExperimentConfig, manifest: CorpusManifest, cvae_ckpt, nvae_ckpt, out_dir) -> StageResult:
    """Train the dual-head NSVAE encoder to match the frozen pretrained posteriors."""
    _require(cvae_ckpt, "CVAE")
    _require(nvae_ckpt, "NVAE")
    stage = "train_nsvae"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    w = t.weights
    set_determinism(t.seed)
    cvae_enc = _freeze(load_vae(cvae_ckpt)[0])
    nvae_enc = _freeze(load_vae(nvae_ckpt)[0])
    if cvae_enc.cfg != nvae_enc.cfg:
        raise ConfigurationError("CVAE and NVAE checkpoints have different architectures")
    nsvae = Encoder(replace(cvae_enc.cfg, dual_head=True))
    params = list(nsvae.parameters())
    opt = _adam(params, t.lr)
    val_batches = _validation_batches(cfg, manifest)
    runlog = RunLog(stage, cfg.config_hash())

    def forward(batch: Batch):
        with torch.no_grad():
            px = cvae_enc(batch.X.bins).speech
            pv = nvae_enc(batch.V.bins).speech
        q = nsvae(batch.Y.bins)
        speech_kl = kl_term(q.speech, px)
        noise_kl = kl_term(q.noise, pv)
        loss = nsvae_loss(q.speech, px, q.noise, pv, w)
        return loss, speech_kl, noise_kl

    def kl_term(q, p):
        return kl_between(q, p.detach()).mean().detach()

    def train_epoch(epoch):
        nsvae.train()
        tot = skl = nkl = 0.0
        n = 0
        for step, batch in enumerate(_batches(cfg, manifest, "nsvae", seed=t.seed * 7919 + epoch)):
            loss, a, b = forward(batch)
            _check_finite(loss, stage, epoch, step)
            opt.zero_grad()
            loss.backward()
            _clip(params, cfg)
            opt.step()
            k = len(batch)
            tot, skl, nkl, n = tot + loss.item() * k, skl + a.item() * k, nkl + b.item() * k, n + k
        return {"train_loss": tot / n, "train_speech_kl": skl / n, "train_noise_kl": nkl / n}

    val_parts = {}

    @torch.no_grad()
    def validate():
        nsvae.eval()
        tot = skl = nkl = 0.0
        n = 0
        for batch in val_batches:
            loss, a, b = forward(batch)
            k = len(batch)
            tot, skl, nkl, n = tot + loss.item() * k, skl + a.item() * k, nkl + b.item() * k, n + k
        val_parts.update(val_speech_kl=skl / n, val_noise_kl=nkl / n)
        return tot / n

    best = {}

    def save_best(epoch, val):
        best.update(epoch=epoch, val=val, states=_copy_state({"nsvae": nsvae}))

    def on_epoch(epoch, stats):
        runlog.epochs[-1].update(val_parts)

    validate()
    runlog.extra["initial_val_speech_kl"] = val_parts["val_speech_kl"]
    runlog.extra["initial_val_noise_kl"] = val_parts["val_noise_kl"]
    _run_epochs(cfg, stage, [opt], train_epoch, validate, save_best, runlog, on_epoch)
    _restore({"nsvae": nsvae}, best["states"])
    nsvae.eval()
    ckpt = save_checkpoint(
        out_dir / "checkpoint", {"nsvae": nsvae},
        _manifest(cfg, stage, best["epoch"], best["val"], alpha=w.alpha, cvae=str(cvae_ckpt), nvae=str(nvae_ckpt)),
    )
    runlog.write(out_dir / "runlog.jsonl")
    return StageResult(ckpt, runlog, {"nsvae": nsvae, "cvae_encoder": cvae_enc, "nvae_encoder": nvae_enc})


# ---------------------------------------------------------------- stage 3


def enhance_batch(nsvae: Encoder, decoder: Decoder, Y: ComplexSpectrogram, latent: str = "mean",
                  generator: torch.Generator | None = None, length: int | None = None) -> torch.Tensor:
    """Masking pipeline on a batch: encode Y, decode a mask, apply it, invert."""
    out = nsvae(Y.bins, use_skips=decoder.skips)
    z = out.speech.mu if latent == "mean" else sample_like(out.speech, generator)
    mask = decoder(z, out.skips)
    return istft(apply_mask(Y, mask), length)


def direct_batch(nsvae: Encoder, decoder: Decoder, Y: ComplexSpectrogram, length: int | None = None) -> torch.Tensor:
    """Pre-fine-tuning pipeline: the skip-free decoder outputs the speech spectrogram itself."""
    out = nsvae(Y.bins)
    est = decoder(out.speech.mu, None)
    return istft(ComplexSpectrogram(est, Y.config, Y.length), length)


def finetune_decoder(cfg: ExperimentConfig, manifest: CorpusManifest, nsvae_ckpt, cvae_ckpt, mode: str, out_dir) -> StageResult:
    """Fine-tune the CVAE decoder as a mask generator under SI-SDR (``cf``) or SI-SDR + LSGAN (``adv``)."""
    _require(nsvae_ckpt, "NSVAE")
    _require(cvae_ckpt, "CVAE")
    if mode not in ("cf", "adv"):
        raise ValueError("mode must be 'cf' or 'adv'")
    stage = f"finetune_{mode}"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    w = t.weights
    set_determinism(t.seed)
    nsvae, _ = load_nsvae(nsvae_ckpt)
    _freeze(nsvae)
    _, dec, cvae_manifest = load_vae(cvae_ckpt)
    if dec.cfg.channels != nsvae.cfg.channels or dec.cfg.latent_dim != nsvae.cfg.latent_dim:
        raise ConfigurationError("NSVAE and CVAE checkpoints have different architectures")
    runlog = RunLog(stage, cfg.config_hash())
    val_batches = _validation_batches(cfg, manifest)

    @torch.no_grad()
    def direct_score():
        dec.eval()
        vals = [si_sdr_loss(direct_batch(nsvae, dec, b.Y, b.x.shape[-1]), b.x, w.epsilon).item() * len(b) for b in val_batches]
        return -sum(vals) / sum(len(b) for b in val_batches)

    if not dec.skips:
        runlog.extra["pre_finetune_val_si_sdr"] = direct_score()
        if t.skip_connections_finetune:
            dec.add_skips()
    modules = {"decoder": dec}
    params = list(dec.parameters())
    opt = _adam(params, t.lr)
    optimizers = [opt]
    disc = None
    if mode == "adv":
        disc = Discriminator(replace(dec.cfg, dual_head=False))
        d_params = list(disc.parameters())
        d_opt = _adam(d_params, t.disc_lr)
        optimizers.append(d_opt)
        modules["discriminator"] = disc
    gen = torch.Generator().manual_seed(t.seed + 3)
    counters = {"gen_steps": 0, "disc_steps": 0}
    disc_history: list[float] = []

    def estimate(batch, generator=None):
        return enhance_batch(nsvae, dec, batch.Y, t.finetune_latent, generator, batch.x.shape[-1])

    def train_epoch(epoch):
        dec.train()
        if disc is not None:
            disc.train()
        tot = d_tot = g_tot = 0.0
        n = 0
        for step, batch in enumerate(_batches(cfg, manifest, "nsvae", seed=t.seed * 7919 + epoch)):
            xhat = estimate(batch, gen)
            loss = si_sdr_loss(xhat, batch.x, w.epsilon)
            if disc is not None:
                fake = stft(xhat, cfg.stft).bins
                d_fake = disc(fake.detach())
                d_real = disc(batch.X.bins)
                _, d_loss = adversarial_losses(d_real, d_fake)
                _check_finite(d_loss, stage, epoch, step)
                d_opt.zero_grad()
                d_loss.backward()
                _clip(d_params, cfg)
                d_opt.step()
                counters["disc_steps"] += 1
                d_tot += d_loss.item() * len(batch)
                g_term, _ = adversarial_losses(d_real.detach(), disc(fake))
                g_tot += g_term.item() * len(batch)
                loss = loss + w.adv_weight * g_term
            _check_finite(loss, stage, epoch, step)
            opt.zero_grad()
            loss.backward()
            _clip(params, cfg)
            opt.step()
            counters["gen_steps"] += 1
            tot, n = tot + loss.item() * len(batch), n + len(batch)
        stats = {"train_loss": tot / n}
        if disc is not None:
            stats.update(train_disc_loss=d_tot / n, train_gen_adv=g_tot / n)
            disc_history.append(d_tot / n)
            if len(disc_history) >= DISC_COLLAPSE_EPOCHS and max(disc_history[-DISC_COLLAPSE_EPOCHS:]) <= DISC_COLLAPSE_LEVEL:
                log.warning("%s: discriminator loss collapsed (<= %g for %d epochs)", stage, DISC_COLLAPSE_LEVEL, DISC_COLLAPSE_EPOCHS)
                runlog.extra["disc_collapse_warning"] = epoch
        return stats

    @torch.no_grad()
    def validate():
        dec.eval()
        tot = n = 0
        for b in val_batches:
            tot += si_sdr_loss(estimate(b), b.x, w.epsilon).item() * len(b)
            n += len(b)
        return tot / n

    best = {}

    def save_best(epoch, val):
        best.update(epoch=epoch, val=val, states=_copy_state(modules))

    _run_epochs(cfg, stage, optimizers, train_epoch, validate, save_best, runlog)
    _restore(modules, best["states"])
    dec.eval()
    runlog.extra.update(counters)
    runlog.extra["best_val_si_sdr"] = -best["val"]
    ckpt = save_checkpoint(
        out_dir / "checkpoint", modules,
        _manifest(cfg, stage, best["epoch"], best["val"], decoder_skips=dec.skips, output_mode="mask",
                  mode=mode, nsvae=str(nsvae_ckpt), cvae=str(cvae_ckpt), finetune_latent=t.finetune_latent),
    )
    runlog.write(out_dir / "runlog.jsonl")
    return StageResult(ckpt, runlog, {"decoder": dec, "nsvae": nsvae, **({"discriminator": disc} if disc else {})})
