"""Multi-stage runs and sweeps shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, apply_overrides
from .data import CorpusManifest
from .evaluation import Enhancer, evaluate, latent_diagnostics
from .training import finetune_decoder, pretrain_vae, train_nsvae

BETAS = (1.0, 0.1, 0.01, 0.001)
ALPHAS = (0.0, 1.0)


def with_train(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    weights = {k: changes.pop(k) for k in ("beta", "alpha", "adv_weight") if k in changes}
    train = replace(cfg.train, **changes)
    if weights:
        train = replace(train, weights=replace(train.weights, **weights))
    return replace(cfg, train=train)


def _done(out: Path) -> bool:
    return (out / "checkpoint" / "manifest.json").is_file()


def pretrain_pair(cfg: ExperimentConfig, manifest: CorpusManifest, out_dir, reuse: bool = True) -> dict:
    """Pretrain CVAE and NVAE with the current beta/skip settings and diagnose both."""
    out_dir = Path(out_dir)
    result = {}
    for kind, name in (("speech", "cvae"), ("noise", "nvae")):
        run = out_dir / name
        if not (reuse and _done(run)):
            pretrain_vae(cfg, manifest, kind, run)
        diag = latent_diagnostics(run / "checkpoint", manifest, "validation", kind)
        result[name] = {"checkpoint": str(run / "checkpoint"), **diag.as_dict()}
    (out_dir / "diagnostics.json").write_text(json.dumps(result, indent=2))
    return result


def full_pipeline(cfg: ExperimentConfig, manifest: CorpusManifest, out_dir, mode: str = "cf",
                  pretrained: dict | None = None, reuse: bool = True) -> dict:
    """Pretrain (unless given), train the NSVAE, fine-tune, evaluate on the test split."""
    out_dir = Path(out_dir)
    cfg.save(out_dir / "resolved_config.json")
    pre = pretrained or pretrain_pair(cfg, manifest, out_dir / "pretrain", reuse)
    ns_dir = out_dir / "nsvae"
    if not (reuse and _done(ns_dir)):
        train_nsvae(cfg, manifest, pre["cvae"]["checkpoint"], pre["nvae"]["checkpoint"], ns_dir)
    ft_dir = out_dir / f"finetune_{mode}"
    if not (reuse and _done(ft_dir)):
        finetune_decoder(cfg, manifest, ns_dir / "checkpoint", pre["cvae"]["checkpoint"], mode, ft_dir)
    enhancer = Enhancer.from_checkpoints(ns_dir / "checkpoint", ft_dir / "checkpoint")
    rep = evaluate(enhancer, manifest, "test", cfg.eval.test_snr_db, seed=cfg.train.seed)
    (out_dir / "test_report.csv").write_text(rep.to_csv())
    (out_dir / "test_report.txt").write_text(rep.render())
    agg = rep.aggregates
    summary = {
        "pretrain": pre,
        "nsvae": str(ns_dir / "checkpoint"),
        "decoder": str(ft_dir / "checkpoint"),
        "si_sdr_in": agg["si_sdr_in"][0],
        "si_sdr_out": agg["si_sdr_out"][0],
        "si_sdr_out_ci95": agg["si_sdr_out"][1],
        "si_sdr_gain": agg["si_sdr_gain"][0],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def beta_table(rows: list[dict]) -> str:
    head = f"{'beta':>10} | {'CVAE SI-SDR':>11} {'CVAE KLL':>10} | {'NVAE SI-SDR':>11} {'NVAE KLL':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        label = r.get("label", f"{r['beta']:g}")
        lines.append(
            f"{label:>10} | {r['cvae']['recon_si_sdr']:>11.2f} {r['cvae']['kll']:>10.2f} | "
            f"{r['nvae']['recon_si_sdr']:>11.2f} {r['nvae']['kll']:>10.2f}"
        )
    return "\n".join(lines)


def alpha_table(rows: list[dict]) -> str:
    head = f"{'beta':>8} {'alpha':>6} | {'SI-SDR in':>9} {'SI-SDR out':>10} {'gain':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['beta']:>8g} {r['alpha']:>6g} | {r['si_sdr_in']:>9.2f} {r['si_sdr_out']:>10.2f} {r['si_sdr_gain']:>7.2f}"
        )
    return "\n".join(lines)


def sweep(cfg: ExperimentConfig, manifest: CorpusManifest, out_dir, grid: str = "beta",
          betas=BETAS, alphas=ALPHAS, reuse: bool = True) -> dict:
    """Cartesian sweep over beta (pretraining) and/or alpha (NSVAE target).

    ``grid="beta"`` pretrains and diagnoses one CVAE/NVAE pair per beta
    (Table-1 layout).  ``grid="alpha"`` runs the full pipeline per alpha at
    the configured beta.  ``grid="beta,alpha"`` does both for every pair.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    axes = {a.strip() for a in grid.split(",")}
    if not axes <= {"beta", "alpha"} or not axes:
        raise ValueError(f"grid must name beta and/or alpha, got {grid!r}")
    betas = sorted(betas, reverse=True) if "beta" in axes else [cfg.train.weights.beta]
    alphas = list(alphas) if "alpha" in axes else None
    beta_rows, alpha_rows = [], []
    for beta in betas:
        bcfg = with_train(cfg, beta=beta)
        pre = pretrain_pair(bcfg, manifest, out_dir / f"beta_{beta:g}" / "pretrain", reuse)
        beta_rows.append({"beta": beta, **pre})
        for alpha in alphas or []:
            acfg = with_train(bcfg, alpha=alpha)
            summary = full_pipeline(acfg, manifest, out_dir / f"beta_{beta:g}" / f"alpha_{alpha:g}", "cf", pre, reuse)
            alpha_rows.append({"beta": beta, "alpha": alpha, **{k: summary[k] for k in ("si_sdr_in", "si_sdr_out", "si_sdr_gain")}})
    tables = [beta_table(beta_rows)]
    if alpha_rows:
        tables.append(alpha_table(alpha_rows))
    text = "\n\n".join(tables)
    (out_dir / "trend_table.txt").write_text(text + "\n")
    (out_dir / "sweep.json").write_text(json.dumps({"beta_rows": beta_rows, "alpha_rows": alpha_rows}, indent=2))
    return {"beta_rows": beta_rows, "alpha_rows": alpha_rows, "table": text}


def untrained_diagnostics(cfg: ExperimentConfig, manifest: CorpusManifest, kind: str = "speech") -> dict:
    """Latent diagnostics of a freshly initialised VAE (same seed as pretraining)."""
    from .networks import Decoder, Encoder
    from .training import set_determinism

    set_determinism(cfg.train.seed)
    net = replace(cfg.network, dual_head=False)
    nets = (Encoder(net), Decoder(net, skips=cfg.train.skip_connections_pretrain))
    return latent_diagnostics(nets, manifest, "validation", kind).as_dict()


def desk_suite(cfg: ExperimentConfig, manifest: CorpusManifest, out_dir, reuse: bool = True) -> dict:
    """Every training run behind the desk-scale acceptance checks.

    * beta sweep without skips (Table-1 layout),
    * a skip-connected pretraining pair at the configured beta,
    * full pipelines (NSVAE + CF fine-tuning) at alpha = 1 and alpha = 0 on
      top of the skip-free pair at the configured beta.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    beta = cfg.train.weights.beta
    no_skip = with_train(cfg, skip_connections_pretrain=False)
    betas = sorted(set(BETAS) | {beta}, reverse=True)
    beta_res = sweep(no_skip, manifest, out_dir / "beta_sweep", "beta", betas=betas, reuse=reuse)
    by_beta = {r["beta"]: r for r in beta_res["beta_rows"]}
    skip_cfg = with_train(cfg, skip_connections_pretrain=True)
    skip_pair = pretrain_pair(skip_cfg, manifest, out_dir / "skips" / "pretrain", reuse)
    pre = {k: by_beta[beta][k] for k in ("cvae", "nvae")}
    alpha_rows = []
    for alpha in ALPHAS[::-1]:
        acfg = with_train(no_skip, alpha=alpha)
        summary = full_pipeline(acfg, manifest, out_dir / f"alpha_{alpha:g}", "cf", pre, reuse)
        alpha_rows.append({"beta": beta, "alpha": alpha, **{k: summary[k] for k in ("si_sdr_in", "si_sdr_out", "si_sdr_gain")},
                           "run_dir": str(out_dir / f"alpha_{alpha:g}")})
    result = {
        "beta": beta,
        "untrained_cvae": untrained_diagnostics(no_skip, manifest),
        "beta_rows": beta_res["beta_rows"],
        "skips": {"beta": beta, **skip_pair},
        "alpha_rows": alpha_rows,
    }
    rows = [*beta_res["beta_rows"], {"label": f"{beta:g}+skip", **result["skips"]}]
    text = beta_table(rows) + "\n\n" + alpha_table(alpha_rows)
    (out_dir / "desk_tables.txt").write_text(text + "\n")
    (out_dir / "desk_suite.json").write_text(json.dumps(result, indent=2))
    result["table"] = text
    return result
