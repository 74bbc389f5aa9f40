"""Command-line entry point: ``idccrn-vae <subcommand> ...``.

Failures print one line ``error[<category>]: <message>`` to stderr and exit
with 2 (config), 3 (missing checkpoint), 4 (divergence), 5 (invalid input)
or 1 (anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, describe, get_profile, paper_profile
from .data import CorpusManifest, synth_corpus
from .errors import ConfigurationError, DivergenceError, InvalidInputError, MissingCheckpointError
from .evaluation import Enhancer, evaluate, latent_diagnostics
from .pipeline import full_pipeline, sweep
from .spectral import read_wav, write_wav
from .training import finetune_decoder, pretrain_vae, set_determinism, train_nsvae

OUTPUT_ROOT_ENV = "IDCCRN_VAE_OUTPUT"
EXIT_CODES = [
    (MissingCheckpointError, 3, "missing-checkpoint"),
    (ConfigurationError, 2, "config"),
    (DivergenceError, 4, "divergence"),
    (InvalidInputError, 5, "invalid-input"),
]


def _config_epilog() -> str:
    lines = ["config keys (paper-profile defaults; override with --set key=value):"]
    lines += [f"  {k} = {json.dumps(v)}" for k, v in describe(paper_profile())]
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (a resolved_config.json works)")
    p.add_argument("--profile", default=None, choices=["paper", "desk"], help="base profile (default: paper)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, default=None, help="sets train.seed (and the corpus seed for synth-data)")
    p.add_argument("--out", type=Path, default=None, help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<subcommand>)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idccrn-vae",
        description="Complex VAE speech enhancement: pretraining, NSVAE training, fine-tuning and diagnostics.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic speech/noise corpus")
    _common(p)

    p = sub.add_parser("pretrain", help="pretrain the speech (CVAE) or noise (NVAE) VAE")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True, help="manifest.json")
    p.add_argument("--kind", choices=["speech", "noise"], default="speech")

    p = sub.add_parser("train-nsvae", help="train the noise-suppression encoder")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--cvae", type=Path, required=True)
    p.add_argument("--nvae", type=Path, required=True)

    p = sub.add_parser("finetune", help="fine-tune the CVAE decoder as a mask generator")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--nsvae", type=Path, required=True)
    p.add_argument("--cvae", type=Path, required=True)
    p.add_argument("--mode", choices=["cf", "adv"], default="cf")

    p = sub.add_parser("enhance", help="enhance one WAV file")
    _common(p)
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--nsvae", type=Path, required=True)
    p.add_argument("--decoder", type=Path, required=True)
    p.add_argument("--sample-latent", action="store_true", help="draw z instead of using the posterior mean")

    p = sub.add_parser("evaluate", help="score enhancement on synthetic mixtures")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--nsvae", type=Path, required=True)
    p.add_argument("--decoder", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--snr", type=float, default=None, help="input SNR in dB (default: eval.test_snr_db)")

    p = sub.add_parser("diagnose", help="KLL and reconstruction SI-SDR of a pretrained VAE")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--vae", type=Path, required=True)
    p.add_argument("--split", default="validation")

    p = sub.add_parser("pipeline", help="pretrain both VAEs, train the NSVAE, fine-tune and evaluate")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--mode", choices=["cf", "adv"], default="cf")

    p = sub.add_parser("sweep", help="beta / alpha trend sweep (Table-style output)")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--grid", default="beta", help="'beta', 'alpha' or 'beta,alpha'")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
        if args.profile is not None:
            raise ConfigurationError("--config and --profile are mutually exclusive")
    else:
        cfg = get_profile(args.profile or "paper")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return apply_overrides(cfg, overrides)


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "resolved_config.json")
        set_determinism(cfg.train.seed)
        _dispatch(args, cfg, out)
    except tuple(cls for cls, _, _ in EXIT_CODES) as exc:
        for cls, code, name in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error[{name}]: {' '.join(str(exc).split())}", file=sys.stderr)
                return code
    except OSError as exc:
        print(f"error[io]: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


def _manifest(path) -> CorpusManifest:
    if not Path(path).is_file():
        raise ConfigurationError(f"corpus manifest not found: {path}")
    return CorpusManifest.load(path)


def _dispatch(args, cfg: ExperimentConfig, out: Path) -> None:
    cmd = args.command
    if cmd == "synth-data":
        seed = args.seed if args.seed is not None else 0
        m = synth_corpus(cfg.synth, out, seed)
        print(f"wrote {len(m.entries)} utterances to {out / 'manifest.json'}")
    elif cmd == "pretrain":
        res = pretrain_vae(cfg, _manifest(args.corpus), args.kind, out)
        print(f"checkpoint: {res.checkpoint}")
    elif cmd == "train-nsvae":
        res = train_nsvae(cfg, _manifest(args.corpus), args.cvae, args.nvae, out)
        print(f"checkpoint: {res.checkpoint}")
    elif cmd == "finetune":
        res = finetune_decoder(cfg, _manifest(args.corpus), args.nsvae, args.cvae, args.mode, out)
        print(f"checkpoint: {res.checkpoint}")
    elif cmd == "enhance":
        enhancer = Enhancer.from_checkpoints(args.nsvae, args.decoder, sample_latent=args.sample_latent or cfg.eval.sample_latent)
        write_wav(args.output, enhancer(read_wav(args.input)), fmt="float32")
        print(f"wrote {args.output}")
    elif cmd == "evaluate":
        enhancer = Enhancer.from_checkpoints(args.nsvae, args.decoder)
        snr = cfg.eval.test_snr_db if args.snr is None else args.snr
        rep = evaluate(enhancer, _manifest(args.corpus), args.split, snr, seed=cfg.train.seed)
        (out / "report.csv").write_text(rep.to_csv())
        (out / "report.txt").write_text(rep.render())
        print(rep.render())
    elif cmd == "diagnose":
        diag = latent_diagnostics(args.vae, _manifest(args.corpus), args.split)
        (out / "diagnostics.json").write_text(json.dumps(diag.as_dict(), indent=2))
        print(json.dumps(diag.as_dict(), indent=2))
    elif cmd == "pipeline":
        summary = full_pipeline(cfg, _manifest(args.corpus), out, args.mode)
        print(json.dumps({k: v for k, v in summary.items() if k != "pretrain"}, indent=2))
    elif cmd == "sweep":
        res = sweep(cfg, _manifest(args.corpus), out, args.grid)
        print(res["table"])


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
