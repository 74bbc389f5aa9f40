"""Run every desk-scale training run used by the acceptance checks.

    python3 scripts/desk_suite.py --out runs/desk

Synthesises the desk corpus (if absent), then runs the no-skip beta sweep,
a skip-connected pretraining pair, and full alpha=1 / alpha=0 pipelines.
Finished stages are reused, so the script can be resumed.
"""
import argparse
import json
import logging
from pathlib import Path

import torch

from idccrn_vae.config import apply_overrides, desk_profile
from idccrn_vae.data import CorpusManifest, synth_corpus
from idccrn_vae.pipeline import desk_suite


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, default=Path("runs/desk"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = apply_overrides(desk_profile(), args.set)
    corpus = args.out / "corpus"
    if (corpus / "manifest.json").is_file():
        manifest = CorpusManifest.load(corpus / "manifest.json")
    else:
        manifest = synth_corpus(cfg.synth, corpus, seed=cfg.train.seed)
    res = desk_suite(cfg, manifest, args.out)
    print(res["table"])
    print(json.dumps(res["untrained_cvae"]))


if __name__ == "__main__":
    main()
