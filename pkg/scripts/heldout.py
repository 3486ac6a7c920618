"""Train on 256 synthetic scenes and score 64 unseen ones.

    python3 scripts/heldout.py [--config configs/tiny.json] [--train 256] [--heldout 64]
"""

import argparse
import logging
from pathlib import Path

from smolrgpt.config import load_config
from smolrgpt.evaluator import write_report
from smolrgpt.experiments import heldout

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "tiny_heldout.json")
    ap.add_argument("--train", type=int, default=256)
    ap.add_argument("--heldout", type=int, default=64)
    ap.add_argument("--score-train", action="store_true", help="also score the training samples (slow)")
    ap.add_argument("--out", default=ROOT / "runs" / "heldout")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = heldout(load_config(args.config), args.train, args.heldout, args.score_train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if result.train_report is not None:
        write_report(result.train_report, out, stem="train_report")
    write_report(result.eval_report, out, stem="heldout_report")
    print(result.summary())
