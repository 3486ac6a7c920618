"""Train the tiny config through all three stages and score it on its own training set.

    python3 scripts/overfit.py [--config configs/tiny.json] [--out runs/overfit]
"""

import argparse
import json
import logging
from pathlib import Path

from smolrgpt.config import load_config
from smolrgpt.evaluator import write_report
from smolrgpt.experiments import overfit

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "tiny.json")
    ap.add_argument("--out", default=ROOT / "runs" / "overfit")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = overfit(load_config(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(result.train_report, out, stem="train_report")
    (out / "losses.json").write_text(json.dumps({r.stage_id: r.losses for r in result.stage_reports}))
    print(result.summary())
