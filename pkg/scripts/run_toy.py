"""Run the desk-scale end-to-end experiment and print the measured quantities.

    python scripts/run_toy.py --workdir runs/toy [--iterations 2000]
"""

import argparse
import json
import logging

from histostargan.core import TrainConfig, load_config
from histostargan.toy import run_toy_experiment

parser = argparse.ArgumentParser()
parser.add_argument("--workdir", default="runs/toy")
parser.add_argument("--config", default=None)
parser.add_argument("--iterations", type=int, default=None)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
cfg = load_config(args.config) if args.config else TrainConfig.toy()
cfg.seed = args.seed
if args.iterations:
    cfg.total_iterations = args.iterations
    cfg.ds_decay_iterations = args.iterations
    cfg.seg_warmup_iterations = args.iterations // 10
res = run_toy_experiment(args.workdir, cfg)
print(res.pop("seg_table"))
print(json.dumps(res, indent=1))
