"""Generate data, search, distill, finetune and evaluate one variant from a config.

    python3 scripts/run_pipeline.py configs/toy.yaml --variant factorized
"""

import argparse
import json
from pathlib import Path

from sknas.cli import main
from sknas.config import load_config


def run(argv):
    if main(argv) != 0:
        raise SystemExit(f"step failed: sknas {' '.join(argv)}")


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--variant")
    p.add_argument("--mode", choices=("full", "separate"))
    p.add_argument("--force", action="store_true")
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    cfg = load_config(args.config)
    out = Path(cfg.out_dir) / (args.variant or cfg.search.variant)
    force = ["--force"] if args.force else []

    if not (Path(cfg.data.dir) / "pool" / "manifest.json").exists() or args.force:
        run(["gen-data", "--config", args.config] + force)
    search = ["search", "--config", args.config, "--out-dir", str(out)] + force
    if args.variant:
        search += ["--variant", args.variant]
    if args.mode:
        search += ["--mode", args.mode]
    run(search)
    run(["distill", str(out / "search.ckpt")] + force)
    run(["finetune", "--config", args.config, str(out / "distilled.ckpt")] + force)
    test_dir = str(Path(cfg.data.dir) / "test")
    run(["eval", str(out / "finetuned.ckpt"), "--data", test_dir] + force)
    run(["eval", str(out / "finetuned.ckpt"), "--data", test_dir, "--self-ensemble"] + force)

    print((out / "architecture.txt").read_text(), end="")
    for name in ("eval.json", "eval_se.json"):
        row = json.loads((out / name).read_text())
        print(f"{name:13s} psnr {row['psnr']:.3f}  ssim {row['ssim']:.4f}")
