"""Command-line pipeline: gen-data -> search -> distill -> finetune -> eval, plus compare."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint
from .blocks import MODEL_VARIANTS, build_model, distill_model
from .config import ConfigError, RunConfig, dumps_config, load_config, loads_config
from .data import generate_synthetic_set, load_dataset, save_dataset, split
from .tensor import Rng
from .training import TrainingDiverged, evaluate, noisy_baseline, train

class CliError(Exception):
    pass


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _guard(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for flag, attr in (("variant", "variant"), ("mode", "mode"), ("tau", "tau"),
                       ("distill_logit_threshold", "distill_logit_threshold")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.search, attr, v)
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    cfg.validate()
    return cfg


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return _apply_overrides(cfg, args)


def _pools(cfg: RunConfig):
    root = Path(cfg.data.dir)
    if not (root / "pool" / "manifest.json").exists():
        raise CliError(f"no dataset at {root}; run `sknas gen-data` first")
    pool = load_dataset(root / "pool")
    train_set, val_set = split(pool, cfg.data.train_fraction, True, cfg.data.seed)
    return train_set, val_set


def _step_seed(cfg: RunConfig, offset: int) -> int:
    return cfg.seed * 1000 + offset


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    d = cfg.data
    if args.seed is not None:
        d.seed = args.seed
    if args.count is not None:
        d.count = args.count
    if args.size is not None:
        d.size = args.size
    if args.sigma:
        d.noise_levels = [float(s) for s in args.sigma]
    if args.out is not None:
        d.dir = args.out
    root = Path(d.dir)
    _guard(root / "pool" / "manifest.json", args.force)
    pairs = generate_synthetic_set(d.count, d.size, d.noise_levels, d.seed, cfg.model.in_channels,
                                   cfg.model.depth)
    save_dataset(pairs, root / "pool")
    if d.test_count > 0:
        test = generate_synthetic_set(d.test_count, d.size, d.noise_levels, d.test_seed,
                                      cfg.model.in_channels, cfg.model.depth)
        save_dataset(test, root / "test")
    _progress(f"wrote {d.count} pairs to {root / 'pool'}" + (f" and {d.test_count} to {root / 'test'}" if d.test_count else ""))
    return 0


def run_search(cfg: RunConfig, force: bool = False) -> Path:
    out = Path(cfg.out_dir)
    ckpt = _guard(out / "search.ckpt", force)
    report_path = _guard(out / "search_report.json", force)
    train_set, val_set = _pools(cfg)
    model = build_model(cfg.model, cfg.search.variant, Rng(_step_seed(cfg, 1)), **cfg.sk_options())
    cfg.train.seed = _step_seed(cfg, 2)
    _progress(f"search: variant={cfg.search.variant} mode={cfg.search.mode} params={model.num_parameters()}")
    report = train(model, train_set, val_set, cfg.train, progress=_progress)
    checkpoint.save(ckpt, model)
    report_path.write_text(report.to_json())
    (out / "config.yaml").write_text(dumps_config(cfg))
    return ckpt


def cmd_search(args) -> int:
    run_search(_load_cfg(args), args.force)
    return 0


def run_distill(ckpt_path: Path, out_path: Path, threshold: float | None, force: bool) -> Path:
    model, _, _ = checkpoint.load(ckpt_path)
    if model.distilled:
        raise CliError(f"{ckpt_path} is already distilled")
    if threshold is not None:
        for _, sk in model.superkernels():
            sk.threshold = threshold
    _guard(out_path, force)
    arch_path = _guard(out_path.with_name("architecture.txt"), force)
    distilled, arch = distill_model(model)
    checkpoint.save(out_path, distilled, arch)
    arch_path.write_text(arch.dumps())
    _progress(arch.summary().rstrip())
    return out_path


def cmd_distill(args) -> int:
    src = Path(args.checkpoint)
    out = Path(args.out) if args.out else src.with_name("distilled.ckpt")
    run_distill(src, out, args.distill_logit_threshold, args.force)
    return 0


def run_finetune(cfg: RunConfig, ckpt_path: Path, out_path: Path, force: bool) -> Path:
    model, arch, _ = checkpoint.load(ckpt_path)
    _guard(out_path, force)
    report_path = _guard(out_path.with_name("finetune_report.json"), force)
    train_set, val_set = _pools(cfg)
    cfg.finetune.seed = _step_seed(cfg, 3)
    report = train(model, train_set, val_set, cfg.finetune, progress=_progress)
    checkpoint.save(out_path, model, arch)
    report_path.write_text(report.to_json())
    return out_path


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    src = Path(args.checkpoint)
    out = Path(args.out) if args.out else src.with_name("finetuned.ckpt")
    run_finetune(cfg, src, out, args.force)
    return 0


def format_rows(rows: list[dict]) -> str:
    cols = [k for k in rows[0]] if rows else []
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths)))
              for row in cells]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def run_eval(ckpt_path: Path, data_dir: Path, self_ens: bool) -> dict:
    model, _, _ = checkpoint.load(ckpt_path)
    data = load_dataset(data_dir)
    m = evaluate(model, data, use_self_ensemble=self_ens)
    return {"checkpoint": str(ckpt_path), "self_ensemble": self_ens, "psnr": m.psnr, "ssim": m.ssim,
            "images": m.count}


def cmd_eval(args) -> int:
    row = run_eval(Path(args.checkpoint), Path(args.data), args.self_ensemble)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        "eval_se.json" if args.self_ensemble else "eval.json")
    _guard(out, args.force).write_text(json.dumps(row, indent=1, sort_keys=True) + "\n")
    sys.stdout.write(format_rows([row]))
    return 0


def run_compare(cfg: RunConfig, variants: list[str], force: bool) -> list[dict]:
    base_out = Path(cfg.out_dir)
    data_root = Path(cfg.data.dir)
    test_dir = data_root / "test" if (data_root / "test" / "manifest.json").exists() else data_root / "pool"
    test = load_dataset(test_dir)
    noisy = noisy_baseline(test)
    rows = [{"variant": "noisy input", "mode": "-", "self_ensemble": False,
             "psnr": noisy.psnr, "ssim": noisy.ssim}]
    for variant in variants:
        vcfg = loads_config(dumps_config(cfg))
        vcfg.search.variant = variant
        if variant in ("filterwise", "filterwise-attention"):
            # separate mode has no filterwise form; those cells run full and say so
            vcfg.search.mode = "full"
        vcfg.out_dir = str(base_out / variant)
        vcfg.validate()
        _progress(f"== {variant} ==")
        ckpt = run_search(vcfg, force)
        dist = run_distill(ckpt, ckpt.with_name("distilled.ckpt"), None, force)
        fin = run_finetune(vcfg, dist, dist.with_name("finetuned.ckpt"), force)
        model, _, _ = checkpoint.load(fin)
        for se in (False, True):
            m = evaluate(model, test, use_self_ensemble=se)
            rows.append({"variant": variant, "mode": vcfg.search.mode, "self_ensemble": se,
                         "psnr": m.psnr, "ssim": m.ssim})
    return rows


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    variants = args.variants or list(MODEL_VARIANTS)
    for v in variants:
        if v not in MODEL_VARIANTS:
            raise CliError(f"unknown variant {v!r}")
    out = Path(cfg.out_dir)
    json_path = _guard(out / "compare.json", args.force)
    txt_path = _guard(out / "compare.txt", args.force)
    rows = run_compare(cfg, variants, args.force)
    json_path.write_text(json.dumps(rows, indent=1) + "\n")
    txt_path.write_text(format_rows(rows))
    sys.stdout.write(format_rows(rows))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=MODEL_VARIANTS)
    p.add_argument("--mode", choices=("full", "separate"))
    p.add_argument("--tau", type=float)
    p.add_argument("--distill-logit-threshold", dest="distill_logit_threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sknas", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic denoising dataset")
    _common(p)
    p.add_argument("--out", help="dataset directory (overrides data.dir)")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--sigma", type=float, action="append", help="noise level; repeatable")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("search", help="train a supernetwork")
    _common(p)
    _search_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("distill", help="extract the discrete architecture from a supernetwork")
    _common(p, config=False)
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.add_argument("--distill-logit-threshold", dest="distill_logit_threshold", type=float)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("finetune", help="continue training a distilled model")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset directory")
    _common(p, config=False)
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    p.add_argument("--self-ensemble", dest="self_ensemble", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="variants x self-ensemble table")
    _common(p)
    _search_flags(p)
    p.add_argument("--variants", nargs="+")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, TrainingDiverged, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"sknas {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
