"""Command-line entry point: ``casdm <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from casdm import schedule as sch
from casdm.config import PRESETS, ConfigError, dump_config, load_config
from casdm.data import load_folder, load_tensor, save_tensor
from casdm.evaluate import proxy_fd, render_grid
from casdm.metricfn import MetricTransform, load_extractor
from casdm.netcore.params import ContainerFormatError, read_container
from casdm.sampler import SamplerConfig, model_predictor, sample
from casdm.train import (
    MODEL_FILE,
    STATE_FILE,
    CheckpointError,
    ConfigMismatchError,
    NumericalError,
    Trainer,
    load_for_sampling,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("casdm")


def _config_from_args(args) -> "object":
    if getattr(args, "config", None):
        return load_config(args.config)
    return PRESETS[getattr(args, "preset", "desk")]()


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if args.resume:
        tr = Trainer.resume(args.resume, out_dir=args.out, cfg=cfg)
    else:
        tr = Trainer(cfg, args.out)
    tr.run()
    print(f"trained to step {tr.state.step}; outputs in {tr.out}")
    return EXIT_OK


def cmd_resume(args) -> int:
    tr = Trainer.resume(args.ckpt, out_dir=args.out)
    tr.run()
    print(f"resumed to step {tr.state.step}; outputs in {tr.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, model, params = load_for_sampling(args.ckpt, use_ema=args.ema)
    scfg = SamplerConfig(
        steps=args.steps if args.steps is not None else cfg.sample.steps,
        eta=args.eta if args.eta is not None else cfg.sample.eta,
        seed=args.seed if args.seed is not None else cfg.sample.seed,
        eps_form=args.eps_form or cfg.sample.eps_form,
        mode=args.mode or cfg.sample.mode,
    )
    shape = (cfg.data.image_size, cfg.data.image_size, cfg.data.channels)
    images, traj = sample(
        model_predictor(model, params),
        model.sched,
        scfg,
        args.n,
        shape,
        batch_size=args.batch_size,
        workers=args.workers,
        trace=args.trace,
    )
    if not np.all(np.isfinite(images)):
        raise NumericalError("sampling produced non-finite values")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "samples.cdt", images)
    render_grid(images[: args.grid_max], cols=int(np.ceil(np.sqrt(min(args.n, args.grid_max)))), path=out / "grid.png")
    if traj is not None:
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean_r", "mean_abs_x"])
            w.writerows(traj.rows())
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def _load_images(path: Path, channels: int | None = None) -> np.ndarray:
    if path.is_dir():
        tensors = sorted(path.glob("*.cdt"))
        if tensors:
            return np.concatenate([load_tensor(p) for p in tensors], axis=0)
        return load_folder(path, channels or 3).images
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return load_tensor(path)


def cmd_eval(args) -> int:
    if args.metric != "proxy_fd":
        raise ConfigError(f"unknown metric {args.metric!r}; only proxy_fd is available")
    gen = _load_images(Path(args.gen))
    ref = _load_images(Path(args.ref), channels=gen.shape[-1])
    if ref.shape[1:] != gen.shape[1:]:
        raise ConfigError(f"reference images {ref.shape[1:]} and generated images {gen.shape[1:]} differ in shape")
    extractor = load_extractor(args.backbone, gen.shape[-1], args.metric_seed)
    transform = MetricTransform(args.resolution)
    extractor.check_resolution(args.resolution)
    value = proxy_fd(ref, gen, extractor, transform)
    report = {
        "metric": "proxy-FD",
        "value": value,
        "n_ref": int(len(ref)),
        "n_gen": int(len(gen)),
        "extractor": extractor.ident,
        "resolution": args.resolution,
    }
    report_path = Path(args.report) if args.report else (Path(args.gen) if Path(args.gen).is_dir() else Path(args.gen).parent) / "eval_report.json"
    report_path.write_text(json.dumps(report, indent=2))
    print(f"proxy-FD {value:.6g}")
    return EXIT_OK


def cmd_inspect_schedule(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        kind, T = cfg.schedule.kind, cfg.schedule.T
    else:
        kind, T = args.kind, args.T
    s = sch.make_schedule(kind, T)
    rows = zip(range(1, s.T + 1), s.betas, s.alphas, s.alpha_bars)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "alpha", "alpha_bar"])
        for t, b, a, ab in rows:
            w.writerow([t, repr(float(b)), repr(float(a)), repr(float(ab))])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_inspect_ckpt(args) -> int:
    ckpt = Path(args.ckpt)
    arrays = read_container(ckpt / MODEL_FILE)
    meta = json.loads((ckpt / STATE_FILE).read_text()) if (ckpt / STATE_FILE).exists() else {}
    groups: dict[str, int] = {}
    for k, v in arrays.items():
        head = "ema/" + k.split("/")[1] if k.startswith("ema/") else k.split("/")[0]
        groups[head] = groups.get(head, 0) + int(v.size)
    info = {
        "path": str(ckpt),
        "step": meta.get("step"),
        "config_hash": meta.get("config_hash"),
        "tensors": len(arrays),
        "parameters": groups,
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_grid(args) -> int:
    images = load_tensor(args.tensor)
    if images.ndim == 3:
        images = images[None]
    cols = args.cols or int(np.ceil(np.sqrt(len(images))))
    render_grid(images, cols, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = PRESETS[args.preset]()
    if args.out:
        dump_config(cfg, args.out)
    else:
        import yaml

        sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="casdm", description="Cascaded diffusion model laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("-c", "--config", help="YAML experiment config")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="used when no -c is given")
    t.add_argument("-o", "--out", default="runs/default")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("resume", help="continue training from a checkpoint with its stored config")
    r.add_argument("ckpt")
    r.add_argument("-o", "--out", help="output directory (default: the run the checkpoint came from)")
    r.set_defaults(func=cmd_resume)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--eta", type=float)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", action="store_true", help="write trace.csv (t, mean r, mean |x_t|)")
    s.add_argument("--ema", action="store_true", help="use EMA weights")
    s.add_argument("--eps-form", choices=["respaced", "base"])
    s.add_argument("--mode", choices=["ddim", "ancestral"])
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--grid-max", type=int, default=64)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="proxy Fréchet distance between two image sets")
    e.add_argument("--ref", required=True, help="tensor file or image folder")
    e.add_argument("--gen", required=True, help="directory of .cdt/.png samples or a tensor file")
    e.add_argument("--metric", default="proxy_fd")
    e.add_argument("--backbone", default="lpips_avgpool")
    e.add_argument("--metric-seed", type=int, default=0)
    e.add_argument("--resolution", type=int, default=32)
    e.add_argument("--report", help="JSON report path (default: next to --gen)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-schedule", help="dump t, beta, alpha, alpha_bar as CSV")
    i.add_argument("-c", "--config")
    i.add_argument("--kind", default="cosine", choices=["cosine", "linear"])
    i.add_argument("--T", type=int, default=1000)
    i.add_argument("-o", "--out")
    i.set_defaults(func=cmd_inspect_schedule)

    k = sub.add_parser("inspect-ckpt", help="summarise a checkpoint directory")
    k.add_argument("ckpt")
    k.set_defaults(func=cmd_inspect_ckpt)

    g = sub.add_parser("grid", help="render a tensor file of images as a PNG grid")
    g.add_argument("tensor")
    g.add_argument("-o", "--out", required=True)
    g.add_argument("--cols", type=int)
    g.set_defaults(func=cmd_grid)

    c = sub.add_parser("config", help="print or write a preset config")
    c.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    c.add_argument("-o", "--out")
    c.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ContainerFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
