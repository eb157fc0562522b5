"""Command-line entry point: ``vlinknet <verb> [flags]``.

Exit codes: 0 on success, 1 on a runtime failure (message prefixed with the
module that raised it), 2 on a usage error.  A YAML ``--config`` carries the
full run description and flags override it; ``--seed`` replaces the config
seed and is written into every artifact the command produces.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field

from vlinknet import metrics as M
from vlinknet import protocol as P
from vlinknet import trainer as T
from vlinknet.config import RunConfig, load_config, save_config
from vlinknet.imagecore import apply_mask, compose, hole_ratio, load_image, load_mask, save_image

log = logging.getLogger("vlinknet")

VERBS = ("pretrain", "train", "finetune", "infer", "evaluate", "protocol-build",
         "protocol-validate", "metrics")


@dataclass
class Command:
    verb: str
    config: str | None = None
    seed: int | None = None
    options: dict = field(default_factory=dict)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlinknet", description="Dual-encoder image inpainting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")

    def train_flags(p, resume_flag):
        p.add_argument("--images", help="training image directory (overrides config)")
        p.add_argument("--masks", help="training mask directory (overrides config)")
        p.add_argument("--out-dir", required=True, help="directory for checkpoints and loss log")
        p.add_argument("--steps", type=int, help="override the step count of each phase run")
        if resume_flag == "--checkpoint":
            p.add_argument("--checkpoint", required=True, help="checkpoint to fine-tune")
        else:
            p.add_argument("--resume", help="checkpoint to continue from")

    train_flags(sub.add_parser("pretrain", parents=[common], help="run the pretraining phase"), "--resume")
    train_flags(sub.add_parser("train", parents=[common], help="run all remaining phases"), "--resume")
    train_flags(sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint"),
                "--checkpoint")

    p = sub.add_parser("infer", parents=[common], help="inpaint one image")
    p.add_argument("--image", required=True, help="input image (hole content is ignored)")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--checkpoint", help="trained checkpoint; untrained weights when absent")
    p.add_argument("--gt", help="ground truth, prints a metrics line when given")
    p.add_argument("--test-time-iters", type=int,
                   help="test-time input optimization steps (config default when omitted)")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", help="test image directory (defaults to config data.images)")
    p.add_argument("--masks", help="mask directory (defaults to config data.masks)")
    p.add_argument("--out", help="report CSV (table on stdout when omitted)")
    p.add_argument("--region", choices=("full", "hole"), default="full")
    p.add_argument("--strict", action="store_true", help="abort on the first failing row")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--reveal-holes", action="store_true",
                   help="feed the unmasked image to the generator (diagnostic only)")

    p = sub.add_parser("protocol-build", parents=[common], help="pair images with bucket masks")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--bucket", required=True, choices=sorted(P.BUCKETS))
    p.add_argument("--out", required=True, help="manifest CSV")

    p = sub.add_parser("protocol-validate", parents=[common], help="check a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", help="recompute every hole ratio from this directory")

    p = sub.add_parser("metrics", parents=[common], help="compare two images")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--mask", help="restrict MAE and PSNR to the mask's hole region")
    return parser


def parse(argv) -> Command:
    """Parse ``argv`` into a :class:`Command`; usage errors raise ``SystemExit(2)``."""
    ns = vars(_parser().parse_args(list(argv)))
    verb, config, seed = ns.pop("verb"), ns.pop("config"), ns.pop("seed")
    return Command(verb, config, seed, ns)


# helpers -----------------------------------------------------------------------------


def _config(cmd: Command, base: RunConfig | None = None) -> RunConfig:
    cfg = load_config(cmd.config) if cmd.config else (base or RunConfig())
    if cmd.seed is not None:
        cfg = cfg.with_seed(cmd.seed)
    return cfg


def _data_dirs(cfg: RunConfig, opts: dict) -> RunConfig:
    d = cfg.to_dict()
    for key in ("images", "masks"):
        if opts.get(key):
            d["data"][key] = opts[key]
    return RunConfig.from_dict(d)


def _resolution(cfg: RunConfig) -> int:
    return cfg.generator.input_resolution


# verbs --------------------------------------------------------------------------------


def _train(cmd: Command, phases) -> int:
    opts = cmd.options
    resume = opts.get("resume") or opts.get("checkpoint")
    if resume:
        trainer = T.load_checkpoint(resume)
        if cmd.seed is not None and cmd.seed != trainer.config.seed:
            raise ValueError(f"--seed {cmd.seed} differs from checkpoint seed {trainer.config.seed}")
        cfg = _data_dirs(trainer.config, opts)
        trainer.config.data = cfg.data
    else:
        cfg = _data_dirs(_config(cmd), opts)
        trainer = T.Trainer(cfg)
    data = T.load_training_data(cfg)
    out = opts["out_dir"]
    os.makedirs(out, exist_ok=True)
    save_config(trainer.config, os.path.join(out, "config.yaml"))
    ckpt_dir = cfg.log.checkpoint_dir or os.path.join(out, "checkpoints")
    if cfg.log.checkpoint_every:
        os.makedirs(ckpt_dir, exist_ok=True)
    loss_log = T.LossLog(os.path.join(out, "losses.csv"), trainer.config.seed)
    try:
        for phase in phases:
            if T.PHASES.index(phase) < T.PHASES.index(trainer.phase):
                continue
            total = opts["steps"] if opts.get("steps") is not None else T.phase_steps(cfg, phase, data)
            remaining = total if phase == "finetune" and opts.get("checkpoint") else \
                max(0, total - trainer.phase_done[phase])
            T.run_phase(trainer, phase, data, remaining, loss_log, ckpt_dir, cfg.log.checkpoint_every)
    finally:
        loss_log.close()
    final = os.path.join(out, "final.ckpt")
    T.save_checkpoint(trainer, final)
    print(f"seed={trainer.config.seed} step={trainer.step} phase={trainer.phase} checkpoint={final}")
    return 0


def _infer(cmd: Command) -> int:
    opts = cmd.options
    if opts.get("checkpoint"):
        trainer = T.load_checkpoint(opts["checkpoint"])
        cfg = _config(cmd, trainer.config)
        generator, extractor = trainer.generator, trainer.extractor
    else:
        cfg = _config(cmd)
        log.warning("no checkpoint given: using untrained generator weights")
        trainer = T.Trainer(cfg)
        generator, extractor = trainer.generator, trainer.extractor
    res = _resolution(trainer.config)
    image = load_image(opts["image"], res)
    mask = load_mask(opts["mask"], res, cfg.data.mask_white_is_hole)
    masked = apply_mask(image, mask)
    iters = opts.get("test_time_iters")
    if iters is None:
        iters = cfg.test_time.iters if cfg.test_time.enabled else 0
    if iters > 0:
        result = T.test_time_optimize(generator, extractor, masked, mask, iters, cfg.losses,
                                      cfg.test_time.lr, cfg.test_time.perturbation_range, cfg.seed)
        composed = compose(image, result.image, mask)
    else:
        pred = generator.inpaint(masked[None], mask[None])[0]
        composed = compose(image, pred, mask)
    save_image(composed, opts["out"], metadata={"seed": cfg.seed})
    if opts.get("gt"):
        gt = load_image(opts["gt"], res)
        print(f"seed={cfg.seed} mae={M.mae(gt, composed):.6f} psnr={M.psnr(gt, composed):.6f} "
              f"ssim={M.ssim(gt, composed):.6f}")
    return 0


def _evaluate(cmd: Command) -> int:
    opts = cmd.options
    trainer = T.load_checkpoint(opts["checkpoint"])
    cfg = _config(cmd, trainer.config)
    manifest = P.load_manifest(opts["manifest"])
    images = opts.get("images") or cfg.data.images
    masks = opts.get("masks") or cfg.data.masks
    if not images or not masks:
        raise ValueError("image and mask directories are required (--images/--masks or config data)")
    generator = trainer.generator
    generator.eval()

    def model(inputs, mask):
        if opts["reveal_holes"]:
            return generator(inputs, mask)[0]
        return generator.inpaint(inputs, mask)

    ev = P.EvalOptions(images, masks, _resolution(trainer.config), cfg.data.mask_white_is_hole,
                       opts["strict"], opts["region"], opts["reveal_holes"], opts["workers"])
    result = P.evaluate_manifest(manifest, model, trainer.extractor, ev)
    for err in result.errors:
        print(f"vlinknet.protocol: skipped {err}", file=sys.stderr)
    header = f"# seed={cfg.seed}\n# extractor={result.report.extractor}\n"
    if opts.get("out"):
        with open(opts["out"], "w", newline="") as fh:
            fh.write(header + result.report.to_csv())
    print(f"seed={cfg.seed}")
    print(result.report.table())
    return 0


def _protocol_build(cmd: Command) -> int:
    opts = cmd.options
    cfg = _config(cmd)
    seed = cfg.seed
    inventory = P.scan_masks(opts["masks"], cfg.data.mask_white_is_hole)
    manifest = P.build_manifest(P.list_ids(opts["images"]), inventory, opts["bucket"], seed)
    P.write_manifest(manifest, opts["out"])
    print(f"seed={seed} bucket={opts['bucket']} rows={len(manifest.rows)} manifest={opts['out']}")
    return 0


def _protocol_validate(cmd: Command) -> int:
    opts = cmd.options
    cfg = _config(cmd)
    manifest = P.load_manifest(opts["manifest"])
    if opts.get("masks"):
        for i, row in enumerate(manifest.rows, start=1):
            ratio = hole_ratio(load_mask(P.resolve_path(opts["masks"], row.mask_id),
                                           white_is_hole=cfg.data.mask_white_is_hole))
            if abs(ratio - row.hole_ratio) > P.RATIO_TOLERANCE:
                raise P.ManifestValidationError(
                    f"row {i}: mask {row.mask_id} has hole ratio {ratio!r}, manifest says {row.hole_ratio!r}"
                )
    print(f"valid rows={len(manifest.rows)} seed={manifest.seed}")
    return 0


def _metrics(cmd: Command) -> int:
    opts = cmd.options
    cfg = _config(cmd)
    gt, pred = load_image(opts["gt"]), load_image(opts["pred"])
    region = load_mask(opts["mask"], white_is_hole=cfg.data.mask_white_is_hole) if opts.get("mask") else None
    print(f"seed={cfg.seed} mae={M.mae(gt, pred, region):.6f} psnr={M.psnr(gt, pred, region):.6f} "
          f"ssim={M.ssim(gt, pred):.6f}")
    return 0


_DISPATCH = {
    "pretrain": lambda c: _train(c, ("pretrain",)),
    "train": lambda c: _train(c, T.PHASES),
    "finetune": lambda c: _train(c, ("finetune",)),
    "infer": _infer,
    "evaluate": _evaluate,
    "protocol-build": _protocol_build,
    "protocol-validate": _protocol_validate,
    "metrics": _metrics,
}


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module on the traceback (``vlinknet`` as fallback)."""
    module, tb = "vlinknet", exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("vlinknet.") and name != __name__:
            module = name
        tb = tb.tb_next
    return module


def run(cmd: Command) -> int:
    """Dispatch ``cmd``; module errors become exit code 1 with a qualified message."""
    try:
        return _DISPATCH[cmd.verb](cmd)
    except Exception as exc:  # reported and mapped to exit 1
        module = _origin(exc)
        print(f"{module}: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cmd = parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if cmd.options.get("verbose") else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(cmd)


if __name__ == "__main__":
    sys.exit(main())
