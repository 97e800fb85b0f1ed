"""Command-line entry point: ``wavinpaint <subcommand> [flags]``.

Subcommands: schedule, make-phantoms, train, inpaint, eval, bench. Every
subcommand accepts ``--config FILE`` with flat ``key = value`` lines (keys are
flag names without the leading dashes); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import List, Optional, Sequence

from wavinpaint.denoiser import DenoiserConfig, load_checkpoint
from wavinpaint.errors import ValidationError, WavInpaintError
from wavinpaint.metrics import evaluate, write_report
from wavinpaint.phantom import PhantomSpec, crop_to_cube, gen_phantom, write_dataset
from wavinpaint.sampler import InpaintSample, SamplerConfig, inpaint, time_sampling
from wavinpaint.schedule import ScheduleParams, build_schedule, export_curves
from wavinpaint.training import TrainConfig, train_loop
from wavinpaint.volume import NormRecord, apply_mask, load_volume, normalize, save_volume

log = logging.getLogger("wavinpaint")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


def _int_list(text: str) -> List[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_schedule_flags(p: argparse.ArgumentParser, multi: bool = False) -> None:
    kind_help = "schedule kind(s), comma separated" if multi else "schedule kind"
    p.add_argument("--kind", default="vp", help=f"{kind_help}: l, la or vp (default vp)")
    p.add_argument("--T", type=_int_list if multi else int, default=[2] if multi else 2,
                   help="number of diffusion steps" + (" (comma separated)" if multi else ""))
    p.add_argument("--beta-min", type=float, default=0.1)
    p.add_argument("--beta-max", type=float, default=20.0)
    p.add_argument("--beta1", type=float, default=None, help="first beta of L/LA schedules")
    p.add_argument("--betaT", type=float, default=None, help="last beta of L/LA schedules")
    p.add_argument("--vp-form", choices=("t_independent", "t_scaled"), default="t_independent")


def _schedule_params(args, kind: str, T: int) -> ScheduleParams:
    return ScheduleParams(
        kind=kind.upper(),
        T=T,
        beta_1=args.beta1,
        beta_T=args.betaT,
        beta_min=args.beta_min,
        beta_max=args.beta_max,
        vp_form=args.vp_form,
    )


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value file merged under explicit flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavinpaint", description="Few-step wavelet diffusion inpainting.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("schedule", help="export beta / alpha_bar curves as CSV")
    _add_schedule_flags(p, multi=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("make-phantoms", help="write synthetic g/m/v triplets and a manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dims", type=int, default=32, help="cube edge of the generated volumes")
    p.add_argument("--crop", type=int, default=None, help="crop to a cube of this edge around the mask")
    p.add_argument("--smoothness", type=float, default=1.0)
    p.add_argument("--mask-radius", type=_int_list, default=None,
                   help="LO,HI voxel radius range of the spherical mask (default 3,6 capped to fit dims)")
    _add_common(p)

    p = sub.add_parser("train", help="train a denoiser on a manifest of samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.fwck)")
    p.add_argument("--history", default=None, help="loss history CSV path")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--hidden-channels", type=int, default=16)
    p.add_argument("--num-hidden-convs", type=int, default=2)
    p.add_argument("--loss-kind", choices=("squared", "absolute"), default="squared")
    _add_schedule_flags(p)
    _add_common(p)

    p = sub.add_parser("inpaint", help="inpaint a voided volume")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="voided volume v (FW3D)")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalized", action="store_true", help="inputs are already scaled to [-1, 1]")
    p.add_argument("--pct", type=float, default=0.005, help="percentile clipped at each end")
    p.add_argument("--no-composite", action="store_true", help="return the raw model output")
    p.add_argument("--clamp", type=float, default=None, help="image-space clamp for predictions")
    _add_schedule_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="SSIM / MSE / PSNR of a prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--id", default=None, help="volume id written to the report")
    p.add_argument("--data-range", type=float, default=None)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("bench", help="median inpainting wall time per T")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--repeats", type=int, default=5, help="timed runs per T (at least 5)")
    p.add_argument("--normalized", action="store_true")
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    _add_schedule_flags(p, multi=True)
    _add_common(p)
    return parser


# -- config files ---------------------------------------------------------------------


def read_config(path: str) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.lstrip("-").replace("-", "_")] = value
    return values


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, command: str, path: str) -> None:
    """Install config-file values as subparser defaults so explicit flags still win."""
    subparser = parser._subparsers._group_actions[0].choices[command]  # noqa: SLF001
    actions = {}
    for action in subparser._actions:  # noqa: SLF001
        actions[action.dest] = action
        for opt in action.option_strings:
            actions[opt.lstrip("-").replace("-", "_")] = action
    defaults = {}
    for key, value in read_config(path).items():
        if key in ("config", "help") or key not in actions:
            raise UsageError(f"unknown config key {key!r} for {command}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            if value.lower() not in _TRUE | _FALSE:
                raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")
            defaults[action.dest] = value.lower() in _TRUE
        else:
            # argparse applies `type` to string defaults
            defaults[action.dest] = value
        action.required = False
    subparser.set_defaults(**defaults)


# -- subcommands ------------------------------------------------------------------------


def _load_input(args) -> InpaintSample:
    v = load_volume(args.input)
    m = load_volume(args.mask)
    if args.normalized:
        return InpaintSample(m=m, v=apply_mask(v, m), norm=NormRecord.identity())
    v_norm, rec = normalize(v, getattr(args, "pct", 0.005))
    return InpaintSample(m=m, v=apply_mask(v_norm, m), norm=rec)


def cmd_schedule(args) -> None:
    schedules = [
        build_schedule(_schedule_params(args, kind, T))
        for kind in args.kind.split(",")
        for T in args.T
    ]
    export_curves(schedules, args.out)


def cmd_make_phantoms(args) -> None:
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    if args.mask_radius is None:
        hi = max(1, min(6, (args.dims // 2 - 1) // 2))
        radius = (min(3, hi), hi)
    elif len(args.mask_radius) == 2:
        radius = tuple(args.mask_radius)
    else:
        raise ValidationError("--mask-radius takes LO,HI")
    samples, seeds = [], []
    for i in range(args.n):
        seed = args.seed + i
        spec = PhantomSpec(dims=(args.dims,) * 3, seed=seed, smoothness=args.smoothness, mask_radius=radius)
        sample = gen_phantom(spec)
        if args.crop is not None:
            g, m, _ = crop_to_cube(sample.g, sample.m, args.crop)
            sample = InpaintSample.from_ground_truth(g, m, sample.norm)
        samples.append(sample)
        seeds.append(seed)
    path = write_dataset(samples, args.out_dir, seeds)
    log.info("wrote %d samples, manifest %s", len(samples), path)


def read_manifest(path: str) -> List[tuple]:
    """``(id, InpaintSample)`` pairs from a manifest written by ``make-phantoms``."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            g = load_volume(os.path.join(base, row["g_path"]))
            m = load_volume(os.path.join(base, row["m_path"]))
            rec = NormRecord(
                scale=float(row["scale"]),
                offset=float(row["offset"]),
                clip_lo=float(row["clip_lo"]),
                clip_hi=float(row["clip_hi"]),
            )
            out.append((row["id"], InpaintSample.from_ground_truth(g, m, rec)))
    return out


def cmd_train(args) -> None:
    dataset = [s for _, s in read_manifest(args.manifest)]
    cfg = TrainConfig(
        schedule=_schedule_params(args, args.kind, args.T),
        model=DenoiserConfig(hidden_channels=args.hidden_channels, num_hidden_convs=args.num_hidden_convs),
        learning_rate=args.lr,
        batch_size=args.batch_size,
        steps=args.steps,
        seed=args.seed,
        loss_kind=args.loss_kind,
    )
    train_loop(dataset, cfg, checkpoint_path=args.out, history_path=args.history)


def cmd_inpaint(args) -> None:
    model = load_checkpoint(args.model)
    sample = _load_input(args)
    s = build_schedule(_schedule_params(args, args.kind, args.T))
    cfg = SamplerConfig(composite_known_region=not args.no_composite, clamp_x0=args.clamp, seed=args.seed)
    save_volume(inpaint(model, sample, s, cfg), args.out)


def cmd_eval(args) -> None:
    pred = load_volume(args.pred)
    gt = load_volume(args.gt)
    mask = load_volume(args.mask) if args.mask else None
    reports = evaluate(pred, gt, mask, data_range=args.data_range, window=args.window)
    vid = args.id or os.path.splitext(os.path.basename(args.pred))[0]
    write_report([(vid, r) for r in reports], args.out)


BENCH_FIELDS = ("kind", "T", "median_s", "min_s", "max_s", "repeats")


def cmd_bench(args) -> None:
    if args.repeats < 5:
        raise ValidationError("--repeats must be >= 5 so the median damps scheduler noise")
    model = load_checkpoint(args.model)
    sample = _load_input(args)
    kinds = args.kind.split(",")
    if len(kinds) != 1:
        raise ValidationError("bench takes a single --kind")
    schedules = [build_schedule(_schedule_params(args, kinds[0], T)) for T in args.T]
    rows = time_sampling(model, sample, schedules, SamplerConfig(seed=args.seed), repeats=args.repeats)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({"kind": kinds[0].upper(), **row})
    finally:
        if args.out:
            out.close()


COMMANDS = {
    "schedule": cmd_schedule,
    "make-phantoms": cmd_make_phantoms,
    "train": cmd_train,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        command = argv[0]
        config = _config_path(argv)
        if config and command in COMMANDS:
            _apply_config(parser, command, config)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wavinpaint: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"wavinpaint: error: cannot read config: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (WavInpaintError, OSError, ValueError) as exc:
        print(f"wavinpaint: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
