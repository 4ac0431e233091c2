"""Command-line driver: gen-data, train-classifier, optimize-uap, attack, heatmap, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, data, formats, models, uap

log = logging.getLogger("btcuap")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_btc_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--images", required=True, help="manifest (or dataset dir) whose image entries train the UAP")
    p.add_argument("--extractor-seed", type=int, default=2, help="seed of the attacker's image model")
    p.add_argument("--layer", type=int, default=2)
    p.add_argument("--frames", type=int, default=32, help="UAP frame count N")
    p.add_argument("--eps", type=float, default=16.0, help="l-inf budget on the 0-255 scale")
    p.add_argument("--alpha", type=float, default=0.004)
    p.add_argument("--k", type=int, default=4, help="number of random noises")
    j = p.add_mutually_exclusive_group()
    j.add_argument("--j-max", type=int, default=2, help="use J = {-m..-1, 1..m}")
    j.add_argument("--j", type=_int_list, default=None, help="explicit offsets, e.g. --j=-2,-1,1,2 (use '=' when the list starts with '-')")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-temporal", action="store_true", help="drop the temporal term (image-only baseline)")
    p.add_argument("--update-neighbors", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="btc-uap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic video corpus")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--clips-per-class", type=int, default=20)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-classifier", help="fit the target video classifier head")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--extractor-seed", type=int, default=1, help="seed of the target model's extractor")
    p.add_argument("--out", required=True)

    p = sub.add_parser("optimize-uap", help="optimise a BTC-UAP on an image set")
    _add_btc_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", help="evaluate a UAP against a video classifier")
    p.add_argument("--uap", required=True)
    p.add_argument("--videos", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--shift", type=int, default=0)
    p.add_argument("--report", required=True)

    p = sub.add_parser("heatmap", help="frame-similarity matrix of one clip as CSV + PGM")
    p.add_argument("--video", required=True, help="BTCT clip file")
    p.add_argument("--extractor-seed", type=int, default=2)
    p.add_argument("--layer", type=int, default=2)
    p.add_argument("--uap", default=None)
    p.add_argument("--out", required=True, help="output prefix")

    p = sub.add_parser("ablate", help="re-optimise over a parameter grid and tabulate ASR")
    p.add_argument("--sweep", required=True, choices=analysis.SWEEPS)
    p.add_argument("--grid", required=True, help="comma-separated settings")
    _add_btc_flags(p)
    p.add_argument("--videos", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    return parser


def btc_config_from_args(args) -> uap.BtcConfig:
    J = args.j if args.j is not None else list(range(-args.j_max, 0)) + list(range(1, args.j_max + 1))
    return uap.BtcConfig(
        K=args.k, J=tuple(J), layer=args.layer, alpha=args.alpha, epsilon=args.eps / 255.0,
        N=args.frames, epochs=args.epochs, seed=args.seed,
        temporal_enabled=not args.no_temporal, update_neighbors=args.update_neighbors,
    )


def _write_resolved(args, out: Path, extra: dict | None = None) -> None:
    record = {k: v for k, v in sorted(vars(args).items())}
    if extra:
        record.update(extra)
    target = out / "resolved_config.json" if out.is_dir() else out.with_name(out.name + ".resolved.json")
    target.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _clips(path):
    return list(data.load_dataset(path).load_clips())


def cmd_gen_data(args) -> None:
    manifest = data.generate_dataset(args.classes, args.clips_per_class, args.frames, args.size, args.size,
                                     args.seed, args.out)
    _write_resolved(args, Path(args.out))
    print(f"wrote {len(manifest.of_kind('clip'))} clips, {len(manifest.of_kind('image'))} images to {args.out}")


def cmd_train_classifier(args) -> None:
    manifest = data.load_dataset(args.data)
    model, report = models.train_classifier(manifest, args.epochs, args.seed, args.lr, args.extractor_seed)
    out = Path(args.out)
    models.save_model(model, out)
    _write_resolved(args, out, {"train_accuracy": report.train_accuracy, "val_accuracy": report.val_accuracy})
    print(f"train accuracy {report.train_accuracy:.3f}, validation accuracy {report.val_accuracy:.3f}")


def cmd_optimize_uap(args) -> None:
    config = btc_config_from_args(args)
    manifest = data.load_dataset(args.images)
    images = manifest.load_images()
    if not images:
        raise formats.ManifestError(f"{args.images}: no image entries")
    spec = models.build_feature_extractor(args.extractor_seed, images[0].shape)
    state = uap.optimize_uap(images, spec, config)
    out = Path(args.out)
    uap.save_uap(state, out, config)
    _write_resolved(args, out, {"btc_config": uap.config_dict(config), "epoch_losses": state.losses})
    print(f"optimised {state.N}-frame UAP, final epoch loss {state.losses[-1] if state.losses else float('nan'):.4f}")


def cmd_attack(args) -> None:
    state, config = uap.load_uap(args.uap)
    model = models.load_model(args.model)
    report = analysis.attack_success_rate(model, _clips(args.videos), state, args.shift, config,
                                          model_id=Path(args.model).name, uap_id=Path(args.uap).name)
    out = Path(args.report)
    analysis.emit_report(report, out, "json")
    _write_resolved(args, out)
    print(f"ASR {report.asr:.3f} (clean accuracy {report.clean_accuracy:.3f}, {report.n_clips} clips)")


def cmd_heatmap(args) -> None:
    clip = data.load_clip(args.video)
    spec = models.build_feature_extractor(args.extractor_seed, clip.frames.shape[1:])
    pert = None
    if args.uap:
        state, _ = uap.load_uap(args.uap)
        pert = uap_repeat(state, clip.T)
    mat = analysis.similarity_matrix(clip, spec, args.layer, pert)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    analysis.emit_report(mat, prefix.with_name(prefix.name + ".csv"), "csv")
    analysis.emit_report(mat, prefix.with_name(prefix.name + ".pgm"), "pgm")
    _write_resolved(args, prefix.with_name(prefix.name + ".csv"))
    print(f"{mat.subject} neighbour similarity {mat.neighbor_mean():.4f}")


def uap_repeat(state, T):
    from .video import repeat_uap

    return repeat_uap(state, T, warn=False)


def cmd_ablate(args) -> None:
    base = btc_config_from_args(args)
    images = data.load_dataset(args.images).load_images()
    spec = models.build_feature_extractor(args.extractor_seed, images[0].shape)
    model = models.load_model(args.model)
    grid = [g.strip() for g in args.grid.split(",") if g.strip()]
    table = analysis.ablation_run(args.sweep, grid, base, images, spec, model, _clips(args.videos))
    out = Path(args.out)
    analysis.emit_report(table, out, "csv")
    _write_resolved(args, out, {"btc_config": uap.config_dict(base)})
    for row in table.rows:
        print(f"{args.sweep}={row['setting']}: ASR {row['asr']:.3f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "optimize-uap": cmd_optimize_uap,
    "attack": cmd_attack,
    "heatmap": cmd_heatmap,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (formats.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
