"""
Command-line surface.

    kpalign synth --manifest m.json --gt gt.json [--seed 1 ...]
    kpalign align m.json --out a.json [--epochs 600 --sigma 0.25 ...]
    kpalign eval a.json gt.json [--alpha 0.1 --out metrics.json]
    kpalign render a.json --out-dir colormaps/
    kpalign bench [--points 16 1024 70756 --dims 2 25]
    kpalign graph-stats m.json
    kpalign accept --out report.json

Exit codes: 0 success, 1 failed acceptance checks, 2 validation error,
3 numerical failure, 4 I/O error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from kpalign import __version__
from kpalign.cli_io import (
    bench_grid,
    load_alignment,
    load_ground_truth,
    load_manifest,
    render_colormaps,
    save_alignment,
    save_ground_truth,
    save_manifest,
    save_metric_report,
    save_weights,
)
from kpalign.config import ARCHITECTURES, GAUGE_MODES, PARAMETERIZATIONS, BuildConfig, TrainConfig, configure_logging
from kpalign.errors import KpalignError, KpalignIOError
from kpalign.evaluation import mean_transfer_error, pck_transfer
from kpalign.graph_builder import build_graph, graph_stats
from kpalign.optimizer import align_collection
from kpalign.synthetic import SynthSpec, gen_collection

logger = logging.getLogger(__name__)


def _add_build_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('graph construction')
    group.add_argument('--nms-window', type=float, default=30.0, help='NMS window side in pixels')
    group.add_argument('--top-k', type=int, default=10, help='matches kept per image pair')
    group.add_argument('--no-nms', action='store_true', help='keep every match (ablation)')
    group.add_argument('--dp-penalty', type=float, default=None,
                       help='DP-Means penalty in squared pixels (default: (0.05 * diagonal)^2)')
    group.add_argument('--no-intra-edges', action='store_true', help='drop intra-image edges (ablation)')


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group('optimization')
    group.add_argument('--epochs', type=int, default=600)
    group.add_argument('--sigma', type=float, default=0.25, help='Geman-McClure scale')
    group.add_argument('--lr', type=float, default=1e-3)
    group.add_argument('--seed', type=int, default=0)
    group.add_argument('--flip-every', type=int, default=100, help='epochs between flip searches')
    group.add_argument('--no-flip-search', action='store_true')
    group.add_argument('--hidden-dim', type=int, default=64)
    group.add_argument('--layers', type=int, default=5)
    group.add_argument('--no-bias', action='store_true')
    group.add_argument('--arch', choices=ARCHITECTURES, default='sage')
    penalty = group.add_mutually_exclusive_group()
    penalty.add_argument('--robust', dest='robust', action='store_true', default=True,
                         help='Geman-McClure penalty (default)')
    penalty.add_argument('--l2', dest='robust', action='store_false', help='squared residuals (ablation)')
    group.add_argument('--gauge', choices=GAUGE_MODES, default='karcher')
    group.add_argument('--param', choices=PARAMETERIZATIONS, default='lie')
    group.add_argument('--normalize', action='store_true', help='average the loss over evaluations')
    group.add_argument('--deterministic', action='store_true')


def _build_config(args) -> BuildConfig:
    return BuildConfig(
        nms_window=args.nms_window,
        top_k=args.top_k,
        use_nms=not args.no_nms,
        dp_penalty=args.dp_penalty,
        intra_edges=not args.no_intra_edges,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        sigma=args.sigma,
        flip_every=args.flip_every,
        flip_search=not args.no_flip_search,
        lr=args.lr,
        seed=args.seed,
        arch=args.arch,
        hidden_dim=args.hidden_dim,
        layers=args.layers,
        use_bias=not args.no_bias,
        robust=args.robust,
        gauge=args.gauge,
        param=args.param,
        normalize=args.normalize,
        deterministic=args.deterministic,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='kpalign', description='Keypoint-based joint alignment of image collections')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    parser.add_argument('--verbose', '-v', action='store_true', help='log progress at INFO level')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='generate a synthetic collection with ground truth')
    synth.add_argument('--manifest', required=True, type=Path)
    synth.add_argument('--gt', required=True, type=Path)
    synth.add_argument('--images', type=int, default=20)
    synth.add_argument('--keypoints', type=int, default=15)
    synth.add_argument('--warp', type=float, default=0.3)
    synth.add_argument('--noise', type=float, default=0.005)
    synth.add_argument('--outliers', type=float, default=0.1)
    synth.add_argument('--flips', type=float, default=0.0)
    synth.add_argument('--density', type=float, default=0.5)
    synth.add_argument('--width', type=int, default=256)
    synth.add_argument('--height', type=int, default=256)
    synth.add_argument('--seed', type=int, default=0)

    align = commands.add_parser('align', help='align the collection in a manifest')
    align.add_argument('manifest', type=Path)
    align.add_argument('--out', required=True, type=Path)
    align.add_argument('--loss-log', type=Path, help='write "epoch loss flips_changed" per epoch')
    align.add_argument('--weights-out', type=Path, help='checkpoint the final regressor weights')
    _add_build_flags(align)
    _add_train_flags(align)

    evaluate = commands.add_parser('eval', help='score an alignment against ground truth')
    evaluate.add_argument('alignment', type=Path)
    evaluate.add_argument('gt', type=Path)
    evaluate.add_argument('--alpha', type=float, default=0.1)
    evaluate.add_argument('--out', type=Path, help='metric report path')

    render = commands.add_parser('render', help='write one colormap PPM per image')
    render.add_argument('alignment', type=Path)
    render.add_argument('--out-dir', required=True, type=Path)

    bench = commands.add_parser('bench', help='time sparse and dense warps')
    bench.add_argument('--points', type=int, nargs='+', default=[16, 1024, 70756])
    bench.add_argument('--dims', type=int, nargs='+', default=[2, 25])
    bench.add_argument('--repeats', type=int, default=5)
    bench.add_argument('--batches', type=int, default=3)
    bench.add_argument('--out', type=Path, help='CSV output path')

    stats = commands.add_parser('graph-stats', help='per-image node and edge counts')
    stats.add_argument('manifest', type=Path)
    stats.add_argument('--out', type=Path, help='CSV output path')
    _add_build_flags(stats)

    accept = commands.add_parser('accept', help='run the synthetic acceptance checks')
    accept.add_argument('--out', type=Path, default=Path('acceptance-report.json'))
    accept.add_argument('--seeds', type=int, nargs='+', default=[1, 2, 3])
    accept.add_argument('--flip-seeds', type=int, default=20)
    accept.add_argument('--robust-seeds', type=int, default=5)
    accept.add_argument('--gradient-trials', type=int, default=50)
    accept.add_argument('--gauge-trials', type=int, default=1000)
    accept.add_argument('--epochs', type=int, default=600)
    accept.add_argument('--images', type=int, default=20)
    accept.add_argument('--only', nargs='+', help='run only these check ids')
    return parser


def _write_csv(frame, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as exc:
        raise KpalignIOError(f"cannot write CSV ({exc.strerror})", path) from exc


def _run_synth(args) -> int:
    spec = SynthSpec(
        n_images=args.images, n_keypoints=args.keypoints, warp_magnitude=args.warp,
        noise_std=args.noise, outlier_rate=args.outliers, flip_rate=args.flips,
        pair_density=args.density, width=args.width, height=args.height, seed=args.seed,
    )
    collection = gen_collection(spec)
    save_manifest(collection.images, collection.matches, args.manifest)
    save_ground_truth(collection, args.gt)
    return 0


def _run_align(args) -> int:
    build_config = _build_config(args)
    train_config = _train_config(args)
    images, matches = load_manifest(args.manifest)
    graph = build_graph(images, matches, build_config)

    log_lines: List[str] = []
    sink = None
    if args.loss_log is not None:
        def sink(epoch, loss, changed):
            log_lines.append(f"{epoch} {loss!r} {changed}")

    result = align_collection(graph, train_config, sink)
    logger.info("stage timings: %s", {name: round(seconds, 3) for name, seconds in result.timings.items()})
    save_alignment(result, args.out, build_config.to_dict())
    if args.loss_log is not None:
        try:
            args.loss_log.parent.mkdir(parents=True, exist_ok=True)
            args.loss_log.write_text(''.join(line + '\n' for line in log_lines))
        except OSError as exc:
            raise KpalignIOError(f"cannot write loss log ({exc.strerror})", args.loss_log) from exc
    if args.weights_out is not None:
        save_weights(result.weights, args.weights_out)
    print(f"final loss {result.final_loss:.6g}; flipped images: "
          f"{[i for i, flag in zip(result.image_ids, result.flips) if flag]}")
    return 0


def _run_eval(args) -> int:
    result = load_alignment(args.alignment)
    truth = load_ground_truth(args.gt)
    report = pck_transfer(result, truth.annotations, args.alpha)
    error = mean_transfer_error(result, truth.annotations)
    if args.out is not None:
        save_metric_report(report, error, args.out)
    print(f"PCK@{args.alpha:g}: {report.mean:.4f}  mean transfer error: {error:.5f}")
    return 0


def _run_render(args) -> int:
    paths = render_colormaps(load_alignment(args.alignment), args.out_dir)
    print(f"wrote {len(paths)} colormaps to {args.out_dir}")
    return 0


def _run_bench(args) -> int:
    table = bench_grid(args.points, args.dims, repeats=args.repeats, batches=args.batches)
    if args.out is not None:
        _write_csv(table, args.out)
    print(table.to_string(index=False))
    return 0


def _run_graph_stats(args) -> int:
    images, matches = load_manifest(args.manifest)
    table = graph_stats(build_graph(images, matches, _build_config(args)))
    if args.out is not None:
        _write_csv(table, args.out)
    print(table.to_string(index=False))
    return 0


def _run_accept(args) -> int:
    from kpalign.acceptance import SyntheticAcceptance

    engine = SyntheticAcceptance(
        seeds=args.seeds, flip_seeds=args.flip_seeds, robust_seeds=args.robust_seeds,
        gradient_trials=args.gradient_trials, gauge_trials=args.gauge_trials,
        epochs=args.epochs, n_images=args.images,
    )
    engine.run_checks(args.only)
    engine.calculate_report()
    engine.save_report(args.out)
    engine.display_summary()
    return 0 if engine.report['checks_passed'] == engine.report['checks_total'] else 1


COMMANDS = {
    'synth': _run_synth,
    'align': _run_align,
    'eval': _run_eval,
    'render': _run_render,
    'bench': _run_bench,
    'graph-stats': _run_graph_stats,
    'accept': _run_accept,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except KpalignError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
