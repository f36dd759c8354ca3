"""Command-line entry point.

All tabular output is UTF-8 TSV with a header line. Exit status is 0 on
success, 1 on usage errors and 2 on data errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import contrastive, evalkit, optics
from .config import ConfigError, parse_config
from .recon_fbp import ProjectionStack, fbp_reconstruct, split_half_sets
from .volume_io import DensityVolume, Micrograph, MrcError, read_annotations, read_mrc, read_mrc_stack, write_mrc

log = logging.getLogger("emsynth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(rows, header, out=None):
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join(v if isinstance(v, str) else f"{v:.9g}" if isinstance(v, float) else str(v) for v in r))
    text = "\n".join(lines) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _metrics(pairs):
    _emit([(k, v) for k, v in pairs], ["metric", "value"])


def _read_micrograph(path) -> Micrograph:
    m = read_mrc(path)
    if not isinstance(m, Micrograph):
        raise MrcError(f"{path}: expected a 2D micrograph")
    return m


def _read_volume(path) -> DensityVolume:
    v = read_mrc(path)
    if not isinstance(v, DensityVolume):
        raise MrcError(f"{path}: expected a 3D volume")
    return v


# --------------------------------------------------------------------------- #


def cmd_generate(args):
    from .pipeline import generate_dataset

    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.output = args.out
    manifest = generate_dataset(cfg)
    n = sum(1 for _ in open(manifest, encoding="utf-8")) - 1
    _metrics([("manifest", str(manifest)), ("files", n), ("micrographs", cfg.count)])


def cmd_ctf(args):
    p = optics.CtfParams.from_voltage(
        args.voltage, defocus=args.defocus, w=args.amplitude_contrast, cs=args.cs,
        phase_shift=args.phase_shift, pixel_size=args.pixel_size,
    )
    g, val = optics.radial_profile(p, args.points, args.g_max)
    _emit(zip(g.tolist(), val.tolist()), ["g", "value"], args.out)
    if args.plot:
        from .plotting import plot_ctf_profile

        plot_ctf_profile(g, val, args.plot, title=f"defocus {args.defocus:g} Å, {args.voltage:g} kV")


def cmd_eval_picks(args):
    picks = evalkit.read_picks(args.picks)
    truth = read_annotations(args.annotations)
    labels_all, scores_all = [], []
    total_gt = fn_total = 0
    for mic in sorted(set(truth) | set(picks)):
        gt = np.array([r.center for r in truth.get(mic, [])]).reshape(-1, 2)
        ps = picks.get(mic, evalkit.PickSet(np.zeros((0, 2)), np.zeros(0)))
        if args.top is not None:
            ps = ps.top(args.top)
        labels, fn = evalkit.match_picks(ps, gt, args.radius)
        labels_all.append(labels)
        scores_all.append(ps.scores)
        total_gt += len(gt)
        fn_total += fn
    if total_gt == 0:
        raise ValueError("annotation table contains no particles")
    labels = np.concatenate(labels_all) if labels_all else np.zeros(0, bool)
    scores = np.concatenate(scores_all) if scores_all else np.zeros(0)
    curve = evalkit.pr_curve(labels, scores, total_gt)
    value = evalkit.auprc(curve)
    _metrics([
        ("auprc", value), ("n_picks", int(len(labels))), ("n_gt", total_gt),
        ("tp", int(labels.sum())), ("fp", int((~labels).sum())), ("fn", fn_total),
    ])
    rows = zip(curve.thresholds.tolist(), curve.precision.tolist(), curve.recall.tolist())
    if args.curve in (None, "-"):
        sys.stdout.write("\n")
        _emit(rows, ["threshold", "precision", "recall"])
    else:
        _emit(rows, ["threshold", "precision", "recall"], args.curve)
    if args.plot:
        from .plotting import plot_pr_curve

        plot_pr_curve(curve, args.plot, value)


def _fsc_rows(curve, voxel):
    d = curve.side_length
    return [(int(r), r / (d * voxel), float(c)) for r, c in zip(curve.shells, curve.values)]


def _fsc_report(curve, voxel, fsc_out, plot):
    r5 = evalkit.resolution_at_threshold(curve, 0.5, voxel)
    r1 = evalkit.resolution_at_threshold(curve, 0.143, voxel)
    if fsc_out:
        _emit(_fsc_rows(curve, voxel), ["shell", "freq_inv_A", "fsc"], fsc_out)
    if plot:
        from .plotting import plot_fsc

        plot_fsc(curve, plot, voxel)
    return [
        ("fsc0.5_shell", r5.shell), ("fsc0.5_px", r5.pixels), ("fsc0.5_A", r5.angstrom),
        ("fsc0.5_crossed", str(r5.crossed).lower()),
        ("fsc0.143_shell", r1.shell), ("fsc0.143_px", r1.pixels), ("fsc0.143_A", r1.angstrom),
        ("fsc0.143_crossed", str(r1.crossed).lower()),
    ]


def cmd_eval_poses(args):
    pred = evalkit.read_poses(args.pred)
    gt = evalkit.read_poses(args.gt)
    if len(pred) != len(gt):
        raise ValueError(f"pose count mismatch: {len(pred)} predicted vs {len(gt)} ground truth")
    if not args.no_align:
        pred = evalkit.apply_alignment(evalkit.align_rotations(pred, gt), pred)
    axis = tuple(float(x) for x in args.axis.split(","))
    out = [
        ("n", len(gt)),
        ("rot_rad", evalkit.rotation_error(pred, gt, axis)),
        ("pose_loss", evalkit.pose_supervision_loss(pred, gt)),
    ]
    if bool(args.half1) != bool(args.half2):
        raise UsageError("--half1 and --half2 must be given together")
    if args.half1:
        v1, v2 = _read_volume(args.half1), _read_volume(args.half2)
        out += _fsc_report(evalkit.fsc(v1, v2), v1.voxel_size, args.fsc_out, args.plot)
    _metrics(out)


def cmd_fbp(args):
    frames, pixel = read_mrc_stack(args.stack)
    poses = evalkit.read_poses(args.poses)
    if len(poses) != len(frames):
        raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
    stack = ProjectionStack(frames, poses.rotations, poses.translations, pixel)
    out = Path(args.out)
    vol = fbp_reconstruct(stack, pad_factor=args.pad_factor)
    write_mrc(vol, out)
    metrics = [("volume", str(out)), ("n", len(stack))]
    if args.halves:
        h1, h2 = split_half_sets(stack, np.random.default_rng(args.seed))
        v1 = fbp_reconstruct(h1, pad_factor=args.pad_factor)
        v2 = fbp_reconstruct(h2, pad_factor=args.pad_factor)
        p1, p2 = out.with_name(out.stem + "_half1.mrc"), out.with_name(out.stem + "_half2.mrc")
        write_mrc(v1, p1)
        write_mrc(v2, p2)
        fsc_out = args.fsc_out or str(out.with_name(out.stem + "_fsc.tsv"))
        metrics += [("half1", str(p1)), ("half2", str(p2)), ("fsc_table", fsc_out)]
        metrics += _fsc_report(evalkit.fsc(v1, v2), pixel, fsc_out, args.plot)
    _metrics(metrics)


def cmd_mask_sample(args):
    mask = _read_micrograph(args.mask)
    s = contrastive.sample_patches_masked(mask, args.q, args.patch_size, np.random.default_rng(args.seed))
    for name, n in s.shortfall.items():
        log.warning("%s class short by %d queries", name, n)
    rows = [("particle", int(r), int(c)) for r, c in s.particle_queries]
    rows += [("background", int(r), int(c)) for r, c in s.background_queries]
    _emit(rows, ["class", "row", "col"], args.out)


def _fd_check(fi, fs, pp, bp, tau, rng, n_checks=24, h=1e-5):
    g_inter, g_syn = contrastive.mask_nce_gradient(fi, fs, pp, bp, tau)
    scale = max(max(np.abs(g).max() for g in g_inter + g_syn), 1e-12)
    worst = 0.0
    for _ in range(n_checks):
        which = int(rng.integers(2))
        base = fi if which == 0 else fs
        grads = g_inter if which == 0 else g_syn
        l = int(rng.integers(base.n_layers))
        i = int(rng.integers(base.layers[l].shape[0]))
        j = int(rng.integers(base.layers[l].shape[1]))

        def shifted(delta):
            layers = list(base.layers)
            arr = layers[l].copy()
            arr[i, j] += delta
            layers[l] = arr
            fset = contrastive.FeatureSet(base.positions, tuple(layers))
            a, b = (fset, fs) if which == 0 else (fi, fset)
            return contrastive.mask_nce_loss(a, b, pp, bp, tau)

        fd = (shifted(h) - shifted(-h)) / (2 * h)
        worst = max(worst, abs(fd - grads[l][i, j]) / scale)
    return worst


def cmd_loss_check(args):
    inter = _read_micrograph(args.inter)
    syn = _read_micrograph(args.syn)
    mask = _read_micrograph(args.mask)
    if not (inter.shape == syn.shape == mask.shape):
        raise ValueError("inter, syn and mask must share dimensions")
    rng = np.random.default_rng(args.seed)
    patch = args.patch_size or 8 * 2 ** (args.layers - 1)
    s = contrastive.sample_patches_masked(mask, args.q, patch, rng)
    pos = np.concatenate([s.particle_queries, s.background_queries])
    fi = contrastive.reference_encoder(inter, pos, args.layers, args.dim, args.seed)
    fs = contrastive.reference_encoder(syn, pos, args.layers, args.dim, args.seed)
    value = contrastive.mask_nce_loss(fi, fs, s.particle_queries, s.background_queries, args.tau)
    err = _fd_check(fi, fs, s.particle_queries, s.background_queries, args.tau, rng)
    _metrics([
        ("mask_nce", value), ("max_fd_grad_rel_err", err),
        ("n_particle", len(s.particle_queries)), ("n_background", len(s.background_queries)),
        ("weighted_mask_nce", args.lam * value),
    ])


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emsynth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic micrograph dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, help="default: $EMSYNTH_WORKERS or 1")
    g.add_argument("--out", help="output directory (overrides dataset.output)")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("ctf", help="radial CTF profile as TSV")
    c.add_argument("--voltage", type=float, default=300.0, help="kV")
    c.add_argument("--defocus", type=float, default=15000.0, help="Å, positive = underfocus")
    c.add_argument("--cs", type=float, default=2.7e7, help="spherical aberration, Å")
    c.add_argument("--amplitude-contrast", type=float, default=0.1)
    c.add_argument("--phase-shift", type=float, default=0.0, help="radians")
    c.add_argument("--pixel-size", type=float, default=1.0, help="Å")
    c.add_argument("--points", type=int, default=512)
    c.add_argument("--g-max", type=float, help="1/Å, default Nyquist")
    c.add_argument("--out", help="TSV path (default stdout)")
    c.add_argument("--plot", help="write a PNG/PDF figure of the profile")
    c.set_defaults(func=cmd_ctf)

    e = sub.add_parser("eval-picks", help="AUPRC of picks against annotations")
    e.add_argument("--picks", required=True, help="TSV: mic_id cx cy score")
    e.add_argument("--annotations", required=True)
    e.add_argument("--radius", type=float, required=True, help="match radius, px")
    e.add_argument("--top", type=int, help="keep only the top-N picks per micrograph")
    e.add_argument("--curve", help="PR curve TSV path (default: stdout after the metrics)")
    e.add_argument("--plot")
    e.set_defaults(func=cmd_eval_picks)

    q = sub.add_parser("eval-poses", help="rotation error, pose loss and optional half-map FSC")
    q.add_argument("--pred", required=True)
    q.add_argument("--gt", required=True)
    q.add_argument("--no-align", action="store_true")
    q.add_argument("--axis", default="0,0,1")
    q.add_argument("--half1")
    q.add_argument("--half2")
    q.add_argument("--fsc-out")
    q.add_argument("--plot")
    q.set_defaults(func=cmd_eval_poses)

    f = sub.add_parser("fbp", help="reconstruct a volume from a posed particle stack")
    f.add_argument("--stack", required=True)
    f.add_argument("--poses", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--halves", action="store_true")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--pad-factor", type=int, default=2)
    f.add_argument("--fsc-out")
    f.add_argument("--plot")
    f.set_defaults(func=cmd_fbp)

    m = sub.add_parser("mask-sample", help="mask-guided query sampling")
    m.add_argument("--mask", required=True)
    m.add_argument("--q", type=int, default=256)
    m.add_argument("--patch-size", type=int, default=32)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out")
    m.set_defaults(func=cmd_mask_sample)

    lc = sub.add_parser("loss-check", help="MaskNCE value and finite-difference gradient check")
    lc.add_argument("--inter", required=True)
    lc.add_argument("--syn", required=True)
    lc.add_argument("--mask", required=True)
    lc.add_argument("--layers", type=int, default=3)
    lc.add_argument("--dim", type=int, default=64)
    lc.add_argument("--tau", type=float, default=contrastive.DEFAULT_TAU)
    lc.add_argument("--lam", type=float, default=contrastive.DEFAULT_LAMBDA)
    lc.add_argument("--q", type=int, default=256)
    lc.add_argument("--patch-size", type=int)
    lc.add_argument("--seed", type=int, default=0)
    lc.set_defaults(func=cmd_loss_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"emsynth: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, MrcError, ValueError, OSError) as exc:
        print(f"emsynth: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
