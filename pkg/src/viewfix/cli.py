"""Command line interface: curate / train / fix / analyze / eval.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .analysis import (ToyPatchExtractor, cluster_summaries, image_degradation_embedding,
                       project_2d)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, derive_seed, fixer_config, load_config
from .degrade import get_degrader
from .errors import DataError, FlowEstimationError, TrainingDivergedError
from .fileio import (load_scene, read_flo, read_mask_png, read_pfm, read_png,
                     read_pose_file, read_scene_manifest, write_mask_png, write_png)
from .image import Image
from .metrics import evaluate_pairs
from .model import FixerModel, fix
from .training import (LossConfig, OptimConfig, TrainingSample, curate_pairs,
                       middle_reference_index, train, write_loss_csv)
from .warp import (CameraIntrinsics, DepthPose, Disparity, Flow, FlowField, estimate_flow,
                   pre_align, relative_pose)


class _ParserExit(Exception):
    def __init__(self, code):
        self.code = code


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1, not 2."""

    def exit(self, status=0, message=None):
        if message:
            self._print_message(message, sys.stderr)
        raise _ParserExit(0 if status == 0 else 1)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="viewfix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="build degraded/warped/clean training triples")
    p.add_argument("--scenes", required=True, help="scenes.txt manifest")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--degrader", default="blur_noise")
    p.add_argument("--mode", choices=["geometry", "disparity", "flow"], default=None,
                   help="override warp.mode from the config")
    p.add_argument("--flow-fallback", action="store_true",
                   help="estimate flow when the scene lacks the chosen geometry")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_curate)

    p = sub.add_parser("train", help="optimize the fixer on a curated dataset")
    p.add_argument("--data", required=True, help="curated dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--loss-csv", default=None, help="loss history CSV (default: <out>.loss.csv)")
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--no-ldi", action="store_true",
                   help="train without the per-scale reference detail path")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("fix", help="fix a degraded view (or directory of views)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--degraded", required=True, help="degraded image or directory")
    p.add_argument("--reference", required=True,
                   help="reference image, or directory pairing frames by filename")
    p.add_argument("--transform", default=None,
                   help=".flo flow, .pfm disparity, directory bundle (depth.pfm + pose.txt), "
                        "or a directory of per-frame .flo files")
    p.add_argument("--flow-fallback", action="store_true",
                   help="estimate reference->degraded flow when no transform is given")
    p.add_argument("--out", required=True, help="output image or directory")
    p.add_argument("--config", default=None)
    p.add_argument("--no-ldi", action="store_true")
    p.set_defaults(handler=cmd_fix)

    p = sub.add_parser("analyze", help="project degradation fingerprints to 2D")
    p.add_argument("--gt", required=True, help="clean image directory")
    p.add_argument("--variant", action="append", default=[], metavar="LABEL=DIR",
                   help="degraded variant directory (repeatable)")
    p.add_argument("--fixed", action="append", default=[], metavar="LABEL=DIR",
                   help="fixed outputs for a variant (repeatable)")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--method", choices=["tsne", "pca"], default=None)
    p.add_argument("--samples", type=int, default=None, help="max images per variant")
    p.add_argument("--perplexity", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--extractor-seed", type=int, default=0)
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("eval", help="PSNR/SSIM (+ external plugins) over paired directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--plugin", action="append", default=[], metavar="NAME=EXECUTABLE",
                   help="external metric: called as '<exe> pred.png gt.png' (repeatable)")
    p.add_argument("--csv", default=None, help="also write per-image metrics here")
    p.set_defaults(handler=cmd_eval)

    return parser


# --- curate -------------------------------------------------------------------

def _scene_transforms(scene, mode: str, flow_fallback: bool):
    n = len(scene.frames)
    ref = middle_reference_index(n)
    transforms: list = [None] * n

    def fallback(i):
        return Flow(estimate_flow(scene.frames[ref], scene.frames[i]))

    for i in range(n):
        if i == ref:
            continue
        if mode == "geometry" and scene.depths is not None and scene.world_to_cam is not None:
            intr = CameraIntrinsics(*scene.intrinsics)
            pose = relative_pose(scene.world_to_cam[ref], scene.world_to_cam[i])
            transforms[i] = DepthPose(scene.depths[ref], intr, pose)
        elif mode == "disparity" and scene.depths is not None:
            transforms[i] = Disparity(scene.depths[i])
        elif mode == "flow" and scene.flows is not None:
            transforms[i] = Flow(FlowField(scene.flows[i]))
        elif flow_fallback:
            transforms[i] = fallback(i)
        else:
            raise DataError(
                f"{scene.scene_dir}: no data for warp mode {mode!r} "
                f"(rerun with --flow-fallback to estimate flow)"
            )
    return transforms


def cmd_curate(args) -> int:
    cfg = load_config(args.config)
    base_seed = args.seed if args.seed is not None else cfg.train.seed
    mode = args.mode or cfg.warp.mode
    try:
        get_degrader(args.degrader)  # validate the name before loading data
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    scene_dirs = read_scene_manifest(args.scenes)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for scene_dir in scene_dirs:
        scene = load_scene(scene_dir)
        degrader = get_degrader(
            args.degrader, derive_seed(base_seed, f"curation:{scene.name}")
        )
        transforms = _scene_transforms(scene, mode, args.flow_fallback)
        samples = curate_pairs(
            scene.frames, transforms, degrader, cfg.warp.temperature, scene=scene.name
        )
        for s in samples:
            stem = f"{s.index:05d}"
            paths = {
                "deg": f"{scene.name}/{stem}_deg.png",
                "warped": f"{scene.name}/{stem}_warped.png",
                "gt": f"{scene.name}/{stem}_gt.png",
                "valid": f"{scene.name}/{stem}_valid.png",
            }
            write_png(out_dir / paths["deg"], s.i_deg)
            write_png(out_dir / paths["warped"], s.i_warped)
            write_png(out_dir / paths["gt"], s.i_gt)
            write_mask_png(out_dir / paths["valid"], s.i_warped.valid_mask())
            rows.append((scene.name, s.index, paths))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(out_dir / "index.tsv", "w") as f:
        f.write("scene\tindex\tdeg\twarped\tgt\tvalid\n")
        for scene_name, idx, paths in rows:
            f.write(f"{scene_name}\t{idx}\t{paths['deg']}\t{paths['warped']}\t"
                    f"{paths['gt']}\t{paths['valid']}\n")
    print(f"curated {len(rows)} samples from {len(scene_dirs)} scenes into {out_dir}")
    return 0


def load_curated(data_dir) -> list:
    """Read back a curated dataset from its index.tsv."""
    data_dir = Path(data_dir)
    index = data_dir / "index.tsv"
    if not index.is_file():
        raise DataError(f"{data_dir}: missing index.tsv (not a curated dataset?)")
    samples = []
    lines = index.read_text().splitlines()
    if not lines or lines[0].split("\t") != ["scene", "index", "deg", "warped", "gt", "valid"]:
        raise DataError(f"{index}: unrecognized header")
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 6:
            raise DataError(f"{index}: malformed row {ln!r}")
        scene_name, idx, deg, warped, gt, valid = parts
        warped_img = read_png(data_dir / warped)
        samples.append(
            TrainingSample(
                i_deg=read_png(data_dir / deg),
                i_warped=Image(warped_img.data, read_mask_png(data_dir / valid)),
                i_gt=read_png(data_dir / gt),
                scene=scene_name,
                index=int(idx),
            )
        )
    if not samples:
        raise DataError(f"{data_dir}: dataset index is empty")
    return samples


# --- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    base_seed = args.seed if args.seed is not None else cfg.train.seed
    samples = load_curated(args.data)
    resume_state = None
    if args.resume:
        model, resume_state = load_checkpoint(args.resume)
        if resume_state is None:
            raise DataError(f"{args.resume}: checkpoint has no training state to resume")
    else:
        model = FixerModel(fixer_config(cfg, derive_seed(base_seed, "init")))
    optim_cfg = OptimConfig(
        lr=cfg.train.lr,
        batch=cfg.train.batch,
        steps=args.steps if args.steps is not None else cfg.train.steps,
        patch_h=cfg.train.patch_h,
        patch_w=cfg.train.patch_w,
        seed=derive_seed(base_seed, "cropping"),
    )
    loss_cfg = LossConfig(lambda_lpips=cfg.train.lambda_lpips)
    out_path = Path(args.out)
    result = train(
        model, samples, loss_cfg, optim_cfg,
        use_ldi=not args.no_ldi,
        freeze_encoder=args.freeze_encoder,
        resume=resume_state,
        diagnostic_path=out_path.with_suffix(".diverged.ufix"),
    )
    save_checkpoint(out_path, model, result.state)
    csv_path = args.loss_csv or str(out_path) + ".loss.csv"
    write_loss_csv(csv_path, result.history)
    last = result.history[-1].loss if result.history else float("nan")
    print(f"trained {len(result.history)} steps; final loss {last:.6g}; "
          f"checkpoint {out_path}")
    return 0


# --- fix ----------------------------------------------------------------------

def _load_transform_file(path: Path):
    if path.suffix == ".flo":
        return Flow(FlowField(read_flo(path)))
    if path.suffix == ".pfm":
        return Disparity(read_pfm(path))
    raise ConfigError(f"{path}: transform must be .flo, .pfm, or a directory bundle")


def _load_geometry_bundle(path: Path):
    depth_path = path / "depth.pfm"
    pose_path = path / "pose.txt"
    if not depth_path.is_file() or not pose_path.is_file():
        return None
    intr, poses = read_pose_file(pose_path)
    if len(poses) != 2:
        raise DataError(f"{pose_path}: geometry bundle needs exactly 2 poses "
                        f"(reference, degraded), got {len(poses)}")
    return DepthPose(read_pfm(depth_path), CameraIntrinsics(*intr),
                     relative_pose(poses[0], poses[1]))


def _fix_pairs(args):
    """Yield (name, degraded path, reference path, transform path or None)."""
    deg = Path(args.degraded)
    ref = Path(args.reference)
    trans = Path(args.transform) if args.transform else None
    if deg.is_dir():
        deg_files = sorted(deg.glob("*.png"))
        if not deg_files:
            raise DataError(f"{deg}: no .png files")
        flo_dir = trans if trans is not None and trans.is_dir() and not (
            trans / "depth.pfm").is_file() else None
        for d in deg_files:
            if ref.is_dir():
                r = ref / d.name
                if not r.is_file():
                    raise DataError(f"{ref}: no reference for {d.name}")
            else:
                r = ref
            t = (flo_dir / (d.stem + ".flo")) if flo_dir is not None else trans
            if flo_dir is not None and not t.is_file():
                raise DataError(f"{flo_dir}: no flow for {d.name}")
            yield d.name, d, r, t
    else:
        if not deg.is_file():
            raise DataError(f"{deg}: degraded input not found")
        if not ref.is_file():
            raise DataError(f"{args.reference}: reference not found")
        yield deg.name, deg, ref, trans


def cmd_fix(args) -> int:
    cfg = load_config(args.config)
    model, _ = load_checkpoint(args.checkpoint)
    deg_is_dir = Path(args.degraded).is_dir()
    out_path = Path(args.out)
    if args.transform is None and not args.flow_fallback:
        raise ConfigError("a --transform is required unless --flow-fallback is set")
    count = 0
    for name, deg_path, ref_path, trans_path in _fix_pairs(args):
        degraded = read_png(deg_path)
        reference = read_png(ref_path)
        if trans_path is None:
            transform = Flow(estimate_flow(reference, degraded))
        elif trans_path.is_dir():
            bundle = _load_geometry_bundle(trans_path)
            if bundle is None:
                raise DataError(
                    f"{trans_path}: directory bundle needs depth.pfm and pose.txt"
                )
            transform = bundle
        else:
            transform = _load_transform_file(trans_path)
        warped = pre_align(reference, transform, degraded=degraded,
                           temperature=cfg.warp.temperature)
        result = fix(degraded, warped, model, use_ldi=not args.no_ldi)
        target = out_path / name if deg_is_dir else out_path
        write_png(target, result)
        count += 1
    print(f"fixed {count} view(s) -> {out_path}")
    return 0


# --- analyze --------------------------------------------------------------------

def _parse_labelled(entries, flag: str):
    out = []
    for entry in entries:
        if "=" not in entry:
            raise ConfigError(f"{flag} expects LABEL=DIR, got {entry!r}")
        label, d = entry.split("=", 1)
        if not label or not d:
            raise ConfigError(f"{flag} expects LABEL=DIR, got {entry!r}")
        out.append((label, Path(d)))
    return out


def _sample_names(directory: Path, limit: int, seed: int):
    names = sorted(p.name for p in directory.glob("*.png"))
    if len(names) <= limit:
        return names
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(names), size=limit, replace=False)
    return [names[i] for i in sorted(picked)]


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    method = args.method or cfg.analyze.method
    samples = args.samples if args.samples is not None else cfg.analyze.samples
    perplexity = args.perplexity if args.perplexity is not None else cfg.analyze.perplexity
    seed = args.seed if args.seed is not None else cfg.analyze.seed
    if samples < 1:
        raise ConfigError(f"--samples must be >= 1, got {samples}")
    variants = _parse_labelled(args.variant, "--variant")
    fixed = _parse_labelled(args.fixed, "--fixed")
    if not variants:
        raise ConfigError("need at least one --variant LABEL=DIR")
    gt_dir = Path(args.gt)
    if not gt_dir.is_dir():
        raise DataError(f"{gt_dir}: ground-truth directory not found")

    extractor = ToyPatchExtractor(args.extractor_seed)
    embeddings = []
    meta = []  # (label, phase, name)
    for phase, groups in (("deg", variants), ("fixed", fixed)):
        for label, directory in groups:
            if not directory.is_dir():
                raise DataError(f"{directory}: variant directory not found")
            names = _sample_names(directory, samples, derive_seed(seed, f"analysis:{label}"))
            if not names:
                print(f"warning: {directory} holds no images; skipping {label}/{phase}",
                      file=sys.stderr)
                continue
            for name in names:
                gt_path = gt_dir / name
                if not gt_path.is_file():
                    raise DataError(f"{gt_dir}: no clean counterpart for {name}")
                embeddings.append(
                    image_degradation_embedding(
                        read_png(directory / name), read_png(gt_path), extractor
                    )
                )
                meta.append((label, phase, name))
    if not embeddings:
        raise DataError("no images to analyze")

    points = project_2d(embeddings, method=method, seed=seed, perplexity=perplexity)
    cluster_labels = [f"{label}|{phase}" for label, phase, _ in meta]
    clusters = cluster_summaries(points, cluster_labels)

    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    points_csv = Path(str(prefix) + "_points.csv")
    with open(points_csv, "w") as f:
        f.write("label,phase,name,x,y\n")
        for (label, phase, name), (x, y) in zip(meta, points):
            f.write(f"{label},{phase},{name},{x:.8g},{y:.8g}\n")
    clusters_csv = Path(str(prefix) + "_clusters.csv")
    with open(clusters_csv, "w") as f:
        f.write("label,phase,x,y,kept,dropped\n")
        for c in clusters:
            label, phase = c.label.split("|", 1)
            f.write(f"{label},{phase},{c.mean[0]:.8g},{c.mean[1]:.8g},"
                    f"{c.count_kept},{c.count_dropped}\n")

    _scatter_plot(str(prefix) + "_scatter.png", points, meta, clusters)
    print(f"analyzed {len(embeddings)} images -> {points_csv}, {clusters_csv}")
    return 0


def _scatter_plot(path, points, meta, clusters):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = sorted({label for label, _, _ in meta})
    cmap = plt.get_cmap("tab10")
    colors = {label: cmap(i % 10) for i, label in enumerate(labels)}
    fig, ax = plt.subplots(figsize=(7, 6))
    for label in labels:
        for phase, marker, alpha in (("deg", ".", 0.45), ("fixed", "+", 0.45)):
            pts = np.array([
                p for p, (l, ph, _) in zip(points, meta) if l == label and ph == phase
            ])
            if len(pts):
                ax.scatter(pts[:, 0], pts[:, 1], s=12, marker=marker, alpha=alpha,
                           color=colors[label],
                           label=f"{label} ({phase})")
    means = {c.label: c.mean for c in clusters}
    for label in labels:
        pre = means.get(f"{label}|deg")
        post = means.get(f"{label}|fixed")
        if pre is not None:
            ax.scatter([pre[0]], [pre[1]], marker="x", s=120, color=colors[label],
                       linewidths=2.5)
        if post is not None:
            ax.scatter([post[0]], [post[1]], marker="o", s=120, facecolors="none",
                       edgecolors=colors[label], linewidths=2.5)
        if pre is not None and post is not None:
            ax.annotate("", xy=post, xytext=pre,
                        arrowprops=dict(arrowstyle="->", color=colors[label], lw=1.8))
    ax.legend(fontsize=8, loc="best")
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    plugins = _parse_labelled(args.plugin, "--plugin")
    summary = evaluate_pairs(args.pred, args.gt, [(n, str(p)) for n, p in plugins])
    plug_names = [n for n, _ in plugins if n not in summary.unavailable]
    for pair in summary.pairs:
        extra = "".join(f" {n}={pair.external[n]:.6f}" for n in plug_names)
        print(f"{pair.name} psnr={pair.psnr_db:.6f} ssim={pair.ssim:.6f}{extra}")
    extra = "".join(f" {n}={summary.external_means[n]:.6f}" for n in plug_names)
    print(f"mean psnr={summary.mean_psnr_db:.6f} ssim={summary.mean_ssim:.6f}{extra}")
    for name in summary.unavailable:
        print(f"warning: metric plugin {name!r} unavailable; omitted", file=sys.stderr)
    if args.csv:
        csv_path = Path(args.csv)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w") as f:
            f.write("name,psnr,ssim" + "".join(f",{n}" for n in plug_names) + "\n")
            for pair in summary.pairs:
                extra = "".join(f",{pair.external[n]:.8g}" for n in plug_names)
                f.write(f"{pair.name},{pair.psnr_db:.8g},{pair.ssim:.8g}{extra}\n")
    return 0


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.handler(args)
    except _ParserExit as exc:
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, FlowEstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
