"""Command-line entry points: synth, train, render, decompose, eval, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import gradcheck as gc
from .metrics import EvalReport, mask_iou, psnr, ssim
from .render import decompose_view, render_novel_views, write_decomposition, write_views
from .scene import Camera, ValidationError, load_cameras, load_checkpoint, load_dataset, load_points
from .synth import SynthSpec, synth_scene
from .trainer import TrainConfig, binarize_mask, train, train_baseline_3dgs

log = logging.getLogger("hybridgs")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
GRADCHECK_TOL = 1e-4


def _load_ckpt(path):
    g3d, layers, header = load_checkpoint(path)
    cams = [Camera.from_json(d) for d in header.get("train_cameras", [])]
    cfg = TrainConfig.from_dict(header["config"]) if "config" in header else TrainConfig()
    return g3d, layers, header, cams, cfg


def _test_frames(data_dir):
    root = Path(data_dir) / "test"
    return load_dataset(root)


def cmd_synth(args):
    spec = SynthSpec.from_json(args.spec) if args.spec else SynthSpec()
    out = synth_scene(spec, args.out)
    print(f"wrote synthetic dataset to {out}")


def cmd_train(args):
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    frames = load_dataset(args.data)
    points, _ = load_points(Path(args.data) / "points3d.json")
    tele = open(args.telemetry, "w") if args.telemetry else None

    def emit(rec):
        if tele is not None:
            tele.write(json.dumps(rec) + "\n")

    meta = {"data_dir": str(Path(args.data).resolve())}
    t0 = time.perf_counter()
    try:
        fn = train_baseline_3dgs if args.baseline_3dgs else train
        state = fn(frames, cfg, points, checkpoint_path=args.out, callback=emit, meta=meta)
    finally:
        if tele is not None:
            tele.close()
    last = state.telemetry[-1]["loss"] if state.telemetry else float("nan")
    print(f"trained {len(state.g3d)} 3D Gaussians in {time.perf_counter() - t0:.1f}s, final loss {last:.5f}; "
          f"checkpoint {args.out}")


def cmd_render(args):
    g3d, _, header, train_cams, cfg = _load_ckpt(args.ckpt)
    if args.cameras == "train":
        cams = train_cams
    else:
        data = args.data or header.get("data_dir")
        if data is None:
            raise ValidationError("checkpoint has no data_dir; pass --data")
        cams = [cam for _, cam, _ in load_cameras(Path(data) / "test" / "cameras.json")]
    images = render_novel_views(g3d, cams, cfg.background)
    write_views(images, args.out, prefix=args.cameras)
    print(f"rendered {len(images)} {args.cameras} views to {args.out}")


def cmd_decompose(args):
    g3d, layers, _, cams, cfg = _load_ckpt(args.ckpt)
    try:
        parts = decompose_view(g3d, layers, cams, args.frame, cfg.epsilon_binarize, cfg.background)
    except IndexError as exc:
        raise ValidationError(str(exc)) from exc
    paths = write_decomposition(parts, args.out, args.frame)
    print("wrote " + ", ".join(str(p) for p in paths.values()))


def evaluate(g3d, layers, cfg: TrainConfig, data_dir) -> EvalReport:
    report = EvalReport()
    t0 = time.perf_counter()
    test = _test_frames(data_dir)
    for fr, img in zip(test, render_novel_views(g3d, [f.camera for f in test], cfg.background)):
        report.test_psnr.append(psnr(img, fr.image))
        report.test_ssim.append(ssim(img, fr.image))
    t1 = time.perf_counter()
    train_frames = load_dataset(data_dir)
    for k, fr in enumerate(train_frames):
        if fr.gt_mask is None:
            continue
        parts = decompose_view(g3d, layers, [f.camera for f in train_frames], k, cfg.epsilon_binarize,
                               cfg.background)
        report.train_mask_iou.append(mask_iou(binarize_mask(parts["mask"], cfg.epsilon_binarize), fr.gt_mask))
    report.runtimes = {"test_render_s": t1 - t0, "train_decompose_s": time.perf_counter() - t1}
    return report


def cmd_eval(args):
    g3d, layers, _, _, cfg = _load_ckpt(args.ckpt)
    report = evaluate(g3d, layers, cfg, args.data)
    report.save(args.report)
    print(f"test PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}, "
          f"train mask IoU {report.mean_iou:.3f}; report {args.report}")


def cmd_gradcheck(args):
    modules = [args.module] if args.module else list(gc.MODULES)
    ok = True
    for m in modules:
        t0 = time.perf_counter()
        results = gc.run(m, args.instances, args.seed)
        worst = max(r.max_error for r in results)
        passed = worst < GRADCHECK_TOL
        ok &= passed
        print(f"{m}: {len(results)} instances, max relative error {worst:.3e} "
              f"({'PASS' if passed else 'FAIL'}, {time.perf_counter() - t0:.1f}s)")
    if not ok:
        raise ValidationError("gradient check failed")


def build_parser():
    p = argparse.ArgumentParser(prog="hybridgs", description="Hybrid 2D/3D Gaussian scene decomposition")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset with planted transients")
    s.add_argument("--spec", help="SynthSpec JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="run the three-stage pipeline (or the 3DGS baseline)")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="TrainConfig JSON (defaults if omitted)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--baseline-3dgs", action="store_true", help="vanilla single-view 3DGS")
    s.add_argument("--telemetry", help="write per-step JSON lines here")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("render", help="render the static branch from train or test cameras")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cameras", choices=["test", "train"], default="test")
    s.add_argument("--data", help="dataset dir (defaults to the one recorded in the checkpoint)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("decompose", help="static / transient / mask images of one training view")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_decompose)

    s = sub.add_parser("eval", help="test-view PSNR/SSIM and training-view mask IoU")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", choices=gc.MODULES)
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ValidationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
