"""Command-line surface tying the pipeline together.

Subcommands: synth-gen, fit-views, train, reconstruct, evaluate,
ablate-fusion, gradcheck. Every subcommand is deterministic given --seed;
--threads 1 additionally pins the BLAS pool for bit-reproducibility. Config
files are flat key=value text whose keys mirror the flags one-to-one; flags
override file values.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap(argv):
    """Honor --threads before numpy binds its thread pools."""
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
        else:
            continue
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, n)
        break


def read_config(path):
    """Flat key=value config; '#' starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def _merge_config(args, parser):
    """File values fill in flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return args
    file_values = read_config(args.config)
    defaults = {a.dest: a.default for a in parser._actions}
    for key, raw in file_values.items():
        dest = key.replace("-", "_")
        if dest not in defaults:
            raise SystemExit(f"unknown config key: {key}")
        if getattr(args, dest) == defaults[dest]:
            default = defaults[dest]
            if isinstance(default, bool):
                setattr(args, dest, raw.lower() in ("1", "true", "yes"))
            elif isinstance(default, int):
                setattr(args, dest, int(raw))
            elif isinstance(default, float):
                setattr(args, dest, float(raw))
            else:
                setattr(args, dest, raw)
    return args


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdfrecon",
        description="Clothed-shape reconstruction from uncalibrated orthographic views",
    )
    parser.add_argument("--threads", type=int, default=0,
                        help="cap worker threads (1 = bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--cloth-amp", type=float, default=0.012)
    p.add_argument("--seed", type=int, default=100)
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--jitter-deg", type=float, default=0.0)
    p.add_argument("--jitter-frac", type=float, default=0.0)
    p.add_argument("--model-seed", type=int, default=0)

    p = sub.add_parser("fit-views", help="self-calibrate a scene's views")
    p.add_argument("--scene", required=True)
    p.add_argument("--jitter-init", action="store_true",
                   help="perturb the stored rigs before fitting (synthetic mode)")
    p.add_argument("--jitter-deg", type=float, default=5.0)
    p.add_argument("--jitter-frac", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-outer", type=int, default=50)
    p.add_argument("--out", default=None, help="fit report path (default: scene dir)")

    p = sub.add_parser("train", help="train the refinement and occupancy heads")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="checkpoint path (.sesw)")
    p.add_argument("--variant", choices=("full", "no_sesdf", "no_de"), default="full")
    p.add_argument("--views", type=int, default=0, help="use first K views (0 = all)")
    p.add_argument("--fusion", choices=("occlusion", "average", "normal", "visibility"),
                   default="occlusion")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--lr-every", type=int, default=4)
    p.add_argument("--lambda-s", type=float, default=1.0)
    p.add_argument("--lambda-o", type=float, default=1.0)
    p.add_argument("--lambda-r", type=float, default=0.1)
    p.add_argument("--lambda-d", type=float, default=1.0)
    p.add_argument("--lambda-n", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--surface-samples", type=int, default=1024)
    p.add_argument("--occ-samples", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-csv", default=None)

    p = sub.add_parser("reconstruct", help="reconstruct a mesh from a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--views", type=int, default=0, help="use first K views (0 = all)")
    p.add_argument("--fusion", choices=("occlusion", "average", "normal", "visibility"),
                   default="occlusion")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--extract-from", choices=("occupancy", "sdf"), default="occupancy")
    p.add_argument("--rigs", choices=("gt", "fitted"), default="gt",
                   help="use stored ground-truth rigs or fit-views output")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="Chamfer/P2S between meshes")
    p.add_argument("--pred", required=True,
                   help="mesh path; with --angles, a pattern containing {angle}")
    p.add_argument("--gt", required=True)
    p.add_argument("--angles", default=None, help="comma list, e.g. 0,45,90")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = sub.add_parser("ablate-fusion", help="per-strategy reconstruction metrics")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--views", type=int, default=0)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="autodiff vs finite-difference oracle suite")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    return parser


# ---------------------------------------------------------------------------
# Subcommand implementations (heavy imports stay inside the handlers)
# ---------------------------------------------------------------------------

def cmd_synth_gen(args):
    from .body import make_procedural_template
    from .synth import export_scene, generate_scene

    model = make_procedural_template(seed=args.model_seed)
    out = args.out
    for i in range(args.scenes):
        scene = generate_scene(
            model, seed=args.seed + i, n_views=args.views, cloth_amp=args.cloth_amp,
            jitter_deg=args.jitter_deg, jitter_frac=args.jitter_frac,
            image_size=args.image_size,
        )
        export_scene(scene, os.path.join(out, f"scene_{i:03d}"))
        print(f"scene_{i:03d}: {scene.gt_mesh.n_vertices} vertices, "
              f"{scene.n_views} views", flush=True)
    return 0


def cmd_fit_views(args):
    import json

    import numpy as np

    from .calib import FitConfig, refine_joint
    from .rotations import axis_angle_to_matrix
    from .synth import load_scene

    scene = load_scene(args.scene)
    rigs = [r.copy() for r in scene.rigs]
    if args.jitter_init:
        rng = np.random.default_rng(args.seed)
        diag = scene.gt_mesh.bbox_diagonal()
        for rig in rigs:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rig.rotation = axis_angle_to_matrix(axis * np.deg2rad(args.jitter_deg)) @ rig.rotation
            t = rng.normal(size=3)
            t[2] = 0.0
            t *= args.jitter_frac * diag / max(np.linalg.norm(t), 1e-12)
            rig.translation = rig.translation + t
    params, fitted, report = refine_joint(
        scene.model, scene.params.copy(), rigs, scene.observations,
        FitConfig(max_outer=args.max_outer),
    )
    out_dir = args.out or args.scene
    with open(os.path.join(out_dir, "fit_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out_dir, "fitted_rigs.json"), "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in fitted], fh, indent=1)
    print(report.to_json())
    return 0


def _scene_dirs(data_dir):
    entries = sorted(
        os.path.join(data_dir, d) for d in os.listdir(data_dir)
        if os.path.isdir(os.path.join(data_dir, d)) and d.startswith("scene_")
    )
    if not entries:
        raise SystemExit(f"no scene_* directories under {data_dir}")
    return entries


def cmd_train(args):
    import numpy as np

    from .geometry import build_bvh
    from .nn import ReconNets, TrainConfig, curve_to_csv, save_checkpoint, train
    from .recon import prepare_scene_batches
    from .sampling import default_bounds, default_sigma, sample_occupancy, sample_surface
    from .synth import load_scene, scene_viewset

    config = TrainConfig(
        epochs=args.epochs, lr=args.lr, lr_decay=args.lr_decay, lr_every=args.lr_every,
        lambda_s=args.lambda_s, lambda_o=args.lambda_o, lambda_r=args.lambda_r,
        lambda_d=args.lambda_d, lambda_n=args.lambda_n,
        batch_size=args.batch_size, seed=args.seed,
    )
    nets = ReconNets.create(variant=args.variant, seed=args.seed)
    batches = []
    for i, sdir in enumerate(_scene_dirs(args.data)):
        scene = load_scene(sdir)
        views = scene_viewset(scene)
        if args.views:
            views.rigs = views.rigs[: args.views]
            views.images = views.images[: args.views]
        rng = np.random.default_rng(config.seed + 7919 * i)
        gt_bvh = build_bvh(scene.gt_mesh)
        surf = sample_surface(scene.gt_mesh, args.surface_samples, rng)
        occ = sample_occupancy(scene.gt_mesh, gt_bvh, args.occ_samples,
                               sigma=default_sigma(scene.gt_mesh),
                               bounds=default_bounds(scene.gt_mesh), rng=rng)
        batches.append(prepare_scene_batches(views, surf, occ, fusion_mode=args.fusion,
                                             levels=nets.levels))
        print(f"prepared {sdir}", flush=True)
    curve = train(nets, batches, config)
    save_checkpoint(args.out, nets)
    csv = curve_to_csv(curve)
    csv_path = args.loss_csv or (os.path.splitext(args.out)[0] + "_loss.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(csv)
    print(csv, end="")
    print(f"checkpoint: {args.out}")
    return 0


def _load_views(args, scene):
    import json

    from .calib import ViewRig
    from .synth import scene_viewset

    rigs = None
    if getattr(args, "rigs", "gt") == "fitted":
        path = os.path.join(args.scene, "fitted_rigs.json")
        with open(path, "r", encoding="utf-8") as fh:
            rigs = [ViewRig.from_dict(d) for d in json.load(fh)]
    views = scene_viewset(scene, rigs=rigs)
    if args.views:
        views.rigs = views.rigs[: args.views]
        views.images = views.images[: args.views]
    return views


def cmd_reconstruct(args):
    from .geometry import write_obj
    from .nn import load_checkpoint
    from .recon import reconstruct
    from .synth import load_scene

    scene = load_scene(args.scene)
    nets = load_checkpoint(args.ckpt)
    views = _load_views(args, scene)
    mesh, report = reconstruct(views, nets, fusion_mode=args.fusion,
                               resolution=args.res, field=args.extract_from)
    write_obj(mesh, args.out)
    report_path = os.path.splitext(args.out)[0] + ".report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(report.to_json())
    return 0


def cmd_evaluate(args):
    from .geometry import read_obj
    from .metrics import chamfer, p2s, protocol_csv

    gt = read_obj(args.gt)
    if args.angles:
        angles = [float(a) for a in args.angles.split(",")]
        rows = []
        for angle in angles:
            pred = read_obj(args.pred.format(angle=f"{angle:g}"))
            rows.append((f"{angle:g}", chamfer(pred, gt, args.samples, args.seed),
                         p2s(pred, gt, args.samples, args.seed)))
        import numpy as np

        rows.append(("mean", float(np.mean([r[1] for r in rows])),
                     float(np.mean([r[2] for r in rows]))))
    else:
        pred = read_obj(args.pred)
        rows = [("0", chamfer(pred, gt, args.samples, args.seed),
                 p2s(pred, gt, args.samples, args.seed))]
    csv = protocol_csv(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv)
    print(csv, end="")
    return 0


def cmd_ablate_fusion(args):
    from .fusion import FUSION_MODES
    from .metrics import chamfer, p2s
    from .nn import load_checkpoint
    from .recon import reconstruct
    from .synth import load_scene

    scene = load_scene(args.scene)
    nets = load_checkpoint(args.ckpt)
    views = _load_views(args, scene)
    lines = ["fusion,chamfer,p2s"]
    for mode in FUSION_MODES:
        mesh, _ = reconstruct(views, nets, fusion_mode=mode, resolution=args.res)
        ch = chamfer(mesh, scene.gt_mesh, args.samples, args.seed)
        ps = p2s(mesh, scene.gt_mesh, args.samples, args.seed)
        lines.append(f"{mode},{ch:.9g},{ps:.9g}")
        print(lines[-1], flush=True)
    csv = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv)
    return 0


def cmd_gradcheck(args):
    import numpy as np

    from .nn import Mlp, ReconNets, gradient_check

    rng = np.random.default_rng(args.seed)
    checks = []
    nets = ReconNets.create(seed=args.seed)
    checks.append(("surface-refinement head", nets.f_sd))
    checks.append(("occupancy head", nets.f_o))
    checks.append(("small probe [13,32,1]", Mlp([13, 32, 1], rng, skip_at=None)))
    worst_overall = 0.0
    failed = False
    for name, mlp in checks:
        x = rng.normal(size=(2, mlp.n_in))
        err, worst = gradient_check(mlp, x, eps=args.eps, max_per_tensor=120, seed=args.seed)
        status = "ok" if err < args.tol else "FAIL"
        print(f"{name}: max rel err {err:.3e} at {worst} [{status}]")
        worst_overall = max(worst_overall, err)
        failed = failed or err >= args.tol
    print(f"overall max rel err {worst_overall:.3e} (tolerance {args.tol:g})")
    return 1 if failed else 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train":
        train_parser = parser._subparsers._group_actions[0].choices["train"]
        args = _merge_config(args, train_parser)
    handlers = {
        "synth-gen": cmd_synth_gen,
        "fit-views": cmd_fit_views,
        "train": cmd_train,
        "reconstruct": cmd_reconstruct,
        "evaluate": cmd_evaluate,
        "ablate-fusion": cmd_ablate_fusion,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
