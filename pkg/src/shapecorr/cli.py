"""Command-line interface: gen-data, train, match, eval.

Exit codes: 0 success, 1 runtime error, 2 usage error. Settings resolve as
flags > config file (TOML) > defaults, and the resolved configuration is
echoed next to the outputs so a run can be reproduced from it verbatim.
"""

from __future__ import annotations

import argparse
import os
import sys


def _set_thread_cap(argv: list[str]) -> None:
    # must happen before numpy is imported; best effort otherwise
    if "--threads" in argv:
        n = argv[argv.index("--threads") + 1]
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _echo_config(sections: dict[str, dict], path: str) -> None:
    with open(path, "w") as fh:
        for name, table in sections.items():
            fh.write(f"[{name}]\n")
            for k, v in table.items():
                if v is not None:
                    fh.write(f"{k} = {_toml_value(v)}\n")
            fh.write("\n")


def _resolve(flag_value, config: dict, section: str, key: str, default):
    if flag_value is not None:
        return flag_value
    if section in config and key in config[section]:
        return config[section][key]
    return default


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapecorr")
    parser.add_argument("--threads", type=int, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a posed-shape dataset")
    g.add_argument("--kind", choices=["biped", "quadruped", "tube"])
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--resolution", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the encoder-decoder")
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--mode", choices=["supervised", "unsupervised"])
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs1", type=int)
    t.add_argument("--epochs2", type=int)
    t.add_argument("--lr1", type=float)
    t.add_argument("--lr2", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--points-per-shape", type=int)
    t.add_argument("--lambda-lap", type=float)
    t.add_argument("--lambda-edges", type=float)
    t.add_argument("--jitter", type=float)
    t.add_argument("--init-seed", type=int)

    m = sub.add_parser("match", help="correspondences between two shapes")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--template", required=True, help="template mesh file")
    m.add_argument("--ref", required=True)
    m.add_argument("--target", required=True)
    m.add_argument("--out", required=True, help="correspondence CSV path")
    m.add_argument("--config")
    m.add_argument("--orientations", type=int)
    m.add_argument("--refine-iters", type=int)
    m.add_argument("--refine-lr", type=float)
    m.add_argument("--refine-subset", type=int,
                   help="refine on this many template points (0: all)")
    m.add_argument("--chamfer-mode", choices=["symmetric", "a_to_b", "b_to_a"])
    m.add_argument("--template-res", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--color-out", help="prefix for vertex-colored PLY output")

    e = sub.add_parser("eval", help="score a correspondence CSV")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", nargs=2, required=True, metavar=("REF", "TARGET"))
    e.add_argument("--out", help="per-pair error CSV")
    return parser


def cmd_gen_data(args) -> int:
    from . import datagen

    config = _load_config(args.config)
    kind = _resolve(args.kind, config, "datagen", "kind", "biped")
    count = _resolve(args.count, config, "datagen", "count", 100)
    seed = _resolve(args.seed, config, "datagen", "seed", 0)
    resolution = _resolve(args.resolution, config, "datagen", "resolution", 0)

    template = datagen.make_template(kind, resolution)
    datagen.generate_dataset(template, count, seed, args.out)
    _echo_config(
        {"datagen": {"kind": kind, "count": count, "seed": seed, "resolution": resolution}},
        os.path.join(args.out, "config_echo.toml"),
    )
    print(f"wrote {count} shapes to {args.out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    from . import datagen, network, training
    from .losses import LossWeights

    config = _load_config(args.config)

    def r(flag, key, default):
        return _resolve(flag, config, "training", key, default)

    tc = training.TrainingConfig(
        mode=r(args.mode, "mode", "supervised"),
        epochs_phase1=r(args.epochs1, "epochs_phase1", 25),
        lr_phase1=r(args.lr1, "lr_phase1", 1e-3),
        epochs_phase2=r(args.epochs2, "epochs_phase2", 2),
        lr_phase2=r(args.lr2, "lr_phase2", 1e-4),
        batch_size=r(args.batch_size, "batch_size", 32),
        points_per_shape=r(args.points_per_shape, "points_per_shape", 6890),
        weights=LossWeights(
            lambda_lap=_resolve(args.lambda_lap, config, "weights", "lambda_lap", 5e-3),
            lambda_edges=_resolve(args.lambda_edges, config, "weights", "lambda_edges", 5e-3),
        ),
        translation_jitter=r(args.jitter, "translation_jitter", 0.03),
        seed=r(args.seed, "seed", 0),
    )
    init_seed = _resolve(args.init_seed, config, "training", "init_seed", 0)

    template, shapes, _ = datagen.load_manifest(args.data)
    items = training.items_from_meshes(shapes, supervised=tc.mode == "supervised")
    init = network.init_params(init_seed)
    params, log = training.train(template, items, tc, init)

    os.makedirs(args.out, exist_ok=True)
    network.save_checkpoint(params, os.path.join(args.out, "checkpoint.bin"))
    training.write_loss_log(log, os.path.join(args.out, "loss.csv"))
    _echo_config(
        {
            "training": {
                "mode": tc.mode,
                "epochs_phase1": tc.epochs_phase1,
                "lr_phase1": tc.lr_phase1,
                "epochs_phase2": tc.epochs_phase2,
                "lr_phase2": tc.lr_phase2,
                "batch_size": tc.batch_size,
                "points_per_shape": tc.points_per_shape,
                "translation_jitter": tc.translation_jitter,
                "seed": tc.seed,
                "init_seed": init_seed,
            },
            "weights": {
                "lambda_lap": tc.weights.lambda_lap,
                "lambda_edges": tc.weights.lambda_edges,
            },
        },
        os.path.join(args.out, "config_echo.toml"),
    )
    print(f"final mean loss {log[-1].mean_loss:.6g}", file=sys.stderr)
    return 0


def _load_shape_points(path):
    import numpy as np

    from .geometry import load_mesh

    mesh = load_mesh(path)
    return mesh, np.asarray(mesh.vertices)


def cmd_match(args) -> int:
    import numpy as np

    from . import inference, network
    from .geometry import Mesh, PointCloud, load_mesh, normalize_shape, rotate_y_points, save_mesh

    config = _load_config(args.config)

    def r(flag, key, default):
        return _resolve(flag, config, "match", key, default)

    orientations = r(args.orientations, "orientations", 50)
    refine_iters = r(args.refine_iters, "refine_iters", 3000)
    refine_lr = r(args.refine_lr, "refine_lr", 5e-4)
    refine_subset = r(args.refine_subset, "refine_subset", 0)
    chamfer_mode = r(args.chamfer_mode, "chamfer_mode", "symmetric")
    template_res = r(args.template_res, "template_res", None)
    seed = r(args.seed, "seed", 0)

    params = network.load_checkpoint(args.checkpoint)
    template = load_mesh(args.template)
    ref_mesh, ref_pts = _load_shape_points(args.ref)
    tgt_mesh, tgt_pts = _load_shape_points(args.target)

    rc = inference.RefinementConfig(
        iterations=refine_iters,
        lr=refine_lr,
        chamfer_mode=chamfer_mode,
        template_sample_count=refine_subset,
    )

    def fit(points):
        cloud, _ = normalize_shape(PointCloud(points))
        angle, code, _ = inference.best_orientation(
            params, template.vertices, cloud, n_orientations=orientations
        )
        rotated = rotate_y_points(cloud.points, angle)
        code, _ = inference.refine_latent(params, template.vertices, rotated, code, rc)
        return rotated, code

    ref_rot, code_r = fit(ref_pts)
    tgt_rot, code_t = fit(tgt_pts)
    matches = inference.extract_correspondences(
        params, template, ref_rot, code_r, tgt_rot, code_t, template_res, seed=seed
    )
    # report in the original (file) coordinate frames via the match indices
    for pair in matches.pairs:
        pair.reference = ref_pts[pair.reference_index]
        pair.target = tgt_pts[pair.target_index]
    matches.write_csv(args.out)
    _echo_config(
        {
            "match": {
                "orientations": orientations,
                "refine_iters": refine_iters,
                "refine_lr": refine_lr,
                "refine_subset": refine_subset,
                "chamfer_mode": chamfer_mode,
                "template_res": template_res,
                "seed": seed,
            }
        },
        os.path.splitext(args.out)[0] + "_config_echo.toml",
    )

    if args.color_out:
        lo = template.vertices.min(axis=0)
        span = template.vertices.max(axis=0) - lo
        ref_colors = np.stack(
            [(p.template_point - lo) / span for p in matches.pairs]
        )
        tgt_colors = np.full_like(tgt_pts, 0.5)
        for p in matches.pairs:
            tgt_colors[p.target_index] = (p.template_point - lo) / span
        save_mesh(Mesh(ref_mesh.vertices, ref_mesh.faces), f"{args.color_out}_ref.ply", vertex_colors=ref_colors)
        save_mesh(Mesh(tgt_mesh.vertices, tgt_mesh.faces), f"{args.color_out}_target.ply", vertex_colors=tgt_colors)
    print(f"wrote {len(matches)} correspondences to {args.out}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from . import inference
    from .geometry import load_mesh

    pred = inference.CorrespondenceSet.read_csv(args.pred)
    ref = load_mesh(args.truth[0])
    target = load_mesh(args.truth[1])
    if len(pred) != len(ref.vertices):
        raise inference.MissingGroundTruth(
            f"{len(pred)} predictions for {len(ref.vertices)} reference vertices"
        )
    truth = np.asarray(target.vertices)
    mean, dists = inference.correspondence_error(pred, truth)
    print(f"{mean:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("pair,error\n")
            for i, d in enumerate(dists):
                fh.write(f"{i},{d:.12g}\n")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "match": cmd_match,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_thread_cap(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
