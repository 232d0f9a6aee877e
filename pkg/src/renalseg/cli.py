"""Command-line entry points tying the pipeline together.

Heavy imports happen inside the command handlers so that ``--threads`` (or
the RENALSEG_THREADS environment variable) can pin the BLAS/numba thread
pools before numpy is loaded. Exit status: 0 success, 1 usage error,
2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

_CORRUPT_ENV = "RENALSEG_GRADCHECK_CORRUPT"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _apply_threads(argv):
    threads = os.environ.get("RENALSEG_THREADS")
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is None:
        return
    if not threads.isdigit() or int(threads) < 1:
        raise _UsageError(f"--threads must be a positive integer, got {threads!r}")
    for var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMBA_NUM_THREADS",
    ):
        os.environ[var] = threads


def _build_parser():
    parser = _Parser(
        prog="renalseg",
        description="Cascaded localization + segmentation of kidneys in 4D volumes",
    )
    parser.add_argument("--threads", type=int, help="thread count for compute pools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="generate labelled synthetic subjects")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")

    for stage in ("train-loc", "train-seg"):
        p = sub.add_parser(p_name := stage, help=f"{stage.split('-')[1]} network training")
        p.add_argument("--data", required=True, help="directory of RV4D volume/label pairs")
        p.add_argument("--out", required=True, help="output checkpoint path")
        p.add_argument("--loss-log", help="loss-per-epoch log (default <out>.loss.txt)")
        p.add_argument("--config", help="key=value run config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("predict", help="segment one volume with trained checkpoints")
    p.add_argument("--loc", required=True, help="localizer checkpoint")
    p.add_argument("--seg", required=True, help="segmenter checkpoint")
    p.add_argument("--volume", required=True, help="input RV4D volume")
    p.add_argument("--out", required=True, help="output RV4D label map")
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--seed", type=int, help="accepted for interface symmetry")

    p = sub.add_parser("evaluate", help="compare predicted and true label maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every op")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _load_dataset(data_dir):
    from . import rv4d

    if not os.path.isdir(data_dir):
        raise rv4d.Rv4dError(f"{data_dir}: not a directory")
    volumes = sorted(f for f in os.listdir(data_dir) if f.startswith("vol_"))
    dataset = []
    for vol_name in volumes:
        lab_name = vol_name.replace("vol_", "lab_", 1)
        lab_path = os.path.join(data_dir, lab_name)
        if not os.path.exists(lab_path):
            raise rv4d.Rv4dError(f"{lab_path}: missing label file for {vol_name}")
        vol = rv4d.read_volume(os.path.join(data_dir, vol_name))
        labels, _ = rv4d.read_labels(lab_path)
        dataset.append((vol, labels))
    if not dataset:
        raise rv4d.Rv4dError(f"{data_dir}: no vol_*.rv4d files found")
    return dataset


def _phantom_fov():
    from .phantom import PhantomSpec

    return PhantomSpec().fov_mm


def _spacing_for_grid(grid_dims, fov_mm):
    """Voxel spacing (x, y, z) that keeps the canonical physical extent."""
    d, h, w = grid_dims
    fz, fy, fx = fov_mm
    return (fx / max(w - 1, 1), fy / max(h - 1, 1), fz / max(d - 1, 1))


def random_phantom_spec(rng, cfg, pelvis_fraction, seed):
    """Phantom spec with jittered kidney geometry at the configured grid."""
    from .phantom import PhantomSpec

    grid = (cfg.phantom_depth, cfg.phantom_height, cfg.phantom_width)
    spacing = _spacing_for_grid(grid, _phantom_fov())
    base = PhantomSpec()
    centers = []
    radii = []
    for center, semi in zip(base.kidney_centers, base.parenchyma_radii_mm):
        centers.append(tuple(c + rng.uniform(-8.0, 8.0) for c in center))
        radii.append(tuple(r * rng.uniform(0.85, 1.15) for r in semi))
    return PhantomSpec(
        grid_dims=grid,
        voxel_spacing_mm=spacing,
        kidney_centers=tuple(centers),
        parenchyma_radii_mm=tuple(radii),
        pelvis_fraction=pelvis_fraction,
        noise_sigma=cfg.phantom_noise_sigma,
        seed=seed,
        n_timepoints=cfg.phantom_timepoints,
        duration_sec=cfg.phantom_duration_sec,
    )


def cmd_gen_phantoms(args):
    import numpy as np

    from . import rv4d
    from .config import load_run_config
    from .phantom import generate, min_curve_separation

    cfg = load_run_config(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    manifest = []
    for i in range(args.count):
        abnormal = rng.random() < cfg.phantom_abnormal_fraction
        pelvis = (
            float(rng.uniform(cfg.phantom_pelvis_min, cfg.phantom_pelvis_max))
            if abnormal
            else 0.0
        )
        spec = random_phantom_spec(rng, cfg, pelvis, seed=cfg.seed * 100003 + i)
        vol, labels = generate(spec)
        vol_name = f"vol_{i:03d}.rv4d"
        lab_name = f"lab_{i:03d}.rv4d"
        rv4d.write_volume(os.path.join(args.out, vol_name), vol)
        rv4d.write_labels(os.path.join(args.out, lab_name), labels, vol.voxel_spacing_mm)
        manifest.append(
            f"subject={i:03d} volume={vol_name} labels={lab_name} "
            f"pelvis_fraction={pelvis:.3f} noise_sigma={cfg.phantom_noise_sigma:g} "
            f"curve_separation={min_curve_separation(spec):.4f}"
        )

    from .binio import atomic_write_bytes

    atomic_write_bytes(
        os.path.join(args.out, "manifest.txt"),
        ("\n".join(manifest) + ("\n" if manifest else "")).encode(),
    )
    print(f"gen-phantoms wrote {args.count} subjects to {args.out}")
    return EXIT_OK


def _train_config(cfg):
    from .cascade import TrainConfig

    return TrainConfig(
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        depth=cfg.depth,
        base_filters=cfg.base_filters,
        dropout_rate=cfg.dropout_rate,
        pca_components=cfg.pca_components,
        loc_dims=(cfg.loc_dim,) * 3,
        seg_dims=(cfg.seg_dim,) * 3,
        time_samples=cfg.time_samples,
        duration_sec=cfg.duration_sec,
        augment_copies=cfg.augment_copies,
        scale_min=cfg.scale_min,
        scale_max=cfg.scale_max,
        bbox_margin=cfg.bbox_margin,
    )


def cmd_train(args, stage):
    from .binio import atomic_write_bytes
    from .cascade import train_localizer, train_segmenter
    from .config import load_run_config
    from .unet import save_checkpoint

    cfg = load_run_config(args.config, args.seed)
    dataset = _load_dataset(args.data)
    train_fn = train_localizer if stage == "loc" else train_segmenter
    start = time.perf_counter()
    net, history = train_fn(dataset, _train_config(cfg))
    elapsed = time.perf_counter() - start

    save_checkpoint(net, args.out)
    log_path = args.loss_log or (args.out + ".loss.txt")
    lines = [f"epoch={i + 1} loss={loss:.6f}" for i, loss in enumerate(history)]
    atomic_write_bytes(log_path, ("\n".join(lines) + "\n").encode())
    print(
        f"train-{stage} epochs={len(history)} final_loss={history[-1]:.6f} "
        f"seconds={elapsed:.1f} checkpoint={args.out}"
    )
    return EXIT_OK


def cmd_predict(args):
    from . import rv4d
    from .cascade import CascadeModel, predict
    from .config import load_run_config
    from .unet import CheckpointError, load_checkpoint

    cfg = load_run_config(args.config, None)
    localizer = load_checkpoint(args.loc)
    segmenter = load_checkpoint(args.seg)
    for name, net, expected_in, expected_out in (
        ("localizer", localizer, cfg.pca_components, 3),
        ("segmenter", segmenter, cfg.time_samples, 2),
    ):
        if net.config.in_channels != expected_in or net.config.out_classes != expected_out:
            raise CheckpointError(
                f"{name} checkpoint expects {net.config.in_channels} input channels / "
                f"{net.config.out_classes} classes; this pipeline produces "
                f"{expected_in} channels / {expected_out} classes"
            )
    vol = rv4d.read_volume(args.volume)
    model = CascadeModel(
        localizer=localizer,
        segmenter=segmenter,
        pca_components=cfg.pca_components,
        loc_dims=(cfg.loc_dim,) * 3,
        seg_dims=(cfg.seg_dim,) * 3,
        time_samples=cfg.time_samples,
        duration_sec=cfg.duration_sec,
        bbox_margin=cfg.bbox_margin,
    )
    result = predict(model, vol)
    rv4d.write_labels(args.out, result.labels, vol.voxel_spacing_mm)
    # Documented one-line timing format, parsed by downstream tooling.
    print(
        f"predict loc_ms={result.localization_ms:.1f} seg_ms={result.segmentation_ms:.1f} "
        f"total_ms={result.total_ms:.1f} boxes={len(result.boxes)} out={args.out}"
    )
    return EXIT_OK


def cmd_evaluate(args):
    from . import rv4d
    from .metrics import confusion, dice, precision, recall, volumetric_error

    pred, pred_spacing = rv4d.read_labels(args.pred)
    truth, spacing = rv4d.read_labels(args.truth)
    if pred.shape != truth.shape:
        raise rv4d.Rv4dError(
            f"label dims differ: {args.pred} {pred.shape} vs {args.truth} {truth.shape}"
        )

    per_kidney = {}
    for class_id, name in ((1, "kidney1"), (2, "kidney2")):
        counts = confusion(pred == class_id, truth == class_id)
        per_kidney[name] = {
            "precision": precision(counts),
            "recall": recall(counts),
            "dice": dice(counts),
            "vee_ml": volumetric_error(pred == class_id, truth == class_id, spacing),
        }
    for name, values in per_kidney.items():
        for key, value in values.items():
            print(f"{name}.{key}={value:.6f}")
    for key in ("precision", "recall", "dice", "vee_ml"):
        mean = sum(v[key] for v in per_kidney.values()) / len(per_kidney)
        print(f"mean.{key}={mean:.6f}")
    return EXIT_OK


def _gradcheck_suite(seed):
    """One seeded check per differentiable op, all at float64."""
    import numpy as np

    from .engine import (
        LossConfig,
        Tensor,
        batchnorm,
        concat_channels,
        conv1x1,
        conv3d,
        conv_transpose3d,
        dropout,
        grad_check,
        maxpool3d,
        relu,
        softmax_channels,
        weighted_cross_entropy,
    )
    from .engine.ops import BatchNormState
    from .preprocess import one_hot
    from .unet import UNet3D, UNetConfig

    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    checks = {}
    checks["conv3d"] = (conv3d, [t(2, 4, 4, 4), t(3, 2, 3, 3, 3), t(3)])
    checks["conv1x1"] = (conv1x1, [t(3, 4, 4, 4), t(2, 3, 1, 1, 1), t(2)])
    checks["conv_transpose3d"] = (conv_transpose3d, [t(2, 3, 3, 3), t(2, 3, 2, 2, 2), t(3)])
    checks["maxpool3d"] = (lambda x: maxpool3d(x)[0], [t(2, 4, 4, 4)])
    checks["relu"] = (relu, [Tensor(rng.standard_normal((2, 3, 3, 3)) + 0.2)])

    def dropout_fixed(x):
        return dropout(x, 0.4, "train", np.random.default_rng(seed + 7))

    checks["dropout"] = (dropout_fixed, [t(2, 4, 4, 4)])

    bn_state = BatchNormState.create(2, dtype=np.float64)
    checks["batchnorm"] = (
        lambda x, g, b: batchnorm(x, g, b, bn_state, "train"),
        [t(2, 3, 3, 3), t(2), t(2)],
    )
    checks["concat_channels"] = (concat_channels, [t(2, 3, 3, 3), t(1, 3, 3, 3)])
    checks["softmax_channels"] = (softmax_channels, [t(3, 3, 3, 3)])

    target = one_hot(rng.integers(0, 2, size=(3, 3, 3)), 2).astype(np.float64)
    wce_cfg = LossConfig(class_weights=[1.0, 2.5])
    checks["weighted_cross_entropy"] = (
        lambda p: weighted_cross_entropy(p, Tensor(target), wce_cfg)[0],
        [Tensor(rng.uniform(0.2, 0.8, size=(2, 3, 3, 3)))],
    )

    net = UNet3D.build(
        UNetConfig(in_channels=2, out_classes=2, depth=2, base_filters=2), rng=seed
    ).cast(np.float64)
    x_net = Tensor(rng.standard_normal((2, 8, 8, 8)))
    net_target = one_hot(rng.integers(0, 2, size=(8, 8, 8)), 2).astype(np.float64)
    net_cfg = LossConfig(class_weights=[1.0, 1.0])

    def composed(w):
        probs = softmax_channels(net.forward(x_net, mode="eval"))
        return weighted_cross_entropy(probs, Tensor(net_target), net_cfg)[0]

    checks["composed_unet"] = (composed, [net.params["enc0_conv1_w"]], dict(sample=40, tol=1e-3))

    return checks


def _corrupted(op_fn):
    """Wrap an op with an identity whose backward is deliberately wrong."""
    from .engine.tensor import Tensor

    def wrapper(*inputs):
        out = op_fn(*inputs)
        if isinstance(out, tuple):
            out = out[0]

        def backward(g):
            if out._backward_fn is not None:
                out._backward_fn(g * 1.5)

        return Tensor(
            out.data, requires_grad=out.requires_grad, _parents=(out,), _backward_fn=backward
        )

    return wrapper


def cmd_gradcheck(args):
    from .engine import grad_check

    corrupt = os.environ.get(_CORRUPT_ENV)
    suite = _gradcheck_suite(args.seed)
    if corrupt is not None and corrupt not in suite:
        raise _UsageError(f"{_CORRUPT_ENV}={corrupt!r} does not name a checked op")

    failures = 0
    for name, entry in suite.items():
        fn, inputs = entry[0], entry[1]
        options = entry[2] if len(entry) > 2 else {}
        tolerance = options.get("tol", 1e-3 if name == "batchnorm" else 1e-4)
        if name == corrupt:
            fn = _corrupted(fn)
        report = grad_check(
            fn, inputs, tolerance=tolerance, rng=args.seed, sample=options.get("sample")
        )
        status = "pass" if report.passed else "FAIL"
        print(f"op={name} max_rel_error={report.max_rel_error:.3e} status={status}")
        failures += 0 if report.passed else 1
    if failures:
        print(f"gradcheck: {failures} op(s) failed")
        return EXIT_CHECK
    print("gradcheck: all ops pass")
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _apply_threads(argv)
        parser = _build_parser()
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    handlers = {
        "gen-phantoms": cmd_gen_phantoms,
        "train-loc": lambda a: cmd_train(a, "loc"),
        "train-seg": lambda a: cmd_train(a, "seg"),
        "predict": cmd_predict,
        "evaluate": cmd_evaluate,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # domain errors surface with their message
        from .config import ConfigError
        from .rv4d import Rv4dError
        from .unet import CheckpointError

        if isinstance(exc, (Rv4dError, CheckpointError, ConfigError, ValueError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
