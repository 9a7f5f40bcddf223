"""Command-line interface.

Exit codes: 0 success, 2 IO/format problems, 3 input validation problems,
4 numerical failures.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cpd import CpdParams
from .errors import FormatError, NumericalError, ValidationError
from .geometry import (
    load_mesh,
    load_point_cloud,
    save_point_cloud,
    single_view_scan,
    tessellated_sphere,
    virtual_scan,
    voxel_downsample,
)
from .inference import InferenceParams, fit_to_json
from .pipeline import (
    TrainConfig,
    cross_validate,
    infer,
    load_model,
    load_training_set,
    save_model,
    select_canonical,
    train,
    write_report,
)
from .transfer import (
    SamplingParams,
    descriptor_to_dict,
    load_descriptor,
    sample_grasp_motion,
)

EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("graspwarp")


def _add_cpd_flags(parser):
    parser.add_argument("--beta", type=float, default=1.0, help="kernel width (m)")
    parser.add_argument("--lambda", dest="lam", type=float, default=3.0,
                        help="smoothness trade-off")
    parser.add_argument("--sigma2", type=float, default=0.01, help="mixture variance (m^2)")
    parser.add_argument("--omega", type=float, default=0.1, help="outlier weight in [0, 1)")
    parser.add_argument("--max-iters", type=int, default=150, help="registration EM iterations")
    parser.add_argument("--update-sigma2", action="store_true",
                        help="re-estimate the mixture variance every EM iteration")


def _add_train_flags(parser):
    _add_cpd_flags(parser)
    parser.add_argument("--variance", type=float, default=0.95,
                        help="latent variance fraction to capture")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--leaf", type=float, default=0.0,
                        help="optional voxel leaf (m) applied to every instance; 0 disables")
    parser.add_argument("--ridge", type=float, default=1e-6, help="regressor ridge penalty")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel registrations during training")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        cpd=CpdParams(beta=args.beta, lam=args.lam, sigma2=args.sigma2,
                      omega=args.omega, max_iters=args.max_iters,
                      update_sigma2=args.update_sigma2),
        variance_fraction=args.variance,
        ridge=args.ridge,
        seed=args.seed,
        workers=args.workers,
    )


def _maybe_downsample(training_set, leaf):
    if leaf <= 0.0:
        return training_set
    from dataclasses import replace

    from .pipeline import TrainingSet

    instances = tuple(
        replace(inst, cloud=voxel_downsample(inst.cloud, leaf))
        for inst in training_set.instances
    )
    return TrainingSet(instances)


def _infer_params(args, default_sigma2) -> InferenceParams:
    return InferenceParams(
        sigma2=args.infer_sigma2 if args.infer_sigma2 is not None else default_sigma2,
        max_iters=args.infer_max_iters,
        model_outer=(args.sum_over == "model"),
    )


def _add_infer_flags(parser):
    parser.add_argument("--infer-sigma2", type=float, default=None,
                        help="fit variance (m^2); defaults to the model's training value")
    parser.add_argument("--infer-max-iters", type=int, default=200)
    parser.add_argument("--sum-over", choices=("model", "observed"), default="model",
                        help="energy reduction orientation; 'observed' is robust to occlusion")


def _cmd_scan(args) -> int:
    mesh = load_mesh(args.mesh)
    cameras = tessellated_sphere(args.subdivisions, args.radius)
    if args.view == "single":
        if not (0 <= args.camera_index < len(cameras)):
            raise ValidationError(
                f"camera index {args.camera_index} out of range for {len(cameras)} cameras"
            )
        cloud = single_view_scan(mesh, cameras[args.camera_index], args.resolution)
    else:
        cloud = virtual_scan(mesh, cameras, args.resolution)
    if args.leaf > 0.0:
        cloud = voxel_downsample(cloud, args.leaf)
    save_point_cloud(cloud, args.output)
    print(f"scanned {len(cloud)} points -> {args.output}")
    return 0


def _cmd_train(args) -> int:
    training_set = _maybe_downsample(load_training_set(args.dataset), args.leaf)
    config = _train_config(args)
    if args.canonical == "min-energy":
        index = select_canonical(training_set.instances, mode="min_energy", params=config.cpd)
    else:
        ids = [inst.instance_id for inst in training_set.instances]
        index = ids.index(args.canonical) if args.canonical in ids else int(args.canonical)
    model = train(training_set, index, config)
    save_model(model, args.output)
    diag = model.provenance["diagnostics"]
    worst = max(diag.values(), key=lambda d: d["residual"]) if diag else None
    print(
        f"trained on {len(training_set)} instances "
        f"(canonical {model.provenance['canonical_instance']!r}, q={model.latent.q}) "
        f"-> {args.output}"
    )
    if worst is not None:
        print(f"worst registration residual: {worst['residual']:.5f} m")
    return 0


def _cmd_infer(args) -> int:
    model = load_model(args.model)
    observed = load_point_cloud(args.cloud)
    params = _infer_params(args, model.cpd_params.sigma2)
    fit, completed, descriptor = infer(model, observed, params)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(fit_to_json(fit) + "\n", encoding="ascii")
    save_point_cloud(completed, out / "completed.ply", colors=np.array([0, 200, 0]))
    (out / "grasp.json").write_text(
        json.dumps(descriptor_to_dict(descriptor), indent=2) + "\n", encoding="ascii"
    )
    print(
        f"energy {fit.final_energy:.5g} after {fit.iterations} iterations "
        f"(converged={fit.converged}); outputs in {out}"
    )
    return 0


def _cmd_eval(args) -> int:
    training_set = _maybe_downsample(load_training_set(args.dataset), args.leaf)
    config = _train_config(args)
    params = _infer_params(args, config.cpd.sigma2)
    rows = cross_validate(training_set, config, params, canonical_id=args.canonical)
    write_report(rows, args.output)
    pos = [r["position_error_m"] for r in rows]
    ang = [r["orientation_error_deg"] for r in rows]
    print(f"evaluated {len(rows)} held-out inferences -> {args.output}")
    print(f"mean position error {np.mean(pos):.4f} m, mean orientation error {np.mean(ang):.2f} deg")
    return 0


def _cmd_sample_motion(args) -> int:
    descriptor = load_descriptor(args.descriptor)
    params = SamplingParams(
        max_translation=args.max_translation,
        max_angle=args.max_angle,
        translation_stddev=args.stddev,
        seed=args.seed,
    )
    rng = np.random.default_rng(args.seed)
    samples = [
        descriptor_to_dict(sample_grasp_motion(descriptor, params, rng))
        for _ in range(args.samples)
    ]
    Path(args.output).write_text(
        json.dumps({"samples": samples}, indent=2) + "\n", encoding="ascii"
    )
    print(f"wrote {len(samples)} sampled motions -> {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graspwarp",
        description="Category-level deformation latent spaces and grasp transfer",
    )
    parser.add_argument("--log-level", default="warning",
                        choices=("debug", "info", "warning", "error"))
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="ray-cast a mesh into a point cloud")
    scan.add_argument("mesh")
    scan.add_argument("-o", "--output", required=True)
    scan.add_argument("--view", choices=("full", "single"), default="full")
    scan.add_argument("--camera-index", type=int, default=0)
    scan.add_argument("--subdivisions", type=int, default=1)
    scan.add_argument("--radius", type=float, default=0.6)
    scan.add_argument("--resolution", type=int, default=160)
    scan.add_argument("--leaf", type=float, default=0.005)
    scan.set_defaults(func=_cmd_scan)

    tr = sub.add_parser("train", help="train a category model from a dataset directory")
    tr.add_argument("dataset")
    tr.add_argument("-o", "--output", required=True)
    tr.add_argument("--canonical", default="0",
                    help="instance id, index, or 'min-energy'")
    _add_train_flags(tr)
    tr.set_defaults(func=_cmd_train)

    inf = sub.add_parser("infer", help="fit a model to an observed cloud")
    inf.add_argument("model")
    inf.add_argument("cloud")
    inf.add_argument("-o", "--output", required=True, help="output directory")
    _add_infer_flags(inf)
    inf.set_defaults(func=_cmd_infer)

    ev = sub.add_parser("eval", help="leave-two-out cross validation over a dataset")
    ev.add_argument("dataset")
    ev.add_argument("-o", "--output", required=True, help="CSV report path")
    ev.add_argument("--canonical", default=None, help="preferred canonical instance id")
    _add_train_flags(ev)
    _add_infer_flags(ev)
    ev.set_defaults(func=_cmd_eval)

    sm = sub.add_parser("sample-motion", help="sample constrained motions around a descriptor")
    sm.add_argument("descriptor")
    sm.add_argument("-o", "--output", required=True)
    sm.add_argument("--samples", type=int, default=10)
    sm.add_argument("--max-translation", type=float, default=0.04)
    sm.add_argument("--max-angle", type=float, default=0.2)
    sm.add_argument("--stddev", type=float, default=0.01)
    sm.add_argument("--seed", type=int, default=0)
    sm.set_defaults(func=_cmd_sample_motion)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
