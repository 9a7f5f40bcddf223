"""Training and inference orchestration, model persistence, and evaluation.

A category model bundles the canonical cloud, the registration parameters,
the learned deformation latent space, and the latent-to-descriptor regressor.
Models serialize to a single JSON document whose float64 payloads are
base64-embedded, so save/load round trips are bit exact.
"""

import base64
import concurrent.futures
import csv
import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .cpd import CpdParams, DeformationField, apply_deformation, register
from .errors import FormatError, GraspwarpError, ValidationError
from .geometry import (
    PointCloud,
    load_point_cloud,
    mean_nn_distance,
    rotation_angle_between,
)
from .inference import InferenceParams, complete_shape, infer_shape
from .latent import LatentSpace, Normalization, decode, encode, fit_latent_space
from .transfer import (
    OBSERVED,
    DescriptorRegressor,
    GraspDescriptor,
    descriptor_to_canonical,
    descriptor_to_observed,
    infer_descriptor,
    load_descriptor,
    train_regressor,
)

log = logging.getLogger(__name__)

MODEL_FORMAT = "graspwarp-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainingInstance:
    instance_id: str
    cloud: PointCloud
    descriptor: GraspDescriptor


@dataclass(frozen=True)
class TrainingSet:
    """Instance clouds, already aligned to the category pose, with their
    observed-space grasp descriptors."""

    instances: tuple

    def __post_init__(self):
        instances = tuple(self.instances)
        if len(instances) < 2:
            raise ValidationError("a training set needs at least two instances")
        lengths = {len(inst.descriptor) for inst in instances}
        if len(lengths) != 1:
            raise ValidationError(f"descriptors have mixed pose counts: {sorted(lengths)}")
        tags = {inst.descriptor.space_tag for inst in instances}
        if tags != {OBSERVED}:
            raise ValidationError("training descriptors must be observed-space")
        ids = [inst.instance_id for inst in instances]
        if len(set(ids)) != len(ids):
            raise ValidationError("instance identifiers must be unique")
        object.__setattr__(self, "instances", instances)

    def __len__(self) -> int:
        return len(self.instances)


@dataclass(frozen=True)
class TrainConfig:
    cpd: CpdParams = dc_field(default_factory=CpdParams)
    variance_fraction: float = 0.95
    q: int | None = None
    ridge: float = 1e-6
    pca_max_iters: int = 500
    pca_tol: float = 1e-9
    seed: int = 0
    support_k: int = 50
    workers: int = 1


@dataclass(frozen=True)
class CategoryModel:
    """Persisted training artifact for one object category."""

    category: str
    canonical: PointCloud
    cpd_params: CpdParams
    latent: LatentSpace
    regressor: DescriptorRegressor
    provenance: dict

    def __post_init__(self):
        if self.latent.p != 3 * len(self.canonical):
            raise ValidationError(
                f"latent width {self.latent.p} disagrees with canonical size "
                f"{len(self.canonical)} (expected {3 * len(self.canonical)})"
            )
        if self.regressor.weights.shape[0] != self.latent.q + 1:
            raise ValidationError(
                f"regressor input width {self.regressor.weights.shape[0]} must be q+1 = "
                f"{self.latent.q + 1}"
            )


def select_canonical(clouds, mode: str = "index", index: int = 0,
                     params: CpdParams | None = None) -> int:
    """Pick the template instance.

    ``index`` trusts the caller; ``min_energy`` registers every candidate to
    all the others and returns the one with the lowest summed final
    registration objective.
    """
    clouds = [c.cloud if isinstance(c, TrainingInstance) else c for c in clouds]
    if len(clouds) < 2:
        raise ValidationError("need at least two instances to select a canonical")
    if mode == "index":
        if not (0 <= index < len(clouds)):
            raise ValidationError(f"canonical index {index} out of range")
        return index
    if mode != "min_energy":
        raise ValidationError(f"mode must be index|min_energy, got {mode!r}")
    if params is None:
        params = CpdParams()
    totals = []
    for i, candidate in enumerate(clouds):
        total = 0.0
        for j, other in enumerate(clouds):
            if i == j:
                continue
            _, _, trace = register(candidate, other, params)
            total += trace[-1]
        totals.append(total)
        log.debug("select_canonical: candidate %d summed energy %.6g", i, total)
    return int(np.argmin(totals))


def train(training_set: TrainingSet, canonical_index: int,
          config: TrainConfig | None = None) -> CategoryModel:
    """Fit deformation fields, the latent space, and the descriptor regressor.

    The canonical instance contributes the identity deformation and its own
    descriptor to the regression, but not a row of the design matrix.
    """
    if config is None:
        config = TrainConfig()
    instances = training_set.instances
    if not (0 <= canonical_index < len(instances)):
        raise ValidationError(f"canonical index {canonical_index} out of range")
    canonical_inst = instances[canonical_index]
    canonical = canonical_inst.cloud
    others = [inst for i, inst in enumerate(instances) if i != canonical_index]

    def _register_one(inst: TrainingInstance):
        try:
            field, _sigma2, trace = register(canonical, inst.cloud, config.cpd)
        except GraspwarpError as exc:
            raise type(exc)(f"registration of instance {inst.instance_id!r} failed: {exc}") from exc
        deformed = apply_deformation(field, canonical)
        return field, {
            "final_energy": float(trace[-1]),
            "iterations": len(trace),
            "residual": mean_nn_distance(deformed.points, inst.cloud.points),
        }

    if config.workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_register_one, others))
    else:
        results = [_register_one(inst) for inst in others]
    fields = [r[0] for r in results]
    diagnostics = {inst.instance_id: r[1] for inst, r in zip(others, results)}
    for inst_id, diag in diagnostics.items():
        log.info(
            "registered %s: objective %.5g, %d iterations, residual %.4g m",
            inst_id, diag["final_energy"], diag["iterations"], diag["residual"],
        )

    space = fit_latent_space(
        fields,
        variance_fraction=config.variance_fraction,
        q=config.q,
        max_iters=config.pca_max_iters,
        tol=config.pca_tol,
        seed=config.seed,
    )

    identity_field = DeformationField.identity(canonical, config.cpd.beta)
    latents = []
    canonical_descriptors = []
    field_iter = iter(fields)
    for i, inst in enumerate(instances):
        field = identity_field if i == canonical_index else next(field_iter)
        latents.append(encode(field, space))
        canonical_descriptors.append(
            descriptor_to_canonical(inst.descriptor, field, k=config.support_k)
        )
    regressor = train_regressor(latents, canonical_descriptors, ridge=config.ridge)

    provenance = {
        "instances": [inst.instance_id for inst in instances],
        "canonical_instance": canonical_inst.instance_id,
        "seed": config.seed,
        "diagnostics": diagnostics,
    }
    return CategoryModel(
        category=canonical.frame_id or "category",
        canonical=canonical,
        cpd_params=config.cpd,
        latent=space,
        regressor=regressor,
        provenance=provenance,
    )


def check_alignment(canonical: PointCloud, observed: PointCloud) -> bool:
    """Cheap bounding-box overlap check; False means the coarse alignment
    required by the fit is probably missing."""
    lo = np.maximum(canonical.points.min(axis=0), observed.points.min(axis=0))
    hi = np.minimum(canonical.points.max(axis=0), observed.points.max(axis=0))
    return bool((hi >= lo).all())


def infer(model: CategoryModel, observed: PointCloud,
          params: InferenceParams | None = None):
    """Full inference: shape fit, completed cloud, and observed-space grasp.

    Returns (ShapeFit, PointCloud, GraspDescriptor).
    """
    if params is None:
        params = InferenceParams(sigma2=model.cpd_params.sigma2)
    if not check_alignment(model.canonical, observed):
        log.warning(
            "observed cloud's bounding box does not overlap the canonical cloud; "
            "inference expects a coarse pre-alignment"
        )
    fit = infer_shape(model, observed, params)
    completed = complete_shape(model, fit)
    canonical_descriptor = infer_descriptor(model.regressor, fit.x)
    field = decode(fit.x, model.latent, model.canonical, model.cpd_params.beta)
    observed_descriptor = descriptor_to_observed(canonical_descriptor, field, fit.theta)
    return fit, completed, observed_descriptor


# ---------------------------------------------------------------------------
# persistence


def _encode_array(arr) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "b64": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode_array(doc) -> np.ndarray:
    data = np.frombuffer(base64.b64decode(doc["b64"]), dtype="<f8")
    return data.reshape(doc["shape"]).astype(np.float64)


def model_to_json(model: CategoryModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "category": model.category,
        "canonical": {
            "frame_id": model.canonical.frame_id,
            "points": _encode_array(model.canonical.points),
        },
        "cpd": {
            "beta": model.cpd_params.beta,
            "lam": model.cpd_params.lam,
            "sigma2": model.cpd_params.sigma2,
            "omega": model.cpd_params.omega,
            "max_iters": model.cpd_params.max_iters,
            "tol": model.cpd_params.tol,
            "update_sigma2": model.cpd_params.update_sigma2,
        },
        "latent": {
            "q": model.latent.q,
            "components": _encode_array(model.latent.components),
            "mean": _encode_array(model.latent.normalization.mean),
            "std": _encode_array(model.latent.normalization.std),
            "explained_variance": _encode_array(model.latent.explained_variance),
        },
        "regressor": {
            "weights": _encode_array(model.regressor.weights),
            "ridge": model.regressor.ridge,
            "labels": list(model.regressor.labels),
            "residual": model.regressor.residual,
        },
        "provenance": model.provenance,
    }
    return json.dumps(doc, indent=2)


def model_from_json(text: str) -> CategoryModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file is not valid JSON: {exc}") from None
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {doc.get('version')}")
    cpd = doc["cpd"]
    latent = doc["latent"]
    reg = doc["regressor"]
    space = LatentSpace(
        _decode_array(latent["components"]),
        Normalization(_decode_array(latent["mean"]), _decode_array(latent["std"])),
        _decode_array(latent["explained_variance"]),
    )
    return CategoryModel(
        category=doc["category"],
        canonical=PointCloud(
            _decode_array(doc["canonical"]["points"]), doc["canonical"]["frame_id"]
        ),
        cpd_params=CpdParams(
            beta=cpd["beta"],
            lam=cpd["lam"],
            sigma2=cpd["sigma2"],
            omega=cpd["omega"],
            max_iters=cpd["max_iters"],
            tol=cpd["tol"],
            update_sigma2=cpd["update_sigma2"],
        ),
        latent=space,
        regressor=DescriptorRegressor(
            _decode_array(reg["weights"]), reg["ridge"], tuple(reg["labels"]), reg["residual"]
        ),
        provenance=doc["provenance"],
    )


def save_model(model: CategoryModel, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(model_to_json(model))
        fh.write("\n")


def load_model(path) -> CategoryModel:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return model_from_json(fh.read())
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# dataset IO and evaluation


def load_training_set(root) -> TrainingSet:
    """Read ``instances/<id>.ply`` + ``grasps/<id>.json`` pairs under root."""
    root = Path(root)
    inst_dir = root / "instances"
    grasp_dir = root / "grasps"
    if not inst_dir.is_dir() or not grasp_dir.is_dir():
        raise FormatError(f"{root}: expected instances/ and grasps/ subdirectories")
    instances = []
    for ply in sorted(inst_dir.glob("*.ply")):
        instance_id = ply.stem
        grasp_path = grasp_dir / f"{instance_id}.json"
        if not grasp_path.exists():
            raise ValidationError(f"instance {instance_id!r} has no grasp descriptor")
        cloud = load_point_cloud(ply)
        descriptor = load_descriptor(grasp_path)
        instances.append(TrainingInstance(instance_id, cloud, descriptor))
    if not instances:
        raise ValidationError(f"{root}: no instances found")
    return TrainingSet(tuple(instances))


def descriptor_errors(predicted: GraspDescriptor, reference: GraspDescriptor):
    """Mean position (m) and orientation (deg) error over paired poses."""
    if len(predicted) != len(reference):
        raise ValidationError("descriptors have different pose counts")
    pos = [
        float(np.linalg.norm(a.position - b.position))
        for a, b in zip(predicted.poses, reference.poses)
    ]
    ang = [
        float(np.degrees(rotation_angle_between(a.orientation, b.orientation)))
        for a, b in zip(predicted.poses, reference.poses)
    ]
    return float(np.mean(pos)), float(np.mean(ang))


def leave_two_out_folds(ids):
    """Deterministic partition of sorted identifiers into held-out pairs."""
    ordered = sorted(ids)
    folds = [ordered[i : i + 2] for i in range(0, len(ordered) - 1, 2)]
    if len(ordered) % 2 == 1:
        folds.append(ordered[-1:])
    return folds


def cross_validate(training_set: TrainingSet, config: TrainConfig | None = None,
                   infer_params: InferenceParams | None = None,
                   canonical_id: str | None = None):
    """Leave-two-out evaluation; returns one result row per held-out instance.

    When ``canonical_id`` names an instance, that instance is the designated
    template: it joins every training subset and is never held out.
    """
    if config is None:
        config = TrainConfig()
    by_id = {inst.instance_id: inst for inst in training_set.instances}
    if canonical_id is not None and canonical_id not in by_id:
        raise ValidationError(f"canonical instance {canonical_id!r} is not in the dataset")
    foldable = [i for i in sorted(by_id) if i != canonical_id]
    rows = []
    for fold_index, held_out in enumerate(leave_two_out_folds(foldable)):
        train_ids = [i for i in sorted(by_id) if i not in held_out]
        if len(train_ids) < 2:
            raise ValidationError("cross validation needs at least 4 instances")
        subset = TrainingSet(tuple(by_id[i] for i in train_ids))
        if canonical_id is not None:
            canonical_index = train_ids.index(canonical_id)
        else:
            canonical_index = 0
        model = train(subset, canonical_index, config)
        for held_id in held_out:
            inst = by_id[held_id]
            fit, completed, descriptor = infer(model, inst.cloud, infer_params)
            pos_err, ang_err = descriptor_errors(descriptor, inst.descriptor)
            rows.append(
                {
                    "fold": fold_index,
                    "instance": held_id,
                    "position_error_m": pos_err,
                    "orientation_error_deg": ang_err,
                    "shape_residual_m": mean_nn_distance(inst.cloud.points, completed.points),
                    "energy": fit.final_energy,
                    "iterations": fit.iterations,
                    "converged": fit.converged,
                }
            )
            log.info(
                "fold %d, %s: position error %.4f m, orientation error %.2f deg",
                fold_index, held_id, pos_err, ang_err,
            )
    return rows


def write_report(rows, path) -> None:
    fieldnames = [
        "fold", "instance", "position_error_m", "orientation_error_deg",
        "shape_residual_m", "energy", "iterations", "converged",
    ]
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
