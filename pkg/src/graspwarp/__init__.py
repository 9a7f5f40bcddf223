"""graspwarp: category-level deformation latent spaces and grasp-pose transfer.

Training registers a canonical point cloud against every instance of a
category, learns a linear latent space over the resulting deformation
fields, pulls each instance's grasp poses back into the canonical frame, and
fits a regressor from latent coordinates to those poses. Inference fits the
latent coordinates plus a rigid alignment to a (possibly partial) observed
cloud, completes the shape, and warps a predicted grasp onto the instance.
"""

from ._kernels import backend as kernel_backend
from .cpd import CpdParams, DeformationField, apply_deformation, e_step, energy, kernel_matrix, m_step, register
from .errors import (
    DegenerateDeformationError,
    FormatError,
    GraspwarpError,
    NumericalError,
    ValidationError,
)
from .geometry import (
    CameraPose,
    PointCloud,
    RigidParams,
    TriangleMesh,
    apply_rigid,
    load_mesh,
    load_point_cloud,
    look_at,
    save_point_cloud,
    single_view_scan,
    tessellated_sphere,
    virtual_scan,
    voxel_downsample,
)
from .inference import (
    InferenceParams,
    ShapeFit,
    complete_shape,
    energy_gradient,
    energy_latent,
    infer_shape,
)
from .latent import (
    LatentSpace,
    LatentVector,
    Normalization,
    build_design_matrix,
    choose_q,
    decode,
    decode_weights,
    encode,
    fit_latent_space,
    flatten_field,
    pca_em,
)
from .pipeline import (
    CategoryModel,
    TrainConfig,
    TrainingInstance,
    TrainingSet,
    cross_validate,
    infer,
    load_model,
    load_training_set,
    save_model,
    select_canonical,
    train,
)
from .transfer import (
    ControlPose,
    DescriptorRegressor,
    GraspDescriptor,
    SamplingParams,
    descriptor_to_canonical,
    descriptor_to_observed,
    filter_constraints,
    infer_descriptor,
    inverse_deform,
    load_descriptor,
    pose_to_canonical,
    random_quaternion,
    sample_grasp_motion,
    save_descriptor,
    to_robot_frame,
    train_regressor,
    warp_pose,
)

__version__ = "0.1.0"
