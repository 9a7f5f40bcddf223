"""Point-cloud representation, file IO, rigid transforms, and virtual scanning."""

from .cloud import (
    PointCloud,
    RigidParams,
    TriangleMesh,
    apply_rigid,
    drop_degenerate_faces,
    mean_nn_distance,
    nearest_neighbor_distances,
    voxel_downsample,
)
from .io import load_mesh, load_point_cloud, save_point_cloud
from .rotations import (
    axis_angle_quat,
    gram_schmidt_frame,
    matrix_to_quat,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_rotation_angle,
    quat_to_matrix,
    rotation_angle_between,
)
from .scan import (
    CameraPose,
    camera_rays,
    look_at,
    single_view_scan,
    tessellated_sphere,
    virtual_scan,
)

__all__ = [
    "PointCloud",
    "RigidParams",
    "TriangleMesh",
    "CameraPose",
    "apply_rigid",
    "axis_angle_quat",
    "camera_rays",
    "drop_degenerate_faces",
    "gram_schmidt_frame",
    "load_mesh",
    "load_point_cloud",
    "look_at",
    "matrix_to_quat",
    "mean_nn_distance",
    "nearest_neighbor_distances",
    "quat_conjugate",
    "quat_multiply",
    "quat_normalize",
    "quat_rotation_angle",
    "quat_to_matrix",
    "rotation_angle_between",
    "save_point_cloud",
    "single_view_scan",
    "tessellated_sphere",
    "virtual_scan",
    "voxel_downsample",
]
