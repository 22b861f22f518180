from .camera import Camera, look_at, project
from .grid import VoxelGrid, grid_nodes, load_grid, marching_cubes, save_grid
from .mesh import (
    MANO_VERTEX_COUNT,
    TriMesh,
    concatenate,
    euler_characteristic,
    load_obj,
    sample_surface_points,
    save_obj,
)
from .sdf import (
    closest_point_on_mesh,
    column_winding_numbers,
    mesh_signed_distance,
    ray_winding_number,
    voxelize,
    winding_number,
)
from .transforms import (
    RigidTransform,
    axis_angle_to_matrix,
    matrix_to_axis_angle,
    perturb_transform,
    random_rigid,
    random_rotation,
    rotation_from_decoupled_axes,
)

__all__ = [
    "Camera", "look_at", "project",
    "VoxelGrid", "grid_nodes", "load_grid", "marching_cubes", "save_grid",
    "MANO_VERTEX_COUNT", "TriMesh", "concatenate", "euler_characteristic", "load_obj",
    "sample_surface_points", "save_obj",
    "closest_point_on_mesh", "column_winding_numbers", "mesh_signed_distance",
    "ray_winding_number", "voxelize", "winding_number",
    "RigidTransform", "axis_angle_to_matrix", "matrix_to_axis_angle", "perturb_transform",
    "random_rigid", "random_rotation", "rotation_from_decoupled_axes",
]
