"""
Procedural objects, signed distances and marching cubes
========================================================

Draw one object per category, check that every mesh is closed with the
expected topology, query signed distances, and rebuild a mesh from a
sampled grid.
"""

import numpy as np

from handprior.geometry import VoxelGrid, euler_characteristic, grid_nodes, marching_cubes, mesh_signed_distance
from handprior.metrics import chamfer
from handprior.shapes import CATEGORIES, make_shape

rng = np.random.default_rng(0)

# every category spec draws a parameter dict inside its training range
meshes = {}
for name, spec in CATEGORIES.items():
    params = spec.sample(rng)
    meshes[name] = make_shape(name, params)
    m = meshes[name]
    print(f"{name:7s} {len(m.vertices):5d} verts  watertight={m.is_watertight}  chi={euler_characteristic(m)}")

# the mug handle makes it genus one; negative distances are inside the wall
mug = meshes["mug"]
pts = rng.uniform(-0.1, 0.1, (5, 3))
print("sdf at random points (m):", np.round(mesh_signed_distance(mug, pts), 4))

# sample a 64^3 grid over the canonical cube and extract the zero level set
res, half = 64, 0.11
nodes = grid_nodes(np.full(3, -half), 2 * half / (res - 1), (res,) * 3)
values = mesh_signed_distance(mug, nodes.reshape(-1, 3)).reshape((res,) * 3)
rebuilt = marching_cubes(VoxelGrid(np.full(3, -half), 2 * half / (res - 1), values))
print("rebuilt mug chi:", euler_characteristic(rebuilt), " CD to source (10 mm^2):", round(chamfer(rebuilt, mug), 4))
