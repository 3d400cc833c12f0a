"""Vertex-domain convolutional networks on semi-regular triangle meshes."""

from .mesh import SemiRegularMesh, build_mesh, load_off, save_off, validate, vertex_normal
from .hierarchy import MeshHierarchy, build_hierarchy, icosphere, pool_neighborhood, subdivide
from .ordering import GatherTable, build_gather_table, fit_sphere, order_one_ring, tangent_frame

__version__ = "0.1.0"
