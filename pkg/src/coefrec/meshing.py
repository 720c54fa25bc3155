"""Hexagonal and triangular meshes on axis-aligned rectangles.

The honeycomb mesh tiles a rectangle with regular hexagons of vertex-to-vertex
diameter h (side h/2) laid out in offset brick rows, each hexagon split into
six equilateral triangles sharing its centroid. Only hexagons lying entirely
inside the rectangle are kept. Structured triangulations of square cells are
provided for the classical element pairs and for the forward elasticity solve.

Meshes are immutable after construction and safe to share across threads.
"""

from dataclasses import dataclass, field
from typing import NamedTuple
import csv
import math

import numpy as np

__all__ = [
    "Rect",
    "TriMesh",
    "HoneycombMesh",
    "MeshDiagnostics",
    "EmptyMeshError",
    "InvertedElementError",
    "build_honeycomb",
    "build_structured_trimesh",
    "validate",
    "triangle_areas",
    "export_mesh_txt",
    "export_mesh_csv",
]


class EmptyMeshError(ValueError):
    """The requested rectangle cannot contain a single element."""


class InvertedElementError(ValueError):
    """A cell with non-positive signed area was found."""


class Rect(NamedTuple):
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    @property
    def diameter(self):
        return math.hypot(self.width, self.height)

    def check(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"degenerate rectangle {self}")


def as_rect(rect) -> Rect:
    """Coerce a 4-tuple (xmin, ymin, xmax, ymax) to a Rect."""
    r = Rect(*rect)
    r.check()
    return r


@dataclass(frozen=True)
class TriMesh:
    """Conforming triangulation: vertex coordinates, connectivity, boundary flags.

    Triangles are stored counterclockwise (positive signed area).
    """

    vertices: np.ndarray          # (nv, 2) float
    triangles: np.ndarray         # (nt, 3) int
    boundary_vertex: np.ndarray   # (nv,) bool
    h: float

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def tri_coords(self):
        """Vertex coordinates per triangle, shape (nt, 3, 2)."""
        return self.vertices[self.triangles]

    def areas(self):
        return triangle_areas(self.vertices, self.triangles)

    def centroids(self):
        return self.tri_coords().mean(axis=1)


@dataclass(frozen=True)
class HoneycombMesh:
    """Hexagonal tiling with its six-triangle submesh.

    Each hexagon contributes its six rim vertices (CCW) plus the centroid;
    triangle 6*j + k of the submesh is (centroid_j, rim_k, rim_{k+1}), so
    tri_to_hex[t] = t // 6.
    """

    vertices: np.ndarray          # (nv, 2)
    hex_cells: np.ndarray         # (nh, 6) rim vertex indices, CCW
    hex_center: np.ndarray        # (nh,) centroid vertex index
    tri_cells: np.ndarray         # (6*nh, 3)
    tri_to_hex: np.ndarray        # (6*nh,)
    boundary_vertex: np.ndarray   # (nv,) bool
    h: float
    _tri: TriMesh = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        tri = TriMesh(self.vertices, self.tri_cells, self.boundary_vertex, self.h)
        object.__setattr__(self, "_tri", tri)

    @property
    def n_hexagons(self):
        return self.hex_cells.shape[0]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.tri_cells.shape[0]

    def as_trimesh(self) -> TriMesh:
        """The triangular submesh, sharing vertex storage."""
        return self._tri

    def hex_areas(self):
        tri_a = triangle_areas(self.vertices, self.tri_cells)
        return tri_a.reshape(-1, 6).sum(axis=1)


def triangle_areas(vertices, triangles):
    """Signed areas of the given triangles (positive for CCW)."""
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _boundary_flags(n_vertices, triangles):
    """Vertices lying on an edge that borders exactly one triangle."""
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                            triangles[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    flags = np.zeros(n_vertices, dtype=bool)
    flags[uniq[counts == 1].ravel()] = True
    return flags


# Hexagon rim in units of (h/4, sqrt(3)*h/4) relative to the center.
_RIM_OFFSETS = [(2, 0), (1, 1), (-1, 1), (-2, 0), (-1, -1), (1, -1)]


def build_honeycomb(rect, h) -> HoneycombMesh:
    """Tile `rect` with the maximal corner-anchored brick-row set of whole
    regular hexagons of diameter `h` and build the triangular submesh.

    Hexagon centers sit on the lattice x = xmin + h/2 + (3h/2)i + (3h/4)[m odd],
    y = ymin + (sqrt(3)h/4)(m+1); all vertex coordinates are integer multiples
    of (h/4, sqrt(3)h/4), so vertices deduplicate exactly (far below the
    1e-12*diam tolerance).
    """
    rect = as_rect(rect)
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    ux = 0.25 * h
    uy = 0.25 * math.sqrt(3.0) * h
    tol = 1e-12 * rect.diameter
    # Integer lattice extents: a hexagon centered at (X, Y) spans X +- 2, Y +- 1.
    max_y = int(math.floor((rect.height + tol) / uy))
    centers = []
    m = 0
    while m + 2 <= max_y:
        shift = 3 * (m % 2)
        i = 0
        while (6 * i + shift + 4) * ux <= rect.width + tol:
            centers.append((2 + 6 * i + shift, 1 + m))
            i += 1
        m += 1
    if not centers:
        raise EmptyMeshError(
            f"no hexagon of diameter {h} fits inside {tuple(rect)}")

    index_of = {}
    coords = []

    def vid(key):
        j = index_of.get(key)
        if j is None:
            j = len(coords)
            index_of[key] = j
            coords.append(key)
        return j

    nh = len(centers)
    hex_cells = np.empty((nh, 6), dtype=np.int64)
    hex_center = np.empty(nh, dtype=np.int64)
    for j, (cx, cy) in enumerate(centers):
        hex_center[j] = vid((cx, cy))
        for k, (ox, oy) in enumerate(_RIM_OFFSETS):
            hex_cells[j, k] = vid((cx + ox, cy + oy))

    lattice = np.array(coords, dtype=np.float64)
    vertices = np.column_stack([rect.xmin + lattice[:, 0] * ux,
                                rect.ymin + lattice[:, 1] * uy])

    # row 6*j + k is the k-th triangle of hexagon j
    tri_cells = np.empty((6 * nh, 3), dtype=np.int64)
    for k in range(6):
        tri_cells[k::6, 0] = hex_center
        tri_cells[k::6, 1] = hex_cells[:, k]
        tri_cells[k::6, 2] = hex_cells[:, (k + 1) % 6]
    tri_to_hex = np.repeat(np.arange(nh, dtype=np.int64), 6)

    flags = _boundary_flags(len(vertices), tri_cells)
    return HoneycombMesh(vertices, hex_cells, hex_center, tri_cells,
                         tri_to_hex, flags, float(h))


def build_structured_trimesh(rect, h, diagonal_rule="alternating") -> TriMesh:
    """Triangulate `rect` on a uniform nx-by-ny grid of square-ish cells of
    side at most `h`, each split along one diagonal.

    diagonal_rule 'uniform' uses the same diagonal everywhere; 'alternating'
    flips it on a checkerboard, which caps vertex degree at 8.
    """
    rect = as_rect(rect)
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    if diagonal_rule not in ("alternating", "uniform"):
        raise ValueError(f"unknown diagonal_rule {diagonal_rule!r}")
    nx = max(1, math.ceil(rect.width / h - 1e-12))
    ny = max(1, math.ceil(rect.height / h - 1e-12))
    xs = np.linspace(rect.xmin, rect.xmax, nx + 1)
    ys = np.linspace(rect.ymin, rect.ymax, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def node(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = node(i, j), node(i + 1, j)
            v01, v11 = node(i, j + 1), node(i + 1, j + 1)
            up = diagonal_rule == "uniform" or (i + j) % 2 == 0
            if up:   # diagonal v00-v11
                tris.append((v00, v10, v11))
                tris.append((v00, v11, v01))
            else:    # diagonal v10-v01
                tris.append((v00, v10, v01))
                tris.append((v10, v11, v01))
    triangles = np.array(tris, dtype=np.int64)
    flags = _boundary_flags(len(vertices), triangles)
    return TriMesh(vertices, triangles, flags, float(h))


@dataclass(frozen=True)
class MeshDiagnostics:
    n_vertices: int
    n_triangles: int
    n_edges: int
    euler_characteristic: int
    min_area: float
    max_area: float
    max_aspect: float      # 1.0 for equilateral triangles
    min_aspect: float
    boundary_closed: bool


def validate(mesh) -> MeshDiagnostics:
    """Geometry and topology checks; raises on inverted elements.

    Aspect ratio is longest_edge * perimeter / (4*sqrt(3)*area), normalized to
    equal 1 on equilateral triangles. Boundary closure requires every boundary
    vertex to lie on exactly two boundary edges.
    """
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    areas = triangle_areas(tri.vertices, tri.triangles)
    bad = np.nonzero(areas <= 0)[0]
    if bad.size:
        raise InvertedElementError(
            f"triangle {bad[0]} has non-positive area {areas[bad[0]]:.3e}")

    p = tri.tri_coords()
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
    lengths = np.linalg.norm(e, axis=2)
    longest = lengths.max(axis=0)
    perimeter = lengths.sum(axis=0)
    aspect = longest * perimeter / (4.0 * math.sqrt(3.0) * areas)

    edges = np.concatenate([tri.triangles[:, [0, 1]], tri.triangles[:, [1, 2]],
                            tri.triangles[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    boundary_edges = uniq[counts == 1]
    deg = np.bincount(boundary_edges.ravel(), minlength=tri.n_vertices)
    closed = bool(np.all(deg[deg > 0] == 2))

    if isinstance(mesh, HoneycombMesh):
        hex_a = mesh.hex_areas()
        exact = 3.0 * math.sqrt(3.0) / 8.0 * mesh.h ** 2
        if not np.allclose(hex_a, exact, rtol=1e-12):
            raise InvertedElementError("hexagon/triangle area mismatch")

    return MeshDiagnostics(
        n_vertices=tri.n_vertices,
        n_triangles=tri.n_triangles,
        n_edges=len(uniq),
        euler_characteristic=tri.n_vertices - len(uniq) + tri.n_triangles,
        min_area=float(areas.min()),
        max_area=float(areas.max()),
        max_aspect=float(aspect.max()),
        min_aspect=float(aspect.min()),
        boundary_closed=closed,
    )


def export_mesh_txt(mesh, path):
    """Plain-text dump with VERTICES / TRIANGLES / [HEXAGONS] / BOUNDARY sections."""
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    with open(path, "w") as f:
        f.write("VERTICES\n")
        for i, (x, y) in enumerate(tri.vertices):
            f.write(f"{i} {x:.17g} {y:.17g}\n")
        f.write("TRIANGLES\n")
        for i, t in enumerate(tri.triangles):
            f.write(f"{i} {t[0]} {t[1]} {t[2]}\n")
        if isinstance(mesh, HoneycombMesh):
            f.write("HEXAGONS\n")
            for i, hx in enumerate(mesh.hex_cells):
                f.write(f"{i} " + " ".join(str(v) for v in hx) + "\n")
        f.write("BOUNDARY\n")
        for i in np.nonzero(tri.boundary_vertex)[0]:
            f.write(f"{i}\n")


def export_mesh_csv(mesh, directory):
    """CSV dump, one file per section, columns in the same order as the text format."""
    import pathlib

    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "vertices.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "x", "y"])
        for i, (x, y) in enumerate(tri.vertices):
            w.writerow([i, f"{x:.17g}", f"{y:.17g}"])
    with open(directory / "triangles.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "v0", "v1", "v2"])
        for i, t in enumerate(tri.triangles):
            w.writerow([i, t[0], t[1], t[2]])
    if isinstance(mesh, HoneycombMesh):
        with open(directory / "hexagons.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "v0", "v1", "v2", "v3", "v4", "v5"])
            for i, hx in enumerate(mesh.hex_cells):
                w.writerow([i] + list(hx))
    with open(directory / "boundary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["vertex"])
        for i in np.nonzero(tri.boundary_vertex)[0]:
            w.writerow([i])
