"""Structured triangulations, subdomain splitting and Taylor-Hood numbering.

All lengths are in centimetres. Meshes are built from a uniform grid of
squares of side ``h``, each cut along its (i, j)-(i+1, j+1) diagonal, so
every vertex has integer grid coordinates ``grid = round(points / h)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

DIRICHLET_TAGS = ("inlet", "wall")
TOL = 1e-9


class MeshError(ValueError):
    """Raised for inconsistent mesh generation requests."""


@dataclass(frozen=True)
class Geometry:
    """Closed polygon with one boundary tag per edge.

    ``tags[k]`` labels the segment from ``vertices[k]`` to ``vertices[k+1]``.
    """

    vertices: tuple[tuple[float, float], ...]
    tags: tuple[str, ...]
    x_interface: float | None = None

    def __post_init__(self):
        if len(self.vertices) != len(self.tags):
            raise MeshError("one tag per polygon edge is required")

    @property
    def signed_area(self) -> float:
        v = np.asarray(self.vertices, dtype=float)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def segment_lengths(self) -> list[float]:
        v = np.asarray(self.vertices, dtype=float)
        return list(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1))


# Backward-facing step: 4 cm inlet duct of height 3 cm above a 2 cm step,
# followed by the 14 cm long, 5 cm high channel.
BFS_GEOMETRY = Geometry(
    vertices=((0.0, 2.0), (4.0, 2.0), (4.0, 0.0), (18.0, 0.0), (18.0, 5.0), (0.0, 5.0)),
    tags=("wall", "wall", "wall", "outlet", "wall", "inlet"),
    x_interface=9.0,
)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulation with integer grid coordinates and tagged edges.

    ``edges``/``edge_tags`` hold every boundary edge plus, when the mesh was
    generated with an interface abscissa, the interior edges on that line
    (tagged ``"interface"``).
    """

    points: np.ndarray
    grid: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_tags: np.ndarray
    h: float
    x_interface: float | None = None
    parent_vertices: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.points)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        p = self.points[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def centroids(self) -> np.ndarray:
        return self.points[self.triangles].mean(axis=1)

    def all_edges(self) -> np.ndarray:
        """Unique sorted vertex pairs, in lexicographic order."""
        return _unique_edges(self.triangles)

    def edges_with_tag(self, tag: str) -> np.ndarray:
        return self.edges[self.edge_tags == tag]

    def vertices_with_tag(self, tag: str) -> np.ndarray:
        return np.unique(self.edges_with_tag(tag))

    def tag_at(self, point) -> str | None:
        """Tag of the tagged edge containing ``point`` (None if there is none)."""
        q = np.asarray(point, dtype=float)
        a = self.points[self.edges[:, 0]]
        b = self.points[self.edges[:, 1]]
        ab = b - a
        aq = q - a
        cross = ab[:, 0] * aq[:, 1] - ab[:, 1] * aq[:, 0]
        t = np.einsum("ij,ij->i", aq, ab) / np.einsum("ij,ij->i", ab, ab)
        hit = (np.abs(cross) <= TOL * self.h) & (t >= -TOL) & (t <= 1 + TOL)
        tags = set(self.edge_tags[hit].tolist())
        if not tags:
            return None
        if len(tags) > 1:
            # corner point: prefer the interface, then Dirichlet tags
            for tag in ("interface", "inlet", "wall", "outlet"):
                if tag in tags:
                    return tag
        return tags.pop()

    def fingerprint(self) -> str:
        """SHA-256 over coordinates, connectivity and tags."""
        sha = hashlib.sha256()
        sha.update(np.ascontiguousarray(self.points, dtype="<f8").tobytes())
        sha.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        sha.update(np.ascontiguousarray(self.edges, dtype="<i8").tobytes())
        sha.update("|".join(self.edge_tags.tolist()).encode())
        sha.update(repr((float(self.h), self.x_interface)).encode())
        return sha.hexdigest()


@dataclass(frozen=True, eq=False)
class InterfaceMesh:
    """1D mesh of the interface line, vertices sorted by increasing y."""

    points: np.ndarray
    segments: np.ndarray
    x: float

    @property
    def length(self) -> float:
        return float(self.points[:, 1].max() - self.points[:, 1].min())

    @property
    def n_p2_nodes(self) -> int:
        return len(self.points) + len(self.segments)


def _grid_count(length: float, h: float, what: str) -> int:
    n = length / h
    k = int(round(n))
    if k <= 0 or abs(n - k) > TOL * max(1.0, n):
        raise MeshError(f"h={h!r} does not divide {what} length {length!r} (ratio {n:.6g})")
    return k


def _unique_edges(triangles: np.ndarray) -> np.ndarray:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _build(grid_cells: list[tuple[int, int]], h: float,
           tagger: Callable[[np.ndarray, np.ndarray], str],
           x_interface: float | None) -> Mesh:
    cells = np.array(sorted(grid_cells), dtype=np.int64)
    corners = np.concatenate([cells, cells + [1, 0], cells + [1, 1], cells + [0, 1]])
    grid = np.unique(corners, axis=0)  # lexicographic in (i, j), i.e. by x then y
    index = {tuple(g): k for k, g in enumerate(grid.tolist())}

    tris = []
    for i, j in cells.tolist():
        a, b, c, d = index[(i, j)], index[(i + 1, j)], index[(i + 1, j + 1)], index[(i, j + 1)]
        tris.append((a, b, c))
        tris.append((a, c, d))
    triangles = np.array(tris, dtype=np.int64)
    points = grid.astype(float) * h

    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    boundary = uniq[counts == 1]
    tags = [tagger(points[a], points[b]) for a, b in boundary.tolist()]
    edges = [tuple(x) for x in boundary.tolist()]
    if x_interface is not None:
        i_gamma = _grid_count(x_interface, h, "interface abscissa")
        interior = uniq[counts == 2]
        on_line = (grid[interior[:, 0], 0] == i_gamma) & (grid[interior[:, 1], 0] == i_gamma)
        edges += [tuple(x) for x in interior[on_line].tolist()]
        tags += ["interface"] * int(on_line.sum())
    order = sorted(range(len(edges)), key=lambda k: edges[k])
    return Mesh(points=points, grid=grid, triangles=triangles,
                edges=np.array([edges[k] for k in order], dtype=np.int64).reshape(-1, 2),
                edge_tags=np.array([tags[k] for k in order]),
                h=float(h), x_interface=x_interface)


def generate_bfs_mesh(h: float = 0.5, x_interface: float = 9.0) -> Mesh:
    """Structured mesh of the backward-facing step with an interface line.

    The step polygon is (0,2)-(4,2)-(4,0)-(18,0)-(18,5)-(0,5). ``h`` has to
    divide every segment length and ``x_interface`` has to lie on a grid line
    strictly inside the channel part, 4 < x < 18.
    """
    for length in BFS_GEOMETRY.segment_lengths:
        _grid_count(length, h, "step geometry segment")
    if not 4.0 < x_interface < 18.0:
        raise MeshError(f"interface abscissa {x_interface} outside (4, 18)")
    n = x_interface / h
    if abs(n - round(n)) > TOL * max(1.0, n):
        raise MeshError(f"interface x={x_interface} is off the grid of spacing h={h}")
    nx, ny = _grid_count(18.0, h, "channel"), _grid_count(5.0, h, "channel height")
    ix_step, jy_step = _grid_count(4.0, h, "inlet duct"), _grid_count(2.0, h, "step")
    cells = [(i, j) for i in range(nx) for j in range(ny) if not (i < ix_step and j < jy_step)]

    def tagger(a, b):
        if abs(a[0]) < TOL and abs(b[0]) < TOL:
            return "inlet"
        if abs(a[0] - 18.0) < TOL and abs(b[0] - 18.0) < TOL:
            return "outlet"
        return "wall"

    return _build(cells, h, tagger, float(x_interface))


def generate_rect_mesh(lx: float, ly: float, h: float, x_interface: float | None = None) -> Mesh:
    """Structured mesh of [0, lx] x [0, ly]; inlet x=0, outlet x=lx, walls y=0, ly."""
    nx = _grid_count(lx, h, "rectangle")
    ny = _grid_count(ly, h, "rectangle")
    cells = [(i, j) for i in range(nx) for j in range(ny)]

    def tagger(a, b):
        if abs(a[0]) < TOL and abs(b[0]) < TOL:
            return "inlet"
        if abs(a[0] - lx) < TOL and abs(b[0] - lx) < TOL:
            return "outlet"
        return "wall"

    return _build(cells, h, tagger, x_interface)


def parse_length(value) -> float:
    """Accept floats or exact fractions such as ``"1/6"``."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


def _submesh(mesh: Mesh, keep: np.ndarray, x_interface: float) -> Mesh:
    tris = mesh.triangles[keep]
    used = np.unique(tris)
    local = -np.ones(mesh.n_vertices, dtype=np.int64)
    local[used] = np.arange(len(used))
    triangles = local[tris]
    sub_edges = {tuple(e) for e in _unique_edges(triangles).tolist()}
    edges, tags = [], []
    for (a, b), tag in zip(mesh.edges.tolist(), mesh.edge_tags.tolist()):
        la, lb = local[a], local[b]
        if la < 0 or lb < 0:
            continue
        pair = (min(la, lb), max(la, lb))
        if pair in sub_edges:
            edges.append(pair)
            tags.append(tag)
    i_gamma = int(round(x_interface / mesh.h))
    grid = mesh.grid[used]
    have = set(edges)
    for a, b in sorted(sub_edges):
        if grid[a, 0] == i_gamma and grid[b, 0] == i_gamma and (a, b) not in have:
            edges.append((a, b))
            tags.append("interface")
    order = sorted(range(len(edges)), key=lambda k: edges[k])
    return Mesh(points=mesh.points[used], grid=grid, triangles=triangles,
                edges=np.array([edges[k] for k in order], dtype=np.int64).reshape(-1, 2),
                edge_tags=np.array([tags[k] for k in order]),
                h=mesh.h, x_interface=x_interface, parent_vertices=used)


def decompose(mesh: Mesh, x_interface: float | None = None) -> tuple[Mesh, Mesh, InterfaceMesh]:
    """Split ``mesh`` along the vertical line x = x_interface.

    Triangles left of the line form the first subdomain. Boundary tags are
    inherited; the shared edges are tagged ``"interface"`` in both parts.
    """
    if x_interface is None:
        x_interface = mesh.x_interface
    if x_interface is None:
        raise MeshError("no interface abscissa given")
    x = mesh.points[mesh.triangles][:, :, 0]
    left = np.all(x <= x_interface + TOL, axis=1)
    right = np.all(x >= x_interface - TOL, axis=1)
    if not np.all(left | right):
        raise MeshError(f"line x={x_interface} crosses triangles; interface is not edge-aligned")
    if not left.any() or not right.any():
        raise MeshError(f"line x={x_interface} does not split the mesh")
    m1 = _submesh(mesh, left, x_interface)
    m2 = _submesh(mesh, right, x_interface)
    gamma = m1.parent_vertices[m1.vertices_with_tag("interface")]
    gamma = gamma[np.argsort(mesh.points[gamma, 1], kind="stable")]
    pts = mesh.points[gamma]
    segs = np.column_stack([np.arange(len(pts) - 1), np.arange(1, len(pts))])
    return m1, m2, InterfaceMesh(points=pts, segments=segs, x=float(x_interface))


@dataclass(frozen=True, eq=False)
class DofMap:
    """Taylor-Hood P2/P1 numbering.

    P2 nodes (vertices and edge midpoints) are numbered lexicographically by
    coordinate (x, then y); velocity DoF ``2*node + component``. Pressure DoF
    ``k`` is mesh vertex ``k``. ``cell_nodes`` lists, per triangle, its three
    vertex nodes followed by the midpoints of edges (0,1), (1,2), (2,0).
    """

    node_coords: np.ndarray
    node_grid2: np.ndarray
    cell_nodes: np.ndarray
    vertex_node: np.ndarray
    node_tags: dict = field(repr=False)
    interface_nodes: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def n_velocity(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_pressure(self) -> int:
        return len(self.vertex_node)

    @property
    def n_trace(self) -> int:
        return 2 * len(self.interface_nodes)

    def nodes_with_tags(self, tags) -> np.ndarray:
        found = [self.node_tags[t] for t in tags if t in self.node_tags]
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(found))

    def dirichlet_dofs(self, tags=DIRICHLET_TAGS) -> np.ndarray:
        return velocity_dofs(self.nodes_with_tags(tags))

    def interface_dofs(self) -> np.ndarray:
        """Velocity DoFs on the interface, in trace-space order."""
        return velocity_dofs(self.interface_nodes)


def velocity_dofs(nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64)
    return np.column_stack([2 * nodes, 2 * nodes + 1]).ravel()


def build_dofmap(mesh: Mesh) -> DofMap:
    nv = mesh.n_vertices
    edges = mesh.all_edges()
    g2 = np.concatenate([2 * mesh.grid, mesh.grid[edges[:, 0]] + mesh.grid[edges[:, 1]]])
    order = np.lexsort((g2[:, 1], g2[:, 0]))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    vertex_node = rank[:nv]
    edge_node = rank[nv:]
    edge_index = {tuple(e): k for k, e in enumerate(edges.tolist())}

    def mid(a, b):
        return edge_node[edge_index[(min(a, b), max(a, b))]]

    tri = mesh.triangles
    cell_nodes = np.empty((len(tri), 6), dtype=np.int64)
    cell_nodes[:, :3] = vertex_node[tri]
    for k, (a, b, c) in enumerate(tri.tolist()):
        cell_nodes[k, 3:] = (mid(a, b), mid(b, c), mid(c, a))

    node_grid2 = g2[order]
    node_coords = node_grid2 * (mesh.h / 2.0)
    node_tags: dict[str, np.ndarray] = {}
    for tag in np.unique(mesh.edge_tags).tolist():
        tagged = mesh.edges_with_tag(tag)
        nodes = [vertex_node[tagged[:, 0]], vertex_node[tagged[:, 1]],
                 np.array([mid(a, b) for a, b in tagged.tolist()], dtype=np.int64)]
        node_tags[tag] = np.unique(np.concatenate(nodes))
    gamma = node_tags.get("interface", np.zeros(0, dtype=np.int64))
    gamma = gamma[np.argsort(node_grid2[gamma, 1], kind="stable")]
    return DofMap(node_coords=node_coords, node_grid2=node_grid2, cell_nodes=cell_nodes,
                  vertex_node=vertex_node, node_tags=node_tags, interface_nodes=gamma)


def node_correspondence(child: DofMap, parent: DofMap) -> np.ndarray:
    """For each node of ``child`` the parent node with identical grid coordinates."""
    lookup = {tuple(g): k for k, g in enumerate(parent.node_grid2.tolist())}
    return np.array([lookup[tuple(g)] for g in child.node_grid2.tolist()], dtype=np.int64)


def write_mesh(mesh: Mesh, path) -> None:
    """Plain-text dump: vertex, triangle and tagged-edge blocks.

    Columns: ``v <index> <x> <y>``, ``t <index> <v0> <v1> <v2>``,
    ``e <v0> <v1> <tag>``.
    """
    with open(path, "w") as fh:
        fh.write(f"# h={mesh.h!r} x_interface={mesh.x_interface!r}\n")
        for k, (x, y) in enumerate(mesh.points.tolist()):
            fh.write(f"v {k} {x!r} {y!r}\n")
        for k, (a, b, c) in enumerate(mesh.triangles.tolist()):
            fh.write(f"t {k} {a} {b} {c}\n")
        for (a, b), tag in zip(mesh.edges.tolist(), mesh.edge_tags.tolist()):
            fh.write(f"e {a} {b} {tag}\n")
