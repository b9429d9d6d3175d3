"""Tetrahedral meshes, embedded surfaces and barycentric point embeddings.

Geometry is held in plain numpy arrays: nodes are float64 (n, 3) positions in
meters, connectivity is int32. Surfaces used for cavity walls share their
vertices with the body mesh (they are index sets, not independent geometry),
so pressurising a cavity loads body nodes directly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class MeshError(Exception):
    """Raised for malformed meshes, bad files or failed embeddings."""


def _as_points(a, name="nodes"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise MeshError(f"{name} must have shape (n, 3), got {a.shape}")
    if not np.isfinite(a).all():
        raise MeshError(f"{name} contain non-finite values")
    return a


def tet_volumes(nodes, tets):
    """Signed volumes, positive for positively oriented tets."""
    x = nodes[tets]
    d = x[:, 1:] - x[:, :1]
    return np.linalg.det(d) / 6.0


@dataclass
class TetMesh:
    """Tetrahedral body mesh.

    tets are positively oriented (checked on construction). material_tags
    selects the material per element; 0 is the default (soft) material.
    fixed_nodes lists clamped node indices and may be empty for meshes that
    are only inspected, never simulated.
    """

    nodes: np.ndarray
    tets: np.ndarray
    fixed_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    material_tags: np.ndarray | None = None
    # how many tets a loader had to re-orient to make volumes positive
    orientation_fixes: int = 0

    def __post_init__(self):
        self.nodes = _as_points(self.nodes)
        self.tets = np.asarray(self.tets, dtype=np.int32)
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshError(f"tets must have shape (m, 4), got {self.tets.shape}")
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.nodes)):
            raise MeshError("tet indices out of range")
        self.fixed_nodes = np.asarray(self.fixed_nodes, dtype=np.int32)
        if self.fixed_nodes.size and (
            self.fixed_nodes.min() < 0 or self.fixed_nodes.max() >= len(self.nodes)
        ):
            raise MeshError("fixed node indices out of range")
        if self.material_tags is None:
            self.material_tags = np.zeros(len(self.tets), dtype=np.int32)
        else:
            self.material_tags = np.asarray(self.material_tags, dtype=np.int32)
            if self.material_tags.shape != (len(self.tets),):
                raise MeshError("material_tags must have one entry per tet")
        vols = tet_volumes(self.nodes, self.tets)
        bad = np.flatnonzero(vols <= 0.0)
        if bad.size:
            raise MeshError(f"{bad.size} non-positive tet volumes, first at element {bad[0]}")

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_tets(self):
        return len(self.tets)

    def diameter(self):
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return float(np.linalg.norm(hi - lo))


@dataclass
class SurfaceMesh:
    """Triangle surface whose vertices reference body-mesh nodes.

    Triangles index into node_indices (local indexing). For closed surfaces
    the orientation convention is: normals point out of the enclosed volume.
    Cavity walls therefore have normals pointing into the surrounding
    material, which is the direction internal pressure pushes.
    """

    node_indices: np.ndarray
    triangles: np.ndarray
    closed: bool = False

    def __post_init__(self):
        self.node_indices = np.asarray(self.node_indices, dtype=np.int32)
        self.triangles = np.asarray(self.triangles, dtype=np.int32)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError(f"triangles must have shape (t, 3), got {self.triangles.shape}")
        if self.triangles.size and self.triangles.max() >= len(self.node_indices):
            raise MeshError("triangle indices out of range")
        if self.closed:
            self._check_closed()

    def _check_closed(self):
        # every edge must be shared by exactly two triangles, with opposite
        # winding (consistent orientation of a watertight surface)
        edges = {}
        for t, (a, b, c) in enumerate(self.triangles):
            for u, v in ((a, b), (b, c), (c, a)):
                key = (min(u, v), max(u, v))
                edges.setdefault(key, []).append(u < v)
        for key, dirs in edges.items():
            if len(dirs) != 2 or dirs[0] == dirs[1]:
                raise MeshError(f"surface not closed/consistently oriented at edge {key}")

    def positions(self, nodes):
        return nodes[self.node_indices]

    def area_normals(self, nodes):
        """Per-triangle area-weighted normals (area * unit normal)."""
        p = nodes[self.node_indices][self.triangles]
        return 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


@dataclass
class BarycentricEmbedding:
    """Points attached to tets by barycentric weights.

    Weights of interior points are exact (may undershoot zero by roundoff
    only); points snapped onto the mesh from outside have clamped,
    renormalized weights.
    """

    tet_indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.tet_indices = np.asarray(self.tet_indices, dtype=np.int32)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.tet_indices), 4):
            raise MeshError("weights must have shape (p, 4)")

    def positions(self, mesh, q=None):
        """Reconstruct point positions from node positions q (defaults to rest)."""
        nodes = mesh.nodes if q is None else q
        corner = nodes[mesh.tets[self.tet_indices]]
        return np.einsum("pi,pij->pj", self.weights, corner)

    def __len__(self):
        return len(self.tet_indices)


def embed_points(mesh, points, snap_distance=1e-6):
    """Embed points into the mesh, returning a BarycentricEmbedding.

    Each point must lie inside a tet (up to roundoff) or within
    snap_distance of one, in which case its weights are clamped to the tet.
    Raises MeshError naming the first offending point otherwise.
    """
    points = _as_points(np.atleast_2d(points), "points")
    x = mesh.nodes[mesh.tets]
    base = x[:, 0]
    dm = np.transpose(x[:, 1:] - x[:, :1], (0, 2, 1))
    dm_inv = np.linalg.inv(dm)
    # altitude of each tet vertex, for converting barycentric deficits to meters
    vols = tet_volumes(mesh.nodes, mesh.tets)
    face_of = [(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)]
    alt = np.empty((mesh.num_tets, 4))
    for v, (a, b, c) in enumerate(face_of):
        n = 0.5 * np.cross(x[:, b] - x[:, a], x[:, c] - x[:, a])
        area = np.linalg.norm(n, axis=1)
        alt[:, v] = 3.0 * vols / np.maximum(area, 1e-300)

    centroids = x.mean(axis=1)
    tree = cKDTree(centroids)
    k = min(32, mesh.num_tets)
    _, cand = tree.query(points, k=k)
    cand = np.asarray(cand, dtype=int).reshape(len(points), k)

    tet_idx = np.empty(len(points), dtype=np.int32)
    weights = np.empty((len(points), 4))
    for p in range(len(points)):
        best = None
        for t in cand[p]:
            loc = dm_inv[t] @ (points[p] - base[t])
            w = np.array([1.0 - loc.sum(), loc[0], loc[1], loc[2]])
            # distance estimate: worst barycentric deficit scaled by altitude
            deficit = np.maximum(-w, 0.0) * alt[t]
            d = deficit.max()
            if best is None or d < best[0]:
                best = (d, t, w)
            if d == 0.0:
                break
        d, t, w = best
        if d > snap_distance:
            raise MeshError(
                f"point {p} at {points[p]} lies {d:.3e} m outside the mesh "
                f"(snap distance {snap_distance:.3e})"
            )
        if d > 0.0:
            w = np.maximum(w, 0.0)
            w = w / w.sum()
        tet_idx[p] = t
        weights[p] = w
    return BarycentricEmbedding(tet_idx, weights)


# ---------------------------------------------------------------------------
# file I/O


def load_tet_mesh(path):
    """Read a legacy ASCII VTK unstructured grid of tetrahedra."""
    with open(path, "r") as f:
        lines = f.read().splitlines()

    def fail(lineno, msg):
        raise MeshError(f"{os.path.basename(path)}:{lineno + 1}: {msg}")

    # tokenize keeping line numbers so errors can point at the input
    tokens = []
    for ln, line in enumerate(lines):
        for tok in line.split():
            tokens.append((ln, tok))
    pos = 0

    def next_tok():
        nonlocal pos
        if pos >= len(tokens):
            raise MeshError(f"{os.path.basename(path)}: unexpected end of file")
        t = tokens[pos]
        pos += 1
        return t

    if not lines or not lines[0].startswith("# vtk DataFile"):
        fail(0, "missing VTK header")
    # skip header and title lines in the token stream
    while pos < len(tokens) and tokens[pos][0] < 2:
        pos += 1
    ln, fmt = next_tok()
    if fmt.upper() != "ASCII":
        fail(ln, f"only ASCII files supported, got {fmt!r}")
    ln, kw = next_tok()
    if kw.upper() != "DATASET":
        fail(ln, f"expected DATASET, got {kw!r}")
    ln, kind = next_tok()
    if kind.upper() != "UNSTRUCTURED_GRID":
        fail(ln, f"expected UNSTRUCTURED_GRID, got {kind!r}")

    ln, kw = next_tok()
    if kw.upper() != "POINTS":
        fail(ln, f"expected POINTS, got {kw!r}")
    ln, n = next_tok()
    n = int(n)
    next_tok()  # dtype, ignored
    coords = np.empty(3 * n)
    for i in range(3 * n):
        ln, tok = next_tok()
        try:
            coords[i] = float(tok)
        except ValueError:
            fail(ln, f"bad coordinate {tok!r}")
    nodes = coords.reshape(n, 3)

    ln, kw = next_tok()
    if kw.upper() != "CELLS":
        fail(ln, f"expected CELLS, got {kw!r}")
    ln, m = next_tok()
    m = int(m)
    next_tok()  # total size, ignored
    tets = np.empty((m, 4), dtype=np.int32)
    for i in range(m):
        ln, cnt = next_tok()
        if int(cnt) != 4:
            fail(ln, f"cell {i} has {cnt} vertices, only tetrahedra supported")
        for j in range(4):
            ln, tok = next_tok()
            tets[i, j] = int(tok)

    ln, kw = next_tok()
    if kw.upper() != "CELL_TYPES":
        fail(ln, f"expected CELL_TYPES, got {kw!r}")
    next_tok()
    for i in range(m):
        ln, tok = next_tok()
        if int(tok) != 10:
            fail(ln, f"cell {i} has VTK type {tok}, expected 10 (tetrahedron)")

    # repair orientation: flip negatively oriented tets
    vols = np.linalg.det(nodes[tets][:, 1:] - nodes[tets][:, :1]) / 6.0
    flip = vols < 0
    if flip.any():
        tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return TetMesh(nodes=nodes, tets=tets, orientation_fixes=int(flip.sum()))


def save_tet_mesh(path, mesh, title="tet mesh"):
    """Write a legacy ASCII VTK unstructured grid."""
    with open(path, "w", newline="\n") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.num_nodes} double\n")
        for p in mesh.nodes:
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        f.write(f"CELLS {mesh.num_tets} {5 * mesh.num_tets}\n")
        for t in mesh.tets:
            f.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        f.write(f"CELL_TYPES {mesh.num_tets}\n")
        for _ in range(mesh.num_tets):
            f.write("10\n")


def save_surface_obj(path, surface, nodes):
    """Write a surface as a Wavefront OBJ (v/f records)."""
    pts = surface.positions(nodes)
    with open(path, "w", newline="\n") as f:
        for p in pts:
            f.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for a, b, c in surface.triangles + 1:
            f.write(f"f {a} {b} {c}\n")


def load_surface_obj(path):
    """Read an OBJ written by save_surface_obj; returns (vertices, triangles)."""
    verts = []
    tris = []
    with open(path, "r") as f:
        for ln, line in enumerate(f):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) != 4:
                    raise MeshError(f"{os.path.basename(path)}:{ln + 1}: bad vertex record")
                verts.append([float(x) for x in parts[1:]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshError(f"{os.path.basename(path)}:{ln + 1}: only triangles supported")
                tris.append([int(x.split("/")[0]) - 1 for x in parts[1:]])
            else:
                raise MeshError(
                    f"{os.path.basename(path)}:{ln + 1}: unsupported record {parts[0]!r}"
                )
    return np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int32)
