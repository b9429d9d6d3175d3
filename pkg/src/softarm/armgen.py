"""Procedural two-segment pneumatic arm mesh generator.

The arm is a tapered cylinder built from a structured cylindrical grid:
rings x sectors cross-sections stacked along z, triangulated into prisms and
split into tetrahedra. Axial layout from the clamped base upward:

    base rigid | soft segment 1 | intermediate rigid | soft segment 2 | tip rigid

Each soft segment carries three air chambers carved out of the middle radial
band at 120 degree spacing, each sealed by at least one element of material
on every side. Circumferential fiber loops sit in the outer wall across the
chamber span. All derived geometry (cavity walls, effector node sets, fiber
points) references mesh nodes or barycentric embeddings, never copies.

Generation is pure arithmetic with no RNG: repeat calls are bitwise equal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .mesh import TetMesh, SurfaceMesh, MeshError, tet_volumes


@dataclass
class ArmParams:
    """Geometry and resolution knobs for generate_arm.

    Lengths in meters. chamber_arc_fraction is the angular extent of one
    chamber as a fraction of the full circle, so refining `sectors` keeps
    the physical geometry fixed.
    """

    base_radius: float = 0.03
    tip_radius: float = 0.02
    soft_height: float = 0.09
    rigid_height: float = 0.02
    segment_count: int = 2
    chambers_per_segment: int = 3
    chamber_arc_fraction: float = 1.0 / 6.0
    radial_fractions: tuple = (0.45, 0.8, 1.0)
    # resolution controls
    sectors: int = 12
    soft_layers: int = 10
    rigid_layers: int = 2
    cap_layers: int = 1
    # fiber reinforcement (loop points follow the sector rays)
    fiber_loops_per_chamber: int = 8

    def __post_init__(self):
        self.radial_fractions = tuple(float(f) for f in self.radial_fractions)
        if not (0.0 < self.tip_radius <= self.base_radius):
            raise MeshError("need 0 < tip_radius <= base_radius")
        if self.soft_height <= 0 or self.rigid_height <= 0:
            raise MeshError("section heights must be positive")
        if len(self.radial_fractions) != 3:
            raise MeshError("radial_fractions must have 3 entries (core, chamber, wall)")
        f = self.radial_fractions
        if not (0.0 < f[0] < f[1] < f[2] == 1.0):
            raise MeshError("radial_fractions must increase strictly and end at 1.0")
        if self.segment_count < 1:
            raise MeshError("need at least one soft segment")
        if self.chambers_per_segment < 1:
            raise MeshError("need at least one chamber per segment")
        if self.chamber_width_sectors < 1:
            raise MeshError("chamber_arc_fraction too small for sector count")
        if self.chambers_per_segment * (self.chamber_width_sectors + 1) > self.sectors:
            raise MeshError("chambers do not fit: no material gap left between them")
        if self.cap_layers < 1:
            raise MeshError("cap_layers must be >= 1 so chambers are sealed")
        if self.soft_layers <= 2 * self.cap_layers:
            raise MeshError("soft_layers must exceed 2*cap_layers")
        if self.rigid_layers < 1:
            raise MeshError("rigid_layers must be >= 1")
        if self.fiber_loops_per_chamber < 0:
            raise MeshError("fiber_loops_per_chamber must be >= 0")

    @property
    def chamber_width_sectors(self):
        return max(1, round(self.chamber_arc_fraction * self.sectors))

    @property
    def total_height(self):
        return (self.segment_count + 1) * self.rigid_height + self.segment_count * self.soft_height

    def scaled(self, factor):
        """Copy with all resolution controls scaled by factor (>= 1 refines)."""
        return ArmParams(
            base_radius=self.base_radius,
            tip_radius=self.tip_radius,
            soft_height=self.soft_height,
            rigid_height=self.rigid_height,
            segment_count=self.segment_count,
            chambers_per_segment=self.chambers_per_segment,
            chamber_arc_fraction=self.chamber_arc_fraction,
            radial_fractions=self.radial_fractions,
            sectors=max(6, int(round(self.sectors * factor))),
            soft_layers=max(2 * self.cap_layers + 1, int(round(self.soft_layers * factor))),
            rigid_layers=max(1, int(round(self.rigid_layers * factor))),
            cap_layers=self.cap_layers,
            fiber_loops_per_chamber=self.fiber_loops_per_chamber,
        )

    def to_dict(self):
        d = asdict(self)
        d["radial_fractions"] = list(self.radial_fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "radial_fractions" in d:
            d["radial_fractions"] = tuple(d["radial_fractions"])
        return cls(**d)


@dataclass
class ChamberInfo:
    segment: int            # 0 = lower soft segment, 1 = upper
    index_in_segment: int
    center_angle: float     # radians, at rest
    sectors: tuple
    prism_layers: tuple     # half-open range of prism layers carved out


@dataclass
class ArmGeometry:
    """generate_arm output: mesh plus everything the scene needs to wire up."""

    params: ArmParams
    mesh: TetMesh
    cavities: list          # SurfaceMesh per chamber, segment-major order
    skin: SurfaceMesh       # outer surface, normals outward
    chambers: list          # ChamberInfo per chamber
    effector_names: list    # one per rigid section above a segment, base-up
    effector_nodes: list    # node index array per effector
    effector_points: list   # axis point at each effector section's mid-height
    fiber_points: np.ndarray    # (p, 3) rest positions of fiber loop points
    fiber_loops: list           # index arrays into fiber_points, each a closed loop
    z_layers: np.ndarray
    sections: dict          # section name -> (first layer, last layer) inclusive

    # the canonical two-segment arm reads naturally as e1 (intermediate
    # rigid section) and e2 (tip)
    @property
    def e1_nodes(self):
        return self.effector_nodes[0]

    @property
    def e2_nodes(self):
        return self.effector_nodes[-1]

    @property
    def e1_point(self):
        return self.effector_points[0]

    @property
    def e2_point(self):
        return self.effector_points[-1]


def _cross_section_topology(params):
    """2D triangulation shared by every layer.

    Returns local triangles (t, 3), plus per-triangle band and sector indices.
    Vertex 0 is the center; vertex 1 + r*sectors + s sits on ring r, sector s.
    """
    n = params.sectors
    tris = []
    band = []
    sector = []

    def vid(r, s):
        return 1 + r * n + (s % n)

    for s in range(n):
        tris.append((0, vid(0, s), vid(0, s + 1)))
        band.append(0)
        sector.append(s)
    for r in range(2):
        for s in range(n):
            a, b = vid(r, s), vid(r, s + 1)
            c, d = vid(r + 1, s + 1), vid(r + 1, s)
            if min(a, b, c, d) in (a, c):
                quad_tris = [(a, b, c), (a, c, d)]
            else:
                quad_tris = [(b, c, d), (b, d, a)]
            for t in quad_tris:
                tris.append(t)
                band.append(r + 1)
                sector.append(s)
    return np.asarray(tris, dtype=np.int64), np.asarray(band), np.asarray(sector)


def _split_prism(bottom, top):
    """Split a prism into 3 tets conforming with min-index face diagonals."""
    b = list(bottom)
    t = list(top)
    # rotate so the smallest bottom index leads; both side quads at that
    # vertex then take their diagonal through it
    k = int(np.argmin(b))
    b = b[k:] + b[:k]
    t = t[k:] + t[:k]
    p0, p1, p2 = b
    q0, q1, q2 = t
    if p1 < p2:
        return [(p0, p1, p2, q2), (p0, p1, q2, q1), (p0, q1, q2, q0)]
    return [(p0, p1, p2, q1), (p0, p2, q1, q2), (p0, q1, q2, q0)]


def _chamber_sectors(params, idx):
    n = params.sectors
    w = params.chamber_width_sectors
    start = round(idx * n / params.chambers_per_segment - w / 2)
    return tuple((start + i) % n for i in range(w))


# outward-oriented faces of a positively oriented tet (v0, v1, v2, v3)
_TET_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


def _boundary_faces(tets):
    """Oriented boundary triangles of a tet set (faces owned by one tet)."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
    key = key[order]
    faces = faces[order]
    same_next = np.zeros(len(key), dtype=bool)
    same_next[:-1] = (key[:-1] == key[1:]).all(axis=1)
    same_prev = np.zeros(len(key), dtype=bool)
    same_prev[1:] = same_next[:-1]
    return faces[~(same_next | same_prev)]


def _face_components(faces):
    """Group faces into edge-connected components (union-find)."""
    parent = np.arange(len(faces))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    edge_owner = {}
    for fi, (a, b, c) in enumerate(faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            if key in edge_owner:
                ra, rb = find(edge_owner[key]), find(fi)
                if ra != rb:
                    parent[rb] = ra
            else:
                edge_owner[key] = fi
    roots = np.array([find(i) for i in range(len(faces))])
    comps = []
    for r in np.unique(roots):
        comps.append(np.flatnonzero(roots == r))
    return comps


def _local_surface(faces, closed):
    nodes = np.unique(faces)
    remap = np.full(faces.max() + 1, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    return SurfaceMesh(node_indices=nodes, triangles=remap[faces], closed=closed)


def generate_arm(params=None):
    """Build the arm mesh and all attached geometry. Deterministic."""
    p = params or ArmParams()
    n = p.sectors
    tris2d, band2d, sector2d = _cross_section_topology(p)
    section_verts = 1 + 3 * n

    # axial layer grid; sections hold inclusive layer index ranges. Rigid
    # sections and soft segments alternate, rigid at both ends.
    rigid_names = ["base"] + [f"mid{k}" for k in range(1, p.segment_count)] + ["tip"]
    names, counts, heights = [], [], []
    for k in range(p.segment_count):
        names += [rigid_names[k], f"soft{k + 1}"]
        counts += [p.rigid_layers, p.soft_layers]
        heights += [p.rigid_height, p.soft_height]
    names.append(rigid_names[-1])
    counts.append(p.rigid_layers)
    heights.append(p.rigid_height)
    z_layers = [0.0]
    sections = {}
    layer0 = 0
    for name, cnt, h in zip(names, counts, heights):
        z0 = z_layers[-1]
        for i in range(cnt):
            z_layers.append(z0 + h * (i + 1) / cnt)
        sections[name] = (layer0, layer0 + cnt)
        layer0 += cnt
    z_layers = np.asarray(z_layers)
    num_layers = len(z_layers)  # cross-sections; prisms span num_layers - 1

    # nodes: per layer, center + 3 rings scaled by the taper
    taper = p.base_radius + (p.tip_radius - p.base_radius) * z_layers / p.total_height
    angles = 2 * np.pi * np.arange(n) / n
    ring_unit = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    nodes = np.zeros((num_layers * section_verts, 3))
    for l, z in enumerate(z_layers):
        base = l * section_verts
        nodes[base, :] = (0.0, 0.0, z)
        for r, frac in enumerate(p.radial_fractions):
            rows = base + 1 + r * n + np.arange(n)
            nodes[rows, :2] = ring_unit * (frac * taper[l])
            nodes[rows, 2] = z

    # chamber bookkeeping: which (triangle, prism layer) pairs are carved out
    chambers = []
    soft_ranges = [sections[f"soft{k + 1}"] for k in range(p.segment_count)]
    for seg, (lo, hi) in enumerate(soft_ranges):
        for c in range(p.chambers_per_segment):
            secs = _chamber_sectors(p, c)
            starts = np.array([2 * np.pi * s / n for s in secs])
            # circular mean of the sector start angles plus half a sector
            ang = np.angle(np.exp(1j * starts).mean()) + np.pi / n
            chambers.append(
                ChamberInfo(
                    segment=seg,
                    index_in_segment=c,
                    center_angle=float(ang % (2 * np.pi)),
                    sectors=secs,
                    prism_layers=(lo + p.cap_layers, hi - p.cap_layers),
                )
            )

    # chamber footprints are identical in both segments; per-triangle index
    # within a segment, -1 outside any chamber
    tri_in_chamber = np.full(len(tris2d), -1, dtype=np.int64)
    for c in range(p.chambers_per_segment):
        mask = (band2d == 1) & np.isin(sector2d, chambers[c].sectors)
        tri_in_chamber[mask] = c

    tets = []
    void_owner = {}  # removed prism -> chamber id, kept for sanity checks
    for l in range(num_layers - 1):
        seg = None
        for s, (lo, hi) in enumerate(soft_ranges):
            if lo <= l < hi:
                seg = s
        offset = l * section_verts
        for ti, tri in enumerate(tris2d):
            carved = False
            if seg is not None and tri_in_chamber[ti] >= 0:
                ci = seg * p.chambers_per_segment + tri_in_chamber[ti]
                lo, hi = chambers[ci].prism_layers
                if lo <= l < hi:
                    carved = True
                    void_owner[(l, ti)] = ci
            if not carved:
                bottom = tri + offset
                top = bottom + section_verts
                tets.extend(_split_prism(bottom, top))

    tets = np.asarray(tets, dtype=np.int64)
    vols = tet_volumes(nodes, tets)
    neg = vols < 0
    if neg.any():
        tets[neg] = tets[neg][:, [0, 2, 1, 3]]

    # material tags: rigid sections get tag 1
    zmid = nodes[tets, 2].mean(axis=1)
    tags = np.zeros(len(tets), dtype=np.int32)
    for name in rigid_names:
        lo, hi = sections[name]
        tags[(zmid > z_layers[lo]) & (zmid < z_layers[hi])] = 1

    # drop unused nodes (cavity interiors keep no vertices of their own, but
    # the structured grid may leave none unused; compact defensively anyway)
    used = np.zeros(len(nodes), dtype=bool)
    used[tets.ravel()] = True
    remap = np.cumsum(used) - 1
    nodes = nodes[used]
    tets = remap[tets]

    base_lo, base_hi = sections["base"]
    fixed_sections = np.arange(base_lo, base_hi + 1)
    fixed = np.unique(
        np.concatenate(
            [np.arange(l * section_verts, (l + 1) * section_verts) for l in fixed_sections]
        )
    )
    fixed = remap[fixed[used[fixed]]]

    mesh = TetMesh(nodes=nodes, tets=tets, fixed_nodes=fixed, material_tags=tags)

    # boundary extraction: one outer skin plus one closed wall per chamber
    bfaces = _boundary_faces(np.asarray(mesh.tets, dtype=np.int64))
    comps = _face_components(bfaces)
    outer_idx = None
    radius = np.linalg.norm(mesh.nodes[:, :2], axis=1)
    best_r = -1.0
    for i, comp in enumerate(comps):
        r = radius[np.unique(bfaces[comp])].max()
        if r > best_r:
            best_r = r
            outer_idx = i
    skin = _local_surface(bfaces[comps[outer_idx]], closed=True)

    cavity_faces = [c for i, c in enumerate(comps) if i != outer_idx]
    if len(cavity_faces) != len(chambers):
        raise MeshError(
            f"expected {len(chambers)} cavity walls, found {len(cavity_faces)}"
        )
    cavities = [None] * len(chambers)
    for comp in cavity_faces:
        faces = bfaces[comp]
        vids = np.unique(faces)
        cz = mesh.nodes[vids, 2].mean()
        cang = np.angle(np.exp(1j * np.arctan2(mesh.nodes[vids, 1], mesh.nodes[vids, 0])).mean())
        best_ci, best_d = None, np.inf
        for ci, ch in enumerate(chambers):
            lo, hi = ch.prism_layers
            zmid_ch = 0.5 * (z_layers[lo] + z_layers[hi])
            dang = np.angle(np.exp(1j * (cang - ch.center_angle)))
            d = abs(cz - zmid_ch) / p.total_height + abs(dang)
            if d < best_d:
                best_ci, best_d = ci, d
        if cavities[best_ci] is not None:
            raise MeshError("two cavity walls matched one chamber")
        # flip: solid-outward becomes outward-of-air, the pressure direction
        cavities[best_ci] = _local_surface(faces[:, ::-1], closed=True)

    # effector node sets: every rigid section above a soft segment, base-up
    def _section_nodes(name):
        lo, hi = sections[name]
        layer_ids = np.concatenate(
            [np.arange(l * section_verts, (l + 1) * section_verts) for l in range(lo, hi + 1)]
        )
        return np.asarray(remap[layer_ids[used[layer_ids]]], dtype=np.int32)

    def _section_mid_z(name):
        lo, hi = sections[name]
        return 0.5 * (z_layers[lo] + z_layers[hi])

    effector_sections = rigid_names[1:]
    effector_names = [f"e{k + 1}" for k in range(len(effector_sections))]
    effector_nodes = [_section_nodes(name) for name in effector_sections]
    effector_points = [
        np.array([0.0, 0.0, _section_mid_z(name)]) for name in effector_sections
    ]

    # fiber loops: circumferential rings in the outer wall across each
    # segment's chamber span; the three chambers of a segment share them.
    # Loop points sit on the sector-vertex rays: between vertices the
    # polygonal wall dips below the nominal radius, so at coarse sector
    # counts off-ray points would fall outside the mesh.
    fiber_points = []
    fiber_loops = []
    loop_frac = 0.5 * (p.radial_fractions[1] + 1.0)
    ang = 2 * np.pi * np.arange(p.sectors) / p.sectors
    for seg, (lo, hi) in enumerate(soft_ranges):
        z0 = z_layers[lo + p.cap_layers]
        z1 = z_layers[hi - p.cap_layers]
        for i in range(p.fiber_loops_per_chamber):
            z = z0 + (z1 - z0) * (i + 0.5) / p.fiber_loops_per_chamber
            rad = loop_frac * (p.base_radius + (p.tip_radius - p.base_radius) * z / p.total_height)
            start = len(fiber_points)
            for a in ang:
                fiber_points.append((rad * np.cos(a), rad * np.sin(a), z))
            fiber_loops.append(np.arange(start, start + p.sectors))
    fiber_points = np.asarray(fiber_points, dtype=np.float64).reshape(-1, 3)

    return ArmGeometry(
        params=p,
        mesh=mesh,
        cavities=cavities,
        skin=skin,
        chambers=chambers,
        effector_names=effector_names,
        effector_nodes=effector_nodes,
        effector_points=effector_points,
        fiber_points=fiber_points,
        fiber_loops=fiber_loops,
        z_layers=z_layers,
        sections=sections,
    )
