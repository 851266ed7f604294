"""Triangle-mesh construction, normalization, rigid transforms and adjacency.

Meshes are plain numpy containers. The vertex set of every prototype is
normalized to zero center of mass and unit total variance (trace of the
covariance equals one); optimization maintains that normalization so scale
and position are carried exclusively by the motion parameters.

Texture coordinates are stored per face corner, so seams and atlases need
no vertex duplication.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import quat


@dataclass
class TexturedMesh:
    """Triangulated surface with a per-face-corner UV mapping.

    vertices : (V, 3) float array
    faces    : (F, 3) int array of vertex indices, fixed topology
    uv       : (F, 3, 2) float array in [0, 1]^2, one coordinate per corner
    texture  : (Th, Tw, 3) float array in [0, 1]
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    texture: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.uv.shape != (len(self.faces), 3, 2):
            raise ValueError("uv must be (F, 3, 2)")

    def with_vertices(self, vertices):
        return replace(self, vertices=np.asarray(vertices, dtype=np.float64))


@dataclass
class Adjacency:
    """Symmetric vertex-neighbor structure derived from faces.

    `padded` is a (V, max_degree) index matrix; entries beyond a vertex's
    degree repeat its first neighbor and are masked out by `counts`.
    """

    lists: list
    padded: np.ndarray
    counts: np.ndarray


def normalize_vertices(vertices):
    """Shift to zero center of mass and rescale to unit total variance."""
    v = torch.as_tensor(np.asarray(vertices, dtype=np.float64))
    return normalize_vertices_t(v).numpy()


def normalize_vertices_t(vertices):
    centered = vertices - vertices.mean(dim=-2, keepdim=True)
    total_var = centered.pow(2).mean(dim=-2).sum(dim=-1)
    if (total_var < 1e-24).any():
        raise ValueError("zero-variance mesh")
    return centered / torch.sqrt(total_var)[..., None, None]


def transform(mesh_or_vertices, r, t):
    """Rotate vertices about their center of mass by unit quaternion r, then
    translate by t. Raises if |r| != 1 (callers must normalize first)."""
    vertices = getattr(mesh_or_vertices, "vertices", mesh_or_vertices)
    v = torch.as_tensor(np.asarray(vertices, dtype=np.float64))
    q = quat.as_tensor(r)
    if abs(float(q.norm()) - 1.0) > 1e-6:
        raise ValueError("rotation quaternion must be unit norm")
    tt = torch.as_tensor(np.asarray(t, dtype=np.float64))
    return transform_vertices_t(v, q, tt).numpy()


def transform_vertices_t(vertices, r, t):
    com = vertices.mean(dim=-2, keepdim=True)
    return quat.rotate(r[..., None, :], vertices - com) + com + t[..., None, :]


def apply_offsets(prototype, offsets):
    """Displace prototype vertices and re-normalize; topology and texture stay."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != prototype.vertices.shape:
        raise ValueError("offsets must match prototype vertex array")
    return prototype.with_vertices(normalize_vertices(prototype.vertices + offsets))


def build_adjacency(faces):
    faces = np.asarray(faces, dtype=np.int64)
    nv = int(faces.max()) + 1 if faces.size else 0
    if faces.size and faces.min() < 0:
        raise ValueError("face index out of range")
    neighbors = [set() for _ in range(nv)]
    for a, b, c in faces:
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    lists = [np.array(sorted(n), dtype=np.int64) for n in neighbors]
    counts = np.array([len(n) for n in lists], dtype=np.int64)
    if counts.size and counts.min() == 0:
        raise ValueError("isolated vertex has no neighbors")
    max_deg = int(counts.max()) if counts.size else 0
    padded = np.zeros((nv, max_deg), dtype=np.int64)
    for i, n in enumerate(lists):
        padded[i, : len(n)] = n
        padded[i, len(n):] = n[0] if len(n) else 0
    return Adjacency(lists=lists, padded=padded, counts=counts)


def _grey_texture(size):
    return np.full((size, size, 3), 0.5, dtype=np.float64)


def _atlas_uv(num_faces, margin=0.15):
    """Disjoint per-face texel regions: two inset triangles per grid cell."""
    grid = int(np.ceil(np.sqrt(num_faces / 2.0)))
    uv = np.zeros((num_faces, 3, 2), dtype=np.float64)
    m = margin
    for f in range(num_faces):
        pair, lower = divmod(f, 2)
        r, c = divmod(pair, grid)
        if lower == 0:
            corners = [(c + m, r + m), (c + 1 - m, r + m), (c + m, r + 1 - m)]
        else:
            corners = [(c + 1 - m, r + 1 - m), (c + m, r + 1 - m), (c + 1 - m, r + m)]
        uv[f] = np.array(corners) / grid
    return uv


def make_sphere_prototype(rings=23, segments=55, mapping="spherical",
                          texture_size=100, name="sphere"):
    """Closed UV sphere, normalized. Defaults give 1212 vertices, 2420 faces."""
    if rings < 3 or segments < 3:
        raise ValueError("rings and segments must both be >= 3")
    if mapping not in ("spherical", "per-face-atlas"):
        raise ValueError(f"unknown mapping {mapping!r}")

    verts = [np.array([0.0, 1.0, 0.0])]
    ring_of, seg_of = [0], [0]
    for i in range(1, rings):
        theta = np.pi * i / rings
        for j in range(segments):
            phi = 2 * np.pi * j / segments
            verts.append(np.array([np.sin(theta) * np.cos(phi),
                                   np.cos(theta),
                                   np.sin(theta) * np.sin(phi)]))
            ring_of.append(i)
            seg_of.append(j)
    verts.append(np.array([0.0, -1.0, 0.0]))
    ring_of.append(rings)
    seg_of.append(0)
    south = len(verts) - 1

    def rv(i, j):  # vertex index at interior ring i (1-based), segment j (wrapped)
        return 1 + (i - 1) * segments + (j % segments)

    faces = []
    uv_raw = []  # (u, v) per corner in lon/lat parameters, u in [0, 1] with wrap u=1
    for j in range(segments):
        faces.append((0, rv(1, j + 1), rv(1, j)))
        u0, u1 = (j + 1) / segments, j / segments
        uv_raw.append((((u0 + u1) / 2, 0.0), (u0, 1 / rings), (u1, 1 / rings)))
    for i in range(1, rings - 1):
        for j in range(segments):
            a, b = rv(i, j), rv(i, j + 1)
            c, d = rv(i + 1, j), rv(i + 1, j + 1)
            ua, ub = j / segments, (j + 1) / segments
            va, vb = i / rings, (i + 1) / rings
            faces.append((a, b, d))
            uv_raw.append(((ua, va), (ub, va), (ub, vb)))
            faces.append((a, d, c))
            uv_raw.append(((ua, va), (ub, vb), (ua, vb)))
    for j in range(segments):
        faces.append((south, rv(rings - 1, j), rv(rings - 1, j + 1)))
        u0, u1 = j / segments, (j + 1) / segments
        uv_raw.append((((u0 + u1) / 2, 1.0), (u0, 1 - 1 / rings), (u1, 1 - 1 / rings)))

    faces = np.array(faces, dtype=np.int64)
    if mapping == "spherical":
        uv = np.array(uv_raw, dtype=np.float64)
    else:
        uv = _atlas_uv(len(faces))
    return TexturedMesh(
        vertices=normalize_vertices(np.array(verts)),
        faces=faces,
        uv=uv,
        texture=_grey_texture(texture_size),
        name=name,
    )


def make_torus_prototype(major_segments=48, minor_segments=32, tube_ratio=0.4,
                         texture_size=100, name="torus"):
    """Closed torus with per-face-atlas UVs, normalized. Defaults: 1536 / 3072."""
    if major_segments < 3 or minor_segments < 3:
        raise ValueError("segment counts must both be >= 3")
    a, b = 1.0, tube_ratio
    verts = np.zeros((major_segments * minor_segments, 3))
    for i in range(major_segments):
        alpha = 2 * np.pi * i / major_segments
        for j in range(minor_segments):
            beta = 2 * np.pi * j / minor_segments
            verts[i * minor_segments + j] = (
                (a + b * np.cos(beta)) * np.cos(alpha),
                b * np.sin(beta),
                (a + b * np.cos(beta)) * np.sin(alpha),
            )

    def tv(i, j):
        return (i % major_segments) * minor_segments + (j % minor_segments)

    faces = []
    for i in range(major_segments):
        for j in range(minor_segments):
            p00, p10 = tv(i, j), tv(i + 1, j)
            p01, p11 = tv(i, j + 1), tv(i + 1, j + 1)
            faces.append((p00, p10, p11))
            faces.append((p00, p11, p01))
    faces = np.array(faces, dtype=np.int64)
    return TexturedMesh(
        vertices=normalize_vertices(verts),
        faces=faces,
        uv=_atlas_uv(len(faces)),
        texture=_grey_texture(texture_size),
        name=name,
    )


def edge_face_counts(faces):
    """Map undirected edge -> number of incident faces."""
    counts = {}
    for a, b, c in np.asarray(faces, dtype=np.int64):
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(faces):
    return all(n == 2 for n in edge_face_counts(faces).values())


def euler_characteristic(vertices, faces):
    v = len(vertices)
    f = len(faces)
    e = len(edge_face_counts(faces))
    return v - e + f


def mesh_diameter(vertices):
    """Largest pairwise vertex distance (the object size unit for metrics)."""
    v = np.asarray(vertices, dtype=np.float64)
    best = 0.0
    for start in range(0, len(v), 512):
        block = v[start:start + 512]
        d2 = ((block[:, None, :] - v[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))
