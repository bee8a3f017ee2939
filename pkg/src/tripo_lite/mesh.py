"""Isosurface extraction, surface sampling, vertex colouring and mesh IO.

Point clouds throughout the package are plain ``(N, 3)`` float arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes as _skimage_mc

from .field import FieldParams, field_forward
from .triplane import Triplane, sample_features

DEFAULT_ISOLEVEL = 10.0
GRID_CHUNK = 65536


class MeshParseError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    vertex_colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face with repeated vertex index")
        if self.vertex_colors is not None:
            self.vertex_colors = np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_colors) != len(self.vertices):
                raise ValueError("need exactly one colour per vertex")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edge_face_counts(self) -> np.ndarray:
        """Number of faces sharing each undirected edge."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_closed(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_face_counts() == 2))


@dataclass
class DensityGrid:
    values: np.ndarray  # (G, G, G), indexed [ix, iy, iz]
    extent: float

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / (self.resolution - 1)

    def coords(self) -> np.ndarray:
        return np.linspace(-self.extent, self.extent, self.resolution)

    def dump(self, path):
        """Raw little-endian float32 values plus a JSON sidecar ``{G, extent}``."""
        path = Path(path)
        self.values.astype("<f4").tofile(path)
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps({"G": self.resolution, "extent": self.extent}))


def grid_points(G: int, extent: float) -> np.ndarray:
    x = np.linspace(-extent, extent, G)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def sample_density_grid(tp: Triplane, params: FieldParams, G: int = 128) -> DensityGrid:
    if G < 2:
        raise ValueError("grid resolution must be at least 2")
    pts = grid_points(G, tp.extent)
    sigma = np.empty(len(pts), dtype=params.dtype)
    for s in range(0, len(pts), GRID_CHUNK):
        sigma[s:s + GRID_CHUNK] = field_forward(params, sample_features(tp, pts[s:s + GRID_CHUNK])).sigma
    return DensityGrid(sigma.reshape(G, G, G), tp.extent)


def clean_grid(grid: DensityGrid, isolevel: float = DEFAULT_ISOLEVEL) -> DensityGrid:
    """Keep the largest occupied component of ``{sigma > isolevel}`` and fill its cavities.

    Detached blobs and enclosed empty pockets never change a render once the
    surface is opaque, so the fit leaves them unconstrained. Only voxels whose
    occupancy changes are moved across the isolevel; all others keep their value.
    """
    vals = np.asarray(grid.values, dtype=np.float64)
    occ = vals > isolevel
    labels, n = ndimage.label(occ)
    if n == 0:
        return DensityGrid(vals.copy(), grid.extent)
    keep = labels == np.argmax(np.bincount(labels.ravel())[1:]) + 1
    filled = ndimage.binary_fill_holes(keep)
    low, high = isolevel - abs(isolevel) - 1.0, isolevel + abs(isolevel) + 1.0
    out = np.where(occ & ~keep, np.minimum(vals, low), vals)
    out = np.where(filled & ~occ, np.maximum(out, high), out)
    return DensityGrid(out, grid.extent)


def marching_cubes(grid: DensityGrid, isolevel: float = DEFAULT_ISOLEVEL) -> Mesh:
    """Triangulate ``{sigma = isolevel}``; normals point toward lower density."""
    if not np.isfinite(isolevel):
        raise ValueError("isolevel must be finite")
    vals = np.asarray(grid.values, dtype=np.float64)
    if not (vals.min() < isolevel < vals.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = _skimage_mc(vals, level=isolevel, gradient_direction="descent",
                                     allow_degenerate=False)
    verts = verts.astype(np.float64) * grid.spacing - grid.extent
    return Mesh(verts, faces[:, ::-1].copy())


def sample_surface_points(mesh: Mesh, n: int = 10_000, rng=None) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, shape (n, 3)."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def colorize_vertices(mesh: Mesh, tp: Triplane, params: FieldParams) -> Mesh:
    colors = np.empty((len(mesh.vertices), 3))
    for s in range(0, len(mesh.vertices), GRID_CHUNK):
        chunk = mesh.vertices[s:s + GRID_CHUNK]
        colors[s:s + GRID_CHUNK] = field_forward(params, sample_features(tp, chunk)).rgb
    return Mesh(mesh.vertices, mesh.faces, colors)


# --- IO -------------------------------------------------------------------

def write_mesh(mesh: Mesh, path) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        _write_obj(mesh, path)
    elif ext == ".ply":
        _write_ply(mesh, path)
    else:
        raise ValueError(f"unsupported mesh format {ext!r}")


def read_mesh(path) -> Mesh:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        return _read_obj(path)
    if ext == ".ply":
        return _read_ply(path)
    raise ValueError(f"unsupported mesh format {ext!r}")


def _write_obj(mesh: Mesh, path: Path):
    lines = []
    if mesh.vertex_colors is None:
        for v in mesh.vertices:
            lines.append("v %.9g %.9g %.9g" % tuple(v))
    else:
        for v, c in zip(mesh.vertices, mesh.vertex_colors):
            lines.append("v %.9g %.9g %.9g %.6g %.6g %.6g" % (*v, *c))
    for f in mesh.faces + 1:
        lines.append("f %d %d %d" % tuple(f))
    path.write_text("\n".join(lines) + "\n")


def _read_obj(path: Path) -> Mesh:
    verts, colors, faces = [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                if len(parts) not in (4, 7):
                    raise ValueError("vertex needs 3 or 6 numbers")
                nums = [float(x) for x in parts[1:]]
                verts.append(nums[:3])
                colors.append(nums[3:] if len(nums) == 6 else None)
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise MeshParseError(f"{path}:{lineno}: {exc}") from None
    has_color = bool(colors) and all(c is not None for c in colors)
    if any(c is not None for c in colors) and not has_color:
        raise MeshParseError(f"{path}: vertex colours present on only some vertices")
    try:
        return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces).reshape(-1, 3),
                    np.array(colors, dtype=np.float64) if has_color else None)
    except ValueError as exc:
        raise MeshParseError(f"{path}: {exc}") from None


_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4",
              "uint": "<u4", "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1",
              "int16": "<i2", "uint16": "<u2", "int32": "<i4", "uint32": "<u4",
              "float32": "<f4", "float64": "<f8"}


def _write_ply(mesh: Mesh, path: Path):
    has_color = mesh.vertex_colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    vdata = np.empty(len(mesh.vertices), dtype=fields)
    for i, axis in enumerate("xyz"):
        vdata[axis] = mesh.vertices[:, i]
    if has_color:
        c = np.clip(np.round(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
        for i, ch in enumerate(("red", "green", "blue")):
            vdata[ch] = c[:, i]
    fdata = np.empty(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    fdata["n"] = 3
    fdata["idx"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vdata.tobytes())
        fh.write(fdata.tobytes())


def _read_ply(path: Path) -> Mesh:
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshParseError(f"{path}: offset 0: not a PLY file")
    body = end + len(b"end_header\n")
    elements = []
    for lineno, line in enumerate(data[:end].decode("ascii", "replace").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise MeshParseError(f"{path}:{lineno}: only binary_little_endian PLY is supported")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError(f"{path}:{lineno}: property before element")
            try:
                if parts[1] == "list":
                    prop = ("list", parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])
                else:
                    prop = ("scalar", parts[2], _PLY_TYPES[parts[1]])
            except (KeyError, IndexError):
                raise MeshParseError(f"{path}:{lineno}: bad property line {line!r}") from None
            elements[-1][2].append(prop)
        else:
            raise MeshParseError(f"{path}:{lineno}: unexpected header line {line!r}")

    offset = body
    verts = colors = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if all(p[0] == "scalar" for p in props):
            dt = np.dtype([(p[1], p[2]) for p in props])
            if offset + dt.itemsize * count > len(data):
                raise MeshParseError(f"{path}: offset {offset}: truncated element {name!r}")
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            offset += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr[a].astype(np.float64) for a in "xyz"], axis=1)
                if {"red", "green", "blue"} <= set(dt.names):
                    colors = np.stack([arr[c].astype(np.float64) / 255.0
                                       for c in ("red", "green", "blue")], axis=1)
        elif len(props) == 1 and name == "face":
            _, _, count_t, idx_t = props[0]
            ct, it = np.dtype(count_t), np.dtype(idx_t)
            tris = []
            for _ in range(count):
                if offset + ct.itemsize > len(data):
                    raise MeshParseError(f"{path}: offset {offset}: truncated face list")
                k = int(np.frombuffer(data, dtype=ct, count=1, offset=offset)[0])
                offset += ct.itemsize
                if offset + it.itemsize * k > len(data):
                    raise MeshParseError(f"{path}: offset {offset}: truncated face list")
                idx = np.frombuffer(data, dtype=it, count=k, offset=offset)
                offset += it.itemsize * k
                for j in range(1, k - 1):
                    tris.append((idx[0], idx[j], idx[j + 1]))
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
        else:
            raise MeshParseError(f"{path}: unsupported element layout for {name!r}")
    if verts is None:
        raise MeshParseError(f"{path}: no vertex element")
    try:
        return Mesh(verts, faces, colors)
    except ValueError as exc:
        raise MeshParseError(f"{path}: {exc}") from None
