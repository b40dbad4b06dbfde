"""Mesh file I/O: Wavefront OBJ and glTF 2.0 (.gltf with buffers, .glb).

glTF scenes are flattened: every triangle primitive becomes its own TriMesh in
world space with the accumulated node transform baked into its vertices.
"""

from __future__ import annotations

import base64
import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import MeshFormatError, UnsupportedGeometryError
from .mesh import TriMesh

GLB_MAGIC = 0x46546C67  # b"glTF"
CHUNK_JSON = 0x4E4F534A
CHUNK_BIN = 0x004E4942

_COMPONENT_DTYPES = {
    5120: np.int8,
    5121: np.uint8,
    5122: np.int16,
    5123: np.uint16,
    5125: np.uint32,
    5126: np.float32,
}
_TYPE_WIDTH = {"SCALAR": 1, "VEC2": 2, "VEC3": 3, "VEC4": 4, "MAT4": 16}


def load_mesh(path, format: Optional[str] = None) -> list[TriMesh]:
    """Load every mesh in a file. ``format`` is one of obj, gltf, glb (default: by suffix)."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    data = path.read_bytes()
    if fmt == "obj":
        return parse_obj(data, name=path.stem, path=str(path))
    if fmt == "glb":
        doc, bin_chunk, json_offset = _split_glb(data, str(path))
        return _gltf_meshes(doc, bin_chunk, path.parent, str(path))
    if fmt == "gltf":
        try:
            doc = json.loads(data.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise MeshFormatError("gltf is not utf-8", exc.start, str(path)) from exc
        except json.JSONDecodeError as exc:
            raise MeshFormatError(f"invalid gltf json: {exc.msg}", exc.pos, str(path)) from exc
        return _gltf_meshes(doc, None, path.parent, str(path))
    raise ValueError(f"unsupported mesh format {fmt!r}")


# --------------------------------------------------------------------------- OBJ


def parse_obj(data: bytes, name: str = "obj", path: Optional[str] = None) -> list[TriMesh]:
    """Parse ASCII OBJ. Each ``o``/``g`` group becomes one mesh; polygons are fan-triangulated."""
    vertices: list[tuple[float, float, float]] = []
    groups: list[tuple[str, list[tuple[int, int, int]]]] = [(name, [])]
    offset = 0
    for raw in data.splitlines(keepends=True):
        line_offset = offset
        offset += len(raw)
        line = raw.split(b"#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == b"v":
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                xyz = (float(parts[1]), float(parts[2]), float(parts[3]))
                if not all(np.isfinite(xyz)):
                    raise ValueError("non-finite vertex")
                vertices.append(xyz)
            elif tag == b"f":
                idx = []
                for token in parts[1:]:
                    i = int(token.split(b"/", 1)[0])
                    i = i - 1 if i > 0 else len(vertices) + i
                    if i < 0 or i >= len(vertices):
                        raise ValueError(f"face index {token.decode()} out of range")
                    idx.append(i)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                faces = groups[-1][1]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
            elif tag in (b"o", b"g"):
                label = parts[1].decode("utf-8", "replace") if len(parts) > 1 else f"{name}_{len(groups)}"
                if groups[-1][1]:
                    groups.append((label, []))
                else:
                    groups[-1] = (label, [])
        except ValueError as exc:
            raise MeshFormatError(f"bad OBJ line: {exc}", line_offset, path) from exc
    verts = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    out = []
    for label, faces in groups:
        if not faces:
            continue
        full = TriMesh(verts, np.array(faces, dtype=np.int64), label)
        out.append(full.submesh(np.arange(len(faces)), name=label))
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def obj_text(mesh: TriMesh) -> str:
    lines = [f"o {mesh.name or 'part'}"]
    lines += [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def write_obj(mesh: TriMesh, path) -> None:
    Path(path).write_text(obj_text(mesh))


def write_obj_multi(meshes, path) -> None:
    """Write several meshes as ``o`` groups of one OBJ file."""
    lines, base = [], 0
    for m in meshes:
        lines.append(f"o {m.name or 'part'}")
        lines += [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in m.vertices]
        lines += [f"f {a + base + 1} {b + base + 1} {c + base + 1}" for a, b, c in m.faces]
        base += len(m.vertices)
    Path(path).write_text("\n".join(lines) + "\n")


def write_parts(parts, directory) -> list[str]:
    """Write ``part_{i:03}.obj`` files; returns the file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, part in enumerate(parts):
        fname = f"part_{i:03}.obj"
        write_obj(TriMesh(part.vertices, part.faces, part.name or f"part_{i:03}"), directory / fname)
        names.append(fname)
    return names


# -------------------------------------------------------------------------- glTF


def _split_glb(data: bytes, path: str):
    if len(data) < 12:
        raise MeshFormatError("truncated GLB header", len(data), path)
    magic, version, length = struct.unpack_from("<III", data, 0)
    if magic != GLB_MAGIC:
        raise MeshFormatError("not a GLB file (bad magic)", 0, path)
    if version != 2:
        raise MeshFormatError(f"unsupported GLB version {version}", 4, path)
    if length > len(data):
        raise MeshFormatError("GLB length exceeds file size", 8, path)
    pos = 12
    doc = None
    bin_chunk = None
    json_offset = None
    while pos < length:
        if pos + 8 > length:
            raise MeshFormatError("truncated GLB chunk header", pos, path)
        chunk_len, chunk_type = struct.unpack_from("<II", data, pos)
        start = pos + 8
        end = start + chunk_len
        if end > length:
            raise MeshFormatError("GLB chunk overruns file", pos, path)
        if chunk_type == CHUNK_JSON:
            json_offset = start
            try:
                doc = json.loads(data[start:end].decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise MeshFormatError("GLB json chunk is not utf-8", start + exc.start, path) from exc
            except json.JSONDecodeError as exc:
                raise MeshFormatError(f"invalid GLB json: {exc.msg}", start + exc.pos, path) from exc
        elif chunk_type == CHUNK_BIN and bin_chunk is None:
            bin_chunk = data[start:end]
        pos = end
    if doc is None:
        raise MeshFormatError("GLB has no JSON chunk", 12, path)
    return doc, bin_chunk, json_offset


def _load_buffer(buf: dict, index: int, bin_chunk, base_dir: Path, path: str) -> bytes:
    uri = buf.get("uri")
    if uri is None:
        if bin_chunk is None:
            raise MeshFormatError(f"buffer {index} has no uri and there is no GLB BIN chunk", None, path)
        return bin_chunk
    if uri.startswith("data:"):
        try:
            return base64.b64decode(uri.split(",", 1)[1])
        except (IndexError, ValueError) as exc:
            raise MeshFormatError(f"buffer {index} has a malformed data uri", None, path) from exc
    target = base_dir / uri
    try:
        return target.read_bytes()
    except OSError as exc:
        raise MeshFormatError(f"cannot read buffer {index} ({uri}): {exc}", None, path) from exc


def _node_matrix(node: dict) -> np.ndarray:
    if "matrix" in node:
        return np.array(node["matrix"], dtype=np.float64).reshape(4, 4).T  # column-major
    m = np.eye(4)
    t = node.get("translation", [0.0, 0.0, 0.0])
    r = node.get("rotation", [0.0, 0.0, 0.0, 1.0])
    s = node.get("scale", [1.0, 1.0, 1.0])
    m[:3, :3] = Rotation.from_quat(r).as_matrix() @ np.diag(s)
    m[:3, 3] = t
    return m


class _Accessors:
    def __init__(self, doc, bin_chunk, base_dir, path):
        self.doc = doc
        self.bin_chunk = bin_chunk
        self.base_dir = base_dir
        self.path = path
        self._buffers = {}

    def buffer(self, i):
        if i not in self._buffers:
            self._buffers[i] = _load_buffer(self.doc["buffers"][i], i, self.bin_chunk, self.base_dir, self.path)
        return self._buffers[i]

    def read(self, index: int) -> np.ndarray:
        try:
            acc = self.doc["accessors"][index]
            if "sparse" in acc:
                raise MeshFormatError(f"sparse accessor {index} is not supported", None, self.path)
            dtype = np.dtype(_COMPONENT_DTYPES[acc["componentType"]]).newbyteorder("<")
            width = _TYPE_WIDTH[acc["type"]]
            count = acc["count"]
            if "bufferView" not in acc:
                return np.zeros((count, width), dtype=np.float64)
            view = self.doc["bufferViews"][acc["bufferView"]]
            data = self.buffer(view["buffer"])
            start = view.get("byteOffset", 0) + acc.get("byteOffset", 0)
            elem = dtype.itemsize * width
            stride = view.get("byteStride") or elem
            needed = start + stride * (count - 1) + elem if count else start
            if needed > len(data):
                raise MeshFormatError(f"accessor {index} reads past the end of its buffer", None, self.path)
            raw = np.lib.stride_tricks.as_strided(
                np.frombuffer(data, dtype=np.uint8, count=len(data) - start, offset=start),
                shape=(count, elem),
                strides=(stride, 1),
            )
            return np.ascontiguousarray(raw).view(dtype).reshape(count, width)
        except (KeyError, IndexError, TypeError) as exc:
            raise MeshFormatError(f"malformed accessor {index}: {exc!r}", None, self.path) from exc


def _triangulate(indices: np.ndarray, mode: int, node_label) -> np.ndarray:
    if mode == 4:
        if len(indices) % 3:
            raise MeshFormatError(f"triangle index count not divisible by 3 in node {node_label!r}")
        return indices.reshape(-1, 3)
    if mode == 5:  # strip
        tris = [
            (indices[i], indices[i + 1], indices[i + 2]) if i % 2 == 0 else (indices[i + 1], indices[i], indices[i + 2])
            for i in range(len(indices) - 2)
        ]
        return np.array(tris, dtype=np.int64).reshape(-1, 3)
    if mode == 6:  # fan
        tris = [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]
        return np.array(tris, dtype=np.int64).reshape(-1, 3)
    raise UnsupportedGeometryError(f"primitive mode {mode} is not a triangle mode", node_label)


def _gltf_meshes(doc: dict, bin_chunk, base_dir: Path, path: str) -> list[TriMesh]:
    if not isinstance(doc, dict):
        raise MeshFormatError("gltf root is not an object", 0, path)
    nodes = doc.get("nodes", [])
    meshes = doc.get("meshes", [])
    acc = _Accessors(doc, bin_chunk, base_dir, path)
    scenes = doc.get("scenes")
    if scenes:
        roots = scenes[doc.get("scene", 0)].get("nodes", [])
    else:
        children = {c for n in nodes for c in n.get("children", [])}
        roots = [i for i in range(len(nodes)) if i not in children]

    out: list[TriMesh] = []
    stack = [(r, np.eye(4)) for r in reversed(roots)]
    visited = set()
    while stack:
        ni, parent = stack.pop()
        if ni in visited:
            raise MeshFormatError(f"node {ni} appears twice in the scene graph", None, path)
        visited.add(ni)
        node = nodes[ni]
        world = parent @ _node_matrix(node)
        label = node.get("name", f"node{ni}")
        if "mesh" in node:
            mesh = meshes[node["mesh"]]
            for pi, prim in enumerate(mesh.get("primitives", [])):
                mode = prim.get("mode", 4)
                if mode not in (4, 5, 6):
                    raise UnsupportedGeometryError(f"primitive mode {mode} is not a triangle mode", label)
                pos = acc.read(prim["attributes"]["POSITION"]).astype(np.float64)
                if "indices" in prim:
                    idx = acc.read(prim["indices"]).astype(np.int64).ravel()
                else:
                    idx = np.arange(len(pos), dtype=np.int64)
                faces = _triangulate(idx, mode, label)
                if len(faces) == 0:
                    continue
                name = mesh.get("name", f"mesh{node['mesh']}")
                local = TriMesh(pos, faces, f"{label}/{name}/{pi}")
                out.append(local.transformed(world))
        for c in reversed(node.get("children", [])):
            stack.append((c, world))
    return out


def glb_bytes(meshes, node_transforms=None, parents=None) -> bytes:
    """Encode meshes as a minimal GLB, one node per mesh.

    ``node_transforms`` optionally gives a dict of TRS per node; ``parents`` maps a node
    index to its parent index so nested hierarchies can be produced.
    """
    bin_parts: list[bytes] = []
    accessors, views, gl_meshes, nodes = [], [], [], []
    offset = 0

    def add_view(blob: bytes, target: int) -> int:
        nonlocal offset
        pad = (-len(blob)) % 4
        bin_parts.append(blob + b"\x00" * pad)
        views.append({"buffer": 0, "byteOffset": offset, "byteLength": len(blob), "target": target})
        offset += len(blob) + pad
        return len(views) - 1

    for i, m in enumerate(meshes):
        pos = np.asarray(m.vertices, dtype="<f4")
        idx = np.asarray(m.faces, dtype="<u4").ravel()
        pv = add_view(pos.tobytes(), 34962)
        iv = add_view(idx.tobytes(), 34963)
        accessors.append(
            {"bufferView": pv, "componentType": 5126, "count": len(pos), "type": "VEC3",
             "min": pos.min(axis=0).tolist(), "max": pos.max(axis=0).tolist()}
        )
        accessors.append({"bufferView": iv, "componentType": 5125, "count": len(idx), "type": "SCALAR"})
        gl_meshes.append({"name": m.name or f"mesh{i}",
                          "primitives": [{"attributes": {"POSITION": 2 * i}, "indices": 2 * i + 1, "mode": 4}]})
        node = {"name": f"node{i}", "mesh": i}
        node.update((node_transforms or {}).get(i, {}))
        nodes.append(node)
    parents = parents or {}
    for child, parent in parents.items():
        nodes[parent].setdefault("children", []).append(child)
    roots = [i for i in range(len(nodes)) if i not in parents]
    binary = b"".join(bin_parts)
    doc = {
        "asset": {"version": "2.0", "generator": "partlayout"},
        "scene": 0,
        "scenes": [{"nodes": roots}],
        "nodes": nodes,
        "meshes": gl_meshes,
        "accessors": accessors,
        "bufferViews": views,
        "buffers": [{"byteLength": len(binary)}],
    }
    js = json.dumps(doc, separators=(",", ":")).encode()
    js += b" " * ((-len(js)) % 4)
    total = 12 + 8 + len(js) + 8 + len(binary)
    return (
        struct.pack("<III", GLB_MAGIC, 2, total)
        + struct.pack("<II", len(js), CHUNK_JSON) + js
        + struct.pack("<II", len(binary), CHUNK_BIN) + binary
    )


def mesh_files(root) -> list[Path]:
    """Mesh files under ``root`` (or ``root`` itself), sorted for stable processing order."""
    root = Path(root)
    if root.is_file():
        return [root]
    found = []
    for dirpath, _, filenames in os.walk(root):
        for fn in filenames:
            if fn.lower().endswith((".obj", ".gltf", ".glb")):
                found.append(Path(dirpath) / fn)
    return sorted(found)
