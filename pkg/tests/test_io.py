import json
import struct

import numpy as np
import pytest

from partlayout.errors import MeshFormatError, UnsupportedGeometryError
from partlayout.io import glb_bytes, load_mesh, mesh_files, obj_text, parse_obj, write_obj
from partlayout.mesh import TriMesh, joint_aabb
from partlayout.primitives import box_mesh

TRI = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], "tri")


def test_obj_two_groups():
    text = b"v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\no a\nf 1 2 3\no b\nf 1 2 4\n"
    meshes = parse_obj(text)
    assert [m.name for m in meshes] == ["a", "b"]
    assert all(len(m.faces) == 1 and len(m.vertices) == 3 for m in meshes)


def test_obj_quads_negative_indices_and_slashes():
    text = b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4/1/1 -3/2/2 -2/3/3 -1/4/4\n"
    (m,) = parse_obj(text)
    assert len(m.faces) == 2


def test_obj_error_has_byte_offset():
    text = b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n"
    with pytest.raises(MeshFormatError) as info:
        parse_obj(text)
    assert info.value.offset == len(b"v 0 0 0\nv 1 0 0\nv 0 1 0\n")


def test_obj_roundtrip(tmp_path):
    m = box_mesh((0.1, 0.2, 0.3), (0.4, 0.5, 0.6), name="box")
    write_obj(m, tmp_path / "box.obj")
    (back,) = load_mesh(tmp_path / "box.obj")
    assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.faces, m.faces)
    assert obj_text(m) == (tmp_path / "box.obj").read_text()


def test_glb_translation_baked(tmp_path):
    path = tmp_path / "t.glb"
    path.write_bytes(glb_bytes([TRI], {0: {"translation": [1.0, 0.0, 0.0]}}))
    (m,) = load_mesh(path)
    assert np.allclose(m.vertices, TRI.vertices + [1, 0, 0])


def test_glb_matrix_node(tmp_path):
    mat = np.eye(4)
    mat[:3, 3] = [0, 2, 0]
    mat[0, 0] = 3.0
    path = tmp_path / "m.glb"
    path.write_bytes(glb_bytes([TRI], {0: {"matrix": mat.T.ravel().tolist()}}))  # column-major
    (m,) = load_mesh(path)
    assert np.allclose(m.vertices, TRI.vertices * [3, 1, 1] + [0, 2, 0])


def _rewrite_glb_json(data: bytes, edit) -> bytes:
    js_len, _ = struct.unpack_from("<II", data, 12)
    doc = json.loads(data[20:20 + js_len])
    edit(doc)
    js = json.dumps(doc).encode()
    js += b" " * ((-len(js)) % 4)
    rest = data[20 + js_len:]
    return struct.pack("<III", 0x46546C67, 2, 20 + len(js) + len(rest)) + struct.pack("<II", len(js), 0x4E4F534A) + js + rest


def test_glb_non_triangle_mode_names_node(tmp_path):
    def to_lines(doc):
        doc["meshes"][0]["primitives"][0]["mode"] = 1
        doc["nodes"][0]["name"] = "wire"

    path = tmp_path / "lines.glb"
    path.write_bytes(_rewrite_glb_json(glb_bytes([TRI]), to_lines))
    with pytest.raises(UnsupportedGeometryError) as info:
        load_mesh(path)
    assert info.value.node == "wire"


def test_glb_corrupt_json_offset(tmp_path):
    data = bytearray(glb_bytes([TRI]))
    data[20] = ord("!")
    path = tmp_path / "bad.glb"
    path.write_bytes(bytes(data))
    with pytest.raises(MeshFormatError) as info:
        load_mesh(path)
    assert info.value.offset == 20


def test_glb_bad_magic(tmp_path):
    path = tmp_path / "x.glb"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(MeshFormatError):
        load_mesh(path)


def test_gltf_external_buffer(tmp_path):
    data = glb_bytes([TRI], {0: {"translation": [0, 0, 5]}})
    js_len, _ = struct.unpack_from("<II", data, 12)
    doc = json.loads(data[20:20 + js_len])
    bin_len, _ = struct.unpack_from("<II", data, 20 + js_len)
    (tmp_path / "buf.bin").write_bytes(data[28 + js_len:28 + js_len + bin_len])
    doc["buffers"][0]["uri"] = "buf.bin"
    (tmp_path / "t.gltf").write_text(json.dumps(doc))
    (m,) = load_mesh(tmp_path / "t.gltf")
    assert np.allclose(m.vertices, TRI.vertices + [0, 0, 5])


def test_lamp_fixture_matches_reference(fixtures_dir):
    ref = json.loads((fixtures_dir / "lamp_reference.json").read_text())
    meshes = load_mesh(fixtures_dir / "lamp.glb")
    assert len(meshes) == ref["meshes"] == 3
    assert sum(len(m.faces) for m in meshes) == ref["faces"]
    box = joint_aabb(meshes)
    # the fixture stores float32 positions, so compare at single precision
    assert np.allclose(box.min, ref["aabb_min"], atol=1e-6)
    assert np.allclose(box.max, ref["aabb_max"], atol=1e-6)


def test_lamp_fixture_matches_trimesh_live(fixtures_dir):
    trimesh = pytest.importorskip("trimesh")
    scene = trimesh.load(str(fixtures_dir / "lamp.glb"), force="scene")
    box = joint_aabb(load_mesh(fixtures_dir / "lamp.glb"))
    assert np.allclose(box.min, scene.bounds[0], atol=1e-6)
    assert np.allclose(box.max, scene.bounds[1], atol=1e-6)


def test_mesh_files_sorted(tmp_path):
    for name in ("b.obj", "a.glb", "c.txt"):
        (tmp_path / name).write_text("")
    assert [p.name for p in mesh_files(tmp_path)] == ["a.glb", "b.obj"]
