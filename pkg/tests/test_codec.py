import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nht import codec
from nht.mesh import delaunay_violations, is_valid, triangulate
from nht.model import MeshModel
from nht.nn import init_mlp
from nht.splat2d import Scene, random_splats

from _util import random_mesh


def random_model(rng, n_interior=40, nf=4):
    mesh = random_mesh(rng, width=64, height=48, n_interior=n_interior)
    feats = rng.normal(size=(mesh.n_vertices, nf))
    mlp = init_mlp([2 * nf, 16, 3], rng, np.float32)
    return MeshModel(mesh, feats, mlp, mlp_dtype=np.float32)


# -- quantization ------------------------------------------------------------------

def test_constant_channel_is_exact():
    f = np.column_stack([np.full(10, 0.37), np.linspace(-1, 1, 10)])
    q = codec.quantize_features(f)
    out = q.dequantize()
    assert np.array_equal(out[:, 0], f[:, 0])
    assert q.scale[0] == 1.0 and q.offset[0] == 0.37


def test_unit_span_channel_bound():
    # every level of the 256-step grid plus points between levels
    f = np.linspace(-1, 1, 256 * 7 + 1)[:, None]
    err = np.abs(codec.quantize_features(f).dequantize() - f).max()
    assert err <= 1 / 255 + 1e-15


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3))
def test_feature_roundtrip_bound(seed, spread):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(50, 5)) * spread + rng.normal(size=5)
    q = codec.quantize_features(f)
    assert q.data.dtype == np.int8
    assert np.all(np.abs(q.dequantize() - f) <= q.scale / 2 * (1 + 1e-9))


def test_position_endpoints():
    q = codec.quantize_positions(np.array([[0.0, 0.0], [64.0, 48.0]]), 64, 48)
    assert q.tolist() == [[0, 0], [65535, 65535]]
    back = codec.dequantize_positions(q, 64, 48)
    assert back.tolist() == [[0.0, 0.0], [64.0, 48.0]]


def test_position_bound(rng):
    p = rng.uniform([0, 0], [640, 480], size=(5000, 2))
    back = codec.dequantize_positions(codec.quantize_positions(p, 640, 480), 640, 480)
    assert np.all(np.abs(back - p) <= 0.5 * np.array([640, 480]) / 65535 * (1 + 1e-12))


def test_positions_outside_rejected():
    with pytest.raises(ValueError):
        codec.quantize_positions(np.array([[-1.0, 0.0]]), 10, 10)



def test_coincident_positions_separated():
    # a long run of vertices collapsing onto the same slots, including a border one
    q = np.array([[0, 7]] * 40 + [[0, 8]] * 40 + [[300, 300]] * 70 + [[65535, 65535]] * 3, dtype=np.uint16)
    out = codec._separate_duplicates(q)
    assert len(np.unique(out, axis=0)) == len(out)
    assert np.all(out[:80, 0] == 0)                     # left-border vertices stay on the border
    assert np.all(np.abs(out.astype(int) - q.astype(int)).sum(axis=1) <= 80)

# -- container ----------------------------------------------------------------------

@pytest.mark.parametrize("flags", [codec.FLOAT, codec.LOSSLESS, codec.COMPRESSED,
                                   codec.FEAT_I8 | codec.ZSTD, codec.POS_U16])
def test_roundtrip_is_bit_exact(flags, rng):
    model = random_model(rng)
    blob = codec.serialize(model, flags)
    dec = codec.deserialize(blob)
    again = codec.serialize(dec, flags)
    assert again == blob
    dec2 = codec.deserialize(again)
    assert np.array_equal(dec.mesh.positions, dec2.mesh.positions)
    assert np.array_equal(dec.features, dec2.features)
    for a, b in zip(dec.mlp.arrays(), dec2.mlp.arrays()):
        assert np.array_equal(a, b)
    assert is_valid(dec.mesh)


def test_lossless_mode_reproduces_model(rng):
    model = random_model(rng)
    dec = codec.deserialize(codec.serialize(model, codec.LOSSLESS))
    assert np.array_equal(dec.features, model.features)
    assert np.array_equal(dec.mesh.positions, model.mesh.positions)
    for a, b in zip(dec.mlp.arrays(), model.mlp.arrays()):
        assert np.array_equal(a, b)
    assert dec.scheme == model.scheme and dec.encoding == model.encoding
    same = {tuple(sorted(t)) for t in dec.mesh.triangles.tolist()}
    assert same == {tuple(sorted(t)) for t in model.mesh.triangles.tolist()}


def test_decoded_mesh_is_delaunay(rng):
    dec = codec.deserialize(codec.serialize(random_model(rng), codec.COMPRESSED))
    assert delaunay_violations(dec.mesh) == 0


def test_cocircular_tiebreak_restores_topology():
    # a regular grid is full of co-circular quads; pick the "other" diagonals
    xs, ys = np.meshgrid(np.arange(5.0), np.arange(4.0))
    pos = np.column_stack([xs.ravel() * 4, ys.ravel() * 4])
    mesh = triangulate(pos, 16, 12)
    quads = codec.cocircular_quads(mesh.positions, mesh.triangles)
    assert len(quads) > 0
    tris = mesh.triangles.copy()
    for q in quads:
        codec._flip(tris, q)
    from nht.mesh import _assemble
    flipped = _assemble(pos, tris, 16, 12)
    assert is_valid(flipped)
    bits = codec.tiebreak_bits(flipped, pos)
    assert bits.all()
    rebuilt = codec.rebuild_mesh(pos, 16, 12, bits)
    assert {tuple(sorted(t)) for t in rebuilt.triangles.tolist()} == \
        {tuple(sorted(t)) for t in tris.tolist()}


def test_corruption_errors_are_distinct(rng):
    blob = codec.serialize(random_model(rng), codec.COMPRESSED)
    with pytest.raises(codec.BadMagicError):
        codec.deserialize(b"XXXX" + blob[4:])
    bad_version = bytearray(blob)
    bad_version[4] = 99
    with pytest.raises(codec.VersionMismatchError):
        codec.deserialize(bytes(bad_version))
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x01
    with pytest.raises(codec.ChecksumError):
        codec.deserialize(bytes(flipped))
    with pytest.raises(codec.TruncatedError):
        codec.deserialize(blob[:-20])
    with pytest.raises(codec.TruncatedError):
        codec.deserialize(blob[:10])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_any_single_byte_flip_is_detected(seed):
    rng = np.random.default_rng(seed)
    blob = bytearray(codec.serialize(random_model(np.random.default_rng(0), n_interior=8), codec.COMPRESSED))
    i = int(rng.integers(len(blob)))
    blob[i] ^= 1 << int(rng.integers(8))
    with pytest.raises(codec.ContainerError):
        codec.deserialize(bytes(blob))


def test_compressed_is_smaller(rng):
    model = random_model(rng, n_interior=400, nf=8)
    full = len(codec.serialize(model, codec.FLOAT))
    small = len(codec.serialize(model, codec.COMPRESSED))
    assert full / small > 2.0


def test_splat_scene_roundtrip(rng):
    ss = random_splats(rng, 12, 40, 30, 3)
    scene = Scene(ss, 40, 30, hidden_width=8, hidden_layers=1, mlp_seed=3, sh_scale=0.5)
    for flags in (codec.FLOAT, codec.LOSSLESS, codec.COMPRESSED):
        blob = codec.serialize(scene, flags)
        dec = codec.deserialize(blob)
        assert isinstance(dec, Scene)
        assert codec.serialize(dec, flags) == blob
    dec = codec.deserialize(codec.serialize(scene, codec.LOSSLESS))
    assert np.array_equal(dec.splats.means, ss.means)
    assert np.array_equal(dec.splats.features, ss.features)
    assert dec.sh_scale == 0.5 and dec.focal is None


def test_parse_quantize():
    assert codec.parse_quantize("int8,uint16,fp16") == codec.COMPRESSED
    assert codec.parse_quantize("int8,raw") == codec.FEAT_I8
    with pytest.raises(ValueError):
        codec.parse_quantize("int4")
