"""Post-training quantization and the ``.nht`` model container.

Byte layout is documented field by field in docs/format.md. In short: a fixed
outer header (magic, version, flags, kind, lengths), an optionally
Zstandard-compressed body holding a model header, a section table and the
section data, and a trailing 64-bit BLAKE2b checksum over everything before it.
The triangulation is not stored; the decoder recomputes the Delaunay
triangulation from the dequantized positions and applies stored tie-break bits
for co-circular quads.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
import zstandard

from . import harmonic, interp
from .mesh import EPS_CIRC, Mesh, _assemble, in_circle, suggest_tile_size, triangulate, validate_or_remesh
from .model import MeshModel
from .nn import MlpParams
from .splat2d import Scene, SplatSet

MAGIC = b"NHT1"
VERSION = 1
ZSTD_LEVEL = 19

POS_U16 = 1 << 0
FEAT_I8 = 1 << 1
MLP_F16 = 1 << 2
ZSTD = 1 << 3
FLOAT64 = 1 << 4

FLOAT = 0
LOSSLESS = FLOAT64
COMPRESSED = POS_U16 | FEAT_I8 | MLP_F16 | ZSTD

KIND_MESH = 0
KIND_SPLAT = 1

_OUTER = struct.Struct("<4sHHB3xQQ")     # magic, version, flags, kind, body_len, payload_len
_CHECK_BYTES = 8
_SECTION = struct.Struct("<4sQQ")        # tag, offset, length
_MESH_HDR = struct.Struct("<IIddIHBBH")  # w, h, white, mu, n_vertices, n_f, scheme, encoding, n_dims
_SPLAT_HDR = struct.Struct("<IIddIHddH")  # w, h, white, mu, n_splats, n_f, sh_scale, focal, n_dims


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


# -- quantization -------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureQuant:
    data: np.ndarray      # int8 (N, C)
    scale: np.ndarray     # float64 (C,)
    offset: np.ndarray    # float64 (C,)

    def dequantize(self):
        return (self.data.astype(np.float64) + 128.0) * self.scale + self.offset


def quantize_features(features) -> FeatureQuant:
    """Per-channel affine map of [min, max] onto the 256 int8 levels.

    Reconstruction error per element is at most scale / 2. A constant
    channel gets scale 1 and offset equal to its value (exact).
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("features must be (N, C)")
    if not np.all(np.isfinite(f)):
        raise ValueError("features must be finite")
    if len(f) == 0:
        c = f.shape[1]
        return FeatureQuant(np.zeros((0, c), np.int8), np.ones(c), np.zeros(c))
    lo, hi = f.min(axis=0), f.max(axis=0)
    span = hi - lo
    degenerate = span == 0
    scale = np.where(degenerate, 1.0, span / 255.0)
    offset = lo
    q = np.clip(np.rint((f - offset) / scale), 0, 255) - 128.0
    return FeatureQuant(q.astype(np.int8), scale, offset)


def quantize_positions(positions, width, height) -> np.ndarray:
    """uint16 fixed point per axis: q = round(x / extent * 65535)."""
    p = np.asarray(positions, dtype=np.float64)
    if np.any(p < 0) or np.any(p[:, 0] > width) or np.any(p[:, 1] > height):
        raise ValueError("positions outside the image rectangle")
    ext = np.array([width, height], dtype=np.float64)
    return np.rint(p / ext * 65535.0).astype(np.uint16)


def dequantize_positions(q, width, height) -> np.ndarray:
    ext = np.array([width, height], dtype=np.float64)
    return q.astype(np.float64) * ext / 65535.0


def _separate_duplicates(q):
    """Nudge coincident quantized vertices apart by one step along an axis that
    keeps boundary vertices on their edge."""
    q = q.astype(np.int64)
    _, first = np.unique(q, axis=0, return_index=True)
    if len(first) == len(q):
        return q.astype(np.uint16)
    keep = np.zeros(len(q), bool)
    keep[first] = True
    taken = set(map(tuple, q[keep].tolist()))
    for i in np.flatnonzero(~keep):
        on_x = q[i, 0] in (0, 65535)
        axis = 1 if on_x else 0
        # nearest free slot along the axis, alternating +1, -1, +2, -2, ...
        for k in range(1, 65536):
            cand = q[i].copy()
            cand[axis] += k // 2 + 1 if k % 2 else -(k // 2)
            if 0 <= cand[axis] <= 65535 and tuple(cand.tolist()) not in taken:
                q[i] = cand
                break
        else:
            raise ContainerError("could not separate coincident vertices")
        taken.add(tuple(q[i].tolist()))
    return q.astype(np.uint16)


def quantize_mlp(mlp: MlpParams, dtype) -> MlpParams:
    return mlp.astype(dtype)


# -- topology recovery --------------------------------------------------------------------

def _interior_edges(triangles):
    """Edges shared by two triangles: (a, b, tri_left, tri_right), sorted by (a, b)."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    t = np.tile(np.arange(len(triangles)), 3)
    key = np.sort(e, axis=1)
    order = np.lexsort((t, key[:, 1], key[:, 0]))
    key, e, t = key[order], e[order], t[order]
    same = np.all(key[1:] == key[:-1], axis=1)
    i = np.flatnonzero(same)
    return key[i], t[i], t[i + 1]


def _opposite(tri, a, b):
    return int(tri[(tri != a) & (tri != b)][0])


def cocircular_quads(positions, triangles):
    """Deterministic list of (t1, t2, a, b, c, d): interior edges (a, b) whose
    two opposite vertices c, d are co-circular with them. Quads sharing a
    triangle with an earlier quad are skipped."""
    keys, t1, t2 = _interior_edges(triangles)
    if len(keys) == 0:
        return []
    scale = np.max(np.abs(positions)) ** 4 + 1.0
    tri1 = triangles[t1]
    p = positions
    # fourth point: the vertex of t2 not on the edge
    tri2 = triangles[t2]
    mask = (tri2 != keys[:, :1]) & (tri2 != keys[:, 1:])
    d = tri2[mask]
    det = in_circle(p[tri1[:, 0]], p[tri1[:, 1]], p[tri1[:, 2]], p[d])
    hits = np.flatnonzero(np.abs(det) <= EPS_CIRC * scale)
    used = set()
    out = []
    for h in hits:
        a, b = int(keys[h, 0]), int(keys[h, 1])
        ta, tb = int(t1[h]), int(t2[h])
        if ta in used or tb in used:
            continue
        used.update((ta, tb))
        out.append((ta, tb, a, b, _opposite(triangles[ta], a, b), int(d[h])))
    return out


def _flip(triangles, quad):
    ta, tb, a, b, c, d = quad
    tri = triangles[ta]
    # orient so that (a, b, c) is the CCW order inside ta
    k = int(np.flatnonzero(tri == c)[0])
    a, b = int(tri[(k + 1) % 3]), int(tri[(k + 2) % 3])
    triangles[ta] = (c, a, d)
    triangles[tb] = (d, b, c)


def _edge_set(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return set(map(tuple, e.tolist()))


def tiebreak_bits(original: Mesh, positions):
    """Bits telling the decoder which co-circular quads to flip."""
    mesh = triangulate(positions, original.width, original.height)
    edges = _edge_set(original.triangles)
    quads = cocircular_quads(mesh.positions, mesh.triangles)
    return np.array([tuple(sorted((q[4], q[5]))) in edges for q in quads], dtype=bool)


def rebuild_mesh(positions, width, height, bits=None) -> Mesh:
    mesh = triangulate(positions, width, height)
    if bits is not None:
        quads = cocircular_quads(mesh.positions, mesh.triangles)
        if len(quads) != len(bits):
            raise ContainerError("tie-break bits do not match the recomputed triangulation")
        tris = mesh.triangles.copy()
        for quad, bit in zip(quads, bits):
            if bit:
                _flip(tris, quad)
        mesh = _assemble(mesh.positions, tris, width, height)
    mesh = validate_or_remesh(mesh)
    tile = suggest_tile_size(width, height, mesh.n_triangles)
    return _assemble(mesh.positions, mesh.triangles, width, height, tile)


# -- byte-level helpers -------------------------------------------------------------------

class _Sections:
    def __init__(self):
        self.items = []

    def add(self, tag, arr):
        self.items.append((tag.encode("ascii"), np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                                            copy=False).tobytes()))

    def pack(self, header: bytes) -> bytes:
        table_len = 2 + _SECTION.size * len(self.items)
        offset = len(header) + table_len
        table = [struct.pack("<H", len(self.items))]
        data = []
        for tag, blob in self.items:
            table.append(_SECTION.pack(tag, offset, len(blob)))
            data.append(blob)
            offset += len(blob)
        return header + b"".join(table) + b"".join(data)


def _read_sections(body, start):
    if len(body) < start + 2:
        raise TruncatedError("section table truncated")
    (n,) = struct.unpack_from("<H", body, start)
    out = {}
    pos = start + 2
    for _ in range(n):
        if len(body) < pos + _SECTION.size:
            raise TruncatedError("section table truncated")
        tag, off, length = _SECTION.unpack_from(body, pos)
        pos += _SECTION.size
        if off + length > len(body):
            raise TruncatedError(f"section {tag!r} runs past the body")
        out[tag.decode("ascii")] = body[off:off + length]
    return out


def _array(sections, tag, dtype, shape):
    if tag not in sections:
        raise ContainerError(f"missing section {tag}")
    dt = np.dtype(dtype).newbyteorder("<")
    blob = sections[tag]
    n = int(np.prod(shape))
    if len(blob) != n * dt.itemsize:
        raise ContainerError(f"section {tag} has {len(blob)} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(blob, dtype=dt).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def _float_dtype(flags):
    return np.float64 if flags & FLOAT64 else np.float32


def _add_mlp(sec, mlp, flags):
    dt = np.float16 if flags & MLP_F16 else _float_dtype(flags)
    sec.add("MLPW", np.concatenate([a.astype(dt).ravel() for a in mlp.arrays()]))


def _read_mlp(sections, dims, flags):
    dt = np.float16 if flags & MLP_F16 else _float_dtype(flags)
    sizes = []
    for a, b in zip(dims[:-1], dims[1:]):
        sizes += [(b, a), (b,)]
    total = sum(int(np.prod(s)) for s in sizes)
    flat = _array(sections, "MLPW", dt, (total,))
    arrays, pos = [], 0
    out_dt = np.float64 if flags & FLOAT64 else np.float32
    for s in sizes:
        n = int(np.prod(s))
        arrays.append(flat[pos:pos + n].reshape(s).astype(out_dt))
        pos += n
    return MlpParams(arrays[0::2], arrays[1::2])


def _add_features(sec, feats2d, flags):
    if flags & FEAT_I8:
        q = quantize_features(feats2d)
        sec.add("FEAT", q.data)
        sec.add("FQNT", np.concatenate([q.scale, q.offset]))
    else:
        sec.add("FEAT", feats2d.astype(_float_dtype(flags)))


def _read_features(sections, shape, flags):
    if flags & FEAT_I8:
        data = _array(sections, "FEAT", np.int8, shape)
        so = _array(sections, "FQNT", np.float64, (2 * shape[1],))
        return FeatureQuant(data, so[:shape[1]], so[shape[1]:]).dequantize()
    return _array(sections, "FEAT", _float_dtype(flags), shape).astype(np.float64)


# -- serialize / deserialize --------------------------------------------------------------

def _mesh_body(model: MeshModel, flags):
    mesh = model.mesh
    w, h = mesh.width, mesh.height
    dims = model.mlp.dims
    header = _MESH_HDR.pack(int(w), int(h), model.white_level, model.mu, mesh.n_vertices,
                            model.n_features, interp.SCHEMES.index(model.scheme),
                            harmonic.MODES.index(model.encoding), len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    sec = _Sections()
    if flags & POS_U16:
        q = _separate_duplicates(quantize_positions(mesh.positions, w, h))
        sec.add("POSI", q)
        positions = dequantize_positions(q, w, h)
    else:
        dt = _float_dtype(flags)
        sec.add("POSI", mesh.positions.astype(dt))
        positions = mesh.positions.astype(dt).astype(np.float64)
    _add_features(sec, model.features, flags)
    _add_mlp(sec, model.mlp, flags)
    bits = tiebreak_bits(mesh, positions)
    sec.add("TIEB", np.concatenate([np.frombuffer(struct.pack("<I", len(bits)), np.uint8), np.packbits(bits)]))
    return sec.pack(header)


def _splat_body(scene: Scene, flags):
    ss = scene.splats
    mlp = scene.decoder()
    dims = mlp.dims
    focal = float("nan") if scene.focal is None else float(scene.focal)
    header = _SPLAT_HDR.pack(scene.width, scene.height, scene.white_level, scene.mu, len(ss), ss.n_features,
                             scene.sh_scale, focal, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    sec = _Sections()
    dt = _float_dtype(flags)
    if flags & POS_U16:
        means = np.clip(ss.means, 0, [scene.width, scene.height])
        sec.add("MEAN", quantize_positions(means, scene.width, scene.height))
    else:
        sec.add("MEAN", ss.means.astype(dt))
    sec.add("THET", ss.thetas.astype(dt))
    sec.add("SCAL", ss.scales.astype(dt))
    sec.add("OPAC", ss.opacities.astype(dt))
    sec.add("ZORD", ss.z.astype(dt))
    _add_features(sec, ss.features.reshape(len(ss) * 3, ss.n_features), flags)
    _add_mlp(sec, mlp, flags)
    return sec.pack(header)


def serialize(model, flags=FLOAT) -> bytes:
    """Encode a MeshModel or a splat Scene into container bytes."""
    if isinstance(model, MeshModel):
        kind, body = KIND_MESH, _mesh_body(model, flags)
    elif isinstance(model, Scene):
        kind, body = KIND_SPLAT, _splat_body(model, flags)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    payload = zstandard.ZstdCompressor(level=ZSTD_LEVEL).compress(body) if flags & ZSTD else body
    head = _OUTER.pack(MAGIC, VERSION, flags, kind, len(body), len(payload))
    blob = head + payload
    return blob + hashlib.blake2b(blob, digest_size=_CHECK_BYTES).digest()


def read_header(blob: bytes):
    """Validate the outer frame. Returns (flags, kind, body bytes)."""
    blob = bytes(blob)
    if len(blob) < 4:
        raise TruncatedError("container shorter than its magic")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    if len(blob) < _OUTER.size:
        raise TruncatedError("container header truncated")
    magic, version, flags, kind, body_len, payload_len = _OUTER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, reader supports {VERSION}")
    end = _OUTER.size + payload_len
    if len(blob) < end + _CHECK_BYTES:
        raise TruncatedError(f"payload truncated: have {len(blob)} bytes, need {end + _CHECK_BYTES}")
    digest = hashlib.blake2b(blob[:end], digest_size=_CHECK_BYTES).digest()
    if digest != blob[end:end + _CHECK_BYTES]:
        raise ChecksumError("checksum mismatch")
    payload = blob[_OUTER.size:end]
    if flags & ZSTD:
        try:
            body = zstandard.ZstdDecompressor().decompress(payload, max_output_size=body_len)
        except zstandard.ZstdError as exc:
            raise ChecksumError(f"entropy frame corrupt: {exc}") from None
    else:
        body = payload
    if len(body) != body_len:
        raise TruncatedError("decoded body length mismatch")
    return flags, kind, body


def deserialize(blob: bytes):
    flags, kind, body = read_header(blob)
    if kind == KIND_MESH:
        return _read_mesh(body, flags)
    if kind == KIND_SPLAT:
        return _read_splat(body, flags)
    raise ContainerError(f"unknown model kind {kind}")


def _dims(body, start, n):
    end = start + 4 * n
    if len(body) < end:
        raise TruncatedError("header truncated")
    return list(struct.unpack_from(f"<{n}I", body, start)), end


def _read_mesh(body, flags):
    if len(body) < _MESH_HDR.size:
        raise TruncatedError("model header truncated")
    w, h, white, mu, nv, nf, scheme, enc, nd = _MESH_HDR.unpack_from(body)
    dims, pos = _dims(body, _MESH_HDR.size, nd)
    sec = _read_sections(body, pos)
    if flags & POS_U16:
        positions = dequantize_positions(_array(sec, "POSI", np.uint16, (nv, 2)), w, h)
    else:
        positions = _array(sec, "POSI", _float_dtype(flags), (nv, 2)).astype(np.float64)
    features = _read_features(sec, (nv, nf), flags)
    mlp = _read_mlp(sec, dims, flags)
    tieb = sec.get("TIEB", b"\0\0\0\0")
    if len(tieb) < 4:
        raise TruncatedError("tie-break section truncated")
    (n_bits,) = struct.unpack_from("<I", tieb)
    bits = np.unpackbits(np.frombuffer(tieb[4:], np.uint8)).astype(bool)
    if len(bits) < n_bits:
        raise TruncatedError("tie-break section truncated")
    mesh = rebuild_mesh(positions, w, h, bits[:n_bits])
    if mesh.n_vertices != nv:
        raise ContainerError("vertex count changed while rebuilding the mesh")
    return MeshModel(mesh, features, mlp, interp.SCHEMES[scheme], harmonic.MODES[enc], white, mu,
                     mlp.weights[0].dtype.type)


def _read_splat(body, flags):
    if len(body) < _SPLAT_HDR.size:
        raise TruncatedError("model header truncated")
    w, h, white, mu, n, nf, sh_scale, focal, nd = _SPLAT_HDR.unpack_from(body)
    dims, pos = _dims(body, _SPLAT_HDR.size, nd)
    sec = _read_sections(body, pos)
    dt = _float_dtype(flags)
    if flags & POS_U16:
        means = dequantize_positions(_array(sec, "MEAN", np.uint16, (n, 2)), w, h)
    else:
        means = _array(sec, "MEAN", dt, (n, 2)).astype(np.float64)
    ss = SplatSet(
        means=means,
        thetas=_array(sec, "THET", dt, (n,)).astype(np.float64),
        scales=_array(sec, "SCAL", dt, (n, 2)).astype(np.float64),
        opacities=_array(sec, "OPAC", dt, (n,)).astype(np.float64),
        features=_read_features(sec, (3 * n, nf), flags).reshape(n, 3, nf),
        z=_array(sec, "ZORD", dt, (n,)).astype(np.float64),
    )
    mlp = _read_mlp(sec, dims, flags)
    return Scene(ss, w, h, dims[1] if len(dims) > 2 else 0, len(dims) - 2, 0, sh_scale,
                 None if np.isnan(focal) else focal, mlp, white, mu)


def parse_quantize(spec: str) -> int:
    """'int8,uint16,fp16[,zstd|raw]' -> flags; zstd is on unless 'raw' is given."""
    names = {"int8": FEAT_I8, "uint16": POS_U16, "fp16": MLP_F16, "zstd": ZSTD, "f64": FLOAT64}
    flags = ZSTD
    for tok in filter(None, (t.strip().lower() for t in spec.split(","))):
        if tok == "raw":
            flags &= ~ZSTD
        elif tok in names:
            flags |= names[tok]
        else:
            raise ValueError(f"unknown quantization {tok!r}")
    return flags


def save(path, model, flags=FLOAT):
    data = serialize(model, flags)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def requantize(model, flags):
    """The model as the decoder would see it after a roundtrip through ``flags``."""
    return deserialize(serialize(model, flags))
