"""Binary and text file formats.

All binary formats are little-endian.

DFRM depth frame::

    b"DFRM", u32 version=1, u32 width, u32 height,
    f32 fx, fy, cx, cy, near, far,
    f32[height*width] depth (row-major, top-left first, 0 = invalid),
    u32 has_sigma, [f32[height*width] sigma]

STSG grid snapshot::

    b"STSG", u32 version=1, u32 N, u32 M,
    f64 origin_x, origin_y, origin_z, box_side, truncation,
    u32 aux_mode (0 weight, 1 variance), f64 weight_max, variance_min, variance_max,
    i32[N^3] offset table (x fastest, -1 = empty, else index into the block list),
    per listed block: M^3 voxels x fastest, 2 bytes each (i8 tsdf code, u8 aux code)
"""

from __future__ import annotations

import csv
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .geometry import DepthFrame, Intrinsics, Pose
from .grid import (AuxCodec, EMPTY, GridConfig, SparseTsdfGrid, quantize_tsdf)

DFRM_MAGIC = b"DFRM"
STSG_MAGIC = b"STSG"
VERSION = 1


class FormatError(ValueError):
    pass


@contextmanager
def _decoding(path):
    """Report short or malformed payloads as FormatError naming the file."""
    try:
        yield
    except FormatError:
        raise
    except (struct.error, ValueError, IndexError) as e:
        raise FormatError(f"{path}: truncated or corrupt data ({e})") from None


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e


def _write(path, data: bytes):
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


# -- depth frames ------------------------------------------------------------

def write_dfrm(path, frame: DepthFrame):
    intr = frame.intrinsics
    head = DFRM_MAGIC + struct.pack("<3I6f", VERSION, intr.width, intr.height, intr.fx, intr.fy,
                                    intr.cx, intr.cy, intr.near, intr.far)
    body = frame.depth.astype("<f4").tobytes()
    if frame.sigma is not None:
        tail = struct.pack("<I", 1) + frame.sigma.astype("<f4").tobytes()
    else:
        tail = struct.pack("<I", 0)
    _write(path, head + body + tail)


def read_dfrm(path) -> DepthFrame:
    data = _read(path)
    with _decoding(path):
        if data[:4] != DFRM_MAGIC:
            raise FormatError(f"{path}: not a DFRM file")
        version, w, h, fx, fy, cx, cy, near, far = struct.unpack_from("<3I6f", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported DFRM version {version}")
        off = 4 + struct.calcsize("<3I6f")
        n = w * h
        depth = np.frombuffer(data, "<f4", n, off).reshape(h, w).astype(np.float64)
        off += 4 * n
        (has_sigma,) = struct.unpack_from("<I", data, off)
        off += 4
        sigma = None
        if has_sigma:
            sigma = np.frombuffer(data, "<f4", n, off).reshape(h, w).astype(np.float64)
        intr = Intrinsics(w, h, float(fx), float(fy), float(cx), float(cy), float(near), float(far))
        return DepthFrame(intr, depth, sigma)


# -- trajectories ------------------------------------------------------------

TRAJECTORY_HEADER = (["frame"] + [f"r{i}{j}" for i in range(3) for j in range(3)]
                     + ["tx", "ty", "tz"])


def pose_to_row(index, pose: Pose):
    return [index] + [f"{v:.17g}" for v in pose.rotation.reshape(-1)] + \
        [f"{v:.17g}" for v in pose.translation]


def pose_from_row(values) -> tuple[int, Pose]:
    vals = [float(v) for v in values]
    if len(vals) == 12:
        vals = [0.0] + vals
    if len(vals) != 13:
        raise FormatError(f"pose row needs 13 values, got {len(vals)}")
    return int(vals[0]), Pose(np.array(vals[1:10]).reshape(3, 3), vals[10:13])


def write_trajectory(path, poses):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_HEADER)
        for i, p in enumerate(poses):
            w.writerow(pose_to_row(i, p))


def read_trajectory(path) -> list[Pose]:
    rows = []
    with open(path, newline="") as f:
        for line, row in enumerate(csv.reader(f), 1):
            if not row or row[0].strip().lower() == "frame":
                continue
            try:
                rows.append(pose_from_row(row))
            except ValueError as e:
                raise FormatError(f"{path}:{line}: {e}") from None
    rows.sort(key=lambda r: r[0])
    return [p for _, p in rows]


# -- grid snapshots ----------------------------------------------------------

_STSG_HEAD = "<3I5dI3d"


def write_grid_snapshot(path, grid: SparseTsdfGrid):
    cfg = grid.config
    n, m = cfg.blocks_per_axis, cfg.voxels_per_block_axis
    aux = cfg.aux
    head = STSG_MAGIC + struct.pack(_STSG_HEAD, VERSION, n, m, *cfg.box_origin, cfg.box_side,
                                    cfg.truncation, 0 if aux.mode == "weight" else 1,
                                    aux.weight_max, aux.variance_min, aux.variance_max)
    blocks = grid.allocated_blocks()
    table = np.full((n, n, n), EMPTY, dtype=np.int32)
    chunks = []
    for i, b in enumerate(blocks):
        table[tuple(b)] = i
        slot = grid.offset_table[tuple(b)]
        if grid.quantized:
            t_code, a_code = grid.tsdf[slot], grid.aux[slot]
        else:
            t_code = quantize_tsdf(grid.tsdf[slot], cfg.truncation)
            a_code = aux.encode(grid.aux[slot])
        pair = np.empty((m, m, m, 2), dtype=np.uint8)
        pair[..., 0] = t_code.view(np.uint8)
        pair[..., 1] = a_code
        chunks.append(pair.transpose(2, 1, 0, 3).tobytes())
    body = table.transpose(2, 1, 0).astype("<i4").tobytes()
    _write(path, head + body + b"".join(chunks))


def read_grid_snapshot(path, pool_capacity=None) -> SparseTsdfGrid:
    data = _read(path)
    with _decoding(path):
        if data[:4] != STSG_MAGIC:
            raise FormatError(f"{path}: not an STSG file")
        fields = struct.unpack_from(_STSG_HEAD, data, 4)
        version, n, m = fields[:3]
        if version != VERSION:
            raise FormatError(f"{path}: unsupported STSG version {version}")
        ox, oy, oz, side, trunc = fields[3:8]
        mode = "weight" if fields[8] == 0 else "variance"
        aux = AuxCodec(mode, *fields[9:12])
        cfg = GridConfig(n, m, (ox, oy, oz), side, trunc, aux=aux)
        off = 4 + struct.calcsize(_STSG_HEAD)
        table = np.frombuffer(data, "<i4", n ** 3, off).reshape(n, n, n).transpose(2, 1, 0)
        off += 4 * n ** 3
        k = int((table >= 0).sum())
        grid = SparseTsdfGrid(cfg, pool_capacity if pool_capacity is not None else max(k, 1))
        payload = np.frombuffer(data, np.uint8, k * m ** 3 * 2, off).reshape(k, m, m, m, 2)
        for coord in np.argwhere(table >= 0):
            i = table[tuple(coord)]
            slot = grid.allocate_block(coord)
            block = payload[i].transpose(2, 1, 0, 3)
            grid.tsdf[slot] = block[..., 0].view(np.int8)
            grid.aux[slot] = block[..., 1]
        return grid


# -- meshes ------------------------------------------------------------------

_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")])
_PLY_FACE = np.dtype([("n", "u1"), ("i", "<u4", (3,))])


def write_ply(mesh, path):
    """Binary little-endian PLY with positions, normals and triangle faces."""
    v = np.empty(len(mesh.vertices), _PLY_VERTEX)
    for k, name in enumerate("xyz"):
        v[name] = mesh.vertices[:, k]
        v["n" + name] = mesh.normals[:, k]
    f = np.empty(len(mesh.faces), _PLY_FACE)
    f["n"] = 3
    f["i"] = mesh.faces
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(v)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property float nx\nproperty float ny\nproperty float nz\n"
              f"element face {len(f)}\n"
              "property list uchar uint vertex_indices\n"
              "end_header\n").encode("ascii")
    _write(path, header + v.tobytes() + f.tobytes())


def read_ply(path):
    """Read a PLY written by :func:`write_ply`; returns a Mesh."""
    from .marching_cubes import Mesh

    data = _read(path)
    with _decoding(path):
        end = data.find(b"end_header\n")
        if not data.startswith(b"ply\n") or end < 0:
            raise FormatError(f"{path}: not a PLY file")
        header = data[:end].decode("ascii").splitlines()
        if "format binary_little_endian 1.0" not in header:
            raise FormatError(f"{path}: only binary little-endian PLY is supported")
        counts = {}
        for line in header:
            parts = line.split()
            if parts[:1] == ["element"]:
                counts[parts[1]] = int(parts[2])
        off = end + len(b"end_header\n")
        v = np.frombuffer(data, _PLY_VERTEX, counts.get("vertex", 0), off)
        off += v.nbytes
        f = np.frombuffer(data, _PLY_FACE, counts.get("face", 0), off)
        if np.any(f["n"] != 3):
            raise FormatError(f"{path}: non-triangle face")
        verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
        return Mesh(verts, normals, f["i"].astype(np.int64))


# -- debug images ------------------------------------------------------------

def write_pfm(path, image):
    """Single-channel little-endian PFM (scale -1), bottom row first."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    _write(path, header + img[::-1].tobytes())


def read_pfm(path):
    data = _read(path)
    with _decoding(path):
        lines = data.split(b"\n", 3)
        if lines[0] != b"Pf":
            raise FormatError(f"{path}: not a greyscale PFM")
        w, h = (int(x) for x in lines[1].split())
        scale = float(lines[2])
        dtype = "<f4" if scale < 0 else ">f4"
        img = np.frombuffer(lines[3], dtype, w * h).reshape(h, w)
        return img[::-1].astype(np.float64)
