"""File formats and data generation.

PCAM binary cloud format (little-endian):
    magic   4 bytes  b"PCAM"
    version u16      1 (coordinates only) or 2 (adds per-point mask ids)
    count   u32      number of points
    points  count * 3 * float32
    ids     count * u8           (version 2 only)

Checkpoint format (little-endian):
    magic   4 bytes  b"PCKP"
    version u16      1
    hlen    u64      length of the JSON header in bytes
    header  JSON     {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    blobs   raw tensor bytes, offsets relative to the end of the header

Manifest files are `key = value` text; the `entry` key repeats, one line per
cloud: `entry = <path> | <label> | <split>`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

MAGIC_CLOUD = b"PCAM"
MAGIC_CKPT = b"PCKP"
SPLITS = ("train", "val", "test")
SHAPE_CLASSES = ("sphere", "cube", "torus", "plane")


class FormatError(ValueError):
    """Malformed binary file."""


# ---------------------------------------------------------------------------
# PCAM cloud files


def write_cloud(path, cloud: PointCloud, mask_ids=None):
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    version = 1 if mask_ids is None else 2
    with open(path, "wb") as f:
        f.write(MAGIC_CLOUD)
        f.write(struct.pack("<HI", version, pts.shape[0]))
        f.write(pts.tobytes())
        if mask_ids is not None:
            ids = np.ascontiguousarray(mask_ids, dtype=np.uint8)
            if ids.shape != (pts.shape[0],):
                raise ValueError(f"mask_ids shape {ids.shape} != ({pts.shape[0]},)")
            f.write(ids.tobytes())


def read_cloud(path, label=None):
    """Read a PCAM file. Returns (PointCloud, mask_ids-or-None)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC_CLOUD:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version not in (1, 2):
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    need = 10 + count * 12 + (count if version == 2 else 0)
    if len(raw) != need:
        raise FormatError(
            f"{path}: expected {need} bytes for {count} points, file ends at byte offset {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f4", count=count * 3, offset=10).reshape(count, 3)
    ids = None
    if version == 2:
        ids = np.frombuffer(raw, dtype=np.uint8, count=count, offset=10 + count * 12).copy()
    return PointCloud(pts.copy(), label=label), ids


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    class_names: list
    entries: list = field(default_factory=list)

    def subset(self, split):
        return [e for e in self.entries if e.split == split]


def write_manifest(path, manifest: DatasetManifest):
    lines = ["# point-cloud dataset manifest",
             "class_names = " + ", ".join(manifest.class_names)]
    for e in manifest.entries:
        lines.append(f"entry = {e.path} | {e.label} | {e.split}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path, check_files=True):
    base = os.path.dirname(os.path.abspath(path))
    class_names = None
    entries = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "class_names":
                class_names = [c.strip() for c in value.split(",") if c.strip()]
            elif key == "entry":
                parts = [p.strip() for p in value.split("|")]
                if len(parts) != 3:
                    raise ValueError(f"{path}:{ln}: entry needs 'path | label | split'")
                rel, label, split = parts
                if split not in SPLITS:
                    raise ValueError(f"{path}:{ln}: unknown split {split!r}")
                entries.append(ManifestEntry(rel, int(label), split))
            else:
                raise ValueError(f"{path}:{ln}: unknown key {key!r}")
    if class_names is None:
        raise ValueError(f"{path}: missing class_names")
    seen = set()
    for e in entries:
        if e.path in seen:
            raise ValueError(f"{path}: duplicate entry path {e.path!r}")
        seen.add(e.path)
        if not 0 <= e.label < len(class_names):
            raise ValueError(f"{path}: label {e.label} out of range for {e.path!r}")
        if check_files and not os.path.exists(os.path.join(base, e.path)):
            raise ValueError(f"{path}: missing file {e.path!r}")
    return DatasetManifest(class_names=class_names, entries=entries)


def load_split(manifest_path, split):
    """Load all clouds of one split; returns (clouds, labels)."""
    manifest = read_manifest(manifest_path, check_files=False)
    base = os.path.dirname(os.path.abspath(manifest_path))
    clouds, labels = [], []
    for e in manifest.subset(split):
        cloud, _ = read_cloud(os.path.join(base, e.path), label=e.label)
        clouds.append(cloud)
        labels.append(e.label)
    return clouds, np.asarray(labels, dtype=np.int64), manifest.class_names


# ---------------------------------------------------------------------------
# synthetic shapes


def _random_rotation(rng):
    # QR of a Gaussian matrix gives a uniform random orthogonal matrix
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def gen_synthetic(kind, n_points, noise, rng, orient=False, deform=1.0):
    """Sample a point cloud uniformly from a shape surface, plus Gaussian noise.

    kind: sphere | cube | torus | plane. With orient=True the shape is put in
    a random orientation before noise/normalization. deform > 1 additionally
    applies a random per-axis scaling, log-uniform in [1/deform, deform],
    before orientation (raises within-class variance).
    """
    if n_points < 8:
        raise ValueError(f"gen_synthetic: need n_points >= 8, got {n_points}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if kind == "sphere":
        v = rng.normal(size=(n_points, 3))
        pts = v / np.linalg.norm(v, axis=1, keepdims=True)
    elif kind == "cube":
        # pick a face, then a uniform point on it
        face = rng.integers(0, 6, size=n_points)
        uv = rng.uniform(-1, 1, size=(n_points, 2))
        pts = np.empty((n_points, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for i in range(n_points):
            coords = [uv[i, 0], uv[i, 1]]
            coords.insert(axis[i], sign[i])
            pts[i] = coords
    elif kind == "torus":
        R, r = 1.0, 0.4
        # rejection sampling corrects for the non-uniform area element in u
        u = np.empty(n_points)
        count = 0
        while count < n_points:
            cand = rng.uniform(0, 2 * np.pi, size=2 * n_points)
            accept = rng.uniform(0, 1, size=2 * n_points) < (R + r * np.cos(cand)) / (R + r)
            good = cand[accept][: n_points - count]
            u[count:count + len(good)] = good
            count += len(good)
        v = rng.uniform(0, 2 * np.pi, size=n_points)
        pts = np.stack([(R + r * np.cos(u)) * np.cos(v),
                        (R + r * np.cos(u)) * np.sin(v),
                        r * np.sin(u)], axis=1)
    elif kind == "plane":
        uv = rng.uniform(-1, 1, size=(n_points, 2))
        pts = np.concatenate([uv, np.zeros((n_points, 1))], axis=1)
    else:
        raise ValueError(f"gen_synthetic: unknown class {kind!r}")
    if deform > 1.0:
        pts = pts * np.exp(rng.uniform(-np.log(deform), np.log(deform), size=3))
    if orient:
        pts = pts @ _random_rotation(rng).T
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    # shapes are symmetric around the origin by construction, so scale by the
    # max norm without re-centering (the sample centroid is only O(1/sqrt n))
    pts = pts / np.linalg.norm(pts, axis=1).max()
    return PointCloud(pts.astype(np.float32))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(tensors, path, meta=None):
    """Write named arrays plus a metadata dict; bit-exact round-trip."""
    arrays = {}
    for name, t in tensors.items():
        arrays[name] = np.ascontiguousarray(t.data if hasattr(t, "data") else t)
    table = []
    offset = 0
    for name, arr in arrays.items():
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": table}).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC_CKPT)
        f.write(struct.pack("<HQ", 1, len(header)))
        f.write(header)
        for arr in arrays.values():
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, select=None):
    """Read a checkpoint; returns (meta, {name: ndarray}).

    `select` is an optional predicate on tensor names (or a name prefix).
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC_CKPT:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    version, hlen = struct.unpack_from("<HQ", raw, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    body = 14 + hlen
    try:
        header = json.loads(raw[14:body])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e
    total = sum(t["nbytes"] for t in header["tensors"])
    if len(raw) != body + total:
        raise FormatError(
            f"{path}: blob section is {len(raw) - body} bytes, header promises {total}")
    if isinstance(select, str):
        prefix = select
        select = lambda name: name.startswith(prefix)
    out = {}
    for t in header["tensors"]:
        if select is not None and not select(t["name"]):
            continue
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"]),
                            count=int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1,
                            offset=body + t["offset"]).reshape(t["shape"])
        out[t["name"]] = arr.copy()
    return header["meta"], out
