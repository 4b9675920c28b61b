"""Binary and text codecs: point maps (POMA), checkpoints (POMC), indices (POMI), manifests.

All binary payloads are little-endian. Point maps, checkpoints and indices
store float32; depth maps are written as float64 ``.npy`` files.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .dataset import SceneRecord, View
from .encoder import EncoderConfig
from .errors import CorruptionError, FormatError, VersionError
from .geometry import CameraModel
from .retrieval import SceneEntry, SceneIndex

POMA_MAGIC = b"POMA"
POMC_MAGIC = b"POMC"
POMI_MAGIC = b"POMI"
VERSION = 1


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.buf = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"{self.what}: truncated (wanted {n} bytes at offset {self.pos})")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{r.what}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"{r.what}: unsupported version {version}")


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


# --------------------------------------------------------------------------
# point maps


def encode_point_map(pm: np.ndarray) -> bytes:
    pm = np.asarray(pm)
    if pm.ndim != 3 or pm.shape[2] != 3:
        raise FormatError(f"point map must be (H, W, 3), got {pm.shape}")
    H, W, _ = pm.shape
    return POMA_MAGIC + struct.pack("<III", VERSION, H, W) + pm.astype("<f4").tobytes()


def decode_point_map(data: bytes, what: str = "point map") -> np.ndarray:
    r = _Reader(data, what)
    _header(r, POMA_MAGIC)
    H, W = r.u32(), r.u32()
    pm = r.f32(H * W * 3).reshape(H, W, 3)
    if not r.done:
        raise CorruptionError(f"{what}: trailing bytes")
    return pm


def save_point_map(pm: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_point_map(pm))


def load_point_map(path) -> np.ndarray:
    return decode_point_map(_read_bytes(path), str(path))


# --------------------------------------------------------------------------
# checkpoints

_CONFIG_U32 = ("dim", "depth", "patch", "heads", "lora_rank")
_CONFIG_TAIL = ("image_size", "max_views", "predictor_depth", "mlp_ratio")


def encode_checkpoint(cfg: EncoderConfig, tensors: dict[str, torch.Tensor]) -> bytes:
    """Config block then a table of named float32 tensors in insertion order."""
    out = io.BytesIO()
    out.write(POMC_MAGIC + struct.pack("<I", VERSION))
    out.write(struct.pack("<5I", *(getattr(cfg, k) for k in _CONFIG_U32)))
    out.write(struct.pack("<f", cfg.lora_alpha))
    out.write(struct.pack("<4I", *(getattr(cfg, k) for k in _CONFIG_TAIL)))
    out.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def decode_checkpoint(data: bytes, what: str = "checkpoint") -> tuple[EncoderConfig, dict[str, torch.Tensor]]:
    r = _Reader(data, what)
    _header(r, POMC_MAGIC)
    head = dict(zip(_CONFIG_U32, struct.unpack("<5I", r.take(20))))
    head["lora_alpha"] = struct.unpack("<f", r.take(4))[0]
    head.update(zip(_CONFIG_TAIL, struct.unpack("<4I", r.take(16))))
    cfg = EncoderConfig(**head)
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = torch.from_numpy(r.f32(count).reshape(shape))
    if not r.done:
        raise CorruptionError(f"{what}: trailing bytes")
    return cfg, tensors


# --------------------------------------------------------------------------
# embedding index


def encode_index(index: SceneIndex) -> bytes:
    out = io.BytesIO()
    out.write(POMI_MAGIC + struct.pack("<II", VERSION, index.dim))
    for e in index.entries:
        raw = e.scene_id.encode()
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack("<I", len(e.views)))
        out.write(np.asarray(e.views).astype("<f4").tobytes())
        out.write(np.asarray(e.pooled).astype("<f4").tobytes())
    return out.getvalue()


def decode_index(data: bytes, what: str = "index") -> SceneIndex:
    r = _Reader(data, what)
    _header(r, POMI_MAGIC)
    d = r.u32()
    index = SceneIndex(d)
    while not r.done:
        sid = r.take(r.u32()).decode()
        nv = r.u32()
        views = r.f32(nv * d).reshape(nv, d).astype(np.float64)
        pooled = r.f32(d).astype(np.float64)
        index.entries.append(SceneEntry(sid, views, pooled, degenerate=not pooled.any()))
    return index


def save_index(index: SceneIndex, path) -> None:
    Path(path).write_bytes(encode_index(index))


def load_index(path) -> SceneIndex:
    return decode_index(_read_bytes(path), str(path))


# --------------------------------------------------------------------------
# manifest
#
# One JSON object per line, keys in this order:
#   scene_id, room [Lx, Ly, Lz], views [...], scene_captions [...], heldout_scene_captions [...],
#   referring_texts [...]
# and per view:
#   depth (path), points (path), camera [fx fy cx cy R00..R22 tx ty tz], captions [...],
#   heldout_captions [...]
# Paths are relative to the manifest's directory.


def record_to_json(rec: SceneRecord, view_paths: Sequence[tuple[str, str]]) -> str:
    views = []
    for i, (v, (dp, pp)) in enumerate(zip(rec.views, view_paths)):
        held = rec.heldout_view_captions[i] if i < len(rec.heldout_view_captions) else []
        views.append({"depth": dp, "points": pp, "camera": v.camera.as_numbers(),
                      "captions": list(v.captions), "heldout_captions": list(held)})
    return json.dumps({"scene_id": rec.scene_id, "room": [float(x) for x in rec.room],
                       "views": views, "scene_captions": list(rec.scene_captions),
                       "heldout_scene_captions": list(rec.heldout_scene_captions),
                       "referring_texts": list(rec.referring_texts)})


def write_corpus(records: Iterable[SceneRecord], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        (out / rec.scene_id).mkdir(exist_ok=True)
        paths = []
        for i, v in enumerate(rec.views):
            dp = f"{rec.scene_id}/view_{i:02d}.depth.npy"
            pp = f"{rec.scene_id}/view_{i:02d}.poma"
            np.save(out / dp, np.asarray(v.depth, dtype=np.float64), allow_pickle=False)
            save_point_map(v.point_map, out / pp)
            paths.append((dp, pp))
        lines.append(record_to_json(rec, paths))
    path = out / manifest_name
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_corpus(manifest_path) -> list[SceneRecord]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            views, held = [], []
            for v in obj["views"]:
                depth = np.load(root / v["depth"], allow_pickle=False)
                pm = load_point_map(root / v["points"]).astype(np.float64)
                views.append(View(depth, CameraModel.from_numbers(v["camera"]), pm, list(v["captions"])))
                held.append(list(v.get("heldout_captions", [])))
            records.append(SceneRecord(obj["scene_id"], np.array(obj["room"], dtype=np.float64), views,
                                       list(obj.get("scene_captions", [])),
                                       list(obj.get("heldout_scene_captions", [])), held,
                                       list(obj.get("referring_texts", []))))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{manifest_path}:{lineno}: malformed manifest record ({exc})") from exc
        except (OSError, ValueError) as exc:
            raise FormatError(f"{manifest_path}:{lineno}: cannot load view data ({exc})") from exc
    return records
