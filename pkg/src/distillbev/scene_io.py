"""DBS1 scene files and dataset directories.

DBS1 layout (little-endian)::

    b"DBS1" | u16 version
    grid: f64 x_min, x_max, y_min, y_max | u32 cells_x, cells_y
    u32 box_count, then per box: f64 cx, cy, length, width, yaw, reserved | u32 class
    u32 block_count, then per block: u32 name_len | name | u32 C, H, W | f32 payload
    ego pose: f64 tx, ty, heading
    u64 seed

A dataset is a directory of ``NNN.dbs1`` files plus ``manifest.json``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .geometry import BevBox, EgoPose, GridSpec
from .scene import SceneConfig, SceneSample, derive_seed, generate_scene

MAGIC = b"DBS1"
VERSION = 1
MANIFEST = "manifest.json"
BLOCKS = ("teacher_input", "student_input", "gt_heatmap")


class SceneFormatError(ValueError):
    pass


def dumps_scene(sample: SceneSample) -> bytes:
    g = sample.grid
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<4d2I", g.x_min, g.x_max, g.y_min, g.y_max, g.cells_x, g.cells_y))
    buf.write(struct.pack("<I", len(sample.boxes)))
    for b in sample.boxes:
        buf.write(struct.pack("<6dI", b.cx, b.cy, b.length, b.width, b.yaw, 0.0, b.class_id))
    buf.write(struct.pack("<I", len(BLOCKS)))
    for name in BLOCKS:
        arr = np.asarray(getattr(sample, name))
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<3I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    p = sample.ego_pose
    buf.write(struct.pack("<3dQ", p.tx, p.ty, p.heading, sample.seed))
    return buf.getvalue()


def loads_scene(blob: bytes) -> SceneSample:
    if blob[:4] != MAGIC:
        raise SceneFormatError("not a DBS1 scene (bad magic)")
    try:
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != VERSION:
            raise SceneFormatError(f"unsupported DBS1 version {version}")
        pos = 6
        x0, x1, y0, y1, cx_, cy_ = struct.unpack_from("<4d2I", blob, pos)
        pos += struct.calcsize("<4d2I")
        grid = GridSpec(x0, x1, y0, y1, cx_, cy_)
        (nb,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        boxes = []
        rec = struct.calcsize("<6dI")
        for _ in range(nb):
            cx, cy, length, width, yaw, _reserved, cls = struct.unpack_from("<6dI", blob, pos)
            pos += rec
            boxes.append(BevBox(cx, cy, length, width, yaw, cls))
        (nblocks,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        blocks = {}
        for _ in range(nblocks):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            c, h, w = struct.unpack_from("<3I", blob, pos)
            pos += 12
            count = c * h * w
            if pos + 4 * count > len(blob):
                raise SceneFormatError(f"truncated block {name!r}")
            blocks[name] = np.frombuffer(blob, "<f4", count, pos).astype(np.float64).reshape(c, h, w)
            pos += 4 * count
        tx, ty, heading, seed = struct.unpack_from("<3dQ", blob, pos)
    except struct.error as exc:
        raise SceneFormatError(f"truncated scene: {exc}") from None
    missing = [b for b in BLOCKS if b not in blocks]
    if missing:
        raise SceneFormatError(f"scene lacks blocks {missing}")
    return SceneSample(boxes, blocks["teacher_input"], blocks["student_input"], blocks["gt_heatmap"],
                       EgoPose(tx, ty, heading), seed, grid)


def write_scene(path: str | Path, sample: SceneSample) -> None:
    Path(path).write_bytes(dumps_scene(sample))


def read_scene(path: str | Path) -> SceneSample:
    return loads_scene(Path(path).read_bytes())


def generation_threads() -> int:
    env = os.environ.get("DISTILLBEV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def generate_dataset(config: SceneConfig, seed: int, count: int) -> list[SceneSample]:
    seeds = [derive_seed(seed, i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=generation_threads()) as pool:
        return list(pool.map(lambda s: generate_scene(config, s), seeds))


def write_dataset(out_dir: str | Path, samples: list[SceneSample], config: SceneConfig, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(samples):
        name = f"{i:03d}.dbs1"
        write_scene(out / name, s)
        files.append(name)
    manifest = {"format": "DBS1", "version": VERSION, "seed": seed, "count": len(samples),
                "files": files, "config": config.to_dict()}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_manifest(data_dir: str | Path) -> dict:
    return json.loads((Path(data_dir) / MANIFEST).read_text(encoding="utf-8"))


def read_dataset(data_dir: str | Path) -> tuple[list[SceneSample], SceneConfig]:
    manifest = read_manifest(data_dir)
    samples = [read_scene(Path(data_dir) / f) for f in manifest["files"]]
    return samples, SceneConfig(**manifest["config"])
