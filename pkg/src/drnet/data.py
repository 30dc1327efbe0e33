"""Deterministic moving-shape scenes and their on-disk format.

Objects are circles, squares and isosceles triangles whose bounding box is
``size x size`` around the object center. Rendering uses 4x4 supersampling
for coverage, and the ground-truth box is the shape's exact extent.
Everything is a pure function of the :class:`SceneSpec` and the index.

On disk a dataset directory holds ``manifest.json``, ``annotations.jsonl``
and binary PGM (P5, grayscale) or PPM (P6, color) images. Video datasets
hold one directory per clip with its own manifest and annotations.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

CLASSES = ("circle", "square", "triangle")
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    canvas: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 10.0
    max_size: float = 26.0
    min_speed: float = 0.0  # px/frame
    max_speed: float = 2.0
    bounce: bool = True
    occlusion: bool = False
    noise: float = 0.1
    color: bool = False

    def __post_init__(self):
        if not (0 <= self.min_objects <= self.max_objects):
            raise ValueError("object count range is empty")
        if not (6 <= self.min_size <= self.max_size <= self.canvas):
            raise ValueError("size range must satisfy 6 <= min <= max <= canvas")
        if not (0 <= self.min_speed <= self.max_speed):
            raise ValueError("speed range is empty")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def channels(self) -> int:
        return 3 if self.color else 1


@dataclass
class SceneObject:
    cls: int
    cx: float
    cy: float
    size: float
    color: Tuple[float, ...]
    vx: float = 0.0
    vy: float = 0.0

    def box(self) -> Tuple[float, float, float, float]:
        return (self.cx, self.cy, self.size, self.size)


@dataclass
class VideoSequence:
    frames: np.ndarray  # [T, C, S, S]
    boxes: List[np.ndarray]  # per frame [G, 4]
    labels: List[np.ndarray]  # per frame [G]
    ids: List[np.ndarray] = field(default_factory=list)  # per frame object identities

    def __len__(self) -> int:
        return len(self.frames)


def _rng(spec: SceneSpec, *stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *stream])


def _coverage(cls: int, cx: float, cy: float, size: float, canvas: int):
    """Supersampled coverage of one shape inside its integer pixel window."""
    half = size / 2
    x0, x1 = max(int(np.floor(cx - half)), 0), min(int(np.ceil(cx + half)), canvas)
    y0, y1 = max(int(np.floor(cy - half)), 0), min(int(np.ceil(cy + half)), canvas)
    if x1 <= x0 or y1 <= y0:
        return None
    sub = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    xs = (np.arange(x0, x1)[:, None] + sub[None, :]).ravel()
    ys = (np.arange(y0, y1)[:, None] + sub[None, :]).ravel()
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    if cls == 0:
        inside = dx * dx + dy * dy <= half * half
    elif cls == 1:
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    else:
        # apex at top-center, base along the bottom edge
        t = (dy + half) / size  # 0 at apex, 1 at base
        inside = (t >= 0) & (t <= 1) & (np.abs(dx) <= half * t)
    cov = inside.reshape(y1 - y0, _SUPERSAMPLE, x1 - x0, _SUPERSAMPLE).mean(axis=(1, 3))
    return (slice(y0, y1), slice(x0, x1)), cov


def render(objects: Sequence[SceneObject], spec: SceneSpec, background: np.ndarray) -> np.ndarray:
    """Paint objects in order over ``background`` [C, S, S]; returns 8-bit-quantized floats."""
    img = background.copy()
    for ob in objects:
        hit = _coverage(ob.cls, ob.cx, ob.cy, ob.size, spec.canvas)
        if hit is None:
            continue
        (sy, sx), cov = hit
        for c in range(img.shape[0]):
            img[c, sy, sx] = img[c, sy, sx] * (1 - cov) + ob.color[c] * cov
    return quantize(img)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, spec.noise, size=(spec.channels, spec.canvas, spec.canvas))


def _overlaps(box, others, margin: float = 1.0) -> bool:
    cx, cy, s, _ = box
    for ox, oy, os_, _ in others:
        if abs(cx - ox) < (s + os_) / 2 + margin and abs(cy - oy) < (s + os_) / 2 + margin:
            return True
    return False


def _sample_objects(spec: SceneSpec, rng: np.random.Generator) -> List[SceneObject]:
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects: List[SceneObject] = []
    for _ in range(count):
        for _attempt in range(50):
            size = float(rng.uniform(spec.min_size, spec.max_size))
            half = size / 2
            cx = float(rng.uniform(half, spec.canvas - half))
            cy = float(rng.uniform(half, spec.canvas - half))
            cls = int(rng.integers(len(CLASSES)))
            color = tuple(float(v) for v in rng.uniform(0.45, 1.0, size=spec.channels))
            speed = float(rng.uniform(spec.min_speed, spec.max_speed))
            angle = float(rng.uniform(0, 2 * np.pi))
            if spec.occlusion or not _overlaps((cx, cy, size, size), [o.box() for o in objects]):
                objects.append(SceneObject(cls, cx, cy, size, color,
                                           speed * np.cos(angle), speed * np.sin(angle)))
                break
    return objects


def _targets(objects: Sequence[SceneObject]):
    boxes = np.array([o.box() for o in objects], dtype=np.float64).reshape(-1, 4)
    labels = np.array([o.cls for o in objects], dtype=np.int64)
    return boxes, labels


def generate_image(spec: SceneSpec, index: int):
    """(image [C, S, S], boxes [G, 4], labels [G]) for one index."""
    rng = _rng(spec, 0, index)
    background = _background(spec, rng)
    objects = _sample_objects(spec, rng)
    boxes, labels = _targets(objects)
    return render(objects, spec, background), boxes, labels


def generate_images(spec: SceneSpec, count: int, start: int = 0):
    images, boxes, labels = [], [], []
    for i in range(start, start + count):
        im, b, l = generate_image(spec, i)
        images.append(im)
        boxes.append(b)
        labels.append(l)
    return np.stack(images), boxes, labels


def reflect(x, lo: float, hi: float):
    """Fold ``x`` into [lo, hi] as an elastic bounce between the two walls."""
    span = hi - lo
    if span <= 0:
        return np.full_like(np.asarray(x, dtype=np.float64), lo)
    u = np.mod(np.asarray(x, dtype=np.float64) - lo, 2 * span)
    return lo + np.where(u > span, 2 * span - u, u)


def object_at(ob: SceneObject, t: int, spec: SceneSpec) -> SceneObject:
    half = ob.size / 2
    x = ob.cx + ob.vx * t
    y = ob.cy + ob.vy * t
    if spec.bounce:
        x = float(reflect(x, half, spec.canvas - half))
        y = float(reflect(y, half, spec.canvas - half))
    return dataclasses.replace(ob, cx=float(x), cy=float(y))


def generate_video(spec: SceneSpec, frames: int, index: int = 0) -> VideoSequence:
    """Objects under constant velocity with wall reflection; the noisy
    background is fixed for the whole clip."""
    if frames < 1:
        raise ValueError("a video needs at least one frame")
    rng = _rng(spec, 1, index)
    background = _background(spec, rng)
    objects = _sample_objects(spec, rng)
    out_frames, boxes, labels, ids = [], [], [], []
    for t in range(frames):
        moved = [object_at(o, t, spec) for o in objects]
        if not spec.bounce:
            keep = [i for i, o in enumerate(moved) if _inside(o, spec.canvas)]
            moved = [moved[i] for i in keep]
        else:
            keep = list(range(len(moved)))
        b, l = _targets(moved)
        out_frames.append(render(moved, spec, background))
        boxes.append(b)
        labels.append(l)
        ids.append(np.array(keep, dtype=np.int64))
    return VideoSequence(np.stack(out_frames), boxes, labels, ids)


def _inside(ob: SceneObject, canvas: int) -> bool:
    half = ob.size / 2
    return half <= ob.cx <= canvas - half and half <= ob.cy <= canvas - half


# ------------------------------------------------------------------ disk format


class DatasetError(ValueError):
    pass


def write_pnm(path, img: np.ndarray) -> None:
    """Write [C, H, W] in [0, 1] as binary P5 (C=1) or P6 (C=3)."""
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError("PNM images need 1 or 3 channels")
    raw = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = raw[0].tobytes() if c == 1 else raw.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + body)


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: only 8-bit P5/P6 images are supported")
    c = 1 if magic == b"P5" else 3
    if len(data) - pos < w * h * c:
        raise DatasetError(f"{path}: truncated pixel data")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    img = raw.reshape(h, w, c).transpose(2, 0, 1)
    return img.astype(np.float64) / 255.0


def _box_records(boxes: np.ndarray, labels: np.ndarray) -> list:
    return [{"cx": float(b[0]), "cy": float(b[1]), "w": float(b[2]), "h": float(b[3]), "class": int(l)}
            for b, l in zip(boxes, labels)]


def _parse_annotation(line: str, lineno: int, source: str):
    try:
        rec = json.loads(line)
        boxes = np.array([[b["cx"], b["cy"], b["w"], b["h"]] for b in rec["boxes"]],
                         dtype=np.float64).reshape(-1, 4)
        labels = np.array([int(b["class"]) for b in rec["boxes"]], dtype=np.int64)
        return str(rec["file"]), boxes, labels
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{source}:{lineno}: malformed annotation ({exc})") from exc


@dataclass
class Dataset:
    images: np.ndarray
    boxes: List[np.ndarray]
    labels: List[np.ndarray]
    files: List[str]
    classes: Tuple[str, ...] = CLASSES

    def __len__(self) -> int:
        return len(self.images)


def _spec_dict(spec: Optional[SceneSpec]):
    return None if spec is None else dataclasses.asdict(spec)


def write_dataset(root, images: np.ndarray, boxes: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                  spec: Optional[SceneSpec] = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    ext = "pgm" if images.shape[1] == 1 else "ppm"
    lines = []
    for i, (im, b, l) in enumerate(zip(images, boxes, labels)):
        name = f"images/{i:06d}.{ext}"
        write_pnm(root / name, im)
        lines.append(json.dumps({"file": name, "boxes": _box_records(b, l)}, sort_keys=True))
    (root / "annotations.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = {"kind": "images", "count": len(images), "classes": list(CLASSES), "spec": _spec_dict(spec)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_dataset(root) -> Dataset:
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise DatasetError(f"{root}: no annotations.jsonl")
    records = []
    for lineno, line in enumerate(ann.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            records.append(_parse_annotation(line, lineno, str(ann)))
    records.sort(key=lambda r: r[0])
    images = []
    for name, _, _ in records:
        path = root / name
        if not path.exists():
            raise DatasetError(f"{root}: missing image {name}")
        images.append(read_pnm(path))
    imgs = np.stack(images) if images else np.zeros((0, 1, 0, 0))
    return Dataset(imgs, [r[1] for r in records], [r[2] for r in records], [r[0] for r in records])


def write_video(root, video: VideoSequence) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if video.frames.shape[1] == 1 else "ppm"
    names, lines = [], []
    for t, frame in enumerate(video.frames):
        name = f"frame_{t:04d}.{ext}"
        write_pnm(root / name, frame)
        names.append(name)
        ids = video.ids[t] if video.ids else np.arange(len(video.boxes[t]))
        recs = _box_records(video.boxes[t], video.labels[t])
        for r, ident in zip(recs, ids):
            r["id"] = int(ident)
        lines.append(json.dumps({"file": name, "boxes": recs}, sort_keys=True))
    (root / "annotations.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "manifest.json").write_text(json.dumps({"kind": "video", "frames": names}, indent=2) + "\n",
                                        encoding="utf-8")


def read_video(root) -> VideoSequence:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    names = manifest.get("frames")
    if not isinstance(names, list) or not names:
        raise DatasetError(f"{root}: manifest lists no frames")
    ann = {}
    for lineno, line in enumerate((root / "annotations.jsonl").read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            name, b, l = _parse_annotation(line, lineno, str(root / "annotations.jsonl"))
            ids = np.array([int(r.get("id", i)) for i, r in enumerate(json.loads(line)["boxes"])], dtype=np.int64)
            ann[name] = (b, l, ids)
    frames, boxes, labels, ids = [], [], [], []
    for name in names:
        path = root / name
        if not path.exists():
            raise DatasetError(f"{root}: missing frame {name}")
        if name not in ann:
            raise DatasetError(f"{root}: no annotation for frame {name}")
        frames.append(read_pnm(path))
        b, l, i = ann[name]
        boxes.append(b)
        labels.append(l)
        ids.append(i)
    return VideoSequence(np.stack(frames), boxes, labels, ids)


def write_video_set(root, videos: Sequence[VideoSequence], spec: Optional[SceneSpec] = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    clips = []
    for i, v in enumerate(videos):
        name = f"clip_{i:04d}"
        write_video(root / name, v)
        clips.append(name)
    manifest = {"kind": "videos", "clips": clips, "classes": list(CLASSES), "spec": _spec_dict(spec)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_video_set(root) -> List[VideoSequence]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("kind") != "videos":
        raise DatasetError(f"{root}: not a video set")
    return [read_video(root / c) for c in manifest["clips"]]
