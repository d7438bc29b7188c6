"""Procedural scenes of small shapes over structured noise.

Nine categories, each a distinct silhouette drawn at its own grey level.  A
"pretrain" split holds large objects and a "finetune" split holds small ones,
so a detector trained on the first faces a size gap on the second.

Packs serialise to a small self-describing binary format (``SPK1``)::

    b"SPK1" | u32 version | u32 header_len | header (UTF-8 key=value lines)
    per scene:
        u32 height | u32 width | u32 channels | u8 flags
        float32[height * width * channels] raster (row-major, HWC)
        u32 n_objects | n_objects * (float64 x1, y1, x2, y2 | u32 category)

All integers and floats are little-endian.  ``flags`` bit 0 marks a scene that
received fewer objects than requested because placement ran out of retries.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .detector import CATEGORIES
from .errors import ContractError, FormatError

MAGIC = b"SPK1"
FORMAT_VERSION = 1
STRATA = ("eS", "rS", "gS", "N")


@dataclass
class SceneConfig:
    image_size: int = 96
    channels: int = 1
    min_objects: int = 2
    max_objects: int = 5
    min_side: float = 3.0
    max_side: float = 9.0
    min_separation: float = 12.0
    noise_amplitude: float = 0.08
    noise_sigma: float = 3.0
    background: float = 0.15
    intensity_jitter: float = 0.015
    supersample: int = 4
    max_retries: int = 200
    categories: tuple = CATEGORIES

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if len(self.categories) != len(CATEGORIES):
            raise ContractError(f"scene generator draws {len(CATEGORIES)} categories")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ContractError("need 0 <= min_objects <= max_objects")
        if not 0 < self.min_side <= self.max_side < self.image_size:
            raise ContractError("object sides must satisfy 0 < min_side <= max_side < image_size")

    @classmethod
    def pretrain(cls, **kw):
        """Large-object distribution."""
        return cls(**{"min_objects": 1, "max_objects": 4, "min_side": 12.0,
                      "max_side": 28.0, "min_separation": 24.0, **kw})

    @classmethod
    def finetune(cls, **kw):
        """Small-object distribution."""
        return cls(**{"min_objects": 2, "max_objects": 5, "min_side": 3.0,
                      "max_side": 9.0, "min_separation": 12.0, **kw})

    def to_header(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(v) if isinstance(v, tuple) else repr(v)
        return out

    @classmethod
    def from_header(cls, header: dict):
        kw = {}
        for f in fields(cls):
            if f.name not in header:
                continue
            raw = header[f.name]
            if f.name == "categories":
                kw[f.name] = tuple(raw.split(","))
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


@dataclass
class Scene:
    image: np.ndarray                 # (H, W, C) float32 in [0, 1]
    boxes: np.ndarray                 # (n, 4) float64 xyxy pixels
    labels: np.ndarray                # (n,) int
    short: bool = False               # fewer objects than requested

    def __len__(self):
        return len(self.labels)


@dataclass
class ScenePack:
    header: dict
    scenes: list = field(default_factory=list)

    @property
    def split(self):
        return self.header.get("split", "")

    @property
    def config(self) -> SceneConfig:
        return SceneConfig.from_header(self.header)

    def __len__(self):
        return len(self.scenes)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def shape_mask(category: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inside-test for a category on local coords u, v in [-1, 1] (v grows downward)."""
    name = CATEGORIES[category]
    au, av = np.abs(u), np.abs(v)
    if name == "disc":
        return u * u + v * v <= 1.0
    if name in ("square", "bar-h", "bar-v"):
        return (au <= 1.0) & (av <= 1.0)
    if name == "triangle":
        return (av <= 1.0) & (au <= (v + 1.0) / 2.0)
    if name == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    if name == "cross":
        return ((au <= 1.0) & (av <= 0.35)) | ((au <= 0.35) & (av <= 1.0))
    if name == "diamond":
        return au + av <= 1.0
    if name == "dot-cluster":
        return (au - 0.5) ** 2 + (av - 0.5) ** 2 <= 0.25
    raise ContractError(f"unknown category index {category}")


def render_coverage(category: int, box, size: int, ss: int = 4) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one shape on a size x size canvas."""
    x1, y1, x2, y2 = box
    cov = np.zeros((size, size))
    c0, c1 = max(0, int(np.floor(x1))), min(size, int(np.ceil(x2)))
    r0, r1 = max(0, int(np.floor(y1))), min(size, int(np.ceil(y2)))
    if c1 <= c0 or r1 <= r0:
        return cov
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(c0, c1)[:, None] + offs[None, :]).reshape(-1)
    ys = (np.arange(r0, r1)[:, None] + offs[None, :]).reshape(-1)
    u = (xs[None, :] - (x1 + x2) / 2) / ((x2 - x1) / 2)
    v = (ys[:, None] - (y1 + y2) / 2) / ((y2 - y1) / 2)
    inside = shape_mask(category, u, v).astype(np.float64)
    block = inside.reshape(r1 - r0, ss, c1 - c0, ss).mean(axis=(1, 3))
    cov[r0:r1, c0:c1] = block
    return cov


def category_intensity(category: int) -> float:
    return float(np.linspace(0.45, 1.0, len(CATEGORIES))[category])


def _box_extent(category: int, side: float):
    name = CATEGORIES[category]
    if name == "bar-h":
        return side, max(1.5, side / 3.0)
    if name == "bar-v":
        return max(1.5, side / 3.0), side
    return side, side


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    n = cfg.image_size
    noise = rng.normal(0.0, 1.0, (n, n))
    noise = gaussian_filter(noise, cfg.noise_sigma, mode="wrap")
    noise = noise / (noise.std() + 1e-12) * cfg.noise_amplitude
    img = np.clip(cfg.background + noise, 0.0, 1.0)

    want = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes, labels, centres = [], [], []
    tries = 0
    while len(boxes) < want and tries < cfg.max_retries:
        tries += 1
        cat = int(rng.integers(len(CATEGORIES)))
        w, h = _box_extent(cat, float(rng.uniform(cfg.min_side, cfg.max_side)))
        x1 = float(rng.uniform(0.0, n - w))
        y1 = float(rng.uniform(0.0, n - h))
        c = np.array([x1 + w / 2, y1 + h / 2])
        if any(np.linalg.norm(c - o) < cfg.min_separation for o in centres):
            continue
        boxes.append((x1, y1, x1 + w, y1 + h))
        labels.append(cat)
        centres.append(c)

    for box, cat in zip(boxes, labels):
        cov = render_coverage(cat, box, n, cfg.supersample)
        level = category_intensity(cat) + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)
        level = min(max(level, 0.0), 1.0)
        img = img * (1.0 - cov) + level * cov

    image = np.repeat(img[:, :, None], cfg.channels, axis=2).astype(np.float32)
    return Scene(
        image=image,
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.array(labels, dtype=np.int64),
        short=len(boxes) < want,
    )


# ---------------------------------------------------------------------------
# size strata
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrataConfig:
    """Inclusive upper area bounds (pixels^2) of the eS / rS / gS strata."""

    extremely_small: float = 16.0
    relatively_small: float = 36.0
    generally_small: float = 81.0

    def bounds(self) -> dict:
        return {
            "eS": (0.0, self.extremely_small),
            "rS": (self.extremely_small, self.relatively_small),
            "gS": (self.relatively_small, self.generally_small),
            "N": (self.generally_small, np.inf),
        }


def box_area(box) -> float:
    x1, y1, x2, y2 = box
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def size_stratum(box, strata: StrataConfig = StrataConfig()) -> str:
    """Stratum of an xyxy box (or a bare area) by inclusive upper bounds."""
    area = float(box) if np.isscalar(box) else box_area(box)
    if area <= strata.extremely_small:
        return "eS"
    if area <= strata.relatively_small:
        return "rS"
    if area <= strata.generally_small:
        return "gS"
    return "N"


# ---------------------------------------------------------------------------
# packs
# ---------------------------------------------------------------------------

def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent stream per scene so generation order never matters."""
    return np.random.default_rng([seed, zlib.crc32(split.encode()), index])


def generate_pack(cfg: SceneConfig, split: str, count: int, seed: int) -> ScenePack:
    if count < 0:
        raise ContractError("scene count must be >= 0")
    header = {"format_version": str(FORMAT_VERSION), "split": split,
              "count": str(count), "seed": str(seed), **cfg.to_header()}
    scenes = [generate_scene(cfg, scene_rng(seed, split, i)) for i in range(count)]
    return ScenePack(header=header, scenes=scenes)


def pack_bytes(pack: ScenePack) -> bytes:
    buf = io.BytesIO()
    head = "".join(f"{k}={v}\n" for k, v in pack.header.items()).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(head)))
    buf.write(head)
    for sc in pack.scenes:
        h, w, c = sc.image.shape
        buf.write(struct.pack("<IIIB", h, w, c, 1 if sc.short else 0))
        buf.write(np.ascontiguousarray(sc.image, dtype="<f4").tobytes())
        buf.write(struct.pack("<I", len(sc.labels)))
        for box, lab in zip(sc.boxes, sc.labels):
            buf.write(struct.pack("<4dI", *map(float, box), int(lab)))
    return buf.getvalue()


def save_pack(pack: ScenePack, path) -> None:
    Path(path).write_bytes(pack_bytes(pack))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.path, self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_pack(data: bytes, path=None) -> ScenePack:
    r = _Reader(data, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a scene pack (bad magic)", path, 0)
    version, head_len = r.unpack("<II", "header lengths")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported scene pack version {version}", path, 4)
    head_at = r.pos
    try:
        text = r.take(head_len, "header").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("header is not valid UTF-8", path, head_at) from None
    header = {}
    for line in text.splitlines():
        if "=" not in line:
            raise FormatError(f"malformed header line {line!r}", path, head_at)
        k, v = line.split("=", 1)
        header[k] = v
    for key in ("format_version", "split", "count"):
        if key not in header:
            raise FormatError(f"header lacks {key!r}", path, head_at)
    count = int(header["count"])
    scenes = []
    for _ in range(count):
        h, w, c, flags = r.unpack("<IIIB", "scene dims")
        raster = np.frombuffer(r.take(4 * h * w * c, "raster"), dtype="<f4").reshape(h, w, c)
        (n,) = r.unpack("<I", "object count")
        boxes, labels = [], []
        for _ in range(n):
            *box, lab = r.unpack("<4dI", "object record")
            boxes.append(box)
            labels.append(lab)
        scenes.append(Scene(image=raster.astype(np.float32),
                            boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
                            labels=np.array(labels, dtype=np.int64), short=bool(flags & 1)))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after {count} scenes", path, r.pos)
    return ScenePack(header=header, scenes=scenes)


def load_pack(path) -> ScenePack:
    return parse_pack(Path(path).read_bytes(), path)
