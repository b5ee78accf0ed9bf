"""Synthetic dense SAR-like scenes, rotated-box annotations, PGM images and dataset manifests.

Annotation text format, one target per line, '#' starts a comment:

    image_id cx cy w h theta_radians class_name

Manifest JSON:

    {"images": [{"id", "image_path", "annotation_path"}], "split": {"train": [...], "val": [...]}}

Relative paths in a manifest resolve against the manifest's directory.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError
from .geometry import RotatedBox, box_inside_image, flip_box

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SUPERSAMPLE = 4
DEFAULT_CLASSES = ("ship", "vehicle")


@dataclass
class SynthConfig:
    image_size: int = 64
    num_clusters: Tuple[int, int] = (1, 3)
    targets_per_cluster: Tuple[int, int] = (2, 4)
    extent_range: Tuple[float, float] = (6.0, 10.0)
    aspect_range: Tuple[float, float] = (1.5, 2.5)
    cluster_radius: float = 14.0
    speckle_looks: int = 4
    clutter_blob_count: int = 3
    background_mean: float = 0.08
    target_gain: Tuple[float, float] = (3.0, 6.0)
    cell_size: int = 8
    class_names: Tuple[str, ...] = DEFAULT_CLASSES
    val_stride: int = 2
    seed: int = 42

    def __post_init__(self) -> None:
        for name in ("num_clusters", "targets_per_cluster", "extent_range", "aspect_range",
                     "target_gain"):
            value = getattr(self, name)
            if len(value) != 2 or value[0] > value[1]:
                raise ConfigError(f"synth.{name} must be an ordered [low, high] pair, got {value}")
            setattr(self, name, tuple(value))
        self.class_names = tuple(self.class_names)
        if self.num_clusters[0] < 0 or self.targets_per_cluster[0] < 1:
            raise ConfigError("synth: cluster counts must be >= 0 and targets per cluster >= 1")
        if self.extent_range[0] / self.aspect_range[1] < 2.0:
            raise ConfigError(
                f"synth: the shortest target side must stay >= 2 pixels "
                f"(extent {self.extent_range[0]} / aspect {self.aspect_range[1]})"
            )
        if self.aspect_range[0] < 1.0:
            raise ConfigError("synth.aspect_range must be >= 1")
        if self.speckle_looks < 1:
            raise ConfigError(f"synth.speckle_looks must be a positive integer, got {self.speckle_looks}")
        if self.image_size <= 0 or self.cell_size <= 0 or self.image_size % self.cell_size:
            raise ConfigError("synth.image_size must be a positive multiple of synth.cell_size")
        if not self.class_names:
            raise ConfigError("synth.class_names must not be empty")
        if self.val_stride < 2:
            raise ConfigError(f"synth.val_stride must be >= 2, got {self.val_stride}")

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Scene:
    image: np.ndarray
    boxes: List[RotatedBox] = field(default_factory=list)
    id: str = ""

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataError(f"scene {self.id!r}: image must be (1,H,W), got {self.image.shape}")
        _, h, w = self.image.shape
        for box in self.boxes:
            if not (0.0 <= box.cx <= w - 1 and 0.0 <= box.cy <= h - 1):
                raise DataError(f"scene {self.id!r}: box center ({box.cx}, {box.cy}) outside image")

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def scene_id(index: int) -> str:
    return f"scene_{index:05d}"


def _place_cluster(cfg: SynthConfig, rng: np.random.Generator, used_cells: set) -> List[RotatedBox]:
    size = cfg.image_size
    margin = cfg.extent_range[1] / 2.0
    center = rng.uniform(margin, size - 1 - margin, size=2)
    heading = rng.uniform(-math.pi / 2, math.pi / 2)
    wanted = int(rng.integers(cfg.targets_per_cluster[0], cfg.targets_per_cluster[1] + 1))
    boxes: List[RotatedBox] = []
    for _ in range(wanted):
        for _attempt in range(50):
            radius = cfg.cluster_radius * math.sqrt(rng.uniform())
            angle = rng.uniform(0.0, 2.0 * math.pi)
            cx = center[0] + radius * math.cos(angle)
            cy = center[1] + radius * math.sin(angle)
            w = rng.uniform(*cfg.extent_range)
            h = w / rng.uniform(*cfg.aspect_range)
            theta = heading + rng.normal(0.0, 0.15)
            if not (0.0 <= cx <= size - 1 and 0.0 <= cy <= size - 1):
                continue
            box = RotatedBox(cx, cy, w, h, theta, class_id=0)
            cell = (int(cy // cfg.cell_size), int(cx // cfg.cell_size))
            if cell in used_cells or not box_inside_image(box, size, size):
                continue
            used_cells.add(cell)
            boxes.append(box)
            break
    return boxes


def _render_box(image: np.ndarray, box: RotatedBox, radiance: float) -> None:
    """Add an anti-aliased bright rectangle, brighter toward its +w end."""
    size_y, size_x = image.shape
    reach = 0.5 * math.hypot(box.w, box.h) + 1.0
    x0, x1 = max(0, int(math.floor(box.cx - reach))), min(size_x - 1, int(math.ceil(box.cx + reach)))
    y0, y1 = max(0, int(math.floor(box.cy - reach))), min(size_y - 1, int(math.ceil(box.cy + reach)))
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    xs = (np.arange(x0, x1 + 1)[:, None] + sub[None, :]).reshape(-1)
    ys = (np.arange(y0, y1 + 1)[:, None] + sub[None, :]).reshape(-1)
    gx, gy = np.meshgrid(xs, ys)
    c, s = math.cos(box.theta), math.sin(box.theta)
    u = c * (gx - box.cx) + s * (gy - box.cy)
    v = -s * (gx - box.cx) + c * (gy - box.cy)
    inside = (np.abs(u) <= box.w / 2.0) & (np.abs(v) <= box.h / 2.0)
    profile = radiance * (1.0 + 0.25 * u / (box.w / 2.0))
    samples = np.where(inside, profile, 0.0)
    ny, nx = y1 - y0 + 1, x1 - x0 + 1
    coverage = samples.reshape(ny, SUPERSAMPLE, nx, SUPERSAMPLE).mean(axis=(1, 3))
    image[y0:y1 + 1, x0:x1 + 1] += coverage


def _render_blob(image: np.ndarray, cx: float, cy: float, sigma: float, amplitude: float) -> None:
    ys, xs = np.mgrid[0:image.shape[0], 0:image.shape[1]]
    image += amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))


def synth_scene(cfg: SynthConfig, index: int) -> Scene:
    """Deterministic in (cfg.seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    image = np.full((size, size), cfg.background_mean)
    for _ in range(cfg.clutter_blob_count):
        cx, cy = rng.uniform(0, size - 1, size=2)
        _render_blob(image, cx, cy, rng.uniform(1.5, 4.0),
                     cfg.background_mean * rng.uniform(0.5, 1.5))
    boxes: List[RotatedBox] = []
    used_cells: set = set()
    clusters = int(rng.integers(cfg.num_clusters[0], cfg.num_clusters[1] + 1))
    for _ in range(clusters):
        boxes.extend(_place_cluster(cfg, rng, used_cells))
    for box in boxes:
        _render_box(image, box, cfg.background_mean * rng.uniform(*cfg.target_gain))
    looks = cfg.speckle_looks
    image *= rng.gamma(shape=looks, scale=1.0 / looks, size=image.shape)
    return Scene(image=np.clip(image, 0.0, 1.0)[None], boxes=boxes, id=scene_id(index))


def synth_scenes(cfg: SynthConfig, count: int, start: int = 0) -> List[Scene]:
    return [synth_scene(cfg, i) for i in range(start, start + count)]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def flip_scene(scene: Scene, horizontal: bool) -> Scene:
    axis = 2 if horizontal else 1
    image = np.ascontiguousarray(np.flip(scene.image, axis=axis))
    boxes = [flip_box(b, scene.width, scene.height, horizontal) for b in scene.boxes]
    return replace(scene, image=image, boxes=boxes)


def augment(scene: Scene, rng: np.random.Generator, p: float = 0.5) -> Scene:
    if rng.uniform() < p:
        scene = flip_scene(scene, horizontal=True)
    if rng.uniform() < p:
        scene = flip_scene(scene, horizontal=False)
    return scene


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def parse_annotation_text(text: str, class_names: Sequence[str] = DEFAULT_CLASSES,
                          source: str = "<text>") -> List[Tuple[str, RotatedBox]]:
    entries: List[Tuple[str, RotatedBox]] = []
    lookup = {name: i for i, name in enumerate(class_names)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 7:
            raise DataError(f"{source}:{lineno}: expected 7 fields, got {len(fields)}")
        image_id, name = fields[0], fields[6]
        try:
            cx, cy, w, h, theta = (float(v) for v in fields[1:6])
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-numeric box field in {line!r}") from None
        if name not in lookup:
            raise DataError(f"{source}:{lineno}: unknown class {name!r} (known: {list(class_names)})")
        if not (w > 0 and h > 0 and all(map(math.isfinite, (cx, cy, w, h, theta)))):
            raise DataError(f"{source}:{lineno}: box extents must be positive and finite")
        entries.append((image_id, RotatedBox(cx, cy, w, h, theta, class_id=lookup[name])))
    return entries


def parse_annotations(path: PathLike,
                      class_names: Sequence[str] = DEFAULT_CLASSES) -> List[Tuple[str, RotatedBox]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    return parse_annotation_text(text, class_names, source=str(path))


def format_annotations(entries: Sequence[Tuple[str, RotatedBox]],
                       class_names: Sequence[str] = DEFAULT_CLASSES) -> str:
    lines = ["# image_id cx cy w h theta class"]
    for image_id, b in entries:
        if not 0 <= b.class_id < len(class_names):
            raise DataError(f"class id {b.class_id} has no name")
        lines.append(f"{image_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r} {b.theta!r} "
                     f"{class_names[b.class_id]}")
    return "\n".join(lines) + "\n"


def write_annotations(path: PathLike, entries: Sequence[Tuple[str, RotatedBox]],
                      class_names: Sequence[str] = DEFAULT_CLASSES) -> None:
    Path(path).write_text(format_annotations(entries, class_names), encoding="utf-8")


# ---------------------------------------------------------------------------
# PGM images
# ---------------------------------------------------------------------------

def _pgm_tokens(blob: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping comments."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def decode_pgm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P5":
        raise DataError("not a binary PGM (P5) image")
    tokens, offset = _pgm_tokens(blob, 4)
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError("malformed PGM header") from None
    if maxval != 255:
        raise DataError(f"only 8-bit PGM (maxval 255) is supported, got {maxval}")
    pixels = blob[offset:offset + width * height]
    if len(pixels) != width * height:
        raise DataError(f"truncated PGM payload: need {width * height} bytes, have {len(pixels)}")
    data = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    return (data.astype(np.float64) / 255.0)[None]


def encode_pgm(image: np.ndarray) -> bytes:
    """Scale [0,1] values to 0..255 rounding half up; accepts (H,W) or (1,H,W)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    pixels = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(path: PathLike) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    try:
        return decode_pgm(blob)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    image_path: str
    annotation_path: str


@dataclass
class Manifest:
    images: List[ManifestEntry] = field(default_factory=list)
    split: Dict[str, List[str]] = field(default_factory=dict)
    root: Path = field(default_factory=Path)

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.images:
            if e.id == image_id:
                return e
        raise DataError(f"manifest has no image {image_id!r}")

    def ids(self, split: Optional[str] = None) -> List[str]:
        if split is None or split == "all":
            return [e.id for e in self.images]
        if split not in self.split:
            raise DataError(f"manifest has no split {split!r} (have {sorted(self.split)})")
        return list(self.split[split])

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> Dict[str, Any]:
        return {"images": [asdict(e) for e in self.images], "split": self.split}


def split_ids(ids: Sequence[str], val_stride: int = 2) -> Dict[str, List[str]]:
    """Every val_stride-th image (index % val_stride == val_stride - 1) goes to val."""
    val = [i for k, i in enumerate(ids) if k % val_stride == val_stride - 1]
    train = [i for k, i in enumerate(ids) if k % val_stride != val_stride - 1]
    return {"train": train, "val": val}


def load_split_file(path: PathLike) -> Dict[str, List[str]]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split file {path}: {exc}") from exc
    if not isinstance(data, dict) or not {"train", "val"} <= set(data):
        raise DataError(f"split file {path} needs 'train' and 'val' lists")
    return {"train": list(data["train"]), "val": list(data["val"])}


def load_manifest(path: PathLike, split_file: Optional[PathLike] = None) -> Manifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        images = [ManifestEntry(id=str(e["id"]), image_path=str(e["image_path"]),
                                annotation_path=str(e["annotation_path"]))
                  for e in data["images"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"manifest {path}: malformed image entry ({exc})") from exc
    split = data.get("split") or split_ids([e.id for e in images])
    if split_file is not None:
        split = load_split_file(split_file)
    known = {e.id for e in images}
    for name, ids in split.items():
        missing = [i for i in ids if i not in known]
        if missing:
            raise DataError(f"manifest {path}: split {name!r} names unknown images {missing[:3]}")
    return Manifest(images=images, split={k: list(v) for k, v in split.items()}, root=path.parent)


def save_manifest(path: PathLike, manifest: Manifest) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")
    return path


def load_scene(manifest: Manifest, image_id: str,
               class_names: Sequence[str] = DEFAULT_CLASSES) -> Scene:
    entry = manifest.entry(image_id)
    image = read_pgm(manifest.resolve(entry.image_path))
    annotations = parse_annotations(manifest.resolve(entry.annotation_path), class_names)
    boxes = [b for img, b in annotations if img == image_id]
    stray = {img for img, _ in annotations if img != image_id}
    if stray:
        logger.warning("%s: ignoring annotations for other images %s", entry.annotation_path,
                       sorted(stray)[:3])
    return Scene(image=image, boxes=boxes, id=image_id)


def load_scenes(manifest: Manifest, split: Optional[str] = None,
                class_names: Sequence[str] = DEFAULT_CLASSES) -> List[Scene]:
    return [load_scene(manifest, i, class_names) for i in manifest.ids(split)]


def write_dataset(cfg: SynthConfig, count: int, out_dir: PathLike) -> Manifest:
    """Write `count` synthetic scenes as PGM + annotation files and a manifest.json."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "annotations").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc
    entries: List[ManifestEntry] = []
    for index in range(count):
        scene = synth_scene(cfg, index)
        image_rel = f"images/{scene.id}.pgm"
        ann_rel = f"annotations/{scene.id}.txt"
        try:
            write_pgm(out / image_rel, scene.image)
            write_annotations(out / ann_rel, [(scene.id, b) for b in scene.boxes], cfg.class_names)
        except OSError as exc:
            raise DataError(f"cannot write scene {scene.id} under {out}: {exc}") from exc
        entries.append(ManifestEntry(id=scene.id, image_path=image_rel, annotation_path=ann_rel))
    manifest = Manifest(images=entries, split=split_ids([e.id for e in entries], cfg.val_stride),
                        root=out)
    save_manifest(out / "manifest.json", manifest)
    return manifest
