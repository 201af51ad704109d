"""Datasets: PGM image trees, SPK1 event files and synthetic glyphs."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

SPK_MAGIC = b"SPK1"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Items with integer class ids; ``class_names[i]`` names class ``i``.

    Static items are ``[n, C, H, W]``; event items are ``[n, T, C, H, W]``.
    """

    items: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    templates: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.items) != len(self.labels):
            raise DatasetError(f"{len(self.items)} items but {len(self.labels)} labels")

    @property
    def is_events(self) -> bool:
        return self.items.ndim == 5

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.items)

    def indices_by_class(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in range(self.num_classes)}

    def class_id(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise DatasetError(f"unknown class {name!r}") from None


# -- PGM image trees -----------------------------------------------------------

def read_pgm(path, resolution: int | None = None) -> np.ndarray:
    """Load an 8-bit grayscale PGM scaled to [0, 1] as ``[1, H, W]``."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "1", "P"):
                raise DatasetError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
            img = img.convert("L")
            if resolution is not None and img.size != (resolution, resolution):
                if img.size[0] != img.size[1]:
                    raise DatasetError(
                        f"{path}: non-square image {img.size[0]}x{img.size[1]} cannot be resized "
                        f"to {resolution}x{resolution}"
                    )
                img = img.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from exc
    return arr[None]


def write_pgm(path, image: np.ndarray) -> None:
    """Write a ``[H, W]`` or ``[1, H, W]`` array in [0, 1] as binary PGM (P5)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(Path(path), format="PPM")


def load_image_dataset(root, resolution: int = 32) -> Dataset:
    """``root/<class_name>/<item>.pgm``; class ids follow sorted directory names."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class directories")
    items, labels, names = [], [], []
    for cid, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        files = sorted(cdir.glob("*.pgm"))
        if not files:
            raise DatasetError(f"{cdir}: no .pgm files")
        for f in files:
            items.append(read_pgm(f, resolution))
            labels.append(cid)
    return Dataset(np.stack(items), np.array(labels), names)


def save_image_dataset(dataset: Dataset, root) -> list[Path]:
    root = Path(root)
    written = []
    per_class: dict[int, int] = {}
    for item, label in zip(dataset.items, dataset.labels):
        cdir = root / dataset.class_names[label]
        cdir.mkdir(parents=True, exist_ok=True)
        n = per_class.get(int(label), 0)
        per_class[int(label)] = n + 1
        path = cdir / f"{n:04d}.pgm"
        try:
            write_pgm(path, item)
        except OSError as exc:
            raise DatasetError(f"{path}: {exc}") from exc
        written.append(path)
    return written


# -- SPK1 event files ------------------------------------------------------------

def encode_spk(events: np.ndarray) -> bytes:
    events = np.asarray(events)
    if events.ndim != 4:
        raise DatasetError(f"event tensor must be [T,C,H,W], got shape {events.shape}")
    if not np.isin(events, (0, 1)).all():
        raise DatasetError("event tensor must be binary")
    return SPK_MAGIC + struct.pack("<4I", *events.shape) + events.astype(np.uint8).tobytes()


def decode_spk(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if blob[:4] != SPK_MAGIC:
        raise DatasetError(f"{source}: bad magic {blob[:4]!r}, expected {SPK_MAGIC!r}")
    if len(blob) < 20:
        raise DatasetError(f"{source}: truncated header")
    shape = struct.unpack_from("<4I", blob, 4)
    if 0 in shape:
        raise DatasetError(f"{source}: zero dimension in shape {shape}")
    payload = blob[20:]
    expected = int(np.prod(shape))
    if len(payload) != expected:
        raise DatasetError(f"{source}: payload has {len(payload)} bytes, shape {shape} needs {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(shape)
    if arr.max(initial=0) > 1:
        raise DatasetError(f"{source}: spike values must be 0 or 1")
    return arr.astype(np.float64)


def write_spk(path, events: np.ndarray) -> None:
    Path(path).write_bytes(encode_spk(events))


def read_spk(path) -> np.ndarray:
    path = Path(path)
    return decode_spk(path.read_bytes(), str(path))


def load_event_dataset(root) -> Dataset:
    """``root/<class_name>/<item>.spk``; every file must share one shape."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not class_dirs:
        raise DatasetError(f"{root}: no class directories")
    items, labels, names = [], [], []
    for cid, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        for f in sorted(cdir.glob("*.spk")):
            arr = read_spk(f)
            if items and arr.shape != items[0].shape:
                raise DatasetError(f"{f}: shape {arr.shape} differs from {items[0].shape}")
            items.append(arr)
            labels.append(cid)
    if not items:
        raise DatasetError(f"{root}: no .spk files")
    return Dataset(np.stack(items), np.array(labels), names)


# -- synthetic glyphs -------------------------------------------------------------

def _draw_template(rng: np.random.Generator, resolution: int) -> np.ndarray:
    scale = 4
    size = resolution * scale
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    margin = 0.2 * size
    width = max(1, int(round(1.6 * scale * resolution / 32)))
    n_strokes = int(rng.integers(2, 5))
    for _ in range(n_strokes):
        pts = rng.uniform(margin, size - margin, size=(int(rng.integers(2, 4)), 2))
        draw.line([tuple(p) for p in pts], fill=255, width=width, joint="curve")
    small = img.resize((resolution, resolution), Image.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def _jitter(template: np.ndarray, rng: np.random.Generator, max_rot: float, max_shift: float, noise: float):
    n = template.shape[0]
    angle = np.deg2rad(rng.uniform(-max_rot, max_rot))
    zoom = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-max_shift, max_shift, size=2)
    c, s = np.cos(angle), np.sin(angle)
    mat = np.array([[c, -s], [s, c]]) / zoom
    centre = np.array([(n - 1) / 2.0, (n - 1) / 2.0])
    offset = centre - mat @ (centre + shift)
    out = ndimage.affine_transform(template, mat, offset=offset, order=1, mode="constant")
    out = out + noise * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


def make_synthetic_glyphs(
    num_classes: int,
    per_class: int,
    resolution: int,
    rng: np.random.Generator,
    min_separation: float = 4.0,
    max_rotation: float = 12.0,
    max_shift: float = 1.5,
    pixel_noise: float = 0.05,
) -> Dataset:
    """Random stroke templates, one per class, plus jittered noisy copies.

    Templates are redrawn until every pair is at least ``min_separation``
    apart in L2 norm.
    """
    if resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {resolution}")
    templates: list[np.ndarray] = []
    attempts = 0
    while len(templates) < num_classes:
        attempts += 1
        if attempts > 1000 * max(num_classes, 1):
            raise RuntimeError("could not draw sufficiently separated templates")
        cand = _draw_template(rng, resolution)
        if all(np.linalg.norm(cand - t) >= min_separation for t in templates):
            templates.append(cand)
    items, labels = [], []
    for cid, tpl in enumerate(templates):
        for _ in range(per_class):
            items.append(_jitter(tpl, rng, max_rotation, max_shift, pixel_noise)[None])
            labels.append(cid)
    names = [f"glyph_{i:03d}" for i in range(num_classes)]
    return Dataset(np.stack(items), np.array(labels), names, np.stack(templates))


# -- noise --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate must lie in [0, 1], got {self.rate}")


def add_gaussian_noise(item: np.ndarray, spec: NoiseSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """``clip(item + rate * N(0, 1), 0, 1)``; rate 0 returns the input unchanged."""
    item = np.asarray(item, dtype=np.float64)
    if spec.rate == 0.0:
        return item
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    return np.clip(item + spec.rate * rng.standard_normal(item.shape), 0.0, 1.0)


# -- class splits ---------------------------------------------------------------------

@dataclass
class SplitSpec:
    train: list[str]
    val: list[str]
    test: list[str]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        parts = {"train": set(self.train), "val": set(self.val), "test": set(self.test)}
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            shared = parts[a] & parts[b]
            if shared:
                raise DatasetError(f"classes {sorted(shared)} appear in both {a} and {b}")

    def ids(self, dataset: Dataset, part: str) -> np.ndarray:
        return np.array([dataset.class_id(n) for n in getattr(self, part)], dtype=np.int64)

    @classmethod
    def default(cls, dataset: Dataset, n_train: int, n_val: int = 0) -> "SplitSpec":
        names = list(dataset.class_names)
        if n_train + n_val >= len(names):
            raise DatasetError(
                f"{len(names)} classes cannot provide {n_train} train + {n_val} val + >=1 test"
            )
        return cls(names[:n_train], names[n_train:n_train + n_val], names[n_train + n_val:])

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "val": self.val, "test": self.test}, indent=2)

    @classmethod
    def load(cls, path) -> "SplitSpec":
        raw = json.loads(Path(path).read_text())
        return cls(list(raw.get("train", [])), list(raw.get("val", [])), list(raw.get("test", [])))
