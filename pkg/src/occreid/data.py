"""Person-image datasets: folder/manifest ingestion, a procedural synthetic
dataset with ground-truth occlusion masks, and the P x K identity sampler."""
from __future__ import annotations

import hashlib
import itertools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .augment import Obstacle, occlude, synthetic_obstacles
from .errors import ConfigError, LoadError

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
IMAGE_SUFFIXES = (".png", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp")
_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass
class PersonImage:
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    person_id: int
    camera_id: int
    split: str
    mask: np.ndarray | None = None  # ground-truth occlusion, synthetic only
    path: str | None = None


@dataclass
class Dataset:
    train: list[PersonImage]
    query: list[PersonImage]
    gallery: list[PersonImage]
    height: int
    width: int
    pixel_mean: np.ndarray = field(default_factory=lambda: np.full(3, 0.5, np.float32))
    pixel_std: np.ndarray = field(default_factory=lambda: np.full(3, 0.25, np.float32))
    palettes: dict[int, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if self.train:
            self.pixel_mean, self.pixel_std = channel_stats(self.train)

    @property
    def train_ids(self) -> list[int]:
        return sorted({r.person_id for r in self.train})

    def label_map(self) -> dict[int, int]:
        """Train person ids -> contiguous classifier labels."""
        return {pid: i for i, pid in enumerate(self.train_ids)}

    def split(self, name: str) -> list[PersonImage]:
        return getattr(self, name)


def channel_stats(records: Sequence[PersonImage]) -> tuple[np.ndarray, np.ndarray]:
    stack = np.stack([r.pixels for r in records]).astype(np.float64)
    mean = stack.mean(axis=(0, 2, 3))
    std = np.maximum(stack.std(axis=(0, 2, 3)), 1e-3)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    """(N, 3, H, W) -> zero-mean / unit-variance per channel."""
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    return ((np.asarray(images, dtype=np.float32) - mean) / std).astype(np.float32)


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def parse_name(name: str) -> tuple[int, int] | None:
    """``0002_c1_000451.png`` -> (2, 1); None when the pattern is absent."""
    m = _NAME_RE.match(Path(name).name)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2))


def read_image(path: str | Path, height: int, width: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (width, height):
                im = im.resize((width, height), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(pixels).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_dataset(root: str | Path, layout: str = "folders", height: int = 256, width: int = 128) -> Dataset:
    """Load ``root/{train,query,gallery}`` or a manifest file.

    ``layout="folders"`` parses ``<pid>_c<cam>_*`` names; ``layout="manifest"``
    reads ``path pid cam split`` lines (``root`` is the manifest file).
    """
    root = Path(root)
    records: dict[str, list[PersonImage]] = {s: [] for s in SPLITS}
    if layout == "folders":
        if not root.is_dir():
            raise LoadError(f"dataset root {root} is not a directory")
        for split in SPLITS:
            folder = root / split
            if not folder.is_dir():
                raise LoadError(f"dataset split '{split}' missing under {root}")
            for path in sorted(folder.iterdir()):
                if path.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                parsed = parse_name(path.name)
                if parsed is None or parsed[0] < 0:
                    log.warning("skipping %s: name does not encode <pid>_c<cam>", path)
                    continue
                pid, cam = parsed
                records[split].append(PersonImage(read_image(path, height, width), pid, cam, split,
                                                  path=str(path)))
    elif layout == "manifest":
        if not root.is_file():
            raise LoadError(f"manifest {root} does not exist")
        for lineno, line in enumerate(root.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 4 or parts[3] not in SPLITS:
                log.warning("manifest line %d unparsable, skipped: %r", lineno, line)
                continue
            rel, pid, cam, split = parts
            path = (root.parent / rel) if not Path(rel).is_absolute() else Path(rel)
            records[split].append(PersonImage(read_image(path, height, width), int(pid), int(cam), split,
                                              path=str(path)))
    else:
        raise ConfigError(f"unknown dataset layout {layout!r}")
    for split in SPLITS:
        if not records[split]:
            raise LoadError(f"dataset split '{split}' is empty")
    return Dataset(records["train"], records["query"], records["gallery"], height, width)


def save_dataset(dataset: Dataset, root: str | Path) -> None:
    """Write in the folder layout with ``<pid>_c<cam>_<index>.png`` names."""
    root = Path(root)
    for split in SPLITS:
        folder = root / split
        folder.mkdir(parents=True, exist_ok=True)
        for i, rec in enumerate(dataset.split(split)):
            write_image(folder / f"{rec.person_id:04d}_c{rec.camera_id}_{i:06d}.png", rec.pixels)


# ---------------------------------------------------------------------------
# synthetic sprites
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_ids: int = 50
    images_per_id: int = 12
    num_test_ids: int | None = None  # defaults to num_ids
    test_images_per_id: int | None = None  # defaults to images_per_id
    queries_per_id: int = 1
    cameras: int = 4
    height: int = 256
    width: int = 128
    train_occlusion_rate: float = 0.0
    query_occlusion_rate: float = 1.0
    gallery_occlusion_rate: float = 0.0
    num_test_obstacles: int = 20
    pose_jitter: float = 1.0
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.num_ids < 2:
            raise ConfigError(f"synthetic: num_ids={self.num_ids} < 2")
        if self.images_per_id < 2:
            raise ConfigError(f"synthetic: images_per_id={self.images_per_id} < 2")
        if self.cameras < 2:
            raise ConfigError(f"synthetic: cameras={self.cameras} < 2")
        n_test = self.test_images_per_id or self.images_per_id
        if n_test <= self.queries_per_id:
            raise ConfigError("synthetic: test identities need at least one gallery image")
        for name in ("train_occlusion_rate", "query_occlusion_rate", "gallery_occlusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"synthetic: {name}={v} outside [0, 1]")


# fixed colour vocabulary, palettes are drawn from its product
_TOP = np.array([[0.85, 0.1, 0.1], [0.1, 0.55, 0.15], [0.1, 0.2, 0.8], [0.95, 0.8, 0.1],
                 [0.6, 0.1, 0.7], [0.95, 0.5, 0.05], [0.1, 0.75, 0.8], [0.95, 0.95, 0.95],
                 [0.15, 0.15, 0.15], [0.95, 0.45, 0.7], [0.5, 0.3, 0.1], [0.55, 0.8, 0.2]])
_BOTTOM = np.array([[0.1, 0.1, 0.35], [0.25, 0.25, 0.25], [0.55, 0.45, 0.3], [0.05, 0.05, 0.05],
                    [0.35, 0.5, 0.75], [0.6, 0.1, 0.1], [0.2, 0.4, 0.2], [0.8, 0.8, 0.75],
                    [0.45, 0.2, 0.5], [0.7, 0.55, 0.15]])
_HAIR = np.array([[0.08, 0.05, 0.03], [0.45, 0.3, 0.15], [0.85, 0.75, 0.4], [0.6, 0.6, 0.6]])
_PATTERNS = ("solid", "hstripe", "vstripe")


def make_palettes(n: int, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """n distinct (top, bottom, hair, pattern) index tuples."""
    combos = list(itertools.product(range(len(_TOP)), range(len(_BOTTOM)), range(len(_HAIR)),
                                    range(len(_PATTERNS))))
    order = rng.permutation(len(combos))
    if n > len(combos):
        raise ConfigError(f"synthetic: at most {len(combos)} distinct identities")
    return [combos[i] for i in order[:n]]


def palette_hash(palette: tuple) -> str:
    return hashlib.sha1(repr(tuple(int(v) for v in palette)).encode()).hexdigest()[:12]


def render_person(palette: tuple, height: int, width: int, rng: np.random.Generator,
                  camera: int = 0, jitter: float = 1.0, noise: float = 0.03) -> np.ndarray:
    """Draw a colour-block pedestrian on a textured background."""
    top_i, bottom_i, hair_i, pattern_i = palette
    yy, xx = np.mgrid[0:height, 0:width]
    y = (yy + 0.5) / height
    x = (xx + 0.5) / width
    cx = 0.5 + jitter * rng.uniform(-0.08, 0.08)
    dy = jitter * rng.uniform(-0.03, 0.03)
    sw = 1.0 + jitter * rng.uniform(-0.1, 0.1)
    y = y - dy

    # background: camera tint + smooth gradient + noise
    cam_rng = np.random.default_rng(1000 + camera)
    bg_base = cam_rng.uniform(0.3, 0.7, 3)
    bg = bg_base[:, None, None] + rng.uniform(-0.08, 0.08, 3)[:, None, None] * (y[None] - 0.5) * 2
    img = np.broadcast_to(bg, (3, height, width)).copy()

    def paint(mask, color):
        img[:, mask] = np.asarray(color)[:, None]

    top = _TOP[top_i]
    bottom = _BOTTOM[bottom_i]
    skin = np.array([0.9, 0.72, 0.6])
    # legs and shoes
    for side in (-1, 1):
        leg = (y > 0.52) & (y < 0.9) & (np.abs(x - (cx + side * 0.1 * sw)) < 0.085 * sw)
        paint(leg, bottom)
        paint((y >= 0.9) & (y < 0.95) & (np.abs(x - (cx + side * 0.11 * sw)) < 0.1 * sw), [0.1, 0.08, 0.07])
    # torso with pattern, arms slightly darker
    torso = (y > 0.19) & (y <= 0.53) & (np.abs(x - cx) < 0.22 * sw)
    arms = (y > 0.2) & (y < 0.5) & (np.abs(x - cx) >= 0.22 * sw) & (np.abs(x - cx) < 0.3 * sw)
    paint(arms, top * 0.8)
    pattern = _PATTERNS[pattern_i]
    if pattern == "solid":
        paint(torso, top)
    else:
        coord = y if pattern == "hstripe" else x - cx
        stripe = (np.floor(coord * (28 if pattern == "hstripe" else 14)) % 2) == 0
        paint(torso & stripe, top)
        paint(torso & ~stripe, top * 0.45 + 0.5 * np.array([1.0, 1.0, 1.0]) * 0.55)
    # head and hair
    head = ((x - cx) / (0.13 * sw)) ** 2 + ((y - 0.11) / 0.07) ** 2 <= 1.0
    paint(head, skin)
    paint(head & (y < 0.095), _HAIR[hair_i])

    gain = 1.0 + rng.uniform(-0.12, 0.12) + 0.05 * (camera % 3 - 1)
    img = img * gain + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_obstacle_set(count: int, seed: int, size: int = 48, prefix: str = "obs") -> list[Obstacle]:
    return synthetic_obstacles(count, np.random.default_rng([seed, 7919]), size=size, prefix=prefix)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic dataset; train and test identities are disjoint.

    Test occluders come from a dedicated obstacle pool (ids ``test###``)
    so training obstacles never appear in the test split.
    """
    rng = np.random.default_rng([spec.seed, 1])
    n_test_ids = spec.num_test_ids or spec.num_ids
    palettes = make_palettes(spec.num_ids + n_test_ids, rng)
    test_obstacles = make_obstacle_set(spec.num_test_obstacles, spec.seed + 104729, prefix="test")
    H, W = spec.height, spec.width

    def draw(pid, cam, split, occ_rate):
        pix = render_person(palettes[pid], H, W, rng, cam, spec.pose_jitter, spec.noise)
        mask = np.zeros((H, W), dtype=bool)
        if occ_rate > 0 and rng.random() < occ_rate:
            obs = test_obstacles[int(rng.integers(len(test_obstacles)))]
            s = occlude(pix, obs, rng)
            pix, mask = s.pixels, s.occlusion_mask
        return PersonImage(pix, pid, cam, split, mask)

    train, query, gallery = [], [], []
    for pid in range(spec.num_ids):
        for i in range(spec.images_per_id):
            train.append(draw(pid, i % spec.cameras, "train", spec.train_occlusion_rate))
    n_test = spec.test_images_per_id or spec.images_per_id
    for pid in range(spec.num_ids, spec.num_ids + n_test_ids):
        for i in range(n_test):
            cam = i % spec.cameras
            if i < spec.queries_per_id:
                query.append(draw(pid, cam, "query", spec.query_occlusion_rate))
            else:
                gallery.append(draw(pid, cam, "gallery", spec.gallery_occlusion_rate))
    ds = Dataset(train, query, gallery, H, W)
    ds.palettes = {pid: palettes[pid] for pid in range(spec.num_ids + n_test_ids)}
    return ds


# ---------------------------------------------------------------------------
# P x K sampling
# ---------------------------------------------------------------------------

class PKSampler:
    """Batches of exactly P identities with K images each.

    Every epoch shuffles the identities and walks them in chunks of P; the
    final short chunk is topped up with other random identities.  Identities
    with fewer than K images are sampled with replacement.
    """

    def __init__(self, person_ids: Sequence[int], P: int = 8, K: int = 4, seed: int = 0):
        self.P, self.K, self.seed = int(P), int(K), int(seed)
        self.index: dict[int, np.ndarray] = {}
        for i, pid in enumerate(person_ids):
            self.index.setdefault(int(pid), []).append(i)
        self.index = {k: np.asarray(v) for k, v in sorted(self.index.items())}
        self.ids = np.array(sorted(self.index))
        if len(self.ids) < self.P:
            raise ConfigError(f"sampler: P={self.P} exceeds the {len(self.ids)} identities available")
        if self.K < 1:
            raise ConfigError(f"sampler: K={self.K} must be positive")

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def __len__(self) -> int:
        return -(-len(self.ids) // self.P)

    def batches(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, int(epoch)])
        order = rng.permutation(self.ids)
        out = []
        for start in range(0, len(order), self.P):
            chunk = list(order[start:start + self.P])
            if len(chunk) < self.P:
                rest = np.setdiff1d(self.ids, chunk)
                chunk += list(rng.choice(rest, self.P - len(chunk), replace=False))
            idx = []
            for pid in chunk:
                pool = self.index[int(pid)]
                idx.extend(rng.choice(pool, self.K, replace=len(pool) < self.K))
            out.append(np.asarray(idx, dtype=np.int64))
        return out

    def __iter__(self) -> Iterator[np.ndarray]:
        for epoch in itertools.count(1):
            yield from self.batches(epoch)


def pk_sampler(person_ids: Sequence[int], P: int = 8, K: int = 4, seed: int = 0) -> Iterator[np.ndarray]:
    return iter(PKSampler(person_ids, P, K, seed))
