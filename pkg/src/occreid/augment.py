"""Occluded sample augmentation, contrast-triplet mining and the usual
flip / pad-crop / random-erasing augmentations.

Images are float arrays (3, H, W) with values in [0, 1].  Obstacles are RGBA
patches (4, h, w) whose alpha channel is the occupancy mask.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ContractError, LoadError, PlacementError

log = logging.getLogger(__name__)

NO_OBSTACLE = "none"


@dataclass
class Obstacle:
    patch: np.ndarray  # (4, h, w) RGBA in [0, 1]
    obstacle_id: str
    scale_range: tuple[float, float] = (0.25, 0.6)

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype=np.float32)
        if self.patch.ndim != 3 or self.patch.shape[0] != 4:
            raise ContractError(f"obstacle {self.obstacle_id}: patch must be (4, h, w), got {self.patch.shape}")
        alpha = self.patch[3]
        if alpha.min() < 0 or alpha.max() > 1:
            raise ContractError(f"obstacle {self.obstacle_id}: alpha outside [0, 1]")

    @property
    def aspect(self) -> float:
        return self.patch.shape[2] / self.patch.shape[1]


@dataclass
class Placement:
    top: int
    left: int
    scale: float  # rendered height as a fraction of image height
    rotation: float = 0.0  # degrees


@dataclass
class AugmentedSample:
    pixels: np.ndarray
    person_id: int
    camera_id: int
    obstacle_id: str | None
    occlusion_mask: np.ndarray  # (H, W) bool
    source_index: int


def resize_chw(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (C, h, w) float array."""
    if arr.shape[1:] == (height, width):
        return arr.astype(np.float32, copy=True)
    out = np.empty((arr.shape[0], height, width), dtype=np.float32)
    for c in range(arr.shape[0]):
        im = Image.fromarray(np.ascontiguousarray(arr[c], dtype=np.float32), mode="F")
        out[c] = np.asarray(im.resize((width, height), Image.BILINEAR), dtype=np.float32)
    return out


def rendered_shape(obstacle: Obstacle, height: int, rotation: float = 0.0) -> tuple[int, int]:
    """Exact (rows, cols) that :func:`render_obstacle` produces, without rendering."""
    h = max(1, height)
    w = max(1, int(round(height * obstacle.aspect)))
    if not rotation:
        return h, w
    c, s = abs(math.cos(math.radians(rotation))), abs(math.sin(math.radians(rotation)))
    # same rounding as scipy.ndimage.rotate(reshape=True)
    return int(h * c + w * s + 0.5), int(h * s + w * c + 0.5)


def render_obstacle(obstacle: Obstacle, height: int, rotation: float = 0.0) -> np.ndarray:
    """Scale an obstacle to ``height`` rows (aspect kept), then rotate."""
    width = max(1, int(round(height * obstacle.aspect)))
    patch = resize_chw(obstacle.patch, max(1, height), width)
    if rotation:
        alpha = patch[3]
        rgb = patch[:3] * alpha  # rotate premultiplied colour
        rot = [ndimage.rotate(ch, rotation, reshape=True, order=1, mode="constant", cval=0.0)
               for ch in (*rgb, alpha)]
        alpha = np.clip(rot[3], 0.0, 1.0)
        rgb = np.stack(rot[:3]) / np.maximum(alpha, 1e-6)
        patch = np.concatenate([np.clip(rgb, 0, 1), alpha[None]]).astype(np.float32)
    return patch


def composite(image: np.ndarray, obstacle: Obstacle, placement: Placement,
              source_index: int = 0, person_id: int = -1, camera_id: int = -1) -> AugmentedSample:
    """Alpha-blend a rendered obstacle onto ``image`` at ``placement``."""
    _, H, W = image.shape
    patch = render_obstacle(obstacle, int(round(placement.scale * H)), placement.rotation)
    ph, pw = patch.shape[1:]
    if ph > H or pw > W:
        raise PlacementError(f"obstacle {obstacle.obstacle_id} renders to {ph}x{pw}, image is {H}x{W}")
    top = min(max(int(placement.top), 0), H - ph)
    left = min(max(int(placement.left), 0), W - pw)
    out = image.astype(np.float32, copy=True)
    alpha = patch[3]
    region = out[:, top:top + ph, left:left + pw]
    out[:, top:top + ph, left:left + pw] = (1.0 - alpha) * region + alpha * patch[:3]
    mask = np.zeros((H, W), dtype=bool)
    mask[top:top + ph, left:left + pw] = alpha > 0.5
    return AugmentedSample(out, person_id, camera_id, obstacle.obstacle_id, mask, source_index)


def sample_placement(image_shape: tuple[int, int], obstacle: Obstacle, rng: np.random.Generator,
                     max_rotation: float = 15.0) -> Placement:
    """Uniform over the lower two thirds, scale in the obstacle's range, small rotation.

    When the rendered patch would overflow the frame the scale is shrunk
    (not below the range minimum); failing that the patch is left upright.
    """
    H, W = image_shape
    lo, hi = obstacle.scale_range
    scale = rng.uniform(lo, hi)
    rotation = rng.uniform(-max_rotation, max_rotation)
    min_rows = int(round(lo * H))

    def fits(rows, rot):
        ph, pw = rendered_shape(obstacle, rows, rot)
        return ph <= H and pw <= W

    rows = sampled = int(round(scale * H))
    for rot in (rotation, 0.0):
        r = sampled
        while r >= min_rows and not fits(r, rot):
            r -= 1
        if r >= min_rows:
            rows, rotation = r, rot
            break
    else:
        raise PlacementError(f"obstacle {obstacle.obstacle_id} does not fit a {H}x{W} image at min scale {lo}")
    if rows != sampled:
        scale = rows / H
    ph, pw = rendered_shape(obstacle, rows, rotation)
    top_lo = H // 3
    top_hi = max(top_lo, H - ph)
    top = int(rng.integers(min(top_lo, top_hi), top_hi + 1))
    left = int(rng.integers(0, max(W - pw, 0) + 1))
    return Placement(top=top, left=left, scale=scale, rotation=rotation)


def occlude(image: np.ndarray, obstacle: Obstacle, rng: np.random.Generator, **kw) -> AugmentedSample:
    placement = sample_placement(image.shape[1:], obstacle, rng)
    return composite(image, obstacle, placement, **kw)


def augment_batch(batch: Sequence, obstacles: Sequence[Obstacle], k: int,
                  rng: np.random.Generator, source_indices: Sequence[int] | None = None) -> list[AugmentedSample]:
    """Expand a batch by k occluded copies of every image.

    ``batch`` items need ``pixels``, ``person_id`` and ``camera_id``.  The same
    k obstacles (drawn once per batch) are used for every image.  Output order
    is ``[x_i, x_i1, ..., x_ik]`` for each i.
    """
    if not obstacles:
        raise ConfigError("augment_batch: obstacle set is empty")
    if k < 1:
        raise ConfigError(f"augment_batch: k={k} must be >= 1")
    replace = k > len(obstacles)
    chosen = [obstacles[i] for i in rng.choice(len(obstacles), size=k, replace=replace)]
    if source_indices is None:
        source_indices = range(len(batch))
    out: list[AugmentedSample] = []
    for item, src in zip(batch, source_indices):
        pix = np.asarray(item.pixels, dtype=np.float32)
        out.append(AugmentedSample(pix.copy(), item.person_id, item.camera_id, None,
                                   np.zeros(pix.shape[1:], dtype=bool), src))
        for obs in chosen:
            out.append(occlude(pix, obs, rng, source_index=src,
                               person_id=item.person_id, camera_id=item.camera_id))
    return out


# ---------------------------------------------------------------------------
# triplet mining
# ---------------------------------------------------------------------------

@dataclass
class MiningResult:
    triplets: np.ndarray  # (T, 3) anchor, positive, negative
    skipped: int


def _obstacle_keys(obstacle_ids) -> np.ndarray:
    return np.array([NO_OBSTACLE if o is None else str(o) for o in obstacle_ids], dtype=object)


def mine_contrast_triplets(person_ids, obstacle_ids, dist: np.ndarray | None = None) -> MiningResult:
    """Batch-hard contrast triplets.

    positive: same person, different obstacle (originals count as ``none``);
    negative: different person, same obstacle.  Among eligible candidates the
    farthest positive and nearest negative under ``dist`` are taken.  Anchors
    without an eligible positive or negative are skipped and counted.
    """
    pids = np.asarray(person_ids)
    oids = _obstacle_keys(obstacle_ids)
    n = len(pids)
    if len(oids) != n:
        raise ContractError("mine_contrast_triplets: id arrays differ in length")
    if dist is None:
        dist = np.zeros((n, n))
    same_p = pids[:, None] == pids[None, :]
    same_o = oids[:, None] == oids[None, :]
    pos_ok = same_p & ~same_o
    neg_ok = ~same_p & same_o
    return _select_hardest(dist, pos_ok, neg_ok, "contrast")


def mine_batch_hard(person_ids, dist: np.ndarray | None = None) -> MiningResult:
    """Standard batch-hard triplets on identity alone (no obstacle predicate)."""
    pids = np.asarray(person_ids)
    n = len(pids)
    if dist is None:
        dist = np.zeros((n, n))
    same_p = pids[:, None] == pids[None, :]
    pos_ok = same_p & ~np.eye(n, dtype=bool)
    return _select_hardest(dist, pos_ok, ~same_p, "batch-hard")


def _select_hardest(dist, pos_ok, neg_ok, kind) -> MiningResult:
    has = pos_ok.any(axis=1) & neg_ok.any(axis=1)
    anchors = np.flatnonzero(has)
    pos = np.where(pos_ok, dist, -np.inf).argmax(axis=1)
    neg = np.where(neg_ok, dist, np.inf).argmin(axis=1)
    skipped = int(len(has) - len(anchors))
    if skipped:
        log.warning("%s mining: skipped %d of %d anchors without eligible pairs", kind, skipped, len(has))
    trip = np.stack([anchors, pos[anchors], neg[anchors]], axis=1).astype(np.int64)
    return MiningResult(trip.reshape(-1, 3), skipped)


def samples_triplets(samples: Sequence[AugmentedSample], dist: np.ndarray | None = None) -> MiningResult:
    return mine_contrast_triplets([s.person_id for s in samples], [s.obstacle_id for s in samples], dist)


# ---------------------------------------------------------------------------
# standard augmentation
# ---------------------------------------------------------------------------

def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def pad_crop(image: np.ndarray, rng: np.random.Generator, pad: int | None = None) -> np.ndarray:
    """Zero-pad by ``pad`` pixels then crop back to the original size."""
    _, H, W = image.shape
    pad = max(1, round(H * 10 / 256)) if pad is None else pad
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[:, top:top + H, left:left + W].copy()


def erase(image: np.ndarray, top: int, left: int, height: int, width: int,
          rng: np.random.Generator) -> np.ndarray:
    """Replace a rectangle with uniform noise in [0, 1]."""
    out = image.copy()
    if height <= 0 or width <= 0:
        return out
    out[:, top:top + height, left:left + width] = rng.random(
        (image.shape[0], height, width)).astype(image.dtype)
    return out


def random_erase(image: np.ndarray, rng: np.random.Generator, area=(0.02, 0.4),
                 min_aspect: float = 0.3) -> np.ndarray:
    _, H, W = image.shape
    for _ in range(100):
        target = rng.uniform(*area) * H * W
        ratio = math.exp(rng.uniform(math.log(min_aspect), math.log(1 / min_aspect)))
        h = int(round(math.sqrt(target * ratio)))
        w = int(round(math.sqrt(target / ratio)))
        if 0 < h < H and 0 < w < W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return erase(image, top, left, h, w, rng)
    return image.copy()


def standard_augment(image: np.ndarray, rng: np.random.Generator, p_flip: float = 0.5,
                     p_crop: float = 0.5, p_erase: float = 0.5) -> np.ndarray:
    out = np.asarray(image, dtype=np.float32)
    if rng.random() < p_flip:
        out = hflip(out)
    if rng.random() < p_crop:
        out = pad_crop(out, rng)
    if rng.random() < p_erase:
        out = random_erase(out, rng)
    return out


# ---------------------------------------------------------------------------
# obstacle sources
# ---------------------------------------------------------------------------

def synthetic_obstacles(count: int, rng: np.random.Generator, size: int = 48,
                        prefix: str = "obs") -> list[Obstacle]:
    """Procedural RGBA obstacles: boxes, blobs, posts and vehicles with textures."""
    out = []
    kinds = ("box", "blob", "post", "vehicle", "sign")
    for i in range(count):
        kind = kinds[i % len(kinds)]
        aspect = {"box": rng.uniform(0.7, 1.6), "blob": rng.uniform(0.8, 1.8),
                  "post": rng.uniform(0.35, 0.6), "vehicle": rng.uniform(1.4, 2.0),
                  "sign": rng.uniform(0.6, 1.0)}[kind]
        h, w = size, max(4, int(round(size * aspect)))
        yy, xx = np.mgrid[0:h, 0:w]
        yn, xn = (yy + 0.5) / h, (xx + 0.5) / w
        if kind == "box":
            alpha = np.ones((h, w))
        elif kind == "blob":
            r = ((xn - 0.5) / 0.5) ** 2 + ((yn - 0.55) / 0.47) ** 2
            alpha = (r <= 1.0).astype(float)
        elif kind == "post":
            alpha = ((np.abs(xn - 0.5) < 0.22) | (yn < 0.3)).astype(float)
        elif kind == "vehicle":
            body = (yn > 0.3) & (yn < 0.85)
            cabin = (yn > 0.05) & (yn <= 0.3) & (xn > 0.25) & (xn < 0.75)
            wheels = (((xn - 0.22) / 0.12) ** 2 + ((yn - 0.85) / 0.15) ** 2 <= 1) | \
                     (((xn - 0.78) / 0.12) ** 2 + ((yn - 0.85) / 0.15) ** 2 <= 1)
            alpha = (body | cabin | wheels).astype(float)
        else:
            alpha = ((yn < 0.55) | (np.abs(xn - 0.5) < 0.12)).astype(float)
        base = rng.uniform(0.05, 0.95, 3)
        second = rng.uniform(0.05, 0.95, 3)
        texture = rng.integers(0, 3)
        if texture == 0:
            t = (np.floor(yn * rng.integers(3, 7)) % 2)[None]
        elif texture == 1:
            t = ((np.floor(yn * 4) + np.floor(xn * 4)) % 2)[None]
        else:
            t = np.zeros((1, h, w))
        rgb = base[:, None, None] * (1 - t) + second[:, None, None] * t
        rgb = rgb * (0.8 + 0.2 * (1 - yn))[None] + rng.normal(0, 0.03, (3, h, w))
        patch = np.concatenate([np.clip(rgb, 0, 1), alpha[None]]).astype(np.float32)
        out.append(Obstacle(patch, f"{prefix}{i:03d}"))
    return out


def load_obstacles(directory: str | Path) -> list[Obstacle]:
    """Read RGBA patches from a directory; filename stem is the obstacle id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise LoadError(f"obstacle directory {directory} does not exist")
    out = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in (".png", ".ppm", ".pnm"):
            continue
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
        patch = arr.transpose(2, 0, 1)
        if not np.any(patch[3] > 0):
            log.warning("obstacle %s has empty alpha support, skipped", path.name)
            continue
        out.append(Obstacle(patch, path.stem))
    if not out:
        raise LoadError(f"no usable obstacle images in {directory}")
    return out


def save_obstacles(obstacles: Sequence[Obstacle], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for obs in obstacles:
        arr = np.clip(np.round(obs.patch.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGBA").save(directory / f"{obs.obstacle_id}.png")
