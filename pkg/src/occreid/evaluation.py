"""Inference-time retrieval: embeddings, cosine ranking, CMC and mAP.

Gallery entries sharing both person id and camera id with the query are
excluded from its ranking (Market-1501 protocol).  Equal distances are
broken by ascending gallery index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import PersonImage, normalize
from .errors import ContractError, MetricsError


def embed(model, images: Sequence[PersonImage] | np.ndarray, batch_size: int = 64,
          return_bundles: bool = False):
    """L2-normalised ID-relevant features, one row per image, no augmentation."""
    cfg = model.config
    if isinstance(images, np.ndarray):
        pixels = images
    else:
        pixels = np.stack([r.pixels for r in images]) if len(images) else np.zeros((0, 3, cfg.height, cfg.width))
    if pixels.shape[1:] != (3, cfg.height, cfg.width):
        raise ContractError(f"embed: images are {pixels.shape[1:]}, model expects (3, {cfg.height}, {cfg.width})")
    dtype = model.classifier.weight.dtype
    feats, bundles = [], []
    with dc.no_grad():
        for start in range(0, len(pixels), batch_size):
            x = normalize(pixels[start:start + batch_size], cfg.pixel_mean, cfg.pixel_std).astype(dtype)
            out = model(x)
            feats.append(out.f.data.astype(np.float64))
            if return_bundles:
                bundles.append(out.bundle)
    f = np.concatenate(feats) if feats else np.zeros((0, cfg.feature_dim))
    f /= np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    return (f, bundles) if return_bundles else f


def distance_matrix(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine distance 1 - <q, g> between unit rows."""
    return 1.0 - np.asarray(query, dtype=np.float64) @ np.asarray(gallery, dtype=np.float64).T


@dataclass
class RankingResult:
    dist: np.ndarray  # (Q, G)
    order: np.ndarray  # (Q, G) gallery indices, ascending distance
    valid: np.ndarray  # (Q, G) bool, indexed by gallery position
    matches: np.ndarray  # (Q, G) bool, same person id
    q_pids: np.ndarray
    g_pids: np.ndarray

    def ranked(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        """Valid gallery indices in rank order and their match flags."""
        o = self.order[q]
        keep = self.valid[q, o]
        idx = o[keep]
        return idx, self.matches[q, idx]

    @property
    def relevant_counts(self) -> np.ndarray:
        return (self.valid & self.matches).sum(axis=1)


def rank(dist: np.ndarray, q_pids, q_cams, g_pids, g_cams) -> RankingResult:
    dist = np.asarray(dist, dtype=np.float64)
    if not np.all(np.isfinite(dist)):
        raise MetricsError("distance matrix contains non-finite entries")
    q_pids, q_cams = np.asarray(q_pids), np.asarray(q_cams)
    g_pids, g_cams = np.asarray(g_pids), np.asarray(g_cams)
    if dist.shape != (len(q_pids), len(g_pids)):
        raise ContractError(f"distance matrix {dist.shape} vs {len(q_pids)} queries x {len(g_pids)} gallery")
    order = np.argsort(dist, axis=1, kind="stable")
    same_p = q_pids[:, None] == g_pids[None, :]
    same_c = q_cams[:, None] == g_cams[None, :]
    return RankingResult(dist, order, ~(same_p & same_c), same_p, q_pids, g_pids)


@dataclass
class MetricsReport:
    cmc: dict[int, float]
    mAP: float
    ap: list[float] = field(default_factory=list)
    num_queries: int = 0
    excluded: int = 0

    def lines(self) -> list[str]:
        out = [f"rank{r}: {v:.6f}" for r, v in sorted(self.cmc.items())]
        out += [f"mAP: {self.mAP:.6f}", f"queries: {self.num_queries}", f"excluded_queries: {self.excluded}"]
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def _evaluable(ranking: RankingResult) -> np.ndarray:
    keep = ranking.relevant_counts > 0
    if not keep.any():
        raise MetricsError("no query has a valid relevant gallery entry")
    return np.flatnonzero(keep)


def compute_cmc(ranking: RankingResult, ranks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """CMC@r: fraction of queries whose first valid match is within the top r."""
    queries = _evaluable(ranking)
    first = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        _, flags = ranking.ranked(q)
        first[i] = int(np.argmax(flags))  # 0-based position of the first match
    return {int(r): float(np.mean(first < r)) for r in ranks}


def average_precisions(ranking: RankingResult) -> np.ndarray:
    aps = []
    for q in _evaluable(ranking):
        _, flags = ranking.ranked(q)
        hits = np.cumsum(flags)
        pos = np.flatnonzero(flags)
        aps.append(float(np.mean(hits[pos] / (pos + 1.0))))
    return np.asarray(aps)


def compute_map(ranking: RankingResult) -> float:
    return float(np.mean(average_precisions(ranking)))


def evaluate_ranking(ranking: RankingResult, ranks: Sequence[int] = (1, 5, 10)) -> MetricsReport:
    aps = average_precisions(ranking)
    excluded = int((ranking.relevant_counts == 0).sum())
    return MetricsReport(compute_cmc(ranking, ranks), float(np.mean(aps)), aps.tolist(),
                         len(ranking.q_pids) - excluded, excluded)


def evaluate(model, query: Sequence[PersonImage], gallery: Sequence[PersonImage],
             ranks: Sequence[int] = (1, 5, 10)) -> tuple[MetricsReport, RankingResult]:
    qf, gf = embed(model, query), embed(model, gallery)
    ranking = rank(distance_matrix(qf, gf), [r.person_id for r in query], [r.camera_id for r in query],
                   [r.person_id for r in gallery], [r.camera_id for r in gallery])
    return evaluate_ranking(ranking, ranks), ranking


def rank_list(q: int, ranking: RankingResult, top_n: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Top-n valid gallery indices for query ``q`` with correct-match flags."""
    if not 0 <= q < len(ranking.q_pids):
        raise ContractError(f"query index {q} out of range for {len(ranking.q_pids)} queries")
    idx, flags = ranking.ranked(q)
    if top_n > len(idx):
        raise ContractError(f"top_n={top_n} exceeds the {len(idx)} valid gallery entries")
    return idx[:top_n], flags[:top_n]


def downsample_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Fraction of each feature cell covered by a full-resolution binary mask."""
    mask = np.asarray(mask, dtype=np.float64)
    H, W = mask.shape
    if H % height == 0 and W % width == 0:
        return mask.reshape(height, H // height, width, W // width).mean(axis=(1, 3))
    from PIL import Image
    im = Image.fromarray(mask.astype(np.float32), mode="F").resize((width, height), Image.BOX)
    return np.asarray(im, dtype=np.float64)


def attention_mask_mass(attn_map: np.ndarray, mask: np.ndarray) -> float:
    """Attention mass that falls on masked pixels of the input image."""
    cover = downsample_mask(mask, *attn_map.shape)
    return float((attn_map * cover).sum())
