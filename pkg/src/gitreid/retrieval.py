"""Re-identification retrieval evaluation: cosine ranking, CMC, mAP, protocols."""

from __future__ import annotations

import csv
import logging
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

RANKS = (1, 5, 10, 20, 25)


@dataclass
class GalleryIndex:
    features: np.ndarray
    ids: np.ndarray
    cams: np.ndarray

    @classmethod
    def build(cls, features, ids, cams=None) -> "GalleryIndex":
        ids = np.asarray(ids)
        cams = np.zeros_like(ids) if cams is None else np.asarray(cams)
        return cls(l2_normalize(np.asarray(features, dtype=np.float64)), ids, cams)


@dataclass
class EvalReport:
    cmc: dict[int, float]
    mAP: float
    ap: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def rank1(self) -> float:
        return self.cmc[1]

    def rows(self) -> list[tuple[str, float]]:
        return [(f"rank{k}", v) for k, v in sorted(self.cmc.items())] + [("mAP", self.mAP)]

    def to_text(self) -> str:
        lines = [f"{'metric':<8} {'value':>8}", "-" * 17]
        lines += [f"{name:<8} {value:>8.4f}" for name, value in self.rows()]
        if self.skipped:
            lines.append(f"({len(self.skipped)} queries skipped: no valid gallery match)")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for name, value in self.rows():
                w.writerow([name, f"{value:.6f}"])


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def cosine_distance(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = l2_normalize(np.asarray(queries, dtype=np.float64))
    g = l2_normalize(np.asarray(gallery, dtype=np.float64))
    return 1.0 - q @ g.T


def rank_queries(query_feats, query_ids, query_cams, gallery: GalleryIndex,
                 cross_camera_filter: bool = True) -> list[np.ndarray | None]:
    """Gallery indices per query, nearest first; ties go to the lower index.

    With the filter on, gallery entries sharing both id and camera with the
    query are dropped. A query left with an empty gallery maps to ``None``.
    """
    # gallery rows are already unit-norm; normalising them again would move ties by an ulp
    dist = 1.0 - l2_normalize(np.asarray(query_feats, dtype=np.float64)) @ gallery.features.T
    query_ids, query_cams = np.asarray(query_ids), np.asarray(query_cams)
    out: list[np.ndarray | None] = []
    for i in range(len(dist)):
        order = np.argsort(dist[i], kind="stable")
        if cross_camera_filter:
            junk = (gallery.ids[order] == query_ids[i]) & (gallery.cams[order] == query_cams[i])
            order = order[~junk]
        out.append(order if len(order) else None)
    return out


def average_precision(hits: np.ndarray) -> float:
    """Mean of precision@k over the ranks k holding a relevant item.

    Summed as exact fractions and rounded once, so e.g. hits at ranks 1 and 3
    give exactly ``5 / 6``.
    """
    positions = np.flatnonzero(hits)
    if not len(positions):
        return 0.0
    total = sum(Fraction(i + 1, int(p) + 1) for i, p in enumerate(positions))
    return float(total / len(positions))


def cmc_map(rankings, query_ids, gallery_ids, ranks=RANKS) -> EvalReport:
    query_ids, gallery_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    first_hit, aps, skipped = [], [], []
    for qi, order in enumerate(rankings):
        if order is None:
            skipped.append(qi)
            continue
        hits = gallery_ids[order] == query_ids[qi]
        if not hits.any():
            skipped.append(qi)
            continue
        first_hit.append(int(np.argmax(hits)))
        aps.append(average_precision(hits))
    if skipped:
        logger.warning("%d queries skipped (no valid relevant gallery item)", len(skipped))
    if not aps:
        raise ValueError("no query has a relevant gallery item")
    first_hit = np.asarray(first_hit)
    cmc = {k: float((first_hit < k).mean()) for k in ranks}
    return EvalReport(cmc=cmc, mAP=float(np.mean(aps)), ap=aps, skipped=skipped)


def evaluate(query_feats, query_ids, query_cams, gallery_feats, gallery_ids, gallery_cams,
             cross_camera_filter: bool = True) -> EvalReport:
    gallery = GalleryIndex.build(gallery_feats, gallery_ids, gallery_cams)
    rankings = rank_queries(query_feats, query_ids, query_cams, gallery, cross_camera_filter)
    return cmc_map(rankings, query_ids, gallery.ids)


def self_retrieval(features, ids) -> EvalReport:
    """Each item queries all the others (leave-one-out), no camera filter."""
    ids = np.asarray(ids)
    n = len(ids)
    dist = cosine_distance(features, features)
    rankings = []
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        rankings.append(order[order != i])
    return cmc_map(rankings, ids, ids)


def vehicleid_protocol(features, ids, draws: int = 10, seed: int = 0,
                       split: str = "gallery_single") -> tuple[EvalReport, list[EvalReport]]:
    """Average over repeated random probe/gallery splits.

    ``split="gallery_single"`` puts one random image per id in the gallery
    and the rest in the probe set; ``split="probe_single"`` does the reverse.
    Ids with a single image are excluded.
    """
    if split not in ("gallery_single", "probe_single"):
        raise ValueError(f"unknown split {split!r}")
    features, ids = np.asarray(features), np.asarray(ids)
    uniq, counts = np.unique(ids, return_counts=True)
    dropped = uniq[counts < 2]
    if len(dropped):
        logger.warning("excluding %d ids with a single image", len(dropped))
    keep = uniq[counts >= 2]
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(draws):
        single, rest = [], []
        for vid in keep:
            members = np.flatnonzero(ids == vid)
            pick = rng.integers(len(members))
            single.append(members[pick])
            rest.extend(np.delete(members, pick))
        single, rest = np.asarray(single), np.asarray(rest)
        gal, probe = (single, rest) if split == "gallery_single" else (rest, single)
        gallery = GalleryIndex.build(features[gal], ids[gal])
        rankings = rank_queries(features[probe], ids[probe], np.zeros(len(probe)), gallery,
                                cross_camera_filter=False)
        reports.append(cmc_map(rankings, ids[probe], gallery.ids))
    avg = EvalReport(
        cmc={k: float(np.mean([r.cmc[k] for r in reports])) for k in reports[0].cmc},
        mAP=float(np.mean([r.mAP for r in reports])),
        ap=[a for r in reports for a in r.ap],
    )
    return avg, reports
