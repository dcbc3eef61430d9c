"""mAP and CMC rank-k under the cross-camera retrieval protocol."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

RANKS = (1, 5, 10)
METRICS_SCHEMA = {
    "type": "object",
    "required": ["mAP", "rank1", "rank5", "rank10", "num_query", "num_gallery", "config_hash"],
    "properties": {
        "mAP": {"type": "number", "minimum": 0, "maximum": 1},
        "rank1": {"type": "number", "minimum": 0, "maximum": 1},
        "rank5": {"type": "number", "minimum": 0, "maximum": 1},
        "rank10": {"type": "number", "minimum": 0, "maximum": 1},
        "num_query": {"type": "integer", "minimum": 0},
        "num_gallery": {"type": "integer", "minimum": 0},
        "config_hash": {"type": "string"},
    },
}


class NoRelevant(ValueError):
    pass


class EmptyGallery(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class RankedResult:
    query_index: int
    order: np.ndarray  # gallery indices, ascending distance, junk removed
    relevance: np.ndarray  # bool per position


def average_precision(relevance) -> float:
    rel = np.asarray(relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise NoRelevant("ranking has no relevant item")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    # fsum is correctly rounded, so the value does not depend on summation order
    return math.fsum((hits[rel] / ranks).tolist()) / total


def rank_gallery(qf, q_id, q_cam, gf, g_ids, g_cams, query_index: int = 0) -> RankedResult:
    dist = np.sqrt(np.maximum(((gf - qf) ** 2).sum(1), 0.0))
    order = np.argsort(dist, kind="stable")
    keep = ~((g_ids[order] == q_id) & (g_cams[order] == q_cam))
    order = order[keep]
    return RankedResult(query_index, order, g_ids[order] == q_id)


def evaluate_reid(
    query_features,
    query_ids,
    query_cams,
    gallery_features,
    gallery_ids,
    gallery_cams,
    ranks: Sequence[int] = RANKS,
) -> dict:
    """Rank the gallery for each query by Euclidean distance.

    Same-identity same-camera gallery entries are dropped per query;
    queries with no remaining relevant entry are skipped. Returns
    ``{"mAP", "cmc": {k: acc}, "num_valid_query"}``.
    """
    qf = np.asarray(query_features, dtype=np.float64)
    gf = np.asarray(gallery_features, dtype=np.float64)
    q_ids, q_cams = np.asarray(query_ids), np.asarray(query_cams)
    g_ids, g_cams = np.asarray(gallery_ids), np.asarray(gallery_cams)
    if len(gf) == 0:
        raise EmptyGallery("gallery is empty")
    if qf.ndim != 2 or gf.ndim != 2 or qf.shape[1] != gf.shape[1]:
        raise DimensionMismatch(f"query {qf.shape} vs gallery {gf.shape}")
    aps = []
    first_hit = []
    for i in range(len(qf)):
        res = rank_gallery(qf[i], q_ids[i], q_cams[i], gf, g_ids, g_cams, i)
        if not res.relevance.any():
            continue
        aps.append(average_precision(res.relevance))
        first_hit.append(int(np.argmax(res.relevance)) + 1)
    first_hit = np.asarray(first_hit)
    if not aps:
        return {"mAP": 0.0, "cmc": {k: 0.0 for k in ranks}, "num_valid_query": 0}
    return {
        "mAP": math.fsum(aps) / len(aps),
        "cmc": {k: float(np.mean(first_hit <= k)) for k in ranks},
        "num_valid_query": len(aps),
    }


def expected_random_ap(num_items: int, num_relevant: int) -> float:
    """Expected AP of a uniformly random ranking."""
    g, r = num_items, num_relevant
    if g == 1:
        return 1.0
    k = np.arange(1, g + 1)
    return float(np.sum((1 + (k - 1) * (r - 1) / (g - 1)) / k) / g)


def metrics_record(result: dict, num_query: int, num_gallery: int, config_hash: str) -> dict:
    cmc = result["cmc"]
    return {
        "mAP": result["mAP"],
        "rank1": cmc[1],
        "rank5": cmc[5],
        "rank10": cmc[10],
        "num_query": int(num_query),
        "num_gallery": int(num_gallery),
        "config_hash": config_hash,
    }


def write_metrics(record: dict, path) -> Path:
    import jsonschema

    jsonschema.validate(record, METRICS_SCHEMA)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2) + "\n")
    return path


def load_metrics(path) -> dict:
    import jsonschema

    record = json.loads(Path(path).read_text())
    jsonschema.validate(record, METRICS_SCHEMA)
    return record
