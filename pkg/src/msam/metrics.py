"""Retrieval evaluation over a many-captions-per-video ground truth.

Ranks use the optimistic tie rule: a query's rank is one plus the
number of candidates scoring *strictly* higher than its ground truth,
so ties resolve in the ground truth's favor. Text-to-video ranks one
correct video per text; video-to-text takes the best (minimum) rank
over all of a video's captions.

``oracle_ranks`` recomputes ranks by fully sorting each candidate list
in plain Python, sharing no counting logic with the fast path; the test
suite holds the two equal on random and tie-heavy inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, PairingError
from .tensor import Tensor

T2V = "text-to-video"
V2T = "video-to-text"


@dataclass
class RankVector:
    """1-based rank of the ground truth per query."""

    ranks: np.ndarray  # int64, one per query
    num_candidates: int

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        if self.ranks.size and not (
            (self.ranks >= 1).all() and (self.ranks <= self.num_candidates).all()
        ):
            raise ContractError(
                f"ranks must lie in [1, {self.num_candidates}], got "
                f"[{self.ranks.min()}, {self.ranks.max()}]"
            )


@dataclass
class RetrievalReport:
    direction: str
    r_at: dict  # K -> recall fraction
    mdr: float
    mnr: float
    ranks: RankVector

    RECALL_KS = (1, 5, 10)


def _scores(s_vt) -> np.ndarray:
    arr = s_vt.data if isinstance(s_vt, Tensor) else np.asarray(s_vt)
    if arr.ndim != 2:
        raise ContractError(f"score matrix must be 2-D, got shape {arr.shape}")
    return arr


def _check_gt(gt: Sequence[int], n_texts: int, n_videos: int) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.int64)
    if gt.shape != (n_texts,):
        raise PairingError(
            f"ground truth must map each of {n_texts} texts to a video, got shape {gt.shape}"
        )
    if gt.size and ((gt < 0).any() or (gt >= n_videos).any()):
        bad = int(gt[(gt < 0) | (gt >= n_videos)][0])
        raise PairingError(f"ground-truth video index {bad} is out of range [0, {n_videos})")
    return gt


def t2v_ranks(s_vt, gt: Sequence[int]) -> RankVector:
    """Per text (column), the rank of its ground-truth video among all
    videos. ``gt[j]`` is the row index of text j's video."""
    scores = _scores(s_vt)
    n_videos, n_texts = scores.shape
    gt = _check_gt(gt, n_texts, n_videos)
    cols = np.arange(n_texts)
    true_scores = scores[gt, cols]
    ranks = 1 + (scores > true_scores[None, :]).sum(axis=0)
    return RankVector(ranks, n_videos)


def v2t_ranks(s_vt, gt: Sequence[int]) -> RankVector:
    """Per video (row), the best rank over its ground-truth texts among
    all texts. Every video must own at least one caption."""
    scores = _scores(s_vt)
    n_videos, n_texts = scores.shape
    gt = _check_gt(gt, n_texts, n_videos)
    owned = [np.flatnonzero(gt == b) for b in range(n_videos)]
    empty = [b for b, o in enumerate(owned) if o.size == 0]
    if empty:
        raise PairingError(f"video index {empty[0]} has no ground-truth text")
    ranks = np.empty(n_videos, dtype=np.int64)
    for b in range(n_videos):
        row = scores[b]
        cand = 1 + (row[None, :] > row[owned[b]][:, None]).sum(axis=1)
        ranks[b] = cand.min()
    return RankVector(ranks, n_texts)


def oracle_ranks(s_vt, gt: Sequence[int], direction: str) -> RankVector:
    """Sorting-based reference: rank = first position of the ground
    truth's score in the descending sorted candidate list."""
    scores = _scores(s_vt)
    n_videos, n_texts = scores.shape
    gt = _check_gt(gt, n_texts, n_videos)

    def sorted_rank(candidates: list, true_score: float) -> int:
        ordered = sorted(candidates, reverse=True)
        return 1 + ordered.index(true_score)

    if direction == T2V:
        ranks = [
            sorted_rank(list(scores[:, j]), scores[gt[j], j]) for j in range(n_texts)
        ]
        return RankVector(np.asarray(ranks), n_videos)
    if direction == V2T:
        ranks = []
        for b in range(n_videos):
            mine = [j for j in range(n_texts) if gt[j] == b]
            if not mine:
                raise PairingError(f"video index {b} has no ground-truth text")
            row = list(scores[b])
            ranks.append(min(sorted_rank(row, scores[b, j]) for j in mine))
        return RankVector(np.asarray(ranks), n_texts)
    raise ContractError(f"unknown direction {direction!r}")


def report(ranks: RankVector, direction: str) -> RetrievalReport:
    """Recall at 1/5/10 plus median and mean rank."""
    if direction not in (T2V, V2T):
        raise ContractError(f"unknown direction {direction!r}")
    r = ranks.ranks
    if r.size == 0:
        raise ContractError("cannot report on an empty rank vector")
    r_at = {k: float((r <= k).mean()) for k in RetrievalReport.RECALL_KS}
    return RetrievalReport(
        direction=direction,
        r_at=r_at,
        mdr=float(np.median(r)),
        mnr=float(r.mean()),
        ranks=ranks,
    )


def format_report(rep: RetrievalReport) -> str:
    """Flat key-value text block; metric values carry four fractional
    digits, the query count stays integral."""
    lines = [
        f"direction {rep.direction}",
        f"r1 {rep.r_at[1]:.4f}",
        f"r5 {rep.r_at[5]:.4f}",
        f"r10 {rep.r_at[10]:.4f}",
        f"mdr {rep.mdr:.4f}",
        f"mnr {rep.mnr:.4f}",
        f"n_queries {rep.ranks.ranks.size}",
    ]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Inverse of :func:`format_report` for harness use."""
    out = {}
    for line in text.strip().splitlines():
        key, value = line.split(maxsplit=1)
        out[key] = value if key == "direction" else float(value)
    return out
