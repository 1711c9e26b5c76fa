"""Solution-space geometry: interpolation, quadratic connecting curves,
pairwise embedding distances, and token-level text distances.

Solution points live either in the concatenated (lead, fill) space (2*d_model)
or, when the fill vector is shared and held fixed, in the lead space alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .cramming import Arrangement, ProtoSolution, accuracy_from_vectors
from .datagen import TargetText
from .errors import InputError, NumericError
from .tinylm import TinyLM, embed


def solution_point(sol: ProtoSolution, fixed_fill: bool = False) -> torch.Tensor:
    """Flatten a solution into the interpolation space."""
    if fixed_fill:
        return sol.lead.detach().clone()
    return torch.cat([sol.lead, sol.fill]).detach().clone()


def split_point(
    point: torch.Tensor, d_model: int, fixed_fill: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    if fixed_fill is not None:
        if point.numel() != d_model:
            raise InputError(
                f"point has {point.numel()} dims, expected {d_model} with a fixed fill"
            )
        return point, fixed_fill
    if point.numel() != 2 * d_model:
        raise InputError(f"point has {point.numel()} dims, expected {2 * d_model}")
    return point[:d_model], point[d_model:]


def point_decode_accuracy(
    model: TinyLM,
    point: torch.Tensor,
    arrangement: Arrangement,
    text: TargetText,
    fixed_fill: torch.Tensor | None = None,
) -> float:
    """One-pass token accuracy of an arbitrary point in solution space."""
    lead, fill = split_point(point, model.config.d_model, fixed_fill)
    frac, _ = accuracy_from_vectors(model, lead, fill, arrangement, text.ids)
    return frac


def linear_interp_accuracy(
    model: TinyLM,
    sol_a: ProtoSolution,
    sol_b: ProtoSolution,
    text: TargetText,
    tau_grid=None,
    fixed_fill: torch.Tensor | None = None,
) -> list[tuple[float, float]]:
    """Accuracy along the straight segment between two same-text solutions."""
    if sol_a.arrangement != sol_b.arrangement or sol_a.n != sol_b.n:
        raise InputError("interpolation endpoints must share arrangement and length")
    p1 = solution_point(sol_a, fixed_fill is not None)
    p2 = solution_point(sol_b, fixed_fill is not None)
    taus = default_tau_grid() if tau_grid is None else list(tau_grid)
    out = []
    for tau in taus:
        point = (1.0 - tau) * p1 + tau * p2
        out.append(
            (tau, point_decode_accuracy(model, point, sol_a.arrangement, text, fixed_fill))
        )
    return out


def default_tau_grid(points: int = 11) -> list[float]:
    return [i / (points - 1) for i in range(points)]


@dataclass
class BezierCurve:
    """Quadratic curve p(tau) = (1-tau)^2 p1 + 2 tau (1-tau) control + tau^2 p2."""

    p1: torch.Tensor
    p2: torch.Tensor
    control: torch.Tensor

    def __post_init__(self) -> None:
        if not (self.p1.shape == self.p2.shape == self.control.shape):
            raise InputError("curve points must share one dimension")

    def at(self, tau: float) -> torch.Tensor:
        return (
            (1.0 - tau) ** 2 * self.p1
            + 2.0 * tau * (1.0 - tau) * self.control
            + tau**2 * self.p2
        )

    def velocity(self, tau: float) -> torch.Tensor:
        return 2.0 * (1.0 - tau) * (self.control - self.p1) + 2.0 * tau * (
            self.p2 - self.control
        )


def fit_bezier(
    model: TinyLM,
    p1: torch.Tensor,
    p2: torch.Tensor,
    text: TargetText,
    arrangement: Arrangement = Arrangement(),
    steps: int = 2000,
    seed: int = 0,
    learning_rate: float = 0.01,
    fixed_fill: torch.Tensor | None = None,
) -> BezierCurve:
    """Optimize the control point to minimize expected cross-entropy along the
    curve, sampling tau uniformly per step (Adam); endpoints never move."""
    p1 = p1.detach().clone()
    p2 = p2.detach().clone()
    control = ((p1 + p2) / 2.0).requires_grad_(True)
    optimizer = torch.optim.Adam([control], lr=learning_rate)
    gen = torch.Generator().manual_seed(seed)
    targets = torch.tensor(text.ids, dtype=torch.long)
    pattern = torch.tensor(arrangement.pattern(len(text)), dtype=torch.long)
    guided = arrangement.guided_positions(len(text))
    d = model.config.d_model
    for step in range(steps):
        tau = float(torch.rand((), generator=gen))
        point = (
            (1.0 - tau) ** 2 * p1 + 2.0 * tau * (1.0 - tau) * control + tau**2 * p2
        )
        lead, fill = split_point(point, d, fixed_fill)
        E = torch.stack([lead, fill])[pattern]
        logits = model.logits_from_embeddings(E)
        loss = F.cross_entropy(logits[guided], targets, reduction="sum")
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite curve loss at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return BezierCurve(p1=p1, p2=p2, control=control.detach().clone())


def curve_accuracy(
    model: TinyLM,
    curve: BezierCurve,
    text: TargetText,
    arrangement: Arrangement = Arrangement(),
    tau_grid=None,
    fixed_fill: torch.Tensor | None = None,
) -> list[tuple[float, float]]:
    taus = default_tau_grid() if tau_grid is None else list(tau_grid)
    return [
        (
            tau,
            point_decode_accuracy(model, curve.at(tau), arrangement, text, fixed_fill),
        )
        for tau in taus
    ]


_GL_NODES = 64


def curve_length_ratio(curve: BezierCurve) -> float:
    """Arc length of the curve over the straight-chord length.

    Gauss-Legendre quadrature on |p'(tau)|; the integrand is smooth, so 64
    nodes are far beyond sufficient. >= 1 up to quadrature noise.
    """
    chord = float(torch.linalg.vector_norm(curve.p2 - curve.p1))
    if chord == 0.0:
        raise InputError("curve endpoints coincide; length ratio undefined")
    nodes, weights = np.polynomial.legendre.leggauss(_GL_NODES)
    # map [-1, 1] -> [0, 1]
    taus = 0.5 * (nodes + 1.0)
    total = 0.0
    for tau, w in zip(taus, weights):
        speed = float(torch.linalg.vector_norm(curve.velocity(float(tau)).double()))
        total += 0.5 * w * speed
    return total / chord


# ---------------------------------------------------------------------------
# token-level text distance (TF-IDF over token ids)


@dataclass(frozen=True)
class DocStats:
    """Smoothed inverse document frequencies from an evaluation pool."""

    idf: dict
    n_docs: int

    @classmethod
    def from_documents(cls, documents) -> "DocStats":
        docs = [list(d) for d in documents]
        if not docs:
            raise InputError("document pool is empty")
        df: dict[int, int] = {}
        for doc in docs:
            for tok in set(doc):
                df[tok] = df.get(tok, 0) + 1
        n = len(docs)
        idf = {tok: math.log((1 + n) / (1 + k)) + 1.0 for tok, k in df.items()}
        return cls(idf=idf, n_docs=n)

    def weight(self, token: int) -> float:
        # tokens unseen in the pool get the maximal (df=0) smoothed weight
        return self.idf.get(token, math.log((1 + self.n_docs) / 1.0) + 1.0)


def tfidf_distance(ids_a, ids_b, stats: DocStats) -> float:
    """1 - cosine similarity of TF-IDF vectors (term = token id)."""
    a, b = list(ids_a), list(ids_b)
    if not a or not b:
        raise InputError("cannot compute TF-IDF distance of an empty sequence")
    va = _tfidf_vector(a, stats)
    vb = _tfidf_vector(b, stats)
    dot = sum(va[t] * vb.get(t, 0.0) for t in va)
    na = math.sqrt(sum(x * x for x in va.values()))
    nb = math.sqrt(sum(x * x for x in vb.values()))
    return min(1.0, max(0.0, 1.0 - dot / (na * nb)))


def _tfidf_vector(ids: list, stats: DocStats) -> dict:
    counts: dict[int, int] = {}
    for t in ids:
        counts[t] = counts.get(t, 0) + 1
    return {t: c * stats.weight(t) for t, c in counts.items()}


def proxy_semantic_distance(model: TinyLM, ids_a, ids_b) -> float:
    """Proxy for semantic distance: cosine distance between mean-pooled frozen
    token embeddings of the two sequences. A stand-in, not a trained encoder."""
    va = embed(model, list(ids_a)).mean(dim=0)
    vb = embed(model, list(ids_b)).mean(dim=0)
    return float(1.0 - F.cosine_similarity(va, vb, dim=0))


# ---------------------------------------------------------------------------
# pairwise embedding-distance report


SAME_TEXT = "same_text"
SAME_CONTEXT = "same_context"
DIFFERENT_CONTEXT = "different_context"

GROUPS = (SAME_TEXT, SAME_CONTEXT, DIFFERENT_CONTEXT)


@dataclass(frozen=True)
class PairRecord:
    a: str  # "text_id/seed" labels
    b: str
    group: str
    embedding_distance: float
    tfidf_distance: float
    proxy_semantic_distance: float


@dataclass(frozen=True)
class DistanceReport:
    vector: str  # which proto vector distances were computed over
    pairs: tuple
    group_stats: dict

    def group_sizes(self) -> dict:
        sizes = {g: 0 for g in GROUPS}
        for p in self.pairs:
            sizes[p.group] += 1
        return sizes


def classify_pair(sa: ProtoSolution, sb: ProtoSolution) -> str:
    if sa.text_id == sb.text_id:
        return SAME_TEXT
    if sa.context_id is not None and sa.context_id == sb.context_id:
        return SAME_CONTEXT
    return DIFFERENT_CONTEXT


def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> float:
    return float(1.0 - F.cosine_similarity(u, v, dim=0))


def embedding_distance_report(
    model: TinyLM,
    solutions,
    texts_by_id: dict,
    vector: str = "lead",
) -> DistanceReport:
    """Grouped pairwise cosine distances between solution vectors, joined with
    the text-level TF-IDF and proxy semantic distances of the underlying texts.

    `vector` picks which proto vector the distance is computed over — "lead"
    (default; the non-shared one under a shared-fill scheme), "fill", or
    "concat".
    """
    sols = list(solutions)
    if len(sols) < 2:
        raise InputError("need at least two solutions")
    if vector not in ("lead", "fill", "concat"):
        raise InputError(f"unknown vector selector {vector!r}")

    def vec(s: ProtoSolution) -> torch.Tensor:
        if vector == "lead":
            return s.lead
        if vector == "fill":
            return s.fill
        return torch.cat([s.lead, s.fill])

    stats = DocStats.from_documents([texts_by_id[s.text_id].ids for s in sols])
    pairs = []
    for i in range(len(sols)):
        for j in range(i + 1, len(sols)):
            sa, sb = sols[i], sols[j]
            ta, tb = texts_by_id[sa.text_id], texts_by_id[sb.text_id]
            pairs.append(
                PairRecord(
                    a=f"{sa.text_id}/s{sa.seed}",
                    b=f"{sb.text_id}/s{sb.seed}",
                    group=classify_pair(sa, sb),
                    embedding_distance=cosine_distance(vec(sa), vec(sb)),
                    tfidf_distance=tfidf_distance(ta.ids, tb.ids, stats),
                    proxy_semantic_distance=proxy_semantic_distance(model, ta.ids, tb.ids),
                )
            )
    group_stats = {}
    for g in GROUPS:
        vals = sorted(p.embedding_distance for p in pairs if p.group == g)
        if vals:
            group_stats[g] = {
                "count": len(vals),
                "mean": sum(vals) / len(vals),
                "p25": _percentile(vals, 0.25),
                "p50": _percentile(vals, 0.50),
                "p75": _percentile(vals, 0.75),
            }
    return DistanceReport(vector=vector, pairs=tuple(pairs), group_stats=group_stats)


def _percentile(sorted_vals: list, q: float) -> float:
    if len(sorted_vals) == 1:
        return sorted_vals[0]
    pos = q * (len(sorted_vals) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(sorted_vals) - 1)
    frac = pos - lo
    return sorted_vals[lo] * (1 - frac) + sorted_vals[hi] * frac
