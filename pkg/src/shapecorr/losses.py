"""Training and refinement losses.

All losses return autodiff Tensors; pass plain arrays for purely numeric
evaluation and read ``.data``. Nearest neighbors for the Chamfer terms are
found outside the tape; only the selected squared distances are recorded,
which gives the exact gradient since the argmin is locally constant almost
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, as_tensor, constant_matmul
from .geometry import Mesh, NearestNeighborIndex, PointCloud


class LossError(Exception):
    pass


class CardinalityMismatch(LossError):
    pass


class DegenerateEdge(LossError):
    pass


class NonManifoldEdge(LossError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Regularization strengths for the unsupervised loss (default 5e-3)."""

    lambda_lap: float = 5e-3
    lambda_edges: float = 5e-3

    def __post_init__(self):
        if self.lambda_lap < 0 or self.lambda_edges < 0:
            raise LossError("loss weights must be non-negative")


def _points_of(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _tensor_of(x) -> Tensor:
    if isinstance(x, PointCloud):
        return Tensor(x.points)
    return as_tensor(x)


def supervised_loss(predicted, target) -> Tensor:
    """Sum of squared distances between paired points (point j <-> point j)."""
    pred = _tensor_of(predicted)
    tgt = _tensor_of(target)
    if pred.shape != tgt.shape:
        raise CardinalityMismatch(f"{pred.shape} vs {tgt.shape}")
    return (pred - tgt).square().sum()


def chamfer(a, b, mode: str = "symmetric") -> Tensor:
    """Chamfer distance with squared point-to-nearest-point distances.

    ``a_to_b`` sums over points of a, ``b_to_a`` over points of b,
    ``symmetric`` adds both. Gradient flows through the selected pairs of
    whichever arguments are differentiable tensors.
    """
    if mode not in ("symmetric", "a_to_b", "b_to_a"):
        raise LossError(f"unknown chamfer mode {mode!r}")
    ta, tb = _tensor_of(a), _tensor_of(b)
    terms = []
    if mode in ("symmetric", "a_to_b"):
        idx, _ = NearestNeighborIndex(tb.data).query_many(ta.data)
        terms.append((ta - tb.take_rows(idx)).square().sum())
    if mode in ("symmetric", "b_to_a"):
        idx, _ = NearestNeighborIndex(ta.data).query_many(tb.data)
        terms.append((ta.take_rows(idx) - tb).square().sum())
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def edge_loss(template: Mesh, deformed_vertices) -> Tensor:
    """Mean absolute deviation from 1 of deformed/template edge-length ratios."""
    deformed = _tensor_of(deformed_vertices)
    if deformed.shape[0] != len(template.vertices):
        raise CardinalityMismatch(
            f"{deformed.shape[0]} deformed vertices for {len(template.vertices)} template vertices"
        )
    edges = template.edges
    rest = np.linalg.norm(template.vertices[edges[:, 0]] - template.vertices[edges[:, 1]], axis=1)
    if (rest < 1e-12).any():
        raise DegenerateEdge("template has a zero-length edge")
    diff = deformed.take_rows(edges[:, 0]) - deformed.take_rows(edges[:, 1])
    lengths = diff.square().sum(axis=1).sqrt()
    ratios = lengths * (1.0 / rest)
    return (ratios - 1.0).abs().mean()


@dataclass(frozen=True)
class LaplacianOperator:
    """Sparse discrete Laplacian over the template graph."""

    matrix: sp.csr_matrix
    variant: str
    cell_areas: np.ndarray | None = None  # barycentric, cotangent variant only

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def _edge_face_incidence(mesh: Mesh) -> dict[tuple[int, int], list[int]]:
    inc: dict[tuple[int, int], list[int]] = {}
    for fi, (i, j, k) in enumerate(mesh.faces):
        for a, b in ((i, j), (j, k), (k, i)):
            key = (min(a, b), max(a, b))
            inc.setdefault(key, []).append(fi)
    return inc


def build_laplacian(mesh: Mesh, variant: str = "uniform") -> LaplacianOperator:
    """Uniform (degree/adjacency) or cotangent-weighted Laplacian.

    Cotangent weights are 0.5*(cot a + cot b) over the two angles opposite
    each edge, clamped at zero, and rows are normalized by the barycentric
    cell area (one third of the incident face areas).
    """
    n = len(mesh.vertices)
    inc = _edge_face_incidence(mesh)
    for edge, faces in inc.items():
        if len(faces) > 2:
            raise NonManifoldEdge(f"edge {edge} has {len(faces)} incident faces")

    if variant == "uniform":
        e = mesh.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        deg = np.asarray(adj.sum(axis=1)).ravel()
        lap = sp.diags(deg) - adj
        return LaplacianOperator(lap.tocsr(), "uniform")

    if variant != "cotangent":
        raise LossError(f"unknown laplacian variant {variant!r}")

    verts, faces = mesh.vertices, mesh.faces
    weights: dict[tuple[int, int], float] = {}
    for i, j, k in faces:
        for (a, b), opp in (((j, k), i), ((k, i), j), ((i, j), k)):
            u = verts[a] - verts[opp]
            v = verts[b] - verts[opp]
            cross = np.linalg.norm(np.cross(u, v))
            cot = float(np.dot(u, v) / cross) if cross > 1e-300 else 0.0
            key = (min(a, b), max(a, b))
            weights[key] = weights.get(key, 0.0) + 0.5 * cot
    areas = mesh.face_areas()
    cell = np.zeros(n)
    for fi, f in enumerate(faces):
        cell[f] += areas[fi] / 3.0

    edges = np.array(sorted(weights))
    w = np.maximum([weights[tuple(e)] for e in edges], 0.0)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))
    wsum = np.asarray(adj.sum(axis=1)).ravel()
    lap = sp.diags(1.0 / cell) @ (sp.diags(wsum) - adj)
    return LaplacianOperator(lap.tocsr(), "cotangent", cell)


def laplacian_loss(op: LaplacianOperator, template_vertices, deformed_vertices) -> Tensor:
    """Mean squared deviation of Laplacian coordinates from the template's."""
    deformed = _tensor_of(deformed_vertices)
    tpl = _points_of(template_vertices)
    if deformed.shape[0] != op.size or tpl.shape[0] != op.size:
        raise CardinalityMismatch(
            f"operator is {op.size}x{op.size}, got {tpl.shape[0]} template "
            f"and {deformed.shape[0]} deformed vertices"
        )
    target_coords = op.matrix @ tpl
    diff = constant_matmul(op.matrix, deformed) - target_coords
    return diff.square().sum() * (1.0 / op.size)


def unsupervised_loss(
    template: Mesh,
    deformed_vertices,
    target,
    weights: LossWeights,
    laplacian: LaplacianOperator,
) -> Tensor:
    """Chamfer reconstruction plus Laplacian and edge-ratio regularization."""
    deformed = _tensor_of(deformed_vertices)
    loss = chamfer(deformed, target, "symmetric")
    if weights.lambda_lap > 0:
        loss = loss + weights.lambda_lap * laplacian_loss(laplacian, template.vertices, deformed)
    if weights.lambda_edges > 0:
        loss = loss + weights.lambda_edges * edge_loss(template, deformed)
    return loss
