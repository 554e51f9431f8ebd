"""Test-time pipeline: rotation search, latent refinement, correspondences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .geometry import Mesh, NearestNeighborIndex, PointCloud, rotate_y_points, sample_surface
from .losses import chamfer
from .network import LATENT_DIM, NetworkParams, ParamTensors, decode, decode_t, encode
from .training import AdamState, adam_step


class InferenceError(Exception):
    pass


class MissingGroundTruth(InferenceError):
    pass


@dataclass(frozen=True)
class RefinementConfig:
    iterations: int = 3000
    lr: float = 5e-4
    chamfer_mode: str = "symmetric"
    # descend on a fixed random subset of the template points (0: use all);
    # a small subset makes each iteration much cheaper without changing the
    # character of the objective
    template_sample_count: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.lr <= 0:
            raise InferenceError("iterations must be >= 0 and lr > 0")
        if self.template_sample_count < 0:
            raise InferenceError("template_sample_count must be >= 0")
        if self.chamfer_mode not in ("symmetric", "a_to_b", "b_to_a"):
            raise InferenceError(f"unknown chamfer mode {self.chamfer_mode!r}")


@dataclass
class CorrespondencePair:
    reference: np.ndarray
    target: np.ndarray
    template_point: np.ndarray
    reference_index: int
    target_index: int


@dataclass
class CorrespondenceSet:
    pairs: list[CorrespondencePair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("ref_x,ref_y,ref_z,tgt_x,tgt_y,tgt_z,tpl_x,tpl_y,tpl_z\n")
            for p in self.pairs:
                row = np.concatenate([p.reference, p.target, p.template_point])
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")

    @classmethod
    def read_csv(cls, path) -> "CorrespondenceSet":
        out = cls()
        with open(path) as fh:
            header = fh.readline()
            if not header.startswith("ref_x"):
                raise InferenceError(f"{path}: not a correspondence CSV")
            for i, line in enumerate(fh):
                vals = np.array([float(v) for v in line.split(",")])
                out.pairs.append(
                    CorrespondencePair(vals[0:3], vals[3:6], vals[6:9], i, -1)
                )
        return out


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def best_orientation(
    params: NetworkParams,
    template_points,
    shape,
    n_orientations: int = 50,
) -> tuple[float, np.ndarray, float]:
    """Try evenly spaced yaw angles, keep the one with lowest reconstruction
    Chamfer; ties go to the smallest angle index. The returned latent code
    belongs to the winning rotation of the shape."""
    if n_orientations < 1:
        raise InferenceError("n_orientations must be >= 1")
    tpl = _points(template_points)
    pts = _points(shape)
    best = None
    for k in range(n_orientations):
        angle = 2.0 * np.pi * k / n_orientations
        rotated = rotate_y_points(pts, angle) if k else pts
        code = encode(params, rotated)
        recon = decode(params, tpl, code)
        cd = float(chamfer(recon, rotated, "symmetric").data)
        if best is None or cd < best[2]:
            best = (angle, code, cd)
    return best


def refine_latent(
    params: NetworkParams,
    template_points,
    shape,
    init: np.ndarray,
    config: RefinementConfig = RefinementConfig(),
) -> tuple[np.ndarray, float]:
    """Chamfer descent on the latent code with the network frozen.

    Runs Adam for the configured number of iterations and returns the
    best-loss iterate seen (the objective is highly non-convex, so the last
    iterate is not necessarily the best one).
    """
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (LATENT_DIM,) or not np.isfinite(init).all():
        raise InferenceError("init must be a finite latent code")
    tpl = _points(template_points)
    if 0 < config.template_sample_count < len(tpl):
        sub = np.random.default_rng(0).choice(
            len(tpl), config.template_sample_count, replace=False
        )
        tpl = tpl[sub]
    target = _points(shape)
    pt = ParamTensors.from_params(params, trainable=False)
    tpl_tensor = Tensor(tpl)

    code = init.copy()
    best_code = init.copy()
    best_loss = float(chamfer(decode(params, tpl, init), target, config.chamfer_mode).data)
    if config.iterations == 0:
        return best_code, best_loss

    state = AdamState.for_params([code], lr=config.lr)
    for _ in range(config.iterations):
        code_t = Tensor(code, requires_grad=True)
        recon = decode_t(pt, tpl_tensor, code_t)
        loss = chamfer(recon, target, config.chamfer_mode)
        loss.backward()
        if float(loss.data) < best_loss:
            best_loss = float(loss.data)
            best_code = code.copy()
        adam_step(state, [code], [code_t.grad])
    final = float(chamfer(decode(params, tpl, code), target, config.chamfer_mode).data)
    if final < best_loss:
        best_loss = final
        best_code = code.copy()
    return best_code, best_loss


def extract_correspondences(
    params: NetworkParams,
    template: Mesh,
    shape_r,
    code_r: np.ndarray,
    shape_t,
    code_t: np.ndarray,
    template_resolution: int | None = None,
    seed: int = 0,
) -> CorrespondenceSet:
    """Match each reference point to a target point through the template.

    Samples the template surface, deforms the samples with both codes, and
    for every reference point takes the nearest deformed-reference sample,
    then the target point nearest to that sample's deformed-target image.
    The mapping is intentionally asymmetric in (reference, target).
    """
    pts_r = _points(shape_r)
    pts_t = _points(shape_t)
    if template_resolution is None:
        template_resolution = len(template.vertices)
    if template_resolution < len(template.vertices):
        raise InferenceError("template_resolution must be >= the vertex count")
    tpl_samples = sample_surface(template, template_resolution, "uniform_area", seed).points

    deformed_r = decode(params, tpl_samples, code_r)
    deformed_t = decode(params, tpl_samples, code_t)
    sample_idx, _ = NearestNeighborIndex(deformed_r).query_many(pts_r)
    target_index = NearestNeighborIndex(pts_t)
    tgt_idx, _ = target_index.query_many(deformed_t[sample_idx])

    out = CorrespondenceSet()
    for i, (si, ti) in enumerate(zip(sample_idx, tgt_idx)):
        out.pairs.append(
            CorrespondencePair(pts_r[i], pts_t[ti], tpl_samples[si], i, int(ti))
        )
    return out


def correspondence_error(
    pred: CorrespondenceSet, ground_truth: dict[int, np.ndarray] | np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean Euclidean distance between predicted and true target points."""
    if isinstance(ground_truth, np.ndarray):
        ground_truth = {i: ground_truth[i] for i in range(len(ground_truth))}
    dists = np.empty(len(pred.pairs))
    for k, pair in enumerate(pred.pairs):
        truth = ground_truth.get(pair.reference_index)
        if truth is None:
            raise MissingGroundTruth(f"no ground truth for reference index {pair.reference_index}")
        dists[k] = np.linalg.norm(pair.target - truth)
    return float(dists.mean()), dists
