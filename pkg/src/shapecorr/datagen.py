"""Procedural articulated shapes with ground-truth correspondences.

Templates are built as unions of capsules, meshed with marching cubes and
rigged with a small skeleton plus distance-falloff skinning weights. Posing
a template keeps the vertex order, so vertex i of every generated shape
corresponds to vertex i of the template by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from skimage.measure import marching_cubes

from .geometry import IoError, Mesh, save_mesh

_TEMPLATE_HALF_EXTENT = 0.62  # leaves headroom for the 1.2x pose scale
_MAX_WEIGHTS = 4


@dataclass(frozen=True)
class Joint:
    parent: int  # -1 for the root
    rest: np.ndarray
    # segment the joint drags along; also the capsule used for meshing
    seg_a: np.ndarray
    seg_b: np.ndarray
    radius: float


@dataclass(frozen=True)
class ArticulatedTemplate:
    kind: str
    mesh: Mesh
    joints: list[Joint]
    skin_weights: np.ndarray  # (V, J), convex rows, <= 4 nonzeros
    bend_joints: tuple[int, ...]  # widened range in hard-pose sampling

    @property
    def n_joints(self) -> int:
        return len(self.joints)


@dataclass(frozen=True)
class PoseSample:
    rotations: np.ndarray  # (J, 3) axis-angle, radians
    scale: float
    seed: int

    def __post_init__(self):
        if not (0.5 <= self.scale <= 1.5):
            raise ValueError(f"scale {self.scale} outside sane range")


@dataclass(frozen=True)
class PoseBounds:
    max_angle: float = 0.6
    root_max_angle: float = 0.15
    scale_min: float = 0.8
    scale_max: float = 1.2
    hard_fraction: float = 0.15
    hard_angle: float = 1.1


def _seg_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def _skeleton(kind: str) -> list[Joint]:
    def j(parent, rest, a, b, r):
        return Joint(parent, np.array(rest, float), np.array(a, float), np.array(b, float), r)

    if kind == "biped":
        # feet and face point toward +z so no yaw looks like another
        # (a front-back-symmetric body makes orientation search ambiguous)
        return [
            j(-1, (0, 0, 0), (0, -0.12, 0), (0, 0.30, 0), 0.17),        # 0 torso/root
            j(0, (0, 0.30, 0), (0, 0.36, 0), (0, 0.56, 0.10), 0.13),    # 1 neck+head
            j(0, (-0.13, -0.08, 0), (-0.13, -0.08, 0), (-0.15, -0.42, 0), 0.085),  # 2 l upper leg
            j(2, (-0.15, -0.42, 0), (-0.15, -0.42, 0), (-0.16, -0.72, 0.16), 0.075),  # 3 l lower leg+foot
            j(0, (0.13, -0.08, 0), (0.13, -0.08, 0), (0.15, -0.42, 0), 0.085),   # 4 r upper leg
            j(4, (0.15, -0.42, 0), (0.15, -0.42, 0), (0.16, -0.72, 0.16), 0.075),  # 5 r lower leg+foot
            j(0, (-0.17, 0.26, 0), (-0.17, 0.26, 0), (-0.40, 0.10, 0), 0.075),  # 6 l upper arm
            j(6, (-0.40, 0.10, 0), (-0.40, 0.10, 0), (-0.56, -0.10, 0), 0.065),  # 7 l forearm
            j(0, (0.17, 0.26, 0), (0.17, 0.26, 0), (0.40, 0.10, 0), 0.075),   # 8 r upper arm
            j(8, (0.40, 0.10, 0), (0.40, 0.10, 0), (0.56, -0.10, 0), 0.065),   # 9 r forearm
        ]
    if kind == "quadruped":
        legs = []
        for li, (x, z) in enumerate([(-0.30, -0.12), (-0.30, 0.12), (0.30, -0.12), (0.30, 0.12)]):
            upper = j(0, (x, -0.05, z), (x, -0.05, z), (x, -0.30, z), 0.08)
            lower = j(2 + 2 * li, (x, -0.30, z), (x, -0.30, z), (x + 0.02, -0.52, z), 0.07)
            legs += [upper, lower]
        return [
            j(-1, (0, 0, 0), (-0.38, 0, 0), (0.38, 0, 0), 0.16),        # 0 torso
            j(0, (0.38, 0.04, 0), (0.38, 0.04, 0), (0.58, 0.22, 0), 0.10),  # 1 neck/head
        ] + legs
    if kind == "tube":
        joints = [j(-1, (0, -0.5, 0), (0, -0.5, 0), (0, -0.3, 0), 0.14)]
        y = -0.3
        for k in range(5):
            joints.append(j(k, (0, y, 0), (0, y, 0), (0, y + 0.2, 0), 0.13 - 0.012 * k))
            y += 0.2
        return joints
    raise ValueError(f"unknown template kind {kind!r}")


_BEND_JOINTS = {
    "biped": (0, 2, 3, 4, 5),
    "quadruped": (0, 1),
    "tube": (1, 2, 3, 4, 5),
}


def _mesh_capsules(joints: list[Joint], grid: int) -> Mesh:
    lo, hi = -0.95, 0.95
    axis = np.linspace(lo, hi, grid)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)
    sdf = np.full(gx.shape, np.inf)
    for jt in joints:
        sdf = np.minimum(sdf, _seg_distance(pts, jt.seg_a, jt.seg_b) - jt.radius)
    spacing = (axis[1] - axis[0],) * 3
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, spacing=spacing, allow_degenerate=False)
    verts = verts + lo
    return Mesh(verts, faces.astype(np.int64))


def _center_and_fit(vertices: np.ndarray) -> np.ndarray:
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    centered = vertices - 0.5 * (lo + hi)
    half = np.abs(centered).max()
    return centered * (_TEMPLATE_HALF_EXTENT / half)


def _skin_weights(vertices: np.ndarray, joints: list[Joint], max_nonzero: int) -> np.ndarray:
    sigma = 0.07
    raw = np.stack(
        [np.exp(-((_seg_distance(vertices, jt.seg_a, jt.seg_b) / sigma) ** 2)) for jt in joints],
        axis=1,
    )
    raw += 1e-12  # keep rows normalizable far from every bone
    keep = np.argsort(-raw, axis=1)[:, :max_nonzero]
    mask = np.zeros_like(raw)
    np.put_along_axis(mask, keep, 1.0, axis=1)
    raw *= mask
    return raw / raw.sum(axis=1, keepdims=True)


def make_template(kind: str, resolution: int = 0) -> ArticulatedTemplate:
    """Closed capsule-body template with skeleton and skinning weights.

    ``resolution`` in [0, 4] controls the marching-cubes grid density.
    Deterministic per (kind, resolution).
    """
    if not 0 <= resolution <= 4:
        raise ValueError("resolution must be in [0, 4]")
    joints = _skeleton(kind)
    grid = 26 + 10 * resolution
    rough = _mesh_capsules(joints, grid)

    # rescale mesh and skeleton together so posed scale stays inside (-1,1)
    lo, hi = rough.vertices.min(axis=0), rough.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    factor = _TEMPLATE_HALF_EXTENT / np.abs(rough.vertices - center).max()

    def remap(p):
        return (p - center) * factor

    joints = [
        Joint(jt.parent, remap(jt.rest), remap(jt.seg_a), remap(jt.seg_b), jt.radius * factor)
        for jt in joints
    ]
    mesh = Mesh(remap(rough.vertices), rough.faces)
    max_nonzero = 2 if kind == "tube" else _MAX_WEIGHTS
    weights = _skin_weights(mesh.vertices, joints, max_nonzero)
    return ArticulatedTemplate(kind, mesh, joints, weights, _BEND_JOINTS[kind])


def _axis_angle_matrix(v: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    axis = v / angle
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _joint_transforms(template: ArticulatedTemplate, pose: PoseSample) -> list[tuple[np.ndarray, np.ndarray]]:
    """World (R, t) per joint: rotate about the joint rest position, composed
    down the tree."""
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for ji, jt in enumerate(template.joints):
        r_local = _axis_angle_matrix(pose.rotations[ji])
        t_local = jt.rest - r_local @ jt.rest
        if jt.parent < 0:
            out.append((r_local, t_local))
        else:
            rp, tp = out[jt.parent]
            out.append((rp @ r_local, rp @ t_local + tp))
    return out


def pose_shape(template: ArticulatedTemplate, pose: PoseSample) -> Mesh:
    """Linear blend skinning; output vertex i corresponds to template vertex i."""
    if pose.rotations.shape != (template.n_joints, 3):
        raise ValueError(
            f"pose has {pose.rotations.shape[0]} joints, template has {template.n_joints}"
        )
    transforms = _joint_transforms(template, pose)
    verts = template.mesh.vertices
    blended = np.zeros_like(verts)
    for ji, (r, t) in enumerate(transforms):
        w = template.skin_weights[:, ji]
        nz = w > 0
        if nz.any():
            blended[nz] += w[nz, None] * (verts[nz] @ r.T + t)
    return Mesh(blended * pose.scale, template.mesh.faces)


def sample_pose(template: ArticulatedTemplate, seed: int, bounds: PoseBounds = PoseBounds()) -> PoseSample:
    rng = np.random.default_rng(seed)
    hard = rng.random() < bounds.hard_fraction
    rotations = np.zeros((template.n_joints, 3))
    for ji, jt in enumerate(template.joints):
        if jt.parent < 0:
            limit = bounds.root_max_angle
        elif hard and ji in template.bend_joints:
            limit = bounds.hard_angle
        else:
            limit = bounds.max_angle
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rotations[ji] = axis * rng.uniform(-limit, limit)
    scale = rng.uniform(bounds.scale_min, bounds.scale_max)
    return PoseSample(rotations, scale, seed)


@dataclass
class DatasetManifest:
    template_path: str
    shapes: list[dict] = field(default_factory=list)
    correspondence: str = "by-vertex-index"


def generate_dataset(
    template: ArticulatedTemplate,
    n: int,
    seed: int,
    out_dir,
    bounds: PoseBounds = PoseBounds(),
) -> str:
    """Write n posed PLY meshes plus a JSON manifest; returns the manifest path."""
    if n < 1:
        raise ValueError("n must be >= 1")
    try:
        os.makedirs(out_dir, exist_ok=True)
        template_path = os.path.join(out_dir, "template.ply")
        save_mesh(template.mesh, template_path)
        entries = []
        child_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
        for i, shape_seed in enumerate(child_seeds):
            pose = sample_pose(template, shape_seed, bounds)
            mesh = pose_shape(template, pose)
            path = os.path.join(out_dir, f"shape_{i:05d}.ply")
            save_mesh(mesh, path)
            entries.append(
                {
                    "path": os.path.basename(path),
                    "seed": shape_seed,
                    "pose": pose.rotations.ravel().tolist(),
                    "scale": pose.scale,
                }
            )
        manifest = {
            "template": os.path.basename(template_path),
            "kind": template.kind,
            "seed": seed,
            "shapes": entries,
            "correspondence": "by-vertex-index",
        }
        manifest_path = os.path.join(out_dir, "manifest.json")
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return manifest_path


def load_manifest(manifest_path) -> tuple[Mesh, list[Mesh], dict]:
    """Load the template mesh and every shape listed in a manifest."""
    from .geometry import load_mesh

    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    template = load_mesh(os.path.join(base, manifest["template"]))
    shapes = [load_mesh(os.path.join(base, entry["path"])) for entry in manifest["shapes"]]
    return template, shapes, manifest
