"""Synthetic two-view instance generator with exact ground truth.

Worlds are flat street-scale arenas: objects sit on a 100 m x 100 m ground
plane with heights in [0, 3] m, and two cameras (height 1.5 m, yaw-only by
default) observe them through a horizontal field-of-view / max-range
frustum. Object features combine a view-independent identity latent with a
weighted encoding of the object's camera-frame location — mimicking how
appearance features drift with viewpoint, and what makes relative pose
recoverable from features at all — plus i.i.d. Gaussian noise per view.
Distractor objects copy (or blend toward) another object's identity latent,
producing look-alike objects in different places.

Everything is deterministic per seed. Ground-truth correspondences come
from world-object identity; the ground-truth relative pose maps teammate
camera coordinates into ego camera coordinates, and `kabsch_pose` recovers
it exactly from matched positions, closing the loop between generator and
labels.
"""

import gzip
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import quat
from .errors import DataError, DegenerateInputError, ParameterError
from .pose import RelativePose
from .scene import ObjectNode, SceneGraph, build_graph, canonical_order, graph_from_json, graph_to_json

DATASET_FORMAT_VERSION = 1


@dataclass
class GeneratorConfig:
    object_count: int = 12          # target objects per view
    view_extent: float = 60.0      # frustum max range, meters
    covisible_fraction: float = 0.5
    feature_noise: float = 0.1     # sigma of per-view feature noise
    distractor_rate: float = 0.2
    distractor_similarity: float = 1.0
    disjoint: bool = False
    identical_poses: bool = False
    feature_dim: int = 32
    view_feature_dims: int = 4     # trailing dims encoding camera-frame location
    view_feature_weight: float = 0.5
    fov_deg: float = 120.0
    arena: float = 100.0
    height_range: tuple = (0.0, 3.0)
    camera_height: float = 1.5
    pitch_roll_jitter: float = 0.0  # radians; 0 keeps cameras yaw-only

    def validate(self):
        if self.object_count < 0 or self.feature_noise < 0:
            raise ParameterError("object_count and feature_noise must be >= 0")
        if not 0.0 <= self.covisible_fraction <= 1.0:
            raise ParameterError("covisible_fraction must be in [0, 1]")
        if self.disjoint and self.covisible_fraction >= 1.0:
            raise ParameterError(
                "disjoint instances cannot demand full covisibility")
        if self.view_feature_weight > 0 and self.feature_dim <= self.view_feature_dims:
            raise ParameterError(
                f"feature_dim {self.feature_dim} too small for "
                f"{self.view_feature_dims} view dims")
        if not 0.0 <= self.distractor_similarity <= 1.0:
            raise ParameterError("distractor_similarity must be in [0, 1]")


@dataclass
class CameraPose:
    position: np.ndarray    # (3,), world frame
    orientation: np.ndarray  # (4,), unit quaternion, world from camera

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        R = quat.to_matrix(self.orientation)
        return (np.atleast_2d(points) - self.position) @ R


@dataclass
class InstancePair:
    ego: SceneGraph
    mate: SceneGraph
    y_star: np.ndarray       # (n, m) binary ground-truth correspondences
    pose: RelativePose       # teammate camera in ego camera frame
    overlap: bool

    def to_json(self) -> dict:
        return {
            "v": DATASET_FORMAT_VERSION,
            "ego": graph_to_json(self.ego),
            "mate": graph_to_json(self.mate),
            "y_pairs": [[int(i), int(j)] for i, j in zip(*np.nonzero(self.y_star))],
            "pose": {"p": [float(v) for v in self.pose.position],
                     "q": [float(v) for v in self.pose.orientation]},
            "overlap": bool(self.overlap),
        }

    @staticmethod
    def from_json(obj: dict) -> "InstancePair":
        try:
            ego = graph_from_json(obj["ego"])
            mate = graph_from_json(obj["mate"])
            y = np.zeros((ego.n, mate.n), dtype=np.int8)
            for i, j in obj["y_pairs"]:
                y[int(i), int(j)] = 1
            pose = RelativePose(np.asarray(obj["pose"]["p"], dtype=np.float64),
                                np.asarray(obj["pose"]["q"], dtype=np.float64))
            return InstancePair(ego=ego, mate=mate, y_star=y, pose=pose,
                                overlap=bool(obj["overlap"]))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise DataError(f"malformed instance record: {exc}") from exc


def _in_frustum(p_cam: np.ndarray, fov_deg: float, max_range: float) -> bool:
    x, _, z = p_cam
    if not 0.5 < z < max_range:
        return False
    return abs(np.arctan2(x, z)) <= np.deg2rad(fov_deg) / 2.0


def _sample_camera(rng, cfg: GeneratorConfig, focus: np.ndarray) -> CameraPose:
    half = cfg.arena / 2.0
    ang = rng.uniform(0.0, 2.0 * np.pi)
    dist = rng.uniform(0.25 * cfg.view_extent, 0.6 * cfg.view_extent)
    pos = np.array([focus[0] + dist * np.sin(ang), cfg.camera_height,
                    focus[1] + dist * np.cos(ang)])
    pos[0] = np.clip(pos[0], -half, half)
    pos[2] = np.clip(pos[2], -half, half)
    # camera +z looks at the focus point, plus heading jitter
    look = np.array([focus[0] - pos[0], focus[1] - pos[2]])
    yaw = np.arctan2(look[0], look[1]) + rng.uniform(-0.3, 0.3)
    pitch = rng.uniform(-1.0, 1.0) * cfg.pitch_roll_jitter
    roll = rng.uniform(-1.0, 1.0) * cfg.pitch_roll_jitter
    return CameraPose(position=pos,
                      orientation=quat.from_yaw_pitch_roll(yaw, pitch, roll))


def _sample_world_point(rng, cfg: GeneratorConfig) -> np.ndarray:
    half = cfg.arena / 2.0
    return np.array([rng.uniform(-half, half),
                     rng.uniform(*cfg.height_range),
                     rng.uniform(-half, half)])


def _place_objects(rng, cfg, cam_a, cam_b, n_co, n_a, n_b, tries=4000):
    """World points split into covisible / ego-only / mate-only sets, or None."""
    def visible(p, cam):
        return _in_frustum(cam.world_to_camera(p)[0], cfg.fov_deg, cfg.view_extent)
    co, only_a, only_b = [], [], []
    budget = tries
    while len(co) < n_co and budget:
        budget -= 1
        p = _sample_world_point(rng, cfg)
        if visible(p, cam_a) and visible(p, cam_b):
            co.append(p)
    while len(only_a) < n_a and budget:
        budget -= 1
        p = _sample_world_point(rng, cfg)
        if visible(p, cam_a) and not visible(p, cam_b):
            only_a.append(p)
    while len(only_b) < n_b and budget:
        budget -= 1
        p = _sample_world_point(rng, cfg)
        if visible(p, cam_b) and not visible(p, cam_a):
            only_b.append(p)
    if len(co) < n_co or len(only_a) < n_a or len(only_b) < n_b:
        return None
    return co, only_a, only_b


def _identity_latents(rng, cfg: GeneratorConfig, count: int) -> np.ndarray:
    id_dims = (cfg.feature_dim - cfg.view_feature_dims
               if cfg.view_feature_weight > 0 else cfg.feature_dim)
    lat = rng.standard_normal((count, id_dims))
    lat /= np.maximum(np.linalg.norm(lat, axis=1, keepdims=True), 1e-12)
    # distractors blend toward (or copy, at similarity 1) another latent
    for i in range(count):
        if count > 1 and rng.random() < cfg.distractor_rate:
            src = int(rng.integers(count - 1))
            if src >= i:
                src += 1
            s = cfg.distractor_similarity
            v = s * lat[src] + (1.0 - s) * lat[i]
            n = np.linalg.norm(v)
            if n > 1e-12:
                lat[i] = v / n
    return lat


def _view_feature(latent: np.ndarray, p_cam: np.ndarray, cfg: GeneratorConfig,
                  rng) -> np.ndarray:
    parts = [latent]
    if cfg.view_feature_weight > 0:
        scale = cfg.view_extent
        loc = np.array([p_cam[0], p_cam[1], p_cam[2],
                        np.linalg.norm(p_cam)]) / scale
        parts.append(cfg.view_feature_weight * loc[:cfg.view_feature_dims])
    feat = np.concatenate(parts)
    if cfg.feature_noise > 0:
        feat = feat + rng.normal(0.0, cfg.feature_noise, size=feat.shape)
    return feat


def relative_pose(cam_ego: CameraPose, cam_mate: CameraPose) -> RelativePose:
    """Teammate camera pose expressed in the ego camera frame."""
    r_ego = quat.to_matrix(cam_ego.orientation)
    p = r_ego.T @ (cam_mate.position - cam_ego.position)
    q = quat.multiply(quat.conjugate(cam_ego.orientation), cam_mate.orientation)
    return RelativePose(p, quat.canonicalize(quat.normalize(q)))


def generate_pair(seed, config: GeneratorConfig | None = None) -> InstancePair:
    """One deterministic two-view instance with exact labels."""
    cfg = config or GeneratorConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_total = cfg.object_count
    n_co = 0 if cfg.disjoint else int(round(cfg.covisible_fraction * n_total))
    n_excl = n_total - n_co

    for _ in range(64):
        focus = rng.uniform(-cfg.arena / 4.0, cfg.arena / 4.0, size=2)
        cam_a = _sample_camera(rng, cfg, focus)
        cam_b = (CameraPose(cam_a.position.copy(), cam_a.orientation.copy())
                 if cfg.identical_poses else _sample_camera(rng, cfg, focus))
        placed = _place_objects(rng, cfg, cam_a, cam_b, n_co, n_excl, n_excl)
        if placed is not None:
            break
    else:
        raise ParameterError(
            "could not satisfy the covisibility layout; config too restrictive")
    co, only_a, only_b = placed

    world_pts = np.array(co + only_a + only_b).reshape(-1, 3)
    n_world = len(world_pts)
    latents = _identity_latents(rng, cfg, n_world)
    idx_co = list(range(n_co))
    idx_a = idx_co + list(range(n_co, n_co + len(only_a)))
    idx_b = idx_co + list(range(n_co + len(only_a), n_world))

    def view_nodes(cam, world_idx):
        nodes = []
        for local, wi in enumerate(world_idx):
            p_cam = cam.world_to_camera(world_pts[wi])[0]
            feat = _view_feature(latents[wi], p_cam, cfg, rng)
            nodes.append(ObjectNode(id=local, position=p_cam, feature=feat))
        return nodes

    nodes_a = view_nodes(cam_a, idx_a)
    nodes_b = view_nodes(cam_b, idx_b)
    perm_a = canonical_order(nodes_a)
    perm_b = canonical_order(nodes_b)
    ego = build_graph(nodes_a)
    mate = build_graph(nodes_b)
    world_of_a = [idx_a[p] for p in perm_a]
    world_of_b = [idx_b[p] for p in perm_b]
    y = np.zeros((ego.n, mate.n), dtype=np.int8)
    pos_b = {w: j for j, w in enumerate(world_of_b)}
    for i, w in enumerate(world_of_a):
        j = pos_b.get(w)
        if j is not None:
            y[i, j] = 1
    return InstancePair(ego=ego, mate=mate, y_star=y,
                        pose=relative_pose(cam_a, cam_b),
                        overlap=bool(y.sum() >= 1))


def kabsch_pose(ego_points, mate_points) -> RelativePose:
    """Least-squares rigid transform taking matched teammate-frame points
    onto ego-frame points (rotation + translation, proper rotation enforced).

    Needs at least 3 non-collinear correspondences.
    """
    x = np.asarray(mate_points, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(ego_points, dtype=np.float64).reshape(-1, 3)
    if x.shape != y.shape:
        raise DegenerateInputError(
            f"point sets must match: {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise DegenerateInputError(f"need >= 3 matched points, got {len(x)}")
    cx = x.mean(axis=0)
    cy = y.mean(axis=0)
    xc = x - cx
    yc = y - cy
    sing = np.linalg.svd(xc, compute_uv=False)
    if sing[1] <= 1e-9 * max(sing[0], 1.0):
        raise DegenerateInputError("matched points are (near-)collinear")
    h = xc.T @ yc
    u, _, vt = np.linalg.svd(h)
    det = np.linalg.det(vt.T @ u.T)
    r = vt.T @ np.diag([1.0, 1.0, np.sign(det)]) @ u.T
    t = cy - r @ cx
    return RelativePose(t, quat.canonicalize(quat.from_matrix(r)))


def make_dataset(seed, size: int, mix: float,
                 config: GeneratorConfig | None = None) -> list:
    """Deterministic dataset with an exact share of non-overlapping pairs.

    ``mix`` is the fraction of disjoint instances; counts are exact
    (round(size * mix)) and positions of disjoint instances are shuffled by
    the seed. Instance i always uses the sub-seed (seed, i).
    """
    if size < 1:
        raise ParameterError(f"dataset size must be >= 1, got {size}")
    if not 0.0 <= mix <= 1.0:
        raise ParameterError(f"mix must be in [0, 1], got {mix}")
    cfg = config or GeneratorConfig()
    n_disjoint = int(round(size * mix))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    disjoint_at = set(rng.permutation(size)[:n_disjoint].tolist())
    out = []
    for i in range(size):
        cfg_i = replace(cfg, disjoint=i in disjoint_at)
        out.append(generate_pair([seed, i], cfg_i))
    return out


def save_dataset(path, instances) -> None:
    """One JSON instance per line; '.gz' suffix switches on gzip."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), separators=(",", ":")) + "\n")


def load_dataset(path) -> list:
    opener = gzip.open if str(path).endswith(".gz") else open
    out = []
    try:
        with opener(path, "rt", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{line_no}: invalid JSON: {exc}")
                out.append(InstancePair.from_json(obj))
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return out
