"""Synthetic road scenes and labelled proposal sets.

ID objects are car, pedestrian and cyclist shapes with known boxes; OOD
objects are walls, poles, signs, trees, bushes and blobs. Every sample is
raycast with the same simulator used for whole scans, so point density falls
off with the inverse square of range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import CLASS_NAMES, SIZE_TEMPLATES, Box3D
from .projection import ProjectionConfig
from .proposals import Proposal, ProposalConfig, make_proposal
from .sim import SENSOR_HEIGHT, Box, Cylinder, Ellipsoid, Ground, Scan, render
from .training import BoxTargets, ProposalSet, TargetArrays, encode_box_targets

OOD_KINDS = ("wall", "pole", "sign", "tree", "bush", "blob")
GROUND_Z = -SENSOR_HEIGHT


@dataclass(frozen=True)
class SynthConfig:
    n_id: int = 2000
    n_ood: int = 2000
    range_min: float = 5.0
    range_max: float = 40.0
    clearance: float = 0.2  # points this close to the ground are dropped
    min_points: int = 8
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)

    def __post_init__(self):
        if not 0 < self.range_min < self.range_max:
            raise ValueError("need 0 < range_min < range_max")


@dataclass(frozen=True, eq=False)
class SynthSample:
    proposal: Proposal
    label: int           # class index, -1 for OOD
    kind: str
    box: Box3D | None
    targets: BoxTargets | None


# --- object builders ---------------------------------------------------------
# Each returns (primitives, gt box or None) for an object standing at (x, y).

def _rotate(dx, dy, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return c * dx - s * dy, s * dx + c * dy


def build_car(rng, x, y, yaw, gz=GROUND_Z):
    L, W, H = SIZE_TEMPLATES[0] * rng.uniform([0.85, 0.9, 0.9], [1.15, 1.1, 1.1])
    z_split = H * rng.uniform(0.55, 0.65)
    body = Box(np.array([x, y, gz + 0.5 * (0.15 + z_split)]), np.array([L, W, z_split - 0.15]), yaw)
    cab_l = L * rng.uniform(0.45, 0.6)
    ox, oy = _rotate(-L * rng.uniform(0.0, 0.12), 0.0, yaw)
    cabin = Box(np.array([x + ox, y + oy, gz + 0.5 * (z_split + H)]),
                np.array([cab_l, W * 0.9, H - z_split]), yaw)
    return [body, cabin], Box3D([x, y, gz + H / 2], [L, W, H], yaw)


def build_pedestrian(rng, x, y, yaw, gz=GROUND_Z):
    H = rng.uniform(1.5, 1.9)
    a, b = rng.uniform(0.3, 0.42), rng.uniform(0.22, 0.32)
    return [Cylinder(np.array([x, y]), (a, b), gz, gz + H, yaw)], Box3D([x, y, gz + H / 2], [2 * a, 2 * b, H], yaw)


def build_cyclist(rng, x, y, yaw, gz=GROUND_Z):
    L = SIZE_TEMPLATES[2][0] * rng.uniform(0.9, 1.1)
    W = SIZE_TEMPLATES[2][1] * rng.uniform(0.9, 1.1)
    H = rng.uniform(1.6, 1.85)
    bike = Box(np.array([x, y, gz + 0.5]), np.array([L, 0.18, 1.0]), yaw)
    ox, oy = _rotate(-0.1 * L, 0.0, yaw)
    rider = Cylinder(np.array([x + ox, y + oy]), (0.25, W / 2), gz + 0.8, gz + H, yaw)
    return [bike, rider], Box3D([x, y, gz + H / 2], [L, W, H], yaw)


def build_wall(rng, x, y, yaw, gz=GROUND_Z):
    L, T, H = rng.uniform(3.0, 12.0), rng.uniform(0.15, 0.4), rng.uniform(1.0, 3.5)
    return [Box(np.array([x, y, gz + H / 2]), np.array([L, T, H]), yaw)], None


def build_pole(rng, x, y, yaw, gz=GROUND_Z):
    r, H = rng.uniform(0.05, 0.25), rng.uniform(2.5, 7.0)
    return [Cylinder(np.array([x, y]), (r, r), gz, gz + H, 0.0)], None


def build_sign(rng, x, y, yaw, gz=GROUND_Z):
    H = rng.uniform(2.0, 3.5)
    pw, ph = rng.uniform(0.5, 1.2), rng.uniform(0.4, 1.0)
    pole = Cylinder(np.array([x, y]), (0.04, 0.04), gz, gz + H, 0.0)
    ox, oy = _rotate(0.0, 0.0, yaw)
    plate = Box(np.array([x, y, gz + H + ph / 2]), np.array([0.05, pw, ph]), yaw)
    return [pole, plate], None


def build_tree(rng, x, y, yaw, gz=GROUND_Z):
    H = rng.uniform(2.0, 4.0)
    r = rng.uniform(0.1, 0.3)
    crown = rng.uniform([1.0, 1.0, 0.8], [3.0, 3.0, 2.5])
    return [Cylinder(np.array([x, y]), (r, r), gz, gz + H, 0.0),
            Ellipsoid(np.array([x, y, gz + H + crown[2] * 0.8]), crown, yaw)], None


def build_bush(rng, x, y, yaw, gz=GROUND_Z):
    radii = rng.uniform([0.6, 0.6, 0.4], [2.5, 2.5, 1.2])
    return [Ellipsoid(np.array([x, y, gz + radii[2] * rng.uniform(0.3, 0.8)]), radii, yaw)], None


def build_blob(rng, x, y, yaw, gz=GROUND_Z):
    radii = rng.uniform(0.3, 2.0, size=3)
    return [Ellipsoid(np.array([x, y, gz + radii[2] * rng.uniform(0.5, 1.2)]), radii, yaw)], None


BUILDERS = {
    "Car": build_car, "Pedestrian": build_pedestrian, "Cyclist": build_cyclist,
    "wall": build_wall, "pole": build_pole, "sign": build_sign,
    "tree": build_tree, "bush": build_bush, "blob": build_blob,
}
# Kinds whose surfaces are perturbed to imitate foliage.
_NOISY = {"tree": 0.08, "bush": 0.1}


def _bounding_radius(prims) -> float:
    return max(math.hypot(p.center[0], p.center[1]) for p in prims)


def _object_extent(prims) -> float:
    cx = np.mean([p.center[0] for p in prims])
    cy = np.mean([p.center[1] for p in prims])
    return max(math.hypot(p.center[0] - cx, p.center[1] - cy) + p.radius for p in prims)


def render_object(kind: str, rng: np.random.Generator, rng_range: float, azimuth: float,
                  cfg: SynthConfig, yaw: float | None = None):
    """Raycast one object in isolation; returns (points above clearance, gt box)."""
    yaw = rng.uniform(-math.pi, math.pi) if yaw is None else yaw
    x, y = rng_range * math.cos(azimuth), rng_range * math.sin(azimuth)
    prims, box = BUILDERS[kind](rng, x, y, yaw)
    scan = render(prims, cfg.projection, ground=None)
    pts = scan.points
    if kind in _NOISY and len(pts):
        pts = pts + rng.normal(0.0, _NOISY[kind], size=pts.shape)
        pts = pts[rng.random(len(pts)) > 0.3]
    pts = pts[pts[:, 2] > GROUND_Z + cfg.clearance]
    return pts, box


def synth_sample(kind: str, rng: np.random.Generator, cfg: SynthConfig, cluster_id: int = 0,
                 rng_range: float | None = None) -> SynthSample:
    label = CLASS_NAMES.index(kind) if kind in CLASS_NAMES else -1
    while True:
        r = rng.uniform(cfg.range_min, cfg.range_max) if rng_range is None else rng_range
        pts, box = render_object(kind, rng, r, rng.uniform(-math.pi, math.pi), cfg)
        if len(pts) >= cfg.min_points:
            break
    prop = make_proposal(pts, cluster_id, cfg.proposal, rng)
    targets = encode_box_targets(box, prop, label) if label >= 0 else None
    return SynthSample(prop, label, kind, box, targets)


def synth_dataset(cfg: SynthConfig | None = None, seed: int = 0) -> list[SynthSample]:
    """Deterministic labelled proposals: ``n_id`` ID samples (classes balanced) then ``n_ood`` OOD.

    Sample i draws from its own generator seeded with (seed, i), so items can
    be produced in any order or in parallel.
    """
    cfg = cfg or SynthConfig()
    out = []
    for i in range(cfg.n_id + cfg.n_ood):
        rng = np.random.default_rng([seed, i])
        kind = CLASS_NAMES[i % 3] if i < cfg.n_id else OOD_KINDS[(i - cfg.n_id) % len(OOD_KINDS)]
        out.append(synth_sample(kind, rng, cfg, cluster_id=i))
    return out


def to_proposal_set(samples: list[SynthSample]) -> ProposalSet:
    """Stack samples into network-ready arrays (box targets follow the ID rows)."""
    points = np.stack([s.proposal.canonical_points for s in samples])
    vox = np.stack([s.proposal.voxel_features for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    tgt = [s.targets for s in samples if s.label >= 0]
    return ProposalSet(points, vox, labels, TargetArrays.stack(tgt) if tgt else None,
                       np.array([s.proposal.r_m for s in samples]))


# --- whole scans -------------------------------------------------------------------

@dataclass
class SceneObject:
    kind: str
    label: int
    box: Box3D | None


@dataclass
class Scene:
    scan: Scan
    objects: list[SceneObject]          # scan label k refers to objects[k - 1]
    ground: Ground | None

    @property
    def gt_boxes(self) -> list[tuple[int, Box3D]]:
        return [(o.label, o.box) for o in self.objects if o.label >= 0]


def _place(rng, placed, extent, r_lo, r_hi, tries=200):
    """Random (x, y) in the annulus that keeps clear of already placed objects."""
    for _ in range(tries):
        r = rng.uniform(r_lo, r_hi)
        a = rng.uniform(-math.pi, math.pi)
        x, y = r * math.cos(a), r * math.sin(a)
        if all(math.hypot(x - px, y - py) > extent + pe + 1.5 for px, py, pe in placed):
            return x, y
    return None


def compose_scene(kinds, rng, cfg: ProjectionConfig, ground: Ground | None = None,
                  r_range=(5.0, 40.0), z_noise: float = 0.0, foliage_noise: bool = True) -> Scene:
    """Place and render objects of the given kinds on ``ground`` (flat by default)."""
    ground = ground if ground is not None else Ground()
    prims, owner, objects, placed = [], [], [], []
    for kind in kinds:
        yaw = rng.uniform(-math.pi, math.pi)
        # Probe build at the origin to learn the footprint, then place it.
        probe, _ = BUILDERS[kind](np.random.default_rng(0), 0.0, 0.0, yaw)
        extent = _object_extent(probe)
        spot = _place(rng, placed, extent, *r_range)
        if spot is None:
            continue
        x, y = spot
        gz = float(ground.height_at(x, y))
        parts, box = BUILDERS[kind](rng, x, y, yaw, gz)
        placed.append((x, y, extent))
        objects.append(SceneObject(kind, CLASS_NAMES.index(kind) if kind in CLASS_NAMES else -1, box))
        prims.extend(parts)
        owner.extend([len(objects)] * len(parts))
    scan = render(prims, cfg, ground, rng=rng, z_noise=z_noise)
    owner = np.array([0] + owner, dtype=np.int64)
    labels = owner[scan.labels]
    pts = scan.points
    if foliage_noise:
        noisy = np.isin(labels, [k + 1 for k, o in enumerate(objects) if o.kind in _NOISY])
        pts = pts.copy()
        pts[noisy] += rng.normal(0.0, 0.05, size=(int(noisy.sum()), 3))
    return Scene(Scan(pts, labels, cfg), objects, ground)


def _obstacle(rng, x, y, gz):
    """Generic box or cylinder obstacle, sunk slightly so it meets sloped ground."""
    if rng.random() < 0.5:
        s = rng.uniform([0.5, 0.5, 0.5], [4.0, 3.0, 3.0])
        return Box(np.array([x, y, gz + s[2] / 2 - 0.2]), s, rng.uniform(-math.pi, math.pi))
    radii = tuple(rng.uniform(0.2, 1.0, size=2))
    return Cylinder(np.array([x, y]), radii, gz - 0.3, gz + rng.uniform(0.5, 3.0),
                    rng.uniform(-math.pi, math.pi))


def obstacle_scene(seed: int, cfg: ProjectionConfig, max_tilt: float = 0.0, z_noise: float = 0.0,
                   min_obstacle_fraction: float = 0.0, n_obstacles=(3, 10)) -> Scan:
    """Ground plane plus box/cylinder obstacles; scan labels are 0 for ground.

    Obstacles are added three at a time until they cover at least
    ``min_obstacle_fraction`` of the returns.
    """
    rng = np.random.default_rng(seed)
    ground = Ground.tilted(rng.uniform(0.0, max_tilt), rng.uniform(-math.pi, math.pi)) if max_tilt else Ground()
    objs = []

    def add():
        r = rng.uniform(4.0, 30.0)
        a = rng.uniform(-math.pi, math.pi)
        x, y = r * math.cos(a), r * math.sin(a)
        objs.append(_obstacle(rng, x, y, float(ground.height_at(x, y))))

    for _ in range(rng.integers(n_obstacles[0], n_obstacles[1] + 1)):
        add()
    while True:
        scan = render(objs, cfg, ground, rng=rng, z_noise=z_noise)
        if len(scan.labels) == 0 or (scan.labels > 0).mean() >= min_obstacle_fraction:
            return scan
        for _ in range(3):
            add()


def road_scene(seed: int, cfg: ProjectionConfig | None = None, n_id=(3, 8), n_ood=(5, 15),
               kinds_id=CLASS_NAMES) -> Scene:
    """Flat road scene mixing ID objects with OOD clutter."""
    cfg = cfg or ProjectionConfig()
    rng = np.random.default_rng(seed)
    kinds = [kinds_id[i] for i in rng.integers(0, len(kinds_id), size=rng.integers(n_id[0], n_id[1] + 1))]
    kinds += [OOD_KINDS[i] for i in rng.integers(0, len(OOD_KINDS), size=rng.integers(n_ood[0], n_ood[1] + 1))]
    order = rng.permutation(len(kinds))
    return compose_scene([kinds[i] for i in order], rng, cfg)


# --- on-disk layout ------------------------------------------------------------------
# samples.txt : index kind label n_points mean_x mean_y mean_z cluster_id
# boxes.txt   : index cx cy cz l w h yaw          (ID samples only)
# points.bin  : float32 raw points, concatenated in sample order
# canonical.bin, voxel.bin : float32 network inputs (N x M x 3, N x 3)

def write_synth_dir(path, samples: list[SynthSample]) -> None:
    from pathlib import Path
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "samples.txt", "w") as fs, open(d / "boxes.txt", "w") as fb:
        for i, s in enumerate(samples):
            p = s.proposal
            fs.write(f"{i} {s.kind} {s.label} {len(p.points)} {float(p.mean[0])!r} {float(p.mean[1])!r} {float(p.mean[2])!r} "
                     f"{p.cluster_id}\n")
            if s.box is not None:
                b = s.box
                fb.write(f"{i} " + " ".join(repr(float(v)) for v in (*b.center, *b.size, b.yaw)) + "\n")
    with open(d / "points.bin", "wb") as fh:
        for s in samples:
            fh.write(np.asarray(s.proposal.points, dtype="<f4").tobytes())
    np.stack([s.proposal.canonical_points for s in samples]).astype("<f4").tofile(d / "canonical.bin")
    np.stack([s.proposal.voxel_features for s in samples]).astype("<f4").tofile(d / "voxel.bin")


def read_synth_dir(path, cfg: SynthConfig | None = None) -> list[SynthSample]:
    from pathlib import Path
    from .proposals import voxelize_mean
    cfg = cfg or SynthConfig()
    d = Path(path)
    rows = [line.split() for line in (d / "samples.txt").read_text().splitlines() if line.strip()]
    boxes = {}
    for line in (d / "boxes.txt").read_text().splitlines():
        f = line.split()
        if f:
            v = [float(x) for x in f[1:]]
            boxes[int(f[0])] = Box3D(v[0:3], v[3:6], v[6])
    raw = np.fromfile(d / "points.bin", dtype="<f4").astype(np.float64).reshape(-1, 3)
    canon = np.fromfile(d / "canonical.bin", dtype="<f4").astype(np.float64).reshape(len(rows), -1, 3)
    vox = np.fromfile(d / "voxel.bin", dtype="<f4").astype(np.float64).reshape(len(rows), 3)
    out, start = [], 0
    for i, f in enumerate(rows):
        n = int(f[3])
        mean = np.array([float(v) for v in f[4:7]])
        pts = raw[start:start + n]
        start += n
        prop = Proposal(pts, mean, float(np.linalg.norm(mean)), canon[i], voxelize_mean(mean, cfg.proposal),
                        int(f[7]), vox[i])
        label = int(f[2])
        box = boxes.get(i)
        targets = encode_box_targets(box, prop, label) if label >= 0 and box is not None else None
        out.append(SynthSample(prop, label, f[1], box, targets))
    return out
