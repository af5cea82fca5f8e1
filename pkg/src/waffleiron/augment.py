"""Training-time scene and instance augmentations.

Scene-level transforms (z-rotation, axis flips, global scaling) move every
point and rebuild the coordinate-derived feature columns so positions and
features never drift apart. Instance cutmix pastes stored rare-class objects
onto drivable surfaces; polarmix swaps an azimuth sector between two scans
and rotate-copies rare-class points from the second scan into the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import PointCloud

# Default class ids follow the usual 19-class driving remap: the cutmix
# donors are the rare movable things, the landing surfaces are drivable.
CUTMIX_CLASSES = (1, 2, 4, 5, 6)  # bicycle, motorcycle, other-vehicle, person, bicyclist
GROUND_CLASSES = (8, 9, 10)  # road, parking, sidewalk

_TWO_PI = 2.0 * np.pi


@dataclass
class AugmentConfig:
    """Switches and ranges for the augmentation pipeline."""

    rotate: bool = True
    flip: bool = True
    scale: bool = True
    rotation_range: tuple[float, float] = (0.0, _TWO_PI)
    flip_prob: tuple[float, float] = (0.5, 0.5)  # x axis, y axis
    scale_range: tuple[float, float] = (0.95, 1.05)
    cutmix: bool = False
    cutmix_max_per_class: int = 40
    polarmix: bool = False
    sector_width_range: tuple[float, float] = (np.pi / 4, 3 * np.pi / 4)
    paste_angles: tuple[float, ...] = (_TWO_PI / 3, 2 * _TWO_PI / 3)
    ground_classes: tuple[int, ...] = GROUND_CLASSES
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.scale_range[0] <= self.scale_range[1]):
            raise ValueError("scale range must be positive")
        if self.cutmix_max_per_class < 0:
            raise ValueError("cutmix_max_per_class must be >= 0")


@dataclass
class Instance:
    """One stored object: centroid-relative points plus intensity."""

    positions: np.ndarray  # (n, 3) relative to the instance centroid
    intensity: np.ndarray  # (n,)
    class_id: int


@dataclass
class InstanceBank:
    """Per-class pool of extracted instances."""

    classes: tuple[int, ...]
    instances: dict[int, list[Instance]] = field(default_factory=dict)

    def __post_init__(self):
        for c in self.classes:
            self.instances.setdefault(int(c), [])

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.instances.values())


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=np.float64)


def random_rotate_z(
    pc: PointCloud,
    rng: np.random.Generator,
    angle_range: tuple[float, float] = (0.0, _TWO_PI),
) -> PointCloud:
    """Rotate the whole scene around the z-axis by a uniform random angle."""
    theta = float(rng.uniform(*angle_range))
    rotated = pc.positions.astype(np.float64) @ _rot_z(theta).T
    return pc.with_positions(rotated)


def random_flip(
    pc: PointCloud,
    rng: np.random.Generator,
    prob_x: float = 0.5,
    prob_y: float = 0.5,
) -> PointCloud:
    """Independently flip the sign of the x and/or y axis."""
    sign = np.ones(3, dtype=np.float64)
    if rng.random() < prob_x:
        sign[0] = -1.0
    if rng.random() < prob_y:
        sign[1] = -1.0
    return pc.with_positions(pc.positions.astype(np.float64) * sign)


def random_scale(
    pc: PointCloud,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.95, 1.05),
) -> PointCloud:
    """Scale the whole scene by a uniform random factor."""
    s = float(rng.uniform(*scale_range))
    return pc.with_positions(pc.positions.astype(np.float64) * s)


def build_instance_bank(
    scans: Sequence[tuple[PointCloud, np.ndarray]],
    classes: Sequence[int],
    rng: Optional[np.random.Generator] = None,
) -> InstanceBank:
    """Group labeled points by (class, instance id) across scans.

    Each group is stored with centroid-relative coordinates. Classes without
    any instance simply stay empty.
    """
    bank = InstanceBank(classes=tuple(int(c) for c in classes))
    for pc, instance_ids in scans:
        if pc.labels is None:
            raise ValueError("instance extraction needs labeled scans")
        instance_ids = np.asarray(instance_ids).reshape(-1)
        for c in bank.classes:
            rows = np.flatnonzero((pc.labels == c) & pc.valid)
            if rows.size == 0:
                continue
            for inst in np.unique(instance_ids[rows]):
                members = rows[instance_ids[rows] == inst]
                pos = pc.positions[members].astype(np.float64)
                centroid = pos.mean(axis=0)
                bank.instances[c].append(
                    Instance(
                        positions=(pos - centroid).astype(np.float32),
                        intensity=pc.features[members, 0].copy(),
                        class_id=c,
                    )
                )
    return bank


def _append_points(pc: PointCloud, positions: np.ndarray, intensity: np.ndarray, labels: np.ndarray) -> PointCloud:
    from .geometry import point_features

    feats = point_features(positions, intensity, pc.feature_mode)
    return PointCloud(
        positions=np.vstack([pc.positions, positions.astype(np.float32)]),
        features=np.vstack([pc.features, feats]),
        labels=np.concatenate([pc.labels, labels.astype(np.int32)]),
        valid=np.concatenate([pc.valid, np.ones(len(labels), dtype=bool)]),
    )


def instance_cutmix(
    pc: PointCloud,
    bank: InstanceBank,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> PointCloud:
    """Paste up to ``cutmix_max_per_class`` stored instances per class.

    Every pasted instance gets its own random z-rotation, a flip along x or
    y, and a random rescale, then lands with its xy-centroid on a uniformly
    chosen ground point and its lowest point at that point's height. Scenes
    without any ground point are returned untouched.
    """
    if pc.labels is None:
        raise ValueError("instance_cutmix needs a labeled scene")
    if bank.total == 0 or config.cutmix_max_per_class == 0:
        return pc
    ground_rows = np.flatnonzero(np.isin(pc.labels, config.ground_classes) & pc.valid)
    if ground_rows.size == 0:
        return pc
    new_pos = []
    new_inten = []
    new_labels = []
    for c in bank.classes:
        pool = bank.instances[c]
        if not pool:
            continue
        n_take = min(config.cutmix_max_per_class, len(pool))
        chosen = rng.permutation(len(pool))[:n_take]
        for j in chosen:
            inst = pool[int(j)]
            pos = inst.positions.astype(np.float64)
            pos = pos @ _rot_z(float(rng.uniform(0.0, _TWO_PI))).T
            axis = int(rng.integers(2))
            pos[:, axis] = -pos[:, axis]
            pos *= float(rng.uniform(*config.scale_range))
            target = pc.positions[int(rng.choice(ground_rows))].astype(np.float64)
            offset = np.array([target[0], target[1], target[2] - pos[:, 2].min()])
            pos = pos + offset
            new_pos.append(pos)
            new_inten.append(inst.intensity)
            new_labels.append(np.full(len(pos), inst.class_id, dtype=np.int32))
    if not new_pos:
        return pc
    return _append_points(
        pc,
        np.vstack(new_pos),
        np.concatenate(new_inten),
        np.concatenate(new_labels),
    )


def _azimuth(positions: np.ndarray) -> np.ndarray:
    return np.mod(np.arctan2(positions[:, 1], positions[:, 0]), _TWO_PI)


def polarmix(
    scene_a: PointCloud,
    scene_b: PointCloud,
    classes: Sequence[int],
    rng: np.random.Generator,
    sector: Optional[tuple[float, float]] = None,
    width_range: tuple[float, float] = (np.pi / 4, 3 * np.pi / 4),
    paste_angles: tuple[float, ...] = (_TWO_PI / 3, 2 * _TWO_PI / 3),
) -> PointCloud:
    """Mix two labeled scenes.

    Scene level: a random azimuth sector of ``scene_a`` is replaced by
    ``scene_b``'s points in that sector. Instance level: points of the listed
    classes in ``scene_b`` are copied into the result as-is and rotated by
    each angle in ``paste_angles``. ``sector=(start, width)`` overrides the
    random draw.
    """
    if scene_a.labels is None or scene_b.labels is None:
        raise ValueError("polarmix needs labeled scenes")
    if sector is None:
        start = float(rng.uniform(0.0, _TWO_PI))
        width = float(rng.uniform(*width_range))
    else:
        start, width = float(sector[0]), float(sector[1])
    keep_a = np.mod(_azimuth(scene_a.positions) - start, _TWO_PI) >= width
    keep_a &= scene_a.valid
    take_b = np.mod(_azimuth(scene_b.positions) - start, _TWO_PI) < width
    take_b &= scene_b.valid

    pos = [scene_a.positions[keep_a], scene_b.positions[take_b]]
    inten = [scene_a.features[keep_a, 0], scene_b.features[take_b, 0]]
    labels = [scene_a.labels[keep_a], scene_b.labels[take_b]]

    inst_rows = np.flatnonzero(np.isin(scene_b.labels, np.asarray(classes)) & scene_b.valid)
    if inst_rows.size:
        src = scene_b.positions[inst_rows].astype(np.float64)
        angles = (0.0,) + tuple(paste_angles)
        for theta in angles:
            pos.append((src @ _rot_z(theta).T).astype(np.float32))
            inten.append(scene_b.features[inst_rows, 0])
            labels.append(scene_b.labels[inst_rows])

    from .geometry import point_features

    positions = np.vstack(pos)
    intensity = np.concatenate(inten)
    feats = point_features(positions, intensity, scene_a.feature_mode)
    return PointCloud(
        positions=positions.astype(np.float32),
        features=feats,
        labels=np.concatenate(labels),
    )


def apply_augmentations(
    pc: PointCloud,
    config: AugmentConfig,
    rng: np.random.Generator,
    bank: Optional[InstanceBank] = None,
    partner: Optional[PointCloud] = None,
) -> PointCloud:
    """The full training-time pipeline for one scene.

    Polarmix (when enabled and a partner scene is available) and instance
    cutmix run before the scene-level transforms so the pasted points follow
    the same global motion; everything happens before cropping.
    """
    if config.polarmix and partner is not None:
        classes = bank.classes if bank is not None else CUTMIX_CLASSES
        pc = polarmix(
            pc,
            partner,
            classes,
            rng,
            width_range=config.sector_width_range,
            paste_angles=config.paste_angles,
        )
    if config.cutmix and bank is not None and bank.total and config.cutmix_max_per_class:
        pc = instance_cutmix(pc, bank, config, rng)
    if config.rotate:
        pc = random_rotate_z(pc, rng, config.rotation_range)
    if config.flip:
        pc = random_flip(pc, rng, *config.flip_prob)
    if config.scale:
        pc = random_scale(pc, rng, config.scale_range)
    return pc
