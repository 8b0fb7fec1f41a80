"""Synthetic two-modality scenes.

A scene is a G x G grid of cells, each empty or holding one of C classes.
Every feature-map row is a query attached to one cell (row ``q`` looks at
cell ``q mod G*G``).  Each modality sees a noisy view of the cell:

* camera: class identity clean, occupancy noisy; empty cells show a random
  look-alike class, so the camera alone cannot separate objects from clutter;
* lidar: occupancy clean, class identity noisy.

On top of the view, both modalities carry a per-cell nuisance field shared
between them with weight ``shared_weight``; it carries no task information
and sets the cross-modal correlation.  Camera features are additionally
smoothed along the embedding dimension.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..featuremap import FeatureMap
from ..rng import make_rng


@dataclass(frozen=True)
class DataConfig:
    grid: int = 8
    classes: int = 4
    density: float = 0.25
    q: int = 64
    d: int = 32
    shared_weight: float = 0.5
    nuisance_dim: int = 3
    gain: float = 2.0
    clean_noise: float = 0.15
    blurred_noise: float = 0.9
    sensor_noise: float = 0.05
    smooth_width: int = 5
    world_seed: int = 0
    n_train: int = 2000
    n_test: int = 500

    def __post_init__(self):
        if not 0.0 <= self.density < 1.0:
            raise ValueError(f"density must lie in [0, 1), got {self.density}")
        if not 0.0 <= self.shared_weight <= 1.0:
            raise ValueError(f"shared_weight must lie in [0, 1], got {self.shared_weight}")
        if self.q < self.grid * self.grid:
            raise ValueError(f"need at least one query per cell: q={self.q} < {self.grid}^2")
        if self.grid < 1 or self.classes < 1 or self.d < 4:
            raise ValueError("grid, classes must be >= 1 and d >= 4")

    @property
    def cells(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class SceneSample:
    grid: np.ndarray  # (G, G) ints, 0 = empty, 1..C = class
    seed: int

    @property
    def labels(self) -> np.ndarray:
        return self.grid.ravel()

    @property
    def object_count(self) -> int:
        return int(np.count_nonzero(self.grid))


def generate_scene(seed: int, cfg: DataConfig) -> SceneSample:
    """i.i.d. Bernoulli(density) occupancy with a uniform class per object."""
    rng = make_rng(seed, "scene")
    occ = rng.random((cfg.grid, cfg.grid)) < cfg.density
    cls = rng.integers(1, cfg.classes + 1, size=(cfg.grid, cfg.grid))
    return SceneSample(grid=np.where(occ, cls, 0).astype(np.int64), seed=int(seed))


def smoothing_matrix(d: int, width: int) -> np.ndarray:
    """Circular moving average along the embedding dimension."""
    s = np.zeros((d, d))
    half = width // 2
    for i in range(d):
        for k in range(-half, half + 1):
            s[i, (i + k) % d] += 1.0 / (2 * half + 1)
    return s


class World:
    """Fixed per-experiment projections shared by every scene."""

    def __init__(self, cfg: DataConfig):
        self.cfg = cfg
        rng = make_rng(cfg.world_seed, "world")
        view = 1 + cfg.classes
        self.e_shared = rng.normal(size=(cfg.nuisance_dim, cfg.d)) / np.sqrt(cfg.nuisance_dim)
        self.e_camera = rng.normal(size=(view, cfg.d)) / np.sqrt(2.0)
        self.e_lidar = rng.normal(size=(view, cfg.d)) / np.sqrt(2.0)
        smooth = smoothing_matrix(cfg.d, cfg.smooth_width)
        # keep per-element variance after averaging
        self.smooth = smooth.T * np.sqrt(cfg.smooth_width)


_WORLDS: dict[DataConfig, World] = {}


def world_for(cfg: DataConfig) -> World:
    w = _WORLDS.get(cfg)
    if w is None:
        w = _WORLDS[cfg] = World(cfg)
    return w


def _view(scene: SceneSample, modality: str, cfg: DataConfig) -> np.ndarray:
    labels = scene.labels
    occ = (labels > 0).astype(float)
    rng = make_rng(scene.seed, "view", modality)
    if modality == "camera":
        phantom = rng.integers(1, cfg.classes + 1, size=labels.size)
        shown = np.where(labels > 0, labels, phantom)
        cls = np.eye(cfg.classes)[shown - 1]
        occ_noise, cls_noise = cfg.blurred_noise, cfg.clean_noise
    else:
        cls = np.eye(cfg.classes)[np.maximum(labels, 1) - 1] * occ[:, None]
        occ_noise, cls_noise = cfg.clean_noise, cfg.blurred_noise
    occ_v = occ + occ_noise * rng.normal(size=occ.shape)
    cls_v = cls + cls_noise * rng.normal(size=cls.shape)
    return np.concatenate([occ_v[:, None], cls_v], axis=1)


def modality_features(scene: SceneSample, modality: str, cfg: DataConfig, world: World | None = None,
                      noise: bool = True) -> FeatureMap:
    """tanh(gain * (shared nuisance + modality view projection) + sensor noise)."""
    if modality not in ("camera", "lidar"):
        raise ValueError(f"modality must be camera or lidar, got {modality!r}")
    world = world or world_for(cfg)
    rows = np.arange(cfg.q) % cfg.cells
    nuisance = make_rng(scene.seed, "nuisance").normal(size=(cfg.cells, cfg.nuisance_dim))
    view = _view(scene, modality, cfg)
    rho = cfg.shared_weight
    emb = world.e_camera if modality == "camera" else world.e_lidar
    specific = view @ emb
    if noise:
        specific = specific + cfg.sensor_noise / cfg.gain * make_rng(scene.seed, "sensor", modality).normal(
            size=specific.shape)
    if modality == "camera":
        specific = specific @ world.smooth
    pre = cfg.gain * (np.sqrt(rho) * (nuisance @ world.e_shared) + np.sqrt(1.0 - rho) * specific)
    return FeatureMap(np.tanh(pre[rows]).astype(np.float32), modality)


def sample_features(seed: int, cfg: DataConfig, world: World | None = None):
    scene = generate_scene(seed, cfg)
    world = world or world_for(cfg)
    return scene, modality_features(scene, "camera", cfg, world), modality_features(scene, "lidar", cfg, world)


def total_variation(values: np.ndarray) -> float:
    """Mean absolute difference between neighbours along D."""
    return float(np.mean(np.abs(np.diff(values, axis=-1))))


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PairConfig:
    """Predictor/target pairs with a controlled cross-modal correlation."""

    q: int = 64
    d: int = 32
    rho: float = 0.9
    factors: int = 6
    gain: float = 1.2
    sensor_noise: float = 0.02
    world_seed: int = 0


def correlated_pair(seed: int, cfg: PairConfig) -> tuple[FeatureMap, FeatureMap]:
    """Rows driven by Gaussian factors h (predictor) and rho*h + sqrt(1-rho^2)*h'
    (target) through two fixed embeddings; rho = 0 gives independent maps."""
    if not -1.0 <= cfg.rho <= 1.0:
        raise ValueError("rho must lie in [-1, 1]")
    wr = make_rng(cfg.world_seed, "pair-world")
    e_pred = wr.normal(size=(cfg.factors, cfg.d)) / np.sqrt(cfg.factors)
    e_tgt = wr.normal(size=(cfg.factors, cfg.d)) / np.sqrt(cfg.factors)
    rng = make_rng(seed, "pair")
    h = rng.normal(size=(cfg.q, cfg.factors))
    h2 = rng.normal(size=(cfg.q, cfg.factors))
    ht = cfg.rho * h + np.sqrt(max(0.0, 1.0 - cfg.rho**2)) * h2
    pred = np.tanh(cfg.gain * (h @ e_pred) + cfg.sensor_noise * rng.normal(size=(cfg.q, cfg.d)))
    tgt = np.tanh(cfg.gain * (ht @ e_tgt) + cfg.sensor_noise * rng.normal(size=(cfg.q, cfg.d)))
    return FeatureMap(pred.astype(np.float32), "camera"), FeatureMap(tgt.astype(np.float32), "lidar")
