"""Synthetic Doppler-LiDAR scans of a descending, decaying wake-vortex pair.

The flow is two counter-rotating Lamb-Oseen vortices in the vertical plane
perpendicular to the runway. Below 1.5 wingspans the ground is modelled by
mirror-image vortices, which makes the pair diverge laterally instead of
reaching the ground. A range-height-indicator scan samples the line-of-sight
projection of the induced velocity on a polar (elevation, range) grid.

Sign convention: the port vortex sits at larger ``y`` and carries positive
(counter-clockwise) circulation, so the pair descends.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import PointCloudFrame, dump_json, write_frame_csv

MAX_SUBSTEP = 0.25
GROUND_EFFECT_HEIGHT = 1.5  # in wingspans


@dataclass(frozen=True)
class AircraftClass:
    name: str
    wingspan: float  # m
    gamma0: float  # m^2/s
    z0: float  # nominal height when the vortices form, m


# neighbouring classes overlap once per-scenario jitter is applied
DEFAULT_CATALOG = (
    AircraftClass("regional", 30.0, 260.0, 60.0),
    AircraftClass("narrowbody", 38.0, 330.0, 70.0),
    AircraftClass("midsize", 48.0, 420.0, 80.0),
    AircraftClass("widebody", 60.0, 520.0, 90.0),
)


@dataclass
class VortexPairState:
    y_port: float
    z_port: float
    y_star: float
    z_star: float
    gamma_port: float
    gamma_star: float
    core_radius: float
    age: float = 0.0

    def __post_init__(self):
        if self.core_radius <= 0:
            raise ValueError("core radius must be positive")

    def validate(self) -> None:
        if self.gamma_port * self.gamma_star > 0:
            raise ValueError("port and starboard circulations must have opposite signs")
        if self.z_port <= 0 or self.z_star <= 0:
            raise ValueError("vortex centers must stay above ground")

    @property
    def centers(self) -> np.ndarray:
        return np.array([[self.y_port, self.z_port], [self.y_star, self.z_star]])


@dataclass
class ScanGeometry:
    origin: tuple[float, float]
    elevations: np.ndarray  # radians
    ranges: np.ndarray  # m
    keep_prob: float = 0.9  # aerosol return probability per sample

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if np.any(np.diff(self.elevations) <= 0):
            raise ValueError("elevations must be strictly increasing")
        if np.any(np.diff(self.ranges) <= 0) or np.any(self.ranges <= 0):
            raise ValueError("ranges must be positive and strictly increasing")
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must be in (0, 1]")

    def sample_points(self) -> np.ndarray:
        """(M, 2) grid positions with z > 0, elevation-major order."""
        phi, r = np.meshgrid(self.elevations, self.ranges, indexing="ij")
        y = self.origin[0] + r * np.cos(phi)
        z = self.origin[1] + r * np.sin(phi)
        pts = np.stack([y.ravel(), z.ravel()], axis=1)
        return pts[pts[:, 1] > 0]


@dataclass
class Scenario:
    class_id: int
    class_name: str
    wingspan: float
    gamma0: float
    z0: float
    y0: float  # lateral aircraft position relative to the runway axis
    crosswind: float
    decay_time: float
    noise_sigma: float
    dt: float
    n_frames: int
    t_start: float
    core_radius: float
    lidar_y: float

    def __post_init__(self):
        if self.gamma0 <= 0 or self.wingspan <= 0 or self.z0 <= 0:
            raise ValueError("gamma0, wingspan and z0 must be positive")
        if not 0 < self.dt < 8.0:
            raise ValueError("frame interval must lie in (0, 8) s")

    @property
    def separation(self) -> float:
        """Initial vortex spacing for elliptic loading."""
        return math.pi / 4.0 * self.wingspan

    def initial_state(self) -> VortexPairState:
        half = 0.5 * self.separation
        return VortexPairState(
            y_port=self.y0 + half, z_port=self.z0,
            y_star=self.y0 - half, z_star=self.z0,
            gamma_port=self.gamma0, gamma_star=-self.gamma0,
            core_radius=self.core_radius, age=0.0,
        )


@dataclass
class SimConfig:
    n_sequences: int = 10
    n_frames: int = 5
    seed: int = 0
    labeled: bool = True
    label_noise_sigma: float = 0.0
    catalog: tuple = DEFAULT_CATALOG
    jitter: float = 0.10
    z0_jitter: float = 0.35
    y0_range: tuple = (-30.0, 30.0)
    crosswind: tuple = (-2.0, 2.0)
    decay_time: tuple = (60.0, 120.0)
    noise_sigma: tuple = (0.1, 0.4)
    dt: tuple = (5.0, 7.5)
    t_start: tuple = (0.0, 20.0)
    core_radius_frac: tuple = (0.04, 0.07)
    lidar_y: tuple = (-320.0, -260.0)
    lidar_z: float = 2.0
    elevation_deg: tuple = (1.0, 34.0, 0.75)  # start, stop (inclusive), step
    range_m: tuple = (150.0, 500.0, 7.0)
    keep_prob: float = 0.9

    @classmethod
    def from_dict(cls, values: dict) -> "SimConfig":
        values = dict(values)
        if "catalog" in values:
            values["catalog"] = tuple(
                c if isinstance(c, AircraftClass) else AircraftClass(**c) for c in values["catalog"]
            )
        for key, val in values.items():
            if isinstance(val, list):
                values[key] = tuple(val)
        return cls(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["catalog"] = [asdict(c) for c in self.catalog]
        return out

    def geometry(self, scenario: Scenario) -> ScanGeometry:
        e0, e1, de = self.elevation_deg
        r0, r1, dr = self.range_m
        return ScanGeometry(
            origin=(scenario.lidar_y, self.lidar_z),
            elevations=np.deg2rad(np.arange(e0, e1 + 0.5 * de, de)),
            ranges=np.arange(r0, r1 + 0.5 * dr, dr),
            keep_prob=self.keep_prob,
        )


def sample_scenario(rng: np.random.Generator, config: SimConfig) -> Scenario:
    """Draw one scenario; the aircraft class id doubles as the probe label."""
    catalog = config.catalog
    if not catalog:
        raise ValueError("aircraft catalog is empty")
    class_id = int(rng.integers(len(catalog)))
    ac = catalog[class_id]

    def jittered(value, frac):
        return value * (1.0 + rng.uniform(-frac, frac))

    wingspan = jittered(ac.wingspan, config.jitter)
    return Scenario(
        class_id=class_id,
        class_name=ac.name,
        wingspan=wingspan,
        gamma0=jittered(ac.gamma0, config.jitter),
        z0=jittered(ac.z0, config.z0_jitter),
        y0=rng.uniform(*config.y0_range),
        crosswind=rng.uniform(*config.crosswind),
        decay_time=rng.uniform(*config.decay_time),
        noise_sigma=rng.uniform(*config.noise_sigma),
        dt=rng.uniform(*config.dt),
        n_frames=config.n_frames,
        t_start=rng.uniform(*config.t_start),
        core_radius=wingspan * rng.uniform(*config.core_radius_frac),
        lidar_y=rng.uniform(*config.lidar_y),
    )


# -- flow field ------------------------------------------------------------


def _vortex_sources(state: VortexPairState, ground_effect: bool):
    ys = [state.y_port, state.y_star]
    zs = [state.z_port, state.z_star]
    gs = [state.gamma_port, state.gamma_star]
    if ground_effect:
        ys = ys + ys
        zs = zs + [-z for z in zs]
        gs = gs + [-g for g in gs]
    return np.array(ys), np.array(zs), np.array(gs)


def lamb_oseen(dy, dz, gamma, core_radius):
    """Velocity (v_y, v_z) at offset (dy, dz) from a single Lamb-Oseen vortex."""
    r2 = dy * dy + dz * dz
    safe = np.where(r2 > 0, r2, 1.0)
    # Gamma/(2 pi r) * (1 - exp(-r^2/rc^2)) along the counter-clockwise tangent
    factor = np.where(r2 > 0, gamma / (2.0 * np.pi * safe) * -np.expm1(-r2 / core_radius**2), 0.0)
    return -factor * dz, factor * dy


def induced_velocity(query, state: VortexPairState, ground_effect: bool = False):
    """Velocity induced at ``query`` (..., 2) by the pair and optional images."""
    q = np.asarray(query, dtype=np.float64)
    ys, zs, gs = _vortex_sources(state, ground_effect)
    dy = q[..., 0, None] - ys
    dz = q[..., 1, None] - zs
    vy, vz = lamb_oseen(dy, dz, gs, state.core_radius)
    return vy.sum(axis=-1), vz.sum(axis=-1)


def _center_velocity(pos: np.ndarray, gammas: np.ndarray, rc: float, wingspan: float, crosswind: float):
    """d/dt of [y_port, z_port, y_star, z_star]."""
    out = np.empty(4)
    for k in (0, 1):
        other = 1 - k
        y, z = pos[2 * k], pos[2 * k + 1]
        ys = [pos[2 * other]]
        zs = [pos[2 * other + 1]]
        gs = [gammas[other]]
        if z < GROUND_EFFECT_HEIGHT * wingspan:
            ys += [pos[0], pos[2]]
            zs += [-pos[1], -pos[3]]
            gs += [-gammas[0], -gammas[1]]
        vy, vz = lamb_oseen(y - np.array(ys), z - np.array(zs), np.array(gs), rc)
        out[2 * k] = vy.sum() + crosswind
        out[2 * k + 1] = vz.sum()
    return out


def advance_vortex_state(state: VortexPairState, dt: float, scenario: Scenario) -> VortexPairState:
    """Advect both centers for ``dt`` seconds with RK4 (substeps <= 0.25 s)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_sub = max(1, math.ceil(dt / MAX_SUBSTEP - 1e-12))
    h = dt / n_sub
    tau = scenario.decay_time
    g0 = np.array([state.gamma_port, state.gamma_star])
    pos = np.array([state.y_port, state.z_port, state.y_star, state.z_star])
    args = (state.core_radius, scenario.wingspan, scenario.crosswind)

    def rhs(p, s):
        return _center_velocity(p, g0 * math.exp(-s / tau), *args)

    s = 0.0
    for _ in range(n_sub):
        k1 = rhs(pos, s)
        k2 = rhs(pos + 0.5 * h * k1, s + 0.5 * h)
        k3 = rhs(pos + 0.5 * h * k2, s + 0.5 * h)
        k4 = rhs(pos + h * k3, s + h)
        pos = pos + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        s += h
    decay = math.exp(-dt / tau)
    return VortexPairState(
        y_port=pos[0], z_port=pos[1], y_star=pos[2], z_star=pos[3],
        gamma_port=state.gamma_port * decay, gamma_star=state.gamma_star * decay,
        core_radius=state.core_radius, age=state.age + dt,
    )


def rollout(scenario: Scenario) -> list[VortexPairState]:
    """Vortex states at every frame time ``t_start + k * dt``."""
    state = scenario.initial_state()
    if scenario.t_start > 0:
        state = advance_vortex_state(state, scenario.t_start, scenario)
    states = [state]
    for _ in range(scenario.n_frames - 1):
        state = advance_vortex_state(state, scenario.dt, scenario)
        states.append(state)
    return states


def in_ground_effect(state: VortexPairState, wingspan: float) -> bool:
    return min(state.z_port, state.z_star) < GROUND_EFFECT_HEIGHT * wingspan


def render_scan(
    state: VortexPairState,
    geometry: ScanGeometry,
    scenario: Scenario,
    rng: np.random.Generator,
) -> PointCloudFrame:
    """Simulate one RHI scan: line-of-sight velocity plus noise, with dropout."""
    pts = geometry.sample_points()
    vy, vz = induced_velocity(pts, state, in_ground_effect(state, scenario.wingspan))
    los = pts - np.asarray(geometry.origin)
    los /= np.linalg.norm(los, axis=1, keepdims=True)
    vr = vy * los[:, 0] + vz * los[:, 1]
    if scenario.noise_sigma > 0:
        vr = vr + rng.normal(0.0, scenario.noise_sigma, size=len(vr))
    keep_prob = geometry.keep_prob
    meta = {"grid_points": len(pts), "dropout_relaxed": False}
    while True:
        keep = rng.random(len(pts)) < keep_prob
        if keep.any():
            break
        keep_prob = 1.0 - 0.5 * (1.0 - keep_prob)
        meta["dropout_relaxed"] = True
    points = np.column_stack([pts[keep], vr[keep]])
    return PointCloudFrame(points, timestamp=state.age, meta=meta)


# -- datasets --------------------------------------------------------------


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per sequence, identical under any parallel schedule."""
    return np.random.default_rng([seed, index])


def simulate_sequence(config: SimConfig, index: int):
    rng = sequence_rng(config.seed, index)
    scenario = sample_scenario(rng, config)
    geometry = config.geometry(scenario)
    states = rollout(scenario)
    frames = [render_scan(s, geometry, scenario, rng) for s in states]
    truth = np.stack([s.centers for s in states])
    observed = truth
    if config.label_noise_sigma > 0:
        observed = truth + rng.normal(0.0, config.label_noise_sigma, size=truth.shape)
    return scenario, frames, truth, observed


def generate_dataset(config: SimConfig, out_dir: Path) -> dict:
    """Write ``config.n_sequences`` recordings plus sealed exact labels.

    Returns the top-level manifest, also written as ``dataset.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle = {}
    entries = []
    for i in range(config.n_sequences):
        seq_id = f"seq_{i:05d}"
        scenario, frames, truth, observed = simulate_sequence(config, i)
        seq_dir = out_dir / seq_id
        if seq_dir.exists():
            shutil.rmtree(seq_dir)
        seq_dir.mkdir()
        for k, frame in enumerate(frames):
            write_frame_csv(seq_dir / f"frame_{k}.csv", frame.points)
        manifest = {
            "sequence_id": seq_id,
            "scenario": asdict(scenario),
            "timestamps": [f.timestamp for f in frames],
            "dropout_relaxed": [f.meta["dropout_relaxed"] for f in frames],
        }
        if config.labeled:
            manifest["class_id"] = scenario.class_id
            manifest["centers"] = observed.tolist()
        dump_json(seq_dir / "manifest.json", manifest)
        oracle[seq_id] = {"class_id": scenario.class_id, "centers": truth.tolist()}
        entries.append(seq_id)
    (out_dir / "_oracle").mkdir(exist_ok=True)
    dump_json(out_dir / "_oracle" / "labels.json", oracle)
    top = {"config": config.to_dict(), "sequences": entries, "labeled": config.labeled}
    dump_json(out_dir / "dataset.json", top)
    return top


def load_scenario(seq_dir: Path) -> Scenario:
    manifest = json.loads((Path(seq_dir) / "manifest.json").read_text())
    return Scenario(**manifest["scenario"])
