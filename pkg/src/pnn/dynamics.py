"""Ground-truth trajectories of a particle in an external Lennard-Jones well.

Everything is in reduced LJ units (epsilon = sigma = m = 1 by default).
Trajectories are integrated with velocity Verlet at a fine timestep and
subsampled every ``stride`` steps to build single-step (x, v) -> (x', v')
datasets.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LjPotential:
    epsilon: float = 1.0
    sigma: float = 1.0
    mass: float = 1.0

    @property
    def r_min(self) -> float:
        return 2.0 ** (1.0 / 6.0) * self.sigma

    def energy(self, x):
        sr6 = (self.sigma / np.asarray(x, dtype=float)) ** 6
        return 4.0 * self.epsilon * (sr6 * sr6 - sr6)

    def force(self, x):
        return lj_force(self, x)

    def total_energy(self, x, v):
        return 0.5 * self.mass * np.asarray(v, dtype=float) ** 2 + self.energy(x)

    def turning_points(self, energy: float) -> tuple[float, float]:
        """Inner and outer turning points for a bound total energy."""
        if energy < -self.epsilon:
            raise ValueError(
                f"energy {energy} is below the well depth {-self.epsilon}: no turning point"
            )
        if energy >= 0.0:
            raise ValueError(f"energy {energy} is not bound (must be < 0)")
        # 4 eps (s^2 - s) = E with s = (sigma/x)^6
        disc = math.sqrt(1.0 + energy / self.epsilon)
        s_inner = 0.5 * (1.0 + disc)
        s_outer = 0.5 * (1.0 - disc)
        return self.sigma * s_inner ** (-1.0 / 6.0), self.sigma * s_outer ** (-1.0 / 6.0)


def lj_force(pot: LjPotential, x):
    """Analytic force -dV/dx. Scalars in, float out; arrays in, array out."""
    if isinstance(x, float):
        if x <= 0.0:
            raise ValueError(f"LJ force undefined for x <= 0 (got {x})")
        sr = pot.sigma / x
        sr6 = sr**6
        return 24.0 * pot.epsilon * (2.0 * sr6 * sr6 - sr6) / x
    arr = np.asarray(x, dtype=float)
    if np.any(arr <= 0.0):
        raise ValueError("LJ force undefined for x <= 0")
    sr6 = (pot.sigma / arr) ** 6
    return 24.0 * pot.epsilon * (2.0 * sr6 * sr6 - sr6) / arr


def _vv_step(pot, x, v, f, dt, gamma):
    # f is the conservative force at x; returns the new state and its force
    m = pot.mass
    h = 0.5 * dt / m
    v_half = v + h * (f - gamma * v)
    x_new = x + dt * v_half
    f_new = lj_force(pot, x_new)
    if gamma == 0.0:
        return x_new, v_half + h * f_new, f_new
    v_pred = v_half + h * (f_new - gamma * v_half)
    v_new = v_half + h * (f_new - gamma * v_pred)
    return x_new, v_new, f_new


def reference_step(pot: LjPotential, x, v, dt: float, gamma: float = 0.0):
    """One velocity-Verlet step under F_LJ(x) - gamma v.

    The friction term in the second half-kick uses a one-pass fixed-point
    estimate of the final velocity.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x_new, v_new, _ = _vv_step(pot, x, v, lj_force(pot, x), dt, gamma)
    return x_new, v_new


@dataclass
class SimConfig:
    dt_fine: float = 2e-4
    stride: int = 10
    total_steps: int = 10_000
    energies: list[float] = field(default_factory=lambda: [-0.8, -0.7, -0.6, -0.5, -0.65])
    gamma: float = 0.0
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.dt_fine <= 0.0:
            raise ValueError("dt_fine must be positive")
        if self.total_steps < self.stride:
            raise ValueError("total_steps must cover at least one stride")

    @property
    def dt(self) -> float:
        return self.stride * self.dt_fine


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    energy_label: float

    def __len__(self):
        return len(self.t)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "v"])
            for row in zip(self.t, self.x, self.v):
                w.writerow([f"{float(val):.17g}" for val in row])

    @classmethod
    def from_csv(cls, path, energy_label: float = float("nan")) -> Trajectory:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0].copy(), data[:, 1].copy(), data[:, 2].copy(), energy_label)


def integrate(pot: LjPotential, x0: float, v0: float, dt: float, n_steps: int,
              gamma: float = 0.0, energy_label: float | None = None) -> Trajectory:
    x, v = float(x0), float(v0)
    f = lj_force(pot, x)
    xs = np.empty(n_steps + 1)
    vs = np.empty(n_steps + 1)
    xs[0], vs[0] = x, v
    for i in range(1, n_steps + 1):
        x, v, f = _vv_step(pot, x, v, f, dt, gamma)
        xs[i], vs[i] = x, v
    t = dt * np.arange(n_steps + 1)
    if energy_label is None:
        energy_label = float(pot.total_energy(x0, v0))
    return Trajectory(t, xs, vs, energy_label)


@dataclass
class StepDataset:
    """Single-step pairs at spacing dt; inputs (x, v), targets (x', v')."""

    inputs: np.ndarray
    targets: np.ndarray
    split: str
    dt: float

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1, 2)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 2)
        if self.inputs.shape != self.targets.shape:
            raise ValueError("inputs and targets must have the same shape")

    def __len__(self):
        return len(self.inputs)


@dataclass
class DynamicsData:
    train: StepDataset
    val: StepDataset
    test: StepDataset
    trajectories: list[Trajectory]
    potential: LjPotential
    config: SimConfig

    @property
    def dt(self) -> float:
        return self.config.dt


def step_pairs(traj: Trajectory, stride: int) -> tuple[np.ndarray, np.ndarray]:
    x = traj.x[::stride]
    v = traj.v[::stride]
    inputs = np.column_stack([x[:-1], v[:-1]])
    targets = np.column_stack([x[1:], v[1:]])
    return inputs, targets


def generate_dataset(pot: LjPotential, cfg: SimConfig) -> DynamicsData:
    """Trajectories at each energy, started at rest on the inner turning point.

    The last energy in ``cfg.energies`` is held out as the test trajectory;
    the rest are pooled and split train/validation by a seeded shuffle.
    """
    if len(cfg.energies) < 2:
        raise ValueError("need at least two energies (the last is the test energy)")
    trajs = []
    for energy in cfg.energies:
        x0, _ = pot.turning_points(energy)
        trajs.append(integrate(pot, x0, 0.0, cfg.dt_fine, cfg.total_steps, cfg.gamma, energy))

    pool_in, pool_out = [], []
    for traj in trajs[:-1]:
        a, b = step_pairs(traj, cfg.stride)
        pool_in.append(a)
        pool_out.append(b)
    pool_in = np.concatenate(pool_in)
    pool_out = np.concatenate(pool_out)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(pool_in))
    n_val = int(round(cfg.val_fraction * len(pool_in)))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    test_in, test_out = step_pairs(trajs[-1], cfg.stride)
    return DynamicsData(
        train=StepDataset(pool_in[train_idx], pool_out[train_idx], "train", cfg.dt),
        val=StepDataset(pool_in[val_idx], pool_out[val_idx], "val", cfg.dt),
        test=StepDataset(test_in, test_out, "test", cfg.dt),
        trajectories=trajs,
        potential=pot,
        config=cfg,
    )


STEP_HEADER = ["x_t", "v_t", "x_next", "v_next", "split"]


def write_step_csv(path, datasets) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_HEADER)
        for ds in datasets:
            for (x, v), (xn, vn) in zip(ds.inputs, ds.targets):
                w.writerow([f"{x:.17g}", f"{v:.17g}", f"{xn:.17g}", f"{vn:.17g}", ds.split])


def read_step_csv(path, dt: float = float("nan")) -> dict[str, StepDataset]:
    rows: dict[str, list] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != STEP_HEADER:
            raise ValueError(f"unexpected step-dataset header {header}")
        for rec in reader:
            rows.setdefault(rec[4], []).append([float(v) for v in rec[:4]])
    out = {}
    for split, vals in rows.items():
        arr = np.array(vals)
        out[split] = StepDataset(arr[:, :2], arr[:, 2:], split, dt)
    return out


def save_data_dir(data: DynamicsData, out) -> list[Path]:
    """Write steps.csv, one CSV per trajectory and data.json describing them."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "steps.csv"]
    write_step_csv(written[0], [data.train, data.val, data.test])
    for i, traj in enumerate(data.trajectories):
        path = out / f"trajectory_{i}.csv"
        traj.to_csv(path)
        written.append(path)
    pot = data.potential
    meta = {"sim": asdict(data.config),
            "potential": {"epsilon": pot.epsilon, "sigma": pot.sigma, "mass": pot.mass},
            "trajectories": [{"file": f"trajectory_{i}.csv", "energy": t.energy_label}
                             for i, t in enumerate(data.trajectories)]}
    (out / "data.json").write_text(json.dumps(meta, indent=2))
    written.append(out / "data.json")
    return written


def load_data_dir(path) -> DynamicsData:
    path = Path(path)
    meta_path = path / "data.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found; run gen-data first")
    meta = json.loads(meta_path.read_text())
    cfg = SimConfig(**meta["sim"])
    pot = LjPotential(**meta["potential"])
    splits = read_step_csv(path / "steps.csv", cfg.dt)
    missing = {"train", "val", "test"} - set(splits)
    if missing:
        raise ValueError(f"steps.csv lacks splits {sorted(missing)}")
    trajs = [Trajectory.from_csv(path / t["file"], t["energy"]) for t in meta["trajectories"]]
    return DynamicsData(splits["train"], splits["val"], splits["test"], trajs, pot, cfg)
