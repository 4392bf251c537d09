"""Judge one-step maps as time integrators.

A step map is any callable ``(x, v) -> (x', v')`` on floats. Reports use the
analytic potential for energies, so they measure physical conservation, not
self-consistency with a learned force.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from pnn.dynamics import LjPotential, lj_force, reference_step


@dataclass
class RolloutReport:
    steps: int
    energy_series: list[float]
    max_drift: float
    final_state: tuple[float, float]
    xs: list[float] = field(default_factory=list)
    vs: list[float] = field(default_factory=list)
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RolloutReport:
        d = dict(d)
        d["final_state"] = tuple(d["final_state"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def write_energy_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "E_total"])
            for i, e in enumerate(self.energy_series):
                w.writerow([i, repr(float(e))])


@dataclass
class ReversibilityReport:
    forward_steps: int
    return_error_x: float
    return_error_v: float
    trace: list[tuple[int, float, float, str]] = field(default_factory=list)
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ReversibilityReport:
        d = dict(d)
        d["trace"] = [tuple(row) for row in d.get("trace", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def write_trace_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "x", "v", "phase"])
            for step, x, v, phase in self.trace:
                w.writerow([step, repr(float(x)), repr(float(v)), phase])


def _finite(x, v) -> bool:
    return math.isfinite(x) and math.isfinite(v)


def rollout(step_map, x0: float, v0: float, n: int, pot: LjPotential) -> RolloutReport:
    """Apply ``step_map`` n times, recording the true total energy after each step."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x, v = float(x0), float(v0)
    e0 = float(pot.total_energy(x, v))
    energies, xs, vs = [e0], [x], [v]
    diverged = False
    for _ in range(n):
        x, v = step_map(x, v)
        x, v = float(x), float(v)
        if not _finite(x, v) or x <= 0.0:
            diverged = True
            break
        with np.errstate(over="ignore", invalid="ignore"):
            e = float(pot.total_energy(x, v))
        if not math.isfinite(e):
            diverged = True
            break
        xs.append(x)
        vs.append(v)
        energies.append(e)
    drift = float(np.max(np.abs(np.array(energies) - e0))) if not diverged else math.inf
    return RolloutReport(len(energies) - 1, energies, drift, (x, v), xs, vs, diverged)


def reversibility(step_map, x0: float, v0: float, n: int = 1000,
                  keep_trace: bool = False) -> ReversibilityReport:
    """n forward applications, flip the velocity, n more applications.

    The final velocity is negated once more before comparing with v0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x, v = float(x0), float(v0)
    trace = [(0, x, v, "forward")] if keep_trace else []
    for i in range(1, n + 1):
        x, v = (float(c) for c in step_map(x, v))
        if keep_trace:
            trace.append((i, x, v, "forward"))
        if not _finite(x, v):
            return ReversibilityReport(n, math.inf, math.inf, trace, True)
    v = -v
    for i in range(1, n + 1):
        x, v = (float(c) for c in step_map(x, v))
        if keep_trace:
            trace.append((n + i, x, v, "reverse"))
        if not _finite(x, v):
            return ReversibilityReport(n, math.inf, math.inf, trace, True)
    return ReversibilityReport(n, abs(x - x0), abs(-v - v0), trace)


# --------------------------------------------------------------------------- analytic maps


def verlet_map(pot: LjPotential, dt: float, gamma: float = 0.0):
    """The reference velocity-Verlet step as a step map."""
    return lambda x, v: reference_step(pot, x, v, dt, gamma)


def position_verlet_map(pot: LjPotential, dt: float, force=None):
    f = force.force if force is not None else (lambda q: lj_force(pot, q))

    def step(x, v):
        F = float(f(x + 0.5 * dt * v))
        return x + dt * v + 0.5 * dt * dt * F / pot.mass, v + dt * F / pot.mass

    return step


def euler_map(pot: LjPotential, dt: float):
    def step(x, v):
        return x + dt * v, v + dt * lj_force(pot, x) / pot.mass

    return step


def identity_map(x, v):
    return x, v


def network_map(net):
    from pnn.network import forward

    return lambda x, v: forward(net, x, v)


# --------------------------------------------------------------------------- RMSE


def rmse_report(predict, datasets: dict) -> dict[str, dict[str, float]]:
    """Per-split, per-channel RMSE. ``predict`` maps an (n, 2) input array to (n, 2)."""
    out = {}
    for split, ds in datasets.items():
        if len(ds) == 0:
            raise ValueError(f"split {split!r} is empty")
        with np.errstate(all="ignore"):
            Y = np.asarray(predict(ds.inputs)).reshape(ds.targets.shape)
            err = Y - ds.targets
            out[split] = {"x": float(np.sqrt(np.mean(err[:, 0] ** 2))),
                          "v": float(np.sqrt(np.mean(err[:, 1] ** 2)))}
    return out


# --------------------------------------------------------------------------- baseline FFNN


@dataclass
class FfnnConfig:
    hidden: tuple[int, ...] = (32, 32)
    epochs: int = 10000
    seed: int = 0
    max_retries: int = 3


@dataclass
class Ffnn:
    """Fully-trainable dense tanh network with biases; inputs and outputs are
    standardised with the training-set statistics."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def predict(self, X) -> np.ndarray:
        h = (np.atleast_2d(np.asarray(X, dtype=float)) - self.in_mean) / self.in_std
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W.T + b)
        y = h @ self.weights[-1].T + self.biases[-1]
        return y * self.out_std + self.out_mean

    def step(self, x, v):
        y = self.predict([[x, v]])[0]
        return float(y[0]), float(y[1])

    def to_dict(self) -> dict:
        return {"weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases],
                "in_mean": self.in_mean.tolist(), "in_std": self.in_std.tolist(),
                "out_mean": self.out_mean.tolist(), "out_std": self.out_std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Ffnn:
        return cls([np.array(w) for w in d["weights"]], [np.array(b) for b in d["biases"]],
                   np.array(d["in_mean"]), np.array(d["in_std"]), np.array(d["out_mean"]),
                   np.array(d["out_std"]))


def _ffnn_shapes(sizes):
    return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


def _ffnn_unpack(theta, shapes):
    Ws, bs, i = [], [], 0
    for r, c in shapes:
        Ws.append(theta[i:i + r * c].reshape(r, c))
        i += r * c
        bs.append(theta[i:i + r])
        i += r
    return Ws, bs


def _ffnn_loss(theta, shapes, X, Y):
    Ws, bs = _ffnn_unpack(theta, shapes)
    acts = [X]
    h = X
    for W, b in zip(Ws[:-1], bs[:-1]):
        h = np.tanh(h @ W.T + b)
        acts.append(h)
    out = h @ Ws[-1].T + bs[-1]
    R = out - Y
    loss = float(np.mean(R * R))
    d = 2.0 * R / R.size
    grads = []
    for k in range(len(Ws) - 1, -1, -1):
        grads.append((d.T @ acts[k], d.sum(0)))
        if k > 0:
            d = (d @ Ws[k]) * (1.0 - acts[k] ** 2)
    flat = []
    for gW, gb in reversed(grads):
        flat.extend([gW.ravel(), gb])
    return loss, np.concatenate(flat)


def fit_ffnn(train, cfg: FfnnConfig | None = None) -> Ffnn:
    """Fit the baseline on the training split with L-BFGS; non-finite fits are reseeded."""
    cfg = cfg or FfnnConfig()
    X, Y = train.inputs, train.targets
    in_mean, in_std = X.mean(0), X.std(0)
    out_mean, out_std = Y.mean(0), Y.std(0)
    in_std[in_std == 0] = 1.0
    out_std[out_std == 0] = 1.0
    Xs, Ys = (X - in_mean) / in_std, (Y - out_mean) / out_std
    sizes = [X.shape[1], *cfg.hidden, Y.shape[1]]
    shapes = _ffnn_shapes(sizes)
    for attempt in range(cfg.max_retries + 1):
        rng = np.random.default_rng([cfg.seed, attempt])
        theta0 = np.concatenate([
            np.concatenate([rng.normal(0, 1 / math.sqrt(c), r * c), np.zeros(r)])
            for r, c in shapes])
        if cfg.epochs > 0:
            with np.errstate(all="ignore"):
                res = minimize(_ffnn_loss, theta0, args=(shapes, Xs, Ys), jac=True,
                               method="L-BFGS-B",
                               options={"maxiter": cfg.epochs, "maxfun": 2 * cfg.epochs,
                                        "ftol": 0.0, "gtol": 1e-14, "maxcor": 30})
            theta = res.x
        else:
            theta = theta0
        if np.all(np.isfinite(theta)):
            Ws, bs = _ffnn_unpack(theta, shapes)
            return Ffnn([w.copy() for w in Ws], [b.copy() for b in bs],
                        in_mean, in_std, out_mean, out_std)
    raise RuntimeError("baseline training diverged on every attempt")


@dataclass
class BaselineReport:
    network: Ffnn
    rmse: dict
    rollout: RolloutReport
    reversibility: ReversibilityReport

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "rmse": self.rmse,
                "rollout": self.rollout.to_dict(),
                "reversibility": self.reversibility.to_dict()}


def train_baseline_ffnn(data, cfg: FfnnConfig | None = None, n_steps: int = 1000,
                        x0: float | None = None, v0: float = 0.0) -> BaselineReport:
    """Fit the baseline and produce RMSE, rollout and reversibility reports.

    The rollout starts from the test-energy inner turning point by default.
    """
    net = fit_ffnn(data.train, cfg)
    splits = {"train": data.train, "val": data.val, "test": data.test}
    if x0 is None:
        x0 = float(data.trajectories[-1].x[0])
        v0 = float(data.trajectories[-1].v[0])
    return BaselineReport(
        net,
        rmse_report(net.predict, splits),
        rollout(net.step, x0, v0, n_steps, data.potential),
        reversibility(net.step, x0, v0, n_steps),
    )
