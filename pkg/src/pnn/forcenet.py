"""Force models that plug into the dynamics topology's force tap.

Anything with vectorised ``force(q)`` and ``dforce(q)`` methods works. The
pre-trained ``ForceSubnet`` is the learned stand-in; ``ExactForce`` wraps the
analytic LJ force and is used as a stub in tests.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from pnn.dynamics import LjPotential

log = logging.getLogger(__name__)


class ExactForce:
    def __init__(self, pot: LjPotential | None = None):
        self.pot = pot or LjPotential()

    def force(self, q):
        q = np.asarray(q, dtype=float)
        p = self.pot
        with np.errstate(all="ignore"):
            sr6 = (p.sigma / q) ** 6
            f = 24.0 * p.epsilon * (2.0 * sr6 * sr6 - sr6) / q
        return np.where(q > 0.0, f, np.nan)

    def dforce(self, q):
        q = np.asarray(q, dtype=float)
        p = self.pot
        with np.errstate(all="ignore"):
            sr6 = (p.sigma / q) ** 6
            df = 24.0 * p.epsilon * (-26.0 * sr6 * sr6 + 7.0 * sr6) / (q * q)
        return np.where(q > 0.0, df, np.nan)


class ZeroForce:
    def force(self, q):
        return np.zeros_like(np.asarray(q, dtype=float))

    def dforce(self, q):
        return np.zeros_like(np.asarray(q, dtype=float))


@dataclass
class ForceSubnet:
    """Dense 1 -> H -> H -> 1 tanh network on a standardised position."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: float
    x_shift: float
    x_scale: float
    f_scale: float
    frozen: bool = True
    fit_rmse: float = math.nan
    info: dict = field(default_factory=dict)

    def _hidden(self, q):
        u = (np.asarray(q, dtype=float).reshape(-1, 1) - self.x_shift) / self.x_scale
        a1 = np.tanh(u * self.W1 + self.b1)
        a2 = np.tanh(a1 @ self.W2.T + self.b2)
        return u, a1, a2

    def force(self, q):
        shape = np.shape(q)
        _, _, a2 = self._hidden(q)
        return ((a2 @ self.W3 + self.b3) * self.f_scale).reshape(shape)

    def dforce(self, q):
        return self.force_and_grad(q)[1]

    def force_and_grad(self, q):
        shape = np.shape(q)
        _, a1, a2 = self._hidden(q)
        f = (a2 @ self.W3 + self.b3) * self.f_scale
        d1 = (1.0 - a1**2) * self.W1  # da1/du
        d2 = (1.0 - a2**2) * (d1 @ self.W2.T)
        return f.reshape(shape), ((d2 @ self.W3) * self.f_scale / self.x_scale).reshape(shape)

    def params(self) -> np.ndarray:
        return np.concatenate([self.W1, self.b1, self.W2.ravel(), self.b2, self.W3, [self.b3]])

    def to_dict(self) -> dict:
        return {
            "W1": self.W1.tolist(), "b1": self.b1.tolist(), "W2": self.W2.tolist(),
            "b2": self.b2.tolist(), "W3": self.W3.tolist(), "b3": float(self.b3),
            "x_shift": self.x_shift, "x_scale": self.x_scale, "f_scale": self.f_scale,
            "frozen": self.frozen, "fit_rmse": self.fit_rmse, "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ForceSubnet:
        return cls(np.array(d["W1"]), np.array(d["b1"]), np.array(d["W2"]), np.array(d["b2"]),
                   np.array(d["W3"]), float(d["b3"]), d["x_shift"], d["x_scale"], d["f_scale"],
                   d.get("frozen", True), d.get("fit_rmse", math.nan), d.get("info", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> ForceSubnet:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PretrainConfig:
    hidden: int = 20
    epochs: int = 2000
    seed: int = 0
    min_samples: int = 10
    max_retries: int = 3
    divergence_rmse: float = 1e3


def _unpack(theta, H):
    i = 0
    W1 = theta[i:i + H]; i += H
    b1 = theta[i:i + H]; i += H
    W2 = theta[i:i + H * H].reshape(H, H); i += H * H
    b2 = theta[i:i + H]; i += H
    W3 = theta[i:i + H]; i += H
    return W1, b1, W2, b2, W3, theta[i]


def _loss_grad(theta, u, y, H):
    W1, b1, W2, b2, W3, b3 = _unpack(theta, H)
    a1 = np.tanh(np.outer(u, W1) + b1)
    a2 = np.tanh(a1 @ W2.T + b2)
    r = a2 @ W3 + b3 - y
    n = len(u)
    loss = float(r @ r) / n
    dr = 2.0 * r / n
    dW3 = a2.T @ dr
    db3 = dr.sum()
    dz2 = np.outer(dr, W3) * (1.0 - a2**2)
    dW2 = dz2.T @ a1
    db2 = dz2.sum(0)
    dz1 = (dz2 @ W2) * (1.0 - a1**2)
    dW1 = dz1.T @ u
    db1 = dz1.sum(0)
    return loss, np.concatenate([dW1, db1, dW2.ravel(), db2, dW3, [db3]])


def pretrain_force_subnet(x, f, cfg: PretrainConfig | None = None) -> ForceSubnet:
    """Fit and freeze a force sub-net on (position, force) samples.

    Inputs and targets are standardised internally; weights are fitted with
    L-BFGS for ``cfg.epochs`` iterations. A non-finite or exploding fit is
    retried with a fresh seed up to ``cfg.max_retries`` times.
    """
    cfg = cfg or PretrainConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    f = np.asarray(f, dtype=float).reshape(-1)
    if len(x) != len(f):
        raise ValueError("x and f must have the same length")
    if len(x) < cfg.min_samples:
        raise ValueError(f"insufficient coverage: {len(x)} samples < minimum {cfg.min_samples}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(f))):
        raise ValueError("samples must be finite")

    x_shift = float(0.5 * (x.max() + x.min()))
    x_scale = float(0.5 * (x.max() - x.min())) or 1.0
    f_scale = float(np.std(f)) or 1.0
    u = (x - x_shift) / x_scale
    y = f / f_scale
    H = cfg.hidden
    n_par = 3 * H + H * H + H + 1

    for attempt in range(cfg.max_retries + 1):
        rng = np.random.default_rng([cfg.seed, attempt])
        theta0 = np.concatenate([
            rng.normal(0.0, 1.0, H), rng.normal(0.0, 1.0, H),
            rng.normal(0.0, 1.0 / math.sqrt(H), H * H), np.zeros(H),
            rng.normal(0.0, 1.0 / math.sqrt(H), H), [0.0],
        ])
        assert len(theta0) == n_par
        with np.errstate(all="ignore"):
            res = minimize(_loss_grad, theta0, args=(u, y, H), jac=True, method="L-BFGS-B",
                           options={"maxiter": cfg.epochs, "maxfun": 2 * cfg.epochs,
                                    "ftol": 0.0, "gtol": 1e-14, "maxcor": 30})
        W1, b1, W2, b2, W3, b3 = _unpack(res.x, H)
        net = ForceSubnet(W1.copy(), b1.copy(), W2.copy(), b2.copy(), W3.copy(), float(b3),
                          x_shift, x_scale, f_scale)
        pred = net.force(x)
        rmse = float(np.sqrt(np.mean((pred - f) ** 2)))
        if math.isfinite(rmse) and rmse < cfg.divergence_rmse * f_scale:
            net.fit_rmse = rmse
            net.info = {"samples": int(len(x)), "iterations": int(res.nit), "attempt": attempt,
                        "x_range": [float(x.min()), float(x.max())]}
            return net
        log.warning("force sub-net fit diverged (attempt %d, rmse=%s); reseeding", attempt, rmse)
    raise RuntimeError(f"force sub-net pretraining failed after {cfg.max_retries + 1} attempts")


def lj_force_samples(pot: LjPotential, lo: float, hi: float, n: int = 2000):
    x = np.linspace(lo, hi, n)
    return x, pot.force(x)
