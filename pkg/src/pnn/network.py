"""Tiny mixed fixed/trainable networks built from a discrete genome.

Two fixed topologies are supported:

* ``DynamicsTopology``: (x, v) -> H1(2) -> force tap -> H2(2) -> H3(2, reads
  H2 and F(q)) -> (x', v'); 20 weight slots, 6 activation slots, no biases.
* ``MeltTopology``: (x1, x2, x3) -> H(3) -> y with an output bias;
  13 weight slots, 3 activation slots.

Fixed weights are bound to constants (some of them multiples of dt) and never
touched by training; Trainable weights are fitted with backpropagation.
"""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize


class Act(str, enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    TANH = "tanh"
    ELU = "elu"
    RECIPROCAL = "reciprocal"
    SQUARE = "square"


# Pre-activations with smaller magnitude make Reciprocal non-finite on purpose.
RECIPROCAL_GUARD = 1e-12


def activate(act: Act, z: np.ndarray) -> np.ndarray:
    if act is Act.LINEAR:
        return z
    if act is Act.RELU:
        return np.maximum(z, 0.0)
    if act is Act.TANH:
        return np.tanh(z)
    if act is Act.ELU:
        return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))
    if act is Act.SQUARE:
        return z * z
    if act is Act.RECIPROCAL:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.abs(z) < RECIPROCAL_GUARD, np.inf, 1.0 / z)
    raise ValueError(f"unknown activation {act!r}")


def activate_grad(act: Act, z: np.ndarray) -> np.ndarray:
    if act is Act.LINEAR:
        return np.ones_like(z)
    if act is Act.RELU:
        return (z > 0.0).astype(float)
    if act is Act.TANH:
        return 1.0 - np.tanh(z) ** 2
    if act is Act.ELU:
        return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))
    if act is Act.SQUARE:
        return 2.0 * z
    if act is Act.RECIPROCAL:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.abs(z) < RECIPROCAL_GUARD, np.inf, -1.0 / (z * z))
    raise ValueError(f"unknown activation {act!r}")


TRAINABLE = "trainable"

# Fixed-allele tag -> (multiplier, power of dt)
FIXED_TAGS = {
    "0": (0.0, 0),
    "half": (0.5, 0),
    "1": (1.0, 0),
    "2": (2.0, 0),
    "dt_half": (0.5, 1),
    "dt": (1.0, 1),
    "2dt": (2.0, 1),
}


def fixed_value(tag: str, dt: float) -> float:
    mult, power = FIXED_TAGS[tag]
    return mult * dt**power


def weight_tag_score(tag: str) -> int:
    if tag == TRAINABLE:
        return 2
    return 0 if tag == "0" else 1


@dataclass
class WeightGene:
    tag: str
    value: float | None = None

    @property
    def trainable(self) -> bool:
        return self.tag == TRAINABLE

    @property
    def score(self) -> int:
        return weight_tag_score(self.tag)

    def resolve(self, dt: float) -> float:
        if self.trainable:
            return float(self.value) if self.value is not None else 0.0
        return fixed_value(self.tag, dt)


class Topology:
    name: str
    n_weights: int
    n_activations: int
    n_inputs: int
    n_outputs: int
    weight_alphabet: tuple[str, ...]
    activation_alphabet: tuple[Act, ...]
    activation_scores: dict[Act, int]
    dt: float = 1.0

    def forward(self, w, acts, X, force=None, keep=False):
        raise NotImplementedError

    def backward(self, w, acts, cache, dY, force=None):
        raise NotImplementedError


class DynamicsTopology(Topology):
    """Weight slot layout (row-major, ``[target, source]``):

    0-3   inputs (x, v) -> H1
    4-5   H1 -> force tap q
    6-9   H1 -> H2
    10-15 (H2, F) -> H3
    16-19 H3 -> outputs (x', v')

    Activation slots: 0-1 H1, 2-3 H2, 4-5 H3. Outputs are linear.
    """

    name = "dynamics"
    n_weights = 20
    n_activations = 6
    n_inputs = 2
    n_outputs = 2
    weight_alphabet = ("0", "half", "1", "2", "dt_half", "dt", "2dt", TRAINABLE)
    activation_alphabet = (Act.LINEAR, Act.RELU, Act.TANH, Act.ELU)
    activation_scores = {Act.LINEAR: 0, Act.RELU: 1, Act.TANH: 2, Act.ELU: 3}

    def __init__(self, dt: float):
        if not dt > 0.0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)

    def __repr__(self):
        return f"DynamicsTopology(dt={self.dt})"

    def __eq__(self, other):
        return isinstance(other, DynamicsTopology) and other.dt == self.dt

    @staticmethod
    def unpack(w):
        return (w[0:4].reshape(2, 2), w[4:6], w[6:10].reshape(2, 2),
                w[10:16].reshape(2, 3), w[16:20].reshape(2, 2))

    def forward(self, w, acts, X, force=None, keep=False):
        W1, a, W2, W3, W4 = self.unpack(w)
        z1 = X @ W1.T
        h1 = activate(acts[0], z1[:, 0]), activate(acts[1], z1[:, 1])
        h1 = np.column_stack(h1)
        q = h1 @ a
        uses_force = force is not None and np.any(W3[:, 2] != 0.0)
        F = force.force(q) if uses_force else np.zeros_like(q)
        z2 = h1 @ W2.T
        h2 = np.column_stack([activate(acts[2], z2[:, 0]), activate(acts[3], z2[:, 1])])
        u3 = np.column_stack([h2, F])
        z3 = u3 @ W3.T
        h3 = np.column_stack([activate(acts[4], z3[:, 0]), activate(acts[5], z3[:, 1])])
        Y = h3 @ W4.T
        if keep:
            return Y, (X, z1, h1, q, z2, u3, z3, h3)
        return Y

    def backward(self, w, acts, cache, dY, force=None):
        W1, a, W2, W3, W4 = self.unpack(w)
        X, z1, h1, q, z2, u3, z3, h3 = cache
        dW4 = dY.T @ h3
        dh3 = dY @ W4
        dz3 = dh3 * np.column_stack([activate_grad(acts[4], z3[:, 0]),
                                     activate_grad(acts[5], z3[:, 1])])
        dW3 = dz3.T @ u3
        du3 = dz3 @ W3
        dF = du3[:, 2]
        uses_force = force is not None and np.any(W3[:, 2] != 0.0)
        dq = dF * force.dforce(q) if uses_force else np.zeros_like(q)
        da = h1.T @ dq
        dz2 = du3[:, :2] * np.column_stack([activate_grad(acts[2], z2[:, 0]),
                                            activate_grad(acts[3], z2[:, 1])])
        dW2 = dz2.T @ h1
        dh1 = dz2 @ W2 + np.outer(dq, a)
        dz1 = dh1 * np.column_stack([activate_grad(acts[0], z1[:, 0]),
                                     activate_grad(acts[1], z1[:, 1])])
        dW1 = dz1.T @ X
        return np.concatenate([dW1.ravel(), da, dW2.ravel(), dW3.ravel(), dW4.ravel()])


class MeltTopology(Topology):
    """Weight slots: 0-8 inputs -> hidden ``[neuron, input]``, 9-11 hidden -> y,
    12 output bias. Activation slots 0-2, one per hidden neuron."""

    name = "melting"
    n_weights = 13
    n_activations = 3
    n_inputs = 3
    n_outputs = 1
    weight_alphabet = ("0", "1", TRAINABLE)
    activation_alphabet = (Act.LINEAR, Act.RECIPROCAL, Act.SQUARE)
    activation_scores = {Act.LINEAR: 0, Act.RECIPROCAL: 1, Act.SQUARE: 1}
    dt = 1.0

    def __repr__(self):
        return "MeltTopology()"

    def __eq__(self, other):
        return isinstance(other, MeltTopology)

    def forward(self, w, acts, X, force=None, keep=False):
        L = w[0:9].reshape(3, 3)
        z = X @ L.T
        with np.errstate(invalid="ignore", over="ignore"):
            h = np.column_stack([activate(acts[k], z[:, k]) for k in range(3)])
            Y = (h @ w[9:12] + w[12])[:, None]
        if keep:
            return Y, (X, z, h)
        return Y

    def backward(self, w, acts, cache, dY, force=None):
        X, z, h = cache
        d = dY[:, 0]
        with np.errstate(invalid="ignore", over="ignore"):
            dc = h.T @ d
            db = d.sum()
            dz = np.outer(d, w[9:12]) * np.column_stack(
                [activate_grad(acts[k], z[:, k]) for k in range(3)])
            dL = dz.T @ X
        return np.concatenate([dL.ravel(), dc, [db]])


def topology_from_name(name: str, dt: float | None = None) -> Topology:
    if name == "dynamics":
        return DynamicsTopology(dt)
    if name == "melting":
        return MeltTopology()
    raise ValueError(f"unknown topology {name!r}")


@dataclass
class PnnNetwork:
    topology: Topology
    weight_genes: list[WeightGene]
    activation_genes: list[Act]
    force: object | None = None
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        top = self.topology
        if len(self.weight_genes) != top.n_weights:
            raise ValueError(f"expected {top.n_weights} weight genes, got {len(self.weight_genes)}")
        if len(self.activation_genes) != top.n_activations:
            raise ValueError(
                f"expected {top.n_activations} activation genes, got {len(self.activation_genes)}")

    def weights(self) -> np.ndarray:
        return np.array([g.resolve(self.topology.dt) for g in self.weight_genes])

    @property
    def trainable_idx(self) -> np.ndarray:
        return np.array([i for i, g in enumerate(self.weight_genes) if g.trainable], dtype=int)

    def trained_values(self) -> np.ndarray:
        return self.weights()[self.trainable_idx]

    def set_trained_values(self, values) -> None:
        for i, val in zip(self.trainable_idx, values):
            self.weight_genes[i] = WeightGene(TRAINABLE, float(val))

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        with np.errstate(all="ignore"):
            return self.topology.forward(self.weights(), self.activation_genes, X, self.force)

    def __call__(self, x, v):
        return forward(self, x, v)

    def activation_score(self) -> int:
        return sum(self.topology.activation_scores[a] ** 2 for a in self.activation_genes)

    def weight_score(self) -> int:
        return sum(g.score for g in self.weight_genes)

    def copy(self) -> PnnNetwork:
        return PnnNetwork(self.topology, [WeightGene(g.tag, g.value) for g in self.weight_genes],
                          list(self.activation_genes), self.force, copy.deepcopy(self.metrics))


def forward(net: PnnNetwork, x, v):
    """One application of a dynamics network: (x, v) -> (x', v')."""
    scalar = np.ndim(x) == 0 and np.ndim(v) == 0
    X = np.column_stack([np.atleast_1d(np.asarray(x, dtype=float)),
                         np.atleast_1d(np.asarray(v, dtype=float))])
    Y = net.predict(X)
    if scalar:
        return float(Y[0, 0]), float(Y[0, 1])
    return Y[:, 0], Y[:, 1]


def build_network(genome, topology: Topology, force=None, trained_values=None,
                  seed: int = 0, init_scale: float = 0.1) -> PnnNetwork:
    """Bind a genome's alleles to a concrete network.

    Trainable genes get ``trained_values`` when given, otherwise a uniform
    draw in [-init_scale, init_scale] from ``seed``.
    """
    w_alleles = list(genome.weight_alleles)
    a_alleles = list(genome.activation_alleles)
    if len(w_alleles) != topology.n_weights:
        slot = min(len(w_alleles), topology.n_weights)
        raise ValueError(
            f"weight gene count mismatch at slot {slot}: "
            f"topology {topology.name} needs {topology.n_weights}, genome has {len(w_alleles)}")
    if len(a_alleles) != topology.n_activations:
        slot = min(len(a_alleles), topology.n_activations)
        raise ValueError(
            f"activation gene count mismatch at slot {slot}: "
            f"topology {topology.name} needs {topology.n_activations}, genome has {len(a_alleles)}")
    for i, al in enumerate(w_alleles):
        if not 0 <= al < len(topology.weight_alphabet):
            raise ValueError(f"weight allele {al} out of range at slot {i}")
    for i, al in enumerate(a_alleles):
        if not 0 <= al < len(topology.activation_alphabet):
            raise ValueError(f"activation allele {al} out of range at slot {i}")

    tags = [topology.weight_alphabet[al] for al in w_alleles]
    n_train = sum(t == TRAINABLE for t in tags)
    if trained_values is None:
        rng = np.random.default_rng(seed)
        values = iter(rng.uniform(-init_scale, init_scale, size=n_train))
    else:
        if len(trained_values) != n_train:
            raise ValueError(f"expected {n_train} trained values, got {len(trained_values)}")
        values = iter(trained_values)
    genes = [WeightGene(t, float(next(values))) if t == TRAINABLE else WeightGene(t) for t in tags]
    acts = [topology.activation_alphabet[al] for al in a_alleles]
    return PnnNetwork(topology, genes, acts, force)


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    optimizer: str = "lbfgs"  # or "adam"
    max_iter: int = 100  # L-BFGS iterations
    lr: float = 1e-3
    epochs: int = 500  # Adam epochs
    patience: int = 50
    min_rel_improvement: float = 1e-9
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class _CachedForce:
    """Remembers recent force evaluations; during training the tap input is
    often unchanged between epochs."""

    def __init__(self, force, size: int = 4):
        self.inner = force
        self.size = size
        self._f: list = []

    def _lookup(self, store, q, fn):
        for key, val in store:
            if key.shape == q.shape and np.array_equal(key, q):
                return val
        val = fn(q)
        store.insert(0, (q.copy(), val))
        del store[self.size:]
        return val

    def _both(self, q):
        if hasattr(self.inner, "force_and_grad"):
            return self.inner.force_and_grad(q)
        return self.inner.force(q), self.inner.dforce(q)

    def force(self, q):
        return self._lookup(self._f, q, self._both)[0]

    def dforce(self, q):
        return self._lookup(self._f, q, self._both)[1]


def mse(net: PnnNetwork, data) -> float:
    Y = net.predict(data.inputs)
    with np.errstate(all="ignore"):
        err = float(np.mean((Y - data.targets.reshape(Y.shape)) ** 2))
    return err if math.isfinite(err) else math.inf


def loss_and_grad(net: PnnNetwork, X, T, w=None):
    """Mean squared error over all output entries and its gradient w.r.t. every weight slot."""
    top = net.topology
    if w is None:
        w = net.weights()
    with np.errstate(all="ignore"):
        Y, cache = top.forward(w, net.activation_genes, X, net.force, keep=True)
        R = Y - T.reshape(Y.shape)
        loss = float(np.mean(R * R))
        dY = 2.0 * R / R.size
        grad = top.backward(w, net.activation_genes, cache, dY, net.force)
    return loss, grad


def train(net: PnnNetwork, train_data, val_data=None, cfg: TrainConfig | None = None):
    """Fit the Trainable genes of a copy of ``net``.

    Returns ``(trained_net, train_mse, val_mse)``. Divergence is not an
    error: the copy is returned with infinite losses and
    ``metrics["diverged"] = True`` so that a GA can still rank it.
    """
    cfg = cfg or TrainConfig()
    out = net.copy()
    original_force = out.force
    if original_force is not None:
        out.force = _CachedForce(original_force)
    try:
        return _train(out, train_data, val_data, cfg)
    finally:
        out.force = original_force


def _train(out, train_data, val_data, cfg):
    val_data = val_data if val_data is not None else train_data
    idx = out.trainable_idx
    budget = cfg.max_iter if cfg.optimizer == "lbfgs" else cfg.epochs
    if len(idx) == 0 or budget <= 0:
        tr, va = mse(out, train_data), mse(out, val_data)
        out.metrics["diverged"] = not (math.isfinite(tr) and math.isfinite(va))
        return out, tr, va

    X, T = train_data.inputs, train_data.targets
    if cfg.optimizer == "adam":
        best = _train_adam(out, X, T, val_data, idx, cfg)
    elif cfg.optimizer == "lbfgs":
        best = _train_lbfgs(out, X, T, idx, cfg)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")

    if best is None:
        out.metrics["diverged"] = True
        return out, math.inf, math.inf
    out.set_trained_values(best)
    tr, va = mse(out, train_data), mse(out, val_data)
    out.metrics["diverged"] = not (math.isfinite(tr) and math.isfinite(va))
    if out.metrics["diverged"]:
        return out, math.inf, math.inf
    return out, tr, va


def _train_adam(net, X, T, val_data, idx, cfg):
    w = net.weights()
    m = np.zeros(len(idx))
    s = np.zeros(len(idx))
    best_w, best_val, stall = w[idx].copy(), math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        loss, grad = loss_and_grad(net, X, T, w)
        g = grad[idx]
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            return None if not math.isfinite(best_val) else best_w
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        s = cfg.beta2 * s + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**epoch)
        s_hat = s / (1 - cfg.beta2**epoch)
        w[idx] -= cfg.lr * m_hat / (np.sqrt(s_hat) + cfg.eps)
        net.set_trained_values(w[idx])
        val = mse(net, val_data)
        if not math.isfinite(val):
            return None if not math.isfinite(best_val) else best_w
        if val < best_val * (1.0 - cfg.min_rel_improvement):
            best_w, best_val, stall = w[idx].copy(), val, 0
        else:
            stall += 1
            if val < best_val:
                best_w, best_val = w[idx].copy(), val
            if stall >= cfg.patience:
                break
    return best_w


def _train_lbfgs(net, X, T, idx, cfg):
    w = net.weights()

    def fun(theta):
        w[idx] = theta
        loss, grad = loss_and_grad(net, X, T, w)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad[idx])):
            return 1e300, np.zeros(len(idx))
        return loss, grad[idx]

    x0 = w[idx].copy()
    res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.max_iter, "ftol": 0.0, "gtol": 0.0, "maxcor": 20})
    theta = res.x
    loss, _ = fun(theta)
    if loss >= 1e300:
        return None
    return theta


def gradient_check(net: PnnNetwork, X, T, steps=(1e-2, 1e-3, 1e-4, 1e-5)) -> float:
    """Largest relative gap between backprop and finite-difference gradients
    over the Trainable genes.

    Each gene uses a fourth-order central stencil at several step sizes and
    keeps the closest estimate: large steps lose to curvature, small ones to
    round-off when the loss dwarfs its gradient.  A wrong backward pass is
    off at every step size, so this does not hide real errors.  Components far
    below the largest one (saturated tanh units, say) are compared against
    1e-6 of that largest component rather than against themselves, and
    components below 1e-7 of the loss itself, which finite differences cannot
    resolve, against that level.
    """
    idx = net.trainable_idx
    if len(idx) == 0:
        raise ValueError("network has no trainable genes to check")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = np.asarray(T, dtype=float)
    w = net.weights()
    loss, grad = loss_and_grad(net, X, T, w)

    def loss_at(i, step):
        wi = w.copy()
        wi[i] += step
        return loss_and_grad(net, X, T, wi)[0]

    floor = max(1e-6 * float(np.max(np.abs(grad[idx]))), 1e-7 * abs(loss), 1e-12)
    worst = 0.0
    for i in idx:
        best = np.inf
        for h in steps:
            fd = (8 * (loss_at(i, h) - loss_at(i, -h))
                  - (loss_at(i, 2 * h) - loss_at(i, -2 * h))) / (12 * h)
            denom = max(abs(fd), abs(grad[i]), floor)
            best = min(best, abs(fd - grad[i]) / denom)
        worst = max(worst, best)
    return worst


# --------------------------------------------------------------------------- serialization


def network_to_dict(net: PnnNetwork, force_subnet_path: str | None = None) -> dict:
    genes = []
    for g in net.weight_genes:
        if g.trainable:
            genes.append({"allele": "trainable", "value": g.value})
        else:
            genes.append({"allele": "fixed", "value_tag": g.tag})
    return {
        "topology": net.topology.name,
        "dt": net.topology.dt,
        "weight_genes": genes,
        "activation_genes": [a.value for a in net.activation_genes],
        "force_subnet_path": force_subnet_path,
        "metrics": net.metrics,
    }


def network_from_dict(doc: dict, force=None, dt: float | None = None) -> PnnNetwork:
    """Rebuild a network; passing ``dt`` rebinds the dt-valued Fixed alleles."""
    top = topology_from_name(doc["topology"], dt if dt is not None else doc.get("dt"))
    genes = []
    for g in doc["weight_genes"]:
        if g["allele"] == "trainable":
            genes.append(WeightGene(TRAINABLE, float(g["value"])))
        elif g["allele"] == "fixed":
            if g["value_tag"] not in FIXED_TAGS or g["value_tag"] not in top.weight_alphabet:
                raise ValueError(f"unknown fixed value tag {g['value_tag']!r}")
            genes.append(WeightGene(g["value_tag"]))
        else:
            raise ValueError(f"unknown allele kind {g['allele']!r}")
    acts = [Act(a) for a in doc["activation_genes"]]
    if force is None and doc.get("force_subnet_path"):
        from pnn.forcenet import ForceSubnet

        force = ForceSubnet.load(doc["force_subnet_path"])
    return PnnNetwork(top, genes, acts, force, dict(doc.get("metrics", {})))


def save_network(net: PnnNetwork, path, force_subnet_path: str | None = None) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net, force_subnet_path), indent=2))


def load_network(path, force=None, dt: float | None = None) -> PnnNetwork:
    return network_from_dict(json.loads(Path(path).read_text()), force, dt)


def genome_of(net: PnnNetwork):
    from pnn.evolve import Genome

    top = net.topology
    return Genome(tuple(top.weight_alphabet.index(g.tag) for g in net.weight_genes),
                  tuple(top.activation_alphabet.index(a) for a in net.activation_genes))
