"""Closed-form update equations from all-linear dynamics networks.

With every activation linear, the dynamics topology collapses to

    x' = c_xx x + c_xv v + c_xF F(q)
    v' = c_vx x + c_vv v + c_vF F(q),   q = q_x x + q_v v

which can be compared against known integrators and printed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from pnn.network import Act, DynamicsTopology, PnnNetwork

COEFFS = ("c_xx", "c_xv", "c_xF", "c_vx", "c_vv", "c_vF", "q_x", "q_v")


class ExtractionError(ValueError):
    """Raised when a network cannot be reduced to the affine normal form."""


@dataclass(frozen=True)
class SymbolicStep:
    c_xx: float
    c_xv: float
    c_xF: float
    c_vx: float
    c_vv: float
    c_vF: float
    q_x: float
    q_v: float

    @property
    def uses_force(self) -> bool:
        return self.c_xF != 0.0 or self.c_vF != 0.0

    def evaluate(self, x, v, force=None):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.uses_force:
            F = force.force(self.q_x * x + self.q_v * v)
        else:
            F = np.zeros_like(x)
        return (self.c_xx * x + self.c_xv * v + self.c_xF * F,
                self.c_vx * x + self.c_vv * v + self.c_vF * F)

    def to_dict(self) -> dict:
        return asdict(self)


def extract_symbolic(net: PnnNetwork) -> SymbolicStep:
    if not isinstance(net.topology, DynamicsTopology):
        raise ExtractionError("symbolic extraction is defined for the dynamics topology only")
    bad = [i for i, a in enumerate(net.activation_genes) if a is not Act.LINEAR]
    if bad:
        raise ExtractionError(f"extraction needs all-linear activations; slots {bad} are not")
    W1, a, W2, W3, W4 = DynamicsTopology.unpack(net.weights())
    state = W4 @ W3[:, :2] @ W2 @ W1
    force_col = W4 @ W3[:, 2]
    q = a @ W1
    return SymbolicStep(state[0, 0], state[0, 1], force_col[0], state[1, 0], state[1, 1],
                        force_col[1], q[0], q[1])


# --------------------------------------------------------------------------- templates


@dataclass
class TemplateMatch:
    template: str
    deviations: dict[str, float]
    max_deviation: float
    candidates: dict[str, float]


def unit_scales(dt: float, m: float) -> dict[str, float]:
    """Natural magnitude of each coefficient, used when the ideal value is 0."""
    return {"c_xx": 1.0, "c_xv": dt, "c_xF": dt * dt / m, "c_vx": 1.0 / dt, "c_vv": 1.0,
            "c_vF": dt / m, "q_x": 1.0, "q_v": dt}


def templates(dt: float, m: float = 1.0, gamma: float = 0.0) -> dict[str, dict[str, float]]:
    pv = {"c_xx": 1.0, "c_xv": dt, "c_xF": dt * dt / (2 * m), "c_vx": 0.0, "c_vv": 1.0,
          "c_vF": dt / m, "q_x": 1.0, "q_v": dt / 2}
    out = {
        "Identity": {"c_xx": 1.0, "c_xv": 0.0, "c_xF": 0.0, "c_vx": 0.0, "c_vv": 1.0,
                     "c_vF": 0.0},
        "PositionVerlet": pv,
        "EulerExplicit": {"c_xx": 1.0, "c_xv": dt, "c_xF": 0.0, "c_vx": 0.0, "c_vv": 1.0,
                          "c_vF": dt / m, "q_x": 1.0, "q_v": 0.0},
    }
    if gamma:
        # listed first so that it wins ties against the undamped form
        damped = {**pv, "c_xv": dt - gamma * dt * dt / (2 * m), "c_vv": 1.0 - gamma * dt / m}
        out = {"PositionVerletDamped": damped, **out}
    return out


def _deviations(sym: SymbolicStep, ideal: dict[str, float], scales: dict[str, float]):
    dev = {}
    for name, target in ideal.items():
        ref = abs(target) if target != 0.0 else scales[name]
        dev[name] = abs(getattr(sym, name) - target) / ref
    return dev


def match_template(sym: SymbolicStep, dt: float, m: float = 1.0, tol: float = 0.01,
                   gamma: float = 0.0) -> TemplateMatch:
    """Nearest integrator template under the largest per-coefficient relative deviation.

    Coefficients whose ideal value is zero are measured against their natural
    scale (dt, dt^2/m, ...). Templates without a force term ignore q.
    """
    scales = unit_scales(dt, m)
    best_name, best_dev, best_max = "Unknown", {}, np.inf
    candidates = {}
    for name, ideal in templates(dt, m, gamma).items():
        dev = _deviations(sym, ideal, scales)
        worst = max(dev.values())
        candidates[name] = worst
        if worst < best_max:
            best_name, best_dev, best_max = name, dev, worst
    if best_max > tol:
        return TemplateMatch("Unknown", best_dev, float(best_max), candidates)
    return TemplateMatch(best_name, best_dev, float(best_max), candidates)


# --------------------------------------------------------------------------- rendering


def factored_multipliers(sym: SymbolicStep, dt: float, m: float = 1.0,
                         gamma: float = 0.0) -> dict[str, tuple[float, float, str]]:
    """Each coefficient as ``(multiplier, unit_value, unit_text)``; multiplier *
    unit_value reproduces the raw coefficient."""
    xv_unit = dt - gamma * dt * dt / (2 * m)
    vv_unit = 1.0 - gamma * dt / m
    units = {
        "c_xx": (1.0, "x(t)"),
        "c_xv": (xv_unit, "v(t)(Δt - γΔt²/2m)" if gamma else "v(t)Δt"),
        "c_xF": (dt * dt / (2 * m), "1/2 F Δt²/m"),
        "c_vx": (1.0 / dt, "x(t)/Δt"),
        "c_vv": (vv_unit, "(1 - γΔt/m) v(t)" if gamma else "v(t)"),
        "c_vF": (dt / m, "F Δt/m"),
        "q_x": (1.0, "x(t)"),
        "q_v": (dt / 2, "v(t)Δt/2"),
    }
    return {name: (getattr(sym, name) / u, u, text) for name, (u, text) in units.items()}


def _fmt(mult: float) -> str:
    if abs(mult - 1.0) < 5e-5:
        return ""
    return f"{mult:.4f} "


def _join(terms: list[tuple[float, str]]) -> str:
    out = ""
    for mult, text in terms:
        if mult == 0.0:
            continue
        piece = _fmt(abs(mult)) + text
        if not out:
            out = ("-" if mult < 0 else "") + piece
        else:
            out += (" - " if mult < 0 else " + ") + piece
    return out or "0"


def render_equations(sym: SymbolicStep, dt: float, m: float = 1.0, gamma: float = 0.0,
                     style: str = "inline") -> str:
    """Human-readable update equations with coefficients factored against dt and m.

    ``style="inline"`` joins the two equations with "; ", ``"lines"`` with a newline.
    """
    f = factored_multipliers(sym, dt, m, gamma)
    arg = _join([(f["q_x"][0], "x(t)"), (f["q_v"][0], "v(t)Δt/2")])
    force = f"F({arg})"
    x_terms = [(f["c_xx"][0], "x(t)"),
               (f["c_xv"][0], "v(t)(Δt - γΔt²/2m)" if gamma else "v(t)Δt"),
               (f["c_xF"][0], f"1/2 {force} Δt²/m")]
    v_terms = [(f["c_vx"][0], "x(t)/Δt"),
               (f["c_vv"][0], "(1 - γΔt/m) v(t)" if gamma else "v(t)"),
               (f["c_vF"][0], f"{force} Δt/m")]
    x_eq = "x(t+Δt) = " + _join(x_terms)
    v_eq = "v(t+Δt) = " + _join(v_terms)
    sep = "\n" if style == "lines" else "; "
    return x_eq + sep + v_eq


def equation_report(sym: SymbolicStep, dt: float, m: float = 1.0, gamma: float = 0.0,
                    tol: float = 0.01) -> dict:
    match = match_template(sym, dt, m, tol, gamma)
    return {
        "coefficients": sym.to_dict(),
        "multipliers": {k: v[0] for k, v in factored_multipliers(sym, dt, m, gamma).items()},
        "template": match.template,
        "deviations": match.deviations,
        "max_deviation": match.max_deviation,
        "equations": render_equations(sym, dt, m, gamma, style="lines"),
        "dt": dt,
        "mass": m,
        "gamma": gamma,
    }


def equation_report_json(sym: SymbolicStep, dt: float, m: float = 1.0, gamma: float = 0.0,
                         tol: float = 0.01) -> str:
    return json.dumps(equation_report(sym, dt, m, gamma, tol), indent=2, ensure_ascii=False)
