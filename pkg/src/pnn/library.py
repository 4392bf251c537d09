"""Hand-wired reference genomes for both topologies.

Dynamics weight alleles index ``DynamicsTopology.weight_alphabet``:
0 -> 0, 1 -> 1/2, 2 -> 1, 3 -> 2, 4 -> dt/2, 5 -> dt, 6 -> 2dt, 7 -> Trainable.
Melting weight alleles: 0 -> 0, 1 -> 1, 2 -> Trainable.
"""

from __future__ import annotations

from pnn.evolve import Genome

Z, HALF, ONE, TWO, DT2, DT, TWO_DT, T = range(8)
LIN = 0

_IDENTITY_PASS = [ONE, Z, Z, ONE]


def zero_genome() -> Genome:
    return Genome((Z,) * 20, (LIN,) * 6)


def identity_genome() -> Genome:
    """x' = x, v' = v."""
    return Genome((*_IDENTITY_PASS, Z, Z, *_IDENTITY_PASS, ONE, Z, Z, Z, ONE, Z,
                   *_IDENTITY_PASS), (LIN,) * 6)


def pnn1_genome() -> Genome:
    """Position Verlet with both force coefficients Trainable.

    h1 = (x, v); q = x + v dt/2; h2 = (x + v dt, v);
    h3 = (h21 + c_xF F(q), h22 + c_vF F(q)); outputs = h3.
    """
    return Genome((ONE, Z, Z, ONE, ONE, DT2, ONE, DT, Z, ONE,
                   ONE, Z, T, Z, ONE, T, *_IDENTITY_PASS), (LIN,) * 6)


def pnn1_trained_values(dt: float, mass: float = 1.0) -> list[float]:
    return [dt * dt / (2.0 * mass), dt / mass]


def verlet_fixed_genome() -> Genome:
    """Position Verlet for unit mass using Fixed alleles only (complexity 12).

    h1 = (x + v dt/2, v); q = h11; h2 = h1; h3 = (h21, h22 + dt F(q));
    x' = h31 + dt/2 h32, v' = h32.
    """
    return Genome((ONE, DT2, Z, ONE, ONE, Z, *_IDENTITY_PASS,
                   ONE, Z, Z, Z, ONE, DT, ONE, DT2, Z, ONE), (LIN,) * 6)


def euler_genome() -> Genome:
    """Explicit Euler for unit mass: x' = x + v dt, v' = v + dt F(x)."""
    return Genome((*_IDENTITY_PASS, ONE, Z, ONE, DT, Z, ONE,
                   ONE, Z, Z, Z, ONE, DT, *_IDENTITY_PASS), (LIN,) * 6)


def damped_verlet_genome() -> Genome:
    """Position Verlet with a trainable velocity decay.

    h2 = (x + c_xv v, c_vv v); h3 = (h21 + c_xF F(q), h22 + c_vF F(q)).
    Trainable order: c_xv, c_vv, c_xF, c_vF.
    """
    return Genome((ONE, Z, Z, ONE, ONE, DT2, ONE, T, Z, T,
                   ONE, Z, T, Z, ONE, T, *_IDENTITY_PASS), (LIN,) * 6)


def damped_verlet_start(dt: float, mass: float = 1.0) -> list[float]:
    """Undamped position-Verlet values, a starting point for training."""
    return [dt, 1.0, dt * dt / (2.0 * mass), dt / mass]


# Melting topology: slots 0-8 L[neuron, input], 9-11 output weights, 12 bias.
M_Z, M_ONE, M_T = range(3)
M_LIN, M_RECIP, M_SQUARE = range(3)


def melt_genome(hidden: list[tuple[int, int, int]], out: tuple[int, int, int], bias: int,
                acts: tuple[int, int, int]) -> Genome:
    w = [a for row in hidden for a in row] + list(out) + [bias]
    return Genome(tuple(w), acts)


def law_a_genome() -> Genome:
    """y = b (T_m proportional to theta0)."""
    return melt_genome([(M_Z,) * 3] * 3, (M_Z,) * 3, M_T, (M_LIN,) * 3)


def law_b_genome() -> Genome:
    """y = b + c x2."""
    return melt_genome([(M_Z, M_ONE, M_Z), (M_Z,) * 3, (M_Z,) * 3], (M_T, M_Z, M_Z), M_T,
                       (M_LIN,) * 3)


def lindemann_genome() -> Genome:
    """y = C / x1."""
    return melt_genome([(M_ONE, M_Z, M_Z), (M_Z,) * 3, (M_Z,) * 3], (M_T, M_Z, M_Z), M_Z,
                       (M_RECIP, M_LIN, M_LIN))


def law_c_genome() -> Genome:
    """y = b + c3 x3 + cL / x1."""
    return melt_genome([(M_ONE, M_Z, M_Z), (M_Z, M_Z, M_ONE), (M_Z,) * 3], (M_T, M_T, M_Z), M_T,
                       (M_RECIP, M_LIN, M_LIN))
