"""Genetic search over genomes under the accuracy-plus-parsimony objective.

objective = f1(E) + p * (sum_i s_i^2 + sum_j f2(w_j))

where s_i is the activation score of hidden neuron i and f2 scores each weight
gene (Fixed(0) -> 0, other Fixed -> 1, Trainable -> 2).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pnn.network import (TRAINABLE, DynamicsTopology, MeltTopology, PnnNetwork, Topology,
                         TrainConfig, build_network, fixed_value, mse, network_to_dict, train)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Genome:
    weight_alleles: tuple[int, ...]
    activation_alleles: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "weight_alleles", tuple(int(a) for a in self.weight_alleles))
        object.__setattr__(self, "activation_alleles",
                           tuple(int(a) for a in self.activation_alleles))

    @property
    def id(self) -> str:
        key = ",".join(map(str, self.weight_alleles)) + "|" + ",".join(
            map(str, self.activation_alleles))
        return hashlib.sha1(key.encode()).hexdigest()[:16]

    @property
    def loci(self) -> tuple[int, ...]:
        return self.weight_alleles + self.activation_alleles

    @classmethod
    def from_loci(cls, loci, n_weights: int) -> Genome:
        loci = tuple(loci)
        return cls(loci[:n_weights], loci[n_weights:])

    def validate(self, topology: Topology) -> None:
        if len(self.weight_alleles) != topology.n_weights:
            raise ValueError(f"genome has {len(self.weight_alleles)} weight genes, "
                             f"topology needs {topology.n_weights}")
        if len(self.activation_alleles) != topology.n_activations:
            raise ValueError(f"genome has {len(self.activation_alleles)} activation genes, "
                             f"topology needs {topology.n_activations}")
        nw, na = len(topology.weight_alphabet), len(topology.activation_alphabet)
        if any(not 0 <= a < nw for a in self.weight_alleles):
            raise ValueError("weight allele out of range")
        if any(not 0 <= a < na for a in self.activation_alleles):
            raise ValueError("activation allele out of range")

    def to_dict(self) -> dict:
        return {"id": self.id, "weight_alleles": list(self.weight_alleles),
                "activation_alleles": list(self.activation_alleles)}

    @classmethod
    def from_dict(cls, d: dict) -> Genome:
        return cls(tuple(d["weight_alleles"]), tuple(d["activation_alleles"]))


def allele_counts(topology: Topology) -> list[int]:
    return ([len(topology.weight_alphabet)] * topology.n_weights
            + [len(topology.activation_alphabet)] * topology.n_activations)


def random_genome(topology: Topology, rng: np.random.Generator, zero_prob: float | None = None,
                  trainable_prob: float | None = None,
                  linear_prob: float | None = None) -> Genome:
    """Uniform over alleles unless a prior is given.

    ``zero_prob`` and ``trainable_prob`` fix the chance of Fixed(0) and
    Trainable per weight gene (other alleles share the rest uniformly);
    ``linear_prob`` does the same for Linear per activation gene.
    """
    nw = len(topology.weight_alphabet)
    t_idx = topology.weight_alphabet.index(TRAINABLE)
    pz = 1.0 / nw if zero_prob is None else zero_prob
    pt = 1.0 / nw if trainable_prob is None else trainable_prob
    if pz + pt > 1.0:
        raise ValueError("zero_prob + trainable_prob must not exceed 1")
    rest = [a for a in range(nw) if a not in (0, t_idx)]
    probs = np.full(nw, (1.0 - pz - pt) / len(rest))
    probs[0], probs[t_idx] = pz, pt
    weights = [int(a) for a in rng.choice(nw, size=topology.n_weights, p=probs)]
    na = len(topology.activation_alphabet)
    pl = 1.0 / na if linear_prob is None else linear_prob
    aprobs = np.full(na, (1.0 - pl) / (na - 1))
    aprobs[0] = pl
    acts = [int(a) for a in rng.choice(na, size=topology.n_activations, p=aprobs)]
    return Genome(tuple(weights), tuple(acts))


@dataclass
class ObjectiveConfig:
    p: float = 1.0
    f1_offset: float = 13.0
    f1_floor: float = 0.0
    f1_scale: float = 2.0
    error_source: str = "test"  # or "validation"

    def __post_init__(self):
        if self.p < 0:
            raise ValueError("parsimony coefficient p must be >= 0")
        if self.error_source not in ("test", "validation"):
            raise ValueError("error_source must be 'test' or 'validation'")

    def f1(self, err: float) -> float:
        if not math.isfinite(err):
            return math.inf
        return max(self.f1_floor, self.f1_scale * (math.log10(err + 1e-30) + self.f1_offset))


@dataclass
class ScoredIndividual:
    genome: Genome
    network: PnnNetwork
    e_train: float
    e_val: float
    e_test: float
    activation_score: int
    weight_score: int
    f1: float
    objective: float

    @property
    def complexity(self) -> int:
        return self.activation_score + self.weight_score

    @property
    def id(self) -> str:
        return self.genome.id

    def to_dict(self) -> dict:
        return {
            "genome": self.genome.to_dict(),
            "network": network_to_dict(self.network),
            "e_train": self.e_train, "e_val": self.e_val, "e_test": self.e_test,
            "activation_score": self.activation_score, "weight_score": self.weight_score,
            "complexity": self.complexity, "f1": self.f1, "objective": self.objective,
        }


def genome_seed(seed: int, genome: Genome) -> int:
    return int(hashlib.sha1(f"{seed}:{genome.id}".encode()).hexdigest()[:8], 16)


def score(genome: Genome, datasets, objective_cfg: ObjectiveConfig, train_cfg: TrainConfig,
          topology: Topology, force=None, seed: int = 0) -> ScoredIndividual:
    """Build, train and score one genome.

    ``datasets`` needs ``train``, ``val`` and ``test`` attributes, each with
    ``inputs`` and ``targets`` arrays.
    """
    genome.validate(topology)
    s = genome_seed(seed, genome)
    net = build_network(genome, topology, force, seed=s)
    tcfg = TrainConfig(**{**asdict(train_cfg), "seed": s})
    net, e_train, e_val = train(net, datasets.train, datasets.val, tcfg)
    e_test = mse(net, datasets.test) if math.isfinite(e_train) else math.inf
    err = e_test if objective_cfg.error_source == "test" else e_val
    a_score = net.activation_score()
    w_score = net.weight_score()
    f1 = objective_cfg.f1(err)
    objective = f1 + objective_cfg.p * (a_score + w_score)
    return ScoredIndividual(genome, net, e_train, e_val, e_test, a_score, w_score, f1, objective)


def two_point_crossover(a: Genome, b: Genome, rng: np.random.Generator | None = None,
                        cuts: tuple[int, int] | None = None) -> tuple[Genome, Genome]:
    """Swap the alleles between two cut points of the concatenated allele string."""
    la, lb = a.loci, b.loci
    if len(la) != len(lb) or len(a.weight_alleles) != len(b.weight_alleles):
        raise ValueError("parents must share a topology")
    L = len(la)
    if cuts is None:
        i, j = sorted(int(c) for c in rng.choice(L + 1, size=2, replace=False))
    else:
        i, j = sorted(cuts)
    ca = la[:i] + lb[i:j] + la[j:]
    cb = lb[:i] + la[i:j] + lb[j:]
    nw = len(a.weight_alleles)
    return Genome.from_loci(ca, nw), Genome.from_loci(cb, nw)


def mutate(g: Genome, prob_per_gene: float, rng: np.random.Generator,
           topology: Topology) -> Genome:
    if not 0.0 <= prob_per_gene <= 1.0:
        raise ValueError("mutation probability must be in [0, 1]")
    loci = list(g.loci)
    for i, n in enumerate(allele_counts(topology)):
        if rng.random() < prob_per_gene:
            loci[i] = int(rng.integers(n))
    return Genome.from_loci(loci, topology.n_weights)


def snap(ind: ScoredIndividual, rng: np.random.Generator) -> Genome:
    """Replace one random Trainable gene by the Fixed allele closest to its trained value."""
    net = ind.network
    top = net.topology
    idx = net.trainable_idx
    if len(idx) == 0:
        return ind.genome
    i = int(rng.choice(idx))
    value = net.weights()[i]
    fixed = [(abs(fixed_value(tag, top.dt) - value), a)
             for a, tag in enumerate(top.weight_alphabet) if tag != TRAINABLE]
    w = list(ind.genome.weight_alleles)
    w[i] = min(fixed)[1]
    return Genome(tuple(w), ind.genome.activation_alleles)


@dataclass
class GaConfig:
    population: int = 200
    generations: int = 50
    crossover_prob: float = 0.7
    mutation_prob_per_gene: float = 0.05
    tournament_size: int = 3
    elitism: int = 2
    seed: int = 0
    hall_of_fame: int = 10
    snap_prob: float = 0.0
    init_zero_prob: float | None = None
    init_trainable_prob: float | None = None
    init_linear_prob: float | None = None

    def validate(self) -> None:
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.elitism < 0 or self.elitism > self.population:
            raise ValueError("elitism must lie in [0, population]")
        if self.tournament_size < 1:
            raise ValueError("tournament size must be >= 1")
        for name in ("crossover_prob", "mutation_prob_per_gene", "snap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")


@dataclass
class GaResult:
    hall_of_fame: list[ScoredIndividual]
    stats: list[dict]
    population: list[ScoredIndividual]
    evaluations: int
    config: GaConfig
    objective: ObjectiveConfig
    history: list[list[str]] = field(default_factory=list)

    @property
    def best(self) -> ScoredIndividual:
        return self.hall_of_fame[0]

    def manifest(self) -> dict:
        return {
            "ga_config": asdict(self.config),
            "objective_config": asdict(self.objective),
            "evaluations": self.evaluations,
            "stats": self.stats,
            "hall_of_fame": [ind.to_dict() for ind in self.hall_of_fame],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2))
        write_stats_csv(self.stats, out / "stats.csv")


def write_stats_csv(stats, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_objective", "mean_objective"])
        for row in stats:
            w.writerow([row["generation"], repr(row["best"]), repr(row["mean"])])


def _rank_key(ind: ScoredIndividual):
    return (ind.objective, ind.complexity, ind.id)


def _tournament(pop: list[ScoredIndividual], k: int, rng) -> ScoredIndividual:
    picks = rng.integers(len(pop), size=k)
    return min((pop[i] for i in picks), key=_rank_key)


def _select(pop, ga_cfg: GaConfig, rng) -> Genome:
    ind = _tournament(pop, ga_cfg.tournament_size, rng)
    if ga_cfg.snap_prob and rng.random() < ga_cfg.snap_prob:
        return snap(ind, rng)
    return ind.genome


def run_ga(ga_cfg: GaConfig, objective_cfg: ObjectiveConfig, datasets, topology: Topology,
           force=None, train_cfg: TrainConfig | None = None,
           initial: list[Genome] | None = None, executor=None) -> GaResult:
    """Tournament selection, elitism, two-point crossover and per-gene mutation.

    Every genome is scored with a seed derived from (run seed, genome id), so
    results do not depend on evaluation order and identical genomes are
    trained once per run. ``executor`` (anything with ``map``) parallelises
    scoring of the new genomes of a generation.
    """
    ga_cfg.validate()
    train_cfg = train_cfg or TrainConfig()
    rng = np.random.default_rng(ga_cfg.seed)
    cache: dict[str, ScoredIndividual] = {}

    def evaluate(genomes: list[Genome]) -> list[ScoredIndividual]:
        new = []
        seen = set()
        for g in genomes:
            if g.id not in cache and g.id not in seen:
                seen.add(g.id)
                new.append(g)
        if new:
            fn = _Scorer(datasets, objective_cfg, train_cfg, topology, force, ga_cfg.seed)
            results = list(executor.map(fn, new)) if executor is not None else [fn(g) for g in new]
            for g, ind in zip(new, results):
                cache[g.id] = ind
        return [cache[g.id] for g in genomes]

    genomes = list(initial or [])[: ga_cfg.population]
    while len(genomes) < ga_cfg.population:
        genomes.append(random_genome(topology, rng, ga_cfg.init_zero_prob,
                                     ga_cfg.init_trainable_prob, ga_cfg.init_linear_prob))
    pop = evaluate(genomes)
    stats = [_gen_stats(0, pop)]
    history = [[ind.id for ind in pop]]
    log.info("gen 0: best %.4f", stats[0]["best"])

    for gen in range(1, ga_cfg.generations + 1):
        ranked = sorted(pop, key=_rank_key)
        elites = [ind.genome for ind in ranked[: ga_cfg.elitism]]
        children: list[Genome] = []
        n_children = ga_cfg.population - len(elites)
        while len(children) < n_children:
            a, b = (_select(pop, ga_cfg, rng) for _ in range(2))
            if rng.random() < ga_cfg.crossover_prob:
                a, b = two_point_crossover(a, b, rng)
            children.append(mutate(a, ga_cfg.mutation_prob_per_gene, rng, topology))
            if len(children) < n_children:
                children.append(mutate(b, ga_cfg.mutation_prob_per_gene, rng, topology))
        pop = evaluate(elites + children)
        stats.append(_gen_stats(gen, pop))
        history.append([ind.id for ind in pop])
        log.info("gen %d: best %.4f mean %.4f", gen, stats[-1]["best"], stats[-1]["mean"])

    hof = sorted(cache.values(), key=_rank_key)[: ga_cfg.hall_of_fame]
    return GaResult(hof, stats, pop, len(cache), ga_cfg, objective_cfg, history)


class _Scorer:
    # picklable callable so process pools can be used as executors
    def __init__(self, datasets, objective_cfg, train_cfg, topology, force, seed):
        self.args = (datasets, objective_cfg, train_cfg, topology, force)
        self.seed = seed

    def __call__(self, genome):
        datasets, objective_cfg, train_cfg, topology, force = self.args
        return score(genome, datasets, objective_cfg, train_cfg, topology, force, self.seed)


def _gen_stats(gen: int, pop: list[ScoredIndividual]) -> dict:
    objs = np.array([ind.objective for ind in pop])
    finite = objs[np.isfinite(objs)]
    return {
        "generation": gen,
        "best": float(objs.min()),
        "mean": float(finite.mean()) if len(finite) else math.inf,
        "n_diverged": int((~np.isfinite(objs)).sum()),
    }


def default_topology(kind: str, dt: float | None = None) -> Topology:
    return DynamicsTopology(dt) if kind == "dynamics" else MeltTopology()
