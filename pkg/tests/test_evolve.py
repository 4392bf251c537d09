import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnn import library as L
from pnn.evolve import (GaConfig, Genome, ObjectiveConfig, allele_counts, genome_seed, mutate,
                        random_genome, run_ga, score, snap, two_point_crossover)
from pnn.melting import compute_features, melt_dataset, synthetic_records
from pnn.network import DynamicsTopology, MeltTopology, TrainConfig, build_network

DYN = DynamicsTopology(0.002)
MELT = MeltTopology()
FAST = TrainConfig(max_iter=30)


@pytest.fixture(scope="module")
def melt_data():
    feats = [compute_features(r) for r in synthetic_records(60, seed=3, law="B")]
    return melt_dataset(feats, seed=0)


def dyn_genomes(n=26):
    return st.builds(
        Genome,
        st.lists(st.integers(0, 7), min_size=20, max_size=20).map(tuple),
        st.lists(st.integers(0, 3), min_size=6, max_size=6).map(tuple),
    )


# --------------------------------------------------------------------------- scores


def test_activation_score_example():
    net = build_network(Genome((0,) * 20, (3, 2, 1, 0, 0, 0)), DYN)
    assert net.activation_score() == 14


def test_weight_score_example():
    w = (7,) * 5 + (2, 1, 5) + (0,) * 12
    assert build_network(Genome(w, (0,) * 6), DYN).weight_score() == 13


def test_objective_decomposition(exact, small_data):
    cfg = ObjectiveConfig(p=0.7)
    ind = score(L.euler_genome(), small_data, cfg, FAST, DynamicsTopology(small_data.dt), exact)
    assert ind.objective == pytest.approx(cfg.f1(ind.e_test) + 0.7 * ind.complexity, abs=1e-12)
    assert ind.complexity == ind.activation_score + ind.weight_score


def test_f1_floor_and_nonfinite():
    cfg = ObjectiveConfig(f1_floor=0.0)
    assert cfg.f1(1e-20) == 0.0
    assert cfg.f1(math.nan) == math.inf
    assert cfg.f1(1e-3) == pytest.approx(2 * (-3 + 13))


@settings(max_examples=200)
@given(st.floats(1e-25, 1e3), st.floats(1e-25, 1e3))
def test_f1_monotone(a, b):
    cfg = ObjectiveConfig()
    if a <= b:
        assert cfg.f1(a) <= cfg.f1(b)


@settings(max_examples=50)
@given(st.floats(0, 1e-3), st.floats(0, 10), st.integers(0, 40), st.integers(0, 40))
def test_parsimony_monotone_in_p(err, p, c1, c2):
    # with equal error, the simpler genome never loses once p grows
    lo, hi = sorted((c1, c2))
    for q in (p, 2 * p + 0.1):
        cfg = ObjectiveConfig(p=q)
        assert cfg.f1(err) + q * lo <= cfg.f1(err) + q * hi


def test_negative_p_rejected():
    with pytest.raises(ValueError):
        ObjectiveConfig(p=-1)


def test_genome_seed_is_stable():
    g = L.pnn1_genome()
    assert genome_seed(0, g) == genome_seed(0, g)
    assert genome_seed(0, g) != genome_seed(1, g)


# --------------------------------------------------------------------------- operators


def test_crossover_identical_parents(rng):
    g = random_genome(DYN, rng)
    for _ in range(20):
        assert two_point_crossover(g, g, rng) == (g, g)


def test_crossover_full_swap():
    a = Genome((1,) * 20, (1,) * 6)
    b = Genome((2,) * 20, (2,) * 6)
    assert two_point_crossover(a, b, cuts=(0, 26)) == (b, a)
    assert two_point_crossover(a, b, cuts=(3, 3)) == (a, b)


def test_crossover_locus_conservation(rng):
    a, b = random_genome(DYN, rng), random_genome(DYN, rng)
    for _ in range(1000):
        c, d = two_point_crossover(a, b, rng)
        for i, (x, y) in enumerate(zip(c.loci, d.loci)):
            assert Counter((x, y)) == Counter((a.loci[i], b.loci[i]))


@settings(max_examples=100)
@given(dyn_genomes(), dyn_genomes(), st.integers(0, 26), st.integers(0, 26))
def test_crossover_conserves_multiset_property(a, b, i, j):
    c, d = two_point_crossover(a, b, cuts=(i, j))
    for k in range(26):
        assert sorted((c.loci[k], d.loci[k])) == sorted((a.loci[k], b.loci[k]))


def test_crossover_rejects_mismatched_parents(rng):
    with pytest.raises(ValueError):
        two_point_crossover(L.zero_genome(), L.law_a_genome(), rng)


def test_mutation_extremes(rng):
    g = random_genome(DYN, rng)
    assert mutate(g, 0.0, rng, DYN) == g
    # with probability 1 every locus is redrawn uniformly; over many draws
    # each allele shows up at every locus
    seen = [set() for _ in range(26)]
    for _ in range(300):
        m = mutate(g, 1.0, rng, DYN)
        m.validate(DYN)
        for i, a in enumerate(m.loci):
            seen[i].add(a)
    assert [len(s) for s in seen] == allele_counts(DYN)
    with pytest.raises(ValueError):
        mutate(g, 1.5, rng, DYN)


def test_mutation_frequency_within_three_sigma(rng):
    g = Genome((0,) * 20, (0,) * 6)
    p, trials = 0.1, 2000
    changed = 0
    for _ in range(trials):
        changed += sum(x != y for x, y in zip(mutate(g, p, rng, DYN).loci, g.loci))
    # a redraw can land on the same allele, so the expected change rate is
    # p * (1 - 1/n) per locus
    expected = trials * sum(p * (1 - 1 / n) for n in allele_counts(DYN))
    var = trials * sum(p * (1 - 1 / n) * (1 - p * (1 - 1 / n)) for n in allele_counts(DYN))
    assert abs(changed - expected) <= 3 * math.sqrt(var)


def test_random_genome_priors(rng):
    gs = [random_genome(DYN, rng, zero_prob=0.5, trainable_prob=0.5, linear_prob=1.0)
          for _ in range(50)]
    assert all(set(g.weight_alleles) <= {0, 7} for g in gs)
    assert all(set(g.activation_alleles) == {0} for g in gs)
    with pytest.raises(ValueError):
        random_genome(DYN, rng, zero_prob=0.7, trainable_prob=0.7)


def test_snap_replaces_trainable_with_nearest(exact, small_data, rng):
    top = DynamicsTopology(small_data.dt)
    ind = score(L.pnn1_genome(), small_data, ObjectiveConfig(), TrainConfig(max_iter=200), top,
                exact)
    g = snap(ind, rng)
    # both trained values sit nearest to allele "0" or "dt"; exactly one gene changes
    diff = [i for i, (x, y) in enumerate(zip(g.weight_alleles, ind.genome.weight_alleles))
            if x != y]
    assert len(diff) == 1 and ind.genome.weight_alleles[diff[0]] == 7
    assert g.weight_alleles[diff[0]] in (0, 5)


def test_genome_validation():
    with pytest.raises(ValueError):
        Genome((0,) * 19, (0,) * 6).validate(DYN)
    with pytest.raises(ValueError):
        Genome((9,) * 20, (0,) * 6).validate(DYN)
    g = L.pnn1_genome()
    assert Genome.from_dict(g.to_dict()) == g


# --------------------------------------------------------------------------- GA runs


def test_config_errors():
    for bad in (dict(population=1), dict(elitism=-1), dict(population=4, elitism=5),
                dict(tournament_size=0), dict(mutation_prob_per_gene=2.0),
                dict(crossover_prob=-0.1), dict(snap_prob=1.5)):
        with pytest.raises(ValueError):
            GaConfig(**bad).validate()


def test_elitism_keeps_best_monotone(melt_data):
    cfg = GaConfig(population=12, generations=6, elitism=2, seed=4)
    r = run_ga(cfg, ObjectiveConfig(p=0.1), melt_data, MELT, train_cfg=FAST)
    best = [s["best"] for s in r.stats]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert len(r.stats) == 7
    assert r.best.objective == min(best)


def test_elitism_equal_population_is_static(melt_data):
    cfg = GaConfig(population=8, generations=3, elitism=8, seed=1)
    r = run_ga(cfg, ObjectiveConfig(), melt_data, MELT, train_cfg=FAST)
    assert all(sorted(h) == sorted(r.history[0]) for h in r.history)


def test_reproducible_runs(melt_data):
    cfg = GaConfig(population=10, generations=3, seed=7, snap_prob=0.3)
    a = run_ga(cfg, ObjectiveConfig(p=0.1), melt_data, MELT, train_cfg=FAST)
    b = run_ga(cfg, ObjectiveConfig(p=0.1), melt_data, MELT, train_cfg=FAST)
    assert a.history == b.history
    assert [i.objective for i in a.hall_of_fame] == [i.objective for i in b.hall_of_fame]
    assert a.manifest() == b.manifest()


def test_initial_population_is_used(melt_data):
    cfg = GaConfig(population=6, generations=0, seed=0)
    r = run_ga(cfg, ObjectiveConfig(), melt_data, MELT, train_cfg=FAST,
               initial=[L.law_b_genome()])
    assert r.history[0][0] == L.law_b_genome().id


def test_hall_of_fame_sorted_and_distinct(melt_data):
    r = run_ga(GaConfig(population=10, generations=2, seed=2), ObjectiveConfig(), melt_data,
               MELT, train_cfg=FAST)
    objs = [i.objective for i in r.hall_of_fame]
    assert objs == sorted(objs)
    assert len({i.id for i in r.hall_of_fame}) == len(objs)


def test_executor_gives_same_result(melt_data):
    from concurrent.futures import ThreadPoolExecutor

    cfg = GaConfig(population=8, generations=2, seed=5)
    a = run_ga(cfg, ObjectiveConfig(), melt_data, MELT, train_cfg=FAST)
    with ThreadPoolExecutor(2) as ex:
        b = run_ga(cfg, ObjectiveConfig(), melt_data, MELT, train_cfg=FAST, executor=ex)
    assert a.history == b.history


def test_result_write(tmp_path, melt_data):
    r = run_ga(GaConfig(population=6, generations=1, seed=0), ObjectiveConfig(), melt_data,
               MELT, train_cfg=FAST)
    r.write(tmp_path)
    lines = (tmp_path / "stats.csv").read_text().splitlines()
    assert lines[0] == "generation,best_objective,mean_objective" and len(lines) == 3
    assert (tmp_path / "manifest.json").exists()
