import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnn import library as L
from pnn.evolve import GaConfig
from pnn.melting import (AMU, ANGSTROM3, CSV_HEADER, GPA, FetchConfig, MaterialRecord,
                         MeltFeatures, MeltingLaw, ParetoPoint, brute_force_front,
                         compute_features, debye_speed, evaluate_published_law, extract_law,
                         evolve_melting_laws, fetch_materials, fit_lindemann_constant,
                         ingest_csv, lindemann_placement, melt_dataset, pareto_front,
                         synthetic_records, write_features_csv, write_materials_csv,
                         write_pareto_csv)
from pnn.network import MeltTopology, TrainConfig, build_network

COPPER = MaterialRecord("Cu", 1357.77, 140 * GPA, 48 * GPA, 8960.0, 11.8 * ANGSTROM3, 63.5 * AMU)


def feats_with(theta0=10.0, theta1=1.0, theta2=0.0, theta3=0.0):
    return MeltFeatures("t", 0.0, theta0, theta1, theta2, theta3, 1.0)


# --------------------------------------------------------------------------- features


def test_natural_units():
    rec = MaterialRecord("unit", 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    f = compute_features(rec, hbar=1.0, k_b=1.0, v_m=1.0)
    assert f.theta0 == 1.0 and f.theta1 == 1.0
    assert f.theta2 == 1.0 and f.theta3 == 1.0


def test_copper_scale():
    f = compute_features(COPPER)
    assert f.theta0 == pytest.approx(87.3, rel=0.01)
    assert abs(f.debye_temperature - 343.0) / 343.0 < 0.2
    assert COPPER.a == pytest.approx(11.8 ** (1 / 3) * 1e-10)


def test_debye_speed_limits():
    # equal transverse and longitudinal speeds leave the average unchanged
    v = debye_speed(K=-4.0 / 3.0 + 1.0, G=1.0, rho=1.0)
    assert v == pytest.approx(1.0)
    assert math.sqrt(48e9 / 8960) < debye_speed(140e9, 48e9, 8960) < math.sqrt(204e9 / 8960)


def test_cgs_rescale():
    cgs = MaterialRecord("Cu", COPPER.T_m, COPPER.K * 10, COPPER.G * 10, COPPER.rho * 1e-3,
                         COPPER.vol_per_atom * 1e6, COPPER.mass * 1e3)
    a = compute_features(COPPER)
    b = compute_features(cgs, hbar=1.054571817e-27, k_b=1.380649e-16)
    for u, w in zip(a.x + (a.y,), b.x + (b.y,)):
        assert u == pytest.approx(w, rel=1e-10)


@settings(max_examples=100)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_dimensional_invariance(M, Lf, T):
    """Change the mass, length and time units; the dimensionless features stay put."""
    p = M / (Lf * T * T)
    rec = MaterialRecord("r", COPPER.T_m, COPPER.K * p, COPPER.G * p, COPPER.rho * M / Lf**3,
                         COPPER.vol_per_atom * Lf**3, COPPER.mass * M)
    from pnn.melting import HBAR, K_B

    a = compute_features(COPPER)
    b = compute_features(rec, hbar=HBAR * M * Lf**2 / T, k_b=K_B * M * Lf**2 / T**2)
    for u, w in zip(a.x + (a.y,), b.x + (b.y,)):
        assert abs(u - w) <= 1e-10 * abs(u)


def test_invalid_record_rejected():
    with pytest.raises(ValueError, match="non-positive shear modulus"):
        compute_features(MaterialRecord("x", 1, 1, 0, 1, 1, 1))


# --------------------------------------------------------------------------- published laws


def test_published_law_arithmetic():
    assert evaluate_published_law("A", feats_with(theta0=10)) == pytest.approx(218.671, abs=1e-9)
    assert evaluate_published_law("B", feats_with(theta0=10, theta2=1000)) == pytest.approx(
        177.515, abs=1e-9)
    # theta0^2/theta1 = 100
    c = evaluate_published_law("C", feats_with(theta0=10, theta1=1, theta3=1000))
    assert c == pytest.approx(119.034 + 0.499 + 0.796, abs=1e-9)
    assert c == pytest.approx(120.329, abs=1e-9)


def test_lindemann_needs_constant():
    f = feats_with(theta0=10, theta1=2)
    with pytest.raises(ValueError):
        evaluate_published_law("Lindemann", f)
    assert evaluate_published_law("Lindemann", f, C=0.5) == pytest.approx(25.0)
    data = [compute_features(r) for r in synthetic_records(20, law="Lindemann", noise=0.0, C=0.02)]
    assert fit_lindemann_constant(data) == pytest.approx(0.02, rel=1e-10)
    pred = evaluate_published_law("Lindemann", data, dataset=data)
    assert np.allclose(pred, [f.T_m for f in data], rtol=1e-10)


def test_unknown_law():
    with pytest.raises(ValueError):
        evaluate_published_law("D", feats_with())


CONSTRUCTIVE = {
    "A": (L.law_a_genome, [21.8671]),
    "B": (L.law_b_genome, [0.001985, 17.553]),
    "Lindemann": (L.lindemann_genome, [0.013]),
    "C": (L.law_c_genome, [0.00796, 0.000499, 11.9034]),
}


@pytest.mark.parametrize("which", list(CONSTRUCTIVE))
def test_constructive_genomes_match_closed_forms(which):
    make, values = CONSTRUCTIVE[which]
    net = build_network(make(), MeltTopology(), trained_values=values)
    feats = [compute_features(r) for r in synthetic_records(100, seed=11, law="A", noise=0.1)]
    X = np.array([f.x for f in feats])
    got = net.predict(X)[:, 0] * np.array([f.theta0 for f in feats])
    C = values[0] if which == "Lindemann" else None
    want = evaluate_published_law(which, feats, C=C)
    assert np.max(np.abs(got - want) / np.abs(want)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=13, max_size=13),
       st.lists(st.integers(0, 2), min_size=3, max_size=3), st.integers(0, 1000))
def test_law_matches_genome(w, acts, seed):
    from pnn.evolve import Genome

    net = build_network(Genome(tuple(w), tuple(acts)), MeltTopology(), seed=seed, init_scale=2.0)
    law = extract_law(net)
    X = np.random.default_rng(seed).uniform(0.5, 50.0, (100, 3))
    with np.errstate(all="ignore"):
        a, b = net.predict(X)[:, 0], law.evaluate(X)
    finite = np.isfinite(a)
    np.testing.assert_array_equal(finite, np.isfinite(b))
    np.testing.assert_array_equal(a[~finite], b[~finite])
    assert np.all(np.abs(a[finite] - b[finite]) <= 1e-12 * np.maximum(1.0, np.abs(a[finite])))


def test_law_description_and_sparsity():
    net = build_network(L.law_c_genome(), MeltTopology(), trained_values=[0.008, 0.0005, 11.9])
    law = extract_law(net)
    assert law.describe() == "y = 11.9 + 0.008 1/(x1) + 0.0005 x3"
    assert law.inputs_used == {0, 2}
    assert np.allclose(law.linear_coefficients(), [0, 0, 0.0005])
    assert law.to_dict()["text"] == law.describe()
    zero = extract_law(build_network(L.law_a_genome(), MeltTopology(), trained_values=[0.0]))
    assert zero.describe() == "y = 0"


def test_predict_tm_scales_by_theta0():
    law = MeltingLaw(20.0, [])
    feats = [compute_features(COPPER)]
    assert law.predict_tm(feats)[0] == pytest.approx(20.0 * feats[0].theta0)


def test_extract_law_needs_melt_topology(exact):
    from pnn.network import DynamicsTopology

    with pytest.raises(ValueError):
        extract_law(build_network(L.zero_genome(), DynamicsTopology(0.01), exact))


# --------------------------------------------------------------------------- datasets & evolution


def test_split_is_seeded_and_complete():
    feats = [compute_features(r) for r in synthetic_records(40, seed=1)]
    a, b = melt_dataset(feats, seed=3), melt_dataset(feats, seed=3)
    assert a.train.names == b.train.names
    assert (len(a.train), len(a.val), len(a.test)) == (28, 6, 6)
    assert sorted(a.train.names + a.val.names + a.test.names) == sorted(f.name for f in feats)
    with pytest.raises(ValueError):
        melt_dataset(feats[:2])


def test_constant_target_gives_bias_only_law():
    feats = [compute_features(r) for r in synthetic_records(200, seed=2, law="constant",
                                                           noise=0.0)]
    runs = evolve_melting_laws(melt_dataset(feats, 0), GaConfig(population=50, generations=20,
                                                                seed=0), [1.0])
    law = runs[0].best_law
    assert law.terms == [] and law.bias == pytest.approx(20.0, rel=1e-6)
    assert runs[0].result.best.complexity == 2


# --------------------------------------------------------------------------- pareto


def P(c, r, gid=""):
    return ParetoPoint(c, r, gid)


def test_pareto_examples():
    front, dom = pareto_front([P(1, 0.5), P(2, 0.3), P(3, 0.4)])
    assert [(q.complexity, q.test_rmse) for q in front] == [(1, 0.5), (2, 0.3)]
    assert [(q.complexity, q.test_rmse) for q in dom] == [(3, 0.4)] and dom[0].dominated
    assert len(pareto_front([P(4, 0.1)])[0]) == 1
    front, dom = pareto_front([P(2, 0.2, "a"), P(2, 0.2, "b")])
    assert {q.genome_id for q in front} == {"a", "b"} and dom == []
    assert pareto_front([]) == ([], [])


point_sets = st.lists(st.tuples(st.integers(0, 20), st.floats(0, 1)), max_size=60)


@settings(max_examples=300)
@given(point_sets)
def test_pareto_matches_brute_force(raw):
    pts = [P(c, r, str(i)) for i, (c, r) in enumerate(raw)]
    front, dom = pareto_front(pts)
    assert {q.genome_id for q in front} == {q.genome_id for q in brute_force_front(pts)}
    assert len(front) + len(dom) == len(pts)
    assert [q.complexity for q in front] == sorted(q.complexity for q in front)


def test_pareto_large_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(5):
        raw = zip(rng.integers(0, 30, 1000), rng.random(1000).round(2))
        pts = [P(int(c), float(r), str(i)) for i, (c, r) in enumerate(raw)]
        front, _ = pareto_front(pts)
        assert {q.genome_id for q in front} == {q.genome_id for q in brute_force_front(pts)}


def test_lindemann_placement_report():
    pts = [P(1, 0.5, "a"), P(3, 0.1, "b")]
    off = lindemann_placement(pts, ParetoPoint(4, 0.2, "lind"))
    assert off == {"on_front": False, "dominated_by": ["b"], "complexity": 4, "test_rmse": 0.2}
    assert lindemann_placement(pts, ParetoPoint(2, 0.3, "lind"))["on_front"]


def test_write_pareto_csv(tmp_path):
    write_pareto_csv([P(1, 0.5, "a"), P(3, 0.4, "c"), P(2, 0.3, "b")], tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines() == [
        "genome_id,complexity,test_rmse,on_front", "a,1,0.5,true", "b,2,0.3,true",
        "c,3,0.4,false"]


# --------------------------------------------------------------------------- CSV ingest


def write_rows(path, rows, header=CSV_HEADER):
    lines = [",".join(header)] + [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def test_ingest_three_rows(tmp_path):
    rows = [("Cu", 1357.77, 140, 48, 8960, 11.8, 63.55), ("Al", 933.47, 76, 26, 2700, 16.6, 26.98),
            ("Fe", 1811, 170, 82, 7874, 11.8, 55.85)]
    write_rows(tmp_path / "m.csv", rows)
    recs, rej = ingest_csv(tmp_path / "m.csv")
    assert len(recs) == 3 and rej == []
    assert recs[0].K == 140e9 and recs[0].vol_per_atom == pytest.approx(11.8e-30)
    assert recs[0].mass == pytest.approx(63.55 * AMU)


def test_ingest_rejects_bad_rows(tmp_path):
    rows = [("Cu", 1357.77, 140, 48, 8960, 11.8, 63.55), ("bad", 1000, 100, 0, 5000, 10, 50),
            ("text", 1000, "abc", 10, 5000, 10, 50)]
    write_rows(tmp_path / "m.csv", rows)
    recs, rej = ingest_csv(tmp_path / "m.csv")
    assert [r.name for r in recs] == ["Cu"]
    assert rej[0].reason == "non-positive shear modulus" and rej[0].row == 3
    assert "K_GPa" in rej[1].reason


def test_ingest_bad_header(tmp_path):
    write_rows(tmp_path / "m.csv", [], header=["name", "T_m_K", "K_GPa"])
    with pytest.raises(ValueError, match="malformed header"):
        ingest_csv(tmp_path / "m.csv")


def test_csv_round_trip(tmp_path):
    recs = synthetic_records(5, seed=4)
    write_materials_csv(recs, tmp_path / "m.csv")
    back, rej = ingest_csv(tmp_path / "m.csv")
    assert rej == []
    for a, b in zip(recs, back):
        for name in ("T_m", "K", "G", "rho", "vol_per_atom", "mass"):
            assert getattr(b, name) == pytest.approx(getattr(a, name), rel=1e-14)
    write_features_csv([compute_features(r) for r in back], tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "name,theta0_K,theta1_K,theta2_K,theta3_K,x1,x2,x3,y" and len(lines) == 6


# --------------------------------------------------------------------------- REST client

FULL = {"name": "Cu", "T_m_K": 1357.77, "K_GPa": 140, "G_GPa": 48, "rho_kgm3": 8960,
        "vol_per_atom_A3": 11.8, "mass_amu": 63.55}


class _Handler(BaseHTTPRequestHandler):
    hits: list = []

    def do_GET(self):
        type(self).hits.append((self.path, self.headers.get("Authorization")))
        mid = self.path.rsplit("/", 1)[-1]
        if self.headers.get("Authorization") != "Bearer good":
            return self._send(401, {})
        if mid == "mp-1":
            return self._send(200, FULL)
        if mid == "mp-2":
            return self._send(200, {k: v for k, v in FULL.items() if k != "G_GPa"})
        if mid == "mp-flaky" and sum(p.endswith("mp-flaky") for p, _ in type(self).hits) < 2:
            return self._send(503, {})
        if mid == "mp-flaky":
            return self._send(200, FULL)
        return self._send(404, {})

    def _send(self, code, doc):
        body = json.dumps(doc).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.hits = []
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_port}/materials"
    srv.shutdown()
    srv.server_close()


def test_fetch_success_missing_and_cache(server, tmp_path):
    cfg = FetchConfig(cache_dir=str(tmp_path / "cache"), max_retries=2, backoff=0.0)
    recs, rej = fetch_materials(server, "good", ["mp-1", "mp-2"], cfg, sleep=lambda s: None)
    assert [r.name for r in recs] == ["Cu"] and recs[0].G == 48e9
    assert [(r.name, r.reason) for r in rej] == [("mp-2", "missing property: G")]
    assert _Handler.hits[0][1] == "Bearer good"
    n = len(_Handler.hits)
    again, _ = fetch_materials(server, "good", ["mp-1"], cfg, sleep=lambda s: None)
    assert again == recs and len(_Handler.hits) == n
    assert (tmp_path / "cache" / "mp-1.json").exists()


def test_fetch_auth_failure_and_retry(server):
    waits = []
    cfg = FetchConfig(max_retries=3, backoff=0.25)
    recs, rej = fetch_materials(server, "bad", ["mp-1"], cfg, sleep=waits.append)
    assert rej[0].reason == "auth failure (HTTP 401)" and waits == []
    recs, rej = fetch_materials(server, "good", ["mp-flaky"], cfg, sleep=waits.append)
    assert len(recs) == 1 and waits == [0.25]


def test_fetch_unreachable():
    waits = []
    cfg = FetchConfig(max_retries=2, backoff=0.1, timeout=1.0)
    recs, rej = fetch_materials("http://127.0.0.1:9/none", "k", ["a", "b"], cfg,
                                sleep=waits.append)
    assert recs == [] and len(rej) == 2
    assert all(r.reason.startswith("transport error") for r in rej)
    assert waits == [0.1, 0.2] * 2
