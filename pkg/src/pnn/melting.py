"""Melting-temperature laws from elastic and structural properties.

Each material is reduced to four temperature-like quantities

    theta0 = hbar v_m / (k_b a)        theta1 = hbar^2 / (m a^2 k_b)
    theta2 = a^3 G / k_b               theta3 = a^3 K / k_b

with a the cube root of the volume per atom and v_m the Debye-averaged sound
speed. The learning problem is y = T_m / theta0 as a function of
x_i = theta_i / theta0, i = 1..3, on the melting topology.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pnn.evolve import GaConfig, GaResult, Genome, ObjectiveConfig, ScoredIndividual, run_ga
from pnn.network import Act, MeltTopology, PnnNetwork, TrainConfig, activate

log = logging.getLogger(__name__)

HBAR = 1.054571817e-34  # J s
K_B = 1.380649e-23  # J/K
AMU = 1.66053906660e-27  # kg
GPA = 1e9
ANGSTROM3 = 1e-30

CSV_HEADER = ["name", "T_m_K", "K_GPa", "G_GPa", "rho_kgm3", "vol_per_atom_A3", "mass_amu"]
FEATURES_HEADER = ["name", "theta0_K", "theta1_K", "theta2_K", "theta3_K", "x1", "x2", "x3", "y"]
PARETO_HEADER = ["genome_id", "complexity", "test_rmse", "on_front"]

_FIELD_NAMES = {
    "T_m": "melting temperature", "K": "bulk modulus", "G": "shear modulus",
    "rho": "density", "vol_per_atom": "volume per atom", "mass": "mass",
}


def melt_objective(p: float = 1.0, **kw) -> ObjectiveConfig:
    """The dynamics objective with parsimony weight ``p``; ``kw`` overrides f1 settings."""
    return ObjectiveConfig(p=p, **kw)


# --------------------------------------------------------------------------- records & features


@dataclass(frozen=True)
class MaterialRecord:
    """One material in SI units."""

    name: str
    T_m: float
    K: float
    G: float
    rho: float
    vol_per_atom: float
    mass: float

    def problems(self) -> list[str]:
        out = []
        for key, label in _FIELD_NAMES.items():
            val = getattr(self, key)
            if not math.isfinite(val):
                out.append(f"non-finite {label}")
            elif val <= 0:
                out.append(f"non-positive {label}")
        return out

    def validate(self) -> None:
        probs = self.problems()
        if probs:
            raise ValueError(f"{self.name}: " + "; ".join(probs))

    @property
    def a(self) -> float:
        return self.vol_per_atom ** (1.0 / 3.0)


@dataclass(frozen=True)
class MeltFeatures:
    name: str
    T_m: float
    theta0: float
    theta1: float
    theta2: float
    theta3: float
    v_m: float

    @property
    def x1(self) -> float:
        return self.theta1 / self.theta0

    @property
    def x2(self) -> float:
        return self.theta2 / self.theta0

    @property
    def x3(self) -> float:
        return self.theta3 / self.theta0

    @property
    def y(self) -> float:
        return self.T_m / self.theta0

    @property
    def x(self) -> tuple[float, float, float]:
        return (self.x1, self.x2, self.x3)

    @property
    def debye_temperature(self) -> float:
        """theta0 (6 pi^2)^(1/3): the Debye temperature for one atom per volume a^3."""
        return self.theta0 * (6.0 * math.pi**2) ** (1.0 / 3.0)


def debye_speed(K: float, G: float, rho: float) -> float:
    v_t = math.sqrt(G / rho)
    v_l = math.sqrt((K + 4.0 * G / 3.0) / rho)
    return ((2.0 / v_t**3 + 1.0 / v_l**3) / 3.0) ** (-1.0 / 3.0)


def compute_features(rec: MaterialRecord, hbar: float = HBAR, k_b: float = K_B,
                     v_m: float | None = None) -> MeltFeatures:
    """Features of one record. ``hbar``, ``k_b`` and ``v_m`` can be overridden
    (natural-unit checks); by default v_m is the Debye average speed."""
    rec.validate()
    a = rec.a
    if v_m is None:
        v_m = debye_speed(rec.K, rec.G, rec.rho)
    theta0 = hbar * v_m / (k_b * a)
    theta1 = hbar**2 / (rec.mass * a**2 * k_b)
    theta2 = a**3 * rec.G / k_b
    theta3 = a**3 * rec.K / k_b
    return MeltFeatures(rec.name, rec.T_m, theta0, theta1, theta2, theta3, v_m)


# --------------------------------------------------------------------------- published laws


def evaluate_published_law(which: str, feats, C: float | None = None, dataset=None):
    """Predicted T_m (K) for one MeltFeatures or a sequence of them.

    ``which`` is one of "A", "B", "Lindemann", "C". The Lindemann constant is
    taken from ``C`` or fitted by least squares on ``dataset`` (MeltFeatures).
    """
    single = isinstance(feats, MeltFeatures)
    fs = [feats] if single else list(feats)
    t0 = np.array([f.theta0 for f in fs])
    t1 = np.array([f.theta1 for f in fs])
    t2 = np.array([f.theta2 for f in fs])
    t3 = np.array([f.theta3 for f in fs])
    if which == "A":
        out = 21.8671 * t0
    elif which == "B":
        out = 17.553 * t0 + 0.001985 * t2
    elif which == "C":
        out = 11.9034 * t0 + 0.000499 * t3 + 0.00796 * t0**2 / t1
    elif which == "Lindemann":
        if C is None:
            if not dataset:
                raise ValueError("Lindemann law needs a constant C or a dataset to fit it")
            C = fit_lindemann_constant(dataset)
        out = C * t0**2 / t1
    else:
        raise ValueError(f"unknown law {which!r}; expected A, B, Lindemann or C")
    return float(out[0]) if single else out


def fit_lindemann_constant(dataset) -> float:
    """Least-squares C in T_m = C theta0^2/theta1."""
    u = np.array([f.theta0**2 / f.theta1 for f in dataset])
    t = np.array([f.T_m for f in dataset])
    return float(u @ t / (u @ u))


# --------------------------------------------------------------------------- CSV I/O


def _record_from_row(row: dict) -> MaterialRecord:
    vals = {}
    for col in CSV_HEADER[1:]:
        raw = (row.get(col) or "").strip()
        try:
            vals[col] = float(raw)
        except ValueError:
            raise ValueError(f"malformed value for {col}: {raw!r}") from None
    return MaterialRecord(
        name=(row.get("name") or "").strip(),
        T_m=vals["T_m_K"], K=vals["K_GPa"] * GPA, G=vals["G_GPa"] * GPA, rho=vals["rho_kgm3"],
        vol_per_atom=vals["vol_per_atom_A3"] * ANGSTROM3, mass=vals["mass_amu"] * AMU)


@dataclass
class Rejection:
    row: int | None
    name: str
    reason: str


def ingest_csv(path) -> tuple[list[MaterialRecord], list[Rejection]]:
    """Read a materials CSV (GPa, Å^3, amu) into SI records.

    A bad header raises; bad rows are skipped and reported with a reason.
    """
    records, rejected = [], []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise ValueError(f"malformed header: missing columns {missing}")
        reader.fieldnames = header
        for i, row in enumerate(reader, start=2):
            name = (row.get("name") or "").strip()
            try:
                rec = _record_from_row(row)
            except ValueError as exc:
                rejected.append(Rejection(i, name, str(exc)))
                continue
            probs = rec.problems()
            if probs:
                rejected.append(Rejection(i, name, "; ".join(probs)))
                continue
            records.append(rec)
    return records, rejected


def write_materials_csv(records, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.name, repr(r.T_m), repr(r.K / GPA), repr(r.G / GPA), repr(r.rho),
                        repr(r.vol_per_atom / ANGSTROM3), repr(r.mass / AMU)])


def write_features_csv(feats, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURES_HEADER)
        for f in feats:
            w.writerow([f.name] + [repr(float(v)) for v in
                                   (f.theta0, f.theta1, f.theta2, f.theta3, f.x1, f.x2, f.x3, f.y)])


# --------------------------------------------------------------------------- datasets


@dataclass
class TableSplit:
    inputs: np.ndarray
    targets: np.ndarray
    names: list[str]
    theta0: np.ndarray

    def __len__(self):
        return len(self.inputs)


@dataclass
class MeltDataset:
    train: TableSplit
    val: TableSplit
    test: TableSplit


def melt_dataset(feats, seed: int = 0, fractions=(0.7, 0.15, 0.15)) -> MeltDataset:
    """Seeded shuffle into train/val/test (70/15/15 by default)."""
    feats = list(feats)
    n = len(feats)
    if n < 3:
        raise ValueError("need at least 3 materials to split into train/val/test")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    n_train = min(n_train, n - 2)
    n_val = min(n_val, n - n_train - 1)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])

    def take(ix):
        fs = [feats[i] for i in ix]
        return TableSplit(np.array([f.x for f in fs]).reshape(-1, 3),
                          np.array([f.y for f in fs]).reshape(-1, 1),
                          [f.name for f in fs], np.array([f.theta0 for f in fs]))

    return MeltDataset(*(take(ix) for ix in parts))


# --------------------------------------------------------------------------- laws


_G_TEXT = {Act.LINEAR: "{}", Act.RECIPROCAL: "1/({})", Act.SQUARE: "({})^2"}


@dataclass
class MeltingLaw:
    """y = b + sum_k c_k g_k(l_k . x) with x = (x1, x2, x3); terms with c_k = 0
    or l_k = 0 are dropped."""

    bias: float
    terms: list[tuple[str, tuple[float, float, float], float]]  # (activation, l_k, c_k)
    provenance: str = "discovered"
    genome_id: str = ""
    constants: dict = field(default_factory=dict)

    def evaluate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.full(len(X), self.bias)
        with np.errstate(all="ignore"):
            for act, l, c in self.terms:
                y = y + c * activate(Act(act), X @ np.asarray(l))
        return y

    def predict_tm(self, feats) -> np.ndarray:
        X = np.array([f.x for f in feats]).reshape(-1, 3)
        return self.evaluate(X) * np.array([f.theta0 for f in feats])

    @property
    def inputs_used(self) -> set[int]:
        return {i for _, l, _ in self.terms for i in range(3) if l[i] != 0.0}

    def linear_coefficients(self) -> np.ndarray:
        """Net coefficient of each x_i summed over the Linear terms."""
        out = np.zeros(3)
        for act, l, c in self.terms:
            if act == Act.LINEAR.value:
                out += c * np.asarray(l)
        return out

    def describe(self) -> str:
        pieces = [f"{self.bias:.6g}"] if self.bias != 0.0 else []
        for act, l, c in self.terms:
            parts = [(f"{li:.6g} " if li != 1.0 else "") + f"x{i + 1}"
                     for i, li in enumerate(l) if li != 0.0]
            inner = " + ".join(parts)
            if act == Act.LINEAR.value and len(parts) > 1:
                inner = f"({inner})"
            coef = "" if c == 1.0 else f"{c:.6g} "
            pieces.append(coef + _G_TEXT[Act(act)].format(inner))
        return "y = " + (" + ".join(pieces) if pieces else "0")

    def to_dict(self) -> dict:
        return {"bias": self.bias, "terms": [[a, list(l), c] for a, l, c in self.terms],
                "provenance": self.provenance, "genome_id": self.genome_id,
                "constants": self.constants, "text": self.describe()}


def extract_law(net: PnnNetwork, provenance: str = "discovered") -> MeltingLaw:
    if not isinstance(net.topology, MeltTopology):
        raise ValueError("melting laws are extracted from melting-topology networks only")
    w = net.weights()
    L = w[0:9].reshape(3, 3)
    terms = []
    for k in range(3):
        c = float(w[9 + k])
        act = net.activation_genes[k]
        # a reciprocal fed by zero diverges, so that term must survive simplification
        if not np.any(L[k]) and act is not Act.RECIPROCAL:
            continue
        if c == 0.0 and np.any(L[k]):
            continue
        terms.append((act.value, tuple(float(v) for v in L[k]), c))
    return MeltingLaw(float(w[12]), terms, provenance)


@dataclass
class MeltRun:
    p: float
    result: GaResult
    laws: list[MeltingLaw]

    @property
    def best_law(self) -> MeltingLaw:
        return self.laws[0]


def evolve_melting_laws(dataset: MeltDataset, ga_cfg: GaConfig, p_values,
                        train_cfg: TrainConfig | None = None, objective_kw: dict | None = None,
                        executor=None) -> list[MeltRun]:
    """One GA run per parsimony weight; laws are read off each hall of fame."""
    top = MeltTopology()
    train_cfg = train_cfg or TrainConfig()
    runs = []
    for p in p_values:
        res = run_ga(ga_cfg, melt_objective(p, **(objective_kw or {})), dataset, top, None,
                     train_cfg, executor=executor)
        laws = []
        for ind in res.hall_of_fame:
            law = extract_law(ind.network)
            law.genome_id = ind.id
            law.constants = {"p": p, "complexity": ind.complexity, "test_mse": ind.e_test}
            laws.append(law)
        runs.append(MeltRun(p, res, laws))
    return runs


# --------------------------------------------------------------------------- pareto


@dataclass
class ParetoPoint:
    complexity: float
    test_rmse: float
    genome_id: str = ""
    dominated: bool = False
    label: str = ""


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return (a.complexity <= b.complexity and a.test_rmse <= b.test_rmse
            and (a.complexity < b.complexity or a.test_rmse < b.test_rmse))


def pareto_front(points) -> tuple[list[ParetoPoint], list[ParetoPoint]]:
    """Split into (front, dominated), both sorted by (complexity, rmse).

    Points that tie on both axes never dominate each other, so duplicates of a
    front point all stay on the front. Sets the ``dominated`` flag in place.
    """
    pts = sorted(points, key=lambda q: (q.complexity, q.test_rmse))
    front, dominated = [], []
    best_rmse = math.inf  # lowest rmse among strictly lower complexities
    i = 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j].complexity == pts[i].complexity:
            j += 1
        group = pts[i:j]
        group_min = group[0].test_rmse
        for q in group:
            q.dominated = not (q.test_rmse == group_min and group_min < best_rmse)
            (dominated if q.dominated else front).append(q)
        best_rmse = min(best_rmse, group_min)
        i = j
    return front, dominated


def brute_force_front(points) -> list[ParetoPoint]:
    return [q for q in points if not any(dominates(o, q) for o in points if o is not q)]


def points_from_runs(runs: list[MeltRun]) -> list[ParetoPoint]:
    pts, seen = [], set()
    for run in runs:
        for ind in run.result.hall_of_fame:
            if ind.id in seen or not math.isfinite(ind.e_test):
                continue
            seen.add(ind.id)
            pts.append(ParetoPoint(ind.complexity, math.sqrt(ind.e_test), ind.id))
    return pts


def lindemann_point(dataset: MeltDataset, train_cfg: TrainConfig | None = None) -> ParetoPoint:
    """Score the Lindemann-form genome on the same split and objective terms."""
    from pnn.evolve import score
    from pnn.library import lindemann_genome

    ind: ScoredIndividual = score(lindemann_genome(), dataset, melt_objective(),
                                  train_cfg or TrainConfig(), MeltTopology())
    return ParetoPoint(ind.complexity, math.sqrt(ind.e_test), ind.id, label="Lindemann")


def lindemann_placement(points, lind: ParetoPoint) -> dict:
    """Report whether the Lindemann point is on the front of ``points + [lind]``."""
    others = [ParetoPoint(q.complexity, q.test_rmse, q.genome_id, label=q.label)
              for q in points if q.genome_id != lind.genome_id]
    target = ParetoPoint(lind.complexity, lind.test_rmse, lind.genome_id, label="Lindemann")
    front, _ = pareto_front(others + [target])
    beaters = [q.genome_id for q in others if dominates(q, target)]
    return {"on_front": any(q is target for q in front), "dominated_by": beaters,
            "complexity": target.complexity, "test_rmse": target.test_rmse}


def write_pareto_csv(points, path) -> None:
    front, _ = pareto_front(points)
    on = {id(q) for q in front}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARETO_HEADER)
        for q in sorted(points, key=lambda q: (q.complexity, q.test_rmse)):
            w.writerow([q.genome_id, q.complexity, repr(float(q.test_rmse)),
                        "true" if id(q) in on else "false"])


# --------------------------------------------------------------------------- synthetic corpora


def synthetic_records(n: int, seed: int = 0, law: str = "B", noise: float = 0.01,
                      C: float = 0.01) -> list[MaterialRecord]:
    """Random but physically plausible materials whose T_m follows a chosen law
    exactly, times (1 + noise * N(0, 1)). ``law`` is "A", "B", "C",
    "Lindemann" or "constant" (y = 20)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        G = rng.uniform(5, 200) * GPA
        K = G * rng.uniform(1.2, 4.0)
        rho = rng.uniform(1500, 20000)
        vol = rng.uniform(8, 40) * ANGSTROM3
        mass = rho * vol * rng.uniform(0.8, 1.2)
        probe = compute_features(MaterialRecord(f"syn{i}", 1.0, K, G, rho, vol, mass))
        if law == "constant":
            tm = 20.0 * probe.theta0
        else:
            tm = evaluate_published_law(law, probe, C=C)
        tm *= 1.0 + noise * rng.standard_normal()
        out.append(MaterialRecord(f"syn{i}", float(tm), K, G, rho, vol, mass))
    return out


# --------------------------------------------------------------------------- REST client


DEFAULT_FIELD_MAP = {
    "name": "name", "T_m_K": "T_m_K", "K_GPa": "K_GPa", "G_GPa": "G_GPa",
    "rho_kgm3": "rho_kgm3", "vol_per_atom_A3": "vol_per_atom_A3", "mass_amu": "mass_amu",
}
_MISSING_LABEL = {"T_m_K": "T_m", "K_GPa": "K", "G_GPa": "G", "rho_kgm3": "rho",
                  "vol_per_atom_A3": "vol_per_atom", "mass_amu": "mass"}


@dataclass
class FetchConfig:
    cache_dir: str | None = None
    timeout: float = 10.0
    max_retries: int = 3
    backoff: float = 0.5
    field_map: dict = field(default_factory=lambda: dict(DEFAULT_FIELD_MAP))


def _dig(doc, path: str):
    cur = doc
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return None
        cur = cur[part]
    return cur


def _record_from_json(mid: str, doc: dict, fmap: dict) -> MaterialRecord:
    row = {}
    for col in CSV_HEADER:
        val = _dig(doc, fmap.get(col, col))
        if val is None:
            if col == "name":
                val = mid
            else:
                raise ValueError(f"missing property: {_MISSING_LABEL[col]}")
        row[col] = str(val)
    rec = _record_from_row(row)
    probs = rec.problems()
    if probs:
        raise ValueError("; ".join(probs))
    return rec


def fetch_materials(endpoint: str, api_key: str, material_ids, cfg: FetchConfig | None = None,
                    sleep=time.sleep) -> tuple[list[MaterialRecord], list[Rejection]]:
    """GET ``{endpoint}/{id}`` with bearer auth for each id.

    Responses are cached as ``{cache_dir}/{id}.json`` and cached ids never hit
    the network. Transport errors and 5xx/429 responses are retried with
    exponential backoff; anything still failing rejects that id only.
    """
    cfg = cfg or FetchConfig()
    cache = Path(cfg.cache_dir) if cfg.cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    records, rejected = [], []
    for mid in material_ids:
        try:
            doc = _cached_or_fetch(endpoint, api_key, mid, cfg, cache, sleep)
            records.append(_record_from_json(mid, doc, cfg.field_map))
        except (ValueError, OSError) as exc:
            rejected.append(Rejection(None, mid, str(exc)))
    return records, rejected


def _cached_or_fetch(endpoint, api_key, mid, cfg, cache, sleep) -> dict:
    path = cache / f"{mid}.json" if cache else None
    if path and path.exists():
        return json.loads(path.read_text())
    url = f"{endpoint.rstrip('/')}/{urllib.request.quote(mid)}"
    req = urllib.request.Request(url, headers={"Authorization": f"Bearer {api_key}",
                                               "Accept": "application/json"})
    last = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            sleep(cfg.backoff * 2 ** (attempt - 1))
        try:
            with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
                doc = json.loads(resp.read().decode())
            break
        except urllib.error.HTTPError as exc:
            if exc.code in (401, 403):
                raise ValueError(f"auth failure (HTTP {exc.code})") from None
            if exc.code == 404:
                raise ValueError("not found (HTTP 404)") from None
            last = f"HTTP {exc.code}"
            if exc.code != 429 and exc.code < 500:
                raise ValueError(last) from None
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            last = f"transport error: {getattr(exc, 'reason', exc)}"
        except json.JSONDecodeError:
            raise ValueError("malformed JSON response") from None
    else:
        raise ValueError(f"{last} after {cfg.max_retries + 1} attempts")
    if path:
        path.write_text(json.dumps(doc))
    return doc


def features_table(feats) -> list[dict]:
    return [{**asdict(f), "x1": f.x1, "x2": f.x2, "x3": f.x3, "y": f.y} for f in feats]
