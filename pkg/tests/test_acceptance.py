"""Acceptance criteria 1-11, each checked at its stated tolerance and time limit.

Run with ``pytest tests/test_acceptance.py`` (or ``python tests/test_acceptance.py``);
the terminal summary ends with one PASS/FAIL line per criterion.
"""
import filecmp
import json
import os
import subprocess
import sys
import threading
import time
from fractions import Fraction

import numpy as np
import psutil
import pytest

from conftest import FIXTURES, random_counts
from networkx.algorithms.community import modularity as nx_modularity
from oracles import always_together, exhaustive_best_modularity, naive_beta, pair_graph
from meshforge.bridges import bridge_scores, bridge_series, detect_emerging
from meshforge.cli import main
from meshforge.clusters import CliqueCatalog, Clustering, continuity, louvain, stable_cliques
from meshforge.config import load_config
from meshforge.cooccur import CoocAccumulator, CoocMatrix
from meshforge.diversity import f_d, f_d_batch, f_d_bound, f_d_matrix, trend_fit
from meshforge.ontology import project_l1, project_l2, read_ontology
from meshforge.pipeline import run_pipeline
from meshforge.synthgen import BridgePlant, PlantedSpec, generate

MEGA = 1_000_000


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def _labels(n):
    return [f"N{i}" for i in range(n)]


# ---- 1. projection


@pytest.mark.acceptance(1, "Obesity projection")
def test_c01_obesity_projection():
    with Clock() as clk:
        tree = read_ontology(FIXTURES / "ontology.tsv")
        assert project_l1(tree, "D009765").as_dict() == {"C": 2, "E": 1, "G": 1}
        assert set(project_l2(tree, "D009765").as_dict()) == {"C18", "C23", "E01", "G07"}
    assert clk.seconds < 1


# ---- 2-3. diversity


@pytest.mark.acceptance(2, "diversity worked examples")
def test_c02_diversity_worked_examples():
    with Clock() as clk:
        for fn in (f_d, f_d_matrix):
            assert fn([1, 2, 0, 0, 1, 0]) == 5 / 11
            assert fn([0, 4, 0, 0, 0, 0]) == 0
            assert fn([1] * 10) == 9 / 11
        # the same values in exact rational arithmetic
        c = [Fraction(x) for x in (1, 2, 0, 0, 1, 0)]
        n2, s2 = sum(c) ** 2, sum(x * x for x in c)
        assert (n2 - s2) / (n2 + s2) == Fraction(5, 11)
    assert clk.seconds < 1


@pytest.mark.acceptance(3, "diversity property suite on 1e5 vectors")
def test_c03_diversity_properties():
    rng = np.random.default_rng(2024)
    n_vec = 100_000
    with Clock() as clk:
        dims = rng.integers(1, 31, size=n_vec)
        bad_matrix = bad_blau = bad_bound = 0
        for d in np.unique(dims):
            rows = int((dims == d).sum())
            c = random_counts(rng, rows, int(d), max_count=9, density=0.5)
            closed = f_d_batch(c)
            # matrix path, one vector at a time
            mat = np.fromiter((f_d_matrix(v) for v in c), dtype=np.float64, count=rows)
            bad_matrix += int((np.abs(mat - closed) > 1e-12).sum())
            p = c / c.sum(axis=1, keepdims=True)
            blau = 1.0 - (p * p).sum(axis=1)
            bad_blau += int((np.abs(closed - blau / (2.0 - blau)) > 1e-12).sum())
            bound = f_d_bound(int(d))
            bad_bound += int(((closed < 0) | (closed > bound + 1e-15)).sum())
            # any uniform vector attains the bound
            for k in (1, 3, 17):
                if abs(f_d(np.full(int(d), k)) - bound) > 1e-12:
                    bad_bound += 1
    print(f"matrix mismatches {bad_matrix}, Blau mismatches {bad_blau}, bound violations {bad_bound}")
    assert bad_matrix == 0 and bad_blau == 0 and bad_bound == 0
    assert clk.seconds < 10


# ---- 4. co-occurrence


@pytest.mark.acceptance(4, "co-occurrence mass and shard merge")
def test_c04_cooccurrence_normalization():
    rng = np.random.default_rng(7)
    n, d = 10_000, 40
    labels = [f"X{i:02d}" for i in range(d)]
    with Clock() as clk:
        c = random_counts(rng, n, d, density=0.1)
        seq = CoocAccumulator(2, labels)
        for row in c:
            seq.add(row)
        sequential = seq.result()
        cuts = np.sort(rng.choice(np.arange(1, n), size=7, replace=False))
        shards = []
        for part in np.split(c, cuts):
            acc = CoocAccumulator(2, labels)
            acc.add_batch(part)
            shards.append(acc)
        merged = shards[0]
        for acc in shards[:0:-1]:
            merged = merged.merge(acc)
        merged = merged.result()
    assert abs(sequential.total_mass() - n) <= 1e-9
    assert abs(merged.total_mass() - n) <= 1e-9
    assert merged.article_count == n
    assert np.abs(merged.weights - sequential.weights).max() <= 1e-12
    assert clk.seconds < 10


# ---- 5. Louvain


def _planted_two_block(rng, n):
    k = int(rng.integers(2, n - 1))
    w = np.triu(rng.uniform(0.0, 0.15, (n, n)) * (rng.random((n, n)) < 0.5), 1)
    for blk in (range(k), range(k, n)):
        for i in blk:
            for j in blk:
                if i < j:
                    w[i, j] = rng.uniform(0.6, 1.4)
    return w + w.T


def _random_graph(rng, n):
    w = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.6), 0)
    w = w + np.triu(w, 1).T
    if not w.any():
        w[0, 1] = w[1, 0] = 1.0
    return w


@pytest.mark.acceptance(5, "Louvain against exhaustive optimum")
def test_c05_louvain_oracle():
    rng = np.random.default_rng(11)
    worst_gap, worst_cert = 0.0, 0.0
    with Clock() as clk:
        for g in range(50):
            n = int(rng.integers(4, 9))
            planted = g % 2 == 0
            w = _planted_two_block(rng, n) if planted else _random_graph(rng, n)
            c = louvain(CoocMatrix.from_pair_weights(w, _labels(n)), seed=g)
            graph = pair_graph(w, _labels(n)).subgraph(c.assignment)
            ref = nx_modularity(graph, [set(v) for v in c.clusters().values()], weight="weight")
            worst_cert = max(worst_cert, abs(c.modularity - ref))
            if planted:
                worst_gap = max(worst_gap, exhaustive_best_modularity(w) - c.modularity)
    print(f"largest optimum gap {worst_gap:.3g}, largest certificate error {worst_cert:.3g}")
    assert worst_gap <= 1e-9
    assert worst_cert <= 1e-9
    assert clk.seconds < 60


# ---- 6. bridges


@pytest.mark.acceptance(6, "bridge score oracle")
def test_c06_bridge_oracle():
    rng = np.random.default_rng(5)
    with Clock() as clk:
        w = np.zeros((4, 4))
        w[0, 1] = w[1, 0] = 5.0
        w[2, 3] = w[3, 2] = 0.5
        w[0, 2] = w[2, 0] = 2.0
        w[1, 2] = w[2, 1] = 1.0
        four = ["n1", "n2", "n3", "n4"]
        s = bridge_scores(CoocMatrix.from_pair_weights(w, four), Clustering.from_groups([four[:2], four[2:]]))
        assert [s.beta[v] for v in four] == [2 / 3, 1 / 3, 1.0, 0.0]

        worst, worst_scale = 0.0, 0.0
        for _ in range(100):
            n = int(rng.integers(3, 25))
            labs = _labels(n)
            w = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.5), 0)
            w = w + np.triu(w, 1).T
            k = int(rng.integers(1, min(n, 5) + 1))
            groups = [[] for _ in range(k)]
            for lab in labs:
                groups[int(rng.integers(0, k))].append(lab)
            c = Clustering.from_groups([g for g in groups if g])
            beta = bridge_scores(CoocMatrix.from_pair_weights(w, labs), c).beta
            ref = naive_beta(w, labs, c.assignment)
            worst = max(worst, max(abs(beta[v] - ref[v]) for v in labs))
            scaled = bridge_scores(CoocMatrix.from_pair_weights(w * rng.uniform(1e-3, 1e3), labs), c).beta
            worst_scale = max(worst_scale, max(abs(beta[v] - scaled[v]) for v in labs))
    print(f"oracle error {worst:.3g}, rescaling error {worst_scale:.3g}")
    assert worst <= 1e-9 and worst_scale <= 1e-9
    assert clk.seconds < 30


# ---- 7. emerging bridges


def _bridge_run(spec, root, tag):
    g = generate(spec, root / f"syn-{tag}")
    cfg = load_config(
        None,
        {
            "input": {"corpus": str(g.corpus), "ontology": str(g.ontology)},
            "cooccur": {"levels": [2], "annual_exports": False},
        },
    )
    return run_pipeline(cfg, root / f"out-{tag}", stages=["bridges"]).artifacts["bridges"]


@pytest.mark.acceptance(7, "planted emerging bridge recovered, no false alarms")
def test_c07_emerging_bridge_recovery(tmp_path):
    with Clock() as clk:
        spec = PlantedSpec.with_blocks(3, 12, articles_per_year=1000, seed=3)
        planted = spec.blocks[0][-1]
        spec.bridges = [BridgePlant(planted)]
        res = _bridge_run(spec, tmp_path, "planted")
        assert [e.node for e in res.emerging] == [planted]
        # all four criteria recomputed on the returned node's series
        (hit,) = res.emerging
        span = spec.years[1] - spec.years[0] + 1
        assert span == 49
        assert hit.mean_rank <= 20 and hit.years_covered >= 0.5 * span
        assert hit.p_value < 0.01 and abs(hit.slope) > 0.1
        series = bridge_series(res.scores)
        assert [e.node for e in detect_emerging(series, spec.years)] == [planted]
        ser = series[planted]
        trend = ser.trend("rank")
        assert np.mean(ser.rank) <= 20 and len(ser.years) >= 0.5 * span
        assert trend.p_value < 0.01 and abs(trend.slope) > 0.1

        clean = 0
        for seed in range(100):
            quiet = PlantedSpec.with_blocks(3, 12, articles_per_year=1000, seed=1000 + seed)
            found = _bridge_run(quiet, tmp_path, f"q{seed}").emerging
            clean += not found
            for sub in ("syn", "out"):
                for p in sorted((tmp_path / f"{sub}-q{seed}").rglob("*"), reverse=True):
                    p.unlink() if p.is_file() else p.rmdir()
    print(f"no-bridge seeds without detections: {clean}/100")
    assert clean >= 95
    assert clk.seconds < 300


# ---- 8. cliques


def _random_years(rng, n, n_years):
    nodes = [f"v{i:02d}" for i in range(n)]
    out = {}
    for y in range(n_years):
        k = int(rng.integers(1, 7))
        groups = [[] for _ in range(k)]
        for v in nodes:
            if rng.random() > 0.1:
                groups[int(rng.integers(0, k))].append(v)
        out[2000 + y] = Clustering.from_groups([g for g in groups if g], 2000 + y)
    return out


@pytest.mark.acceptance(8, "stable cliques and continuity")
def test_c08_clique_continuity():
    rng = np.random.default_rng(8)
    mismatches = 0
    with Clock() as clk:
        for _ in range(100):
            years = _random_years(rng, int(rng.integers(2, 51)), 10)
            present = sorted({v for c in years.values() for v in c.assignment})
            cat = stable_cliques(years)
            mismatches += sorted(cat.cliques) != always_together([c.assignment for c in years.values()], present)
        cat = CliqueCatalog([("A",), ("B",), ("C",)], {"A": 0, "B": 1, "C": 2})
        t0 = Clustering.from_groups([["A", "B"], ["C"]])
        t1 = Clustering.from_groups([["A", "C"], ["B"]])
        assert continuity(cat, t0, t0, "A") == 0
        assert continuity(cat, t0, t1, "A") == 2 / 3
        partial = CliqueCatalog([("B",), ("C",)], {"B": 1, "C": 2})
        assert continuity(partial, t1, t0, "A") == 1
    assert mismatches == 0
    assert clk.seconds < 30


# ---- 9. trend fit


@pytest.mark.acceptance(9, "cubic trend fit")
def test_c09_trend_fit():
    with Clock() as clk:
        t = np.arange(1970, 2019)
        coef = np.array([0.38, 3.1e-3, -4.0e-5, 2.2e-6])
        x = t - 1990.0
        y = coef[0] + coef[1] * x + coef[2] * x**2 + coef[3] * x**3
        fit = trend_fit(t, y, center=1990)
        assert np.abs(fit.coefficients - coef).max() <= 1e-9
        four = trend_fit([1975, 1990, 2004, 2018], [0.31, 0.52, 0.47, 0.6])
        assert four.dof == 0
        assert four.rss == 0.0
    assert clk.seconds < 1


# ---- 10. performance


def _run_measured(argv):
    """Wall time and peak summed RSS of a command and all its descendants."""
    t0 = time.perf_counter()
    proc = psutil.Popen(argv, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
    peak = 0
    done = threading.Event()

    def sample():
        nonlocal peak
        while not done.is_set():
            try:
                procs = [proc] + proc.children(recursive=True)
                peak = max(peak, sum(p.memory_info().rss for p in procs if p.is_running()))
            except psutil.Error:
                pass
            time.sleep(0.02)

    th = threading.Thread(target=sample, daemon=True)
    th.start()
    _, err = proc.communicate()
    done.set()
    th.join()
    return proc.returncode, time.perf_counter() - t0, peak, err.decode()


@pytest.mark.slow
@pytest.mark.acceptance(10, "1M-article pipeline time, memory and cached rerun")
def test_c10_performance(tmp_path):
    spec = PlantedSpec.with_blocks(5, 40, articles_per_year=20409, seed=10)
    g = generate(spec, tmp_path / "syn")
    assert g.n_articles >= MEGA
    jobs = str(min(4, os.cpu_count() or 1))
    exe = [sys.executable, "-m", "meshforge.cli"]
    argv = exe + ["run", "--corpus", str(g.corpus), "--ontology", str(g.ontology), "--out-dir", str(tmp_path / "out"), "--jobs", jobs]
    code, secs, rss, err = _run_measured(argv)
    assert code == 0, err
    code2, secs2, _, err2 = _run_measured(argv)
    assert code2 == 0, err2
    manifest = json.loads((tmp_path / "out/run_manifest.json").read_text())
    print(
        f"{g.n_articles} articles on {jobs} worker(s): run {secs:.1f} s, peak RSS {rss / 2**20:.0f} MiB, "
        f"cached rerun {secs2:.1f} s"
    )
    assert all(s["cache_hit"] for k, s in manifest["stages"].items() if k != "load-inputs")
    assert secs < 60
    assert rss < 2**30
    assert secs2 < 5


# ---- 11. reproducibility


def _exports(root):
    return sorted(
        p.relative_to(root)
        for p in root.rglob("*")
        if p.is_file() and ".cache" not in p.parts and p.name != "run_manifest.json"
    )


def _manifest_core(path):
    doc = json.loads(path.read_text())
    doc.pop("cache_dir")
    for stage in doc["stages"].values():
        for key in ("compute_seconds", "export_seconds", "seconds"):
            stage.pop(key, None)
    return doc


@pytest.mark.acceptance(11, "byte-identical exports from two runs")
def test_c11_reproducibility(tmp_path):
    g = generate(PlantedSpec.with_blocks(3, 8, years=(1990, 2018), articles_per_year=300, seed=11), tmp_path / "syn")
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'[input]\ncorpus = "{g.corpus}"\nontology = "{g.ontology}"\nyears = [1990, 2018]\n')
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / name), "--log-level", "WARNING"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = _exports(a)
    assert files == _exports(b) and len(files) > 20
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(p) for p in files], shallow=False)
    assert mismatch == [] and errors == []
    assert _manifest_core(a / "run_manifest.json") == _manifest_core(b / "run_manifest.json")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
