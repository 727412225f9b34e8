import json
import logging
from pathlib import Path

import numpy as np
import pytest

from conftest import article, write_corpus
from meshforge.clusters import Clustering
from meshforge.config import load_config
from meshforge.exports import read_table
from meshforge.ontology import article_sa, read_ontology
from meshforge.pipeline import (
    Cache,
    MissingArtifact,
    Projector,
    StageError,
    export_plotdata,
    heatmap_order,
    run_pipeline,
)
from meshforge.cooccur import CoocMatrix
from meshforge.synthgen import PlantedSpec, generate


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    spec = PlantedSpec.with_blocks(3, 5, years=(1970, 2018), articles_per_year=100, seed=1)
    g = generate(spec, d / "syn")
    return g


def cfg_for(g, **over):
    inp = {"corpus": str(g.corpus), "ontology": str(g.ontology), **over.pop("input", {})}
    return load_config(None, {"input": inp, **over})


def exports(out: Path):
    return sorted(p for p in out.rglob("*") if p.is_file() and ".cache" not in p.parts)


def test_end_to_end_smoke_and_schema(small, tmp_path):
    g = generate(PlantedSpec.with_blocks(2, 5, years=(2000, 2009), articles_per_year=10, seed=3), tmp_path / "syn")
    cfg = cfg_for(g, input={"years": [2000, 2009]}, cooccur={"periods": [[2000, 2004], [2005, 2009]]})
    res = run_pipeline(cfg, tmp_path / "out")
    assert res.manifest["status"] == "complete"
    out = tmp_path / "out"
    names = {p.relative_to(out).as_posix() for p in exports(out)}
    for required in (
        "run_manifest.json",
        "corpus_stats.json",
        "matrices/L2_2000-2009.csv",
        "matrices/L1_2000-2004_edges.tsv",
        "matrices/L2_2000-2009_mst.json",
        "clusters/L2_annual.json",
        "clusters/L2_cluster_sizes.csv",
        "bridges/bridge_series.csv",
        "bridges/emerging_bridges.json",
        "continuity/L2_continuity.csv",
        "continuity/L2_continuity_hist.csv",
        "continuity/L2_cliques.json",
        "diversity/articles.csv",
        "diversity/yearly.csv",
        "diversity/team_year.csv",
        "diversity/journal_ranking.csv",
        "diversity/trends.json",
        "diversity/trend_bands.csv",
        "diversity/fx.csv",
        "diversity/histograms.csv",
    ):
        assert required in names, required
    for p in exports(out):
        head = p.read_text().splitlines()
        if p.suffix == ".json":
            assert json.loads(p.read_text())["schema"].startswith("meshforge.")
        else:
            assert head[0].startswith("# schema: meshforge."), p
    _, header, rows = read_table(out / "diversity/articles.csv")
    assert header == ["pmid", "year", "journal", "team_group", "f_d", "level"]
    assert len(rows) == 100


def test_projector_matches_article_sa(small):
    tree = read_ontology(small.ontology)
    proj = Projector(tree)
    rng = np.random.default_rng(0)
    ids = sorted(tree.descriptors)
    arts = [list(rng.choice(ids, size=rng.integers(0, 6))) for _ in range(50)]
    desc = np.array([proj.index[d] for a in arts for d in a], dtype=np.int64)
    lens = np.array([len(a) for a in arts])
    for level in (1, 2):
        ref = np.array([article_sa(tree, a, level).counts for a in arts])
        assert np.array_equal(proj.counts(level, desc, lens), ref)


def test_rerun_hits_cache_and_is_identical(small, tmp_path):
    cfg = cfg_for(small)
    run_pipeline(cfg, tmp_path / "a", tmp_path / "cache")
    first = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in exports(tmp_path / "a")}
    res = run_pipeline(cfg, tmp_path / "b", tmp_path / "cache")
    stages = res.manifest["stages"]
    assert all(stages[s]["cache_hit"] for s in ("accumulate", "cluster", "bridges", "continuity", "diversity"))
    second = {p.relative_to(tmp_path / "b"): p.read_bytes() for p in exports(tmp_path / "b")}
    first.pop(Path("run_manifest.json"))
    second.pop(Path("run_manifest.json"))
    assert first == second


def test_config_change_invalidates_downstream_only(small, tmp_path):
    cache = tmp_path / "cache"
    run_pipeline(cfg_for(small), tmp_path / "a", cache)
    res = run_pipeline(cfg_for(small, bridges={"top_rank": 5}), tmp_path / "b", cache)
    hits = {s: v["cache_hit"] for s, v in res.manifest["stages"].items() if "cache_hit" in v}
    assert hits == {"accumulate": True, "cluster": True, "bridges": False, "continuity": True, "diversity": True}


def test_corrupted_cache_entry_recomputed(small, tmp_path, caplog):
    cache = tmp_path / "cache"
    first = run_pipeline(cfg_for(small), tmp_path / "a", cache, stages=["cluster"])
    key = first.manifest["stages"]["cluster"]["key"]
    entry = Cache(cache).path("cluster", key)
    raw = bytearray(entry.read_bytes())
    raw[-10] ^= 0xFF
    entry.write_bytes(bytes(raw))
    with caplog.at_level(logging.WARNING, logger="meshforge.pipeline"):
        res = run_pipeline(cfg_for(small), tmp_path / "b", cache, stages=["cluster"])
    assert res.manifest["stages"]["accumulate"]["cache_hit"] is True
    assert res.manifest["stages"]["cluster"]["cache_hit"] is False
    assert any("corrupt" in r.message for r in caplog.records)
    assert (tmp_path / "a/clusters/L2_annual.json").read_bytes() == (tmp_path / "b/clusters/L2_annual.json").read_bytes()


def test_jobs_do_not_change_results(small, tmp_path):
    cfg = cfg_for(small, run={"unit_bytes": 50_000})
    run_pipeline(cfg, tmp_path / "j1", jobs=1)
    run_pipeline(cfg, tmp_path / "j3", jobs=3)
    for p in exports(tmp_path / "j1"):
        rel = p.relative_to(tmp_path / "j1")
        if rel.name != "run_manifest.json":
            assert p.read_bytes() == (tmp_path / "j3" / rel).read_bytes(), rel


def test_manifest_contents(small, tmp_path):
    res = run_pipeline(cfg_for(small), tmp_path / "out", stages=["diversity"])
    m = json.loads((tmp_path / "out/run_manifest.json").read_text())
    assert m["schema"] == "meshforge.run_manifest/1"
    assert m["seed"] == 42 and m["tool_version"] == "0.1.0"
    assert len(m["inputs"]["corpus_sha256"]) == 64 and m["inputs"]["ontology_digest"]
    assert set(m["stages"]) == {"load-inputs", "accumulate", "diversity"}
    assert m["stages"]["accumulate"]["records"]["articles_kept"] == 4900
    assert res.artifacts["accumulate"].stats["articles_read"] == 4900


def test_stage_failure_marks_incomplete(small, tmp_path):
    cfg = cfg_for(small, bridges={"level": 1}, cooccur={"levels": [2]})
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg, tmp_path / "out")
    assert exc.value.stage == "bridges"
    assert (tmp_path / "out/INCOMPLETE").exists()
    m = json.loads((tmp_path / "out/run_manifest.json").read_text())
    assert m["status"] == "incomplete" and m["failed_stage"] == "bridges"
    run_pipeline(cfg_for(small), tmp_path / "out")
    assert not (tmp_path / "out/INCOMPLETE").exists()


def test_unresolved_and_empty_articles_counted(tmp_path, fixtures):
    p = write_corpus(
        tmp_path / "c.jsonl",
        [
            article(1, 2000, ["D009765", "D012867"]),
            article(2, 2000, ["D999999"]),
            article(3, 2001, ["D009765", ("D003920", False)]),
        ],
    )
    cfg = load_config(None, {"input": {"corpus": str(p), "ontology": str(fixtures / "ontology.tsv"), "years": [2000, 2001]}})
    res = run_pipeline(cfg, tmp_path / "out", stages=["accumulate"])
    st = res.artifacts["accumulate"].stats
    assert st["unresolved_mesh_refs"] == 1 and st["empty_sa_articles"] == 1
    acc = res.artifacts["accumulate"]
    m = acc.matrix(1, (2000, 2001))
    assert m.article_count == 2
    assert m.total_mass() == pytest.approx(2.0)
    # article 1: {A, C, E, G} -> 6 pairs of 1/6; article 3: {C, E, G} -> 3 pairs of 1/3
    w = m.pair_weights()
    assert w[m.index("C"), m.index("E")] == pytest.approx(1 / 6 + 1 / 3)


# ---- plot data


def test_heatmap_order_sort_oracle():
    labels = ["a", "b", "c", "d", "e"]
    m = CoocMatrix.zeros(2, labels)
    m.occurrences = np.array([5, 9, 1, 9, 3])
    c = Clustering.from_groups([["c", "a", "d"], ["e", "b"]])
    oracle = []
    for cid in sorted(set(c.assignment.values())):
        members = [x for x in labels if c.assignment[x] == cid]
        oracle += sorted(members, key=lambda x: (-m.occurrences[labels.index(x)], x))
    assert heatmap_order(m, c) == oracle == ["d", "a", "c", "b", "e"]


def test_export_plotdata(small, tmp_path):
    cfg = cfg_for(small)
    run_pipeline(cfg, tmp_path / "out")
    pdir = export_plotdata(tmp_path / "out")
    _, header, rows = read_table(pdir / "fx_series.csv")
    assert [int(r[0]) for r in rows] == list(range(1970, 2019))
    _, header, rows = read_table(pdir / "heatmap_L2_1970-2018.csv")
    assert header[:3] == ["label", "cluster_id", "prevalence"]
    cids = [int(r[1]) for r in rows]
    assert cids == sorted(cids)
    for cid in set(cids):
        prev = [int(r[2]) for r in rows if int(r[1]) == cid]
        assert prev == sorted(prev, reverse=True)
    assert header[3:] == [r[0] for r in rows]
    for name in ("bridge_rank_series.csv", "fd_series.csv", "fd_histograms.csv", "fd_windows.csv", "team_trends.csv"):
        assert (pdir / name).exists()


def test_plotdata_empty_bridge_series(small, tmp_path):
    run_pipeline(cfg_for(small), tmp_path / "out", stages=["cluster"])
    pdir = export_plotdata(tmp_path / "out")
    lines = (pdir / "bridge_rank_series.csv").read_text().splitlines()
    assert lines == ["# schema: meshforge.bridge_rank_series/1", "node,year,rank,norm_rank,norm_rank_smoothed"]


def test_plotdata_missing_artifacts(small, tmp_path):
    with pytest.raises(MissingArtifact, match="meshforge run"):
        export_plotdata(tmp_path / "nothing")
    run_pipeline(cfg_for(small), tmp_path / "out", stages=["diversity"])
    with pytest.raises(MissingArtifact, match="meshforge cluster"):
        export_plotdata(tmp_path / "out")
