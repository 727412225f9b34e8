"""End-to-end pipeline: ingest -> project -> accumulate -> cluster -> metrics.

Stages exchange data through a content-addressed cache: each stage key is
a digest of its upstream key and the config section it reads, so a rerun
with unchanged inputs loads every stage from disk.  The corpus is read in
fixed byte units whose partial results are merged in unit order, which
keeps floating-point sums identical for any ``jobs`` value.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import pickle
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bridges import (
    bridge_scores,
    bridge_series,
    detect_emerging,
    ego_subnetwork,
    moving_average,
    write_bridge_series,
    write_emerging,
)
from .clusters import Clustering, cluster_size_series, continuity_table, louvain, stable_cliques
from .config import config_hash
from .cooccur import CoocAccumulator, CoocMatrix, mst_hierarchy
from .corpus import CorpusStats, ingest_file, shard_ranges
from .diversity import (
    CORE_BRANCHES,
    HIST_BINS,
    GroupStats,
    TeamGroup,
    f_d_batch,
    journal_ranking,
    team_group_codes,
    trend_fit,
    window_start,
)
from .exports import read_table, write_json, write_table
from .ontology import OntologyTree, read_ontology

logger = logging.getLogger(__name__)

__all__ = ["StageError", "Cache", "run_pipeline", "export_plotdata", "file_digest", "STAGES"]

STAGES = ("accumulate", "cluster", "bridges", "continuity", "diversity")
_DEPENDS = {
    "accumulate": (),
    "cluster": ("accumulate",),
    "bridges": ("cluster",),
    "continuity": ("cluster",),
    "diversity": ("accumulate",),
}
TEAM_GROUPS = [g.value for g in TeamGroup]
FX_MODES = ("J", "L", "J+L")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 22), b""):
            h.update(block)
    return h.hexdigest()


class Cache:
    """Pickle store keyed by stage digest, with a payload checksum header."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, stage: str, key: str) -> Path:
        return self.root / f"{stage}-{key[:32]}.pkl"

    def get(self, stage: str, key: str):
        p = self.path(stage, key)
        if not p.exists():
            return None
        try:
            raw = p.read_bytes()
            digest, payload = raw[:64].decode(), raw[65:]
            if hashlib.sha256(payload).hexdigest() != digest:
                raise ValueError("checksum mismatch")
            return pickle.loads(payload)
        except Exception as err:  # any unreadable entry is recomputed
            logger.warning("cache entry %s is corrupt (%s); recomputing", p.name, err)
            return None

    def put(self, stage: str, key: str, obj) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
        p = self.path(stage, key)
        tmp = p.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(hashlib.sha256(payload).hexdigest().encode() + b"\n" + payload)
        os.replace(tmp, p)


# ---------------------------------------------------------------- accumulate


class Projector:
    """Descriptor id -> category positions, as CSR arrays per level."""

    def __init__(self, tree: OntologyTree):
        ids, _ = tree.projection_table(1)
        self.index = {d: i for i, d in enumerate(ids)}
        self.excluded = tree.excluded
        self.labels = {1: tree.l1_index, 2: tree.l2_index}
        self.csr = {}
        for level in (1, 2):
            _, rows = tree.projection_table(level)
            lens = np.array([len(r) for r in rows], dtype=np.int64)
            offsets = np.concatenate([[0], np.cumsum(lens)])
            flat = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
            self.csr[level] = (offsets, lens, flat)
        l1 = list(tree.l1_index)
        self.core_cols = [i for i, b in enumerate(l1) if b in CORE_BRANCHES]
        self.j_col = l1.index("J") if "J" in l1 else None
        self.l_col = l1.index("L") if "L" in l1 else None

    def counts(self, level: int, desc: np.ndarray, lens: np.ndarray) -> np.ndarray:
        offsets, dlens, flat = self.csr[level]
        n_art = len(lens)
        n_lab = len(self.labels[level])
        art = np.repeat(np.arange(n_art), lens)
        per = dlens[desc]
        rows = np.repeat(art, per)
        start = np.repeat(offsets[desc], per)
        within = np.arange(len(rows)) - np.repeat(np.cumsum(per) - per, per)
        cols = flat[start + within]
        return np.bincount(rows * n_lab + cols, minlength=n_art * n_lab).reshape(n_art, n_lab)


@dataclass
class UnitResult:
    stats: CorpusStats
    annual: dict
    journals: list
    arrays: dict


def _process_unit(path, byte_range, proj: Projector, inp: dict, chunk: int) -> UnitResult:
    stats = CorpusStats()
    accs = {1: {}, 2: {}}
    journal_code: dict[str, int] = {}
    cols = defaultdict(list)
    buf_desc: list[int] = []
    buf_lens: list[int] = []
    buf = defaultdict(list)
    index, excluded = proj.index, proj.excluded

    def flush():
        if not buf_lens:
            return
        lens = np.asarray(buf_lens, dtype=np.int64)
        desc = np.asarray(buf_desc, dtype=np.int64)
        c1 = proj.counts(1, desc, lens)
        c2 = proj.counts(2, desc, lens)
        years = np.asarray(buf["year"], dtype=np.int64)
        keep = c1.sum(axis=1) > 0
        stats.empty_sa_articles += int((~keep).sum())
        c1, c2, years = c1[keep], c2[keep], years[keep]
        for level, c in ((1, c1), (2, c2)):
            for y in np.unique(years):
                acc = accs[level].get(int(y))
                if acc is None:
                    acc = accs[level][int(y)] = CoocAccumulator(level, proj.labels[level], (int(y), int(y)))
                acc.add_batch(c[years == y])
        tot1 = c1.sum(axis=1)
        cols["pmid"].append(np.asarray(buf["pmid"], dtype=str)[keep])
        cols["year"].append(years.astype(np.int16))
        cols["journal"].append(np.asarray(buf["journal"], dtype=np.int32)[keep])
        cols["authors"].append(np.asarray(buf["authors"], dtype=np.int32)[keep])
        cols["fd1"].append(f_d_batch(c1))
        cols["fd2"].append(f_d_batch(c2))
        cols["n1"].append(tot1.astype(np.int32))
        cols["core"].append(c1[:, proj.core_cols].sum(axis=1).astype(np.int32))
        zero = np.zeros(len(c1), dtype=np.int32)
        cols["j"].append(c1[:, proj.j_col].astype(np.int32) if proj.j_col is not None else zero)
        cols["l"].append(c1[:, proj.l_col].astype(np.int32) if proj.l_col is not None else zero)
        buf_desc.clear()
        buf_lens.clear()
        buf.clear()

    records = ingest_file(
        path,
        major_only=inp["major_only"],
        years=tuple(inp["years"]),
        pub_types=inp["pub_types"],
        on_error=inp["on_error"],
        stats=stats,
        byte_range=byte_range,
    )
    for rec in records:
        n = 0
        for mid, _ in rec.mesh:
            d = index.get(mid)
            if d is None:
                if mid in excluded:
                    stats.excluded_mesh_refs += 1
                else:
                    stats.unresolved_mesh_refs += 1
                continue
            buf_desc.append(d)
            n += 1
        buf_lens.append(n)
        buf["pmid"].append(rec.pmid)
        buf["year"].append(rec.year)
        code = journal_code.get(rec.journal)
        if code is None:
            code = journal_code[rec.journal] = len(journal_code)
        buf["journal"].append(code)
        buf["authors"].append(rec.author_count)
        if len(buf_lens) >= chunk:
            flush()
    flush()
    annual = {lv: {y: a.result() for y, a in sorted(accs[lv].items())} for lv in accs}
    arrays = {k: np.concatenate(v) for k, v in cols.items()}
    return UnitResult(stats, annual, list(journal_code), arrays)


_WORKER_PROJ: Projector | None = None


def _init_worker(proj):
    global _WORKER_PROJ
    _WORKER_PROJ = proj


def _unit_task(args):
    path, rng, inp, chunk = args
    return _process_unit(path, rng, _WORKER_PROJ, inp, chunk)


_ARRAY_DTYPES = {
    "year": np.int16, "journal": np.int32, "authors": np.int32, "fd1": np.float64,
    "fd2": np.float64, "n1": np.int32, "core": np.int32, "j": np.int32, "l": np.int32,
}


@dataclass
class AccumulateResult:
    stats: dict
    labels: dict
    annual: dict
    journals: list
    articles: dict

    def matrix(self, level: int, span: tuple[int, int]) -> CoocMatrix:
        out = CoocMatrix.zeros(level, self.labels[level], tuple(span))
        for y, m in self.annual[level].items():
            if span[0] <= y <= span[1]:
                out = out.merge(m)
        out.window = tuple(span)
        return out


def stage_accumulate(cfg: dict, tree: OntologyTree, jobs: int = 1) -> AccumulateResult:
    inp = cfg["input"]
    path = inp["corpus"]
    size = os.path.getsize(path)
    units = shard_ranges(path, max(1, math.ceil(size / cfg["run"]["unit_bytes"])))
    proj = Projector(tree)
    chunk = cfg["run"]["chunk_articles"]
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(proj,)) as ex:
            results = list(ex.map(_unit_task, [(path, u, inp, chunk) for u in units]))
    else:
        results = [_process_unit(path, u, proj, inp, chunk) for u in units]

    stats = CorpusStats()
    annual = {1: {}, 2: {}}
    all_journals = sorted({j for r in results for j in r.journals})
    jpos = {j: i for i, j in enumerate(all_journals)}
    arrays = defaultdict(list)
    for r in results:
        stats = stats + r.stats
        for lv in (1, 2):
            for y, m in r.annual[lv].items():
                annual[lv][y] = annual[lv][y].merge(m) if y in annual[lv] else m
        remap = np.array([jpos[j] for j in r.journals], dtype=np.int32)
        for k, v in r.arrays.items():
            arrays[k].append(remap[v] if k == "journal" and len(v) else v)
    articles = {}
    for k in ("pmid", *_ARRAY_DTYPES):
        parts = arrays.get(k)
        if parts:
            articles[k] = np.concatenate(parts)
        else:
            articles[k] = np.zeros(0, dtype=_ARRAY_DTYPES.get(k, str))
    annual = {lv: dict(sorted(annual[lv].items())) for lv in annual}
    return AccumulateResult(stats.as_dict(), dict(proj.labels), annual, all_journals, articles)


# ------------------------------------------------------------------- cluster


@dataclass
class ClusterResult:
    annual: dict = field(default_factory=dict)
    periods: dict = field(default_factory=dict)
    total: dict = field(default_factory=dict)


def _full_span(cfg):
    return tuple(cfg["input"]["years"])


def stage_cluster(cfg: dict, acc: AccumulateResult) -> ClusterResult:
    cl = cfg["cluster"]
    kw = dict(seed=cl["seed"], resolution=cl["resolution"], diagonal=cl["diagonal"])
    out = ClusterResult()
    for lv in cfg["cooccur"]["levels"]:
        out.annual[lv] = {}
        for y, m in acc.annual[lv].items():
            if m.article_count > 0 and m.weights.any():
                out.annual[lv][y] = louvain(m, year=y, **kw)
        out.periods[lv] = {}
        for p in cfg["cooccur"]["periods"]:
            m = acc.matrix(lv, p)
            if m.weights.any():
                out.periods[lv][tuple(p)] = louvain(m, **kw)
        m = acc.matrix(lv, _full_span(cfg))
        if m.weights.any():
            out.total[lv] = louvain(m, **kw)
    return out


# ------------------------------------------------------------------- bridges


@dataclass
class BridgeResult:
    level: int
    scores: list
    emerging: list
    criteria: dict
    ego: dict


def stage_bridges(cfg: dict, acc: AccumulateResult, clu: ClusterResult) -> BridgeResult:
    b = cfg["bridges"]
    lv = b["level"]
    if lv not in clu.annual:
        raise ValueError(f"bridges.level {lv} is not among cooccur.levels")
    scores = [
        bridge_scores(acc.annual[lv][y], c, scope=b["scope"], year=y) for y, c in clu.annual[lv].items()
    ]
    span = tuple(b["span"] or cfg["input"]["years"])
    criteria = {
        "span": list(span),
        "top_rank": b["top_rank"],
        "min_coverage": b["min_coverage"],
        "p_max": b["p_max"],
        "min_slope": b["min_slope"],
        "on": b["on"],
        "scope": b["scope"],
    }
    found = detect_emerging(
        bridge_series(scores),
        span=span,
        top_rank=b["top_rank"],
        min_coverage=b["min_coverage"],
        p_max=b["p_max"],
        min_slope=b["min_slope"],
        on=b["on"],
    )
    nodes = b["ego_nodes"] if b["ego_nodes"] is not None else [e.node for e in found]
    ego = {}
    spans = [tuple(p) for p in cfg["cooccur"]["periods"]] + [_full_span(cfg)]
    for node in nodes:
        for sp in spans:
            m = acc.matrix(lv, sp)
            if node in m.labels and m.weights.any():
                c = clu.periods[lv].get(sp) if sp != _full_span(cfg) else clu.total.get(lv)
                ego[(node, sp)] = ego_subnetwork(m, c, node, b["ego_k"])
    return BridgeResult(lv, scores, found, criteria, ego)


# ---------------------------------------------------------------- continuity


def stage_continuity(cfg: dict, clu: ClusterResult) -> dict:
    out = {}
    years = cfg["cluster"]["clique_years"]
    for lv, annual in clu.annual.items():
        if not annual:
            continue
        sel = annual
        if years is not None:
            sel = {y: c for y, c in annual.items() if years[0] <= y <= years[1]}
        catalog = stable_cliques(sel)
        out[lv] = (catalog, continuity_table(catalog, sel))
    return out


# ----------------------------------------------------------------- diversity


def _group_stats(keys: np.ndarray, values: np.ndarray) -> dict:
    """GroupStats per distinct key, computed with bincounts."""
    if len(keys) == 0:
        return {}
    uniq, inv = np.unique(keys, return_inverse=True)
    g = len(uniq)
    count = np.bincount(inv, minlength=g)
    total = np.bincount(inv, weights=values, minlength=g)
    total_sq = np.bincount(inv, weights=values * values, minlength=g)
    zeros = np.bincount(inv, weights=(values == 0).astype(np.float64), minlength=g)
    bins = np.minimum((values * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    hist = np.bincount(inv * HIST_BINS + bins, minlength=g * HIST_BINS).reshape(g, HIST_BINS)
    return {
        uniq[i].item(): GroupStats(int(count[i]), float(total[i]), float(total_sq[i]), int(zeros[i]), hist[i])
        for i in range(g)
    }


@dataclass
class DiversityResult:
    level: int
    yearly: dict
    windows: dict
    team_year: dict
    team_window: dict
    journals: dict
    ranking: list
    fits: dict
    fx: dict
    window: int


def _fx_flags(a: dict, mode: str, d: dict) -> np.ndarray:
    n = np.maximum(a["n1"], 1).astype(np.float64)
    ok = (a["n1"] > 0) & (a["core"] / n >= d["core_min"])
    j, l = a["j"], a["l"]
    if mode == "J":
        return ok & (j / n >= d["flag_min"])
    if mode == "L":
        return ok & (l / n >= d["flag_min"])
    if d["strict_jl"]:
        return ok & (j / n >= d["flag_min"]) & (l / n >= d["flag_min"])
    return ok & (j > 0) & (l > 0) & ((j + l) / n >= d["flag_min"])


def stage_diversity(cfg: dict, acc: AccumulateResult) -> DiversityResult:
    d = cfg["diversity"]
    a = acc.articles
    fd = a["fd2"] if d["level"] == 2 else a["fd1"]
    ok = ~np.isnan(fd)
    years = a["year"].astype(np.int64)
    origin = cfg["input"]["years"][0]
    w = d["window"]
    wstart = origin + (years - origin) // w * w
    team = team_group_codes(a["authors"]).astype(np.int64)
    yearly = _group_stats(years[ok], fd[ok])
    windows = _group_stats(wstart[ok], fd[ok])
    known = ok & (team < 4)
    ty = _group_stats(team[known] * 10000 + years[known], fd[known])
    tw = _group_stats(team[known] * 10000 + wstart[known], fd[known])
    team_year = {(TEAM_GROUPS[k // 10000], k % 10000): v for k, v in ty.items()}
    team_window = {(TEAM_GROUPS[k // 10000], k % 10000): v for k, v in tw.items()}
    jstats = _group_stats(a["journal"][ok].astype(np.int64), fd[ok])
    journals = {acc.journals[k]: v for k, v in jstats.items()}
    if d["journals"]:
        with open(d["journals"], encoding="utf-8") as fh:
            wanted = {line.strip() for line in fh if line.strip() and not line.startswith("#")}
        journals = {j: v for j, v in journals.items() if j in wanted}
    fits = {}
    series = {"All": {y: s.mean for y, s in yearly.items()}}
    for g in TEAM_GROUPS[:4]:
        series[g] = {y: s.mean for (gg, y), s in team_year.items() if gg == g}
    for name, ser in series.items():
        if len(ser) >= 4:
            ys = sorted(ser)
            fits[name] = trend_fit(ys, [ser[y] for y in ys], d["trend_center"], 3, d["confidence"])
    fx = {}
    n_year = np.bincount(years - origin, minlength=cfg["input"]["years"][1] - origin + 1)
    for mode in FX_MODES:
        flags = _fx_flags(a, mode, d)
        hits = np.bincount(years - origin, weights=flags.astype(np.float64), minlength=len(n_year))
        fx[mode] = {origin + i: (int(hits[i]), int(n_year[i])) for i in range(len(n_year)) if n_year[i] > 0}
    return DiversityResult(
        d["level"], yearly, windows, team_year, team_window, journals, journal_ranking(journals), fits, fx, w
    )


# ------------------------------------------------------------------- exports


def _span_tag(span) -> str:
    return f"{span[0]}-{span[1]}" if span[0] != span[1] else f"{span[0]}"


def write_accumulate(out: Path, cfg: dict, acc: AccumulateResult) -> None:
    mdir = out / "matrices"
    mdir.mkdir(parents=True, exist_ok=True)
    write_json(out / "corpus_stats.json", "corpus_stats", {"stats": acc.stats, "labels": {str(k): list(v) for k, v in acc.labels.items()}})
    spans = [tuple(p) for p in cfg["cooccur"]["periods"]] + [_full_span(cfg)]
    for lv in cfg["cooccur"]["levels"]:
        for sp in spans:
            m = acc.matrix(lv, sp)
            stem = mdir / f"L{lv}_{_span_tag(sp)}"
            m.to_csv(f"{stem}.csv")
            m.to_edge_list(f"{stem}_edges.tsv")
            if m.weights.any():
                tree = mst_hierarchy(m)
                write_json(
                    f"{stem}_mst.json",
                    "mst",
                    {"level": lv, "window": list(sp), "edges": [list(e) for e in tree.edges], "isolated": tree.isolated},
                )
        if cfg["cooccur"]["annual_exports"]:
            adir = mdir / "annual"
            adir.mkdir(exist_ok=True)
            for y, m in acc.annual[lv].items():
                m.to_csv(adir / f"L{lv}_{y}.csv")


def write_cluster(out: Path, cfg: dict, clu: ClusterResult) -> None:
    cdir = out / "clusters"
    cdir.mkdir(parents=True, exist_ok=True)
    for lv in clu.annual:
        docs = [c.to_json() for c in clu.annual[lv].values()]
        write_json(cdir / f"L{lv}_annual.json", "clustering_series", {"level": lv, "clusterings": docs})
        for sp, c in clu.periods[lv].items():
            c.write(cdir / f"L{lv}_{_span_tag(sp)}.json")
        if lv in clu.total:
            clu.total[lv].write(cdir / f"L{lv}_{_span_tag(_full_span(cfg))}.json")
        write_table(
            cdir / f"L{lv}_cluster_sizes.csv",
            "cluster_sizes",
            ["year", "cluster_id", "size"],
            cluster_size_series(clu.annual[lv]),
        )


def write_bridges(out: Path, cfg: dict, br: BridgeResult) -> None:
    bdir = out / "bridges"
    (bdir / "ego").mkdir(parents=True, exist_ok=True)
    write_bridge_series(bdir / "bridge_series.csv", br.scores)
    write_emerging(bdir / "emerging_bridges.json", br.emerging, br.criteria)
    for (node, sp), ego in sorted(br.ego.items()):
        write_json(bdir / "ego" / f"{node}_{_span_tag(sp)}.json", "ego_network", {"ego": node, "window": list(sp), **ego.to_node_link()})


def write_continuity(out: Path, cfg: dict, con: dict) -> None:
    cdir = out / "continuity"
    cdir.mkdir(parents=True, exist_ok=True)
    for lv, (catalog, table) in con.items():
        write_json(cdir / f"L{lv}_cliques.json", "cliques", {"level": lv, **catalog.to_json()})
        table.write(cdir / f"L{lv}_continuity.csv", cdir / f"L{lv}_continuity_hist.csv")
        if table.skipped:
            logger.info("continuity L%d: skipped %d node-transitions with absent nodes", lv, table.skipped)


def _stats_rows(groups: dict, key_cols):
    rows = []
    for k, s in groups.items():
        key = k if isinstance(k, tuple) else (k,)
        rows.append((*key, s.mean, s.std, s.count, s.zeros))
    return rows


def write_diversity(out: Path, cfg: dict, acc: AccumulateResult, div: DiversityResult) -> None:
    ddir = out / "diversity"
    ddir.mkdir(parents=True, exist_ok=True)
    lv = div.level
    if cfg["diversity"]["per_article"]:
        a = acc.articles
        fd = a["fd2"] if lv == 2 else a["fd1"]
        team = team_group_codes(a["authors"])
        with open(ddir / "articles.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("# schema: meshforge.diversity_articles/1\npmid,year,journal,team_group,f_d,level\n")
            jn = [j.replace('"', '""') for j in acc.journals]
            jq = [f'"{j}"' if ("," in j or '"' in j) else j for j in jn]
            lines = [
                f"{p},{y},{jq[j]},{TEAM_GROUPS[t]},{'' if f != f else repr(f)},{lv}\n"
                for p, y, j, t, f in zip(
                    a["pmid"].tolist(), a["year"].tolist(), a["journal"].tolist(), team.tolist(), fd.tolist()
                )
            ]
            fh.write("".join(lines))
    cols = ["mean_f_d", "std_f_d", "count", "zero_count"]
    write_table(ddir / "yearly.csv", "diversity_yearly", ["year", *cols], _stats_rows(div.yearly, 1))
    write_table(
        ddir / "windows.csv",
        "diversity_windows",
        ["window_start", "window_end", *cols],
        [(k, k + div.window - 1, s.mean, s.std, s.count, s.zeros) for k, s in div.windows.items()],
    )
    write_table(ddir / "team_year.csv", "diversity_team_year", ["team_group", "year", *cols], _stats_rows(div.team_year, 2))
    write_table(ddir / "team_window.csv", "diversity_team_window", ["team_group", "window_start", *cols], _stats_rows(div.team_window, 2))
    write_table(ddir / "journal_ranking.csv", "journal_ranking", ["journal", "mean_f_d", "article_count"], div.ranking)
    edges = np.linspace(0, 1, HIST_BINS + 1)
    hrows = []
    for k, s in div.windows.items():
        hrows.append((k, "zero", 0.0, 0.0, s.zeros))
        for b in range(HIST_BINS):
            hrows.append((k, "bin", float(edges[b]), float(edges[b + 1]), int(s.hist[b])))
    write_table(ddir / "histograms.csv", "diversity_histograms", ["window_start", "kind", "lo", "hi", "count"], hrows)
    write_json(ddir / "trends.json", "diversity_trends", {"level": lv, "fits": {k: f.to_json() for k, f in div.fits.items()}})
    brows = []
    y0, y1 = cfg["input"]["years"]
    ts = np.arange(y0, y1 + 1)
    for name, fit in div.fits.items():
        lo, hi = fit.band(ts)
        yhat = fit.predict(ts)
        brows.extend((name, int(t), float(v), float(l), float(h)) for t, v, l, h in zip(ts, yhat, lo, hi))
    write_table(ddir / "trend_bands.csv", "diversity_trend_bands", ["group", "year", "fitted", "ci_lo", "ci_hi"], brows)
    fxrows = []
    for y in range(y0, y1 + 1):
        row = [y]
        n = None
        for mode in FX_MODES:
            hit = div.fx[mode].get(y)
            if hit is None:
                row.append("")
            else:
                n = hit[1]
                row.append(hit[0] / hit[1])
        fxrows.append((row[0], "" if n is None else n, *row[1:]))
    write_table(ddir / "fx.csv", "convergence_fraction", ["year", "articles", "f_J", "f_L", "f_JL"], fxrows)


# ----------------------------------------------------------------------- run


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict
    artifacts: dict


def _stage_keys(cfg: dict, corpus_sha: str, onto_digest: str) -> dict:
    inp = {k: v for k, v in cfg["input"].items() if k not in ("corpus", "ontology")}
    run = {k: v for k, v in cfg["run"].items() if k != "jobs"}
    keys = {}
    keys["accumulate"] = config_hash(["accumulate", __version__, corpus_sha, onto_digest, inp, run])
    clu = {k: v for k, v in cfg["cluster"].items() if k != "clique_years"}
    keys["cluster"] = config_hash(["cluster", keys["accumulate"], cfg["cooccur"]["levels"], cfg["cooccur"]["periods"], clu])
    keys["bridges"] = config_hash(["bridges", keys["cluster"], cfg["bridges"]])
    keys["continuity"] = config_hash(["continuity", keys["cluster"], cfg["cluster"]["clique_years"]])
    div = dict(cfg["diversity"])
    if div["journals"]:
        div["journals"] = file_digest(div["journals"])
    keys["diversity"] = config_hash(["diversity", keys["accumulate"], div])
    return keys


def _closure(stages) -> list[str]:
    want = set()

    def add(s):
        if s not in want:
            want.add(s)
            for dep in _DEPENDS[s]:
                add(dep)

    for s in stages:
        if s not in _DEPENDS:
            raise ValueError(f"unknown stage {s!r}")
        add(s)
    return [s for s in STAGES if s in want]


def run_pipeline(
    cfg: dict,
    out_dir: str | os.PathLike,
    cache_dir: str | os.PathLike | None = None,
    stages=STAGES,
    jobs: int | None = None,
) -> RunResult:
    """Run the requested stages (plus their dependencies) and write exports.

    Raises :class:`StageError` naming the failed stage; the output
    directory then holds an ``INCOMPLETE`` marker and a manifest with
    ``status = "incomplete"``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Cache(cache_dir if cache_dir is not None else out / ".cache")
    marker = out / "INCOMPLETE"
    if marker.exists():
        marker.unlink()
    jobs = jobs or cfg["run"]["jobs"]
    todo = _closure(stages)
    timings: dict = {}
    manifest = {
        "tool_version": __version__,
        "config_hash": config_hash({k: v for k, v in cfg.items() if k != "run"} | {"run": {k: v for k, v in cfg["run"].items() if k != "jobs"}}),
        "seed": cfg["cluster"]["seed"],
        "config": cfg,
        "cache_dir": str(Path(cache.root).resolve()),
        "status": "running",
        "stages": timings,
    }
    artifacts: dict = {}
    current = "load-inputs"
    try:
        t0 = time.perf_counter()
        if not cfg["input"]["corpus"] or not cfg["input"]["ontology"]:
            raise ValueError("input.corpus and input.ontology must be set")
        tree = read_ontology(cfg["input"]["ontology"], cfg["input"]["branches"])
        corpus_sha = file_digest(cfg["input"]["corpus"])
        manifest["inputs"] = {
            "corpus_sha256": corpus_sha,
            "ontology_digest": tree.digest(),
            "ontology_file_sha256": file_digest(cfg["input"]["ontology"]),
            "ontology_descriptors": len(tree),
            "l2_headings": len(tree.l2_index),
        }
        keys = _stage_keys(cfg, corpus_sha, tree.digest())
        timings["load-inputs"] = {"seconds": time.perf_counter() - t0}
        runners = {
            "accumulate": lambda: stage_accumulate(cfg, tree, jobs),
            "cluster": lambda: stage_cluster(cfg, artifacts["accumulate"]),
            "bridges": lambda: stage_bridges(cfg, artifacts["accumulate"], artifacts["cluster"]),
            "continuity": lambda: stage_continuity(cfg, artifacts["cluster"]),
            "diversity": lambda: stage_diversity(cfg, artifacts["accumulate"]),
        }
        writers = {
            "accumulate": lambda r: write_accumulate(out, cfg, r),
            "cluster": lambda r: write_cluster(out, cfg, r),
            "bridges": lambda r: write_bridges(out, cfg, r),
            "continuity": lambda r: write_continuity(out, cfg, r),
            "diversity": lambda r: write_diversity(out, cfg, artifacts["accumulate"], r),
        }
        for stage in todo:
            current = stage
            t0 = time.perf_counter()
            result = cache.get(stage, keys[stage])
            hit = result is not None
            if not hit:
                result = runners[stage]()
                cache.put(stage, keys[stage], result)
            artifacts[stage] = result
            t1 = time.perf_counter()
            writers[stage](result)
            timings[stage] = {
                "key": keys[stage],
                "cache_hit": hit,
                "compute_seconds": t1 - t0,
                "export_seconds": time.perf_counter() - t1,
            }
            if stage == "accumulate":
                timings[stage]["records"] = result.stats
            logger.info("stage %s done (%s, %.2fs)", stage, "cached" if hit else "computed", time.perf_counter() - t0)
    except Exception as err:
        manifest["status"] = "incomplete"
        manifest["failed_stage"] = current
        manifest["error"] = str(err)
        write_json(out / "run_manifest.json", "run_manifest", manifest)
        marker.write_text(f"stage {current} failed: {err}\n")
        raise StageError(current, err) from err
    manifest["status"] = "complete"
    write_json(out / "run_manifest.json", "run_manifest", manifest)
    return RunResult(out, manifest, artifacts)


# ------------------------------------------------------------------ plotdata


class MissingArtifact(FileNotFoundError):
    pass


def _load_artifact(out: Path, cache: Cache | None, manifest: dict, stage: str):
    info = manifest.get("stages", {}).get(stage)
    if info is None:
        raise MissingArtifact(f"no {stage!r} artifact in {out}; produce it with `meshforge {_PRODUCER[stage]}`")
    cache = cache or Cache(manifest["cache_dir"])
    obj = cache.get(stage, info["key"])
    if obj is None:
        raise MissingArtifact(f"{stage!r} artifact missing from cache; rerun `meshforge {_PRODUCER[stage]}`")
    return obj


_PRODUCER = {
    "accumulate": "cooccur",
    "cluster": "cluster",
    "bridges": "bridges",
    "continuity": "continuity",
    "diversity": "diversity",
}


def heatmap_order(m: CoocMatrix, c: Clustering) -> list[str]:
    """Nodes grouped by cluster id, then by decreasing prevalence, then label."""
    prev = dict(zip(m.labels, m.occurrences.tolist()))
    order = []
    for cid, members in c.clusters().items():
        order.extend(sorted(members, key=lambda n: (-prev[n], n)))
    return order


def export_plotdata(out_dir: str | os.PathLike, cache_dir: str | os.PathLike | None = None) -> Path:
    """Write figure-ready tables under ``<out_dir>/plotdata`` from run artifacts."""
    import json

    out = Path(out_dir)
    mpath = out / "run_manifest.json"
    if not mpath.exists():
        raise MissingArtifact(f"no run manifest in {out}; produce it with `meshforge run`")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = manifest["config"]
    cache = Cache(cache_dir) if cache_dir is not None else None
    pdir = out / "plotdata"
    pdir.mkdir(exist_ok=True)
    written = []

    if "accumulate" in manifest["stages"] and "cluster" in manifest["stages"]:
        acc = _load_artifact(out, cache, manifest, "accumulate")
        clu = _load_artifact(out, cache, manifest, "cluster")
        spans = [tuple(p) for p in cfg["cooccur"]["periods"]] + [tuple(cfg["input"]["years"])]
        for lv in clu.annual:
            for sp in spans:
                c = clu.total.get(lv) if sp == tuple(cfg["input"]["years"]) else clu.periods[lv].get(sp)
                if c is None:
                    continue
                m = acc.matrix(lv, sp)
                order = heatmap_order(m, c)
                idx = [m.index(n) for n in order]
                w = m.pair_weights()[np.ix_(idx, idx)]
                occ = m.occurrences[idx]
                rows = [
                    (n, c.assignment[n], int(o), *map(float, row)) for n, o, row in zip(order, occ, w)
                ]
                name = pdir / f"heatmap_L{lv}_{_span_tag(sp)}.csv"
                write_table(name, "heatmap", ["label", "cluster_id", "prevalence", *order], rows)
                written.append(name)
    else:
        raise MissingArtifact("clustered matrices missing; produce them with `meshforge cluster`")

    header = ["node", "year", "rank", "norm_rank", "norm_rank_smoothed"]
    rows = []
    if "bridges" in manifest["stages"]:
        br = _load_artifact(out, cache, manifest, "bridges")
        width = cfg["bridges"]["smoothing"]
        for node, ser in bridge_series(br.scores).items():
            sm = moving_average(ser.norm_rank, width)
            rows.extend((node, y, r, nr, float(s)) for y, r, nr, s in zip(ser.years, ser.rank, ser.norm_rank, sm))
    write_table(pdir / "bridge_rank_series.csv", "bridge_rank_series", header, rows)

    if "diversity" in manifest["stages"]:
        div = _load_artifact(out, cache, manifest, "diversity")
        y0, y1 = cfg["input"]["years"]
        fx_rows = []
        for y in range(y0, y1 + 1):
            vals = [div.fx[m].get(y) for m in FX_MODES]
            n = next((v[1] for v in vals if v is not None), "")
            fx_rows.append((y, n, *["" if v is None else v[0] / v[1] for v in vals]))
        write_table(pdir / "fx_series.csv", "fx_series", ["year", "articles", "f_J", "f_L", "f_JL"], fx_rows)
        fd_rows = [(y, s.mean, s.std, s.count) for y, s in div.yearly.items()]
        write_table(pdir / "fd_series.csv", "fd_series", ["year", "mean_f_d", "std_f_d", "count"], fd_rows)
        win_rows = [(k, k + div.window - 1, s.mean, s.std, s.count) for k, s in div.windows.items()]
        write_table(pdir / "fd_windows.csv", "fd_windows", ["window_start", "window_end", "mean_f_d", "std_f_d", "count"], win_rows)
        edges = np.linspace(0, 1, HIST_BINS + 1)
        hist_rows = []
        for k, s in div.windows.items():
            dens = s.hist / max(s.count, 1)
            hist_rows.append((k, 0.0, 0.0, s.zeros / max(s.count, 1)))
            hist_rows.extend((k, float(edges[b]), float(edges[b + 1]), float(dens[b])) for b in range(HIST_BINS))
        write_table(pdir / "fd_histograms.csv", "fd_histograms", ["window_start", "lo", "hi", "fraction"], hist_rows)
        team_rows = []
        for (g, y), s in div.team_year.items():
            fit = div.fits.get(g)
            if fit is not None:
                lo, hi = fit.band([y])
                team_rows.append((g, y, s.mean, float(fit.predict([y])[0]), float(lo[0]), float(hi[0])))
            else:
                team_rows.append((g, y, s.mean, "", "", ""))
        write_table(pdir / "team_trends.csv", "team_trends", ["team_group", "year", "mean_f_d", "fitted", "ci_lo", "ci_hi"], team_rows)
    return pdir
