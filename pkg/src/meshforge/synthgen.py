"""Synthetic corpora with planted clusters, bridges and journal diversity.

Labels are second-level headings spread over the ten retained branches and
grouped into blocks.  Each article picks a home block, then draws its Major
MeSH from that block by label popularity (geometric within a block), with a
small chance per MeSH of drawing from a foreign block.  A planted bridge
label recruits an extra foreign MeSH into its home articles with a
probability that grows linearly over the year span, so its cross-cluster
weight, and hence its bridge rank, trends over time.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diversity import f_d_batch, f_d_bound
from .exports import schema_tag

__all__ = ["BridgePlant", "PlantedSpec", "GeneratedCorpus", "default_labels", "generate", "load_spec"]

_BRANCHES = "ABCDEFGJLN"
MAX_MESH = 15


def default_labels(n: int) -> list[str]:
    """``n`` L2 codes cycling through the retained branches: A01, B01, ..."""
    if n > 99 * len(_BRANCHES):
        raise ValueError("too many labels")
    return [f"{_BRANCHES[i % 10]}{i // 10 + 1:02d}" for i in range(n)]


@dataclass
class BridgePlant:
    """A label whose cross-block reach grows linearly over the year span.

    Each home-block article containing ``label`` gains ``extra_labels``
    foreign-block labels with a probability rising from ``start_rate`` in
    the first year to ``end_rate`` in the last.  Planting the least
    popular label of a block makes its bridge rank climb steadily.
    """

    label: str
    start_rate: float = 0.0
    end_rate: float = 1.0
    extra_labels: int = 2


@dataclass
class PlantedSpec:
    blocks: list[list[str]]
    years: tuple[int, int] = (1970, 2018)
    articles_per_year: int = 1000
    p_out: float = 0.02
    popularity_decay: float = 0.85
    bridges: list[BridgePlant] = field(default_factory=list)
    journals: dict[str, float | None] = field(default_factory=lambda: {f"J Synth {i}": None for i in range(5)})
    mesh_mean: float = 4.0
    minor_mean: float = 2.0
    team_size_mean: float = 5.0
    unknown_authors: float = 0.02
    descriptors_per_label: int = 3
    seed: int = 0

    @classmethod
    def with_blocks(cls, n_blocks: int, block_size: int, **kw) -> "PlantedSpec":
        labels = default_labels(n_blocks * block_size)
        blocks = [labels[b::n_blocks] for b in range(n_blocks)]
        return cls(blocks=blocks, **kw)

    @classmethod
    def from_dict(cls, obj: dict) -> "PlantedSpec":
        obj = dict(obj)
        if "blocks" not in obj:
            n_blocks = obj.pop("n_blocks", 3)
            block_size = obj.pop("block_size", 12)
            labels = default_labels(n_blocks * block_size)
            obj["blocks"] = [labels[b::n_blocks] for b in range(n_blocks)]
        obj["bridges"] = [BridgePlant(**b) for b in obj.get("bridges", [])]
        if "years" in obj:
            obj["years"] = tuple(obj["years"])
        if "journals" in obj and isinstance(obj["journals"], list):
            obj["journals"] = {j: None for j in obj["journals"]}
        return cls(**obj)

    @property
    def labels(self) -> list[str]:
        return sorted(lab for b in self.blocks for lab in b)

    def validate(self) -> None:
        flat = [lab for b in self.blocks for lab in b]
        if len(self.blocks) < 2 or any(not b for b in self.blocks):
            raise ValueError("need at least two non-empty blocks")
        if len(set(flat)) != len(flat):
            raise ValueError("blocks must be disjoint")
        for name in ("p_out", "unknown_authors"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 0 < self.popularity_decay <= 1:
            raise ValueError("popularity_decay must be in (0, 1]")
        if self.years[1] < self.years[0]:
            raise ValueError("empty year span")
        if self.mesh_mean < 1:
            raise ValueError("mesh_mean must be >= 1")
        for b in self.bridges:
            if b.label not in flat:
                raise ValueError(f"bridge label {b.label!r} not in any block")
            for r in (b.start_rate, b.end_rate):
                if not 0 <= r <= 1:
                    raise ValueError(f"bridge rate {r} outside [0, 1]")
            if b.extra_labels < 1:
                raise ValueError("extra_labels must be >= 1")
        bound = f_d_bound(len(flat))
        for j, target in self.journals.items():
            if target is not None and not 0 <= target <= bound:
                raise ValueError(
                    f"journal {j!r}: target diversity {target} outside [0, {bound:.6f}] for d={len(flat)}"
                )


@dataclass
class GeneratedCorpus:
    corpus: Path
    ontology: Path
    truth: Path
    n_articles: int


class _Sampler:
    """Vectorized article label draws for one planted corpus description."""

    def __init__(self, spec: PlantedSpec):
        self.spec = spec
        self.labels = spec.labels
        self.pos = {lab: i for i, lab in enumerate(self.labels)}
        self.block_members = [np.array([self.pos[lab] for lab in b]) for b in spec.blocks]
        self.block_cdf = []
        for b in spec.blocks:
            w = spec.popularity_decay ** np.arange(len(b))
            self.block_cdf.append(np.cumsum(w / w.sum()))
        self.nb = len(spec.blocks)
        self.block_of = {lab: k for k, b in enumerate(spec.blocks) for lab in b}
        self.extra = {b.label: b.extra_labels for b in spec.bridges}

    def draw_in_blocks(self, rng, blocks: np.ndarray) -> np.ndarray:
        out = np.empty(len(blocks), dtype=np.int64)
        u = rng.random(len(blocks))
        for k in range(self.nb):
            sel = blocks == k
            if sel.any():
                idx = np.searchsorted(self.block_cdf[k], u[sel], side="right")
                idx = np.minimum(idx, len(self.block_members[k]) - 1)
                out[sel] = self.block_members[k][idx]
        return out

    def foreign_blocks(self, rng, home: np.ndarray) -> np.ndarray:
        return (home + 1 + rng.integers(0, self.nb - 1, size=len(home))) % self.nb

    def draw(self, rng, n: int, spread: np.ndarray, bridge_rates: dict[str, float]):
        """Return (offsets, flat label positions, home blocks) for ``n`` articles."""
        spec = self.spec
        home = rng.integers(0, self.nb, size=n)
        k = np.minimum(1 + rng.poisson(spec.mesh_mean - 1, size=n), MAX_MESH)
        total = int(k.sum())
        art = np.repeat(np.arange(n), k)
        starts = np.cumsum(k) - k
        first = np.zeros(total, dtype=bool)
        first[starts] = True
        fresh = first | (rng.random(total) < spread[art])
        foreign = ~first & (rng.random(total) < spec.p_out)
        blk = np.where(foreign, self.foreign_blocks(rng, home[art]), home[art])
        lab = self.draw_in_blocks(rng, blk)
        lab = np.where(fresh, lab, lab[starts][art])
        extra_art, extra_lab = [], []
        for bl, rate in bridge_rates.items():
            b = self.pos[bl]
            has = np.zeros(n, dtype=bool)
            has[art[lab == b]] = True
            has &= home == self.block_of[bl]
            pick = np.flatnonzero(has & (rng.random(n) < rate))
            if len(pick):
                pick = np.repeat(pick, self.extra[bl])
                extra_art.append(pick)
                extra_lab.append(self.draw_in_blocks(rng, self.foreign_blocks(rng, home[pick])))
        if extra_art:
            art = np.concatenate([art, *extra_art])
            lab = np.concatenate([lab, *extra_lab])
            order = np.argsort(art, kind="stable")
            art, lab = art[order], lab[order]
        counts = np.bincount(art, minlength=n)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return offsets, lab, home


def _mean_fd(sampler: _Sampler, spread: float, n: int = 20000, seed: int = 12345) -> float:
    rng = np.random.default_rng(seed)
    offsets, lab, _ = sampler.draw(rng, n, np.full(n, spread), {})
    art = np.repeat(np.arange(n), np.diff(offsets))
    nl = len(sampler.labels)
    dpl = sampler.spec.descriptors_per_label
    # same descriptor draw as generate(), where repeats within an article collapse
    desc = lab * dpl + rng.integers(0, dpl, size=len(lab))
    key = np.unique(art * (nl * dpl) + desc)
    art, lab = key // (nl * dpl), key % (nl * dpl) // dpl
    counts = np.bincount(art * nl + lab, minlength=n * nl).reshape(n, nl)
    return float(np.nanmean(f_d_batch(counts)))


def _calibrate_spread(sampler: _Sampler, target: float) -> float:
    hi_val = _mean_fd(sampler, 1.0)
    if target > hi_val:
        raise ValueError(
            f"target diversity {target} is not reachable; the maximum for this layout is {hi_val:.4f}"
        )
    lo, hi = 0.0, 1.0
    for _ in range(30):
        mid = (lo + hi) / 2
        if _mean_fd(sampler, mid) < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def _ontology_rows(spec: PlantedSpec):
    rows = []
    for lab in spec.labels:
        rows.append((f"H{lab}", f"Heading {lab}", lab))
        for d in range(spec.descriptors_per_label):
            rows.append((f"S{lab}{d:03d}", f"Synthetic {lab}.{d}", f"{lab}.{d + 1:03d}"))
    return rows


def generate(spec: PlantedSpec, out_dir: str | os.PathLike) -> GeneratedCorpus:
    """Write ``corpus.jsonl``, ``ontology.tsv`` and ``truth.json`` to ``out_dir``.

    Output is a deterministic function of ``spec`` (seed included).
    Raises ``ValueError`` for infeasible specs.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sampler = _Sampler(spec)
    journals = list(spec.journals)
    spreads = np.array(
        [1.0 if spec.journals[j] is None else _calibrate_spread(sampler, spec.journals[j]) for j in journals]
    )

    onto_rows = _ontology_rows(spec)
    with open(out / "ontology.tsv", "w", encoding="utf-8") as fh:
        fh.write("# synthetic ontology\n")
        for did, name, tn in onto_rows:
            fh.write(f"{did}\t{name}\t{tn}\n")
    dpl = spec.descriptors_per_label
    desc_ids = np.array([f"S{lab}{d:03d}" for lab in sampler.labels for d in range(dpl)])

    rng = np.random.default_rng(spec.seed)
    y0, y1 = spec.years
    span = max(y1 - y0, 1)
    pmid = 0
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for year in range(y0, y1 + 1):
            n = spec.articles_per_year
            frac = (year - y0) / span
            rates = {b.label: b.start_rate + (b.end_rate - b.start_rate) * frac for b in spec.bridges}
            jidx = rng.integers(0, len(journals), size=n)
            offsets, lab, _ = sampler.draw(rng, n, spreads[jidx], rates)
            desc = desc_ids[lab * dpl + rng.integers(0, dpl, size=len(lab))]
            n_minor = rng.poisson(spec.minor_mean, size=n)
            minor = desc_ids[rng.integers(0, len(desc_ids), size=int(n_minor.sum()))]
            minor_off = np.concatenate([[0], np.cumsum(n_minor)])
            authors = 1 + rng.poisson(spec.team_size_mean - 1, size=n)
            authors[rng.random(n) < spec.unknown_authors] = 0
            lines = []
            for a in range(n):
                pmid += 1
                major = dict.fromkeys(desc[offsets[a] : offsets[a + 1]].tolist())
                minors = [m for m in minor[minor_off[a] : minor_off[a + 1]].tolist() if m not in major]
                mesh = ",".join(
                    [f'{{"id":"{m}","major":true}}' for m in major]
                    + [f'{{"id":"{m}","major":false}}' for m in dict.fromkeys(minors)]
                )
                lines.append(
                    f'{{"pmid":"{pmid}","year":{year},"journal":"{journals[jidx[a]]}",'
                    f'"authors":{int(authors[a])},"mesh":[{mesh}]}}\n'
                )
            fh.write("".join(lines))

    truth = {
        "schema": schema_tag("synth_truth"),
        "seed": spec.seed,
        "years": list(spec.years),
        "articles": pmid,
        "blocks": [sorted(b) for b in spec.blocks],
        "bridges": [
            {
                **asdict(b),
                "home_block": sampler.block_of[b.label],
                "rate_slope_per_year": (b.end_rate - b.start_rate) / span,
            }
            for b in spec.bridges
        ],
        "journals": {
            j: {"target_mean_f_d": spec.journals[j], "spread": float(s)} for j, s in zip(journals, spreads)
        },
        "p_out": spec.p_out,
        "mesh_mean": spec.mesh_mean,
    }
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1)
        fh.write("\n")
    return GeneratedCorpus(out / "corpus.jsonl", out / "ontology.tsv", out / "truth.json", pmid)


def load_spec(path: str | os.PathLike) -> PlantedSpec:
    """Read a :class:`PlantedSpec` from a TOML file (``[synth]`` table, or top level)."""
    from .config import load_toml

    obj = load_toml(path)
    return PlantedSpec.from_dict(obj.get("synth", obj))
