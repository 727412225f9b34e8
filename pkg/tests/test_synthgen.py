import hashlib
import json

import pytest

from meshforge.config import load_config
from meshforge.pipeline import run_pipeline
from meshforge.synthgen import BridgePlant, PlantedSpec, default_labels, generate, load_spec


def _run(g, out, stages, **over):
    cfg = load_config(
        None,
        {"input": {"corpus": str(g.corpus), "ontology": str(g.ontology)}, "cooccur": {"annual_exports": False}, **over},
    )
    return run_pipeline(cfg, out, stages=stages)


def _digest(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def test_seeded_determinism(tmp_path):
    spec = PlantedSpec.with_blocks(3, 6, years=(2000, 2004), articles_per_year=200, seed=5)
    a = generate(spec, tmp_path / "a")
    b = generate(spec, tmp_path / "b")
    for x, y in ((a.corpus, b.corpus), (a.ontology, b.ontology), (a.truth, b.truth)):
        assert _digest(x) == _digest(y)
    c = generate(PlantedSpec.with_blocks(3, 6, years=(2000, 2004), articles_per_year=200, seed=6), tmp_path / "c")
    assert _digest(c.corpus) != _digest(a.corpus)


def test_truth_file(tmp_path):
    spec = PlantedSpec.with_blocks(2, 5, years=(1970, 2018), articles_per_year=10)
    spec.bridges = [BridgePlant(spec.blocks[1][-1], 0.1, 0.9)]
    g = generate(spec, tmp_path)
    truth = json.loads(g.truth.read_text())
    assert truth["schema"] == "meshforge.synth_truth/1"
    assert truth["blocks"] == [sorted(b) for b in spec.blocks]
    (b,) = truth["bridges"]
    assert b["label"] == spec.blocks[1][-1] and b["home_block"] == 1
    assert b["rate_slope_per_year"] == pytest.approx(0.8 / 48)
    assert truth["articles"] == g.n_articles == 490


def test_three_blocks_recovered(tmp_path):
    spec = PlantedSpec.with_blocks(3, 8, years=(2000, 2009), articles_per_year=500, seed=2)
    g = generate(spec, tmp_path / "syn")
    res = _run(g, tmp_path / "out", ["cluster"], cooccur={"levels": [2], "periods": [], "annual_exports": False})
    total = res.artifacts["cluster"].total[2]
    assert total.partition() == {frozenset(b) for b in spec.blocks}


def test_planted_bridge_detected(tmp_path):
    spec = PlantedSpec.with_blocks(3, 12, articles_per_year=1000, seed=3)
    spec.bridges = [BridgePlant(spec.blocks[0][-1])]
    g = generate(spec, tmp_path / "syn")
    res = _run(g, tmp_path / "out", ["bridges"], cooccur={"levels": [2], "annual_exports": False})
    assert [e.node for e in res.artifacts["bridges"].emerging] == [spec.blocks[0][-1]]


def test_planted_journal_means_order(tmp_path):
    targets = {"J Low": 0.1, "J Mid": 0.25, "J High": 0.4}
    spec = PlantedSpec.with_blocks(3, 8, years=(2000, 2004), articles_per_year=2000, journals=targets, seed=4)
    g = generate(spec, tmp_path / "syn")
    res = _run(g, tmp_path / "out", ["diversity"])
    ranking = res.artifacts["diversity"].ranking
    assert [r[0] for r in ranking] == ["J High", "J Mid", "J Low"]
    for j, mean, _ in ranking:
        assert mean == pytest.approx(targets[j], abs=0.03)


def test_infeasible_target_rejected(tmp_path):
    spec = PlantedSpec.with_blocks(2, 5, journals={"J": 0.95})
    assert len(spec.labels) == 10
    with pytest.raises(ValueError, match="outside"):
        generate(spec, tmp_path)


@pytest.mark.parametrize(
    "kw",
    [dict(p_out=1.5), dict(popularity_decay=0.0), dict(years=(2000, 1990)), dict(bridges=[BridgePlant("Z99")])],
)
def test_invalid_specs(tmp_path, kw):
    spec = PlantedSpec.with_blocks(2, 5, **kw)
    with pytest.raises(ValueError):
        spec.validate()


def test_rates_must_be_probabilities():
    spec = PlantedSpec.with_blocks(2, 5)
    spec.bridges = [BridgePlant(spec.blocks[0][0], 0.0, 1.2)]
    with pytest.raises(ValueError):
        spec.validate()


def test_load_spec_toml(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(
        "[synth]\nn_blocks = 2\nblock_size = 4\nyears = [1990, 1999]\nseed = 9\n"
        '[[synth.bridges]]\nlabel = "A01"\nend_rate = 0.8\n'
    )
    spec = load_spec(p)
    assert spec.blocks == [default_labels(8)[0::2], default_labels(8)[1::2]]
    assert spec.years == (1990, 1999) and spec.seed == 9
    assert spec.bridges == [BridgePlant("A01", 0.0, 0.8)]
