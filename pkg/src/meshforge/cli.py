"""Command-line entry point (``meshforge``).

Exit codes: 0 success, 2 config error, 3 input parse error, 4 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .corpus import CorpusParseError, CorpusStats, ingest_file, write_jsonl
from .exports import write_json
from .ontology import OntologyParseError, read_ontology

logger = logging.getLogger("meshforge")

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_STAGE = 0, 2, 3, 4

_PIPELINE_STAGES = {
    "cooccur": ("accumulate",),
    "cluster": ("cluster",),
    "bridges": ("bridges",),
    "continuity": ("continuity",),
    "diversity": ("diversity",),
    "run": ("accumulate", "cluster", "bridges", "continuity", "diversity"),
}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="TOML run configuration")
    parser.add_argument("--out-dir", default=argparse.SUPPRESS if suppress else "meshforge-out")
    parser.add_argument("--cache-dir", default=d, help="stage / request cache (default <out-dir>/.cache)")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--jobs", type=int, default=d)
    parser.add_argument(
        "--log-level",
        default=argparse.SUPPRESS if suppress else "INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshforge", description="MeSH co-occurrence and diversity pipeline")
    p.add_argument("--version", action="version", version=f"meshforge {__version__}")
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--corpus", default=argparse.SUPPRESS, help="corpus JSONL (overrides input.corpus)")
    inputs.add_argument("--ontology", default=argparse.SUPPRESS, help="descriptor TSV/XML (overrides input.ontology)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ontology", parents=[common, inputs], help="parse the descriptor file into an artifact")
    sp.add_argument("source", nargs="?", help="descriptor file (default: input.ontology)")

    sub.add_parser("ingest", parents=[common, inputs], help="filter and normalize the corpus")

    sp = sub.add_parser("fetch", parents=[common], help="download records from the E-utilities service")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--pmids", help="file with one PMID per line")
    g.add_argument("--dates", nargs=2, type=int, metavar=("MIN_YEAR", "MAX_YEAR"))
    sp.add_argument("--base-url", default=None)
    sp.add_argument("--rate-limit", type=float, default=3.0, help="requests per second")
    sp.add_argument("--output", default=None, help="JSONL path (default <out-dir>/fetched.jsonl)")

    for name, text in (
        ("cooccur", "accumulate L1/L2 co-occurrence matrices"),
        ("cluster", "Louvain clustering of annual, period and total matrices"),
        ("bridges", "bridge scores, emerging bridges and ego networks"),
        ("diversity", "per-article diversity, aggregates, trend fits and f_X"),
        ("continuity", "stable cliques and year-to-year continuity"),
        ("run", "full pipeline"),
    ):
        sub.add_parser(name, parents=[common, inputs], help=text)

    sub.add_parser("export-plotdata", parents=[common], help="figure-ready tables from run artifacts")

    sp = sub.add_parser("synth", parents=[common], help="generate a planted synthetic corpus")
    sp.add_argument("spec", help="TOML file with a [synth] table")
    return p


def _overrides(args) -> dict:
    ov: dict = {}
    if getattr(args, "seed", None) is not None:
        ov.setdefault("cluster", {})["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        ov.setdefault("run", {})["jobs"] = args.jobs
    for key in ("corpus", "ontology"):
        val = getattr(args, key, None)
        if val is not None:
            ov.setdefault("input", {})[key] = str(Path(val).resolve())
    return ov


def cmd_ontology(args, cfg) -> int:
    src = args.source or cfg["input"]["ontology"]
    if not src:
        raise ConfigError("no ontology file given")
    tree = read_ontology(src, cfg["input"]["branches"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = tree.to_json()
    doc["digest"] = tree.digest()
    write_json(out / "ontology.json", "ontology", doc)
    (out / "ontology.sha256").write_text(tree.digest() + "\n")
    logger.info("ontology: %d descriptors, %d L2 headings", len(tree), len(tree.l2_index))
    return EXIT_OK


def cmd_ingest(args, cfg) -> int:
    inp = cfg["input"]
    if not inp["corpus"]:
        raise ConfigError("no corpus file given")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = CorpusStats()
    recs = ingest_file(
        inp["corpus"], inp["major_only"], tuple(inp["years"]), inp["pub_types"], inp["on_error"], stats
    )
    n = write_jsonl(recs, out / "articles.jsonl")
    write_json(out / "ingest_stats.json", "ingest_stats", stats.as_dict())
    logger.info("ingest: kept %d articles", n)
    return EXIT_OK


def cmd_fetch(args, cfg) -> int:
    from .remote import DEFAULT_BASE_URL, fetch_remote

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(args.cache_dir) if args.cache_dir else out / ".cache" / "eutils"
    stats = CorpusStats()
    kw = dict(base_url=args.base_url or DEFAULT_BASE_URL, rate_limit=args.rate_limit, cache_dir=cache)
    if args.pmids:
        with open(args.pmids, encoding="utf-8") as fh:
            pmids = [line.strip() for line in fh if line.strip()]
        recs = fetch_remote(pmids=pmids, stats=stats, **kw)
    else:
        recs = fetch_remote(date_range=tuple(args.dates), stats=stats, **kw)
    n = write_jsonl(recs, args.output or out / "fetched.jsonl")
    write_json(out / "fetch_stats.json", "fetch_stats", stats.as_dict())
    logger.info("fetch: wrote %d records", n)
    return EXIT_OK


def cmd_pipeline(args, cfg) -> int:
    from .pipeline import run_pipeline

    for key in ("corpus", "ontology"):
        if not cfg["input"][key]:
            raise ConfigError(f"input.{key} is not set (use --{key} or the config file)")
    res = run_pipeline(cfg, args.out_dir, args.cache_dir, stages=_PIPELINE_STAGES[args.command])
    hits = [s for s, v in res.manifest["stages"].items() if v.get("cache_hit")]
    logger.info("%s complete; cached stages: %s", args.command, ", ".join(hits) or "none")
    return EXIT_OK


def cmd_export_plotdata(args, cfg) -> int:
    from .pipeline import export_plotdata

    pdir = export_plotdata(args.out_dir, args.cache_dir)
    logger.info("plot data written to %s", pdir)
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    from .synthgen import generate, load_spec

    spec = load_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    res = generate(spec, args.out_dir)
    logger.info("synth: %d articles -> %s", res.n_articles, res.corpus)
    return EXIT_OK


_COMMANDS = {
    "ontology": cmd_ontology,
    "ingest": cmd_ingest,
    "fetch": cmd_fetch,
    "export-plotdata": cmd_export_plotdata,
    "synth": cmd_synth,
    **{name: cmd_pipeline for name in _PIPELINE_STAGES},
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .pipeline import StageError

    try:
        cfg = load_config(args.config, _overrides(args))
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        print(f"meshforge: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OntologyParseError, CorpusParseError) as err:
        print(f"meshforge: parse error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except StageError as err:
        print(f"meshforge: {err}", file=sys.stderr)
        return EXIT_PARSE if isinstance(err.cause, (OntologyParseError, CorpusParseError)) else EXIT_STAGE
    except Exception as err:
        print(f"meshforge: {args.command} failed: {err}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
