"""PubMed E-utilities client with rate limiting and an on-disk response cache.

Responses are cached under ``cache_dir`` keyed by a digest of the request
(endpoint and parameters, API key excluded), so a rerun with the same
requests is fully offline.  Each efetch entry stores the raw XML next to
the parsed JSONL.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Callable, Iterable, Iterator
from urllib.error import HTTPError, URLError
from urllib.parse import urlencode
from urllib.request import Request, urlopen
from xml.etree import ElementTree

from .corpus import ArticleRecord, CorpusStats, parse_record

logger = logging.getLogger(__name__)

__all__ = ["RemoteError", "RateLimiter", "EutilsClient", "parse_pubmed_xml", "fetch_remote"]

DEFAULT_BASE_URL = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/"
API_KEY_ENV = "MESHFORGE_API_KEY"

Transport = Callable[[str], bytes]


class RemoteError(RuntimeError):
    pass


class RateLimiter:
    """Space calls at least ``1/rate`` seconds apart (thread-safe)."""

    def __init__(self, rate: float, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._next = None
        self._lock = threading.Lock()

    def wait(self) -> None:
        with self._lock:
            now = self._clock()
            if self._next is not None and now < self._next:
                self._sleep(self._next - now)
                now = self._next
            self._next = now + self.interval


def _urllib_transport(url: str) -> bytes:
    req = Request(url, headers={"User-Agent": "meshforge"})
    with urlopen(req, timeout=60) as resp:
        return resp.read()


class EutilsClient:
    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        api_key: str | None = None,
        rate_limit: float = 3.0,
        cache_dir: str | os.PathLike | None = None,
        max_tries: int = 3,
        backoff: float = 1.0,
        batch_size: int = 200,
        transport: Transport | None = None,
        sleep=time.sleep,
    ):
        self.base_url = base_url if base_url.endswith("/") else base_url + "/"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.limiter = RateLimiter(rate_limit, sleep=sleep)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.max_tries = max_tries
        self.backoff = backoff
        self.batch_size = batch_size
        self.transport = transport or _urllib_transport
        self._sleep = sleep
        self.requests_made = 0

    @staticmethod
    def request_key(endpoint: str, params: dict) -> str:
        canon = json.dumps([endpoint, sorted(params.items())], separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def _cache_path(self, key: str, suffix: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / key[:2] / f"{key}{suffix}"

    def get(self, endpoint: str, params: dict) -> bytes:
        key = self.request_key(endpoint, params)
        cached = self._cache_path(key, ".raw")
        if cached is not None and cached.exists():
            return cached.read_bytes()
        query = dict(params)
        if self.api_key:
            query["api_key"] = self.api_key
        url = f"{self.base_url}{endpoint}?{urlencode(query)}"
        delay = self.backoff
        for attempt in range(1, self.max_tries + 1):
            self.limiter.wait()
            self.requests_made += 1
            try:
                body = self.transport(url)
                break
            except (HTTPError, URLError, OSError) as err:
                if attempt == self.max_tries:
                    raise RemoteError(f"{endpoint} failed after {attempt} tries: {err}") from err
                logger.warning("%s attempt %d failed (%s); retrying in %.1fs", endpoint, attempt, err, delay)
                self._sleep(delay)
                delay *= 2
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            tmp = cached.with_suffix(".tmp")
            tmp.write_bytes(body)
            os.replace(tmp, cached)
        return body

    def search(self, mindate: int, maxdate: int, term: str = "hasabstract OR all[sb]", retmax: int = 100000) -> list[str]:
        body = self.get(
            "esearch.fcgi",
            {
                "db": "pubmed",
                "term": term,
                "datetype": "pdat",
                "mindate": str(mindate),
                "maxdate": str(maxdate),
                "retmax": str(retmax),
                "retmode": "json",
            },
        )
        try:
            return list(json.loads(body)["esearchresult"]["idlist"])
        except (ValueError, KeyError) as err:
            raise RemoteError(f"unexpected esearch response: {err}") from err

    def fetch(self, pmids: Iterable[str], stats: CorpusStats | None = None) -> Iterator[ArticleRecord]:
        pmids = list(pmids)
        for i in range(0, len(pmids), self.batch_size):
            batch = pmids[i : i + self.batch_size]
            params = {"db": "pubmed", "id": ",".join(batch), "retmode": "xml"}
            key = self.request_key("efetch.fcgi", params)
            parsed = self._cache_path(key, ".jsonl")
            if parsed is not None and parsed.exists():
                with open(parsed, encoding="utf-8") as fh:
                    for line in fh:
                        if stats is not None:
                            stats.articles_read += 1
                            stats.articles_kept += 1
                        yield parse_record(json.loads(line))
                continue
            records = list(parse_pubmed_xml(self.get("efetch.fcgi", params), stats))
            if parsed is not None:
                tmp = parsed.with_suffix(".tmp")
                with open(tmp, "w", encoding="utf-8") as fh:
                    for rec in records:
                        fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
                os.replace(tmp, parsed)
            yield from records


def _year(article) -> int | None:
    for path in (
        "Article/Journal/JournalIssue/PubDate/Year",
        "Article/ArticleDate/Year",
        "DateCompleted/Year",
    ):
        text = article.findtext(path)
        if text and text.strip().isdigit():
            return int(text)
    medline = article.findtext("Article/Journal/JournalIssue/PubDate/MedlineDate") or ""
    head = medline.strip()[:4]
    return int(head) if head.isdigit() else None


def parse_pubmed_xml(data: bytes, stats: CorpusStats | None = None) -> Iterator[ArticleRecord]:
    """Parse a ``PubmedArticleSet`` document into article records.

    A heading counts as major when the descriptor or any of its qualifiers
    carries ``MajorTopicYN="Y"``.  Articles that cannot be parsed are
    skipped and counted as malformed.
    """
    try:
        root = ElementTree.fromstring(data)
    except ElementTree.ParseError as err:
        raise RemoteError(f"malformed efetch XML: {err}") from err
    for art in root.iter("PubmedArticle"):
        if stats is not None:
            stats.articles_read += 1
        cit = art.find("MedlineCitation")
        year = _year(cit) if cit is not None else None
        pmid = cit.findtext("PMID") if cit is not None else None
        if not pmid or year is None:
            if stats is not None:
                stats.malformed_lines += 1
            continue
        journal = cit.findtext("Article/Journal/ISOAbbreviation") or cit.findtext(
            "MedlineJournalInfo/MedlineTA"
        ) or ""
        authors = len(cit.findall("Article/AuthorList/Author"))
        mesh = []
        for heading in cit.findall("MeshHeadingList/MeshHeading"):
            desc = heading.find("DescriptorName")
            if desc is None or not desc.get("UI"):
                continue
            major = desc.get("MajorTopicYN") == "Y" or any(
                q.get("MajorTopicYN") == "Y" for q in heading.findall("QualifierName")
            )
            mesh.append({"id": desc.get("UI"), "major": major})
        pub_types = [p.text.strip() for p in cit.findall("Article/PublicationTypeList/PublicationType") if p.text]
        if stats is not None:
            stats.articles_kept += 1
        yield parse_record(
            {
                "pmid": pmid.strip(),
                "year": year,
                "journal": journal.strip(),
                "authors": authors,
                "mesh": mesh,
                "pub_types": pub_types,
            }
        )


def fetch_remote(
    pmids: Iterable[str] | None = None,
    date_range: tuple[int, int] | None = None,
    client: EutilsClient | None = None,
    stats: CorpusStats | None = None,
    **client_kwargs,
) -> Iterator[ArticleRecord]:
    """Fetch article records by PMID list or publication-date range."""
    if (pmids is None) == (date_range is None):
        raise ValueError("give exactly one of pmids or date_range")
    client = client or EutilsClient(**client_kwargs)
    if date_range is not None:
        pmids = client.search(*date_range)
    pmids = list(pmids)
    if not pmids:
        return iter(())
    return client.fetch(pmids, stats)
