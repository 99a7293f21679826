"""Tier-3 federator: the whole federation behind one Tier-1 interface set.

Each operation asks the Identifier Locator and the Service Registry where
to go, fans out to Tier-1 nodes concurrently and merges what comes back.
Harvesting either fans out live (Dynamic) or reads a central cache of
Surrogates kept current by ``cache_sync`` (Cache).
"""

from __future__ import annotations

import enum
import json
import logging
import sqlite3
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import parse_qsl

from .errors import (
    BadArgument,
    ConfigError,
    FedgateError,
    HarvestFailure,
    IdDoesNotExist,
    IntegrityViolation,
    NoRecordsMatch,
    ProtocolError,
    Unreachable,
    UpstreamUnavailable,
)
from .httpd import Response, fetch
from .locator import LocatorClient, RepoSyncResult, SyncReport
from .model import ContentURI, FedDatetime, InterfaceType, check_window, classify_uri
from .registry import ROLE_KEY, RegistryClient
from .service import RepositoryApp
from .surrogate import parse_surrogate
from .wire import (
    SVC_LOCATE_SURROGATES,
    SVC_OBTAIN_DATASTREAM,
    SVC_OBTAIN_SURROGATE,
    IdentifierTuple,
    Location,
    error_body,
    harvest_client,
    kev_url,
    parse_error_body,
    parse_locations,
    render_locations,
    render_referrals,
)

log = logging.getLogger(__name__)


class HarvestMode(enum.Enum):
    DYNAMIC = "Dynamic"
    CACHE = "Cache"


class LocateMode(enum.Enum):
    REFERRAL = "Referral"
    MERGE = "Merge"


class FailurePolicy(enum.Enum):
    FAIL_FAST = "FailFast"
    BEST_EFFORT = "BestEffort"


@dataclass
class FederatorConfig:
    locator_url: str | None = None
    registry_url: str | None = None
    harvest_mode: HarvestMode = HarvestMode.DYNAMIC
    locate_mode: LocateMode = LocateMode.REFERRAL
    fanout_timeout: float = 5.0
    failure_policy: FailurePolicy = FailurePolicy.FAIL_FAST
    cache_path: str | None = None
    repository_uri: str = "info:fedgate/federation"
    host: str = "127.0.0.1"
    port: int = 0
    session_ttl: float = 60.0
    page_size: int = 500

    def __post_init__(self):
        try:
            self.harvest_mode = HarvestMode(self.harvest_mode)
            self.locate_mode = LocateMode(self.locate_mode)
            self.failure_policy = FailurePolicy(self.failure_policy)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.harvest_mode is HarvestMode.CACHE and not self.cache_path:
            raise ConfigError("Cache harvest mode requires cache_path")
        if self.fanout_timeout <= 0:
            raise ConfigError("fanout_timeout must be positive")

    @classmethod
    def from_json(cls, data: dict) -> FederatorConfig:
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"bad federator config: {e}") from None


class HarvestResult(list):
    """A merged harvest; ``warnings`` lists (repository_uri, reason) for skipped repositories."""

    def __init__(self, items=(), warnings=()):
        super().__init__(items)
        self.warnings = list(warnings)


@dataclass(frozen=True)
class Referral:
    repository_uri: ContentURI
    url: str


# -- central Surrogate cache ----------------------------------------------


class SurrogateCache:
    """sqlite-backed store of harvested Surrogates with per-repository cursors."""

    def __init__(self, path):
        self.path = str(path)
        if self.path != ":memory:":
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
        self._lock = threading.Lock()
        with self._lock:
            self._db.executescript(
                """
                PRAGMA journal_mode=WAL;
                CREATE TABLE IF NOT EXISTS surrogates (
                    su TEXT NOT NULL, repo TEXT NOT NULL, dt INTEGER NOT NULL,
                    doc BLOB NOT NULL, ids TEXT NOT NULL, PRIMARY KEY (su, repo));
                CREATE INDEX IF NOT EXISTS surrogates_dt ON surrogates (dt, su);
                CREATE TABLE IF NOT EXISTS cursors (repo TEXT PRIMARY KEY, dt INTEGER NOT NULL);
                """
            )

    def cursor(self, repo) -> FedDatetime | None:
        with self._lock:
            row = self._db.execute("SELECT dt FROM cursors WHERE repo = ?", (str(repo),)).fetchone()
        return FedDatetime(row[0]) if row else None

    def cursors(self) -> dict:
        with self._lock:
            return {r: str(FedDatetime(d)) for r, d in self._db.execute("SELECT repo, dt FROM cursors ORDER BY repo")}

    def apply(self, repo, records, cursor: FedDatetime):
        """Upsert one repository's harvest and move its cursor in one transaction."""
        rows = []
        for su, dt, doc in records:
            s = parse_surrogate(doc)
            ids = json.dumps([[u.value for u in s.do_uris], [u.value for u in s.ds_uris], [u.value for u in s.ds_urls]])
            rows.append((str(su), str(repo), dt.seconds, doc, ids))
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                self._db.executemany("INSERT OR REPLACE INTO surrogates VALUES (?, ?, ?, ?, ?)", rows)
                self._db.execute(
                    "INSERT INTO cursors VALUES (?, ?) ON CONFLICT(repo) DO UPDATE SET dt = MAX(dt, excluded.dt)",
                    (str(repo), cursor.seconds),
                )
                self._db.execute("COMMIT")
            except BaseException:
                self._db.execute("ROLLBACK")
                raise

    def _rows(self, start, until, columns):
        check_window(start, until)
        lo = start.seconds if start is not None else -(1 << 62)
        hi = until.seconds if until is not None else 1 << 62
        with self._lock:
            rows = self._db.execute(
                f"SELECT su, repo, dt, {columns} FROM surrogates WHERE dt BETWEEN ? AND ? ORDER BY su, repo", (lo, hi)
            ).fetchall()
        best = {}
        for su, repo, dt, payload in rows:
            best.setdefault(su, (dt, payload))  # smallest repository URI wins
        return sorted((dt, su, payload) for su, (dt, payload) in best.items())

    def harvest(self, start=None, until=None) -> list:
        return [(ContentURI(su), FedDatetime(dt), bytes(doc)) for dt, su, doc in self._rows(start, until, "doc")]

    def identifiers(self, start=None, until=None) -> list:
        out = []
        for dt, su, ids in self._rows(start, until, "ids"):
            do, ds, urls = json.loads(ids)
            out.append(IdentifierTuple(
                ContentURI(su),
                tuple(ContentURI(u) for u in do),
                tuple(ContentURI(u) for u in ds),
                FedDatetime(dt),
                tuple(ContentURI(u) for u in urls),
            ))
        return out

    def count(self) -> int:
        with self._lock:
            return self._db.execute("SELECT COUNT(DISTINCT su) FROM surrogates").fetchone()[0]

    def close(self):
        with self._lock:
            self._db.close()


# -- the federator ---------------------------------------------------------


@dataclass
class FanoutStats:
    operation: str = ""
    repositories: int = 0
    failed: list = field(default_factory=list)
    elapsed: float = 0.0


class Federator:
    def __init__(self, cfg: FederatorConfig, locator=None, registry=None):
        self.cfg = cfg
        if locator is None and cfg.locator_url is None:
            raise ConfigError("federator needs a locator")
        if registry is None and cfg.registry_url is None:
            raise ConfigError("federator needs a registry")
        self.locator = locator if locator is not None else LocatorClient(cfg.locator_url, cfg.fanout_timeout)
        self.registry = registry if registry is not None else RegistryClient(cfg.registry_url, cfg.fanout_timeout)
        self.repository_uri = ContentURI(cfg.repository_uri)
        self.cache = SurrogateCache(cfg.cache_path) if cfg.cache_path else None
        self.last_fanout = FanoutStats()
        self._sync_lock = threading.Lock()

    # -- plumbing --

    def _providers(self, itype) -> dict:
        """repository URI -> Interface-URL of every Tier-1 component offering ``itype``."""
        out = {}
        for comp, b in self.registry.providers(itype):
            if dict(comp.metadata).get(ROLE_KEY, "tier1") == "tier1":
                out[comp.uri] = b.interface_url.value
        return out

    def _fan_out(self, operation, jobs: dict):
        """Run ``jobs`` (repo -> thunk) concurrently; returns (results, failures)."""
        results, failures = {}, {}
        t0 = time.monotonic()
        if jobs:
            with ThreadPoolExecutor(max_workers=min(32, len(jobs))) as pool:
                futures = {repo: pool.submit(fn) for repo, fn in jobs.items()}
                for repo, fut in futures.items():
                    try:
                        results[repo] = fut.result()
                    except (FedgateError, ValueError, OSError) as e:
                        failures[repo] = e
        self.last_fanout = FanoutStats(operation, len(jobs), sorted(str(r) for r in failures), round(time.monotonic() - t0, 4))
        return results, failures

    def _harvest_failure(self, failures):
        repo = min(failures)
        return HarvestFailure(repo.value, str(failures[repo]))

    def _located(self, identifier, itype) -> dict:
        providers = self._providers(itype)
        return {r: providers[r] for r in self.locator.locate_repositories(identifier) if r in providers}

    # -- harvesting --

    def _dynamic(self, itype, prefix, verb, start, until, convert):
        check_window(start, until)
        providers = self._providers(itype)
        t = self.cfg.fanout_timeout

        def job(url):
            return lambda: [convert(r) for r in harvest_client(url, prefix, start, until, verb=verb, timeout=t)]

        results, failures = self._fan_out(f"harvest:{prefix}", {r: job(u) for r, u in providers.items()})
        if failures:
            if self.cfg.failure_policy is FailurePolicy.FAIL_FAST:
                raise self._harvest_failure(failures)
            if not results:
                raise UpstreamUnavailable([r.value for r in failures], "every repository failed")
        return results, [(r.value, str(e)) for r, e in sorted(failures.items())]

    @staticmethod
    def _merge(results, key):
        """Union of per-repo lists; one copy per key, from the smallest repository URI."""
        best = {}
        for repo in sorted(results):
            for item in results[repo]:
                best.setdefault(key(item), item)
        return best

    def harvest_surrogates(self, start=None, until=None):
        if self.cfg.harvest_mode is HarvestMode.CACHE:
            items = self.cache.harvest(start, until)
            warnings = []
        else:
            results, warnings = self._dynamic(
                InterfaceType.HARVEST_SURROGATES, "surrogate", "ListRecords", start, until,
                lambda r: (ContentURI(r[0]), r[1], r[2]),
            )
            items = sorted(self._merge(results, lambda it: it[0]).values(), key=lambda it: (it[1], it[0]))
        if not items:
            raise NoRecordsMatch("no Surrogates in the requested window")
        return HarvestResult(items, warnings)

    def harvest_identifiers(self, start=None, until=None):
        if self.cfg.harvest_mode is HarvestMode.CACHE:
            items, warnings = self.cache.identifiers(start, until), []
        else:
            results, warnings = self._dynamic(
                InterfaceType.HARVEST_IDENTIFIERS, "identifiers", "ListRecords", start, until,
                lambda r: IdentifierTuple(ContentURI(r[0]), r[2][0], r[2][1], r[1], r[2][2]),
            )
            merged = self._merge(results, lambda t: t.surrogate_uri)
            items = sorted(merged.values(), key=lambda t: (t.surrogate_datetime, t.surrogate_uri))
        if not items:
            raise NoRecordsMatch("no Surrogates in the requested window")
        return HarvestResult(items, warnings)

    def harvest_datastream_identifiers(self, start=None, until=None):
        results, warnings = self._dynamic(
            InterfaceType.HARVEST_DATASTREAM_IDENTIFIERS, "datetime", "ListIdentifiers", start, until,
            lambda r: (ContentURI(r[0]), r[1]),
        )
        items = sorted(self._merge(results, lambda it: it[0]).values(), key=lambda it: (it[1], it[0]))
        if not items:
            raise NoRecordsMatch("no Datastreams in the requested window")
        return HarvestResult(items, warnings)

    # -- obtain / locate --

    def _partial(self, failures, results):
        if failures and (not results or self.cfg.failure_policy is FailurePolicy.FAIL_FAST):
            raise UpstreamUnavailable(sorted(r.value for r in failures), "; ".join(str(e) for e in failures.values()))

    def _get(self, url):
        status, ctype, body = fetch(url, self.cfg.fanout_timeout)
        if status == 404:
            return None
        if status >= 500:
            raise Unreachable(url, f"HTTP {status}")
        if status != 200:
            code, msg = parse_error_body(body)
            raise ProtocolError(code or f"http{status}", msg, url)
        return ctype, body

    def obtain_surrogate(self, identifier) -> bytes:
        identifier = classify_uri(identifier)
        located = self._located(identifier, InterfaceType.OBTAIN_SURROGATE)
        if not located:
            raise IdDoesNotExist(f"{identifier} is not known to the federation")
        jobs = {r: (lambda u=u: self._get(kev_url(u, identifier, SVC_OBTAIN_SURROGATE))) for r, u in located.items()}
        results, failures = self._fan_out("obtain", jobs)
        self._partial(failures, results)
        best = None
        for repo, got in results.items():
            if got is None:
                continue
            doc = got[1]
            s = parse_surrogate(doc)
            key = (s.surrogate_datetime, s.surrogate_uri, repo)
            if best is None or key > best[0]:
                best = (key, doc)
        if best is None:
            raise IdDoesNotExist(f"{identifier} is not served by any located repository")
        return best[1]

    def referrals(self, identifier) -> list:
        identifier = classify_uri(identifier)
        located = self._located(identifier, InterfaceType.LOCATE_SURROGATES)
        return [Referral(r, kev_url(u, identifier, SVC_LOCATE_SURROGATES)) for r, u in sorted(located.items())]

    def merged_locations(self, identifier) -> list:
        refs = self.referrals(identifier)

        def job(url):
            def run():
                got = self._get(url)
                return parse_locations(got[1]) if got is not None else []
            return run

        results, failures = self._fan_out("locate", {r.repository_uri: job(r.url) for r in refs})
        self._partial(failures, results)
        seen = {}
        for repo, locs in results.items():
            for loc in locs:
                loc = Location(loc.surrogate_uri, loc.repository_uri or repo, loc.surrogate_datetime, loc.surrogate_url)
                seen[(loc.surrogate_uri, loc.repository_uri)] = loc
        return sorted(seen.values(), key=lambda x: (x.surrogate_datetime or FedDatetime(0), x.surrogate_uri, x.repository_uri))

    def locate_surrogates(self, identifier) -> list:
        """Referral mode: :class:`Referral` values; Merge mode: :class:`Location` values."""
        if self.cfg.locate_mode is LocateMode.REFERRAL:
            return self.referrals(identifier)
        return self.merged_locations(identifier)

    def locate_surrogates_xml(self, identifier) -> bytes:
        if self.cfg.locate_mode is LocateMode.REFERRAL:
            return render_referrals(identifier, [(r.repository_uri, r.url) for r in self.referrals(identifier)])
        return render_locations(identifier, self.merged_locations(identifier))

    def obtain_datastream(self, ds_uri) -> tuple:
        ds_uri = classify_uri(ds_uri)
        if ds_uri.protocol_based:
            raise BadArgument(f"{ds_uri} is a Datastream-URL; dereference it directly")
        located = self._located(ds_uri, InterfaceType.OBTAIN_DATASTREAM)
        if len(located) > 1:
            raise IntegrityViolation(f"{ds_uri} is claimed by {len(located)} datastream repositories: " + ", ".join(sorted(r.value for r in located)))
        if not located:
            raise IdDoesNotExist(f"{ds_uri} is not known to the federation")
        (repo, url), = located.items()
        try:
            got = self._get(kev_url(url, ds_uri, SVC_OBTAIN_DATASTREAM))
        except (Unreachable, ProtocolError) as e:
            raise UpstreamUnavailable([repo.value], str(e)) from None
        if got is None:
            raise IdDoesNotExist(f"{ds_uri} not found at {repo}")
        return got

    def identify(self, surface="sur") -> dict:
        return {
            "repositoryName": "federation",
            "protocolVersion": "2.0",
            "earliestDatestamp": "1970-01-01T00:00:00Z",
            "deletedRecord": "no",
            "granularity": "YYYY-MM-DDThh:mm:ssZ",
            "description": [
                ("urn:fedgate:meta:repository", self.repository_uri.value),
                ("urn:fedgate:meta:harvest-mode", self.cfg.harvest_mode.value),
            ],
        }

    # -- cache sync --

    def cache_sync(self, now: FedDatetime | None = None) -> SyncReport:
        if self.cache is None:
            raise ConfigError("cache_sync needs Cache harvest mode")
        with self._sync_lock:
            start = now or FedDatetime.now()
            report = SyncReport(start)
            for repo, url in sorted(self._providers(InterfaceType.HARVEST_SURROGATES).items()):
                cursor = self.cache.cursor(repo)
                res = RepoSyncResult(repo.value, InterfaceType.HARVEST_SURROGATES.value, cursor=str(cursor) if cursor else None)
                try:
                    recs = list(harvest_client(url, "surrogate", cursor, None, timeout=self.cfg.fanout_timeout))
                    new_cursor = start.plus(-1)
                    if cursor is not None and cursor > new_cursor:
                        new_cursor = cursor
                    self.cache.apply(repo, recs, new_cursor)
                except (FedgateError, ValueError, sqlite3.Error) as e:
                    res.error = str(e)
                    report.results.append(res)
                    continue
                res.harvested = res.new = len(recs)
                res.cursor = str(new_cursor)
                report.results.append(res)
            return report

    # -- HTTP --

    def status(self) -> dict:
        return {
            "repository": self.repository_uri.value,
            "harvest_mode": self.cfg.harvest_mode.value,
            "locate_mode": self.cfg.locate_mode.value,
            "failure_policy": self.cfg.failure_policy.value,
            "fanout_timeout": self.cfg.fanout_timeout,
            "cursors": self.cache.cursors() if self.cache else {},
            "cached_surrogates": self.cache.count() if self.cache else None,
            "last_fanout": self.last_fanout.__dict__,
        }

    def extra_route(self, method, path, query, body):
        if path == "/admin/cache-sync" and method == "POST":
            args = dict(parse_qsl(query))
            try:
                now = FedDatetime.parse(args["now"]) if "now" in args else None
                report = self.cache_sync(now)
            except ConfigError as e:
                return Response(409, error_body("notCacheMode", str(e)))
            except FedgateError as e:
                return Response(400, error_body("badArgument", str(e)))
            return Response(200, json.dumps(report.to_json()).encode(), "application/json")
        if path == "/admin/status" and method == "GET":
            return Response(200, json.dumps(self.status()).encode(), "application/json")
        return None

    def app(self, base_url=lambda: "http://localhost", prefix_aliases=None) -> RepositoryApp:
        return RepositoryApp(self, base_url, page_size=self.cfg.page_size, prefix_aliases=prefix_aliases, session_ttl=self.cfg.session_ttl)
