"""Test harness: seeded scenarios on loopback, brute-force oracles, failure injection, benchmarks.

Everything runs in one process over real sockets. The oracles bypass the
locator, registry and federator entirely and read the nodes directly, so
agreement with the federator is a meaningful check.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import random
import shutil
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import (
    BadArgument,
    FedgateError,
    NoRecordsMatch,
    OracleUnavailable,
    ScenarioError,
)
from .federator import Federator, FederatorConfig
from .httpd import Server, fetch
from .ingest import Bitstream, SubmissionObject, SubmissionPackage, ingest_batch
from .locator import Locator
from .model import (
    DatetimeTrigger,
    EntityKind,
    FedDatetime,
    RepoKind,
    RepositoryIdentity,
    UpdatePolicy,
    mint_uri,
)
from .registry import Registry, RegistryClient
from .repository import RepositoryNode
from .surrogate import parse_surrogate
from .wire import SVC_LOCATE_REPOSITORIES, kev_url, parse_uri_list

MEDIA_TYPES = ("application/pdf", "image/jpeg", "image/jp2", "text/plain", "application/octet-stream")
MIN_PAYLOAD, MAX_PAYLOAD = 16, 64 * 1024


class FailureMode(enum.Enum):
    STOP = "Stop"
    HANG = "Hang"
    ERROR500 = "Error500"


@dataclass
class FederationScenario:
    repo_count: int = 3
    objects_per_repo: int = 100
    bitstreams_per_object: int = 1
    policies: list = field(default_factory=list)  # per repo; default NewSurrogate/NewDatastream
    seed: int = 0
    failure_schedule: list = field(default_factory=list)  # [repo index, down_at, up_at or None, mode]
    batch_size: int = 100
    start: str = "2006-09-07T00:00:00Z"
    timeline_seconds: int = 86400
    shared_do_fraction: float = 0.0  # objects inheriting a DO-URI that other repos also use
    harvest_mode: str = "Dynamic"
    locate_mode: str = "Referral"
    failure_policy: str = "FailFast"
    fanout_timeout: float = 5.0

    @classmethod
    def from_json(cls, data: dict) -> FederationScenario:
        try:
            return cls(**data)
        except TypeError as e:
            raise BadArgument(f"bad scenario: {e}") from None

    def policy(self, i) -> UpdatePolicy:
        return UpdatePolicy.parse(self.policies[i]) if i < len(self.policies) else UpdatePolicy()


def payload(rng: random.Random) -> bytes:
    """Seeded bytes, size log-uniform in [16 B, 64 KiB]."""
    size = int(math.exp(rng.uniform(math.log(MIN_PAYLOAD), math.log(MAX_PAYLOAD))))
    return rng.randbytes(min(max(size, MIN_PAYLOAD), MAX_PAYLOAD))


@dataclass
class NodeHandle:
    index: int
    node: RepositoryNode
    server: Server
    manifests: list = field(default_factory=list)
    down: FailureMode | None = None

    @property
    def url(self):
        return self.server.url

    @property
    def repository_uri(self):
        return self.node.repository_uri


@dataclass
class FederationHandles:
    scenario: FederationScenario
    workdir: Path
    registry: Registry
    registry_server: Server
    locator: Locator
    locator_server: Server
    nodes: list
    federator: Federator
    federator_server: Server
    now: FedDatetime
    owns_workdir: bool = False
    timeline: list = field(default_factory=list)  # sorted ingest datetimes

    @property
    def registry_client(self):
        return RegistryClient(self.registry_server.url, ttl=0.0)

    def tick(self, seconds=2) -> FedDatetime:
        self.now = self.now.plus(seconds)
        return self.now

    def sync(self):
        """Locator sync plus cache sync (when the federator caches), at a fresh clock tick."""
        now = self.tick()
        report = self.locator.sync(self.registry_client, now)
        if self.federator.cache is not None:
            self.federator.cache_sync(now)
        return report

    def make_federator(self, **overrides) -> Federator:
        cfg = FederatorConfig(
            locator_url=self.locator_server.url,
            registry_url=self.registry_server.url,
            harvest_mode=overrides.pop("harvest_mode", self.scenario.harvest_mode),
            locate_mode=overrides.pop("locate_mode", self.scenario.locate_mode),
            failure_policy=overrides.pop("failure_policy", self.scenario.failure_policy),
            fanout_timeout=overrides.pop("fanout_timeout", self.scenario.fanout_timeout),
            **overrides,
        )
        if cfg.harvest_mode.value == "Cache" and cfg.cache_path is None:
            raise BadArgument("Cache mode needs cache_path")
        fed = Federator(cfg)
        fed.registry.ttl = 0.0
        return fed

    def apply_schedule(self, at: FedDatetime):
        """Bring nodes up or down as the failure schedule says for instant ``at``."""
        for entry in self.scenario.failure_schedule:
            idx, down_at, up_at = entry[0], FedDatetime.parse(entry[1]), entry[2]
            mode = FailureMode(entry[3]) if len(entry) > 3 else FailureMode.STOP
            up = FedDatetime.parse(up_at) if up_at else None
            should_be_down = down_at <= at and (up is None or at < up)
            if should_be_down and self.nodes[idx].down is None:
                inject_failure(self, idx, mode)
            elif not should_be_down and self.nodes[idx].down is not None:
                restore(self, idx)

    def stop(self):
        for s in (self.federator_server, *(n.server for n in self.nodes), self.locator_server, self.registry_server):
            s.stop()
        if self.federator.cache is not None:
            self.federator.cache.close()
        self.locator.close()
        if self.owns_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def _serve(app_factory, name):
    srv = Server(None, name=name)
    srv.app = app_factory(srv)
    try:
        srv.start()
    except OSError as e:
        raise ScenarioError(name, f"cannot bind: {e}") from None
    return srv


def build_package(rng, n_objects, bitstreams, shared_pool=None, shared_fraction=0.0) -> SubmissionPackage:
    objs = []
    for j in range(n_objects):
        inherited = ()
        if shared_pool and rng.random() < shared_fraction:
            inherited = (rng.choice(shared_pool),)
        bits = [Bitstream(f"file{k}", rng.choice(MEDIA_TYPES), payload(rng)) for k in range(bitstreams)]
        objs.append(SubmissionObject(bits, inherited, (("urn:fedgate:prop:seq", str(j)),)))
    return SubmissionPackage(objs)


def run_scenario(s: FederationScenario, workdir=None) -> FederationHandles:
    """Start registry, nodes, locator and federator; ingest and sync per the scenario."""
    owns = workdir is None
    workdir = Path(workdir or tempfile.mkdtemp(prefix="fedgate-"))
    rng = random.Random(s.seed)
    t0 = FedDatetime.parse(s.start)
    started = []
    try:
        registry = Registry()
        registry_server = _serve(lambda srv: registry.app, "registry")
        started.append(registry_server)
        shared_pool = [f"info:doi/10.1000/shared-{k}" for k in range(max(1, s.objects_per_repo // 10))]
        nodes, timeline = [], set()
        for i in range(s.repo_count):
            ns = f"info:repo{i}"
            node = RepositoryNode(
                RepositoryIdentity(mint_uri(ns, EntityKind.REPOSITORY, rng), RepoKind.SURROGATE),
                RepositoryIdentity(mint_uri(ns, EntityKind.REPOSITORY, rng), RepoKind.DATASTREAM),
                s.policy(i),
                workdir / f"repo{i}",
                ns,
                DatetimeTrigger.CONSTITUENCY_AND_DATASTREAM_CHANGES,
                name=f"repo{i}",
            )
            srv = _serve(lambda srv, node=node: node.app(lambda: srv.url), f"repo{i}")
            started.append(srv)
            h = NodeHandle(i, node, srv)
            n_batches = max(1, math.ceil(s.objects_per_repo / s.batch_size)) if s.objects_per_repo else 0
            stamps = sorted(rng.sample(range(s.timeline_seconds), n_batches)) if n_batches else []
            remaining = s.objects_per_repo
            for b, offset in enumerate(stamps):
                count = min(s.batch_size, remaining)
                remaining -= count
                pkg = build_package(rng, count, s.bitstreams_per_object, shared_pool, s.shared_do_fraction)
                dt = t0.plus(offset)
                timeline.add(dt)
                try:
                    h.manifests.append(ingest_batch(pkg, ns, node, dt, rng, registry=registry, base_url=srv.url))
                except FedgateError as e:
                    raise ScenarioError(f"repo{i}", f"ingest failed: {e}") from e
            if not h.manifests:
                for comp, bindings in node.bindings(srv.url).items():
                    registry.register(comp, bindings, node.registry_metadata(comp))
            nodes.append(h)

        now = max(timeline, default=t0).plus(2)
        locator = Locator(workdir / "locator.journal", clock=lambda: now)
        locator_server = _serve(lambda srv: locator.make_app(RegistryClient(registry_server.url, ttl=0.0)), "locator")
        started.append(locator_server)
        cfg = FederatorConfig(
            locator_url=locator_server.url,
            registry_url=registry_server.url,
            harvest_mode=s.harvest_mode,
            locate_mode=s.locate_mode,
            failure_policy=s.failure_policy,
            fanout_timeout=s.fanout_timeout,
            cache_path=str(workdir / "federator-cache.sqlite") if s.harvest_mode == "Cache" else None,
        )
        federator = Federator(cfg)
        federator.registry.ttl = 0.0
        federator_server = _serve(lambda srv: federator.app(lambda: srv.url), "federator")
        started.append(federator_server)
        handles = FederationHandles(
            s, workdir, registry, registry_server, locator, locator_server, nodes, federator, federator_server,
            now, owns, sorted(timeline),
        )
        locator.clock = lambda: handles.now
        report = handles.sync()
        if not report.ok:
            raise ScenarioError("locator", "initial sync failed: " + "; ".join(r.error for r in report.errors))
        return handles
    except BaseException:
        for srv in started:
            srv.stop()
        if owns:
            shutil.rmtree(workdir, ignore_errors=True)
        raise


# -- failure injection ---------------------------------------------------


def inject_failure(handles: FederationHandles, repo_index: int, mode=FailureMode.STOP):
    if not 0 <= repo_index < len(handles.nodes):
        raise BadArgument(f"no repository with index {repo_index}")
    h = handles.nodes[repo_index]
    mode = FailureMode(mode)
    if mode is FailureMode.STOP:
        h.server.stop()
    elif mode is FailureMode.HANG:
        h.server.release.clear()
        h.server.fault = "hang"
    else:
        h.server.fault = "error500"
    h.down = mode


def restore(handles: FederationHandles, repo_index: int):
    if not 0 <= repo_index < len(handles.nodes):
        raise BadArgument(f"no repository with index {repo_index}")
    h = handles.nodes[repo_index]
    h.server.fault = None
    h.server.release.set()
    if not h.server.running:
        h.server.start()
    h.down = None


# -- oracles ---------------------------------------------------------------


def _node_of(n):
    if isinstance(n, NodeHandle):
        if n.down is not None or not n.server.running:
            raise OracleUnavailable(f"repo{n.index} is down; the oracle needs every node")
        return n.node
    return n


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def oracle_union_harvest(nodes, start=None, until=None) -> set:
    """{(surrogate_uri, sha256(document))} over direct harvests of every node."""
    out = set()
    for n in nodes:
        node = _node_of(n)
        try:
            for su, _, doc in node.harvest_surrogates(start, until):
                out.add((su.value, digest(doc)))
        except NoRecordsMatch:
            pass
    return out


@dataclass
class OracleAnswer:
    identifier: str
    obtain: bytes | None  # max-datetime document, None if unknown
    locate: set  # {(surrogate_uri, repository_uri)}
    datastream: tuple | None  # (media type, payload) if a Datastream-URI
    ds_owners: list  # datastream repository URIs holding it


class OracleSnapshot:
    """One brute-force scan of every node; answers resolution queries by linear search."""

    def __init__(self, nodes):
        self.records = []  # (repo, su, dt, identifiers, doc)
        self.payloads = {}  # ds_uri -> list of (ds repo, media, payload)
        self.do_uris = set()
        for n in nodes:
            node = _node_of(n)
            try:
                harvested = list(node.harvest_surrogates())
            except NoRecordsMatch:
                harvested = []
            for su, dt, doc in harvested:
                s = parse_surrogate(doc)
                ids = {su.value, *(u.value for u in (*s.do_uris, *s.ds_uris, *s.ds_urls))}
                self.records.append((node.repository_uri.value, su.value, dt, ids, doc))
                self.do_uris.update(u.value for u in s.do_uris)
            for arc in node.arcs:
                for e in arc.records:
                    media, data = arc.get(e.record_id)
                    self.payloads.setdefault(e.record_id.value, []).append((node.datastream_repository_uri.value, media, data))

    def resolve(self, identifier) -> OracleAnswer:
        ident = str(identifier)
        hits = [r for r in self.records if ident in r[3]]
        exact = [r for r in hits if r[1] == ident]
        pick = max(exact or hits, key=lambda r: (r[2], r[1], r[0]), default=None)
        owners = self.payloads.get(ident, [])
        ds = (owners[0][1], owners[0][2]) if len(owners) == 1 else None
        return OracleAnswer(
            ident,
            pick[4] if pick else None,
            {(r[1], r[0]) for r in hits},
            ds,
            sorted(o[0] for o in owners),
        )

    def identifiers(self) -> dict:
        """All known identifiers by class: do, su, ds."""
        return {
            "do": sorted(self.do_uris),
            "su": sorted(r[1] for r in self.records),
            "ds": sorted(self.payloads),
        }


def oracle_resolve(nodes, identifier) -> OracleAnswer:
    return OracleSnapshot(nodes).resolve(identifier)


# -- locator benchmark -------------------------------------------------------


@dataclass
class BenchReport:
    n_uris: int
    n_queries: int
    hits: int
    misses: int
    answered: int
    median_ms: float
    p99_ms: float
    mean_ms: float
    load_seconds: float
    latencies: list = field(default_factory=list, repr=False)  # (kind, ms, n_repos)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("latencies")
        return d


def synthetic_uris(n, rng, n_repos=16):
    """(uri, repo index) pairs mixing DO, Surrogate and Datastream URIs plus some URLs."""
    kinds = ("do", "su", "ds")
    out = []
    for i in range(n):
        r = rng.randrange(n_repos)
        k = kinds[i % 3]
        u = f"{rng.getrandbits(128):032x}"
        if i % 17 == 0:
            out.append((f"http://repo{r}.example.org/{k}/{u}", r))
        else:
            out.append((f"info:bench{r}/{k}/{u}", r))
    return out


def bench_locator(n_uris: int, n_queries: int, seed: int = 0, absent_fraction: float = 0.1, n_repos: int = 16) -> BenchReport:
    """Load synthetic entries, then time LocateRepositories over loopback HTTP."""
    rng = random.Random(seed)
    locator = Locator()
    repos = [f"info:bench{r}/repo/{r:04d}" for r in range(n_repos)]
    t0 = time.perf_counter()
    pairs = synthetic_uris(n_uris, rng, n_repos)
    locator.bulk_load(pairs, repos)
    load_seconds = time.perf_counter() - t0
    n_absent = int(n_queries * absent_fraction) if n_uris else n_queries
    queries = [("hit", pairs[rng.randrange(n_uris)][0]) for _ in range(n_queries - n_absent)]
    queries += [("miss", f"info:absent/do/{rng.getrandbits(128):032x}") for _ in range(n_absent)]
    rng.shuffle(queries)
    del pairs
    latencies = []
    hits = misses = answered = 0
    with Server(locator.make_app(), name="bench-locator") as srv:
        base = srv.url + "/openurl"
        for kind, uri in queries:
            url = kev_url(base, uri, SVC_LOCATE_REPOSITORIES)
            t = time.perf_counter()
            status, _, body = fetch(url, 10.0)
            ms = (time.perf_counter() - t) * 1000.0
            if status != 200:
                latencies.append((kind, ms, -1))
                continue
            answered += 1
            found = parse_uri_list(body, "repository")
            if kind == "hit" and found:
                hits += 1
            elif kind == "miss" and not found:
                misses += 1
            latencies.append((kind, ms, len(found)))
    ms_sorted = sorted(m for _, m, _ in latencies)
    p99 = ms_sorted[min(len(ms_sorted) - 1, math.ceil(0.99 * len(ms_sorted)) - 1)] if ms_sorted else float("nan")
    return BenchReport(
        n_uris, n_queries, hits, misses, answered,
        statistics.median(ms_sorted) if ms_sorted else float("nan"),
        p99,
        statistics.fmean(ms_sorted) if ms_sorted else float("nan"),
        round(load_seconds, 3),
        latencies,
    )


def scenario_summary(handles: FederationHandles) -> dict:
    """Counts used by the CLI's ``scenario run``."""
    manifests = [m for n in handles.nodes for m in n.manifests]
    return {
        "repositories": [
            {"index": n.index, "repository": n.repository_uri.value, "url": n.url,
             "surrogates": sum(len(m.objects) for m in n.manifests)}
            for n in handles.nodes
        ],
        "locator_entries": len(handles.locator),
        "surrogates": sum(len(m.objects) for m in manifests),
        "datastreams": sum(len(m.ds_uris) for m in manifests),
        "federator": handles.federator_server.url,
        "clock": str(handles.now),
    }


def manifests_json(handles: FederationHandles) -> str:
    """Manifest content without run-specific paths and ports, for determinism checks."""
    out = []
    for n in handles.nodes:
        for m in n.manifests:
            d = json.loads(m.to_json())
            d["tapes"] = [Path(p).name for p in d["tapes"]]
            d["arcs"] = [Path(p).name for p in d["arcs"]]
            d.pop("bindings")
            out.append(d)
    return json.dumps(out, sort_keys=True)

