"""Identifier Locator: Content Object URI -> Repository-URIs that serve it.

Entries are packed tightly because the table is meant to hold millions of
URIs: each key maps to one int carrying the last-seen datetime and the id
of an interned tuple of repository URIs.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import parse_qsl, urlencode

from .errors import FedgateError, ProtocolError, SingleOwnerViolation, Unreachable
from .httpd import Response, fetch
from .model import ContentURI, FedDatetime, InterfaceType, classify_uri
from .registry import ROLE_KEY
from .service import error_response
from .surrogate import parse_surrogate
from .wire import (
    SVC_LOCATE_REPOSITORIES,
    error_body,
    harvest_client,
    kev_url,
    parse_error_body,
    parse_kev,
    parse_uri_list,
    render_uri_list,
    service_of,
)

log = logging.getLogger(__name__)

_GROUP_BITS = 24
_GROUP_MASK = (1 << _GROUP_BITS) - 1
_OVERLAP = 1  # seconds re-harvested on every sync; duplicates are idempotent


@dataclass(frozen=True)
class LocatorEntry:
    content_uri: ContentURI
    repository_uris: tuple
    last_seen_datetime: FedDatetime


@dataclass
class RepoSyncResult:
    repository_uri: str
    interface_type: str
    harvested: int = 0
    new: int = 0
    cursor: str | None = None
    error: str | None = None
    hard: bool = False  # integrity breach rather than a transient failure

    def to_json(self):
        return dict(self.__dict__)


@dataclass
class SyncReport:
    started: FedDatetime
    results: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.error is None for r in self.results)

    @property
    def errors(self) -> list:
        return [r for r in self.results if r.error is not None]

    def for_repo(self, repo) -> list:
        return [r for r in self.results if r.repository_uri == str(repo)]

    def to_json(self):
        return {"started": str(self.started), "ok": self.ok, "results": [r.to_json() for r in self.results]}


class Locator:
    def __init__(self, journal_path=None, clock=FedDatetime.now):
        self._index = {}
        self._groups = [()]
        self._group_ids = {(): 0}
        self.ds_repos = set()
        self.cursors = {}
        self.clock = clock
        self._lock = threading.Lock()
        self._sync_lock = threading.Lock()
        self.journal_path = Path(journal_path) if journal_path else None
        self._journal = None
        self._journal_lines = 0
        if self.journal_path is not None:
            self._recover()

    def __len__(self):
        return len(self._index)

    # -- packed storage --

    def _gid(self, repos: tuple) -> int:
        gid = self._group_ids.get(repos)
        if gid is None:
            gid = len(self._groups)
            if gid > _GROUP_MASK:
                raise FedgateError("too many distinct repository sets")
            self._groups.append(repos)
            self._group_ids[repos] = gid
        return gid

    def _unpack(self, packed):
        return self._groups[packed & _GROUP_MASK], packed >> _GROUP_BITS

    # -- reads --

    def locate_repositories(self, identifier) -> list:
        key = identifier.value if isinstance(identifier, ContentURI) else str(identifier)
        with self._lock:
            packed = self._index.get(key)
            if packed is None:
                return []
            repos = self._groups[packed & _GROUP_MASK]
        return [ContentURI(r) for r in repos]

    def entry(self, identifier) -> LocatorEntry | None:
        key = str(identifier)
        with self._lock:
            packed = self._index.get(key)
            if packed is None:
                return None
            repos, seen = self._unpack(packed)
        return LocatorEntry(ContentURI(key), tuple(ContentURI(r) for r in repos), FedDatetime(seen))

    def keys(self):
        with self._lock:
            return list(self._index)

    # -- writes --

    def apply(self, repo, records, datastream=False, journal=True) -> int:
        """Upsert (content_uri, datetime) pairs for one repository as one batch.

        For a Datastream Repository the single-owner rule is checked over the
        whole batch before anything changes. Returns the count of new mappings.
        """
        repo = str(repo)
        records = [(str(u), dt.seconds if isinstance(dt, FedDatetime) else int(dt)) for u, dt in records]
        with self._lock:
            if datastream:
                for uri, _ in records:
                    packed = self._index.get(uri)
                    if packed is None:
                        continue
                    owners = [r for r in self._groups[packed & _GROUP_MASK] if r in self.ds_repos and r != repo]
                    if owners:
                        raise SingleOwnerViolation(uri, owners + [repo])
                self.ds_repos.add(repo)
            if journal:
                self._log([f"U\t{repo}\t{u}\t{dt}\t{'d' if datastream else 's'}" for u, dt in records])
            new = 0
            for uri, dt in records:
                packed = self._index.get(uri)
                if packed is None:
                    self._index[uri] = (dt << _GROUP_BITS) | self._gid((repo,))
                    new += 1
                    continue
                repos, seen = self._unpack(packed)
                if repo not in repos:
                    repos = tuple(sorted(repos + (repo,)))
                    new += 1
                self._index[uri] = (max(seen, dt) << _GROUP_BITS) | self._gid(repos)
            return new

    def force_entry(self, content_uri, repo, datastream=False):
        """Insert a mapping without the single-owner check (test fixtures)."""
        repo, uri = str(repo), str(content_uri)
        with self._lock:
            if datastream:
                self.ds_repos.add(repo)
            packed = self._index.get(uri)
            repos, seen = self._unpack(packed) if packed is not None else ((), 0)
            self._index[uri] = (seen << _GROUP_BITS) | self._gid(tuple(sorted(set(repos) | {repo})))

    def bulk_load(self, pairs, repo_by_index):
        """Fast path for synthetic loads: (uri, repo index) pairs, no journal."""
        gids = [self._gid((str(r),)) for r in repo_by_index]
        with self._lock:
            idx = self._index
            for uri, i in pairs:
                idx[uri] = gids[i]

    def advance_cursor(self, repo, itype, cursor: FedDatetime, journal=True):
        key = (str(repo), InterfaceType(itype).value)
        with self._lock:
            old = self.cursors.get(key)
            if old is not None and cursor < old:
                cursor = old
            self.cursors[key] = cursor
            if journal:
                self._log([f"C\t{key[0]}\t{key[1]}\t{cursor}"])

    # -- sync --

    def sync(self, registry, now: FedDatetime | None = None, timeout: float = 30.0) -> SyncReport:
        """Pull identifiers from every registered Tier-1 repository.

        Each (repository, interface) is harvested from its cursor; the batch
        is applied atomically and the cursor moves to (sync start - 1s) only
        when everything for that pair succeeded.
        """
        with self._sync_lock:
            start = now or self.clock()
            report = SyncReport(start)
            for comp in registry.components():
                if dict(comp.metadata).get(ROLE_KEY, "tier1") != "tier1":
                    continue
                b = comp.binding(InterfaceType.HARVEST_IDENTIFIERS)
                if b is not None:
                    report.results.append(self._sync_one(comp.uri, b, "identifiers", "ListRecords", start, timeout))
                else:
                    b = comp.binding(InterfaceType.HARVEST_SURROGATES)
                    if b is not None:
                        report.results.append(self._sync_one(comp.uri, b, "surrogate", "ListRecords", start, timeout))
                b = comp.binding(InterfaceType.HARVEST_DATASTREAM_IDENTIFIERS)
                if b is not None:
                    report.results.append(self._sync_one(comp.uri, b, "datetime", "ListIdentifiers", start, timeout))
            self._maybe_compact()
            return report

    def _sync_one(self, repo, binding, prefix, verb, start, timeout):

        itype = binding.interface_type
        key = (repo.value, itype.value)
        cursor = self.cursors.get(key)
        res = RepoSyncResult(repo.value, itype.value, cursor=str(cursor) if cursor else None)
        batch = []
        try:
            for rec in harvest_client(binding.interface_url.value, prefix, from_=cursor, verb=verb, timeout=timeout):
                res.harvested += 1
                if verb == "ListIdentifiers":
                    ident, dt = rec
                    batch.append((ident, dt))
                    continue
                ident, dt, meta = rec
                if prefix == "identifiers":
                    do, ds, urls = meta
                else:
                    s = parse_surrogate(meta)
                    do, ds, urls = s.do_uris, s.ds_uris, s.ds_urls
                batch.append((ident, dt))
                batch.extend((u.value, dt) for u in (*do, *ds, *urls))
            res.new = self.apply(repo, batch, datastream=itype is InterfaceType.HARVEST_DATASTREAM_IDENTIFIERS)
        except SingleOwnerViolation as e:
            res.error, res.hard = str(e), True
            log.error("locator sync: %s", e)
            return res
        except (FedgateError, ValueError) as e:
            res.error = str(e)
            log.warning("locator sync of %s failed: %s", repo, e)
            return res
        new_cursor = start.plus(-_OVERLAP)
        self.advance_cursor(repo, itype, new_cursor if cursor is None or new_cursor > cursor else cursor)
        res.cursor = str(self.cursors[key])
        return res

    # -- persistence: journal of committed batches plus a compacted snapshot --

    def _snapshot_path(self):
        return self.journal_path.with_name(self.journal_path.name + ".snapshot")

    def _log(self, lines):
        if self.journal_path is None:
            return
        if self._journal is None:
            self._journal = open(self.journal_path, "a", encoding="utf-8")  # noqa: SIM115
        self._journal.write("".join(line + "\n" for line in lines))
        self._journal.flush()
        self._journal_lines += len(lines)

    def _recover(self):
        snap = self._snapshot_path()
        if snap.exists():
            with open(snap, encoding="utf-8") as f:
                for line in f:
                    self._replay_snapshot_line(line.rstrip("\n").split("\t"))
        if not self.journal_path.exists():
            return
        pending = []
        with open(self.journal_path, encoding="utf-8") as f:
            for line in f:
                if not line.endswith("\n"):
                    break  # torn write
                parts = line.rstrip("\n").split("\t")
                if parts[0] == "U" and len(parts) == 5:
                    pending.append(parts)
                elif parts[0] == "C" and len(parts) == 4:
                    for _, repo, uri, dt, kind in pending:
                        self._replay_upsert(repo, uri, int(dt), kind == "d")
                    pending = []
                    self.cursors[(parts[1], parts[2])] = FedDatetime.parse(parts[3])
                self._journal_lines += 1
        # uncommitted upserts belong to a sync that never finished; drop them

    def _replay_upsert(self, repo, uri, dt, ds):
        if ds:
            self.ds_repos.add(repo)
        packed = self._index.get(uri)
        repos, seen = self._unpack(packed) if packed is not None else ((), 0)
        if repo not in repos:
            repos = tuple(sorted(repos + (repo,)))
        self._index[uri] = (max(seen, dt) << _GROUP_BITS) | self._gid(repos)

    def _replay_snapshot_line(self, parts):
        if parts[0] == "E":
            _, uri, seen, repos = parts
            self._index[uri] = (int(seen) << _GROUP_BITS) | self._gid(tuple(repos.split(" ")))
        elif parts[0] == "K":
            self.cursors[(parts[1], parts[2])] = FedDatetime.parse(parts[3])
        elif parts[0] == "R":
            self.ds_repos.add(parts[1])

    def _maybe_compact(self, threshold=200_000):
        if self.journal_path is not None and self._journal_lines >= threshold:
            self.compact()

    def compact(self):
        """Write a snapshot of the whole table and start an empty journal."""
        if self.journal_path is None:
            return
        with self._lock:
            snap = self._snapshot_path()
            tmp = snap.with_name(snap.name + ".tmp")
            with open(tmp, "w", encoding="utf-8") as f:
                f.writelines(f"R\t{repo}\n" for repo in sorted(self.ds_repos))
                f.writelines(f"K\t{repo}\t{it}\t{cur}\n" for (repo, it), cur in sorted(self.cursors.items()))
                for uri, packed in self._index.items():
                    repos, seen = self._unpack(packed)
                    f.write(f"E\t{uri}\t{seen}\t{' '.join(repos)}\n")
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, snap)
            if self._journal is not None:
                self._journal.close()
                self._journal = None
            open(self.journal_path, "w").close()
            self._journal_lines = 0

    def close(self):
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    # -- HTTP --

    def cursor_table(self) -> list:
        return [{"repository": r, "interface": i, "cursor": str(c)} for (r, i), c in sorted(self.cursors.items())]

    def make_app(self, registry=None):
        def app(method, path, query, body):
            if path == "/openurl" and method in ("GET", "HEAD"):
                try:
                    req = parse_kev(query)
                    if service_of(req.svc_id) is not InterfaceType.LOCATE_REPOSITORIES:
                        return Response(400, error_body("unknownService", f"unsupported svc_id {req.svc_id}"))
                    repos = self.locate_repositories(req.rft_id)
                    return Response(200, render_uri_list("repositories", "repository", repos, identifier=req.rft_id))
                except Exception as e:  # noqa: BLE001 - mapped onto status codes
                    return error_response(e)
            if path == "/admin/sync" and method == "POST":
                if registry is None:
                    return Response(409, error_body("noRegistry", "locator has no registry configured"))
                args = dict(parse_qsl(query))
                try:
                    now = FedDatetime.parse(args["now"]) if "now" in args else None
                except FedgateError as e:
                    return Response(400, error_body("badArgument", str(e)))
                try:
                    report = self.sync(registry, now)
                except FedgateError as e:
                    return Response(502, error_body("upstreamFailure", str(e)))
                return Response(200, json.dumps(report.to_json()).encode(), "application/json")
            if path == "/admin/cursors" and method == "GET":
                return Response(200, json.dumps(self.cursor_table()).encode(), "application/json")
            return Response(404, error_body("notFound", f"no route for {method} {path}"))

        return app


class LocatorClient:
    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def locate_repositories(self, identifier) -> list:
        status, _, body = fetch(kev_url(self.url + "/openurl", classify_uri(identifier), SVC_LOCATE_REPOSITORIES), self.timeout)
        if status >= 500:
            raise Unreachable(self.url, f"HTTP {status}")
        if status != 200:
            code, msg = parse_error_body(body)
            raise ProtocolError(code or f"http{status}", msg, self.url)
        return parse_uri_list(body, "repository")

    def sync(self, now=None, timeout: float = 600.0) -> dict:
        q = "?" + urlencode({"now": str(now)}) if now is not None else ""
        status, _, body = fetch(f"{self.url}/admin/sync{q}", timeout, method="POST", body=b"")
        if status != 200:
            code, msg = parse_error_body(body)
            raise ProtocolError(code or f"http{status}", msg, self.url)
        return json.loads(body)

    def cursors(self) -> list:
        status, _, body = fetch(self.url + "/admin/cursors", self.timeout)
        if status != 200:
            raise Unreachable(self.url, f"HTTP {status}")
        return json.loads(body)
