"""In-memory image of a federated storage system.

The inventory is an interlinked object graph: groups, partitions, sites,
datasets, blocks, and block replicas, with dataset replicas derived from the
block replicas present at a site. Individual file records are deliberately
NOT kept resident; they live in a file source (usually the snapshot the
inventory was loaded from) and are fetched transiently with
:meth:`Inventory.load_files`.

Two serialized forms are defined here:

* snapshots: line-oriented text, one record per line,
  ``TYPE<TAB>field=value<TAB>...``, types ordered GROUP, PARTITION, SITE,
  DATASET, BLOCK, FILE, REPLICA; the canonical form sorts lines
  lexicographically within each type.
* deltas: the same record lines prefixed ``U `` (update) or ``D `` (delete),
  terminated by a single ``END`` line. Applying a delta is atomic and
  idempotent; updates create missing objects, deletes of missing objects are
  no-ops.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field

from .util import stable_json

# Site storage kinds / statuses.
DISK = "DISK"
TAPE = "TAPE"
READY = "READY"
MORGUE = "MORGUE"

# Dataset statuses.
VALID = "VALID"
INVALID = "INVALID"
DEPRECATED = "DEPRECATED"

# Derived dataset-replica classifications.
COMPLETE = "COMPLETE"
PARTIAL = "PARTIAL"
INCOMPLETE = "INCOMPLETE"

GLOBAL_PARTITION = "global"

_DATASET_STATUSES = (VALID, INVALID, DEPRECATED)
_SITE_KINDS = (DISK, TAPE)
_SITE_STATUSES = (READY, MORGUE)


class InventoryError(Exception):
    """Base class for inventory failures."""


class LoadError(InventoryError):
    """Snapshot could not be loaded; message names the offending record."""


class DeltaError(InventoryError):
    """Delta rejected; the inventory is unchanged."""


class OccupancyUndefined(InventoryError):
    """Occupancy was requested for a (site, partition) with zero quota."""


class FileStoreUnavailable(InventoryError):
    """File persistence could not be read; the operation may be retried."""


# ---------------------------------------------------------------------------
# Records: the serialized unit of both snapshots and deltas.
# ---------------------------------------------------------------------------

RECORD_FIELDS = {
    "GROUP": ("name",),
    "PARTITION": ("name", "rule"),
    "SITE": ("name", "kind", "endpoint", "status", "quotas"),
    "DATASET": ("name", "status", "type", "updated", "attrs"),
    "BLOCK": ("dataset", "name", "size", "files", "updated"),
    "FILE": ("dataset", "block", "lfn", "size"),
    "REPLICA": ("dataset", "block", "site", "group", "size", "present",
                "custodial", "locked", "enforced", "updated"),
}

TYPE_ORDER = ("GROUP", "PARTITION", "SITE", "DATASET", "BLOCK", "FILE", "REPLICA")
_TYPE_RANK = {t: i for i, t in enumerate(TYPE_ORDER)}


def _check_text(value: str, what: str) -> str:
    if not isinstance(value, str) or not value:
        raise InventoryError(f"{what} must be a non-empty string, got {value!r}")
    if "\t" in value or "\n" in value:
        raise InventoryError(f"{what} must not contain tabs or newlines: {value!r}")
    return value


@dataclass(frozen=True)
class Record:
    """One serialized object: a type tag plus field=value pairs."""

    rtype: str
    fields: dict

    def line(self) -> str:
        order = RECORD_FIELDS[self.rtype]
        parts = [self.rtype]
        for key in order:
            if key in self.fields:
                parts.append(f"{key}={self.fields[key]}")
        return "\t".join(parts)

    @staticmethod
    def parse(line: str) -> "Record":
        parts = line.split("\t")
        rtype = parts[0]
        if rtype not in RECORD_FIELDS:
            raise LoadError(f"unknown record type {rtype!r} in line {line!r}")
        fields = {}
        for part in parts[1:]:
            if "=" not in part:
                raise LoadError(f"malformed field {part!r} in line {line!r}")
            key, value = part.split("=", 1)
            if key not in RECORD_FIELDS[rtype]:
                raise LoadError(f"unknown field {key!r} for {rtype} in line {line!r}")
            fields[key] = value
        return Record(rtype, fields)

    def get(self, key: str, line_hint: str | None = None) -> str:
        try:
            return self.fields[key]
        except KeyError:
            raise LoadError(
                f"record {line_hint or self.line()!r} is missing field {key!r}"
            ) from None


def _fmt_bool(value: bool) -> str:
    return "true" if value else "false"


def _parse_bool(text: str, rec: Record) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise LoadError(f"bad boolean {text!r} in record {rec.line()!r}")


def _parse_int(text: str, rec: Record, what: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise LoadError(f"bad {what} {text!r} in record {rec.line()!r}") from None
    if value < 0:
        raise LoadError(f"negative {what} in record {rec.line()!r}")
    return value


def _parse_float(text: str, rec: Record, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise LoadError(f"bad {what} {text!r} in record {rec.line()!r}") from None


def _parse_json_map(text: str, rec: Record, what: str) -> dict:
    try:
        value = json.loads(text)
    except ValueError:
        raise LoadError(f"bad {what} JSON in record {rec.line()!r}") from None
    if not isinstance(value, dict):
        raise LoadError(f"{what} must be a JSON object in record {rec.line()!r}")
    return value


# ---------------------------------------------------------------------------
# Graph objects.
# ---------------------------------------------------------------------------


class Group:
    __slots__ = ("name", "numeric_id")

    def __init__(self, name: str):
        self.name = name
        self.numeric_id = 0

    def to_record(self) -> Record:
        return Record("GROUP", {"name": self.name})

    def __repr__(self):
        return f"Group({self.name!r})"


class Partition:
    """A named subset of all block replicas, defined by a policy predicate.

    The implicit ``global`` partition has no rule and contains every replica.
    """

    __slots__ = ("name", "rule_text", "_compiled")

    def __init__(self, name: str, rule_text: str = ""):
        self.name = name
        self.rule_text = rule_text
        self._compiled = None

    @property
    def is_global(self) -> bool:
        return self.name == GLOBAL_PARTITION

    def predicate(self):
        """Compiled membership predicate; None for the global partition."""
        if self.is_global or not self.rule_text:
            return None
        if self._compiled is None:
            from . import policy  # deferred: policy evaluates over this module's types

            self._compiled = policy.compile_predicate(self.rule_text)
        return self._compiled

    def to_record(self) -> Record:
        return Record("PARTITION", {"name": self.name, "rule": self.rule_text})

    def __repr__(self):
        return f"Partition({self.name!r})"


class Site:
    __slots__ = ("name", "storage_kind", "endpoint", "status", "quotas",
                 "dataset_replicas", "numeric_id")

    def __init__(self, name, storage_kind=DISK, endpoint="", status=READY, quotas=None):
        self.name = name
        self.storage_kind = storage_kind
        self.endpoint = endpoint
        self.status = status
        self.quotas = dict(quotas or {})
        self.dataset_replicas: dict[str, DatasetReplica] = {}
        self.numeric_id = 0

    def quota_for(self, partition_name: str) -> int:
        return int(self.quotas.get(partition_name, 0))

    def block_replicas(self):
        for dr in self.dataset_replicas.values():
            yield from dr.block_replicas.values()

    def to_record(self) -> Record:
        return Record("SITE", {
            "name": self.name,
            "kind": self.storage_kind,
            "endpoint": self.endpoint,
            "status": self.status,
            "quotas": stable_json(self.quotas),
        })

    def __repr__(self):
        return f"Site({self.name!r}, {self.storage_kind}, {self.status})"


class Dataset:
    __slots__ = ("name", "status", "data_type", "last_update", "attrs",
                 "blocks", "replicas", "size", "num_files", "numeric_id")

    def __init__(self, name, status=VALID, data_type="", last_update=0.0, attrs=None):
        self.name = name
        self.status = status
        self.data_type = data_type
        self.last_update = float(last_update)
        self.attrs = dict(attrs or {})
        self.blocks: dict[str, Block] = {}
        self.replicas: dict[str, DatasetReplica] = {}
        self.size = 0
        self.num_files = 0
        self.numeric_id = 0

    def recompute_totals(self):
        self.size = sum(b.size for b in self.blocks.values())
        self.num_files = sum(b.num_files for b in self.blocks.values())

    def to_record(self) -> Record:
        return Record("DATASET", {
            "name": self.name,
            "status": self.status,
            "type": self.data_type,
            "updated": repr(self.last_update),
            "attrs": stable_json(self.attrs),
        })

    def __repr__(self):
        return f"Dataset({self.name!r}, {self.status})"


class Block:
    __slots__ = ("name", "dataset", "size", "num_files", "last_update", "replicas")

    def __init__(self, dataset: Dataset, name: str, size=0, num_files=0, last_update=0.0):
        self.dataset = dataset
        self.name = name
        self.size = int(size)
        self.num_files = int(num_files)
        self.last_update = float(last_update)
        self.replicas: dict[str, BlockReplica] = {}

    @property
    def key(self) -> tuple[str, str]:
        return (self.dataset.name, self.name)

    def to_record(self) -> Record:
        return Record("BLOCK", {
            "dataset": self.dataset.name,
            "name": self.name,
            "size": str(self.size),
            "files": str(self.num_files),
            "updated": repr(self.last_update),
        })

    def __repr__(self):
        return f"Block({self.dataset.name!r}, {self.name!r})"


@dataclass(frozen=True)
class File:
    """Transient file record; never retained in the resident image."""

    lfn: str
    block: Block
    size: int


class BlockReplica:
    """A copy of a block at a site.

    ``file_presence`` is None for a complete replica (all files present) or
    an explicit set of present lfns otherwise; ``size_on_site`` counts bytes
    physically present.
    """

    __slots__ = ("block", "site", "group", "size_on_site", "file_presence",
                 "is_custodial", "is_locked", "is_enforced", "last_update")

    def __init__(self, block, site, group, size_on_site=0, file_presence=None,
                 is_custodial=False, is_locked=False, is_enforced=False,
                 last_update=0.0):
        self.block = block
        self.site = site
        self.group = group
        self.size_on_site = int(size_on_site)
        self.file_presence = None if file_presence is None else set(file_presence)
        self.is_custodial = bool(is_custodial)
        self.is_locked = bool(is_locked)
        self.is_enforced = bool(is_enforced)
        self.last_update = float(last_update)

    @property
    def is_complete(self) -> bool:
        return self.file_presence is None

    def present_count(self) -> int:
        return self.block.num_files if self.is_complete else len(self.file_presence)

    def to_record(self) -> Record:
        present = "*" if self.is_complete else json.dumps(
            sorted(self.file_presence), separators=(",", ":"))
        return Record("REPLICA", {
            "dataset": self.block.dataset.name,
            "block": self.block.name,
            "site": self.site.name,
            "group": self.group.name,
            "size": str(self.size_on_site),
            "present": present,
            "custodial": _fmt_bool(self.is_custodial),
            "locked": _fmt_bool(self.is_locked),
            "enforced": _fmt_bool(self.is_enforced),
            "updated": repr(self.last_update),
        })

    def __repr__(self):
        state = "complete" if self.is_complete else f"{len(self.file_presence)} files"
        return f"BlockReplica({self.block.dataset.name!r}:{self.block.name!r}@{self.site.name!r}, {state})"


class DatasetReplica:
    """Derived view: the block replicas of one dataset at one site."""

    __slots__ = ("dataset", "site", "block_replicas")

    def __init__(self, dataset: Dataset, site: Site):
        self.dataset = dataset
        self.site = site
        self.block_replicas: dict[str, BlockReplica] = {}

    @property
    def classification(self) -> str:
        if any(not br.is_complete for br in self.block_replicas.values()):
            return INCOMPLETE
        if len(self.block_replicas) == len(self.dataset.blocks):
            return COMPLETE
        return PARTIAL

    @property
    def size_on_site(self) -> int:
        return sum(br.size_on_site for br in self.block_replicas.values())

    @property
    def projected_size(self) -> int:
        """Size once all in-flight block replicas complete."""
        return sum(br.block.size for br in self.block_replicas.values())

    def present_files(self) -> int:
        return sum(br.present_count() for br in self.block_replicas.values())

    def __repr__(self):
        return f"DatasetReplica({self.dataset.name!r}@{self.site.name!r})"


# ---------------------------------------------------------------------------
# Deltas.
# ---------------------------------------------------------------------------


@dataclass
class InventoryDelta:
    """An ordered list of (verb, record) pairs; the unit of commit."""

    entries: list = field(default_factory=list)

    def update(self, record: Record) -> "InventoryDelta":
        self.entries.append(("U", record))
        return self

    def delete(self, record: Record) -> "InventoryDelta":
        self.entries.append(("D", record))
        return self

    def __len__(self):
        return len(self.entries)

    def __bool__(self):
        return True

    def to_wire(self) -> str:
        lines = [f"{verb} {rec.line()}" for verb, rec in self.entries]
        lines.append("END")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_wire(cls, text: str) -> "InventoryDelta":
        delta = cls()
        terminated = False
        for raw in text.splitlines():
            if terminated:
                raise DeltaError("content after END in delta wire text")
            if raw == "END":
                terminated = True
                continue
            if len(raw) < 2 or raw[0] not in "UD" or raw[1] != " ":
                raise DeltaError(f"malformed delta line {raw!r}")
            try:
                record = Record.parse(raw[2:])
            except LoadError as exc:
                raise DeltaError(str(exc)) from None
            delta.entries.append((raw[0], record))
        if not terminated:
            raise DeltaError("delta wire text not terminated by END")
        return delta


# ---------------------------------------------------------------------------
# File sources: where the non-resident file records live.
# ---------------------------------------------------------------------------


class MemoryFileSource:
    """File records held in a plain dict; used by generated worlds and tests."""

    def __init__(self):
        self._files: dict[tuple[str, str], dict[str, int]] = {}

    def put(self, block_key, lfn, size):
        self._files.setdefault(block_key, {})[lfn] = int(size)

    def discard_block(self, block_key):
        self._files.pop(block_key, None)

    def files_for(self, block_key) -> dict[str, int]:
        return dict(self._files.get(block_key, {}))

    def block_keys(self):
        return list(self._files.keys())


class SnapshotFileSource:
    """FILE records read back on demand from a snapshot file.

    Only a per-block byte-range index is kept resident; the records
    themselves are parsed on each request.
    """

    def __init__(self, path: str):
        self.path = path
        self._index: dict[tuple[str, str], tuple[int, int]] = {}

    def set_range(self, block_key, start, end):
        self._index[block_key] = (start, end)

    def discard_block(self, block_key):
        self._index.pop(block_key, None)

    def block_keys(self):
        return list(self._index.keys())

    def files_for(self, block_key) -> dict[str, int]:
        span = self._index.get(block_key)
        if span is None:
            return {}
        try:
            with open(self.path, "rb") as fh:
                fh.seek(span[0])
                chunk = fh.read(span[1] - span[0])
        except OSError as exc:
            raise FileStoreUnavailable(f"cannot read {self.path}: {exc}") from None
        files = {}
        for line in chunk.decode("utf-8").splitlines():
            rec = Record.parse(line)
            files[rec.get("lfn")] = int(rec.get("size"))
        return files


# ---------------------------------------------------------------------------
# The inventory proper.
# ---------------------------------------------------------------------------


class Inventory:
    """The complete resident image plus the commit protocol that mutates it.

    Mutation goes through :meth:`update`, :meth:`delete`, or (atomically)
    :meth:`apply_delta`. Derived quantities (dataset sizes, replica
    completeness) are recomputed as part of every mutation; callers never
    set them directly.
    """

    def __init__(self, file_source=None):
        self.groups: dict[str, Group] = {}
        self.partitions: dict[str, Partition] = {}
        self.sites: dict[str, Site] = {}
        self.datasets: dict[str, Dataset] = {}
        self.file_source = file_source
        self._file_overlay: dict[tuple[str, str], dict[str, int]] = {}
        self._file_tombstones: dict[tuple[str, str], set[str]] = {}
        self._block_tombstones: set[tuple[str, str]] = set()
        self._next_id = {"group": 1, "site": 1, "dataset": 1}
        self.partitions[GLOBAL_PARTITION] = Partition(GLOBAL_PARTITION)

    # -- direct construction helpers -------------------------------------

    def add_group(self, name: str) -> Group:
        _check_text(name, "group name")
        group = self.groups.get(name)
        if group is None:
            group = Group(name)
            group.numeric_id = self._take_id("group")
            self.groups[name] = group
        return group

    def add_partition(self, name: str, rule_text: str = "") -> Partition:
        _check_text(name, "partition name")
        if name == GLOBAL_PARTITION:
            if rule_text:
                raise InventoryError("the global partition cannot carry a rule")
            return self.partitions[GLOBAL_PARTITION]
        part = self.partitions.get(name)
        if part is None:
            part = Partition(name, rule_text)
        else:
            part.rule_text = rule_text
            part._compiled = None
        if rule_text:
            from . import policy

            try:
                part.predicate()
            except policy.PolicyError as exc:
                raise InventoryError(
                    f"partition rule for {name!r} does not parse: {exc}") from None
        self.partitions[name] = part
        return part

    def add_site(self, name, storage_kind=DISK, endpoint="", status=READY,
                 quotas=None) -> Site:
        _check_text(name, "site name")
        if storage_kind not in _SITE_KINDS:
            raise InventoryError(f"bad site kind {storage_kind!r}")
        if status not in _SITE_STATUSES:
            raise InventoryError(f"bad site status {status!r}")
        quotas = {k: int(v) for k, v in (quotas or {}).items()}
        if any(v < 0 for v in quotas.values()):
            raise InventoryError(f"negative quota for site {name!r}")
        site = self.sites.get(name)
        if site is None:
            site = Site(name, storage_kind, endpoint, status, quotas)
            site.numeric_id = self._take_id("site")
            self.sites[name] = site
        else:
            site.storage_kind = storage_kind
            site.endpoint = endpoint
            site.status = status
            site.quotas = quotas
        return site

    def add_dataset(self, name, status=VALID, data_type="", last_update=0.0,
                    attrs=None) -> Dataset:
        _check_text(name, "dataset name")
        if status not in _DATASET_STATUSES:
            raise InventoryError(f"bad dataset status {status!r}")
        ds = self.datasets.get(name)
        if ds is None:
            ds = Dataset(name, status, data_type, last_update, attrs)
            ds.numeric_id = self._take_id("dataset")
            self.datasets[name] = ds
        else:
            ds.status = status
            ds.data_type = data_type
            ds.last_update = float(last_update)
            ds.attrs = dict(attrs or {})
        return ds

    def add_block(self, dataset_name, block_name, size=0, num_files=0,
                  last_update=0.0) -> Block:
        ds = self._need_dataset(dataset_name)
        _check_text(block_name, "block name")
        block = ds.blocks.get(block_name)
        if block is None:
            block = Block(ds, block_name, size, num_files, last_update)
            ds.blocks[block_name] = block
        else:
            block.size = int(size)
            block.num_files = int(num_files)
            block.last_update = float(last_update)
        ds.recompute_totals()
        return block

    def add_files(self, dataset_name, block_name, files) -> None:
        """Register file records for a block and rederive its size/count."""
        block = self._need_block(dataset_name, block_name)
        overlay = self._file_overlay.setdefault(block.key, {})
        tombs = self._file_tombstones.get(block.key)
        for lfn, size in files:
            _check_text(lfn, "lfn")
            if int(size) <= 0:
                raise InventoryError(f"file {lfn!r} must have size > 0")
            overlay[lfn] = int(size)
            if tombs:
                tombs.discard(lfn)
        self._rederive_block(block)

    def add_replica(self, dataset_name, block_name, site_name, group_name,
                    size_on_site=None, file_presence=None, is_custodial=False,
                    is_locked=False, is_enforced=False, last_update=0.0) -> BlockReplica:
        """Create or replace a block replica (None file_presence = complete)."""
        block = self._need_block(dataset_name, block_name)
        site = self._need_site(site_name)
        group = self._need_group(group_name)
        if file_presence is not None:
            file_presence = set(file_presence)
            # A presence set covering every file collapses to the complete marker.
            if len(file_presence) == block.num_files:
                file_presence = None
        if file_presence is None:
            size = block.size
        else:
            size = int(size_on_site) if size_on_site is not None else 0
        replica = block.replicas.get(site_name)
        if replica is None:
            replica = BlockReplica(block, site, group, size, file_presence,
                                   is_custodial, is_locked, is_enforced, last_update)
            block.replicas[site_name] = replica
            dr = site.dataset_replicas.get(block.dataset.name)
            if dr is None:
                dr = DatasetReplica(block.dataset, site)
                site.dataset_replicas[block.dataset.name] = dr
                block.dataset.replicas[site_name] = dr
            dr.block_replicas[block_name] = replica
        else:
            replica.group = group
            replica.size_on_site = size
            replica.file_presence = file_presence
            replica.is_custodial = bool(is_custodial)
            replica.is_locked = bool(is_locked)
            replica.is_enforced = bool(is_enforced)
            replica.last_update = float(last_update)
        return replica

    def remove_replica(self, dataset_name, block_name, site_name) -> None:
        ds = self.datasets.get(dataset_name)
        if ds is None:
            return
        block = ds.blocks.get(block_name)
        if block is None:
            return
        replica = block.replicas.pop(site_name, None)
        if replica is None:
            return
        dr = replica.site.dataset_replicas.get(dataset_name)
        if dr is not None:
            dr.block_replicas.pop(block_name, None)
            if not dr.block_replicas:
                replica.site.dataset_replicas.pop(dataset_name, None)
                ds.replicas.pop(site_name, None)

    # -- lookups -----------------------------------------------------------

    def _take_id(self, kind):
        value = self._next_id[kind]
        self._next_id[kind] = value + 1
        return value

    def _need_dataset(self, name) -> Dataset:
        ds = self.datasets.get(name)
        if ds is None:
            raise InventoryError(f"unknown dataset {name!r}")
        return ds

    def _need_block(self, dataset_name, block_name) -> Block:
        ds = self._need_dataset(dataset_name)
        block = ds.blocks.get(block_name)
        if block is None:
            raise InventoryError(f"unknown block {block_name!r} of dataset {dataset_name!r}")
        return block

    def _need_site(self, name) -> Site:
        site = self.sites.get(name)
        if site is None:
            raise InventoryError(f"unknown site {name!r}")
        return site

    def _need_group(self, name) -> Group:
        group = self.groups.get(name)
        if group is None:
            raise InventoryError(f"unknown group {name!r}")
        return group

    def block_replicas(self):
        for ds in self.datasets.values():
            for block in ds.blocks.values():
                yield from block.replicas.values()

    # -- files -------------------------------------------------------------

    def load_files(self, block: Block) -> list[File]:
        """Fetch the file records of one block; nothing is retained."""
        files = self._file_map(block.key)
        return [File(lfn, block, size) for lfn, size in sorted(files.items())]

    def _file_map(self, block_key) -> dict[str, int]:
        files: dict[str, int] = {}
        if self.file_source is not None and block_key not in self._block_tombstones:
            files.update(self.file_source.files_for(block_key))
        tombs = self._file_tombstones.get(block_key)
        if tombs:
            for lfn in tombs:
                files.pop(lfn, None)
        files.update(self._file_overlay.get(block_key, {}))
        return files

    def _rederive_block(self, block: Block):
        files = self._file_map(block.key)
        block.size = sum(files.values())
        block.num_files = len(files)
        block.dataset.recompute_totals()
        for replica in block.replicas.values():
            if replica.is_complete:
                replica.size_on_site = block.size

    def _discard_block_files(self, block_key):
        # The file source is shared between clones and never mutated; a
        # block-level tombstone masks its records instead.
        self._file_overlay.pop(block_key, None)
        self._file_tombstones.pop(block_key, None)
        if self.file_source is not None:
            self._block_tombstones.add(block_key)

    # -- occupancy and partitions -------------------------------------------

    def evaluate_partition(self, partition: Partition, replica: BlockReplica) -> bool:
        """Deterministic membership decision for one block replica."""
        pred = partition.predicate()
        if pred is None:
            return True
        from . import policy

        return policy.evaluate_on_replica(pred, replica, self)

    def site_occupancy(self, site: Site, partition: Partition, *,
                       projected: bool = False,
                       extra_bytes: int = 0) -> float:
        """Occupied fraction of a site's quota for one partition.

        With ``projected`` the in-flight remainder of incomplete replicas is
        counted at full block size (the volume the site is committed to).
        """
        quota = site.quota_for(partition.name)
        if quota <= 0:
            raise OccupancyUndefined(
                f"site {site.name!r} has no quota for partition {partition.name!r}")
        total = 0
        for br in site.block_replicas():
            if not self.evaluate_partition(partition, br):
                continue
            total += br.block.size if projected else br.size_on_site
        return (total + extra_bytes) / quota

    # -- record-level mutation ----------------------------------------------

    def update(self, record: Record) -> None:
        """Realize one updated object; creates it if absent."""
        dirty = self._update_one(record)
        self._fix_dirty(dirty)

    def delete(self, record: Record) -> None:
        """Unlink one object by its unique identifier; missing is a no-op."""
        dirty = self._delete_one(record)
        self._fix_dirty(dirty)

    def _fix_dirty(self, dirty_blocks):
        for key in dirty_blocks:
            ds = self.datasets.get(key[0])
            if ds is None:
                continue
            block = ds.blocks.get(key[1])
            if block is not None:
                self._rederive_block(block)

    def _update_one(self, rec: Record):
        wrap = _wrap_delta_error
        t = rec.rtype
        if t == "GROUP":
            wrap(lambda: self.add_group(rec.get("name")))
        elif t == "PARTITION":
            wrap(lambda: self.add_partition(rec.get("name"), rec.fields.get("rule", "")))
        elif t == "SITE":
            wrap(lambda: self.add_site(
                rec.get("name"),
                rec.fields.get("kind", DISK),
                rec.fields.get("endpoint", ""),
                rec.fields.get("status", READY),
                _parse_json_map(rec.fields.get("quotas", "{}"), rec, "quotas"),
            ))
        elif t == "DATASET":
            wrap(lambda: self.add_dataset(
                rec.get("name"),
                rec.fields.get("status", VALID),
                rec.fields.get("type", ""),
                _parse_float(rec.fields.get("updated", "0"), rec, "timestamp"),
                _parse_json_map(rec.fields.get("attrs", "{}"), rec, "attrs"),
            ))
        elif t == "BLOCK":
            wrap(lambda: self.add_block(
                rec.get("dataset"), rec.get("name"),
                _parse_int(rec.fields.get("size", "0"), rec, "size"),
                _parse_int(rec.fields.get("files", "0"), rec, "file count"),
                _parse_float(rec.fields.get("updated", "0"), rec, "timestamp"),
            ))
        elif t == "FILE":
            size = _parse_int(rec.get("size"), rec, "size")
            wrap(lambda: self.add_files(rec.get("dataset"), rec.get("block"),
                                        [(rec.get("lfn"), size)]))
            return {(rec.get("dataset"), rec.get("block"))}
        elif t == "REPLICA":
            present_text = rec.fields.get("present", "*")
            if present_text == "*":
                presence = None
            else:
                try:
                    presence = json.loads(present_text)
                except ValueError:
                    raise DeltaError(f"bad present list in record {rec.line()!r}") from None
                if not isinstance(presence, list):
                    raise DeltaError(f"present must be * or a JSON list in {rec.line()!r}")
            wrap(lambda: self.add_replica(
                rec.get("dataset"), rec.get("block"), rec.get("site"), rec.get("group"),
                size_on_site=_parse_int(rec.fields.get("size", "0"), rec, "size"),
                file_presence=presence,
                is_custodial=_parse_bool(rec.fields.get("custodial", "false"), rec),
                is_locked=_parse_bool(rec.fields.get("locked", "false"), rec),
                is_enforced=_parse_bool(rec.fields.get("enforced", "false"), rec),
                last_update=_parse_float(rec.fields.get("updated", "0"), rec, "timestamp"),
            ))
        else:
            raise DeltaError(f"unknown record type {t!r}")
        return set()

    def _delete_one(self, rec: Record):
        t = rec.rtype
        if t == "GROUP":
            name = rec.get("name")
            if name in self.groups:
                for br in self.block_replicas():
                    if br.group.name == name:
                        raise DeltaError(
                            f"group {name!r} still owns replicas and cannot be deleted")
                del self.groups[name]
        elif t == "PARTITION":
            name = rec.get("name")
            if name == GLOBAL_PARTITION:
                raise DeltaError("the global partition cannot be deleted")
            if self.partitions.pop(name, None) is not None:
                for site in self.sites.values():
                    site.quotas.pop(name, None)
        elif t == "SITE":
            name = rec.get("name")
            site = self.sites.pop(name, None)
            if site is not None:
                for dr in list(site.dataset_replicas.values()):
                    for block_name in list(dr.block_replicas):
                        self.remove_replica(dr.dataset.name, block_name, name)
        elif t == "DATASET":
            name = rec.get("name")
            ds = self.datasets.get(name)
            if ds is not None:
                for block in list(ds.blocks.values()):
                    self._drop_block(block)
                del self.datasets[name]
        elif t == "BLOCK":
            ds = self.datasets.get(rec.get("dataset"))
            if ds is not None:
                block = ds.blocks.get(rec.get("name"))
                if block is not None:
                    self._drop_block(block)
                    ds.recompute_totals()
        elif t == "FILE":
            key = (rec.get("dataset"), rec.get("block"))
            ds = self.datasets.get(key[0])
            if ds is None or key[1] not in ds.blocks:
                return set()
            lfn = rec.get("lfn")
            overlay = self._file_overlay.get(key)
            if overlay is not None:
                overlay.pop(lfn, None)
            self._file_tombstones.setdefault(key, set()).add(lfn)
            return {key}
        elif t == "REPLICA":
            self.remove_replica(rec.get("dataset"), rec.get("block"), rec.get("site"))
        else:
            raise DeltaError(f"unknown record type {t!r}")
        return set()

    def _drop_block(self, block: Block):
        for site_name in list(block.replicas):
            self.remove_replica(block.dataset.name, block.name, site_name)
        block.dataset.blocks.pop(block.name, None)
        self._discard_block_files(block.key)

    # -- atomic delta application --------------------------------------------

    def apply_delta(self, delta: InventoryDelta) -> None:
        """Apply a delta atomically: fully validated first, then realized.

        Raises DeltaError and leaves the inventory untouched if any entry is
        malformed, references a missing parent, or breaks a derived-size
        invariant.
        """
        _DeltaValidator(self).run(delta)
        dirty: set[tuple[str, str]] = set()
        for verb, rec in delta.entries:
            if verb == "U":
                dirty |= self._update_one(rec)
            else:
                dirty |= self._delete_one(rec)
        self._fix_dirty(dirty)

    # -- serialization ---------------------------------------------------------

    def iter_records(self, include_files=True):
        """All records in snapshot order, canonically sorted within type."""
        yield from sorted(g.to_record().line() for g in self.groups.values())
        yield from sorted(p.to_record().line() for p in self.partitions.values()
                          if not p.is_global)
        yield from sorted(s.to_record().line() for s in self.sites.values())
        yield from sorted(d.to_record().line() for d in self.datasets.values())
        blocks = []
        for ds in self.datasets.values():
            blocks.extend(ds.blocks.values())
        yield from sorted(b.to_record().line() for b in blocks)
        if include_files:
            file_lines = []
            for block in blocks:
                for lfn, size in self._file_map(block.key).items():
                    file_lines.append(Record("FILE", {
                        "dataset": block.dataset.name,
                        "block": block.name,
                        "lfn": lfn,
                        "size": str(size),
                    }).line())
            yield from sorted(file_lines)
        replica_lines = []
        for block in blocks:
            for br in block.replicas.values():
                replica_lines.append(br.to_record().line())
        yield from sorted(replica_lines)

    def to_text(self) -> str:
        buf = io.StringIO()
        for line in self.iter_records():
            buf.write(line)
            buf.write("\n")
        return buf.getvalue()

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def canonical_text(self) -> str:
        return self.to_text()

    def clone(self) -> "Inventory":
        """Deep copy of the resident graph; the file source is shared."""
        new = Inventory(file_source=self.file_source)
        for g in self.groups.values():
            new.add_group(g.name)
        for p in self.partitions.values():
            if not p.is_global:
                new.add_partition(p.name, p.rule_text)
        for s in self.sites.values():
            new.add_site(s.name, s.storage_kind, s.endpoint, s.status, s.quotas)
        for ds in self.datasets.values():
            nds = new.add_dataset(ds.name, ds.status, ds.data_type, ds.last_update, ds.attrs)
            for b in ds.blocks.values():
                nb = Block(nds, b.name, b.size, b.num_files, b.last_update)
                nds.blocks[b.name] = nb
            nds.size = ds.size
            nds.num_files = ds.num_files
        for ds in self.datasets.values():
            for b in ds.blocks.values():
                for br in b.replicas.values():
                    new.add_replica(ds.name, b.name, br.site.name, br.group.name,
                                    size_on_site=br.size_on_site,
                                    file_presence=br.file_presence,
                                    is_custodial=br.is_custodial,
                                    is_locked=br.is_locked,
                                    is_enforced=br.is_enforced,
                                    last_update=br.last_update)
        new._file_overlay = {k: dict(v) for k, v in self._file_overlay.items()}
        new._file_tombstones = {k: set(v) for k, v in self._file_tombstones.items()}
        new._block_tombstones = set(self._block_tombstones)
        new._next_id = dict(self._next_id)
        return new


def _wrap_delta_error(fn):
    try:
        return fn()
    except DeltaError:
        raise
    except InventoryError as exc:
        raise DeltaError(str(exc)) from None


class _DeltaValidator:
    """Dry run of a delta against the live inventory plus an overlay.

    Tracks object existence through the delta's own creations/deletions so
    later entries may reference earlier ones, and checks block size/count
    assertions against the file records that would exist afterwards.
    """

    def __init__(self, inv: Inventory):
        self.inv = inv
        self.exists: dict[tuple[str, str], bool] = {}
        self.block_parent: dict[tuple[str, str], bool] = {}
        # block key -> {lfn: size or None (deleted)}
        self.file_edits: dict[tuple[str, str], dict[str, int | None]] = {}
        self.block_asserts: dict[tuple[str, str], tuple[int, int]] = {}

    def _lookup(self, kind: str, key) -> bool:
        state = self.exists.get((kind, key))
        if state is not None:
            return state
        if kind == "dataset":
            return key in self.inv.datasets
        if kind == "site":
            return key in self.inv.sites
        if kind == "group":
            return key in self.inv.groups
        if kind == "partition":
            return key in self.inv.partitions
        if kind == "block":
            ds = self.inv.datasets.get(key[0])
            return ds is not None and key[1] in ds.blocks
        raise AssertionError(kind)

    def _set(self, kind, key, state):
        self.exists[(kind, key)] = state

    def run(self, delta: InventoryDelta):
        for verb, rec in delta.entries:
            if verb not in ("U", "D"):
                raise DeltaError(f"bad verb {verb!r}")
            try:
                self._check(verb, rec)
            except LoadError as exc:
                raise DeltaError(str(exc)) from None
        self._finalize()

    def _check(self, verb, rec):
        t = rec.rtype
        if t not in RECORD_FIELDS:
            raise DeltaError(f"unknown record type {t!r}")
        if t == "GROUP":
            name = rec.get("name")
            if verb == "U":
                self._set("group", name, True)
            else:
                self._set("group", name, False)
        elif t == "PARTITION":
            name = rec.get("name")
            if verb == "U":
                rule = rec.fields.get("rule", "")
                if name == GLOBAL_PARTITION and rule:
                    raise DeltaError("the global partition cannot carry a rule")
                if rule:
                    from . import policy

                    try:
                        policy.compile_predicate(rule)
                    except policy.PolicyError as exc:
                        raise DeltaError(
                            f"partition rule for {name!r} does not parse: {exc}") from None
                self._set("partition", name, True)
            else:
                if name == GLOBAL_PARTITION:
                    raise DeltaError("the global partition cannot be deleted")
                self._set("partition", name, False)
        elif t == "SITE":
            name = rec.get("name")
            if verb == "U":
                kind = rec.fields.get("kind", DISK)
                status = rec.fields.get("status", READY)
                if kind not in _SITE_KINDS:
                    raise DeltaError(f"bad site kind {kind!r} in {rec.line()!r}")
                if status not in _SITE_STATUSES:
                    raise DeltaError(f"bad site status {status!r} in {rec.line()!r}")
                quotas = _parse_json_map(rec.fields.get("quotas", "{}"), rec, "quotas")
                for v in quotas.values():
                    if not isinstance(v, (int, float)) or v < 0:
                        raise DeltaError(f"bad quota value in {rec.line()!r}")
                self._set("site", name, True)
            else:
                self._set("site", name, False)
        elif t == "DATASET":
            name = rec.get("name")
            if verb == "U":
                status = rec.fields.get("status", VALID)
                if status not in _DATASET_STATUSES:
                    raise DeltaError(f"bad dataset status {status!r} in {rec.line()!r}")
                _parse_float(rec.fields.get("updated", "0"), rec, "timestamp")
                _parse_json_map(rec.fields.get("attrs", "{}"), rec, "attrs")
                self._set("dataset", name, True)
            else:
                self._set("dataset", name, False)
        elif t == "BLOCK":
            key = (rec.get("dataset"), rec.get("name"))
            if verb == "U":
                if not self._lookup("dataset", key[0]):
                    raise DeltaError(
                        f"block update references unknown dataset {key[0]!r}")
                size = _parse_int(rec.fields.get("size", "0"), rec, "size")
                count = _parse_int(rec.fields.get("files", "0"), rec, "file count")
                was_new = not self._lookup("block", key)
                self._set("block", key, True)
                if was_new:
                    self.block_parent[key] = True
                self.block_asserts[key] = (size, count)
            else:
                self._set("block", key, False)
                self.block_asserts.pop(key, None)
                self.file_edits.pop(key, None)
        elif t == "FILE":
            key = (rec.get("dataset"), rec.get("block"))
            lfn = rec.get("lfn")
            if verb == "U":
                if not self._lookup("block", key):
                    raise DeltaError(
                        f"file {lfn!r} references unknown block {key[1]!r} of {key[0]!r}")
                size = _parse_int(rec.get("size"), rec, "size")
                if size <= 0:
                    raise DeltaError(f"file {lfn!r} must have size > 0")
                self.file_edits.setdefault(key, {})[lfn] = size
            else:
                if self._lookup("block", key):
                    self.file_edits.setdefault(key, {})[lfn] = None
        elif t == "REPLICA":
            key = (rec.get("dataset"), rec.get("block"))
            site = rec.get("site")
            if verb == "U":
                if not self._lookup("block", key):
                    raise DeltaError(
                        f"replica references unknown block {key[1]!r} of {key[0]!r}")
                if not self._lookup("site", site):
                    raise DeltaError(f"replica references unknown site {site!r}")
                group = rec.get("group")
                if not self._lookup("group", group):
                    raise DeltaError(f"replica references unknown group {group!r}")
                _parse_int(rec.fields.get("size", "0"), rec, "size")
                present = rec.fields.get("present", "*")
                if present != "*":
                    try:
                        lfns = json.loads(present)
                    except ValueError:
                        raise DeltaError(f"bad present list in {rec.line()!r}") from None
                    if not isinstance(lfns, list):
                        raise DeltaError(f"present must be * or a JSON list in {rec.line()!r}")
                for f in ("custodial", "locked", "enforced"):
                    _parse_bool(rec.fields.get(f, "false"), rec)
            # deletes of replicas need no checks

    def _final_files(self, key) -> dict[str, int]:
        if key in self.block_parent:
            base: dict[str, int] = {}
        else:
            base = self.inv._file_map(key)
        for lfn, size in self.file_edits.get(key, {}).items():
            if size is None:
                base.pop(lfn, None)
            else:
                base[lfn] = size
        return base

    def _finalize(self):
        touched = set(self.file_edits) | set(self.block_asserts)
        for key in sorted(touched):
            if not self._lookup("block", key):
                continue
            files = self._final_files(key)
            total, count = sum(files.values()), len(files)
            asserted = self.block_asserts.get(key)
            if asserted is not None and key in self.file_edits:
                if asserted != (total, count):
                    raise DeltaError(
                        f"block {key[1]!r} of {key[0]!r} asserts size/files "
                        f"{asserted} but its file records sum to {(total, count)}")
            elif asserted is not None and key not in self.file_edits:
                ds = self.inv.datasets.get(key[0])
                existing = None
                if ds is not None and key[1] in ds.blocks:
                    blk = ds.blocks[key[1]]
                    existing = (blk.size, blk.num_files)
                if existing is not None and existing != asserted:
                    raise DeltaError(
                        f"block {key[1]!r} of {key[0]!r} asserts size/files {asserted} "
                        f"but derived values are {existing}")
                if existing is None and asserted != (0, 0):
                    raise DeltaError(
                        f"new block {key[1]!r} of {key[0]!r} asserts size/files "
                        f"{asserted} but carries no file records")


# ---------------------------------------------------------------------------
# Snapshot loading.
# ---------------------------------------------------------------------------


def load(path: str) -> Inventory:
    """Build an inventory from a snapshot file.

    The whole snapshot is validated: referential integrity, type ordering,
    block size/count consistency with file records, replica presence subsets.
    File records are indexed for on-demand access but not retained.
    """
    return _load_stream(_PathStream(path), SnapshotFileSource(path))


def load_text(text: str) -> Inventory:
    """Like :func:`load` from inline text; files land in a memory source."""
    return _load_stream(_TextStream(text), MemoryFileSource())


class _PathStream:
    def __init__(self, path):
        self.path = path

    def lines(self):
        offset = 0
        try:
            with open(self.path, "rb") as fh:
                for raw in fh:
                    yield offset, offset + len(raw), raw.decode("utf-8").rstrip("\n")
                    offset += len(raw)
        except OSError as exc:
            raise LoadError(f"cannot read snapshot {self.path!r}: {exc}") from None


class _TextStream:
    def __init__(self, text):
        self.text = text

    def lines(self):
        offset = 0
        for line in self.text.splitlines(keepends=True):
            nbytes = len(line.encode("utf-8"))
            yield offset, offset + nbytes, line.rstrip("\n")
            offset += nbytes


def _load_stream(stream, file_source) -> Inventory:
    inv = Inventory(file_source=file_source)
    capture_files = isinstance(file_source, MemoryFileSource)
    lfn_sizes: dict[str, tuple[tuple[str, str], int]] = {}
    block_sums: dict[tuple[str, str], tuple[int, int]] = {}
    current_block: tuple[str, str] | None = None
    block_start = 0
    last_end = 0
    max_rank = 0
    lineno = 0

    def close_block(end_offset):
        nonlocal current_block
        if current_block is not None and isinstance(file_source, SnapshotFileSource):
            file_source.set_range(current_block, block_start, end_offset)
        current_block = None

    for offset, end, line in stream.lines():
        lineno += 1
        last_end = end
        if not line:
            continue
        try:
            rec = Record.parse(line)
        except LoadError as exc:
            raise LoadError(f"line {lineno}: {exc}") from None
        rank = _TYPE_RANK[rec.rtype]
        if rank < max_rank:
            raise LoadError(
                f"line {lineno}: record type {rec.rtype} out of order "
                f"(after {TYPE_ORDER[max_rank]})")
        if rank > max_rank:
            close_block(offset)
            max_rank = rank
        try:
            if rec.rtype == "FILE":
                key = (rec.get("dataset"), rec.get("block"))
                block = inv.datasets.get(key[0])
                block = block.blocks.get(key[1]) if block is not None else None
                if block is None:
                    raise LoadError(
                        f"file references unknown block {key[1]!r} of {key[0]!r}")
                lfn = rec.get("lfn")
                size = _parse_int(rec.get("size"), rec, "size")
                if size <= 0:
                    raise LoadError(f"file {lfn!r} must have size > 0")
                if lfn in lfn_sizes:
                    raise LoadError(f"duplicate lfn {lfn!r}")
                lfn_sizes[lfn] = (key, size)
                prev = block_sums.get(key, (0, 0))
                block_sums[key] = (prev[0] + size, prev[1] + 1)
                if key != current_block:
                    close_block(offset)
                    current_block = key
                    block_start = offset
                if capture_files:
                    file_source.put(key, lfn, size)
            elif rec.rtype == "REPLICA":
                _load_replica(inv, rec, lfn_sizes)
            else:
                inv._update_one(rec)
        except (LoadError, DeltaError, InventoryError) as exc:
            raise LoadError(f"line {lineno} ({line!r}): {exc}") from None
    close_block(last_end)

    # Block totals must match the file records exactly.
    for ds in inv.datasets.values():
        for block in ds.blocks.values():
            total, count = block_sums.get(block.key, (0, 0))
            if (block.size, block.num_files) != (total, count):
                raise LoadError(
                    f"block {block.name!r} of {ds.name!r} declares size/files "
                    f"({block.size}, {block.num_files}) but its file records "
                    f"sum to ({total}, {count})")
    return inv


def _load_replica(inv, rec, lfn_sizes):
    dataset = rec.get("dataset")
    block_name = rec.get("block")
    site = rec.get("site")
    block = inv._need_block(dataset, block_name)
    if site in block.replicas:
        raise LoadError(
            f"duplicate replica of block {block_name!r} at site {site!r}")
    present_text = rec.fields.get("present", "*")
    size = _parse_int(rec.fields.get("size", "0"), rec, "size")
    if present_text == "*":
        presence = None
        if size != block.size:
            raise LoadError(
                f"complete replica of {block_name!r} at {site!r} declares size "
                f"{size} but the block size is {block.size}")
    else:
        try:
            lfns = json.loads(present_text)
        except ValueError:
            raise LoadError(f"bad present list in {rec.line()!r}") from None
        presence = set(lfns)
        expected = 0
        for lfn in presence:
            entry = lfn_sizes.get(lfn)
            if entry is None or entry[0] != (dataset, block_name):
                raise LoadError(
                    f"replica presence cites {lfn!r} which is not a file of "
                    f"block {block_name!r}")
            expected += entry[1]
        if size != expected:
            raise LoadError(
                f"incomplete replica of {block_name!r} at {site!r} declares size "
                f"{size} but its present files sum to {expected}")
        if len(presence) == block.num_files:
            raise LoadError(
                f"replica of {block_name!r} at {site!r} lists every file; "
                f"it must use the complete marker")
    inv.add_replica(
        dataset, block_name, site, rec.get("group"),
        size_on_site=size, file_presence=presence,
        is_custodial=_parse_bool(rec.fields.get("custodial", "false"), rec),
        is_locked=_parse_bool(rec.fields.get("locked", "false"), rec),
        is_enforced=_parse_bool(rec.fields.get("enforced", "false"), rec),
        last_update=_parse_float(rec.fields.get("updated", "0"), rec, "timestamp"),
    )
