"""Kernel user-namespace ID map modeling.

Value types for uid_map/gid_map triples and subuid/subgid entries, planners
for privileged and unprivileged maps, bidirectional translation, the
four-way classification of (host-in-use, mapped) ID pairs, the container
privilege taxonomy, and a lint for subuid/subgid collision hazards.

Everything here is pure; nothing invokes newuidmap/newgidmap or touches
/proc. Execution lives in the sandbox module.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

ID_MAX = 2 ** 32
OVERFLOW_ID = 65534  # shown as nobody/nogroup for unmapped IDs


class IdmapError(Exception):
    pass


class RangeContainsInvokerError(IdmapError):
    pass


@dataclass(frozen=True)
class SubidEntry:
    """One line of /etc/subuid or /etc/subgid: user:start:count."""

    user: str
    start: int
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise IdmapError("count must be positive: %r" % (self,))
        if self.start < 0 or self.start + self.count > ID_MAX:
            raise IdmapError("range exceeds 32-bit ID space: %r" % (self,))

    @property
    def end(self):
        """One past the last host ID in the range."""
        return self.start + self.count


@dataclass(frozen=True)
class IdMap:
    """Ordered (ns_start, host_start, count) triples, one-to-one both ways."""

    triples: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        for ns, host, count in self.triples:
            if count < 1:
                raise IdmapError("count must be positive: %r" % (self.triples,))
            if min(ns, host) < 0 or max(ns + count, host + count) > ID_MAX:
                raise IdmapError("IDs exceed 32-bit space: %r" % (self.triples,))
        for side in (0, 1):
            spans = sorted((t[side], t[side] + t[2]) for t in self.triples)
            for (_, a_end), (b_start, _) in zip(spans, spans[1:]):
                if b_start < a_end:
                    raise IdmapError(
                        "%s ranges overlap; maps must not squash IDs: %r"
                        % ("namespace" if side == 0 else "host", self.triples))

    def render(self):
        """uid_map/gid_map text as /proc presents it, one triple per line."""
        return "".join("%10d %10d %10d\n" % t for t in self.triples)


class MapCase(enum.Enum):
    IN_USE_MAPPED = "InUseMapped"
    UNUSED_MAPPED = "UnusedMapped"
    IN_USE_UNMAPPED = "InUseUnmapped"
    UNUSED_UNMAPPED = "UnusedUnmapped"


_CASE_SEMANTICS = {
    MapCase.IN_USE_MAPPED:
        "the namespace ID is an alias of the in-use host ID",
    MapCase.UNUSED_MAPPED:
        "files can be owned by these IDs, but outside the namespace they "
        "have no user or group name",
    MapCase.IN_USE_UNMAPPED:
        "valid inside the namespace, but no way to refer to them",
    MapCase.UNUSED_UNMAPPED:
        "not available inside the namespace",
}


class ContainerType(enum.Enum):
    TYPE_I = "Type I"      # no user namespace; root inside is root on the host
    TYPE_II = "Type II"    # privileged user-namespace setup, many IDs
    TYPE_III = "Type III"  # unprivileged setup, single ID alias


class Direction(enum.Enum):
    NS_TO_HOST = "ns-to-host"
    HOST_TO_NS = "host-to-ns"


class Severity(enum.Enum):
    ERROR = "error"
    WARNING = "warning"


class FindingKind(enum.Enum):
    RANGE_OVERLAP_USERS = "RangeOverlapUsers"
    RANGE_COVERS_LIVE_ID = "RangeCoversLiveId"
    MALFORMED_ENTRY = "MalformedEntry"


@dataclass(frozen=True)
class LintFinding:
    severity: Severity
    kind: FindingKind
    detail: str

    def render(self):
        return "%s: %s: %s" % (self.severity.value, self.kind.value, self.detail)


def parse_subid(text):
    """Parse subuid/subgid text into (entries, findings).

    Malformed lines become MalformedEntry findings and parsing continues;
    comment lines start with '#', blank lines are skipped.
    """
    entries = []
    findings = []
    for n, raw in enumerate(text.split("\n"), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(":")
        try:
            if len(parts) != 3:
                raise ValueError("expected user:start:count")
            entries.append(SubidEntry(parts[0], int(parts[1]), int(parts[2])))
        except (ValueError, IdmapError) as exc:
            findings.append(LintFinding(
                Severity.ERROR, FindingKind.MALFORMED_ENTRY,
                "line %d (%r): %s" % (n, line, exc)))
    return entries, findings


def plan_privileged_map(invoking_id, entry):
    """Map the invoker to root plus the subid range onto IDs 1..count.

    This models what a privileged helper would install; nothing is executed.
    """
    if entry.start <= invoking_id < entry.end:
        raise RangeContainsInvokerError(
            "invoking ID %d falls inside %s's range %d..%d; host ranges "
            "would overlap" % (invoking_id, entry.user, entry.start,
                               entry.end - 1))
    return IdMap(((0, invoking_id, 1), (1, entry.start, entry.count)))


def plan_unprivileged_map(host_id, ns_id):
    """Single-ID map: the only mapping an unprivileged process may install."""
    return IdMap(((ns_id, host_id, 1),))


def translate(idmap, id_, direction):
    """Translate one ID across the map; None means unmapped.

    Callers rendering an unmapped ID for display use OVERFLOW_ID.
    """
    src, dst = (0, 1) if direction is Direction.NS_TO_HOST else (1, 0)
    for triple in idmap.triples:
        if triple[src] <= id_ < triple[src] + triple[2]:
            return triple[dst] + (id_ - triple[src])
    return None


def display_id(translated):
    """Presentation form of a translate() result (65534 for unmapped)."""
    return OVERFLOW_ID if translated is None else translated


def classify_pair(host_in_use, mapped):
    """Classify one (host-in-use, mapped) ID pair; returns (case, semantics)."""
    case = {
        (True, True): MapCase.IN_USE_MAPPED,
        (False, True): MapCase.UNUSED_MAPPED,
        (True, False): MapCase.IN_USE_UNMAPPED,
        (False, False): MapCase.UNUSED_UNMAPPED,
    }[(bool(host_in_use), bool(mapped))]
    return case, _CASE_SEMANTICS[case]


def classify_runtime(has_user_ns, privileged_setup):
    """Privilege taxonomy of a runtime configuration."""
    if not has_user_ns:
        return ContainerType.TYPE_I
    return ContainerType.TYPE_II if privileged_setup else ContainerType.TYPE_III


def lint_config(entries, live_ids):
    """Flag collision hazards in subid entries.

    live_ids is the caller-supplied set of host IDs present in account
    databases; sources the caller cannot see (unmounted network shares, say)
    are the caller's problem to include. Any intersection is an Error: a
    range that reaches a live ID hands its owner that account's files.
    """
    findings = []
    for i, a in enumerate(entries):
        for b in entries[i + 1:]:
            if a.start < b.end and b.start < a.end:
                findings.append(LintFinding(
                    Severity.ERROR, FindingKind.RANGE_OVERLAP_USERS,
                    "host ranges of %s (%d..%d) and %s (%d..%d) overlap"
                    % (a.user, a.start, a.end - 1,
                       b.user, b.start, b.end - 1)))
    for e in entries:
        covered = sorted(i for i in live_ids if e.start <= i < e.end)
        if covered:
            findings.append(LintFinding(
                Severity.ERROR, FindingKind.RANGE_COVERS_LIVE_ID,
                "range of %s (%d..%d) covers live ID%s %s"
                % (e.user, e.start, e.end - 1,
                   "s" if len(covered) > 1 else "",
                   ", ".join(str(i) for i in covered))))
    # loops above emit in input-entry order; a stable sort by kind keeps
    # the (kind, first entry) ordering deterministic
    order = {FindingKind.RANGE_OVERLAP_USERS: 0,
             FindingKind.RANGE_COVERS_LIVE_ID: 1,
             FindingKind.MALFORMED_ENTRY: 2}
    return sorted(findings, key=lambda f: order[f.kind])
