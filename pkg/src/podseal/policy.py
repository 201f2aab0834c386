"""Allowlist policy model, layered node/pod evaluation, and trust derivation.

The policy bundle a tenant enrolls carries: the node allowlist, per-pod
allowlists keyed by pod UID, the set of registered pod UIDs, exclude rules,
the quote PCR selection, and remediation actions. Exclude rules restrict what
is evaluated on the node itself; pods are always evaluated against their full
allowlists unless the bundle supplies per-pod exclude overrides. Exclusion
never affects PCR replay, only allowlist evaluation.

Trust is layered: deviations inside a registered pod mark only that pod
untrusted, an unknown pod or any node-scope deviation marks the node
untrusted, and untrusted is sticky until an explicit reset.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from enum import Enum

import yaml

from .measurement_log import BOOT_AGGREGATE_PATH, MeasurementEntry, MeasurementLog
from .pod_attribution import NODE_SCOPE, PodRef, normalize_pod_uid, parse_cgroup_path
from .trust_anchor import DEFAULT_PCR_SELECTION, PCR_IMA, Digest

ACTION_NOTIFY = "notify-only"
ACTION_EVICT = "evict-restart"
ACTION_ISOLATE = "isolate"
REMEDIATION_ACTIONS = (ACTION_NOTIFY, ACTION_EVICT, ACTION_ISOLATE)

REASON_UNKNOWN_FILE = "unknown-file"
REASON_DIGEST_MISMATCH = "digest-mismatch"
REASON_UNKNOWN_POD = "unknown-pod"


class PolicyError(ValueError):
    """Bundle content that cannot be compiled into an enforceable policy."""


@dataclass(frozen=True)
class Violation:
    scope: PodRef
    path: str
    observed: Digest | None
    reason: str
    entry_index: int

    def key(self) -> tuple:
        observed = self.observed.value if self.observed else None
        return (self.scope, self.path, observed, self.reason)

    def to_dict(self) -> dict:
        return {
            "scope": str(self.scope),
            "path": self.path,
            "observed": self.observed.hex if self.observed else None,
            "reason": self.reason,
            "entry_index": self.entry_index,
        }


@dataclass(frozen=True)
class AllowList:
    """Map of file path to the set of digests accepted at that path."""

    entries: dict[str, frozenset[bytes]] = field(default_factory=dict)

    def __post_init__(self):
        for path, digests in self.entries.items():
            if not digests:
                raise PolicyError(f"allowlist path {path!r} has an empty digest set")

    def allows(self, path: str, digest: Digest) -> bool:
        return digest.value in self.entries.get(path, frozenset())

    def knows(self, path: str) -> bool:
        return path in self.entries

    @classmethod
    def from_dict(cls, mapping: dict) -> "AllowList":
        entries = {}
        for path, hexes in (mapping or {}).items():
            if isinstance(hexes, str):
                hexes = [hexes]
            entries[str(path)] = frozenset(bytes.fromhex(h) for h in hexes)
        return cls(entries)

    def to_dict(self) -> dict:
        return {path: sorted(d.hex() for d in digests) for path, digests in sorted(self.entries.items())}


EMPTY_ALLOWLIST = AllowList()


@dataclass(frozen=True)
class ExcludeRule:
    """Either a raw regex (negative lookahead supported) or keep_prefix,
    which excludes every path outside the given absolute prefix."""

    pattern: str | None = None
    keep_prefix: str | None = None

    def __post_init__(self):
        if (self.pattern is None) == (self.keep_prefix is None):
            raise PolicyError("exclude rule needs exactly one of pattern/keep_prefix")
        if self.keep_prefix is not None and not self.keep_prefix.startswith("/"):
            raise PolicyError(f"keep_prefix must be absolute, got {self.keep_prefix!r}")

    def to_dict(self) -> dict:
        if self.pattern is not None:
            return {"regex": self.pattern}
        return {"keep_prefix": self.keep_prefix}

    @classmethod
    def from_dict(cls, item) -> "ExcludeRule":
        if isinstance(item, str):
            return cls(pattern=item)
        if "regex" in item:
            return cls(pattern=item["regex"])
        if "keep_prefix" in item:
            return cls(keep_prefix=item["keep_prefix"])
        raise PolicyError(f"unrecognized exclude rule {item!r}")


def _compile_rule(rule: ExcludeRule, where: str):
    if rule.pattern is not None:
        try:
            compiled = re.compile(rule.pattern)
        except re.error as exc:
            raise PolicyError(f"bad regex in {where}: {rule.pattern!r}: {exc}") from exc
        return lambda path: compiled.match(path) is not None
    keep = rule.keep_prefix.rstrip("/") or "/"
    return lambda path: not (path == keep or path.startswith(keep + "/"))


def _selection_to_mask(value) -> int:
    if value is None:
        return DEFAULT_PCR_SELECTION
    if isinstance(value, int):
        mask = value
    elif isinstance(value, str):
        mask = int(value, 0)
    else:
        mask = 0
        for idx in value:
            mask |= 1 << int(idx)
    return mask


def _mask_to_indices(mask: int) -> list[int]:
    return [i for i in range(24) if mask & (1 << i)]


@dataclass
class PolicyBundle:
    """Everything the tenant supplies for one agent."""

    node_allowlist: AllowList = field(default_factory=AllowList)
    pod_allowlists: dict[str, AllowList] = field(default_factory=dict)
    registered_pods: set[str] = field(default_factory=set)
    exclude_rules: list[ExcludeRule] = field(default_factory=list)
    pod_exclude_rules: dict[str, list[ExcludeRule]] = field(default_factory=dict)
    pcr_selection: int = DEFAULT_PCR_SELECTION
    pod_labels: dict[str, str] = field(default_factory=dict)
    remediation_default: str = ACTION_NOTIFY
    remediation_node: str | None = None
    remediation_pods: dict[str, str] = field(default_factory=dict)

    def remediation_action(self, scope: PodRef) -> str:
        if scope.is_pod:
            return self.remediation_pods.get(scope.pod_uid, self.remediation_default)
        return self.remediation_node or self.remediation_default

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyBundle":
        doc = doc or {}
        registered = {normalize_pod_uid(u) for u in doc.get("registered_pods", [])}
        pod_allowlists = {
            normalize_pod_uid(uid): AllowList.from_dict(listing)
            for uid, listing in (doc.get("pod_allowlists") or {}).items()
        }
        pod_excludes = {
            normalize_pod_uid(uid): [ExcludeRule.from_dict(r) for r in rules]
            for uid, rules in (doc.get("pod_exclude_rules") or {}).items()
        }
        remediation = doc.get("remediation") or {}
        return cls(
            node_allowlist=AllowList.from_dict(doc.get("node_allowlist")),
            pod_allowlists=pod_allowlists,
            registered_pods=registered,
            exclude_rules=[ExcludeRule.from_dict(r) for r in doc.get("exclude_rules", [])],
            pod_exclude_rules=pod_excludes,
            pcr_selection=_selection_to_mask(doc.get("pcr_selection")),
            pod_labels={
                normalize_pod_uid(u): str(name)
                for u, name in (doc.get("pod_labels") or {}).items()
            },
            remediation_default=remediation.get("default", ACTION_NOTIFY),
            remediation_node=remediation.get("node"),
            remediation_pods={
                normalize_pod_uid(u): action
                for u, action in (remediation.get("pods") or {}).items()
            },
        )

    @classmethod
    def from_yaml(cls, text: str) -> "PolicyBundle":
        return cls.from_dict(yaml.safe_load(text))

    def to_dict(self) -> dict:
        doc = {
            "pcr_selection": _mask_to_indices(self.pcr_selection),
            "registered_pods": sorted(self.registered_pods),
            "node_allowlist": self.node_allowlist.to_dict(),
            "pod_allowlists": {u: al.to_dict() for u, al in sorted(self.pod_allowlists.items())},
            "exclude_rules": [r.to_dict() for r in self.exclude_rules],
        }
        if self.pod_exclude_rules:
            doc["pod_exclude_rules"] = {
                u: [r.to_dict() for r in rules] for u, rules in sorted(self.pod_exclude_rules.items())
            }
        if self.pod_labels:
            doc["pod_labels"] = dict(sorted(self.pod_labels.items()))
        remediation = {"default": self.remediation_default}
        if self.remediation_node:
            remediation["node"] = self.remediation_node
        if self.remediation_pods:
            remediation["pods"] = dict(sorted(self.remediation_pods.items()))
        doc["remediation"] = remediation
        return doc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


class CompiledPolicy:
    """Immutable, lookup-ready form of a bundle; shareable across evaluations."""

    def __init__(self, bundle: PolicyBundle):
        for uid in bundle.pod_allowlists:
            if uid not in bundle.registered_pods:
                raise PolicyError(f"pod allowlist for unregistered pod {uid}")
        if not bundle.pcr_selection & (1 << PCR_IMA):
            raise PolicyError("pcr_selection must include PCR 10")
        for action in [bundle.remediation_default, bundle.remediation_node,
                       *bundle.remediation_pods.values()]:
            if action is not None and action not in REMEDIATION_ACTIONS:
                raise PolicyError(f"unknown remediation action {action!r}")
        self.bundle = bundle
        self.node_excludes = [
            _compile_rule(r, f"exclude_rules[{i}]")
            for i, r in enumerate(bundle.exclude_rules)
        ]
        self.pod_excludes = {
            uid: [_compile_rule(r, f"pod_exclude_rules[{uid}][{i}]") for i, r in enumerate(rules)]
            for uid, rules in bundle.pod_exclude_rules.items()
        }

    @property
    def registered_pods(self) -> set[str]:
        return self.bundle.registered_pods

    @property
    def pcr_selection(self) -> int:
        return self.bundle.pcr_selection

    def node_excluded(self, path: str) -> bool:
        return any(rule(path) for rule in self.node_excludes)

    def pod_excluded(self, uid: str, path: str) -> bool:
        return any(rule(path) for rule in self.pod_excludes.get(uid, ()))

    def allowlist_for(self, scope: PodRef) -> AllowList:
        if scope.is_pod:
            return self.bundle.pod_allowlists.get(scope.pod_uid, EMPTY_ALLOWLIST)
        return self.bundle.node_allowlist


def compile_policy(bundle: PolicyBundle) -> CompiledPolicy:
    return CompiledPolicy(bundle)


@dataclass
class EvaluationResult:
    node_violations: list[Violation] = field(default_factory=list)
    pod_violations: dict[str, list[Violation]] = field(default_factory=dict)
    unknown_pods: set[str] = field(default_factory=set)
    measured_pods: set[str] = field(default_factory=set)

    def all_violations(self) -> list[Violation]:
        out = list(self.node_violations)
        for violations in self.pod_violations.values():
            out.extend(violations)
        return out

    @property
    def clean(self) -> bool:
        return not (self.node_violations or self.pod_violations or self.unknown_pods)


def evaluate_entries(
    policy: CompiledPolicy,
    entries: list[tuple[MeasurementEntry, PodRef]],
    start_index: int = 0,
) -> EvaluationResult:
    """Check already-verified entries against the layered policy.

    Assumes log integrity was established (quote + replay); this is purely the
    allowlist layer. Results are deduplicated by (scope, path, digest, reason);
    the first occurrence keeps its entry index.
    """
    result = EvaluationResult()
    seen: set[tuple] = set()

    def add(violation: Violation):
        if violation.key() in seen:
            return
        seen.add(violation.key())
        if violation.scope.is_pod:
            result.pod_violations.setdefault(violation.scope.pod_uid, []).append(violation)
        else:
            result.node_violations.append(violation)

    for position, (entry, scope) in enumerate(entries):
        index = start_index + position
        path = entry.data.path
        if path == BOOT_AGGREGATE_PATH:
            continue
        observed = entry.data.filedata_hash

        if scope.is_pod:
            uid = scope.pod_uid
            result.measured_pods.add(uid)
            if uid not in policy.registered_pods:
                result.unknown_pods.add(uid)
                add(Violation(scope, path, observed, REASON_UNKNOWN_POD, index))
                continue
            if policy.pod_excluded(uid, path):
                continue
        else:
            if policy.node_excluded(path):
                continue

        allowlist = policy.allowlist_for(scope)
        if not allowlist.knows(path):
            add(Violation(scope, path, observed, REASON_UNKNOWN_FILE, index))
        elif not allowlist.allows(path, observed):
            add(Violation(scope, path, observed, REASON_DIGEST_MISMATCH, index))
    return result


class TrustStatus(str, Enum):
    START = "start"
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


@dataclass(frozen=True)
class TrustState:
    status: TrustStatus = TrustStatus.START
    since: float | None = None
    violations: tuple[Violation, ...] = ()
    reasons: tuple[str, ...] = ()

    @classmethod
    def start(cls) -> "TrustState":
        return cls()

    @classmethod
    def trusted(cls, since: float) -> "TrustState":
        return cls(TrustStatus.TRUSTED, since)

    @classmethod
    def untrusted(cls, since: float, violations=(), reasons=()) -> "TrustState":
        return cls(TrustStatus.UNTRUSTED, since, tuple(violations), tuple(reasons))

    def with_findings(self, now: float, violations, reasons) -> "TrustState":
        """Transition to untrusted, or fold new findings into an existing
        untrusted state (deduplicated, original timestamp kept)."""
        merged = list(self.violations)
        keys = {v.key() for v in merged}
        for v in violations:
            if v.key() not in keys:
                merged.append(v)
                keys.add(v.key())
        merged_reasons = list(self.reasons)
        for r in reasons:
            if r not in merged_reasons:
                merged_reasons.append(r)
        since = self.since if self.status is TrustStatus.UNTRUSTED else now
        return TrustState.untrusted(since, merged, merged_reasons)

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "since": self.since,
            "reasons": list(self.reasons),
            "violations": [v.to_dict() for v in self.violations],
        }


@dataclass
class TrustMap:
    node_state: TrustState = field(default_factory=TrustState.start)
    pod_states: dict[str, TrustState] = field(default_factory=dict)

    @classmethod
    def initial(cls, registered_pods) -> "TrustMap":
        return cls(TrustState.start(), {uid: TrustState.start() for uid in registered_pods})

    def to_dict(self) -> dict:
        return {
            "node": self.node_state.to_dict(),
            "pods": {uid: st.to_dict() for uid, st in sorted(self.pod_states.items())},
        }


def derive_trust(
    previous: TrustMap,
    result: EvaluationResult,
    now: float | None = None,
    measured_pods: set[str] | None = None,
) -> TrustMap:
    """Apply one evaluation to the trust machine.

    Node goes untrusted on any node-scope violation or unknown pod; a
    registered pod goes untrusted on its own violations only. Untrusted is
    sticky until an explicit reset; clean findings promote Start to Trusted.

    When measured_pods is given (the verifier passes the cumulative set of
    pods that have produced at least one measurement), a registered pod that
    never measured anything stays in Start instead of being promoted: a pod
    that was never scheduled is flagged for the operator, not trusted.
    """
    now = time.time() if now is None else now

    node_reasons = []
    if result.node_violations:
        node_reasons.append("policy-violations")
    node_reasons.extend(f"unknown-pod:{uid}" for uid in sorted(result.unknown_pods))
    unknown_pod_violations = [
        v
        for uid in sorted(result.unknown_pods)
        for v in result.pod_violations.get(uid, [])
    ]

    if node_reasons:
        node_state = previous.node_state.with_findings(
            now, list(result.node_violations) + unknown_pod_violations, node_reasons
        )
    elif previous.node_state.status is TrustStatus.UNTRUSTED:
        node_state = previous.node_state
    else:
        node_state = (
            previous.node_state
            if previous.node_state.status is TrustStatus.TRUSTED
            else TrustState.trusted(now)
        )

    pod_states = {}
    for uid, prev in previous.pod_states.items():
        findings = result.pod_violations.get(uid, [])
        if findings:
            pod_states[uid] = prev.with_findings(now, findings, ("policy-violations",))
        elif prev.status is not TrustStatus.START:
            pod_states[uid] = prev
        elif measured_pods is not None and uid not in measured_pods:
            pod_states[uid] = prev  # never scheduled: stays in Start
        else:
            pod_states[uid] = TrustState.trusted(now)
    return TrustMap(node_state, pod_states)


def attribute_entry(entry: MeasurementEntry) -> PodRef:
    """Scope of one entry: ima-cgn entries follow their cgroup path,
    everything else is the node's own activity."""
    if entry.data.cgpath is None:
        return NODE_SCOPE
    return parse_cgroup_path(entry.data.cgpath)


def build_allowlist_from_log(log: MeasurementLog, scope: PodRef) -> AllowList:
    """Golden-baseline generation: collect every (path, digest) the given
    scope produced in a verified log, excluding the boot aggregate."""
    collected: dict[str, set[bytes]] = {}
    for entry in log.entries:
        if entry.data.path == BOOT_AGGREGATE_PATH:
            continue
        if attribute_entry(entry) != scope:
            continue
        collected.setdefault(entry.data.path, set()).add(entry.data.filedata_hash.value)
    return AllowList({path: frozenset(digests) for path, digests in collected.items()})
