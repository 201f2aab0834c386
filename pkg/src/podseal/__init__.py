"""Pod-granular continuous remote attestation for Kubernetes-hosted workloads.

Emulated TPM 2.0 root of trust, IMA-style measurement pipeline with a
pod-aware template, registrar/verifier/agent/tenant control plane, layered
node/pod trust model, and a deterministic cluster simulator with tamper
scenarios and a remediation loop.
"""

__version__ = "0.1.0"

from .trust_anchor import Digest, PcrBank, Quote, create_identity, quote, verify_quote
from .measurement_log import (
    FileEvent,
    MeasurementEntry,
    MeasurementLog,
    append_measurement,
    emit_ascii,
    parse_ascii,
    replay,
    template_hash,
)
from .pod_attribution import NODE_SCOPE, PodRef, normalize_pod_uid, parse_cgroup_path
from .policy import (
    AllowList,
    PolicyBundle,
    TrustMap,
    TrustState,
    TrustStatus,
    Violation,
    build_allowlist_from_log,
    compile_policy,
    derive_trust,
    evaluate_entries,
)

__all__ = [
    "Digest",
    "PcrBank",
    "Quote",
    "create_identity",
    "quote",
    "verify_quote",
    "FileEvent",
    "MeasurementEntry",
    "MeasurementLog",
    "append_measurement",
    "emit_ascii",
    "parse_ascii",
    "replay",
    "template_hash",
    "NODE_SCOPE",
    "PodRef",
    "normalize_pod_uid",
    "parse_cgroup_path",
    "AllowList",
    "PolicyBundle",
    "TrustMap",
    "TrustState",
    "TrustStatus",
    "Violation",
    "build_allowlist_from_log",
    "compile_policy",
    "derive_trust",
    "evaluate_entries",
]
