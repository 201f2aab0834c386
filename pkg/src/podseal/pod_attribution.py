"""Map cgroup paths from measurement entries to node scope or a pod UID.

Kubernetes kubelets lay pod cgroups out in two styles depending on the cgroup
driver: plain cgroupfs segments like

    /kubepods/besteffort/pod<uid>/<container>

and systemd slices like

    /kubepods.slice/kubepods-besteffort.slice/
        kubepods-besteffort-pod<uid with underscores>.slice/<scope>

Orchestrators may also nest these under their own prefix, so any leading path
segments are ignored. Everything that does not contain a pod segment belongs
to the node itself.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

_UUID_HYPHEN = re.compile(
    r"[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}"
)
_SEG_CGROUPFS = re.compile(
    r"pod([0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12})"
)
_SEG_SYSTEMD = re.compile(
    r"kubepods(?:-[a-z0-9]+)*-pod"
    r"([0-9a-fA-F]{8}_[0-9a-fA-F]{4}_[0-9a-fA-F]{4}_[0-9a-fA-F]{4}_[0-9a-fA-F]{12})"
    r"\.slice"
)


@dataclass(frozen=True)
class PodRef:
    """Attribution of a measurement: a specific pod, or the node itself."""

    pod_uid: str | None = None

    @classmethod
    def node(cls) -> "PodRef":
        return cls(None)

    @classmethod
    def pod(cls, uid: str) -> "PodRef":
        return cls(normalize_pod_uid(uid))

    @property
    def is_pod(self) -> bool:
        return self.pod_uid is not None

    def __str__(self) -> str:
        return f"pod:{self.pod_uid}" if self.is_pod else "node"


NODE_SCOPE = PodRef(None)


def normalize_pod_uid(raw: str) -> str:
    """Canonicalize a pod UID: underscores to hyphens, lowercased.

    Raises ValueError when the input is not a 36-char UUID shape.
    """
    if len(raw) != 36:
        raise ValueError(f"pod uid must be 36 chars, got {len(raw)}")
    candidate = raw.replace("_", "-").lower()
    if not _UUID_HYPHEN.fullmatch(candidate):
        raise ValueError(f"not a canonical pod uid: {raw!r}")
    return candidate


def parse_cgroup_path(cgpath: str) -> PodRef:
    """Attribute a cgroup path; never fails, unrecognized paths are node scope."""
    for segment in cgpath.split("/"):
        m = _SEG_CGROUPFS.fullmatch(segment)
        if m:
            return PodRef(normalize_pod_uid(m.group(1)))
        m = _SEG_SYSTEMD.fullmatch(segment)
        if m:
            return PodRef(normalize_pod_uid(m.group(1)))
    return NODE_SCOPE
