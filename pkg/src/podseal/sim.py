"""Deterministic cluster simulator.

Emulates nodes hosting named workload pods: every node gets an in-process
attestation agent (or an external agent URL), every pod gets a freshly
generated UID and emits its image manifest as exec events under its cgroup
path. Tamper scenarios inject the runtime deviations studied here: execution
of unlisted binaries inside a pod, modification of pod or host binaries,
dynamic-linker preload hijacks, and entirely unknown pods.

Each node's events flow through a single ordered timeline (logical time,
sequence), so a fixed (topology, seed, scenario schedule) reproduces
byte-identical agent logs. A control HTTP server accepts the verifier's
remediation webhook: evict-restart terminates the pod, restarts it under a
fresh UID, replays its clean manifest, and records an operator notice so the
tenant can update the registered pod set.
"""

from __future__ import annotations

import heapq
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field

import requests
import yaml

from .agent import Agent, AgentConfig
from .httpd import HttpError, JsonHttpServer, bearer_headers
from .trust_anchor import Digest

logger = logging.getLogger(__name__)

STYLE_CGROUPFS = "cgroupfs"
STYLE_SYSTEMD = "systemd"


def _auto_digest(kind: str, name: str, path: str) -> Digest:
    return Digest.of(f"content:{kind}:{name}:{path}".encode())


def _parse_manifest(kind: str, owner: str, mapping: dict | None) -> dict[str, Digest]:
    manifest = {}
    for path, value in (mapping or {}).items():
        if value in (None, "auto"):
            manifest[path] = _auto_digest(kind, owner, path)
        else:
            manifest[path] = Digest.from_hex(value)
    return manifest


@dataclass
class PodSpec:
    name: str
    manifest: dict[str, Digest] = field(default_factory=dict)
    cgroup_style: str = STYLE_CGROUPFS

    def __post_init__(self):
        if self.cgroup_style not in (STYLE_CGROUPFS, STYLE_SYSTEMD):
            raise ValueError(f"unknown cgroup style {self.cgroup_style!r}")


@dataclass
class NodeSpec:
    name: str
    pods: list[PodSpec] = field(default_factory=list)
    host_manifest: dict[str, Digest] = field(default_factory=dict)
    orchestrator_prefix: str = ""
    agent_url: str | None = None


@dataclass
class Topology:
    nodes: list[NodeSpec] = field(default_factory=list)

    def __post_init__(self):
        node_names = [n.name for n in self.nodes]
        if len(set(node_names)) != len(node_names):
            raise ValueError("duplicate node names in topology")
        pod_names = [p.name for n in self.nodes for p in n.pods]
        if len(set(pod_names)) != len(pod_names):
            raise ValueError("duplicate pod names in topology")

    @classmethod
    def from_dict(cls, doc: dict) -> "Topology":
        nodes = []
        for node_doc in (doc or {}).get("nodes", []):
            pods = [
                PodSpec(
                    name=p["name"],
                    manifest=_parse_manifest("pod", p["name"], p.get("manifest")),
                    cgroup_style=p.get("cgroup_style", STYLE_CGROUPFS),
                )
                for p in node_doc.get("pods", [])
            ]
            nodes.append(
                NodeSpec(
                    name=node_doc["name"],
                    pods=pods,
                    host_manifest=_parse_manifest(
                        "host", node_doc["name"], node_doc.get("host_manifest")
                    ),
                    orchestrator_prefix=node_doc.get("orchestrator_prefix", ""),
                    agent_url=node_doc.get("agent_url"),
                )
            )
        return cls(nodes)

    @classmethod
    def from_yaml(cls, text: str) -> "Topology":
        return cls.from_dict(yaml.safe_load(text))


KNOWN_SCENARIOS = (
    "exec-unlisted",
    "modify-pod-binary",
    "overwrite-host-binary",
    "preload-hijack",
    "unknown-pod",
)


@dataclass(frozen=True)
class TamperScenario:
    kind: str
    pod: str | None = None
    node: str | None = None
    path: str | None = None
    library: str | None = None

    def __post_init__(self):
        if self.kind not in KNOWN_SCENARIOS:
            raise ValueError(f"unknown tamper scenario {self.kind!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TamperScenario":
        return cls(
            kind=doc["kind"],
            pod=doc.get("pod"),
            node=doc.get("node"),
            path=doc.get("path"),
            library=doc.get("library"),
        )


def load_scenario_schedule(text: str) -> list[tuple[float, TamperScenario]]:
    """Scenario file: YAML list of {at: <seconds>, kind: ..., ...}."""
    out = []
    for item in yaml.safe_load(text) or []:
        at = float(item.get("at", 0.0))
        out.append((at, TamperScenario.from_dict(item)))
    return out


class SimPod:
    def __init__(self, spec: PodSpec, uid: str, container_hash: str):
        self.spec = spec
        self.uid = uid
        self.container_hash = container_hash
        self.generation = 1
        self.alive = True

    def cgroup_path(self, prefix: str) -> str:
        if self.spec.cgroup_style == STYLE_SYSTEMD:
            return (
                f"{prefix}/kubepods.slice/kubepods-besteffort.slice/"
                f"kubepods-besteffort-pod{self.uid.replace('-', '_')}.slice/"
                f"cri-containerd-{self.container_hash}.scope"
            )
        return f"{prefix}/kubepods/besteffort/pod{self.uid}/cri-containerd-{self.container_hash}"


class _NodeRuntime:
    """Per-node emission machinery: one ordered timeline, one lock."""

    def __init__(self, sim: "ClusterSim", spec: NodeSpec, rng: random.Random):
        self.sim = sim
        self.spec = spec
        self.rng = rng
        self.agent: Agent | None = None
        self.agent_url = spec.agent_url
        self.pods: dict[str, SimPod] = {}
        self.rogue_pods: list[SimPod] = []
        self.lock = threading.RLock()
        self.timeline: list[tuple[float, int, object]] = []
        self.cond = threading.Condition()
        self.busy = False
        self.seq = 0
        self.tick = 0
        self.thread: threading.Thread | None = None

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def new_uid(self) -> str:
        while True:
            raw = bytearray(self.rng.getrandbits(8) for _ in range(16))
            raw[6] = (raw[6] & 0x0F) | 0x40  # uuid4 version nibble
            raw[8] = (raw[8] & 0x3F) | 0x80  # rfc4122 variant
            uid = "-".join(
                raw.hex()[s:e]
                for s, e in ((0, 8), (8, 12), (12, 16), (16, 20), (20, 32))
            )
            if uid not in self.sim.used_uids:
                self.sim.used_uids.add(uid)
                return uid

    def schedule(self, at: float, action):
        with self.cond:
            heapq.heappush(self.timeline, (at, self.next_seq(), action))
            self.cond.notify_all()


class ClusterSim:
    def __init__(
        self,
        topology: Topology,
        seed: int | str = 0,
        registrar_url: str | None = None,
        token: str | None = None,
        mean_gap: float = 0.2,
        pace: float = 1.0,
        event_log_path: str | None = None,
        control_port: int = 0,
        schedule: list[tuple[float, TamperScenario]] | None = None,
    ):
        self.topology = topology
        self.seed = seed
        self.registrar_url = registrar_url
        self.token = token
        self.mean_gap = mean_gap
        self.pace = pace
        self.event_log_path = event_log_path
        self.used_uids: set[str] = set()
        self.event_log: list[dict] = []
        self.operator_notices: list[dict] = []
        self._log_lock = threading.Lock()
        self._log_seq = 0
        self._stop = threading.Event()
        self._start_wall: float | None = None
        self.nodes: dict[str, _NodeRuntime] = {}
        for node_spec in topology.nodes:
            rng = random.Random(f"{seed}:{node_spec.name}")
            self.nodes[node_spec.name] = _NodeRuntime(self, node_spec, rng)
        self._schedule = schedule or []
        self.control = JsonHttpServer("cluster-sim", token=token, port=control_port)
        self.control.add("POST", r"/v1/remediate", self._http_remediate)
        self.control.add("POST", r"/v1/inject", self._http_inject)
        self.control.add("GET", r"/v1/pods", self._http_pods)
        self.control.add("GET", r"/v1/notices", self._http_notices)
        self.control.add("GET", r"/v1/health", lambda g, q, b: (200, {"status": "ok"}), auth=False)

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "ClusterSim":
        self.control.start()
        for runtime in self.nodes.values():
            self._provision_node(runtime)
        self._start_wall = time.monotonic()
        for at, scenario in self._schedule:
            runtime = self._runtime_for_scenario(scenario)
            runtime.schedule(at, ("inject", scenario))
        for runtime in self.nodes.values():
            runtime.thread = threading.Thread(
                target=self._pump, args=(runtime,), name=f"sim-{runtime.spec.name}", daemon=True
            )
            runtime.thread.start()
        return self

    def _provision_node(self, runtime: _NodeRuntime):
        spec = runtime.spec
        if runtime.agent_url is None:
            agent = Agent(
                AgentConfig(
                    agent_id=spec.name,
                    registrar_url=self.registrar_url or "",
                    node_name=spec.name,
                    seed=f"{self.seed}:{spec.name}",
                    token=self.token,
                )
            )
            agent.start()
            if self.registrar_url:
                agent.register()
            runtime.agent = agent
            runtime.agent_url = agent.url
        at = 0.0
        for path, digest in spec.host_manifest.items():
            at += runtime.rng.expovariate(1.0 / self.mean_gap) if self.mean_gap > 0 else 0.0
            runtime.schedule(at, ("host-event", path, digest))
        for pod_spec in spec.pods:
            pod = SimPod(pod_spec, runtime.new_uid(), runtime.rng.getrandbits(64).to_bytes(8, "big").hex())
            runtime.pods[pod_spec.name] = pod
            self._record(runtime, "pod-started", pod=pod_spec.name, uid=pod.uid,
                         generation=pod.generation)
            for path, digest in pod_spec.manifest.items():
                at += runtime.rng.expovariate(1.0 / self.mean_gap) if self.mean_gap > 0 else 0.0
                runtime.schedule(at, ("pod-event", pod, pod.generation, path, digest))

    def stop(self):
        self._stop.set()
        for runtime in self.nodes.values():
            with runtime.cond:
                runtime.cond.notify_all()
            if runtime.thread:
                runtime.thread.join(timeout=10)
            if runtime.agent is not None:
                runtime.agent.stop()
        self.control.stop()

    def wait_until_drained(self, timeout: float = 30.0):
        """Block until every node's timeline has been fully emitted."""
        deadline = time.monotonic() + timeout
        for runtime in self.nodes.values():
            with runtime.cond:
                while runtime.timeline or runtime.busy:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TimeoutError(f"node {runtime.spec.name} timeline not drained")
                    runtime.cond.wait(timeout=min(remaining, 0.2))

    # -- timeline pump -------------------------------------------------------

    def _pump(self, runtime: _NodeRuntime):
        while not self._stop.is_set():
            with runtime.cond:
                if not runtime.timeline:
                    runtime.cond.notify_all()
                    runtime.cond.wait(timeout=0.2)
                    continue
                at, seq, action = runtime.timeline[0]
                target = (self._start_wall or 0) + at * self.pace
                delay = target - time.monotonic()
                if delay > 0:
                    runtime.cond.wait(timeout=min(delay, 0.2))
                    continue
                heapq.heappop(runtime.timeline)
                runtime.busy = True
            try:
                self._execute(runtime, action)
            finally:
                with runtime.cond:
                    runtime.busy = False
                    runtime.cond.notify_all()

    def _execute(self, runtime: _NodeRuntime, action):
        kind = action[0]
        with runtime.lock:
            if kind == "host-event":
                _, path, digest = action
                self._emit_host_event(runtime, path, digest)
            elif kind == "pod-event":
                _, pod, generation, path, digest = action
                if pod.alive and pod.generation == generation:
                    self._emit_pod_event(runtime, pod, path, digest)
            elif kind == "inject":
                _, scenario = action
                self._apply_scenario(runtime, scenario)

    # -- event emission ------------------------------------------------------

    def _deliver(self, runtime: _NodeRuntime, path: str, digest: Digest, cgpath: str):
        runtime.tick += 1
        body = {
            "path": path,
            "digest": digest.hex,
            "cgpath": cgpath,
            "timestamp": runtime.tick,
        }
        url = runtime.agent_url.rstrip("/") + "/v1/events"
        last = None
        for _ in range(3):
            try:
                resp = requests.post(url, json=body, headers=bearer_headers(self.token), timeout=5)
                if resp.status_code == 200:
                    return True
                last = resp.text
            except requests.RequestException as exc:
                last = str(exc)
            time.sleep(0.05)
        self._record(runtime, "delivery-failed", path=path, error=str(last))
        return False

    def _emit_host_event(self, runtime: _NodeRuntime, path: str, digest: Digest):
        unit = path.rsplit("/", 1)[-1] or "host"
        cgpath = f"/system.slice/{unit}.service"
        self._deliver(runtime, path, digest, cgpath)
        self._record(runtime, "event", scope="node", path=path, digest=digest.hex, cgpath=cgpath)

    def _emit_pod_event(self, runtime: _NodeRuntime, pod: SimPod, path: str, digest: Digest):
        cgpath = pod.cgroup_path(runtime.spec.orchestrator_prefix)
        self._deliver(runtime, path, digest, cgpath)
        self._record(
            runtime, "event", scope="pod", pod=pod.spec.name, uid=pod.uid,
            path=path, digest=digest.hex, cgpath=cgpath,
        )

    def _record(self, runtime: _NodeRuntime | None, kind: str, **fields):
        with self._log_lock:
            self._log_seq += 1
            record = {
                "seq": self._log_seq,
                "wall_ts": time.time(),
                "node": runtime.spec.name if runtime else None,
                "kind": kind,
                **fields,
            }
            self.event_log.append(record)
            if self.event_log_path:
                with open(self.event_log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")
        return record

    # -- tamper injection ----------------------------------------------------

    def _runtime_for_scenario(self, scenario: TamperScenario) -> _NodeRuntime:
        if scenario.pod is not None:
            for runtime in self.nodes.values():
                if scenario.pod in runtime.pods:
                    return runtime
            raise ValueError(f"unknown pod {scenario.pod!r}")
        if scenario.node is not None:
            runtime = self.nodes.get(scenario.node)
            if runtime is None:
                raise ValueError(f"unknown node {scenario.node!r}")
            return runtime
        raise ValueError("scenario names neither pod nor node")

    def inject(self, scenario: TamperScenario):
        """Apply a tamper scenario now, serialized with the node's event
        stream; returns after the resulting events reached the agent."""
        runtime = self._runtime_for_scenario(scenario)
        with runtime.lock:
            self._apply_scenario(runtime, scenario)

    def _fresh_digest(self, runtime: _NodeRuntime, tag: str) -> Digest:
        return Digest.of(f"tamper:{tag}:{runtime.rng.getrandbits(128)}".encode())

    def _apply_scenario(self, runtime: _NodeRuntime, scenario: TamperScenario):
        self._record(runtime, "inject", scenario=scenario.kind, pod=scenario.pod,
                     path=scenario.path or scenario.library)
        if scenario.kind == "exec-unlisted":
            pod = self._pod_or_fail(runtime, scenario.pod)
            self._emit_pod_event(
                runtime, pod, scenario.path, self._fresh_digest(runtime, scenario.path)
            )
        elif scenario.kind == "modify-pod-binary":
            pod = self._pod_or_fail(runtime, scenario.pod)
            self._emit_pod_event(
                runtime, pod, scenario.path, self._fresh_digest(runtime, scenario.path)
            )
        elif scenario.kind == "overwrite-host-binary":
            self._emit_host_event(
                runtime, scenario.path, self._fresh_digest(runtime, scenario.path)
            )
        elif scenario.kind == "preload-hijack":
            pod = self._pod_or_fail(runtime, scenario.pod)
            library = scenario.library or "/opt/hijack/libpreload.so"
            self._emit_pod_event(runtime, pod, library, self._fresh_digest(runtime, library))
            self._emit_pod_event(
                runtime, pod, "/etc/ld.so.preload", self._fresh_digest(runtime, "ld.so.preload")
            )
        elif scenario.kind == "unknown-pod":
            spec = PodSpec(name=f"rogue-{len(runtime.rogue_pods) + 1}", manifest={})
            rogue = SimPod(spec, runtime.new_uid(), runtime.rng.getrandbits(64).to_bytes(8, "big").hex())
            runtime.rogue_pods.append(rogue)
            self._record(runtime, "pod-started", pod=spec.name, uid=rogue.uid, generation=1,
                         rogue=True)
            for path in ("/bin/sh", "/usr/bin/nc"):
                self._emit_pod_event(runtime, rogue, path, self._fresh_digest(runtime, path))

    @staticmethod
    def _pod_or_fail(runtime: _NodeRuntime, name: str | None) -> SimPod:
        pod = runtime.pods.get(name or "")
        if pod is None:
            raise ValueError(f"unknown pod {name!r}")
        return pod

    # -- remediation ---------------------------------------------------------

    def handle_remediation(self, event: dict):
        """Consume a verifier remediation event. evict-restart terminates the
        pod and restarts it with a fresh UID; anything else is recorded only.
        Events for unknown pods are logged and ignored."""
        scope = event.get("scope", "")
        action = event.get("action", "")
        self._record(None, "remediation-received", scope=scope, action=action)
        if action != "evict-restart" or not scope.startswith("pod:"):
            return
        uid = scope[len("pod:"):]
        for runtime in self.nodes.values():
            for pod in runtime.pods.values():
                if pod.uid == uid and pod.alive:
                    self._evict_restart(runtime, pod)
                    return
        self._record(None, "remediation-ignored", scope=scope, reason="unknown pod uid")

    def _evict_restart(self, runtime: _NodeRuntime, pod: SimPod):
        with runtime.lock:
            old_uid = pod.uid
            pod.alive = False
            self._record(runtime, "pod-evicted", pod=pod.spec.name, uid=old_uid)
            pod.uid = runtime.new_uid()
            pod.container_hash = runtime.rng.getrandbits(64).to_bytes(8, "big").hex()
            pod.generation += 1
            pod.alive = True
            self._record(runtime, "pod-started", pod=pod.spec.name, uid=pod.uid,
                         generation=pod.generation)
            for path, digest in pod.spec.manifest.items():
                self._emit_pod_event(runtime, pod, path, digest)
            notice = {
                "type": "pod-restarted",
                "node": runtime.spec.name,
                "pod": pod.spec.name,
                "old_uid": old_uid,
                "new_uid": pod.uid,
            }
            self.operator_notices.append(notice)
            self._record(runtime, "operator-notice", **notice)

    # -- introspection -------------------------------------------------------

    def pods(self) -> list[dict]:
        out = []
        for runtime in self.nodes.values():
            for pod in runtime.pods.values():
                out.append(
                    {
                        "node": runtime.spec.name,
                        "name": pod.spec.name,
                        "uid": pod.uid,
                        "alive": pod.alive,
                        "generation": pod.generation,
                        "cgroup_style": pod.spec.cgroup_style,
                        "manifest": {p: d.hex for p, d in pod.spec.manifest.items()},
                    }
                )
        return out

    def agent_urls(self) -> dict[str, str]:
        return {name: runtime.agent_url for name, runtime in self.nodes.items()}

    # -- control http --------------------------------------------------------

    def _http_remediate(self, groups, query, body):
        if not body:
            raise HttpError(400, "remediation event body required")
        self.handle_remediation(body.get("event", body))
        return 200, {"result": "accepted"}

    def _http_inject(self, groups, query, body):
        if not body:
            raise HttpError(400, "scenario body required")
        try:
            scenario = TamperScenario.from_dict(body)
            self.inject(scenario)
        except (KeyError, ValueError) as exc:
            raise HttpError(400, f"bad scenario: {exc}")
        return 200, {"result": "injected", "kind": scenario.kind}

    def _http_pods(self, groups, query, body):
        return 200, {"pods": self.pods()}

    def _http_notices(self, groups, query, body):
        return 200, {"notices": list(self.operator_notices)}


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(description="run the cluster simulator")
    parser.add_argument("--topology", required=True, help="topology YAML file")
    parser.add_argument("--registrar", default=None, help="registrar base URL")
    parser.add_argument("--token", default=None)
    parser.add_argument("--seed", default="0")
    parser.add_argument("--mean-gap", type=float, default=0.2)
    parser.add_argument("--pace", type=float, default=1.0)
    parser.add_argument("--event-log", default=None)
    parser.add_argument("--schedule", default=None, help="scenario schedule YAML file")
    parser.add_argument("--port", type=int, default=8882)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    with open(args.topology, encoding="utf-8") as fh:
        topology = Topology.from_yaml(fh.read())
    schedule = None
    if args.schedule:
        with open(args.schedule, encoding="utf-8") as fh:
            schedule = load_scenario_schedule(fh.read())
    sim = ClusterSim(
        topology,
        seed=args.seed,
        registrar_url=args.registrar,
        token=args.token,
        mean_gap=args.mean_gap,
        pace=args.pace,
        event_log_path=args.event_log,
        control_port=args.port,
        schedule=schedule,
    ).start()
    print(f"cluster-sim control on {sim.control.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        sim.stop()


if __name__ == "__main__":
    main()
