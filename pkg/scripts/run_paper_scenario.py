#!/usr/bin/env python3
"""End-to-end demonstration on the two-worker 5G-core topology.

Boots the whole control plane in one process (registrar, verifier, cluster
simulator), enrolls both workers with per-pod allowlists and the
"/usr/bin only" node exclude rule, then executes the tamper experiment:
/bin/cat, /pause, /bin/busybox and /usr/bin/curl are run inside the AUSF pod.
The script prints the trust table as the verifier sees it before and after
the attack, and (with --remediate) drives the evict-restart loop: one
remediation event, a fresh pod UID, tenant re-enrollment, reset, recovery.

Usage: python scripts/run_paper_scenario.py [--interval 2.0] [--remediate]
"""

import argparse
import logging
import sys
import tempfile
import time

from podseal.policy import PolicyBundle
from podseal.pod_attribution import PodRef
from podseal.registrar import RegistrarService
from podseal.sim import ClusterSim, TamperScenario, Topology
from podseal.verifier import Verifier

TOKEN = "demo-cluster-secret"
ONLY_USR_BIN = "^(?!/usr/bin/).*$"

TOPOLOGY = {
    "nodes": [
        {
            "name": "worker1",
            "host_manifest": {"/usr/bin/kubelet": "auto", "/usr/local/bin/k3s": "auto"},
            "pods": [
                {"name": "mysql", "manifest": {"/usr/sbin/mysqld": "auto"}},
                {"name": "nrf", "manifest": {"/openair-nrf/bin/oai_nrf": "auto"}},
                {"name": "ausf", "manifest": {"/openair-ausf/bin/oai_ausf": "auto"},
                 "cgroup_style": "systemd"},
                {"name": "udr", "manifest": {"/openair-udr/bin/oai_udr": "auto"}},
            ],
        },
        {
            "name": "worker2",
            "orchestrator_prefix": "/rancher/k3s",
            "host_manifest": {"/usr/bin/kubelet": "auto"},
            "pods": [
                {"name": "amf", "manifest": {"/openair-amf/bin/oai_amf": "auto"}},
                {"name": "smf", "manifest": {"/openair-smf/bin/oai_smf": "auto"}},
                {"name": "upf", "manifest": {"/openair-upf/bin/oai_upf": "auto"},
                 "cgroup_style": "systemd"},
            ],
        },
    ]
}


def bundle_for(sim, node_name, remediation=None) -> PolicyBundle:
    spec_node = sim.nodes[node_name].spec
    pods = [p for p in sim.pods() if p["node"] == node_name]
    return PolicyBundle.from_dict({
        "registered_pods": [p["uid"] for p in pods],
        "pod_allowlists": {
            p["uid"]: {path: [digest] for path, digest in p["manifest"].items()}
            for p in pods
        },
        "node_allowlist": {
            path: [digest.hex] for path, digest in spec_node.host_manifest.items()
        },
        "pod_labels": {p["uid"]: p["name"] for p in pods},
        "exclude_rules": [{"regex": ONLY_USR_BIN}],
        "remediation": remediation or {"default": "notify-only"},
    })


def print_trust_table(verifier, heading):
    print(f"\n=== {heading}")
    print(f"{'AGENT':<9} {'SCOPE':<44} {'LABEL':<14} {'STATE':<10} VIOLATIONS")
    for agent_id, doc in sorted(verifier.get_status()["agents"].items()):
        node = doc["trust"]["node"]
        print(f"{agent_id:<9} {'node':<44} {'-':<14} {node['status']:<10} "
              + (" ".join(v["path"] for v in node["violations"]) or "-"))
        labels = doc.get("pod_labels", {})
        for uid, state in sorted(doc["trust"]["pods"].items()):
            paths = " ".join(v["path"] for v in state["violations"]) or "-"
            print(f"{agent_id:<9} {'pod:' + uid:<44} {labels.get(uid, '-'):<14} "
                  f"{state['status']:<10} {paths}")


def wait_trusted(verifier, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        agents = verifier.get_status()["agents"]
        if agents and all(
            doc["trust"]["node"]["status"] == "trusted"
            and all(s["status"] == "trusted" for s in doc["trust"]["pods"].values())
            for doc in agents.values()
        ):
            return
        time.sleep(0.1)
    raise TimeoutError("cluster did not settle into a trusted state")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--interval", type=float, default=2.0)
    parser.add_argument("--remediate", action="store_true",
                        help="use evict-restart for AUSF and drive the recovery loop")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    workdir = tempfile.mkdtemp(prefix="podseal-demo-")
    print(f"work dir: {workdir}")

    registrar = RegistrarService(store_path=f"{workdir}/registrar.jsonl", token=TOKEN).start()
    sim = ClusterSim(
        Topology.from_dict(TOPOLOGY), seed=2024, registrar_url=registrar.url,
        token=TOKEN, mean_gap=0.05, pace=1.0, event_log_path=f"{workdir}/events.jsonl",
    ).start()
    print(f"registrar: {registrar.url}   sim control: {sim.control.url}")
    sim.wait_until_drained()

    verifier = Verifier(
        registrar_url=registrar.url, token=TOKEN,
        webhook_url=sim.control.url + "/v1/remediate",
        audit_path=f"{workdir}/audit.jsonl",
    )
    try:
        names = {p["name"]: p for p in sim.pods()}
        ausf_uid = names["ausf"]["uid"]
        remediation = (
            {"default": "notify-only", "pods": {ausf_uid: "evict-restart"}}
            if args.remediate else None
        )
        for node in ("worker1", "worker2"):
            verifier.enroll_agent(node, bundle_for(sim, node, remediation),
                                  interval=args.interval)
        wait_trusted(verifier)
        print_trust_table(verifier, "baseline: every scope attested clean")

        print("\n>>> executing /bin/cat, /pause, /bin/busybox, /usr/bin/curl inside AUSF")
        for path in ("/bin/cat", "/pause", "/bin/busybox", "/usr/bin/curl"):
            sim.inject(TamperScenario(kind="exec-unlisted", pod="ausf", path=path))
        t0 = time.time()
        while verifier.get_status("worker1")["trust"]["pods"][ausf_uid]["status"] != "untrusted":
            time.sleep(0.05)
        print(f">>> AUSF flagged untrusted after {time.time() - t0:.2f}s")
        print_trust_table(verifier, "after tampering: AUSF isolated, node stays trusted")

        if args.remediate:
            while not sim.operator_notices:
                time.sleep(0.05)
            notice = sim.operator_notices[-1]
            new_uid = notice["new_uid"]
            print(f"\n>>> remediation: AUSF evicted, restarted as {new_uid}")
            bundle = bundle_for(sim, "worker1", remediation)
            bundle.registered_pods.add(ausf_uid)
            bundle.pod_allowlists[ausf_uid] = bundle.pod_allowlists[new_uid]
            bundle.pod_labels[ausf_uid] = "ausf-retired"
            verifier.enroll_agent("worker1", bundle, interval=args.interval)
            time.sleep(args.interval + 1)
            verifier.reset_trust("worker1", PodRef.pod(ausf_uid))
            deadline = time.time() + 4 * args.interval
            while time.time() < deadline:
                doc = verifier.get_status("worker1")["trust"]["pods"]
                if all(s["status"] == "trusted" for s in doc.values()):
                    break
                time.sleep(0.1)
            print_trust_table(verifier, "after re-enroll + reset: fresh AUSF trusted again")

        audit = verifier.audit.records()
        print(f"\naudit log: {len(audit)} records in {workdir}/audit.jsonl")
        outcomes = {}
        for record in audit:
            if record["kind"] == "cycle":
                outcomes[record["outcome"]] = outcomes.get(record["outcome"], 0) + 1
        print(f"cycle outcomes: {outcomes}")
        return 0
    finally:
        verifier.stop()
        sim.stop()
        registrar.stop()


if __name__ == "__main__":
    sys.exit(main())
