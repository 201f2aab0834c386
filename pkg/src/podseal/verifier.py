"""Continuous attestation engine.

One polling task per enrolled agent challenges it with a fresh nonce each
interval (default 2 s) and runs three checks in strict order: (a) the quote
signature verifies under the AK pinned in the registrar, (b) the shipped log
entries extend the verifier's running replay register to exactly the quoted
composite, (c) the verified entries satisfy the layered allowlist policy.
Policy evaluation never sees entries that failed (a) or (b).

Log transfer is incremental: the verifier remembers how many entries it has
verified and requests only the suffix, carrying the replay register forward.
Every cycle appends one record to an append-only audit log, and transitions
to Untrusted emit at-most-once remediation events to the configured webhook.
"""

from __future__ import annotations

import json
import logging
import secrets
import threading
import time
from dataclasses import dataclass

import requests

from . import trust_anchor as ta
from .agent import IntegrityReport
from .httpd import HttpError, JsonHttpServer, bearer_headers
from .measurement_log import template_hash
from .policy import (
    CompiledPolicy,
    EvaluationResult,
    PolicyBundle,
    PolicyError,
    TrustMap,
    TrustState,
    TrustStatus,
    attribute_entry,
    compile_policy,
    derive_trust,
    evaluate_entries,
)
from .pod_attribution import PodRef
from .registrar import IdentityRecord

logger = logging.getLogger(__name__)

OUTCOME_OK = "ok"
OUTCOME_QUOTE_INVALID = "quote-invalid"
OUTCOME_REPLAY_MISMATCH = "replay-mismatch"
OUTCOME_POLICY_VIOLATIONS = "policy-violations"
OUTCOME_UNREACHABLE = "agent-unreachable"

DEFAULT_INTERVAL = 2.0
DEFAULT_GRACE = 5
NONCE_BYTES = 16


class VerifierError(Exception):
    pass


@dataclass
class ReportVerdict:
    """Result of running the three checks on one integrity report."""

    outcome: str
    note: str = ""
    composite: ta.Digest | None = None
    candidate: ta.Digest | None = None
    evaluation: EvaluationResult | None = None


class AuditLog:
    """Append-only audit trail: in-memory list plus one JSON record per line
    on disk. Appends are serialized globally; timestamps are strictly
    monotone per agent."""

    def __init__(self, path: str | None = None):
        self.path = path
        self._records: list[dict] = []
        self._lock = threading.Lock()
        self._last_ts: dict[str, float] = {}

    def append(self, agent_id: str, kind: str, **fields) -> dict:
        with self._lock:
            ts = time.time()
            floor = self._last_ts.get(agent_id)
            if floor is not None and ts <= floor:
                ts = floor + 1e-6
            self._last_ts[agent_id] = ts
            record = {"timestamp": ts, "agent_id": agent_id, "kind": kind, **fields}
            self._records.append(record)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")
        return record

    def records(self, since: float | None = None, agent_id: str | None = None) -> list[dict]:
        with self._lock:
            out = list(self._records)
        if since is not None:
            out = [r for r in out if r["timestamp"] > since]
        if agent_id is not None:
            out = [r for r in out if r["agent_id"] == agent_id]
        return out


class AgentSession:
    """Per-agent verification state; mutated only under its own lock."""

    def __init__(
        self,
        agent_id: str,
        agent_url: str,
        ak_public: bytes,
        policy: CompiledPolicy,
        interval: float,
    ):
        self.agent_id = agent_id
        self.agent_url = agent_url
        self.ak_public = ak_public
        self.policy = policy
        self.interval = interval
        self.running_pcr = ta.Digest.zero()
        self.verified_count = 0
        self.trust = TrustMap.initial(policy.registered_pods)
        self.misses = 0
        self.last_outcome: str | None = None
        self.last_cycle_at: float | None = None
        self.seen_violations: set[tuple] = set()
        self.measured_pods: set[str] = set()
        self.lock = threading.RLock()
        self.stop_event = threading.Event()
        self.thread: threading.Thread | None = None

    def expected_composite(self, candidate: ta.Digest) -> ta.Digest:
        """Composite the agent's bank must quote if its only extended register
        is PCR 10 holding `candidate` (all other registers stay zero here)."""
        zero = ta.Digest.zero()
        buf = b"".join(
            (candidate if i == ta.PCR_IMA else zero).value
            for i in range(ta.PCR_COUNT)
            if self.policy.pcr_selection & (1 << i)
        )
        return ta.Digest.of(buf)

    def status_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "agent_url": self.agent_url,
            "interval": self.interval,
            "verified_count": self.verified_count,
            "last_outcome": self.last_outcome,
            "last_cycle_at": self.last_cycle_at,
            "trust": self.trust.to_dict(),
            "pod_labels": dict(self.policy.bundle.pod_labels),
        }


class Verifier:
    def __init__(
        self,
        registrar_url: str,
        token: str | None = None,
        webhook_url: str | None = None,
        audit_path: str | None = None,
        grace: int = DEFAULT_GRACE,
        request_timeout: float = 5.0,
        webhook_retries: int = 3,
    ):
        self.registrar_url = registrar_url.rstrip("/")
        self.token = token
        self.webhook_url = webhook_url
        self.grace = grace
        self.request_timeout = request_timeout
        self.webhook_retries = webhook_retries
        self.audit = AuditLog(audit_path)
        self.sessions: dict[str, AgentSession] = {}
        self._lock = threading.Lock()

    # -- enrollment --------------------------------------------------------

    def _registrar_record(self, agent_id: str) -> IdentityRecord:
        resp = requests.get(
            f"{self.registrar_url}/v1/agents/{agent_id}",
            headers=bearer_headers(self.token),
            timeout=self.request_timeout,
        )
        if resp.status_code == 404:
            raise VerifierError(f"agent {agent_id} not registered")
        resp.raise_for_status()
        return IdentityRecord.from_dict(resp.json())

    def enroll_agent(
        self,
        agent_id: str,
        bundle: PolicyBundle,
        interval: float = DEFAULT_INTERVAL,
        agent_url: str | None = None,
        start_polling: bool = True,
    ) -> AgentSession:
        """Create (or replace) the session for an agent.

        Requires a registrar record with a valid AK certificate. Re-enrolling
        replaces the policy and resets the running replay state; trust states
        carry over for pod UIDs that stay registered, and the node keeps its
        state (untrusted stays sticky across policy updates).
        """
        policy = compile_policy(bundle)
        record = self._registrar_record(agent_id)
        if not ta.verify_ak_certificate(record.ak_cert, record.ek_public):
            raise VerifierError(f"registrar record for {agent_id} has an invalid AK certificate")

        url = (agent_url or record.agent_url).rstrip("/")
        if not url:
            raise VerifierError(f"no agent URL known for {agent_id}")

        session = AgentSession(agent_id, url, record.ak_public, policy, interval)
        with self._lock:
            previous = self.sessions.get(agent_id)
            if previous is not None:
                self._stop_session(previous)
                session.trust = TrustMap(
                    node_state=previous.trust.node_state,
                    pod_states={
                        uid: previous.trust.pod_states.get(uid, session.trust.pod_states[uid])
                        for uid in policy.registered_pods
                    },
                )
                session.seen_violations = set(previous.seen_violations)
                session.measured_pods = set(previous.measured_pods)
            self.sessions[agent_id] = session
        self.audit.append(agent_id, "enroll", interval=interval,
                          registered_pods=sorted(policy.registered_pods))
        if start_polling:
            self._start_session(session)
        return session

    def _start_session(self, session: AgentSession):
        def loop():
            while not session.stop_event.is_set():
                began = time.monotonic()
                try:
                    self.attestation_cycle(session)
                except Exception:
                    logger.exception("cycle for %s failed unexpectedly", session.agent_id)
                elapsed = time.monotonic() - began
                session.stop_event.wait(max(0.0, session.interval - elapsed))

        session.thread = threading.Thread(
            target=loop, name=f"poll-{session.agent_id}", daemon=True
        )
        session.thread.start()

    @staticmethod
    def _stop_session(session: AgentSession):
        session.stop_event.set()
        if session.thread is not None:
            session.thread.join(timeout=10)

    def stop(self):
        with self._lock:
            for session in self.sessions.values():
                self._stop_session(session)

    # -- the attestation cycle ----------------------------------------------

    def _fetch_report(self, session: AgentSession, nonce: bytes, offset: int):
        params = {
            "nonce": nonce.hex(),
            "mask": f"{session.policy.pcr_selection:x}",
            "offset": str(offset),
        }
        return requests.get(
            f"{session.agent_url}/v1/quote",
            params=params,
            headers=bearer_headers(self.token),
            timeout=self.request_timeout,
        )

    def attestation_cycle(self, session: AgentSession) -> dict:
        """One challenge-verify round; appends and returns the audit record."""
        with session.lock:
            nonce = secrets.token_bytes(NONCE_BYTES)
            offset = session.verified_count
            try:
                resp = self._fetch_report(session, nonce, offset)
                if resp.status_code == 416:
                    # verifier state drifted ahead of the agent: restart stream
                    session.running_pcr = ta.Digest.zero()
                    session.verified_count = 0
                    offset = 0
                    resp = self._fetch_report(session, nonce, offset)
                resp.raise_for_status()
                report = IntegrityReport.from_dict(resp.json())
            except (requests.RequestException, ValueError, KeyError) as exc:
                if isinstance(exc, (requests.ConnectionError, requests.Timeout)):
                    return self._unreachable(session, nonce, exc)
                return self._evidence_failure(
                    session, nonce, OUTCOME_QUOTE_INVALID, f"unusable report: {exc}"
                )
            session.misses = 0

            verdict = self.verify_report(session, report, nonce, offset)
            if verdict.outcome in (OUTCOME_QUOTE_INVALID, OUTCOME_REPLAY_MISMATCH):
                return self._evidence_failure(
                    session, nonce, verdict.outcome, verdict.note,
                    composite=verdict.composite,
                )

            result = verdict.evaluation
            previous = session.trust
            session.measured_pods |= result.measured_pods
            session.trust = derive_trust(
                previous, result, measured_pods=session.measured_pods
            )
            session.running_pcr = verdict.candidate
            session.verified_count = report.total_count

            fresh = [
                v for v in result.all_violations() if v.key() not in session.seen_violations
            ]
            session.seen_violations.update(v.key() for v in fresh)
            return self._finish_cycle(
                session, nonce, verdict.outcome,
                composite=verdict.composite,
                new_violations=[v.to_dict() for v in fresh],
                previous=previous,
            )

    def verify_report(
        self, session: AgentSession, report: IntegrityReport, nonce: bytes, offset: int
    ) -> ReportVerdict:
        """Run the three verification checks on a fetched report.

        Pure with respect to session state (reads the pinned AK, policy, and
        running replay register); the caller applies the verdict. Policy
        evaluation runs only when both the quote and the replay check passed.
        """
        # check (a): quote authenticity and challenge binding
        try:
            composite = ta.verify_quote(report.quote, session.ak_public, nonce)
        except ta.QuoteRejected as exc:
            return ReportVerdict(OUTCOME_QUOTE_INVALID, exc.reason)
        if report.quote.pcr_selection != session.policy.pcr_selection:
            return ReportVerdict(OUTCOME_QUOTE_INVALID, "pcr selection mismatch")
        if report.total_count != offset + len(report.entries):
            return ReportVerdict(OUTCOME_QUOTE_INVALID, "segment/total_count mismatch")

        # check (b): the segment must re-hash to the quoted register
        candidate = session.running_pcr
        for entry in report.entries:
            if template_hash(entry.data) != entry.template_hash:
                return ReportVerdict(
                    OUTCOME_REPLAY_MISMATCH, "entry template hash does not recompute",
                    composite=composite,
                )
            candidate = ta.Digest.of(candidate.value + entry.template_hash.value)
        if session.expected_composite(candidate) != composite:
            return ReportVerdict(
                OUTCOME_REPLAY_MISMATCH, "measurement list does not reproduce quoted PCR",
                composite=composite,
            )

        # check (c): allowlist policy over the newly verified entries
        pairs = [(entry, attribute_entry(entry)) for entry in report.entries]
        result = evaluate_entries(session.policy, pairs, start_index=offset)
        outcome = OUTCOME_OK if result.clean else OUTCOME_POLICY_VIOLATIONS
        return ReportVerdict(
            outcome, composite=composite, candidate=candidate, evaluation=result
        )

    def _unreachable(self, session: AgentSession, nonce: bytes, exc) -> dict:
        session.misses += 1
        previous = session.trust
        note = f"attempt {session.misses}/{self.grace}: {exc.__class__.__name__}"
        if session.misses >= self.grace and previous.node_state.status is not TrustStatus.UNTRUSTED:
            session.trust = TrustMap(
                node_state=previous.node_state.with_findings(time.time(), [], ("unreachable",)),
                pod_states=dict(previous.pod_states),
            )
            note += "; grace exhausted, node untrusted"
        return self._finish_cycle(
            session, nonce, OUTCOME_UNREACHABLE,
            composite=None, new_violations=[], previous=previous, note=note,
        )

    def _evidence_failure(
        self, session: AgentSession, nonce: bytes, outcome: str, note: str,
        composite: ta.Digest | None = None,
    ) -> dict:
        """Checks (a)/(b) failed: mark the node untrusted immediately and do
        not touch replay state; policy evaluation is never reached."""
        previous = session.trust
        if previous.node_state.status is not TrustStatus.UNTRUSTED:
            session.trust = TrustMap(
                node_state=previous.node_state.with_findings(time.time(), [], (outcome,)),
                pod_states=dict(previous.pod_states),
            )
        return self._finish_cycle(
            session, nonce, outcome,
            composite=composite, new_violations=[], previous=previous, note=note,
        )

    def _finish_cycle(
        self,
        session: AgentSession,
        nonce: bytes,
        outcome: str,
        composite: ta.Digest | None,
        new_violations: list,
        previous: TrustMap,
        note: str = "",
    ) -> dict:
        session.last_outcome = outcome
        session.last_cycle_at = time.time()
        delta = self._trust_delta(previous, session.trust)
        record = self.audit.append(
            session.agent_id,
            "cycle",
            nonce=nonce.hex(),
            outcome=outcome,
            composite_digest=composite.hex if composite else None,
            new_violations=new_violations,
            trust_delta=delta,
            note=note,
        )
        self._emit_transitions(session, previous)
        return record

    @staticmethod
    def _trust_delta(previous: TrustMap, current: TrustMap) -> dict:
        delta = {}
        if previous.node_state.status is not current.node_state.status:
            delta["node"] = [previous.node_state.status.value, current.node_state.status.value]
        for uid, state in current.pod_states.items():
            before = previous.pod_states.get(uid)
            if before is None or before.status is not state.status:
                delta[f"pod:{uid}"] = [
                    before.status.value if before else None,
                    state.status.value,
                ]
        return delta

    # -- remediation ---------------------------------------------------------

    def _emit_transitions(self, session: AgentSession, previous: TrustMap):
        transitions: list[tuple[PodRef, object]] = []
        if (
            session.trust.node_state.status is TrustStatus.UNTRUSTED
            and previous.node_state.status is not TrustStatus.UNTRUSTED
        ):
            transitions.append((PodRef.node(), session.trust.node_state))
        for uid, state in session.trust.pod_states.items():
            before = previous.pod_states.get(uid)
            if state.status is TrustStatus.UNTRUSTED and (
                before is None or before.status is not TrustStatus.UNTRUSTED
            ):
                transitions.append((PodRef.pod(uid), state))
        for scope, state in transitions:
            self.emit_remediation(session, scope, state)

    def emit_remediation(self, session: AgentSession, scope: PodRef, state) -> dict:
        """Deliver one remediation event for a fresh Untrusted transition."""
        action = session.policy.bundle.remediation_action(scope)
        event = {
            "agent_id": session.agent_id,
            "scope": str(scope),
            "action": action,
            "cause": {
                "reasons": list(state.reasons),
                "violations": [v.to_dict() for v in state.violations],
            },
        }
        delivered = None
        if self.webhook_url:
            delivered = self._deliver_webhook(event)
        self.audit.append(
            session.agent_id,
            "remediation",
            event=event,
            delivered=delivered,
        )
        return event

    def _deliver_webhook(self, event: dict) -> bool:
        delay = 0.1
        for attempt in range(1, self.webhook_retries + 1):
            try:
                resp = requests.post(
                    self.webhook_url,
                    json=event,
                    headers=bearer_headers(self.token),
                    timeout=self.request_timeout,
                )
                if resp.status_code < 500:
                    return True
            except requests.RequestException:
                pass
            if attempt < self.webhook_retries:
                time.sleep(delay)
                delay *= 2
        logger.warning("remediation webhook delivery failed after %d attempts", self.webhook_retries)
        return False

    # -- operator surface ----------------------------------------------------

    def get_status(self, agent_id: str | None = None) -> dict:
        if agent_id is not None:
            session = self.sessions.get(agent_id)
            if session is None:
                raise VerifierError(f"no session for agent {agent_id}")
            with session.lock:
                return session.status_dict()
        out = {}
        for known_id, session in sorted(self.sessions.items()):
            with session.lock:
                out[known_id] = session.status_dict()
        return {"agents": out}

    def reset_trust(self, agent_id: str, scope: PodRef) -> None:
        """Return one scope to Start; the audit log records the manual reset."""
        session = self.sessions.get(agent_id)
        if session is None:
            raise VerifierError(f"no session for agent {agent_id}")
        with session.lock:
            if scope.is_pod:
                if scope.pod_uid not in session.trust.pod_states:
                    raise VerifierError(f"unknown pod scope {scope.pod_uid}")
                session.trust.pod_states[scope.pod_uid] = TrustState.start()
            else:
                session.trust.node_state = TrustState.start()
                session.misses = 0
        self.audit.append(agent_id, "reset", scope=str(scope), note="manual reset")


class VerifierService:
    """HTTP face: POST /v1/enroll, GET /v1/status[/<id>], POST /v1/reset,
    GET /v1/audit?since=<ts>."""

    def __init__(self, verifier: Verifier, token: str | None = None, host="127.0.0.1", port=0):
        self.verifier = verifier
        self.server = JsonHttpServer("verifier", token=token, host=host, port=port)
        self.server.add("POST", r"/v1/enroll", self._enroll)
        self.server.add("GET", r"/v1/status", self._status_all)
        self.server.add("GET", r"/v1/status/(?P<agent_id>[^/]+)", self._status_one)
        self.server.add("POST", r"/v1/reset", self._reset)
        self.server.add("GET", r"/v1/audit", self._audit)
        self.server.add("GET", r"/v1/health", lambda g, q, b: (200, {"status": "ok"}), auth=False)

    @property
    def url(self):
        return self.server.url

    def start(self):
        self.server.start()
        return self

    def stop(self):
        self.server.stop()
        self.verifier.stop()

    def _enroll(self, groups, query, body):
        if not body or "agent_id" not in body or "bundle" not in body:
            raise HttpError(400, "enroll body needs agent_id and bundle")
        try:
            bundle = PolicyBundle.from_dict(body["bundle"])
            session = self.verifier.enroll_agent(
                body["agent_id"],
                bundle,
                interval=float(body.get("interval", DEFAULT_INTERVAL)),
                agent_url=body.get("agent_url"),
            )
        except PolicyError as exc:
            raise HttpError(400, f"bad bundle: {exc}")
        except VerifierError as exc:
            raise HttpError(404, str(exc))
        except ValueError as exc:
            raise HttpError(400, str(exc))
        return 200, {"result": "enrolled", "agent_id": session.agent_id,
                     "interval": session.interval}

    def _status_all(self, groups, query, body):
        return 200, self.verifier.get_status()

    def _status_one(self, groups, query, body):
        try:
            return 200, self.verifier.get_status(groups["agent_id"])
        except VerifierError as exc:
            raise HttpError(404, str(exc))

    def _reset(self, groups, query, body):
        if not body or "agent_id" not in body or "scope" not in body:
            raise HttpError(400, "reset body needs agent_id and scope")
        scope_text = body["scope"]
        try:
            if scope_text == "node":
                scope = PodRef.node()
            elif scope_text.startswith("pod:"):
                scope = PodRef.pod(scope_text[len("pod:"):])
            else:
                raise ValueError(f"scope must be 'node' or 'pod:<uid>', got {scope_text!r}")
            self.verifier.reset_trust(body["agent_id"], scope)
        except VerifierError as exc:
            raise HttpError(404, str(exc))
        except ValueError as exc:
            raise HttpError(400, str(exc))
        return 200, {"result": "reset", "scope": scope_text}

    def _audit(self, groups, query, body):
        since = float(query["since"]) if "since" in query else None
        agent_id = query.get("agent_id")
        return 200, {"records": self.verifier.audit.records(since=since, agent_id=agent_id)}


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(description="run the attestation verifier")
    parser.add_argument("--registrar", required=True, help="registrar base URL")
    parser.add_argument("--token", default=None)
    parser.add_argument("--webhook", default=None, help="remediation webhook URL")
    parser.add_argument("--audit-file", default="verifier_audit.jsonl")
    parser.add_argument("--grace", type=int, default=DEFAULT_GRACE)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8881)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    verifier = Verifier(
        registrar_url=args.registrar,
        token=args.token,
        webhook_url=args.webhook,
        audit_path=args.audit_file,
        grace=args.grace,
    )
    service = VerifierService(verifier, token=args.token, host=args.host, port=args.port).start()
    print(f"verifier listening on {service.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        service.stop()


if __name__ == "__main__":
    main()
