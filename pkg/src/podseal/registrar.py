"""Durable identity registry binding agent IDs to EK/AK material.

The verifier consults the registrar before trusting any quote. Records are
pinned: once an agent_id is bound to key material, registration with
different keys is rejected until an administrative delete. Storage is a
file of one JSON record per line, rewritten atomically (write temp file,
rename over) so accepted records survive restarts.
"""

from __future__ import annotations

import base64
import logging
import os
import threading
import time
from dataclasses import dataclass

from . import trust_anchor
from .httpd import HttpError, JsonHttpServer

logger = logging.getLogger(__name__)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


def _unb64(text: str) -> bytes:
    return base64.b64decode(text)


@dataclass(frozen=True)
class IdentityRecord:
    agent_id: str
    ek_public: bytes
    ek_cert: trust_anchor.EkCertificate
    ak_public: bytes
    ak_cert: trust_anchor.AkCertificate
    registered_at: float
    agent_url: str = ""
    node_name: str = ""

    def same_keys(self, other: "IdentityRecord") -> bool:
        return self.ek_public == other.ek_public and self.ak_public == other.ak_public

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "node_name": self.node_name,
            "agent_url": self.agent_url,
            "ek_public": _b64(self.ek_public),
            "ek_cert": {
                "ek_public": _b64(self.ek_cert.ek_public),
                "manufacturer": self.ek_cert.manufacturer,
                "signature": _b64(self.ek_cert.signature),
            },
            "ak_public": _b64(self.ak_public),
            "ak_cert": {
                "ak_public": _b64(self.ak_cert.ak_public),
                "issuer_ek_id": self.ak_cert.issuer_ek_id,
                "signature": _b64(self.ak_cert.signature),
            },
            "registered_at": self.registered_at,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IdentityRecord":
        try:
            ek_cert = trust_anchor.EkCertificate(
                ek_public=_unb64(doc["ek_cert"]["ek_public"]),
                manufacturer=doc["ek_cert"]["manufacturer"],
                signature=_unb64(doc["ek_cert"]["signature"]),
            )
            ak_cert = trust_anchor.AkCertificate(
                ak_public=_unb64(doc["ak_cert"]["ak_public"]),
                issuer_ek_id=doc["ak_cert"]["issuer_ek_id"],
                signature=_unb64(doc["ak_cert"]["signature"]),
            )
            return cls(
                agent_id=str(doc["agent_id"]),
                ek_public=_unb64(doc["ek_public"]),
                ek_cert=ek_cert,
                ak_public=_unb64(doc["ak_public"]),
                ak_cert=ak_cert,
                registered_at=float(doc.get("registered_at") or time.time()),
                agent_url=str(doc.get("agent_url") or ""),
                node_name=str(doc.get("node_name") or ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RegistrationError("malformed", f"bad record: {exc}") from exc


class RegistrationError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class Registrar:
    """In-memory registry with file durability; writes serialized, lookups
    against an immutable snapshot."""

    def __init__(self, store_path: str | None = None):
        self.store_path = store_path
        self._records: dict[str, IdentityRecord] = {}
        self._lock = threading.Lock()
        if store_path and os.path.exists(store_path):
            self._load()

    def _load(self):
        import json

        with open(self.store_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = IdentityRecord.from_dict(json.loads(line))
                self._records[record.agent_id] = record
        logger.info("registrar loaded %d records from %s", len(self._records), self.store_path)

    def _persist(self):
        if not self.store_path:
            return
        import json

        tmp = self.store_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for record in self._records.values():
                fh.write(json.dumps(record.to_dict()) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.store_path)

    def register_agent(self, record: IdentityRecord) -> IdentityRecord:
        """Persist iff the AK certificate is valid under the record's EK and
        the agent_id is not already pinned to different keys."""
        if record.ak_cert.ak_public != record.ak_public:
            raise RegistrationError("invalid-ak-cert", "certificate covers a different AK")
        if not trust_anchor.verify_ak_certificate(record.ak_cert, record.ek_public):
            raise RegistrationError("invalid-ak-cert", "signature does not verify under EK")
        if not record.ek_cert.verifies() or record.ek_cert.ek_public != record.ek_public:
            raise RegistrationError("invalid-ak-cert", "EK certificate does not verify")
        with self._lock:
            existing = self._records.get(record.agent_id)
            if existing is not None and not existing.same_keys(record):
                raise RegistrationError(
                    "conflict", f"agent {record.agent_id} pinned to different keys"
                )
            if existing is not None:
                # idempotent re-registration; refresh endpoint, keep pin time
                record = IdentityRecord(
                    **{**record.__dict__, "registered_at": existing.registered_at}
                )
            self._records[record.agent_id] = record
            self._persist()
        logger.info("registrar accepted agent %s", record.agent_id)
        return record

    def lookup_agent(self, agent_id: str) -> IdentityRecord | None:
        return self._records.get(agent_id)

    def delete_agent(self, agent_id: str) -> bool:
        with self._lock:
            if agent_id not in self._records:
                return False
            del self._records[agent_id]
            self._persist()
            return True

    def agent_ids(self) -> list[str]:
        return sorted(self._records)


class RegistrarService:
    """HTTP face of the registrar.

    POST /v1/agents, GET /v1/agents/<id>, DELETE /v1/agents/<id> (admin token).
    """

    def __init__(self, store_path=None, token=None, admin_token=None, host="127.0.0.1", port=0):
        self.registrar = Registrar(store_path)
        self.admin_token = admin_token
        self.server = JsonHttpServer("registrar", token=token, host=host, port=port)
        self.server.add("POST", r"/v1/agents", self._post_agent)
        self.server.add("GET", r"/v1/agents/(?P<agent_id>[^/]+)", self._get_agent)
        self.server.add(
            "DELETE",
            r"/v1/agents/(?P<agent_id>[^/]+)",
            self._delete_agent,
            auth=admin_token if admin_token is not None else True,
        )
        self.server.add("GET", r"/v1/agents", self._list_agents)
        self.server.add("GET", r"/v1/health", lambda g, q, b: (200, {"status": "ok"}), auth=False)

    @property
    def url(self) -> str:
        return self.server.url

    def start(self):
        self.server.start()
        return self

    def stop(self):
        self.server.stop()

    def _post_agent(self, groups, query, body):
        if not body:
            raise HttpError(400, "registration body required")
        record = IdentityRecord.from_dict({**body, "registered_at": time.time()})
        try:
            stored = self.registrar.register_agent(record)
        except RegistrationError as exc:
            status = 409 if exc.reason == "conflict" else 400
            raise HttpError(status, str(exc), reason=exc.reason) from exc
        return 200, {"result": "accepted", "agent_id": stored.agent_id}

    def _get_agent(self, groups, query, body):
        record = self.registrar.lookup_agent(groups["agent_id"])
        if record is None:
            raise HttpError(404, f"agent {groups['agent_id']} not found")
        return 200, record.to_dict()

    def _list_agents(self, groups, query, body):
        return 200, {"agents": self.registrar.agent_ids()}

    def _delete_agent(self, groups, query, body):
        if not self.registrar.delete_agent(groups["agent_id"]):
            raise HttpError(404, f"agent {groups['agent_id']} not found")
        return 200, {"result": "deleted"}


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(description="run the identity registrar")
    parser.add_argument("--store", default="registrar_store.jsonl")
    parser.add_argument("--token", default=None)
    parser.add_argument("--admin-token", default=None)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8880)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    service = RegistrarService(
        store_path=args.store,
        token=args.token,
        admin_token=args.admin_token,
        host=args.host,
        port=args.port,
    ).start()
    print(f"registrar listening on {service.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        service.stop()


if __name__ == "__main__":
    main()
