"""Per-node attestation agent.

Owns the node's emulated TPM and measurement log, ingests file events from
the node (simulated or replayed), registers its identity with the registrar,
and answers verifier challenges with integrity reports.

Snapshot and quote are taken under one lock with respect to event ingestion,
so the shipped log segment and the quoted PCR always agree; there is no gap
in which an event could land between the two.
"""

from __future__ import annotations

import argparse
import base64
import logging
import threading
import time
from dataclasses import dataclass

import requests

from . import measurement_log as ml
from . import trust_anchor as ta
from .httpd import HttpError, JsonHttpServer, bearer_headers

logger = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    agent_id: str
    registrar_url: str = ""
    node_name: str = ""
    seed: int | str | bytes | None = None
    token: str | None = None
    host: str = "127.0.0.1"
    port: int = 0


class OffsetOutOfRange(Exception):
    """Requested segment offset is beyond the current log count."""

    def __init__(self, offset: int, count: int):
        self.offset = offset
        self.count = count
        super().__init__(f"offset {offset} beyond count {count}")


@dataclass(frozen=True)
class IntegrityReport:
    agent_id: str
    nonce: bytes
    quote: ta.Quote
    entries: tuple[ml.MeasurementEntry, ...]
    offset: int
    total_count: int

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "nonce": self.nonce.hex(),
            "offset": self.offset,
            "total_count": self.total_count,
            "entries": "".join(ml.emit_entry(e) + "\n" for e in self.entries),
            "quote": {
                "nonce": self.quote.nonce.hex(),
                "pcr_selection": self.quote.pcr_selection,
                "composite_digest": self.quote.composite_digest.hex,
                "signature": base64.b64encode(self.quote.signature).decode(),
                "ak_id": self.quote.ak_id,
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IntegrityReport":
        q = doc["quote"]
        quote = ta.Quote(
            nonce=bytes.fromhex(q["nonce"]),
            pcr_selection=int(q["pcr_selection"]),
            composite_digest=ta.Digest.from_hex(q["composite_digest"]),
            signature=base64.b64decode(q["signature"]),
            ak_id=q.get("ak_id", ""),
        )
        entries = ml.parse_ascii(doc.get("entries", "")).entries
        return cls(
            agent_id=doc["agent_id"],
            nonce=bytes.fromhex(doc["nonce"]),
            quote=quote,
            entries=entries,
            offset=int(doc.get("offset", 0)),
            total_count=int(doc["total_count"]),
        )


class Agent:
    def __init__(self, config: AgentConfig):
        self.config = config
        self.ek, self.ak = ta.create_identity(config.seed)
        self.bank = ta.PcrBank()
        self.log = ml.MeasurementLog()
        self._lock = threading.Lock()
        with self._lock:
            ml.boot_aggregate_entry(self.log, self.bank)
        self.server = JsonHttpServer(
            f"agent-{config.agent_id}", token=config.token, host=config.host, port=config.port
        )
        self.server.add("GET", r"/v1/quote", self._http_quote)
        self.server.add("POST", r"/v1/events", self._http_events)
        self.server.add("GET", r"/v1/health", self._http_health, auth=False)

    @property
    def url(self) -> str:
        return self.server.url

    def start(self):
        self.server.start()
        return self

    def stop(self):
        self.server.stop()

    # -- registration ------------------------------------------------------

    def registration_record(self) -> dict:
        return {
            "agent_id": self.config.agent_id,
            "node_name": self.config.node_name,
            "agent_url": self.url,
            "ek_public": base64.b64encode(self.ek.public).decode(),
            "ek_cert": {
                "ek_public": base64.b64encode(self.ek.cert.ek_public).decode(),
                "manufacturer": self.ek.cert.manufacturer,
                "signature": base64.b64encode(self.ek.cert.signature).decode(),
            },
            "ak_public": base64.b64encode(self.ak.public).decode(),
            "ak_cert": {
                "ak_public": base64.b64encode(self.ak.cert.ak_public).decode(),
                "issuer_ek_id": self.ak.cert.issuer_ek_id,
                "signature": base64.b64encode(self.ak.cert.signature).decode(),
            },
        }

    def register(self, attempts: int = 10, delay: float = 0.3) -> None:
        """Register identity with the registrar; retries while it comes up."""
        url = self.config.registrar_url.rstrip("/") + "/v1/agents"
        last_error = None
        for attempt in range(attempts):
            try:
                resp = requests.post(
                    url,
                    json=self.registration_record(),
                    headers=bearer_headers(self.config.token),
                    timeout=5,
                )
                if resp.status_code == 200:
                    logger.info("agent %s registered", self.config.agent_id)
                    return
                raise RuntimeError(f"registrar rejected registration: {resp.text}")
            except requests.ConnectionError as exc:
                last_error = exc
                time.sleep(delay)
        raise RuntimeError(f"registrar unreachable after {attempts} attempts: {last_error}")

    # -- core operations ---------------------------------------------------

    def ingest_event(self, event: ml.FileEvent) -> bool:
        """Measure one file event; returns False when deduplicated."""
        with self._lock:
            entry = ml.append_measurement(self.log, self.bank, event)
        return entry is not None

    def handle_quote_request(self, nonce: bytes, pcr_selection: int, offset: int) -> IntegrityReport:
        """Snapshot the log segment and quote the registers atomically."""
        with self._lock:
            count = self.log.count
            if offset > count:
                raise OffsetOutOfRange(offset, count)
            segment = self.log.segment(offset)
            quote = ta.quote(self.bank, self.ak, nonce, pcr_selection)
        return IntegrityReport(
            agent_id=self.config.agent_id,
            nonce=nonce,
            quote=quote,
            entries=segment,
            offset=offset,
            total_count=count,
        )

    # -- http --------------------------------------------------------------

    def _http_quote(self, groups, query, body):
        try:
            nonce = bytes.fromhex(query.get("nonce", ""))
        except ValueError:
            raise HttpError(400, "nonce must be hex")
        mask_text = query.get("mask", f"{ta.DEFAULT_PCR_SELECTION:x}")
        try:
            pcr_selection = int(mask_text, 16)
        except ValueError:
            raise HttpError(400, f"bad mask {mask_text!r}")
        try:
            offset = int(query.get("offset", "0"))
        except ValueError:
            raise HttpError(400, "offset must be an integer")
        if offset < 0:
            raise HttpError(400, "offset must be non-negative")
        try:
            report = self.handle_quote_request(nonce, pcr_selection, offset)
        except OffsetOutOfRange as exc:
            raise HttpError(416, str(exc), offset=exc.offset, count=exc.count)
        except ValueError as exc:
            raise HttpError(400, str(exc))
        return 200, report.to_dict()

    def _http_events(self, groups, query, body):
        if body is None:
            raise HttpError(400, "event body required")
        items = body.get("events", [body]) if isinstance(body, dict) else body
        recorded = 0
        for item in items:
            try:
                event = ml.FileEvent(
                    path=item["path"],
                    content_digest=ta.Digest.from_hex(item["digest"]),
                    cgpath=item.get("cgpath", ""),
                    timestamp=int(item.get("timestamp", 0)),
                )
            except (KeyError, ValueError) as exc:
                raise HttpError(400, f"bad event: {exc}")
            if self.ingest_event(event):
                recorded += 1
        return 200, {"received": len(items), "recorded": recorded, "count": self.log.count}

    def _http_health(self, groups, query, body):
        return 200, {
            "status": "ok",
            "agent_id": self.config.agent_id,
            "count": self.log.count,
        }


def main(argv=None):
    parser = argparse.ArgumentParser(description="run an attestation agent")
    parser.add_argument("--agent-id", required=True)
    parser.add_argument("--registrar", required=True, help="registrar base URL")
    parser.add_argument("--node-name", default="")
    parser.add_argument("--seed", default=None)
    parser.add_argument("--token", default=None)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    agent = Agent(
        AgentConfig(
            agent_id=args.agent_id,
            registrar_url=args.registrar,
            node_name=args.node_name,
            seed=args.seed,
            token=args.token,
            host=args.host,
            port=args.port,
        )
    )
    agent.start()
    print(f"agent {args.agent_id} listening on {agent.url}", flush=True)
    agent.register()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        agent.stop()


if __name__ == "__main__":
    main()
