import time

import pytest
import requests

from podseal import trust_anchor as ta
from podseal.httpd import bearer_headers
from podseal.registrar import IdentityRecord, Registrar, RegistrationError

from conftest import TOKEN


def make_record(agent_id="worker1", seed=1, url="http://127.0.0.1:1") -> IdentityRecord:
    ek, ak = ta.create_identity(seed=seed)
    return IdentityRecord(
        agent_id=agent_id,
        ek_public=ek.public,
        ek_cert=ek.cert,
        ak_public=ak.public,
        ak_cert=ak.cert,
        registered_at=time.time(),
        agent_url=url,
    )


class TestRegistrarCore:
    def test_register_and_lookup(self, tmp_path):
        registrar = Registrar(str(tmp_path / "store.jsonl"))
        record = make_record()
        registrar.register_agent(record)
        found = registrar.lookup_agent("worker1")
        assert found.ak_public == record.ak_public

    def test_lookup_unknown_is_none(self, tmp_path):
        assert Registrar(str(tmp_path / "s.jsonl")).lookup_agent("ghost") is None

    def test_idempotent_reregistration(self, tmp_path):
        registrar = Registrar(str(tmp_path / "s.jsonl"))
        registrar.register_agent(make_record(seed=1))
        registrar.register_agent(make_record(seed=1))  # same keys
        assert registrar.agent_ids() == ["worker1"]

    def test_conflicting_keys_rejected(self, tmp_path):
        registrar = Registrar(str(tmp_path / "s.jsonl"))
        registrar.register_agent(make_record(seed=1))
        with pytest.raises(RegistrationError) as err:
            registrar.register_agent(make_record(seed=2))
        assert err.value.reason == "conflict"

    def test_ak_cert_from_wrong_ek_rejected(self, tmp_path):
        registrar = Registrar(str(tmp_path / "s.jsonl"))
        good = make_record(seed=1)
        other_ek, _ = ta.create_identity(seed=9)
        forged = IdentityRecord(
            agent_id="worker1",
            ek_public=other_ek.public,
            ek_cert=other_ek.cert,
            ak_public=good.ak_public,
            ak_cert=good.ak_cert,
            registered_at=time.time(),
        )
        with pytest.raises(RegistrationError) as err:
            registrar.register_agent(forged)
        assert err.value.reason == "invalid-ak-cert"

    def test_durability_across_restart(self, tmp_path):
        store = str(tmp_path / "s.jsonl")
        Registrar(store).register_agent(make_record(seed=1))
        reborn = Registrar(store)
        record = reborn.lookup_agent("worker1")
        assert record is not None
        assert ta.verify_ak_certificate(record.ak_cert, record.ek_public)

    def test_pinning_until_admin_delete(self, tmp_path):
        store = str(tmp_path / "s.jsonl")
        registrar = Registrar(store)
        registrar.register_agent(make_record(seed=1))
        with pytest.raises(RegistrationError):
            registrar.register_agent(make_record(seed=2))
        assert registrar.delete_agent("worker1")
        registrar.register_agent(make_record(seed=2))  # now allowed
        assert not registrar.delete_agent("ghost")


class TestRegistrarHttp:
    def test_register_lookup_roundtrip(self, registrar_service):
        record = make_record(seed=3)
        resp = requests.post(
            f"{registrar_service.url}/v1/agents",
            json=record.to_dict(),
            headers=bearer_headers(TOKEN),
            timeout=5,
        )
        assert resp.status_code == 200
        got = requests.get(
            f"{registrar_service.url}/v1/agents/worker1",
            headers=bearer_headers(TOKEN),
            timeout=5,
        )
        assert got.status_code == 200
        assert got.json()["ak_public"] == record.to_dict()["ak_public"]

    def test_missing_token_is_401(self, registrar_service):
        resp = requests.get(f"{registrar_service.url}/v1/agents/worker1", timeout=5)
        assert resp.status_code == 401

    def test_unknown_agent_is_404(self, registrar_service):
        resp = requests.get(
            f"{registrar_service.url}/v1/agents/ghost",
            headers=bearer_headers(TOKEN),
            timeout=5,
        )
        assert resp.status_code == 404

    def test_conflict_is_409(self, registrar_service):
        url = f"{registrar_service.url}/v1/agents"
        requests.post(url, json=make_record(seed=1).to_dict(), headers=bearer_headers(TOKEN), timeout=5)
        resp = requests.post(url, json=make_record(seed=2).to_dict(), headers=bearer_headers(TOKEN), timeout=5)
        assert resp.status_code == 409
        assert resp.json()["reason"] == "conflict"

    def test_delete_requires_admin_token(self, registrar_service):
        url = f"{registrar_service.url}/v1/agents"
        requests.post(url, json=make_record(seed=1).to_dict(), headers=bearer_headers(TOKEN), timeout=5)
        denied = requests.delete(f"{url}/worker1", headers=bearer_headers(TOKEN), timeout=5)
        assert denied.status_code == 401
        allowed = requests.delete(f"{url}/worker1", headers=bearer_headers("admin-secret"), timeout=5)
        assert allowed.status_code == 200
        gone = requests.get(f"{url}/worker1", headers=bearer_headers(TOKEN), timeout=5)
        assert gone.status_code == 404

    def test_health_is_open(self, registrar_service):
        resp = requests.get(f"{registrar_service.url}/v1/health", timeout=5)
        assert resp.status_code == 200
