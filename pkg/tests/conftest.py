import logging
import secrets

import pytest

from podseal.agent import Agent, AgentConfig
from podseal.registrar import RegistrarService
from podseal.trust_anchor import Digest

logging.getLogger("podseal").setLevel(logging.WARNING)

TOKEN = "test-cluster-secret"


def rand_digest(rng) -> Digest:
    return Digest(bytes(rng.getrandbits(8) for _ in range(32)))


@pytest.fixture
def token():
    return TOKEN


@pytest.fixture
def registrar_service(tmp_path):
    service = RegistrarService(
        store_path=str(tmp_path / "registrar.jsonl"),
        token=TOKEN,
        admin_token="admin-secret",
    ).start()
    yield service
    service.stop()


@pytest.fixture
def make_agent(registrar_service):
    """Factory for in-process agents registered with the shared registrar."""
    agents = []

    def factory(agent_id: str, seed=None) -> Agent:
        agent = Agent(
            AgentConfig(
                agent_id=agent_id,
                registrar_url=registrar_service.url,
                node_name=agent_id,
                seed=seed if seed is not None else secrets.token_hex(8),
                token=TOKEN,
            )
        )
        agent.start()
        agent.register()
        agents.append(agent)
        return agent

    yield factory
    for agent in agents:
        agent.stop()
