import json

import pytest
import yaml
from click.testing import CliRunner

from conftest import TOKEN
from podseal import measurement_log as ml
from podseal.cli import main
from podseal.sim import ClusterSim, Topology
from podseal.verifier import Verifier, VerifierService

TOPOLOGY = {
    "nodes": [
        {
            "name": "worker1",
            "pods": [
                {"name": "ausf", "manifest": {"/usr/bin/nf-ausf": "auto"}},
                {"name": "mysql", "manifest": {"/usr/bin/mysqld": "auto"}},
            ],
        }
    ]
}


@pytest.fixture
def stack(registrar_service, tmp_path):
    sim = ClusterSim(
        Topology.from_dict(TOPOLOGY),
        seed=3,
        registrar_url=registrar_service.url,
        token=TOKEN,
        mean_gap=0.0,
        pace=0.0,
    ).start()
    sim.wait_until_drained()
    verifier = Verifier(registrar_url=registrar_service.url, token=TOKEN)
    service = VerifierService(verifier, token=TOKEN).start()

    pods = {p["name"]: p for p in sim.pods()}
    bundle = {
        "registered_pods": [p["uid"] for p in pods.values()],
        "pod_allowlists": {
            p["uid"]: {path: [digest] for path, digest in p["manifest"].items()}
            for p in pods.values()
        },
        "pod_labels": {p["uid"]: name for name, p in pods.items()},
    }
    bundle_path = tmp_path / "bundle.yaml"
    bundle_path.write_text(yaml.safe_dump(bundle))

    yield {
        "sim": sim,
        "verifier": verifier,
        "service": service,
        "registrar": registrar_service,
        "bundle_path": str(bundle_path),
        "pods": pods,
    }
    service.stop()
    sim.stop()


def invoke(stack, *args, env=None):
    base = [
        "--verifier", stack["service"].url,
        "--registrar", stack["registrar"].url,
        "--token", TOKEN,
    ]
    return CliRunner().invoke(main, base + list(args), env=env, catch_exceptions=False)


def enroll_and_cycle(stack):
    result = invoke(
        stack, "enroll", "--agent-id", "worker1",
        "--bundle", stack["bundle_path"], "--interval", "600",
    )
    assert result.exit_code == 0, result.output
    session = stack["verifier"].sessions["worker1"]
    session.stop_event.set()  # drive cycles manually below
    stack["verifier"].attestation_cycle(session)
    return session


class TestStatus:
    def test_all_trusted_exit_zero_and_table(self, stack):
        enroll_and_cycle(stack)
        result = invoke(stack, "status")
        assert result.exit_code == 0, result.output
        lines = result.output.splitlines()
        assert lines[0].split() == ["AGENT", "SCOPE", "LABEL", "STATE", "VIOLATIONS"]
        assert any("node" in line and "trusted" in line for line in lines)
        assert any("ausf" in line for line in lines)

    def test_untrusted_pod_listed_with_paths_exit_two(self, stack):
        session = enroll_and_cycle(stack)
        from podseal.sim import TamperScenario

        for path in ("/bin/cat", "/usr/bin/curl"):
            stack["sim"].inject(TamperScenario(kind="exec-unlisted", pod="ausf", path=path))
        stack["verifier"].attestation_cycle(session)

        result = invoke(stack, "status", "--agent-id", "worker1")
        assert result.exit_code == 2
        ausf_line = next(line for line in result.output.splitlines() if "ausf" in line)
        assert "untrusted" in ausf_line
        assert "/bin/cat" in ausf_line and "/usr/bin/curl" in ausf_line
        mysql_line = next(line for line in result.output.splitlines() if "mysql" in line)
        assert "untrusted" not in mysql_line

    def test_structured_output_is_json(self, stack):
        enroll_and_cycle(stack)
        result = invoke(stack, "--output", "structured", "status")
        doc = json.loads(result.output)
        assert "worker1" in doc["agents"]
        assert doc["scopes"][0]["state"] == "trusted"

    def test_start_state_is_not_exit_zero(self, stack):
        with open(stack["bundle_path"], encoding="utf-8") as fh:
            bundle = yaml.safe_load(fh)
        from podseal.policy import PolicyBundle

        stack["verifier"].enroll_agent(
            "worker1", PolicyBundle.from_dict(bundle), start_polling=False
        )
        result = invoke(stack, "status")
        assert result.exit_code == 2
        assert "start" in result.output

    def test_unknown_agent_is_operational_error(self, stack):
        result = invoke(stack, "status", "--agent-id", "ghost")
        assert result.exit_code == 1
        assert result.stderr.startswith("error:")


class TestResetAndEnrollErrors:
    def test_reset_flow(self, stack):
        session = enroll_and_cycle(stack)
        from podseal.sim import TamperScenario

        stack["sim"].inject(TamperScenario(kind="exec-unlisted", pod="ausf", path="/bin/cat"))
        stack["verifier"].attestation_cycle(session)
        ausf_uid = stack["pods"]["ausf"]["uid"]
        result = invoke(stack, "reset", "--agent-id", "worker1", "--scope", f"pod:{ausf_uid}")
        assert result.exit_code == 0
        stack["verifier"].attestation_cycle(session)
        result = invoke(stack, "status")
        assert result.exit_code == 0

    def test_reset_unknown_pod_fails_with_one_line_error(self, stack):
        enroll_and_cycle(stack)
        result = CliRunner().invoke(
            main,
            ["--verifier", stack["service"].url, "--token", TOKEN,
             "reset", "--agent-id", "worker1",
             "--scope", "pod:99999999-9999-4999-8999-999999999999"],
        )
        assert result.exit_code == 1
        assert result.stderr.startswith("error:")
        assert len(result.stderr.strip().splitlines()) == 1

    def test_enroll_with_missing_bundle_file(self, stack):
        result = CliRunner().invoke(
            main,
            ["--verifier", stack["service"].url, "enroll",
             "--agent-id", "worker1", "--bundle", "/no/such/bundle.yaml"],
        )
        assert result.exit_code != 0


class TestAllowlistGenerate:
    def test_from_ml_file_fixed_point(self, stack, tmp_path):
        agent = stack["sim"].nodes["worker1"].agent
        ml_path = tmp_path / "ml.txt"
        ml_path.write_text(ml.emit_ascii(agent.log))
        ausf_uid = stack["pods"]["ausf"]["uid"]
        result = invoke(
            stack, "allowlist", "generate",
            "--ml-file", str(ml_path), "--scope", f"pod:{ausf_uid}",
        )
        assert result.exit_code == 0, result.output
        listing = yaml.safe_load(result.output)
        assert listing == {
            "/usr/bin/nf-ausf": [stack["pods"]["ausf"]["manifest"]["/usr/bin/nf-ausf"]]
        }

    def test_from_live_agent_node_scope(self, stack, tmp_path):
        out = tmp_path / "node_allow.yaml"
        agent_url = stack["sim"].nodes["worker1"].agent_url
        result = invoke(
            stack, "allowlist", "generate",
            "--agent-url", agent_url, "--scope", "node", "--out", str(out),
        )
        assert result.exit_code == 0, result.output
        assert yaml.safe_load(out.read_text()) == {}  # no host manifest in this topology

    def test_requires_exactly_one_source(self, stack):
        result = CliRunner().invoke(main, ["allowlist", "generate", "--scope", "node"])
        assert result.exit_code == 1
        assert result.stderr.startswith("error:")


class TestInject:
    def test_single_scenario(self, stack):
        session = enroll_and_cycle(stack)
        result = invoke(
            stack, "inject", "--sim-url", stack["sim"].control.url,
            "--kind", "exec-unlisted", "--pod", "ausf", "--path", "/bin/busybox",
        )
        assert result.exit_code == 0, result.output
        stack["verifier"].attestation_cycle(session)
        assert (
            stack["verifier"].sessions["worker1"].trust
            .pod_states[stack["pods"]["ausf"]["uid"]].status.value
            == "untrusted"
        )

    def test_scenario_file(self, stack, tmp_path):
        scenario_path = tmp_path / "scenario.yaml"
        scenario_path.write_text(
            "- {at: 0.0, kind: exec-unlisted, pod: ausf, path: /bin/cat}\n"
            "- {at: 0.05, kind: unknown-pod, node: worker1}\n"
        )
        result = invoke(
            stack, "inject", "--sim-url", stack["sim"].control.url,
            "--scenario-file", str(scenario_path),
        )
        assert result.exit_code == 0, result.output
        assert result.output.count("injected") == 2


def test_env_var_fallbacks(stack, monkeypatch):
    enroll_and_cycle(stack)
    runner = CliRunner()
    result = runner.invoke(
        main, ["status"],
        env={
            "PODSEAL_VERIFIER": stack["service"].url,
            "PODSEAL_TOKEN": TOKEN,
            "PODSEAL_OUTPUT": "structured",
        },
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["scopes"]
