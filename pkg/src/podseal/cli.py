"""Operator command line for the attestation control plane.

Talks to the verifier, registrar, agents, and the cluster simulator over
their HTTP APIs. Connection settings come from group-level flags or the
PODSEAL_* environment variables. Status output is line-oriented and stable so
it can be scripted; --output structured emits JSON instead.

Exit codes: 0 when every queried scope is Trusted, 2 when any queried scope
is not (Untrusted, or still in Start), 1 on operational errors.
"""

from __future__ import annotations

import json
import secrets
import sys
import time

import click
import requests
import yaml

from .httpd import bearer_headers
from .measurement_log import parse_ascii
from .pod_attribution import PodRef
from .policy import build_allowlist_from_log
from .sim import TamperScenario, load_scenario_schedule


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _request(method: str, url: str, token: str | None, **kwargs):
    try:
        resp = requests.request(
            method, url, headers=bearer_headers(token), timeout=10, **kwargs
        )
    except requests.RequestException as exc:
        _fail(f"{method} {url}: {exc}")
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("error", resp.text)
        except ValueError:
            detail = resp.text
        _fail(f"{method} {url}: {resp.status_code}: {detail}")
    return resp.json()


def _parse_scope(text: str) -> PodRef:
    if text == "node":
        return PodRef.node()
    if text.startswith("pod:"):
        return PodRef.pod(text[len("pod:"):])
    raise click.BadParameter(f"scope must be 'node' or 'pod:<uid>', got {text!r}")


@click.group()
@click.option("--verifier", envvar="PODSEAL_VERIFIER", default="http://127.0.0.1:8881",
              show_default=True, help="verifier base URL")
@click.option("--registrar", envvar="PODSEAL_REGISTRAR", default="http://127.0.0.1:8880",
              show_default=True, help="registrar base URL")
@click.option("--token", envvar="PODSEAL_TOKEN", default=None, help="API bearer token")
@click.option("--output", envvar="PODSEAL_OUTPUT", default="table",
              type=click.Choice(["table", "structured"]), show_default=True)
@click.pass_context
def main(ctx, verifier, registrar, token, output):
    """Pod-granular continuous attestation operator tool."""
    ctx.obj = {
        "verifier": verifier.rstrip("/"),
        "registrar": registrar.rstrip("/"),
        "token": token,
        "output": output,
    }


@main.command()
@click.option("--agent-id", required=True)
@click.option("--bundle", "bundle_file", required=True, type=click.Path(exists=True),
              help="policy bundle YAML file")
@click.option("--interval", default=2.0, show_default=True, help="polling interval seconds")
@click.option("--agent-url", default=None, help="override the agent URL from the registrar")
@click.pass_obj
def enroll(cfg, agent_id, bundle_file, interval, agent_url):
    """Enroll an agent for continuous attestation with a policy bundle."""
    with open(bundle_file, encoding="utf-8") as fh:
        bundle_doc = yaml.safe_load(fh)
    body = {"agent_id": agent_id, "bundle": bundle_doc, "interval": interval}
    if agent_url:
        body["agent_url"] = agent_url
    result = _request("POST", f"{cfg['verifier']}/v1/enroll", cfg["token"], json=body)
    click.echo(f"enrolled agent={result['agent_id']} interval={result['interval']}")


def _scope_rows(agent_id: str, doc: dict) -> list[dict]:
    labels = doc.get("pod_labels", {})
    rows = [
        {
            "agent": agent_id,
            "scope": "node",
            "label": "-",
            "state": doc["trust"]["node"]["status"],
            "violations": [v["path"] for v in doc["trust"]["node"]["violations"]],
        }
    ]
    for uid, state in sorted(doc["trust"]["pods"].items()):
        rows.append(
            {
                "agent": agent_id,
                "scope": f"pod:{uid}",
                "label": labels.get(uid, "-"),
                "state": state["status"],
                "violations": [v["path"] for v in state["violations"]],
            }
        )
    return rows


def _render_table(rows: list[dict]):
    headers = ["AGENT", "SCOPE", "LABEL", "STATE", "VIOLATIONS"]
    table = [
        [
            r["agent"],
            r["scope"],
            r["label"],
            r["state"],
            " ".join(r["violations"]) or "-",
        ]
        for r in rows
    ]
    widths = [max(len(h), *(len(row[i]) for row in table)) if table else len(h)
              for i, h in enumerate(headers)]
    click.echo("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip())
    for row in table:
        click.echo("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())


@main.command()
@click.option("--agent-id", default=None, help="one agent (default: all enrolled)")
@click.pass_obj
def status(cfg, agent_id):
    """Show node/pod trust states and violation details."""
    if agent_id:
        doc = _request("GET", f"{cfg['verifier']}/v1/status/{agent_id}", cfg["token"])
        agents = {agent_id: doc}
    else:
        agents = _request("GET", f"{cfg['verifier']}/v1/status", cfg["token"])["agents"]

    rows = []
    for name in sorted(agents):
        rows.extend(_scope_rows(name, agents[name]))
    if cfg["output"] == "structured":
        click.echo(json.dumps({"agents": agents, "scopes": rows}, indent=2))
    else:
        _render_table(rows)
        for name in sorted(agents):
            doc = agents[name]
            click.echo(
                f"# {name}: last_outcome={doc.get('last_outcome')} "
                f"verified_count={doc.get('verified_count')}"
            )

    states = {r["state"] for r in rows}
    if states and states != {"trusted"}:
        sys.exit(2)


@main.command()
@click.option("--agent-id", required=True)
@click.option("--scope", required=True, help="'node' or 'pod:<uid>'")
@click.pass_obj
def reset(cfg, agent_id, scope):
    """Return a scope to the Start state after remediation."""
    try:
        _parse_scope(scope)
    except ValueError as exc:
        _fail(str(exc))
    _request("POST", f"{cfg['verifier']}/v1/reset", cfg["token"],
             json={"agent_id": agent_id, "scope": scope})
    click.echo(f"reset agent={agent_id} scope={scope}")


@main.group()
def allowlist():
    """Allowlist maintenance."""


@allowlist.command()
@click.option("--ml-file", type=click.Path(exists=True), default=None,
              help="ascii measurement log file")
@click.option("--agent-url", default=None, help="fetch the log from a live agent")
@click.option("--scope", required=True, help="'node' or 'pod:<uid>'")
@click.option("--out", type=click.Path(), default=None, help="write YAML here (default stdout)")
@click.pass_obj
def generate(cfg, ml_file, agent_url, scope, out):
    """Build a path->digests allowlist from a clean measurement log."""
    if (ml_file is None) == (agent_url is None):
        _fail("need exactly one of --ml-file or --agent-url")
    scope_ref = _parse_scope(scope)
    if ml_file:
        with open(ml_file, encoding="utf-8") as fh:
            text = fh.read()
    else:
        doc = _request(
            "GET", f"{agent_url.rstrip('/')}/v1/quote", cfg["token"],
            params={"nonce": secrets.token_bytes(16).hex(), "offset": "0"},
        )
        text = doc["entries"]
    try:
        log = parse_ascii(text)
    except ValueError as exc:
        _fail(f"cannot parse measurement log: {exc}")
    listing = build_allowlist_from_log(log, scope_ref).to_dict()
    rendered = yaml.safe_dump(listing, sort_keys=True)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(rendered)
        click.echo(f"wrote {len(listing)} paths to {out}")
    else:
        click.echo(rendered, nl=False)


@main.command()
@click.option("--sim-url", envvar="PODSEAL_SIM", default="http://127.0.0.1:8882",
              show_default=True, help="cluster simulator control URL")
@click.option("--scenario-file", type=click.Path(exists=True), default=None,
              help="YAML schedule: list of {at: seconds, kind: ..., ...}")
@click.option("--kind", default=None, type=click.Choice(
    ["exec-unlisted", "modify-pod-binary", "overwrite-host-binary",
     "preload-hijack", "unknown-pod"]))
@click.option("--pod", default=None)
@click.option("--node", default=None)
@click.option("--path", default=None)
@click.option("--library", default=None)
@click.pass_obj
def inject(cfg, sim_url, scenario_file, kind, pod, node, path, library):
    """Drive tamper scenarios in the cluster simulator."""
    if (scenario_file is None) == (kind is None):
        _fail("need exactly one of --scenario-file or --kind")
    if scenario_file:
        with open(scenario_file, encoding="utf-8") as fh:
            schedule = load_scenario_schedule(fh.read())
        began = time.monotonic()
        for at, scenario in schedule:
            delay = at - (time.monotonic() - began)
            if delay > 0:
                time.sleep(delay)
            _request("POST", f"{sim_url.rstrip('/')}/v1/inject", cfg["token"],
                     json=scenario.__dict__)
            click.echo(f"injected {scenario.kind} at t+{at:.1f}s")
    else:
        scenario = TamperScenario(kind=kind, pod=pod, node=node, path=path, library=library)
        _request("POST", f"{sim_url.rstrip('/')}/v1/inject", cfg["token"],
                 json=scenario.__dict__)
        click.echo(f"injected {scenario.kind}")


if __name__ == "__main__":
    main()
