import random

import pytest

from podseal import measurement_log as ml
from podseal.pod_attribution import NODE_SCOPE, PodRef
from podseal.policy import (
    ACTION_EVICT,
    ACTION_NOTIFY,
    AllowList,
    ExcludeRule,
    PolicyBundle,
    PolicyError,
    TrustMap,
    TrustStatus,
    attribute_entry,
    build_allowlist_from_log,
    compile_policy,
    derive_trust,
    evaluate_entries,
)
from podseal.trust_anchor import Digest, PcrBank

AUSF = "3b4c9f2a-1d2e-4f5a-8b6c-7d8e9f0a1b2c"
MYSQL = "44444444-1111-4111-8111-111111111111"
ONLY_USR_BIN = "^(?!/usr/bin/).*$"


def entry(path, content=b"x", cgpath=None):
    if cgpath is None:
        data = ml.TemplateData(ml.TEMPLATE_IMA_NG, Digest.of(content), path)
    else:
        data = ml.TemplateData(ml.TEMPLATE_IMA_CGN, Digest.of(content), path, cgpath)
    return ml.MeasurementEntry(10, ml.template_hash(data), data)


def pod_pair(uid, path, content=b"x"):
    return (entry(path, content, cgpath=f"/kubepods/besteffort/pod{uid}/c"), PodRef.pod(uid))


def node_pair(path, content=b"x"):
    return (entry(path, content), NODE_SCOPE)


def bundle_for(pods=None, node_allow=None, excludes=(), pod_excludes=None, **kw):
    pods = pods or {}
    return PolicyBundle(
        node_allowlist=AllowList.from_dict(node_allow or {}),
        pod_allowlists={u: AllowList.from_dict(listing) for u, listing in pods.items()},
        registered_pods=set(pods),
        exclude_rules=[ExcludeRule.from_dict(r) for r in excludes],
        pod_exclude_rules={
            u: [ExcludeRule.from_dict(r) for r in rules]
            for u, rules in (pod_excludes or {}).items()
        },
        **kw,
    )


class TestCompile:
    def test_usr_bin_regex_excludes_node_paths(self):
        policy = compile_policy(bundle_for(excludes=[{"regex": ONLY_USR_BIN}]))
        assert policy.node_excluded("/bin/cat")
        assert not policy.node_excluded("/usr/bin/curl")

    def test_keep_prefix_rule_matches_regex_behavior(self):
        policy = compile_policy(bundle_for(excludes=[{"keep_prefix": "/usr/bin"}]))
        assert policy.node_excluded("/bin/cat")
        assert policy.node_excluded("/pause")
        assert not policy.node_excluded("/usr/bin/curl")
        assert not policy.node_excluded("/usr/bin")

    def test_empty_bundle_compiles(self):
        policy = compile_policy(bundle_for())
        result = evaluate_entries(policy, [node_pair("/usr/bin/anything")])
        assert [v.reason for v in result.node_violations] == ["unknown-file"]

    def test_unbalanced_regex_is_an_error(self):
        with pytest.raises(PolicyError) as err:
            compile_policy(bundle_for(excludes=[{"regex": "([unclosed"}]))
        assert "exclude_rules[0]" in str(err.value)

    def test_pod_allowlist_for_unregistered_pod_rejected(self):
        bundle = bundle_for()
        bundle.pod_allowlists[AUSF] = AllowList.from_dict({"/usr/bin/x": [Digest.of(b"x").hex]})
        with pytest.raises(PolicyError):
            compile_policy(bundle)

    def test_pcr_selection_must_cover_ima_register(self):
        bundle = bundle_for()
        bundle.pcr_selection = 1 << 5
        with pytest.raises(PolicyError):
            compile_policy(bundle)

    def test_unknown_remediation_action_rejected(self):
        bundle = bundle_for()
        bundle.remediation_default = "reboot-the-world"
        with pytest.raises(PolicyError):
            compile_policy(bundle)

    def test_bundle_yaml_round_trip(self):
        bundle = bundle_for(
            pods={AUSF: {"/usr/bin/nf-ausf": [Digest.of(b"a").hex]}},
            node_allow={"/usr/bin/kubelet": [Digest.of(b"k").hex]},
            excludes=[{"regex": ONLY_USR_BIN}],
            pod_labels={AUSF: "ausf"},
            remediation_pods={AUSF: ACTION_EVICT},
        )
        again = PolicyBundle.from_yaml(bundle.to_yaml())
        assert again.registered_pods == bundle.registered_pods
        assert again.pod_allowlists[AUSF].entries == bundle.pod_allowlists[AUSF].entries
        assert again.pcr_selection == bundle.pcr_selection
        assert again.remediation_action(PodRef.pod(AUSF)) == ACTION_EVICT
        assert again.remediation_action(NODE_SCOPE) == ACTION_NOTIFY


class TestEvaluate:
    def test_unlisted_binaries_flag_only_their_pod(self):
        policy = compile_policy(
            bundle_for(
                pods={
                    AUSF: {"/usr/bin/nf-ausf": [Digest.of(b"ausf").hex]},
                    MYSQL: {"/usr/bin/mysqld": [Digest.of(b"mysql").hex]},
                },
                excludes=[{"regex": ONLY_USR_BIN}],
            )
        )
        pairs = [
            pod_pair(AUSF, "/usr/bin/nf-ausf", b"ausf"),
            pod_pair(MYSQL, "/usr/bin/mysqld", b"mysql"),
            pod_pair(AUSF, "/bin/cat"),
            pod_pair(AUSF, "/pause"),
            pod_pair(AUSF, "/bin/busybox"),
            pod_pair(AUSF, "/usr/bin/curl"),
        ]
        result = evaluate_entries(policy, pairs)
        assert sorted(v.path for v in result.pod_violations[AUSF]) == sorted(
            ["/bin/cat", "/pause", "/bin/busybox", "/usr/bin/curl"]
        )
        assert all(v.reason == "unknown-file" for v in result.pod_violations[AUSF])
        assert MYSQL not in result.pod_violations
        assert not result.node_violations
        assert not result.unknown_pods

    def test_allowlisted_entry_is_clean(self):
        policy = compile_policy(bundle_for(pods={AUSF: {"/usr/bin/a": [Digest.of(b"ok").hex]}}))
        result = evaluate_entries(policy, [pod_pair(AUSF, "/usr/bin/a", b"ok")])
        assert result.clean

    def test_digest_mismatch_detected(self):
        policy = compile_policy(bundle_for(pods={AUSF: {"/usr/bin/a": [Digest.of(b"ok").hex]}}))
        result = evaluate_entries(policy, [pod_pair(AUSF, "/usr/bin/a", b"evil")])
        assert [v.reason for v in result.pod_violations[AUSF]] == ["digest-mismatch"]

    def test_unregistered_pod_lands_in_unknown_pods(self):
        policy = compile_policy(bundle_for(pods={MYSQL: {}}))
        result = evaluate_entries(policy, [pod_pair(AUSF, "/usr/bin/a")])
        assert result.unknown_pods == {AUSF}

    def test_node_exclude_rules_do_not_shield_pods(self):
        policy = compile_policy(
            bundle_for(pods={AUSF: {}}, excludes=[{"regex": ONLY_USR_BIN}])
        )
        result = evaluate_entries(policy, [pod_pair(AUSF, "/bin/cat")])
        assert [v.path for v in result.pod_violations[AUSF]] == ["/bin/cat"]

    def test_per_pod_exclude_override_filters_that_pod(self):
        policy = compile_policy(
            bundle_for(
                pods={AUSF: {}, MYSQL: {}},
                pod_excludes={AUSF: [{"regex": "^/tmp/.*$"}]},
            )
        )
        result = evaluate_entries(
            policy,
            [pod_pair(AUSF, "/tmp/scratch"), pod_pair(MYSQL, "/tmp/scratch")],
        )
        assert AUSF not in result.pod_violations
        assert [v.path for v in result.pod_violations[MYSQL]] == ["/tmp/scratch"]

    def test_boot_aggregate_is_skipped(self):
        policy = compile_policy(bundle_for())
        result = evaluate_entries(policy, [node_pair("boot_aggregate")])
        assert result.clean

    def test_violations_deduplicated_with_first_index(self):
        policy = compile_policy(bundle_for(pods={AUSF: {}}))
        pairs = [pod_pair(AUSF, "/usr/bin/a", b"same"), pod_pair(AUSF, "/usr/bin/a", b"same")]
        result = evaluate_entries(policy, pairs, start_index=7)
        assert len(result.pod_violations[AUSF]) == 1
        assert result.pod_violations[AUSF][0].entry_index == 7


class TestDeriveTrust:
    def test_pod_violations_leave_node_and_siblings_trusted(self):
        policy = compile_policy(bundle_for(pods={AUSF: {}, MYSQL: {"/usr/bin/mysqld": [Digest.of(b"m").hex]}}))
        result = evaluate_entries(
            policy,
            [pod_pair(AUSF, "/bin/cat"), pod_pair(MYSQL, "/usr/bin/mysqld", b"m")],
        )
        trust = derive_trust(TrustMap.initial([AUSF, MYSQL]), result, now=100.0)
        assert trust.pod_states[AUSF].status is TrustStatus.UNTRUSTED
        assert trust.pod_states[MYSQL].status is TrustStatus.TRUSTED
        assert trust.node_state.status is TrustStatus.TRUSTED

    def test_unknown_pod_escalates_to_node(self):
        policy = compile_policy(bundle_for(pods={MYSQL: {}}))
        result = evaluate_entries(policy, [pod_pair(AUSF, "/usr/bin/a")])
        trust = derive_trust(TrustMap.initial([MYSQL]), result, now=100.0)
        assert trust.node_state.status is TrustStatus.UNTRUSTED
        assert f"unknown-pod:{AUSF}" in trust.node_state.reasons
        assert AUSF not in trust.pod_states  # no invented record

    def test_clean_first_cycle_promotes_start_to_trusted(self):
        policy = compile_policy(bundle_for(pods={AUSF: {}}))
        result = evaluate_entries(policy, [])
        trust = derive_trust(TrustMap.initial([AUSF]), result, now=100.0)
        assert trust.node_state.status is TrustStatus.TRUSTED
        assert trust.pod_states[AUSF].status is TrustStatus.TRUSTED

    def test_untrusted_is_sticky_across_clean_cycles(self):
        policy = compile_policy(bundle_for(pods={AUSF: {}}))
        dirty = evaluate_entries(policy, [pod_pair(AUSF, "/bin/cat")])
        t1 = derive_trust(TrustMap.initial([AUSF]), dirty, now=100.0)
        clean = evaluate_entries(policy, [])
        t2 = derive_trust(t1, clean, now=200.0)
        assert t2.pod_states[AUSF].status is TrustStatus.UNTRUSTED
        assert t2.pod_states[AUSF].since == t1.pod_states[AUSF].since

    def test_trusted_since_is_preserved(self):
        policy = compile_policy(bundle_for(pods={AUSF: {}}))
        t1 = derive_trust(TrustMap.initial([AUSF]), evaluate_entries(policy, []), now=100.0)
        t2 = derive_trust(t1, evaluate_entries(policy, []), now=200.0)
        assert t2.pod_states[AUSF].since == 100.0


class TestAllowlistFromLog:
    def build_log(self):
        log, bank = ml.MeasurementLog(), PcrBank()
        ml.boot_aggregate_entry(log, bank)
        cg = f"/kubepods/besteffort/pod{AUSF}/c"
        ml.append_measurement(log, bank, ml.FileEvent("/usr/bin/a", Digest.of(b"1"), cg))
        ml.append_measurement(log, bank, ml.FileEvent("/usr/bin/a", Digest.of(b"2"), cg))
        ml.append_measurement(log, bank, ml.FileEvent("/usr/bin/host", Digest.of(b"h"), "/system.slice/x.service"))
        return log

    def test_fixed_point_of_clean_log(self):
        log = self.build_log()
        allowlist = build_allowlist_from_log(log, PodRef.pod(AUSF))
        bundle = bundle_for(pods={AUSF: {}})
        bundle.pod_allowlists[AUSF] = allowlist
        policy = compile_policy(bundle)
        pairs = [(e, attribute_entry(e)) for e in log.entries if attribute_entry(e).is_pod]
        assert evaluate_entries(policy, pairs).clean

    def test_two_digests_for_one_path(self):
        allowlist = build_allowlist_from_log(self.build_log(), PodRef.pod(AUSF))
        assert len(allowlist.entries["/usr/bin/a"]) == 2

    def test_scope_filtering_and_boot_aggregate_exclusion(self):
        node_list = build_allowlist_from_log(self.build_log(), NODE_SCOPE)
        assert set(node_list.entries) == {"/usr/bin/host"}

    def test_empty_log(self):
        assert build_allowlist_from_log(ml.MeasurementLog(), NODE_SCOPE).entries == {}


class TestAllowListModel:
    def test_empty_digest_set_rejected(self):
        with pytest.raises(PolicyError):
            AllowList({"/usr/bin/a": frozenset()})

    def test_single_hex_string_accepted(self):
        al = AllowList.from_dict({"/usr/bin/a": Digest.of(b"1").hex})
        assert al.allows("/usr/bin/a", Digest.of(b"1"))


# -- randomized invariant suite (the layered-trust properties) ---------------


def random_setup(rng: random.Random):
    registered = [f"{rng.getrandbits(32):08x}-0000-4000-8000-{rng.getrandbits(48):012x}"
                  for _ in range(rng.randint(1, 4))]
    unknown = [f"{rng.getrandbits(32):08x}-0000-4000-8000-{rng.getrandbits(48):012x}"
               for _ in range(rng.randint(0, 2))]
    paths = [f"/usr/bin/app{i}" for i in range(4)] + ["/bin/cat", "/etc/conf", "/pause"]
    pods = {}
    for uid in registered:
        listing = {}
        for path in rng.sample(paths, rng.randint(0, 3)):
            listing[path] = [Digest.of(f"good:{uid}:{path}".encode()).hex]
        pods[uid] = listing
    excludes = []
    if rng.random() < 0.5:
        excludes.append({"regex": ONLY_USR_BIN})
    if rng.random() < 0.3:
        excludes.append({"keep_prefix": "/usr"})
    policy = compile_policy(bundle_for(pods=pods, excludes=excludes))

    pairs = []
    for _ in range(rng.randint(0, 25)):
        path = rng.choice(paths)
        scope_kind = rng.random()
        if scope_kind < 0.5:
            uid = rng.choice(registered)
            content = (
                f"good:{uid}:{path}".encode()
                if rng.random() < 0.5
                else f"bad:{rng.random()}".encode()
            )
            pairs.append(pod_pair(uid, path, content))
        elif scope_kind < 0.7 and unknown:
            pairs.append(pod_pair(rng.choice(unknown), path))
        else:
            pairs.append(node_pair(path, f"c:{rng.random()}".encode()))
    return policy, registered, pairs


def check_invariants(policy, registered, pairs):
    result = evaluate_entries(policy, pairs)

    # determinism
    again = evaluate_entries(policy, pairs)
    assert {u: [v.key() for v in vs] for u, vs in result.pod_violations.items()} == {
        u: [v.key() for v in vs] for u, vs in again.pod_violations.items()
    }
    assert [v.key() for v in result.node_violations] == [v.key() for v in again.node_violations]
    assert result.unknown_pods == again.unknown_pods

    # exclusion soundness where the rules apply (node scope here)
    for violation in result.node_violations:
        assert not policy.node_excluded(violation.path)

    trust = derive_trust(TrustMap.initial(registered), result, now=1.0)

    # unknown-pod escalation
    if result.unknown_pods:
        assert trust.node_state.status is TrustStatus.UNTRUSTED

    # isolation: a pod's violations only affect that pod
    for uid in registered:
        other_findings = any(
            u != uid and vs for u, vs in result.pod_violations.items() if u in registered
        )
        if uid not in result.pod_violations:
            expected = TrustStatus.TRUSTED
            assert trust.pod_states[uid].status is expected, (
                f"pod {uid} affected by others (others dirty: {other_findings})"
            )

    # sticky untrusted: clean follow-up cannot restore
    clean = evaluate_entries(policy, [])
    after = derive_trust(trust, clean, now=2.0)
    for uid in registered:
        if trust.pod_states[uid].status is TrustStatus.UNTRUSTED:
            assert after.pod_states[uid].status is TrustStatus.UNTRUSTED
    if trust.node_state.status is TrustStatus.UNTRUSTED:
        assert after.node_state.status is TrustStatus.UNTRUSTED


def test_randomized_invariants_quick():
    rng = random.Random(2024)
    for _ in range(150):
        policy, registered, pairs = random_setup(rng)
        check_invariants(policy, registered, pairs)
