#!/usr/bin/env python3
"""Synthesize an ascii_runtime_measurements sample for parser compatibility tests.

Produces a byte-faithful imitation of /sys/kernel/security/ima/ascii_runtime_measurements
from a host booted with `ima_hash=sha256 ima_template=ima-ng`: the template-hash
column is computed over the kernel's *binary* field encoding (u32 little-endian
length prefixes, "sha256:\\0" digest field prefix, NUL-terminated path), which
differs from this project's canonical template encoding on purpose. Parsers must
accept such logs verbatim without recomputing hashes.

Run from the repo root:  python scripts/make_sample_ima_log.py > tests/data/ascii_runtime_measurements
"""

import hashlib
import struct
import sys

PATHS = [
    "/usr/lib/systemd/systemd",
    "/usr/lib/x86_64-linux-gnu/ld-linux-x86-64.so.2",
    "/usr/lib/x86_64-linux-gnu/libc.so.6",
    "/usr/lib/x86_64-linux-gnu/libm.so.6",
    "/usr/lib/systemd/libsystemd-shared-249.so",
    "/usr/lib/x86_64-linux-gnu/libmount.so.1.1.0",
    "/usr/lib/x86_64-linux-gnu/libblkid.so.1.1.0",
    "/usr/lib/x86_64-linux-gnu/libselinux.so.1",
    "/usr/lib/x86_64-linux-gnu/libpcre2-8.so.0.10.4",
    "/usr/lib/systemd/systemd-journald",
    "/usr/lib/systemd/systemd-udevd",
    "/usr/lib/x86_64-linux-gnu/libkmod.so.2.3.7",
    "/usr/bin/udevadm",
    "/usr/lib/systemd/systemd-sysctl",
    "/usr/bin/mount",
    "/usr/bin/systemd-tmpfiles",
    "/usr/lib/systemd/systemd-logind",
    "/usr/bin/dbus-daemon",
    "/usr/lib/x86_64-linux-gnu/libdbus-1.so.3.19.13",
    "/usr/sbin/cron",
    "/usr/sbin/rsyslogd",
    "/usr/lib/x86_64-linux-gnu/libz.so.1.2.11",
    "/usr/bin/bash",
    "/usr/bin/dash",
    "/etc/init.d/keyboard-setup.sh",
    "/usr/bin/setupcon",
    "/usr/bin/cat",
    "/usr/bin/ls",
    "/usr/bin/sed",
    "/usr/bin/grep",
    "/usr/bin/gawk",
    "/usr/sbin/sshd",
    "/usr/lib/x86_64-linux-gnu/libcrypto.so.3",
    "/usr/lib/x86_64-linux-gnu/libssl.so.3",
    "/usr/bin/ssh-keygen",
    "/usr/sbin/agetty",
    "/usr/bin/login",
    "/usr/lib/x86_64-linux-gnu/libpam.so.0.85.1",
    "/usr/lib/x86_64-linux-gnu/security/pam_unix.so",
    "/usr/bin/containerd",
    "/usr/sbin/runc",
    "/usr/local/bin/k3s",
    "/usr/bin/kubelet",
    "/var/lib/rancher/k3s/data/current/bin/containerd-shim-runc-v2",
    "/usr/bin/curl",
    "/usr/bin/busybox",
]


def kernel_template_hash(fields: list[bytes]) -> str:
    blob = b"".join(struct.pack("<I", len(f)) + f for f in fields)
    return hashlib.sha256(blob).hexdigest()


def main():
    lines = []
    # boot_aggregate: digest over the (synthetic) sha256 bank PCRs 0..7
    boot_digest = hashlib.sha256(b"sample-boot-aggregate-pcrs-0-7").hexdigest()
    d_field = b"sha256:\x00" + bytes.fromhex(boot_digest)
    n_field = b"boot_aggregate\x00"
    lines.append(
        f"10 {kernel_template_hash([d_field, n_field])} ima-ng sha256:{boot_digest} boot_aggregate"
    )
    for path in PATHS:
        digest = hashlib.sha256(f"sample-file-content:{path}".encode()).hexdigest()
        d_field = b"sha256:\x00" + bytes.fromhex(digest)
        n_field = path.encode() + b"\x00"
        lines.append(
            f"10 {kernel_template_hash([d_field, n_field])} ima-ng sha256:{digest} {path}"
        )
    sys.stdout.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
