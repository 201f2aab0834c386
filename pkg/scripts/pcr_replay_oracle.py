#!/usr/bin/env python3
"""Brute-force PCR-10 replay oracle.

Reads an ascii measurement log (the securityfs-style line format used by this
project) and recomputes the hash chain from scratch with nothing but hashlib:
for every line the template hash is recomputed from the template fields, checked
against the stored value, and folded into the register as
new = SHA256(old || template_hash).

This script deliberately imports nothing from the podseal package so it can act
as an independent cross-check of the library's replay path. Keep it that way.

Usage:
  pcr_replay_oracle.py [FILE]            one log, prints final register hex
  pcr_replay_oracle.py --batch [FILE]    many logs separated by blank lines,
                                         prints one result line per log

A log whose stored template hash does not recompute prints
"integrity-error:<entry-index>" instead of a register value.
"""

import argparse
import hashlib
import re
import struct
import sys

ZERO_REGISTER = b"\x00" * 32

_ESCAPE = re.compile(r"\\x(20|5c)")


def unescape_field(field):
    return _ESCAPE.sub(lambda m: " " if m.group(1) == "20" else "\\", field)


def template_fields(template_name, raw_fields, lineno):
    if template_name == "ima-ng":
        if len(raw_fields) != 2:
            raise ValueError(f"line {lineno}: ima-ng wants 2 fields, got {len(raw_fields)}")
    elif template_name == "ima-cgn":
        if len(raw_fields) != 3:
            raise ValueError(f"line {lineno}: ima-cgn wants 3 fields, got {len(raw_fields)}")
    else:
        raise ValueError(f"line {lineno}: unknown template {template_name!r}")
    digest_field = raw_fields[0]
    if not re.fullmatch(r"sha256:[0-9a-f]{64}", digest_field):
        raise ValueError(f"line {lineno}: bad digest field {digest_field!r}")
    return [digest_field] + [unescape_field(f) for f in raw_fields[1:]]


def recompute_template_hash(fields):
    blob = b"".join(struct.pack(">I", len(f.encode())) + f.encode() for f in fields)
    return hashlib.sha256(blob).digest()


def replay_log(text):
    """Return the final register hex, or 'integrity-error:<i>' on a bad entry."""
    register = ZERO_REGISTER
    index = 0
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue
        tokens = line.split(" ")
        if len(tokens) < 4:
            raise ValueError(f"line {lineno}: too few fields")
        pcr, stored_hex, template_name = tokens[0], tokens[1], tokens[2]
        if pcr != str(int(pcr)) or not 0 <= int(pcr) <= 23:
            raise ValueError(f"line {lineno}: bad pcr index {pcr!r}")
        if not re.fullmatch(r"[0-9a-f]{64}", stored_hex):
            raise ValueError(f"line {lineno}: bad template hash {stored_hex!r}")
        fields = template_fields(template_name, tokens[3:], lineno)
        recomputed = recompute_template_hash(fields)
        if recomputed != bytes.fromhex(stored_hex):
            return f"integrity-error:{index}"
        register = hashlib.sha256(register + recomputed).digest()
        index += 1
    return register.hex()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("file", nargs="?", help="log file (default stdin)")
    parser.add_argument(
        "--batch",
        action="store_true",
        help="input holds many logs separated by blank lines; one result line each",
    )
    args = parser.parse_args(argv)

    if args.file:
        with open(args.file, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = sys.stdin.read()

    if args.batch:
        for chunk in text.split("\n\n"):
            if chunk.strip() == "":
                continue
            print(replay_log(chunk))
    else:
        print(replay_log(text))
    return 0


if __name__ == "__main__":
    sys.exit(main())
