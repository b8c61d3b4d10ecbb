"""
tee-fabric command line.

Exit codes: 0 success, 1 outcome mismatch / LEAK / bad signature, 2 config or
parse error. Results go to stdout as JSON; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import capacity, crypto
from .errors import ConfigError, FabricError

log = logging.getLogger("tee_fabric")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _read_key(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("{"):
        return json.loads(text)
    return {"public": text}


# ---------------------------------------------------------------------------
# run / suite
# ---------------------------------------------------------------------------


def _trace_path(out: str | None, name: str, many: bool) -> Path | None:
    if not out:
        return None
    if many:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        return d / f"{name}.jsonl"
    return Path(out)


def _run_many(jobs, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn() for fn in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda fn: fn(), jobs))


def cmd_run(args) -> int:
    from .scenario import load_scenario, run_scenario

    try:
        configs = [load_scenario(p) for p in args.scenario]
    except FabricError as exc:
        return _fail(str(exc))
    seed = args.seed
    try:
        results = _run_many([lambda c=c: run_scenario(c, seed, args.backend) for c in configs], args.jobs)
    except FabricError as exc:
        return _fail(f"scenario could not run: {exc}")
    many = len(results) > 1
    for r in results:
        path = _trace_path(args.trace_out, r.name, many)
        if path is not None:
            r.world.write_trace(path)
    docs = [r.to_doc(args.strict) for r in results]
    ok = all(d["ok"] for d in docs)
    _emit({"ok": ok, "results": docs})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_suite(args) -> int:
    from .attacks import SCENARIOS, run_attack

    names = args.only or list(SCENARIOS)
    unknown = [n for n in names if n not in SCENARIOS]
    if unknown:
        return _fail(f"unknown attack scenario(s): {', '.join(unknown)}")
    reports = _run_many([lambda n=n: run_attack(n, args.seed or 0, backend=args.backend) for n in names], args.jobs)
    many = len(reports) > 1
    docs = []
    for rep in reports:
        path = _trace_path(args.trace_out, rep.name, many)
        if path is not None:
            rep.world.write_trace(path)
        doc = rep.to_doc()
        if args.strict and rep.outcome.value == "Harmless":
            doc["ok"] = False
        doc["seconds"] = round(rep.seconds, 3)
        docs.append(doc)
        print(rep.line(), file=sys.stderr)
    ok = all(d["ok"] for d in docs)
    _emit({"ok": ok, "results": docs})
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# manifests and keys
# ---------------------------------------------------------------------------


def _load_manifest(path: str):
    from .manifest import parse_manifest

    return parse_manifest(Path(path).read_bytes())


def cmd_verify_manifest(args) -> int:
    from .manifest import verify_manifest

    try:
        m = _load_manifest(args.manifest)
        key = _read_key(args.key)
        pub = bytes.fromhex(key["public"])
    except (OSError, ValueError, KeyError, FabricError) as exc:
        return _fail(str(exc))
    ok = bool(m.signature) and verify_manifest(m, pub)
    _emit({"manifest": args.manifest, "valid": ok, "id": m.manifest_id.hex()})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sign_manifest(args) -> int:
    from .manifest import serialize_manifest, sign_manifest

    try:
        m = _load_manifest(args.manifest)
        key = _read_key(args.key)
        kp = crypto.generate_keypair(bytes.fromhex(key["private"]), "ed25519")
    except (OSError, ValueError, KeyError, FabricError) as exc:
        return _fail(str(exc))
    signed = serialize_manifest(sign_manifest(m, kp))
    if args.out:
        Path(args.out).write_bytes(signed + b"\n")
        _emit({"written": args.out, "id": sign_manifest(m, kp).manifest_id.hex()})
    else:
        sys.stdout.write(signed.decode() + "\n")
    return EXIT_OK


def cmd_keygen(args) -> int:
    try:
        seed = bytes.fromhex(args.seed_hex) if args.seed_hex else os.urandom(32)
        kp = crypto.generate_keypair(seed, "ed25519")
    except ValueError as exc:
        return _fail(str(exc))
    doc = {"scheme": "ed25519", "public": kp.public.hex(), "private": kp.private.hex()}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        _emit({"written": args.out, "public": doc["public"]})
    else:
        _emit(doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# capacity
# ---------------------------------------------------------------------------


def cmd_capacity(args) -> int:
    gib = not args.decimal
    values = {
        "enc_bw_per_core": capacity.gb(args.enc_bw, gib),
        "copy_bw_per_core": capacity.gb(args.copy_bw, gib),
        "per_stream_rate": args.stream_rate,
        "model_size": args.model_size,
        "cores": args.cores,
        "buffer": capacity.gb(args.buffer, gib),
    }
    if args.params:
        try:
            values.update(json.loads(Path(args.params).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            return _fail(f"params file: {exc}")
    try:
        p = capacity.ScCapacityParams(**values)
        overhead = capacity.transfer_overhead(args.bytes, args.block_size, args.block_latency)
    except (TypeError, ValueError) as exc:
        return _fail(str(exc))
    _emit(
        {
            "params": values,
            "convention": "GiB" if gib else "GB",
            "capacity": capacity.sc_capacity(p, args.round_streams),
            "transfer": {"bytes": args.bytes, "block_size": args.block_size, **overhead},
        }
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# attestation demo
# ---------------------------------------------------------------------------


def attest_demo(mutate_level: int | None = None, seed: int = 0) -> dict:
    """Boot a device on every path of the four-leaf tree and verify each report."""
    from .attestation import AttestedDevice, PbaEvent, Vendor, reference_tree, verify_report

    tree = reference_tree()
    vendor = Vendor("Vendor1", crypto.generate_keypair(crypto.hash_bytes(b"demo-vendor%d" % seed), "ed25519"))
    vendor.publish_tree("CPU", tree)
    fw = crypto.hash_bytes(b"demo firmware")
    vendor.publish_firmware("CPU", "1.0", fw)
    challenge = crypto.hash_bytes(b"demo challenge%d" % seed)
    rows = []
    for i, path in enumerate(tree.paths()):
        dev = AttestedDevice(
            "CPU",
            crypto.hash_bytes(b"dev%d" % i)[:16],
            vendor,
            crypto.generate_keypair(crypto.hash_bytes(b"rot%d" % i), "ed25519"),
            "1.0",
            fw,
            tree=tree,
            declared_path=path,
        )
        events = tree.events_for(path)
        if mutate_level is not None:
            ev = events[mutate_level]
            events[mutate_level] = PbaEvent(ev.property_name, crypto.hash_bytes(b"mutated" + ev.outcome_value))
        dev.measured_boot(events)
        verdict = verify_report(dev.generate_report(challenge), None, vendor.whitelist, vendor.revocation, challenge)
        rows.append(
            {
                "path": "/".join(path),
                "leaf": tree.leaf(path).hex(),
                "pcr23": dev.pcr[23].hex(),
                "accepted": verdict.accepted,
                "reason": verdict.reason.value if verdict.reason else None,
            }
        )
    return {"leaves": rows, "distinct": len({r["leaf"] for r in rows}), "mutated_level": mutate_level}


def cmd_attest_demo(args) -> int:
    from .attestation import reference_tree

    levels = len(reference_tree().levels)
    if args.mutate is not None and not 0 <= args.mutate < levels:
        return _fail(f"--mutate must be in [0, {levels})")
    doc = attest_demo(args.mutate, args.seed)
    _emit(doc)
    if args.mutate is None:
        return EXIT_OK if all(r["accepted"] for r in doc["leaves"]) else EXIT_FAIL
    return EXIT_OK if not any(r["accepted"] for r in doc["leaves"]) else EXIT_FAIL


# ---------------------------------------------------------------------------
# trace inspection and fuzzing
# ---------------------------------------------------------------------------


def cmd_trace(args) -> int:
    try:
        lines = Path(args.trace).read_text(encoding="utf-8").splitlines()
        events = [json.loads(line) for line in lines if line.strip()]
    except (OSError, ValueError) as exc:
        return _fail(f"trace {args.trace}: {exc}")
    if args.event:
        for ev in events:
            if ev.get("event") == args.event:
                sys.stdout.write(json.dumps(ev, sort_keys=True) + "\n")
        return EXIT_OK
    counts: dict[str, int] = {}
    for ev in events:
        counts[ev.get("event", "?")] = counts.get(ev.get("event", "?"), 0) + 1
    _emit(
        {
            "events": len(events),
            "by_event": dict(sorted(counts.items())),
            "last": events[-1]["event"] if events else None,
            "violations": [ev for ev in events if ev.get("event") == "violation"],
            "rejected": counts.get("rejected", 0),
        }
    )
    return EXIT_OK


def cmd_fuzz(args) -> int:
    from .fuzz import fuzz

    report = fuzz(args.worlds, args.seed)
    _emit(report)
    return EXIT_OK if not report["leaks"] else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tee-fabric", description="Distributed TEE fabric simulator")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def runner_flags(p):
        p.add_argument("--seed", type=int, default=None, help="override the seed in the scenario file")
        p.add_argument("--trace-out", help="JSONL trace file (a directory when several scenarios run)")
        p.add_argument("--strict", action="store_true", help="treat Harmless outcomes as failures")
        p.add_argument("--jobs", type=int, default=1, help="run independent scenarios on N threads")
        p.add_argument("--backend", choices=("test", "real"), default="test", help="AEAD backend")

    p = sub.add_parser("run", help="run scenario files")
    p.add_argument("--scenario", action="append", required=True, help="scenario JSON (repeatable)")
    runner_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run the built-in attack scenarios")
    p.add_argument("only", nargs="*", help="scenario names (default: all)")
    runner_flags(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("verify-manifest", help="check a manifest signature")
    p.add_argument("manifest")
    p.add_argument("--key", required=True, help="key file from keygen, or a file holding the public key hex")
    p.set_defaults(func=cmd_verify_manifest)

    p = sub.add_parser("sign-manifest", help="sign a manifest with an ed25519 key")
    p.add_argument("manifest")
    p.add_argument("--key", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sign_manifest)

    p = sub.add_parser("keygen", help="create an ed25519 signing key")
    p.add_argument("--out")
    p.add_argument("--seed-hex", help="32-byte seed in hex for reproducible keys")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("capacity", help="SC capacity and per-block overhead")
    p.add_argument("--cores", type=int, default=1)
    p.add_argument("--enc-bw", type=float, default=2.59, help="encryption GB/s per core")
    p.add_argument("--copy-bw", type=float, default=25.0, help="copy GB/s per core")
    p.add_argument("--stream-rate", type=float, default=138.0, help="MB/s per stream")
    p.add_argument("--model-size", type=float, default=380.2, help="MB per model load")
    p.add_argument("--buffer", type=float, default=2.5, help="staging GB")
    p.add_argument("--decimal", action="store_true", help="1 GB = 1000 MB instead of 1024")
    p.add_argument("--round-streams", action="store_true", help="round the per-core stream count instead of flooring")
    p.add_argument("--params", help="JSON file with ScCapacityParams fields (MB units)")
    p.add_argument("--bytes", type=int, default=4096, help="transfer size for the overhead figure")
    p.add_argument("--block-size", type=int, default=4096)
    p.add_argument("--block-latency", type=float, default=1.47e-6, help="seconds per sealed block")
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("attest-demo", help="boot and verify every leaf of the four-leaf PBA tree")
    p.add_argument("--mutate", type=int, help="corrupt the boot event at this level")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attest_demo)

    p = sub.add_parser("trace", help="summarize or filter a JSONL trace")
    p.add_argument("trace")
    p.add_argument("--event", help="print only events with this name")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("fuzz", help="randomized adversary over many small worlds")
    p.add_argument("--worlds", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fuzz)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
