"""Command-line entry point.

Daemons:    caspaxos acceptor ... / caspaxos proposer ...
Key-value:  caspaxos get|set|cas|delete --proposer HOST:PORT ...
Benchmark:  caspaxos bench --proposer HOST:PORT --ops N
Admin:      caspaxos admin status|config-update|rescan|roster --target HOST:PORT

Every flag can also come from a JSON --config file or a CASPAXOS_<FLAG>
environment variable (flags win, then environment, then file).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from ..core import ConfigError, ConfigUpdate
from .client import ClientError, Conflict, Connection, Unavailable
from .config import load_config
from .daemon import AcceptorDaemon, ProposerDaemon


def _daemon_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--node-id")
    parser.add_argument("--listen", help="host:port")
    parser.add_argument("--storage-dir")
    parser.add_argument("--peers", help="comma-separated id=host:port pairs")
    parser.add_argument("--acceptors", help="comma-separated acceptor ids")
    parser.add_argument("--proposers", help="comma-separated proposer ids")
    parser.add_argument("--prepare-quorum", type=int)
    parser.add_argument("--accept-quorum", type=int)
    parser.add_argument("--mode", choices=("2phase", "1rtt"))
    parser.add_argument("--tick-ms", type=float)
    parser.add_argument("--no-fsync", action="store_true")
    parser.add_argument("--trace-file")


def _daemon_config(args: argparse.Namespace, role: str):
    overrides = {
        "role": role,
        "node_id": args.node_id,
        "listen": args.listen,
        "storage_dir": args.storage_dir,
        "peers": args.peers,
        "acceptors": args.acceptors,
        "proposers": args.proposers,
        "prepare_quorum": args.prepare_quorum,
        "accept_quorum": args.accept_quorum,
        "mode": args.mode,
        "tick_ms": args.tick_ms,
        "trace_file": args.trace_file,
    }
    if args.no_fsync:
        overrides["fsync"] = False
    return load_config(args.config, overrides)


def _cmd_acceptor(args) -> int:
    daemon = AcceptorDaemon(_daemon_config(args, "acceptor"))
    print(f"acceptor {daemon.config.node_id} listening on {daemon.address}", flush=True)
    daemon.serve_forever()
    return 0


def _cmd_proposer(args) -> int:
    daemon = ProposerDaemon(_daemon_config(args, "proposer"))
    print(f"proposer {daemon.config.node_id} listening on {daemon.address}", flush=True)
    daemon.serve_forever()
    return 0


def _with_retry(args, fn):
    last: Exception | None = None
    for _ in range(args.retries + 1):
        try:
            return fn()
        except Conflict as exc:
            last = exc
            time.sleep(args.retry_delay)
        except Unavailable as exc:
            last = exc
            time.sleep(args.retry_delay)
    raise last


def _cmd_get(args) -> int:
    with Connection(args.proposer) as conn:
        found = _with_retry(args, lambda: conn.get(args.key))
    if found is None:
        print("(empty)")
        return 1
    version, payload = found
    print(f"version={version} value={payload.decode(errors='replace')}")
    return 0


def _cmd_set(args) -> int:
    with Connection(args.proposer) as conn:
        version, _ = _with_retry(args, lambda: conn.set(args.key, args.value.encode()))
    print(f"ok version={version}")
    return 0


def _cmd_cas(args) -> int:
    with Connection(args.proposer) as conn:
        matched, after = _with_retry(
            args, lambda: conn.cas(args.key, args.expected_version, args.value.encode())
        )
    if matched:
        print(f"ok version={after[0]}")
        return 0
    current = "empty" if after is None else f"version={after[0]}"
    print(f"version mismatch, value unchanged ({current})")
    return 1


def _cmd_delete(args) -> int:
    with Connection(args.proposer) as conn:
        _with_retry(args, lambda: conn.delete(args.key))
    print("deleted")
    return 0


def _percentile(sorted_samples: list[float], q: float) -> float:
    if not sorted_samples:
        return 0.0
    idx = min(len(sorted_samples) - 1, int(q * len(sorted_samples)))
    return sorted_samples[idx]


def _cmd_bench(args) -> int:
    latencies: list[float] = []
    with Connection(args.proposer) as conn:
        before = dict(conn.status().counters)
        current = conn.get(args.key)
        for i in range(args.ops):
            started = time.perf_counter()
            if current is None:
                current = conn.init(args.key, b"0")
            else:
                _, current = conn.cas(args.key, current[0], str(i).encode())
            latencies.append((time.perf_counter() - started) * 1000)
        after = dict(conn.status().counters)
    latencies.sort()
    frames_sent = {
        name: after.get(name, 0) - before.get(name, 0)
        for name in ("prepare_sent", "accept_sent", "rounds_ok")
    }
    print(f"ops={args.ops}")
    print(
        "latency ms: "
        f"p50={_percentile(latencies, 0.50):.2f} "
        f"p90={_percentile(latencies, 0.90):.2f} "
        f"p99={_percentile(latencies, 0.99):.2f} "
        f"max={latencies[-1]:.2f}"
    )
    print(f"frames: {json.dumps(frames_sent)}")
    return 0


def _cmd_admin(args) -> int:
    with Connection(args.target) as conn:
        if args.admin_cmd == "status":
            status = conn.status()
            print(f"registers={status.register_count}")
            if status.min_ages:
                print("min_ages=" + json.dumps(dict(status.min_ages)))
            print("counters=" + json.dumps(dict(status.counters)))
        elif args.admin_cmd == "config-update":
            update = ConfigUpdate(
                tuple(args.acceptors.split(",")) if args.acceptors else None,
                tuple(args.prepare_targets.split(",")) if args.prepare_targets else None,
                tuple(args.accept_targets.split(",")) if args.accept_targets else None,
                args.prepare_quorum,
                args.accept_quorum,
            )
            conn.config_update(update)
            print("ok")
        elif args.admin_cmd == "rescan":
            report = conn.rescan(tuple(args.keys))
            print(f"record_moves={report.record_moves} unfinished={list(report.unfinished)}")
        elif args.admin_cmd == "roster":
            conn.update_roster(tuple(args.proposers.split(",")))
            print("ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caspaxos",
        description="replicated compare-and-set register store",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("acceptor", help="run an acceptor daemon")
    _daemon_flags(p)
    p.set_defaults(fn=_cmd_acceptor)

    p = sub.add_parser("proposer", help="run a proposer daemon")
    _daemon_flags(p)
    p.set_defaults(fn=_cmd_proposer)

    def client_flags(p):
        p.add_argument("--proposer", required=True, help="proposer host:port")
        p.add_argument("--retries", type=int, default=8)
        p.add_argument("--retry-delay", type=float, default=0.05)

    p = sub.add_parser("get", help="read a key")
    client_flags(p)
    p.add_argument("key")
    p.set_defaults(fn=_cmd_get)

    p = sub.add_parser("set", help="write a key unconditionally")
    client_flags(p)
    p.add_argument("key")
    p.add_argument("value")
    p.set_defaults(fn=_cmd_set)

    p = sub.add_parser("cas", help="write a key if the version matches")
    client_flags(p)
    p.add_argument("key")
    p.add_argument("value")
    p.add_argument("--expected-version", type=int, required=True)
    p.set_defaults(fn=_cmd_cas)

    p = sub.add_parser("delete", help="delete a key")
    client_flags(p)
    p.add_argument("key")
    p.set_defaults(fn=_cmd_delete)

    p = sub.add_parser("bench", help="read-modify-write loop with latency histogram")
    client_flags(p)
    p.add_argument("--ops", type=int, default=100)
    p.add_argument("--key", default="bench")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("admin", help="cluster administration")
    p.add_argument("admin_cmd", choices=("status", "config-update", "rescan", "roster"))
    p.add_argument("--target", required=True, help="daemon host:port")
    p.add_argument("--acceptors")
    p.add_argument("--prepare-targets")
    p.add_argument("--accept-targets")
    p.add_argument("--prepare-quorum", type=int)
    p.add_argument("--accept-quorum", type=int)
    p.add_argument("--proposers")
    p.add_argument("--keys", nargs="*", default=())
    p.set_defaults(fn=_cmd_admin)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ClientError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
