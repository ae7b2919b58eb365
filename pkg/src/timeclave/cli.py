"""``timeclave`` command line.

Exit codes: 0 success, 1 domain or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import bench, trace
from .errors import InsufficientSamples, TimeclaveError
from .roram import RoOram, RoOramConfig
from .service import Client, load_config, load_key, serve, write_key
from .tsengine import VARIANTS, parse_agg, read_csv_points

DEFAULT_CONFIG = """\
# timeclave service settings; TIMECLAVE_<KEY> environment variables override these
listen_addr = 127.0.0.1:7700
key_file = {key_file}
intervals = 10s,60s
retention = 24h
Z = 4
B = 64
R = 32
seed = 1
variant = roram
"""


def _err(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def cmd_init(args) -> int:
    cfg_path = Path(args.config)
    key_path = Path(args.key_file) if args.key_file else cfg_path.with_suffix(".key")
    for p in (cfg_path, key_path):
        if p.exists() and not args.force:
            return _err(f"{p} exists (use --force to overwrite)")
    write_key(key_path)
    cfg_path.write_text(DEFAULT_CONFIG.format(key_file=key_path))
    print(f"wrote {cfg_path} and {key_path}")
    return 0


def cmd_serve(args) -> int:
    cfg = load_config(args.config)
    if args.variant:
        cfg.variant = args.variant
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    serve(cfg)
    return 0


def _client(args) -> Client:
    cfg = load_config(args.config)
    if args.addr:
        cfg.listen_addr = args.addr
    host, port = cfg.host_port
    return Client(host, port, load_key(args.key_file or cfg.key_file))


def cmd_ingest(args) -> int:
    points = list(read_csv_points(args.file))
    with _client(args) as c:
        n = c.ingest(points) if points else 0
    print(f"ingested {n} points")
    return 0


def cmd_query(args) -> int:
    with _client(args) as c:
        value = c.query(args.f, args.t_a, args.t_b)
    print(repr(value))
    return 0


def cmd_bench(args) -> int:
    fams = [f.strip() for f in args.family.split(",") if f.strip()]
    for f in fams:
        if f not in bench.FAMILIES:
            print(f"error: unknown family {f!r}; choose from {','.join(bench.FAMILIES)}",
                  file=sys.stderr)
            return 2
    progress = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    rows = bench.run_bench(fams, quick=args.quick, workers=args.workers, seed=args.seed,
                           progress=progress)
    if args.out == "-":
        bench.write_csv(rows, sys.stdout)
    else:
        with open(args.out, "w", newline="") as fh:
            bench.write_csv(rows, fh)
        print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_trace_check(args) -> int:
    run = trace.load_run(args.file)
    ok = True
    bad = trace.distinct_path_violations(run)
    print(f"distinct paths: {'pass' if bad == 0 else 'FAIL'} ({bad} repeats)")
    ok &= bad == 0
    try:
        passed, p = trace.check_uniformity([run], alpha=args.alpha, min_samples=args.min_samples)
        print(f"uniformity: {'pass' if passed else 'FAIL'} (p={p:.4g}, alpha={args.alpha})")
        ok &= passed
    except InsufficientSamples as exc:
        print(f"uniformity: skipped ({exc})")
    return 0 if ok else 1


def cmd_trace_record(args) -> int:
    """Record a RoORAM trace for a synthetic read workload."""
    rec = trace.TraceRecorder(debug_labels=args.debug_labels)
    oram = RoOram(RoOramConfig(args.n, args.z, 64, args.r, args.seed), trace=rec)
    rng = np.random.default_rng(args.seed)
    for i in range(args.n):
        oram.write(i, i.to_bytes(8, "little"))
    rec.clear()
    ids = np.zeros(args.reads, dtype=np.int64) if args.hot else rng.integers(0, args.n, args.reads)
    for bid in ids.tolist():
        oram.read(bid)
    rec.save(args.out, oram.height)
    print(f"wrote {len(rec.events)} events to {args.out}")
    return 0


def _agg_arg(text: str) -> int:
    try:
        return int(parse_agg(text))
    except TimeclaveError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="timeclave", description="Oblivious in-memory time-series store")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="write a default config file and a fresh key")
    s.add_argument("--config", default="timeclave.conf")
    s.add_argument("--key-file")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("serve", help="run the encrypted query service")
    s.add_argument("--config", default="timeclave.conf")
    s.add_argument("--variant", choices=VARIANTS, help="overrides the config")
    s.set_defaults(func=cmd_serve)

    def client_opts(sp):
        sp.add_argument("--config", default=None)
        sp.add_argument("--addr", help="host:port, overrides the config")
        sp.add_argument("--key-file", help="overrides the config")

    s = sub.add_parser("ingest", help="send ts_ms,value CSV records to the service")
    s.add_argument("file")
    client_opts(s)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("query", help="run an aggregate query and print the result")
    s.add_argument("f", type=_agg_arg, help="count|sum|sum_sq|min|max|mean|variance|stdv or 0-7")
    s.add_argument("t_a", type=int)
    s.add_argument("t_b", type=int)
    client_opts(s)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("bench", help="run benchmark families and write CSV")
    s.add_argument("--family", default=",".join(bench.FAMILIES))
    s.add_argument("--out", default="-")
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--quick", action="store_true", help="smaller sizes and fewer repetitions")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("trace-check", help="verify a recorded access trace")
    s.add_argument("file")
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--min-samples", type=int, default=10_000)
    s.set_defaults(func=cmd_trace_check)

    s = sub.add_parser("trace-record", help="record a RoORAM read trace")
    s.add_argument("out")
    s.add_argument("--n", type=int, default=1024)
    s.add_argument("--z", type=int, default=4)
    s.add_argument("--r", type=int, default=32)
    s.add_argument("--reads", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hot", action="store_true", help="read block 0 every time")
    s.add_argument("--debug-labels", action="store_true")
    s.set_defaults(func=cmd_trace_record)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TimeclaveError as exc:
        return _err(str(exc))
    except (OSError, ConnectionError) as exc:
        return _err(str(exc))


if __name__ == "__main__":
    sys.exit(main())
