"""Operator command line: serve, dataset export, training, evaluation,
simulation and benchmarking.

Every subcommand is deterministic for a fixed seed and prints machine
parseable output.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import detector, ext4, fixtures, haltctl, metrics, nbd, workloads
from .errors import DiskmonError

log = logging.getLogger("diskmon")


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 on usage errors instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _read_config(path: str) -> dict[str, str]:
    """key = value lines; '#' starts a comment; keys match long option names."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill in options still at their defaults from --config; flags win."""
    if not getattr(args, "config", None):
        return
    values = _read_config(args.config)
    for action in parser._actions:
        dest = action.dest
        if dest in ("help", "config") or dest not in values:
            continue
        if getattr(args, dest) != action.default:
            continue  # explicitly set on the command line
        raw = values[dest]
        if action.type is not None:
            converted = action.type(raw)
        elif isinstance(action.default, bool):
            converted = raw.lower() in ("1", "true", "yes")
        elif isinstance(action.default, int):
            converted = int(raw)
        elif isinstance(action.default, float):
            converted = float(raw)
        else:
            converted = raw
        setattr(args, dest, converted)


def _window_config(parser, args) -> metrics.WindowConfig:
    try:
        return metrics.WindowConfig(args.window, args.stride)
    except ValueError as exc:
        parser.error(str(exc))


def _load_image(path: str) -> bytearray:
    with open(path, "rb") as fh:
        return bytearray(fh.read())


def _manifest_from_catalog(catalog: ext4.FilesystemCatalog) -> fixtures.FixtureManifest:
    """Ground truth reconstructed from a parsed image, for trace generation
    against images that were not built by the fixture generator."""
    sb = catalog.superblock
    files = [
        fixtures.ManifestFile(
            inode_number=n,
            size=catalog.inodes[n].size_bytes,
            extents=list(catalog.inodes[n].extents),
            content_kind="text",
            content_seed=n,
        )
        for n in catalog.file_inodes()
    ]
    return fixtures.FixtureManifest(
        spec=fixtures.FixtureSpec(device_size=sb.blocks_count * sb.block_size,
                                  block_size=sb.block_size),
        block_size=sb.block_size,
        blocks_count=sb.blocks_count,
        group_count=sb.group_count,
        inodes_count=sb.inodes_count,
        root_dir_block=0,
        files=files,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_make_image(parser, args) -> int:
    spec = fixtures.FixtureSpec(
        device_size=args.size,
        block_size=args.block_size,
        files=tuple(
            fixtures.FileSpec(
                size=args.file_size + (i % 5) * args.block_size,
                content_seed=args.seed * 1000 + i,
                fragments=1 + i % 3,
                content_kind="text" if i % 4 else "random",
            )
            for i in range(args.files)
        ),
        seed=args.seed,
    )
    image, manifest = fixtures.build_fixture_image(spec)
    with open(args.out, "wb") as fh:
        fh.write(image)
    print(f"image {args.out} bytes {len(image)} files {len(manifest.files)} "
          f"groups {manifest.group_count}")
    return 0


def cmd_serve(parser, args) -> int:
    if args.mode == "deploy" and not args.model:
        parser.error("--mode deploy requires --model")
    if args.mode == "test" and not args.out and not args.profile:
        parser.error("--mode test requires --out (or --profile with --out)")
    if args.profile and args.seed is None:
        parser.error("--profile requires --seed for a deterministic run")

    image = _load_image(args.image)
    backend = nbd.MemoryBackend(image)
    catalog = ext4.load_catalog(backend)
    model = detector.load_model(args.model) if args.model else None
    window = _window_config(parser, args)
    config = nbd.PipelineConfig(
        mode=args.mode,
        window=window,
        model=model,
        policy=haltctl.HaltPolicy(args.buffer, args.votes),
        compute_entropy=not args.no_entropy,
        halt_reads=args.halt_reads,
    )
    pipeline = nbd.MonitorPipeline(catalog, config)

    host, _, port = args.listen.partition(":")
    server = nbd.NbdServer(backend, pipeline, export_name=args.export,
                           host=host or "127.0.0.1", port=int(port or 0))
    server.start()
    log.info("listening on %s:%d", *server.address)

    if args.profile:
        manifest = _manifest_from_catalog(catalog)
        trace = workloads.generate_trace(image, manifest, args.profile,
                                         seed=args.seed, repeats=args.repeats)
        client = nbd.NbdClient(*server.address)
        client.negotiate(args.export)
        refused = 0
        for op in trace:
            pipeline.set_label(op.label, op.strain_id)
            if op.op == "read":
                client.read(op.offset, op.length)
            elif client.write(op.offset, op.payload) == nbd.EPERM:
                refused += 1
        client.disconnect()
        server.join()
        log.info("local client done, %d writes refused", refused)
    else:
        print(f"listening {server.address[0]}:{server.address[1]}", flush=True)
        server.join(timeout=args.session_timeout)

    if args.out:
        metrics.write_action_log(args.out, pipeline.records)
        print(f"actions {len(pipeline.records)} log {args.out}")
    if args.mode == "deploy":
        print(pipeline.stats().summary())
    return 0


def cmd_export_dataset(parser, args) -> int:
    window = _window_config(parser, args)
    if args.feature_set == "hardware_only":
        names = list(metrics.FS_FEATURES)
    else:
        names = list(metrics.FEATURES)
    all_windows: list[metrics.WindowVector] = []
    per_file = []
    for path in args.logs:
        records = metrics.read_action_log(path)
        ws = metrics.stream_windows(records, window)
        per_file.append((path, len(records), len(ws)))
        all_windows.extend(ws)
    metrics.write_window_csv(args.out, all_windows, feature_names=names)
    for path, n, w in per_file:
        print(f"{path} actions {n} windows {w}")
    print(f"total windows {len(all_windows)} features {len(names)} "
          f"out {args.out}")
    return 0


def _seeded_split(n: int, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cut = int(n * fraction)
    return order[:cut], order[cut:]


def cmd_train(parser, args) -> int:
    names, X, y, _strains = metrics.read_window_csv(args.dataset)
    train_idx, test_idx = _seeded_split(len(X), args.split, args.seed)
    params = detector.TrainParams(
        n_estimators=args.n_estimators,
        learning_rate=args.learning_rate,
        max_depth=args.max_depth,
        min_samples_leaf=args.min_samples_leaf,
    )
    feature_set = "hardware_only" if list(names) == list(metrics.FS_FEATURES) \
        else "full"
    model = detector.train_cart(
        X[train_idx], y[train_idx], names, params,
        feature_set=feature_set,
        training_window=(args.window, args.stride),
    )
    detector.save_model(model, args.out)
    report = detector.evaluate(model, X[train_idx], y[train_idx])
    print(f"train accuracy {report.accuracy:.4f} samples {len(train_idx)}")
    if len(test_idx):
        held = detector.evaluate(model, X[test_idx], y[test_idx])
        print(f"test accuracy {held.accuracy:.4f} samples {len(test_idx)}")
    print(f"model {args.out} trees {len(model.trees)}")
    return 0


def cmd_evaluate(parser, args) -> int:
    model = detector.load_model(args.model)
    names, X, y, strains = metrics.read_window_csv(args.dataset)
    model.check_features(names)
    if args.holdout:
        _, test_idx = _seeded_split(len(X), args.split, args.seed)
        X, y = X[test_idx], y[test_idx]
        strains = [strains[i] for i in test_idx]
    report = detector.evaluate(model, X, y, strain_ids=strains)
    print(report.summary())
    importance = detector.feature_importance(model)
    for name, count in importance[: args.top_features]:
        print(f"importance {name} {count}")
    return 0


def cmd_simulate(parser, args) -> int:
    if args.mode == "deploy" and not args.model:
        parser.error("--mode deploy requires --model")
    window = _window_config(parser, args)
    model = detector.load_model(args.model) if args.model else None
    result = workloads.run_scenario(
        args.profile,
        seed=args.seed,
        repeats=args.repeats,
        mode=args.mode,
        model=model,
        window=window,
        policy=haltctl.HaltPolicy(args.buffer, args.votes),
    )
    if args.out_actions:
        metrics.write_action_log(args.out_actions, result.records)
    if args.out_windows:
        metrics.write_window_csv(args.out_windows, result.windows(window))
    print(f"profile {result.profile} actions {len(result.records)} "
          f"refused {result.writes_refused}")
    print(result.stats().summary())
    return 0


def cmd_bench(parser, args) -> int:
    image = _load_image(args.image)
    model = detector.load_model(args.model) if args.model else None
    window = _window_config(parser, args)
    rates = nbd.bench_throughput(
        image, args.pattern, args.total_bytes, args.request_size,
        model=model, config=window,
    )
    print("mode,mb_per_s")
    for mode in ("raw", "logging", "logging_inference"):
        print(f"{mode},{rates[mode]:.2f}")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def _add_window_flags(p, window=20, stride=20):
    p.add_argument("--window", type=int, default=window,
                   help="actions per classification window")
    p.add_argument("--stride", type=int, default=stride,
                   help="actions between consecutive windows")


def _add_policy_flags(p):
    p.add_argument("--buffer", type=int, default=5,
                   help="rolling decision buffer size")
    p.add_argument("--votes", type=int, default=4,
                   help="malicious votes in the buffer that trigger a halt")


def build_parser() -> _Parser:
    parser = _Parser(prog="diskmon", description=__doc__)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("make-image", help="build a deterministic test image")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32 << 20)
    p.add_argument("--block-size", type=int, default=4096)
    p.add_argument("--files", type=int, default=12)
    p.add_argument("--file-size", type=int, default=16384)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_make_image, subparser=p)

    p = sub.add_parser("serve", help="serve an image over NBD with monitoring")
    p.add_argument("--image", required=True)
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port")
    p.add_argument("--export", default="disk")
    p.add_argument("--mode", choices=("test", "deploy"), default="test")
    p.add_argument("--model", help="model file, required for deploy mode")
    p.add_argument("--out", help="action log CSV (test mode)")
    p.add_argument("--profile", choices=workloads.PROFILES,
                   help="drive a local synthetic client instead of waiting")
    p.add_argument("--seed", type=int, help="trace seed for --profile")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--halt-reads", action="store_true",
                   help="refuse reads too once halted")
    p.add_argument("--no-entropy", action="store_true",
                   help="skip per-write entropy deltas")
    p.add_argument("--session-timeout", type=float, default=300.0)
    _add_window_flags(p)
    _add_policy_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_serve, subparser=p)

    p = sub.add_parser("export-dataset",
                       help="aggregate action logs into window CSVs")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feature-set", choices=("full", "hardware_only"),
                   default="full")
    _add_window_flags(p, window=100, stride=20)
    p.add_argument("--config")
    p.set_defaults(func=cmd_export_dataset, subparser=p)

    p = sub.add_parser("train", help="fit a boosted-tree model on a window CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--n-estimators", type=int, default=60)
    p.add_argument("--learning-rate", type=float, default=0.3)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--min-samples-leaf", type=int, default=1)
    _add_window_flags(p, window=100, stride=20)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("evaluate", help="score a model against a window CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--holdout", action="store_true",
                   help="evaluate only the seeded held-out split")
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-features", type=int, default=10)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate, subparser=p)

    p = sub.add_parser("simulate", help="run one synthetic workload scenario")
    p.add_argument("--profile", choices=workloads.PROFILES, required=True)
    p.add_argument("--seed", type=int, required=True,
                   help="required: scenarios must be reproducible")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--mode", choices=("test", "deploy"), default="test")
    p.add_argument("--model")
    p.add_argument("--out-actions")
    p.add_argument("--out-windows")
    _add_window_flags(p, window=2, stride=2)
    _add_policy_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate, subparser=p)

    p = sub.add_parser("bench", help="throughput with and without monitoring")
    p.add_argument("--image", required=True)
    p.add_argument("--pattern", choices=("read", "write"), default="write")
    p.add_argument("--total-bytes", type=int, default=8 << 20)
    p.add_argument("--request-size", type=int, default=65536)
    p.add_argument("--model")
    _add_window_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_bench, subparser=p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _apply_config(args, args.subparser)
        return args.func(args.subparser, args)
    except SystemExit:
        raise
    except (DiskmonError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
