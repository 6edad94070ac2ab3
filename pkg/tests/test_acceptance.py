"""Acceptance gate: ten end-to-end criteria, one pass/fail line each.

Each test prints a single ``A<n> PASS|FAIL`` line to the real stdout so the
gate is readable even under output capture.
"""

import math
import shutil
import struct
import sys
import time
from collections import Counter

import numpy as np
import pytest

from diskmon import detector, ext4, fixtures, metrics, nbd, workloads


def verdict(tag: str, ok: bool, detail: str) -> None:
    line = f"{tag} {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# Shared corpora
# ---------------------------------------------------------------------------

def randomized_spec(seed: int) -> fixtures.FixtureSpec:
    rng = np.random.default_rng(seed)
    device_mib = int(rng.choice([16, 24, 32, 48, 64, 96, 128]))
    n_files = int(rng.integers(0, 201))
    kinds = ["text", "zeros", "random"]
    files = tuple(
        fixtures.FileSpec(
            size=int(rng.integers(0, 65536)),
            content_seed=int(rng.integers(1 << 30)),
            fragments=int(rng.integers(1, 7)),
            content_kind=kinds[int(rng.integers(0, 3))],
        )
        for _ in range(n_files)
    )
    return fixtures.FixtureSpec(device_size=device_mib << 20, files=files,
                                seed=seed)


# File sizes straddle the 64 KiB request size so chunked reads appear in
# benign and malicious traffic alike.
CORPUS_SPEC = fixtures.FixtureSpec(
    device_size=96 << 20,
    files=tuple(
        fixtures.FileSpec(
            size=[8192, 24576, 65536, 131072, 262144][i % 5],
            content_seed=300 + i,
            fragments=1 + i % 3,
            content_kind=["text", "text", "random", "text", "zeros"][i % 5],
        )
        for i in range(15)
    ),
    seed=9,
)

BENIGN_PROFILES = ["benign-read", "benign-copy", "benign-mixed"]
MALICIOUS_PROFILES = ["encrypt-full", "encrypt-partial", "encrypt-intermittent"]

# 400 large files so a prompt halt damages well under 0.5% of them.
HALT_SPEC = fixtures.FixtureSpec(
    device_size=256 << 20,
    files=tuple(
        fixtures.FileSpec(size=256 * 1024, content_seed=i, content_kind="zeros")
        for i in range(400)
    ),
)


@pytest.fixture(scope="module")
def corpus_runs():
    """10 benign and 10 malicious seeded runs over the shared fixture."""
    runs = []
    for i in range(10):
        runs.append(workloads.run_scenario(
            BENIGN_PROFILES[i % 3], spec=CORPUS_SPEC, seed=100 + i, repeats=4
        ))
    for i in range(10):
        runs.append(workloads.run_scenario(
            MALICIOUS_PROFILES[i % 3], spec=CORPUS_SPEC, seed=200 + i,
            repeats=4
        ))
    return runs


def _windowed(runs, config):
    ws = []
    for r in runs:
        ws.extend(r.windows(config))
    X = np.array([w.values for w in ws])
    y = np.array([1 if w.label == "malicious" else 0 for w in ws])
    return X, y


def _split(n, seed=0, fraction=0.8):
    order = np.random.default_rng(seed).permutation(n)
    cut = int(n * fraction)
    return order[:cut], order[cut:]


@pytest.fixture(scope="module")
def a5_data(corpus_runs):
    X, y = _windowed(corpus_runs, metrics.WindowConfig(100, 20))
    train, test = _split(len(X))
    model = detector.train_cart(X[train], y[train], list(metrics.FEATURES),
                                training_window=(100, 20))
    return X, y, train, test, model


@pytest.fixture(scope="module")
def deploy_model(corpus_runs):
    """The corpus model retrained at the deployment window of 2/2."""
    X, y = _windowed(corpus_runs, metrics.WindowConfig(2, 2))
    return detector.train_cart(X, y, list(metrics.FEATURES),
                               training_window=(2, 2))


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------

def test_a1_ext4_round_trip():
    start = time.monotonic()
    checked = 0
    for seed in range(1, 21):
        spec = randomized_spec(seed)
        image, manifest = fixtures.build_fixture_image(spec)
        catalog = ext4.load_catalog(image)
        assert catalog.file_inodes() == [f.inode_number for f in manifest.files]
        for f in manifest.files:
            rec = catalog.inodes[f.inode_number]
            assert rec.size_bytes == f.size
            assert rec.extents == f.extents
        checked += len(manifest.files)
    elapsed = time.monotonic() - start
    verdict("A1", elapsed < 60.0,
            f"ext4 round-trip: 20 fixtures, {checked} files reproduced "
            f"exactly in {elapsed:.1f}s (< 60s)")


def test_a2_offset_tiling():
    mismatches = 0
    queries = 0
    for seed in range(1, 21):
        spec = randomized_spec(seed)
        image, manifest = fixtures.build_fixture_image(spec)
        catalog = ext4.load_catalog(image)
        sb = catalog.superblock
        cap = sb.blocks_count * sb.block_size
        rng = np.random.default_rng(1000 + seed)
        for _ in range(500):
            offset = int(rng.integers(0, cap - 1))
            length = min(int(rng.integers(1, 65536)), cap - offset)
            spans = ext4.classify_offset(catalog, offset, length)
            queries += 1
            if (spans[0].start != offset or spans[-1].end != offset + length
                    or any(a.end != b.start for a, b in zip(spans, spans[1:]))
                    or sum(s.length for s in spans) != length):
                mismatches += 1
        # Targeted ground-truth probes.
        probes = [
            (ext4.SUPERBLOCK_OFFSET, ext4.RegionKind.SUPERBLOCK, None),
            ((sb.first_data_block + 1) * sb.block_size, ext4.RegionKind.GDT,
             None),
            (catalog.descriptors[0].inode_table_block * sb.block_size,
             ext4.RegionKind.INODE_TABLE, None),
        ]
        for f in manifest.files:
            if f.extents:
                probes.append((f.extents[0].physical_start * sb.block_size,
                               ext4.RegionKind.DATA, f.inode_number))
        for offset, kind, owner in probes:
            span = ext4.classify_offset(catalog, offset, 512)[0]
            queries += 1
            if span.kind is not kind or (owner and span.owner != owner):
                mismatches += 1
    verdict("A2", mismatches == 0,
            f"offset tiling: {queries} queries over 20 fixtures, "
            f"{mismatches} mismatches (required 0)")


def test_a3_entropy():
    rng = np.random.default_rng(31)
    zeros_ok = metrics.compute_entropy(bytes(4096)) == 0.0
    uniform_ok = metrics.compute_entropy(bytes(range(256)) * 256) == 8.0
    big = rng.integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    random_ok = metrics.compute_entropy(big) >= 7.98
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 2048))
        a = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        b = rng.integers(0, int(rng.integers(2, 256)), n,
                         dtype=np.uint8).tobytes()
        worst = max(worst, abs(metrics.compute_delta_entropy(a, b)
                               + metrics.compute_delta_entropy(b, a)))
    anti_ok = worst <= 1e-12
    ok = zeros_ok and uniform_ok and random_ok and anti_ok
    verdict("A3", ok,
            f"entropy: zeros=0 {zeros_ok}, uniform=8 {uniform_ok}, "
            f"1MiB random >= 7.98 {random_ok}, antisymmetry worst "
            f"{worst:.2e} <= 1e-12")


def test_a4_window_arithmetic():
    def brute_force_starts(n, w, s):
        return [i for i in range(0, n, s) if i + w <= n]

    # Full arithmetic grid.
    count_errors = 0
    for n in range(0, 201):
        for w in range(1, 51):
            for s in range(1, w + 1):
                cfg = metrics.WindowConfig(w, s)
                if metrics.window_count(n, cfg) != len(
                    brute_force_starts(n, w, s)
                ):
                    count_errors += 1

    # Stream enumeration against the oracle at several corpus lengths.
    stream_errors = 0
    for n in (0, 1, 50, 125, 200):
        records = [
            metrics.ActionRecord(
                op="read", offset=i, length=512,
                nbd_snapshot=metrics.NbdCounters(),
                nbd_delta={k: 0 for k in metrics.NBD_FEATURES},
            )
            for i in range(n)
        ]
        for w in (1, 2, 3, 5, 8, 13, 21, 34, 50):
            for s in range(1, w + 1):
                cfg = metrics.WindowConfig(w, s)
                got = [v.first_action_index
                       for v in metrics.stream_windows(records, cfg)]
                if got != brute_force_starts(n, w, s):
                    stream_errors += 1

    big = metrics.window_count(498230, metrics.WindowConfig(100, 20))
    corpus_gap = abs(24943 - big)
    ok = count_errors == 0 and stream_errors == 0 and big == 24907 \
        and corpus_gap <= 60
    verdict("A4", ok,
            f"window arithmetic: full grid clean ({count_errors}+"
            f"{stream_errors} errors), 498230@100/20 -> {big} windows, "
            f"gap to corpus figure {corpus_gap} <= 60")


def test_a5_detection_quality(a5_data):
    start = time.monotonic()
    X, y, train, test, model = a5_data
    report = detector.evaluate(model, X[test], y[test])
    elapsed = time.monotonic() - start
    ok = report.accuracy >= 0.95 and report.f1 >= 0.95
    verdict("A5", ok,
            f"synthetic detection at 100/20: held-out accuracy "
            f"{report.accuracy:.4f} >= 0.95, F1 {report.f1:.4f} >= 0.95 "
            f"({len(test)} test windows, {elapsed:.1f}s)")


def test_a6_hardware_only_ablation(a5_data):
    X, y, train, test, full_model = a5_data
    full_acc = detector.evaluate(full_model, X[test], y[test]).accuracy
    n_nbd = len(metrics.NBD_FEATURES)
    Xh = X[:, n_nbd:]
    hw_model = detector.train_cart(Xh[train], y[train],
                                   list(metrics.FS_FEATURES),
                                   feature_set="hardware_only",
                                   training_window=(100, 20))
    hw_acc = detector.evaluate(hw_model, Xh[test], y[test]).accuracy
    loss = full_acc - hw_acc
    verdict("A6", loss <= 0.03,
            f"hardware-only ablation: 17-feature accuracy {hw_acc:.4f} vs "
            f"full {full_acc:.4f}, loss {loss:+.4f} <= 0.03")


def test_a7_end_to_end_halt(deploy_model):
    cfg = metrics.WindowConfig(2, 2)
    results = []
    for attempt in range(2):  # same seed twice: must reproduce exactly
        results.append(workloads.run_scenario(
            "encrypt-full", spec=HALT_SPEC, seed=7, mode="deploy",
            model=deploy_model, window=cfg,
            prelude_profile="benign-read", prelude_actions=200,
        ))
    s0, s1 = (r.stats() for r in results)
    halted = all(r.halted for r in results)
    fa_bound = math.floor(0.005 * len(HALT_SPEC.files))  # 0.5% of 400 files
    fa_ok = s0.files_affected <= max(fa_bound, 2)
    damage_ok = s0.ma_hw <= s0.ma_os
    repro_ok = (s0.dtd, s0.atd) == (s1.dtd, s1.atd)
    ok = halted and fa_ok and damage_ok and repro_ok
    verdict("A7", ok,
            f"end-to-end halt at 2/2 after 200 benign actions: halted "
            f"{halted}, files damaged {s0.files_affected}/"
            f"{len(HALT_SPEC.files)} (<= {max(fa_bound, 2)}), MA-HW "
            f"{s0.ma_hw} <= MA-OS {s0.ma_os}, replay DTD/ATD identical "
            f"{repro_ok} (DTD={s0.dtd}, ATD={s0.atd})")


def test_a8_false_positive_guard(deploy_model):
    cfg = metrics.WindowConfig(2, 2)
    halts = 0
    worst_ring = 0
    sessions = 0
    for profile in BENIGN_PROFILES:
        for seed in range(5):
            r = workloads.run_scenario(
                profile, spec=CORPUS_SPEC, seed=400 + seed, repeats=4,
                mode="deploy", model=deploy_model, window=cfg,
            )
            sessions += 1
            halts += int(r.halted)
            worst_ring = max(worst_ring, r.pipeline.buffer.max_ring_malicious)
    ok = halts == 0 and worst_ring <= 3
    verdict("A8", ok,
            f"false-positive guard: {sessions} benign deploy sessions, "
            f"{halts} halts (required 0), worst malicious ring count "
            f"{worst_ring} <= 3")


def test_a9_protocol_integrity():
    spec = fixtures.FixtureSpec(
        device_size=16 << 20,
        files=(fixtures.FileSpec(size=65536, content_seed=1),),
    )
    image, _ = fixtures.build_fixture_image(spec)
    mirror = bytearray(image)
    backend = nbd.MemoryBackend(image)
    server = nbd.NbdServer(backend, pipeline=None)
    server.start()
    client = nbd.NbdClient(*server.address)
    size = client.negotiate()
    rng = np.random.default_rng(99)
    cap = len(mirror)
    data_errors = 0
    for _ in range(10000):
        offset = int(rng.integers(0, cap - 1))
        length = min(int(rng.integers(1, 16384)), cap - offset)
        if rng.integers(0, 2):
            blob = rng.integers(0, 256, length, dtype=np.uint8).tobytes()
            assert client.write(offset, blob) == 0
            mirror[offset : offset + length] = blob
        else:
            err, got = client.read(offset, length)
            if err or got != bytes(mirror[offset : offset + length]):
                data_errors += 1
    client.disconnect()
    server.join()
    mirror_ok = data_errors == 0 and backend.snapshot() == bytes(mirror)

    # Post-halt writes leave the backend untouched (fresh image: the random
    # sequence above scrambled the first one's metadata).
    image2, _ = fixtures.build_fixture_image(spec)
    backend2 = nbd.MemoryBackend(image2)
    catalog = ext4.load_catalog(backend2)
    model = detector.train_cart(np.ones((4, len(metrics.FEATURES))),
                                np.ones(4), list(metrics.FEATURES))
    pipeline = nbd.MonitorPipeline(catalog, nbd.PipelineConfig(
        mode="deploy", window=metrics.WindowConfig(1, 1), model=model,
    ))
    server2 = nbd.NbdServer(backend2, pipeline)
    server2.start()
    client2 = nbd.NbdClient(*server2.address)
    client2.negotiate()
    for _ in range(4):
        client2.read(0, 512)
    frozen = backend2.snapshot()
    refused = client2.write(1 << 20, b"\x55" * 4096) == nbd.EPERM
    halt_ok = pipeline.halted and refused and backend2.snapshot() == frozen
    client2.disconnect()
    server2.join()

    magic_ok = (
        struct.pack(">Q", nbd.NBDMAGIC) == b"NBDMAGIC"
        and struct.pack(">Q", nbd.IHAVEOPT) == b"IHAVEOPT"
        and nbd.REQUEST_MAGIC == 0x25609513
        and nbd.SIMPLE_REPLY_MAGIC == 0x67446698
    )
    interop = "stock client not installed, skipped" \
        if shutil.which("nbd-client") is None else "stock client available"
    ok = mirror_ok and halt_ok and magic_ok
    verdict("A9", ok,
            f"protocol integrity: 10000 ops byte-exact vs mirror {mirror_ok}, "
            f"post-halt backend untouched {halt_ok}, handshake magics exact "
            f"{magic_ok} ({interop})")


def test_a10_throughput_ordering():
    spec = fixtures.FixtureSpec(
        device_size=32 << 20,
        files=(fixtures.FileSpec(size=262144, content_seed=2),),
    )
    image, _ = fixtures.build_fixture_image(spec)
    # A benign-scoring model keeps inference running for the whole pass
    # instead of latching a halt and short-circuiting the window work.  The
    # ensemble is deliberately wide so per-action inference at window 1/1
    # costs clearly more than logging alone, keeping the ordering check
    # above measurement noise.
    rng = np.random.default_rng(0)
    Xb = rng.random((64, len(metrics.FEATURES)))
    yb = (rng.random(64) < 0.25).astype(float)
    model = detector.train_cart(
        Xb, yb, list(metrics.FEATURES),
        params=detector.TrainParams(n_estimators=300, learning_rate=0.001,
                                    max_depth=6),
    )
    cfg = metrics.WindowConfig(1, 1)

    def run(pattern, total):
        return nbd.bench_throughput(image, pattern, total, 65536,
                                    model=model, config=cfg, repeats=5)

    run("write", 1 << 20)  # warm-up, discarded
    writes = run("write", 8 << 20)
    reads = run("read", 8 << 20)
    ordering_ok = (writes["raw"] >= writes["logging"]
                   >= writes["logging_inference"])
    read_penalty = 1.0 - reads["logging"] / reads["raw"]
    write_penalty = 1.0 - writes["logging"] / writes["raw"]
    penalty_ok = read_penalty < write_penalty
    ok = ordering_ok and penalty_ok
    verdict("A10", ok,
            f"throughput ordering (writes MB/s): raw {writes['raw']:.0f} >= "
            f"logging {writes['logging']:.0f} >= inference "
            f"{writes['logging_inference']:.0f}; read logging penalty "
            f"{read_penalty:.1%} < write penalty {write_penalty:.1%}")
