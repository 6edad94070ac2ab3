import socket
import struct

import numpy as np
import pytest

from diskmon import detector, ext4, fixtures, metrics, nbd
from diskmon.errors import ProtocolViolation


def test_wire_constants_match_public_protocol():
    assert nbd.NBDMAGIC == 0x4E42444D41474943
    assert struct.pack(">Q", nbd.NBDMAGIC) == b"NBDMAGIC"
    assert struct.pack(">Q", nbd.IHAVEOPT) == b"IHAVEOPT"
    assert nbd.REQUEST_MAGIC == 0x25609513
    assert nbd.SIMPLE_REPLY_MAGIC == 0x67446698
    assert nbd.OPT_REPLY_MAGIC == 0x3E889045565A9
    assert (nbd.CMD_READ, nbd.CMD_WRITE, nbd.CMD_DISC, nbd.CMD_FLUSH) == (
        0, 1, 2, 3
    )


@pytest.fixture()
def served(small_image):
    backend = nbd.MemoryBackend(small_image)
    catalog = ext4.load_catalog(backend)
    pipeline = nbd.MonitorPipeline(catalog, nbd.PipelineConfig(mode="test"))
    server = nbd.NbdServer(backend, pipeline)
    server.start()
    yield server, backend, pipeline
    server._listener.close()


def test_negotiate_reports_size(served):
    server, backend, _ = served
    client = nbd.NbdClient(*server.address)
    assert client.negotiate() == backend.capacity
    client.disconnect()
    server.join()


def test_read_write_round_trip(served):
    server, backend, _ = served
    client = nbd.NbdClient(*server.address)
    client.negotiate()
    blob = bytes(range(256)) * 16
    assert client.write(8 << 20, blob) == 0
    err, back = client.read(8 << 20, len(blob))
    assert err == 0 and back == blob
    assert client.flush() == 0
    client.disconnect()
    server.join()
    assert server.summary.requests == 4


def test_out_of_bounds_rejected(served):
    server, backend, _ = served
    client = nbd.NbdClient(*server.address)
    client.negotiate()
    err, _ = client.read(backend.capacity - 10, 4096)
    assert err == nbd.EINVAL
    assert client.write(backend.capacity, b"x" * 512) == nbd.EINVAL
    client.disconnect()
    server.join()


def test_unknown_command_rejected(served):
    server, _, _ = served
    client = nbd.NbdClient(*server.address)
    client.negotiate()
    err, _ = client._request(7, 0, 0)  # NBD_CMD_TRIM, unsupported
    assert err == nbd.EINVAL
    client.disconnect()
    server.join()


def test_bad_request_magic_closes_session(served):
    server, _, _ = served
    client = nbd.NbdClient(*server.address)
    client.negotiate()
    client._sock.sendall(struct.pack(">IHHQQI", 0xDEAD_BEEF, 0, 0, 1, 0, 0))
    with pytest.raises(ProtocolViolation):
        server.join()


def test_bad_option_magic(served):
    server, _, _ = served
    sock = socket.create_connection(server.address)
    sock.recv(18)
    sock.sendall(struct.pack(">I", 1))
    sock.sendall(struct.pack(">QII", 0x1234, nbd.OPT_EXPORT_NAME, 0))
    with pytest.raises(ProtocolViolation):
        server.join()
    sock.close()


def test_abort_option(served):
    server, _, _ = served
    sock = socket.create_connection(server.address)
    sock.recv(18)
    sock.sendall(struct.pack(">I", 1))
    sock.sendall(struct.pack(">QII", nbd.IHAVEOPT, nbd.OPT_ABORT, 0))
    reply = sock.recv(20)
    magic, opt, rep, length = struct.unpack(">QIII", reply)
    assert magic == nbd.OPT_REPLY_MAGIC and rep == nbd.REP_ACK
    sock.close()
    server.join()
    assert server.summary.requests == 0


def test_list_option(served):
    server, _, _ = served
    sock = socket.create_connection(server.address)
    sock.recv(18)
    sock.sendall(struct.pack(">I", 1))
    sock.sendall(struct.pack(">QII", nbd.IHAVEOPT, nbd.OPT_LIST, 0))
    magic, _opt, rep, length = struct.unpack(">QIII", nbd._recv_exact(sock, 20))
    assert rep == nbd.REP_SERVER
    payload = nbd._recv_exact(sock, length)
    (namelen,) = struct.unpack(">I", payload[:4])
    assert payload[4 : 4 + namelen] == b"disk"
    _magic, _opt, rep, _len = struct.unpack(">QIII", nbd._recv_exact(sock, 20))
    assert rep == nbd.REP_ACK
    # terminate cleanly
    sock.sendall(struct.pack(">QII", nbd.IHAVEOPT, nbd.OPT_ABORT, 0))
    nbd._recv_exact(sock, 20)
    sock.close()
    server.join()


def test_second_connection_refused(served):
    server, _, _ = served
    first = nbd.NbdClient(*server.address)
    first.negotiate()
    extra = socket.create_connection(server.address)
    assert extra.recv(18) == b""  # closed without a greeting
    extra.close()
    first.disconnect()
    server.join()


def test_pipeline_counts_requests(served):
    server, _, pipeline = served
    client = nbd.NbdClient(*server.address)
    client.negotiate()
    client.read(0, 4096)
    client.read(4096, 4096)
    client.write(0, bytes(4096))
    client.disconnect()
    server.join()
    assert pipeline.reads == 2
    assert pipeline.writes == 1
    assert pipeline.counters.reads_merged == 1
    assert len(pipeline.records) == 3


def _always_malicious_model():
    X = np.ones((5, len(metrics.FEATURES)))
    return detector.train_cart(X, np.ones(5), list(metrics.FEATURES))


def test_deploy_halt_refuses_writes(small_image):
    backend = nbd.MemoryBackend(small_image)
    catalog = ext4.load_catalog(backend)
    config = nbd.PipelineConfig(
        mode="deploy", window=metrics.WindowConfig(1, 1),
        model=_always_malicious_model(),
    )
    pipeline = nbd.MonitorPipeline(catalog, config)
    server = nbd.NbdServer(backend, pipeline)
    server.start()
    client = nbd.NbdClient(*server.address)
    client.negotiate()
    for _ in range(4):  # 4 decisions at W=1 fill the vote
        client.read(0, 512)
    assert pipeline.halted
    snapshot = backend.snapshot()
    assert client.write(1 << 20, b"\xaa" * 4096) == nbd.EPERM
    assert backend.snapshot() == snapshot  # refused write left no trace
    err, _ = client.read(0, 512)
    assert err == 0  # reads stay allowed by default
    client.disconnect()
    server.join()
    assert server.summary.halted


def test_deploy_halt_reads_optional(small_image):
    backend = nbd.MemoryBackend(small_image)
    catalog = ext4.load_catalog(backend)
    config = nbd.PipelineConfig(
        mode="deploy", window=metrics.WindowConfig(1, 1),
        model=_always_malicious_model(), halt_reads=True,
    )
    pipeline = nbd.MonitorPipeline(catalog, config)
    server = nbd.NbdServer(backend, pipeline)
    server.start()
    client = nbd.NbdClient(*server.address)
    client.negotiate()
    for _ in range(4):
        client.read(0, 512)
    err, _ = client.read(0, 512)
    assert err == nbd.EPERM
    client.disconnect()
    server.join()


def test_deploy_requires_model(small_catalog):
    with pytest.raises(ValueError):
        nbd.MonitorPipeline(small_catalog, nbd.PipelineConfig(mode="deploy"))


def test_bench_reports_three_modes(small_image):
    rates = nbd.bench_throughput(small_image, "write", 1 << 20, 65536,
                                 model=_always_malicious_model())
    assert set(rates) == {"raw", "logging", "logging_inference"}
    assert all(v > 0 for v in rates.values())
