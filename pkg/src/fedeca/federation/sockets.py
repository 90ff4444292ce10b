"""TCP backend: aggregator daemon, center daemon and the fit driver client.

One session per process. Centers and a single driver connect to the
aggregator and each open with a ``HELLO`` frame naming their role; the
aggregator acknowledges, waits for the driver's ``FIT_REQUEST``, runs the
analysis over the connected centers and answers with a ``FIT_REPORT``.
Plain TCP only: no TLS, no authentication.
"""
from __future__ import annotations

import json
import logging
import os
import socket
import time

from fedeca.errors import DataError, FedecaError, ProtocolError, error_from_kind
from fedeca.federation.protocol import PROTOCOL_VERSION, RoundEnvelope, Schema, decode, encode, read_frame
from fedeca.federation.runtime import Center, Federation, write_transcript

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0


def parse_addr(addr):
    """``"host:port"`` to a ``(host, port)`` tuple."""
    if not addr or ":" not in addr:
        raise DataError(f"address must look like host:port, got {addr!r}")
    host, _, port = addr.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise DataError(f"invalid port in address {addr!r}") from None


def _send(sock, schema, payload=None, round_index=0, version=PROTOCOL_VERSION):
    sock.sendall(encode(RoundEnvelope(schema, payload, round_index, version)))


def _recv(sock, expected_version=PROTOCOL_VERSION):
    try:
        return decode(read_frame(sock), expected_version)
    except socket.timeout:
        raise ProtocolError("timed out waiting for a frame") from None
    except OSError as exc:
        raise ProtocolError(f"connection failed: {exc}") from None


def _error_payload(exc):
    return {"error": type(exc).__name__, "message": str(exc)}


def _raise_if_error(env):
    if env.schema == Schema.ERROR:
        p = env.payload or {}
        raise error_from_kind(p.get("error", "FedecaError"), p.get("message", ""))
    return env


class SocketFederation(Federation):
    """Aggregator side of a live session; ``sockets[k]`` talks to center k."""

    backend = "socket"

    def __init__(self, sockets, record=False):
        super().__init__(len(sockets))
        self.sockets = list(sockets)
        if record:
            self.transcript = []

    def _roundtrip(self, schema, payloads, log):
        frames = []
        for k, (sock, payload) in enumerate(zip(self.sockets, payloads)):
            frame = encode(RoundEnvelope(schema, payload, self.round_index))
            self._record("Q", k, frame)
            try:
                sock.sendall(frame)
            except OSError as exc:
                raise ProtocolError(f"center {k}: send failed: {exc}") from None
            log.bytes_out += len(frame)
            frames.append(frame)
        replies = []
        for k, sock in enumerate(self.sockets):
            try:
                reply = read_frame(sock)
            except socket.timeout:
                raise ProtocolError(f"center {k}: timed out in round {self.round_index}") from None
            except OSError as exc:
                raise ProtocolError(f"center {k}: {exc}") from None
            self._record("R", k, reply)
            log.bytes_in += len(reply)
            env = decode(reply)
            if env.round_index != self.round_index:
                raise ProtocolError(f"center {k}: reply for round {env.round_index}, expected {self.round_index}")
            replies.append(env)
        return replies


def _connect(addr, timeout):
    host, port = parse_addr(addr)
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(timeout)
            return sock
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise ProtocolError(f"cannot connect to aggregator at {addr}: {exc}") from None
            time.sleep(0.05)


# ---------------------------------------------------------------- aggregator


def serve_aggregator(bind, n_centers, record=None, timeout=DEFAULT_TIMEOUT, announce=print):
    """Run one aggregator session and return the process exit code."""
    host, port = parse_addr(bind)
    try:
        server = socket.create_server((host, port))
    except OSError as exc:
        raise ProtocolError(f"cannot bind {bind}: {exc}") from None
    server.settimeout(timeout)
    peers = []
    fed = None
    try:
        real_host, real_port = server.getsockname()[:2]
        announce(f"listening on {real_host}:{real_port}")
        centers, driver = {}, None
        while len(centers) < n_centers or driver is None:
            try:
                conn, _ = server.accept()
            except socket.timeout:
                raise ProtocolError("timed out waiting for centers and driver") from None
            conn.settimeout(timeout)
            peers.append(conn)
            try:
                env = _recv(conn)
            except ProtocolError as exc:
                _send(conn, Schema.ERROR, _error_payload(exc))
                raise
            hello = env.payload or {}
            if env.schema != Schema.HELLO:
                exc = ProtocolError("expected HELLO")
                _send(conn, Schema.ERROR, _error_payload(exc))
                raise exc
            role = hello.get("role")
            if role == "center":
                cid = int(hello.get("center_id", -1))
                if not 0 <= cid < n_centers or cid in centers:
                    exc = ProtocolError(f"invalid or duplicate center id {cid}")
                    _send(conn, Schema.ERROR, _error_payload(exc))
                    raise exc
                ps = {h["p"] for _, h in centers.values()}
                if ps and hello.get("p") not in ps:
                    exc = DataError(f"center {cid} has {hello.get('p')} covariates, others have {ps.pop()}")
                    _send(conn, Schema.ERROR, _error_payload(exc))
                    raise exc
                centers[cid] = (conn, hello)
            elif role == "driver" and driver is None:
                driver = conn
            else:
                exc = ProtocolError(f"unexpected role {role!r}")
                _send(conn, Schema.ERROR, _error_payload(exc))
                raise exc
            _send(conn, Schema.ACK)
        request = _raise_if_error(_recv(driver))
        if request.schema != Schema.FIT_REQUEST:
            raise ProtocolError("expected FIT_REQUEST from driver")
        fed = SocketFederation([centers[k][0] for k in range(n_centers)], record=record is not None)
        code = 0
        try:
            from fedeca.pipeline import FitConfig, fit_fedeca, report_json

            config = FitConfig.from_dict(json.loads(request.payload["config"]))
            result = fit_fedeca(fed, config)
            _send(driver, Schema.FIT_REPORT, {"report": report_json(result.report())})
        except FedecaError as exc:
            logger.error("%s", exc)
            _send(driver, Schema.ERROR, _error_payload(exc))
            code = exc.exit_code
        for k in range(n_centers):
            try:
                _send(centers[k][0], Schema.SHUTDOWN, round_index=fed.round_index + 1)
            except OSError:
                pass
        return code
    except FedecaError:
        for conn in peers:
            try:
                _send(conn, Schema.SHUTDOWN)
            except OSError:
                pass
        raise
    finally:
        if record is not None and fed is not None and fed.transcript is not None:
            write_transcript(fed.transcript, record)
        for conn in peers:
            conn.close()
        server.close()


# -------------------------------------------------------------------- center


def serve_center(agg_addr, cohort, center_id, timeout=DEFAULT_TIMEOUT, protocol_version=PROTOCOL_VERSION):
    """Serve one session as center ``center_id``; returns the exit code."""
    node = Center(cohort, center_id)
    sock = _connect(agg_addr, timeout)
    try:
        _send(sock, Schema.HELLO, {"role": "center", "center_id": int(center_id), "p": cohort.p}, version=protocol_version)
        _raise_if_error(_recv(sock, expected_version=None))
        while True:
            frame = read_frame(sock)
            env = decode(frame, expected_version=None)
            if env.schema == Schema.SHUTDOWN:
                return 0
            _raise_if_error(env)
            sock.sendall(node.handle_frame(frame))
    except socket.timeout:
        raise ProtocolError("timed out waiting for the aggregator") from None
    except OSError as exc:
        raise ProtocolError(f"connection to aggregator failed: {exc}") from None
    finally:
        sock.close()


# -------------------------------------------------------------------- driver


def remote_fit(agg_addr, config, timeout=DEFAULT_TIMEOUT):
    """Ask a running aggregator to fit; returns the report JSON text."""
    sock = _connect(agg_addr, timeout)
    try:
        _send(sock, Schema.HELLO, {"role": "driver"})
        _raise_if_error(_recv(sock))
        _send(sock, Schema.FIT_REQUEST, {"config": json.dumps(config.to_dict(), sort_keys=True)})
        env = _raise_if_error(_recv(sock))
        if env.schema != Schema.FIT_REPORT:
            raise ProtocolError(f"unexpected reply {env.schema.name}")
        return env.payload["report"]
    finally:
        sock.close()


def env_default(name, fallback=None):
    return os.environ.get(name, fallback)
