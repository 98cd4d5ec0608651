"""TCP daemon around a ServerEngine, plus the matching client proxy.

One mutex serializes every engine access: submissions apply in arrival
order, reads copy a snapshot under the lock and serve it outside.  A
transport failure can only lose a response, never corrupt engine state,
because the engine finishes (or rejects) an update before any reply
bytes are written.
"""

import json
import os
import signal
import socket
import socketserver
import threading

import numpy as np

from . import protocol as proto
from .errors import EngineError, ProtocolError, Unauthorized
from .kernels import BiasBasis, InputPoint, KernelSpec, MixedEffectConfig
from .server import ServerEngine, TaskCoeffsView, UpdateReceipt


# ===== daemon configuration file =========================================

_KERNEL_BY_NAME = {
    "rbf-tags": KernelSpec.rbf_tags,
    "linear-tags": KernelSpec.linear_tags,
}


class DaemonConfig:
    """Parsed daemon config: model config, listen address, tokens."""

    __slots__ = ("cfg", "host", "port", "snapshot_path", "tokens")

    def __init__(self, cfg, host, port, snapshot_path, tokens):
        self.cfg = cfg
        self.host = host
        self.port = port
        self.snapshot_path = snapshot_path
        self.tokens = tokens


def load_daemon_config(path):
    """Read a JSON daemon config.

    Keys: alpha, lam, shared_kernel, individual_kernel ("rbf-tags" or
    "linear-tags"), bias ("constant" or "none"), listen {host, port},
    snapshot (path or null), tokens {task-id: token-string}.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        shared = _KERNEL_BY_NAME[raw.get("shared_kernel", "rbf-tags")]()
        individual = _KERNEL_BY_NAME[raw.get("individual_kernel", "linear-tags")]()
        bias_kind = raw.get("bias", "constant")
        bias = BiasBasis.constant() if bias_kind == "constant" else BiasBasis.empty()
        cfg = MixedEffectConfig(
            alpha=raw["alpha"],
            lam=raw["lam"],
            shared=shared,
            individual=individual,
            bias=bias,
        )
        listen = raw.get("listen", {})
        tokens = {
            int(task): tok.encode("utf-8")
            for task, tok in raw.get("tokens", {}).items()
        }
    except (KeyError, ValueError, AttributeError) as exc:
        raise ValueError("bad daemon config %s: %s" % (path, exc)) from exc
    return DaemonConfig(
        cfg=cfg,
        host=listen.get("host", "127.0.0.1"),
        port=int(listen.get("port", 0)),
        snapshot_path=raw.get("snapshot"),
        tokens=tokens,
    )


# ===== server side =======================================================


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                msg = proto.read_message(self.rfile)
            except ProtocolError as exc:
                try:
                    proto.write_message(
                        self.wfile,
                        proto.Error(code=proto.exception_to_code(exc), detail=str(exc)),
                    )
                except OSError:
                    pass
                return
            except OSError:
                return
            if msg is None:
                return
            reply = self.server.dispatch(msg)
            try:
                proto.write_message(self.wfile, reply)
            except OSError:
                return


class DaemonServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server; engine access is serialized by one lock."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, engine, address, tokens):
        self.engine = engine
        self.tokens = {int(t): bytes(tok) for t, tok in tokens.items()}
        self.lock = threading.Lock()
        super().__init__(address, _Handler)

    def _authorized(self, task, token):
        expected = self.tokens.get(int(task))
        return expected is not None and expected == token

    def dispatch(self, msg):
        try:
            if isinstance(msg, proto.SubmitExample):
                if not self._authorized(msg.task, msg.token):
                    raise Unauthorized("bad token for task %d" % msg.task)
                x = InputPoint(msg.key, msg.features)
                with self.lock:
                    receipt = self.engine.receive_example(msg.task, x, msg.y, msg.w)
                return proto.Ack(epoch=receipt.epoch, case=receipt.case)
            if isinstance(msg, proto.GetDisclosed):
                with self.lock:
                    db = self.engine.get_disclosed()
                return proto.disclosed_to_message(db)
            if isinstance(msg, proto.GetTaskCoeffs):
                if not self._authorized(msg.task, msg.token):
                    raise Unauthorized("bad token for task %d" % msg.task)
                with self.lock:
                    tc = self.engine.task_coefficients(msg.task)
                return proto.TaskCoeffs(epoch=tc.epoch, a=tc.a, keys=tc.keys)
            if isinstance(msg, proto.GetConfig):
                return proto.config_to_message(self.engine.get_config())
            raise ProtocolError("unexpected message %s" % type(msg).__name__)
        except (EngineError, ValueError, TypeError) as exc:
            return proto.Error(code=proto.exception_to_code(exc), detail=str(exc))

    @property
    def address(self):
        return self.server_address[:2]


def start_server(engine, address, tokens):
    """Start a daemon in a background thread; returns the server object.

    Call .shutdown() then .server_close() to stop it.
    """
    srv = DaemonServer(engine, address, tokens)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    return srv


def serve(daemon_config):
    """Run the daemon from a DaemonConfig until interrupted.

    Loads the snapshot file when one exists, saves it back on shutdown.
    """
    path = daemon_config.snapshot_path
    if path and os.path.exists(path):
        with open(path, "rb") as fh:
            engine = proto.load_snapshot(fh.read())
    else:
        engine = ServerEngine(daemon_config.cfg)
    srv = DaemonServer(engine, (daemon_config.host, daemon_config.port), daemon_config.tokens)

    def _terminate(signum, frame):
        raise SystemExit(0)

    # SIGTERM must run the same snapshot-saving exit path as Ctrl-C
    previous = signal.signal(signal.SIGTERM, _terminate)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        signal.signal(signal.SIGTERM, previous)
        srv.server_close()
        if path:
            with open(path, "wb") as fh:
                fh.write(proto.save_snapshot(engine))
    return srv.address


# ===== client side =======================================================


class RemoteServer:
    """Socket proxy offering the same read surface as ServerEngine."""

    def __init__(self, address, task=None, token=b""):
        self.task = task
        self.token = token
        self._sock = socket.create_connection(address)
        self._rfile = self._sock.makefile("rb")
        self._wfile = self._sock.makefile("wb")

    def close(self):
        for f in (self._rfile, self._wfile):
            try:
                f.close()
            except OSError:
                pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _rpc(self, msg):
        proto.write_message(self._wfile, msg)
        reply = proto.read_message(self._rfile)
        if reply is None:
            raise ProtocolError("server closed the connection")
        if isinstance(reply, proto.Error):
            proto.raise_for_error(reply)
        return reply

    def submit(self, x, y, w, task=None, token=None):
        msg = proto.SubmitExample(
            task=int(self.task if task is None else task),
            token=self.token if token is None else token,
            key=x.key,
            features=None if x.features is None else np.asarray(x.features),
            y=float(y),
            w=float(w),
        )
        ack = self._rpc(msg)
        if not isinstance(ack, proto.Ack):
            raise ProtocolError("expected Ack, got %s" % type(ack).__name__)
        return UpdateReceipt(epoch=ack.epoch, case=ack.case)

    def get_disclosed(self):
        reply = self._rpc(proto.GetDisclosed())
        if not isinstance(reply, proto.Disclosed):
            raise ProtocolError("expected Disclosed, got %s" % type(reply).__name__)
        return proto.disclosed_from_message(reply)

    def get_config(self):
        reply = self._rpc(proto.GetConfig())
        if not isinstance(reply, proto.Config):
            raise ProtocolError("expected Config, got %s" % type(reply).__name__)
        return proto.config_from_message(reply)

    def task_coefficients(self, task=None):
        task = int(self.task if task is None else task)
        reply = self._rpc(proto.GetTaskCoeffs(task=task, token=self.token))
        if not isinstance(reply, proto.TaskCoeffs):
            raise ProtocolError("expected TaskCoeffs, got %s" % type(reply).__name__)
        return TaskCoeffsView(epoch=reply.epoch, a=reply.a, keys=reply.keys)

    def get_task_coefficients(self, task=None):
        return self.task_coefficients(task).a
