"""Client-side model recovery from disclosed data.

An *active* client downloads its private coefficients from the server.
A *passive* client never sends its observations anywhere: it seeds a
local engine with the public disclosed snapshot, replays its own triples
through the exact same update rules the server runs, and recovers its
coefficients locally.  Both paths rebuild the shared factors from the
disclosed unique inputs, in the server's append order, so the rebuilt
factors match the server's bit for bit.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import UnknownTask
from .kernels import eval_kernel, eval_shared
from .offline import build_factors
from .server import ServerEngine, TaskCoeffsView, shared_coefficients

_F64 = np.float64


@dataclass
class PrivateData:
    """A task's own observations: (input, response, weight) triples."""

    triples: list


@dataclass
class ClientModel:
    """Everything needed to predict for one task at one epoch."""

    task: int
    epoch: int
    inputs: tuple
    factors: object
    y_cond: np.ndarray
    H: object
    b: np.ndarray
    a_cond: np.ndarray
    a_task: np.ndarray
    slots: np.ndarray


def reconstruct_factors(inputs, cfg):
    """Rebuild L, D, M from disclosed unique inputs, in disclosed order."""
    return build_factors(inputs, cfg)


def compute_bias_and_acheck(y_cond, h_mat, factors, alpha):
    """Bias and condensed coefficients from disclosed data alone."""
    return shared_coefficients(y_cond, h_mat, factors, alpha)


def _assemble(task, epoch, engine_like, a_task, slots):
    y = np.asarray(engine_like.y_cond.values if hasattr(engine_like.y_cond, "values")
                   else engine_like.y_cond, dtype=_F64).copy()
    factors = engine_like.factors
    h_mat = engine_like.H
    cfg = engine_like.cfg
    b, a_cond = compute_bias_and_acheck(y, h_mat, factors, cfg.alpha)
    return ClientModel(
        task=task,
        epoch=epoch,
        inputs=tuple(engine_like.inputs),
        factors=factors,
        y_cond=y,
        H=h_mat,
        b=b,
        a_cond=a_cond,
        a_task=np.asarray(a_task, dtype=_F64),
        slots=np.asarray(slots, dtype=np.intp),
    )


class Client:
    """One task's view of the system.

    `server` arguments are duck-typed: anything with get_config /
    get_disclosed / task_coefficients works, in particular both a local
    ServerEngine and the TCP proxy from the daemon module.
    """

    def __init__(self, task, cfg, token=None):
        self.task = int(task)
        self.cfg = cfg
        self.token = token
        self._cached: Optional[ClientModel] = None

    # ----- active path --------------------------------------------------

    def active_refresh(self, server):
        """Download disclosed data + own coefficients; rebuild the model.

        Retries when a write lands between the two reads; models are
        cached by epoch, so refreshing an unchanged server is free and
        returns the identical object.
        """
        for _ in range(8):
            db = server.get_disclosed()
            if self._cached is not None and self._cached.epoch == db.epoch:
                return self._cached
            try:
                tc = server.task_coefficients(self.task)
            except UnknownTask:
                tc = TaskCoeffsView(epoch=db.epoch, a=np.zeros(0, dtype=_F64), keys=())
            if tc.epoch == db.epoch:
                break
        else:
            raise RuntimeError("server kept changing between reads")
        factors = reconstruct_factors(db.inputs, self.cfg)
        b, a_cond = compute_bias_and_acheck(
            db.y_cond, db.H, factors, self.cfg.alpha
        )
        key_slot = {x.key: i for i, x in enumerate(db.inputs)}
        slots = np.array([key_slot[k] for k in tc.keys], dtype=np.intp)
        model = ClientModel(
            task=self.task,
            epoch=db.epoch,
            inputs=db.inputs,
            factors=factors,
            y_cond=np.asarray(db.y_cond, dtype=_F64).copy(),
            H=db.H,
            b=b,
            a_cond=a_cond,
            a_task=np.asarray(tc.a, dtype=_F64),
            slots=slots,
        )
        self._cached = model
        return model

    # ----- passive path -------------------------------------------------

    def passive_refresh(self, disclosed, private):
        """Recover the model without uploading anything.

        Replays the private triples through a local engine seeded from
        the disclosed snapshot; the local updates are the same code the
        server runs, so the result equals an active refresh against a
        server that had received those triples last.
        """
        local = ServerEngine.from_disclosed(disclosed, self.cfg)
        for x, y, w in private.triples:
            local.receive_example(self.task, x, y, w)
        try:
            a_task = local.get_task_coefficients(self.task)
            slots = list(local.tasks[self.task].slots)
        except UnknownTask:
            a_task = np.zeros(0, dtype=_F64)
            slots = []
        return _assemble(self.task, disclosed.epoch, local, a_task, slots)


def predict_client(model, cfg, x):
    """Mixed-effect prediction from a client model; 0 on an empty model."""
    val = 0.0
    if cfg.alpha > 0.0 and len(model.inputs):
        shared = sum(
            a * eval_shared(cfg, xi, x) for a, xi in zip(model.a_cond, model.inputs)
        )
        if cfg.bias_dim:
            shared += float(np.dot(model.b, cfg.bias.row(x)))
        val += cfg.alpha * shared
    if cfg.alpha < 1.0 and len(model.a_task):
        spec = cfg.individual_for(model.task)
        val += (1.0 - cfg.alpha) * sum(
            a * eval_kernel(spec, model.inputs[s], x)
            for a, s in zip(model.a_task, model.slots)
        )
    return float(val)


def preference_score(model, cfg, x):
    """Squash the prediction to a (0, 1) preference."""
    return float(expit(predict_client(model, cfg, x) / 2.0))
