"""Streaming fusion server.

The server ingests (task, input, response, weight) triples one at a time
and keeps, at every step, exactly the state the condensed batch solver
would produce on the accumulated data: per-task regularized inverses,
the shared-kernel factors over unique inputs, and the disclosed pair
(condensed responses, condensed inverse).  Every update is a rank-one
patch; every update is planned fully before any state is touched, so a
rejected triple leaves the server bit-identical.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NonPositiveWeight, SingularSystem, SingularUpdate, UnknownTask
from .kernels import InputPoint, eval_kernel, eval_shared
from .linalg import (
    EPS_SING,
    FactorSet,
    GrowVec,
    SymMatrix,
    ldl_append,
    tri_solve_dlt,
)
from .offline import build_factors

_F64 = np.float64

# update cases, in dispatch order
CASE_REPEAT_TASK = "repeat-task"      # same (task, input): merge the observation
CASE_REPEAT_GLOBAL = "repeat-global"  # input known globally, new to this task
CASE_NEW_INPUT = "new-input"          # input never seen: factors grow first


class UpdateReceipt(NamedTuple):
    epoch: int
    case: str


class TaskCoeffsView(NamedTuple):
    epoch: int
    a: np.ndarray
    keys: tuple


@dataclass(frozen=True)
class DisclosedDB:
    """Immutable snapshot of everything the server discloses.

    Contains only the unique inputs, the condensed response vector and
    the condensed inverse; per-task responses, weights and inverses are
    structurally absent.
    """

    inputs: tuple
    y_cond: np.ndarray
    H: SymMatrix
    epoch: int


class TaskState:
    """Private per-task state: slots into the unique inputs, merged
    responses/weights, and the inverse of the task's regularized block."""

    __slots__ = ("slots", "pos", "y", "w", "R")

    def __init__(self):
        self.slots = []
        self.pos = {}
        self.y = GrowVec()
        self.w = GrowVec()
        self.R = SymMatrix()


def shared_coefficients(y_cond, h_mat, factors, alpha):
    """Recover bias b and condensed coefficients from disclosed data.

    b solves M^T (D - H) M b = M^T H y_cond; the condensed coefficients
    solve D L^T a = H y_cond + (H - D) M b.  With no bias or alpha = 0,
    b is zero by convention.
    """
    d = factors.bias_dim
    n = factors.n
    y_cond = np.asarray(y_cond, dtype=_F64)
    z = h_mat.matvec(y_cond)
    if d == 0 or alpha == 0.0 or n == 0:
        b = np.zeros(d, dtype=_F64)
        rhs = z
    else:
        m_mat = factors.M
        dvals = factors.D.values
        dm = dvals[:, None] * m_mat
        hm = np.column_stack([h_mat.matvec(col) for col in m_mat.T])
        try:
            b = np.linalg.solve(m_mat.T @ (dm - hm), m_mat.T @ z)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("bias system is singular") from exc
        if not np.all(np.isfinite(b)):
            raise SingularSystem("bias solve produced non-finite values")
        rhs = z + hm @ b - dm @ b
    a_cond = tri_solve_dlt(factors.L, factors.D, rhs)
    return b, a_cond


class ServerEngine:
    """Incremental server state plus the update rules."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.factors = FactorSet(cfg.bias_dim)
        self.inputs = []
        self.key_slot = {}
        self.y_cond = GrowVec()
        self.H = SymMatrix()
        self.tasks = {}
        self.epoch = 0

    @property
    def n(self):
        return len(self.inputs)

    @classmethod
    def from_disclosed(cls, db, cfg):
        """Local engine seeded from a disclosed snapshot (no task data)."""
        eng = cls(cfg)
        eng.factors = build_factors(db.inputs, cfg)
        eng.inputs = list(db.inputs)
        eng.key_slot = {x.key: i for i, x in enumerate(db.inputs)}
        eng.y_cond = GrowVec(db.y_cond)
        eng.H = db.H.copy()
        eng.epoch = db.epoch
        return eng

    # ----- ingestion ----------------------------------------------------

    def receive_example(self, task, x, y, w):
        """Fold one observation in; returns the receipt, or raises with
        the state untouched."""
        if not isinstance(x, InputPoint):
            raise TypeError("x must be an InputPoint")
        y = float(y)
        w = float(w)
        if not w > 0.0 or not np.isfinite(w):
            raise NonPositiveWeight("weight must be finite and > 0, got %g" % w)
        if not np.isfinite(y):
            raise ValueError("response must be finite")
        task = int(task)

        s = self.key_slot.get(x.key)
        if s is None:
            grow = self._plan_new_input(x)
            ext = self._plan_task_extension(task, x, self.n, y, w, grow)
            self._commit_new_input(x, grow)
            self._commit_task_extension(task, self.n - 1, y, w, ext)
            case = CASE_NEW_INPUT
        else:
            xc = self.inputs[s]
            st = self.tasks.get(task)
            p = st.pos.get(s) if st is not None else None
            if p is None:
                ext = self._plan_task_extension(task, xc, s, y, w, None)
                self._commit_task_extension(task, s, y, w, ext)
                case = CASE_REPEAT_GLOBAL
            else:
                merge = self._plan_merge(task, p, y, w)
                self._commit_merge(task, p, merge)
                case = CASE_REPEAT_TASK
        self.epoch += 1
        return UpdateReceipt(self.epoch, case)

    # ----- planning (pure, may raise) -----------------------------------

    def _plan_new_input(self, x):
        cfg = self.cfg
        k_head = np.array(
            [eval_shared(cfg, x, xi) for xi in self.inputs], dtype=_F64
        )
        k_self = eval_shared(cfg, x, x)
        r, beta = ldl_append(self.factors.L, self.factors.D, k_head, k_self)
        mrow = self.factors.bias_row(r, beta, cfg.bias.row(x))
        return r, beta, mrow

    def _plan_task_extension(self, task, xc, slot, y, w, grow):
        cfg = self.cfg
        alpha = cfg.alpha
        spec = cfg.individual_for(task)
        st = self.tasks.get(task)
        old_slots = st.slots if st is not None else []
        ell = len(old_slots) + 1
        scale = 1.0 - alpha

        ktilde = np.empty(ell, dtype=_F64)
        for i, sl in enumerate(old_slots):
            ktilde[i] = scale * eval_kernel(spec, xc, self.inputs[sl])
        ktilde[-1] = scale * eval_kernel(spec, xc, xc)

        r_mat = st.R if st is not None else SymMatrix()
        u = np.empty(ell, dtype=_F64)
        u[:-1] = r_mat.matvec(ktilde[:-1])
        u[-1] = -1.0
        denom = cfg.lam * w - float(np.dot(u, ktilde))
        if denom <= EPS_SING:
            raise SingularUpdate(
                "task block would lose positive definiteness (%.3e)" % denom
            )
        gamma = 1.0 / denom
        y_ext = np.append(st.y.values, y) if st is not None else np.array([y])
        mu = gamma * float(np.dot(u, y_ext))

        n = self.n
        if grow is not None:
            r, beta, _ = grow
            v = np.zeros(n + 1, dtype=_F64)
            v[:n] = self.factors.L.rows_t_matvec(old_slots, u[:-1])
            v[:n] += u[-1] * r
            v[n] += u[-1]
        else:
            v = self.factors.L.rows_t_matvec(old_slots + [slot], u)

        z = denom_h = None
        if alpha > 0.0:
            if grow is not None:
                z = np.empty(n + 1, dtype=_F64)
                z[:n] = self.H.matvec(v[:n])
                z[n] = grow[1] * v[n]
            else:
                z = self.H.matvec(v)
            denom_h = 1.0 / (alpha * gamma) + float(np.dot(v, z))
            if abs(denom_h) < EPS_SING:
                raise SingularUpdate("disclosed inverse update is singular")
        return u, gamma, mu, v, z, denom_h

    def _plan_merge(self, task, p, y, w):
        cfg = self.cfg
        st = self.tasks[task]
        w_old = float(st.w.values[p])
        y_old = float(st.y.values[p])
        w_new = w_old * w / (w_old + w)
        y_new = y_old + (w_new / w) * (y - y_old)

        u = st.R.column(p)
        # the regularized diagonal drops by exactly lam * (w_old - w_new);
        # Sherman-Morrison on the inverse with that (negative) change
        c = cfg.lam * (w_old - w_new)
        if c > 0.0:
            denom_g = 1.0 / c - float(u[p])
            if denom_g <= EPS_SING:
                raise SingularUpdate(
                    "merge would lose positive definiteness (%.3e)" % denom_g
                )
            gamma = 1.0 / denom_g
        else:
            gamma = 0.0  # weight change underflowed; inverse is unchanged

        y_ext = st.y.values.copy()
        y_ext[p] = y_new
        mu = (y_new - y_old) + gamma * float(np.dot(u, y_ext))
        v = self.factors.L.rows_t_matvec(st.slots, u)

        z = denom_h = None
        if cfg.alpha > 0.0 and gamma != 0.0:
            z = self.H.matvec(v)
            denom_h = 1.0 / (cfg.alpha * gamma) + float(np.dot(v, z))
            if abs(denom_h) < EPS_SING:
                raise SingularUpdate("disclosed inverse update is singular")
        return w_new, y_new, u, gamma, mu, v, z, denom_h

    # ----- commits (no failure paths) -----------------------------------

    def _commit_new_input(self, x, grow):
        r, beta, mrow = grow
        self.factors.append_precomputed(r, beta, mrow)
        self.inputs.append(x)
        self.key_slot[x.key] = self.n - 1
        self.y_cond.append(0.0)
        border = np.zeros(self.n, dtype=_F64)
        border[-1] = beta
        self.H.append_border_row(border)

    def _commit_task_extension(self, task, slot, y, w, ext):
        u, gamma, mu, v, z, denom_h = ext
        st = self.tasks.get(task)
        if st is None:
            st = self.tasks[task] = TaskState()
        st.pos[slot] = len(st.slots)
        st.slots.append(slot)
        st.y.append(y)
        st.w.append(w)
        st.R.append_border_row(np.zeros(st.R.n + 1, dtype=_F64))
        st.R.add_scaled_outer(gamma, u)
        self.y_cond.values[:] += mu * v
        if z is not None:
            self.H.add_scaled_outer(-1.0 / denom_h, z)

    def _commit_merge(self, task, p, merge):
        w_new, y_new, u, gamma, mu, v, z, denom_h = merge
        st = self.tasks[task]
        st.w.values[p] = w_new
        st.y.values[p] = y_new
        if gamma != 0.0:
            st.R.add_scaled_outer(gamma, u)
        self.y_cond.values[:] += mu * v
        if z is not None:
            self.H.add_scaled_outer(-1.0 / denom_h, z)

    # ----- reads --------------------------------------------------------

    def get_disclosed(self):
        y = self.y_cond.values.copy()
        y.flags.writeable = False
        return DisclosedDB(
            inputs=tuple(self.inputs),
            y_cond=y,
            H=self.H.copy(),
            epoch=self.epoch,
        )

    def get_config(self):
        return self.cfg

    def get_task_coefficients(self, task):
        """Private coefficients a_j of one task, from current state."""
        st = self.tasks.get(task)
        if st is None:
            raise UnknownTask("task %r has no data on this server" % (task,))
        alpha = self.cfg.alpha
        if alpha == 0.0:
            return st.R.matvec(st.y.values)
        b, _ = shared_coefficients(
            self.y_cond.values, self.H, self.factors, alpha
        )
        q = self.H.matvec(self.y_cond.values)
        if self.cfg.bias_dim:
            q = q + self.H.matvec(self.factors.M @ b)
        proj = self.factors.L.rows_matvec(st.slots, q)
        return st.R.matvec(st.y.values - alpha * proj)

    def task_input_keys(self, task):
        st = self.tasks.get(task)
        if st is None:
            raise UnknownTask("task %r has no data on this server" % (task,))
        return tuple(self.inputs[s].key for s in st.slots)

    def task_coefficients(self, task):
        return TaskCoeffsView(
            epoch=self.epoch,
            a=self.get_task_coefficients(task),
            keys=self.task_input_keys(task),
        )
