"""Layer stacks with a minimal reverse-mode tape, and QP expressivity constructions.

A layer maps an input vector to an output vector and owns named learnable
arrays in ``params``. ``forward`` returns the output and a context object;
``backward`` turns an output gradient into an input gradient and one gradient
per learnable array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .canon import AsaForm, asa_forward, asa_vjp, canonicalize, theta_from_values
from .errors import DimensionMismatch, LayerSolveError, TapeConsumed
from .qp import QpProblem, SolverConfig, Status, solve_qp, validate_problem
from .qpdiff import qp_backward


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}

    @property
    def n_parameters(self):
        return int(sum(np.size(v) for v in self.params.values()))

    def forward(self, x):
        raise NotImplementedError

    def backward(self, ctx, g_out):
        """``(g_in, {name: grad}, heuristic_flag)``."""
        raise NotImplementedError

    def to_json(self):
        out = {"type": self.kind}
        out.update({k: np.asarray(v).tolist() for k, v in self.params.items()})
        return out


class Affine(Layer):
    kind = "affine"

    def __init__(self, W, bias=None):
        super().__init__()
        W = np.atleast_2d(np.asarray(W, dtype=float))
        bias = np.zeros(W.shape[0]) if bias is None else np.asarray(bias, dtype=float).reshape(-1)
        if bias.shape != (W.shape[0],):
            raise DimensionMismatch(f"bias has length {bias.size}, W has {W.shape[0]} rows")
        self.params = {"W": W, "bias": bias}

    def forward(self, x):
        return self.params["W"] @ x + self.params["bias"], x

    def backward(self, x, g_out):
        W = self.params["W"]
        return W.T @ g_out, {"W": np.outer(g_out, x), "bias": g_out.copy()}, False


class ReluExplicit(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, x, g_out):
        return g_out * (x > 0), {}, bool(np.any(x == 0))


@dataclass
class QpContext:
    x: np.ndarray
    problem: object
    solution: object


class QpLayer(Layer):
    """Output is (a slice of) the minimizer of a QP whose data depends on the input."""

    kind = "qp"
    cfg = SolverConfig()

    def build(self, x) -> QpProblem:
        raise NotImplementedError

    def output(self, z):
        return z

    def output_adjoint(self, g_out, n):
        """Gradient on the full QP variable from a gradient on ``output(z)``."""
        return g_out

    def pullback(self, x, grads):
        """``(g_in, {name: grad})`` from the QP data gradients."""
        raise NotImplementedError

    def forward(self, x):
        p = validate_problem(self.build(np.asarray(x, dtype=float)))
        s = solve_qp(p, self.cfg)
        if s.status is not Status.OPTIMAL:
            raise LayerSolveError(f"QP layer solve failed: {s.status.value}", status=s.status)
        return self.output(np.array(s.z_star)), QpContext(x, p, s)

    def backward(self, ctx, g_out):
        dl_dz = self.output_adjoint(np.asarray(g_out, dtype=float), ctx.problem.n)
        grads, d = qp_backward(ctx.problem, ctx.solution, dl_dz, self.cfg)
        g_in, g_params = self.pullback(ctx.x, grads)
        return g_in, g_params, d.heuristic


class ReluQp(QpLayer):
    """``min |z - v|^2  s.t.  z >= 0`` with ``v = W x + bias`` (or ``v = x``)."""

    kind = "relu_qp"

    def __init__(self, n, W=None, bias=None):
        super().__init__()
        self.n = int(n)
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if W is not None:
            W = np.atleast_2d(np.asarray(W, dtype=float))
            if W.shape[0] != self.n:
                raise DimensionMismatch(f"W has {W.shape[0]} rows, expected {self.n}")
            bias = np.zeros(self.n) if bias is None else np.asarray(bias, dtype=float).reshape(-1)
            self.params = {"W": W, "bias": bias}

    def pre_activation(self, x):
        if "W" in self.params:
            return self.params["W"] @ x + self.params["bias"]
        if x.shape != (self.n,):
            raise DimensionMismatch(f"input has length {x.size}, expected {self.n}")
        return x

    def build(self, x):
        v = self.pre_activation(x)
        n = self.n
        return QpProblem(P=2.0 * np.eye(n), q=-2.0 * v, G=-np.eye(n), h=np.zeros(n))

    def pullback(self, x, grads):
        g_v = -2.0 * grads.gq
        if "W" in self.params:
            return self.params["W"].T @ g_v, {"W": np.outer(g_v, x), "bias": g_v}
        return g_v, {}

    def to_json(self):
        out = super().to_json()
        out["n"] = self.n
        return out


def relu_as_qp(n, W=None, bias=None) -> ReluQp:
    return ReluQp(n, W, bias)


class MaxAffineQp(QpLayer):
    """``min z^2  s.t.  a_i' x <= z``; the minimizer is ``max(0, max_i a_i' x)``."""

    kind = "max_affine"

    def __init__(self, a_list):
        super().__init__()
        A = np.atleast_2d(np.asarray(a_list, dtype=float))
        if A.shape[0] < 1:
            raise ValueError("need at least one affine piece")
        self.params = {"A": A}

    def build(self, x):
        A = self.params["A"]
        k = A.shape[0]
        return QpProblem(P=[[2.0]], q=[0.0], G=-np.ones((k, 1)), h=-(A @ x))

    def pullback(self, x, grads):
        A = self.params["A"]
        return -A.T @ grads.gh, {"A": -np.outer(grads.gh, x)}


def max_affine_layer(a_list) -> MaxAffineQp:
    return MaxAffineQp(a_list)


class PiecewiseLinearQp(QpLayer):
    """Elementwise ``z_j = sum_i w_ji max(a_ji x_j + b_ji, 0)`` as one QP.

    Variables are ``(z, t)`` with ``t`` in ``R^{n k}``; the objective is
    ``|t|^2 + |z - W t|^2`` with ``W`` block-diagonal over coordinates and the
    constraints are ``a_ji x_j + b_ji <= t_ji``.
    """

    kind = "piecewise_linear"

    def __init__(self, w, a, b):
        super().__init__()
        w, a, b = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (w, a, b))
        if not (w.shape == a.shape == b.shape):
            raise DimensionMismatch("w, a and b must have the same shape (n, k)")
        self.params = {"w": w, "a": a, "b": b}

    @property
    def shape(self):
        return self.params["w"].shape

    def _blocks(self):
        w = self.params["w"]
        n, k = w.shape
        Wt = np.zeros((n, n * k))
        for j in range(n):
            Wt[j, j * k:(j + 1) * k] = w[j]
        return Wt

    def build(self, x):
        n, k = self.shape
        if x.shape != (n,):
            raise DimensionMismatch(f"input has length {x.size}, expected {n}")
        Wt = self._blocks()
        # |t|^2 + |z - Wt t|^2 = [z; t]' M [z; t] with M = [[I, -Wt], [-Wt', I + Wt'Wt]]
        M = np.block([[np.eye(n), -Wt], [-Wt.T, np.eye(n * k) + Wt.T @ Wt]])
        G = np.hstack([np.zeros((n * k, n)), -np.eye(n * k)])
        h = -(self.params["a"] * x[:, None] + self.params["b"]).reshape(-1)
        return QpProblem(P=2.0 * M, q=np.zeros(n + n * k), G=G, h=h)

    def output(self, z):
        return z[:self.shape[0]]

    def output_adjoint(self, g_out, nz):
        out = np.zeros(nz)
        out[:self.shape[0]] = g_out
        return out

    def pullback(self, x, grads):
        n, k = self.shape
        gh = grads.gh.reshape(n, k)
        a = self.params["a"]
        g_x = -(gh * a).sum(axis=1)
        # P depends on w through the z-t and t-t blocks
        gP = 0.5 * (grads.gP + grads.gP.T)
        w = self.params["w"]
        g_w = np.zeros((n, k))
        for j in range(n):
            ts = slice(n + j * k, n + (j + 1) * k)
            g_w[j] = -4.0 * gP[j, ts] + 4.0 * gP[ts, ts] @ w[j]
        return g_x, {"w": g_w, "a": -gh * x[:, None], "b": -gh}


def piecewise_linear_layer(w, a, b) -> PiecewiseLinearQp:
    return PiecewiseLinearQp(w, a, b)


class AsaQpLayer(QpLayer):
    """A layer defined by a canonicalized program.

    The layer input fills the parameters named in ``input_params`` (in order);
    the remaining parameters are learnable slots. The output is the stacked
    original variables, or only ``output_variable`` when given.
    """

    kind = "asa"

    def __init__(self, form: AsaForm, input_params, values=None, output_variable=None,
                 source=None):
        super().__init__()
        self.form = form
        self.input_params = tuple(input_params)
        shapes = dict(form.parameter_order)
        missing = [n for n in self.input_params if n not in shapes]
        if missing:
            raise KeyError(f"unknown input parameters {missing}")
        values = dict(values or {})
        self.params = {name: np.asarray(values.get(name, np.zeros(shape)), dtype=float)
                       .reshape(shape)
                       for name, shape in form.parameter_order if name not in self.input_params}
        self.output_variable = output_variable
        self.source = source
        offsets, k = {}, 0
        for name, dim in form.variables:
            offsets[name] = (k, k + dim)
            k += dim
        self._out = offsets[output_variable] if output_variable else (0, k)

    def _theta(self, x):
        values = dict(self.params)
        k = 0
        shapes = dict(self.form.parameter_order)
        for name in self.input_params:
            size = math.prod(shapes[name])
            values[name] = x[k:k + size]
            k += size
        if k != x.size:
            raise DimensionMismatch(f"input has length {x.size}, expected {k}")
        return theta_from_values(self.form, values)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        out, record = asa_forward(self.form, self._theta(x), self.cfg)
        if record.status is not Status.OPTIMAL:
            raise LayerSolveError(f"QP layer solve failed: {record.status.value}",
                                  status=record.status)
        lo, hi = self._out
        return out[lo:hi], (x, record)

    def backward(self, ctx, g_out):
        x, record = ctx
        lo, hi = self._out
        dl = np.zeros(self.form.n_original)
        dl[lo:hi] = g_out
        g_theta, d = asa_vjp(self.form, record, dl, self.cfg)
        grads, k = {}, 0
        for name, shape in self.form.parameter_order:
            size = math.prod(shape)
            grads[name] = g_theta[k:k + size].reshape(shape)
            k += size
        g_in = np.concatenate([grads.pop(n).reshape(-1) for n in self.input_params]) \
            if self.input_params else np.zeros(0)
        return g_in, grads, d.heuristic

    def to_json(self):
        out = super().to_json()
        out.update({"source": self.source, "input_params": list(self.input_params),
                    "output_variable": self.output_variable})
        return out


# -- tape --------------------------------------------------------------------

@dataclass
class Tape:
    records: list = field(default_factory=list)
    consumed: bool = False


@dataclass
class TapeGrads:
    input: np.ndarray
    params: list
    heuristic: list


def tape_forward(layers, x):
    x = np.asarray(x, dtype=float)
    tape = Tape()
    for i, layer in enumerate(layers):
        try:
            out, ctx = layer.forward(x)
        except LayerSolveError as exc:
            raise LayerSolveError(f"layer {i}: {exc}", layer_index=i, status=exc.status) from exc
        tape.records.append((layer, ctx))
        x = out
    return x, tape


def tape_backward(tape: Tape, dl_dout) -> TapeGrads:
    if tape.consumed:
        raise TapeConsumed("tape has already been used for a backward pass")
    tape.consumed = True
    g = np.asarray(dl_dout, dtype=float)
    params, flags = [], []
    for layer, ctx in reversed(tape.records):
        g, grads, flag = layer.backward(ctx, g)
        params.append(grads)
        flags.append(flag)
    return TapeGrads(g, params[::-1], flags[::-1])


# -- serialization -----------------------------------------------------------

def layer_from_json(obj) -> Layer:
    kind = obj["type"]
    if kind == "affine":
        return Affine(obj["W"], obj.get("bias"))
    if kind == "relu":
        return ReluExplicit()
    if kind == "relu_qp":
        return ReluQp(obj["n"], obj.get("W"), obj.get("bias"))
    if kind == "max_affine":
        return MaxAffineQp(obj["A"])
    if kind == "piecewise_linear":
        return PiecewiseLinearQp(obj["w"], obj["a"], obj["b"])
    if kind == "asa":
        from .dsl import parse_problem
        src = parse_problem(obj["source"])
        values = dict(src.values)
        values.update({k: np.asarray(v) for k, v in obj.items()
                       if k not in ("type", "source", "input_params", "output_variable")})
        return AsaQpLayer(canonicalize(src.problem), obj["input_params"], values,
                          obj.get("output_variable"), obj["source"])
    raise ValueError(f"unknown layer type {kind!r}")


def layers_to_json(layers):
    return [layer.to_json() for layer in layers]


def layers_from_json(objs):
    return [layer_from_json(o) for o in objs]
