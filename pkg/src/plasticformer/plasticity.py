"""Fast-weight update rules and the shared neuromodulation gate.

Two rules are implemented over the same gated recursion
    w(t+1) = (1 - eta(t)) * w(t) + eta(t) * alpha o delta_w(t):
the Hebbian rule uses the outer product of a plastic layer's pre- and
post-synaptic activations as the increment, the gradient rule uses the
gradient of a self-generated internal loss with respect to the fast
weights (and biases, scaled by beta). The gate
    eta(t) = eta0 * sigmoid(eta_tilde_t) * min(1, max_norm / ||delta_t||)
is global across layers; delta_t concatenates all per-layer increments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .model import FastState, ModelConfig, StaticParams, StepOutput


class PlasticityError(RuntimeError):
    pass


# test instrumentation: lets the oracle suite inject a deliberate defect
# (e.g. a sign flip) into the Hebbian increment; identity in normal use
increment_hook: Callable[[Tensor], Tensor] | None = None


@dataclass
class PlasticityTracePoint:
    t: int
    eta: float
    delta_norm: float | None   # None when the gate is frozen (eta0 = 0)
    w_norms: dict[int, float]  # Frobenius norm per plastic layer, post-update
    rule: str
    arrays: dict | None = None  # oracle-support dumps, only when requested


def hebbian_increment(p: Tensor, q: Tensor) -> Tensor:
    """Outer product p q^T of pre-/post-synaptic activation rows."""
    if p.data.shape[0] != 1 or q.data.shape[0] != 1:
        raise T.ShapeError("hebbian_increment expects (1, d) activation rows")
    return T.matmul(T.transpose(p), q)


def compute_delta(increments: dict[int, Tensor],
                  layer_order: Sequence[int]) -> Tensor:
    """Row-major flatten of each layer's increment, concatenated in
    ascending layer order, as a (1, N) row."""
    order = sorted(layer_order)
    missing = [l for l in order if l not in increments]
    if missing:
        raise PlasticityError(f"missing increment for layers {missing}")
    return _concat_flat([increments[l] for l in order])


def _concat_flat(parts: list[Tensor]) -> Tensor:
    flats = [T.reshape(p, 1, p.data.size) for p in parts]
    return flats[0] if len(flats) == 1 else T.concat(flats, axis=1)


def _norm_from_squares(sq_norms: list[Tensor]) -> Tensor:
    total = sq_norms[0]
    for s in sq_norms[1:]:
        total = T.add(total, s)
    return T.powc(total, 0.5)


def compute_eta(eta_tilde: Tensor, delta: Tensor, eta0: float,
                max_norm: float) -> Tensor:
    """Gated, norm-clipped modulation as a (1, 1) tensor."""
    return _eta_from_norm(eta_tilde, T.l2norm(delta), eta0, max_norm)


def _eta_from_norm(eta_tilde: Tensor, norm: Tensor, eta0: float,
                   max_norm: float) -> Tensor:
    """The gate given ||delta|| directly.

    The clip branches on the current norm value: when ||delta|| <= max_norm
    the factor is identically 1 (no gradient into the norm), otherwise it
    is max_norm / ||delta||. A zero delta therefore needs no special case.
    """
    if eta0 < 0 or max_norm <= 0:
        raise PlasticityError("eta0 must be >= 0 and max_norm > 0")
    gate = T.scale(T.sigmoid(eta_tilde), eta0)
    if norm.data[0, 0] <= max_norm:
        return gate
    return T.mul(gate, T.scale(T.powc(norm, -1.0), max_norm))


def apply_update(w: Tensor, delta_w: Tensor, alpha: Tensor,
                 eta: Tensor) -> Tensor:
    """(1 - eta) * w + eta * (alpha o delta_w), eta a (1, 1) tensor."""
    return T.gated_update(w, delta_w, alpha, eta)


def internal_loss(y: Tensor, ybar: Tensor | None, eta_tilde: Tensor,
                  w_out: Tensor) -> Tensor:
    """Self-generated auxiliary loss: mean-scaled squared norm of the
    output-head transpose applied to the model's own outputs."""
    parts = [y]
    if ybar is not None and ybar.data.shape[1] > 0:
        parts.append(ybar)
    parts.append(eta_tilde)
    c = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    if c.data.shape[1] != w_out.data.shape[1]:
        raise T.ShapeError(
            f"internal_loss: concat width {c.data.shape[1]} != head width "
            f"{w_out.data.shape[1]}")
    v = T.matmul(c, T.transpose(w_out))
    d_o = y.data.shape[1]
    return T.scale(T.sum_all(T.mul(v, v)), 1.0 / d_o)


def inner_gradients(params: StaticParams, state: FastState, step: StepOutput,
                    *, create_graph: bool
                    ) -> tuple[dict[int, Tensor], dict[int, Tensor], Tensor]:
    """Gradients of the internal loss w.r.t. each fast weight and bias of
    the current step, plus the loss itself.

    The differentiation treats the step's fast buffers as leaves; with
    create_graph the gradients stay on the tape so the outer loop can
    differentiate through them.
    """
    cfg = params.config
    if cfg.rule != "gradient":
        raise PlasticityError(
            f"inner gradients are defined for rule='gradient', not {cfg.rule!r}")
    loss = internal_loss(step.y, step.ybar, step.eta_tilde, params["head.w"])
    layers = sorted(state.w)
    targets = [state.w[l] for l in layers] + [state.b[l] for l in layers]
    grads = T.grad(loss, targets, create_graph=create_graph, allow_unused=True)
    n = len(layers)
    gw = dict(zip(layers, grads[:n]))
    gb = dict(zip(layers, grads[n:]))
    return gw, gb, loss


def plastic_step(params: StaticParams, state: FastState, step: StepOutput,
                 *, rule: str | None = None, train: bool = False,
                 record_arrays: bool = False
                 ) -> tuple[FastState, PlasticityTracePoint]:
    """Apply one fast-weight update after a forward step.

    rule=none is a no-op that still emits a trace point (eta = 0). When
    eta0 = 0 the gate is frozen, so no increment is formed and the buffers
    pass through untouched.
    """
    cfg = params.config
    rule = cfg.rule if rule is None else rule
    layers = sorted(state.w)

    if rule == "none":
        trace = PlasticityTracePoint(
            t=state.t - 1, eta=0.0, delta_norm=0.0,
            w_norms={l: 0.0 for l in layers}, rule=rule)
        return state, trace

    if cfg.eta0 == 0.0:
        trace = PlasticityTracePoint(
            t=state.t - 1, eta=0.0, delta_norm=None,
            w_norms={l: float(np.linalg.norm(state.w[l].data))
                     for l in layers},
            rule=rule)
        return state, trace

    arrays: dict | None = {} if record_arrays else None

    if rule == "hebbian":
        increments: dict[int, Tensor] = {}
        sq_norms: list[Tensor] = []
        for l in layers:
            inc = hebbian_increment(step.p[l], step.q[l])
            if increment_hook is not None:
                inc = increment_hook(inc)
                sq_norms.append(T.sum_all(T.mul(inc, inc)))
            else:
                # ||p q^T||_F^2 = ||p||^2 ||q||^2, so the norm of the
                # concatenated increment vector never needs materializing
                sq_norms.append(T.mul(T.sum_all(T.mul(step.p[l], step.p[l])),
                                      T.sum_all(T.mul(step.q[l], step.q[l]))))
            increments[l] = inc
        delta_norm = _norm_from_squares(sq_norms)
        eta = _eta_from_norm(step.eta_tilde, delta_norm, cfg.eta0,
                             cfg.max_norm)
        new_w = {l: apply_update(state.w[l], increments[l],
                                 params[f"alpha{l}"], eta)
                 for l in layers}
        new_b = state.b
        if arrays is not None:
            arrays["p"] = {l: step.p[l].data.copy() for l in layers}
            arrays["q"] = {l: step.q[l].data.copy() for l in layers}
    elif rule == "gradient":
        create_graph = train and cfg.inner_grad_mode == "second_order"
        gw, gb, _ = inner_gradients(params, state, step,
                                    create_graph=create_graph)
        sq_norms = []
        for l in layers:
            sq_norms.append(T.sum_all(T.mul(gw[l], gw[l])))
            sq_norms.append(T.sum_all(T.mul(gb[l], gb[l])))
        delta_norm = _norm_from_squares(sq_norms)
        eta = _eta_from_norm(step.eta_tilde, delta_norm, cfg.eta0,
                             cfg.max_norm)
        new_w = {l: apply_update(state.w[l], gw[l], params[f"alpha{l}"], eta)
                 for l in layers}
        new_b = {l: apply_update(state.b[l], gb[l], params[f"beta{l}"], eta)
                 for l in layers}
        if arrays is not None:
            arrays["gw"] = {l: gw[l].data.copy() for l in layers}
            arrays["gb"] = {l: gb[l].data.copy() for l in layers}
    else:
        raise PlasticityError(f"unknown rule {rule!r}")

    if arrays is not None:
        arrays["eta_tilde"] = float(step.eta_tilde.data[0, 0])
        arrays["w_after"] = {l: new_w[l].data.copy() for l in layers}

    trace = PlasticityTracePoint(
        t=state.t - 1,
        eta=float(eta.data[0, 0]),
        delta_norm=float(delta_norm.data[0, 0]),
        w_norms={l: float(np.linalg.norm(new_w[l].data)) for l in layers},
        rule=rule,
        arrays=arrays,
    )
    new_state = FastState(t=state.t, w=new_w, b=new_b, kv=state.kv)
    return new_state, trace


def detach_fast(state: FastState) -> FastState:
    """Re-leaf the plastic buffers (BPTT truncation / eval memory relief).

    Values are unchanged; the buffers become fresh grad-enabled leaves so
    later inner gradients still have targets.
    """
    w = {l: T.parameter(t.data) for l, t in state.w.items()}
    b = {l: T.parameter(t.data) for l, t in state.b.items()}
    return FastState(t=state.t, w=w, b=b, kv=state.kv)
