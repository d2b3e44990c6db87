"""Two-party federated transfer learning.

Party A owns labeled source data, party B owns unlabeled target data with a
different feature set. A small set of samples is known to both under their
respective feature views. Each party trains its own network into a shared
latent space; target samples are scored by their inner product with A's
prototype, the label-weighted mean of A's latents.

Per training iteration (all traffic goes through a :class:`Channel`)::

    A: forward all A rows, prototype   -> LATENTS_A (overlap z, overlap y, prototype)
    B: forward overlap rows            -> LATENTS_B (overlap z)
    A: own gradients, J^B, J^AB, reg_A -> LOSS_REPORT_A
    B: own gradients, full breakdown   -> LOSS_REPORT_B
    (optional GRADIENTS_A / GRADIENTS_B, ignored by the receiver)
    both: SGD step
    A: stop test                       -> STOP when done

Prediction: B sends PREDICT_REQUEST with its latents, A answers with
PREDICT_RESPONSE scores, B thresholds them at zero. B ends the session with
STOP.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import losses
from .errors import (
    AlignmentError,
    ChannelClosed,
    ConfigurationError,
    DimensionError,
    DivergenceError,
    LabelLeakError,
    NumericError,
    ProtocolError,
    ProtocolOrderError,
    TransportError,
)
from .losses import LossBreakdown
from .nn import MlpModel, ParamGrads, backward, forward, sgd_step
from .transport import Channel, FtlMessage, MsgKind, inprocess_pair

log = logging.getLogger(__name__)


@dataclass
class HyperParams:
    lr: float = 2e-4
    gamma: float = 1.0
    lam: float = 0.001
    max_iter: int = 200
    tol: float = 1e-6
    warmup: int = 10
    alignment: str = "squared_distance"
    faithful_exchange: bool = False

    def __post_init__(self):
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")
        if self.gamma < 0 or self.lam < 0 or self.tol < 0:
            raise ConfigurationError("gamma, lam and tol must be >= 0")
        if self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not 0 <= self.warmup < self.max_iter:
            raise ConfigurationError(
                f"warmup must satisfy 0 <= warmup < max_iter, got {self.warmup} / {self.max_iter}"
            )
        if self.alignment not in losses.ALIGNMENT_KINDS:
            raise ConfigurationError(f"unknown alignment kind {self.alignment!r}")


def _regularized(model: MlpModel, grads: ParamGrads, lam: float) -> ParamGrads:
    if lam:
        for g, w in zip(grads.weights, model.weights):
            g += lam * w
    return grads


def _overlap_index(overlap, n) -> np.ndarray:
    idx = np.asarray(overlap, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise AlignmentError(f"overlap index outside 0..{n - 1}")
    if np.unique(idx).size != idx.size:
        raise AlignmentError("overlap indices must be distinct")
    return idx


class _Party:
    # IDLE -> compute_latents -> LATENT -> receive -> EXCHANGED -> gradients -> GRADS -> apply -> IDLE
    def __init__(self, model: MlpModel, x, overlap):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != model.input_dim:
            raise DimensionError(
                f"data of shape {x.shape} does not fit a model with {model.input_dim} inputs"
            )
        self.model = model
        self.x = x
        self.overlap = _overlap_index(overlap, x.shape[0])
        self._state = "idle"
        self._cache = None
        self._grads = None

    def _require(self, state, action):
        if self._state != state:
            raise ProtocolOrderError(f"{type(self).__name__}: cannot {action} in state {self._state!r}")

    def apply_update(self, lr: float) -> None:
        self._require("grads", "apply an update")
        sgd_step(self.model, self._grads, lr)
        self._state, self._cache, self._grads = "idle", None, None

    @property
    def pending_grads(self) -> Optional[ParamGrads]:
        return self._grads


class PartyA(_Party):
    """Labeled source party."""

    def __init__(self, model: MlpModel, x, y, overlap):
        super().__init__(model, x, overlap)
        self.y = losses.check_labels(y)
        if self.y.size != self.x.shape[0]:
            raise AlignmentError(f"{self.y.size} labels for {self.x.shape[0]} samples")
        if self.y.size == 0:
            raise ConfigurationError("party A needs at least one labeled sample")

    @property
    def n_overlap(self) -> int:
        return self.overlap.size

    def prototype(self) -> np.ndarray:
        z, _ = forward(self.model, self.x)
        return losses.compute_prototype(z, self.y)

    def compute_latents(self):
        """Forward pass over all of A's rows.

        Returns ``(z_overlap, y_overlap, prototype)``, the LATENTS_A payload.
        """
        self._require("idle", "compute latents")
        z, self._cache = forward(self.model, self.x)
        self._z = z
        self._phi = losses.compute_prototype(z, self.y)
        self._state = "latent"
        return z[self.overlap], self.y[self.overlap].astype(np.int8), self._phi

    def receive(self, zb_overlap) -> None:
        self._require("latent", "accept remote latents")
        zb = np.asarray(zb_overlap, dtype=np.float64)
        if zb.shape != (self.n_overlap, self.model.output_dim):
            raise AlignmentError(
                f"remote overlap latents {zb.shape}, expected {(self.n_overlap, self.model.output_dim)}"
            )
        self._zb = zb
        self._state = "exchanged"

    def gradients(self, hyper: HyperParams):
        """Own parameter gradients of the joint objective.

        Returns ``(grads, (j_b, j_ab, j_a_reg))``.
        """
        self._require("exchanged", "compute gradients")
        ov, zb, phi = self.overlap, self._zb, self._phi
        y_ov = self.y[ov]
        scores = losses.prediction_score(phi, zb)
        j_b, g_score = losses.prediction_loss(y_ov, scores)
        # prototype is a mean over every A row, so J^B reaches all of them
        d_phi = g_score @ zb
        upstream = np.outer(self.y / self.y.size, d_phi)
        j_ab, d_za, _ = losses.alignment_loss(self._z[ov], zb, hyper.alignment)
        if hyper.gamma:
            upstream[ov] += hyper.gamma * d_za
        grads = _regularized(self.model, backward(self.model, self._cache, upstream), hyper.lam)
        self._grads = grads
        self._state = "grads"
        return grads, (j_b, j_ab, losses.regularization(self.model))


class PartyB(_Party):
    """Unlabeled target party. Refuses anything that carries labels."""

    def __init__(self, model: MlpModel, x, overlap):
        if getattr(x, "y", None) is not None:
            raise LabelLeakError("party B must not receive a labeled dataset")
        x = getattr(x, "x", x)
        super().__init__(model, x, overlap)

    def latents(self, x=None) -> np.ndarray:
        z, _ = forward(self.model, self.x if x is None else x)
        return z

    def compute_latents(self) -> np.ndarray:
        """Forward pass over the overlap rows; the LATENTS_B payload."""
        self._require("idle", "compute latents")
        z, self._cache = forward(self.model, self.x[self.overlap])
        self._z = z
        self._state = "latent"
        return z

    def receive(self, za_overlap, y_overlap, phi) -> None:
        self._require("latent", "accept remote latents")
        za = np.asarray(za_overlap, dtype=np.float64)
        if za.shape != self._z.shape:
            raise AlignmentError(f"remote overlap latents {za.shape}, expected {self._z.shape}")
        phi = np.asarray(phi, dtype=np.float64).reshape(-1)
        if phi.size != self.model.output_dim:
            raise DimensionError(f"prototype of length {phi.size}, latent dim {self.model.output_dim}")
        self._za, self._y, self._phi = za, losses.check_labels(y_overlap), phi
        self._state = "exchanged"

    def gradients(self, hyper: HyperParams):
        """Returns ``(grads, (j_b, j_ab, j_b_reg))``."""
        self._require("exchanged", "compute gradients")
        zb, phi = self._z, self._phi
        scores = losses.prediction_score(phi, zb)
        j_b, g_score = losses.prediction_loss(self._y, scores)
        upstream = np.outer(g_score, phi)
        j_ab, _, d_zb = losses.alignment_loss(self._za, zb, hyper.alignment)
        if hyper.gamma:
            upstream += hyper.gamma * d_zb
        grads = _regularized(self.model, backward(self.model, self._cache, upstream), hyper.lam)
        self._grads = grads
        self._state = "grads"
        return grads, (j_b, j_ab, losses.regularization(self.model))


def joint_objective(model_a, model_b, x_a, y_a, overlap_a, x_b, overlap_b, hyper) -> LossBreakdown:
    """Evaluate the full objective directly from both models (no protocol)."""
    z_a, _ = forward(model_a, x_a)
    phi = losses.compute_prototype(z_a, y_a)
    z_b, _ = forward(model_b, np.asarray(x_b)[np.asarray(overlap_b, dtype=np.int64)])
    za_ov = z_a[np.asarray(overlap_a, dtype=np.int64)]
    y_ov = np.asarray(y_a)[np.asarray(overlap_a, dtype=np.int64)]
    j_b, _ = losses.prediction_loss(y_ov, losses.prediction_score(phi, z_b))
    j_ab, _, _ = losses.alignment_loss(za_ov, z_b, hyper.alignment)
    return losses.total_loss(
        j_b, j_ab, losses.regularization(model_a), losses.regularization(model_b),
        hyper.gamma, hyper.lam,
    )


def _grad_message(kind, grads: ParamGrads) -> FtlMessage:
    arrays = []
    for w, b in zip(grads.weights, grads.biases):
        arrays.extend((w, b.reshape(1, -1)))
    return FtlMessage(kind, arrays=arrays)


def _check_finite(b: LossBreakdown, iteration: int) -> None:
    if not losses.is_finite_breakdown(b):
        raise DivergenceError("training loss", iteration)


def _wrap(fn, iteration_ref):
    # re-raise transport failures with the iteration they happened in
    try:
        return fn()
    except TransportError as e:
        if e.iteration is None:
            raise type(e)(str(e), iteration_ref[0]) from e
        raise


def run_party_a(party: PartyA, channel: Channel, hyper: HyperParams) -> List[LossBreakdown]:
    """Party A's training loop; sends STOP when it ends. Returns the loss trace."""
    trace: List[LossBreakdown] = []
    it_ref = [0]

    def loop():
        prev = math.inf
        for it in range(hyper.max_iter):
            it_ref[0] = it + 1
            try:
                z_ov, y_ov, phi = party.compute_latents()
            except NumericError as e:
                raise DivergenceError("party A latents", it + 1) from e
            channel.send(FtlMessage(MsgKind.LATENTS_A, matrix=z_ov, labels=y_ov, prototype=phi))
            party.receive(channel.expect(MsgKind.LATENTS_B).matrix)
            grads, (j_b, j_ab, reg_a) = party.gradients(hyper)
            partial = losses.total_loss(j_b, j_ab, reg_a, 0.0, hyper.gamma, hyper.lam)
            channel.send(FtlMessage(MsgKind.LOSS_REPORT_A, loss=partial))
            full = channel.expect(MsgKind.LOSS_REPORT_B).loss
            if (full.j_b, full.j_ab, full.j_a_reg) != (j_b, j_ab, reg_a) and losses.is_finite_breakdown(full):
                raise ProtocolError(f"party B reported inconsistent losses at iteration {it + 1}")
            if hyper.faithful_exchange:
                channel.send(_grad_message(MsgKind.GRADIENTS_A, grads))
                channel.expect(MsgKind.GRADIENTS_B)
            _check_finite(full, it + 1)
            party.apply_update(hyper.lr)
            trace.append(full)
            log.debug("iteration %d: J=%r", it + 1, full.total)
            if it + 1 == hyper.max_iter:
                break
            if it >= hyper.warmup and prev - full.total <= hyper.tol:
                if full.total > prev:
                    log.warning("loss rose at iteration %d (%r -> %r); stopping, consider a smaller learning rate",
                                it + 1, prev, full.total)
                break
            prev = full.total
        channel.send(FtlMessage(MsgKind.STOP))

    _wrap(loop, it_ref)
    return trace


def run_party_b(party: PartyB, channel: Channel, hyper: HyperParams) -> List[LossBreakdown]:
    """Party B's training loop; returns when A sends STOP."""
    trace: List[LossBreakdown] = []
    it_ref = [0]

    def loop():
        while True:
            it_ref[0] = len(trace) + 1
            msg = channel.recv()
            if msg.kind == MsgKind.STOP:
                return
            if msg.kind != MsgKind.LATENTS_A:
                raise ProtocolError(f"expected LATENTS_A or STOP, received {msg.kind.name}")
            try:
                zb = party.compute_latents()
            except NumericError as e:
                raise DivergenceError("party B latents", len(trace) + 1) from e
            channel.send(FtlMessage(MsgKind.LATENTS_B, matrix=zb))
            party.receive(msg.matrix, msg.labels, msg.prototype)
            grads, (j_b, j_ab, reg_b) = party.gradients(hyper)
            partial = channel.expect(MsgKind.LOSS_REPORT_A).loss
            full = losses.total_loss(j_b, j_ab, partial.j_a_reg, reg_b, hyper.gamma, hyper.lam)
            channel.send(FtlMessage(MsgKind.LOSS_REPORT_B, loss=full))
            if hyper.faithful_exchange:
                channel.expect(MsgKind.GRADIENTS_A)
                channel.send(_grad_message(MsgKind.GRADIENTS_B, grads))
            _check_finite(full, len(trace) + 1)
            party.apply_update(hyper.lr)
            trace.append(full)

    _wrap(loop, it_ref)
    return trace


def serve_predictions(party: PartyA, channel: Channel) -> int:
    """Answer PREDICT_REQUEST frames until B sends STOP; returns requests served."""
    phi = party.prototype()
    served = 0
    while True:
        msg = channel.recv()
        if msg.kind == MsgKind.STOP:
            return served
        if msg.kind != MsgKind.PREDICT_REQUEST:
            raise ProtocolError(f"expected PREDICT_REQUEST or STOP, received {msg.kind.name}")
        scores = losses.prediction_score(phi, msg.matrix)
        channel.send(FtlMessage(MsgKind.PREDICT_RESPONSE, matrix=scores.reshape(-1, 1)))
        served += 1


def request_predictions(party: PartyB, channel: Channel, x):
    """B side of prediction: returns ``(scores, labels)`` for the rows of ``x``."""
    z = party.latents(x)
    channel.send(FtlMessage(MsgKind.PREDICT_REQUEST, matrix=z))
    scores = channel.expect(MsgKind.PREDICT_RESPONSE).matrix.reshape(-1)
    if scores.size != z.shape[0]:
        raise ProtocolError(f"{scores.size} scores returned for {z.shape[0]} rows")
    return scores, losses.classify(scores)


def session_a(party: PartyA, channel: Channel, hyper: HyperParams) -> List[LossBreakdown]:
    """Train, then serve predictions until B closes the session."""
    try:
        trace = run_party_a(party, channel, hyper)
        serve_predictions(party, channel)
        return trace
    except BaseException:
        channel.close()
        raise


def session_b(party: PartyB, channel: Channel, hyper: HyperParams, x_eval=None):
    """Train, optionally score ``x_eval``, then send STOP.

    Returns ``(trace, scores, labels)``; the last two are None without ``x_eval``.
    """
    try:
        trace = run_party_b(party, channel, hyper)
        scores = labels = None
        if x_eval is not None:
            scores, labels = request_predictions(party, channel, x_eval)
        channel.send(FtlMessage(MsgKind.STOP))
        return trace, scores, labels
    except BaseException:
        channel.close()
        raise


@dataclass
class FtlResult:
    trace: List[LossBreakdown]
    trace_b: List[LossBreakdown] = field(default_factory=list)
    scores: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None


def _run_pair(fn_a, fn_b, timeout):
    ch_a, ch_b = inprocess_pair(timeout)
    out, err = {}, {}

    def target():
        try:
            out["b"] = fn_b(ch_b)
        except BaseException as e:  # re-raised in the caller's thread
            err["b"] = e

    t = threading.Thread(target=target, name="party-b", daemon=True)
    t.start()
    try:
        a_result = fn_a(ch_a)
    except ChannelClosed as e:
        # A usually only sees the hang-up; B's own error is the real cause
        t.join(timeout)
        if "b" in err and not isinstance(err["b"], ChannelClosed):
            raise err["b"] from e
        raise
    except BaseException:
        t.join(timeout)
        raise
    t.join(timeout)
    if "b" in err:
        raise err["b"]
    if t.is_alive():
        raise TransportError("party B did not finish")
    return a_result, out["b"]


def train_ftl(party_a: PartyA, party_b: PartyB, hyper: HyperParams, x_eval=None,
              timeout: float = 30.0) -> FtlResult:
    """Run a full session over an in-process channel, B on a helper thread.

    Both parties' models are trained in place.
    """
    trace_a, (trace_b, scores, labels) = _run_pair(
        lambda ch: session_a(party_a, ch, hyper),
        lambda ch: session_b(party_b, ch, hyper, x_eval),
        timeout,
    )
    return FtlResult(trace_a, trace_b, scores, labels)


def predict_ftl(party_a: PartyA, party_b: PartyB, x_b, timeout: float = 30.0):
    """Score target rows with already trained parties over an in-process channel."""

    def b_side(ch):
        try:
            res = request_predictions(party_b, ch, x_b)
            ch.send(FtlMessage(MsgKind.STOP))
            return res
        except BaseException:
            ch.close()
            raise

    def a_side(ch):
        try:
            return serve_predictions(party_a, ch)
        except BaseException:
            ch.close()
            raise

    _, (scores, labels) = _run_pair(a_side, b_side, timeout)
    return scores, labels
