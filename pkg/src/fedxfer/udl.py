"""Unsupervised baseline: autoencoder compression followed by 2-means.

The autoencoder ``x -> f(x) -> g(f(x))`` is trained on summed squared
reconstruction error, then k-means with two clusters splits the codes into two
groups. A sample's anomaly score is how much closer it sits to centroid 1 than
to centroid 0. Which cluster is "attack" is unknown, so AUCs computed from
these scores should be read orientation-free, ``max(auc, 1 - auc)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError, InsufficientDataError, NumericError
from .nn import MlpModel, as_matrix, backward, forward, init_model, sgd_step


def default_code_dim(n_features: int) -> int:
    return max(2, math.ceil(n_features / 8))


@dataclass
class Autoencoder:
    encoder: MlpModel
    decoder: MlpModel

    def __post_init__(self):
        if self.encoder.output_dim != self.decoder.input_dim:
            raise ConfigurationError(
                f"encoder emits {self.encoder.output_dim} dims, decoder takes {self.decoder.input_dim}"
            )
        if self.decoder.output_dim != self.encoder.input_dim:
            raise ConfigurationError("decoder must reconstruct the encoder's input width")

    @property
    def code_dim(self) -> int:
        return self.encoder.output_dim

    def encode(self, x) -> np.ndarray:
        return forward(self.encoder, x)[0]

    def reconstruct(self, x) -> np.ndarray:
        return forward(self.decoder, self.encode(x))[0]

    def reconstruction_error(self, x) -> float:
        x = as_matrix(x)
        r = self.reconstruct(x) - x
        return float(np.sum(r * r))

    def gradients(self, x):
        """Summed squared error on ``x`` and its grads for (encoder, decoder)."""
        x = as_matrix(x)
        code, enc_cache = forward(self.encoder, x)
        out, dec_cache = forward(self.decoder, code)
        resid = out - x
        dec_grads = backward(self.decoder, dec_cache, 2.0 * resid)
        enc_grads = backward(self.encoder, enc_cache, dec_grads.input)
        return float(np.sum(resid * resid)), enc_grads, dec_grads


def build_autoencoder(n_features, code_dim=None, hidden=64, activation="tanh", seed=0) -> Autoencoder:
    m = default_code_dim(n_features) if code_dim is None else int(code_dim)
    if m < 1:
        raise ConfigurationError(f"code dimension must be >= 1, got {m}")
    hidden_layers = [hidden] if hidden else []
    enc = init_model([n_features, *hidden_layers, m], activation, seed=seed)
    dec = init_model([m, *hidden_layers, n_features], activation, seed=seed + 1)
    return Autoencoder(enc, dec)


def train_autoencoder(x, code_dim=None, epochs=200, lr=1e-3, seed=0, batch_size=32,
                      hidden=64, activation="tanh", model: Optional[Autoencoder] = None):
    """Minibatch SGD on summed squared reconstruction error.

    Rows are reshuffled every epoch with a PCG64 stream seeded by ``seed``.

    Returns:
        ``(autoencoder, trace)`` where ``trace[e]`` is the total reconstruction
        error over all rows after epoch ``e`` and ``trace[0]`` is measured
        before any update, so the trace has ``epochs + 1`` entries.
    """
    x = as_matrix(x, "data")
    if x.shape[0] == 0:
        raise InsufficientDataError("autoencoder needs at least one row")
    ae = model or build_autoencoder(x.shape[1], code_dim, hidden, activation, seed)
    rng = np.random.default_rng([int(seed), 7])
    trace = [ae.reconstruction_error(x)]
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            _, ge, gd = ae.gradients(x[order[start:start + batch_size]])
            try:
                sgd_step(ae.encoder, ge, lr)
                sgd_step(ae.decoder, gd, lr)
            except NumericError as e:
                raise DivergenceError("reconstruction error", epoch + 1) from e
        try:
            err = ae.reconstruction_error(x)
        except NumericError as e:
            raise DivergenceError("reconstruction error", epoch + 1) from e
        if not math.isfinite(err):
            raise DivergenceError("reconstruction error", epoch + 1)
        trace.append(err)
    return ae, trace


@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, z) -> np.ndarray:
        return _sq_dists(as_matrix(z), self.centroids).argmin(axis=1)


def _sq_dists(z, c):
    d = (z * z).sum(axis=1)[:, None] - 2.0 * z @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(z, k=2, seed=0, max_iters=100) -> KMeansModel:
    """Lloyd's algorithm from ``k`` distinct seeded rows.

    A cluster that loses all its points is moved onto the point farthest from
    its currently assigned centroid. ``history`` records the inertia after
    each assignment step.
    """
    z = as_matrix(z, "codes")
    n = z.shape[0]
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if n < k:
        raise InsufficientDataError(f"{n} rows cannot form {k} clusters")
    rng = np.random.default_rng([int(seed), 11])
    centroids = z[rng.choice(n, size=k, replace=False)].copy()
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        dist = _sq_dists(z, centroids)
        new_labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = z[members].mean(axis=0)
            else:
                own = dist[np.arange(n), labels]
                far = int(own.argmax())
                centroids[j] = z[far]
                labels[far] = j
    inertia = float(_sq_dists(z, centroids)[np.arange(n), labels].sum())
    return KMeansModel(centroids, inertia, it, history)


def anomaly_score(z, km: KMeansModel) -> np.ndarray:
    """``|z - c0| - |z - c1|`` per row; larger means closer to cluster 1."""
    if km.k != 2:
        raise ConfigurationError(f"anomaly score needs k = 2, model has k = {km.k}")
    z = as_matrix(z, "codes")
    if z.shape[1] != km.centroids.shape[1]:
        raise ConfigurationError(f"codes have {z.shape[1]} dims, centroids {km.centroids.shape[1]}")
    d0 = np.linalg.norm(z - km.centroids[0], axis=1)
    d1 = np.linalg.norm(z - km.centroids[1], axis=1)
    return d0 - d1


@dataclass
class UdlResult:
    autoencoder: Autoencoder
    kmeans: KMeansModel
    trace: List[float]
    scores: np.ndarray


def run_udl(x_train, x_eval=None, code_dim=None, epochs=200, lr=1e-3, seed=0, batch_size=32) -> UdlResult:
    """Full baseline: fit the autoencoder and 2-means on ``x_train``, score ``x_eval``."""
    ae, trace = train_autoencoder(x_train, code_dim, epochs, lr, seed, batch_size)
    km = kmeans(ae.encode(x_train), 2, seed)
    target = x_train if x_eval is None else x_eval
    return UdlResult(ae, km, trace, anomaly_score(ae.encode(target), km))
