"""
Continuous-in-depth dense ResNet.

Forward Euler propagation of q_{k+1} = q_k + dt * sigma(W_k q_k + b_k), the reduced
loss with its smoothness and head regularizers, the backpropagated gradient and exact
Hessian-vector products (tangent-linear forward pass followed by the differentiated
backward pass).
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigurationError, PropagationDiverged

logger = logging.getLogger(__name__)

ACTIVATIONS = ('tanh', 'relu')
# hypothesis -> the only loss it may be paired with
HYPOTHESIS_LOSS = {
    'softmax': 'cross_entropy',
    'identity': 'least_squares',
}
PROBABILITY_FLOOR = 1e-12
LOG_PROBABILITY_FLOOR = float(np.log(PROBABILITY_FLOOR))


@dataclass(frozen=True)
class NetworkConfig:
    n_in: int
    n_out: int
    width: int
    K: int
    T: float = 1.0
    activation: str = 'tanh'
    hypothesis: str = 'softmax'
    loss_kind: str = 'cross_entropy'
    beta1: float = 0.0
    beta2: float = 0.0

    def __post_init__(self):
        errors = {}
        for name in ('n_in', 'n_out', 'width', 'K'):
            if int(getattr(self, name)) < 1:
                errors[name] = ['Must be at least 1.']
        if not self.T > 0 or not np.isfinite(self.T):
            errors['T'] = ['Final time must be positive and finite.']
        elif not ('K' in errors or np.isfinite(self.T / self.K)):
            errors['T'] = ['Time step T/K is not finite.']
        if self.activation not in ACTIVATIONS:
            errors['activation'] = [f"Unknown activation '{self.activation}'."]
        if self.hypothesis not in HYPOTHESIS_LOSS:
            errors['hypothesis'] = [f"Unknown hypothesis '{self.hypothesis}'."]
        elif HYPOTHESIS_LOSS[self.hypothesis] != self.loss_kind:
            errors['loss_kind'] = [
                f"Hypothesis '{self.hypothesis}' requires loss '{HYPOTHESIS_LOSS[self.hypothesis]}'."
            ]
        for name in ('beta1', 'beta2'):
            if getattr(self, name) < 0:
                errors[name] = ['Regularization weight must be non-negative.']
        if errors:
            raise ConfigurationError(errors)

    @property
    def dt(self):
        return self.T / self.K

    @property
    def block_size(self):
        return self.width * self.width + self.width

    @property
    def n_params(self):
        return (
            self.width * self.n_in
            + self.K * self.block_size
            + self.n_out * self.width
            + self.n_out
        )

    def with_blocks(self, K):
        return replace(self, K=K)


class ParamVector:
    """
    Flat parameter vector with structured views.

    Layout: (Q, W_0, b_0, ..., W_{K-1}, b_{K-1}, W_K, b_K). Every accessor returns a
    view into ``flat``, so writing through a view updates the vector.
    """

    def __init__(self, cfg, flat=None):
        size = cfg.n_params
        if flat is None:
            flat = np.zeros(size)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (size,):
                raise ValueError(f"Expected flat vector of length {size}, got shape {flat.shape}")
        self.cfg = cfg
        self.flat = flat
        self._q_end = cfg.width * cfg.n_in
        self._blocks_end = self._q_end + cfg.K * cfg.block_size
        self._head_w_end = self._blocks_end + cfg.n_out * cfg.width

    @classmethod
    def from_parts(cls, cfg, Q, blocks, head_W, head_b):
        params = cls(cfg)
        params.Q[...] = Q
        if len(blocks) != cfg.K:
            raise ValueError(f"Expected {cfg.K} blocks, got {len(blocks)}")
        for k, (W, b) in enumerate(blocks):
            params.W(k)[...] = W
            params.b(k)[...] = b
        params.head_W[...] = head_W
        params.head_b[...] = head_b
        return params

    @property
    def Q(self):
        return self.flat[:self._q_end].reshape(self.cfg.width, self.cfg.n_in)

    @property
    def blocks(self):
        """(K, width*width + width) view; row k is flat(W_k) followed by b_k."""
        return self.flat[self._q_end:self._blocks_end].reshape(self.cfg.K, self.cfg.block_size)

    def W(self, k):
        w = self.cfg.width
        return self.blocks[k, :w * w].reshape(w, w)

    def b(self, k):
        return self.blocks[k, self.cfg.width * self.cfg.width:]

    @property
    def head_W(self):
        return self.flat[self._blocks_end:self._head_w_end].reshape(self.cfg.n_out, self.cfg.width)

    @property
    def head_b(self):
        return self.flat[self._head_w_end:]

    def parts(self):
        return (
            self.Q.copy(),
            [(self.W(k).copy(), self.b(k).copy()) for k in range(self.cfg.K)],
            self.head_W.copy(),
            self.head_b.copy(),
        )

    def copy(self):
        return ParamVector(self.cfg, self.flat.copy())

    def __len__(self):
        return self.flat.size


def as_params(params, cfg):
    if isinstance(params, ParamVector):
        if params.cfg != cfg:
            raise ValueError('Parameter vector was built for a different network configuration')
        return params
    return ParamVector(cfg, params)


def as_flat(params):
    return params.flat if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    targets: np.ndarray
    indices: np.ndarray = None

    def __post_init__(self):
        features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if features.shape[0] < 1:
            raise ValueError('A batch needs at least one sample')
        if features.shape[0] != targets.shape[0]:
            raise ValueError(
                f"Row counts differ: {features.shape[0]} features vs {targets.shape[0]} targets"
            )
        indices = self.indices
        if indices is None:
            indices = np.arange(features.shape[0])
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'targets', targets)
        object.__setattr__(self, 'indices', np.asarray(indices, dtype=np.int64))

    @property
    def size(self):
        return self.features.shape[0]

    def subset(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        return Batch(self.features[positions], self.targets[positions], self.indices[positions])


def _activate(a, kind):
    if kind == 'tanh':
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _activate_prime(a, kind):
    if kind == 'tanh':
        t = np.tanh(a)
        return 1.0 - t * t
    return (a > 0.0).astype(np.float64)


def _activate_second(a, kind):
    if kind == 'tanh':
        t = np.tanh(a)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(a)


def _log_softmax(z):
    shifted = z - np.max(z, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


@dataclass
class Propagation:
    states: np.ndarray          # (K+1, n_b, width)
    preactivations: np.ndarray  # (K, n_b, width)
    logits: np.ndarray          # (n_b, n_out)
    outputs: np.ndarray         # (n_b, n_out)


def _propagate(p, cfg, features):
    n_b = features.shape[0]
    states = np.empty((cfg.K + 1, n_b, cfg.width))
    pre = np.empty((cfg.K, n_b, cfg.width))
    q = features @ p.Q.T
    if not np.isfinite(q).all():
        raise PropagationDiverged(0)
    states[0] = q
    for k in range(cfg.K):
        a = q @ p.W(k).T + p.b(k)
        q = q + cfg.dt * _activate(a, cfg.activation)
        if not np.isfinite(q).all():
            raise PropagationDiverged(k)
        pre[k] = a
        states[k + 1] = q
    logits = q @ p.head_W.T + p.head_b
    if not np.isfinite(logits).all():
        raise PropagationDiverged(cfg.K)
    if cfg.hypothesis == 'softmax':
        outputs = np.exp(_log_softmax(logits))
    else:
        outputs = logits
    return Propagation(states, pre, logits, outputs)


def forward(params, cfg, batch):
    """
    Forward Euler propagation of a batch.

    Returns:
        Propagation with all states q_0..q_K (retained for backpropagation) and the
        hypothesis outputs y_s.

    Raises:
        PropagationDiverged: a non-finite state appeared; carries the block index.
    """
    return _propagate(as_params(params, cfg), cfg, batch.features)


def predict(params, cfg, features):
    return _propagate(as_params(params, cfg), cfg, np.atleast_2d(features)).outputs


def accuracy(params, cfg, batch):
    outputs = predict(params, cfg, batch.features)
    return float(np.mean(np.argmax(outputs, axis=1) == np.argmax(batch.targets, axis=1)))


def _data_term(prop, cfg, batch):
    if cfg.loss_kind == 'cross_entropy':
        log_y = np.maximum(_log_softmax(prop.logits), LOG_PROBABILITY_FLOOR)
        per_sample = -np.sum(batch.targets * log_y, axis=1)
    else:
        residual = prop.outputs - batch.targets
        per_sample = np.sum(residual * residual, axis=1)
    return float(np.sum(per_sample) / batch.size)


def regularization_terms(params, cfg):
    """
    Returns:
        (R, S): smoothness term (beta1/2) * sum_k 1/(2 dt) ||theta_k - theta_{k-1}||^2 and
        head term (beta2/2) * (1/2 ||W_K||_F^2 + 1/2 ||b_K||^2).
    """
    p = as_params(params, cfg)
    smooth = 0.0
    if cfg.K > 1 and cfg.beta1 != 0.0:
        diff = np.diff(p.blocks, axis=0)
        smooth = 0.5 * cfg.beta1 * float(np.sum(diff * diff)) / (2.0 * cfg.dt)
    head = 0.0
    if cfg.beta2 != 0.0:
        head = 0.5 * cfg.beta2 * (
            0.5 * float(np.sum(p.head_W * p.head_W)) + 0.5 * float(np.sum(p.head_b * p.head_b))
        )
    return smooth, head


def _loss_from(prop, p, cfg, batch, data_term=True):
    smooth, head = regularization_terms(p, cfg)
    data = _data_term(prop, cfg, batch) if data_term else 0.0
    return data + smooth + head


def loss(params, cfg, batch, data_term=True):
    """Reduced loss: mean sample loss plus both regularizers."""
    p = as_params(params, cfg)
    prop = _propagate(p, cfg, batch.features) if data_term else None
    return _loss_from(prop, p, cfg, batch, data_term=data_term)


def _output_adjoint(prop, cfg, batch):
    """d(data term)/d(logits) and, for cross-entropy, the masked target mass per sample."""
    if cfg.loss_kind == 'cross_entropy':
        mask = _log_softmax(prop.logits) > LOG_PROBABILITY_FLOOR
        masked = batch.targets * mask
        mass = np.sum(masked, axis=1, keepdims=True)
        return (prop.outputs * mass - masked) / batch.size, mass
    return 2.0 * (prop.outputs - batch.targets) / batch.size, None


def _add_regularizer_gradient(p, cfg, out):
    """Adds the regularizer gradient at p to ``out``; the map is linear, so it is also the regularizer Hvp."""
    if cfg.K > 1 and cfg.beta1 != 0.0:
        diff = np.diff(p.blocks, axis=0) * (cfg.beta1 / (2.0 * cfg.dt))
        blocks = out.blocks
        blocks[1:] += diff
        blocks[:-1] -= diff
    if cfg.beta2 != 0.0:
        # d/dW of (beta2/2) * (1/2 ||W||^2) is beta2/2 * W, not beta2 * W
        out.head_W[...] += 0.5 * cfg.beta2 * p.head_W
        out.head_b[...] += 0.5 * cfg.beta2 * p.head_b


def _backward(p, cfg, batch, prop):
    grad = ParamVector(cfg)
    dz, _ = _output_adjoint(prop, cfg, batch)
    grad.head_W[...] = dz.T @ prop.states[cfg.K]
    grad.head_b[...] = np.sum(dz, axis=0)
    lam = dz @ p.head_W
    for k in reversed(range(cfg.K)):
        delta = cfg.dt * lam * _activate_prime(prop.preactivations[k], cfg.activation)
        grad.W(k)[...] = delta.T @ prop.states[k]
        grad.b(k)[...] = np.sum(delta, axis=0)
        lam = lam + delta @ p.W(k)
    grad.Q[...] = lam.T @ batch.features
    return grad


def _value_and_gradient(p, cfg, batch, data_term=True):
    if not data_term:
        grad = ParamVector(cfg)
        _add_regularizer_gradient(p, cfg, grad)
        return _loss_from(None, p, cfg, batch, data_term=False), grad.flat
    prop = _propagate(p, cfg, batch.features)
    grad = _backward(p, cfg, batch, prop)
    _add_regularizer_gradient(p, cfg, grad)
    return _loss_from(prop, p, cfg, batch), grad.flat


def gradient(params, cfg, batch, data_term=True):
    """Reduced gradient via backpropagation, same flat layout as the parameters."""
    return _value_and_gradient(as_params(params, cfg), cfg, batch, data_term=data_term)[1]


def hvp(params, cfg, batch, v):
    """
    Exact Hessian-vector product of the reduced loss (forward-over-reverse).

    Args:
        params: parameters theta
        cfg: NetworkConfig
        batch: Batch
        v: flat direction, same length as the parameters

    Returns:
        Flat vector Hess L(theta) v.
    """
    p = as_params(params, cfg)
    dv = ParamVector(cfg, as_flat(v))
    prop = _propagate(p, cfg, batch.features)
    X = batch.features
    dt = cfg.dt

    # tangent-linear forward pass
    qd = X @ dv.Q.T
    states_d = [qd]
    pre_d = []
    for k in range(cfg.K):
        a = prop.preactivations[k]
        ad = qd @ p.W(k).T + prop.states[k] @ dv.W(k).T + dv.b(k)
        qd = qd + dt * _activate_prime(a, cfg.activation) * ad
        if not np.isfinite(qd).all():
            raise PropagationDiverged(k)
        pre_d.append(ad)
        states_d.append(qd)
    q_K = prop.states[cfg.K]
    zd = qd @ p.head_W.T + q_K @ dv.head_W.T + dv.head_b

    dz, mass = _output_adjoint(prop, cfg, batch)
    if cfg.loss_kind == 'cross_entropy':
        y = prop.outputs
        yd = y * (zd - np.sum(y * zd, axis=1, keepdims=True))
        dzd = yd * mass / batch.size
    else:
        dzd = 2.0 * zd / batch.size

    # differentiated backward pass
    out = ParamVector(cfg)
    out.head_W[...] = dzd.T @ q_K + dz.T @ qd
    out.head_b[...] = np.sum(dzd, axis=0)
    lam = dz @ p.head_W
    lamd = dzd @ p.head_W + dz @ dv.head_W
    for k in reversed(range(cfg.K)):
        a = prop.preactivations[k]
        s1 = _activate_prime(a, cfg.activation)
        s2 = _activate_second(a, cfg.activation)
        delta = dt * lam * s1
        deltad = dt * (lamd * s1 + lam * s2 * pre_d[k])
        out.W(k)[...] = deltad.T @ prop.states[k] + delta.T @ states_d[k]
        out.b(k)[...] = np.sum(deltad, axis=0)
        lamd = lamd + deltad @ p.W(k) + delta @ dv.W(k)
        lam = lam + delta @ p.W(k)
    out.Q[...] = lamd.T @ X
    _add_regularizer_gradient(dv, cfg, out)
    return out.flat


def initialize_params(cfg, rng):
    """Seeded normal weights with standard deviation 1/sqrt(width); zero biases."""
    params = ParamVector(cfg)
    scale = 1.0 / np.sqrt(cfg.width)
    params.Q[...] = rng.normal(0.0, scale, size=params.Q.shape)
    for k in range(cfg.K):
        params.W(k)[...] = rng.normal(0.0, scale, size=(cfg.width, cfg.width))
    params.head_W[...] = rng.normal(0.0, scale, size=params.head_W.shape)
    return params


@dataclass
class EvaluationCounts:
    functions: int = 0
    gradients: int = 0
    hvps: int = 0


class NetworkObjective:
    """
    Reduced loss of one level's network bound to a batch.

    Every evaluation that is actually computed (cache misses only) is charged to the
    attached work ledger under (ledger.epoch, batch_id, level).
    """

    def __init__(self, cfg, batch, level=1, batch_id=0, ledger=None, cache_size=4):
        self.cfg = cfg
        self.batch = batch
        self.level = level
        self.batch_id = batch_id
        self.ledger = ledger
        self.counts = EvaluationCounts()
        self._cache_size = cache_size
        self._values = OrderedDict()
        self._gradients = OrderedDict()

    @property
    def n_samples(self):
        return self.batch.size

    def _remember(self, store, key, item):
        store[key] = item
        while len(store) > self._cache_size:
            store.popitem(last=False)

    def _charge(self, kind):
        if self.ledger is not None:
            self.ledger.record(
                epoch=self.ledger.epoch,
                batch=self.batch_id,
                level=self.level,
                n_b=self.batch.size,
                calls=1,
                kind=kind,
            )

    def value(self, theta):
        key = as_flat(theta).tobytes()
        if key in self._values:
            return self._values[key]
        p = as_params(as_flat(theta), self.cfg)
        try:
            prop = _propagate(p, self.cfg, self.batch.features)
        except PropagationDiverged as exc:
            raise exc.at_level(self.level) from exc
        value = _loss_from(prop, p, self.cfg, self.batch)
        self.counts.functions += 1
        self._charge('function')
        self._remember(self._values, key, value)
        return value

    def gradient(self, theta):
        key = as_flat(theta).tobytes()
        if key in self._gradients:
            return self._gradients[key]
        p = as_params(as_flat(theta), self.cfg)
        try:
            value, grad = _value_and_gradient(p, self.cfg, self.batch)
        except PropagationDiverged as exc:
            raise exc.at_level(self.level) from exc
        grad.flags.writeable = False
        self.counts.gradients += 1
        self._charge('gradient')
        self._remember(self._values, key, value)
        self._remember(self._gradients, key, grad)
        return grad

    def hvp(self, theta, v):
        try:
            product = hvp(as_flat(theta), self.cfg, self.batch, v)
        except PropagationDiverged as exc:
            raise exc.at_level(self.level) from exc
        self.counts.hvps += 1
        self._charge('hvp')
        return product
