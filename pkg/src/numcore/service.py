import logging
logger = logging.getLogger(__name__)
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import erf
from sklearn.preprocessing import StandardScaler

from models.errors import ShapeError, UsageError
from models.network import Activation, NetCheckpoint, AttentionCheckpoint, ScalerCheckpoint

SQRT_2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(z: np.ndarray) -> np.ndarray:
    return z * 0.5 * (1.0 + erf(z / SQRT_2))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(z / SQRT_2)) + z * INV_SQRT_2PI * np.exp(-0.5 * z * z)


def activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.GELU:
        return gelu(z)
    if activation == Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def activate_grad(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.GELU:
        return gelu_grad(z)
    if activation == Activation.RELU:
        return (z > 0).astype(float)
    return np.ones_like(z)


@dataclass
class ForwardCache:
    owner: int
    version: int
    batched: bool
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    masks: List[np.ndarray | None]


@dataclass
class NetGradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray

    def as_list(self) -> List[np.ndarray]:
        return [grad for pair in zip(self.weights, self.biases) for grad in pair]


class DenseNet:
    """Stack of affine layers, each followed by an activation and optional inverted dropout."""

    def __init__(self,
                 layer_dims: List[int],
                 activations: List[Activation],
                 dropout_rates: List[float] = None,
                 seed: int = 0) -> None:
        if len(layer_dims) < 2 or len(activations) != len(layer_dims) - 1:
            raise ShapeError(f"{len(layer_dims)} dims need {len(layer_dims) - 1} activations, got {len(activations)}")
        dropout_rates = dropout_rates if dropout_rates is not None else [0.0] * len(activations)
        if len(dropout_rates) != len(activations) or any(not 0.0 <= rate < 1.0 for rate in dropout_rates):
            raise ShapeError("one dropout rate in [0, 1) is required per layer")
        self.layer_dims = list(layer_dims)
        self.activations = [Activation(activation) for activation in activations]
        self.dropout_rates = list(dropout_rates)
        self.seed = seed
        self.version = 0
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(layer_dims, layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def parameter_count(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def parameters(self) -> List[np.ndarray]:
        return [param for pair in zip(self.weights, self.biases) for param in pair]

    def mark_updated(self) -> None:
        self.version += 1

    def sample_masks(self, n: int, rng: np.random.Generator) -> List[np.ndarray | None]:
        masks = []
        for rate, fan_out in zip(self.dropout_rates, self.layer_dims[1:]):
            if rate == 0.0:
                masks.append(None)
            else:
                masks.append((rng.random((n, fan_out)) >= rate) / (1.0 - rate))
        return masks

    def forward(self,
                x: np.ndarray,
                dropout_active: bool = False,
                rng: np.random.Generator = None,
                masks: List[np.ndarray | None] = None) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=float)
        batched = x.ndim == 2
        h = x if batched else x[None, :]
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(f"expected input of width {self.input_dim}, got shape {x.shape}")
        if dropout_active and masks is None:
            if rng is None:
                raise UsageError("dropout needs an explicit random generator")
            masks = self.sample_masks(h.shape[0], rng)
        if not dropout_active:
            masks = [None] * len(self.weights)
        inputs, pre_activations = [], []
        for weight, bias, activation, mask in zip(self.weights, self.biases, self.activations, masks):
            inputs.append(h)
            z = h @ weight.T + bias
            pre_activations.append(z)
            h = activate(z, activation)
            if mask is not None:
                h = h * mask
        cache = ForwardCache(owner=id(self), version=self.version, batched=batched,
                             inputs=inputs, pre_activations=pre_activations, masks=list(masks))
        return (h if batched else h[0]), cache

    def backward(self, cache: ForwardCache, output_grad: np.ndarray) -> NetGradients:
        if cache.owner != id(self):
            raise UsageError("activation record was produced by a different network")
        if cache.version != self.version:
            raise UsageError("activation record is stale, parameters changed after the forward pass")
        grad = np.asarray(output_grad, dtype=float)
        grad = grad if cache.batched else grad[None, :]
        if grad.shape != cache.pre_activations[-1].shape:
            raise ShapeError(f"output gradient shape {grad.shape} does not match {cache.pre_activations[-1].shape}")
        weight_grads, bias_grads = [None] * len(self.weights), [None] * len(self.weights)
        for index in reversed(range(len(self.weights))):
            if cache.masks[index] is not None:
                grad = grad * cache.masks[index]
            grad = grad * activate_grad(cache.pre_activations[index], self.activations[index])
            weight_grads[index] = grad.T @ cache.inputs[index]
            bias_grads[index] = grad.sum(axis=0)
            grad = grad @ self.weights[index]
        return NetGradients(weights=weight_grads, biases=bias_grads,
                            inputs=grad if cache.batched else grad[0])

    def to_checkpoint(self) -> NetCheckpoint:
        return NetCheckpoint(layer_dims=self.layer_dims, activations=self.activations,
                             dropout_rates=self.dropout_rates,
                             weights=[w.ravel().tolist() for w in self.weights],
                             biases=[b.tolist() for b in self.biases], seed=self.seed)

    @classmethod
    def from_checkpoint(cls, checkpoint: NetCheckpoint) -> "DenseNet":
        net = cls(checkpoint.layer_dims, checkpoint.activations, checkpoint.dropout_rates, checkpoint.seed)
        for index, (fan_in, fan_out) in enumerate(zip(net.layer_dims, net.layer_dims[1:])):
            net.weights[index] = np.asarray(checkpoint.weights[index], dtype=float).reshape(fan_out, fan_in)
            net.biases[index] = np.asarray(checkpoint.biases[index], dtype=float)
        return net


@dataclass
class AttentionCache:
    owner: int
    version: int
    batched: bool
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray


class AttentionBlock:
    """Soft attention over input features: scores are the outer product of query and key projections."""

    def __init__(self, dim: int, seed: int = 0) -> None:
        self.dim = dim
        self.seed = seed
        self.version = 0
        self.scale = 1.0 / np.sqrt(dim)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        self.query = rng.uniform(-bound, bound, size=(dim, dim))
        self.key = rng.uniform(-bound, bound, size=(dim, dim))
        self.value = rng.uniform(-bound, bound, size=(dim, dim))

    @property
    def parameter_count(self) -> int:
        return 3 * self.dim * self.dim

    def parameters(self) -> List[np.ndarray]:
        return [self.query, self.key, self.value]

    def mark_updated(self) -> None:
        self.version += 1

    def __check_input__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = x if x.ndim == 2 else x[None, :]
        if h.ndim != 2 or h.shape[1] != self.dim:
            raise ShapeError(f"expected input of width {self.dim}, got shape {x.shape}")
        return h

    def weights(self, x: np.ndarray) -> np.ndarray:
        h = self.__check_input__(x)
        q, k = h @ self.query.T, h @ self.key.T
        scores = q[:, :, None] * k[:, None, :] * self.scale
        scores -= scores.max(axis=2, keepdims=True)
        attention = np.exp(scores)
        attention /= attention.sum(axis=2, keepdims=True)
        return attention if np.ndim(x) == 2 else attention[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, AttentionCache]:
        h = self.__check_input__(x)
        batched = np.ndim(x) == 2
        attention = self.weights(h)
        q, k, v = h @ self.query.T, h @ self.key.T, h @ self.value.T
        out = np.einsum("nij,nj->ni", attention, v)
        cache = AttentionCache(owner=id(self), version=self.version, batched=batched,
                               x=h, q=q, k=k, v=v, weights=attention)
        return (out if batched else out[0]), cache

    def backward(self, cache: AttentionCache, output_grad: np.ndarray) -> tuple[List[np.ndarray], np.ndarray]:
        if cache.owner != id(self) or cache.version != self.version:
            raise UsageError("attention record is stale or belongs to another block")
        grad = np.asarray(output_grad, dtype=float)
        grad = grad if cache.batched else grad[None, :]
        attention = cache.weights
        grad_attention = grad[:, :, None] * cache.v[:, None, :]
        grad_v = np.einsum("nij,ni->nj", attention, grad)
        grad_scores = attention * (grad_attention - (grad_attention * attention).sum(axis=2, keepdims=True))
        grad_q = np.einsum("nij,nj->ni", grad_scores, cache.k) * self.scale
        grad_k = np.einsum("nij,ni->nj", grad_scores, cache.q) * self.scale
        grads = [grad_q.T @ cache.x, grad_k.T @ cache.x, grad_v.T @ cache.x]
        grad_x = grad_q @ self.query + grad_k @ self.key + grad_v @ self.value
        return grads, (grad_x if cache.batched else grad_x[0])

    def to_checkpoint(self) -> AttentionCheckpoint:
        return AttentionCheckpoint(dim=self.dim, query=self.query.ravel().tolist(),
                                   key=self.key.ravel().tolist(), value=self.value.ravel().tolist(),
                                   seed=self.seed)

    @classmethod
    def from_checkpoint(cls, checkpoint: AttentionCheckpoint) -> "AttentionBlock":
        block = cls(checkpoint.dim, checkpoint.seed)
        shape = (checkpoint.dim, checkpoint.dim)
        block.query = np.asarray(checkpoint.query, dtype=float).reshape(shape)
        block.key = np.asarray(checkpoint.key, dtype=float).reshape(shape)
        block.value = np.asarray(checkpoint.value, dtype=float).reshape(shape)
        return block


def attention_apply(block: AttentionBlock, x: np.ndarray) -> np.ndarray:
    return block.forward(x)[0]


@dataclass
class OptimizerState:
    first_moments: List[np.ndarray]
    second_moments: List[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_parameters(cls, params: List[np.ndarray], **kwargs) -> "OptimizerState":
        return cls(first_moments=[np.zeros_like(p) for p in params],
                   second_moments=[np.zeros_like(p) for p in params], **kwargs)


def optimizer_step(params: List[np.ndarray],
                   grads: List[np.ndarray],
                   state: OptimizerState) -> tuple[List[np.ndarray], OptimizerState]:
    """Adaptive-moment update with bias correction. Parameters are updated in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moments):
        raise ShapeError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.first_moments)} moments")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for param, grad, m, v in zip(params, grads, state.first_moments, state.second_moments):
        if param.shape != grad.shape or param.shape != m.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match parameter shape {param.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


def fit_scaler(values: np.ndarray) -> ScalerCheckpoint:
    """Column mean and SD; constant columns keep scale 1."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or len(values) == 0:
        raise ShapeError(f"scaler needs a non-empty 2-d array, got shape {values.shape}")
    scaler = StandardScaler().fit(values)
    return ScalerCheckpoint(mean=scaler.mean_.tolist(), scale=scaler.scale_.tolist())
