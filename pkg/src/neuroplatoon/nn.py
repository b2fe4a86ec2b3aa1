"""Small dense leaky-ReLU networks with hand-written reverse mode and Adam.

Weights are stored as ``(out, in)`` matrices. Every layer except the last is
followed by a leaky ReLU whose negative slope is listed in ``slopes``; a slope
of 1 is the identity and a slope of 0 an exact ReLU. That is enough to express
both the Lyapunov candidate and the saturated controller as one
piecewise-linear network, which is what the MILP encoder consumes.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

DEFAULT_LEAK = 0.1


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    leak: float = DEFAULT_LEAK
    zero_bias: bool = False
    slopes: Optional[List[float]] = None
    frozen: Optional[List[bool]] = None
    # keep the pre-saturation output at exactly 0 for x = 0
    anchor_origin: bool = False
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        n_layers = len(self.weights)
        if n_layers == 0 or len(self.biases) != n_layers:
            raise ValueError("need matching, non-empty weight and bias lists")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {self.weights[i - 1].shape[0]}")
        if not 0 < self.leak < 1:
            raise ValueError("leak must lie in (0, 1)")
        if self.slopes is None:
            self.slopes = [self.leak] * (n_layers - 1)
        if len(self.slopes) != n_layers - 1:
            raise ValueError("need one activation slope per hidden layer")
        self.slopes = [float(s) for s in self.slopes]
        if self.frozen is None:
            self.frozen = [False] * n_layers
        self.frozen = [bool(f) for f in self.frozen]
        if self.zero_bias:
            self.biases = [np.zeros_like(b) for b in self.biases]

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            leak=self.leak,
            zero_bias=self.zero_bias,
            slopes=list(self.slopes),
            frozen=list(self.frozen),
            anchor_origin=self.anchor_origin,
        )

    def __call__(self, x):
        return forward(self, x)[0]


@dataclass
class Trace:
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    squeeze: bool
    version: int
    owner: int


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net):
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def __add__(self, other):
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, c):
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases])

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


@dataclass
class OptimizerState:
    m_w: List[np.ndarray]
    v_w: List[np.ndarray]
    m_b: List[np.ndarray]
    v_b: List[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_net(cls, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        zw = [np.zeros_like(w) for w in net.weights]
        zb = [np.zeros_like(b) for b in net.biases]
        return cls(zw, [z.copy() for z in zw], zb, [z.copy() for z in zb], lr, beta1, beta2, eps)


def init_mlp(layer_sizes, rng: np.random.Generator, leak=DEFAULT_LEAK, zero_bias=False, anchor_origin=False):
    """Glorot-uniform weights, zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, leak=leak, zero_bias=zero_bias, anchor_origin=anchor_origin)


def leaky_relu(z, slope):
    return np.where(z >= 0, z, slope * z)


def forward(net: MlpParams, x):
    """Evaluate the network on one input vector or a ``(batch, n_in)`` array."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != net.n_in:
        raise ValueError(f"expected input size {net.n_in}, got {h.shape[-1]}")
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else leaky_relu(z, net.slopes[i])
    u_max = saturation_limit(net)
    if u_max is not None:
        # the clamp identity is exact in real arithmetic; snap off rounding
        h = np.clip(h, -u_max, u_max)
    trace = Trace(inputs, pre, squeeze, net.version, id(net))
    return (h[0] if squeeze else h), trace


def backward(net: MlpParams, trace: Trace, out_grad):
    """Reverse-mode pass. Returns parameter gradients and the input gradient.

    ``out_grad`` has the shape of the forward output; parameter gradients are
    summed over the batch. The activation derivative at exactly 0 is taken
    from the positive branch.
    """
    if trace.owner != id(net) or trace.version != net.version:
        raise ValueError("stale trace: network changed since the forward pass")
    g = np.asarray(out_grad, dtype=float)
    if trace.squeeze:
        g = g[None, :]
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            z = trace.pre[i]
            g = g * np.where(z >= 0, 1.0, net.slopes[i])
        gw[i] = g.T @ trace.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i]
    dx = g[0] if trace.squeeze else g
    return Gradients(gw, gb), dx


def input_gradient(net: MlpParams, x):
    """d(sum of outputs)/dx, batched."""
    out, tr = forward(net, x)
    _, dx = backward(net, tr, np.ones_like(out))
    return dx


def optimizer_step(net: MlpParams, g: Gradients, st: OptimizerState):
    """One Adam update in place. Frozen layers are left untouched."""
    st.t += 1
    b1, b2 = st.beta1, st.beta2
    corr1 = 1.0 - b1**st.t
    corr2 = 1.0 - b2**st.t
    for i in range(len(net.weights)):
        if net.frozen[i]:
            continue
        for p, gr, m, v in (
            (net.weights[i], g.weights[i], st.m_w[i], st.v_w[i]),
            (net.biases[i], g.biases[i], st.m_b[i], st.v_b[i]),
        ):
            m *= b1
            m += (1 - b1) * gr
            v *= b2
            v += (1 - b2) * gr * gr
            p -= st.lr * (m / corr1) / (np.sqrt(v / corr2) + st.eps)
    _project(net)
    net.version += 1
    return net, st


def _project(net: MlpParams):
    if net.zero_bias:
        for b in net.biases:
            b[:] = 0.0
    if net.anchor_origin:
        anchor_origin(net)


def _last_trainable(net):
    idx = [i for i, f in enumerate(net.frozen) if not f]
    return idx[-1] if idx else None


def anchor_origin(net: MlpParams):
    """Shift the last trainable bias so the pre-saturation output is 0 at x = 0."""
    k = _last_trainable(net)
    if k is None:
        return
    h = np.zeros(net.n_in)
    for i in range(k + 1):
        z = net.weights[i] @ h + net.biases[i]
        h = z if i == k else leaky_relu(z, net.slopes[i])
    net.biases[k] -= h


def saturate_output(net: MlpParams, u_max: float) -> MlpParams:
    """Append frozen exact-ReLU layers computing ``clamp(y, -u_max, u_max)``.

    Uses ``relu(y + u_max) - relu(y - u_max) - u_max``, which keeps the
    composite piecewise linear.
    """
    if net.n_out != 1:
        raise ValueError("saturation needs a scalar-output network")
    if u_max <= 0:
        raise ValueError("u_max must be positive")
    out = net.copy()
    out.weights += [np.array([[1.0], [1.0]]), np.array([[1.0, -1.0]])]
    out.biases += [np.array([u_max, -u_max]), np.array([-u_max])]
    out.slopes += [1.0, 0.0]
    out.frozen += [True, True]
    out.zero_bias = False
    return out


def saturation_limit(net: MlpParams):
    """``u_max`` of a network built by :func:`saturate_output`, else None."""
    if len(net.weights) >= 3 and net.frozen[-1] and net.frozen[-2] and net.slopes[-1] == 0.0:
        return float(net.biases[-2][0])
    return None


def to_dict(net: MlpParams):
    return {
        "layer_sizes": net.layer_sizes,
        "leak": net.leak,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "zero_bias": net.zero_bias,
        "slopes": list(net.slopes),
        "frozen": list(net.frozen),
        "anchor_origin": net.anchor_origin,
    }


def from_dict(doc) -> MlpParams:
    net = MlpParams(
        weights=[np.array(w, dtype=float).reshape(len(w), -1) for w in doc["weights"]],
        biases=[np.array(b, dtype=float) for b in doc["biases"]],
        leak=doc.get("leak", DEFAULT_LEAK),
        zero_bias=doc.get("zero_bias", False),
        slopes=doc.get("slopes"),
        frozen=doc.get("frozen"),
        anchor_origin=doc.get("anchor_origin", False),
    )
    if "layer_sizes" in doc and list(doc["layer_sizes"]) != net.layer_sizes:
        raise ValueError(f"layer_sizes {doc['layer_sizes']} do not match weights {net.layer_sizes}")
    return net


def save(net: MlpParams, path):
    Path(path).write_text(json.dumps(to_dict(net)))


def load(path) -> MlpParams:
    return from_dict(json.loads(Path(path).read_text()))
