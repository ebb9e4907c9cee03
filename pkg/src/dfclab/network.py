"""Static feedforward model: parameters, forward pass and structural Jacobians.

Arrays carry an optional leading batch axis: a layer vector is ``(n,)`` or
``(B, n)``. Weight matrices are always unbatched.

Weight matrices are vectorized column-major (columns of ``W_i`` stacked), so
``vec(dv r^T) == kron(r, I) @ dv``.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from dfclab.numerics import ShapeError

ACTIVATIONS = ("tanh", "linear")


def phi(kind, v):
    if kind == "tanh":
        return np.tanh(v)
    if kind == "linear":
        return v
    raise ValueError(f"unknown activation {kind!r}")


def phi_prime(kind, v):
    if kind == "tanh":
        return 1.0 - np.tanh(v) ** 2
    if kind == "linear":
        return np.ones_like(v)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class NetworkParams:
    """Forward weights/biases and direct feedback weights of an L-layer net.

    ``weights[i]`` maps layer i to layer i+1 (0-based list, so ``weights[0]`` is
    W_1 in the usual 1-based notation). ``feedback[i]`` has shape
    ``(n_{i+1}, n_L)``.
    """
    weights: list
    biases: list
    feedback: list
    activations: list = field(default_factory=list)

    def __post_init__(self):
        L = len(self.weights)
        if not (len(self.biases) == len(self.feedback) == len(self.activations) == L):
            raise ShapeError("weights, biases, feedback and activations need one entry per layer")
        n_out = self.weights[-1].shape[0]
        for i, (w, b, q) in enumerate(zip(self.weights, self.biases, self.feedback)):
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i + 1}: weight shape {w.shape} breaks the dimension chain")
            if b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i + 1}: bias shape {b.shape}, expected {(w.shape[0],)}")
            if q.shape != (w.shape[0], n_out):
                raise ShapeError(f"layer {i + 1}: feedback shape {q.shape}, expected {(w.shape[0], n_out)}")
        for kind in self.activations:
            if kind not in ACTIVATIONS:
                raise ValueError(f"unknown activation {kind!r}")

    @property
    def depth(self):
        return len(self.weights)

    @property
    def sizes(self):
        """Layer widths ``[n_0, n_1, ..., n_L]``."""
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    def stacked_feedback(self):
        """``Q = [Q_1; ...; Q_L]`` of shape ``(sum n_i, n_L)``."""
        return np.vstack(self.feedback)

    def with_feedback(self, q):
        """Copy with feedback replaced; ``q`` is a stacked matrix or per-layer list."""
        if isinstance(q, np.ndarray):
            q = split_layers(q, self.sizes[1:], axis=0)
        return replace(self, feedback=[np.array(qi, dtype=np.float64) for qi in q])

    def copy(self):
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             [q.copy() for q in self.feedback], list(self.activations))


@dataclass
class Activations:
    """Pre- (``v``) and post-nonlinearity (``r``) activations; ``r[0]`` is the input."""
    v: list
    r: list

    @property
    def output(self):
        return self.r[-1]


def split_layers(x, sizes, axis=-1):
    """Split a concatenated per-layer vector (or matrix rows) into layer blocks."""
    idx = np.cumsum(sizes)[:-1]
    return np.split(x, idx, axis=axis)


def make_params(weights, biases=None, feedback=None, activations=None):
    """Convenience constructor that fills zero biases / feedback and linear activations."""
    weights = [np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in weights]
    n_out = weights[-1].shape[0]
    if biases is None:
        biases = [np.zeros(w.shape[0]) for w in weights]
    if feedback is None:
        feedback = [np.zeros((w.shape[0], n_out)) for w in weights]
    if activations is None:
        activations = ["linear"] * len(weights)
    return NetworkParams(weights, [np.asarray(b, dtype=np.float64).reshape(-1) for b in biases],
                         [np.atleast_2d(np.asarray(q, dtype=np.float64)) for q in feedback],
                         list(activations))


def glorot_normal(rng, n_out, n_in):
    return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_out, n_in))


def init_params(sizes, activations, rng, weight_scale=1.0):
    """Glorot-normal forward weights, zero biases, Glorot-normal random feedback."""
    sizes = list(sizes)
    L = len(sizes) - 1
    weights = [weight_scale * glorot_normal(rng, sizes[i + 1], sizes[i]) for i in range(L)]
    biases = [np.zeros(sizes[i + 1]) for i in range(L)]
    feedback = [glorot_normal(rng, sizes[i + 1], sizes[-1]) for i in range(L)]
    return NetworkParams(weights, biases, feedback, list(activations))


def forward_pass(params, r0, dv=None):
    """Feedforward equilibrium ``v_i = W_i r_{i-1} + b_i (+ dv_i)``, ``r_i = phi(v_i)``.

    ``dv`` optionally injects an offset into each layer's voltage before the
    nonlinearity; the offset then propagates downstream. The controlled steady
    state is computed this way.
    """
    r0 = np.asarray(r0, dtype=np.float64)
    if r0.shape[-1] != params.sizes[0]:
        raise ShapeError(f"input has width {r0.shape[-1]}, network expects {params.sizes[0]}")
    vs, rs = [], [r0]
    for i, (w, b, kind) in enumerate(zip(params.weights, params.biases, params.activations)):
        v = rs[-1] @ w.T + b
        if dv is not None:
            v = v + dv[i]
        vs.append(v)
        rs.append(phi(kind, v))
    return Activations(vs, rs)


def layer_jacobians(params, acts):
    """Per-layer blocks ``J_i = dr_L/dv_i``, each of shape ``(..., n_L, n_i)``.

    The derivative is taken with the voltage perturbation propagating through
    all downstream layers, evaluated at ``acts.v``.
    """
    L = params.depth
    d = [phi_prime(k, v) for k, v in zip(params.activations, acts.v)]
    blocks = [None] * L
    n_out = params.n_out
    eye = np.eye(n_out)
    blocks[-1] = eye * d[-1][..., None, :]
    for i in range(L - 2, -1, -1):
        blocks[i] = (blocks[i + 1] @ params.weights[i + 1]) * d[i][..., None, :]
    return blocks


def network_jacobian(params, acts):
    """``J = [J_1 ... J_L]`` of shape ``(..., n_L, sum n_i)``."""
    return np.concatenate(layer_jacobians(params, acts), axis=-1)


def r_matrix(acts):
    """Structural matrix ``R`` with ``J_W = J R^T`` (single sample).

    Block i of ``R^T`` is ``r_{i-1}^T kron I_{n_i}``; ``R`` has shape
    ``(sum n_i n_{i-1}, sum n_i)``.
    """
    rs = acts.r
    if np.ndim(rs[0]) != 1:
        raise ShapeError("r_matrix works on a single sample")
    n = [len(v) for v in acts.v]
    rows = sum(len(rs[i]) * n[i] for i in range(len(n)))
    out = np.zeros((rows, sum(n)))
    row = col = 0
    for i, ni in enumerate(n):
        block = np.kron(rs[i][:, None], np.eye(ni))
        out[row:row + block.shape[0], col:col + ni] = block
        row += block.shape[0]
        col += ni
    return out


def weight_jacobian(params, acts):
    """Jacobian of the output w.r.t. the column-major vectorized weights."""
    return network_jacobian(params, acts) @ r_matrix(acts).T


def outer_flat(dv_layers, r_prev_layers, scales=None):
    """Concatenate ``vec(s_i * dv_i r_{i-1}^T)`` over layers (single sample).

    Equal to ``R @ concat(dv)`` when all scales are one.
    """
    parts = []
    for i, (dv, r) in enumerate(zip(dv_layers, r_prev_layers)):
        s = 1.0 if scales is None else scales[i]
        parts.append(s * np.outer(dv, r).ravel(order="F"))
    return np.concatenate(parts)


def flatten_weights(mats):
    """Column-major concatenation of a list of matrices."""
    return np.concatenate([np.asarray(m).ravel(order="F") for m in mats])


def unflatten_weights(vec, shapes):
    out, pos = [], 0
    for shape in shapes:
        k = shape[0] * shape[1]
        out.append(vec[pos:pos + k].reshape(shape, order="F"))
        pos += k
    return out
