"""Differentiable vector fields.

Every field exposes evaluation plus exact derivative products:

* ``eval(t, z)``            -> dz/dt
* ``jac_z(t, z)``           -> dense d(dz)/dz
* ``jvp_z(t, z, v)``        -> (df/dz) v
* ``vjp_z(t, z, w)``        -> (df/dz)^T w
* ``vjp_params(t, z, w)``   -> (df/dtheta)^T w, flat, summed over batch axes

States carry a trailing axis of size ``dim``; arbitrary leading batch axes
broadcast through every operation.  Handles are immutable during solves;
``set_params`` may only be called between solver iterations.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("tanh", "softplus", "identity")


def _mv(J, v):
    return (J @ v[..., None])[..., 0]


def _vm(J, w):
    return (w[..., None, :] @ J)[..., 0, :]


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _logistic(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "softplus":
        return _softplus(x)
    return x


def _act_prime(name, x):
    if name == "tanh":
        th = np.tanh(x)
        return 1.0 - th * th
    if name == "softplus":
        return _logistic(x)
    return np.ones_like(x)


class VectorFieldHandle:
    """Base class; subclasses provide ``eval`` and ``jac_z`` at minimum."""

    dim: int
    param_count: int = 0

    def eval(self, t, z):
        raise NotImplementedError

    def jac_z(self, t, z):
        raise NotImplementedError

    def jvp_z(self, t, z, v):
        return _mv(self.jac_z(t, z), v)

    def vjp_z(self, t, z, w):
        return _vm(self.jac_z(t, z), w)

    def vjp_params(self, t, z, w):
        return np.zeros(0)

    def eval_with_jac(self, t, z):
        """Fused (eval, jac_z); overridden where sharing a forward pass pays."""
        return self.eval(t, z), self.jac_z(t, z)

    def vjp_both(self, t, z, w):
        """Fused (vjp_z, vjp_params); overridden to share the backward pass."""
        return self.vjp_z(t, z, w), self.vjp_params(t, z, w)

    def get_params(self) -> np.ndarray:
        return np.zeros(0)

    def set_params(self, theta) -> None:
        if np.asarray(theta).size:
            raise ConfigError("field has no parameters")


class VanDerPol(VectorFieldHandle):
    """dp = q, dq = alpha (1 - p^2) q - p, state z = (p, q)."""

    dim = 2

    def __init__(self, alpha: float = 1.0):
        self.alpha = float(alpha)

    def eval(self, t, z):
        p, q = z[..., 0], z[..., 1]
        return np.stack([q, self.alpha * (1.0 - p * p) * q - p], axis=-1)

    def jac_z(self, t, z):
        p, q = z[..., 0], z[..., 1]
        J = np.zeros(z.shape + (2,))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -2.0 * self.alpha * p * q - 1.0
        J[..., 1, 1] = self.alpha * (1.0 - p * p)
        return J


class RayleighDuffing(VectorFieldHandle):
    """dp = q, dq = alpha p - 2 p^3 + (1 - q^2) q, state z = (p, q)."""

    dim = 2

    def __init__(self, alpha: float = 1.0):
        self.alpha = float(alpha)

    def eval(self, t, z):
        p, q = z[..., 0], z[..., 1]
        return np.stack([q, self.alpha * p - 2.0 * p ** 3 + (1.0 - q * q) * q], axis=-1)

    def jac_z(self, t, z):
        p, q = z[..., 0], z[..., 1]
        J = np.zeros(z.shape + (2,))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = self.alpha - 6.0 * p * p
        J[..., 1, 1] = 1.0 - 3.0 * q * q
        return J


class LinearField(VectorFieldHandle):
    """dz = A z."""

    def __init__(self, A):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError(f"A must be square, got shape {A.shape}")
        self.A = A
        self.dim = A.shape[0]

    def eval(self, t, z):
        return z @ self.A.T

    def jac_z(self, t, z):
        return np.broadcast_to(self.A, z.shape + (self.dim,)).copy()


class ScalarRateField(VectorFieldHandle):
    """dz = theta z with a single trainable rate parameter."""

    dim = 1
    param_count = 1

    def __init__(self, theta: float = -1.0):
        self.theta = float(theta)

    def eval(self, t, z):
        return self.theta * z

    def jac_z(self, t, z):
        return np.full(z.shape + (1,), self.theta)

    def vjp_params(self, t, z, w):
        return np.array([float(np.sum(w * z))])

    def get_params(self):
        return np.array([self.theta])

    def set_params(self, theta):
        self.theta = float(np.asarray(theta).reshape(()))


class Plant:
    """Controlled dynamics f(t, z, u) with analytic partials in z and u."""

    dim: int
    input_dim: int

    def eval(self, t, z, u):
        raise NotImplementedError

    def jac_z(self, t, z, u):
        raise NotImplementedError

    def jac_u(self, t, z, u):
        raise NotImplementedError


class MechanicalPlant(Plant):
    """One degree of freedom: dq = p, dp = u, state z = (q, p)."""

    dim = 2
    input_dim = 1

    def eval(self, t, z, u):
        return np.stack([z[..., 1], u[..., 0]], axis=-1)

    def jac_z(self, t, z, u):
        J = np.zeros(z.shape + (2,))
        J[..., 0, 1] = 1.0
        return J

    def jac_u(self, t, z, u):
        J = np.zeros(z.shape[:-1] + (2, 1))
        J[..., 1, 0] = 1.0
        return J


class LinearPlant(Plant):
    """dz = A z + B u."""

    def __init__(self, A, B):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError(f"A must be square, got shape {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ConfigError(
                f"B rows must match A dimension {A.shape[0]}, got shape {B.shape}"
            )
        self.A, self.B = A, B
        self.dim = A.shape[0]
        self.input_dim = B.shape[1]

    def eval(self, t, z, u):
        return z @ self.A.T + u @ self.B.T

    def jac_z(self, t, z, u):
        return np.broadcast_to(self.A, z.shape + (self.dim,)).copy()

    def jac_u(self, t, z, u):
        return np.broadcast_to(self.B, z.shape[:-1] + self.B.shape).copy()


class PlantField(VectorFieldHandle):
    """A plant with its control input clamped to zero (open loop)."""

    def __init__(self, plant: Plant):
        self.plant = plant
        self.dim = plant.dim

    def _u0(self, z):
        return np.zeros(z.shape[:-1] + (self.plant.input_dim,))

    def eval(self, t, z):
        return self.plant.eval(t, z, self._u0(z))

    def jac_z(self, t, z):
        return self.plant.jac_z(t, z, self._u0(z))


class Mlp:
    """Fully connected network with manual forward and reverse passes.

    Parameters live in a canonical flat vector: layers in forward order,
    each layer's weight matrix row-major, then its bias.
    """

    def __init__(self, widths, activations, weights, biases):
        widths = [int(w) for w in widths]
        activations = list(activations)
        if len(activations) != len(widths) - 1:
            raise ConfigError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ConfigError(f"layer {i} shape mismatch")
        self.widths = widths
        self.activations = activations
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]

    @classmethod
    def init(cls, widths, activations, seed=0) -> "Mlp":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(widths, activations, weights, biases)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)]
        )

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ConfigError(f"expected {self.n_params} parameters, got {theta.shape}")
        k = 0
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[k : k + W.size].reshape(W.shape).copy()
            k += W.size
            self.biases[i] = theta[k : k + b.size].copy()
            k += b.size

    def forward(self, z):
        a = z
        for W, b, act in zip(self.weights, self.biases, self.activations):
            a = _act(act, a @ W.T + b)
        return a

    def forward_cache(self, z):
        """Returns (output, cache); the cache feeds vjp without re-evaluation."""
        inputs, pres = [], []
        a = z
        for W, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(a)
            pre = a @ W.T + b
            pres.append(pre)
            a = _act(act, pre)
        return a, (inputs, pres)

    def eval_with_derivatives(self, z):
        """One forward pass yielding (output, jac_z, cache); the cache feeds
        :meth:`vjp` without re-evaluation."""
        out, cache = self.forward_cache(z)
        return out, self.jac_from_cache(cache), cache

    def jac_z(self, z):
        """Product of layer Jacobians, shape (..., out_dim, in_dim)."""
        _, cache = self.forward_cache(z)
        return self.jac_from_cache(cache)

    def jac_from_cache(self, cache):
        _, pres = cache
        J = None
        for W, act, pre in zip(self.weights, self.activations, pres):
            layer = _act_prime(act, pre)[..., :, None] * W
            J = layer if J is None else layer @ J
        return J

    def vjp(self, cache, w):
        """Reverse pass: returns (d/dz, flat d/dparams summed over batch axes)."""
        inputs, pres = cache
        grads = [None] * len(self.weights)
        g = w
        for i in reversed(range(len(self.weights))):
            g_pre = g * _act_prime(self.activations[i], pres[i])
            flat_g = g_pre.reshape(-1, g_pre.shape[-1])
            flat_in = inputs[i].reshape(-1, inputs[i].shape[-1])
            gW = flat_g.T @ flat_in
            gb = flat_g.sum(axis=0)
            grads[i] = (gW, gb)
            g = g_pre @ self.weights[i]
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
        return g, flat

    def to_json(self) -> str:
        return json.dumps(
            {
                "widths": self.widths,
                "activations": self.activations,
                "params": self.pack().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Mlp":
        doc = json.loads(text)
        net = cls.init(doc["widths"], doc["activations"], seed=0)
        net.set_flat(np.asarray(doc["params"], dtype=float))
        return net


class MlpVectorField(VectorFieldHandle):
    """Autonomous field dz = net(z) for a square network."""

    def __init__(self, net: Mlp):
        if net.in_dim != net.out_dim:
            raise ConfigError("an MLP vector field needs in_dim == out_dim")
        self.net = net
        self.dim = net.in_dim

    @property
    def param_count(self) -> int:
        return self.net.n_params

    def eval(self, t, z):
        return self.net.forward(z)

    def jac_z(self, t, z):
        return self.net.jac_z(z)

    def vjp_z(self, t, z, w):
        _, cache = self.net.forward_cache(z)
        dz, _ = self.net.vjp(cache, w)
        return dz

    def vjp_params(self, t, z, w):
        _, cache = self.net.forward_cache(z)
        _, flat = self.net.vjp(cache, w)
        return flat

    def eval_with_jac(self, t, z):
        out, cache = self.net.forward_cache(z)
        return out, self.net.jac_from_cache(cache)

    def vjp_both(self, t, z, w):
        _, cache = self.net.forward_cache(z)
        return self.net.vjp(cache, w)

    def get_params(self):
        return self.net.pack()

    def set_params(self, theta):
        self.net.set_flat(theta)


class ControlledField(VectorFieldHandle):
    """Closed loop f(t, z, pi(z)) for a plant and a state-feedback network."""

    def __init__(self, plant, controller: Mlp):
        if isinstance(plant, PlantField):
            plant = plant.plant
        if controller.in_dim != plant.dim:
            raise ConfigError(
                f"controller input {controller.in_dim} != plant dimension {plant.dim}"
            )
        if controller.out_dim != plant.input_dim:
            raise ConfigError(
                f"controller output {controller.out_dim} != plant input {plant.input_dim}"
            )
        self.plant = plant
        self.controller = controller
        self.dim = plant.dim

    @property
    def param_count(self) -> int:
        return self.controller.n_params

    def eval(self, t, z):
        return self.plant.eval(t, z, self.controller.forward(z))

    def jac_z(self, t, z):
        return self.eval_with_jac(t, z)[1]

    def eval_with_jac(self, t, z):
        u, cache = self.controller.forward_cache(z)
        Ju = self.plant.jac_u(t, z, u)
        Jpi = self.controller.jac_from_cache(cache)
        return self.plant.eval(t, z, u), self.plant.jac_z(t, z, u) + Ju @ Jpi

    def vjp_z(self, t, z, w):
        return self.vjp_both(t, z, w)[0]

    def vjp_params(self, t, z, w):
        return self.vjp_both(t, z, w)[1]

    def vjp_both(self, t, z, w):
        u, cache = self.controller.forward_cache(z)
        u_cot = _vm(self.plant.jac_u(t, z, u), w)
        dz, flat = self.controller.vjp(cache, u_cot)
        return _vm(self.plant.jac_z(t, z, u), w) + dz, flat

    def get_params(self):
        return self.controller.pack()

    def set_params(self, theta):
        self.controller.set_flat(theta)


def make_builtin(name: str, *params) -> VectorFieldHandle:
    """Construct an analytic builtin field by name.

    ``linear`` takes a square matrix A; ``linear_controlled`` takes (A, B) and
    returns the open-loop plant (compose with :class:`ControlledField` to
    close the loop); ``mechanical_1dof`` likewise."""
    if name == "vanderpol":
        return VanDerPol(*params)
    if name == "rayleigh_duffing":
        return RayleighDuffing(*params)
    if name == "linear":
        return LinearField(*params)
    if name == "linear_controlled":
        return PlantField(LinearPlant(*params))
    if name == "mechanical_1dof":
        return PlantField(MechanicalPlant())
    raise ConfigError(f"unknown builtin field {name!r}")


def load_matrix_csv(path) -> np.ndarray:
    """Read a dense matrix from text: a '# rows cols' header line, then one
    comma-separated row per line."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln]
    if not lines or not lines[0][1].startswith("#"):
        raise ConfigError(f"{path}: missing '# rows cols' header line")
    head = lines[0][1].lstrip("#").split()
    if len(head) != 2:
        raise ConfigError(f"{path}: header must be '# rows cols'")
    rows, cols = int(head[0]), int(head[1])
    body = lines[1:]
    if len(body) != rows:
        raise ConfigError(f"{path}: expected {rows} data rows, found {len(body)}")
    out = np.empty((rows, cols))
    for r, (lineno, ln) in enumerate(body):
        parts = ln.split(",")
        if len(parts) != cols:
            raise ConfigError(f"{path}:{lineno}: expected {cols} columns, found {len(parts)}")
        for c, item in enumerate(parts):
            try:
                val = float(item)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value in column {c + 1}") from e
            if not np.isfinite(val):
                raise ConfigError(f"{path}:{lineno}: non-finite entry at column {c + 1}")
            out[r, c] = val
    return out
