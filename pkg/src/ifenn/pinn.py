"""Physics-informed tanh network for the non-local equivalent strain.

The network maps rows ``(x, y, g, eps_eq[, lf])`` to the non-local strain.
The ``eps_eq`` column is multiplied by ``10**c`` before the first layer and
the output is divided by ``10**c``.  Input derivatives up to the diagonal
Hessian in ``(x, y)`` and the first derivative in ``eps_eq`` are propagated
forward through each layer as extra streams that share the weights::

    a      = h W^T + b          a_s = h_s W^T
    h'     = tanh(a)
    h'_x   = t1 a_x             t1 = 1 - tanh(a)^2
    h'_xx  = t2 a_x^2 + t1 a_xx t2 = -2 tanh(a) t1

The loss gradient is obtained by reverse accumulation through those streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DivergedLoss, EmptyDataset, ParseError, ShapeMismatch, VersionMismatch
from .fem_core import IFennFeed

# stream indices
VAL, DX, DY, DXX, DYY, DEPS = range(6)
EPS_COL = 3


@dataclass(frozen=True, eq=False)
class Mlp:
    """Fully connected network; ``weights[l]`` has shape ``(fan_out, fan_in)``."""

    weights: tuple
    biases: tuple
    scale_exp: int = 2

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float).ravel() for b in self.biases)
        if len(ws) < 1 or len(ws) != len(bs):
            raise ShapeMismatch("need matching, nonempty weight and bias lists")
        for l, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or w.shape[0] != len(b):
                raise ShapeMismatch(f"layer {l}: weights {w.shape} vs biases {b.shape}")
            if l and w.shape[1] != ws[l - 1].shape[0]:
                raise ShapeMismatch(f"layer {l}: fan_in {w.shape[1]} != previous fan_out {ws[l - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")
        if ws[-1].shape[0] != 1:
            raise ShapeMismatch("output width must be 1")
        if ws[0].shape[1] not in (4, 5):
            raise ShapeMismatch("input width must be 4 or 5")
        for a in ws + bs:
            a.flags.writeable = False
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "scale_exp", int(self.scale_exp))

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def scale(self) -> float:
        return 10.0 ** self.scale_exp

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_params(self, theta) -> "Mlp":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {theta.size}")
        ws, bs, k = [], [], 0
        for w in self.weights:
            n = w.size
            ws.append(theta[k:k + n].reshape(w.shape))
            k += n
            bs.append(theta[k:k + w.shape[0]])
            k += w.shape[0]
        return Mlp(tuple(ws), tuple(bs), self.scale_exp)

    def same_as(self, other: "Mlp") -> bool:
        return (self.layer_sizes == other.layer_sizes and self.scale_exp == other.scale_exp
                and np.array_equal(self.params(), other.params()))


def init_xavier(layer_sizes: Sequence[int], seed: int = 0, scale_exp: int = 2) -> Mlp:
    """Glorot-uniform weights and zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ShapeMismatch(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Mlp(tuple(ws), tuple(bs), scale_exp)


@dataclass
class DerivBundle:
    """Network output and its input derivatives in physical units, one entry per row."""

    value: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dxx: np.ndarray
    dyy: np.ndarray
    deps: np.ndarray


def _check_inputs(mlp: Mlp, inputs) -> np.ndarray:
    z = np.asarray(inputs, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != mlp.n_inputs:
        raise ShapeMismatch(f"input rows of width {z.shape[-1]} for a network expecting {mlp.n_inputs}")
    return z


def _scaled(mlp: Mlp, z) -> np.ndarray:
    z = z.copy()
    z[:, EPS_COL] *= mlp.scale
    return z


def forward(mlp: Mlp, inputs) -> np.ndarray:
    z = _check_inputs(mlp, inputs)
    h = _scaled(mlp, z)
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.tanh(h)
    return h[:, 0] / mlp.scale


def _seed_streams(mlp: Mlp, z, n_streams):
    n, m = z.shape
    H = np.zeros((n_streams, n, m))
    H[VAL] = _scaled(mlp, z)
    H[DX, :, 0] = 1.0
    H[DY, :, 1] = 1.0
    if n_streams > DEPS:
        H[DEPS, :, EPS_COL] = mlp.scale
    return H


def _propagate(mlp: Mlp, H, keep=False):
    """Push value and derivative streams through the network.

    ``H`` has shape ``(S, n, fan_in)``; streams ``DXX``/``DYY`` (if present)
    are second derivatives, every other nonzero stream is first order.
    Returns the output streams and, if ``keep``, per-layer caches.
    """
    S = H.shape[0]
    last = len(mlp.weights) - 1
    caches = []
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        A = H @ w.T
        A[VAL] += b
        if l == last:
            if keep:
                caches.append((H, None, None))
            return A, caches
        t = np.tanh(A[VAL])
        tt = t * t
        t1 = 1.0 - tt
        t2 = -2.0 * t * t1
        Hn = np.empty_like(A)
        Hn[VAL] = t
        Hn[1:] = t1 * A[1:]
        sq = None
        if S > DXX:
            sq = A[DX] ** 2, A[DY] ** 2
            Hn[DXX] += t2 * sq[0]
            Hn[DYY] += t2 * sq[1]
        if keep:
            caches.append((H, A, (tt, t1, t2, sq)))
        H = Hn
    raise AssertionError("unreachable")


def forward_derivs(mlp: Mlp, inputs) -> DerivBundle:
    z = _check_inputs(mlp, inputs)
    out, _ = _propagate(mlp, _seed_streams(mlp, z, 6))
    o = out[:, :, 0] / mlp.scale
    return DerivBundle(o[VAL], o[DX], o[DY], o[DXX], o[DYY], o[DEPS])


def predict_feed(mlp: Mlp, inputs):
    """Output and its derivative with respect to ``eps_eq`` only."""
    z = _check_inputs(mlp, inputs)
    n, m = z.shape
    H = np.zeros((2, n, m))
    H[0] = _scaled(mlp, z)
    H[1, :, EPS_COL] = mlp.scale
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        A = H @ w.T
        A[0] += b
        if l < last:
            t = np.tanh(A[0])
            A[1] *= 1.0 - t * t
            A[0] = t
        H = A
    return H[0, :, 0] / mlp.scale, H[1, :, 0] / mlp.scale


def network_inputs(xy, g, eps_eq, lf=None, width=4) -> np.ndarray:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    n = len(xy)
    cols = [xy[:, 0], xy[:, 1], np.full(n, float(g)), np.asarray(eps_eq, dtype=float).ravel()]
    if width == 5:
        cols.append(np.full(n, float(lf) if lf is not None else 0.0))
    return np.column_stack(cols)


def ifenn_feed(mlp: Mlp, xy, g, eps_eq, lf=None) -> IFennFeed:
    """Network output and sensitivity at every integration point."""
    val, deps = predict_feed(mlp, network_inputs(xy, g, eps_eq, lf, mlp.n_inputs))
    return IFennFeed(val, deps)


# ---------------------------------------------------------------------------
# Residuals and loss
# ---------------------------------------------------------------------------


def pde_residual(bundle: DerivBundle, g, eps_eq):
    return bundle.value - g * (bundle.dxx + bundle.dyy) - np.asarray(eps_eq)


def bc_residual(bundle: DerivBundle, normal):
    normal = np.asarray(normal, dtype=float)
    return normal[..., 0] * bundle.dx + normal[..., 1] * bundle.dy


@dataclass
class CollocationSet:
    """Network input rows for interior and boundary points.

    ``interior`` and ``boundary`` have columns ``(x, y, g, eps_eq[, lf])``;
    ``normals`` holds the boundary rows' outward unit normals.
    """

    interior: np.ndarray
    boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.interior = np.asarray(self.interior, dtype=float)
        self.boundary = np.asarray(self.boundary, dtype=float).reshape(-1, self.interior.shape[-1])
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 2)
        if len(self.boundary) != len(self.normals):
            raise ShapeMismatch("one normal per boundary row required")

    @property
    def width(self) -> int:
        return self.interior.shape[1]


def _residuals(mlp: Mlp, data: CollocationSet, keep=False):
    if len(data.interior) == 0:
        raise EmptyDataset("no interior collocation points")
    if data.width != mlp.n_inputs:
        raise ShapeMismatch(f"dataset width {data.width} vs network input {mlp.n_inputs}")
    z = np.vstack([data.interior, data.boundary])
    out, caches = _propagate(mlp, _seed_streams(mlp, z, 5), keep)
    o = out[:, :, 0] / mlp.scale
    ni = len(data.interior)
    g = data.interior[:, 2]
    r_pde = o[VAL, :ni] - g * (o[DXX, :ni] + o[DYY, :ni]) - data.interior[:, EPS_COL]
    r_bc = data.normals[:, 0] * o[DX, ni:] + data.normals[:, 1] * o[DY, ni:]
    return r_pde, r_bc, caches


def loss_value(mlp: Mlp, data: CollocationSet) -> float:
    r_pde, r_bc, _ = _residuals(mlp, data)
    return float(np.linalg.norm(r_pde) + np.linalg.norm(r_bc))


def loss(mlp: Mlp, data: CollocationSet):
    """Sum of the L2 norms of the PDE and boundary residuals, with its parameter gradient."""
    r_pde, r_bc, caches = _residuals(mlp, data, keep=True)
    n_pde, n_bc = np.linalg.norm(r_pde), np.linalg.norm(r_bc)
    J = float(n_pde + n_bc)
    ni = len(r_pde)
    n = ni + len(r_bc)
    s = mlp.scale
    # adjoint of the network output streams
    G = np.zeros((5, n, 1))
    if n_pde > 0:
        rp = r_pde / n_pde / s
        G[VAL, :ni, 0] = rp
        G[DXX, :ni, 0] = -data.interior[:, 2] * rp
        G[DYY, :ni, 0] = G[DXX, :ni, 0]
    if n_bc > 0:
        rb = r_bc / n_bc / s
        G[DX, ni:, 0] = data.normals[:, 0] * rb
        G[DY, ni:, 0] = data.normals[:, 1] * rb

    grads = []
    Abar = G
    for l in range(len(mlp.weights) - 1, -1, -1):
        H, _, _ = caches[l]
        w = mlp.weights[l]
        dW = Abar.reshape(-1, Abar.shape[-1]).T @ H.reshape(-1, H.shape[-1])
        db = Abar[VAL].sum(axis=0)
        grads.append((dW, db))
        if l == 0:
            break
        Hbar = Abar @ w
        _, A, (tt, t1, t2, (sx, sy)) = caches[l - 1]
        t3 = 2.0 * t1 * (3.0 * tt - 1.0)
        Abar = t1 * Hbar
        Abar[VAL] += t2 * (Hbar[DX] * A[DX] + Hbar[DY] * A[DY] + Hbar[DXX] * A[DXX] + Hbar[DYY] * A[DYY])
        Abar[VAL] += t3 * (Hbar[DXX] * sx + Hbar[DYY] * sy)
        Abar[DX] += 2.0 * t2 * Hbar[DXX] * A[DX]
        Abar[DY] += 2.0 * t2 * Hbar[DYY] * A[DY]
    grads.reverse()
    flat = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])
    return J, flat


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    lbfgs: bool = False
    lbfgs_memory: int = 20
    lbfgs_max_steps: int = 1000
    lbfgs_grad_tol: float = 1e-8
    seed: int = 0
    hidden: tuple = (30,) * 6
    scale_exp: int = 2

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps_hat > 0):
            raise ValueError("invalid Adam constants")
        if self.lbfgs_memory < 1:
            raise ValueError("lbfgs_memory must be at least 1")


def adam_step(theta, grad, m, v, step, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new ``(theta, m, v)``."""
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    mhat = m / (1.0 - cfg.beta1**step)
    vhat = v / (1.0 - cfg.beta2**step)
    return theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps_hat), m, v


def _lbfgs(fun, theta, cfg: TrainConfig, history: list, callback=None):
    """Two-loop-recursion L-BFGS with Armijo backtracking."""
    f, g = fun(theta)
    S, Y = [], []
    for _ in range(cfg.lbfgs_max_steps):
        if np.linalg.norm(g) <= cfg.lbfgs_grad_tol:
            break
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((rho, a))
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
            q += s * (a - rho * (y @ q))
        p = -q
        slope = g @ p
        if slope >= 0:
            p, slope = -g, -(g @ g)
            S.clear()
            Y.clear()
        step = 1.0
        while True:
            trial = theta + step * p
            ft, gt = fun(trial)
            if np.isfinite(ft) and ft <= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-12:
                return theta
        s, y = trial - theta, gt - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.lbfgs_memory:
                S.pop(0)
                Y.pop(0)
        theta, f, g = trial, ft, gt
        history.append(float(f))
        if callback is not None:
            callback(len(history) - 1, float(f))
    return theta


def train(mlp: Mlp, data: CollocationSet, cfg: TrainConfig, callback=None):
    """Full-batch Adam, optionally followed by L-BFGS.

    Returns the trained network and the loss history; ``history[0]`` is the
    initial loss and each later entry the loss after one optimizer step.
    """
    theta = mlp.params()
    history = []

    def fun(th):
        J, grad = loss(mlp.with_params(th), data)
        return J, grad

    J, grad = fun(theta)
    if not np.isfinite(J):
        raise DivergedLoss("initial loss is not finite")
    history.append(J)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for epoch in range(1, cfg.epochs + 1):
        theta, m, v = adam_step(theta, grad, m, v, epoch, cfg)
        J, grad = fun(theta)
        if not np.isfinite(J) or not np.all(np.isfinite(grad)):
            raise DivergedLoss(f"loss became non-finite at epoch {epoch}")
        history.append(J)
        if callback is not None:
            callback(epoch, J)
    if cfg.lbfgs:
        theta = _lbfgs(fun, theta, cfg, history, callback)
    if cfg.epochs == 0 and not cfg.lbfgs:
        return mlp, history
    return mlp.with_params(theta), history


# ---------------------------------------------------------------------------
# Weights file
# ---------------------------------------------------------------------------

MAGIC = "MLPV1"


def save_weights(mlp: Mlp, path) -> None:
    sizes = mlp.layer_sizes
    lines = [" ".join([MAGIC, str(mlp.scale_exp), str(len(mlp.weights))] + [str(s) for s in sizes])]
    for w, b in zip(mlp.weights, mlp.biases):
        for row in w:
            lines.append(" ".join(repr(float(x)) for x in row))
        lines.append(" ".join(repr(float(x)) for x in b))
    Path(path).write_text("\n".join(lines) + "\n")


def _floats(line, lineno):
    try:
        return [float(t) for t in line.split()]
    except ValueError as exc:
        raise ParseError(f"bad number: {exc}", lineno) from None


def load_weights(path) -> Mlp:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError("empty weights file", 1)
    head = lines[0].split()
    if not head or head[0] != MAGIC:
        raise VersionMismatch(f"expected {MAGIC} header, found {head[:1]}")
    try:
        c, L = int(head[1]), int(head[2])
        sizes = [int(t) for t in head[3:]]
    except (IndexError, ValueError):
        raise ParseError("malformed header", 1) from None
    if L < 1 or len(sizes) != L + 1:
        raise VersionMismatch(f"header declares {L} layers but lists {len(sizes)} sizes")
    ws, bs = [], []
    k = 1
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        rows = []
        for _ in range(fan_out):
            if k >= len(lines):
                raise ParseError("file ends inside a weight block", k + 1)
            row = _floats(lines[k], k + 1)
            if len(row) != fan_in:
                raise VersionMismatch(f"line {k + 1}: {len(row)} weights, header declares {fan_in}")
            rows.append(row)
            k += 1
        if k >= len(lines):
            raise ParseError("file ends before a bias line", k + 1)
        b = _floats(lines[k], k + 1)
        if len(b) != fan_out:
            raise VersionMismatch(f"line {k + 1}: {len(b)} biases, header declares {fan_out}")
        k += 1
        ws.append(np.array(rows, dtype=float).reshape(fan_out, fan_in))
        bs.append(np.array(b))
    if any(line.strip() for line in lines[k:]):
        raise VersionMismatch("trailing data after the declared layers")
    return Mlp(tuple(ws), tuple(bs), c)


def rescale_first_layer(mlp: Mlp, new_exp: int) -> Mlp:
    """Equivalent network for another input scaling exponent."""
    f = 10.0 ** (mlp.scale_exp - new_exp)
    ws = [w.copy() for w in mlp.weights]
    bs = list(mlp.biases)
    ws[0][:, EPS_COL] *= f
    # output is divided by the scale: compensate in the output layer
    ws[-1] = ws[-1] * 10.0 ** (new_exp - mlp.scale_exp)
    bs[-1] = bs[-1] * 10.0 ** (new_exp - mlp.scale_exp)
    return Mlp(tuple(ws), tuple(bs), new_exp)
