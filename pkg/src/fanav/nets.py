"""Feed-forward networks with hand-written reverse-mode gradients.

All parameters of a network live in one flat vector; weight matrices and
bias vectors are reshaped views into it, so optimizer updates, soft target
blending and serialization are plain vector operations. Gradients are exact
derivatives of the affine/activation composition, verified against finite
differences in the test suite. Only the fixed loss graphs needed for
training are supported; this is deliberately not a general autodiff.

Layer l maps a -> act(a @ W_l + b_l) with a linear final layer. Activations:
relu (He-initialized) or tanh (Xavier-initialized).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh")
_ACT_CODE = {"relu": 0, "tanh": 1, "none": 2}
_ACT_FROM_CODE = {v: k for k, v in _ACT_CODE.items()}
_DTYPE_CODE = {"float32": 0, "float64": 1}
_DTYPE_FROM_CODE = {0: np.float32, 1: np.float64}


def param_count(widths: tuple[int, ...]) -> int:
    return sum(a * b + b for a, b in zip(widths, widths[1:]))


class Mlp:
    """Fixed-topology multilayer perceptron over a flat parameter vector."""

    def __init__(self, widths: tuple[int, ...], activation: str = "relu",
                 theta: np.ndarray | None = None,
                 dtype: type = np.float32):
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigError(f"bad layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{activation}'")
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.dtype = np.dtype(dtype).type
        n = param_count(self.widths)
        if theta is None:
            theta = np.zeros(n, dtype=self.dtype)
        theta = np.asarray(theta, dtype=self.dtype)
        if theta.shape != (n,):
            raise ShapeError(f"theta has shape {theta.shape}, expected ({n},)")
        self.theta = theta
        self._rebuild_views()

    def _rebuild_views(self) -> None:
        self._views: list[tuple[np.ndarray, np.ndarray]] = []
        off = 0
        for a, b in zip(self.widths, self.widths[1:]):
            W = self.theta[off:off + a * b].reshape(a, b)
            off += a * b
            bias = self.theta[off:off + b]
            off += b
            self._views.append((W, bias))

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def n_layers(self) -> int:
        return len(self._views)

    @classmethod
    def initialized(cls, widths: tuple[int, ...], activation: str,
                    rng: np.random.Generator, dtype: type = np.float32,
                    final_scale: float = 1.0) -> "Mlp":
        """He (relu) or Xavier (tanh) weight init with zero biases.

        ``final_scale`` shrinks the last layer's weights; near-zero initial
        outputs keep early policy actions small.
        """
        net = cls(widths, activation, dtype=dtype)
        gain = 2.0 if activation == "relu" else 1.0
        n_layers = net.n_layers
        for l, (W, b) in enumerate(net._views):
            std = math.sqrt(gain / W.shape[0])
            w = rng.standard_normal(W.shape) * std
            if l == n_layers - 1:
                w *= final_scale
            W[:] = w.astype(net.dtype)
            b[:] = 0
        return net

    def _act(self, z: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(z, 0)
        return np.tanh(z)

    def _dact(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return (z > 0).astype(z.dtype)
        return 1.0 - a * a

    def _check(self, arr: np.ndarray, layer: int, stage: str) -> None:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values at layer {layer} ({stage})")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batch forward pass; rows are independent samples."""
        y, _ = self._forward(x, keep_cache=False)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass retaining activations for a later backward pass."""
        return self._forward(x, keep_cache=True)

    def _forward(self, x: np.ndarray, keep_cache: bool):
        a = np.asarray(x, dtype=self.dtype)
        squeeze = a.ndim == 1
        if squeeze:
            a = a[None, :]
        if a.shape[1] != self.widths[0]:
            raise ShapeError(
                f"input width {a.shape[1]} != layer 0 width {self.widths[0]}")
        self._check(a, 0, "input")
        cache = {"inputs": [a], "pre": []} if keep_cache else None
        last = self.n_layers - 1
        for l, (W, b) in enumerate(self._views):
            z = a @ W + b
            self._check(z, l, "forward")
            a = z if l == last else self._act(z)
            if keep_cache:
                cache["pre"].append(z)
                cache["inputs"].append(a)
        if squeeze:
            return a[0], cache
        return a, cache

    def backward(self, cache: dict, dy: np.ndarray,
                 need_dx: bool = False):
        """Gradient of sum(dy * output) with respect to the flat parameters.

        ``dy`` is the upstream derivative, one row per batch row. Returns
        (grad, dx) where dx is None unless requested.
        """
        delta = np.asarray(dy, dtype=self.dtype)
        if delta.ndim == 1:
            delta = delta[None, :]
        grad = np.zeros_like(self.theta)
        goff = grad.size
        dx = None
        for l in range(self.n_layers - 1, -1, -1):
            W, b = self._views[l]
            a_in = cache["inputs"][l]
            if l != self.n_layers - 1:
                delta = delta * self._dact(cache["pre"][l], cache["inputs"][l + 1])
            gb = delta.sum(axis=0)
            gW = a_in.T @ delta
            goff -= b.size
            grad[goff:goff + b.size] = gb
            goff -= W.size
            grad[goff:goff + W.size] = gW.reshape(-1)
            if l > 0 or need_dx:
                delta = delta @ W.T
                self._check(delta, l, "backward")
            if l == 0 and need_dx:
                dx = delta
        return grad, dx

    def copy(self) -> "Mlp":
        return Mlp(self.widths, self.activation, self.theta.copy(), self.dtype)

    def astype(self, dtype: type) -> "Mlp":
        return Mlp(self.widths, self.activation,
                   self.theta.astype(dtype), dtype)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, n: int, lr: float, dtype: type = np.float32) -> "AdamState":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), 0, lr)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState
              ) -> tuple[np.ndarray, AdamState]:
    """One in-place Adam update; returns the same arrays for convenience."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ShapeError("params, grad and optimizer state sizes disagree")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adam_step")
    state.t += 1
    state.m += (1.0 - state.beta1) * (grad - state.m)
    state.v += (1.0 - state.beta2) * (grad * grad - state.v)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)
    return params, state


def soft_update(target: np.ndarray, online: np.ndarray, alpha: float) -> np.ndarray:
    """Polyak blend target <- (1 - alpha) * target + alpha * online, in place."""
    if not (0.0 < alpha <= 1.0):
        raise ConfigError("alpha must lie in (0, 1]")
    if target.shape != online.shape:
        raise ShapeError("target and online parameter sizes disagree")
    target *= (1.0 - alpha)
    target += alpha * online
    return target


# ---------------------------------------------------------------------------
# tanh-squashed Gaussian policy head
# ---------------------------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)
_BOUND_MARGIN = 1e-6


class GaussianPolicyHead:
    """Diagonal Gaussian squashed to the action box by tanh.

    The mean comes from an MLP; the log standard deviations are two
    state-independent learned parameters clamped to a fixed interval.
    Raw actions live in [-scale_i, scale_i] per channel.
    """

    def __init__(self, mean_net: Mlp, action_scale: np.ndarray,
                 log_std: np.ndarray | None = None,
                 log_std_bounds: tuple[float, float] = (-5.0, 2.0),
                 log_std_init: float = -0.5):
        if mean_net.widths[-1] != 2:
            raise ShapeError("policy mean network must have 2 outputs")
        self.mean_net = mean_net
        self.action_scale = np.asarray(action_scale, dtype=np.float64)
        if self.action_scale.shape != (2,) or np.any(self.action_scale <= 0):
            raise ConfigError("action_scale must be two positive values")
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        if log_std is None:
            log_std = np.full(2, log_std_init, dtype=mean_net.dtype)
        self.log_std = np.asarray(log_std, dtype=mean_net.dtype)
        if self.log_std.shape != (2,):
            raise ShapeError("log_std must have shape (2,)")

    @property
    def obs_dim(self) -> int:
        return self.mean_net.widths[0]

    def clipped_log_std(self) -> np.ndarray:
        lo, hi = self.log_std_bounds
        return np.clip(self.log_std.astype(np.float64), lo, hi)

    def mean_action(self, feats: np.ndarray) -> np.ndarray:
        """Deterministic action: squashed mean of the Gaussian."""
        mu = self.mean_net.forward(feats)
        return np.tanh(np.asarray(mu, np.float64)) * self.action_scale

    def sample(self, feats: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu = np.asarray(self.mean_net.forward(feats), np.float64)
        std = np.exp(self.clipped_log_std())
        z = mu + rng.standard_normal(mu.shape) * std
        return np.tanh(z) * self.action_scale

    def _inverse_squash(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = np.atleast_2d(np.asarray(actions, np.float64))
        limit = self.action_scale - _BOUND_MARGIN
        a = np.clip(a, -limit, limit)
        t = a / self.action_scale          # in (-1, 1)
        z = np.arctanh(t)
        return z, t

    def log_prob(self, feats: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Log density of raw actions, including the tanh change of variables."""
        logp, _ = self._log_prob_parts(feats, actions, keep_cache=False)
        return logp

    def _log_prob_parts(self, feats: np.ndarray, actions: np.ndarray,
                        keep_cache: bool):
        if keep_cache:
            mu, cache = self.mean_net.forward_cached(feats)
        else:
            mu, cache = self.mean_net.forward(feats), None
        mu = np.atleast_2d(np.asarray(mu, np.float64))
        z, t = self._inverse_squash(actions)
        if z.shape != mu.shape:
            raise ShapeError(f"actions shape {z.shape} != mean shape {mu.shape}")
        log_std = self.clipped_log_std()
        inv_var = np.exp(-2.0 * log_std)
        resid = z - mu
        gauss = -0.5 * (resid * resid) * inv_var - log_std - 0.5 * _LOG_2PI
        correction = np.log(self.action_scale) + np.log1p(-(t * t))
        logp = np.sum(gauss - correction, axis=1)
        parts = {"cache": cache, "resid": resid, "inv_var": inv_var,
                 "log_std": log_std}
        return logp, parts

    def nll_and_grads(self, feats: np.ndarray, actions: np.ndarray,
                      weights: np.ndarray):
        """Weighted negative log-likelihood and its parameter gradients.

        Loss = -mean_i(w_i * log pi(a_i | s_i)); returns (loss, grad wrt
        mean-net parameters, grad wrt log_std).
        """
        logp, parts = self._log_prob_parts(feats, actions, keep_cache=True)
        w = np.asarray(weights, np.float64).reshape(-1)
        if w.shape[0] != logp.shape[0]:
            raise ShapeError("weights length does not match the batch")
        n = logp.shape[0]
        loss = float(-(w @ logp) / n)
        # d loss / d mu = -(w/n) * (z - mu) / sigma^2
        dmu = (-(w[:, None] / n) * parts["resid"] * parts["inv_var"])
        grad_mean, _ = self.mean_net.backward(
            parts["cache"], dmu.astype(self.mean_net.dtype))
        # d logp / d log_std = resid^2/sigma^2 - 1 (zero where the clamp binds)
        dls = -(w[:, None] / n) * (parts["resid"] ** 2 * parts["inv_var"] - 1.0)
        grad_log_std = dls.sum(axis=0)
        lo, hi = self.log_std_bounds
        raw = self.log_std.astype(np.float64)
        grad_log_std = np.where((raw <= lo) & (grad_log_std > 0), 0.0,
                                grad_log_std)
        grad_log_std = np.where((raw >= hi) & (grad_log_std < 0), 0.0,
                                grad_log_std)
        return loss, grad_mean, grad_log_std.astype(self.mean_net.dtype)

    def copy(self) -> "GaussianPolicyHead":
        return GaussianPolicyHead(self.mean_net.copy(), self.action_scale.copy(),
                                  self.log_std.copy(), self.log_std_bounds)


# ---------------------------------------------------------------------------
# checkpoint container ("FAMLP1")
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FAMLP1"
CKPT_VERSION = 1


@dataclass
class Section:
    """One named parameter vector with its topology and optimizer state."""

    widths: tuple[int, ...]
    activation: str            # "relu" / "tanh" / "none" for bare vectors
    params: np.ndarray
    adam: AdamState | None = None

    def to_mlp(self) -> Mlp:
        if self.activation == "none":
            raise ConfigError("section holds a bare vector, not a network")
        return Mlp(self.widths, self.activation, self.params,
                   self.params.dtype.type)


def _write_vec(fh, vec: np.ndarray, dtype_str: str) -> None:
    data = np.ascontiguousarray(vec, dtype_str).tobytes()
    fh.write(np.uint64(vec.size).tobytes())
    fh.write(data)


def save_checkpoint(path: str, sections: dict[str, Section],
                    meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True,
                            separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.uint32(CKPT_VERSION).tobytes())
        fh.write(np.uint32(len(meta_bytes)).tobytes())
        fh.write(meta_bytes)
        fh.write(np.uint32(len(sections)).tobytes())
        for name, sec in sections.items():
            nb = name.encode()
            fh.write(np.uint16(len(nb)).tobytes())
            fh.write(nb)
            fh.write(np.uint32(len(sec.widths)).tobytes())
            fh.write(np.asarray(sec.widths, "<u4").tobytes())
            fh.write(np.uint8(_ACT_CODE[sec.activation]).tobytes())
            dt = np.dtype(sec.params.dtype)
            dtype_str = "<f4" if dt == np.float32 else "<f8"
            fh.write(np.uint8(_DTYPE_CODE[dt.name]).tobytes())
            _write_vec(fh, sec.params, dtype_str)
            fh.write(np.uint8(1 if sec.adam else 0).tobytes())
            if sec.adam:
                _write_vec(fh, sec.adam.m, dtype_str)
                _write_vec(fh, sec.adam.v, dtype_str)
                fh.write(np.uint64(sec.adam.t).tobytes())
                fh.write(np.float64(sec.adam.lr).tobytes())
                fh.write(np.float64(sec.adam.beta1).tobytes())
                fh.write(np.float64(sec.adam.beta2).tobytes())
                fh.write(np.float64(sec.adam.eps).tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, Section], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DataFormatError(f"{path}: truncated while reading {what}",
                                  offset=pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    def scalar(dtype: str, what: str):
        return np.frombuffer(take(np.dtype(dtype).itemsize, what), dtype)[0]

    def vec(dtype: str, what: str) -> np.ndarray:
        n = int(scalar("<u8", f"{what} length"))
        raw = take(n * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype).copy()

    magic = take(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic {magic!r}", offset=0)
    version = int(scalar("<u4", "version"))
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    meta_len = int(scalar("<u4", "meta length"))
    try:
        meta = json.loads(take(meta_len, "metadata").decode())
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad metadata ({exc})",
                              offset=pos) from exc
    n_sections = int(scalar("<u4", "section count"))
    sections: dict[str, Section] = {}
    for _ in range(n_sections):
        name_len = int(scalar("<u2", "name length"))
        name = take(name_len, "name").decode()
        n_widths = int(scalar("<u4", "widths count"))
        widths = tuple(int(w) for w in
                       np.frombuffer(take(4 * n_widths, "widths"), "<u4"))
        act = _ACT_FROM_CODE.get(int(scalar("u1", "activation code")))
        if act is None:
            raise DataFormatError(f"{path}: unknown activation code", offset=pos)
        dtype_code = int(scalar("u1", "dtype code"))
        npdtype = _DTYPE_FROM_CODE.get(dtype_code)
        if npdtype is None:
            raise DataFormatError(f"{path}: unknown dtype code", offset=pos)
        dtype_str = "<f4" if npdtype is np.float32 else "<f8"
        params = vec(dtype_str, f"{name} params").astype(npdtype)
        adam = None
        if int(scalar("u1", "adam flag")):
            m = vec(dtype_str, f"{name} adam m").astype(npdtype)
            v = vec(dtype_str, f"{name} adam v").astype(npdtype)
            t = int(scalar("<u8", "adam t"))
            lr = float(scalar("<f8", "adam lr"))
            beta1 = float(scalar("<f8", "adam beta1"))
            beta2 = float(scalar("<f8", "adam beta2"))
            eps = float(scalar("<f8", "adam eps"))
            adam = AdamState(m, v, t, lr, beta1, beta2, eps)
        sections[name] = Section(widths, act, params, adam)
    if pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - pos} trailing bytes",
                              offset=pos)
    return sections, meta


def params_digest(*vectors: np.ndarray) -> str:
    h = hashlib.sha256()
    for v in vectors:
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()
