"""Small tanh MLPs on a flat parameter vector, with hand-written backprop.

An actor maps states to unbounded action means (the environment clips to
[-1, 1]); an optional critic maps states to a scalar value. Both live in one
flat vector so evolution strategies can perturb it directly and the actor
block can be copied between networks of equal shape.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .archive import read_archive, write_archive

FORMAT_VERSION = 1


class ParamError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, msg, params=None, diagnostics=None):
        super().__init__(msg)
        self.params = params
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class MlpSpec:
    n_in: int
    n_out: int
    hidden: tuple[int, ...] = (64, 64)
    head: str = "deterministic"  # or "gaussian" (state-independent log-std)
    critic_hidden: tuple[int, ...] | None = None  # None -> no critic
    init_log_std: float = -1.0
    final_scale: float = 0.01

    def __post_init__(self):
        if self.head not in ("deterministic", "gaussian"):
            raise ParamError(f"unknown head {self.head!r}")

    def actor_sizes(self):
        return (self.n_in, *self.hidden, self.n_out)

    def critic_sizes(self):
        return None if self.critic_hidden is None else (self.n_in, *self.critic_hidden, 1)

    def with_critic(self, hidden=(64, 64)) -> "MlpSpec":
        return MlpSpec(self.n_in, self.n_out, self.hidden, "gaussian", tuple(hidden), self.init_log_std, self.final_scale)


def _layout(spec: MlpSpec):
    entries = []
    off = 0

    def add(name, shape):
        nonlocal off
        size = int(np.prod(shape))
        entries.append((name, tuple(shape), off))
        off += size

    sizes = spec.actor_sizes()
    for i in range(len(sizes) - 1):
        add(f"actor/W{i}", (sizes[i], sizes[i + 1]))
        add(f"actor/b{i}", (sizes[i + 1],))
    if spec.head == "gaussian":
        add("log_std", (spec.n_out,))
    cs = spec.critic_sizes()
    if cs is not None:
        for i in range(len(cs) - 1):
            add(f"critic/W{i}", (cs[i], cs[i + 1]))
            add(f"critic/b{i}", (cs[i + 1],))
    return tuple(entries), off


@dataclass
class PolicyParams:
    spec: MlpSpec
    flat: np.ndarray
    seed: int = 0
    layout: tuple = field(init=False)

    def __post_init__(self):
        self.layout, size = _layout(self.spec)
        self.flat = np.asarray(self.flat, dtype=float)
        if self.flat.shape != (size,):
            raise ParamError(f"expected {size} parameters, got {self.flat.shape}")

    @property
    def size(self) -> int:
        return self.flat.size

    def view(self, name: str, flat=None) -> np.ndarray:
        flat = self.flat if flat is None else flat
        for nm, shape, off in self.layout:
            if nm == name:
                return flat[..., off:off + int(np.prod(shape))].reshape(*flat.shape[:-1], *shape)
        raise KeyError(name)

    def unflatten(self, flat=None) -> dict:
        return {nm: self.view(nm, flat) for nm, _, _ in self.layout}

    def block(self, prefix: str) -> slice:
        offs = [(off, off + int(np.prod(shape))) for nm, shape, off in self.layout if nm.startswith(prefix)]
        return slice(min(o[0] for o in offs), max(o[1] for o in offs))

    @property
    def actor_slice(self) -> slice:
        return self.block("actor/")

    def copy(self, flat=None) -> "PolicyParams":
        return PolicyParams(self.spec, self.flat.copy() if flat is None else np.asarray(flat, dtype=float).copy(), self.seed)

    def check(self):
        if not np.isfinite(self.flat).all():
            raise ParamError("parameters contain NaN or inf")


def flatten(spec: MlpSpec, tensors: dict) -> np.ndarray:
    layout, size = _layout(spec)
    out = np.zeros(size)
    for nm, shape, off in layout:
        out[off:off + int(np.prod(shape))] = np.asarray(tensors[nm], dtype=float).reshape(-1)
    return out


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


def init_params(spec: MlpSpec, seed: int = 0, parts=("actor", "critic", "log_std")) -> PolicyParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    p = PolicyParams(spec, np.zeros(_layout(spec)[1]), seed)
    t = p.unflatten()
    for prefix, sizes, last_gain in (("actor", spec.actor_sizes(), spec.final_scale), ("critic", spec.critic_sizes(), 1.0)):
        if sizes is None or prefix not in parts:
            continue
        n = len(sizes) - 1
        for i in range(n):
            gain = last_gain if i == n - 1 else np.sqrt(2.0)
            t[f"{prefix}/W{i}"][...] = _orthogonal(rng, sizes[i], sizes[i + 1], gain)
    if spec.head == "gaussian" and "log_std" in parts:
        t["log_std"][...] = spec.init_log_std
    return p


# -- forward / backward ---------------------------------------------------------

def _mlp(params: PolicyParams, prefix: str, n_layers: int, x, flat=None, keep=False):
    h = x
    acts = [h]
    for i in range(n_layers):
        W = params.view(f"{prefix}/W{i}", flat)
        b = params.view(f"{prefix}/b{i}", flat)
        a = h @ W + (b[..., None, :] if flat is not None and flat.ndim == 2 else b)
        h = np.tanh(a) if i < n_layers - 1 else a
        acts.append(h)
    return (h, acts) if keep else h


def forward(params: PolicyParams, x) -> np.ndarray:
    """Actor mean for states ``x`` of shape (B, n_in)."""
    if not np.isfinite(params.flat).all():
        raise ParamError("parameters contain NaN or inf")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.spec.n_in:
        raise ParamError(f"state width {x.shape[-1]} != network input {params.spec.n_in}")
    return _mlp(params, "actor", len(params.spec.actor_sizes()) - 1, x)


def forward_population(params: PolicyParams, flats, x) -> np.ndarray:
    """Actor means for a stack of parameter vectors: flats (P, D), x (P, m, n_in)."""
    return _mlp(params, "actor", len(params.spec.actor_sizes()) - 1, np.asarray(x, dtype=float), flat=np.asarray(flats))


def value(params: PolicyParams, x) -> np.ndarray:
    if params.spec.critic_hidden is None:
        raise ParamError("network has no critic")
    return _mlp(params, "critic", len(params.spec.critic_sizes()) - 1, np.asarray(x, dtype=float))[:, 0]


def _backprop(params: PolicyParams, prefix: str, acts, g_out, grad):
    n = len(acts) - 1
    g = g_out
    for i in reversed(range(n)):
        if i < n - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        W = params.view(f"{prefix}/W{i}")
        params.view(f"{prefix}/W{i}", grad)[...] += acts[i].T @ g
        params.view(f"{prefix}/b{i}", grad)[...] += g.sum(0)
        g = g @ W.T
    return g


def actor_grad(params: PolicyParams, x, g_out) -> tuple[np.ndarray, np.ndarray]:
    """Forward, then pull ``g_out = dL/d(mean)`` back to a flat gradient. Returns (mean, grad)."""
    x = np.asarray(x, dtype=float)
    out, acts = _mlp(params, "actor", len(params.spec.actor_sizes()) - 1, x, keep=True)
    grad = np.zeros_like(params.flat)
    _backprop(params, "actor", acts, np.asarray(g_out, dtype=float), grad)
    return out, grad


def critic_grad(params: PolicyParams, x, g_out) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    out, acts = _mlp(params, "critic", len(params.spec.critic_sizes()) - 1, x, keep=True)
    grad = np.zeros_like(params.flat)
    _backprop(params, "critic", acts, np.asarray(g_out, dtype=float).reshape(-1, 1), grad)
    return out[:, 0], grad


def gaussian_logp(mean, log_std, a):
    z = (a - mean) / np.exp(log_std)
    return (-0.5 * z ** 2 - log_std - 0.5 * np.log(2 * np.pi)).sum(-1)


# -- optimizer ---------------------------------------------------------------------

class Adam:
    def __init__(self, size: int, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad) -> np.ndarray:
        """Return the increment for *descent* on ``grad``."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return -self.lr * mh / (np.sqrt(vh) + self.eps)

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}

    def load(self, st: dict):
        self.m, self.v, self.t = st["m"].copy(), st["v"].copy(), int(st["t"])


# -- supervised fitting -------------------------------------------------------------

@dataclass(frozen=True)
class BcConfig:
    epochs: int = 200
    batch: int = 256
    lr: float = 1e-3
    seed: int = 0


def bc_fit(states, targets, spec: MlpSpec, cfg: BcConfig = BcConfig(), init: PolicyParams | None = None):
    """Mean-squared-error regression of the actor onto targets. Returns (params, losses)."""
    X = np.asarray(states, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    if X.shape[0] != Y.shape[0] or Y.shape[1] != spec.n_out or X.shape[1] != spec.n_in:
        raise ParamError("dataset shape does not match the network")
    params = init.copy() if init is not None else init_params(spec, cfg.seed)
    opt = Adam(params.size, cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 41]))
    n = X.shape[0]
    n_layers = len(spec.actor_sizes()) - 1
    losses = []
    for ep in range(cfg.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, cfg.batch):
            idx = perm[i:i + cfg.batch]
            out, acts = _mlp(params, "actor", n_layers, X[idx], keep=True)
            diff = out - Y[idx]
            grad = np.zeros_like(params.flat)
            _backprop(params, "actor", acts, 2.0 * diff / diff.size, grad)
            params.flat += opt.step(grad)
        loss = float(np.mean((forward(params, X) - Y) ** 2))
        if not np.isfinite(loss):
            raise DivergenceError(f"behavior cloning diverged at epoch {ep}", params, {"losses": losses})
        losses.append(loss)
    return params, losses


def transfer_actor(src: PolicyParams, dst_spec: MlpSpec, seed: int = 0) -> PolicyParams:
    """Copy the actor block into a fresh network of ``dst_spec`` (new critic and log-std)."""
    if src.spec.actor_sizes() != dst_spec.actor_sizes():
        raise ParamError(f"actor shapes differ: {src.spec.actor_sizes()} vs {dst_spec.actor_sizes()}")
    dst = init_params(dst_spec, seed)
    dst.flat[dst.actor_slice] = src.flat[src.actor_slice]
    return dst


# -- persistence -------------------------------------------------------------------

def save_params(params: PolicyParams, path, extra: dict | None = None) -> None:
    spec = asdict(params.spec)
    meta = {
        "kind": "PolicyParams",
        "version": FORMAT_VERSION,
        "spec": spec,
        "layout": [[nm, list(shape), off] for nm, shape, off in params.layout],
        "seed": params.seed,
        "extra": json.loads(json.dumps(extra or {})),
    }
    write_archive(path, {"flat": params.flat}, meta)


def load_params(path) -> tuple[PolicyParams, dict]:
    arrays, meta = read_archive(path)
    if meta.get("kind") != "PolicyParams":
        raise ParamError(f"{path} is not a parameter file")
    if meta.get("version") != FORMAT_VERSION:
        raise ParamError(f"unsupported parameter file version {meta.get('version')}")
    sd = meta["spec"]
    spec = MlpSpec(
        n_in=sd["n_in"], n_out=sd["n_out"], hidden=tuple(sd["hidden"]), head=sd["head"],
        critic_hidden=None if sd["critic_hidden"] is None else tuple(sd["critic_hidden"]),
        init_log_std=sd["init_log_std"], final_scale=sd["final_scale"],
    )
    p = PolicyParams(spec, arrays["flat"], meta["seed"])
    if [[nm, list(shape), off] for nm, shape, off in p.layout] != meta["layout"]:
        raise ParamError("stored layout does not match the spec")
    return p, meta["extra"]
