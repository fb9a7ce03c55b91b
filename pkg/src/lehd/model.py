"""Light-encoder / heavy-decoder network and the heavy-encoder baseline.

All forward code works on batches ``(B, rows, d)``; the single-instance
functions wrap a batch of one.  Decoder action layout, per batch row::

    TSP : [destination, start, avail_0, ..., avail_{m-1}]            (m + 2 logits)
    CVRP: same rows, two logits each, flattened row-major            (2(m + 2) logits)
          column 0 = reached from the previous customer, column 1 = via the depot

The destination and start rows are always masked, so probabilities live on
the available rows only.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .routing import CvrpInstance, CvrpSolution, Tour, TspInstance, validate
from .tensor import Tensor

NORMALIZATIONS = ("none", "batch", "instance")


@dataclass(frozen=True)
class ModelConfig:
    problem: str = "tsp"
    embed_dim: int = 64
    decoder_layers: int = 3
    heads: int = 4
    ff_dim: int = 256
    normalization: str = "none"
    arch: str = "lehd"

    def __post_init__(self):
        if self.problem not in ("tsp", "cvrp"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.arch not in ("lehd", "held"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.arch == "held" and self.problem != "tsp":
            raise ValueError("the heavy-encoder baseline is implemented for TSP only")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.decoder_layers < 1:
            raise ValueError("need at least one decoder layer")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")

    @classmethod
    def full_scale(cls, problem="tsp", **kw):
        return cls(problem=problem, embed_dim=128, decoder_layers=6, heads=8, ff_dim=512, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def in_dim(self) -> int:
        return 2 if self.problem == "tsp" else 3


def _layer_shapes(prefix, cfg, q_dim=None):
    d, f = cfg.embed_dim, cfg.ff_dim
    shapes = [(f"{prefix}.Wq", (q_dim or d, d)), (f"{prefix}.Wk", (d, d)),
              (f"{prefix}.Wv", (d, d)), (f"{prefix}.Wo", (d, d))]
    if q_dim is not None:
        return shapes
    shapes += [(f"{prefix}.ff1.W", (d, f)), (f"{prefix}.ff1.b", (f,)),
               (f"{prefix}.ff2.W", (f, d)), (f"{prefix}.ff2.b", (d,))]
    if cfg.normalization != "none":
        shapes += [(f"{prefix}.norm1.g", (d,)), (f"{prefix}.norm1.b", (d,)),
                   (f"{prefix}.norm2.g", (d,)), (f"{prefix}.norm2.b", (d,))]
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.embed_dim
    shapes = [("embed.W", (cfg.in_dim, d)), ("embed.b", (d,))]
    if cfg.arch == "lehd":
        shapes += _layer_shapes("enc.0", cfg)
        for l in range(cfg.decoder_layers):
            shapes += _layer_shapes(f"dec.{l}", cfg)
        shapes += [("W1", (d, d)), ("W2", (d, d)),
                   ("WO", (d, 1 if cfg.problem == "tsp" else 2))]
        if cfg.problem == "cvrp":
            shapes.append(("cap", (1, d)))
    else:
        for l in range(cfg.decoder_layers):
            shapes += _layer_shapes(f"enc.{l}", cfg)
        shapes += _layer_shapes("ctx", cfg, q_dim=3 * d)
        shapes += [("WC", (d, d)), ("WE", (d, d))]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


class LehdModel:
    """Parameters plus configuration.  ``params`` maps name -> leaf Tensor."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = dict(param_shapes(config))
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter names do not match config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise ValueError(f"{name}: shape {params[name].shape} does not match config {shape}")
        self.config = config
        self.params = {name: params[name] for name, _ in param_shapes(config)}

    @classmethod
    def initialize(cls, config: ModelConfig, rng=0) -> "LehdModel":
        g = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        bound = 1.0 / math.sqrt(config.embed_dim)
        params = {}
        for name, shape in param_shapes(config):
            if name.endswith(".g"):
                data = np.ones(shape)
            elif ".norm" in name:
                data = np.zeros(shape)
            else:
                data = g.uniform(-bound, bound, size=shape)
            params[name] = T.parameter(data, name=name)
        return cls(config, params)

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "LehdModel":
        return LehdModel(self.config, {k: T.parameter(v.data.copy(), name=k) for k, v in self.params.items()})

    def save(self, path, **meta):
        T.save_checkpoint(path, self.params, meta={"model_config": self.config.to_dict(), **meta})

    @classmethod
    def load(cls, path) -> "LehdModel":
        params, meta = T.load_checkpoint(path)
        if "model_config" not in meta:
            raise ValueError(f"{path}: checkpoint has no model_config header")
        return cls(ModelConfig.from_dict(meta["model_config"]), params)


# --------------------------------------------------------------------------- layers

def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1, *x.shape)), True
    return x, False


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, s: float) -> np.ndarray:
    # inference path: one (mq, m) score buffer per head, softmax in place.
    # Large batched temporaries are freshly mapped pages on every call.
    out = np.empty(q.shape[:2] + v.shape[2:])
    for h in range(len(q)):
        a = q[h] @ k[h].T
        a *= s
        a -= a.max(axis=-1, keepdims=True)
        np.exp(a, out=a)
        a /= a.sum(axis=-1, keepdims=True)
        np.matmul(a, v[h], out=out[h])
    return out


def mha(q_in: Tensor, kv_in: Tensor, p: dict, prefix: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention, (B,mq,dq) x (B,m,d) -> (B,mq,d)."""
    B, mq, _ = q_in.shape
    m = kv_in.shape[1]
    d = p[f"{prefix}.Wk"].shape[1]
    dk = d // heads

    def split(x, rows):
        x = T.reshape(x, (B, rows, heads, dk))
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B * heads, rows, dk))

    q = split(q_in @ p[f"{prefix}.Wq"], mq)
    k = split(kv_in @ p[f"{prefix}.Wk"], m)
    v = split(kv_in @ p[f"{prefix}.Wv"], m)
    if T.recording():
        att = T.softmax(T.scale(q @ T.transpose(k), 1.0 / math.sqrt(dk)))
        ctx = att @ v
    else:
        ctx = T.tensor(_attend(q.data, k.data, v.data, 1.0 / math.sqrt(dk)))
    out = T.reshape(ctx, (B, heads, mq, dk))
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, mq, d))
    return out @ p[f"{prefix}.Wo"]


def _normalize(x: Tensor, p: dict, prefix: str, mode: str) -> Tensor:
    if mode == "none":
        return x
    axes = (0, 1) if mode == "batch" else (1,)
    x = T.standardize(x, axes)
    return T.add_bias(T.scale_cols(x, p[f"{prefix}.g"]), p[f"{prefix}.b"])


def attention_layer(H: Tensor, p: dict, prefix: str, heads: int, normalization: str = "none") -> Tensor:
    """Residual MHA sub-layer followed by a residual feed-forward sub-layer."""
    H, squeeze = _as_batch(H)
    d = p[f"{prefix}.Wq"].shape[0]
    if H.shape[-1] != d:
        raise T.ShapeError(f"attention_layer[{prefix}]", H.shape, p[f"{prefix}.Wq"].shape)
    h = H + mha(H, H, p, prefix, heads)
    h = _normalize(h, p, f"{prefix}.norm1", normalization)
    ff = T.relu(T.add_bias(h @ p[f"{prefix}.ff1.W"], p[f"{prefix}.ff1.b"]))
    ff = T.add_bias(ff @ p[f"{prefix}.ff2.W"], p[f"{prefix}.ff2.b"])
    out = _normalize(h + ff, p, f"{prefix}.norm2", normalization)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


def _features(instance) -> np.ndarray:
    if isinstance(instance, TspInstance):
        return np.asarray(instance.coords, dtype=np.float64)
    return instance.features()


def encode_features(model: LehdModel, feats: np.ndarray) -> Tensor:
    """(B, N, f) raw node features -> (B, N, d) node embeddings."""
    cfg, p = model.config, model.params
    X = T.tensor(feats)
    if X.ndim != 3 or X.shape[-1] != cfg.in_dim:
        raise T.ShapeError("encode", X.shape, (None, None, cfg.in_dim))
    H = T.add_bias(X @ p["embed.W"], p["embed.b"])
    n_enc = 1 if cfg.arch == "lehd" else cfg.decoder_layers
    for l in range(n_enc):
        H = attention_layer(H, p, f"enc.{l}", cfg.heads, cfg.normalization)
    return H


def encode(instance, model: LehdModel) -> Tensor:
    """Node embeddings for one instance: (n, d) for TSP, (n+1, d) for CVRP."""
    H = encode_features(model, _features(instance)[None])
    return T.reshape(H, H.shape[1:])


# --------------------------------------------------------------------------- decoders

def _rows(H: Tensor, idx) -> Tensor:
    """Select rows with a slice, a (B,) array (one row each) or a (B, k) array."""
    if isinstance(idx, slice):
        return T.select_rows(H, idx)
    idx = np.asarray(idx)
    if idx.ndim == 1:
        idx = idx[:, None]
    return T.select_rows(H, idx)


def cvrp_action_mask(rem: np.ndarray, avail_demand: np.ndarray, at_depot: np.ndarray) -> np.ndarray:
    """(B, 2(m+2)) boolean mask.

    ``rem``: (B,) remaining integer capacity; ``avail_demand``: (B, m) integer
    demands of the available customers; ``at_depot``: (B,) bool, true when the
    vehicle stands at the depot (first move must then go via the depot).
    """
    B, m = avail_demand.shape
    mask = np.zeros((B, m + 2, 2), dtype=bool)
    mask[:, :2, :] = True
    mask[:, 2:, 0] = (avail_demand > rem[:, None]) | at_depot[:, None]
    return mask.reshape(B, 2 * (m + 2))


def tsp_action_mask(B: int, m: int) -> np.ndarray:
    mask = np.zeros((B, m + 2), dtype=bool)
    mask[:, :2] = True
    return mask


def decoder_logits(model: LehdModel, H: Tensor, dest, start, avail, mask: np.ndarray,
                   cap_feature: np.ndarray | None = None, context: Tensor | None = None) -> Tensor:
    """Masked action logits for a batch of decoding states.

    ``H`` holds the encoder embeddings (B, N, d).  ``dest``/``start`` pick one
    row per batch item and ``avail`` the available rows (slices or index
    arrays).  ``cap_feature`` is the (B,) remaining capacity in [0, 1] (CVRP).
    """
    cfg, p = model.config, model.params
    if cfg.arch == "held":
        return _held_logits(model, H, dest, start, avail, mask, context)
    B = H.shape[0]
    h_dest = _rows(H, dest) @ p["W1"]
    h_start = _rows(H, start) @ p["W2"]
    if cfg.problem == "cvrp":
        c = T.tensor(np.asarray(cap_feature, dtype=np.float64).reshape(B, 1, 1)) @ p["cap"]
        h_dest = h_dest + c
        h_start = h_start + c
    X = T.concat([h_dest, h_start, _rows(H, avail)])
    for l in range(cfg.decoder_layers):
        X = attention_layer(X, p, f"dec.{l}", cfg.heads, cfg.normalization)
    u = X @ p["WO"]
    u = T.reshape(u, (B, u.shape[1] * u.shape[2]))
    return T.masked_fill(u, mask)


def held_context(model: LehdModel, H: Tensor) -> Tensor:
    """Mean node embedding (B, 1, d) used by the heavy-encoder decoder."""
    B, N, d = H.shape
    return T.reshape(T.scale(T.sum(H, axis=1), 1.0 / N), (B, 1, d))


def _held_logits(model, H, dest, start, avail, mask, context=None):
    cfg, p = model.config, model.params
    B, N, d = H.shape
    if context is None:
        context = held_context(model, H)
    h_c = T.concat([context, _rows(H, start), _rows(H, dest)], axis=-1)
    h_c = mha(h_c, H, p, "ctx", cfg.heads)
    Ha = _rows(H, avail)
    m = Ha.shape[1]
    compat = (h_c @ p["WC"]) @ T.transpose(Ha @ p["WE"])
    compat = T.reshape(compat, (B, m))
    u = T.scale(T.tanh(T.scale(compat, 1.0 / math.sqrt(d))), 10.0)
    u = T.concat([T.tensor(np.zeros((B, 2))), u], axis=-1)
    return T.masked_fill(u, mask)


@dataclass
class DecodeState:
    """Single-instance decoding state.

    ``selected`` lists visited nodes in order (for TSP ``selected[0]`` is the
    destination).  For CVRP, ``current`` is the vehicle position (0 = depot)
    and ``load`` the integer load of the open route.
    """
    instance: object
    embeddings: Tensor
    selected: list[int]
    available: list[int]
    load: int = 0
    current: int = 0
    context: Tensor | None = None

    @property
    def destination(self) -> int:
        return self.selected[0] if isinstance(self.instance, TspInstance) else 0

    @property
    def start(self) -> int:
        if isinstance(self.instance, TspInstance):
            return self.selected[-1]
        return self.current

    @property
    def remaining(self) -> float:
        cap = self.instance.capacity
        return (cap - self.load) / cap


def _state_logits(state: DecodeState, model: LehdModel) -> Tensor:
    if not state.available:
        raise ValueError("decode_step: no available nodes")
    H = T.reshape(state.embeddings, (1, *state.embeddings.shape))
    avail = np.asarray([state.available])
    m = len(state.available)
    cap = None
    if isinstance(state.instance, CvrpInstance):
        inst = state.instance
        dem = inst.demands[np.asarray(state.available) - 1][None]
        mask = cvrp_action_mask(np.array([inst.capacity - state.load]), dem,
                                np.array([state.current == 0]))
        cap = np.array([state.remaining])
    else:
        mask = tsp_action_mask(1, m)
    ctx = None
    if model.config.arch == "held":
        ctx = state.context if state.context is not None else held_context(model, H)
    u = decoder_logits(model, H, np.array([state.destination]), np.array([state.start]),
                       avail, mask, cap, context=ctx)
    return T.reshape(u, (u.shape[1],))


def decode_step(state: DecodeState, model: LehdModel) -> Tensor:
    """Action probabilities for one step (layout in the module docstring)."""
    if model.config.arch != "lehd":
        raise ValueError("decode_step needs a light-encoder/heavy-decoder model; use held_decode_step")
    return T.softmax(_state_logits(state, model))


def held_decode_step(state: DecodeState, model: LehdModel) -> Tensor:
    """Baseline step: one context MHA over static embeddings, tanh-clipped compatibility."""
    if model.config.arch != "held":
        raise ValueError("held_decode_step needs a heavy-encoder model")
    return T.softmax(_state_logits(state, model))


def held_raw_logits(state: DecodeState, model: LehdModel) -> np.ndarray:
    """Compatibility logits of the available nodes before masking (TSP only)."""
    return _state_logits(state, model).data[2:]


def initial_state(instance, model: LehdModel, first: int | None = None) -> DecodeState:
    H = encode(instance, model)
    if isinstance(instance, TspInstance):
        first = 0 if first is None else first
        avail = [i for i in range(instance.n) if i != first]
        return DecodeState(instance, H, [first], avail)
    return DecodeState(instance, H, [], list(range(1, instance.n + 1)))


def apply_action(state: DecodeState, action: int) -> DecodeState:
    """Advance a single-instance state by a flat action index (in place)."""
    if isinstance(state.instance, TspInstance):
        node = state.available.pop(action - 2)
        state.selected.append(node)
        return state
    row, flag = divmod(action, 2)
    node = state.available.pop(row - 2)
    dem = int(state.instance.demands[node - 1])
    state.load = dem if flag else state.load + dem
    state.selected.append(node)
    state.current = node
    return state


# --------------------------------------------------------------------------- batched rollout

def _choose(logits: np.ndarray, mode: str, rngs) -> np.ndarray:
    if mode == "greedy":
        return np.argmax(logits, axis=1)  # first max = lowest index
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    cdf = np.cumsum(e, axis=1)
    out = np.empty(len(logits), dtype=np.int64)
    for b, g in enumerate(rngs):
        out[b] = np.searchsorted(cdf[b], g.random() * cdf[b, -1], side="right")
    return out


def rollout_tsp(model: LehdModel, coords: np.ndarray, dest: np.ndarray, start: np.ndarray,
                avail: np.ndarray, mode: str = "greedy", rngs=None) -> np.ndarray:
    """Construct paths for a batch of TSP sub-problems.

    ``coords`` (B, N, 2); ``dest``/``start`` (B,) node rows; ``avail`` (B, m)
    rows to visit.  Returns the chosen rows (B, m) in visiting order.
    """
    H = encode_features(model, coords)
    ctx = held_context(model, H) if model.config.arch == "held" else None
    B, m = avail.shape
    avail = avail.copy()
    start = np.asarray(start).copy()
    out = np.empty((B, m), dtype=np.int64)
    bidx = np.arange(B)
    for t in range(m):
        mm = avail.shape[1]
        u = decoder_logits(model, H, dest, start, avail, tsp_action_mask(B, mm), context=ctx).data
        a = _choose(u, mode, rngs) - 2
        chosen = avail[bidx, a]
        out[:, t] = chosen
        keep = np.ones_like(avail, dtype=bool)
        keep[bidx, a] = False
        avail = avail[keep].reshape(B, mm - 1)
        start = chosen
    return out


def rollout_cvrp(model: LehdModel, feats: np.ndarray, demands: np.ndarray, capacity: np.ndarray,
                 start: np.ndarray, load: np.ndarray, avail: np.ndarray,
                 mode: str = "greedy", rngs=None) -> tuple[np.ndarray, np.ndarray]:
    """Construct route continuations for a batch of CVRP sub-problems.

    ``feats`` (B, N, 3) with the depot at row 0; ``demands`` (B, N) integer
    demands (depot 0); ``capacity`` (B,); ``start`` (B,) current rows (0 means
    at the depot); ``load`` (B,) integer load of the open route; ``avail``
    (B, m).  Returns visited rows (B, m) and via-depot flags (B, m).
    """
    H = encode_features(model, feats)
    B, m = avail.shape
    avail = avail.copy()
    start = np.asarray(start).copy()
    load = np.asarray(load, dtype=np.int64).copy()
    capacity = np.asarray(capacity, dtype=np.int64)
    dest = np.zeros(B, dtype=np.int64)
    nodes = np.empty((B, m), dtype=np.int64)
    flags = np.empty((B, m), dtype=np.int64)
    bidx = np.arange(B)
    for t in range(m):
        mm = avail.shape[1]
        dem = demands[bidx[:, None], avail]
        mask = cvrp_action_mask(capacity - load, dem, start == 0)
        u = decoder_logits(model, H, dest, start, avail, mask, (capacity - load) / capacity).data
        a = _choose(u, mode, rngs)
        row, flag = np.divmod(a, 2)
        row -= 2
        chosen = avail[bidx, row]
        d = demands[bidx, chosen]
        load = np.where(flag == 1, d, load + d)
        nodes[:, t], flags[:, t] = chosen, flag
        keep = np.ones_like(avail, dtype=bool)
        keep[bidx, row] = False
        avail = avail[keep].reshape(B, mm - 1)
        start = chosen
    return nodes, flags


def construct_batch(instances: Sequence, model: LehdModel, mode: str = "greedy", rngs=None,
                    first_nodes: Sequence[int] | None = None) -> list:
    """Construct full solutions for same-kind, same-size instances in lockstep.

    TSP: the destination / initial start of instance ``b`` is ``first_nodes[b]``
    when given, else drawn from ``rngs[b]``.  CVRP always starts at the depot.
    """
    if not instances:
        return []
    B = len(instances)
    if rngs is None:
        rngs = [np.random.default_rng(0) for _ in range(B)]
    kind = instances[0].kind
    n = instances[0].n
    if any(i.kind != kind or i.n != n for i in instances):
        raise ValueError("construct_batch needs instances of one kind and size")
    if kind != model.config.problem:
        raise ValueError(f"model is for {model.config.problem}, instance is {kind}")
    sols = []
    if kind == "tsp":
        if first_nodes is None:
            first_nodes = [int(g.integers(n)) for g in rngs]
        first = np.asarray(first_nodes, dtype=np.int64)
        avail = np.array([[v for v in range(n) if v != f] for f in first], dtype=np.int64).reshape(B, n - 1)
        coords = np.stack([i.coords for i in instances])
        order = rollout_tsp(model, coords, first, first, avail, mode, rngs)
        for b in range(B):
            sols.append(Tour([int(first[b]), *order[b].tolist()]))
    else:
        feats = np.stack([i.features() for i in instances])
        dem = np.stack([np.concatenate([[0], i.demands]) for i in instances])
        cap = np.array([i.capacity for i in instances])
        avail = np.tile(np.arange(1, n + 1), (B, 1))
        nodes, flags = rollout_cvrp(model, feats, dem, cap, np.zeros(B, dtype=np.int64),
                                    np.zeros(B, dtype=np.int64), avail, mode, rngs)
        for b in range(B):
            sols.append(CvrpSolution(nodes[b].tolist(), flags[b].tolist()))
    for inst, sol in zip(instances, sols):
        rep = validate(inst, sol)
        assert rep, f"constructed an invalid solution: {rep.problems}"
    return sols


def construct(instance, model: LehdModel, mode: str = "greedy", rng=None, first: int | None = None):
    g = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return construct_batch([instance], model, mode, [g],
                           None if first is None else [first])[0]
