"""CGNN-SE network: mixture-aware first GCN layer, plain GCN, multi-head GAT, linear head.

The model works in standardized units: observed features are shifted and
scaled per channel by a fixed ``(center, scale)`` pair before the first layer,
the mixture parameters live in those units, and ``predict`` maps outputs back
to p.u. and radians.  Identity scaling (center 0, scale 1) is the default.

Every layer keeps its parameters as plain arrays in ``layer.params``.  A
forward pass takes a ``{name: Tensor}`` view of those arrays so the same
code serves inference (no tape) and training (leaves recorded on a tape).
Feature tensors are batched: ``x`` has shape ``(B, N, f)`` and the
observation mask ``(N,)`` or ``(B, N)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .container import read_container, write_container
from .grid import adjacency_from_matrix

CHECKPOINT_MAGIC = b"CGNNCK01"
CHECKPOINT_VERSION = 1
VARIANCE_THRESHOLD = 1e-12


def _t(x):
    return x if isinstance(x, nx.Tensor) else nx.Tensor(x)


def _batched(x, mask):
    x = _t(x)
    if x.value.ndim == 2:
        x = nx.reshape(x, (1,) + x.shape)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, x.shape[:2])
    if mask.shape != x.shape[:2]:
        raise nx.ShapeError(f"mask {mask.shape} does not match features {x.shape}")
    return x, mask


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------

def decode_weights(logits, mask):
    """Mixture weights per (batch, bus, component); observed buses get the inert uniform 1/C."""
    logits = _t(logits)
    c = logits.shape[-1]
    obs = mask[..., None].astype(float)
    return obs * (1.0 / c) + (1.0 - obs) * nx.softmax(logits, axis=-1)


def expected_activation(weight, logits, means, logvar, a_tilde, x, mask):
    """E[ReLU(A X W^T)] with unobserved rows of X drawn from per-bus Gaussian mixtures.

    Shapes: ``weight`` (f_out, f), ``logits`` (N, C), ``means`` / ``logvar``
    (C, N, f).  Observed rows use the measurement as mean and zero variance.
    """
    x, mask = _batched(x, mask)
    weight, means, logvar = _t(weight), _t(means), _t(logvar)
    c, n, f = means.shape
    if x.shape[1:] != (n, f) or weight.shape[1] != f:
        raise nx.ShapeError(f"features {x.shape}, means {means.shape}, weight {weight.shape} do not conform")
    obs = mask[:, None, :, None].astype(float)                       # (B, 1, N, 1)
    xb = nx.reshape(x, (x.shape[0], 1, n, f))
    m = obs * xb + (1.0 - obs) * means                                # (B, C, N, f)
    s = (1.0 - obs) * nx.texp(logvar)
    a = np.asarray(a_tilde)
    m_hat = (a @ m) @ weight.T
    s_hat = (a * a) @ s @ nx.square(weight).T
    r = nx.expected_relu(m_hat, s_hat, VARIANCE_THRESHOLD)           # (B, C, N, f_out)
    pi = nx.permute(decode_weights(logits, mask), (0, 2, 1))         # (B, C, N)
    pi = nx.reshape(pi, pi.shape + (1,))
    r0 = r[:, 0]
    # sum_c pi_c r_c written as r_0 + sum_c pi_c (r_c - r_0): identical in exact
    # arithmetic, and exactly r_0 when every component agrees
    spread = r - nx.reshape(r0, (r.shape[0], 1) + r.shape[2:])
    return r0 + nx.tsum(pi * spread, axis=1)


def gcn_forward(weight, a_tilde, x):
    """ReLU(A X W^T)."""
    x = _t(x)
    weight = _t(weight)
    if x.shape[-1] != weight.shape[1]:
        raise nx.ShapeError(f"features {x.shape} do not match weight {weight.shape}")
    return nx.relu((np.asarray(a_tilde) @ x) @ weight.T)


def mhgat_forward(weight, att, neighbours, x, slope=0.2, return_attention=False):
    """Multi-head graph attention with head concatenation.

    ``weight`` (K, f_out, f_in), ``att`` (K, 2 f_out), ``neighbours`` boolean
    (N, N) including self loops.  Output (B, N, K f_out).
    """
    x = _t(x)
    single = x.value.ndim == 2
    if single:
        x = nx.reshape(x, (1,) + x.shape)
    weight, att = _t(weight), _t(att)
    k, fo, fi = weight.shape
    b, n, _ = x.shape
    if x.shape[-1] != fi or att.shape != (k, 2 * fo):
        raise nx.ShapeError(f"features {x.shape}, weight {weight.shape}, attention {att.shape} do not conform")
    h = nx.reshape(x, (b, 1, n, fi)) @ nx.permute(weight, (0, 2, 1))          # (B, K, N, fo)
    a_src = nx.reshape(att[:, :fo], (k, fo, 1))
    a_dst = nx.reshape(att[:, fo:], (k, fo, 1))
    e_src = h @ a_src                                                         # (B, K, N, 1)
    e_dst = nx.permute(h @ a_dst, (0, 1, 3, 2))                               # (B, K, 1, N)
    e = nx.leaky_relu(e_src + e_dst, slope)
    alpha = nx.softmax(e, axis=-1, mask=np.asarray(neighbours, dtype=bool))
    out = nx.relu(alpha @ h)                                                  # (B, K, N, fo)
    out = nx.reshape(nx.permute(out, (0, 2, 1, 3)), (b, n, k * fo))
    if single:
        out = nx.reshape(out, (n, k * fo))
    return (out, alpha) if return_attention else out


def linear_head(weight, bias, x):
    return _t(x) @ _t(weight) + _t(bias)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = INIT_GAIN / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# fan-in uniform scheme: U(-g/sqrt(fan_in), g/sqrt(fan_in))
INIT_GAIN = 1.0


class GmmGcnLayer:
    kind = "gmm_gcn"

    def __init__(self, weight, logits, means, logvar):
        self.params = {"weight": np.asarray(weight, float), "logits": np.asarray(logits, float),
                       "means": np.asarray(means, float), "logvar": np.asarray(logvar, float)}

    @classmethod
    def init(cls, rng, f_in, f_out, prior):
        means = np.transpose(prior.means, (1, 0, 2))
        logvar = np.log(np.transpose(prior.variances, (1, 0, 2)))
        return cls(_uniform(rng, (f_out, f_in), f_in), np.log(prior.weights), means, logvar)

    @property
    def out_features(self):
        return self.params["weight"].shape[0]

    def forward(self, p, adj, x, mask):
        return expected_activation(p["weight"], p["logits"], p["means"], p["logvar"], adj.a_tilde, x, mask)

    def decoded(self):
        """(weights (N, C), means (C, N, f), variances (C, N, f)) on their constrained sets."""
        return (nx.softmax_rows(self.params["logits"]), self.params["means"].copy(),
                np.exp(self.params["logvar"]))


class GcnLayer:
    kind = "gcn"

    def __init__(self, weight):
        self.params = {"weight": np.asarray(weight, float)}

    @classmethod
    def init(cls, rng, f_in, f_out):
        return cls(_uniform(rng, (f_out, f_in), f_in))

    @property
    def out_features(self):
        return self.params["weight"].shape[0]

    def forward(self, p, adj, x, mask=None):
        return gcn_forward(p["weight"], adj.a_tilde, x)


class MhGatLayer:
    kind = "mhgat"

    def __init__(self, weight, att, slope=0.2):
        self.params = {"weight": np.asarray(weight, float), "att": np.asarray(att, float)}
        self.slope = slope

    @classmethod
    def init(cls, rng, f_in, f_out, heads, slope=0.2):
        return cls(_uniform(rng, (heads, f_out, f_in), f_in), _uniform(rng, (heads, 2 * f_out), 2 * f_out), slope)

    @property
    def heads(self):
        return self.params["weight"].shape[0]

    @property
    def out_features(self):
        return self.params["weight"].shape[0] * self.params["weight"].shape[1]

    def forward(self, p, adj, x, mask=None, return_attention=False):
        return mhgat_forward(p["weight"], p["att"], adj.neighbours, x, self.slope, return_attention)


class LinearHead:
    kind = "linear"

    def __init__(self, weight, bias):
        self.params = {"weight": np.asarray(weight, float), "bias": np.asarray(bias, float)}

    @classmethod
    def init(cls, rng, f_in, bias):
        return cls(_uniform(rng, (f_in, 2), f_in), np.asarray(bias, float))

    @property
    def out_features(self):
        return self.params["weight"].shape[1]

    def forward(self, p, adj, x, mask=None):
        return linear_head(p["weight"], p["bias"], x)


_LAYER_TYPES = {cls.kind: cls for cls in (GmmGcnLayer, GcnLayer, MhGatLayer, LinearHead)}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Architecture:
    hidden: int = 50
    heads: int = 4
    components: int = 3
    extra_gcn: int = 0          # plain GCN layers between the mixture layer and the attention layer
    attention: bool = True      # False swaps MH-GAT for a GCN of the same output width
    slope: float = 0.2
    in_features: int = 2


class CgnnModel:
    """Ordered layer stack; the first layer is always the mixture-aware GCN."""

    def __init__(self, layers, adj, arch, mask, grid_hash="", meta=None, center=(0.0, 0.0), scale=(1.0, 1.0)):
        if not layers or not isinstance(layers[0], GmmGcnLayer):
            raise ValueError("first layer must be a GmmGcnLayer")
        if sum(isinstance(l, GmmGcnLayer) for l in layers) != 1:
            raise ValueError("exactly one GmmGcnLayer is allowed")
        if not isinstance(layers[-1], LinearHead):
            raise ValueError("last layer must be a LinearHead")
        self.layers = list(layers)
        self.adj = adj
        self.arch = arch
        self.mask = np.asarray(mask, dtype=bool)
        self.grid_hash = grid_hash
        self.meta = dict(meta or {})
        self.center = np.asarray(center, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        if np.any(self.scale <= 0):
            raise ValueError("feature scale must be positive")
        self._check_widths()

    def _check_widths(self):
        n = self.adj.n
        if self.layers[0].params["logits"].shape[0] != n:
            raise nx.ShapeError(f"model built for {self.layers[0].params['logits'].shape[0]} buses, adjacency has {n}")
        width = self.layers[0].params["weight"].shape[1]
        for layer in self.layers:
            w = layer.params["weight"]
            need = w.shape[0] if isinstance(layer, LinearHead) else w.shape[-1]
            if need != width:
                raise nx.ShapeError(f"{layer.kind} layer expects width {need}, receives {width}")
            width = layer.out_features

    @classmethod
    def init(cls, adj, mask, prior, arch=None, seed=0, bias=(1.0, 0.0), grid_hash="",
             center=(0.0, 0.0), scale=(1.0, 1.0)):
        """Random weights; ``prior`` and ``bias`` are given in standardized units."""
        arch = arch or Architecture()
        rng = np.random.default_rng(seed)
        layers = [GmmGcnLayer.init(rng, arch.in_features, arch.hidden, prior)]
        width = arch.hidden
        for _ in range(arch.extra_gcn):
            layers.append(GcnLayer.init(rng, width, arch.hidden))
            width = arch.hidden
        if arch.attention:
            layers.append(MhGatLayer.init(rng, width, arch.hidden, arch.heads, arch.slope))
        else:
            layers.append(GcnLayer.init(rng, width, arch.hidden * arch.heads))
        width = layers[-1].out_features
        layers.append(LinearHead.init(rng, width, bias))
        return cls(layers, adj, arch, mask, grid_hash, center=center, scale=scale)

    # parameters -----------------------------------------------------------

    def named_parameters(self):
        for k, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{k}.{layer.kind}.{name}", arr

    def get_flat(self):
        return {name: arr.copy() for name, arr in self.named_parameters()}

    def set_flat(self, values):
        for k, layer in enumerate(self.layers):
            for name in layer.params:
                layer.params[name] = np.array(values[f"{k}.{layer.kind}.{name}"], dtype=float)

    def leaves(self):
        """Fresh gradient-tracking tensors for every parameter."""
        return {name: nx.Tensor(arr, requires_grad=True, name=name) for name, arr in self.named_parameters()}

    def parameter_count(self):
        return int(sum(a.size for _, a in self.named_parameters()))

    # forward --------------------------------------------------------------

    def standardize(self, y):
        return (np.asarray(y, dtype=float) - self.center) / self.scale

    def destandardize(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.center

    def forward(self, x, mask=None, adj=None, tensors=None, return_hidden=False):
        """Standardized-unit output for raw features ``x``."""
        adj = self.adj if adj is None else adj
        if adj.n != self.adj.n:
            raise nx.ShapeError(f"adjacency has {adj.n} buses, model expects {self.adj.n}")
        mask = self.mask if mask is None else mask
        h, hidden = self.standardize(x), []
        for k, layer in enumerate(self.layers):
            p = {name: (tensors[f"{k}.{layer.kind}.{name}"] if tensors else arr)
                 for name, arr in layer.params.items()}
            h = layer.forward(p, adj, h, mask)
            hidden.append(h)
        return (h, hidden) if return_hidden else h

    def predict(self, x, mask=None, adj=None):
        """Estimated states (.., N, 2) as a plain array; accepts (N, f) or (B, N, f) features."""
        x = np.asarray(x, dtype=float)
        with nx.no_tape():
            out = self.destandardize(self.forward(x, mask, adj).value)
        return out[0] if x.ndim == 2 else out

    def attention(self, x, mask=None, adj=None):
        """Attention matrices (B, K, N, N) of the MH-GAT layer for these inputs, or None."""
        adj = self.adj if adj is None else adj
        mask = self.mask if mask is None else mask
        h = self.standardize(x)
        with nx.no_tape():
            for layer in self.layers:
                if isinstance(layer, MhGatLayer):
                    _, alpha = layer.forward(layer.params, adj, h, mask, return_attention=True)
                    return alpha.value
                h = layer.forward(layer.params, adj, h, mask)
                h = h.value if isinstance(h, nx.Tensor) else h
        return None

    def with_adjacency(self, adj):
        return CgnnModel(self.layers, adj, self.arch, self.mask, self.grid_hash, self.meta, self.center, self.scale)

    def copy(self):
        clone = CgnnModel([_LAYER_TYPES[l.kind](**{k: v.copy() for k, v in l.params.items()},
                                                **({"slope": l.slope} if isinstance(l, MhGatLayer) else {}))
                           for l in self.layers], self.adj, self.arch, self.mask, self.grid_hash, self.meta,
                          self.center.copy(), self.scale.copy())
        return clone


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model):
    meta = {
        "format": "cgnnse-checkpoint",
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(model.arch),
        "layers": [l.kind for l in model.layers],
        "grid_hash": model.grid_hash,
        "n_bus": int(model.adj.n),
        "extra": model.meta,
    }
    blocks = {"adjacency": model.adj.a, "mask": model.mask, "center": model.center, "scale": model.scale}
    blocks.update({f"param:{k}": v for k, v in model.named_parameters()})
    write_container(path, CHECKPOINT_MAGIC, meta, blocks)


def load_model(path, adj=None):
    """Read a checkpoint; ``adj`` (optional) replaces the stored adjacency and must match its size."""
    meta, blocks = read_container(path, CHECKPOINT_MAGIC)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {meta.get('version')} is not {CHECKPOINT_VERSION}")
    if adj is not None and adj.n != meta["n_bus"]:
        raise nx.ShapeError(f"checkpoint is for {meta['n_bus']} buses, adjacency has {adj.n}")
    arch = Architecture(**meta["architecture"])
    layers = []
    for k, kind in enumerate(meta["layers"]):
        cls = _LAYER_TYPES[kind]
        names = [key.split(".")[-1] for key in blocks if key.startswith(f"param:{k}.{kind}.")]
        kw = {n: blocks[f"param:{k}.{kind}.{n}"] for n in names}
        if cls is MhGatLayer:
            kw["slope"] = arch.slope
        layers.append(cls(**kw))
    adj = adj if adj is not None else adjacency_from_matrix(blocks["adjacency"])
    return CgnnModel(layers, adj, arch, blocks["mask"].astype(bool), meta["grid_hash"], meta.get("extra"),
                     blocks["center"], blocks["scale"])
