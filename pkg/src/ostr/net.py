"""The OS-TR graph: Siamese texture encoder, global context metric, decoder.

All forward functions take a `Tape`, which owns the parameter leaves for one
forward pass and the batch-norm mode. `model_forward` builds a tape, runs
the full graph and returns a `ForwardState`; `model_backward` replays the
recorded graph and accumulates gradients into the `ParamStore`.
"""
import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import ops
from .dirmaps import all_directional_maps
from .ops import Var


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 64
    backbone_stride: int = 8
    backbone_channels: int = 64
    dir_branch_channels: int = 8
    metric_channels: int = 32
    gate_reduction: int = 4
    use_dirconv: bool = True
    use_gating: bool = True
    # "identity" and use_batchnorm=False give the linear toy used by gradcheck
    activation: str = "relu"
    use_batchnorm: bool = True

    def __post_init__(self):
        stride = self.backbone_stride
        if stride < 2 or stride & (stride - 1):
            raise ValueError(f"backbone_stride must be a power of two >= 2, got {stride}")
        if self.input_size % stride:
            raise ValueError(f"input_size {self.input_size} not divisible by stride {stride}")
        if self.backbone_channels % (1 << (self.n_stages - 1)):
            raise ValueError("backbone_channels must be divisible by 2**(n_stages - 1)")
        if self.use_dirconv:
            if self.backbone_channels % 8:
                raise ValueError("backbone_channels must be divisible by 8 when use_dirconv")
            if 8 * self.dir_branch_channels != self.backbone_channels:
                raise ValueError("8 * dir_branch_channels must equal backbone_channels")
        if self.metric_channels % self.gate_reduction:
            raise ValueError("gate_reduction must divide metric_channels")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_stages(self) -> int:
        return int(self.backbone_stride).bit_length() - 1

    @property
    def feature_size(self) -> int:
        return self.input_size // self.backbone_stride

    def stage_widths(self):
        """Backbone channel widths at strides 2, 4, ..., backbone_stride."""
        n = self.n_stages
        return [self.backbone_channels >> (n - 1 - k) for k in range(n)]

    def decoder_widths(self):
        """Output channels of each decoder stage, coarse to fine."""
        widths = self.stage_widths()
        # stage k lands at stride 2**(n-1-k); the last (stride 1) stage has no skip
        return [widths[self.n_stages - 2 - k] for k in range(self.n_stages - 1)] + [max(widths[0] // 2, 1)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetConfig fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "paper": NetConfig(input_size=256, backbone_stride=32, backbone_channels=2048,
                       dir_branch_channels=256, metric_channels=1024, gate_reduction=16),
    "tiny": NetConfig(input_size=64, backbone_stride=8, backbone_channels=64,
                      dir_branch_channels=8, metric_channels=32, gate_reduction=4),
}


def preset(name: str, **overrides) -> NetConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


# -- parameters -------------------------------------------------------------

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True
    decay: bool = True


class ParamStore:
    """Ordered name -> Param registry.

    Encoder tensors are prefixed ``encoder.``, metric tensors ``metric.`` and
    decoder tensors ``decoder.``. Batch-norm running statistics are stored as
    non-trainable entries.
    """

    def __init__(self):
        self._entries = {}
        self.grads_ready = False

    def add(self, name, value, trainable=True, decay=True):
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value)
        self._entries[name] = Param(value, np.zeros_like(value), trainable, decay)

    def __getitem__(self, name):
        return self._entries[name].value

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def entry(self, name) -> Param:
        return self._entries[name]

    def items(self):
        return self._entries.items()

    def trainable(self):
        return [(k, p) for k, p in self._entries.items() if p.trainable]

    def grad(self, name):
        return self._entries[name].grad

    def zero_grad(self):
        for p in self._entries.values():
            p.grad[...] = 0
        self.grads_ready = False

    def n_scalars(self, trainable_only=True):
        return sum(p.value.size for p in self._entries.values() if p.trainable or not trainable_only)

    @property
    def dtype(self):
        return next(iter(self._entries.values())).value.dtype

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, p in self._entries.items():
            out.add(k, p.value.astype(dtype), p.trainable, p.decay)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def shapes(self):
        return {k: p.value.shape for k, p in self._entries.items()}


def _conv_block_specs(name, cin, cout, k, config, zero=False):
    gain = 2.0 if config.activation == "relu" else 1.0
    init = "zero" if zero else ("normal", gain / (cin * k * k))
    yield f"{name}.w", (cout, cin, k, k), init, True, True
    if not config.use_batchnorm:
        yield f"{name}.b", (cout,), "zero", True, False
        return
    yield f"{name}.bn.gamma", (cout,), "one", True, False
    yield f"{name}.bn.beta", (cout,), "zero", True, False
    yield f"{name}.bn.mean", (cout,), "zero", False, False
    yield f"{name}.bn.var", (cout,), "one", False, False


def _linear_specs(name, cin, cout, zero=False):
    yield f"{name}.w", (cout, cin, 1, 1), "zero" if zero else ("normal", 1.0 / cin), True, True
    yield f"{name}.b", (cout,), "zero", True, False


def param_specs(config: NetConfig, neutral_heads=True):
    """Yield (name, shape, init, trainable, decay) in canonical order."""
    widths = config.stage_widths()
    cin = 3
    for k, w in enumerate(widths):
        yield from _conv_block_specs(f"encoder.stage{k}.down", cin, w, 3, config)
        yield from _conv_block_specs(f"encoder.stage{k}.res", w, w, 3, config)
        cin = w
    cb = config.backbone_channels
    if config.use_dirconv:
        for i in range(8):
            yield from _conv_block_specs(f"encoder.dirconv.branch{i}", cb + 1,
                                         config.dir_branch_channels, 3, config)
    yield from _conv_block_specs("encoder.join", cb, cb, 3, config)

    cm = config.metric_channels
    yield from _conv_block_specs("metric.relation1", 2 * cb, cm, 3, config)
    yield from _conv_block_specs("metric.relation2", cm, cm, 3, config)
    if config.use_gating:
        hidden = cm // config.gate_reduction
        yield from _linear_specs("metric.gate1", cm, hidden)
        yield from _linear_specs("metric.gate2", hidden, cm, zero=neutral_heads)

    cin = cm
    skips = widths[::-1][1:]
    for k, w in enumerate(config.decoder_widths()):
        extra = skips[k] if k < len(skips) else 0
        yield from _conv_block_specs(f"decoder.stage{k}", cin + extra, w, 3, config)
        cin = w
    yield from _linear_specs("decoder.head", cin, 1, zero=neutral_heads)


def param_shapes(config: NetConfig):
    return {name: shape for name, shape, *_ in param_specs(config)}


def init_params(config: NetConfig, seed: int, dtype=np.float32, neutral_heads=True) -> ParamStore:
    """Fan-in scaled normal kernels, unit/zero batch-norm affine terms.

    With `neutral_heads` the last gate layer and the decoder head start at
    zero, so an untrained net outputs gamma = 0.5 and A = 0.5 everywhere.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, init, trainable, decay in param_specs(config, neutral_heads):
        if init == "zero":
            value = np.zeros(shape, dtype=dtype)
        elif init == "one":
            value = np.ones(shape, dtype=dtype)
        else:
            value = (rng.standard_normal(shape) * np.sqrt(init[1])).astype(dtype)
        store.add(name, value, trainable, decay)
    return store


# -- forward ----------------------------------------------------------------

class Tape:
    """Per-forward context: parameter leaves, batch-norm mode, recorded values."""

    def __init__(self, params: ParamStore, train=False, update_stats=True):
        self.params = params
        self.train = train
        self.update_stats = update_stats
        self.leaves = {}
        self.records = {}

    def p(self, name) -> Var:
        var = self.leaves.get(name)
        if var is None:
            var = Var(self.params[name], name=name)
            self.leaves[name] = var
        return var

    def const(self, value, name="const") -> Var:
        return Var(np.asarray(value, dtype=self.params.dtype), name=name)


def _block(x, tape, name, config, stride=1, act=True):
    """conv (+ batch-norm) (+ activation)."""
    bias = tape.p(f"{name}.b") if f"{name}.b" in tape.params else tape.const(
        np.zeros(tape.params[f"{name}.w"].shape[0]), f"{name}.nobias")
    y = ops.conv2d(x, tape.p(f"{name}.w"), bias, stride=stride, name=name)
    if config.use_batchnorm:
        y = ops.batch_norm(y, tape.p(f"{name}.bn.gamma"), tape.p(f"{name}.bn.beta"),
                           tape.params[f"{name}.bn.mean"], tape.params[f"{name}.bn.var"],
                           train=tape.train, update_stats=tape.update_stats, name=f"{name}.bn")
    if act:
        y = _act(y, config, name)
    return y


def _act(x, config, name):
    return ops.relu(x, name=f"{name}.relu") if config.activation == "relu" else x


def _linear(x, tape, name):
    return ops.conv2d(x, tape.p(f"{name}.w"), tape.p(f"{name}.b"), pad=0, name=name)


def _check_image(image, config):
    shape = image.value.shape
    s = config.input_size
    if len(shape) != 4 or shape[1] != 3 or shape[2] != s or shape[3] != s:
        raise ValueError(f"expected image batch (N, 3, {s}, {s}), got {shape}")


def backbone_forward(image, tape: Tape, config: NetConfig):
    """Strided CNN; returns the feature pyramid at strides 2..backbone_stride."""
    x = _as_input(image, tape)
    _check_image(x, config)
    pyramid = []
    for k in range(config.n_stages):
        x = _block(x, tape, f"encoder.stage{k}.down", config, stride=2)
        r = _block(x, tape, f"encoder.stage{k}.res", config, act=False)
        x = _act(ops.add(x, r, name=f"encoder.stage{k}.sum"), config, f"encoder.stage{k}.out")
        pyramid.append(x)
    return pyramid


def dirconv_forward(P, tape: Tape, config: NetConfig, maps=None):
    """Eight map-conditioned branches, concatenated and joined (or the join alone)."""
    P = _as_input(P, tape)
    n, c, h, w = P.value.shape
    if c != config.backbone_channels:
        raise ValueError(f"dirconv expects {config.backbone_channels} channels, got {c}")
    if config.use_dirconv:
        if maps is None:
            maps = all_directional_maps(h, w)
        if maps.shape != (8, h, w):
            raise ValueError(f"directional maps {maps.shape} do not match features {h}x{w}")
        branches = []
        for i in range(8):
            d = tape.const(np.broadcast_to(maps[i], (n, 1, h, w)), f"dirmap{i}")
            x = ops.concat([P, d], axis=1, name=f"encoder.dirconv.cat{i}")
            branches.append(_block(x, tape, f"encoder.dirconv.branch{i}", config))
        tape.records["dir_branches"] = branches
        P = ops.concat(branches, axis=1, name="encoder.dirconv.cat")
    return _block(P, tape, "encoder.join", config)


def encode(image, tape: Tape, config: NetConfig):
    """Shared texture encoder: backbone then directionality-aware module."""
    pyramid = backbone_forward(image, tape, config)
    M = dirconv_forward(pyramid[-1], tape, config)
    return M, pyramid


def relation_forward(M_ref, M_query, tape: Tape, config: NetConfig):
    """Local relation features rescaled by self-gating weights.

    Returns ``(S, gamma)``; gamma has shape (N, C_m, 1, 1).
    """
    M_ref, M_query = _as_input(M_ref, tape), _as_input(M_query, tape)
    if M_ref.value.shape != M_query.value.shape:
        raise ValueError(f"branch shapes differ: {M_ref.value.shape} vs {M_query.value.shape}")
    x = ops.concat([M_ref, M_query], axis=1, name="metric.cat")
    L = _block(x, tape, "metric.relation1", config)
    L = _block(L, tape, "metric.relation2", config)
    tape.records["L"] = L
    if not config.use_gating:
        n, c = L.value.shape[:2]
        gamma = tape.const(np.ones((n, c, 1, 1)), "gamma")
        tape.records["beta"] = None
        return L, gamma
    beta = ops.spatial_max(L, name="metric.max")
    tape.records["beta"] = beta
    h = _act(_linear(beta, tape, "metric.gate1"), config, "metric.gate1")
    gamma = ops.sigmoid(_linear(h, tape, "metric.gate2"), name="metric.gamma")
    S = ops.channel_scale(L, gamma, name="metric.weighting")
    return S, gamma


def decode(S, pyramid, tape: Tape, config: NetConfig):
    """Bilinear x2 stages with query-pyramid skips, then 1x1 conv + sigmoid."""
    x = _as_input(S, tape)
    if len(pyramid) != config.n_stages:
        raise ValueError(f"pyramid has {len(pyramid)} stages, config expects {config.n_stages}")
    for k in range(config.n_stages):
        x = ops.upsample2x(x, name=f"decoder.up{k}")
        skip_idx = config.n_stages - 2 - k
        if skip_idx >= 0:
            skip = _as_input(pyramid[skip_idx], tape)
            if skip.value.shape[2:] != x.value.shape[2:]:
                raise ValueError("pyramid resolution does not match decoder stage")
            x = ops.concat([x, skip], axis=1, name=f"decoder.cat{k}")
        x = _block(x, tape, f"decoder.stage{k}", config)
    logits = _linear(x, tape, "decoder.head")
    return ops.sigmoid(logits, name="decoder.sigmoid")


def _as_input(x, tape):
    if isinstance(x, Var):
        return x
    return tape.const(x, "input")


@dataclass
class ForwardState:
    output: Var
    tape: Tape
    gamma_var: Var
    L: np.ndarray
    S: np.ndarray
    beta: np.ndarray
    M_ref: np.ndarray
    M_query: np.ndarray

    @property
    def A(self) -> np.ndarray:
        return self.output.value

    @property
    def gamma(self) -> np.ndarray:
        """Gate vector per episode, shape (N, C_m)."""
        g = self.gamma_var.value
        return g.reshape(g.shape[0], g.shape[1])


def model_forward(Q, R, params: ParamStore, config: NetConfig, train=False, update_stats=True):
    """A = F(Q, R): both images run through one encoder as a single 2N batch.

    Reference features come first in the metric concatenation; the decoder
    uses the query half of the pyramid.
    """
    dtype = params.dtype
    Q = np.asarray(Q, dtype=dtype)
    R = np.asarray(R, dtype=dtype)
    if Q.shape != R.shape:
        raise ValueError(f"query {Q.shape} and reference {R.shape} differ in shape")
    n = Q.shape[0]
    tape = Tape(params, train=train, update_stats=update_stats)
    both = tape.const(np.concatenate([R, Q], axis=0), "images")
    M, pyramid = encode(both, tape, config)
    M_ref = ops.split_batch(M, 0, n, name="M_ref")
    M_query = ops.split_batch(M, n, 2 * n, name="M_query")
    S, gamma = relation_forward(M_ref, M_query, tape, config)
    query_pyramid = [ops.split_batch(p, n, 2 * n, name=f"pyramid{k}") for k, p in enumerate(pyramid)]
    A = decode(S, query_pyramid, tape, config)
    beta = tape.records["beta"]
    return ForwardState(
        output=A, tape=tape, gamma_var=gamma,
        L=tape.records["L"].value, S=S.value,
        beta=None if beta is None else beta.value.reshape(n, -1),
        M_ref=M_ref.value, M_query=M_query.value,
    )


def model_backward(seed, state: ForwardState, params: ParamStore):
    """Accumulate d(seed . A)/d(theta) into every trainable gradient."""
    if state is None or state.output is None:
        raise RuntimeError("model_backward called without a completed forward pass")
    if not state.output.parents:
        raise RuntimeError("forward state holds no graph (was it run under no_grad?)")
    seed = np.asarray(seed, dtype=state.output.value.dtype)
    if seed.shape != state.output.value.shape:
        raise ValueError(f"seed shape {seed.shape} != output shape {state.output.value.shape}")
    leaves = ops.backprop(state.output, seed)
    for name, var in state.tape.leaves.items():
        hit = leaves.get(id(var))
        if hit is None:
            continue
        entry = params.entry(name)
        if entry.trainable:
            entry.grad += hit[1]
    params.grads_ready = True


def predict(Q, R, params: ParamStore, config: NetConfig):
    """Inference-mode forward without recording a graph; returns (A, gamma)."""
    with ops.no_grad():
        state = model_forward(Q, R, params, config, train=False)
    return state.A, state.gamma


# -- checkpoints ------------------------------------------------------------

MAGIC = b"OSTR1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(params: ParamStore, config: NetConfig, path):
    """Layout: magic, u64 LE header length, JSON header, float32 LE tensors in header order."""
    tensors = [
        {"name": k, "shape": list(p.value.shape), "trainable": p.trainable, "decay": p.decay}
        for k, p in params.items()
    ]
    header = json.dumps(
        {"version": FORMAT_VERSION, "config": config.to_dict(), "tensors": tensors},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for _, p in params.items():
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, not an OSTR checkpoint")
        raw = f.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw)
        body = f.read(n)
        if len(body) != n:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from None
        return header, len(MAGIC) + 8 + n


def load_checkpoint(path, config: NetConfig = None, dtype=np.float32):
    """Read a checkpoint; with `config`, shapes are validated against it first."""
    path = Path(path)
    header, offset = read_checkpoint_header(path)
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    stored = NetConfig.from_dict(header["config"])
    if config is not None:
        expected = param_shapes(config)
        for t in header["tensors"]:
            want = expected.get(t["name"])
            if want is None or tuple(want) != tuple(t["shape"]):
                raise ShapeMismatchError(
                    f"{path}: tensor {t['name']} has shape {tuple(t['shape'])}, "
                    f"config expects {None if want is None else tuple(want)}")
        missing = set(expected) - {t["name"] for t in header["tensors"]}
        if missing:
            raise ShapeMismatchError(f"{path}: missing tensors {sorted(missing)[:3]}")
    store = ParamStore()
    with open(path, "rb") as f:
        f.seek(offset)
        for t in header["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path}: truncated data in tensor {t['name']}")
            value = np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).astype(dtype)
            store.add(t["name"], value, t["trainable"], t["decay"])
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return store, stored if config is None else config
