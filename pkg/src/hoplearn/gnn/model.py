"""K graph layers plus a dense prediction head: init, forward, backward, losses, checkpoints."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import CacheError, CheckpointError, NumericsError, ShapeError
from .batch import VectorizedBatch
from .layers import KINDS, LayerCache, LayerParams, layer_backward, layer_forward

ACTIVATIONS = ("relu", "linear")
CHECKPOINT_MAGIC = "MODEL v1"
# per-kind hidden width (per head for GAT) and head count used by the command line
MODEL_DEFAULTS = {
    "GCN": {"hidden": 16, "heads": 1, "activation": "relu"},
    "SAGE": {"hidden": 16, "heads": 1, "activation": "relu"},
    "GAT": {"hidden": 8, "heads": 8, "activation": "relu"},
}


@dataclass
class ModelConfig:
    kind: str
    dims: tuple[int, ...]          # input width, then the output width of each graph layer
    classes: int
    heads: int = 1
    activation: str = "relu"
    multilabel: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if len(self.dims) < 2:
            raise ShapeError("a model needs at least one graph layer")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.kind == "GAT" and any(d % self.heads for d in self.dims[1:]):
            raise ShapeError("GAT layer widths must be multiples of the head count")

    @property
    def hops(self) -> int:
        return len(self.dims) - 1


class GNNModel:
    """Parameters live in ``layers`` and ``head``; ``version`` bumps on every update."""

    def __init__(self, config: ModelConfig, layers: list[LayerParams], head: LayerParams):
        if len(layers) != config.hops:
            raise ShapeError(f"{len(layers)} layers for K={config.hops}")
        self.config = config
        self.layers = layers
        self.head = head
        self.version = 0

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "GNNModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        dt = np.dtype(config.dtype)

        def glorot(fan_in, fan_out, shape=None):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out)).astype(dt)

        layers = []
        for d_in, d_out in zip(config.dims[:-1], config.dims[1:]):
            extra = {}
            if config.kind == "GAT":
                per = d_out // config.heads
                extra = dict(att_src=glorot(per, 1, (config.heads, per)),
                             att_dst=glorot(per, 1, (config.heads, per)), heads=config.heads)
            layers.append(LayerParams(config.kind, glorot(d_in, d_out), np.zeros(d_out, dt), **extra))
        head = LayerParams("DENSE", glorot(config.dims[-1], config.classes),
                           np.zeros(config.classes, dt))
        return cls(config, layers, head)

    # -- parameter dictionary view ------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in enumerate(self.layers):
            for name, arr in p.tensors().items():
                out[f"layer{k}.{name}"] = arr
        for name, arr in self.head.tensors().items():
            out[f"head.{name}"] = arr
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        current = self.params()
        if set(values) != set(current):
            raise ShapeError(f"parameter names differ: {sorted(set(values) ^ set(current))}")
        for name, arr in values.items():
            if np.shape(arr) != current[name].shape:
                raise ShapeError(f"{name}: shape {np.shape(arr)} != {current[name].shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericsError(f"non-finite values in {name}")
            owner, attr = name.split(".")
            target = self.head if owner == "head" else self.layers[int(owner[5:])]
            setattr(target, attr, np.asarray(arr, dtype=current[name].dtype).copy())
        self.version += 1

    def copy(self) -> "GNNModel":
        m = GNNModel(self.config, [LayerParams(**vars(p)) for p in self.layers],
                     LayerParams(**vars(self.head)))
        m.set_params(self.params())
        m.version = self.version
        return m

    # -- computation --------------------------------------------------------------
    def forward(self, batch: VectorizedBatch, *, partitions=1, use_pruned: bool = True,
                dropout: float = 0.0, rng: np.random.Generator | None = None):
        """Logits for the batch targets and a cache for :meth:`backward`.

        Dropout is applied to the input of every layer and of the head when
        ``dropout > 0`` (training); ``rng`` then must be given.
        """
        if batch.hop != self.config.hops:
            raise ShapeError(f"batch built for K={batch.hop}, model has K={self.config.hops}")
        dt = np.dtype(self.config.dtype)
        cache = ForwardCache(self.version, batch)

        def drop(H):
            if dropout <= 0:
                cache.masks.append(None)
                return H
            mask = (rng.random(H.shape) >= dropout).astype(dt) / dt.type(1 - dropout)
            cache.masks.append(mask)
            return H * mask

        H = np.asarray(batch.X, dtype=dt)
        for k, p in enumerate(self.layers):
            adj = batch.pruned[k] if use_pruned else batch.adj
            pre, lc = layer_forward(p, adj, drop(H), batch.in_weight, partitions)
            cache.layers.append(lc)
            cache.pre.append(pre)
            H = np.maximum(pre, 0) if self.config.activation == "relu" else pre
        T = drop(H[batch.targets])
        cache.head_input = T
        logits = T @ self.head.W + self.head.b
        return logits, cache

    def backward(self, cache: "ForwardCache", d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Exact gradients of ``sum(d_logits * logits)`` with respect to every parameter."""
        if cache.version != self.version or cache.head_input is None:
            raise CacheError(f"cache from parameter version {cache.version}, "
                             f"model is at version {self.version}")
        d_logits = np.asarray(d_logits, dtype=np.float64)
        T = cache.head_input.astype(np.float64)
        grads = {"head.W": T.T @ d_logits, "head.b": d_logits.sum(axis=0)}
        dT = d_logits @ self.head.W.T.astype(np.float64)
        if cache.masks[-1] is not None:
            dT *= cache.masks[-1]
        batch = cache.batch
        dH = np.zeros((batch.num_rows, dT.shape[1]))
        np.add.at(dH, batch.targets, dT)
        for k in reversed(range(len(self.layers))):
            if self.config.activation == "relu":
                dH = dH * (cache.pre[k] > 0)
            dH, g = layer_backward(self.layers[k], cache.layers[k], dH)
            if cache.masks[k] is not None:
                dH *= cache.masks[k]
            for name, arr in g.items():
                grads[f"layer{k}.{name}"] = arr
        return grads

    def predict(self, batch: VectorizedBatch, partitions=1) -> np.ndarray:
        logits, _ = self.forward(batch, partitions=partitions)
        return scores(logits, self.config.multilabel)

    # -- checkpoint ---------------------------------------------------------------
    def to_text(self) -> str:
        return checkpoint_header(self.config) + "".join(
            tensor_text(n, a) for n, a in self.params().items())

    @classmethod
    def from_text(cls, text: str) -> "GNNModel":
        config, tensors = parse_checkpoint(text)
        model = cls.init(config)
        model.set_params(tensors)
        model.version = 0
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "GNNModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


@dataclass
class ForwardCache:
    version: int
    batch: VectorizedBatch
    layers: list[LayerCache] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    masks: list = field(default_factory=list)
    head_input: np.ndarray | None = None


# ---------------------------------------------------------------------------
# losses

def _softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def scores(logits: np.ndarray, multilabel: bool) -> np.ndarray:
    return _sigmoid(logits) if multilabel else _softmax(logits)


def loss_and_grad(logits: np.ndarray, labels, multilabel: bool = False):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if multilabel:
        Y = np.asarray(labels, dtype=np.float64)
        if Y.shape != logits.shape:
            raise ShapeError(f"label matrix {Y.shape} vs logits {logits.shape}")
        # log(1 + e^z) - y z, summed over labels
        loss = float(np.sum(np.logaddexp(0.0, logits) - Y * logits) / n)
        grad = (_sigmoid(logits) - Y) / n
    else:
        y = np.asarray(labels, dtype=np.int64)
        if y.shape != (n,) or (n and (y.min() < 0 or y.max() >= logits.shape[1])):
            raise ShapeError("labels must be class indices, one per logit row")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n), y].sum() / n)
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        grad /= n
    if not np.isfinite(loss):
        raise NumericsError(f"non-finite loss {loss}")
    return loss, grad


# ---------------------------------------------------------------------------
# checkpoint text: header line, then per tensor ``T <name> <shape>`` and its rows

def checkpoint_header(config: ModelConfig) -> str:
    return (f"{CHECKPOINT_MAGIC} kind={config.kind} K={config.hops} "
            f"dims={','.join(map(str, config.dims))} heads={config.heads} "
            f"classes={config.classes} activation={config.activation} "
            f"multilabel={int(config.multilabel)} dtype={config.dtype}\n")


def tensor_text(name: str, arr: np.ndarray) -> str:
    arr = np.asarray(arr)
    rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
    body = "\n".join(" ".join(repr(float(x)) for x in r) for r in rows)
    return f"T {name} {','.join(map(str, arr.shape))}\n{body}\n"


def parse_header(line: str) -> ModelConfig:
    if not line.startswith(CHECKPOINT_MAGIC + " "):
        raise CheckpointError(f"not a model checkpoint: {line[:40]!r}")
    try:
        meta = dict(tok.split("=", 1) for tok in line[len(CHECKPOINT_MAGIC) + 1:].split())
        config = ModelConfig(kind=meta["kind"], dims=tuple(int(d) for d in meta["dims"].split(",")),
                             classes=int(meta["classes"]), heads=int(meta["heads"]),
                             activation=meta["activation"],
                             multilabel=bool(int(meta["multilabel"])), dtype=meta["dtype"])
        if int(meta["K"]) != config.hops:
            raise CheckpointError(f"K={meta['K']} disagrees with dims={meta['dims']}")
    except (KeyError, ValueError, ShapeError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header {line.strip()!r}") from exc
    return config


def parse_tensors(lines: list[str]) -> dict[str, np.ndarray]:
    """Tensor blocks -> arrays (float64, exact)."""
    out = {}
    i = 0
    while i < len(lines):
        toks = lines[i].split(" ")
        if len(toks) != 3 or toks[0] != "T":
            raise CheckpointError(f"expected a tensor header, got {lines[i][:40]!r}")
        try:
            shape = tuple(int(s) for s in toks[2].split(","))
            n_rows = 1 if len(shape) == 1 else shape[0]
            block = lines[i + 1:i + 1 + n_rows]
            if len(block) != n_rows:
                raise CheckpointError(f"tensor {toks[1]} is truncated")
            vals = np.array([float(x) for r in block for x in r.split(" ") if x],
                            dtype=np.float64)
            out[toks[1]] = vals.reshape(shape)
        except ValueError as exc:
            raise CheckpointError(f"tensor {toks[1]}: {exc}") from exc
        i += 1 + n_rows
    return out


def parse_checkpoint(text: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    lines = text.rstrip("\n").split("\n")
    config = parse_header(lines[0])
    return config, parse_tensors(lines[1:])
