"""GIN, GGRNet-style and GAIN regressors built on :mod:`mtgnn.autodiff`.

All three share one GIN convolution (with ReLU and batchnorm) on top, sum
readout, and a two-layer fully connected head. They differ only in the middle:
nothing (GIN), a gated recursion with shared weights (GGRNET), or one
single-head neighborhood attention layer (GAIN).
"""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .featurize import DEFAULT_SCHEMA, FEATURE_WIDTH, GraphBatch

KINDS = ("GIN", "GGRNET", "GAIN")
HIDDEN = 95
CHECKPOINT_VERSION = 1


class UnknownParameter(KeyError):
    pass


class UnknownLayer(KeyError):
    pass


class CheckpointError(ValueError):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, w)
    return ad.add(out, b) if b is not None else out


@dataclass
class ModelConfig:
    kind: str = "GIN"
    num_tasks: int = 1
    in_width: int = FEATURE_WIDTH
    hidden: int = HIDDEN
    learn_eps: bool = False
    iterations: int = 10
    dropout: float = 0.3
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise ValueError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")


# ---------------------------------------------------------------------------
# layers: thin views onto the model's parameter registry


class GinConvLayer:
    def __init__(self, params: dict[str, Tensor], bn: BatchNormState, prefix: str = "conv"):
        self.p = params
        self.bn = bn
        self.prefix = prefix

    def _get(self, name):
        return self.p[f"{self.prefix}.{name}"]

    @property
    def epsilon(self) -> Tensor | None:
        return self.p.get(f"{self.prefix}.eps")

    def aggregate(self, h: Tensor, batch: GraphBatch) -> Tensor:
        """(1 + eps) * h_v + sum of neighbor states."""
        src, dst = batch.edge_index
        neigh = ad.scatter_sum(ad.gather_rows(h, src), dst, batch.num_nodes)
        eps = self.epsilon
        if eps is None:
            return ad.add(h, neigh)
        return ad.add(ad.add(h, ad.mul(h, eps)), neigh)

    def mlp(self, z: Tensor) -> Tensor:
        z = ad.relu(linear(z, self._get("lin1.weight"), self._get("lin1.bias")))
        return linear(z, self._get("lin2.weight"), self._get("lin2.bias"))

    def __call__(self, h: Tensor, batch: GraphBatch, mode: str) -> Tensor:
        if h.shape[1] != self._get("lin1.weight").shape[0]:
            raise ad.ShapeMismatch(f"gin_conv: input width {h.shape[1]} != "
                                   f"{self._get('lin1.weight').shape[0]}")
        z = ad.relu(self.mlp(self.aggregate(h, batch)))
        return ad.batchnorm(z, self.bn, self._get("bn.weight"), self._get("bn.bias"), mode)


class GatedRecursionLayer:
    """GRU-style gated message passing; one weight set shared by every iteration."""

    def __init__(self, params: dict[str, Tensor], iterations: int = 10, prefix: str = "ggr"):
        self.p = params
        self.iterations = iterations
        self.prefix = prefix

    def _get(self, name):
        return self.p[f"{self.prefix}.{name}"]

    def step(self, h: Tensor, batch: GraphBatch) -> Tensor:
        src, dst = batch.edge_index
        msg = ad.matmul(h, self._get("message.weight"))
        m = ad.scatter_sum(ad.gather_rows(msg, src), dst, batch.num_nodes)

        def gate(w, u, b, state):
            return ad.add(ad.add(ad.matmul(m, self._get(w)), ad.matmul(state, self._get(u))),
                          self._get(b))

        z = ad.sigmoid(gate("W_z", "U_z", "b_z", h))
        r = ad.sigmoid(gate("W_r", "U_r", "b_r", h))
        cand = ad.tanh(gate("W_h", "U_h", "b_h", ad.mul(r, h)))
        # h' = (1 - z) * h + z * cand  ==  h + z * (cand - h)
        return ad.add(h, ad.mul(z, ad.sub(cand, h)))

    def __call__(self, h0: Tensor, batch: GraphBatch) -> Tensor:
        if h0.shape[1] != self._get("message.weight").shape[0]:
            raise ad.ShapeMismatch(f"gated_recursion: width {h0.shape[1]}")
        if self.iterations == 0:
            return h0
        h = h0
        for _ in range(self.iterations):
            h = self.step(h, batch)
        return ad.add(h, h0)


class AttentionLayer:
    def __init__(self, params: dict[str, Tensor], dropout: float = 0.3,
                 leaky_slope: float = 0.2, prefix: str = "att"):
        self.p = params
        self.dropout = dropout
        self.leaky_slope = leaky_slope
        self.prefix = prefix

    def _get(self, name):
        return self.p[f"{self.prefix}.{name}"]

    @staticmethod
    def neighborhoods(batch: GraphBatch) -> tuple[np.ndarray, np.ndarray]:
        """Directed (source, target) pairs including one self-loop per node."""
        loops = np.arange(batch.num_nodes)
        src = np.concatenate([batch.edge_index[0], loops])
        dst = np.concatenate([batch.edge_index[1], loops])
        return src, dst

    def coefficients(self, h: Tensor, batch: GraphBatch) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
        src, dst = self.neighborhoods(batch)
        wh = ad.matmul(h, self._get("weight"))
        pair = ad.concat_cols(ad.gather_rows(wh, dst), ad.gather_rows(wh, src))
        e = ad.leaky_relu(ad.matmul(pair, self._get("a")), self.leaky_slope)
        alpha = ad.softmax_segments(e, dst, batch.num_nodes)
        return alpha, wh, src, dst

    def __call__(self, h: Tensor, batch: GraphBatch, mode: str,
                 rng: np.random.Generator | None = None) -> Tensor:
        if h.shape[1] != self._get("weight").shape[0]:
            raise ad.ShapeMismatch(f"attention_pass: width {h.shape[1]}")
        alpha, wh, src, dst = self.coefficients(h, batch)
        alpha = ad.dropout(alpha, self.dropout, mode, rng)
        msgs = ad.mul(ad.gather_rows(wh, src), alpha)
        return ad.relu(ad.scatter_sum(msgs, dst, batch.num_nodes))


class RegressionHead:
    def __init__(self, params: dict[str, Tensor], prefix: str = "head"):
        self.p = params
        self.prefix = prefix

    def __call__(self, g: Tensor) -> Tensor:
        p, pre = self.p, self.prefix
        z = ad.relu(linear(g, p[f"{pre}.fc1.weight"], p[f"{pre}.fc1.bias"]))
        return linear(z, p[f"{pre}.fc2.weight"], p[f"{pre}.fc2.bias"])


def readout(h: Tensor, batch: GraphBatch) -> Tensor:
    """Sum of node states per graph."""
    return ad.scatter_sum(h, batch.graph_index, batch.graph_count)


# ---------------------------------------------------------------------------
# model


def _parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, k = cfg.hidden, cfg.num_tasks
    shapes = {
        "conv.lin1.weight": (cfg.in_width, d), "conv.lin1.bias": (1, d),
        "conv.lin2.weight": (d, d), "conv.lin2.bias": (1, d),
    }
    if cfg.learn_eps:
        shapes["conv.eps"] = (1, 1)
    shapes.update({"conv.bn.weight": (1, d), "conv.bn.bias": (1, d)})
    if cfg.kind == "GGRNET":
        shapes["ggr.message.weight"] = (d, d)
        for gate in "zrh":
            shapes[f"ggr.W_{gate}"] = (d, d)
            shapes[f"ggr.U_{gate}"] = (d, d)
            shapes[f"ggr.b_{gate}"] = (1, d)
    elif cfg.kind == "GAIN":
        shapes["att.weight"] = (d, d)
        shapes["att.a"] = (2 * d, 1)
    shapes.update({
        "head.fc1.weight": (d, d), "head.fc1.bias": (1, d),
        "head.fc2.weight": (d, k), "head.fc2.bias": (1, k),
    })
    return shapes


class Model:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, **kwargs):
        self.config = config or ModelConfig(**kwargs)
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in _parameter_shapes(cfg).items():
            if name.endswith(("bias", "eps")) or name.startswith("ggr.b_"):
                values = np.zeros(shape)
            elif name == "conv.bn.weight":
                values = np.ones(shape)
            else:
                values = glorot(rng, *shape)
            self.params[name] = Tensor(values, requires_grad=True, name=name)
        self.frozen: set[str] = set()
        self.bn = BatchNormState(cfg.hidden, cfg.bn_momentum, cfg.bn_eps)
        self.conv = GinConvLayer(self.params, self.bn)
        self.ggr = GatedRecursionLayer(self.params, cfg.iterations) if cfg.kind == "GGRNET" else None
        self.att = AttentionLayer(self.params, cfg.dropout, cfg.leaky_slope) if cfg.kind == "GAIN" else None
        self.head = RegressionHead(self.params)
        self.forward_calls = 0

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def num_tasks(self) -> int:
        return self.config.num_tasks

    def parameter_count(self) -> int:
        return sum(t.values.size for t in self.params.values())

    def forward(self, batch: GraphBatch, mode: str = "eval",
                rng: np.random.Generator | None = None) -> Tensor:
        self.forward_calls += 1
        if batch.node_features.shape[1] != self.config.in_width:
            raise ad.ShapeMismatch(f"batch width {batch.node_features.shape[1]} != "
                                   f"{self.config.in_width}")
        # a frozen trunk also keeps its batchnorm statistics fixed
        conv_mode = "eval" if {"conv.bn.weight", "conv.bn.bias"} <= self.frozen else mode
        h = self.conv(Tensor(batch.node_features), batch, conv_mode)
        if self.ggr is not None:
            h = self.ggr(h, batch)
        elif self.att is not None:
            h = self.att(h, batch, mode, rng)
        return self.head(readout(h, batch))

    __call__ = forward

    def predict(self, batch: GraphBatch) -> np.ndarray:
        with ad.Tape() as tape:
            out = self.forward(batch, "eval").values.copy()
        tape.records.clear()
        return out

    # -- freezing -----------------------------------------------------------

    def _resolve(self, names) -> list[str]:
        if callable(names):
            return [n for n in self.params if names(n)]
        if isinstance(names, str):
            names = [names]
        out = []
        for pattern in names:
            hits = [n for n in self.params if fnmatch.fnmatchcase(n, pattern)]
            if not hits:
                raise UnknownParameter(pattern)
            out.extend(hits)
        return out

    def freeze(self, names: str | Iterable[str] | Callable[[str], bool]) -> list[str]:
        """Freeze parameters by glob pattern(s) or predicate; returns frozen names."""
        hits = self._resolve(names)
        for n in hits:
            self.frozen.add(n)
            self.params[n].requires_grad = False
            self.params[n].grad = None
        return hits

    def unfreeze(self, names) -> None:
        for n in self._resolve(names):
            self.frozen.discard(n)
            self.params[n].requires_grad = True

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if n not in self.frozen}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- state --------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        state = {n: t.values.copy() for n, t in self.params.items()}
        state["conv.bn.running_mean"] = self.bn.running_mean.copy()
        state["conv.bn.running_var"] = self.bn.running_var.copy()
        return state

    def load_state(self, state: dict[str, np.ndarray], names: Iterable[str] | None = None) -> None:
        """Copy arrays into this model; with ``names`` only those entries."""
        keys = list(state) if names is None else list(names)
        for n in keys:
            if n == "conv.bn.running_mean":
                self.bn.running_mean = np.array(state[n], dtype=np.float64).reshape(1, -1)
            elif n == "conv.bn.running_var":
                self.bn.running_var = np.array(state[n], dtype=np.float64).reshape(1, -1)
            elif n in self.params:
                arr = np.array(state[n], dtype=np.float64)
                if arr.shape != self.params[n].shape:
                    raise ad.ShapeMismatch(f"{n}: {arr.shape} != {self.params[n].shape}")
                self.params[n].values = arr.copy()
            else:
                raise UnknownParameter(n)

    def layer_weights(self, layer: str) -> np.ndarray:
        key = layer if layer in self.params else f"{layer}.weight"
        if key not in self.params:
            raise UnknownLayer(layer)
        return self.params[key].values


def is_head(name: str) -> bool:
    return name.startswith("head.")


def is_trunk(name: str) -> bool:
    """Everything feeding the readout: convolution and middle layer."""
    return not is_head(name)


# module-level spellings of the per-layer operations


def gin_conv(h: Tensor, layer: GinConvLayer, batch: GraphBatch, mode: str = "eval") -> Tensor:
    return layer(h, batch, mode)


def gated_recursion(h0: Tensor, layer: GatedRecursionLayer, batch: GraphBatch) -> Tensor:
    return layer(h0, batch)


def attention_pass(h: Tensor, layer: AttentionLayer, batch: GraphBatch, mode: str = "eval",
                   rng: np.random.Generator | None = None) -> Tensor:
    return layer(h, batch, mode, rng)


def forward(model: Model, batch: GraphBatch, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Tensor:
    return model.forward(batch, mode, rng)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(model: Model, metadata: dict | None = None) -> dict:
    cfg = model.config
    return {
        "schema_version": CHECKPOINT_VERSION,
        "model": {
            "kind": cfg.kind, "num_tasks": cfg.num_tasks, "in_width": cfg.in_width,
            "hidden": cfg.hidden, "learn_eps": cfg.learn_eps, "iterations": cfg.iterations,
            "dropout": cfg.dropout, "leaky_slope": cfg.leaky_slope,
            "bn_momentum": cfg.bn_momentum, "bn_eps": cfg.bn_eps,
        },
        "feature_schema": DEFAULT_SCHEMA.fingerprint(),
        "parameters": [
            {"name": n, "shape": list(t.shape), "values": t.values.ravel().tolist(),
             "frozen": n in model.frozen}
            for n, t in model.params.items()
        ],
        "batchnorm": {
            "running_mean": model.bn.running_mean.ravel().tolist(),
            "running_var": model.bn.running_var.ravel().tolist(),
        },
        "metadata": metadata or {},
    }


def model_from_dict(doc: dict) -> tuple[Model, dict]:
    if doc.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('schema_version')!r}")
    if doc.get("feature_schema") != DEFAULT_SCHEMA.fingerprint():
        raise CheckpointError("checkpoint was written with a different feature schema")
    model = Model(ModelConfig(**doc["model"]))
    names = set(model.params)
    for entry in doc["parameters"]:
        n = entry["name"]
        if n not in names:
            raise CheckpointError(f"unexpected parameter {n!r}")
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        model.load_state({n: arr})
        if entry.get("frozen"):
            model.freeze(n)
        names.discard(n)
    if names:
        raise CheckpointError(f"missing parameters: {sorted(names)}")
    bn = doc["batchnorm"]
    model.load_state({"conv.bn.running_mean": bn["running_mean"],
                      "conv.bn.running_var": bn["running_var"]})
    return model, doc.get("metadata", {})


def save_checkpoint(model: Model, path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # json writes shortest round-trip reprs, so float64 values survive exactly
    path.write_text(json.dumps(checkpoint_dict(model, metadata)), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
