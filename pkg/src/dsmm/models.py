"""The two networks of the method: a kinship relation model producing a kin
probability for a feature pair, and a meta-miner producing a sample weight
from (label, prediction, loss).

The relation model embeds both inputs, applies one shared relation unit to
every embedding coordinate pair, concatenates the per-dimension outputs in
index order, and aggregates them through a sigmoid head. Forward passes are
expressed as graph builders over `numerics.Tensor` so the same code serves
values and gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from .numerics import (
    ContractError,
    LOG_CLAMP,
    ParamSet,
    Rng,
    Tensor,
    concat,
    logc,
    matmul,
    relu,
    reshape,
    sigmoid,
)


@dataclass(frozen=True)
class KinshipConfig:
    """Layer sizes of the relation model (all overridable)."""

    input_dim: int = 16
    encoder_hidden: int = 32
    embed_dim: int = 16  # D
    relation_hidden: int = 8
    relation_out: int = 4  # k, per-dimension relation width
    agg_hidden: int = 32

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ContractError(f"KinshipConfig.{f.name} must be >= 1")


@dataclass(frozen=True)
class MinerConfig:
    """Meta-miner sizes; input width is fixed at 3 (label, prediction, loss)."""

    hidden: int = 64
    loss_cap: float = 10.0  # miner input only, the train loss is never capped

    def validate(self) -> None:
        if self.hidden < 1:
            raise ContractError("MinerConfig.hidden must be >= 1")
        if self.loss_cap <= 0.0:
            raise ContractError("MinerConfig.loss_cap must be positive")


@dataclass
class KinshipParams:
    """Relation-model weights plus the dims needed to interpret them."""

    config: KinshipConfig
    params: ParamSet


@dataclass
class MinerParams:
    """Meta-miner weights (3 -> hidden -> 1, sigmoid output)."""

    config: MinerConfig
    params: ParamSet


def _init_linear(rng: Rng, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, (fan_in, fan_out))
    b = np.zeros(fan_out)
    return w, b


def init_kinship(config: KinshipConfig, rng: Rng) -> KinshipParams:
    config.validate()
    items: dict[str, np.ndarray] = {}
    layers = [
        ("enc1", config.input_dim, config.encoder_hidden),
        ("enc2", config.encoder_hidden, config.embed_dim),
        ("rel1", 2, config.relation_hidden),
        ("rel2", config.relation_hidden, config.relation_out),
        ("agg1", config.embed_dim * config.relation_out, config.agg_hidden),
        ("agg2", config.agg_hidden, 1),
    ]
    for name, fan_in, fan_out in layers:
        w, b = _init_linear(rng.split(name), fan_in, fan_out)
        items[f"{name}.w"] = w
        items[f"{name}.b"] = b
    return KinshipParams(config, ParamSet(items))


def init_miner(config: MinerConfig, rng: Rng) -> MinerParams:
    """Hidden layer fan-in initialized; the output layer starts at zero so
    every sample weight begins at sigmoid(0) = 0.5, i.e. uniform weighting."""
    config.validate()
    w1, b1 = _init_linear(rng.split("w1"), 3, config.hidden)
    return MinerParams(
        config,
        ParamSet(
            {
                "w1.w": w1,
                "w1.b": b1,
                "w2.w": np.zeros((config.hidden, 1)),
                "w2.b": np.zeros(1),
            }
        ),
    )


def _linear(t: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return matmul(t, p[f"{name}.w"]) + p[f"{name}.b"]


def encode_graph(p: Mapping[str, Tensor], x: np.ndarray, config: KinshipConfig) -> Tensor:
    """Embed a (n, input_dim) batch into (n, embed_dim)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != config.input_dim:
        raise ContractError(
            f"feature length {x.shape[1]} != input_dim {config.input_dim}"
        )
    h = relu(_linear(Tensor(x), p, "enc1"))
    return _linear(h, p, "enc2")


def kinship_graph(
    p: Mapping[str, Tensor], x: np.ndarray, y: np.ndarray, config: KinshipConfig
) -> Tensor:
    """Kin probabilities (n, 1) for parent features x and child features y.

    The shared relation unit sees the (parent, child) coordinate pair of
    every embedding dimension; its outputs are concatenated dimension-major
    before aggregation, so the pair ordering makes the model asymmetric in
    (x, y) by construction.
    """
    ex = encode_graph(p, x, config)
    ey = encode_graph(p, y, config)
    n = ex.shape[0]
    d = config.embed_dim
    pairs = concat(
        [reshape(ex, (n * d, 1)), reshape(ey, (n * d, 1))], axis=1
    )  # (n*D, 2), rows ordered sample-major then dimension
    h = relu(_linear(pairs, p, "rel1"))
    h = _linear(h, p, "rel2")  # (n*D, k)
    feats = reshape(h, (n, d * config.relation_out))
    a = relu(_linear(feats, p, "agg1"))
    return sigmoid(_linear(a, p, "agg2"))


def bce_graph(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample binary cross entropy (n, 1); labels are constants."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != probs.shape[0]:
        raise ContractError("labels misaligned with predictions")
    return -(y * logc(probs) + (1.0 - y) * logc(1.0 - probs))


def miner_graph(
    p: Mapping[str, Tensor], inputs: np.ndarray, config: MinerConfig
) -> Tensor:
    """Sample weights (n, 1) from miner inputs (n, 3); inputs are constants."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != 3:
        raise ContractError(f"miner input width must be 3, got {inputs.shape[1]}")
    h = relu(_linear(Tensor(inputs), p, "w1"))
    return sigmoid(_linear(h, p, "w2"))


def miner_inputs(
    labels: np.ndarray, predictions: np.ndarray, losses: np.ndarray, config: MinerConfig
) -> np.ndarray:
    """Stack (label, prediction, capped loss) rows; detached from the kinship
    model by construction (plain arrays)."""
    return np.column_stack(
        [
            np.asarray(labels, dtype=np.float64),
            np.asarray(predictions, dtype=np.float64),
            np.minimum(np.asarray(losses, dtype=np.float64), config.loss_cap),
        ]
    )


# value-level entry points


def encode(x: np.ndarray, kp: KinshipParams) -> np.ndarray:
    """Deterministic embedding of one feature vector."""
    p = {name: Tensor(arr) for name, arr in kp.params.items()}
    return encode_graph(p, np.asarray(x).reshape(1, -1), kp.config).data[0]


def kinship_forward(x: np.ndarray, y: np.ndarray, kp: KinshipParams) -> float:
    """Kin probability in (0, 1) for a single (parent, child) feature pair."""
    return float(kinship_batch(np.asarray(x).reshape(1, -1), np.asarray(y).reshape(1, -1), kp)[0])


def kinship_batch(x: np.ndarray, y: np.ndarray, kp: KinshipParams) -> np.ndarray:
    """Kin probabilities (n,) for stacked feature pairs."""
    p = {name: Tensor(arr) for name, arr in kp.params.items()}
    return kinship_graph(p, x, y, kp.config).data[:, 0]


def bce_per_sample(prob: float, label: int) -> float:
    """-log(p) for label 1, -log(1-p) for label 0, with the global log clamp."""
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label}")
    p = prob if label == 1 else 1.0 - prob
    return float(-np.log(max(p, LOG_CLAMP)))


def miner_forward(label: int, prediction: float, loss: float, mp: MinerParams) -> float:
    """Sample weight in (0, 1) for one (label, prediction, loss) triple."""
    if loss < 0.0:
        raise ContractError("loss input must be non-negative")
    inputs = miner_inputs(
        np.array([label]), np.array([prediction]), np.array([loss]), mp.config
    )
    p = {name: Tensor(arr) for name, arr in mp.params.items()}
    return float(miner_graph(p, inputs, mp.config).data[0, 0])


def miner_batch(inputs: np.ndarray, mp: MinerParams) -> np.ndarray:
    """Sample weights (n,) for stacked miner input rows."""
    p = {name: Tensor(arr) for name, arr in mp.params.items()}
    return miner_graph(p, inputs, mp.config).data[:, 0]


# checkpoint format: textual key -> tensor map, bit-exact round trip

_CHECKPOINT_MAGIC = "dsmm-params v1"


def _config_items(config) -> list[tuple[str, str]]:
    out = []
    for f in fields(config):
        v = getattr(config, f.name)
        out.append((f.name, format(v, ".17g") if isinstance(v, float) else str(v)))
    return out


def save_checkpoint(path, kp: KinshipParams, mp: MinerParams | None = None) -> None:
    """Write all parameters as text; floats at 17 significant digits."""
    lines = [_CHECKPOINT_MAGIC]
    lines.append(
        "kinship " + " ".join(f"{k}={v}" for k, v in _config_items(kp.config))
    )
    if mp is not None:
        lines.append(
            "miner " + " ".join(f"{k}={v}" for k, v in _config_items(mp.config))
        )
    sections = [("kinship", kp.params)] + ([("miner", mp.params)] if mp else [])
    for section, params in sections:
        for name, arr in params.items():
            dims = " ".join(str(s) for s in arr.shape)
            lines.append(f"tensor {section}/{name} {arr.ndim} {dims}".rstrip())
            lines.append(" ".join(format(v, ".17g") for v in arr.reshape(-1)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[KinshipParams, MinerParams | None]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise ContractError(f"not a checkpoint file: {path}")
    configs: dict[str, dict[str, str]] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("tensor "):
        kind, _, rest = lines[i].partition(" ")
        configs[kind] = dict(kv.split("=", 1) for kv in rest.split())
        i += 1
    tensors: dict[str, dict[str, np.ndarray]] = {"kinship": {}, "miner": {}}
    while i < len(lines):
        header = lines[i].split()
        if header[0] != "tensor":
            raise ContractError(f"malformed checkpoint line: {lines[i]!r}")
        section, name = header[1].split("/", 1)
        ndim = int(header[2])
        shape = tuple(int(s) for s in header[3 : 3 + ndim])
        values = np.fromiter(map(float, lines[i + 1].split()), dtype=np.float64)
        tensors[section][name] = values.reshape(shape)
        i += 2

    def parse_config(cls, raw):
        kwargs = {}
        for f in fields(cls):
            kwargs[f.name] = (float if f.type == "float" else int)(raw[f.name])
        return cls(**kwargs)

    kcfg = parse_config(KinshipConfig, configs["kinship"])
    kp = KinshipParams(kcfg, ParamSet(tensors["kinship"]))
    mp = None
    if "miner" in configs:
        mcfg = parse_config(MinerConfig, configs["miner"])
        mp = MinerParams(mcfg, ParamSet(tensors["miner"]))
    return kp, mp
