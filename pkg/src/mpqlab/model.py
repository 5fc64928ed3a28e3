"""Small pre-norm vision-transformer classifier with hand-written backward.

Each of the ``N`` blocks owns exactly four quantizable linear layers, in the
order qkv, proj, fc1, fc2, so ``layer_id = 4 * block_idx + kind_ordinal``.
Embedding, positional table, LayerNorms and the classifier head stay in full
precision and are not part of the quantizable layer set.

Shapes: inputs ``(B, L, in_dim)``, hidden states ``(B, L, d)``, logits ``(B, C)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .data import Batch, Splits, TaskConfig, gen_task
from .numerics import log_softmax, softmax, sub_rng

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class LayerKind(str, Enum):
    QKV = "qkv"
    PROJ = "proj"
    FC1 = "fc1"
    FC2 = "fc2"

    @property
    def ordinal(self) -> int:
        return KINDS.index(self)


KINDS = (LayerKind.QKV, LayerKind.PROJ, LayerKind.FC1, LayerKind.FC2)


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    dim: int = 8
    heads: int = 2
    tokens: int = 8
    in_dim: int = 8
    num_classes: int = 4
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.n_blocks < 1 or self.dim < 1 or self.heads < 1:
            raise ValueError("n_blocks, dim and heads must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def layer_shape(self, kind: LayerKind) -> tuple[int, int]:
        d, hid = self.dim, self.mlp_ratio * self.dim
        return {
            LayerKind.QKV: (3 * d, d),
            LayerKind.PROJ: (d, d),
            LayerKind.FC1: (hid, d),
            LayerKind.FC2: (d, hid),
        }[kind]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerRecord:
    layer_id: int
    block_idx: int
    kind: LayerKind
    weight: np.ndarray  # (out_dim, in_dim), a view into the model parameters
    bias: np.ndarray

    @property
    def param_count(self) -> int:
        # weights only; biases stay full precision
        return int(self.weight.size)


def layer_id_of(block_idx: int, kind: LayerKind) -> int:
    return 4 * block_idx + LayerKind(kind).ordinal


def split_layer_id(layer_id: int) -> tuple[int, LayerKind]:
    return layer_id // 4, KINDS[layer_id % 4]


def layer_param_name(layer_id: int, part: str = "weight") -> str:
    block, kind = split_layer_id(layer_id)
    return f"blocks.{block}.{kind.value}.{part}"


class ToyViT:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        self.params = params

    @property
    def num_layers(self) -> int:
        return 4 * self.config.n_blocks

    def layer(self, layer_id: int) -> LayerRecord:
        if not 0 <= layer_id < self.num_layers:
            raise IndexError(f"layer_id {layer_id} out of range [0, {self.num_layers})")
        block, kind = split_layer_id(layer_id)
        return LayerRecord(
            layer_id,
            block,
            kind,
            self.params[layer_param_name(layer_id, "weight")],
            self.params[layer_param_name(layer_id, "bias")],
        )

    @property
    def layers(self) -> list[LayerRecord]:
        return [self.layer(i) for i in range(self.num_layers)]

    def copy(self) -> "ToyViT":
        return ToyViT(self.config, {k: v.copy() for k, v in self.params.items()})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order; checkpoints and optimizers iterate this."""
    d = cfg.dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (d, cfg.in_dim),
        "embed.bias": (d,),
        "pos": (cfg.tokens, d),
    }
    for b in range(cfg.n_blocks):
        shapes[f"blocks.{b}.ln1.gamma"] = (d,)
        shapes[f"blocks.{b}.ln1.beta"] = (d,)
        for kind in KINDS:
            if kind is LayerKind.FC1:
                shapes[f"blocks.{b}.ln2.gamma"] = (d,)
                shapes[f"blocks.{b}.ln2.beta"] = (d,)
            out_dim, in_dim = cfg.layer_shape(kind)
            shapes[f"blocks.{b}.{kind.value}.weight"] = (out_dim, in_dim)
            shapes[f"blocks.{b}.{kind.value}.bias"] = (out_dim,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.weight"] = (cfg.num_classes, d)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def init_model(cfg: ModelConfig, seed: int) -> ToyViT:
    rng = sub_rng(seed, 10)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            params[name] = np.zeros(shape)
        elif name == "pos":
            params[name] = 0.1 * rng.standard_normal(shape)
        else:
            params[name] = rng.standard_normal(shape) / math.sqrt(shape[1])
    return ToyViT(cfg, params)


def zeros_like_model(cfg: ModelConfig) -> ToyViT:
    return ToyViT(cfg, {k: np.zeros(s) for k, s in param_shapes(cfg).items()})


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


@dataclass
class ForwardCache:
    inputs: np.ndarray
    blocks: list[dict] = field(default_factory=list)
    layer_inputs: dict[int, np.ndarray] = field(default_factory=dict)
    used: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    head: dict = field(default_factory=dict)
    start_block: int = 0


def _layernorm(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv)


def _layernorm_bwd(dy, gamma, state):
    xhat, inv = state
    red = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(red)
    dbeta = dy.sum(red)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_bwd(dg, u, t):
    return dg * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u))


def _linear(model: ToyViT, layer_id: int, x, quant, cache: ForwardCache):
    w = model.params[layer_param_name(layer_id, "weight")]
    b = model.params[layer_param_name(layer_id, "bias")]
    cache.layer_inputs[layer_id] = x
    if quant is not None:
        x = quant.act(layer_id, x)
        w = quant.weight(layer_id)
    cache.used[layer_id] = (x, w)
    if w.ndim == 3:
        # a stack of P weight variants applied to P equal slices of the batch
        y = x.reshape(w.shape[0], -1, x.shape[-1]) @ w.transpose(0, 2, 1)
        return y.reshape(*x.shape[:-1], w.shape[1]) + b
    return (x.reshape(-1, x.shape[-1]) @ w.T).reshape(*x.shape[:-1], w.shape[0]) + b


def embed(model: ToyViT, inputs: np.ndarray) -> np.ndarray:
    cfg = model.config
    if inputs.ndim != 3 or inputs.shape[1:] != (cfg.tokens, cfg.in_dim):
        raise ValueError(f"expected inputs (B, {cfg.tokens}, {cfg.in_dim}), got {inputs.shape}")
    p = model.params
    return inputs @ p["embed.weight"].T + p["embed.bias"] + p["pos"]


def _block(model: ToyViT, b: int, h, quant, cache: ForwardCache):
    cfg, p = model.config, model.params
    pre = f"blocks.{b}."
    nb, L, d = h.shape
    nh, dh = cfg.heads, d // cfg.heads
    st: dict = {}

    a, st["ln1"] = _layernorm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
    qkv = _linear(model, 4 * b, a, quant, cache)
    q, k, v = (qkv[..., i * d : (i + 1) * d].reshape(nb, L, nh, dh).transpose(0, 2, 1, 3) for i in range(3))
    att = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
    o = (att @ v).transpose(0, 2, 1, 3).reshape(nb, L, d)
    st.update(q=q, k=k, v=v, att=att)
    h = h + _linear(model, 4 * b + 1, o, quant, cache)

    a2, st["ln2"] = _layernorm(h, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
    u = _linear(model, 4 * b + 2, a2, quant, cache)
    g, st["gelu_t"] = _gelu(u)
    st["u"] = u
    h = h + _linear(model, 4 * b + 3, g, quant, cache)
    cache.blocks.append(st)
    return h


def block_forward(model: ToyViT, b: int, hidden: np.ndarray, quant=None) -> np.ndarray:
    """One block applied to a residual-stream tensor, without keeping the cache."""
    return _block(model, b, hidden, quant, ForwardCache(inputs=None))


def forward_from(model: ToyViT, hidden: np.ndarray, start_block: int = 0, quant=None, inputs=None):
    """Run blocks ``start_block..N-1`` and the head on a residual-stream tensor."""
    cache = ForwardCache(inputs=inputs, start_block=start_block)
    h = hidden
    for b in range(start_block, model.config.n_blocks):
        h = _block(model, b, h, quant, cache)
    p = model.params
    hn, cache.head["ln"] = _layernorm(h, p["norm.gamma"], p["norm.beta"])
    pooled = hn.mean(axis=1)
    cache.head["pooled"] = pooled
    return pooled @ p["head.weight"].T + p["head.bias"], cache


def forward(model: ToyViT, inputs: np.ndarray, quant=None):
    """Logits and the activation cache.

    ``quant`` (optional) fake-quantizes layer inputs and weights; it must expose
    ``act(layer_id, x)`` and ``weight(layer_id)``. ``cache.layer_inputs`` always
    holds the un-quantized input each layer received.
    """
    return forward_from(model, embed(model, inputs), 0, quant, inputs)


def logits(model: ToyViT, inputs: np.ndarray, quant=None) -> np.ndarray:
    return forward(model, inputs, quant)[0]


def nll_loss(z: np.ndarray, labels: np.ndarray) -> float:
    lp = log_softmax(z)
    return float(-np.mean(lp[np.arange(len(labels)), labels]))


def per_example_nll(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return -log_softmax(z)[np.arange(len(labels)), labels]


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


def backward(model: ToyViT, cache: ForwardCache, dlogits: np.ndarray, per_example=()):
    """Reverse pass given dLoss/dlogits.

    Returns ``(grads, per_ex)``: ``grads`` maps every parameter reached by the
    pass to its gradient; ``per_ex`` maps each layer id listed in
    ``per_example`` to a ``(B, out, in)`` stack of per-example weight gradients.
    Quantized layers use the straight-through rule.
    """
    cfg, p = model.config, model.params
    per_example = set(per_example)
    grads: dict[str, np.ndarray] = {}
    per_ex: dict[int, np.ndarray] = {}

    pooled = cache.head["pooled"]
    grads["head.weight"] = dlogits.T @ pooled
    grads["head.bias"] = dlogits.sum(0)
    dpooled = dlogits @ p["head.weight"]
    nb = dpooled.shape[0]
    dhn = np.broadcast_to(dpooled[:, None, :] / cfg.tokens, (nb, cfg.tokens, cfg.dim))
    dh, grads["norm.gamma"], grads["norm.beta"] = _layernorm_bwd(dhn, p["norm.gamma"], cache.head["ln"])

    def linear_bwd(layer_id, gout):
        x, w = cache.used[layer_id]
        grads[layer_param_name(layer_id, "weight")] = np.einsum("blo,bli->oi", gout, x)
        grads[layer_param_name(layer_id, "bias")] = gout.sum((0, 1))
        if layer_id in per_example:
            per_ex[layer_id] = np.einsum("blo,bli->boi", gout, x)
        return gout @ w

    d = cfg.dim
    nh, dh_ = cfg.heads, d // cfg.heads
    for b in reversed(range(cache.start_block, cfg.n_blocks)):
        st = cache.blocks[b - cache.start_block]
        pre = f"blocks.{b}."
        # mlp branch
        dg = linear_bwd(4 * b + 3, dh)
        du = _gelu_bwd(dg, st["u"], st["gelu_t"])
        da2 = linear_bwd(4 * b + 2, du)
        dx, grads[pre + "ln2.gamma"], grads[pre + "ln2.beta"] = _layernorm_bwd(da2, p[pre + "ln2.gamma"], st["ln2"])
        dh = dh + dx
        # attention branch
        do = linear_bwd(4 * b + 1, dh).reshape(nb, cfg.tokens, nh, dh_).transpose(0, 2, 1, 3)
        att, q, k, v = st["att"], st["q"], st["k"], st["v"]
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) / math.sqrt(dh_)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [t.transpose(0, 2, 1, 3).reshape(nb, cfg.tokens, d) for t in (dq, dk, dv)], axis=-1
        )
        da = linear_bwd(4 * b, dqkv)
        dx, grads[pre + "ln1.gamma"], grads[pre + "ln1.beta"] = _layernorm_bwd(da, p[pre + "ln1.gamma"], st["ln1"])
        dh = dh + dx

    if cache.start_block == 0 and cache.inputs is not None:
        grads["embed.weight"] = np.einsum("bld,bli->di", dh, cache.inputs)
        grads["embed.bias"] = dh.sum((0, 1))
        grads["pos"] = dh.sum(0)
    return grads, per_ex


def nll_dlogits(z: np.ndarray, labels: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Gradient of ``scale * mean NLL`` with respect to the logits."""
    g = softmax(z)
    g[np.arange(len(labels)), labels] -= 1.0
    return g * (scale / len(labels))


def gradients(model: ToyViT, batch: Batch, loss_scale: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL (times ``loss_scale``) and its exact gradient for every parameter."""
    z, cache = forward(model, batch.inputs)
    grads, _ = backward(model, cache, nll_dlogits(z, batch.labels, loss_scale))
    return loss_scale * nll_loss(z, batch.labels), grads


def predict(model: ToyViT, inputs: np.ndarray, quant=None, batch_size: int = 512) -> np.ndarray:
    out = [np.argmax(logits(model, inputs[i : i + batch_size], quant), axis=1) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: ToyViT, batch: Batch, quant=None) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if batch.size == 0:
        return 0.0
    return float(np.mean(predict(model, batch.inputs, quant) == batch.labels))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    min_accuracy: float = 0.85
    frozen: tuple[str, ...] = ()  # parameter names kept at their initial values


class TrainingError(RuntimeError):
    pass


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, b1, b2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in params:  # canonical order
            g = grads[k]
            if self.wd and k.endswith("weight"):
                g = g + self.wd * params[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fit(model: ToyViT, train: Batch, cfg: TrainConfig, seed: int) -> ToyViT:
    unknown = set(cfg.frozen) - set(model.params)
    if unknown:
        raise KeyError(f"cannot freeze unknown parameters {sorted(unknown)}")
    trainable = {k: v for k, v in model.params.items() if k not in cfg.frozen}
    opt = _Adam(trainable, cfg.lr, weight_decay=cfg.weight_decay)
    rng = sub_rng(seed, 20)
    for _ in range(cfg.epochs):
        order = rng.permutation(train.size)
        for start in range(0, train.size, cfg.batch_size):
            _, grads = gradients(model, train.take(order[start : start + cfg.batch_size]))
            opt.step(trainable, grads)
    return model


def train_toy(
    seed: int,
    model_cfg: ModelConfig | None = None,
    task_cfg: TaskConfig | None = None,
    train_cfg: TrainConfig | None = None,
) -> tuple[ToyViT, Splits]:
    """Generate the synthetic task for ``seed`` and fit a fresh model on its train split.

    Raises :class:`TrainingError` if the test accuracy ends below
    ``train_cfg.min_accuracy`` (skipped when ``epochs == 0``).
    """
    task_cfg = task_cfg or TaskConfig()
    train_cfg = train_cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig(
        tokens=task_cfg.tokens, in_dim=task_cfg.in_dim, num_classes=task_cfg.num_classes
    )
    if (model_cfg.tokens, model_cfg.in_dim, model_cfg.num_classes) != (
        task_cfg.tokens,
        task_cfg.in_dim,
        task_cfg.num_classes,
    ):
        raise ValueError("model and task disagree on tokens / in_dim / num_classes")
    splits = gen_task(seed, task_cfg)
    model = fit(init_model(model_cfg, seed), splits.train, train_cfg, seed)
    if train_cfg.epochs > 0:
        acc = evaluate(model, splits.test)
        if acc < train_cfg.min_accuracy:
            raise TrainingError(
                f"test accuracy {acc:.3f} is below the required {train_cfg.min_accuracy:.2f}; "
                "raise epochs or lr, or lower the task noise"
            )
    return model, splits
