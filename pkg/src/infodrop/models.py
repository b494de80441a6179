"""Network assembly for the MLP and the All-CNN family."""
from __future__ import annotations

import math

from .config import TrainingConfig
from .errors import ConfigError
from .layers import InfoDropout, PriorSpec
from .nn import (
    BinaryDropout,
    Capture,
    ForwardContext,
    GlobalAvgPool,
    Linear,
    Module,
    Sequential,
    conv_block,
    dense_block,
)
from .tensor import Rng, Tensor

# (block widths, head widths) per table row; each block is three 3x3 convs,
# the last with stride 2, followed by a dropout position.
ALL_CNN = {
    "all_cnn_32": ([96, 192], [192, 192]),
    "all_cnn_96": ([32, 64, 96, 192], [192, 192]),
}


class Network(Module):
    """A feed-forward classifier with marked dropout positions.

    After every dropout position the representation is stored in
    ``ctx.capture["dropout<i>"]``.
    """

    def __init__(self, body: Sequential, kind: str, input_shape: tuple[int, ...], n_dropout: int):
        self.body = body
        self.kind = kind
        self.input_shape = tuple(input_shape)
        self.n_dropout = n_dropout

    def children(self):
        return iter((("body", self.body),))

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return self.body(x, ctx)

    def info_layers(self) -> list[InfoDropout]:
        return [m for m in self.modules() if isinstance(m, InfoDropout)]

    @property
    def is_conv(self) -> bool:
        return self.kind != "mlp"


def scaled(width: int, fraction: float) -> int:
    n = int(math.floor(width * fraction + 0.5))
    if n < 1:
        raise ConfigError(f"filter_fraction {fraction} leaves no filters")
    return n


def _dropout_position(kind: str, p: float = 0.5) -> list[Module]:
    return [BinaryDropout(p)] if kind == "binary" else []


def build_network(cfg: TrainingConfig, input_shape: tuple[int, ...], rng: Rng, n_classes: int = 10) -> Network:
    """Build the network described by ``cfg`` for inputs of shape [c, h, w].

    Batchnorm precedes every activation.  With ``dropout_kind="info"`` the
    layer feeding each dropout position becomes an Information Dropout
    layer whose noise-scale branch mirrors it.
    """
    act = cfg.activation
    kw = dict(alpha_max=cfg.alpha_max, prior=PriorSpec.for_activation(act))
    layers: list[Module] = []
    pos = 0
    if cfg.network == "mlp":
        n_in = math.prod(input_shape)
        h = cfg.hidden_units
        for i in range(3):
            if cfg.dropout_kind == "info":
                layers.append(InfoDropout.dense(n_in, h, act, rng.child(i), **kw))
            else:
                layers.append(dense_block(n_in, h, act, rng.child(i)))
                layers += _dropout_position(cfg.dropout_kind)
            layers.append(Capture(f"dropout{pos}"))
            pos += 1
            n_in = h
        layers.append(Linear(h, n_classes, rng.child(99)))
        return Network(Sequential(*layers), "mlp", input_shape, pos)

    if cfg.network not in ALL_CNN:
        raise ConfigError(f"unknown network {cfg.network!r}")
    blocks, head = ALL_CNN[cfg.network]
    c_in = input_shape[0]
    k = 0
    for width in blocks:
        c = scaled(width, cfg.filter_fraction)
        for _ in range(2):
            layers.append(conv_block(c_in, c, 3, act, rng.child(k)))
            c_in, k = c, k + 1
        if cfg.dropout_kind == "info":
            layers.append(InfoDropout.conv(c_in, c, 3, act, rng.child(k), stride=2, **kw))
        else:
            layers.append(conv_block(c_in, c, 3, act, rng.child(k), stride=2))
            layers += _dropout_position(cfg.dropout_kind)
        layers.append(Capture(f"dropout{pos}"))
        c_in, k, pos = c, k + 1, pos + 1
    c = scaled(head[0], cfg.filter_fraction)
    layers.append(conv_block(c_in, c, 3, act, rng.child(k)))
    c2 = scaled(head[1], cfg.filter_fraction)
    layers.append(conv_block(c, c2, 1, act, rng.child(k + 1), pad="valid"))
    layers.append(conv_block(c2, n_classes, 1, act, rng.child(k + 2), pad="valid"))
    layers.append(GlobalAvgPool())
    return Network(Sequential(*layers), cfg.network, input_shape, pos)


def parameter_count(net: Module) -> int:
    return sum(p.size for p in net.parameters().values())
