"""Small random instances of every trainable layer type, for finite-difference checks.

Each case builds (params, loss_fn) in float64 from a seed.
"""

import torch
import torch.nn.functional as F
from torch import nn

from convsense.fusion import ConcatFusion, CrossAttentionHead, FusionSpec
from convsense.models import ChannelSelfAttention, ModelSpec

TINY = {
    "pure_acoustic": {"n_bands": 6, "conv_channels": 3, "kernel": 3, "proj_dim": 3, "hidden": 4,
                      "fc_dims": [5, 4]},
    "cnn_attention": {"channels": 3, "kernels": [3, 3], "hidden": 4, "steps": 2},
}


def _probe(out, g):
    return (out * torch.randn(out.shape, generator=g, dtype=torch.float64)).sum()


def _setup(module, seed):
    torch.manual_seed(seed)
    module = module.double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.5)
    return module, g


def conv(seed):
    m, g = _setup(nn.Conv1d(4, 3, 3, padding=1), seed)
    x = torch.randn(2, 4, 7, generator=g, dtype=torch.float64)
    return list(m.parameters()), lambda: _probe(m(x), g.manual_seed(seed + 1))


def conv2d(seed):
    m, g = _setup(nn.Conv2d(2, 3, (2, 3), padding=(0, 1)), seed)
    x = torch.randn(2, 2, 6, 5, generator=g, dtype=torch.float64)
    return list(m.parameters()), lambda: _probe(m(x), g.manual_seed(seed + 1))


def dense(seed):
    m, g = _setup(nn.Linear(5, 4), seed)
    x = torch.randn(3, 5, generator=g, dtype=torch.float64)
    return list(m.parameters()), lambda: _probe(m(x), g.manual_seed(seed + 1))


def batchnorm_train(seed):
    m, g = _setup(nn.BatchNorm2d(3), seed)
    m.train()
    x = torch.randn(4, 3, 2, 3, generator=g, dtype=torch.float64)
    return list(m.parameters()), lambda: _probe(m(x), g.manual_seed(seed + 1))


def batchnorm_eval(seed):
    m, g = _setup(nn.BatchNorm2d(3), seed)
    m.running_mean.copy_(torch.randn(3, generator=g, dtype=torch.float64))
    m.running_var.copy_(torch.rand(3, generator=g, dtype=torch.float64) + 0.5)
    m.eval()
    x = torch.randn(4, 3, 2, 3, generator=g, dtype=torch.float64)
    return list(m.parameters()), lambda: _probe(m(x), g.manual_seed(seed + 1))


def recurrent(seed):
    m, g = _setup(nn.LSTM(3, 4, batch_first=True), seed)
    x = torch.randn(2, 5, 3, generator=g, dtype=torch.float64)

    def loss():
        seq, (h, c) = m(x)
        gg = torch.Generator().manual_seed(seed + 1)
        return _probe(seq, gg) + _probe(h, gg) + _probe(c, gg)

    return list(m.parameters()), loss


def self_attention(seed):
    m, g = _setup(ChannelSelfAttention(4), seed)
    x = torch.randn(2, 3, 6, 4, generator=g, dtype=torch.float64)
    return list(m.parameters()), lambda: _probe(m(x), g.manual_seed(seed + 1))


def cross_attention(seed):
    m, g = _setup(CrossAttentionHead(5, 7, 4), seed)
    a = torch.randn(2, 3, 5, generator=g, dtype=torch.float64)
    i = torch.randn(2, 4, 7, generator=g, dtype=torch.float64)

    def loss():
        emb, logits = m(a, i)
        gg = torch.Generator().manual_seed(seed + 1)
        return _probe(emb, gg) + _probe(logits, gg)

    return list(m.parameters()), loss


def fusion_head(seed):
    """Joint head of concat fusion, differentiated through the full fused forward pass.

    Only head parameters are perturbed: the branches end in ReLUs, where a
    finite step can straddle a kink; their layers are covered case by case.
    """
    spec = FusionSpec("concat", ModelSpec("pure_acoustic", TINY["pure_acoustic"]),
                      ModelSpec("cnn_attention", TINY["cnn_attention"]))
    # random nonzero biases: zero biases put ReLU inputs exactly on the kink
    m, g = _setup(ConcatFusion(spec), seed)
    a = torch.randn(3, 6, 8, generator=g, dtype=torch.float64)
    i = torch.rand(3, 4, 6, 2, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2])
    m.eval()
    return list(m.head.parameters()), lambda: F.cross_entropy(m(a, i)[1], y)


CASES = {
    "conv1d": conv,
    "conv2d": conv2d,
    "dense": dense,
    "batchnorm_train": batchnorm_train,
    "batchnorm_eval": batchnorm_eval,
    "recurrent": recurrent,
    "self_attention": self_attention,
    "cross_attention": cross_attention,
    "fusion_head": fusion_head,
}
