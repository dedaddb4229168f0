"""Two-branch causal TCN embeddings, attention weights, and class scoring.

Two independent temporal convolutional stacks embed the sampled grid; one
embedding drives per-timestep attention (softmax over valid rows, one
column per class), the other drives per-feature gates (sigmoid, one slice
per class). Each grid cell then contributes

    contribution[j, m, class] = alpha[j, class] * beta[j, m, class] * y[j, m]

and the class score at prediction time is the sum of all contributions,
so exported traces reproduce the prediction exactly.

Per-step scores for earlier rows renormalize the attention over the
visible prefix (softmax restricted to rows <= i). At the last row this
equals the plain contribution sum; for earlier rows it is the only
formulation whose outputs depend, bit for bit, on past rows alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, NumericalError
from .torchutil import DTYPE

# Finite stand-in for -inf on masked attention logits; exp() underflows to
# exactly 0.0 in float64 while keeping gradients clean.
MASKED_LOGIT = -1e30

# Forward-pass invariant checks (attention bounds, probability sums) run on
# every call; flip off only if profiling shows them to matter.
VALIDATE_FORWARD = True


@dataclass(frozen=True)
class TcnConfig:
    """Architecture and regularization settings for one TCN stack."""

    kernel_size: int = 3
    n_blocks: int = 2
    hidden_channels: int = 16
    dropout: float = 0.1
    l2: float = 0.0

    def __post_init__(self):
        if self.kernel_size < 1 or self.n_blocks < 1 or self.hidden_channels < 1:
            raise InputError("kernel_size, n_blocks and hidden_channels must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError("dropout must lie in [0, 1)")
        if self.l2 < 0.0:
            raise InputError("l2 must be non-negative")


class AttTcnParameters:
    """Weights for both TCN stacks and the attention projections.

    Both stacks output ``channels`` features per row so the embeddings line
    up with the sampled grid channels.
    """

    def __init__(self, channels, tcn_alpha, tcn_beta, w_alpha, b_alpha, w_beta, b_beta):
        self.channels = channels
        self.tcn_alpha = tcn_alpha  # list of (w1, b1, w2, b2) per block
        self.tcn_beta = tcn_beta
        self.w_alpha = w_alpha  # (C, 2)
        self.b_alpha = b_alpha  # (2,)
        self.w_beta = w_beta  # (C, C, 2)
        self.b_beta = b_beta  # (C, 2)

    @classmethod
    def create(cls, channels: int, config: TcnConfig, seed: int) -> "AttTcnParameters":
        gen = torch.Generator()
        gen.manual_seed(seed)

        def conv_pair(c_in, c_mid, c_out):
            def he(c_i, c_o):
                std = (2.0 / (c_i * config.kernel_size)) ** 0.5
                w = torch.randn((c_o, c_i, config.kernel_size), generator=gen, dtype=DTYPE) * std
                return w, torch.zeros(c_o, dtype=DTYPE)

            w1, b1 = he(c_in, c_mid)
            w2, b2 = he(c_mid, c_out)
            return [w1, b1, w2, b2]

        def stack():
            blocks = []
            for b in range(config.n_blocks):
                c_in = channels if b == 0 else config.hidden_channels
                c_out = channels if b == config.n_blocks - 1 else config.hidden_channels
                blocks.append(conv_pair(c_in, config.hidden_channels, c_out))
            return blocks

        proj_std = channels**-0.5
        params = cls(
            channels,
            stack(),
            stack(),
            torch.randn((channels, 2), generator=gen, dtype=DTYPE) * proj_std,
            torch.zeros(2, dtype=DTYPE),
            torch.randn((channels, channels, 2), generator=gen, dtype=DTYPE) * proj_std,
            torch.zeros((channels, 2), dtype=DTYPE),
        )
        params.requires_grad_(True)
        return params

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for branch, blocks in (("tcn_alpha", self.tcn_alpha), ("tcn_beta", self.tcn_beta)):
            for i, (w1, b1, w2, b2) in enumerate(blocks):
                out[f"att.{branch}.block{i}.w1"] = w1
                out[f"att.{branch}.block{i}.b1"] = b1
                out[f"att.{branch}.block{i}.w2"] = w2
                out[f"att.{branch}.block{i}.b2"] = b2
        out["att.w_alpha"] = self.w_alpha
        out["att.b_alpha"] = self.b_alpha
        out["att.w_beta"] = self.w_beta
        out["att.b_beta"] = self.b_beta
        return out

    def conv_weights(self) -> list[torch.Tensor]:
        """Convolution kernels only; the L2 penalty applies to these."""
        return [t for blocks in (self.tcn_alpha, self.tcn_beta) for blk in blocks for t in (blk[0], blk[2])]

    def requires_grad_(self, flag: bool):
        for t in self.named_tensors().values():
            t.requires_grad_(flag)
        return self


@dataclass
class AttentionTrace:
    """Per-patient interpretability export, averaged over MC samples.

    contributions[j, m, c] = alpha[j, c] * beta[j, m, c] * y[j, m]; summing
    them and applying a softmax reproduces ``probabilities``.
    """

    alpha: np.ndarray  # (N, 2)
    beta: np.ndarray  # (N, C, 2)
    contributions: np.ndarray  # (N, C, 2)
    probabilities: np.ndarray  # (2,)

    def validate(self, mask: np.ndarray, tol: float = 1e-6):
        valid = ~mask
        col_sums = self.alpha[valid].sum(axis=0)
        if not np.allclose(col_sums, 1.0, atol=tol):
            raise NumericalError(f"alpha columns sum to {col_sums}, expected 1")
        if self.alpha.min() < -tol or self.alpha.max() > 1 + tol:
            raise NumericalError("alpha outside [0, 1]")
        if self.beta.min() < -tol or self.beta.max() > 1 + tol:
            raise NumericalError("beta outside [0, 1]")
        if abs(self.probabilities.sum() - 1.0) > tol:
            raise NumericalError("probabilities do not sum to 1")


def _batched(x: torch.Tensor):
    if x.ndim == 2:
        return x.unsqueeze(0), True
    return x, False


def causal_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """1-D convolution with left padding: row i sees rows <= i only."""
    x, squeeze = _batched(x)
    k = weight.shape[-1]
    xt = F.pad(x.transpose(1, 2), (k - 1, 0))
    out = F.conv1d(xt, weight, bias).transpose(1, 2)
    return out.squeeze(0) if squeeze else out


def _dropout(x, p, gen, training):
    if not training or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=DTYPE) >= p).to(DTYPE)
    return x * keep / (1.0 - p)


def causal_residual_block(x, block, config: TcnConfig, gen=None, training=False):
    """conv -> ReLU -> dropout, twice. The identity skip is omitted: the
    stacks stay shallow enough that it buys nothing."""
    w1, b1, w2, b2 = block
    h = _dropout(torch.relu(causal_conv(x, w1, b1)), config.dropout, gen, training)
    return _dropout(torch.relu(causal_conv(h, w2, b2)), config.dropout, gen, training)


def embed(y, params: AttTcnParameters, config: TcnConfig, gen=None, training=False):
    """Run both TCN stacks on the sampled grid; no weight sharing."""
    outs = []
    for blocks in (params.tcn_alpha, params.tcn_beta):
        h = y
        for block in blocks:
            h = causal_residual_block(h, block, config, gen, training)
        outs.append(h)
    return outs[0], outs[1]


def _as_mask(mask, batch: int, n_rows: int) -> torch.Tensor:
    mask_t = torch.as_tensor(np.asarray(mask, dtype=bool))
    if mask_t.ndim == 1:
        mask_t = mask_t.unsqueeze(0).expand(batch, -1)
    if mask_t.shape != (batch, n_rows):
        raise InputError("mask shape does not match input rows")
    return mask_t


def alpha_logits(z, params: AttTcnParameters, uniform=False) -> torch.Tensor:
    """Per-row, per-class attention logits; zeros when forced uniform."""
    z, _ = _batched(z)
    if uniform:
        return torch.zeros((*z.shape[:2], 2), dtype=DTYPE)
    return z @ params.w_alpha + params.b_alpha


def beta_gates(zp, params: AttTcnParameters, unit=False) -> torch.Tensor:
    """Sigmoid feature gates in [0, 1]; ones when forced off."""
    zp, _ = _batched(zp)
    if unit:
        return torch.ones((*zp.shape[:2], params.channels, 2), dtype=DTYPE)
    return torch.sigmoid(torch.einsum("bnc,cdk->bndk", zp, params.w_beta) + params.b_beta)


def masked_alpha(logits: torch.Tensor, mask) -> torch.Tensor:
    """Softmax over the time axis restricted to unmasked rows."""
    logits, squeeze = _batched(logits)
    mask_t = _as_mask(mask, logits.shape[0], logits.shape[1])
    if bool(mask_t.all(dim=1).any()):
        raise InputError("attention undefined when every grid row is masked")
    filled = logits.masked_fill(mask_t.unsqueeze(-1), MASKED_LOGIT)
    alpha = torch.softmax(filled, dim=1)
    return (alpha.squeeze(0) if squeeze else alpha), filled


def attention(z, zp, params: AttTcnParameters, mask):
    """Attention weights alpha (rows x 2) and gates beta (rows x C x 2)."""
    z_b, squeeze = _batched(z)
    zp_b, _ = _batched(zp)
    alpha, _ = masked_alpha(alpha_logits(z_b, params), mask)
    beta = beta_gates(zp_b, params)
    if VALIDATE_FORWARD:
        _check_attention(alpha, beta, mask)
    if squeeze:
        return alpha.squeeze(0) if alpha.ndim == 3 else alpha, beta.squeeze(0)
    return alpha, beta


def _check_attention(alpha, beta, mask):
    with torch.no_grad():
        a, _ = _batched(alpha)
        valid = (~_as_mask(mask, a.shape[0], a.shape[1])).to(DTYPE)
        sums = (a * valid.unsqueeze(-1)).sum(dim=1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6):
            raise NumericalError("alpha columns do not sum to 1 over unmasked rows")
        if float(a.min()) < 0 or float(a.max()) > 1 + 1e-12:
            raise NumericalError("alpha left [0, 1]")
        if float(beta.min()) < 0 or float(beta.max()) > 1:
            raise NumericalError("beta left [0, 1]")


def causal_step_scores(step_contrib: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Prefix-softmax-weighted cumulative scores, one row per time step.

    step_contrib[b, j, c] is the row-j contribution sum_m beta * y; row i of
    the result weights rows j <= i by softmax(logits[j <= i]). Only prefix
    quantities enter row i, so outputs for i < j are bitwise invariant to
    changes in row j.
    """
    step_contrib, squeeze = _batched(step_contrib)
    logits, _ = _batched(logits)
    n = logits.shape[1]
    run_max = torch.cummax(logits, dim=1).values  # (B, N, 2)
    exponent = logits[:, None, :, :] - run_max[:, :, None, :]  # (B, i, j, 2)
    prefix = torch.tril(torch.ones((n, n), dtype=torch.bool))[None, :, :, None]
    weights = torch.exp(torch.where(prefix, exponent, torch.full_like(exponent, -torch.inf)))
    den = weights.sum(dim=2)
    num = (weights * step_contrib[:, None, :, :]).sum(dim=2)
    scores = num / den
    return scores.squeeze(0) if squeeze else scores


def predict(y_mc, alpha, beta, logits=None):
    """Contributions, per-step class scores, and prediction probabilities.

    Probabilities come from the full contribution sum (the last-step score).
    Per-step scores use the prefix renormalization above; when ``logits`` is
    omitted they are reconstructed from alpha, which is numerically but not
    bitwise equivalent.
    """
    y_b, squeeze = _batched(y_mc)
    alpha_b, _ = _batched(alpha)
    beta_b = beta.unsqueeze(0) if beta.ndim == 3 else beta
    contrib = alpha_b[:, :, None, :] * beta_b * y_b[:, :, :, None]  # (B, N, C, 2)
    score = contrib.sum(dim=(1, 2))  # (B, 2)
    probabilities = torch.softmax(score, dim=-1)
    step_contrib = (beta_b * y_b[:, :, :, None]).sum(dim=2)  # (B, N, 2)
    if logits is not None:
        logits_b, _ = _batched(logits)
        step_scores = causal_step_scores(step_contrib, logits_b)
    else:
        num = torch.cumsum(alpha_b * step_contrib, dim=1)
        den = torch.cumsum(alpha_b, dim=1)
        den = den + (den == 0).to(DTYPE)  # all-masked prefixes score 0
        step_scores = num / den
    if VALIDATE_FORWARD:
        with torch.no_grad():
            total = probabilities.sum(dim=-1)
            if not torch.allclose(total, torch.ones_like(total), atol=1e-6):
                raise NumericalError("probabilities do not sum to 1")
    if squeeze:
        return step_scores.squeeze(0), probabilities.squeeze(0), contrib.squeeze(0)
    return step_scores, probabilities, contrib
