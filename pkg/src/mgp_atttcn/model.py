"""Joint model: GP interpolation layer feeding the attention classifier.

One forward pass per patient: posterior on the hourly grid, S
reparameterized draws, TCN embeddings, attention, class scores. Scores are
averaged over MC draws; the prediction probability is the softmax of that
mean score, so it is a deterministic function of the averaged contribution
tensor that the interpretability export stores.

Ablations swap parts of this path: forced-uniform attention, unit gates,
SE time kernels, or no attention at all (flattened-sample logistic head,
pooled single-TCN head).
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import atttcn, mgp
from .atttcn import AttTcnParameters, AttentionTrace, TcnConfig
from .errors import DataError, InputError
from .seeds import derive
from .torchutil import DTYPE, as_tensor

ABLATIONS = ("full", "no_alpha", "no_beta", "se_kernel", "mgp_logreg_head", "mgp_tcn_head")
ATTENTION_ABLATIONS = ("full", "no_alpha", "no_beta", "se_kernel")

CHECKPOINT_MAGIC = b"MGPATT1"


@dataclass(frozen=True)
class ModelConfig:
    m_dynamic: int
    q_static: int
    tcn: TcnConfig = field(default_factory=TcnConfig)
    n_grid: int = mgp.DEFAULT_GRID_SIZE
    ablation: str = "full"
    init_lengthscales: tuple = (4.0, 32.0)
    init_noise: float = 0.3
    init_seed: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise InputError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.m_dynamic < 1 or self.q_static < 0 or self.n_grid < 1:
            raise InputError("m_dynamic >= 1, q_static >= 0, n_grid >= 1 required")

    @property
    def channels(self) -> int:
        return self.m_dynamic + self.q_static

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["init_lengthscales"] = list(self.init_lengthscales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["tcn"] = TcnConfig(**d["tcn"])
        d["init_lengthscales"] = tuple(d["init_lengthscales"])
        return cls(**d)


@dataclass
class BatchOutput:
    """probabilities: (B, 2) softmax of the MC-mean score; sample_scores:
    (B, S, 2) per-draw class scores the loss consumes; traces only when
    requested."""

    probabilities: torch.Tensor
    sample_scores: torch.Tensor
    traces: list | None = None


class MgpAttTcn:
    def __init__(self, config: ModelConfig):
        self.config = config
        families = ("SE", "SE") if config.ablation == "se_kernel" else ("OU", "OU")
        self.mgp_params = mgp.MgpParameters.create(
            config.m_dynamic,
            lengthscales=config.init_lengthscales,
            noise=config.init_noise,
            families=families,
            seed=derive(config.init_seed, "mgp-init"),
        )
        self.att_params = AttTcnParameters.create(
            config.channels, config.tcn, derive(config.init_seed, "att-init")
        )
        gen = torch.Generator()
        gen.manual_seed(derive(config.init_seed, "head-init"))
        flat_dim = config.n_grid * config.channels
        self.head_w_flat = torch.randn((flat_dim, 2), generator=gen, dtype=DTYPE) * flat_dim**-0.5
        self.head_b_flat = torch.zeros(2, dtype=DTYPE)
        self.head_w_pooled = torch.randn((config.channels, 2), generator=gen, dtype=DTYPE) * config.channels**-0.5
        self.head_b_pooled = torch.zeros(2, dtype=DTYPE)
        for t in self._head_tensors().values():
            t.requires_grad_(True)

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def _head_tensors(self):
        return {
            "head.w_flat": self.head_w_flat,
            "head.b_flat": self.head_b_flat,
            "head.w_pooled": self.head_w_pooled,
            "head.b_pooled": self.head_b_pooled,
        }

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """Every raw tensor, used or not, in a stable order (checkpoints)."""
        out = {}
        out.update(self.mgp_params.named_tensors())
        out.update(self.att_params.named_tensors())
        out.update(self._head_tensors())
        return dict(sorted(out.items()))

    def trainable_tensors(self, freeze_mgp: bool = False) -> dict[str, torch.Tensor]:
        """Tensors the active ablation actually uses, for the optimizer."""
        out = {} if freeze_mgp else dict(self.mgp_params.named_tensors())
        ab = self.config.ablation
        if ab in ATTENTION_ABLATIONS:
            att = self.att_params.named_tensors()
            if ab == "no_alpha":
                att = {k: v for k, v in att.items() if "tcn_alpha" not in k and "_alpha" not in k}
            if ab == "no_beta":
                att = {k: v for k, v in att.items() if "tcn_beta" not in k and "_beta" not in k}
            out.update(att)
        elif ab == "mgp_logreg_head":
            out.update({"head.w_flat": self.head_w_flat, "head.b_flat": self.head_b_flat})
        elif ab == "mgp_tcn_head":
            out.update({k: v for k, v in self.att_params.named_tensors().items() if "tcn_alpha" in k})
            out.update({"head.w_pooled": self.head_w_pooled, "head.b_pooled": self.head_b_pooled})
        return dict(sorted(out.items()))

    def l2_tensors(self) -> list[torch.Tensor]:
        """Weights the L2 penalty covers: convolution kernels, plus the
        linear head weights of the no-attention ablations."""
        ab = self.config.ablation
        if ab == "mgp_logreg_head":
            return [self.head_w_flat]
        if ab == "mgp_tcn_head":
            weights = [blk[i] for blk in self.att_params.tcn_alpha for i in (0, 2)]
            return weights + [self.head_w_pooled]
        return self.att_params.conv_weights()

    def state_arrays(self) -> dict[str, np.ndarray]:
        with torch.no_grad():
            return {k: v.detach().numpy().copy() for k, v in self.named_tensors().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        tensors = self.named_tensors()
        for name, tensor in tensors.items():
            if name not in arrays:
                raise DataError(f"checkpoint missing tensor {name}")
            src = torch.from_numpy(np.asarray(arrays[name], dtype=np.float64)).reshape(tensor.shape)
            with torch.no_grad():
                tensor.copy_(src)

    # ------------------------------------------------------------------
    # forward

    def forward_batch(
        self,
        series_list,
        s_count: int,
        mc_seeds,
        dropout_gen=None,
        training: bool = False,
        want_traces: bool = False,
    ) -> BatchOutput:
        cfg = self.config
        if len(series_list) == 0:
            raise InputError("empty batch")
        if len(mc_seeds) != len(series_list):
            raise InputError("one MC seed per series required")
        samples, masks = [], []
        for series, seed in zip(series_list, mc_seeds):
            if len(np.asarray(series.static)) != cfg.q_static:
                raise InputError(
                    f"series {series.patient_id} has {len(series.static)} static features, expected {cfg.q_static}"
                )
            post = mgp.posterior(series, self.mgp_params, cfg.n_grid)
            batch = mgp.sample(post, series.static, s_count, seed)
            samples.append(batch.samples)
            masks.append(batch.mask)
        b = len(series_list)
        y = torch.stack(samples)  # (B, S, N, C)
        flat = y.reshape(b * s_count, cfg.n_grid, cfg.channels)
        flat_mask = np.repeat(np.stack(masks), s_count, axis=0)

        ab = cfg.ablation
        if ab in ATTENTION_ABLATIONS:
            z, zp = atttcn.embed(flat, self.att_params, cfg.tcn, dropout_gen, training)
            logits = atttcn.alpha_logits(z, self.att_params, uniform=(ab == "no_alpha"))
            alpha, filled = atttcn.masked_alpha(logits, flat_mask)
            beta = atttcn.beta_gates(zp, self.att_params, unit=(ab == "no_beta"))
            if atttcn.VALIDATE_FORWARD:
                atttcn._check_attention(alpha, beta, flat_mask)
            contrib = alpha[:, :, None, :] * beta * flat[:, :, :, None]
            sample_scores = contrib.sum(dim=(1, 2)).reshape(b, s_count, 2)
        elif ab == "mgp_logreg_head":
            sample_scores = (flat.reshape(b * s_count, -1) @ self.head_w_flat + self.head_b_flat).reshape(b, s_count, 2)
        else:  # mgp_tcn_head
            z, _ = atttcn.embed(flat, self.att_params, cfg.tcn, dropout_gen, training)
            valid = torch.from_numpy(~flat_mask).to(DTYPE).unsqueeze(-1)
            pooled = (z * valid).sum(dim=1) / valid.sum(dim=1)
            sample_scores = (pooled @ self.head_w_pooled + self.head_b_pooled).reshape(b, s_count, 2)

        mean_scores = sample_scores.mean(dim=1)
        probabilities = torch.softmax(mean_scores, dim=-1)

        traces = None
        if want_traces:
            if ab not in ATTENTION_ABLATIONS:
                raise InputError(f"ablation {ab!r} has no attention trace to export")
            traces = self._build_traces(alpha, beta, contrib, probabilities, b, s_count, masks)
        return BatchOutput(probabilities, sample_scores, traces)

    def _build_traces(self, alpha, beta, contrib, probabilities, b, s_count, masks):
        traces = []
        with torch.no_grad():
            n, c = self.config.n_grid, self.config.channels
            alpha_m = alpha.reshape(b, s_count, n, 2).mean(dim=1).numpy()
            beta_m = beta.reshape(b, s_count, n, c, 2).mean(dim=1).numpy()
            contrib_m = contrib.reshape(b, s_count, n, c, 2).mean(dim=1).numpy()
            probs = probabilities.detach().numpy()
            for i in range(b):
                trace = AttentionTrace(alpha_m[i], beta_m[i], contrib_m[i], probs[i].copy())
                trace.validate(masks[i])
                traces.append(trace)
        return traces


# ----------------------------------------------------------------------
# checkpoint container: magic line, JSON header, raw float64 payload


def save_checkpoint(path, model: MgpAttTcn, meta: dict | None = None, extra: dict | None = None):
    """Write a versioned checkpoint. ``extra`` carries auxiliary float
    arrays (optimizer moments, best-epoch weights) next to the live ones."""
    arrays = {k: v.astype("<f8") for k, v in model.state_arrays().items()}
    for name, arr in (extra or {}).items():
        arrays[name] = np.asarray(arr, dtype=np.float64).astype("<f8")
    names = sorted(arrays)
    header = {
        "format_version": 1,
        "model_config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for n in names:
        buf.write(np.ascontiguousarray(arrays[n]).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, meta, extra arrays)."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    rest = blob[len(CHECKPOINT_MAGIC) + 1 :]
    header_end = rest.index(b"\n")
    header = json.loads(rest[:header_end].decode("utf-8"))
    if header.get("format_version") != 1:
        raise DataError(f"{path}: unsupported checkpoint format_version")
    payload = rest[header_end + 1 :]
    arrays = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: truncated payload at tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise DataError(f"{path}: payload size mismatch")
    config = ModelConfig.from_dict(header["model_config"])
    model = MgpAttTcn(config)
    model_names = set(model.named_tensors())
    model.load_state_arrays({k: v for k, v in arrays.items() if k in model_names})
    extra = {k: v for k, v in arrays.items() if k not in model_names}
    return model, header.get("meta", {}), extra
