"""End-to-end optimization, balanced batching, and hyperparameter search.

The cross-entropy of the last-step prediction is averaged over MC draws
and then over the batch; an L2 penalty on convolution (or head) weights is
added on top. Adam drives all raw parameters jointly. Training batches are
class-balanced by construction; validation and test are never resampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import eval_metrics, mgp
from .atttcn import TcnConfig
from .errors import ConfigError, DataError, NumericalError
from .model import MgpAttTcn, ModelConfig
from .seeds import derive
from .torchutil import generator

MC_SEED_MODES = ("per_epoch", "fixed")


@dataclass(frozen=True)
class TrainConfig:
    s_count: int = 8
    batch_size: int = 64
    max_epochs: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    ablation: str = "full"
    kernel_size: int = 3
    n_blocks: int = 2
    hidden_channels: int = 16
    dropout: float = 0.1
    l2: float = 1e-4
    patience: int = 10
    n_grid: int = 25
    init_lengthscales: tuple = (4.0, 32.0)
    init_noise: float = 0.3
    mc_seed_mode: str = "per_epoch"
    freeze_mgp: bool = False
    eval_s_count: int = 0  # 0 -> use s_count

    def __post_init__(self):
        from .model import ABLATIONS

        if self.s_count < 1 or self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("s_count >= 1 and an even batch_size >= 2 are required")
        if self.mc_seed_mode not in MC_SEED_MODES:
            raise ConfigError(f"mc_seed_mode must be one of {MC_SEED_MODES}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.max_epochs < 0 or self.learning_rate < 0 or self.patience < 0:
            raise ConfigError("max_epochs, learning_rate and patience must be non-negative")

    def tcn_config(self) -> TcnConfig:
        return TcnConfig(self.kernel_size, self.n_blocks, self.hidden_channels, self.dropout, self.l2)

    def model_config(self, m_dynamic: int, q_static: int) -> ModelConfig:
        return ModelConfig(
            m_dynamic=m_dynamic,
            q_static=q_static,
            tcn=self.tcn_config(),
            n_grid=self.n_grid,
            ablation=self.ablation,
            init_lengthscales=self.init_lengthscales,
            init_noise=self.init_noise,
            init_seed=derive(self.seed, "init"),
        )

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["init_lengthscales"] = list(self.init_lengthscales)
        return d


@dataclass(frozen=True)
class SearchSpace:
    """Random-search ranges; integers are drawn uniformly and rounded."""

    s_count: tuple = (4, 20)
    kernel_size: tuple = (2, 6)
    n_blocks: tuple = (2, 12)
    hidden_channels: tuple = (10, 55)
    dropout: tuple = (0.0, 0.99)
    l2: tuple = (0.0, 250.0)

    def __post_init__(self):
        for name, (lo, hi) in self.__dict__.items():
            if lo > hi:
                raise ConfigError(f"search range for {name} has min > max")

    INTEGER_FIELDS = ("s_count", "kernel_size", "n_blocks", "hidden_channels")

    def sample(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        out = {}
        for name, (lo, hi) in self.__dict__.items():
            value = rng.uniform(lo, hi)
            out[name] = int(round(value)) if name in self.INTEGER_FIELDS else float(value)
        return out


def _series_uid(series):
    return f"{series.patient_id}|{series.horizon}"


def loss(batch, mod: MgpAttTcn, config: TrainConfig, mc_seeds, dropout_gen=None) -> torch.Tensor:
    """Mean over MC draws and batch of the last-step cross-entropy, plus
    the L2 weight penalty. Raises on a non-finite value."""
    if len(batch) == 0:
        raise ConfigError("loss needs a non-empty batch")
    out = mod.forward_batch(batch, config.s_count, mc_seeds, dropout_gen, training=True)
    labels = torch.as_tensor([int(s.label) for s in batch])
    logp = torch.log_softmax(out.sample_scores, dim=-1)
    picked = torch.gather(logp, 2, labels.view(-1, 1, 1).expand(-1, logp.shape[1], 1))
    data_term = -picked.mean()
    penalty = sum((w**2).sum() for w in mod.l2_tensors())
    total = data_term + config.l2 * penalty
    if not torch.isfinite(total):
        raise NumericalError("non-finite training loss", snapshot=mod.mgp_params.snapshot())
    return total


def balanced_batches(dataset, batch_size: int, seed: int):
    """Batches with batch_size/2 cases and batch_size/2 controls, shuffled.

    The minority class is resampled (reshuffled and cycled) until the
    majority class is covered once; deterministic for a fixed seed.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigError("batch_size must be even and >= 2")
    cases = [s for s in dataset if s.label == 1]
    controls = [s for s in dataset if s.label == 0]
    if not cases or not controls:
        raise ConfigError("balanced batching needs at least one case and one control")
    half = batch_size // 2
    n_batches = math.ceil(max(len(cases), len(controls)) / half)
    rng = np.random.default_rng(seed)

    def draw_order(group):
        idx = []
        while len(idx) < n_batches * half:
            idx.extend(rng.permutation(len(group)).tolist())
        return idx[: n_batches * half]

    case_order = draw_order(cases)
    control_order = draw_order(controls)
    for b in range(n_batches):
        batch = [cases[i] for i in case_order[b * half : (b + 1) * half]]
        batch += [controls[i] for i in control_order[b * half : (b + 1) * half]]
        order = rng.permutation(len(batch))
        yield [batch[i] for i in order]


def evaluate_scores(
    mod: MgpAttTcn, series_list, s_count: int, seed_root: int, batch_size: int = 64, threads: int = 1
) -> np.ndarray:
    """Deterministic case probabilities P(label = 1) for a list of series.

    Chunks are independent and results land at fixed indices, so the output
    is identical for any thread count."""
    probs = np.empty(len(series_list), dtype=np.float64)
    starts = list(range(0, len(series_list), batch_size))

    def run_chunk(start):
        chunk = series_list[start : start + batch_size]
        seeds = [derive(seed_root, "mc-eval", _series_uid(s)) for s in chunk]
        with torch.no_grad():
            out = mod.forward_batch(chunk, s_count, seeds, training=False)
        probs[start : start + len(chunk)] = out.probabilities[:, 1].numpy()

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_chunk, starts))
    else:
        for start in starts:
            run_chunk(start)
    return probs


@dataclass
class TrainResult:
    model: MgpAttTcn  # at its final (last-epoch) state, for resuming
    best_arrays: dict  # tensor name -> ndarray at the best validation epoch
    history: list
    best_epoch: int
    best_val_auroc: float
    epochs_run: int = 0
    optimizer_arrays: dict | None = None

    def restore_best(self) -> MgpAttTcn:
        self.model.load_state_arrays(self.best_arrays)
        return self.model


def _val_metrics(mod, val_set, config):
    s_eval = config.eval_s_count or config.s_count
    probs = evaluate_scores(mod, val_set, s_eval, derive(config.seed, "val"))
    labels = np.array([s.label for s in val_set])
    return eval_metrics.auroc(probs, labels), eval_metrics.aupr(probs, labels)


def train(splits, config: TrainConfig, start_state: dict | None = None) -> TrainResult:
    """Joint optimization with balanced batches and early stopping on
    validation AUROC. Deterministic for a fixed seed on a single thread.

    ``start_state`` resumes from a checkpoint: model arrays, optimizer
    moments and the epoch counter as stored by the CLI.
    """
    train_set, val_set = splits.train, splits.validation
    if not train_set or not val_set:
        raise DataError("training needs non-empty train and validation splits")
    m_dynamic = splits.m_features
    q_static = len(np.asarray(train_set[0].static))
    mod = MgpAttTcn(config.model_config(m_dynamic, q_static))

    trainable = mod.trainable_tensors(config.freeze_mgp)
    names = list(trainable)
    tensors = [trainable[n] for n in names]
    opt = torch.optim.Adam(tensors, lr=config.learning_rate)
    first_epoch = 0
    if start_state is not None:
        mod.load_state_arrays({k: v for k, v in start_state["arrays"].items() if not k.startswith(("opt.", "best."))})
        _load_opt_state(opt, tensors, names, start_state["arrays"])
        first_epoch = int(start_state.get("epoch", 0))

    history = []
    best_auroc, best_epoch, best_arrays = -np.inf, -1, mod.state_arrays()
    stale = 0
    epochs_run = first_epoch
    for epoch in range(first_epoch, config.max_epochs):
        epochs_run = epoch + 1
        epoch_losses = []
        batches = balanced_batches(train_set, config.batch_size, derive(config.seed, "batches", epoch))
        for b_index, batch in enumerate(batches):
            if config.mc_seed_mode == "fixed":
                mc_seeds = [derive(config.seed, "mc", _series_uid(s)) for s in batch]
            else:
                mc_seeds = [derive(config.seed, "mc", epoch, _series_uid(s)) for s in batch]
            dropout_gen = generator(derive(config.seed, "dropout", epoch, b_index))
            value = loss(batch, mod, config, mc_seeds, dropout_gen)
            opt.zero_grad()
            value.backward()
            opt.step()
            epoch_losses.append(float(value.detach()))
        val_auroc, val_aupr = _val_metrics(mod, val_set, config)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_auroc": val_auroc,
                "val_aupr": val_aupr,
            }
        )
        if val_auroc > best_auroc:
            best_auroc, best_epoch = val_auroc, epoch
            best_arrays = mod.state_arrays()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience > 0:
                break
    return TrainResult(
        mod,
        best_arrays,
        history,
        best_epoch,
        best_auroc,
        epochs_run,
        optimizer_state_arrays(opt, tensors, names),
    )


def optimizer_state_arrays(opt: torch.optim.Adam, tensors, names) -> dict:
    """Flatten Adam moments into named arrays for the checkpoint."""
    out = {}
    for name, tensor in zip(names, tensors):
        state = opt.state.get(tensor)
        if not state:
            continue
        out[f"opt.{name}.step"] = np.asarray([float(state["step"])], dtype=np.float64)
        out[f"opt.{name}.exp_avg"] = state["exp_avg"].detach().numpy().copy()
        out[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy().copy()
    return out


def _load_opt_state(opt, tensors, names, arrays):
    for name, tensor in zip(names, tensors):
        key = f"opt.{name}.step"
        if key not in arrays:
            continue
        opt.state[tensor] = {
            "step": torch.tensor(float(arrays[key][0])),
            "exp_avg": torch.from_numpy(np.asarray(arrays[f"opt.{name}.exp_avg"], dtype=np.float64)).reshape(tensor.shape),
            "exp_avg_sq": torch.from_numpy(np.asarray(arrays[f"opt.{name}.exp_avg_sq"], dtype=np.float64)).reshape(tensor.shape),
        }


@dataclass
class TrialResult:
    index: int
    settings: dict
    val_auroc: float
    val_aupr: float
    best_epoch: int


def random_search(splits, base_config: TrainConfig, space: SearchSpace, n_trials: int, seed: int):
    """Uniform random search over the space; each trial trains fully and is
    ranked by validation AUROC (ties broken by trial index)."""
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    results = []
    for i in range(n_trials):
        settings = space.sample(derive(seed, "search", i))
        config = replace(base_config, seed=derive(seed, "trial", i), **settings)
        outcome = train(splits, config)
        last = outcome.history[-1]
        results.append(
            TrialResult(i, settings, outcome.best_val_auroc, last["val_aupr"], outcome.best_epoch)
        )
    return sorted(results, key=lambda r: (-r.val_auroc, r.index))


def fit_mgp(series_list, params: mgp.MgpParameters, steps: int = 200, lr: float = 0.05, batch_size: int = 16, seed: int = 0):
    """Fit GP hyperparameters by gradient descent on the per-observation
    negative log marginal likelihood; the classifier is not involved."""
    usable = [s for s in series_list if len(np.asarray(s.times))]
    if not usable:
        raise DataError("marginal-likelihood fitting needs observations")
    params.requires_grad_(True)
    opt = torch.optim.Adam(params.named_tensors().values(), lr=lr)
    rng = np.random.default_rng(derive(seed, "fit-mgp"))
    losses = []
    for _ in range(steps):
        chosen = rng.choice(len(usable), size=min(batch_size, len(usable)), replace=False)
        value = torch.stack([mgp.marginal_nll(usable[i], params) for i in chosen]).mean()
        if not torch.isfinite(value):
            raise NumericalError("non-finite marginal likelihood", snapshot=params.snapshot())
        opt.zero_grad()
        value.backward()
        opt.step()
        losses.append(float(value.detach()))
    return losses
