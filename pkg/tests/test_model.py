import numpy as np
import pytest
import torch

from mgp_atttcn import atttcn, mgp
from mgp_atttcn.atttcn import TcnConfig
from mgp_atttcn.errors import DataError, InputError
from mgp_atttcn.model import MgpAttTcn, ModelConfig, load_checkpoint, save_checkpoint

from .conftest import make_series


def small_config(ablation="full", seed=5):
    return ModelConfig(
        m_dynamic=2,
        q_static=1,
        tcn=TcnConfig(kernel_size=2, n_blocks=2, hidden_channels=4, dropout=0.0),
        n_grid=6,
        ablation=ablation,
        init_seed=seed,
    )


def batch_of(rng, n, m=2, q=1):
    return [make_series(rng, m, 12, span=5.0, static=rng.normal(size=q)) for _ in range(n)]


class TestForward:
    def test_deterministic_given_seeds(self):
        rng = np.random.default_rng(0)
        series = batch_of(rng, 3)
        model = MgpAttTcn(small_config())
        seeds = [11, 12, 13]
        a = model.forward_batch(series, 4, seeds)
        b = model.forward_batch(series, 4, seeds)
        assert torch.equal(a.probabilities, b.probabilities)
        assert torch.equal(a.sample_scores, b.sample_scores)

    def test_no_alpha_equals_zeroed_alpha_branch(self):
        rng = np.random.default_rng(1)
        series = batch_of(rng, 2)
        ablated = MgpAttTcn(small_config("no_alpha"))
        full = MgpAttTcn(small_config("full"))
        with torch.no_grad():
            full.att_params.w_alpha.zero_()
            full.att_params.b_alpha.zero_()
        seeds = [3, 4]
        out_a = ablated.forward_batch(series, 3, seeds)
        out_f = full.forward_batch(series, 3, seeds)
        assert torch.equal(out_a.probabilities, out_f.probabilities)

    def test_no_beta_equals_unit_gates(self):
        rng = np.random.default_rng(2)
        series = batch_of(rng, 2)
        model = MgpAttTcn(small_config("no_beta"))
        seeds = [7, 8]
        out = model.forward_batch(series, 2, seeds)
        # manual pipeline with the same parameters and beta == 1
        cfg = model.config
        scores = []
        for s, seed in zip(series, seeds):
            post = mgp.posterior(s, model.mgp_params, cfg.n_grid)
            draws = mgp.sample(post, s.static, 2, seed)
            z, _ = atttcn.embed(draws.samples, model.att_params, cfg.tcn)
            logits = atttcn.alpha_logits(z, model.att_params)
            alpha, _ = atttcn.masked_alpha(logits, np.tile(draws.mask, (2, 1)))
            contrib = alpha[:, :, None, :] * draws.samples[:, :, :, None]
            scores.append(contrib.sum(dim=(1, 2)))
        manual = torch.stack(scores).mean(dim=1)
        assert torch.equal(out.probabilities, torch.softmax(manual, dim=-1))

    def test_head_ablations_run_and_refuse_traces(self):
        rng = np.random.default_rng(3)
        series = batch_of(rng, 2)
        for ablation in ("mgp_logreg_head", "mgp_tcn_head"):
            model = MgpAttTcn(small_config(ablation))
            out = model.forward_batch(series, 2, [1, 2])
            assert out.probabilities.shape == (2, 2)
            with pytest.raises(InputError):
                model.forward_batch(series, 2, [1, 2], want_traces=True)

    def test_se_kernel_ablation_changes_posterior(self):
        rng = np.random.default_rng(4)
        series = batch_of(rng, 1)
        ou = MgpAttTcn(small_config("full"))
        se = MgpAttTcn(small_config("se_kernel"))
        assert se.mgp_params.families == ("SE", "SE")
        p_ou = mgp.posterior(series[0], ou.mgp_params, 6)
        p_se = mgp.posterior(series[0], se.mgp_params, 6)
        assert not torch.allclose(p_ou.mean, p_se.mean)

    def test_static_length_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        series = [make_series(rng, 2, 8, static=())]  # q=0 but model expects 1
        model = MgpAttTcn(small_config())
        with pytest.raises(InputError):
            model.forward_batch(series, 2, [1])

    def test_traces_validate_and_average(self):
        rng = np.random.default_rng(6)
        series = batch_of(rng, 2)
        model = MgpAttTcn(small_config())
        out = model.forward_batch(series, 4, [5, 6], want_traces=True)
        assert len(out.traces) == 2
        for trace, s in zip(out.traces, series):
            assert trace.alpha.shape == (6, 2)
            assert trace.beta.shape == (6, 3, 2)
            score = trace.contributions.sum(axis=(0, 1))
            probs = np.exp(score - score.max())
            probs /= probs.sum()
            assert np.max(np.abs(probs - trace.probabilities)) < 1e-10


class TestCheckpoint:
    def test_roundtrip_preserves_everything(self, tmp_path):
        model = MgpAttTcn(small_config())
        meta = {"epoch": 3, "note": "x"}
        extra = {"opt.some.step": np.array([4.0])}
        path = tmp_path / "model.mgpatt"
        save_checkpoint(path, model, meta, extra)
        loaded, got_meta, got_extra = load_checkpoint(path)
        assert got_meta == meta
        assert list(got_extra) == ["opt.some.step"]
        for name, tensor in model.named_tensors().items():
            assert torch.equal(tensor, loaded.named_tensors()[name])
        rng = np.random.default_rng(7)
        series = batch_of(rng, 2)
        a = model.forward_batch(series, 2, [1, 2]).probabilities
        b = loaded.forward_batch(series, 2, [1, 2]).probabilities
        assert torch.equal(a, b)

    def test_save_is_deterministic(self, tmp_path):
        model = MgpAttTcn(small_config())
        p1, p2 = tmp_path / "a.mgpatt", tmp_path / "b.mgpatt"
        save_checkpoint(p1, model, {"epoch": 1}, None)
        save_checkpoint(p2, model, {"epoch": 1}, None)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.mgpatt"
        path.write_bytes(b"NOTMAGIC\n{}")
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        model = MgpAttTcn(small_config())
        path = tmp_path / "model.mgpatt"
        save_checkpoint(path, model, {}, None)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(DataError):
            load_checkpoint(path)
