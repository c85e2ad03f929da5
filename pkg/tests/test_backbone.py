import numpy as np
import pytest

from latentdit.autodiff import Tensor, no_grad
from latentdit.autodiff import functional as F
from latentdit.backbone import (BackboneConfig, DiT, StageContractError, init_params, param_count, patchify,
                                to_tensors, unpatchify)
from latentdit.model import CheckpointMismatchError, DiffusionModel, LatentNorm

from _gradcases import TINY


def randomized(cfg, seed=0):
    """Initial params with the zero-initialised gates and heads filled in, so every path is live."""
    rng = np.random.default_rng(seed + 100)
    P = init_params(cfg, seed)
    return {k: (v if np.any(v) else rng.normal(0, 0.1, v.shape).astype(np.float32)) for k, v in P.items()}


@pytest.fixture(scope="module")
def cfg():
    return BackboneConfig()


def run(cfg, P, x, t, cond, **kw):
    with no_grad():
        return DiT(cfg).forward(to_tensors(P), x, t, cond, **kw).data


def test_default_parameter_count(cfg):
    d, tok, c = 64, 2 * 2 * 12, 32
    block = (9 * d * d + 9 * d) + 8 * (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d)
    expect = (tok * d + d) + 2 * (d * d + d) + (c * d + d) + c + 4 * block + (2 * d * d + 2 * d) + (tok * d + tok)
    assert expect == 440272
    assert param_count(init_params(cfg, 0)) == expect
    assert param_count(init_params(cfg, 5)) == expect


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        BackboneConfig(hidden_dim=66, heads=4)


def test_patchify_layout_and_bijection():
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3)).astype(np.float32)
    tok = patchify(x, 2)
    assert tok.shape == (2, 16, 12)
    np.testing.assert_array_equal(tok[:, 5], x[:, 2:4, 2:4].reshape(2, 12))
    np.testing.assert_array_equal(unpatchify(tok, 4, 4, 2, 3), x)
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 5, 4, 3)), 2)


@pytest.mark.parametrize("side,tokens", [(4, 1), (8, 4), (16, 16)])
def test_output_shape_for_each_stage(cfg, side, tokens):
    P = randomized(cfg)
    x = np.random.default_rng(side).standard_normal((2, side, side, 12)).astype(np.float32)
    cond = np.random.default_rng(1).standard_normal((2, tokens, 32)).astype(np.float32)
    assert run(cfg, P, x, [10, 900], cond).shape == x.shape


def test_fresh_model_predicts_zero(cfg):
    x = np.ones((1, 4, 4, 12), np.float32)
    assert not np.any(run(cfg, init_params(cfg, 0), x, [3], np.ones((1, 1, 32), np.float32)))


def test_token_count_mismatch_is_stage_contract_error(cfg):
    P = randomized(cfg)
    with pytest.raises(StageContractError):
        run(cfg, P, np.zeros((1, 8, 8, 12), np.float32), [1], np.zeros((1, 1, 32), np.float32))
    with pytest.raises(StageContractError):
        run(cfg, P, np.zeros((1, 32, 32, 12), np.float32), [1], None)


def test_timestep_out_of_range(cfg):
    with pytest.raises(ValueError):
        run(cfg, randomized(cfg), np.zeros((1, 4, 4, 12), np.float32), [0], None)


def test_timestep_embedding(cfg):
    dit, T = DiT(cfg), to_tensors(randomized(cfg))
    with no_grad():
        a = dit.timestep_embedding(T, [10.0]).data[0]
        a2 = dit.timestep_embedding(T, [10.0]).data[0]
        b = dit.timestep_embedding(T, [500.0]).data[0]
    assert a.shape == (64,)
    assert np.array_equal(a, a2)
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) < 1 - 1e-6


def test_permuting_condition_tokens_changes_output(cfg):
    P = randomized(cfg)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 8, 8, 12)).astype(np.float32)
    cond = rng.standard_normal((1, 4, 32)).astype(np.float32)
    a = run(cfg, P, x, [50], cond)
    b = run(cfg, P, x, [50], cond[:, ::-1])
    assert np.max(np.abs(a - b)) > 0


def test_condition_sensitivity_and_null_drop(cfg):
    P = randomized(cfg)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 4, 12)).astype(np.float32)
    c = rng.standard_normal((2, 1, 32)).astype(np.float32)
    assert np.max(np.abs(run(cfg, P, x, [5, 5], c) - run(cfg, P, x, [5, 5], c * 2))) > 0
    # dropped rows equal the unconditional forward exactly
    dropped = run(cfg, P, x, [5, 5], c, drop=np.array([True, False]))
    uncond = run(cfg, P, x, [5, 5], None)
    np.testing.assert_array_equal(dropped[0], uncond[0])
    np.testing.assert_array_equal(dropped[1], run(cfg, P, x, [5, 5], c)[1])


def test_forward_is_deterministic(cfg):
    P = randomized(cfg)
    x = np.random.default_rng(4).standard_normal((1, 8, 8, 12)).astype(np.float32)
    c = np.random.default_rng(5).standard_normal((1, 2, 2, 32)).astype(np.float32)
    assert np.array_equal(run(cfg, P, x, [77], c), run(cfg, P, x, [77], c))


def test_batch_rows_are_independent(cfg):
    P = randomized(cfg)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 4, 4, 12)).astype(np.float32)
    c = rng.standard_normal((3, 1, 32)).astype(np.float32)
    full = run(cfg, P, x, [1, 400, 1000], c)
    np.testing.assert_allclose(full[1:2], run(cfg, P, x[1:2], [400], c[1:2]), atol=1e-5)


def test_gradient_reaches_every_parameter():
    P = randomized(TINY)
    T = to_tensors(P, trainable=P)
    rng = np.random.default_rng(7)
    out = DiT(TINY).forward(T, rng.standard_normal((2, 8, 8, 4)), [3, 700],
                            rng.standard_normal((2, 4, 4)), drop=np.array([True, False]))
    F.sum(F.square(out)).backward()
    dead = [k for k, t in T.items() if t.grad is None or not np.any(t.grad)]
    assert dead == []


def test_checkpoint_round_trip(tmp_path, cfg):
    model = DiffusionModel(cfg=cfg, params=randomized(cfg), norm=LatentNorm.identity(12), stage=2, step=17,
                           meta={"note": "x"})
    h1 = model.save(tmp_path / "a.ckpt")
    back = DiffusionModel.load(tmp_path / "a.ckpt")
    assert (back.stage, back.step, back.meta, back.cfg) == (2, 17, {"note": "x"}, cfg)
    assert all(np.array_equal(back.params[k], v) for k, v in model.params.items())
    assert back.save(tmp_path / "b.ckpt") == h1
    assert model.image_size == 16 and model.latent_shape(3) == (3, 8, 8, 12)


def test_loading_non_backbone_checkpoint(tmp_path):
    from latentdit.storage import save_checkpoint

    save_checkpoint(tmp_path / "x.ckpt", {"a": np.zeros(2)}, {"kind": "lora"})
    with pytest.raises(CheckpointMismatchError):
        DiffusionModel.load(tmp_path / "x.ckpt")
