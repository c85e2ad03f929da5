"""Acceptance criteria, one test per criterion, at the stated tolerances.

The terminal summary prints one PASS/FAIL line per criterion (see conftest.py).
"""

import copy
import hashlib
import math
import time

import numpy as np
import pytest

from latentdit.adapters import control_forward, init_control_branch, init_lora, lora_apply, lora_targets
from latentdit.autodiff import Tensor, no_grad
from latentdit.backbone import BackboneConfig, to_tensors
from latentdit.codec import decode, encode
from latentdit.diffusion import NoiseSchedule, add_noise
from latentdit.embedder import cosine, embed_grid
from latentdit.flow import (FlowConfig, constant_velocity_net, flow_loss, init_velocity_net,
                            stain_translate_pipeline, train_flow, translate)
from latentdit.metrics import (EVAL_EXTRACTOR, FeatureStats, crop_fid, dice_iou, features, fid, frechet_distance,
                               knn_predict, psnr, ssim)
from latentdit.adapters import mask_agreement
from latentdit.ingest import ToyCorpusSpec, make_toy_corpus
from latentdit.pipeline import (DEFAULT_STAGES, StageSpec, crop_latents, crop_regions, generate_variations,
                                held_out_loss, loss_summary, smoothed, stage_data, steps_to_target, stitch_crops,
                                train_lora, train_stage)
from latentdit.samplers import SamplerConfig, sample, select_guidance

from _analytic import convergence_slope
from _clirun import replay, session, tree
from _gradcases import OP_CASES, backbone_errors, op_errors
from _toy import (cells_controlnet, latents_grids, stage1_textures, textures, textures_data, tile_stack,
                  toy_train, two_domain, two_domain_base)
from test_metrics import SIX_LABELS, SIX_TEST, SIX_TRAIN, brute_knn, brute_mmd2
from test_samplers import fixture_tables

SEEDS_20 = range(20)


def sign_test_p(wins, n):
    """One-sided P(X >= wins) for X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def checksum(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


@pytest.mark.criterion(1, "gradient suite: ops < 1e-4, depth-1 backbone < 1e-3, 20 seeds, < 2 min")
def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst_op = max(max(op_errors(name, s)) for name in OP_CASES for s in SEEDS_20)
    worst_bb = max(max(backbone_errors(s).values()) for s in SEEDS_20)
    elapsed = time.perf_counter() - t0
    print(f"worst op error {worst_op:.2e}, worst backbone error {worst_bb:.2e}, {elapsed:.1f}s")
    assert worst_op < 1e-4
    assert worst_bb < 1e-3
    assert elapsed < 120


@pytest.mark.criterion(2, "codec exactness on 100 random images, < 10 s")
def test_criterion_02_codec():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    imgs = rng.random((100, 32, 32, 3)).astype(np.float32)
    lat = encode(imgs)
    err = np.max(np.abs(decode(lat) - imgs))
    n_img = np.linalg.norm(imgs.reshape(100, -1).astype(np.float64), axis=1)
    n_lat = np.linalg.norm(lat.reshape(100, -1).astype(np.float64), axis=1)
    rel = np.max(np.abs(n_lat - n_img) / n_img)
    assert err < 1e-5 and rel < 1e-4
    assert time.perf_counter() - t0 < 10


@pytest.mark.criterion(3, "forward-process variance 1 +- 0.02 at t in {100, 500, 1000}")
@pytest.mark.parametrize("t", [100, 500, 1000])
def test_criterion_03_forward_variance(t):
    rng = np.random.default_rng(1000 + t)
    n = 100_000
    x0 = rng.standard_normal((n, 1))
    xt = add_noise(x0, rng.standard_normal((n, 1)), np.full(n, t), NoiseSchedule())
    assert abs(float(xt.var()) - 1.0) < 0.02


@pytest.mark.criterion(4, "CFG identities: w=1 is conditional, w=0 is unconditional, bit-exact")
@pytest.mark.parametrize("kind", ["ddpm", "ddim", "dpm2"])
def test_criterion_04_cfg_identities(kind):
    model, _ = stage1_textures(0)
    _, grids = textures_data(0)
    cond = grids[:4, :1, :1]
    fn = model.eps_fn()
    shape = model.latent_shape(4)
    for w, branch in ((1.0, cond), (0.0, None)):
        cfg = SamplerConfig(kind=kind, steps=10, guidance=w, seed=21)
        guided = sample(fn, cond, shape, cfg)
        pure = sample(lambda x, t, c, b=branch: fn(x, t, b), cond, shape, cfg)
        assert np.array_equal(guided, pure)


@pytest.mark.criterion(5, "dpm2 slope in [1.7, 2.3], DDIM slope in [0.8, 1.2], < 1 min")
def test_criterion_05_solver_order():
    t0 = time.perf_counter()
    dpm, dpm_errs = convergence_slope("dpm2")
    ddim, ddim_errs = convergence_slope("ddim")
    print(f"dpm2 slope {dpm:.3f} errors {dpm_errs}; ddim slope {ddim:.3f} errors {ddim_errs}")
    assert 1.7 <= dpm <= 2.3
    assert 0.8 <= ddim <= 1.2
    assert time.perf_counter() - t0 < 60


@pytest.mark.criterion(6, "Frechet oracle: 1-D exact, 3-D SPD 1e-6, rotation 1e-6, crop degeneracy")
def test_criterion_06_frechet():
    def st1(mu, var):
        return FeatureStats(mu=np.array([float(mu)]), sigma=np.array([[float(var)]]), n=10)

    assert abs(frechet_distance(st1(0, 1), st1(1, 1), eps_reg=0) - 1.0) < 1e-8
    assert abs(frechet_distance(st1(0, 1), st1(0, 4), eps_reg=0) - 1.0) < 1e-8
    rng = np.random.default_rng(6)
    for _ in range(10):
        m1, m2 = rng.standard_normal((2, 3, 3))
        sa, sb = m1 @ m1.T + 0.1 * np.eye(3), m2 @ m2.T + 0.1 * np.eye(3)
        mu_a, mu_b = rng.standard_normal((2, 3))
        # Sa Sb is similar to Sa^1/2 Sb Sa^1/2, so its eigenvalues are real and non-negative
        oracle = (np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb)
                  - 2 * np.sum(np.sqrt(np.linalg.eigvals(sa @ sb).real)))
        got = frechet_distance(FeatureStats(mu_a, sa, 10), FeatureStats(mu_b, sb, 10), eps_reg=0)
        assert abs(got - oracle) < 1e-6
    fa, fb = rng.standard_normal((300, 6)), rng.standard_normal((300, 6)) * 1.3 + 0.2
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    d = frechet_distance(FeatureStats.from_features(fa), FeatureStats.from_features(fb))
    d_rot = frechet_distance(FeatureStats.from_features(fa @ q), FeatureStats.from_features(fb @ q))
    assert abs(d - d_rot) < 1e-6
    a, b = textures(64, 0)["images"], textures(64, 1)["images"]
    assert crop_fid(a, b, crop=32, n_crops=64) == fid(a, b)


@pytest.mark.criterion(7, "guidance fixture argmin: w=2 (256 row), w=1.2 (1024 row)")
def test_criterion_07_guidance_fixture():
    tables = fixture_tables()
    assert select_guidance(tables["256"]) == 2
    assert select_guidance(tables["1024"]) == 1.2


@pytest.mark.criterion(8, "curriculum: exact tiling and pairing; warm stage 2 beats cold (3 seeds), < 20 min")
def test_criterion_08_curriculum():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    lat, tokens = rng.standard_normal((16, 16, 12)), rng.standard_normal((4, 4, 32))
    for stage, spec in DEFAULT_STAGES.items():
        pairs = crop_latents(lat, tokens, spec)
        assert np.array_equal(stitch_crops([c for c, _ in pairs], spec), lat)
        for r, (crop, grid) in zip(crop_regions(16, spec), pairs):
            (y0, y1), (x0, x1) = r["rows"], r["cols"]
            (a0, a1), (b0, b1) = r["token_rows"], r["token_cols"]
            assert np.array_equal(crop, lat[y0:y1, x0:x1])
            assert np.array_equal(grid.tokens, tokens[a0:a1, b0:b1])
            # 4 latent pixels per token side: the token block's region is the crop's region
            assert (4 * a0, 4 * a1, 4 * b0, 4 * b1) == (y0, y1, x0, x1)
    block = crop_regions(16, DEFAULT_STAGES[2])[1]
    assert block["crop"] == (0, 1) and block["token_rows"] == (0, 2) and block["token_cols"] == (2, 4)

    x, c = textures_data(0)
    wins = 0
    for seed in (0, 1, 2):
        m1, l1 = stage1_textures(seed)
        target = loss_summary(l1)[1]
        _, warm = train_stage(x, c, DEFAULT_STAGES[2], toy_train(seed), init=m1)
        _, cold = train_stage(x, c, DEFAULT_STAGES[2], toy_train(seed), backbone=BackboneConfig(), cold=True)
        sw, sc = steps_to_target(warm, target), steps_to_target(cold, target)
        print(f"seed {seed}: target {target:.4f}, warm {sw} steps, cold {sc} steps")
        wins += sw < sc
    assert wins >= 2
    assert time.perf_counter() - t0 < 20 * 60


@pytest.mark.criterion(9, "toy training progress and directional variation similarity (sign test p < 0.05)")
def test_criterion_09_training_and_variations():
    model, losses = stage1_textures(0)
    first, last = loss_summary(losses)
    assert smoothed(losses)[-1] < 0.5 * first and last < 0.5 * first
    refs = tile_stack(textures(4, 99)["images"], 4)
    assert len(refs) == 64
    out, _ = generate_variations(refs, model, 1, SamplerConfig(kind="dpm2", steps=20, guidance=1.0))
    gen = features(np.stack([row[0] for row in out]), EVAL_EXTRACTOR)
    ref = features(refs, EVAL_EXTRACTOR)
    matched = cosine(gen, ref)
    shuffled = cosine(gen, np.roll(ref, 1, axis=0))
    wins = int(np.sum(matched > shuffled))
    p = sign_test_p(wins, 64)
    print(f"matched {matched.mean():.3f} vs shuffled {shuffled.mean():.3f}; {wins}/64, p={p:.2e}")
    assert p < 0.05


@pytest.mark.criterion(10, "zero-init identities: ControlNet 1e-6, LoRA identity, frozen base checksum")
def test_criterion_10_zero_init():
    trained, _ = stage1_textures(0)
    model = copy.deepcopy(trained)
    _, grids = textures_data(0)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 4, 4, 12)).astype(np.float32)
    cond = grids[:4, :1, :1]
    mask = (rng.random((4, 8, 8)) > 0.5).astype(np.float32)
    t = np.array([1, 250, 600, 1000])
    branch = init_control_branch(model.params, model.cfg, 2, seed=0)
    T = to_tensors({**model.params, **branch})
    with no_grad():
        base = model.dit.forward(T, x, t, cond).data
        ctrl = control_forward(model.dit, T, x, t, cond, mask, 1.0, 2).data
    assert np.max(np.abs(base - ctrl)) < 1e-6

    adapters = init_lora(model.params, lora_targets(model.cfg), rank=4, alpha=4.0, seed=0)
    for name, a in adapters.items():
        assert np.array_equal(lora_apply(model.params[name], a), model.params[name])
    before = checksum(model.params)
    lat, g = textures_data(0)
    model, _ = train_lora(model, lat, g, 20, 16, toy_train(0))
    assert any(np.any(a.B) for a in model.lora.values())
    assert checksum(model.params) == before


@pytest.mark.criterion(11, "ControlNet: agreement at max scale >= at s=0, majority of 16 seeds")
def test_criterion_11_controlnet():
    model, _ = cells_controlnet()
    test = make_toy_corpus(ToyCorpusSpec("masked-cells", n=16, resolution=16, seed=5))
    wins = 0
    rows = []
    for i in range(16):
        mask = test["masks"][i]
        g = embed_grid(test["images"][i], 2, 2).tokens
        scores = []
        for s in (0.0, 1.0):
            z = sample(model.eps_fn(mask, s), g[None], model.latent_shape(1), SamplerConfig("dpm2", 20, 1.0, i))
            scores.append(mask_agreement(model.decode(z[0]), mask))
        rows.append(scores)
        wins += scores[1] >= scores[0]
    print("IoU at s=0 / s=1:", [f"{a:.2f}/{b:.2f}" for a, b in rows])
    assert wins > 8


@pytest.mark.criterion(12, "rectified flow: shift within 5%, identity zero loss, identity pipeline = variations")
def test_criterion_12_flow():
    rng = np.random.default_rng(12)
    x0 = rng.standard_normal((512, 32))
    x0 /= np.linalg.norm(x0, axis=1, keepdims=True)
    c = 0.05 * rng.standard_normal(32)
    P, _ = train_flow(x0, x0 + c, FlowConfig())
    err = np.linalg.norm(translate(x0[:64], P) - (x0[:64] + c), axis=1)
    print(f"worst shift error {err.max() / np.linalg.norm(c):.4f} of |c|")
    assert err.max() < 0.05 * np.linalg.norm(c)
    with no_grad():
        zero = flow_loss(to_tensors(init_velocity_net(FlowConfig())), x0, x0, rng.random(512))
    assert float(zero.data) == 0.0

    model, _ = stage1_textures(0)
    refs = tile_stack(textures(1, 99)["images"], 4)
    sampler = SamplerConfig(steps=20, seed=3)
    out = stain_translate_pipeline(refs, init_velocity_net(FlowConfig()), model, sampler)
    var, _ = generate_variations(refs, model, 1, sampler)
    assert all(np.array_equal(a, row[0]) for a, row in zip(out, var))


@pytest.mark.criterion(13, "two-domain translation closer to target for >= 75% of 64 tiles; LoRA lowers loss")
def test_criterion_13_translation():
    d = two_domain()
    model = copy.deepcopy(two_domain_base())
    held = make_toy_corpus(ToyCorpusSpec("two-domain", n=16, resolution=32, seed=3))
    xd, cd = stage_data(model, *latents_grids(held["target"]))
    frozen_loss = held_out_loss(model, xd, cd)
    tl, tg = latents_grids(d["target"])
    model, _ = train_lora(model, tl, tg, 300, 32, toy_train(1))
    lora_loss = held_out_loss(model, xd, cd)
    print(f"held-out target loss: frozen {frozen_loss:.4f}, with LoRA {lora_loss:.4f}")
    assert lora_loss < frozen_loss

    src_tiles, tgt_tiles = tile_stack(d["source"], 4), tile_stack(d["target"], 4)
    emb = model.embedder
    P, _ = train_flow(features(src_tiles, emb), features(tgt_tiles, emb), FlowConfig())
    src = tile_stack(held["source"], 4)[:64]
    tgt = tile_stack(held["target"], 4)[:64]
    out = np.stack(stain_translate_pipeline(src, P, model, SamplerConfig("dpm2", 20, 1.0, 0)))
    fo, ft, fs = (features(v, EVAL_EXTRACTOR) for v in (out, tgt, src))
    closer = float(np.mean(cosine(fo, ft) > cosine(fo, fs)))
    print(f"{closer:.1%} of translated tiles closer to the target domain")
    assert closer >= 0.75


@pytest.mark.criterion(14, "metric edge cases: SSIM, Dice/IoU, PSNR, k-NN")
def test_criterion_14_metric_edges():
    a = np.random.default_rng(14).random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c1 = 0.01 ** 2
    assert ssim(np.zeros((8, 8)), np.ones((8, 8))) == pytest.approx(c1 / (1 + c1), rel=1e-12)
    b = np.random.default_rng(15).random((16, 16, 3))
    assert ssim(a, b) == ssim(b, a)
    m = np.array([[1, 1], [0, 0]])
    assert dice_iou(m, m) == (1.0, 1.0, 1.0)
    assert dice_iou(m, 1 - m)[:2] == (0.0, 0.0)
    assert dice_iou(m, np.array([[1, 0], [1, 0]])) == (0.5, 1 / 3, 0.5)
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    mse = float(np.mean((a - b) ** 2))
    assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-9
    for k in (1, 2, 3, 4):
        expect = [brute_knn(SIX_TRAIN.tolist(), SIX_LABELS.tolist(), q, k) for q in SIX_TEST.tolist()]
        assert knn_predict(SIX_TRAIN, SIX_LABELS, SIX_TEST, k).tolist() == expect


@pytest.mark.criterion(15, "reproducibility: every CLI command replayed from its echo is byte-identical")
def test_criterion_15_replay(tmp_path):
    runs = session(tmp_path / "first")
    for name, run_dir in runs.items():
        again = tmp_path / "replay" / name
        assert replay(run_dir, again) == 0, name
        first, second = tree(run_dir), tree(again)
        assert first.keys() == second.keys(), name
        diff = [k for k in first if first[k] != second[k]]
        assert diff == [], f"{name}: {diff}"
