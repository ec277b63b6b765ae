"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Expensive artifacts (the 2000-story corpus and the
2000-step training run) are session fixtures shared across criteria; the
training criterion reads the first 500 steps of the shared run, which
per-step seed derivation makes byte-identical to a standalone 500-step
run.

Run with `pytest tests/test_acceptance.py -v -s`.
"""

import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from storydiff import autodiff as ad
from storydiff.attention import (attention_cost, build_inference_mask,
                                 build_train_mask, masked_attention)
from storydiff.benchmark import bench_attention
from storydiff.cli import main as cli_main
from storydiff.config import (DataConfig, ModelConfig, SampleConfig,
                              TrainConfig)
from storydiff.data import generate_story
from storydiff.denoiser import denoise as _denoise, init_params, trainable_names
from storydiff.encoder import assemble_history
from storydiff.evaluation import (background_consistency, feature_extract,
                                  fit_gaussian, frechet_distance)
from storydiff.params import ParamStore
from storydiff.sampling import cfg_combine, generate_frame, sample_story
from storydiff.schedule import make_cosine_schedule
from storydiff.seeding import derive_seed
from storydiff.training import SGDMomentum, make_batch, run_training, train_step

from conftest import TINY_MODEL, TINY_SCHED_STEPS, gradcheck, weighted_sum

TINY_SCHED = make_cosine_schedule(TINY_SCHED_STEPS)


def denoise(x, t, mem, mask, params, cfg):
    return _denoise(x, t, mem, mask, params, cfg, TINY_SCHED)

SEED = 0
N_STORIES = 2000
TRAIN_STEPS = 2000


def report(criterion: str, passed: bool, detail: str = ""):
    print(f"\n[{'PASS' if passed else 'FAIL'}] {criterion} {detail}")
    assert passed, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared expensive artifacts


@pytest.fixture(scope="session")
def corpus():
    cfg = DataConfig()
    return [generate_story(derive_seed(SEED, "story", i), cfg, story_id=i)
            for i in range(N_STORIES)]


@pytest.fixture(scope="session")
def trained(corpus):
    """Default-config model trained TRAIN_STEPS steps, plus the loss log."""
    model_cfg = ModelConfig()
    sched = make_cosine_schedule(100)
    params = init_params(model_cfg, derive_seed(SEED, "init"))
    cfg = TrainConfig(steps=TRAIN_STEPS)
    losses = run_training(corpus, params, sched, model_cfg, cfg, SEED)
    return {"params": params, "losses": losses, "model": model_cfg,
            "sched": sched}


# ---------------------------------------------------------------------------
# 1. gradient suite


OPS = {}


def _op(name):
    def deco(fn):
        OPS[name] = fn
        return fn
    return deco


@_op("matmul")
def _g_matmul(r):
    return (lambda a, b: weighted_sum(ad.matmul(a, b)),
            [r.standard_normal((3, 4)), r.standard_normal((4, 2))])


@_op("add")
def _g_add(r):
    return (lambda a, b: weighted_sum(ad.add(a, b)),
            [r.standard_normal((3, 4)), r.standard_normal((3, 4))])


@_op("mul")
def _g_mul(r):
    return (lambda a, b: weighted_sum(ad.mul(a, b)),
            [r.standard_normal(7), r.standard_normal(7)])


@_op("scale")
def _g_scale(r):
    c = float(r.standard_normal())
    return (lambda a: weighted_sum(ad.scale(a, c)), [r.standard_normal(6)])


@_op("tanh")
def _g_tanh(r):
    return (lambda a: weighted_sum(ad.tanh(a)), [r.standard_normal((2, 5))])


@_op("bias_add")
def _g_bias(r):
    return (lambda a, b: weighted_sum(ad.bias_add(a, b)),
            [r.standard_normal((4, 3)), r.standard_normal(3)])


@_op("bias_add_chw")
def _g_bias_chw(r):
    return (lambda a, b: weighted_sum(ad.bias_add_chw(a, b)),
            [r.standard_normal((3, 4, 4)), r.standard_normal(3)])


@_op("scale_chw")
def _g_scale_chw(r):
    return (lambda a, b: weighted_sum(ad.scale_chw(a, b)),
            [r.standard_normal((3, 4, 4)), r.standard_normal(3)])


@_op("reshape")
def _g_reshape(r):
    return (lambda a: weighted_sum(ad.reshape(a, (2, 6))),
            [r.standard_normal((3, 4))])


@_op("transpose")
def _g_transpose(r):
    return (lambda a: weighted_sum(ad.transpose(a, (1, 2, 0))),
            [r.standard_normal((2, 3, 4))])


@_op("concat_rows")
def _g_concat(r):
    return (lambda a, b: weighted_sum(ad.concat_rows([a, b])),
            [r.standard_normal((2, 3)), r.standard_normal((3, 3))])


@_op("slice_rows")
def _g_slice(r):
    return (lambda a: weighted_sum(ad.slice_rows(a, 1, 4)),
            [r.standard_normal((5, 3))])


@_op("embedding")
def _g_embedding(r):
    ids = r.integers(0, 6, size=5)
    return (lambda t: weighted_sum(ad.embedding(t, ids)),
            [r.standard_normal((6, 4))])


@_op("mean_all")
def _g_mean(r):
    return (lambda a: ad.mean_all(a), [r.standard_normal((3, 4))])


@_op("mse")
def _g_mse(r):
    return (lambda a, b: ad.mse(a, b),
            [r.standard_normal((2, 5)), r.standard_normal((2, 5))])


@_op("softmax_masked")
def _g_softmax(r):
    allowed = r.random((4, 6)) < 0.7
    allowed[np.arange(4), r.integers(6, size=4)] = True
    bias = np.where(allowed, 0.0, -np.inf)
    return (lambda a: weighted_sum(ad.softmax_masked(a, bias)),
            [r.standard_normal((4, 6))])


@_op("layer_norm")
def _g_layer_norm(r):
    return (lambda x, g, b: weighted_sum(ad.layer_norm(x, g, b)),
            [r.standard_normal((3, 5)), r.standard_normal(5), r.standard_normal(5)])


@_op("conv2d")
def _g_conv(r):
    return (lambda x, w, b: weighted_sum(ad.conv2d(x, w, b)),
            [r.standard_normal((2, 5, 5)), r.standard_normal((3, 2, 3, 3)),
             r.standard_normal(3)])


@_op("masked_attention")
def _g_attention(r):
    sizes = [int(s) for s in r.integers(1, 3, size=3)]
    mask = build_inference_mask(sizes, int(r.integers(0, 3)))
    n = mask.n_rows
    return (lambda q, k, v: weighted_sum(masked_attention(q, k, v, mask)),
            [r.standard_normal((n, 4)) for _ in range(3)])


def test_criterion_1_gradient_suite(stories):
    for name, maker in OPS.items():
        for i in range(20):
            build, arrays = maker(np.random.default_rng(derive_seed(1, name, i)))
            gradcheck(build, arrays, h=1e-5, tol=1e-4)

    # full denoiser: finite differences on 5 randomly chosen parameters
    params = init_params(TINY_MODEL, seed=21, zero_init_outputs=False)
    rec = stories[0]
    frames = rec.frames_float()
    target = np.random.default_rng(2).standard_normal(TINY_MODEL.image_shape)

    def loss_tensor():
        pairs = [(rec.captions[i], frames[i]) for i in range(2)]
        mem = assemble_history(pairs, rec.captions[2], params, TINY_MODEL)
        mask = build_train_mask(mem.block_sizes())
        return ad.mse(denoise(frames[2], 4, mem, mask, params, TINY_MODEL),
                      ad.Tensor(target))

    loss = loss_tensor()
    loss.backward()
    rng = np.random.default_rng(3)
    names = sorted(params.names())
    worst = 0.0
    for name in [names[i] for i in rng.choice(len(names), size=5, replace=False)]:
        tensor = params[name]
        idx = int(rng.integers(tensor.data.size))
        analytic = tensor.grad.reshape(-1)[idx]
        orig = tensor.data.reshape(-1)[idx]
        h = 1e-5
        with ad.no_grad():
            tensor.data.reshape(-1)[idx] = orig + h
            up = loss_tensor().item()
            tensor.data.reshape(-1)[idx] = orig - h
            down = loss_tensor().item()
            tensor.data.reshape(-1)[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))
    params.zero_grads()
    report("1 gradient suite",
           worst <= 1e-3,
           f"(all {len(OPS)} ops x20 at 1e-4; denoiser worst rel err {worst:.2e})")


# ---------------------------------------------------------------------------
# 2. mask correctness


def _mask_matches_definition(sizes, window):
    mask = (build_train_mask(sizes) if window is None
            else build_inference_mask(sizes, window))
    blocks = np.repeat(np.arange(len(sizes)), sizes)
    diff = blocks[:, None] - blocks[None, :]
    if window is None:
        expected = diff >= 0
    else:
        expected = (diff >= 0) & (diff <= window)
    return np.array_equal(np.isfinite(mask.bias), expected)


def test_criterion_2_mask_correctness():
    checked = 0
    for length in range(1, 9):
        size_sets = (itertools.product((1, 2, 3), repeat=length)
                     if length <= 5 else [(s,) * length for s in (1, 2, 3)])
        for sizes in size_sets:
            assert _mask_matches_definition(list(sizes), None)
            checked += 1
            for window in range(0, 9):
                assert _mask_matches_definition(list(sizes), window)
                checked += 1

    rng = np.random.default_rng(derive_seed(2, "attn"))
    worst = 0.0
    for _ in range(100):
        sizes = [int(s) for s in rng.integers(1, 4, size=int(rng.integers(1, 6)))]
        window = (None if rng.random() < 0.5
                  else int(rng.integers(0, len(sizes) + 1)))
        mask = (build_train_mask(sizes) if window is None
                else build_inference_mask(sizes, window))
        n = mask.n_rows
        q, k, v = (rng.standard_normal((n, 6)) for _ in range(3))
        got = masked_attention(ad.Tensor(q), ad.Tensor(k), ad.Tensor(v), mask).data
        ref = np.zeros_like(got)
        for i in range(n):
            cols = np.isfinite(mask.bias[i])
            s = (k[cols] @ q[i]) / np.sqrt(6)
            e = np.exp(s - s.max())
            ref[i] = (e / e.sum()) @ v[cols]
        worst = max(worst, float(np.max(np.abs(got - ref))))
    report("2 mask correctness", worst <= 1e-10,
           f"({checked} masks vs set definition; oracle max err {worst:.2e})")


# ---------------------------------------------------------------------------
# 3. end-to-end causality


def test_criterion_3_causality(stories, tiny_sched):
    params = init_params(TINY_MODEL, seed=33, zero_init_outputs=False)
    rec = stories[0]
    frames = rec.frames_float()
    window = 1
    t_frame = 5

    pairs = [(rec.captions[i], frames[i]) for i in range(t_frame - 1)]
    mem = assemble_history(pairs, rec.captions[t_frame - 1], params, TINY_MODEL)
    mask = build_inference_mask(mem.block_sizes(), window)
    base = denoise(frames[t_frame - 1], 3, mem, mask, params, TINY_MODEL).data

    denoiser_exact = True
    for old in (0, 1, 2):  # all frames older than the window
        pert = [(c, f.copy()) for c, f in pairs]
        pert[old] = (pert[old][0], pert[old][1] + 0.7)
        mem_p = assemble_history(pert, rec.captions[t_frame - 1], params, TINY_MODEL)
        out = denoise(frames[t_frame - 1], 3, mem_p, mask, params, TINY_MODEL).data
        denoiser_exact &= bool(np.array_equal(base, out))

    scfg = SampleConfig(guidance=1.0, window=window, mode="visualization")
    caps = [rec.captions[i] for i in range(5)]
    history = [frames[i] for i in range(4)]
    frame_base = generate_frame(4, caps, history, params, TINY_MODEL,
                                tiny_sched, scfg, seed=SEED)
    sampled_exact = True
    for old in (0, 1, 2):
        pert = [f.copy() for f in history]
        pert[old] -= 0.4
        out = generate_frame(4, caps, pert, params, TINY_MODEL, tiny_sched,
                             scfg, seed=SEED)
        sampled_exact &= bool(np.array_equal(frame_base, out))

    report("3 end-to-end causality", denoiser_exact and sampled_exact,
           f"(denoiser exact: {denoiser_exact}, sampled frame exact: {sampled_exact})")


# ---------------------------------------------------------------------------
# 4. classifier-free guidance exactness


def test_criterion_4_cfg(stories, random_params, tiny_sched):
    r = np.random.default_rng(derive_seed(4, "cfg"))
    cond = r.standard_normal((3, 16, 16))
    uncond = r.standard_normal((3, 16, 16))
    exact = (cfg_combine(cond, uncond, 1.0).tobytes() == cond.tobytes()
             and cfg_combine(cond, uncond, 0.0).tobytes() == uncond.tobytes()
             and np.array_equal(cfg_combine(cond, uncond, 2.0),
                                2.0 * cond - uncond))

    stats = {}
    caps = [stories[0].captions[i] for i in range(5)]
    sample_story(caps, random_params, TINY_MODEL, tiny_sched,
                 SampleConfig(guidance=1.0, window=2, mode="visualization"),
                 seed=SEED, stats=stats)
    no_uncond = stats.get("uncond_calls", 0) == 0 and stats["cond_calls"] > 0
    report("4 CFG exactness", exact and no_uncond,
           f"(combine exact: {exact}, w=1 uncond calls: {stats.get('uncond_calls', 0)})")


# ---------------------------------------------------------------------------
# 5. adapter contracts


def test_criterion_5_adapter(stories, tiny_sched):
    from dataclasses import replace

    rec = stories[1]
    frames = rec.frames_float()

    with_adapter = init_params(TINY_MODEL, seed=55)
    without = init_params(replace(TINY_MODEL, adapter_enabled=False), seed=55)
    pairs = [(rec.captions[i], frames[i]) for i in range(2)]
    mem_a = assemble_history(pairs, rec.captions[2], with_adapter, TINY_MODEL)
    mem_b = assemble_history(pairs, rec.captions[2], without,
                             replace(TINY_MODEL, adapter_enabled=False))
    mask = build_train_mask(mem_a.block_sizes())
    out_a = denoise(frames[2], 2, mem_a, mask, with_adapter, TINY_MODEL).data
    out_b = denoise(frames[2], 2, mem_b, mask, without,
                    replace(TINY_MODEL, adapter_enabled=False)).data
    identity = bool(np.array_equal(out_a, out_b))

    # adapter-only steps from a non-degenerate base
    params = init_params(TINY_MODEL, seed=56, zero_init_outputs=False)
    params["adapter.up.w"].data[:] = 0.0
    params["adapter.up.b"].data[:] = 0.0
    snapshot = {n: params[n].data.copy() for n in params.names()}
    cfg = TrainConfig(lr=5e-3, steps=3, batch_size=2, p_uncond=0.0,
                      mode="adapter_only")
    run_training(stories, params, tiny_sched, TINY_MODEL, cfg, seed=SEED)
    base_untouched = all(
        np.array_equal(params[n].data, snapshot[n])
        for n in params.names() if not n.startswith("adapter.")
    )
    adapter_moved = any(
        not np.array_equal(params[n].data, snapshot[n])
        for n in params.names() if n.startswith("adapter.")
    )

    default_params = init_params(ModelConfig(), seed=57)
    frac = (sum(default_params[n].data.size
                for n in trainable_names(default_params, "adapter_only"))
            / default_params.n_values())
    report("5 adapter contracts",
           identity and base_untouched and adapter_moved and frac < 0.05,
           f"(zero-init identity: {identity}, base untouched: {base_untouched}, "
           f"trainable fraction {frac:.4f})")


# ---------------------------------------------------------------------------
# 6. training efficacy


def test_criterion_6_training_efficacy(trained):
    losses = trained["losses"][:500]  # byte-identical to a 500-step run
    first = float(np.mean(losses[:50]))
    last = float(np.mean(losses[450:500]))
    report("6 training efficacy", last < 0.5 * first,
           f"(first-50 mean {first:.4f}, trailing-50 mean {last:.4f}, "
           f"ratio {last / first:.3f})")


# ---------------------------------------------------------------------------
# 7. coherence analog


def test_criterion_7_coherence(trained, corpus):
    model_cfg = trained["model"]
    sched = trained["sched"]
    data_cfg = DataConfig()
    eval_records = corpus[:64]
    captions = {rec.story_id: [rec.captions[i] for i in range(data_cfg.length)]
                for rec in eval_records}

    def sample_all(params, window):
        scfg = SampleConfig(guidance=2.0, window=window, mode="visualization")
        scores, all_frames = [], []
        for rec in eval_records:
            frames = sample_story(captions[rec.story_id], params, model_cfg,
                                  sched, scfg,
                                  derive_seed(SEED, "eval", rec.story_id))
            scores.append(background_consistency(frames, rec.scene, data_cfg))
            all_frames.extend(frames)
        return np.array(scores), all_frames

    with_history, frames_hist = sample_all(trained["params"], data_cfg.length - 1)
    ablated, _ = sample_all(trained["params"], 0)
    untrained_params = init_params(model_cfg, derive_seed(SEED, "init"))
    _, frames_untrained = sample_all(untrained_params, data_cfg.length - 1)

    diff = with_history - ablated
    rng = np.random.default_rng(derive_seed(7, "bootstrap"))
    boot = np.array([diff[rng.integers(0, len(diff), len(diff))].mean()
                     for _ in range(10_000)])
    ci_low = float(np.percentile(boot, 2.5))

    real_frames = [f for rec in eval_records for f in rec.frames_float()]
    feat_seed = derive_seed(SEED, "features")
    real_stats = fit_gaussian(feature_extract(real_frames, feat_seed))
    fid_trained = frechet_distance(
        real_stats, fit_gaussian(feature_extract(frames_hist, feat_seed)))
    fid_untrained = frechet_distance(
        real_stats, fit_gaussian(feature_extract(frames_untrained, feat_seed)))

    half = len(real_frames) // 2
    fid_halves = frechet_distance(
        fit_gaussian(feature_extract(real_frames[:half], feat_seed)),
        fit_gaussian(feature_extract(real_frames[half:], feat_seed)))

    report("7 coherence analog",
           ci_low > 0 and fid_trained < fid_untrained
           and fid_halves < fid_untrained,
           f"(bg consistency {with_history.mean():.3f} vs ablated "
           f"{ablated.mean():.3f}, CI low {ci_low:.4f}; proxy-FID trained "
           f"{fid_trained:.2f} < untrained {fid_untrained:.2f}; "
           f"halves {fid_halves:.3f})")


# ---------------------------------------------------------------------------
# 8. speed analog


def test_criterion_8_speed():
    full = attention_cost(16, 8, 64, None)
    windowed = attention_cost(16, 8, 64, 2)
    visible = sum(min(i, 2) + 1 for i in range(16))
    total = sum(range(1, 17))
    exact_ratio = windowed * total == full * visible and windowed < full

    reports = bench_attention(16, 2, 8, 64, iters=50)
    separated = True
    detail = []
    for backend in sorted({r.backend for r in reports}):
        med = {r.mask: r.median_s for r in reports if r.backend == backend}
        iqr = {r.mask: r.iqr_s for r in reports if r.backend == backend}
        noise = max(iqr["full"], iqr["windowed"])
        gap = med["full"] - med["windowed"]
        separated &= gap > noise
        detail.append(f"{backend}: full {med['full'] * 1e3:.3f}ms vs windowed "
                      f"{med['windowed'] * 1e3:.3f}ms (noise {noise * 1e3:.3f}ms)")
    report("8 speed analog", exact_ratio and separated,
           f"(flops {windowed}/{full} = {visible}/{total}; " + "; ".join(detail) + ")")


# ---------------------------------------------------------------------------
# 9. full-pipeline reproducibility


def test_criterion_9_reproducibility(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"train": {"steps": 500}, "eval": {"n_stories": 4}}))

    def pipeline(tag):
        root = tmp_path / tag
        root.mkdir()
        data = root / "data.jsonl"
        ckpt = root / "model.ckpt"
        frames_dir = root / "frames"
        metrics = root / "metrics.csv"
        assert cli_main(["gen-data", "--config", str(cfg_path), "--count", "200",
                         "--out", str(data)]) == 0
        assert cli_main(["train", "--config", str(cfg_path), "--data", str(data),
                         "--out-ckpt", str(ckpt)]) == 0
        from storydiff.data import read_dataset
        rec = read_dataset(data)[1][0]
        caps = root / "captions.json"
        caps.write_text(json.dumps({"captions": rec.captions.tolist()}))
        assert cli_main(["sample", "--ckpt", str(ckpt), "--captions-file",
                         str(caps), "--out-dir", str(frames_dir)]) == 0
        assert cli_main(["eval", "--ckpt", str(ckpt), "--data", str(data),
                         "--out", str(metrics)]) == 0
        payload = {"data": data.read_bytes(), "ckpt": ckpt.read_bytes(),
                   "metrics": metrics.read_bytes()}
        for ppm in sorted(frames_dir.glob("*.ppm")):
            payload[ppm.name] = ppm.read_bytes()
        payload["manifest"] = (frames_dir / "manifest.json").read_bytes()
        return payload

    first = pipeline("run1")
    second = pipeline("run2")
    mismatched = [k for k in first if first[k] != second[k]]
    report("9 reproducibility", not mismatched,
           f"(byte-identical: dataset, checkpoint, {len(first) - 3} frame files, "
           f"metrics)" if not mismatched else f"(mismatch in {mismatched})")


# ---------------------------------------------------------------------------
# 10. continuation contract


def test_criterion_10_continuation(tmp_path, stories, random_params, tiny_sched):
    rec = stories[2]
    caps = [rec.captions[i] for i in range(5)]
    first = rec.frames_float()[0]
    frames = sample_story(caps, random_params, TINY_MODEL, tiny_sched,
                          SampleConfig(guidance=1.0, window=2, mode="continuation"),
                          seed=SEED, first_frame=first)
    emits_first = np.array_equal(frames[0], first) and len(frames) == 5

    # CLI-level exit codes for the mode/first-frame contract
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(
        {"model": {"channels": 8, "n_blocks": 1, "d_model": 16, "b_tok": 4,
                   "adapter_bottleneck": 4},
         "schedule": {"timesteps": 8},
         "train": {"steps": 1, "batch_size": 2}}))
    data = tmp_path / "data.jsonl"
    ckpt = tmp_path / "m.ckpt"
    assert cli_main(["gen-data", "--config", str(cfg_path), "--count", "4",
                     "--out", str(data)]) == 0
    assert cli_main(["train", "--config", str(cfg_path), "--data", str(data),
                     "--out-ckpt", str(ckpt)]) == 0
    from storydiff.data import read_dataset
    loaded = read_dataset(data)[1][0]
    with_frame = tmp_path / "with_frame.json"
    with_frame.write_text(json.dumps({
        "captions": loaded.captions.tolist(),
        "first_frame": loaded.frames_u8[0].reshape(-1).tolist(),
    }))
    without_frame = tmp_path / "without_frame.json"
    without_frame.write_text(json.dumps({"captions": loaded.captions.tolist()}))

    code_missing = cli_main(["sample", "--ckpt", str(ckpt), "--captions-file",
                             str(without_frame), "--mode", "continuation",
                             "--out-dir", str(tmp_path / "o1")])
    code_extra = cli_main(["sample", "--ckpt", str(ckpt), "--captions-file",
                           str(with_frame), "--mode", "visualization",
                           "--out-dir", str(tmp_path / "o2")])
    code_ok = cli_main(["sample", "--ckpt", str(ckpt), "--captions-file",
                        str(with_frame), "--mode", "continuation",
                        "--out-dir", str(tmp_path / "o3")])
    report("10 continuation contract",
           emits_first and code_missing == 2 and code_extra == 2 and code_ok == 0,
           f"(first frame bit-exact: {emits_first}; exit codes "
           f"missing={code_missing}, rejected={code_extra}, ok={code_ok})")
