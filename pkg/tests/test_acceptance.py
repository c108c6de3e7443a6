"""Acceptance criteria A1-A12.

Each test records one ``A<n> PASS|FAIL: ...`` line (repeated in the terminal
summary). The direction suite (A8-A11) trains three default-size models once per
session; the step budget is ``AVFUSE_ACCEPT_STEPS`` (default 1000) and the
number of held-out evaluation clips ``AVFUSE_ACCEPT_EVAL`` (default 300); see README.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

from avfuse import autodiff as ad
from avfuse import context as cx
from avfuse import data, training
from avfuse.autodiff import Tensor
from avfuse.cli import RunConfig, build_split, evaluate_model, layer_variants
from avfuse.context import materialize_batch
from avfuse.metrics import calibrate, paired_bootstrap, timbre_similarity
from avfuse.model import (ModelConfig, build_av_mask, count_params, forward_batch, hal_block,
                          init_params, load_checkpoint, model_forward, save_checkpoint,
                          scaled_positions, ufl_block)
from avfuse.sampler import PASSES, Conditioning, GuidanceScales, SampleRequest, guided_velocity, sample_batch

from conftest import acceptance_line, grad_check
from test_autodiff import OPS, SEEDS
from test_model import composed_gradient_error

ACCEPT_STEPS = int(os.environ.get("AVFUSE_ACCEPT_STEPS", "1000"))
# near-ceiling sync needs more than the minimum 100 clips for the paired CI to resolve
ACCEPT_EVAL = int(os.environ.get("AVFUSE_ACCEPT_EVAL", "300"))
TINY = ModelConfig(n_hal=1, n_ufl=1, d_model=16, n_heads=2, d_c=8, d_freq=8)
PROMPT = "a blob traces pattern five speaker:1 says <S>pattern five<E> speaker:6 says <S>pattern five<E>"


# -- A. exactness -----------------------------------------------------------------------

def test_a1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name, (fn, shapes) in sorted(OPS.items()):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            err = grad_check(fn, [rng.standard_normal(s) for s in shapes], seed=seed)
            if err > worst_op:
                worst_op, worst_name = err, name
    composed = composed_gradient_error()
    elapsed = time.perf_counter() - t0
    ok = worst_op < 1e-4 and composed < 1e-3 and elapsed < 120
    acceptance_line("A1", ok, f"worst op rel. error {worst_op:.2e} ({worst_name}) < 1e-4; "
                              f"composed tiny model {composed:.2e} < 1e-3; {elapsed:.1f}s < 120s")
    assert ok


def test_a2_cross_drop_causality():
    violations = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        cfg = dataclasses.replace(TINY, n_hal=int(rng.integers(0, 3)), n_ufl=int(rng.integers(1, 3)))
        params = init_params(cfg, seed=seed, zero_gates=False)
        rec = cx.parse_prompt(PROMPT)
        seq = cx.augment_context(rec, {0: cx.encode_timbre(Tensor(rng.standard_normal((8, 12))), params)}, params)
        units = int(rng.integers(1, 5))
        z_a = Tensor(rng.standard_normal((8 * units, 12)))
        z_v = Tensor(rng.standard_normal((4 * units, 16)))
        t = float(rng.random())
        a0, v0 = model_forward(z_a, z_v, seq, t, True, cfg, params)
        a1, _ = model_forward(z_a, Tensor(rng.standard_normal(z_v.shape) * 100), seq, t, True, cfg, params)
        _, v1 = model_forward(Tensor(rng.standard_normal(z_a.shape) * 100), z_v, seq, t, True, cfg, params)
        violations += int(not np.array_equal(a0.data, a1.data)) + int(not np.array_equal(v0.data, v1.data))
    acceptance_line("A2", violations == 0, f"{violations} bitwise violations over 20 random tiny models x 2 directions")
    assert violations == 0


def test_a3_rope_rate_alignment():
    pa, pv = scaled_positions(256, 128, tr_a=8, tr_v=4)
    dev = float(np.max(np.abs(ad.rope_angles(pa[0::2], 64) - ad.rope_angles(pv, 64))))
    ok = dev <= 1e-12
    acceptance_line("A3", ok, f"max |angle(audio 2k) - angle(video k)| = {dev:.1e} <= 1e-12")
    assert ok


def _pass(name, z_a, z_v, cond, t, params):
    plans, timbres = cond.variant(name)
    tokens, slots, mask = materialize_batch(plans, timbres, params)
    v = forward_batch(Tensor(z_a), Tensor(z_v), tokens, slots, mask, t, np.full(len(plans), name == "align_null"),
                      TINY, params)
    return [x.data for x in v]


def test_a4_cfg_algebra():
    params = init_params(TINY, seed=21, zero_gates=False)
    rng = np.random.default_rng(4)
    cond = Conditioning.build([SampleRequest(PROMPT, seed=3)], params)
    z_a, z_v = rng.standard_normal((1, 16, 12)), rng.standard_normal((1, 8, 16))
    plain = guided_velocity(z_a, z_v, cond, 0.4, GuidanceScales(), TINY, params)
    full = _pass("full", z_a, z_v, cond, 0.4, params)
    bitwise = all(np.array_equal(a, b) for a, b in zip(plain, full))
    worst = 0.0
    for _ in range(10):
        scales = GuidanceScales(*rng.uniform(0, 4, 3))
        t = float(rng.random())
        out = guided_velocity(z_a, z_v, cond, t, scales, TINY, params)
        passes = [_pass(n, z_a, z_v, cond, t, params) for n in PASSES]
        for m in range(2):
            manual = sum(c * p[m] for c, p in zip(scales.coefficients(), passes))
            worst = max(worst, float(np.max(np.abs(out[m] - manual))))
    probe = max(abs(sum(GuidanceScales(*s).coefficients()) - 1.0)
                for s in ((0, 0, 0), (1, 0, 0), (0.5, 2, 3.5)))
    ok = bitwise and worst <= 1e-12 and probe <= 1e-15
    acceptance_line("A4", ok, f"(0,0,0) bitwise={bitwise}; random-scale composition error {worst:.1e} <= 1e-12; "
                              f"coefficient-sum probe error {probe:.1e}")
    assert ok


def test_a5_identity_at_init():
    cfg = ModelConfig()
    params = init_params(cfg, seed=5)
    rng = np.random.default_rng(5)
    h_a, h_v = Tensor(rng.standard_normal((16, 64))), Tensor(rng.standard_normal((8, 64)))
    ctx, t_emb = Tensor(rng.standard_normal((7, 32))), Tensor(rng.standard_normal(64))
    checked, failed = 0, 0
    for i in range(cfg.n_hal):
        out = hal_block(h_a, h_v, ctx, t_emb, build_av_mask(16, 8, False), params, i, cfg)
        failed += int(not (np.array_equal(out[0].data, h_a.data) and np.array_equal(out[1].data, h_v.data)))
        checked += 1
    h = ad.concat([h_a, h_v], axis=0)
    for i in range(cfg.n_ufl):
        failed += int(not np.array_equal(ufl_block(h, ctx, t_emb, None, params, i, cfg).data, h.data))
        checked += 1
    acceptance_line("A5", failed == 0, f"{checked - failed}/{checked} blocks are the exact identity at init")
    assert failed == 0


def test_a6_determinism_and_persistence(tmp_path):
    dataset = build_split(0, 24, RunConfig.from_items({}).data)
    tcfg = training.TrainConfig(steps=50, batch_size=2, seed=6)
    full = training.train(dataset, TINY, tcfg)
    half = training.train(dataset, TINY, tcfg, until=25)
    training.save_state(half, tmp_path / "half.state", TINY, tcfg)
    resumed = training.train(dataset, TINY, tcfg, state=training.load_state(tmp_path / "half.state", TINY))
    resume_ok = all(np.array_equal(full.params[n].data, resumed.params[n].data) for n in full.params)
    save_checkpoint(tmp_path / "m.ckpt", TINY, full.params)
    _, back = load_checkpoint(tmp_path / "m.ckpt", TINY)
    ckpt_ok = all(np.array_equal(full.params[n].data, back[n].data) for n in full.params)
    data.write_dataset(dataset, tmp_path / "d.bin")
    again = data.read_dataset(tmp_path / "d.bin")
    data.write_dataset(again, tmp_path / "d2.bin")
    data_ok = (tmp_path / "d.bin").read_bytes() == (tmp_path / "d2.bin").read_bytes() and all(
        np.array_equal(a[0].audio_tokens.data, b[0].audio_tokens.data) and a[1].text == b[1].text
        for a, b in zip(dataset, again))
    ok = resume_ok and ckpt_ok and data_ok
    acceptance_line("A6", ok, f"resume over 25+25 steps bitwise={resume_ok}; checkpoint round-trip={ckpt_ok}; "
                              f"dataset round-trip={data_ok}")
    assert ok


# -- B. calibration ----------------------------------------------------------------------

def test_a7_metric_calibration():
    c = calibrate()
    acceptance_line("A7", c.passed,
                    f"matched sync min {c.matched_sync_min:.3f} > 0.9; mismatched mean |sync| "
                    f"{c.mismatched_abs_sync:.3f} < 0.2; pattern acc {c.pattern_acc_matched:.3f} > 0.98; "
                    f"noise pattern acc {c.pattern_acc_noise:.4f} within 1/16 +- 0.05")
    assert c.passed, c.failures()


# -- C. direction suite ---------------------------------------------------------------------

@pytest.fixture(scope="session")
def direction():
    """Three equal-budget variants trained on the default toy set, plus evaluation helpers."""
    base = RunConfig.from_items({"steps": str(ACCEPT_STEPS)})
    dataset = build_split(base.data.train_seed_start, base.data.n_train, base.data)
    models = {}
    for label, kw in layer_variants(base.model):
        cfg = base.with_model(**kw)
        state = training.train(dataset, cfg.model, cfg.train)
        models[label] = (cfg, state.params)
    cache: dict = {}

    def report(label, scales):
        key = (label, str(scales))
        if key not in cache:
            cfg, params = models[label]
            cache[key] = evaluate_model(cfg, params, scales, n=ACCEPT_EVAL)
        return cache[key]

    return models, report


def _paired(a_rows, b_rows, key):
    idx = [i for i, r in enumerate(a_rows) if r[key] is not None]
    return [a_rows[i][key] for i in idx], [b_rows[i][key] for i in idx]


def test_a8_align_guidance_improves_sync(direction):
    _, report = direction
    base, guided = report("both", GuidanceScales(0, 0, 0)), report("both", GuidanceScales(0, 1, 0))
    a, b = _paired(base.rows, guided.rows, "sync")
    mean, lo, hi = paired_bootstrap(a, b)
    ok = len(a) >= 100 and guided.sync_score > base.sync_score and lo > 0
    acceptance_line("A8", ok, f"sync {base.sync_score:.4f} -> {guided.sync_score:.4f} with s_align=1 on {len(a)} "
                              f"clips; paired diff {mean:+.4f}, 95% CI [{lo:+.4f}, {hi:+.4f}] excludes 0")
    assert ok


def test_a9_timbre_guidance_improves_similarity(direction):
    _, report = direction
    base, guided = report("both", GuidanceScales(0, 0, 0)), report("both", GuidanceScales(0, 0, 1))
    a, b = _paired(base.rows, guided.rows, "timbre")
    mean, lo, hi = paired_bootstrap(a, b)
    ok = guided.timbre_similarity > base.timbre_similarity and lo > 0
    acceptance_line("A9", ok, f"timbre similarity {base.timbre_similarity:.4f} -> {guided.timbre_similarity:.4f} "
                              f"with s_timbre=1 on {len(a)} speech clips; paired diff {mean:+.4f}, 95% CI "
                              f"[{lo:+.4f}, {hi:+.4f}]; pattern acc {base.pattern_accuracy:.2f} -> "
                              f"{guided.pattern_accuracy:.2f}")
    assert ok


def test_a10_layer_ablation_direction(direction):
    models, report = direction
    rows = []
    for label in ("hal_only", "ufl_only", "both"):
        cfg, _ = models[label]
        r = report(label, GuidanceScales(0, 0, 0))
        rows.append((label, cfg.model.n_hal, cfg.model.n_ufl, count_params(cfg.model), r.sync_score,
                     r.timbre_similarity, r.pattern_accuracy))
    print("variant   n_hal n_ufl  params   sync    timbre  pattern")
    for row in rows:
        print("{:<9} {:>5} {:>5} {:>7}  {:.4f}  {:.4f}  {:.2f}".format(*row))
    sync = {r[0]: r[4] for r in rows}
    budgets = [r[3] for r in rows]
    ok = all(sync["both"] >= sync[k] for k in ("hal_only", "ufl_only"))
    table = ", ".join(f"{r[0]}({r[1]}+{r[2]}, {r[3]} params) sync {r[4]:.4f}" for r in rows)
    acceptance_line("A10", ok, table + f"; param budgets within {max(budgets) / min(budgets) - 1:.1%}",
                    status="PASS" if ok else "FAILED-DIRECTION")
    assert max(budgets) / min(budgets) < 1.05
    if not ok:
        pytest.xfail("FAILED-DIRECTION: combined variant does not reach the best single-kind variant's sync")


def binding_specs(n=100, seed=950_000):
    """Held-out two-span clips with distinct speakers (seed range disjoint from training and eval)."""
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(n):
        i = int(rng.integers(data.N_SPEAKERS))
        j = int((i + rng.integers(1, data.N_SPEAKERS)) % data.N_SPEAKERS)
        specs.append(data.ClipSpec(seed + k, i, int(rng.integers(data.N_PATTERNS)), int(rng.integers(4, 9)), True, j))
    return specs


def binding_rate(specs, results) -> float:
    hits = 0
    for spec, res in zip(specs, results):
        first, second = data.span_units(spec)
        rows = [(u[:, None] * data.TR_AUDIO + np.arange(data.TR_AUDIO)).ravel() for u in (first, second)]
        a1, a2 = res.audio[rows[0]], res.audio[rows[1]]
        i, j = spec.speaker_id, spec.speaker2_id
        hits += int(timbre_similarity(a1, i) > timbre_similarity(a1, j) and
                    timbre_similarity(a2, j) > timbre_similarity(a2, i))
    return hits / len(specs)


def test_a11_timbre_binding(direction):
    models, _ = direction
    cfg, params = models["both"]
    specs = binding_specs()
    rates = {}
    for scales in (GuidanceScales(0, 0, 0), GuidanceScales(0, 0, 1)):
        reqs = [SampleRequest(data.prompt_text(s), "T2AV", s.duration_units, cfg.run.sample_steps, s.seed, scales)
                for s in specs]
        rates[str(scales)] = binding_rate(specs, sample_batch(reqs, cfg.model, params))
    rate = rates["0,0,1"]
    ok = rate > 0.70
    acceptance_line("A11", ok, f"two-span binding {rate:.2f} > 0.70 on {len(specs)} held-out prompts with "
                               f"s_timbre=1 (unguided: {rates['0,0,0']:.2f})")
    assert ok


def test_a12_dropout_statistics():
    """10K training steps (batch size 1) of a tiny model; per-step drop decisions are recorded."""
    dataset = build_split(0, 64, RunConfig.from_items({}).data)
    tcfg = training.TrainConfig(steps=10_000, batch_size=1, seed=12)
    cross, text = [], []
    bound = kept = 0

    def record(state, loss, info):
        nonlocal bound, kept
        cross.append(bool(info["drop_cross"][0]))
        text.append(bool(info["drop_text"][0]))
        if not info["drop_text"][0]:
            bound += info["timbre_bound"]
            kept += info["timbre_kept"]

    tiny = ModelConfig(n_hal=0, n_ufl=1, d_model=8, n_heads=1, d_c=4, d_freq=4)
    training.train(dataset, tiny, tcfg, callback=record)
    f_cross = float(np.mean(cross))
    f_timbre = 1.0 - kept / bound
    ok = len(cross) == 10_000 and abs(f_cross - 0.2) <= 0.02 and abs(f_timbre - 0.2) <= 0.02
    acceptance_line("A12", ok, f"drop_cross {f_cross:.4f} over {len(cross)} steps; timbre drop {f_timbre:.4f} over "
                               f"{bound} bound spans (text kept); both within 0.2 +- 0.02 "
                               f"(text drop {np.mean(text):.4f})")
    assert ok


def test_timbre_embeddings_cluster_by_speaker(direction):
    """Supplementary: trained timbre encoder maps same-speaker references closer together."""
    models, _ = direction
    _, params = models["both"]
    refs = np.stack([data.generate_reference_utterance(k, seed=70_000 + r).data
                     for k in range(data.N_SPEAKERS) for r in range(10)])
    emb = cx.encode_timbre(Tensor(refs), params).data
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    cos = emb @ emb.T
    speaker = np.repeat(np.arange(data.N_SPEAKERS), 10)
    same = speaker[:, None] == speaker[None, :]
    off_diag = ~np.eye(len(speaker), dtype=bool)
    intra, inter = float(cos[same & off_diag].mean()), float(cos[~same].mean())
    ok = intra > inter
    acceptance_line("E_tim", ok, f"intra-speaker cosine {intra:.3f} > inter-speaker {inter:.3f} (80 references)")
    assert ok
