"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines as they complete. The end-to-end run (criteria 7 and 8) trains three
seeds of the desk configuration and takes a few minutes on CPU.
"""

import functools
import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from molora.adapters import build_molora, lora_forward, lora_init, lora_merge, \
    molora_forward, route, trainable_param_count
from molora.analytics import RoutingTrace, mean_pairwise_jsd, task_affinity
from molora.checkpoint import load_checkpoint, payload_nbytes, read_checkpoint, \
    save_checkpoint
from molora.config import load_config
from molora.model import ModelConfig, build_model
from molora.taskgen import TASKS, VOCAB, mixture
from molora.tensor import Tensor, finite_diff_check, tsum
from molora.train import AdamW, TrainConfig, evaluate, lr_at, run_training, \
    train_step

CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "desk.toml"
FIXTURE_PATH = Path(__file__).resolve().parent / "fixtures" / "tiny-adapters.mlra"

E2E_SEEDS = (0, 1, 2)
E2E_BUDGET_SECONDS = 15 * 60
EXACT_MATCH_THRESHOLDS = {"copy": 0.90, "reverse": 0.90,
                          "sort": 0.70, "add": 0.70}


def criterion(number, title):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[criterion {number}] {title}: FAIL")
                raise
            print(f"[criterion {number}] {title}: PASS")
        return wrapper
    return deco


def small_config(**kw):
    base = dict(vocab_size=len(VOCAB), dim=16, n_layers=2, n_heads=2,
                max_seq_len=32, rank=2, alpha=4.0, n_experts=4, top_k=2)
    base.update(kw)
    return ModelConfig(**base)


# -- criterion 1: gradient correctness ------------------------------------------------

@criterion(1, "gradients match finite differences for every adapter class")
def test_criterion_1_gradient_correctness():
    started = time.time()
    cfg = small_config()
    model = build_model(cfg, seed=41, dtype=np.float64)
    g = np.random.default_rng(42)
    # push B and routers off their symmetric init so routing has no ties
    for layer in model.layers:
        for ad in layer.attn.adapters.values():
            ad.B.data[:] = g.standard_normal(ad.B.shape) * 0.1
        for slot in ("gate", "up", "down"):
            mix = layer.ffn.slot(slot)
            mix.router.data[:] = g.standard_normal(mix.router.shape) * 0.5
            for e in mix.experts:
                e.B.data[:] = g.standard_normal(e.B.shape) * 0.1
    tokens = g.integers(0, cfg.vocab_size, size=5).tolist()

    def loss_with(owner, attr, probe):
        keep = getattr(owner, attr)
        setattr(owner, attr, probe)
        try:
            return tsum(model.forward(tokens))
        finally:
            setattr(owner, attr, keep)

    targets = {
        "expert A": (model.layers[0].ffn.gate.experts[1], "A"),
        "expert B": (model.layers[1].ffn.down.experts[2], "B"),
        "router": (model.layers[0].ffn.up, "router"),
        "attention A": (model.layers[1].attn.adapters["q"], "A"),
        "attention B": (model.layers[0].attn.adapters["v"], "B"),
    }
    for label, (owner, attr) in targets.items():
        err = finite_diff_check(
            lambda probe, o=owner, a=attr: loss_with(o, a, probe),
            getattr(owner, attr), step=1e-5)
        assert err < 1e-4, f"{label}: max relative error {err}"
    assert time.time() - started < 60


# -- criterion 2: initialization identity ---------------------------------------------

@criterion(2, "fresh adapters leave base logits bitwise unchanged")
def test_criterion_2_init_identity():
    cfg = small_config(dim=32, n_heads=4)
    model = build_model(cfg, seed=43)
    g = np.random.default_rng(44)
    for _ in range(50):
        t = int(g.integers(1, cfg.max_seq_len + 1))
        prompt = g.integers(0, cfg.vocab_size, size=t).tolist()
        adapted = model.forward(prompt, use_adapters=True).data
        base = model.forward(prompt, use_adapters=False).data
        np.testing.assert_array_equal(adapted, base)


# -- criterion 3: degeneracy equivalences -----------------------------------------------

@criterion(3, "mixture degenerates to plain adapter; merge is equivalent")
def test_criterion_3_degeneracies():
    g = np.random.default_rng(45)
    d, d_out, r = 12, 18, 3

    # (N=1, K=1) mixture == plain adapter, exactly
    w = Tensor(g.standard_normal((d_out, d)).astype(np.float32))
    single = build_molora(w, n_experts=1, rank=r, alpha=6.0, top_k=1, seed=1)
    single.experts[0].B.data[:] = g.standard_normal((d_out, r)).astype(np.float32)
    for _ in range(100):
        x = Tensor(g.standard_normal((3, d)).astype(np.float32))
        np.testing.assert_array_equal(
            molora_forward(single, x).data,
            lora_forward(single.experts[0], w, x).data)

    # (N=4, K=4) with identical experts == plain adapter within 1e-6
    quad = build_molora(w, n_experts=4, rank=r, alpha=6.0, top_k=4, seed=2)
    a0 = g.standard_normal(quad.experts[0].A.shape).astype(np.float32)
    b0 = g.standard_normal(quad.experts[0].B.shape).astype(np.float32)
    for e in quad.experts:
        e.A.data[:] = a0
        e.B.data[:] = b0
    for _ in range(100):
        x = Tensor(g.standard_normal((2, d)).astype(np.float32))
        diff = molora_forward(quad, x).data - \
            lora_forward(quad.experts[0], w, x).data
        assert np.max(np.abs(diff)) < 1e-6

    # merge-then-forward == adapter forward within 1e-5 at float32
    ad = lora_init(d, d_out, rank=r, alpha=6.0, seed=3)
    ad.B.data[:] = g.standard_normal((d_out, r)).astype(np.float32) * 0.5
    merged = lora_merge(ad, w)
    for _ in range(100):
        x = Tensor(g.standard_normal((1, d)).astype(np.float32))
        diff = lora_forward(ad, w, x).data - x.data @ merged.data.T
        assert np.max(np.abs(diff)) < 1e-5


# -- criterion 4: freezing and gradient sparsity -------------------------------------------

@criterion(4, "frozen base bitwise intact; unselected experts get zero gradient")
def test_criterion_4_freezing_and_sparsity():
    from molora.taskgen import generate

    cfg = small_config()
    model = build_model(cfg, seed=46)
    frozen_before = [t.data.copy() for t in model.frozen_parameters()]
    data = generate("copy", 24, length_range=(3, 5), seed=47) + \
        generate("add", 24, seed=48)
    tc = TrainConfig(lr=5e-3, batch_size=4, epochs=0, seed=49)
    opt = AdamW(model.trainable_parameters(), tc)
    g = np.random.default_rng(50)
    for step in range(100):
        batch = [data[int(i)] for i in g.integers(0, len(data), size=4)]
        train_step(model, batch, opt, lr=5e-3)
    for before, t in zip(frozen_before, model.frozen_parameters()):
        np.testing.assert_array_equal(before, t.data)

    # per-token masking on 1000 sampled tokens
    w = Tensor(g.standard_normal((20, 12)).astype(np.float32))
    layer = build_molora(w, n_experts=6, rank=2, alpha=4.0, top_k=2, seed=51)
    for e in layer.experts:
        e.B.data[:] = g.standard_normal(e.B.shape).astype(np.float32) * 0.1
    for _ in range(1000):
        x = Tensor(g.standard_normal((1, 12)).astype(np.float32))
        selected, _ = route(layer, x.data[0])
        for t in layer.trainable_tensors():
            t.zero_grad()
        tsum(molora_forward(layer, x)).backward()
        for j, e in enumerate(layer.experts):
            if j not in selected:
                assert e.A.grad is None or not np.any(e.A.grad)
                assert e.B.grad is None or not np.any(e.B.grad)


# -- criterion 5: parameter accounting ----------------------------------------------------

@criterion(5, "count formulas match enumeration; payload is 4 bytes per parameter")
def test_criterion_5_parameter_accounting(tmp_path):
    g = np.random.default_rng(52)
    for _ in range(10):
        d_in = int(g.integers(4, 64))
        d_out = int(g.integers(4, 64))
        rank = int(g.integers(1, min(d_in, d_out)))
        n = int(g.integers(1, 10))
        k = int(g.integers(1, n + 1))

        ad = lora_init(d_in, d_out, rank, alpha=2.0 * rank,
                       seed=int(g.integers(1 << 31)))
        assert trainable_param_count(ad) == rank * (d_in + d_out)
        assert trainable_param_count(ad) == sum(
            t.size for t in ad.trainable_tensors())

        w = Tensor(np.zeros((d_out, d_in), dtype=np.float32))
        mix = build_molora(w, n, rank, 2.0 * rank, k,
                           seed=int(g.integers(1 << 31)))
        assert trainable_param_count(mix) == n * rank * (d_in + d_out) + n * d_in
        assert trainable_param_count(mix) == sum(
            t.size for t in mix.trainable_tensors())

    model = build_model(small_config(), seed=53)
    path = tmp_path / "size.mlra"
    save_checkpoint(model, path)
    _, tensors = read_checkpoint(path)
    payload = sum(4 * a.size for a in tensors.values())
    assert payload == payload_nbytes(model) == 4 * model.trainable_param_count()


# -- criterion 6: learning-rate schedule -----------------------------------------------------

@criterion(6, "warmup-cosine schedule endpoints and continuity")
def test_criterion_6_schedule():
    cfg = TrainConfig(lr=2e-4, warmup_ratio=0.03)
    for total in (100, 450, 675, 10_000):
        warmup = math.ceil(0.03 * total)
        assert lr_at(0, total, cfg) == 0.0
        assert lr_at(warmup, total, cfg) == pytest.approx(2e-4, abs=0)
        assert lr_at(total, total, cfg) == pytest.approx(0.0, abs=1e-19)
        cosine_at_boundary = 0.5 * cfg.lr * (1 + math.cos(0.0))
        assert abs(lr_at(warmup, total, cfg) - cosine_at_boundary) < 1e-12


# -- criteria 7 and 8: end-to-end run with routing analytics ----------------------------------

def _trace_on(model, samples, n_experts):
    trace = RoutingTrace(n_experts)
    for s in samples:
        trace.set_context(s.task_id)
        model.forward(s.tokens[:-1], trace=trace)
    return trace


@pytest.fixture(scope="module")
def e2e_runs():
    cfg = load_config(CONFIG_PATH)
    train_set, held_out = mixture(cfg.data.counts(), cfg.data.seed,
                                  cfg.data.length_range())
    started = time.time()
    runs = []
    for seed in E2E_SEEDS:
        model = build_model(cfg.model, seed=seed)
        init_trace = _trace_on(model, held_out, cfg.model.n_experts)
        tc = TrainConfig(**{**cfg.train.to_dict(), "seed": seed})
        history = run_training(model, train_set, tc)
        final_trace = _trace_on(model, held_out, cfg.model.n_experts)
        metrics = evaluate(model, held_out)
        runs.append({
            "seed": seed,
            "history": history,
            "metrics": metrics,
            "init_trace": init_trace,
            "final_trace": final_trace,
            "n_layers": cfg.model.n_layers,
        })
        print(f"  [e2e seed {seed}] loss {history[0][2]:.3f} -> "
              f"{history[-1][2]:.3f}; exact match "
              + " ".join(f"{t}={metrics['exact_match'].get(t, 0.0):.2f}"
                         for t in TASKS))
    elapsed = time.time() - started
    print(f"  [e2e] 3 seeds in {elapsed / 60:.1f} min")
    return {"runs": runs, "elapsed": elapsed}


@criterion(7, "desk-scale multi-task run reaches the exact-match bars")
def test_criterion_7_end_to_end(e2e_runs):
    assert e2e_runs["elapsed"] <= E2E_BUDGET_SECONDS
    for run in e2e_runs["runs"]:
        first = np.mean([h[2] for h in run["history"][:10]])
        last = np.mean([h[2] for h in run["history"][-10:]])
        assert last <= 0.5 * first, \
            f"seed {run['seed']}: loss {first:.3f} -> {last:.3f}"
    for task, bar in EXACT_MATCH_THRESHOLDS.items():
        mean_em = np.mean([r["metrics"]["exact_match"][task]
                           for r in e2e_runs["runs"]])
        assert mean_em >= bar, f"{task}: mean exact match {mean_em:.3f} < {bar}"


@criterion(8, "task routing diverges from its initialization state")
def test_criterion_8_specialization(e2e_runs):
    improved = 0
    total = 0
    for run in e2e_runs["runs"]:
        for layer in range(run["n_layers"]):
            for slot in ("gate", "up", "down"):
                _, _, jsd_init = task_affinity(run["init_trace"], layer, slot)
                _, _, jsd_final = task_affinity(run["final_trace"], layer, slot)
                total += 1
                if mean_pairwise_jsd(jsd_final) > mean_pairwise_jsd(jsd_init):
                    improved += 1
    assert improved * 2 >= total, f"only {improved}/{total} slots diverged"


# -- criterion 9: determinism and persistence ---------------------------------------------------

@criterion(9, "bit-identical reruns; checkpoint round-trip and fixture stability")
def test_criterion_9_determinism_and_persistence(tmp_path):
    from molora.taskgen import generate

    cfg = small_config()
    data = generate("reverse", 16, length_range=(3, 5), seed=54)
    tc = TrainConfig(lr=5e-3, batch_size=4, epochs=2, seed=55)
    h1 = run_training(build_model(cfg, seed=56), data, tc)
    h2 = run_training(build_model(cfg, seed=56), data, tc)
    assert h1 == h2

    model = build_model(cfg, seed=56)
    run_training(model, data, tc)
    path = tmp_path / "adapters.mlra"
    save_checkpoint(model, path, train_config=tc, seed=56)
    reloaded = load_checkpoint(path, build_model(cfg, seed=56))
    g = np.random.default_rng(57)
    for _ in range(20):
        prompt = g.integers(0, cfg.vocab_size, size=9).tolist()
        np.testing.assert_array_equal(model.forward(prompt).data,
                                      reloaded.forward(prompt).data)

    # committed fixture must parse to the frozen digest on any platform
    meta, tensors = read_checkpoint(FIXTURE_PATH)
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode())
        digest.update(tensors[name].tobytes())
    expected = (FIXTURE_PATH.parent / "tiny-adapters.sha256").read_text().strip()
    assert digest.hexdigest() == expected
    fixture_model = build_model(ModelConfig(**meta["model"]), seed=meta["seed"])
    load_checkpoint(FIXTURE_PATH, fixture_model)
