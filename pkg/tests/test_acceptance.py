"""Acceptance criteria, one test per criterion.

Every test appends a PASS/FAIL line to the summary printed at the end of the
run (see ``conftest.py``) before asserting, so a failing criterion still
reports its measured values. Criteria 4 and 5 train on the full 10k-user
dataset and dominate the runtime.
"""
import inspect
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from urgency_rank import autodiff as ad
from urgency_rank.cli import EXIT_OK, main
from urgency_rank.config import load_run_config
from urgency_rank.features import collate, slate_arrays
from urgency_rank.losses import neural_ndcg_loss, neural_sort, sinkhorn
from urgency_rank.metrics import ndcg_at_k, recall_at_k
from urgency_rank.model import ModelConfig, forward, init_params, score_arrays
from urgency_rank.simulate import SimConfig, generate, split_dataset
from urgency_rank.train import TrainConfig, encode_all, evaluate_arrays, run_ablation, train
from conftest import ACCEPTANCE_LINES, random_slate
from oracles import brute_ndcg, brute_recall, grad_err, numeric_grad, rel_err

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_labels(rng, m):
    y = rng.integers(0, 3, size=m)
    if not y.any():
        y[rng.integers(m)] = 1
    return y


# -- 1. gradient correctness ------------------------------------------------

def op_cases(rng):
    def leaf(*shape, low=-2.0, high=2.0):
        return ad.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)

    a, b = leaf(3, 4, low=0.2), leaf(3, 4)
    c, d = leaf(2, 3, 4), leaf(2, 4, 3)
    slope4, slope3 = leaf(4, low=0.1, high=0.5), leaf(3, low=0.1, high=0.5)
    u, v, bias, w = leaf(2, 4, 3), leaf(2, 5, 3), leaf(3), leaf(3)
    table = leaf(5, 4)
    ids = np.array([[0, 3, 3], [4, 0, 1]])
    mask = np.array([[True, False, True, True], [True, True, True, True], [False, False, True, False]])
    P = leaf(2, 4, 4, low=0.05, high=1.0)
    s = leaf(6)
    return {
        "add": (lambda: a + b, [a, b]),
        "sub": (lambda: a - b, [a, b]),
        "mul": (lambda: a * b, [a, b]),
        "div": (lambda: b / a, [a, b]),
        "matmul": (lambda: c @ d, [c, d]),
        "exp": (lambda: ad.exp(b), [b]),
        "log": (lambda: ad.log(a), [a]),
        "abs_": (lambda: ad.abs_(b), [b]),
        "sigmoid": (lambda: ad.sigmoid(b), [b]),
        "softplus": (lambda: ad.softplus(b * 3.0), [b]),
        "prelu": (lambda: ad.prelu(b, slope4), [b, slope4]),
        "pairwise_prelu_score": (lambda: ad.pairwise_prelu_score(u, v, bias, slope3, w), [u, v, bias, slope3, w]),
        "sum_": (lambda: ad.sum_(c, axis=1), [c]),
        "mean": (lambda: ad.mean(c, axis=-1), [c]),
        "reshape": (lambda: ad.reshape(a, (2, 6)), [a]),
        "transpose": (lambda: ad.transpose(c, (2, 0, 1)), [c]),
        "index": (lambda: ad.index(a, (slice(1, None), [0, 2, 2])), [a]),
        "embedding": (lambda: ad.embedding(table, ids), [table]),
        "concat": (lambda: ad.concat([a, b, a], axis=0), [a, b]),
        "masked_softmax": (lambda: ad.masked_softmax(b, mask), [b]),
        "softmax": (lambda: ad.softmax(b), [b]),
        "custom_op": (lambda: sinkhorn(P, 5), [P]),
        "neural_sort": (lambda: neural_sort(s, 0.7), [s]),
    }


def sampled_numeric_grad(f, arr, idx, h=1e-5):
    flat, out = arr.reshape(-1), []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def test_criterion_1_gradient_correctness(small_cfg):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    cases = op_cases(rng)
    public = {n for n, o in vars(ad).items()
              if inspect.isfunction(o) and o.__module__ == ad.__name__ and not n.startswith("_")}
    uncovered = public - set(cases) - {"backward", "as_tensor"}
    worst_op, worst_name = 0.0, ""
    for name, (build, leaves) in cases.items():
        weight = rng.normal(size=build().shape)

        def f():
            return ad.sum_(build() * weight)

        with ad.Tape() as tape:
            out = f()
        grads = tape.backward(out)
        for leaf in leaves:
            err = rel_err(grads[leaf], numeric_grad(lambda: f().data, leaf.data))
            if err > worst_op:
                worst_op, worst_name = err, name

    slate = random_slate(np.random.default_rng(13), n_hist=4, m=3)
    worst_small = 0.0
    params = init_params(small_cfg, 3)
    batch = collate([slate_arrays(slate, small_cfg.encoding)], h_pad=small_cfg.encoding.h_max)

    def loss_small():
        return neural_ndcg_loss(forward(batch, params, small_cfg)[0], batch.labels, mask=batch.cand_mask)

    with ad.Tape() as tape:
        out = loss_small()
    g = tape.backward(out)
    for p in params.values():
        worst_small = max(worst_small, grad_err(g[p], numeric_grad(lambda: loss_small().data, p.data)))

    # default-size model: every parameter tensor, a sample of coordinates each
    full_cfg = ModelConfig()
    full = init_params(full_cfg, 4)
    fbatch = collate([slate_arrays(slate, full_cfg.encoding)], h_pad=full_cfg.encoding.h_max)

    def loss_full():
        return neural_ndcg_loss(forward(fbatch, full, full_cfg)[0], fbatch.labels, mask=fbatch.cand_mask)

    with ad.Tape() as tape:
        out = loss_full()
    g = tape.backward(out)
    worst_full = 0.0
    for p in full.values():
        flat_g = g[p].reshape(-1)
        # favour coordinates the slate actually touches, plus a few random ones
        live = np.flatnonzero(flat_g)
        idx = np.unique(np.concatenate([rng.choice(live, min(6, live.size), replace=False) if live.size else [],
                                        rng.integers(0, flat_g.size, 2)]).astype(int))
        num = sampled_numeric_grad(lambda: loss_full().data, p.data, idx)
        worst_full = max(worst_full, grad_err(flat_g[idx], num))

    elapsed = time.perf_counter() - t0
    ok = not uncovered and max(worst_op, worst_small, worst_full) < 1e-4 and elapsed < 60
    verdict(1, ok, f"{len(cases)} ops worst rel err {worst_op:.1e} ({worst_name}); composite small {worst_small:.1e}, "
                   f"default size {worst_full:.1e}; uncovered {sorted(uncovered)}; {elapsed:.1f}s")


# -- 2. differentiable-sorting fidelity -------------------------------------

def test_criterion_2_sorting_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    row_dev = {1e-4: 0.0, 1.0: 0.0}
    sk_dev = dict(row_dev)
    for _ in range(1000):
        m = int(rng.integers(1, 7))
        s, y = rng.normal(scale=3.0, size=m), random_labels(rng, m)
        loss = float(neural_ndcg_loss(ad.Tensor(s), y, tau=1e-4).data)
        worst = max(worst, abs(-loss - brute_ndcg(s, list(y))))
        for tau in row_dev:
            P = neural_sort(ad.Tensor(s), tau)
            row_dev[tau] = max(row_dev[tau], np.abs(P.data.sum(axis=1) - 1).max())
            S = sinkhorn(P, 30).data
            sk_dev[tau] = max(sk_dev[tau], np.abs(S.sum(axis=0) - 1).max(), np.abs(S.sum(axis=1) - 1).max())
    elapsed = time.perf_counter() - t0
    # gated at the criterion's tau; tau = 1 is reported only: 30 sweeps converge slowly
    # when NeuralSort rows are nearly degenerate
    ok = worst < 1e-3 and max(row_dev.values()) <= 1e-9 and sk_dev[1e-4] <= 1e-6 and elapsed < 60
    verdict(2, ok, f"max |loss - nDCG| {worst:.1e}; NeuralSort row dev {max(row_dev.values()):.1e}; "
                   f"Sinkhorn row/col dev {sk_dev[1e-4]:.1e} at tau=1e-4 ({sk_dev[1.0]:.1e} at tau=1, "
                   f"not gated); {elapsed:.1f}s")


# -- 3. metric oracle equivalence -------------------------------------------

def test_criterion_3_metric_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = r1_mismatches = single = 0
    for i in range(10_000):
        m = int(rng.integers(1, 13))
        # integer scores half the time so the tie rule is exercised
        s = rng.integers(0, 4, size=m).astype(float) if i % 2 else rng.normal(size=m)
        if i % 3:
            y = np.zeros(m, dtype=int)
            y[rng.integers(m)] = 1
        else:
            y = (rng.random(m) < 0.4).astype(int)
            if not y.any():
                y[rng.integers(m)] = 1
        for k in (1, 3, 5):
            mismatches += ndcg_at_k(s, y, k) != brute_ndcg(s, list(y), k)
            mismatches += recall_at_k(s, y, k) != brute_recall(s, list(y), k)
        if y.sum() == 1:
            single += 1
            r1_mismatches += recall_at_k(s, y, 1) != ndcg_at_k(s, y, 1)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and r1_mismatches == 0 and elapsed < 60
    verdict(3, ok, f"{mismatches} metric mismatches over 60000 checks; Recall@1 != nDCG@1 on "
                   f"{r1_mismatches}/{single} single-positive slates; {elapsed:.1f}s")


# -- 4. and 5. ablation on the full synthetic dataset -------------------------

def _ablation(sim: SimConfig, variants):
    cfg = load_run_config(CONFIGS / "acceptance.json")
    ds = generate(replace(sim, seed=cfg.sim.seed))
    tr, va, te = split_dataset(ds.slates, cfg.sim)
    return run_ablation(tr, va, te, cfg.model, cfg.train, seeds=cfg.ablation.seeds, variants=variants), len(ds.slates)


def test_criterion_4_ablation_ordering():
    t0 = time.perf_counter()
    cfg = load_run_config(CONFIGS / "acceptance.json")
    table, n = _ablation(cfg.sim, ("full", "pointwise", "no_pos_enc", "no_urgency"))
    elapsed = time.perf_counter() - t0
    nd = {v: table.rows[v]["ndcg@1"] for v in table.rows}
    ok = (nd["full"] - nd["no_urgency"] >= 0.05 and nd["full"] >= nd["no_pos_enc"]
          and nd["full"] >= nd["pointwise"] - 0.002 and elapsed < 30 * 60)
    per_seed = {v: [round(r["ndcg@1"], 4) for r in rows] for v, rows in table.per_seed.items()}
    verdict(4, ok, f"test nDCG@1 over seeds {list(table.seeds)} on {n} slates: "
                   + ", ".join(f"{v} {x:.4f}" for v, x in nd.items())
                   + f"; full - no_urgency {nd['full'] - nd['no_urgency']:+.4f}; per seed {json.dumps(per_seed)}; "
                   f"{elapsed / 60:.1f} min")


def test_criterion_5_urgency_blind_control():
    cfg = load_run_config(CONFIGS / "acceptance.json")
    blind = replace(cfg.sim, beta_power=(0.0, 0.0), beta_casual=(0.0, 0.0))
    table, n = _ablation(blind, ("full", "no_urgency"))
    full = np.array([r["ndcg@1"] for r in table.per_seed["full"]])
    base = np.array([r["ndcg@1"] for r in table.per_seed["no_urgency"]])
    gap = full.mean() - base.mean()
    # noise band: two pooled run-to-run standard deviations across seeds
    band = 2.0 * np.sqrt((full.var(ddof=1) + base.var(ddof=1)) / 2.0)
    verdict(5, abs(gap) <= band, f"beta=0, {n} slates: full {full.mean():.4f} vs no_urgency {base.mean():.4f}, "
                                 f"gap {gap:+.4f}, noise band {band:.4f} (per seed {full.round(4).tolist()} / "
                                 f"{base.round(4).tolist()})")


# -- 6. memorization --------------------------------------------------------

def test_criterion_6_memorization():
    ds = generate(SimConfig(seed=0, n_users=300))
    pick = np.random.default_rng(6).choice(len(ds.slates), 32, replace=False)
    slates = [ds.slates[i] for i in sorted(pick)]
    # mini-batches of 8: with one full-batch step per epoch the listwise loss saturates on a
    # few exception slates (positive ranked second, near-zero gradient) before they are fitted
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=200, patience=200)
    res = train(slates, slates, ModelConfig(), cfg)
    score = evaluate_arrays(encode_all(slates, ModelConfig()), res.params, ModelConfig()).ndcg[1]
    verdict(6, score == 1.0, f"training nDCG@1 {score:.4f} after {len(res.log)} epochs "
                             f"(first reached at epoch {res.best_epoch})")


# -- 7. determinism ---------------------------------------------------------

def _run_pipeline(out: Path, config: Path) -> dict[str, bytes]:
    data, run = out / "data", out / "run"
    assert main(["generate", "--config", str(config), "--out", str(data)]) == EXIT_OK
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(run)]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data / "test.jsonl"),
                 "--out", str(out / "eval")]) == EXIT_OK
    files = [data / f for f in ("train.jsonl", "val.jsonl", "test.jsonl", "ground_truth.json", "manifest.json")]
    files += [run / "train_log.jsonl", run / "checkpoint.bin", out / "eval" / "metrics.json"]
    return {f.relative_to(out).as_posix(): f.read_bytes() for f in files}


def test_criterion_7_determinism(tmp_path, capsys):
    config = CONFIGS / "small.json"
    a, b = _run_pipeline(tmp_path / "a", config), _run_pipeline(tmp_path / "b", config)
    capsys.readouterr()
    differing = sorted(k for k in a if a[k] != b[k])

    ds = generate(SimConfig(seed=7, n_users=300))
    tr, va, _ = split_dataset(ds.slates, SimConfig(seed=7, n_users=300))
    base = TrainConfig(learning_rate=1e-3, batch_size=64, max_epochs=1)
    one = train(tr, va[:50], ModelConfig(), base, max_steps=10)
    four = train(tr, va[:50], ModelConfig(), replace(base, shards=4), max_steps=10)
    drift = max(float(np.abs(one.final_params[k].data - four.final_params[k].data).max()) for k in one.final_params)
    ok = not differing and drift < 1e-10 and one.steps == four.steps == 10
    verdict(7, ok, f"{len(a)} artifacts compared, differing: {differing or 'none'}; "
                   f"shards 1 vs 4 max parameter difference after {one.steps} steps {drift:.1e}")


# -- 8. masking and equivariance --------------------------------------------

def test_criterion_8_masking_and_equivariance():
    rng = np.random.default_rng(8)
    cfg = ModelConfig()
    enc = cfg.encoding
    params = init_params(cfg, 8)
    slates = [random_slate(rng, n_hist=int(rng.integers(0, 12)), m=int(rng.integers(1, 11))) for _ in range(1000)]
    items = [slate_arrays(s, enc) for s in slates]
    masking_failures = 0
    for start in range(0, len(items), 100):
        batch = collate(items[start:start + 100], h_pad=enc.h_max)
        ref = forward(batch, params, cfg)[0].data
        pad = ~batch.hist_mask
        batch.hist_num[pad] = rng.normal(size=(pad.sum(), batch.hist_num.shape[-1])) * 100
        batch.hist_cat[pad] = rng.integers(0, 3, size=(pad.sum(), batch.hist_cat.shape[-1]))
        batch.hist_bucket[pad] = rng.integers(0, enc.n_buckets, size=pad.sum())
        batch.hist_dt[pad] = rng.uniform(0, 20, size=pad.sum())
        got = forward(batch, params, cfg)[0].data
        masking_failures += int((~(got == ref)[batch.cand_mask.astype(bool)]).sum())

    perms = [rng.permutation(s.n_cand) for s in items]
    permuted = [replace(s, cand_cat=s.cand_cat[p], cand_num=s.cand_num[p], labels=s.labels[p])
                for s, p in zip(items, perms)]
    base, moved = score_arrays(items, params, cfg), score_arrays(permuted, params, cfg)
    equivariance_failures = sum(not np.array_equal(x[p], y) for x, y, p in zip(base, moved, perms))
    ok = masking_failures == 0 and equivariance_failures == 0
    verdict(8, ok, f"1000 slates: {masking_failures} scores changed by padded-history mutation; "
                   f"{equivariance_failures} slates not permutation-equivariant (bitwise)")
