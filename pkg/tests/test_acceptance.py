"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
The planted-signal criteria (8, 11) follow the protocol registered in the
decisions ledger before any run; their numbers are printed whether or not they pass.
"""

from __future__ import annotations

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from difsr import numcore as nc  # noqa: E402
from difsr.cli import GRAD_DEFAULT, main as cli_main  # noqa: E402
from difsr.dataset import collate, make_batches, prefix_view, split_leave_one_out  # noqa: E402
from difsr.diagnostics import gradient_rigidity_check, rank_profile, witness_rank  # noqa: E402
from difsr.evaluation import batch_ranks, ndcg_at_k, summarize  # noqa: E402
from difsr.model import ModelConfig, forward, init_params, predict_items  # noqa: E402
from difsr.synthetic import (  # noqa: E402
    category_oracle,
    memorization_dataset,
    planted_category_dataset,
    uniform_random_dataset,
    write_files,
)
from difsr.train import Adam, TrainState, fit, train_step  # noqa: E402
from oracles import model_fd_error, op_cases, sort_rank, tiny_config  # noqa: E402

TRIALS = 100
RANK_CFG = ModelConfig(d=32, heads=2, layers=2, max_len=64, dropout=0.0, attributes=[{"name": "position", "dim": 16}])
GRAD_CFG = ModelConfig(**GRAD_DEFAULT)

# pre-registered planted-signal protocol (see the ledger)
PLANTED_BASE = dict(d=32, heads=2, layers=2, max_len=20, dropout=0.1, lr=1e-3, batch_size=256,
                    epochs=3, seed=0, lam=10.0, fusion="add")
PLANTED_ATTRS = [{"name": "position", "dim": 16}, {"name": "category", "dim": 16}]
PLANTED_ARMS = {
    "dif+aap": dict(variant="dif", attributes=PLANTED_ATTRS, aap=True),
    "dif": dict(variant="dif", attributes=PLANTED_ATTRS, aap=False),
    "sasrec_f+aap": dict(variant="sasrec_f", attributes=PLANTED_ATTRS, aap=True),
    "sasrec_f": dict(variant="sasrec_f", attributes=PLANTED_ATTRS, aap=False),
    "sasrec": dict(variant="sasrec", attributes=[], aap=False),
}
# half the pre-registered measured gap, rounded down to 0.01, floored at zero:
# the registered run measured a negative gap, so no positive margin exists
PLANTED_MARGIN = 0.0


def report(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
    print(line, flush=True)


# ---------------------------------------------------------------- 1-3 rank


_rank_cache: dict = {}


def _ranks() -> tuple[list[dict], float]:
    """All three variants profiled once; each criterion re-times its own share."""
    if not _rank_cache:
        t0 = time.perf_counter()
        _rank_cache["rows"] = rank_profile(RANK_CFG, TRIALS, 1e-8)
        _rank_cache["seconds"] = time.perf_counter() - t0
    return _rank_cache["rows"], _rank_cache["seconds"]


def criterion_1():
    rows, dt = _ranks()
    rows = [r for r in rows if r["variant"] in ("sasrec_f", "nova")]
    d_h = RANK_CFG.d // RANK_CFG.heads
    bad = sum(r["rank"] > d_h for r in rows)
    worst = max(r["rank"] for r in rows)
    ok = bad == 0 and len(rows) == TRIALS * 2 * RANK_CFG.layers * RANK_CFG.heads and dt < 60
    return ok, f"early-fusion logit rank <= {d_h}: {bad} violations over {len(rows)} matrices (max {worst}), profile {dt:.1f}s"


def criterion_2():
    t0 = time.perf_counter()
    res = witness_rank(64, 32, 2, [16], 1e-8)
    dt = time.perf_counter() - t0
    return res.rank == 24 and res.expected == 24 and dt < 1.0, f"witness rank {res.rank} (expected 24), {dt * 1000:.0f}ms"


def criterion_3():
    rows, dt = _ranks()
    rows = [r for r in rows if r["variant"] == "dif"]
    per_trial: dict[int, list[int]] = {}
    for r in rows:
        per_trial.setdefault(r["trial"], []).append(r["rank"])
    above = sum(all(x > 16 for x in v) for v in per_trial.values())
    exact = sum(all(x == 24 for x in v) for v in per_trial.values())
    ok = len(per_trial) == TRIALS and above == TRIALS and exact >= 95 and dt < 60
    return ok, f"dif rank > 16 in {above}/{TRIALS} trials, = 24 in {exact}/{TRIALS} (all layers and heads), profile {dt:.1f}s"


# ---------------------------------------------------------------- 4 gradient rigidity

def criterion_4():
    t0 = time.perf_counter()
    sas_ok, nova_attr_ok, nova_item_differs, warnings = 0, 0, 0, 0
    for seed in range(20):
        v = gradient_rigidity_check("sasrec_f", GRAD_CFG, seed=seed, strict=False)
        sas_ok += v["equal"]
        warnings += v["warning"] is not None
        v = gradient_rigidity_check("nova", GRAD_CFG, seed=seed, strict=False)
        pairs = {(p["a"], p["b"]): p for p in v["pairs"]}
        nova_attr_ok += v["equal"]
        nova_item_differs += all(not p["bitwise_equal"] for (a, _), p in pairs.items() if a == "item")
    dt = time.perf_counter() - t0
    ok = sas_ok == 20 and nova_attr_ok == 20 and nova_item_differs >= 19 and dt < 60
    return ok, (f"sasrec_f identical in {sas_ok}/20 seeds ({warnings} reorder warnings); nova attributes identical "
                f"in {nova_attr_ok}/20, item differs in {nova_item_differs}/20; {dt:.1f}s")


# ---------------------------------------------------------------- 5 finite differences

def criterion_5():
    t0 = time.perf_counter()
    errors = {name: nc.finite_difference_check(fn, inputs) for name, (fn, inputs) in op_cases().items()}
    for variant, fusion in [("sasrec", "add"), ("sasrec_f", "add"), ("nova", "add"), ("dif", "add"), ("dif", "gate"), ("dif", "concat")]:
        errors[f"model:{variant}/{fusion}"] = model_fd_error(tiny_config(variant=variant, fusion=fusion))
    worst = max(errors, key=errors.get)
    dt = time.perf_counter() - t0
    return errors[worst] <= 1e-4 and dt < 120, f"{len(errors)} checks, worst relative error {errors[worst]:.2e} ({worst}), {dt:.1f}s"


# ---------------------------------------------------------------- 6 variant reduction

def criterion_6():
    ds = uniform_random_dataset(n_items=50, n_users=40, length=12, seed=6)
    cfg = ModelConfig(variant="dif", d=16, heads=2, layers=2, max_len=10, dropout=0.0,
                      attributes=[{"name": "position", "dim": 8}, {"name": "category", "dim": 8}], seed=7)
    base = cfg.replace(variant="sasrec", attributes=[])
    sizes = {"category": ds.attribute_size("category")}
    dif, sas = init_params(cfg, ds.n_items, sizes), init_params(base, ds.n_items, sizes)
    for name, v in dif.items():
        if name.startswith("attr_emb."):
            v.data[...] = 0.0
    sas["pos_emb"].data[...] = 0.0  # the dif position stream is zeroed too
    equal = 0
    for b in range(10):
        rng = np.random.default_rng([7, b])
        users = rng.choice(ds.n_users, 8, replace=False)
        lengths = rng.integers(1, 12, 8)
        contexts = [ds.sequences[u][:n] for u, n in zip(users, lengths)]
        batch = collate(ds, contexts, [ds.sequences[u][n] for u, n in zip(users, lengths)], cfg.max_len)
        ra, rs = forward(batch, cfg, dif)[0], forward(batch, base, sas)[0]
        equal += bool(np.array_equal(ra.data, rs.data)
                      and np.array_equal(predict_items(ra, dif).data, predict_items(rs, sas).data))
    return equal == 10, f"bitwise-identical outputs on {equal}/10 random padded batches"


# ---------------------------------------------------------------- 7 memorization

def criterion_7():
    t0 = time.perf_counter()
    ds = memorization_dataset(n_sequences=64, length=8)
    view = prefix_view(ds)
    cfg = ModelConfig(variant="dif", d=32, heads=2, layers=2, max_len=8, dropout=0.1, lr=5e-3, batch_size=64, aap=False,
                      attributes=[{"name": "position", "dim": 16}, {"name": "category", "dim": 16}], seed=0)
    params = init_params(cfg, ds.n_items, {"category": ds.attribute_size("category")})
    state = TrainState(optimizer=Adam(), rng=np.random.default_rng([cfg.seed, 1]))
    full = next(make_batches(view, cfg.max_len, len(view), shuffle=False))

    def accuracy():
        with nc.no_grad():
            logits = predict_items(forward(full, cfg, params)[0], params).data
        return float(np.mean(np.argmax(logits, axis=1) == full.targets))

    acc, reached, epoch = 0.0, None, 0
    while state.step < 500 and reached is None:
        for batch in make_batches(view, cfg.max_len, cfg.batch_size, cfg.seed, epoch):
            train_step(batch, cfg, params, state)
            if state.step % 25 == 0:
                acc = accuracy()
                if acc >= 0.95:
                    reached = state.step
                    break
            if state.step >= 500:
                break
        epoch += 1
    dt = time.perf_counter() - t0
    ok = reached is not None and dt < 120
    return ok, f"training next-item accuracy {acc:.3f} at step {state.step} (>= 0.95 first at {reached}), {dt:.1f}s"


# ---------------------------------------------------------------- 8, 11 planted signal

_planted: dict = {}


def _planted_signal():
    if "signal" not in _planted:
        sig = planted_category_dataset(n_items=1000, n_categories=20, n_users=2000, length=20, seed=0)
        _planted["signal"] = sig
        _planted["split"] = split_leave_one_out(sig.dataset)
    return _planted["signal"], _planted["split"]


def _planted_run(arm: str) -> dict:
    if arm not in _planted:
        sig, sp = _planted_signal()
        cfg = ModelConfig(**PLANTED_BASE, **PLANTED_ARMS[arm])
        t0 = time.perf_counter()
        params, state, reports = fit(sig.dataset, cfg, sp.train, sp.valid)
        from difsr.evaluation import evaluate

        test = evaluate(params, cfg, sp.test)
        _planted[arm] = {
            "test_recall@10": test["recall@10"],
            "test_ndcg@10": test["ndcg@10"],
            "valid_recall@10": [round(r["recall@10"], 4) for r in reports],
            "best_epoch": state.best_epoch,
            "seconds": time.perf_counter() - t0,
        }
    return _planted[arm]


def criterion_8():
    sig, sp = _planted_signal()
    oracle = category_oracle(sig, sp.test, ks=(10,))
    dif, sas = _planted_run("dif+aap"), _planted_run("sasrec")
    gap = dif["test_recall@10"] - sas["test_recall@10"]
    secs = dif["seconds"] + sas["seconds"]
    ok = gap > PLANTED_MARGIN and secs < 600
    return ok, (f"test Recall@10 dif+aap {dif['test_recall@10']:.4f} vs sasrec {sas['test_recall@10']:.4f} "
                f"(gap {gap:+.4f}, required > {PLANTED_MARGIN:.2f}); category oracle {oracle['recall@10']:.4f}, "
                f"Bayes ceiling {oracle['bayes_recall@10']:.4f}; {secs:.0f}s")


def criterion_11():
    rows = {arm: _planted_run(arm) for arm in ("dif+aap", "dif", "sasrec_f+aap", "sasrec_f")}
    table = "; ".join(f"{arm} {r['test_recall@10']:.4f}" for arm, r in rows.items())
    with_aap = rows["dif+aap"]["test_recall@10"] > rows["sasrec_f+aap"]["test_recall@10"]
    without = rows["dif"]["test_recall@10"] > rows["sasrec_f"]["test_recall@10"]
    return with_aap and without, f"DIF on > DIF off with AAP: {with_aap}, without AAP: {without} | {table}"


# ---------------------------------------------------------------- 9 metrics

def criterion_9():
    r = np.random.default_rng(9)
    mismatches = 0
    for _ in range(100):
        n = int(r.integers(20, 80))
        scores = np.round(r.standard_normal(n), 1)
        target = int(r.integers(1, n))
        seen = [int(x) for x in r.integers(1, n, 6) if x != target]
        rank = batch_ranks(scores[None], np.array([target]), [seen])[0]
        oracle = sort_rank(scores, target, seen)
        got = summarize(np.array([rank]), [10, 20])
        ref = {f"recall@{k}": float(oracle <= k) for k in (10, 20)}
        ref.update({f"ndcg@{k}": (1 / math.log2(oracle + 1) if oracle <= k else 0.0) for k in (10, 20)})
        mismatches += got != ref
    spots = ndcg_at_k(1, 10) == 1.0 and ndcg_at_k(3, 10) == 0.5
    return mismatches == 0 and spots, f"{100 - mismatches}/100 vectors equal the sort oracle exactly; NDCG spots exact: {spots}"


# ---------------------------------------------------------------- 10 determinism

def criterion_10(tmp: Path):
    write_files(uniform_random_dataset(n_items=80, n_users=120, length=10, seed=3), tmp / "i.tsv", tmp / "a.jsonl")
    cli_main(["prepare", "--interactions", str(tmp / "i.tsv"), "--attributes", str(tmp / "a.jsonl"), "--out", str(tmp / "data")])
    cfg = {"variant": "dif", "d": 16, "heads": 2, "layers": 2, "max_len": 10, "dropout": 0.2, "epochs": 2,
           "batch_size": 128, "attributes": [{"name": "category", "dim": 8}], "seed": 11}
    (tmp / "c.json").write_text(json.dumps(cfg))
    codes = [cli_main(["train", "--config", str(tmp / "c.json"), "--data", str(tmp / "data"), "--out", str(tmp / run)])
             for run in ("r1", "r2")]
    files = sorted(p.name for p in (tmp / "r1").iterdir())
    same = [f for f in files if (tmp / "r1" / f).read_bytes() == (tmp / "r2" / f).read_bytes()]
    ok = codes == [0, 0] and same == files and {"best.bin", "last.bin", "eval_reports.jsonl"} <= set(files)
    return ok, f"{len(same)}/{len(files)} output files byte-identical across two runs ({', '.join(files)})"


# ---------------------------------------------------------------- pytest wiring

def _check(capsys, number, fn, *args):
    passed, detail = fn(*args)
    capsys.readouterr()
    with capsys.disabled():
        report(number, passed, detail)
    assert passed, detail


def test_criterion_01_rank_ceiling(capsys):
    _check(capsys, 1, criterion_1)


def test_criterion_02_witness_rank(capsys):
    _check(capsys, 2, criterion_2)


def test_criterion_03_generic_excess_rank(capsys):
    _check(capsys, 3, criterion_3)


def test_criterion_04_gradient_rigidity(capsys):
    _check(capsys, 4, criterion_4)


def test_criterion_05_finite_differences(capsys):
    _check(capsys, 5, criterion_5)


def test_criterion_06_variant_reduction(capsys):
    _check(capsys, 6, criterion_6)


def test_criterion_07_memorization(capsys):
    _check(capsys, 7, criterion_7)


def test_criterion_08_planted_signal(capsys):
    _check(capsys, 8, criterion_8)


def test_criterion_09_metric_oracle(capsys):
    _check(capsys, 9, criterion_9)


def test_criterion_10_determinism(tmp_path, capsys):
    _check(capsys, 10, criterion_10, tmp_path)


def test_criterion_11_ablation(capsys):
    _check(capsys, 11, criterion_11)


if __name__ == "__main__":
    import tempfile

    results = []
    for n, fn in [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5),
                  (6, criterion_6), (7, criterion_7), (8, criterion_8), (9, criterion_9)]:
        results.append(fn())
        report(n, *results[-1])
    with tempfile.TemporaryDirectory() as d:
        import contextlib
        import io

        with contextlib.redirect_stdout(io.StringIO()):
            results.append(criterion_10(Path(d)))
        report(10, *results[-1])
    results.append(criterion_11())
    report(11, *results[-1])
    sys.exit(0 if all(ok for ok, _ in results) else 1)
