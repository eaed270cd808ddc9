import numpy as np
import pytest

from deltalora.analysis import cosine_report, effective_weight, summarize_sweep, sweep_csv
from deltalora.linalg import flat_cosine
from deltalora.trainer import RunResult, train
from deltalora.verify import small_config, small_task


@pytest.fixture(scope="module")
def task():
    return small_task(8)


def fake_result(params, echo):
    return RunResult([(0, 1.0)], [(0, 0.1)], [(1, 0.5)], params, [], echo, 0, 0.0)


def test_untrained_runs_have_unit_cosine(task):
    pre = task.pretrained.target_weights()
    results = {m: train(task, small_config(0, T=0, mode=m)) for m in ("lora", "delta_lora", "ft_qv", "full_ft")}
    report = cosine_report(pre, results)
    assert len(report.rows) == 4 * len(pre)
    for _, _, c in report.rows:
        assert c == pytest.approx(1.0, abs=1e-15)


def test_negated_weight_has_cosine_minus_one():
    W = np.arange(1.0, 7.0).reshape(2, 3)
    report = cosine_report({"w": W}, {"x": fake_result({"w": -W}, {})})
    assert report.rows == [("w", "x", -1.0)]


def test_effective_weight_merges_adapter():
    rng = np.random.default_rng(0)
    W, A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), rng.normal(size=(2, 3))
    params = {"w": W, "w.lora_A": A, "w.lora_B": B}
    np.testing.assert_allclose(effective_weight(params, "w", 4.0), W + 2.0 * A @ B, rtol=0, atol=1e-14)
    assert effective_weight({"w": W}, "w", None) is W


def test_report_is_pure(task):
    res = {"lora": train(task, small_config(0, T=5, mode="lora"))}
    snapshot = {k: v.copy() for k, v in res["lora"].final_params.items()}
    pre = task.pretrained.target_weights()
    a = cosine_report(pre, res, {"seed": 0})
    b = cosine_report(pre, res, {"seed": 0})
    assert a.csv() == b.csv() and a.jsonl() == b.jsonl()
    for k, v in snapshot.items():
        assert np.array_equal(res["lora"].final_params[k], v)


def test_report_matches_live_model(task):
    res = train(task, small_config(0, T=10))
    live = dict(res.per_layer_cosine)
    report = cosine_report(task.pretrained.target_weights(), {"delta_lora": res})
    for layer, _, c in report.rows:
        assert c == pytest.approx(live[layer], abs=1e-12)


def test_zero_lambda_row_equals_lora(task):
    pre = task.pretrained.target_weights()
    report = cosine_report(pre, {
        "lora": train(task, small_config(0, T=10, mode="lora")),
        "delta_lora": train(task, small_config(0, T=10, lam=0.0)),
    })
    by_mode = {}
    for layer, mode, c in report.rows:
        by_mode.setdefault(mode, []).append(c)
    assert by_mode["lora"] == by_mode["delta_lora"]


def test_missing_layer_is_an_error():
    with pytest.raises(ValueError):
        cosine_report({"w": np.ones((2, 2))}, {"x": fake_result({}, {})})


def test_csv_and_jsonl_formats():
    report = cosine_report({"w": np.eye(2)}, {"m": fake_result({"w": np.eye(2)}, {})}, {"seed": 4})
    assert report.csv() == "layer,mode,cosine\r\nw,m,1.0\r\n"
    assert report.jsonl() == '{"cosine":1.0,"layer":"w","mode":"m","seed":4}\n'
    assert report.mean_by_mode() == {"m": 1.0}


def test_summarize_sweep_keeps_order():
    results = [fake_result({}, {"lambda": v}) for v in (2.0, 0.0, 0.5)]
    rows = summarize_sweep(results, "lambda")
    assert [r[0] for r in rows] == [2.0, 0.0, 0.5]
    assert rows[0] == (2.0, 1.0, 0.5)
    assert sweep_csv(rows).splitlines()[0] == "lambda,final_train_loss,final_eval_metric"


def test_cosine_definition():
    a, b = np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]])
    assert flat_cosine(a, b) == pytest.approx(1 / np.sqrt(2), abs=1e-15)
