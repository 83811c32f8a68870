import numpy as np
import pytest

from pits import data as D
from pits import finetune as F
from pits import model as M
from pits.core_math import RngState

L, H, P = 48, 12, 12


@pytest.fixture(scope="module")
def sine():
    train, _, _ = D.gen_shift_toy(T=600, test_grid=[D.ShiftPoint(0.5, 1.0, 0, 0)], rng=RngState(0))
    tr = F.forecast_data(D.make_forecast_windows(train, "train", L, H, 2), P, P)
    te = F.forecast_data(D.make_forecast_windows(train, "test", L, H), P, P)
    return tr, te


def _model(N=4, stride=P, seed=0, kind="mlp"):
    p = M.init_params(kind, P, 16, N, RngState(seed), stride=stride)
    return M.attach_head(p, M.HeadSpec("forecast", H), RngState(seed))


def test_schedule_default_ratio():
    s = F.FinetuneSchedule(probe_epochs=10)
    assert (s.probe_epochs, s.full_epochs) == (10, 20)
    assert F.FinetuneSchedule(5, 5).full_epochs == 5


def test_probe_freezes_encoder_and_beats_mean(sine):
    tr, te = sine
    p = _model()
    probed, hist = F.linear_probe(p, tr, F.FinetuneSchedule(20, lr_probe=1e-2), RngState(0))
    for k in p.encoder_names:
        assert p[k].tobytes() == probed[k].tobytes()
    assert not np.array_equal(p["head.W"], probed["head.W"])
    mse = F.evaluate_forecast(probed, te).mse
    # constant predictor at each window's input mean
    mean_pred = np.broadcast_to(te.stats.mean[:, None, :], te.raw_targets.shape)
    baseline = F.forecast_metrics(mean_pred, te.raw_targets).mse
    assert mse < baseline


def test_zero_epochs_is_identity(sine):
    tr, _ = sine
    p = _model()
    out, hist = F.finetune(p, tr, F.FinetuneSchedule(0, 0), RngState(0))
    assert hist == {"probe": [], "full": []}
    assert all(p[k].tobytes() == out[k].tobytes() for k in p.tensors)


def test_full_finetune_not_worse_than_probe(sine):
    tr, _ = sine
    sched = F.FinetuneSchedule(10, lr_probe=1e-2, lr_full=1e-3, head_dropout=0.0)
    _, hist = F.finetune(_model(), tr, sched, RngState(0))
    assert hist["full"][-1] <= hist["probe"][-1]


def test_head_patch_mismatch(sine):
    tr, _ = sine
    with pytest.raises(M.ModelError, match="N=4.*N=5"):
        F.linear_probe(_model(N=5), tr, F.FinetuneSchedule(1), RngState(0))


def test_supervised_overlap_beats_naive():
    train, _, _ = D.gen_shift_toy(T=600, test_grid=[D.ShiftPoint(0.5, 1.0, 0, 0)], rng=RngState(0))
    stride = P // 2
    tr = F.forecast_data(D.make_forecast_windows(train, "train", L, H, 2), P, stride)
    te = F.forecast_data(D.make_forecast_windows(train, "test", L, H), P, stride)
    assert tr.patches.shape[2] == D.num_patches(L, P, stride) == 7

    def run():
        p = _model(N=7, stride=stride)
        return F.train_supervised(p, tr, 20, 3e-3, 32, RngState(1))[0]

    a, b = run(), run()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a.tensors)
    wins = D.make_forecast_windows(train, "test", L, H)
    naive = np.stack([np.repeat(w.input[-1:], H, axis=0) for w in wins])
    naive_mse = F.forecast_metrics(naive, te.raw_targets).mse
    assert F.evaluate_forecast(a, te).mse < naive_mse


def test_forecast_metric_fixture():
    m = F.forecast_metrics(np.array([[[1.0], [2.0]]]), np.zeros((1, 2, 1)))
    assert (m.mse, m.mae) == (2.5, 1.5)
    assert m.mse_per_step == [1.0, 4.0]
    z = F.forecast_metrics(np.ones((2, 3, 2)), np.ones((2, 3, 2)))
    assert (z.mse, z.mae) == (0.0, 0.0)


def test_forecast_metrics_match_loop_oracle():
    g = RngState(3).stream("m")
    pred, tgt = g.normal(size=(5, 4, 2)), g.normal(size=(5, 4, 2))
    se = ae = 0.0
    n = 0
    for i in range(5):
        for h in range(4):
            for c in range(2):
                d = pred[i, h, c] - tgt[i, h, c]
                se += d * d
                ae += abs(d)
                n += 1
    m = F.forecast_metrics(pred, tgt)
    assert m.mse == pytest.approx(se / n, rel=1e-15) and m.mae == pytest.approx(ae / n, rel=1e-15)


def test_evaluate_forecast_scale_consistency(sine):
    tr, _ = sine
    p = F.linear_probe(_model(), tr, F.FinetuneSchedule(3, lr_probe=1e-2), RngState(0))[0]
    train, _, _ = D.gen_shift_toy(T=600, test_grid=[D.ShiftPoint(0.5, 1.0, 0, 0)], rng=RngState(0))
    base = D.make_forecast_windows(train, "test", L, H)
    alpha = 3.7
    scaled = [D.ForecastWindow(w.input * alpha, w.target * alpha, w.origin) for w in base]
    m1 = F.evaluate_forecast(p, F.forecast_data(base, P, P))
    m2 = F.evaluate_forecast(p, F.forecast_data(scaled, P, P))
    assert m2.mse == pytest.approx(alpha ** 2 * m1.mse, rel=1e-9)
    assert m2.mae == pytest.approx(alpha * m1.mae, rel=1e-9)
    again = F.evaluate_forecast(p, F.forecast_data(base, P, P))
    assert again == m1


def test_confusion_fixture():
    m = F.class_metrics(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    assert m.accuracy == 0.75
    assert m.precision == pytest.approx(5 / 6, abs=1e-15)
    assert m.recall == 0.75
    assert m.per_class["confusion"] == [[1, 1], [0, 2]]


def _brute_class(pred, true, K):
    precs, recs, f1s = [], [], []
    for k in range(K):
        tp = sum(1 for p, t in zip(pred, true) if p == k and t == k)
        pp = sum(1 for p in pred if p == k)
        ap = sum(1 for t in true if t == k)
        pr = tp / pp if pp else 0.0
        rc = tp / ap if ap else 0.0
        precs.append(pr)
        recs.append(rc)
        f1s.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
    acc = sum(1 for p, t in zip(pred, true) if p == t) / len(true)
    return acc, sum(precs) / K, sum(recs) / K, sum(f1s) / K


@pytest.mark.parametrize("pred, true, K", [
    ([0, 1, 2, 2, 1], [0, 2, 2, 1, 1], 3),
    ([1, 1, 1, 1, 1], [0, 1, 0, 1, 0], 2),
    ([3, 0, 2, 1, 0], [3, 0, 2, 1, 0], 4),
])
def test_class_metrics_match_loop_oracle(pred, true, K):
    m = F.class_metrics(np.array(pred), np.array(true), K)
    assert (m.accuracy, m.precision, m.recall, m.f1) == pytest.approx(_brute_class(pred, true, K), abs=1e-15)


def test_single_class_test_set():
    m = F.class_metrics(np.array([0, 0, 1]), np.array([0, 0, 0]), 2)
    assert m.accuracy == pytest.approx(2 / 3)
    assert m.recall == pytest.approx((2 / 3 + 0) / 2)
    assert m.per_class["precision"][1] == 0.0


def test_unseen_label_rejected():
    with pytest.raises(ValueError, match="label"):
        F.class_metrics(np.array([0, 1]), np.array([0, 3]), 2)


def test_classification_probe_runs_and_freezes():
    ds = D.gen_class_toy(3, 6, 32, RngState(0))
    series = ds.values.T[:, :, None]
    cd = F.class_data(series, ds.labels, 8, 8)
    p = M.attach_head(M.init_params("mlp", 8, 8, 4, RngState(0)), M.HeadSpec("classify", 3), RngState(0))
    out, hist = F.linear_probe(p, cd, F.FinetuneSchedule(30, lr_probe=1e-2), RngState(0))
    assert hist[-1] < hist[0]
    assert all(p[k].tobytes() == out[k].tobytes() for k in p.encoder_names)
    m = F.evaluate_classification(out, cd)
    assert 0.0 <= m.accuracy <= 1.0 and 0.0 <= m.f1 <= 1.0


def test_transfer_pipeline(tmp_path, sine):
    tr, te = sine
    enc = M.init_params("mlp", P, 16, 4, RngState(2))
    M.save_params(enc, tmp_path / "enc.pits")
    p = M.transfer(M.load_params(tmp_path / "enc.pits", expect={"P": P}), M.HeadSpec("forecast", H), RngState(2))
    out, _ = F.finetune(p, tr, F.FinetuneSchedule(1, lr_probe=1e-2, lr_full=1e-3), RngState(2))
    assert np.isfinite(F.evaluate_forecast(out, te).mse)
