"""Acceptance suite: one or more tests per criterion, summarised at the end of the run.

The training-based criteria (6-9) share one seeded synthetic dataset and a
cache of trained variants, so each network is trained only once per session.
"""

import time
import zlib
from dataclasses import replace

import numpy as np
import pytest

from cstn import tensor as T
from cstn.data import GridSpec, NormStats, TripRecord, build_od_tensor, normalize, transpose_od
from cstn.metrics import od_metrics
from cstn.model import CSTN, CSTNConfig, convlstm_step, cstn_forward, init_params, param_shapes
from cstn.optim import ParamGroup
from cstn.pipeline import baseline_counts, predict_counts
from cstn.synth import SynthParams, synth_generate
from cstn.trainer import TrainConfig, checkpoint_bytes, load_checkpoint, save_checkpoint, train
from oracles import count_od_dict, fd_grad, rel_err, scalar_peephole_lstm
from test_model import load_scalar, lstm_scalar_params, scalar_cfg, window, zeros
from test_tensor import GRAD_CASES, check_grad

criterion = pytest.mark.criterion
T0 = np.datetime64("2014-03-03T08:00")

# ------------------------------------------------------------ 1. gradients


@criterion(1, "gradient suite: every op and the end-to-end loss match finite differences")
def test_every_op_gradient():
    t0 = time.perf_counter()
    for name, (build, shapes) in GRAD_CASES.items():
        r = np.random.default_rng(zlib.crc32(name.encode()))
        arrays = [r.normal(size=s) for s in shapes]
        if name == "relu":
            arrays[0] = np.where(np.abs(arrays[0]) < 0.05, 0.5, arrays[0])
        check_grad(build, *arrays)
    assert time.perf_counter() - t0 < 60


@criterion(1, "gradient suite: every op and the end-to-end loss match finite differences")
def test_end_to_end_loss_gradient():
    cfg = CSTNConfig(H=3, W=2, n=2, K=2, lsc_channels=4, fuse_channels=4, lstm_channels=4,
                     c_lt=6, c_s=4, meteo_hidden=(8, 4), meteo_embed=3)
    r = np.random.default_rng(0)
    # random biases and peepholes too, so no path is switched off at zero
    P = ParamGroup({k: r.normal(0, 0.4, s) for k, s in param_shapes(cfg).items()})
    model = CSTN(cfg, P)
    X = r.uniform(-1, 1, (2, cfg.n, cfg.N, cfg.H, cfg.W))
    M = r.uniform(0, 1, (2, cfg.n, cfg.meteo_dim))
    Y = r.uniform(-1, 1, (2, 1, cfg.N, cfg.H, cfg.W))
    t0 = time.perf_counter()
    grads = T.backward(model.loss(X, M, Y), P)
    worst = max(rel_err(grads[k], fd_grad(lambda: float(model.loss(X, M, Y).data), P[k].data))
                for k in P)
    assert worst < 1e-4
    assert time.perf_counter() - t0 < 60


# ------------------------------------------------------------- 2. ConvLSTM


@criterion(2, "ConvLSTM step equals a scalar peephole LSTM within 1e-12")
def test_convlstm_scalar_oracle():
    cfg = scalar_cfg()
    r = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        sp = lstm_scalar_params(r)
        p = zeros(cfg)
        load_scalar(p, sp)
        x, h0, c0 = r.normal(size=3)
        h, c = convlstm_step(np.full((1, 1, 1), x), (T.Tensor(np.full((1, 1, 1), h0)),
                                                    T.Tensor(np.full((1, 1, 1), c0))), p)
        eh, ec = scalar_peephole_lstm(x, h0, c0, sp)
        worst = max(worst, abs(h.data.item() - eh), abs(c.data.item() - ec))
    assert worst < 1e-12


# ---------------------------------------------------------- 3. NYC shapes


@criterion(3, "feature-map shapes at the 15x5 defaults; similarity columns sum to 1")
def test_nyc_shape_ledger():
    cfg = CSTNConfig(15, 5)
    assert (cfg.N, cfg.K, cfg.c_lt, cfg.c_s) == (75, 3, 75, 64)
    X, M = window(cfg, seed=3)
    trace = {}
    out = cstn_forward(X, M, init_params(cfg, seed=3), cfg, trace)
    expected = {
        "F_o": (16, 15, 5), "F_d": (16, 15, 5), "F_l": (32, 15, 5), "F_m": (8, 15, 5),
        "F_lm": (32, 15, 5), "h": (32, 15, 5), "c": (32, 15, 5), "F_lt": (75, 15, 5),
        "F_s": (64, 75), "S": (75, 75), "F_g": (75, 15, 5), "F_ltg": (150, 15, 5),
    }
    for name, shape in expected.items():
        assert trace[name].shape[-len(shape):] == shape, name
    assert out.shape == (75, 15, 5)
    assert np.max(np.abs(trace["S"].data.sum(axis=0) - 1.0)) < 1e-9


# ------------------------------------------------------- 4. data invariants


@criterion(4, "transpose involution, OD count conservation, normalisation roundtrip")
def test_transpose_involution():
    r = np.random.default_rng(4)
    for H, W in ((15, 5), (4, 3), (1, 7)):
        od = r.integers(0, 50, (H * W, H, W)).astype(np.float64)
        np.testing.assert_array_equal(transpose_od(transpose_od(od)), od)


@criterion(4, "transpose involution, OD count conservation, normalisation roundtrip")
def test_od_conservation_10k_trips():
    g = GridSpec(40.0, 41.0, -74.0, -73.0, 3, 4)
    r = np.random.default_rng(10_000)
    n = 10_000
    pts = np.column_stack([r.uniform(-74.2, -72.8, n), r.uniform(39.8, 41.2, n),
                           r.uniform(-74.2, -72.8, n), r.uniform(39.8, 41.2, n)])
    X = build_od_tensor([TripRecord(T0, *p) for p in pts], g)
    expect = np.zeros_like(X)
    for key, c in count_od_dict(pts, g).items():
        expect[key] = c
    np.testing.assert_array_equal(X, expect)
    assert X.sum() == sum(count_od_dict(pts, g).values())


@criterion(4, "transpose involution, OD count conservation, normalisation roundtrip")
def test_normalize_roundtrip():
    r = np.random.default_rng(5)
    od = r.integers(0, 300, (20, 12, 4, 3)).astype(np.float64)
    stats = NormStats(0.0, float(od.max()))
    back = normalize(normalize(od, stats), stats, "inverse")
    assert np.max(np.abs(back - od)) < 1e-9


# ---------------------------------------------------------------- 5. metrics


@criterion(5, "metric oracle on the hand instance; fully filtered input is empty")
def test_metric_hand_instance():
    m = od_metrics(np.array([6.0, 10.0]), np.array([5.0, 8.0]))
    assert abs(m.mape - 0.225) < 1e-9
    assert abs(m.rmse - np.sqrt(2.5)) < 1e-9 and round(m.rmse, 4) == 1.5811
    assert m.entries == 2


@criterion(5, "metric oracle on the hand instance; fully filtered input is empty")
def test_metric_all_filtered():
    m = od_metrics(np.array([6.0, 10.0, 0.0]), np.array([4.0, 4.99, 0.0]))
    assert m.empty and m.mape is None and m.rmse is None


# ---------------------------------------------- 6-9. seeded synthetic study

GRID = GridSpec(40.70, 40.80, -74.02, -73.93, 4, 3)
N_IN, TRAIN_INTERVALS, TEST_INTERVALS = 5, 205, 96
SYNTH = SynthParams()
# 1e-3 can saturate the tanh head of the LSC-only variant; 1e-4 underfits in 300 epochs
TRAIN = TrainConfig(epochs=300, base_lr=3e-4, decay_every=200, batch_size=64, seed=0)
BASE = CSTNConfig(4, 3, n=N_IN)
VARIANTS = {
    "full": BASE,
    "lsc": replace(BASE, tec_enabled=False, gcc_enabled=False),
    "lsc_tec": replace(BASE, gcc_enabled=False),
    "no_meteo": replace(BASE, meteo_enabled=False),
}


class Study:
    def __init__(self):
        self.ds = synth_generate(7, GRID, TRAIN_INTERVALS + TEST_INTERVALS, SYNTH, split=TRAIN_INTERVALS)
        self.train_windows = self.ds.windows(N_IN, 1, "train")
        self.test_windows = self.ds.windows(N_IN, 1, "test")
        self.runs = {}

    def run(self, name, tag=""):
        key = name + tag
        if key not in self.runs:
            model = CSTN(VARIANTS[name], seed=0)
            t0 = time.perf_counter()
            ck = train(model, self.train_windows, TRAIN, norm=self.ds.norm)
            elapsed = time.perf_counter() - t0
            preds, gts, _ = predict_counts(model, self.test_windows, self.ds.norm)
            self.runs[key] = (ck, elapsed, od_metrics(preds, gts).mape)
        return self.runs[key]

    def baseline(self, name):
        preds, gts, _ = baseline_counts(name, self.ds, N_IN)
        return od_metrics(preds, gts).mape


@pytest.fixture(scope="session")
def study():
    return Study()


@pytest.mark.slow
@criterion(6, "CSTN overfits the seeded synthetic set: loss < 10% of epoch 0 within 300 epochs")
def test_overfit(study):
    assert len(study.train_windows) == 200 and BASE.N == 12
    ck, elapsed, _ = study.run("full")
    hist = ck.history
    assert len(hist) == 300
    assert min(hist) < 0.1 * hist[0]
    assert elapsed < 15 * 60


@pytest.mark.slow
@criterion(7, "held-out OD-MAPE of CSTN is no worse than HA-Rec and HA-All")
def test_beats_historical_averages(study):
    cstn = study.run("full")[2]
    ha_rec, ha_all = study.baseline("ha_rec"), study.baseline("ha_all")
    print(f"OD-MAPE  CSTN {cstn:.2%}  HA-Rec {ha_rec:.2%}  HA-All {ha_all:.2%}")
    assert cstn <= ha_rec and cstn <= ha_all


@pytest.mark.slow
@criterion(8, "ablations: TEC helps over LSC only; meteorology helps over none (0.5 pt ties)")
def test_tec_improves_on_lsc(study):
    lsc, lsc_tec = study.run("lsc")[2], study.run("lsc_tec")[2]
    print(f"OD-MAPE  LSC {lsc:.2%}  LSC+TEC {lsc_tec:.2%}")
    assert lsc_tec <= lsc + 0.005


@pytest.mark.slow
@criterion(8, "ablations: TEC helps over LSC only; meteorology helps over none (0.5 pt ties)")
def test_meteorology_improves(study):
    on, off = study.run("full")[2], study.run("no_meteo")[2]
    print(f"OD-MAPE  weather {on:.2%}  no weather {off:.2%}")
    assert on <= off + 0.005


@pytest.mark.slow
@criterion(9, "fixed seed gives identical checkpoints; save/load is bitwise exact")
def test_training_determinism(study):
    first = checkpoint_bytes(study.run("full")[0])
    second = checkpoint_bytes(study.run("full", tag="#2")[0])
    assert first == second


@criterion(9, "fixed seed gives identical checkpoints; save/load is bitwise exact")
def test_checkpoint_roundtrip(tmp_path):
    cfg = CSTNConfig(3, 2, n=2, K=2, lsc_channels=4, fuse_channels=4, lstm_channels=4,
                     c_lt=6, c_s=4, meteo_hidden=(8, 4), meteo_embed=3)
    ds = synth_generate(1, GridSpec(40.70, 40.80, -74.02, -73.93, 3, 2), 60, SynthParams(), split=40)
    model = CSTN(cfg, seed=1)
    ck = train(model, ds.windows(2, 1, "train"), TrainConfig(epochs=3, base_lr=1e-3), norm=ds.norm)
    path = tmp_path / "ck.bin"
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    assert checkpoint_bytes(loaded) == path.read_bytes()
    for k in ck.params:
        assert loaded.params[k].data.tobytes() == ck.params[k].data.tobytes()
        assert loaded.params.m[k].tobytes() == ck.params.m[k].tobytes()
        assert loaded.params.v[k].tobytes() == ck.params.v[k].tobytes()


# ------------------------------------------------------- 10. full data


@criterion(10, "optional full-data reproduction on the 2014 NYC corpus")
def test_full_data_reproduction():
    pytest.skip("needs the full 2014 NYC taxi corpus and multi-hour training; run via the CLI")
