import math

import numpy as np
import pytest

from fanav.errors import ConfigError, NumericError
from fanav.data import (
    EncoderProfile,
    OfflineDataset,
    TransitionBlock,
)
from fanav.nets import load_checkpoint
from fanav.trainers import (
    METHODS,
    FailureAwareIQL,
    TrainerConfig,
    train,
)

PROFILE = EncoderProfile(beam_count=12, range_max=30.0, v_max=0.5,
                         omega_max=math.pi / 2, d_norm=11.3)
DIM = PROFILE.dim
SCALE = np.array([0.5, math.pi / 2])


def synthetic_dataset(n_traj=12, traj_len=18, seed=0,
                      col_fraction=0.25) -> OfflineDataset:
    """Hand-built dataset with the geometry the value-shaping claim needs.

    Success trajectories cruise in open space (large scan readings) and end
    with the success reward; collision trajectories close in on an obstacle
    (scan minima shrinking below the robot radius) and end with the
    collision penalty.
    """
    rng = np.random.default_rng(seed)
    rows = {True: [], False: []}  # keyed by is_collision
    for tid in range(n_traj):
        is_col = tid < n_traj * col_fraction
        d0 = rng.uniform(6.0, 10.0)
        feats = []
        for t in range(traj_len + 1):
            frac = t / traj_len
            scan = rng.uniform(0.5, 1.0, PROFILE.beam_count)
            if is_col:
                # closest obstacle approaches: min scan goes to ~0.1 m
                near = (1 - frac) * 0.8 + frac * (0.1 / PROFILE.range_max)
                scan[int(rng.integers(PROFILE.beam_count))] = near
            d = d0 * (1 - 0.5 * frac)
            f = np.empty(DIM, np.float32)
            f[:PROFILE.beam_count] = scan
            f[PROFILE.beam_count] = d / PROFILE.d_norm
            f[PROFILE.beam_count + 1] = rng.uniform(-0.3, 0.3)
            f[PROFILE.beam_count + 2] = rng.uniform(0, 1)
            f[PROFILE.beam_count + 3] = rng.uniform(-0.5, 0.5)
            feats.append(f)
        for t in range(traj_len):
            done = t == traj_len - 1
            if done:
                r = -20.0 if is_col else 20.0
            else:
                d_now = float(feats[t][PROFILE.beam_count]) * PROFILE.d_norm
                d_nxt = float(feats[t + 1][PROFILE.beam_count]) * PROFILE.d_norm
                r = 2.0 * (d_now - d_nxt)
            a = rng.uniform(-0.9, 0.9, 2) * SCALE
            rows[is_col].append((feats[t], a, r, feats[t + 1], done, tid, t))

    def pack(rs):
        if not rs:
            return TransitionBlock.empty(DIM)
        return TransitionBlock(
            np.stack([r[0] for r in rs]).astype(np.float32),
            np.array([r[1] for r in rs], np.float32),
            np.array([r[2] for r in rs], np.float32),
            np.stack([r[3] for r in rs]).astype(np.float32),
            np.array([r[4] for r in rs], np.uint8),
            np.array([r[5] for r in rs], np.int64),
            np.array([r[6] for r in rs], np.int32))

    return OfflineDataset(pack(rows[False]), pack(rows[True]), PROFILE,
                          {"synthetic": True})


DS = synthetic_dataset()


def quick_config(**kw) -> TrainerConfig:
    base = dict(method="iql_ca", batch_size=64, hidden=(32, 32),
                total_steps=300, epoch_steps=100, eval_every=100, seed=1,
                rho=0.1)
    base.update(kw)
    return TrainerConfig(**base)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainerConfig(method="dqn")
    with pytest.raises(ConfigError):
        TrainerConfig(expectile=1.0)
    with pytest.raises(ConfigError):
        TrainerConfig(max_weight=0.5)
    with pytest.raises(ConfigError):
        TrainerConfig(rho=1.0)
    with pytest.raises(ConfigError):
        TrainerConfig(dtype="float16")


def test_config_roundtrip():
    cfg = quick_config(hidden=(48, 24))
    again = TrainerConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_ca_requires_collision_partition():
    empty_col = OfflineDataset(DS.exp, TransitionBlock.empty(DIM), PROFILE)
    with pytest.raises(ConfigError, match="collision"):
        train(empty_col, quick_config(total_steps=5))


# ---------------------------------------------------------------------------
# training mechanics
# ---------------------------------------------------------------------------

def test_all_methods_run_and_report():
    for method in METHODS:
        res = train(DS, quick_config(method=method, total_steps=120))
        assert len(res.report.rows) == 2  # 100-step epochs + final partial
        assert res.report.final_digest
        last = res.report.rows[-1]
        assert math.isfinite(last.loss_policy)
        if method != "bc":
            assert math.isfinite(last.loss_value)
            assert math.isfinite(last.loss_critic)


def test_seed_determinism_across_runs():
    a = train(DS, quick_config(total_steps=150))
    b = train(DS, quick_config(total_steps=150))
    assert a.report.final_digest == b.report.final_digest
    assert np.array_equal(a.policy.mean_net.theta, b.policy.mean_net.theta)
    assert np.array_equal(a.value_net.theta, b.value_net.theta)
    c = train(DS, quick_config(total_steps=150, seed=2))
    assert c.report.final_digest != a.report.final_digest


def test_degenerate_rho_collapses_to_so():
    """iql_ca with rho = 0 is bitwise identical to iql_so, step by step."""
    ca = train(DS, quick_config(method="iql_ca", rho=0.0, total_steps=500),
               trace_params=True)
    so = train(DS, quick_config(method="iql_so", rho=0.37, total_steps=500),
               trace_params=True)  # rho is ignored by iql_so
    assert ca.param_trace == so.param_trace
    assert np.array_equal(ca.policy.mean_net.theta, so.policy.mean_net.theta)
    assert np.array_equal(ca.critics[0].theta, so.critics[0].theta)


def test_asymmetry_guard_counters():
    res = train(DS, quick_config(method="iql_ca", total_steps=200))
    assert res.report.policy_collision_count == 0
    # stratified critic batches carry the exact per-batch collision count
    n_expected = round(0.1 * 64)
    assert res.report.critic_col_min == n_expected
    assert res.report.critic_col_max == n_expected
    assert res.report.critic_batches == 200
    assert res.report.critic_col_total == 200 * n_expected


def test_dm_policy_actually_consumes_collisions():
    res = train(DS, quick_config(method="iql_dm", total_steps=200))
    assert res.report.policy_collision_count > 0


def test_so_and_bc_never_touch_collisions():
    for method in ("iql_so", "bc"):
        res = train(DS, quick_config(method=method, total_steps=150))
        assert res.report.policy_collision_count == 0


def test_weight_cap_respected():
    res = train(DS, quick_config(total_steps=200, max_weight=7.0))
    assert res.report.max_weight_seen <= 7.0


def test_nan_abort_names_loss_and_step():
    bad = synthetic_dataset(seed=3)
    bad.exp.rewards[5] = np.nan
    with pytest.raises(NumericError, match=r"critic loss non-finite at step \d+"):
        train(bad, quick_config(method="iql_so", total_steps=2000))


def test_checkpoints_written(tmp_path):
    out = tmp_path / "run"
    res = train(DS, quick_config(total_steps=200, eval_every=100),
                out_dir=str(out))
    files = sorted(p.name for p in out.iterdir())
    assert "ckpt_00000100.famlp" in files
    assert "ckpt_00000200.famlp" in files
    assert "final.famlp" in files
    assert "report.csv" in files
    sections, meta = load_checkpoint(str(out / "ckpt_00000200.famlp"))
    assert set(sections) == {"policy_mean", "policy_log_std"}
    assert meta["method"] == "iql_ca"
    assert meta["profile"]["beam_count"] == PROFILE.beam_count
    assert np.array_equal(sections["policy_mean"].params,
                          res.policy.mean_net.theta)
    full, _ = load_checkpoint(str(out / "final.famlp"))
    assert "value" in full and "critic_0" in full and "critic_1" in full
    csv_text = (out / "report.csv").read_text()
    assert csv_text.splitlines()[0].startswith("epoch,step,loss_value")


def test_value_shaping_on_synthetic_data():
    """Near-collision states end up with lower values than cruise states."""
    ds = synthetic_dataset(n_traj=16, traj_len=16, seed=5, col_fraction=0.3)
    assert ds.n_total >= 200
    res = train(ds, quick_config(total_steps=1500, rho=0.1, seed=7))
    col = ds.col
    # penultimate state of each collision trajectory = row with done set
    col_pen = col.features[col.dones.astype(bool)]
    exp = ds.exp
    mid = (exp.step_ids > 4) & (exp.step_ids < 12)
    exp_mid = exp.features[mid]
    v_col = res.value_net.forward(col_pen)[:, 0].mean()
    v_exp = res.value_net.forward(exp_mid)[:, 0].mean()
    assert v_col < v_exp


# ---------------------------------------------------------------------------
# estimator API
# ---------------------------------------------------------------------------

def test_get_set_params_roundtrip():
    est = FailureAwareIQL(method="bc", total_steps=10)
    params = est.get_params()
    assert params["method"] == "bc"
    assert params["expectile"] == 0.7
    clone = FailureAwareIQL(**params)
    assert clone.get_params() == params
    est.set_params(rho=0.25, batch_size=32)
    assert est.get_params()["rho"] == 0.25
    with pytest.raises(ValueError, match="invalid parameter"):
        est.set_params(bogus=1)


def test_estimator_fit_predict():
    est = FailureAwareIQL(method="iql_ca", total_steps=150, batch_size=64,
                          hidden=(32, 32), rho=0.1, seed=3,
                          epoch_steps=50, eval_every=50)
    with pytest.raises(RuntimeError, match="not fitted"):
        est.predict(np.zeros((2, DIM)))
    est.fit(DS)
    acts = est.predict(DS.exp.features[:10])
    assert acts.shape == (10, 2)
    assert np.all(np.abs(acts[:, 0]) <= 0.5)
    assert np.all(np.abs(acts[:, 1]) <= math.pi / 2)
    vals = est.state_values(DS.exp.features[:10])
    assert vals.shape == (10,)
    # shape validation
    from fanav.errors import ShapeError
    with pytest.raises(ShapeError):
        est.predict(np.zeros((2, DIM + 1)))


def test_estimator_params_drive_training():
    a = FailureAwareIQL(method="bc", total_steps=60, batch_size=32,
                        hidden=(16,), seed=0, epoch_steps=30, eval_every=30)
    b = FailureAwareIQL(**a.get_params())
    a.fit(DS)
    b.fit(DS)
    assert a.report_.final_digest == b.report_.final_digest
