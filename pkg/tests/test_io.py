import csv
import json

import numpy as np
import pytest

from morl import io as mio
from morl.envgen import gen_dataset
from morl.mdp import DeterministicPolicy
from morl.model_class import fit_all_steps
from morl.offline_online import LSVIConfig, lsvi_ucb
from morl.rfe import RFEConfig, rfe_explore


def test_mdp_roundtrip_is_exact(tmp_path, mdp0):
    path = tmp_path / "m.json"
    mio.save_mdp(mdp0, path)
    back = mio.load_mdp(path)
    for name in ("phi", "mu", "reward"):
        assert getattr(back, name).tobytes() == getattr(mdp0, name).tobytes()
    assert back.s1 == mdp0.s1 and back.init_dist is None


def test_mdp_with_initial_distribution(mdp0):
    from morl.mdp import TabularLowRankMDP

    m = TabularLowRankMDP(mdp0.phi, mdp0.mu, mdp0.reward, init_dist=np.full(5, 0.2))
    back = mio.mdp_from_dict(json.loads(json.dumps(mio.mdp_to_dict(m))))
    assert np.array_equal(back.init_dist, m.init_dist)


def test_corrupted_mdp_rejected(tmp_path, mdp0):
    doc = mio.mdp_to_dict(mdp0)
    doc["mu"][1][0][0] += 0.3
    path = tmp_path / "bad.json"
    mio.dump(doc, path)
    with pytest.raises(ValueError):
        mio.load_mdp(path)
    assert mio.load_mdp(path, validate=False).S == 5


@pytest.mark.parametrize("edit", [{"version": 99}, {"kind": "rfe_dataset"}, {"S": 6}])
def test_schema_errors(mdp0, edit):
    doc = {**mio.mdp_to_dict(mdp0), **edit}
    with pytest.raises(mio.SchemaError):
        mio.mdp_from_dict(doc)


def test_policy_roundtrip(behavior0):
    det = DeterministicPolicy(np.array([[0, 1, 1, 0, 1]] * 3))
    assert np.array_equal(mio.policy_from_dict(mio.policy_to_dict(det)).action, det.action)
    sto = behavior0[0][2]
    assert mio.policy_from_dict(json.loads(json.dumps(mio.policy_to_dict(sto)))).prob.tobytes() == sto.prob.tobytes()
    with pytest.raises(mio.SchemaError):
        mio.policy_from_dict({"version": 1, "kind": "other"})


@pytest.mark.parametrize("n", [0, 25])
def test_dataset_roundtrip(family0, behavior0, n):
    ds = gen_dataset(family0, behavior0[0], n, np.random.default_rng(0))
    back = mio.dataset_from_dict(json.loads(json.dumps(mio.dataset_to_dict(ds))))
    assert back.states.shape == ds.states.shape
    assert np.array_equal(back.states, ds.states) and np.array_equal(back.rewards, ds.rewards)


def test_learned_roundtrip(family0, behavior0, class0):
    ds = gen_dataset(family0, behavior0[0], 100, np.random.default_rng(0))
    learned = fit_all_steps(class0, ds)
    back = mio.learned_from_dict(json.loads(json.dumps(mio.learned_to_dict(learned))))
    assert np.array_equal(back.p_hat, learned.p_hat)
    assert np.array_equal(back.mu_index, learned.mu_index)
    assert np.array_equal(back.loglik, learned.loglik)


def test_rfe_dataset_roundtrip(mdp0):
    ds, _ = rfe_explore(mdp0, mdp0.phi, RFEConfig(20, beta=1.0, lambda_d=0.5), np.random.default_rng(0))
    back = mio.rfe_dataset_from_dict(json.loads(json.dumps(mio.rfe_dataset_to_dict(ds))))
    assert np.array_equal(back.states, ds.states)
    for a, b in zip(back.ridge, ds.ridge):
        assert a.Lambda.tobytes() == b.Lambda.tobytes() and a.count == b.count and a.lambda_d == 0.5


def test_lsvi_trace_csv(tmp_path, mdp0):
    res = lsvi_ucb(mdp0, mdp0.phi, mdp0.reward, LSVIConfig(6), np.random.default_rng(0))
    path = tmp_path / "trace.csv"
    mio.write_lsvi_trace(res, path)
    rows = list(csv.DictReader(path.open()))
    assert [int(r["episode"]) for r in rows] == list(range(1, 7))
    assert [float(r["value"]) for r in rows] == res.values.tolist()


def test_manifest(tmp_path):
    mio.write_manifest(tmp_path / "m.json", 3, ["a.json"], {"xi": 0.0})
    doc = mio.load(tmp_path / "m.json")
    assert doc["seed"] == 3 and doc["members"] == ["a.json"] and doc["xi"] == 0.0
