"""Versioned JSON documents for MDPs, policies, datasets and learned models.

Floats are written with Python's shortest round-trip repr, so reading a file
back yields bit-identical arrays.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .mdp import DeterministicPolicy, StochasticPolicy, TabularLowRankMDP
from .linear import RidgeState
from .model_class import LearnedModel, OfflineDataset
from .offline_online import LSVIResult
from .rfe import RFEDataset
from .upstream import UpstreamReport

VERSION = 1


class SchemaError(ValueError):
    pass


def _check_version(doc: dict, kind: str | None = None) -> None:
    if doc.get("version") != VERSION:
        raise SchemaError(f"unsupported document version {doc.get('version')!r}")
    if kind is not None and doc.get("kind", "mdp") != kind:
        raise SchemaError(f"expected a {kind!r} document, got {doc.get('kind')!r}")


def mdp_to_dict(mdp: TabularLowRankMDP) -> dict:
    doc = {
        "version": VERSION,
        "kind": "mdp",
        "S": mdp.S,
        "K": mdp.K,
        "H": mdp.H,
        "d": mdp.d,
        "phi": mdp.phi.tolist(),
        "mu": mdp.mu.tolist(),
        "reward": mdp.reward.tolist(),
        "s1": mdp.s1,
    }
    if mdp.init_dist is not None:
        doc["init_dist"] = mdp.init_dist.tolist()
    return doc


def mdp_from_dict(doc: dict, validate: bool = True) -> TabularLowRankMDP:
    _check_version(doc, "mdp")
    mdp = TabularLowRankMDP(np.array(doc["phi"], dtype=float), np.array(doc["mu"], dtype=float),
                            np.array(doc["reward"], dtype=float), int(doc.get("s1", 0)),
                            None if doc.get("init_dist") is None else np.array(doc["init_dist"]))
    if (mdp.S, mdp.K, mdp.H, mdp.d) != (doc["S"], doc["K"], doc["H"], doc["d"]):
        raise SchemaError("declared sizes do not match the tables")
    if validate:
        mdp.validate()
    return mdp


def policy_to_dict(policy) -> dict:
    if isinstance(policy, DeterministicPolicy):
        return {"version": VERSION, "kind": "deterministic_policy", "action": policy.action.tolist()}
    return {"version": VERSION, "kind": "stochastic_policy", "prob": policy.prob.tolist()}


def policy_from_dict(doc: dict):
    _check_version(doc)
    if doc["kind"] == "deterministic_policy":
        return DeterministicPolicy(np.array(doc["action"], dtype=np.int64))
    if doc["kind"] == "stochastic_policy":
        return StochasticPolicy(np.array(doc["prob"], dtype=float))
    raise SchemaError(f"unknown policy kind {doc['kind']!r}")


def dataset_to_dict(ds: OfflineDataset) -> dict:
    return {
        "version": VERSION,
        "kind": "offline_dataset",
        "T": ds.T,
        "n": ds.n,
        "H": ds.H,
        "S": ds.num_states,
        "K": ds.num_actions,
        "states": ds.states.tolist(),
        "actions": ds.actions.tolist(),
        "rewards": ds.rewards.tolist(),
    }


def dataset_from_dict(doc: dict) -> OfflineDataset:
    _check_version(doc, "offline_dataset")
    T, n, H = doc["T"], doc["n"], doc["H"]
    # explicit reshape so that empty datasets keep their trailing axes
    states = np.array(doc["states"], dtype=np.int64).reshape(T, n, H + 1)
    actions = np.array(doc["actions"], dtype=np.int64).reshape(T, n, H)
    rewards = np.array(doc["rewards"], dtype=float).reshape(T, n, H)
    return OfflineDataset(states, actions, rewards, doc["S"], doc["K"])


def learned_to_dict(learned: LearnedModel) -> dict:
    return {
        "version": VERSION,
        "kind": "learned_model",
        "T": learned.T,
        "H": learned.phi_hat.shape[0],
        "S": learned.phi_hat.shape[1],
        "K": learned.phi_hat.shape[2],
        "d": learned.phi_hat.shape[3],
        "phi_index": learned.phi_index.tolist(),
        "mu_index": learned.mu_index.tolist(),
        "phi": learned.phi_hat.tolist(),
        "mu": learned.mu_hat.tolist(),
        "loglik": learned.loglik.tolist(),
    }


def learned_from_dict(doc: dict) -> LearnedModel:
    from .mdp import kernel_from_factors

    _check_version(doc, "learned_model")
    phi = np.array(doc["phi"], dtype=float)
    mu = np.array(doc["mu"], dtype=float)
    p_hat = np.stack([kernel_from_factors(phi, mu[t]) for t in range(len(mu))])
    return LearnedModel(np.array(doc["phi_index"]), np.array(doc["mu_index"]), phi, mu, p_hat,
                        np.array(doc["loglik"], dtype=float))


def rfe_dataset_to_dict(ds: RFEDataset) -> dict:
    return {
        "version": VERSION,
        "kind": "rfe_dataset",
        "states": ds.states.tolist(),
        "actions": ds.actions.tolist(),
        "lambda_d": ds.ridge[0].lambda_d if ds.ridge else 1.0,
        "Lambda": [r.Lambda.tolist() for r in ds.ridge],
        "count": [r.count for r in ds.ridge],
    }


def rfe_dataset_from_dict(doc: dict) -> RFEDataset:
    _check_version(doc, "rfe_dataset")
    ridge = []
    for Lam, count in zip(doc["Lambda"], doc["count"]):
        state = RidgeState(len(Lam), doc["lambda_d"])
        state.Lambda = np.array(Lam, dtype=float)
        state.count = int(count)
        ridge.append(state)
    H = len(ridge)
    states = np.array(doc["states"], dtype=np.int64).reshape(-1, H + 1)
    actions = np.array(doc["actions"], dtype=np.int64).reshape(-1, H)
    return RFEDataset(states, actions, ridge)


def report_to_dict(report: UpstreamReport) -> dict:
    doc = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(report).items()}
    return {"version": VERSION, "kind": "upstream_report", **doc}


def write_lsvi_trace(result: LSVIResult, path) -> None:
    """Per-episode CSV: episode, bonus scale, exact value and regret of that episode's policy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "beta", "value", "regret"])
        for n, (beta, value) in enumerate(zip(result.betas, result.values)):
            writer.writerow([n + 1, repr(float(beta)), repr(float(value)), repr(float(result.optimal_value - value))])


def dump(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc))


def load(path) -> dict:
    return json.loads(Path(path).read_text())


def save_mdp(mdp: TabularLowRankMDP, path) -> None:
    dump(mdp_to_dict(mdp), path)


def load_mdp(path, validate: bool = True) -> TabularLowRankMDP:
    return mdp_from_dict(load(path), validate=validate)


def write_manifest(path, seed, members, extra: dict | None = None) -> None:
    doc = {"version": VERSION, "kind": "family_manifest", "seed": seed, "members": [str(m) for m in members]}
    if extra:
        doc.update(extra)
    dump(doc, path)
