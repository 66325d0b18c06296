import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liitr.moe import (ExpertModel, Explanation, FeatureSpec, GatingModel, MoEConfig, Surrogate, entropy_term,
                       explain_subject, fit_surrogate, hard_gate, hard_gate_backward, local_fit, objective,
                       penalized_loglik, responsibilities, softmax, treatment_rule)
from liitr.numkit import MlpModel, Rng, Scaler, TrainingError
from liitr.vaegen import PerturbationSet
from conftest import REGIME_A, REGIME_B, central_diff, coef_error, gate_accuracy, max_rel_err, regime_pset


def _surrogate(b1, b2, log_sigma, gate_net, lam=0.1, p=4):
    experts = [ExpertModel(np.array(a, dtype=float), np.array(b, dtype=float), float(s))
               for a, b, s in zip(b1, b2, log_sigma)]
    return Surrogate(experts, GatingModel(gate_net, Scaler.identity(p)), MoEConfig(k=len(experts), lam=lam))


def _const_gate(logits, p=4):
    net = MlpModel([p, len(logits)], ["identity"])
    net.biases[0][:] = logits
    return net


def test_softmax_uniform():
    assert np.allclose(softmax(np.zeros(3)), 1 / 3)


def test_softmax_closed_form():
    assert np.allclose(softmax(np.array([math.log(2.0), 0.0])), [2 / 3, 1 / 3])


def test_softmax_shift_invariance_and_stability():
    z = np.array([1.0, -2.0, 0.5])
    assert np.allclose(softmax(z + 1000.0), softmax(z))
    assert softmax(np.array([800.0, 0.0]))[0] == 1.0


def test_responsibilities_sum_to_one():
    net = MlpModel([4, 8, 3], ["relu", "identity"], Rng(0))
    pi = responsibilities(GatingModel(net, Scaler.identity(4)), np.random.default_rng(0).normal(size=(50, 4)))
    assert np.allclose(pi.sum(axis=1), 1.0)


def test_hard_gate_examples():
    assert hard_gate(np.array([0.2, 0.7, 0.1])).tolist() == [0, 1, 0]
    assert hard_gate(np.array([0.0, 0.0, 1.0])).tolist() == [0, 0, 1]
    assert hard_gate(np.array([0.4, 0.4, 0.2])).tolist() == [1, 0, 0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6))
def test_hard_gate_is_one_hot_at_argmax(logits):
    pi = softmax(np.array(logits))
    h = hard_gate(pi)
    assert h.sum() == 1.0 and np.argmax(h) == np.argmax(pi)


@pytest.mark.parametrize("seed", range(5))
def test_straight_through_gradient_is_soft_gradient(seed):
    rng = np.random.default_rng(seed)
    logits, v = rng.normal(size=4), rng.normal(size=4)
    analytic = hard_gate_backward(softmax(logits), v)
    numeric = central_diff(lambda: float(softmax(logits) @ v), [logits])[0]
    assert np.allclose(analytic, numeric, atol=1e-9)


def test_entropy_zero_log_zero():
    assert entropy_term(np.array([1.0, 0.0])) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6))
def test_entropy_term_bounds(logits):
    pi = softmax(np.array(logits))
    e = entropy_term(pi)
    assert -math.log(len(logits)) - 1e-12 <= e <= 1e-12


def test_loglik_perfect_single_component():
    rng = np.random.default_rng(0)
    x, t = rng.normal(size=(6, 4)), rng.integers(0, 2, 6).astype(float)
    b1, b2 = rng.normal(size=4), rng.normal(size=3)
    y = x @ b1 + (np.column_stack([np.ones(6), x[:, :2]]) @ b2) * t
    s = _surrogate([b1], [b2], [0.0], _const_gate([0.0]))
    value = penalized_loglik(PerturbationSet("s", np.column_stack([t, x]), y), s)
    assert value / 6 == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert value / 6 == pytest.approx(-0.91894, abs=1e-5)


def test_uniform_gate_entropy_term():
    assert entropy_term(np.full(4, 0.25)) * 0.1 == pytest.approx(-1.38629 * 0.1, abs=1e-5)


def test_loglik_matches_brute_force_two_components():
    rng = np.random.default_rng(3)
    m = 5
    x, t, y = rng.normal(size=(m, 4)), rng.integers(0, 2, m).astype(float), rng.normal(size=m)
    b1, b2, ls = rng.normal(size=(2, 4)), rng.normal(size=(2, 3)), np.array([0.3, -0.4])
    gate = MlpModel([4, 2], ["identity"], Rng(3))
    gate.biases[0][:] = [0.2, -0.1]
    lam = 0.7
    s = _surrogate(b1, b2, ls, gate, lam=lam)
    expected = 0.0
    for j in range(m):
        logits = gate.weights[0] @ x[j] + gate.biases[0]
        pi = np.exp(logits) / np.exp(logits).sum()
        h1 = np.array([1.0, x[j, 0], x[j, 1]])
        dens = 0.0
        for k in range(2):
            mu = b1[k] @ x[j] + (b2[k] @ h1) * t[j]
            sig = math.exp(ls[k])
            dens += pi[k] * math.exp(-0.5 * ((y[j] - mu) / sig) ** 2) / (sig * math.sqrt(2 * math.pi))
        expected += math.log(dens) + lam * sum(p * math.log(p) for p in pi)
    assert penalized_loglik(PerturbationSet("s", np.column_stack([t, x]), y), s) == pytest.approx(expected,
                                                                                                   rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loglik_raises():
    s = _surrogate([np.zeros(4)], [np.zeros(3)], [0.0], _const_gate([0.0]))
    d = np.column_stack([np.zeros(3), np.ones((3, 4))])
    with pytest.raises(TrainingError):
        penalized_loglik(PerturbationSet("s", d, np.array([0.0, np.inf, 1.0])), s)


def _objective_instance(seed, k=3, m=7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, 4))
    args = dict(
        b1=rng.normal(size=(k, 4)), b2=rng.normal(size=(k, 3)), log_sigma=rng.normal(size=k) * 0.3,
        gate_net=MlpModel([4, 5, k], ["tanh", "identity"], Rng(seed)),
        h0=x, h1=np.column_stack([np.ones(m), x[:, :2]]), t=rng.integers(0, 2, m).astype(float),
        y=rng.normal(size=m) * 2, xg=x, lam=float(rng.uniform(0, 1)),
    )
    return args


@pytest.mark.parametrize("seed", range(20))
def test_soft_objective_gradient_matches_finite_differences(seed):
    a = _objective_instance(seed)
    params = [a["b1"], a["b2"], a["log_sigma"], *a["gate_net"].params()]

    def f():
        return objective(**a, hard=False, with_grad=False)[0]

    analytic = objective(**a, hard=False)[1]
    assert max_rel_err(analytic, central_diff(f, params)) < 1e-4


def test_hard_objective_expert_gradients_use_selected_expert_only():
    a = _objective_instance(0)
    params = [a["b1"], a["b2"], a["log_sigma"]]

    def f():
        return objective(**a, hard=True, with_grad=False)[0]

    analytic = objective(**a, hard=True)[1][:3]
    assert max_rel_err(analytic, central_diff(f, params)) < 1e-4


def _permute(a, perm):
    b = dict(a)
    b["b1"], b["b2"], b["log_sigma"] = a["b1"][perm], a["b2"][perm], a["log_sigma"][perm]
    net = a["gate_net"].copy()
    net.weights[-1] = net.weights[-1][perm]
    net.biases[-1] = net.biases[-1][perm]
    b["gate_net"] = net
    return b


@pytest.mark.parametrize("hard", [False, True])
def test_expert_permutation_leaves_loss_invariant(hard):
    a = _objective_instance(4, k=4, m=30)
    value = objective(**a, hard=hard, with_grad=False)[0]
    for perm in ([1, 0, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]):
        assert objective(**_permute(a, np.array(perm)), hard=hard, with_grad=False)[0] == pytest.approx(
            value, rel=1e-13)


def test_single_regime_linear_oracle():
    pset, _ = regime_pset(m=4000, seed=1, two=False)
    s = fit_surrogate(pset, MoEConfig(k=2), Rng(1))
    assert s.diagnostics.local_r2 > 0.999
    assert coef_error(s, REGIME_A) < 0.02


@pytest.mark.slow
def test_two_regime_oracle_and_entropy_penalty():
    pset, label = regime_pset(seed=2)
    cfg = dict(k=2, max_epochs=150, warmup_epochs=50)
    base = fit_surrogate(pset, MoEConfig(lam=0.0, **cfg), Rng(2))
    sparse = fit_surrogate(pset, MoEConfig(lam=0.1, **cfg), Rng(2))
    assert coef_error(sparse, REGIME_A) < 0.05 and coef_error(sparse, REGIME_B) < 0.05
    assert gate_accuracy(sparse, pset, label) > 0.95
    assert gate_accuracy(sparse, pset, label) >= gate_accuracy(base, pset, label) - 0.02


def test_large_penalty_makes_gate_decisive():
    pset, _ = regime_pset(m=4000, seed=3)
    s = fit_surrogate(pset, MoEConfig(k=4, lam=1e3), Rng(3))
    pi = responsibilities(s.gate, pset.x)
    assert -np.mean(entropy_term(pi)) < 0.05


def test_fit_is_deterministic():
    pset, _ = regime_pset(m=1000, seed=4)
    cfg = MoEConfig(k=2, max_epochs=4, warmup_epochs=2)
    a, b = fit_surrogate(pset, cfg, Rng(4)), fit_surrogate(pset, cfg, Rng(4))
    assert np.array_equal(a.b2, b.b2) and np.array_equal(a.gate.net.weights[0], b.gate.net.weights[0])


def test_fit_preconditions():
    pset, _ = regime_pset(m=100, seed=0)
    with pytest.raises(ValueError):
        fit_surrogate(pset, MoEConfig(k=4), Rng(0))
    bare = PerturbationSet("s", pset.d_prime)
    with pytest.raises(ValueError):
        fit_surrogate(bare, MoEConfig(k=1), Rng(0))


def test_collapse_is_reported_not_fatal(caplog):
    pset, _ = regime_pset(m=1000, seed=5, two=False)
    s = fit_surrogate(pset, MoEConfig(k=4, lam=1e3, max_epochs=20, warmup_epochs=10), Rng(5))
    assert sum(u > 0 for u in s.diagnostics.usage) >= 1
    if s.diagnostics.collapsed:
        assert "received no rows" in caplog.text


@pytest.mark.parametrize("contrast,expected", [(0.8, 1), (0.0, 0), (-0.2, 0)])
def test_treatment_rule_sign(contrast, expected):
    assert treatment_rule(np.array([contrast, 0.0, 0.0]), np.array([1.0, 5.0, -3.0])) == expected


def _two_expert_surrogate():
    gate = MlpModel([4, 2], ["identity"])
    gate.weights[0][1, 0] = 5.0  # expert 1 when x1 > 0
    return _surrogate([np.ones(4), np.zeros(4)], [[1.0, 0.0, 0.0], [-1.0, 0.5, 0.0]], [0.0, 0.0], gate)


def test_explain_subject_selects_argmax_expert():
    s = _two_expert_surrogate()
    e = explain_subject(np.array([1.0, 0.0, 0.0, 0.0]), s, subject_id="a")
    assert e.selected_expert == 1 and e.selected_expert == int(np.argmax(e.gate_distribution))
    assert e.beta_k2 == [-1.0, 0.5, 0.0] and e.recommended_t == 0
    e = explain_subject(np.array([-1.0, 0.0, 0.0, 0.0]), s)
    assert e.selected_expert == 0 and e.recommended_t == 1


def test_explanation_invariances():
    s = _two_expert_surrogate()
    x = np.array([0.3, 0.2, 0.0, 0.0])
    ref = explain_subject(x, s)
    s.gate.net.biases[0] += 7.0
    s.gate.net.weights[0] *= 3.0
    for e in s.experts:
        e.beta_k1, e.beta_k2 = e.beta_k1 * 2.5, e.beta_k2 * 2.5
    out = explain_subject(x, s)
    assert (out.selected_expert, out.recommended_t) == (ref.selected_expert, ref.recommended_t)


def test_local_fit_undefined_for_tiny_partition():
    s = _two_expert_surrogate()
    d = np.column_stack([np.zeros(30), -np.ones((30, 4))])
    d[:5, 1] = 1.0
    pset = PerturbationSet("s", d, np.zeros(30))
    assert local_fit(s, 1, pset)["undefined"]
    e = explain_subject(np.array([1.0, 0, 0, 0]), s, pset)
    assert e.local_r2 is None and e.extra["local_r2_undefined"]


def test_local_fit_exact_expert_gives_unit_r2():
    s = _two_expert_surrogate()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 4))
    x[:, 0] = -np.abs(x[:, 0])
    t = rng.integers(0, 2, 200).astype(float)
    d = np.column_stack([t, x])
    pset = PerturbationSet("s", d, s.expert_means(d)[:, 0])
    assert local_fit(s, 0, pset)["local_r2"] == pytest.approx(1.0)


def test_explanation_json_round_trip():
    e = Explanation("7", 1, [1.0, 2.0], [0.5], 1, 0.93, [0.2, 0.8], extra={"local_mae": 0.1})
    back = Explanation.from_dict(__import__("json").loads(e.to_json()))
    assert back == e


def test_feature_spec():
    spec = FeatureSpec((0, 1), intercept=True)
    assert spec.build(np.array([[2.0, 3.0, 4.0]])).tolist() == [[1.0, 2.0, 3.0]]
    assert spec.names() == ["1", "x1", "x2"] and spec.width == 3
    assert FeatureSpec.from_dict(spec.to_dict()) == spec


def test_config_validation():
    with pytest.raises(ValueError):
        MoEConfig(k=0)
    with pytest.raises(ValueError):
        MoEConfig(lam=-1.0)
    with pytest.raises(ValueError):
        MoEConfig(h1_spec=FeatureSpec((), intercept=False))
