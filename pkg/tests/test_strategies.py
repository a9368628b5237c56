import math

import numpy as np
import pytest

from fairprobe.dataio import DatasetBundle, SampleRecord, split_patients
from fairprobe.errors import ConfigError, DataError, NumericError
from fairprobe.metrics import confusion, f1_macro
from fairprobe.numerics import finite_difference_check
from fairprobe.strategies import (
    Batch,
    StrategyConfig,
    TrainedModel,
    adversary_objective,
    dann_objective,
    evaluate_objective,
    fades_objective,
    fairdisco_objective,
    gaussian_total_correlation,
    grid_search,
    groupdro_objective,
    groupdro_step,
    hard_conditional_mi,
    init_params,
    moe_objective,
    players,
    supervised_contrastive,
    train,
    wce_objective,
    write_history,
)
from fairprobe.strategies.objectives import mean_entropy
from fairprobe.synthbench import SynthConfig, generate

STRATEGY_CASES = [
    ("wce", {}), ("dann", {}), ("fairdisco", {}), ("fairdisco", {"conf_target": "task_head"}),
    ("fades", {}), ("groupdro", {}), ("moe", {}),
]


def _random_problem(strategy, seed, m, K, n, D=3, **kw):
    rng = np.random.default_rng(seed)
    cfg = StrategyConfig(strategy=strategy, hidden_dim=8, z_dim=6, off_grid=True, batch_size=n,
                         learning_rate=0.01, **kw)
    params = init_params(cfg, rng, m, K, D)
    params = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in params.items()}
    batch = Batch(rng.normal(size=(n, m)), rng.integers(0, K, n), np.arange(n) % D)
    weights = rng.uniform(0.5, 2.0, K)
    q = rng.dirichlet(np.ones(D))
    return cfg, params, batch, weights, q


def _worst_player_error(strategy, seed, m, K, n, **kw):
    cfg, params, batch, weights, q = _random_problem(strategy, seed, m, K, n, **kw)
    # GroupDRO: q' from the first evaluation is held fixed (eta 0) while differencing
    q_fixed = evaluate_objective(cfg, batch, params, weights, q=q).state.get("q")
    worst = 0.0
    for prefixes, coefs in players(cfg):
        def fn(p):
            if strategy == "groupdro":
                out = evaluate_objective(cfg.replace(eta_q=0.0), batch, p, weights, q=q_fixed)
            else:
                out = evaluate_objective(cfg, batch, p, weights, warmup=True)
            value = sum(c * out.terms.get(t, 0.0) for t, c in coefs.items())
            return value, {k: v for k, v in out.grads.items() if k.split(".")[0] in prefixes}
        worst = max(worst, finite_difference_check(fn, params, 1e-6))
    return worst


@pytest.mark.parametrize("strategy, kw", STRATEGY_CASES)
@pytest.mark.parametrize("m, K", [(4, 2), (4, 3), (8, 3), (8, 4)])
def test_gradients_match_finite_differences(strategy, kw, m, K):
    errors = [_worst_player_error(strategy, seed, m, K, 14, **kw) for seed in range(20)]
    assert max(errors) <= 1e-4


def test_adversary_objective_gradients():
    for strategy in ("dann", "fades"):
        for seed in range(5):
            cfg, params, batch, weights, _ = _random_problem(strategy, seed, 6, 3, 12)
            heads = ("domain",) if strategy == "dann" else ("domain", "aux_y", "aux_d")

            def fn(p):
                out = adversary_objective(cfg, batch, p)
                return out.loss, {k: v for k, v in out.grads.items() if k.split(".")[0] in heads}
            assert finite_difference_check(fn, params, 1e-6) <= 1e-4


def test_gradient_check_catches_a_broken_reversal():
    cfg, params, batch, weights, _ = _random_problem("dann", 0, 6, 3, 12)

    def unreversed(p):
        # encoder grads carry -lambda * domain; pairing them with +domain must fail
        out = dann_objective(batch, p, weights, 1.0)
        value = out.terms["wce"] + out.terms["domain"]
        return value, {k: v for k, v in out.grads.items() if k.split(".")[0] == "proj"}

    assert finite_difference_check(unreversed, params, 1e-6) > 1e-2


# -- hand values -------------------------------------------------------------

def test_wce_single_sample_hand_value():
    params = {"probe.W": np.zeros((2, 3)), "probe.b": np.zeros(2)}
    out = wce_objective(Batch(np.ones((1, 3)), [0], [0]), params, np.array([2.0, 1.0]))
    assert out.loss == pytest.approx(1.386294, abs=1e-6)


def test_wce_perfect_batch():
    params = {"probe.W": np.zeros((3, 2)), "probe.b": np.array([60.0, 0.0, 0.0])}
    out = wce_objective(Batch(np.ones((4, 2)), [0, 0, 0, 0], [0] * 4), params, np.ones(3))
    assert out.loss <= 3 * 1e-9


def test_dann_uniform_domain_head_is_ln2():
    rng = np.random.default_rng(0)
    cfg = StrategyConfig("dann", hidden_dim=8, z_dim=4)
    params = init_params(cfg, rng, 5, 3, 2)
    params["domain.W"][:] = 0.0
    params["domain.b"][:] = 0.0
    batch = Batch(rng.normal(size=(6, 5)), rng.integers(0, 3, 6), [0, 1] * 3)
    out = dann_objective(batch, params, np.ones(3))
    assert out.terms["domain"] == pytest.approx(math.log(2))


def test_dann_lambda_zero_equals_wce_bitwise():
    cfg, params, batch, weights, _ = _random_problem("dann", 3, 6, 3, 12)
    dann = dann_objective(batch, params, weights, 0.0)
    wce = wce_objective(batch, {k: v for k, v in params.items() if not k.startswith("domain")}, weights)
    for k, g in wce.grads.items():
        assert np.array_equal(dann.grads[k], g)
    assert set(dann.grads) - set(wce.grads) == {"domain.W", "domain.b"}


def test_fairdisco_reduces_to_dann():
    cfg, params, batch, weights, _ = _random_problem("fairdisco", 4, 6, 3, 12)
    a = fairdisco_objective(batch, params, weights, 0.7, alpha=0.0, beta=0.0)
    b = dann_objective(batch, params, weights, 0.7)
    assert a.loss == b.loss
    for k in b.grads:
        assert np.array_equal(a.grads[k], b.grads[k])


def test_fades_with_everything_off_is_wce_on_task_block():
    cfg, params, batch, weights, _ = _random_problem("fades", 5, 6, 3, 12)
    full = fades_objective(batch, params, weights, lambda_grl=0.0, tc_weight=0.0,
                           cmi_weight=0.0, reg_weight=0.0)
    zb = 2
    sliced = {"probe.W": params["probe.W"], "probe.b": params["probe.b"],
              "proj.W1": params["proj.W1"], "proj.b1": params["proj.b1"],
              "proj.W2": params["proj.W2"][:zb], "proj.b2": params["proj.b2"][:zb]}
    ref = wce_objective(batch, sliced, weights)
    assert np.array_equal(full.grads["probe.W"], ref.grads["probe.W"])
    assert np.allclose(full.grads["proj.W1"], ref.grads["proj.W1"], rtol=1e-13, atol=1e-15)
    assert np.array_equal(full.grads["proj.W2"][zb:], np.zeros_like(full.grads["proj.W2"][zb:]))


def test_contrastive_equal_similarities():
    z = np.eye(3)
    loss, _ = supervised_contrastive(z, np.array([0, 0, 1]))
    assert loss == pytest.approx(0.693147, abs=1e-6)


def test_contrastive_saturates():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    loss_near, _ = supervised_contrastive(z, np.array([0, 0, 1]))
    assert loss_near < math.log(2)
    assert supervised_contrastive(np.eye(3), np.array([0, 1, 2]))[0] == 0.0


def test_tc_diagonal_covariance_near_zero():
    z = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    tc, _ = gaussian_total_correlation(z)
    assert abs(tc) < 1e-2


def test_tc_closed_form_correlation():
    a = np.array([1.0, -1.0, 1.0, -1.0])
    b = np.array([1.0, 1.0, -1.0, -1.0])
    z = np.stack([a, 0.6 * a + 0.8 * b], axis=1)
    tc, _ = gaussian_total_correlation(z)
    assert tc == pytest.approx(-0.5 * math.log(1 - 0.36), abs=1e-3)


def test_cmi_constant_predictions_zero():
    d = np.array([0, 0, 1, 1, 1])
    assert hard_conditional_mi(np.zeros(5, int), np.array([0, 1, 0, 1, 1]), d) == 0.0
    assert hard_conditional_mi(np.array([0, 1, 0, 1, 2]), np.ones(5, int), d) == 0.0


def test_cmi_dependent_predictions_positive():
    y_hat = np.array([0, 1] * 20)
    assert hard_conditional_mi(y_hat, y_hat.copy(), np.zeros(40, int)) > 0.3


def test_uniform_aux_entropy_is_ln4():
    h, _ = mean_entropy(np.zeros((5, 4)))
    assert h == pytest.approx(math.log(4))


def test_fades_rejects_tiny_batch():
    cfg, params, batch, weights, _ = _random_problem("fades", 0, 6, 3, 3)
    with pytest.raises(NumericError):
        fades_objective(batch, params, weights)


def test_groupdro_step_hand_value():
    q, loss = groupdro_step(np.array([1.0, 0.5]), np.array([0.5, 0.5]), 1.0)
    assert np.allclose(q, [0.622459, 0.377541], atol=1e-6)
    assert loss == pytest.approx(q @ [1.0, 0.5])


@pytest.mark.parametrize("losses, eta", [([0.7, 0.7, 0.7], 1.0), ([0.1, 2.0, 0.5], 0.0)])
def test_groupdro_step_fixed_points(losses, eta):
    q0 = np.array([0.2, 0.3, 0.5])
    q, _ = groupdro_step(np.array(losses), q0, eta)
    assert np.allclose(q, q0, rtol=0, atol=1e-15)


def test_groupdro_rejects_nonfinite_loss():
    with pytest.raises(NumericError):
        groupdro_step(np.array([np.inf, 1.0]), np.array([0.5, 0.5]), 0.1)


def test_moe_one_hot_gate_equals_expert_wce():
    cfg, params, batch, weights, _ = _random_problem("moe", 1, 5, 3, 10)
    params["moe.gate.W"][:] = 0.0
    params["moe.gate.b"][:] = [-1e4, 1e4, -1e4]
    out = moe_objective(batch, params, weights)
    expert = wce_objective(batch, {"probe.W": params["moe.expert1.W"],
                                   "probe.b": params["moe.expert1.b"]}, weights)
    assert out.loss == pytest.approx(expert.loss, rel=1e-12)


def test_moe_identical_experts_give_no_gate_gradient():
    cfg, params, batch, weights, _ = _random_problem("moe", 2, 5, 3, 10)
    for e in (1, 2):
        params[f"moe.expert{e}.W"] = params["moe.expert0.W"].copy()
        params[f"moe.expert{e}.b"] = params["moe.expert0.b"].copy()
    out = moe_objective(batch, params, weights, warmup=False)
    assert np.allclose(out.grads["moe.gate.W"], 0.0, atol=1e-15)


# -- config ------------------------------------------------------------------

def test_config_defaults():
    assert StrategyConfig("fades").epochs == 30
    assert StrategyConfig("fades").learning_rate == 1e-4
    assert StrategyConfig("wce").epochs == 50
    assert StrategyConfig("dann").lambda_grl == 1.0


def test_config_grid_enforced():
    with pytest.raises(ConfigError):
        StrategyConfig("wce", batch_size=64)
    with pytest.raises(ConfigError):
        StrategyConfig("wce", learning_rate=0.5)
    assert StrategyConfig("wce", batch_size=64, off_grid=True).batch_size == 64


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        StrategyConfig.from_dict({"strategy": "wce", "momentum": 0.9})
    path = tmp_path / "c.json"
    path.write_text('{"strategy": "dann", "lambda_grl": 0.5}')
    assert StrategyConfig.from_json(path).lambda_grl == 0.5


def test_config_fades_partition():
    with pytest.raises(ConfigError):
        StrategyConfig("fades", z_dim=8)


# -- training ----------------------------------------------------------------

def _synth_bundle(seed=0, **kw):
    base = dict(num_domains=3, num_classes=3, feature_dim=10, samples_per_domain=90,
                signal_strength=3.0, domain_strength=1.0, seed=seed)
    base.update(kw)
    return split_patients(generate(SynthConfig(**base)), 0.7, seed)


@pytest.mark.parametrize("strategy", ["wce", "dann", "fairdisco", "fades", "groupdro", "moe"])
def test_training_is_deterministic(strategy):
    b = _synth_bundle().where(split="train")
    cfg = StrategyConfig(strategy, epochs=2, task="diagnosis")
    m1, m2 = train(b, cfg), train(b, cfg)
    assert m1.params.keys() == m2.params.keys()
    for k in m1.params:
        assert m1.params[k].tobytes() == m2.params[k].tobytes()
    assert len(m1.history) == 2


def test_separable_wce_reaches_high_f1():
    b = _synth_bundle(signal_strength=6.0, domain_strength=0.0, samples_per_domain=200)
    model = train(b.where(split="train"), StrategyConfig("wce", epochs=30))
    test = b.where(split="test")
    y = test.labels("diagnosis")
    assert f1_macro(confusion(y, model.predict(test.features()), 3)) >= 0.95


def test_wce_loss_history_smoothed_monotone():
    b = _synth_bundle(signal_strength=6.0, domain_strength=0.0).where(split="train")
    losses = np.array([h["loss"] for h in train(b, StrategyConfig("wce", epochs=30)).history])
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-12)


def test_groupdro_q_on_simplex():
    b = _synth_bundle(samples_per_domain=[120, 60, 30]).where(split="train")
    model = train(b, StrategyConfig("groupdro", epochs=5))
    assert len(model.q_history) == 5
    for q in model.q_history:
        assert abs(q.sum() - 1) <= 1e-9 and np.all(q >= 0)


@pytest.mark.parametrize("strategy", ["dann", "fairdisco", "fades", "groupdro", "moe"])
def test_domain_aware_needs_two_domains(strategy):
    b = _synth_bundle().where(split="train", dataset_id="d0")
    with pytest.raises(DataError):
        train(b, StrategyConfig(strategy, epochs=1))


def test_absent_class_is_an_error():
    recs = tuple(SampleRecord(f"s{i}", f"p{i}", "d", diagnosis=("healthy", "benign")[i % 2])
                 for i in range(10))
    with pytest.raises(DataError):
        train(DatasetBundle(recs, np.zeros((10, 3))), StrategyConfig("wce", epochs=1))


def test_grid_search_evaluates_nine_candidates():
    b = _synth_bundle(samples_per_domain=40).where(split="train")
    result = grid_search(b, StrategyConfig("wce", epochs=3), search_epochs=1)
    assert len(result.candidates) == 9
    assert {(c[0], c[1]) for c in result.candidates} == {
        (bs, lr) for bs in (8, 16, 32) for lr in (1e-3, 1e-4, 1e-5)}
    best = max(c[2] for c in result.candidates)
    first_best = next(c for c in result.candidates if c[2] == best)
    assert (result.config.batch_size, result.config.learning_rate) == first_best[:2]
    assert result.config.epochs == 3


def test_grid_search_not_for_fades():
    with pytest.raises(ConfigError):
        grid_search(_synth_bundle().where(split="train"), StrategyConfig("fades"))


@pytest.mark.parametrize("strategy", ["wce", "dann", "fades", "groupdro", "moe"])
def test_model_roundtrip(tmp_path, strategy):
    b = _synth_bundle()
    model = train(b.where(split="train"), StrategyConfig(strategy, epochs=1))
    model.save(tmp_path / "m.fmpb")
    again = TrainedModel.load(tmp_path / "m.fmpb")
    X = b.features()
    assert np.array_equal(model.predict_proba(X), again.predict_proba(X))
    assert again.config == model.config


def test_history_csv_columns(tmp_path):
    b = _synth_bundle().where(split="train")
    model = train(b, StrategyConfig("groupdro", epochs=3))
    write_history(tmp_path / "h.csv", model)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,dro,worst_group,q_0,q_1,q_2"
    assert len(lines) == 4
