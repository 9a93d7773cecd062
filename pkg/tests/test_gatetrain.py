import math

import numpy as np
import pytest
from dataclasses import replace

from infoprune.errors import EmptyLayer, InvalidConfig, InvalidThreshold, NonFiniteLoss, ZeroSpectrum
from infoprune.gatetrain import (
    AdamW,
    TrainConfig,
    apply_pruning,
    compute_loss,
    effective_retained,
    initial_temperatures,
    learning_rate,
    masked_gates,
    prune_heads,
    total_loss_and_zeta_grad,
    train_gates,
)
from infoprune.spectral import erank
from infoprune.toymodel import Dataset, GateSet, ModelConfig, forward, init_model, make_synthetic_task, mse

SMALL = ModelConfig(layers=2, heads=2, model_dim=16, ffn_hidden=32, seq_len=8, seed=1)


def probe(cfg, seed=0, batch=4):
    return np.random.default_rng(seed).standard_normal((batch, cfg.seq_len, cfg.model_dim))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.alpha, cfg.beta, cfg.gamma, cfg.learning_rate) == (0.01, 0.01, 0.1, 1e-2)
        assert cfg.train_weights_too is True

    def test_every_violation_listed(self):
        with pytest.raises(InvalidConfig) as exc:
            TrainConfig(alpha=-1, prune_threshold=1.0, lr_decay="exp", ib_scope="all")
        assert len(exc.value.violations) == 4


class TestComputeLoss:
    def test_unit_gates_zero_terms(self):
        model = init_model(SMALL)
        out, trace = forward(model, probe(SMALL))
        gates = GateSet(np.full((2, 2), 50.0))
        loss = compute_loss(trace, 0.0, gates, TrainConfig())
        assert abs(loss.erank_term) <= 1e-9 and abs(loss.ks_term) <= 1e-9

    def test_l1(self):
        cfg = ModelConfig(layers=1, heads=3, model_dim=6, ffn_hidden=4, seq_len=5)
        gates = GateSet(np.array([[1.0, -2.0, 3.0]]))
        _, trace = forward(init_model(cfg), probe(cfg), gates)
        loss = compute_loss(trace, 0.25, gates, TrainConfig())
        assert loss.l1 == 6.0
        expected = 0.25 + 0.01 * 6.0 + 0.01 * loss.erank_term + 0.1 * loss.ks_term
        assert loss.total == expected

    def test_closed_gate_drops_erank(self):
        model = init_model(SMALL)
        x = probe(SMALL)
        gates = GateSet(np.array([[-60.0, 60.0], [60.0, 60.0]]))
        _, trace = forward(model, x, gates)
        loss = compute_loss(trace, 0.0, gates, TrainConfig())
        lt = trace.layers[0]
        direct = erank(np.linalg.svd(lt.zs[-1], compute_uv=False)) - erank(np.linalg.svd(lt.z[-1], compute_uv=False))
        assert direct < 0
        assert loss.erank_term < 0
        layer1 = trace.layers[1]
        direct1 = erank(np.linalg.svd(layer1.zs[-1], compute_uv=False)) - erank(
            np.linalg.svd(layer1.z[-1], compute_uv=False)
        )
        assert loss.erank_term == pytest.approx(direct + direct1, abs=1e-9)

    def test_batch_scope_and_mean(self):
        model = init_model(SMALL)
        gates = GateSet(np.array([[0.0, 1.0], [2.0, -1.0]]))
        _, trace = forward(model, probe(SMALL), gates)
        s = compute_loss(trace, 0.0, gates, TrainConfig(ib_scope="batch"))
        m = compute_loss(trace, 0.0, gates, TrainConfig(ib_scope="batch", aggregate="mean"))
        assert m.erank_term == pytest.approx(s.erank_term / 2)
        assert m.ks_term == pytest.approx(s.ks_term / 2)

    def test_dead_layer(self):
        model = init_model(SMALL)
        for lp in model.layers:
            lp.wv[:] = 0.0
        gates = GateSet.init(SMALL)
        _, trace = forward(model, probe(SMALL), gates)
        with pytest.raises(ZeroSpectrum):
            compute_loss(trace, 0.0, gates, TrainConfig())


@pytest.mark.parametrize("scope", ["step", "batch"])
def test_total_zeta_gradient_fd(scope):
    model = init_model(SMALL)
    rng = np.random.default_rng(3)
    gates = GateSet(rng.normal(0.5, 1.0, (2, 2)))
    x = probe(SMALL, 3, 3)
    y = rng.standard_normal(x.shape)
    cfg = TrainConfig(ib_scope=scope, erank_log=scope == "batch")
    _, trace = forward(model, x, gates)
    temps = initial_temperatures(trace, cfg)
    _, grad = total_loss_and_zeta_grad(model, gates, x, y, cfg, temps)
    h = 1e-5
    fd = np.zeros_like(grad)
    for idx in np.ndindex(grad.shape):
        gp, gm = gates.copy(), gates.copy()
        gp.zeta[idx] += h
        gm.zeta[idx] -= h
        up = total_loss_and_zeta_grad(model, gp, x, y, cfg, temps)[0].total
        dn = total_loss_and_zeta_grad(model, gm, x, y, cfg, temps)[0].total
        fd[idx] = (up - dn) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-10)


class TestAdamW:
    def test_first_step(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        opt = AdamW(p)
        opt.step({"w": np.array([0.3, -4.0, 0.0])}, 0.1)
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 0.5], atol=1e-7)

    def test_weight_decay_decoupled(self):
        p = {"w": np.array([2.0])}
        AdamW(p, weight_decay=0.5).step({"w": np.array([0.0])}, 0.1)
        assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05))

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        p = {"w": rng.standard_normal(4)}
        ref = p["w"].copy()
        m = v = np.zeros(4)
        opt = AdamW(p, 0.9, 0.999, 1e-8, 0.01)
        for t in range(1, 6):
            g = rng.standard_normal(4)
            opt.step({"w": g}, 0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.05 * 0.01 * ref
            ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-13)


def test_learning_rate_schedules():
    cfg = TrainConfig(epochs=2, steps_per_epoch=10, learning_rate=0.1)
    assert learning_rate(cfg, 0) == 0.1
    assert learning_rate(cfg, 10) == pytest.approx(0.05)
    halving = replace(cfg, lr_decay="step_halving")
    assert [learning_rate(halving, s) for s in (0, 9, 10)] == [0.1, 0.1, 0.05]
    assert learning_rate(replace(cfg, lr_decay="none"), 17) == 0.1


class TestTrainGates:
    def test_history_and_determinism(self):
        ds = make_synthetic_task(SMALL, 5, [(0, 1)], 16)
        cfg = TrainConfig(epochs=2, steps_per_epoch=3, batch_size=4, seed=7)
        a = train_gates(init_model(SMALL), ds, cfg)
        b = train_gates(init_model(SMALL), ds, cfg)
        assert len(a.history) == 6
        assert a.history == b.history
        assert a.gates.zeta.tobytes() == b.gates.zeta.tobytes()
        assert set(a.history[0]) == {"step", "task", "l1", "eRankTerm", "ksTerm", "total", "lr"}

    def test_inputs_untouched(self):
        model = init_model(SMALL)
        before = model.layers[0].wq.copy()
        gates = GateSet.init(SMALL)
        ds = make_synthetic_task(SMALL, 5, (), 8)
        train_gates(model, ds, TrainConfig(epochs=1, steps_per_epoch=2), gates)
        assert np.array_equal(model.layers[0].wq, before)
        assert np.all(gates.zeta == 4.0)

    def test_zero_gradient_fixpoint(self):
        ds = Dataset(np.zeros((4, 8, 16)), np.zeros((4, 8, 16)))
        cfg = TrainConfig(alpha=0, beta=0, gamma=0, train_weights_too=False, epochs=1, steps_per_epoch=5)
        res = train_gates(init_model(SMALL), ds, cfg, GateSet(np.array([[1.0, -1.0], [0.5, 2.0]])))
        np.testing.assert_array_equal(res.gates.zeta, [[1.0, -1.0], [0.5, 2.0]])

    def test_l1_shrinkage(self):
        ds = make_synthetic_task(SMALL, 5, (), 16)
        cfg = TrainConfig(alpha=1.0, epochs=2, steps_per_epoch=100, train_weights_too=False)
        res = train_gates(init_model(SMALL), ds, cfg)
        assert np.mean(np.abs(res.gates.zeta)) < 4.0

    def test_non_finite(self):
        ds = make_synthetic_task(SMALL, 5, (), 8)
        ds.targets[0, 0, 0] = np.inf
        cfg = TrainConfig(epochs=1, steps_per_epoch=2, batch_size=8, beta=0, gamma=0)
        with pytest.raises(NonFiniteLoss) as exc:
            train_gates(init_model(SMALL), ds, cfg)
        assert exc.value.step == 0


class TestPruneHeads:
    def test_all_retained(self):
        d = prune_heads(GateSet.init(SMALL), 0.5)
        assert d.pruned_ratio == 0.0 and len(d.retained) == 4

    def test_sigmoid_table(self):
        d = prune_heads(GateSet(np.array([[-1.0, 1.0], [1.0, -1.0]])), 0.5)
        assert d.retained == frozenset({(0, 1), (1, 0)})
        assert d.per_layer_counts == (1, 1) and d.pruned_ratio == 0.5

    def test_nested(self):
        gates = GateSet(np.random.default_rng(0).normal(0, 2, (3, 4)))
        assert prune_heads(gates, 0.5).retained <= prune_heads(gates, 0.2).retained

    def test_idempotent(self):
        gates = GateSet(np.random.default_rng(1).normal(0, 2, (3, 4)))
        assert prune_heads(gates, 0.4) == prune_heads(gates, 0.4)

    @pytest.mark.parametrize("z", [0.0, 1.0, -0.1, 2.0])
    def test_threshold_range(self, z):
        with pytest.raises(InvalidThreshold):
            prune_heads(GateSet.init(SMALL), z)

    def test_empty_layer_guard(self):
        d = prune_heads(GateSet(np.array([[-3.0, -1.0], [2.0, 2.0]])), 0.5)
        assert effective_retained(d) == [[1], [0, 1]]
        with pytest.raises(EmptyLayer):
            effective_retained(d, empty_layer="raise")


class TestApplyPruning:
    def test_equivalence(self):
        cfg = ModelConfig(layers=2, heads=4, model_dim=16, ffn_hidden=32, seq_len=8, seed=2)
        model = init_model(cfg)
        gates = GateSet(np.random.default_rng(5).normal(0, 2, (2, 4)))
        d = prune_heads(gates, 0.5)
        pruned = apply_pruning(model, d)
        for s in range(10):
            x = probe(cfg, s, 2)
            ref, _ = forward(model, x, masked_gates(d))
            out, _ = forward(pruned, x)
            assert np.max(np.abs(out - ref)) <= 1e-9

    def test_bitwise_with_binary_gates(self):
        model = init_model(SMALL)
        d = prune_heads(GateSet(np.array([[40.0, -40.0], [-40.0, 40.0]])), 0.5)
        x = probe(SMALL)
        ref, _ = forward(model, x, [np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        out, _ = forward(apply_pruning(model, replace(d, gate_values=np.array([[1.0, 0.0], [0.0, 1.0]]))), x)
        assert out.tobytes() == ref.tobytes()

    def test_param_count(self):
        cfg = ModelConfig(layers=2, heads=4, model_dim=16, ffn_hidden=32, seq_len=8)
        model = init_model(cfg)
        zeta = np.full((2, 4), 4.0)
        zeta[1, 2] = -4.0
        pruned = apply_pruning(model, prune_heads(GateSet(zeta), 0.5))
        dk = cfg.head_dim
        assert model.param_count() - pruned.param_count() == 3 * 16 * dk + dk * 16
        assert pruned.layers[1].heads == (0, 1, 3)

    def test_retain_all_only_folds(self):
        model = init_model(SMALL)
        gates = GateSet.init(SMALL)
        pruned = apply_pruning(model, prune_heads(gates, 0.5))
        assert pruned.layers[0].wq.tobytes() == model.layers[0].wq.tobytes()
        dk = SMALL.head_dim
        np.testing.assert_array_equal(pruned.layers[0].wo[:dk], model.layers[0].wo[:dk] * gates.values()[0, 0])

    def test_already_pruned(self):
        model = init_model(SMALL)
        d = prune_heads(GateSet(np.array([[4.0, -4.0], [4.0, 4.0]])), 0.5)
        with pytest.raises(InvalidConfig):
            apply_pruning(apply_pruning(model, d), d)
