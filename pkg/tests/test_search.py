import math

import numpy as np
import pytest

import tabswarm.search as search_mod
from tabswarm.datasets import synthesize_dataset, stratified_split, fit_scaler, apply_scaler
from tabswarm.pso import SwarmConfig, optimize
from tabswarm.search import (
    HyperSearchSpec,
    build_search_space,
    convergence_csv,
    decode_hparams,
    fitness,
    make_config,
    repair_heads,
    search,
    search_log_csv,
)
from tabswarm.transformer import NonFiniteLoss


def tiny_spec(seed=0, **overrides):
    defaults = dict(
        swarm=SwarmConfig(n_particles=2, max_iters=2, seed=seed),
        learning_rate_bounds=(1e-3, 1e-1),
        n_layers_bounds=(1, 2),
        d_model_menu=(8, 16),
        n_heads_menu=(1, 2),
        batch_size=16,
        epochs=2,
        fitness_epochs=1,
    )
    defaults.update(overrides)
    return HyperSearchSpec(**defaults)


def scaled_data(n=80, seed=3, noise=0.0):
    ds = synthesize_dataset(n, noise, seed)
    train, test = stratified_split(ds, 0.25, seed=1)
    scaler = fit_scaler(train)
    return apply_scaler(scaler, train), apply_scaler(scaler, test)


class TestSpecValidation:
    def test_default_spec_valid(self):
        HyperSearchSpec(swarm=SwarmConfig())

    def test_incompatible_menus_rejected(self):
        with pytest.raises(ValueError):
            HyperSearchSpec(
                swarm=SwarmConfig(), d_model_menu=(16,), n_heads_menu=(3,)
            )

    def test_bad_lr_bounds_rejected(self):
        with pytest.raises(ValueError):
            HyperSearchSpec(swarm=SwarmConfig(), learning_rate_bounds=(0.0, 0.1))


class TestRepair:
    def test_noop_when_heads_divide(self):
        assert repair_heads(8, 64, (1, 2, 4, 8)) == 8
        for h in (1, 2, 4, 8):
            assert repair_heads(h, 16, (1, 2, 4, 8)) == h

    def test_reduces_to_largest_divisor(self):
        assert repair_heads(8, 12, (1, 2, 4, 8)) == 4
        assert repair_heads(4, 6, (1, 2, 4, 8)) == 2

    def test_every_decoded_config_divisible(self):
        spec = HyperSearchSpec(swarm=SwarmConfig(), d_model_menu=(12, 24, 36), n_heads_menu=(1, 2, 4, 8))
        rng = np.random.default_rng(0)
        for _ in range(200):
            hp = decode_hparams(rng.random(4), spec)
            assert hp["d_model"] % hp["n_heads"] == 0
            assert spec.learning_rate_bounds[0] <= hp["learning_rate"] <= spec.learning_rate_bounds[1]
            assert spec.n_layers_bounds[0] <= hp["n_layers"] <= spec.n_layers_bounds[1]

    def test_pinned_dimensions_leave_the_swarm_space(self):
        spec = HyperSearchSpec(
            swarm=SwarmConfig(),
            n_layers_bounds=(2, 2),
            d_model_menu=(16,),
            n_heads_menu=(1, 2),
        )
        space = build_search_space(spec)
        assert [d.name for d in space.dims] == ["learning_rate", "n_heads_index"]
        hp = decode_hparams(np.array([0.5, 1.0]), spec)
        assert hp["n_layers"] == 2
        assert hp["d_model"] == 16
        assert hp["n_heads"] == 2


class TestDecode:
    def test_log_lr_midpoint(self):
        spec = HyperSearchSpec(swarm=SwarmConfig(), learning_rate_bounds=(1e-4, 1e-1))
        hp = decode_hparams(np.array([0.5, 0.0, 0.0, 0.0]), spec)
        assert hp["learning_rate"] == pytest.approx(10**-2.5, rel=1e-12)

    def test_make_config_applies_ff_multiplier(self):
        spec = tiny_spec()
        cfg = make_config(spec, {"learning_rate": 0.01, "n_layers": 2, "d_model": 16, "n_heads": 2}, 5, 7)
        assert cfg.d_ff == 64
        assert cfg.epochs == 5
        assert cfg.seed == 7


class TestFitness:
    def test_returns_negated_accuracy(self):
        spec = tiny_spec()
        fit_train, fit_val = scaled_data()
        value = fitness(np.array([0.5, 0.0, 0.0, 0.0]), spec, fit_train, fit_val, seed=1)
        assert -1.0 <= value <= 0.0

    def test_diverged_training_scores_zero(self, monkeypatch):
        def explode(cfg, train_ds, val_ds):
            raise NonFiniteLoss("synthetic divergence")

        monkeypatch.setattr(search_mod, "train_transformer", explode)
        spec = tiny_spec()
        fit_train, fit_val = scaled_data()
        value = fitness(np.array([0.5, 0.5, 0.5, 0.5]), spec, fit_train, fit_val, seed=1)
        assert value == 0.0


class TestSearch:
    def test_accounting_one_particle_one_iteration(self, monkeypatch):
        trainings = []
        real_train = search_mod.train_transformer

        def counting_train(cfg, train_ds, val_ds):
            trainings.append(cfg.epochs)
            return real_train(cfg, train_ds, val_ds)

        monkeypatch.setattr(search_mod, "train_transformer", counting_train)
        spec = tiny_spec(swarm=SwarmConfig(n_particles=1, max_iters=1, seed=5))
        train_ds, _ = scaled_data()
        result = search(spec, train_ds)
        # 2 fitness trainings (init sweep + 1 step) + 1 final retrain
        assert trainings == [spec.fitness_epochs, spec.fitness_epochs, spec.epochs]
        assert result.evaluations == 2
        assert len(result.eval_log) == 2

    def test_stubbed_objective_recovers_learning_rate_decade(self, monkeypatch):
        target = 1e-2

        def stub(position, spec, fit_train, fit_val, seed=0):
            lr = decode_hparams(position, spec)["learning_rate"]
            return abs(math.log10(lr) - math.log10(target))

        monkeypatch.setattr(search_mod, "fitness", stub)
        spec = tiny_spec(
            swarm=SwarmConfig(n_particles=8, max_iters=15, seed=2),
            learning_rate_bounds=(1e-4, 1e-1),
        )
        train_ds, _ = scaled_data()
        result = search(spec, train_ds)
        lr = result.best_config.learning_rate
        assert 1e-3 <= lr <= 1e-1  # within one decade of 1e-2

    def test_history_is_best_so_far_accuracy(self):
        spec = tiny_spec(seed=4)
        train_ds, _ = scaled_data()
        result = search(spec, train_ds)
        assert all(b >= a for a, b in zip(result.history, result.history[1:]))
        assert result.best_accuracy == result.history[-1]
        assert result.best_accuracy == max(r.accuracy for r in result.eval_log)

    def test_deterministic(self):
        spec = tiny_spec(seed=8)
        train_ds, _ = scaled_data()
        a = search(spec, train_ds)
        b = search(spec, train_ds)
        assert [r.accuracy for r in a.eval_log] == [r.accuracy for r in b.eval_log]
        assert a.best_config == b.best_config
        assert a.final_report.losses == b.final_report.losses

    def test_threaded_matches_serial(self):
        spec = tiny_spec(seed=6)
        train_ds, _ = scaled_data()
        serial = search(spec, train_ds, threads=1)
        threaded = search(spec, train_ds, threads=3)
        assert [r.accuracy for r in serial.eval_log] == [r.accuracy for r in threaded.eval_log]
        assert serial.best_config == threaded.best_config
        for key in serial.final_params:
            assert serial.final_params[key].tobytes() == threaded.final_params[key].tobytes()

    def test_every_logged_config_satisfies_bounds(self):
        spec = tiny_spec(seed=10)
        train_ds, _ = scaled_data()
        result = search(spec, train_ds)
        for record in result.eval_log:
            assert record.d_model % record.n_heads == 0
            assert record.d_model in spec.d_model_menu
            assert spec.n_layers_bounds[0] <= record.n_layers <= spec.n_layers_bounds[1]
            assert record.seconds >= 0.0

    def test_iteration_callback_sees_each_iteration(self):
        spec = tiny_spec(seed=12)
        train_ds, _ = scaled_data()
        seen = []
        search(spec, train_ds, iteration_callback=lambda i, rows: seen.append((i, len(rows))))
        assert seen == [(0, 2), (1, 2), (2, 2)]

    def test_csv_exports(self, tmp_path):
        import io

        spec = tiny_spec(seed=14)
        train_ds, _ = scaled_data()
        result = search(spec, train_ds)
        log_buf, conv_buf = io.StringIO(), io.StringIO()
        search_log_csv(result, log_buf, comment="digest=d seed=14")
        convergence_csv(result, conv_buf)
        log_lines = log_buf.getvalue().splitlines()
        assert log_lines[0] == "# digest=d seed=14"
        assert log_lines[1] == "iteration,particle,lr,n_layers,d_model,n_heads,fitness"
        assert len(log_lines) == 2 + len(result.eval_log)
        conv_lines = conv_buf.getvalue().splitlines()
        assert conv_lines[0] == "iteration,best_accuracy,lr,n_layers,d_model,n_heads"
        assert len(conv_lines) == 1 + len(result.history)
