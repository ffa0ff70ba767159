"""Scenario configuration and grid handling."""
import numpy as np
import pytest

from chop_enkf.config import ScenarioConfig, grid_values
from chop_enkf.errors import InvalidConfigError


class TestGridValues:
    def test_inclusive_endpoints(self):
        values = grid_values(0.0, 2.0, 0.1)
        assert values[0] == 0.0 and values[-1] == 2.0
        assert values.size == 21

    def test_default_delta_grid_reaches_intermediate_optima(self):
        values = ScenarioConfig().delta_values()
        assert values.size == 41
        assert 0.15 in values.tolist()

    def test_lambda_grid(self):
        values = ScenarioConfig().lambda_values()
        assert values[0] == 0.05 and values[-1] == 1.0
        assert values.size == 20

    def test_bad_triple(self):
        with pytest.raises(InvalidConfigError):
            grid_values(0.0, 1.0, 0.0)
        with pytest.raises(InvalidConfigError):
            grid_values(1.0, 0.0, 0.1)


class TestScenarioConfig:
    def test_derived_quantities(self):
        sc = ScenarioConfig(window_units=250.0, obs_every=4, dt=0.05)
        assert sc.window_steps == 5000
        assert sc.transition_steps == 5000
        assert sc.n_cycles == 1250

    def test_assimilate_at_t0_adds_a_cycle(self):
        sc = ScenarioConfig(window_units=10.0, obs_every=4, assimilate_at_t0=True)
        assert sc.n_cycles == 10 / 0.05 // 4 + 1

    def test_window_must_divide_dt(self):
        with pytest.raises(InvalidConfigError):
            ScenarioConfig(window_units=0.07)

    def test_method_validation(self):
        with pytest.raises(InvalidConfigError):
            ScenarioConfig(method="annealing")
        with pytest.raises(InvalidConfigError):
            ScenarioConfig(chop_inflation_target="nope")

    def test_basic_validation(self):
        with pytest.raises(InvalidConfigError):
            ScenarioConfig(repetitions=0)
        with pytest.raises(InvalidConfigError):
            ScenarioConfig(obs_every=0)
        with pytest.raises(InvalidConfigError):
            ScenarioConfig(n_e=1)

    def test_dict_roundtrip(self):
        sc = ScenarioConfig(n_l=12, n_e=10, method="chop-sif", label="roundtrip")
        again = ScenarioConfig.from_dict(sc.to_dict())
        assert again == sc

    def test_file_roundtrip(self, tmp_path):
        sc = ScenarioConfig(n_l=12, delta_grid=(0.0, 1.0, 0.5))
        path = str(tmp_path / "scenario.json")
        sc.save(path)
        again = ScenarioConfig.from_file(path)
        assert again == sc

    def test_unknown_keys_rejected(self):
        with pytest.raises(InvalidConfigError):
            ScenarioConfig.from_dict({"n_l": 12, "frobnicate": True})

    def test_scenario_id_stability(self):
        a = ScenarioConfig(n_l=12)
        b = ScenarioConfig(n_l=12)
        c = ScenarioConfig(n_l=13)
        assert a.scenario_id() == b.scenario_id()
        assert a.scenario_id() != c.scenario_id()

    def test_bad_json_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(InvalidConfigError):
            ScenarioConfig.from_file(str(path))
