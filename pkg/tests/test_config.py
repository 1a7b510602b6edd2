import textwrap

import numpy as np
import pytest

from spell_lab.config import (SCENARIOS, ConfigError, config_from_text, load_config, load_scenario,
                              ring_mixture)

MINIMAL = """\
name: tiny
seed: 1
n_steps: 10
mixture:
  ring: {n_modes: 3, radius: 2.0, std: 0.5}
"""


def parse(text, **kw):
    return config_from_text(textwrap.dedent(text), source="cfg.yaml", **kw)


class TestLoading:
    @pytest.mark.parametrize("name", SCENARIOS)
    def test_bundled_scenarios(self, name):
        cfg = load_scenario(name)
        assert cfg.name == name
        cfg.build_mixture()

    def test_minimal_defaults(self):
        cfg = parse(MINIMAL)
        assert cfg.batch_size == 1 and cfg.n_batches == 1 and cfg.radius == 0.0
        assert cfg.schedule == {"beta_min": 0.1, "beta_max": 20.0, "t_min": 1e-3}
        assert cfg.shields.source == "none" and cfg.shields.n_probe == 2
        assert cfg.k == 3 and cfg.trace and cfg.metrics

    def test_from_file(self, tmp_path):
        (tmp_path / "c.yaml").write_text(MINIMAL)
        assert load_config(tmp_path / "c.yaml").name == "tiny"

    def test_mixture_path(self, tmp_path):
        (tmp_path / "mix.yaml").write_text("dim: 1\ncomponents:\n  - {weight: 1.0, mean: [0.0], std: 1.0}\n")
        (tmp_path / "c.yaml").write_text("mixture: mix.yaml\n")
        assert load_config(tmp_path / "c.yaml").build_mixture().dim == 1

    def test_hash_stable_and_sensitive(self):
        a, b = parse(MINIMAL), parse(MINIMAL)
        assert a.config_hash() == b.config_hash()
        b.seed = 2
        assert a.config_hash() != b.config_hash()

    def test_mixed_mode_accumulates_by_default(self):
        cfg = parse(MINIMAL + "spell: {radius: 1.0, mode: mixed}\n")
        assert cfg.accumulate

    def test_ring_classes(self):
        mix = ring_mixture(4, 1.0, 0.1, classes=[{"label": 0, "weight": 0.5, "modes": [0]},
                                                 {"label": 1, "weight": 0.5}])
        assert mix.n_components == 5
        np.testing.assert_allclose(mix.weights, [0.5, 0.125, 0.125, 0.125, 0.125])
        assert mix.conditional(0).n_components == 1


class TestDiagnostics:
    def _err(self, text):
        with pytest.raises(ConfigError) as err:
            parse(text)
        return err.value

    def test_unknown_top_key(self):
        err = self._err(MINIMAL + "bogus: 3\n")
        assert err.field == "bogus" and err.line == 6
        assert "cfg.yaml:6" in str(err)

    def test_unknown_nested_key(self):
        err = self._err(MINIMAL + "spell:\n  radius: 1.0\n  lamda: 2\n")
        assert err.field == "spell.lamda" and err.line == 8

    def test_wrong_type(self):
        err = self._err(MINIMAL.replace("n_steps: 10", "n_steps: ten"))
        assert err.field == "n_steps" and err.line == 3

    def test_non_integer(self):
        assert self._err(MINIMAL.replace("seed: 1", "seed: 1.5")).field == "seed"

    def test_bad_mode(self):
        err = self._err(MINIMAL + "spell: {radius: 1.0, mode: sideways}\n")
        assert err.field == "spell.mode"

    def test_negative_radius(self):
        assert self._err(MINIMAL + "spell: {radius: -1}\n").field == "spell.radius"

    def test_missing_mixture(self):
        assert self._err("name: x\n").field == "mixture"

    def test_missing_file(self):
        err = self._err(MINIMAL + "shields: {source: file, path: nowhere.csv}\n")
        assert err.field == "shields.path" and "does not exist" in str(err)

    def test_unknown_label(self):
        assert self._err(MINIMAL + "guidance: {label: 7, gamma: 2}\n").field == "guidance.label"

    def test_gamma_below_one(self):
        assert self._err(MINIMAL + "guidance: {gamma: 0.5}\n").field == "guidance.gamma"

    def test_empty_sweep_axis(self):
        err = self._err(MINIMAL + "sweep:\n  radius: []\n")
        assert err.field == "sweep.radius" and err.line == 7

    def test_sweep_item(self):
        err = self._err(MINIMAL + "sweep:\n  radius: [0, x]\n")
        assert err.field == "sweep.radius[1]"

    def test_n_probe_sweep_needs_index(self):
        assert self._err(MINIMAL + "sweep: {n_probe: [1, 2]}\n").field == "sweep.n_probe"

    def test_duplicate_key(self):
        err = self._err(MINIMAL + "seed: 3\n")
        assert err.field == "seed" and err.line == 6

    def test_yaml_syntax(self):
        err = self._err("name: [unclosed\nseed: 1\n")
        assert err.line is not None and "YAML" in str(err)

    def test_ring_mode_out_of_range(self):
        text = "mixture:\n  ring:\n    n_modes: 2\n    radius: 1\n    std: 1\n    classes:\n      - {label: 0, weight: 1, modes: [5]}\n"
        assert self._err(text).field == "mixture.ring.classes[0].modes[0]"

    def test_inline_center_dimension(self):
        err = self._err(MINIMAL + "shields:\n  source: inline\n  centers: [[0, 0, 0]]\n")
        assert err.field == "shields.centers[0]"

    def test_accumulate_with_index(self):
        err = self._err(MINIMAL + "spell: {radius: 1, mode: mixed}\n"
                        "shields: {source: sampled, count: 10, use_index: true}\n")
        assert err.field == "spell.accumulate"

    def test_bad_index_path_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            parse(MINIMAL + f"shields: {{source: index, path: {tmp_path / 'none.ivf'}}}\n")
