import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metasplit import config
from metasplit.config import ExperimentConfig, load_config
from metasplit.nncore import ConfigError


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.meta.tasks, cfg.meta.ways, cfg.meta.shots, cfg.meta.epochs) == (20, 10, 5, 1000)
    assert (cfg.meta.eta, cfg.meta.beta, cfg.cp.alpha) == (0.001, 0.01, 0.1)
    assert math.isinf(cfg.channel.snr_db) and cfg.channel.is_identity


def test_file_then_overrides(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[experiment]\nmode = sl\ncut = 2\n\n[meta]\nY = 5\nK = 1\neta = 0.4\n\n"
                    "[channel]\nsnr_db = 10\nfading = true\nchannel_seed = 3\n")
    cfg = load_config(path, ["meta.K=3", "seed=9"])
    assert cfg.mode == "sl" and cfg.cut == 2 and cfg.seed == 9 and cfg.meta.seed == 9
    assert cfg.meta.ways == 5 and cfg.meta.shots == 3 and cfg.meta.eta == 0.4
    assert cfg.channel.snr_db == 10.0 and cfg.channel.fading and cfg.channel.seed == 3


def test_quant_levels_none_and_int():
    assert load_config(overrides=["channel.quant_levels=16"]).channel.quant_levels == 16
    assert load_config(overrides=["channel.quant_levels=none"]).channel.quant_levels is None


@pytest.mark.parametrize("bad", ["meta.nope=1", "bogus.x=1", "mode=cnn", "cut=4", "noequals",
                                 "channel.fading=maybe"])
def test_bad_overrides(bad):
    with pytest.raises((ConfigError, ValueError)):
        load_config(overrides=[bad])


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["dnn", "sl", "msl"]), st.integers(1, 3), st.integers(0, 10**6),
       st.floats(0.0001, 1.0), st.one_of(st.just(math.inf), st.floats(-10, 40)), st.booleans())
def test_ini_round_trip(mode, cut, seed, eta, snr, fading):
    cfg = load_config(overrides=[f"mode={mode}", f"cut={cut}", f"seed={seed}", f"meta.eta={eta!r}",
                                 f"channel.snr_db={snr!r}", f"channel.fading={fading}"])
    assert config.apply_overrides(ExperimentConfig(), config.parse_text(config.to_ini(cfg))) == cfg
    assert config.from_flat(config.flatten(cfg)) == cfg


def test_inline_comments(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[experiment]\nmode = sl               ; dnn | sl | msl\n\n"
                    "[channel]\nsnr_db = inf   ; no noise\nquant_levels = none\n")
    cfg = load_config(path)
    assert cfg.mode == "sl" and math.isinf(cfg.channel.snr_db)
