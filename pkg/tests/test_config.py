import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttbd.config import TRAINING_KEYS, ConfigError, ExperimentConfig
from ttbd.pipeline import ddp_params

overrides = st.fixed_dictionaries({}, optional={
    "seed": st.integers(0, 2 ** 31),
    "batch_size": st.integers(1, 500),
    "batch_rate": st.floats(0, 1),
    "ddp_theta": st.floats(0, 1),
    "attack": st.sampled_from(["badnets", "blended", "sig"]),
    "detect_method": st.sampled_from(["ddp", "teco", "dual"]),
    "shapley_eps_acc": st.floats(0, 1),
})


@settings(max_examples=80)
@given(overrides)
def test_text_round_trip(kw):
    cfg = ExperimentConfig(**kw)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_partial_file_keeps_defaults(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("# comment\n\nseed = 7\nattack=blended\n")
    cfg = ExperimentConfig.load(p)
    assert cfg.seed == 7 and cfg.attack == "blended" and cfg.batch_size == ExperimentConfig().batch_size


@pytest.mark.parametrize("text,match", [("bogus=1\n", "unknown"), ("seed\n", "malformed"),
                                        ("seed=abc\n", "seed"), ("batch_rate=2\n", "batch_rate"),
                                        ("detect_method=x\n", "detect_method")])
def test_bad_entries_rejected(text, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_text(text)


def test_digest_tracks_content():
    a = ExperimentConfig()
    assert a.digest() == ExperimentConfig().digest() and len(a.digest()) == 16
    assert a.with_overrides(seed=1).digest() != a.digest()
    # Defense-only keys leave the training digest alone; training keys change it.
    assert a.with_overrides(ddp_theta=0.5).training_digest() == a.training_digest()
    assert a.with_overrides(poison_rate=0.2).training_digest() != a.training_digest()
    assert "seed" in TRAINING_KEYS and a.with_overrides(seed=3).training_digest() != a.training_digest()


def test_overrides_skip_none():
    assert ExperimentConfig().with_overrides(seed=None, attack="sig").attack == "sig"


def test_ddp_views_parsed():
    views = ddp_params(ExperimentConfig(ddp_views="mean/none/0.015, max/zscore/0.025"))
    assert [(v.summary, v.normalize, v.budget(176)) for v in views] == [("mean", "none", 2), ("max", "zscore", 4)]
    for bad in ("mean/none", "median/none/0.1", "mean/none/x"):
        with pytest.raises(ConfigError):
            ddp_params(ExperimentConfig(ddp_views=bad))
