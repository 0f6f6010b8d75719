import pytest

from lmk3d.config import TrainConfig, format_config, parse_config
from lmk3d.errors import InvalidConfig


def test_defaults_and_overrides():
    cfg = parse_config("""
    # desk run
    epochs = 20
    dims = 16,16,16
    alpha = 0.0   # coordinate loss only
    aug.probabilities = 0.1,0.2,0.3,0.4
    augment = false
    val_count = 15
    """)
    assert cfg.model.epochs == 20 and cfg.model.dims == (16, 16, 16) and cfg.model.alpha == 0.0
    assert cfg.augment.probabilities == (0.1, 0.2, 0.3, 0.4)
    assert cfg.run.augment is False and cfg.run.val_count == 15
    assert parse_config("") == TrainConfig()


def test_round_trip():
    cfg = parse_config("lr = 0.0005\nseed = 7\naugment_copies = 2\n")
    assert parse_config(format_config(cfg)) == cfg
    assert parse_config(format_config(TrainConfig())) == TrainConfig()


@pytest.mark.parametrize(
    "text",
    ["bogus = 1", "aug.bogus = 1", "epochs = many", "dims = 1,2", "augment = maybe", "no equals sign", "alpha = 2", "aug.probabilities = 1,1,1,1"],
)
def test_invalid(text):
    with pytest.raises(InvalidConfig):
        parse_config(text)
