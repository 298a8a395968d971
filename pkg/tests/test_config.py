import pytest

from seqdelta.config import Config, ModelConfig, dump_config, load_config, parse_config
from seqdelta.errors import ConfigError


def test_defaults():
    cfg = parse_config("")
    assert cfg == Config()
    assert cfg.train.lr == 1e-4 and cfg.train.batch_size == 32 and cfg.train.seq_len == 5
    assert cfg.loss.margin == 0.1 and cfg.retrieval.k == 10
    assert load_config(None) == Config()


def test_values_are_typed():
    cfg = parse_config("""
[train]
epochs = 3
lr = 0.01
[model]
kernel_learnable = false
kernel_mode = full_vector
[synthetic]
places = 10
frames = 30
""")
    assert cfg.train.epochs == 3 and cfg.train.lr == 0.01
    assert cfg.model == ModelConfig(kernel_learnable=False, kernel_mode="full_vector")
    assert cfg.synthetic.places == 10


@pytest.mark.parametrize("text", [
    "[train]\nepoch = 3\n",
    "[trian]\nepochs = 3\n",
    "[train]\nepochs = three\n",
    "[model]\nkernel_learnable = maybe\n",
    "[model]\nkernel_mode = sideways\n",
    "[train]\nlr = 0\n",
    "epochs = 3\n",
    "[train]\nepochs = 1\n[train]\nepochs = 2\n",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_roundtrip(tmp_path):
    cfg = parse_config("[loss]\ngamma2 = 0\n[retrieval]\nlm = 3\n")
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.ini") == cfg
