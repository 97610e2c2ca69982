import pytest

from fedacross.data import DomainConfig, generate_domain, make_glyph_bank, split
from fedacross.federation.server import PretrainConfig, server_pretrain
from fedacross.harness.config import parse_config
from fedacross.model import ModelConfig
from fedacross.numerics import make_rng
from fedacross.training import TrainConfig


class World:
    """Four classes of 8x8 glyphs, one source and three shifted targets."""

    def __init__(self):
        bank = make_glyph_bank(4, 8, seed=0)
        self.source = generate_domain(bank, DomainConfig(noise_std=0.02, seed=1), 30, instance_seed=1)
        shifts = [DomainConfig(0.2, 0.7, 0.05, 10.0, seed=2), DomainConfig(-0.1, 1.2, 0.04, -8.0, seed=3),
                  DomainConfig(0.1, 0.8, 0.08, 5.0, seed=4)]
        self.targets = [split(generate_domain(bank, d, 20, instance_seed=10 + i), (0.5, 0.5), make_rng([5, i]))
                        for i, d in enumerate(shifts)]
        cfg = PretrainConfig(ModelConfig(in_dim=64, hidden=(32,), embed_dim=8, n_classes=4),
                             TrainConfig(epochs=30, batch_size=32, lr=0.05), seed=0)
        self.loss: list[float] = []
        self.params, self.protos = server_pretrain(self.source, cfg, self.loss)


@pytest.fixture(scope="session")
def world():
    return World()


SMALL_RUN = """
[experiment]
seed = 0
repetitions = 2
k = 3
k_values = 0, 3
class_subset = 4
rounds = 1

[model]
image_size = 8
n_classes = 4
hidden = 32
embed_dim = 8

[server]
epochs = 20
batch_size = 32
lr = 0.05

[client]
epochs = 20

[data]
source_per_class = 20
target_per_class = 16

[client.0]
brightness_shift = 0.2
contrast_scale = 0.7
noise_std = 0.05
rotation_deg = 10
seed = 7

[client.1]
brightness_shift = -0.1
contrast_scale = 1.2
noise_std = 0.04
seed = 8
"""


@pytest.fixture
def small_cfg():
    return parse_config(SMALL_RUN)
