import pytest

from ravit.data import eval_samples, synth_dataset
from ravit.model import RavitConfig
from ravit.training import TrainConfig, train

# One desk-scale model trained on the 50/50 easy/hard mix, shared by the
# acceptance checks that need trained routing behavior.
ADAPTIVE_CFG = RavitConfig(
    sides=(16, 32),
    layers=(1, 2),
    patch=4,
    embed_dim=32,
    hidden_dim=128,
    heads=4,
    num_classes=10,
    loss_weights=(0.5, 0.5),
)
ADAPTIVE_TRAIN = TrainConfig(epochs=22, batch_size=32, lr=2e-3, weight_decay=0.02, seed=1)
ADAPTIVE_DATA_SEED = 42


@pytest.fixture(scope="session")
def adaptive_dataset():
    return synth_dataset(num_classes=10, samples=2000, side=32, easy_frac=0.5, seed=ADAPTIVE_DATA_SEED)


@pytest.fixture(scope="session")
def adaptive_model(adaptive_dataset):
    params, logs = train(ADAPTIVE_CFG, ADAPTIVE_TRAIN, adaptive_dataset)
    return params, logs


@pytest.fixture(scope="session")
def adaptive_test_samples(adaptive_dataset):
    ds = adaptive_dataset
    return eval_samples(ds.test_images, ds.test_labels, ds.mean, ds.std)
