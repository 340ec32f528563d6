import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from reviewbench.model import HashingSentenceEncoder
from reviewbench.pipeline import TrainingPair
from reviewbench.trainer import TrainConfig

PAIRS = [("a cosy red scarf for winter", "red wool scarf", "All_Beauty"),
         ("fun shooter game with friends", "multiplayer shooter game", "Video_Games"),
         ("soft blanket for my baby", "baby blanket cotton", "Baby_Products"),
         ("stapler that never jams", "heavy duty stapler", "Office_Products")]

SMALL = dict(hidden_dim=8, dim=6, n_buckets=128, batch_size=4, epochs=1)


def test_get_params_mirrors_config():
    enc = HashingSentenceEncoder(**SMALL)
    params = enc.get_params()
    assert params["dim"] == 6 and params["tau"] == 0.05 and params["lam"] == 0.1
    assert enc.to_config() == TrainConfig(**SMALL)
    assert HashingSentenceEncoder.from_config(enc.to_config()).get_params() == params


def test_clone_is_unfitted():
    enc = HashingSentenceEncoder(**SMALL).fit(PAIRS)
    fresh = clone(enc)
    assert fresh.get_params() == enc.get_params()
    with pytest.raises(NotFittedError):
        fresh.transform(["x"])


def test_fit_transform_unit_rows():
    enc = HashingSentenceEncoder(**SMALL)
    X = enc.fit(PAIRS).transform(["a red scarf", "", "stapler"])
    assert X.shape == (3, 6)
    np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-12)
    assert len(enc.history_) == 2


def test_fit_accepts_training_pairs():
    pairs = [TrainingPair(c, m, f"I{i}", d, i) for i, (c, m, d) in enumerate(PAIRS)]
    a = HashingSentenceEncoder(**SMALL).fit(pairs).transform(["red scarf"])
    b = HashingSentenceEncoder(**SMALL).fit(PAIRS).transform(["red scarf"])
    np.testing.assert_array_equal(a, b)


def test_zero_epochs_is_random_encoder():
    enc = HashingSentenceEncoder(**{**SMALL, "epochs": 0}).fit(PAIRS)
    assert enc.history_ == []
    assert enc.transform(["x"]).shape == (1, 6)


def test_rejects_malformed_input():
    with pytest.raises((TypeError, ValueError)):
        HashingSentenceEncoder(**SMALL).fit([("only one field",)])
