"""Multilayer perceptron for binary classification, trained with AdamW on BCE.

Hidden layers are Linear + ReLU + inverted dropout; the output is a single
logit passed through the logistic function. Evaluation is deterministic.
"""
import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from cardioradiomics.errors import ConfigError, DataError, DimensionMismatch, InvalidNSvd, IoError, NonFiniteLoss

# hyperparameter ranges searched over
LR_RANGE = (1e-4, 1e-2)
EPOCH_LATTICE = tuple(range(100, 401, 25))
LAYER_RANGE = (1, 12)
UNIT_RANGE = (8, 512)
DROPOUT_RANGE = (0.0, 0.5)

PROBABILITY_EPS = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    hidden_layers: int = 2
    hidden_units: int = 64
    dropout: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 0   # 0 trains full batch
    seed: int = 0
    n_svd: int = 3
    selector: str = "combined"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        from cardioradiomics.classifier.table import SELECTORS
        if self.selector not in SELECTORS:
            raise ConfigError("selector must be one of {}, got {!r}".format(SELECTORS, self.selector))
        if self.n_svd not in (1, 2, 3):
            raise InvalidNSvd("n_svd must be 1, 2 or 3, got {}".format(self.n_svd))
        if self.learning_rate < 0 or self.epochs < 0 or self.weight_decay < 0 or self.batch_size < 0:
            raise ConfigError("negative training parameter in {}".format(self))

    def check_ranges(self):
        """Enforces the searched hyperparameter ranges."""
        problems = []
        if not LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1]:
            problems.append("learning_rate {} outside {}".format(self.learning_rate, LR_RANGE))
        if self.epochs not in EPOCH_LATTICE:
            problems.append("epochs {} not in 100..400 step 25".format(self.epochs))
        if not LAYER_RANGE[0] <= self.hidden_layers <= LAYER_RANGE[1]:
            problems.append("hidden_layers {} outside {}".format(self.hidden_layers, LAYER_RANGE))
        if not UNIT_RANGE[0] <= self.hidden_units <= UNIT_RANGE[1]:
            problems.append("hidden_units {} outside {}".format(self.hidden_units, UNIT_RANGE))
        if not DROPOUT_RANGE[0] <= self.dropout <= DROPOUT_RANGE[1]:
            problems.append("dropout {} outside {}".format(self.dropout, DROPOUT_RANGE))
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


class MlpModel(object):
    def __init__(self, weights, biases, dropout=0.0):
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        self.dropout = float(dropout)
        if not self.weights or len(self.weights) != len(self.biases):
            raise DimensionMismatch("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape[0] != w.shape[1]:
                raise DimensionMismatch("layer {} has weight {} and bias {}".format(i, w.shape, b.shape))
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionMismatch("layer {} input {} does not chain".format(i, w.shape[0]))
        if self.weights[-1].shape[1] != 1:
            raise DimensionMismatch("output layer must have a single unit")

    @classmethod
    def create(cls, d_in, hidden_layers=2, hidden_units=64, dropout=0.0, seed=0):
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        sizes = [d_in] + [hidden_units]*hidden_layers + [1]
        weights = [rng.normal(0.0, np.sqrt(2.0/a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(weights, [np.zeros(b) for b in sizes[1:]], dropout)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def d_in(self):
        return self.weights[0].shape[0]

    def copy(self):
        return MlpModel(self.weights, self.biases, self.dropout)

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d_in:
            raise DimensionMismatch("model expects {} features, got {}".format(self.d_in, X.shape[-1]))
        return X

    def _forward(self, X, train_mode, rng):
        cache = []
        a = X
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = a @ w + b
            r = np.maximum(h, 0.0)
            mask = None
            if train_mode and self.dropout > 0:
                mask = (rng.random(r.shape) >= self.dropout)/(1.0 - self.dropout)
                r = r*mask
            cache.append((a, h, mask))
            a = r
        z = (a @ self.weights[-1] + self.biases[-1])[:, 0]
        return z, a, cache

    def forward(self, x, train_mode=False, rng=None):
        """Probability for one row or an (n, D) batch."""
        X = self._check(x)
        single = X.ndim == 1
        z, _, _ = self._forward(np.atleast_2d(X), train_mode, rng)
        p = np.clip(expit(z), PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)
        return float(p[0]) if single else p

    def loss_and_gradients(self, X, y, train_mode=False, rng=None):
        """Mean BCE and its gradients, ordered like ``parameters()``."""
        X = self._check(np.atleast_2d(X))
        y = np.asarray(y, dtype=np.float64)
        z, a, cache = self._forward(X, train_mode, rng)
        loss = float(np.mean(np.logaddexp(0.0, z) - y*z))

        dz = ((expit(z) - y)/len(y))[:, None]
        grads = [None]*(2*len(self.weights))
        grads[-2] = a.T @ dz
        grads[-1] = dz.sum(axis=0)
        da = dz @ self.weights[-1].T
        for i in reversed(range(len(cache))):
            x_in, h, mask = cache[i]
            if mask is not None:
                da = da*mask
            dh = da*(h > 0)
            grads[2*i] = x_in.T @ dh
            grads[2*i + 1] = dh.sum(axis=0)
            da = dh @ self.weights[i].T
        return loss, grads

    def save(self, path):
        arrays = {"dropout": np.array(self.dropout)}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays["w{}".format(i)] = w
            arrays["b{}".format(i)] = b
        try:
            with open(str(path), "wb") as f:
                np.savez(f, **arrays)
        except OSError as exc:
            raise IoError("cannot write model {}: {}".format(path, exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            with np.load(str(path)) as data:
                n = sum(1 for k in data.files if k.startswith("w"))
                return cls([data["w{}".format(i)] for i in range(n)],
                           [data["b{}".format(i)] for i in range(n)],
                           float(data["dropout"]))
        except OSError as exc:
            raise IoError("cannot read model {}: {}".format(path, exc)) from exc


class AdamW(object):
    """Decoupled weight decay: theta *= 1 - lr*wd, then the Adam step. Biases are not decayed."""

    def __init__(self, params, lr, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if i % 2 == 0:
                p *= 1.0 - self.lr*self.weight_decay
            self.m[i] = self.beta1*self.m[i] + (1.0 - self.beta1)*g
            self.v[i] = self.beta2*self.v[i] + (1.0 - self.beta2)*g*g
            p -= self.lr*(self.m[i]/c1)/(np.sqrt(self.v[i]/c2) + self.eps)


def _arrays(data):
    X = getattr(data, "X", data)
    return np.asarray(X, dtype=np.float64)


def train(m: MlpModel, data, cfg: TrainConfig):
    """Returns ``(trained copy, per-epoch mean loss)``; the input model is untouched."""
    X = _arrays(data)
    y = np.asarray(data.labels, dtype=np.float64)
    if np.isnan(X).any():
        raise DataError("training data has missing values; standardize first")
    model = m.copy()
    model._check(X)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps)
    n = len(y)
    losses = []
    for epoch in range(cfg.epochs):
        if cfg.batch_size and cfg.batch_size < n:
            order = rng.permutation(n)
            batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        else:
            batches = [np.arange(n)]
        total = 0.0
        for idx in batches:
            loss, grads = model.loss_and_gradients(X[idx], y[idx], train_mode=True, rng=rng)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLoss("loss became {} at epoch {} (learning rate {}, layers {})".format(
                    loss, epoch, cfg.learning_rate, model.layer_sizes))
            opt.step(grads)
            total += loss*len(idx)
        losses.append(total/n)
    return model, np.array(losses)


def predict(m: MlpModel, data):
    """Probabilities and hard labels; label 1 iff p >= 0.5."""
    p = np.atleast_1d(m.forward(_arrays(data)))
    return p, (p >= 0.5).astype(np.int64)


def _toy(n=10, seed=0):
    from cardioradiomics.classifier.table import FeatureTable
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    X = rng.normal(0, 0.5, size=(n, 2)) + np.where(labels[:, None] == 1, 2.0, -2.0)
    return FeatureTable(["t{}".format(i) for i in range(n)], ["a", "b"], X, labels)


def test_zero_model_outputs_half():
    m = MlpModel([np.zeros((3, 4)), np.zeros((4, 1))], [np.zeros(4), np.zeros(1)])
    assert m.forward(np.array([1.0, -2.0, 3.0])) == 0.5
    p, labels = predict(m, np.ones((5, 3)))
    assert np.all(p == 0.5) and np.all(labels == 1)


def test_single_linear_layer_closed_form():
    w = np.array([[0.5], [-1.0]])
    m = MlpModel([w], [np.array([0.25])])
    x = np.array([2.0, 0.5])
    assert abs(m.forward(x) - 1.0/(1.0 + np.exp(-(1.0 - 0.5 + 0.25)))) < 1e-15


def test_eval_is_deterministic_and_bounded():
    m = MlpModel.create(4, 3, 16, dropout=0.4, seed=1)
    X = np.random.default_rng(2).normal(size=(20, 4))*50
    assert np.array_equal(m.forward(X), m.forward(X))
    p = m.forward(X)
    assert np.all((p > 0) & (p < 1))


def test_dimension_mismatch():
    import pytest
    m = MlpModel.create(4, 1, 8)
    with pytest.raises(DimensionMismatch):
        m.forward(np.ones(5))
    with pytest.raises(DimensionMismatch):
        MlpModel([np.zeros((3, 4)), np.zeros((5, 1))], [np.zeros(4), np.zeros(1)])


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    h = 1e-5
    for trial in range(20):
        d = int(rng.integers(1, 6))
        m = MlpModel.create(d, int(rng.integers(1, 4)), int(rng.integers(2, 17)), seed=trial)
        for b in m.biases:
            b += rng.normal(0, 0.1, size=b.shape)
        X = rng.normal(size=(int(rng.integers(1, 9)), d))
        y = rng.integers(0, 2, size=len(X))
        _, grads = m.loss_and_gradients(X, y)
        for p, g in zip(m.parameters(), grads):
            numeric = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = m.loss_and_gradients(X, y)[0]
                p[idx] = old - h
                down = m.loss_and_gradients(X, y)[0]
                p[idx] = old
                numeric[idx] = (up - down)/(2*h)
            scale = max(np.max(np.abs(g) + np.abs(numeric)), 1e-12)
            assert np.max(np.abs(g - numeric))/scale < 1e-4


def test_adamw_zero_gradient_decay_is_exact():
    m = MlpModel.create(3, 2, 8, seed=4)
    before = [w.copy() for w in m.weights]
    biases = [b.copy() for b in m.biases]
    opt = AdamW(m.parameters(), lr=1e-2, weight_decay=0.01)
    opt.step([np.zeros_like(p) for p in m.parameters()])
    for w, w0 in zip(m.weights, before):
        assert np.array_equal(w, w0*(1.0 - 1e-2*0.01))
    for b, b0 in zip(m.biases, biases):
        assert np.array_equal(b, b0)


def test_separable_toy_set():
    data = _toy()
    cfg = TrainConfig(learning_rate=1e-2, epochs=400, hidden_layers=1, hidden_units=16, dropout=0.0)
    model, losses = train(MlpModel.create(2, 1, 16, seed=0), data, cfg)
    assert losses[-1] < 0.1
    _, labels = predict(model, data)
    assert np.array_equal(labels, data.labels)


def test_zero_learning_rate_keeps_weights():
    data = _toy()
    m = MlpModel.create(2, 2, 8, seed=5)
    cfg = TrainConfig(learning_rate=0.0, epochs=5, dropout=0.0)
    trained, losses = train(m, data, cfg)
    for a, b in zip(trained.parameters(), m.parameters()):
        assert np.array_equal(a, b)
    assert np.all(losses == losses[0])


def test_training_is_reproducible():
    data = _toy(12)
    cfg = TrainConfig(epochs=30, hidden_layers=2, hidden_units=8, dropout=0.3, batch_size=4, seed=9)
    a, la = train(MlpModel.create(2, 2, 8, 0.3, seed=1), data, cfg)
    b, lb = train(MlpModel.create(2, 2, 8, 0.3, seed=1), data, cfg)
    assert np.array_equal(la, lb)
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_non_finite_loss():
    import pytest
    m = MlpModel.create(2, 1, 8, seed=0)
    with pytest.raises(NonFiniteLoss):
        train(m, _toy(), TrainConfig(learning_rate=1e300, epochs=3, dropout=0.0))


def test_check_ranges_and_persistence(tmp_path):
    import pytest
    TrainConfig(learning_rate=1e-3, epochs=125, hidden_layers=12, hidden_units=8, dropout=0.5).check_ranges()
    for bad in [dict(learning_rate=0.0), dict(epochs=110), dict(hidden_layers=13), dict(hidden_units=4),
                dict(dropout=0.6)]:
        with pytest.raises(ConfigError):
            TrainConfig(**bad).check_ranges()
    m = MlpModel.create(3, 2, 8, 0.2, seed=6)
    m.save(tmp_path/"model.npz")
    back = MlpModel.load(tmp_path/"model.npz")
    assert back.layer_sizes == m.layer_sizes and back.dropout == 0.2
    assert all(np.array_equal(p, q) for p, q in zip(back.parameters(), m.parameters()))
