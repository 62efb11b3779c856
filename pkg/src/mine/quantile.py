"""Interval emulator: a small ReLU net predicting the 5% and 95%
posterior-predictive quantiles of a horizon scalar.

Training minimizes the two-head pinball objective with a non-crossing
hinge; model selection keeps the weights with the best validation
pinball. At inference the two raw heads are additionally sorted, so the
returned interval is always valid even where the soft penalty was not
perfect. An exact-sampling oracle (nested Monte Carlo through the real
simulator) provides reference quantiles for evaluation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .datasets import RecordData
from .errors import ConfigError, DataQualityError, ShapeError, TrainingDivergedError
from .rng import stream

__all__ = [
    "QUANTILE_TAUS",
    "QuantileTrainConfig",
    "QuantileModel",
    "sample_E0",
    "sample_E0_counted",
    "sample_E0_batch",
    "encode_quantile_input",
    "empirical_quantile_oracle",
    "train_quantile",
    "predict_interval",
    "evaluate_quantile",
    "save_quantile_model",
    "load_quantile_model",
]

QUANTILE_TAUS = (0.05, 0.95)
_E0_RESAMPLE_LIMIT = 10000


def _check_eta(eta):
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (3,):
        raise ConfigError("eta must be (eta1, eta2, eta3)")
    if eta[0] not in (0.0, 1.0):
        raise ConfigError("eta1 must be 0 (normal) or 1 (lognormal)")
    if eta[2] <= 0:
        raise ConfigError("eta3 (scale) must be positive")
    return eta


def sample_E0_counted(eta, rng):
    """One base-emission draw; returns (value, n_rejected).

    eta1 = 0: Normal(eta2, eta3^2) truncated at zero by resampling.
    eta1 = 1: lognormal with underlying-normal sd eta3, location chosen
    so the mean is exactly eta2 (mu = ln eta2 - eta3^2 / 2).
    """
    eta = _check_eta(eta)
    if eta[0] == 0.0:
        rejected = 0
        for _ in range(_E0_RESAMPLE_LIMIT):
            v = rng.normal(eta[1], eta[2])
            if v > 0:
                return float(v), rejected
            rejected += 1
        raise DataQualityError("positive-emission resampling limit exhausted")
    if eta[1] <= 0:
        raise ConfigError("lognormal location needs eta2 > 0")
    mu = np.log(eta[1]) - 0.5 * eta[2] ** 2
    return float(np.exp(rng.normal(mu, eta[2]))), 0


def sample_E0(eta, rng) -> float:
    return sample_E0_counted(eta, rng)[0]


def sample_E0_batch(eta, rng, m: int) -> np.ndarray:
    """m draws from p(E0 | eta), vectorized; truncation by batched resampling."""
    eta = _check_eta(eta)
    if eta[0] == 0.0:
        out = rng.normal(eta[1], eta[2], m)
        for _ in range(_E0_RESAMPLE_LIMIT):
            bad = out <= 0
            n_bad = int(bad.sum())
            if n_bad == 0:
                return out
            out[bad] = rng.normal(eta[1], eta[2], n_bad)
        raise DataQualityError("positive-emission resampling limit exhausted")
    if eta[1] <= 0:
        raise ConfigError("lognormal location needs eta2 > 0")
    mu = np.log(eta[1]) - 0.5 * eta[2] ** 2
    return np.exp(rng.normal(mu, eta[2], m))


def encode_quantile_input(scenario_id: int, eta, scenario_ids) -> np.ndarray:
    """One-hot scenario encoding followed by (eta1, eta2, eta3)."""
    eta = _check_eta(eta)
    ids = [int(s) for s in scenario_ids]
    if int(scenario_id) not in ids:
        raise ConfigError(f"scenario {scenario_id} not in {ids}")
    onehot = np.zeros(len(ids))
    onehot[ids.index(int(scenario_id))] = 1.0
    return np.concatenate([onehot, eta])


def empirical_quantile_oracle(scenario_id, eta, chain, m: int, simulator, rng):
    """Nested-Monte-Carlo reference quantiles.

    Draws E0 ~ p(E0|eta) and theta uniformly over the post-burn chain,
    pushes them through simulator(scenario_ids, e0s, thetas), and takes
    the type-7 order statistics at the 5% / 95% levels.

    Returns (q05, q95, draws).
    """
    if m < 1000:
        raise ConfigError("oracle needs at least 1000 draws")
    post = chain.post_burn()
    e0s = sample_E0_batch(eta, rng, m)
    thetas = post[rng.integers(post.shape[0], size=m)]
    s_ids = np.full(m, int(scenario_id))
    try:
        ys = np.asarray(simulator(s_ids, e0s, thetas), dtype=np.float64).ravel()
    except Exception:
        vals = []
        n_failed = 0
        for j in range(m):
            try:
                vals.append(
                    float(np.asarray(
                        simulator(s_ids[j:j + 1], e0s[j:j + 1], thetas[j:j + 1])
                    ).ravel()[0])
                )
            except Exception:
                n_failed += 1
        if n_failed > 0.01 * m:
            raise DataQualityError(f"{n_failed} of {m} oracle draws failed")
        ys = np.asarray(vals)
    q05, q95 = np.quantile(ys, QUANTILE_TAUS)
    return float(q05), float(q95), ys


@dataclass
class QuantileTrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    lam: float = 10.0
    hidden: tuple = (20, 20)
    seed: int = 0
    full_batch_limit: int = 10000
    batch: int = 1024
    log_every: int = 50

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "lam": self.lam,
            "hidden": list(self.hidden),
            "seed": self.seed,
            "full_batch_limit": self.full_batch_limit,
            "batch": self.batch,
        }


@dataclass
class QuantileModel:
    layers: list
    x_min: np.ndarray
    x_max: np.ndarray
    y_loc: float
    y_scale: float
    config: dict = field(default_factory=dict)
    train_log: dict = field(default_factory=dict)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def normalize_x(self, x: np.ndarray) -> np.ndarray:
        span = np.where(self.x_max > self.x_min, self.x_max - self.x_min, 1.0)
        return 2.0 * (x - self.x_min) / span - 1.0

    def forward_np(self, x_norm: np.ndarray) -> np.ndarray:
        h = x_norm
        for layer in self.layers[:-1]:
            h = nn.dense_forward_np(h, layer.W.data, layer.b.data, activation="relu")
        last = self.layers[-1]
        return nn.dense_forward_np(h, last.W.data, last.b.data)

    def predict_raw(self, x: np.ndarray) -> np.ndarray:
        """Denormalized raw head outputs, (n, 2)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = self.forward_np(self.normalize_x(x))
        return out * self.y_scale + self.y_loc


def _forward_graph(layers, x_norm):
    h = ad.constant(x_norm)
    for layer in layers[:-1]:
        h = ad.relu(nn.forward_dense(h, layer))
    return nn.forward_dense(h, layers[-1])


def _pinball_np(q, y, tau):
    r = y - q
    return np.where(r >= 0, tau * r, (tau - 1.0) * r)


def train_quantile(dataset: RecordData, config: QuantileTrainConfig) -> QuantileModel:
    """Fit the interval net on a 6:2:2-split dataset; returns the weights
    with the lowest validation pinball. Deterministic given config.seed."""
    X = dataset.features
    y = dataset.targets[:, 0]
    tr = dataset.split_indices("train")
    va = dataset.split_indices("val")
    if tr.size == 0 or va.size == 0:
        raise ConfigError("dataset must carry nonempty train and val splits")

    x_min = X[tr].min(axis=0)
    x_max = X[tr].max(axis=0)
    y_loc = float(y[tr].mean())
    y_scale = float(y[tr].std()) or 1.0

    rng = stream(config.seed, domain="init")
    widths = [X.shape[1], *config.hidden, 2]
    layers = [
        nn.DenseLayer.he_init(widths[i], widths[i + 1], rng)
        for i in range(len(widths) - 2)
    ]
    layers.append(nn.DenseLayer.glorot_init(widths[-2], widths[-1], rng))
    model = QuantileModel(
        layers=layers, x_min=x_min, x_max=x_max, y_loc=y_loc, y_scale=y_scale,
        config=config.to_dict(),
    )

    Xn = model.normalize_x(X)
    yn = (y - y_loc) / y_scale
    Xn_tr, yn_tr = Xn[tr], yn[tr]
    Xn_va, yn_va = Xn[va], yn[va]

    params = model.params()
    state = ad.adam_init(params)
    batch_rng = stream(config.seed, domain="train")
    full_batch = tr.size <= config.full_batch_limit

    def val_pinball() -> float:
        out = model.forward_np(Xn_va)
        return float(
            np.mean(_pinball_np(out[:, 0], yn_va, QUANTILE_TAUS[0]))
            + np.mean(_pinball_np(out[:, 1], yn_va, QUANTILE_TAUS[1]))
        )

    best_vp = np.inf
    best_weights = [p.data.copy() for p in params]
    best_epoch = -1
    history = []
    for epoch in range(config.epochs):
        if full_batch:
            batches = [np.arange(tr.size)]
        else:
            order = batch_rng.permutation(tr.size)
            batches = [order[k:k + config.batch] for k in range(0, tr.size, config.batch)]
        last_loss = np.nan
        for idx in batches:
            preds = _forward_graph(layers, Xn_tr[idx])
            loss = ad.mul(
                nn.quantile_objective(preds, yn_tr[idx], config.lam, QUANTILE_TAUS),
                1.0 / idx.size,
            )
            last_loss = float(loss.data)
            if not np.isfinite(last_loss):
                raise TrainingDivergedError(iteration=epoch)
            ad.backward(loss)
            ad.adam_step(params, [p.grad for p in params], state, lr=config.lr)
        vp = val_pinball()
        if vp < best_vp:
            best_vp = vp
            best_weights = [p.data.copy() for p in params]
            best_epoch = epoch
        if epoch % config.log_every == 0 or epoch == config.epochs - 1:
            history.append({"epoch": epoch, "train_loss": last_loss, "val_pinball": vp})

    for p, w in zip(params, best_weights):
        p.data = w
    model.train_log = {
        "history": history,
        "best_epoch": best_epoch,
        "best_val_pinball": best_vp,
    }
    return model


def predict_interval(model: QuantileModel, x):
    """(lo, hi, raw): raw heads plus the monotone rearrangement lo <= hi.

    x may be a single feature vector or a batch; outputs match.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    raw = model.predict_raw(x)
    lo = raw.min(axis=1)
    hi = raw.max(axis=1)
    if single:
        return float(lo[0]), float(hi[0]), raw[0]
    return lo, hi, raw


def evaluate_quantile(model: QuantileModel, test_inputs, oracle_draws) -> dict:
    """Compare predicted intervals against per-input oracle draws.

    oracle_draws: (n_test, M) posterior-predictive samples per input.
    """
    test_inputs = np.atleast_2d(np.asarray(test_inputs, dtype=np.float64))
    oracle_draws = np.atleast_2d(np.asarray(oracle_draws, dtype=np.float64))
    if test_inputs.shape[0] == 0:
        raise ShapeError("empty test set")
    if oracle_draws.shape[0] != test_inputs.shape[0]:
        raise ShapeError("need one draw row per test input")

    lo, hi, _ = predict_interval(model, test_inputs)
    emp = np.quantile(oracle_draws, QUANTILE_TAUS, axis=1)
    emp_lo, emp_hi = emp[0], emp[1]
    cover = np.mean((oracle_draws >= lo[:, None]) & (oracle_draws <= hi[:, None]), axis=1)
    return {
        "mse_lo": float(np.mean((lo - emp_lo) ** 2)),
        "mse_hi": float(np.mean((hi - emp_hi) ** 2)),
        "pinball_lo": float(np.mean(_pinball_np(lo[:, None], oracle_draws, QUANTILE_TAUS[0]))),
        "pinball_hi": float(np.mean(_pinball_np(hi[:, None], oracle_draws, QUANTILE_TAUS[1]))),
        "mean_coverage": float(np.mean(cover)),
        "mean_interval_size_model": float(np.mean(hi - lo)),
        "mean_interval_size_empirical": float(np.mean(emp_hi - emp_lo)),
    }


def save_quantile_model(model: QuantileModel, path) -> None:
    params = {}
    for i, layer in enumerate(model.layers):
        params[f"layer{i}.W"] = layer.W.data
        params[f"layer{i}.b"] = layer.b.data
    nn.save_weights(
        path,
        architecture={
            "kind": "quantile",
            "widths": [model.layers[0].W.data.shape[0]]
            + [layer.W.data.shape[1] for layer in model.layers],
        },
        params=params,
        extra={
            "x_min": model.x_min.tolist(),
            "x_max": model.x_max.tolist(),
            "y_loc": model.y_loc,
            "y_scale": model.y_scale,
            "config": model.config,
            "train_log": model.train_log,
        },
    )


def load_quantile_model(path) -> QuantileModel:
    payload = nn.load_weights(path)
    if payload["architecture"].get("kind") != "quantile":
        raise ConfigError("not a quantile model file")
    widths = payload["architecture"]["widths"]
    layers = []
    for i in range(len(widths) - 1):
        layers.append(
            nn.DenseLayer(payload["params"][f"layer{i}.W"], payload["params"][f"layer{i}.b"])
        )
    extra = payload["extra"]
    return QuantileModel(
        layers=layers,
        x_min=np.asarray(extra["x_min"]),
        x_max=np.asarray(extra["x_max"]),
        y_loc=float(extra["y_loc"]),
        y_scale=float(extra["y_scale"]),
        config=extra.get("config", {}),
        train_log=extra.get("train_log", {}),
    )
