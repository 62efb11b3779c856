"""Trajectory emulator: encode (initial input, parameters) to a latent
vector, spread it across the time grid, mix time steps, and decode the
whole trajectory in one pass.

The time mechanism is configurable:

* time embedding on: latent rows are z0 + lambda(t_i) with learnable
  sinusoidal frequencies;
* time embedding off + latent_step on: rows evolve by a learned linear
  update z_{i+1} = z_i + z_i S (the plain sequential baseline used for
  ablations);
* both off: the latent is repeated, so the decoded trajectory is
  constant in time.

A single-head residual attention block (optional) mixes the latent rows
nonlocally. Training uses the five-term trajectory loss; with the
physics toggle off the difference and mass terms are dropped. The whole
grid is produced in one forward evaluation, so prediction cost does not
scale with how much of the grid is requested.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .datasets import RecordData
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .odes import Trajectory
from .rng import stream

__all__ = [
    "AeodeConfig",
    "AeodeModel",
    "baseline_config",
    "build_model",
    "aeode_forward",
    "aeode_forward_batch",
    "roll_augment",
    "train_aeode",
    "evaluate_forward",
    "ensemble_predict",
    "save_aeode_model",
    "load_aeode_model",
    "write_band_csv",
    "write_ensemble_csv",
]


@dataclass
class AeodeConfig:
    state_dim: int
    x0_dim: int
    theta_dim: int
    n_freq: int = 16  # latent width is 2 * n_freq
    encoder_hidden: int = 64
    decoder_hidden: int = 64
    time_embed: bool = True
    attention: bool = True
    physics_loss: bool = True
    latent_step: bool = False
    alphas: tuple = (1.0, 10.0, 10.0, 1.0, 0.001)
    lr: float = 1e-3
    batch: int = 4096
    iters: int = 10000
    seed: int = 0
    roll_augment: bool = True
    roll_prob: float = 0.5
    val_every: int = 200
    log_every: int = 500

    def __post_init__(self):
        if self.n_freq < 1:
            raise ConfigError("need at least one frequency")
        alphas = np.asarray(self.alphas, dtype=np.float64)
        if alphas.shape != (5,) or np.any(alphas < 0):
            raise ConfigError("alphas must be 5 nonnegative weights")
        self.alphas = tuple(float(a) for a in alphas)

    @property
    def latent_dim(self) -> int:
        return 2 * self.n_freq

    def effective_alphas(self) -> np.ndarray:
        """physics_loss off drops the difference and mass terms."""
        a = np.asarray(self.alphas, dtype=np.float64).copy()
        if not self.physics_loss:
            a[1] = a[2] = a[4] = 0.0
        return a

    def to_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "x0_dim": self.x0_dim,
            "theta_dim": self.theta_dim,
            "n_freq": self.n_freq,
            "encoder_hidden": self.encoder_hidden,
            "decoder_hidden": self.decoder_hidden,
            "time_embed": self.time_embed,
            "attention": self.attention,
            "physics_loss": self.physics_loss,
            "latent_step": self.latent_step,
            "alphas": list(self.alphas),
            "lr": self.lr,
            "batch": self.batch,
            "iters": self.iters,
            "seed": self.seed,
            "roll_augment": self.roll_augment,
            "roll_prob": self.roll_prob,
            "val_every": self.val_every,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AeodeConfig":
        d = dict(d)
        d["alphas"] = tuple(d.get("alphas", (1.0, 10.0, 10.0, 1.0, 0.001)))
        return cls(**d)


def baseline_config(config: AeodeConfig) -> AeodeConfig:
    """The ablation baseline: no embedding, no attention, no physics
    terms; time handled by the sequential linear latent update."""
    return replace(
        config, time_embed=False, attention=False, physics_loss=False, latent_step=True
    )


@dataclass
class AeodeModel:
    config: AeodeConfig
    enc1: nn.DenseLayer
    enc2: nn.DenseLayer
    dec1: nn.DenseLayer
    dec2: nn.DenseLayer
    emb: nn.TimeEmbedding | None
    attn: nn.AttentionBlock | None
    step: ad.Tensor | None
    state_scale: float
    input_scale: np.ndarray
    theta_min: np.ndarray
    theta_max: np.ndarray
    t_grid: np.ndarray
    train_log: dict = field(default_factory=dict)

    def params(self):
        ps = self.enc1.params() + self.enc2.params()
        if self.emb is not None:
            ps += self.emb.params()
        if self.attn is not None:
            ps += self.attn.params()
        if self.step is not None:
            ps += [self.step]
        return ps + self.dec1.params() + self.dec2.params()

    # -- normalization ----------------------------------------------------
    def normalize_x0(self, x0: np.ndarray) -> np.ndarray:
        return np.asarray(x0, dtype=np.float64) / self.input_scale

    def normalize_theta(self, theta: np.ndarray) -> np.ndarray:
        span = np.where(self.theta_max > self.theta_min, self.theta_max - self.theta_min, 1.0)
        return 2.0 * (np.asarray(theta, dtype=np.float64) - self.theta_min) / span - 1.0

    def normalize_states(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=np.float64) / self.state_scale

    def denormalize_states(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=np.float64) * self.state_scale

    # -- forward passes ----------------------------------------------------
    def forward_graph(self, x0n: np.ndarray, thn: np.ndarray, t_grid: np.ndarray):
        """Autodiff forward. Returns (trajectory rows, initial-state
        reconstruction), both in normalized space."""
        cfg = self.config
        B = x0n.shape[0]
        T1 = t_grid.size
        d = cfg.latent_dim
        inp = np.hstack([x0n, thn])
        h = ad.relu(nn.forward_dense(ad.constant(inp), self.enc1))
        z0 = nn.forward_dense(h, self.enc2)
        z0e = ad.reshape(z0, (B, 1, d))
        if cfg.time_embed:
            lam = nn.time_embed(t_grid, self.emb)
            Z = ad.add(z0e, lam)
        elif cfg.latent_step:
            rows = [z0]
            for _ in range(T1 - 1):
                rows.append(ad.add(rows[-1], ad.matmul(rows[-1], self.step)))
            Z = ad.stack(rows, axis=1)
        else:
            Z = ad.add(z0e, np.zeros((T1, d)))
        if cfg.attention:
            Z = nn.attention_forward(Z, self.attn)
        h2 = ad.relu(nn.forward_dense(Z, self.dec1))
        out = nn.forward_dense(h2, self.dec2)
        hr = ad.relu(nn.forward_dense(z0, self.dec1))
        recon = nn.forward_dense(hr, self.dec2)
        return out, recon

    def forward_np(self, x0n: np.ndarray, thn: np.ndarray, t_grid: np.ndarray):
        """Plain-numpy twin of forward_graph (identical arithmetic)."""
        cfg = self.config
        d = cfg.latent_dim
        inp = np.hstack([x0n, thn])
        h = nn.dense_forward_np(inp, self.enc1.W.data, self.enc1.b.data, activation="relu")
        z0 = nn.dense_forward_np(h, self.enc2.W.data, self.enc2.b.data)
        z0e = z0.reshape(z0.shape[0], 1, d)
        if cfg.time_embed:
            omega = self.emb.omega.data
            phase = 2.0 * np.pi * np.asarray(t_grid, dtype=np.float64)[:, None] * omega[None, :]
            lam = np.empty((t_grid.size, d))
            lam[:, 0::2] = np.sin(phase)
            lam[:, 1::2] = np.cos(phase)
            Z = z0e + lam
        elif cfg.latent_step:
            rows = [z0]
            for _ in range(t_grid.size - 1):
                rows.append(rows[-1] + np.matmul(rows[-1], self.step.data))
            Z = np.stack(rows, axis=1)
        else:
            Z = z0e + np.zeros((t_grid.size, d))
        if cfg.attention:
            q = nn.mm_np(Z, self.attn.W_Q.data)
            k = nn.mm_np(Z, self.attn.W_K.data)
            v = nn.mm_np(Z, self.attn.W_V.data)
            logits = np.matmul(q, np.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
            shifted = logits - logits.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            att = e / e.sum(axis=-1, keepdims=True)
            Z = Z + np.matmul(att, v)
        h2 = nn.dense_forward_np(Z, self.dec1.W.data, self.dec1.b.data, activation="relu")
        out = nn.dense_forward_np(h2, self.dec2.W.data, self.dec2.b.data)
        hr = nn.dense_forward_np(z0, self.dec1.W.data, self.dec1.b.data, activation="relu")
        recon = nn.dense_forward_np(hr, self.dec2.W.data, self.dec2.b.data)
        return out, recon


def build_model(config: AeodeConfig, t_grid: np.ndarray, state_scale: float,
                input_scale, theta_min, theta_max) -> AeodeModel:
    """Fresh model with seed-deterministic initialization.

    Components switched off by the config are absent, not zeroed: their
    weights do not exist in the parameter list or in saved files.
    """
    rng = stream(config.seed, domain="init")
    d = config.latent_dim
    n_in = config.x0_dim + config.theta_dim
    enc1 = nn.DenseLayer.he_init(n_in, config.encoder_hidden, rng)
    enc2 = nn.DenseLayer.glorot_init(config.encoder_hidden, d, rng)
    dec1 = nn.DenseLayer.he_init(d, config.decoder_hidden, rng)
    dec2 = nn.DenseLayer.glorot_init(config.decoder_hidden, config.state_dim, rng)
    t_grid = np.asarray(t_grid, dtype=np.float64)

    emb = None
    if config.time_embed:
        dt = float(t_grid[1] - t_grid[0]) if t_grid.size > 1 else 1.0
        emb = nn.TimeEmbedding(
            nn.log_spaced_frequencies(max(t_grid.size - 1, 1), dt, config.n_freq)
        )
    attn = nn.AttentionBlock.init(d, rng) if config.attention else None
    step = None
    if config.latent_step and not config.time_embed:
        step = ad.Tensor(rng.normal(0.0, 0.05 / np.sqrt(d), (d, d)))

    return AeodeModel(
        config=config,
        enc1=enc1, enc2=enc2, dec1=dec1, dec2=dec2,
        emb=emb, attn=attn, step=step,
        state_scale=float(state_scale),
        input_scale=np.asarray(input_scale, dtype=np.float64),
        theta_min=np.asarray(theta_min, dtype=np.float64),
        theta_max=np.asarray(theta_max, dtype=np.float64),
        t_grid=t_grid,
    )


def _check_grid(model: AeodeModel, t_grid) -> np.ndarray:
    if t_grid is None:
        return model.t_grid
    t_grid = np.asarray(t_grid, dtype=np.float64)
    lo, hi = model.t_grid.min(), model.t_grid.max()
    if t_grid.min() < lo or t_grid.max() > hi:
        warnings.warn(
            f"requested grid [{t_grid.min()}, {t_grid.max()}] extrapolates beyond "
            f"the training grid [{lo}, {hi}]",
            stacklevel=3,
        )
    return t_grid


def aeode_forward_batch(model: AeodeModel, x0s, thetas, t_grid=None) -> np.ndarray:
    """Physical-units trajectories for a batch of inputs, (B, T+1, N)."""
    t_grid = _check_grid(model, t_grid)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=np.float64))
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if x0s.shape[0] != thetas.shape[0]:
        raise ShapeError("x0s and thetas must have equal batch sizes")
    out, _ = model.forward_np(model.normalize_x0(x0s), model.normalize_theta(thetas), t_grid)
    return model.denormalize_states(out)


def aeode_forward(model: AeodeModel, x0, theta, t_grid=None) -> Trajectory:
    """One emulated trajectory on the requested grid (default: training grid)."""
    t_grid = _check_grid(model, t_grid)
    states = aeode_forward_batch(model, np.asarray(x0)[None, :], np.asarray(theta)[None, :], t_grid)[0]
    dt = float(t_grid[1] - t_grid[0]) if t_grid.size > 1 else 1.0
    return Trajectory(t0=float(t_grid[0]), dt=dt, steps=t_grid.size - 1, states=states)


def roll_augment(traj: Trajectory, tau: int) -> Trajectory:
    """Circular time shift: row t of the result is row (t + tau) mod (T+1)."""
    n_rows = traj.steps + 1
    if not 0 <= tau < n_rows:
        raise ConfigError(f"tau must lie in [0, {n_rows}), got {tau}")
    return Trajectory(
        t0=traj.t0, dt=traj.dt, steps=traj.steps, states=np.roll(traj.states, -tau, axis=0)
    )


def _roll_batch(rows: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Per-sample circular shift of (B, T+1, N) trajectories."""
    B, T1, _ = rows.shape
    idx = (np.arange(T1)[None, :] + taus[:, None]) % T1
    return rows[np.arange(B)[:, None], idx, :]


def train_aeode(dataset: RecordData, config: AeodeConfig) -> AeodeModel:
    """Adam on the weighted trajectory loss; returns the best-validation
    model (validation reconstruction MSE, normalized space).

    Roll augmentation applies to training batches only, and only when
    the dataset's inputs are initial states (rolling re-anchors the
    input to the rolled first row so supervision stays consistent).
    """
    sc = dataset.sidecar
    grid = sc["grid"]
    t_grid = grid["t0"] + grid["dt"] * np.arange(int(grid["steps"]) + 1)
    x0_dim = sc["x0_dim"]
    norm = sc["normalization"]

    model = build_model(
        config,
        t_grid=t_grid,
        state_scale=norm["state_scale"],
        input_scale=np.asarray(norm["input_scale"]),
        theta_min=np.asarray(norm["theta_min"]),
        theta_max=np.asarray(norm["theta_max"]),
    )

    x0_all = dataset.features[:, :x0_dim]
    th_all = dataset.features[:, x0_dim:]
    trajs = dataset.trajectories()

    x0n = model.normalize_x0(x0_all)
    thn = model.normalize_theta(th_all)
    yn = model.normalize_states(trajs)

    tr = dataset.split_indices("train")
    va = dataset.split_indices("val")
    if tr.size == 0 or va.size == 0:
        raise ConfigError("dataset must carry nonempty train and val splits")

    can_roll = config.roll_augment and bool(sc.get("x0_is_state", False))
    T1 = t_grid.size
    alphas = config.effective_alphas()
    needed = tuple(n for a, n in zip(alphas, nn.LOSS_TERM_ORDER) if a > 0.0)
    dt = float(grid["dt"])

    params = model.params()
    state = ad.adam_init(params)
    batch_rng = stream(config.seed, domain="train")
    b = min(config.batch, tr.size)

    def val_mse() -> float:
        out, _ = model.forward_np(x0n[va], thn[va], t_grid)
        return float(np.mean((out - yn[va]) ** 2))

    best_mse = np.inf
    best_weights = [p.data.copy() for p in params]
    best_iter = -1
    history = []
    for it in range(config.iters):
        idx = tr[batch_rng.integers(0, tr.size, size=b)]
        yb = yn[idx]
        x0b = x0n[idx]
        thb = thn[idx]
        if can_roll:
            do = batch_rng.random(b) < config.roll_prob
            taus = np.where(do, batch_rng.integers(0, T1, size=b), 0)
            if np.any(taus):
                yb = _roll_batch(yb, taus)
                # re-anchor the input to the rolled first row (physical
                # units) so recon and identity terms stay consistent
                x0b = model.normalize_x0(model.denormalize_states(yb[:, 0, :]))
        out, recon = model.forward_graph(x0b, thb, t_grid)
        terms = nn.aeode_loss_terms(out, yb, yb[:, 0, :], recon, dt=dt, terms=needed)
        loss = None
        for a, name in zip(alphas, nn.LOSS_TERM_ORDER):
            if a == 0.0:
                continue
            piece = ad.mul(terms[name], float(a))
            loss = piece if loss is None else ad.add(loss, piece)
        lval = float(loss.data)
        if not np.isfinite(lval):
            raise TrainingDivergedError(iteration=it)
        ad.backward(loss)
        ad.adam_step(params, [p.grad for p in params], state, lr=config.lr)

        if (it + 1) % config.val_every == 0 or it == config.iters - 1:
            vm = val_mse()
            if vm < best_mse:
                best_mse = vm
                best_weights = [p.data.copy() for p in params]
                best_iter = it
            if (it + 1) % config.log_every == 0 or it == config.iters - 1:
                history.append({"iter": it, "train_loss": lval, "val_mse": vm})

    for p, w in zip(params, best_weights):
        p.data = w

    # loss components of the restored weights on the full training split
    out_tr, recon_tr = model.forward_np(x0n[tr], thn[tr], t_grid)
    final_terms = _loss_terms_np(out_tr, yn[tr], yn[tr][:, 0, :], recon_tr, dt)
    model.train_log = {
        "history": history,
        "best_iter": best_iter,
        "best_val_mse": best_mse,
        "final_train_terms": final_terms,
        "alphas_effective": alphas.tolist(),
    }
    return model


def _loss_terms_np(pred, truth, row0, recon, dt) -> dict:
    d1p = np.diff(pred, axis=-2) / dt
    d1t = np.diff(truth, axis=-2) / dt
    d2p = (pred[..., 2:, :] - 2 * pred[..., 1:-1, :] + pred[..., :-2, :]) / dt**2
    d2t = (truth[..., 2:, :] - 2 * truth[..., 1:-1, :] + truth[..., :-2, :]) / dt**2
    return {
        "recon": float(np.mean((pred - truth) ** 2)),
        "d1": float(np.mean((d1p - d1t) ** 2)),
        "d2": float(np.mean((d2p - d2t) ** 2)),
        "idn": float(np.mean((row0 - recon) ** 2)),
        "mass": float(np.mean((pred.sum(axis=-1) - truth.sum(axis=-1)) ** 2)),
    }


def evaluate_forward(model: AeodeModel, dataset: RecordData, split: str = "test") -> dict:
    """Normalized-space metrics on a dataset split, plus the mass and
    identity loss components and the scale to recover physical units."""
    sc = dataset.sidecar
    x0_dim = sc["x0_dim"]
    idx = dataset.split_indices(split)
    if idx.size == 0:
        raise ConfigError(f"split '{split}' is empty")
    x0n = model.normalize_x0(dataset.features[idx, :x0_dim])
    thn = model.normalize_theta(dataset.features[idx, x0_dim:])
    yn = model.normalize_states(dataset.trajectories()[idx])
    grid = sc["grid"]
    t_grid = grid["t0"] + grid["dt"] * np.arange(int(grid["steps"]) + 1)
    pred, recon = model.forward_np(x0n, thn, t_grid)
    err = pred - yn
    mse = float(np.mean(err**2))
    terms = _loss_terms_np(pred, yn, yn[:, 0, :], recon, float(grid["dt"]))
    return {
        "split": split,
        "n": int(idx.size),
        "mse": mse,
        "rmse": float(np.sqrt(mse)),
        "mae": float(np.mean(np.abs(err))),
        "mbe": float(np.mean(err)),
        "mass": terms["mass"],
        "idn": terms["idn"],
        "state_scale": model.state_scale,
        "mse_physical": mse * model.state_scale**2,
    }


def ensemble_predict(model: AeodeModel, x0, chain, n_draws: int, t_grid=None, rng=None):
    """Posterior-predictive trajectory fan: n_draws thetas drawn uniformly
    from the post-burn chain, one forward pass each (batched).

    Returns (trajectories (n_draws, T+1, N), bands dict with per-time
    q05/q50/q95 arrays of shape (T+1, N)).
    """
    if n_draws < 2:
        raise ConfigError("need at least 2 draws")
    if rng is None:
        rng = stream(0, domain="eval")
    t_grid = _check_grid(model, t_grid)
    post = chain.post_burn()
    thetas = post[rng.integers(post.shape[0], size=n_draws)]
    x0s = np.tile(np.asarray(x0, dtype=np.float64)[None, :], (n_draws, 1))
    trajs = aeode_forward_batch(model, x0s, thetas, t_grid)
    q05, q50, q95 = np.quantile(trajs, [0.05, 0.5, 0.95], axis=0)
    return trajs, {"q05": q05, "q50": q50, "q95": q95}


def write_band_csv(bands: dict, t_grid, state_names, path) -> None:
    """Per-time quantile band: `t,q05,q50,q95` (suffixed per state when
    the output has more than one component)."""
    names = list(state_names)
    cols = []
    if len(names) == 1:
        cols = ["q05", "q50", "q95"]
    else:
        for q in ("q05", "q50", "q95"):
            cols += [f"{q}_{nm}" for nm in names]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t," + ",".join(cols) + "\n")
        for i, t in enumerate(np.asarray(t_grid)):
            vals = np.concatenate([bands["q05"][i], bands["q50"][i], bands["q95"][i]]) \
                if len(names) > 1 else np.array(
                    [bands["q05"][i, 0], bands["q50"][i, 0], bands["q95"][i, 0]]
                )
            fh.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in vals) + "\n")


def write_ensemble_csv(trajs: np.ndarray, t_grid, state_names, path) -> None:
    """All ensemble members, long format: draw,t,<state names>."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("draw,t," + ",".join(state_names) + "\n")
        for k in range(trajs.shape[0]):
            for i, t in enumerate(np.asarray(t_grid)):
                row = ",".join(f"{v:.17g}" for v in trajs[k, i])
                fh.write(f"{k},{t:.17g},{row}\n")


def save_aeode_model(model: AeodeModel, path) -> None:
    params = {
        "enc1.W": model.enc1.W.data, "enc1.b": model.enc1.b.data,
        "enc2.W": model.enc2.W.data, "enc2.b": model.enc2.b.data,
        "dec1.W": model.dec1.W.data, "dec1.b": model.dec1.b.data,
        "dec2.W": model.dec2.W.data, "dec2.b": model.dec2.b.data,
    }
    if model.emb is not None:
        params["omega"] = model.emb.omega.data
    if model.attn is not None:
        params["attn.W_Q"] = model.attn.W_Q.data
        params["attn.W_K"] = model.attn.W_K.data
        params["attn.W_V"] = model.attn.W_V.data
    if model.step is not None:
        params["step"] = model.step.data
    nn.save_weights(
        path,
        architecture={"kind": "aeode", "config": model.config.to_dict()},
        params=params,
        extra={
            "state_scale": model.state_scale,
            "input_scale": model.input_scale.tolist(),
            "theta_min": model.theta_min.tolist(),
            "theta_max": model.theta_max.tolist(),
            "t_grid": model.t_grid.tolist(),
            "train_log": model.train_log,
        },
    )


def load_aeode_model(path) -> AeodeModel:
    payload = nn.load_weights(path)
    if payload["architecture"].get("kind") != "aeode":
        raise ConfigError("not a trajectory-emulator model file")
    config = AeodeConfig.from_dict(payload["architecture"]["config"])
    p = payload["params"]
    extra = payload["extra"]
    model = AeodeModel(
        config=config,
        enc1=nn.DenseLayer(p["enc1.W"], p["enc1.b"]),
        enc2=nn.DenseLayer(p["enc2.W"], p["enc2.b"]),
        dec1=nn.DenseLayer(p["dec1.W"], p["dec1.b"]),
        dec2=nn.DenseLayer(p["dec2.W"], p["dec2.b"]),
        emb=nn.TimeEmbedding(p["omega"]) if "omega" in p else None,
        attn=nn.AttentionBlock(p["attn.W_Q"], p["attn.W_K"], p["attn.W_V"])
        if "attn.W_Q" in p else None,
        step=ad.Tensor(p["step"]) if "step" in p else None,
        state_scale=float(extra["state_scale"]),
        input_scale=np.asarray(extra["input_scale"]),
        theta_min=np.asarray(extra["theta_min"]),
        theta_max=np.asarray(extra["theta_max"]),
        t_grid=np.asarray(extra["t_grid"]),
        train_log=extra.get("train_log", {}),
    )
    return model
