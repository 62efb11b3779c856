"""Posterior-informed dataset generation, splits, and persistence.

Records live in a compact binary container (magic ``MINE``, format
version, little-endian f64 rows of features followed by targets) with a
mandatory JSON sidecar carrying names, grid metadata, normalization
constants, seeds, split indices, and the SHA-256 of the chain file the
parameters were drawn from. Loaders refuse data whose provenance hash
does not match the chain it claims to come from.

Row i of any generated dataset consumes the Philox stream keyed by
(seed, i), so generation order and worker count cannot change the file.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataQualityError, ProvenanceError, ShapeError
from .rng import row_stream, stream

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "RecordData",
    "split_622",
    "save_records",
    "load_records",
    "file_hash",
    "generate_forward_dataset",
    "generate_quantile_dataset",
]

MAGIC = b"MINE"
FORMAT_VERSION = 1
MAX_SKIP_FRACTION = 0.01
_RESAMPLE_LIMIT = 1000


@dataclass
class RecordData:
    """Feature/target rows plus the sidecar describing them."""

    features: np.ndarray
    targets: np.ndarray
    sidecar: dict

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.features.shape[0] != self.targets.shape[0]:
            raise ShapeError("features and targets need equal row counts")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def split_indices(self, name: str) -> np.ndarray:
        return np.asarray(self.sidecar["splits"][name], dtype=np.int64)

    def trajectories(self) -> np.ndarray:
        """Targets reshaped to (n, steps+1, state_dim) using grid metadata."""
        grid = self.sidecar["grid"]
        n_states = len(self.sidecar["state_names"])
        return self.targets.reshape(self.n, int(grid["steps"]) + 1, n_states)


def split_622(n: int, seed: int):
    """Disjoint 60/20/20 cover of range(n): sizes floor(.6n), floor(.2n), rest."""
    if n < 5:
        raise ConfigError("need at least 5 records to split 6:2:2")
    rng = stream(seed, stream_id=0, domain="dataset")
    perm = rng.permutation(n)
    n_train = int(0.6 * n)
    n_val = int(0.2 * n)
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train:n_train + n_val]),
        np.sort(perm[n_train + n_val:]),
    )


def save_records(data: RecordData, base_path) -> None:
    """Write <base>.bin and <base>.json."""
    base = str(base_path)
    n, f = data.features.shape
    t = data.targets.shape[1]
    if f > 0xFFFF:
        raise ConfigError("feature count exceeds the u16 header field")
    rows = np.hstack([data.features, data.targets]).astype("<f8")
    with open(base + ".bin", "wb") as fh:
        fh.write(MAGIC)
        fh.write(int(FORMAT_VERSION).to_bytes(2, "little"))
        fh.write(int(f).to_bytes(2, "little"))
        fh.write(rows.tobytes())
    sidecar = dict(data.sidecar)
    sidecar.setdefault("schema_version", FORMAT_VERSION)
    sidecar["n_records"] = int(n)
    sidecar["n_features"] = int(f)
    sidecar["n_targets"] = int(t)
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_records(base_path, chain_csv=None) -> RecordData:
    """Read a record container; verifies sizes and, when chain_csv is
    supplied, the provenance hash."""
    base = str(base_path)
    with open(base + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    with open(base + ".bin", "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ConfigError("bad magic; not a record container")
    version = int.from_bytes(blob[4:6], "little")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported record format version {version}")
    f = int.from_bytes(blob[6:8], "little")
    if f != sidecar["n_features"]:
        raise ProvenanceError("feature count disagrees between binary and sidecar")
    n = sidecar["n_records"]
    t = sidecar["n_targets"]
    body = blob[8:]
    expected = 8 * n * (f + t)
    if len(body) != expected:
        raise ProvenanceError(
            f"binary payload is {len(body)} bytes; sidecar implies {expected}"
        )
    rows = np.frombuffer(body, dtype="<f8").reshape(n, f + t)
    if chain_csv is not None:
        actual = file_hash(chain_csv)
        recorded = sidecar.get("provenance", {}).get("chain_hash")
        if recorded != actual:
            raise ProvenanceError(
                f"chain hash mismatch: sidecar has {recorded}, file is {actual}"
            )
    return RecordData(features=rows[:, :f].copy(), targets=rows[:, f:].copy(), sidecar=sidecar)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# generation


def _check_skip_budget(n_skipped: int, n: int):
    if n > 0 and n_skipped > MAX_SKIP_FRACTION * n:
        raise DataQualityError(
            f"{n_skipped} skipped draws exceed {MAX_SKIP_FRACTION:.0%} of {n} rows"
        )


def generate_forward_dataset(
    chain,
    x0_sampler,
    simulator,
    n: int,
    seed: int,
    grid: dict,
    state_names,
    simulator_id: str = "himmel",
    chain_hash: str = "",
    x0_is_state: bool = True,
) -> RecordData:
    """Rows (x0 || theta) -> flattened trajectory, theta drawn uniformly
    with replacement from the post-burn-in chain.

    simulator(x0_batch, theta_batch) must return (b, steps+1, state_dim)
    and may raise on divergent rows. Divergent rows are redrawn from the
    same per-row stream (n stays exact); more than 1% skips aborts.
    """
    post = chain.post_burn()
    if post.shape[0] < 1:
        raise ConfigError("chain has no post-burn-in rows")
    n_chain = post.shape[0]

    def draw_one(rng):
        x0 = np.asarray(x0_sampler(rng), dtype=np.float64)
        return x0, post[int(rng.integers(n_chain))]

    x0s, thetas, trajs, n_skipped = (None, None, None, 0)
    if n > 0:
        draws = [draw_one(row_stream(seed, i)) for i in range(n)]
        x0s = np.stack([d[0] for d in draws])
        thetas = np.stack([d[1] for d in draws])
        try:
            trajs = np.asarray(simulator(x0s, thetas), dtype=np.float64)
        except Exception:
            # per-row fallback: replay each row stream, resampling past
            # whatever the simulator rejects
            x0_rows, th_rows, tr_rows = [], [], []
            n_skipped = 0
            for i in range(n):
                rng = row_stream(seed, i)
                for _ in range(_RESAMPLE_LIMIT):
                    x0, th = draw_one(rng)
                    try:
                        tr = np.asarray(simulator(x0[None, :], th[None, :]), dtype=np.float64)
                    except Exception:
                        n_skipped += 1
                        continue
                    x0_rows.append(x0)
                    th_rows.append(th)
                    tr_rows.append(tr[0])
                    break
                else:
                    raise DataQualityError(f"row {i}: simulator kept failing")
            _check_skip_budget(n_skipped, n)
            x0s = np.stack(x0_rows)
            thetas = np.stack(th_rows)
            trajs = np.stack(tr_rows)

    if n > 0:
        features = np.hstack([x0s, thetas])
        targets = trajs.reshape(n, -1)
        x0_dim, theta_dim = x0s.shape[1], thetas.shape[1]
        train, val, test = split_622(n, seed)
        splits = {"train": train.tolist(), "val": val.tolist(), "test": test.tolist()}
        state_scale = float(np.max(np.abs(trajs)))
        state_scale = state_scale if state_scale > 0 else 1.0
        if x0_is_state:
            # state-valued inputs share the trajectory scale so a rolled
            # first row normalizes consistently
            input_scale = np.full(x0s.shape[1], state_scale)
        else:
            col_max = np.max(np.abs(x0s), axis=0)
            input_scale = np.where(col_max > 0, col_max, 1.0)
        norm = {
            "state_scale": state_scale,
            "input_scale": input_scale.tolist(),
            "theta_min": thetas.min(axis=0).tolist(),
            "theta_max": thetas.max(axis=0).tolist(),
        }
    else:
        features = np.zeros((0, 1))
        targets = np.zeros((0, (int(grid["steps"]) + 1) * len(state_names)))
        x0_dim = theta_dim = 0
        splits = {"train": [], "val": [], "test": []}
        norm = {"state_scale": 1.0, "input_scale": [], "theta_min": [], "theta_max": []}

    sidecar = {
        "kind": "forward",
        "x0_dim": int(x0_dim),
        "theta_dim": int(theta_dim),
        "x0_is_state": bool(x0_is_state),
        "grid": {k: (int(v) if k == "steps" else float(v)) for k, v in grid.items()},
        "state_names": list(state_names),
        "normalization": norm,
        "provenance": {
            "chain_hash": chain_hash,
            "seed": int(seed),
            "simulator": simulator_id,
            "n_skipped": int(n_skipped),
        },
        "splits": splits,
    }
    return RecordData(features=features, targets=targets, sidecar=sidecar)


def generate_quantile_dataset(
    chain,
    scenarios: dict,
    eta_sampler,
    e0_sampler,
    simulator,
    n: int,
    seed: int,
    simulator_id: str = "fairlite",
    chain_hash: str = "",
) -> RecordData:
    """Rows (scenario one-hot || eta) -> horizon scalar.

    Per row: scenario uniform over the table, eta from eta_sampler(rng),
    base emission from e0_sampler(eta, rng), theta uniform over the
    post-burn chain. simulator(scenario_ids, e0s, thetas) returns the
    horizon values in one batch.
    """
    post = chain.post_burn()
    if post.shape[0] < 1:
        raise ConfigError("chain has no post-burn-in rows")
    n_chain = post.shape[0]
    ids = sorted(int(s) for s in scenarios.keys())
    K = len(ids)
    id_pos = {s: j for j, s in enumerate(ids)}

    rows = []
    for i in range(n):
        rng = row_stream(seed, i)
        s = ids[int(rng.integers(K))]
        eta = np.asarray(eta_sampler(rng), dtype=np.float64)
        e0 = float(e0_sampler(eta, rng))
        th = post[int(rng.integers(n_chain))]
        rows.append((s, eta, e0, th))

    if n > 0:
        s_ids = np.array([r[0] for r in rows])
        etas = np.stack([r[1] for r in rows])
        e0s = np.array([r[2] for r in rows])
        thetas = np.stack([r[3] for r in rows])
        ys = np.asarray(simulator(s_ids, e0s, thetas), dtype=np.float64).ravel()
        if ys.shape != (n,):
            raise ShapeError("simulator must return one horizon value per row")
        if not np.all(np.isfinite(ys)):
            raise DataQualityError("simulator produced non-finite horizon values")
        onehot = np.zeros((n, K))
        onehot[np.arange(n), [id_pos[s] for s in s_ids]] = 1.0
        features = np.hstack([onehot, etas])
        targets = ys.reshape(n, 1)
        train, val, test = split_622(n, seed)
        splits = {"train": train.tolist(), "val": val.tolist(), "test": test.tolist()}
    else:
        features = np.zeros((0, K + 3))
        targets = np.zeros((0, 1))
        splits = {"train": [], "val": [], "test": []}

    sidecar = {
        "kind": "quantile",
        "scenario_ids": ids,
        "feature_names": [f"scenario_{s}" for s in ids] + ["eta1", "eta2", "eta3"],
        "target_names": ["y_horizon"],
        "provenance": {
            "chain_hash": chain_hash,
            "seed": int(seed),
            "simulator": simulator_id,
            "n_skipped": 0,
        },
        "splits": splits,
    }
    return RecordData(features=features, targets=targets, sidecar=sidecar)
