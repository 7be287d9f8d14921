"""Winner-only training loop, run directories, checkpoints and metric logs."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from modnet import objective
from modnet.combinator import subset_masks
from modnet.dataset import load as load_dataset
from modnet.modules import CheckpointError, ModulePool, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    m: int = 5
    n: int = 5
    u: int = 6
    k: int = 4
    image_size: int = 32
    batch_size: int = 32
    steps: int = 1000
    lr: float = 1e-3
    eps_fd: float = 1e-2
    hessian_pairs: int = 8
    lambda_img: float = 1.0
    lambda_ind: float = 1.0
    lambda_kl: float = 1.0
    lambda_extra: float = 1.0
    lambda_cls: float = 1.0
    lambda_feat: float = 1.0
    id_classifier: bool = False
    seed: int = 0
    checkpoint_interval: int = 500
    channels: list = field(default_factory=lambda: [32, 32, 64, 64])
    hidden: int = 256
    basis_std: float = 0.1
    identity_std: float = 0.01
    data: str = None
    out: str = None

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"need m >= 1 and n >= 1, got m={self.m}, n={self.n}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.eps_fd <= 0:
            raise ValueError(f"eps_fd must be > 0, got {self.eps_fd}")
        if self.image_size not in (32, 64):
            raise ValueError(f"image_size must be 32 or 64, got {self.image_size}")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        self.channels = [int(c) for c in self.channels]
        self.weights()  # validates the lambdas

    @property
    def image_shape(self):
        return (self.image_size, self.image_size, 3)

    def weights(self):
        return objective.LossWeights(self.lambda_img, self.lambda_ind, self.lambda_kl,
                                     self.lambda_extra, self.lambda_cls, self.lambda_feat)

    @property
    def max_pairs(self):
        return None if self.hessian_pairs <= 0 else self.hessian_pairs

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self):
        return asdict(self)


def load_config(path):
    """Read a flat ``key: value`` YAML file into a :class:`TrainConfig`."""
    with open(path) as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict) or any(isinstance(v, dict) for v in values.values()):
        raise ValueError(f"{path}: config must be a flat mapping of keys to values")
    return TrainConfig.from_dict(values)


def dump_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)


@dataclass
class TrainState:
    config: TrainConfig
    pool: ModulePool
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    batch_rng: np.random.Generator
    step: int = 0
    nonfinite: int = 0


def build_pool(config, num_classes):
    return ModulePool(config.m, config.n, config.u, config.k, config.image_shape, tuple(config.channels),
                      config.hidden, num_classes, config.id_classifier, config.basis_std, config.identity_std)


def init_state(config, num_classes=4):
    torch.manual_seed(config.seed)
    pool = build_pool(config, num_classes)
    optimizer = torch.optim.Adam(pool.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed + 1)
    batch_rng = np.random.default_rng(config.seed + 2)
    return TrainState(config, pool, optimizer, generator, batch_rng)


def train_step(state, x, labels=None, sample_ids=None):
    """One winner-only optimisation step on a batch ``x`` of shape ``(B, 3, H, W)``.

    Every sample scores all candidates, keeps its own winner, and the mean of
    the winners' losses is backpropagated. A non-finite loss skips the update.
    """
    cfg = state.config
    pool = state.pool
    x = torch.as_tensor(x)
    B = x.shape[0]
    weights = cfg.weights()
    noise = objective.sample_noise(B, cfg.m, cfg.k, state.generator)
    plans = objective.plan_pairs(cfg.m, cfg.k, cfg.max_pairs, state.generator)

    state.step += 1
    state.optimizer.zero_grad(set_to_none=True)
    try:
        lat = objective.encode_pool(pool, x, noise)
    except objective.NonFiniteError as exc:
        return state, _aborted(state, B, str(exc), labels, sample_ids)
    frozen = objective.PoolLatents(lat.mu.detach(), lat.sigma.detach(), lat.z.detach(), lat.T.detach(),
                                   lat.bases.detach())
    scores = objective.score_batch(pool, x, frozen, plans, weights, cfg.eps_fd)
    winners = scores.winners()
    loss, _ = objective.winner_loss(pool, x, lat, winners, plans, weights, cfg.eps_fd,
                                    labels if pool.classifier is not None else None)

    masks = subset_masks(cfg.m)
    win_masks = [masks[int(w) // cfg.n] for w in winners]
    win_ids = [int(w) % cfg.n for w in winners]
    metrics = {"step": state.step, "winner_mask": win_masks, "winner_identity": win_ids}
    metrics.update(loss.as_floats())
    metrics["score"] = float(scores.score.gather(1, winners[:, None]).mean())
    if objective.finite(loss.total):
        loss.total.backward()
        state.optimizer.step()
        metrics["skipped"] = False
    else:
        state.nonfinite += 1
        metrics["skipped"] = True
        log.warning("step %d: non-finite loss %s, update skipped", state.step, loss.as_floats())
    metrics["nonfinite_total"] = state.nonfinite
    if sample_ids is not None:
        shape_ids = labels.tolist() if labels is not None else [None] * B
        metrics["routing"] = [[int(i), s, mk, j] for i, s, mk, j in zip(sample_ids, shape_ids, win_masks, win_ids)]
    return state, metrics


def _aborted(state, B, reason, labels, sample_ids):
    """Metrics record for a step whose forward pass went non-finite."""
    state.nonfinite += 1
    log.warning("step %d: %s, update skipped", state.step, reason)
    metrics = {"step": state.step, "winner_mask": [None] * B, "winner_identity": [None] * B,
               "img": None, "ind": None, "kl": None, "extra": None, "idcls": None, "total": None,
               "score": None, "skipped": True, "nonfinite_total": state.nonfinite, "error": reason}
    if sample_ids is not None:
        shape_ids = labels.tolist() if labels is not None else [None] * B
        metrics["routing"] = [[int(i), s, None, None] for i, s in zip(sample_ids, shape_ids)]
    return metrics


# ---------------------------------------------------------------------------
# Checkpoints


def _optimizer_tensors(state):
    params = list(state.pool.parameters())
    index = {id(p): i for i, p in enumerate(params)}
    out = {}
    for p, st in state.optimizer.state.items():
        i = index[id(p)]
        for key, value in st.items():
            out[f"optim/{i}/{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    return out


def save_state(path, state, extra_meta=None):
    meta = {"step": state.step, "seed": state.config.seed, "nonfinite": state.nonfinite,
            "config": state.config.to_dict(),
            "batch_rng": state.batch_rng.bit_generator.state}
    meta.update(extra_meta or {})
    tensors = _optimizer_tensors(state)
    tensors["rng/torch"] = state.generator.get_state()
    # numpy's PCG64 state holds integers wider than 64 bits; JSON keeps them exact.
    return save_checkpoint(path, state.pool, meta, tensors)


def restore_state(path):
    """Rebuild a :class:`TrainState` (model, optimizer moments, RNG streams, step) from a checkpoint."""
    pool, meta, tensors = load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    optimizer = torch.optim.Adam(pool.parameters(), lr=config.lr)
    params = list(pool.parameters())
    for key, value in tensors.items():
        if not key.startswith("optim/"):
            continue
        _, i, name = key.split("/", 2)
        optimizer.state[params[int(i)]][name] = torch.as_tensor(np.array(value))
    generator = torch.Generator()
    generator.set_state(torch.as_tensor(tensors["rng/torch"], dtype=torch.uint8))
    batch_rng = np.random.default_rng()
    batch_rng.bit_generator.state = meta["batch_rng"]
    state = TrainState(config, pool, optimizer, generator, batch_rng, meta["step"], meta.get("nonfinite", 0))
    return state, meta


def checkpoint_path(run_dir, step):
    return Path(run_dir) / "checkpoints" / f"ckpt_{step:07d}.zip"


def latest_checkpoint(run_dir):
    found = sorted((Path(run_dir) / "checkpoints").glob("ckpt_*.zip"))
    if not found:
        raise CheckpointError(f"no checkpoints in {run_dir}/checkpoints")
    return found[-1]


# ---------------------------------------------------------------------------
# Fit


@dataclass
class FitResult:
    checkpoint: Path
    metrics_path: Path
    state: TrainState
    history: list


def fit(config, data=None, out=None, resume=False, progress=None):
    """Train for ``config.steps`` steps into run directory ``out``.

    The run directory holds ``config.yaml``, ``metrics.jsonl`` (one line per
    step) and ``checkpoints/``. With ``resume`` the latest checkpoint is
    restored, the metrics log is cut back to it, and training continues up to
    ``config.steps``.
    """
    data = data or config.data
    out = Path(out or config.out or "run")
    if data is None:
        raise ValueError("no dataset given")
    dataset = data if hasattr(data, "batch") else load_dataset(data)
    if tuple(dataset.manifest.image_shape) != config.image_shape:
        raise ValueError(f"dataset images are {dataset.manifest.image_shape}, config expects {config.image_shape}")
    train_idx, _ = dataset.split()
    num_classes = dataset.manifest.grid[0]

    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    history = []
    if resume:
        ckpt = latest_checkpoint(out)
        state, _ = restore_state(ckpt)
        state.config.steps = config.steps
        state.config.checkpoint_interval = config.checkpoint_interval
        lines = metrics_path.read_text().splitlines() if metrics_path.exists() else []
        history = [json.loads(line) for line in lines][: state.step]
        metrics_path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    else:
        state = init_state(config, num_classes)
        metrics_path.write_text("")
    dump_config(state.config, out / "config.yaml")
    extra = {"dataset": json.loads(dataset.manifest.to_json()) if hasattr(dataset.manifest, "to_json") else None}

    ckpt = checkpoint_path(out, state.step)
    if state.step == 0:
        save_state(ckpt, state, extra)
    with open(metrics_path, "a") as fh:
        while state.step < state.config.steps:
            idx = np.sort(state.batch_rng.choice(train_idx, size=min(state.config.batch_size, len(train_idx)),
                                                 replace=False))
            x = torch.from_numpy(dataset.batch(idx))
            labels = torch.from_numpy(dataset.shape_ids(idx))
            state, metrics = train_step(state, x, labels, idx)
            fh.write(json.dumps(metrics, sort_keys=True) + "\n")
            fh.flush()
            history.append(metrics)
            if progress is not None:
                progress(metrics)
            if state.step % state.config.checkpoint_interval == 0 or state.step == state.config.steps:
                ckpt = checkpoint_path(out, state.step)
                save_state(ckpt, state, extra)
    return FitResult(ckpt, metrics_path, state, history)


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def moving_average(values, window):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def summarize(history):
    if not history:
        return {"steps": 0}
    last = history[-min(50, len(history)):]

    def mean(key):
        vals = [h[key] for h in last if h.get(key) is not None and math.isfinite(h[key])]
        return float(np.mean(vals)) if vals else math.nan

    return {"steps": history[-1]["step"], "img": mean("img"), "total": mean("total"),
            "nonfinite": history[-1]["nonfinite_total"]}
