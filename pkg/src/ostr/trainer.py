"""SGD training over sampled episodes, evaluation sweeps and the gradient check."""
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import episodes as ep
from . import net, objective, ops

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    epochs: int = 1000
    episodes_per_epoch: int = 240
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 0
    eval_episodes: int = 240
    eval_seed: int = 1
    # step decay, off by default
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    # rescale the loss gradient when its global L2 norm exceeds this; 0 = off
    clip_norm: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1 or self.episodes_per_epoch < 1:
            raise ValueError("batch_size and episodes_per_epoch must be positive")

    @classmethod
    def from_mapping(cls, d):
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in types:
                raise ValueError(f"unknown training option {k!r}")
            out[k] = (int if types[k] in (int, "int") else float)(v)
        return cls(**out)


DESK_RECIPE = dict(lr=5e-4, momentum=0.5, batch_size=4, lr_decay=0.5, lr_decay_every=10,
                   epochs=30, episodes_per_epoch=64)


def desk_train_config(seed=0, **overrides) -> TrainConfig:
    """The 30 x 64 episode recipe used for the tiny config on a procedural bank.

    Batch norm statistics from batches of 1 or 2 episodes diverge from the
    running averages used at inference, and batches of 8 leave too few steps,
    so this uses batches of 4 with damped momentum.
    """
    return TrainConfig(**{**DESK_RECIPE, "seed": seed, **overrides})


class SGD:
    """Momentum SGD with weight decay folded into the velocity.

    v <- momentum * v + grad + weight_decay * w ;  w <- w - lr * v.
    Batch-norm affine terms and biases are not decayed.
    """

    def __init__(self, params: net.ParamStore, config: TrainConfig):
        self.params = params
        self.config = config
        self.velocity = {k: np.zeros_like(p.value) for k, p in params.trainable()}
        self.lr = config.lr

    def step(self):
        if not self.params.grads_ready:
            raise RuntimeError("sgd step requested before any backward pass")
        cfg = self.config
        scale = 1.0
        if cfg.clip_norm:
            norm = np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for _, p in self.params.trainable()))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
        for k, p in self.params.trainable():
            g = p.grad if scale == 1.0 else p.grad * scale
            if cfg.weight_decay and p.decay:
                g = g + cfg.weight_decay * p.value
            v = self.velocity[k]
            v *= cfg.momentum
            v += g
            p.value -= (self.lr * v).astype(p.value.dtype, copy=False)
        self.params.zero_grad()


def sgd_step(params, config, optimizer=None):
    """One update; pass the same `optimizer` across calls to keep momentum."""
    optimizer = optimizer or SGD(params, config)
    optimizer.step()
    return optimizer


@dataclass
class RunRecord:
    steps: list = field(default_factory=list)       # (epoch, step, loss, lr)
    epoch_loss: list = field(default_factory=list)
    evals: list = field(default_factory=list)       # (epoch, {subset: iou}, overall)
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    best_iou: float = float("nan")
    best_epoch: int = -1

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "steps.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "step", "loss", "lr"])
            for e, s, loss, lr in self.steps:
                w.writerow([e, s, f"{loss:.9g}", f"{lr:.9g}"])
        summary = {
            "epoch_loss": self.epoch_loss, "evals": self.evals, "wall_clock": self.wall_clock,
            "config": self.config, "best_iou": self.best_iou, "best_epoch": self.best_epoch,
        }
        (directory / "summary.json").write_text(json.dumps(summary, indent=1))


def loss_trend_flag(losses, window=50):
    """True when the trailing `window` steps average higher than the window before.

    Single steps may rise under momentum; only a sustained increase is flagged.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) < 2 * window:
        return False
    return bool(losses[-window:].mean() > losses[-2 * window:-window].mean())


def _first_nonfinite(params):
    for k, p in params.items():
        if not np.isfinite(p.value).all():
            return k
        if not np.isfinite(p.grad).all():
            return k + ".grad"
    return None


def train_step(params, config, Q, R, T, optimizer):
    state = net.model_forward(Q, R, params, config, train=True)
    loss, grad = objective.weighted_bce(state.A, T)
    if not np.isfinite(loss.total):
        raise FloatingPointError("non-finite loss; first bad tensor: "
                                 f"{_first_nonfinite(params) or 'prediction'}")
    net.model_backward(grad, state, params)
    bad = _first_nonfinite(params)
    if bad:
        raise FloatingPointError(f"non-finite values in {bad}")
    optimizer.step()
    return loss.total, state


def train(bank, split, net_config, train_config, out_dir=None, params=None, fixed_episodes=None):
    """Train from scratch (or from `params`); returns ``(params, RunRecord)``.

    With `fixed_episodes`, every epoch cycles over that list instead of
    drawing fresh collages.
    """
    cfg = train_config
    if params is None:
        params = net.init_params(net_config, cfg.seed)
    opt = SGD(params, cfg)
    record = RunRecord(config={"net": net_config.to_dict(), "train": asdict(cfg),
                               "split": split.to_dict()})
    test_classes = set(split.test_classes)
    size = net_config.input_size
    best = None
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_every and epoch and epoch % cfg.lr_decay_every == 0:
            opt.lr *= cfg.lr_decay
        if fixed_episodes is not None:
            pool = list(fixed_episodes)
        else:
            pool = ep.episodes(bank, split, "train", cfg.seed, cfg.episodes_per_epoch, size,
                               start=epoch * cfg.episodes_per_epoch)
        rem = len(pool) % cfg.batch_size
        if rem and fixed_episodes is None:
            # pad the last batch with extra draws from a separate index range
            pad_start = 10**9 + epoch * cfg.batch_size
            pool += ep.episodes(bank, split, "train", cfg.seed, cfg.batch_size - rem, size, start=pad_start)
        losses = []
        for b in range(0, len(pool), cfg.batch_size):
            batch = pool[b:b + cfg.batch_size]
            for e in batch:
                if e.class_id in test_classes:
                    raise AssertionError(f"training batch contains held-out class {e.class_id}")
            Q, R, T = ep.batch_arrays(batch)
            loss, _ = train_step(params, net_config, Q, R, T, opt)
            losses.append(loss)
            record.steps.append((epoch, step, loss, opt.lr))
            step += 1
        record.epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch, record.epoch_loss[-1])
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            res = evaluate(params, net_config, bank, split, cfg.eval_episodes, cfg.eval_seed)
            record.evals.append((epoch, res.subset_means, res.overall))
            if best is None or res.overall > record.best_iou:
                record.best_iou, record.best_epoch = res.overall, epoch
                best = params.copy()
                if out_dir:
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    net.save_checkpoint(best, net_config, Path(out_dir) / "best.ostr")
    record.wall_clock = time.perf_counter() - t0
    if out_dir:
        record.write(out_dir)
        net.save_checkpoint(params, net_config, Path(out_dir) / "last.ostr")
    return params, record


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalResult:
    rows: list          # dicts: episode_id, subset, class, iou, loss
    subset_means: dict
    overall: float
    gammas: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["episode_id", "subset", "class", "iou", "loss"])
            for r in self.rows:
                w.writerow([r["episode_id"], r["subset"], r["class"], f"{r['iou']:.6f}", f"{r['loss']:.6f}"])


def predict_batches(params, config, Q, R, batch_size=16):
    As, gammas = [], []
    for i in range(0, len(Q), batch_size):
        A, g = net.predict(Q[i:i + batch_size], R[i:i + batch_size], params, config)
        As.append(A)
        gammas.append(g)
    return np.concatenate(As), np.concatenate(gammas)


def eval_episodes(bank, split, subset, n_episodes, seed, size):
    # one independent stream per subset
    return ep.episodes(bank, split, ("test", subset), seed * 1000 + subset, n_episodes, size)


def evaluate(params, config, bank, split, n_episodes=240, seed=1, subsets=None,
             threshold=0.5, reference_fn=None, batch_size=16):
    """Inference-mode IoU per episode, per subset and as a mean of subset means.

    `reference_fn(R, episode)` may replace each reference image before the
    forward pass (used by the invariance experiments).
    """
    subsets = range(len(split.test_subsets)) if subsets is None else subsets
    rows, groups, gammas = [], {}, []
    for s in subsets:
        eps = eval_episodes(bank, split, s, n_episodes, seed, config.input_size)
        Q, R, T = ep.batch_arrays(eps)
        if reference_fn is not None:
            R = np.stack([reference_fn(r, e) for r, e in zip(R, eps)])
        A, G = predict_batches(params, config, Q, R, batch_size)
        for i, e in enumerate(eps):
            loss, _ = objective.weighted_bce(A[i:i + 1].astype(np.float64), T[i:i + 1])
            score = objective.iou(objective.binarize(A[i], threshold), T[i])
            rows.append({"episode_id": f"{s}-{i:04d}", "subset": s, "class": e.class_id,
                         "iou": score, "loss": loss.total})
            groups.setdefault(s, []).append(score)
            gammas.append((e.class_id, G[i]))
    means, overall = objective.mean_iou(groups)
    return EvalResult(rows, means, overall, gammas)


# -- gradient check -------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: str
    errors: dict = field(default_factory=dict)   # key -> (error, analytic, numeric)

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def linear_toy_config(base: net.NetConfig = None) -> net.NetConfig:
    base = base or net.preset("tiny")
    return replace(base, activation="identity", use_batchnorm=False, use_gating=False)


def gradcheck(net_config, seed=0, tolerance=1e-3, n_samples=500, size=16, step=1e-4,
              floor=1e-6, batch=2, richardson=False, fd_dtype=np.longdouble,
              analytic_dtype=np.float64):
    """Compare analytic gradients with central finite differences.

    Analytic gradients come from one `analytic_dtype` forward/backward on `batch`
    fixed episodes at `size` x `size`, with every head randomly initialized
    so no gradient is trivially zero. `n_samples` seeded scalars are checked
    (all of them if there are fewer, or if `n_samples` is 0).

    The finite differences are evaluated in `fd_dtype` with ReLU masks and
    max-pool winners frozen at the base point, so a perturbation never
    crosses a kink. With `richardson`, the central differences at `step`
    and `step / 2` are combined to cancel the O(step**2) term. The error per
    scalar is ``|a - n| / max(|a|, |n|, floor)``.
    """
    cfg = replace(net_config, input_size=size)
    params = net.init_params(cfg, seed, dtype=analytic_dtype, neutral_heads=False)
    rng = np.random.default_rng(seed)
    for name, p in params.trainable():
        if name.endswith(".b") or name.endswith(".beta"):
            p.value[...] = rng.normal(0, 0.1, p.value.shape)
        elif name.endswith(".gamma"):
            p.value[...] = rng.uniform(0.5, 1.5, p.value.shape)
    bank = ep.procedural_bank(6, 2, size, seed)
    split = ep.SplitSpec(bank.classes, [])
    eps = ep.episodes(bank, split, "train", seed, batch, size)
    Q, R, T = ep.batch_arrays(eps)

    params.zero_grad()
    with ops.record_pattern() as pattern:
        state = net.model_forward(Q, R, params, cfg, train=True, update_stats=False)
    _, grad = objective.weighted_bce(state.A, T.astype(analytic_dtype))
    net.model_backward(grad, state, params)

    probe = params.astype(fd_dtype)
    Qx, Rx, Tx = Q.astype(fd_dtype), R.astype(fd_dtype), T.astype(fd_dtype)

    def loss_at():
        with ops.replay_pattern(pattern):
            st = net.model_forward(Qx, Rx, probe, cfg, train=True, update_stats=False)
        return objective.weighted_bce(st.A, Tx)[0].total_exact

    def central(flat, i, orig, h):
        flat[i] = orig + h
        up = loss_at()
        flat[i] = orig - h
        down = loss_at()
        flat[i] = orig
        return (up - down) / (2 * h)

    index = [(name, i) for name, p in params.trainable() for i in range(p.value.size)]
    if n_samples and len(index) > n_samples:
        pick = rng.choice(len(index), size=n_samples, replace=False)
        index = [index[i] for i in sorted(pick)]

    errors = {}
    worst, worst_err = "", 0.0
    with ops.no_grad():
        for name, i in index:
            flat = probe[name].reshape(-1)
            orig = flat[i]
            h = fd_dtype(step)
            numeric = central(flat, i, orig, h)
            if richardson:
                numeric = (4 * central(flat, i, orig, h / 2) - numeric) / 3
            numeric = float(numeric)
            analytic = float(params.grad(name).reshape(-1)[i])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            errors[f"{name}[{i}]"] = (err, analytic, numeric)
            if err >= worst_err:
                worst, worst_err = f"{name}[{i}]", err
    return GradcheckReport(float(worst_err), len(index), tolerance, worst, errors)
