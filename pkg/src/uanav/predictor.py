"""Deep-ensemble probabilistic pedestrian trajectory predictor.

Each ensemble member is a small GRU encoder over the 8 observed
``[x, y, u, v]`` states followed by a step-conditioned decoder MLP that
emits ``(mu_x, mu_y, s_x, s_y)`` for each of the 12 future steps, with
variance ``softplus(s) + 1e-6``. Histories are shifted so the last observed
position is the origin; predictions are shifted back on output.

Everything is plain numpy with hand-written backpropagation so that the
gradient can be checked against finite differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DT = 0.4
HISTORY_LEN = 8
FUTURE_LEN = 12
VAR_FLOOR = 1e-6
MODEL_FORMAT = "uanav-ensemble/1"


class TrainingDivergenceError(RuntimeError):
    """Raised when activations, losses or gradients stop being finite."""


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class GaussianStep:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class GaussianForecast:
    """Per-step predicted means (F, 2) and covariances (F, 2, 2) for one pedestrian.

    ``current`` is the pedestrian's last observed position, used by the CBF
    constraint at the start of the horizon.
    """

    means: np.ndarray
    covs: np.ndarray
    ped_id: int = 0
    start_step: int = 0
    current: np.ndarray | None = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        covs = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        if len(covs) != len(self.means):
            raise ValueError("means and covariances must have the same length")
        if not np.all(np.isfinite(self.means)) or not np.all(np.isfinite(covs)):
            raise ValueError("forecast contains non-finite values")
        if np.any(np.abs(covs - covs.transpose(0, 2, 1)) > 1e-9):
            raise ValueError("forecast covariance not symmetric")
        a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
        lam_min = 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)
        if np.any(lam_min < -1e-12):
            raise ValueError("forecast covariance not positive semi-definite")
        self.covs = covs
        if self.current is None:
            self.current = self.means[0].copy()
        else:
            self.current = np.asarray(self.current, dtype=float)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def steps(self) -> list[GaussianStep]:
        return [GaussianStep(m, c) for m, c in zip(self.means, self.covs)]

    def deterministic(self) -> "GaussianForecast":
        return GaussianForecast(
            self.means.copy(), np.zeros_like(self.covs), self.ped_id, self.start_step, self.current
        )


@dataclass(frozen=True)
class UncertaintySplit:
    aleatoric: np.ndarray
    epistemic: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.aleatoric + self.epistemic


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 4
    hidden: int = 64
    decoder_hidden: int = 64
    history: int = HISTORY_LEN
    horizon: int = FUTURE_LEN

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        H, D, Hd, F = self.hidden, self.input_dim, self.decoder_hidden, self.horizon
        return [
            ("W", (3 * H, D)),
            ("U", (3 * H, H)),
            ("b", (3 * H,)),
            ("b_hn", (H,)),
            ("Dh", (Hd, H)),
            ("E", (Hd, F)),
            ("d", (Hd,)),
            ("O", (4, Hd)),
            ("o", (4,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        if theta.shape != (self.n_params,):
            raise ValueError(f"parameter vector has shape {theta.shape}, expected ({self.n_params},)")
        out, i = {}, 0
        for name, shape in self.shapes():
            n = int(np.prod(shape))
            out[name] = theta[i : i + n].reshape(shape)
            i += n
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for name, shape in self.shapes():
            if name in ("W", "U", "b", "b_hn"):
                bound = 1.0 / np.sqrt(self.hidden)
            elif name in ("Dh", "E", "d"):
                bound = 1.0 / np.sqrt(self.hidden + self.horizon)
            else:
                bound = 1.0 / np.sqrt(self.decoder_hidden)
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
        return np.concatenate(parts)


@dataclass
class EnsembleMember:
    theta: np.ndarray
    arch: Architecture = field(default_factory=Architecture)
    seed: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.arch.n_params,):
            raise ValueError(
                f"member has {self.theta.size} parameters, architecture needs {self.arch.n_params}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("member parameters must be finite")


@dataclass
class Ensemble:
    members: list[EnsembleMember]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        arch = self.members[0].arch
        if any(m.arch != arch for m in self.members):
            raise ValueError("ensemble members must share one architecture")

    @property
    def arch(self) -> Architecture:
        return self.members[0].arch

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class TrainConfig:
    members: int = 3
    epochs: int = 100
    batch_size: int = 64
    hidden: int = 64
    lr: float = 8e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 10.0
    seed: int = 0


# ---------------------------------------------------------------------------
# observation handling


def observations_from_positions(positions, dt: float = DT) -> np.ndarray:
    """Stack ``[x, y, u, v]`` with backward-difference velocities.

    The first sample borrows the forward difference.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    vel = np.zeros_like(pos)
    if len(pos) >= 2:
        vel[1:] = np.diff(pos, axis=0) / dt
        vel[0] = vel[1]
    return np.hstack([pos, vel])


def validate_history(history) -> np.ndarray:
    h = np.asarray(history, dtype=float)
    if h.shape != (HISTORY_LEN, 4):
        raise ValueError(f"history must have shape ({HISTORY_LEN}, 4), got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("history contains non-finite values")
    return h


def make_samples(tracks, dt: float = DT) -> tuple[np.ndarray, np.ndarray]:
    """Sliding 8+12 windows over tracks -> (histories (S,8,4), futures (S,12,2)).

    ``tracks`` holds (n, 2) position arrays or objects with a ``positions`` attribute.
    """
    hist, fut = [], []
    window = HISTORY_LEN + FUTURE_LEN
    for track in tracks:
        pos = np.asarray(getattr(track, "positions", track), dtype=float)
        if len(pos) < window:
            continue
        obs = observations_from_positions(pos, dt)
        for s in range(len(pos) - window + 1):
            hist.append(obs[s : s + HISTORY_LEN])
            fut.append(pos[s + HISTORY_LEN : s + window])
    if not hist:
        return np.zeros((0, HISTORY_LEN, 4)), np.zeros((0, FUTURE_LEN, 2))
    return np.stack(hist), np.stack(fut)


def constant_velocity_baseline(histories, horizon: int = FUTURE_LEN, dt: float = DT) -> np.ndarray:
    h = np.asarray(histories, dtype=float)
    steps = dt * np.arange(1, horizon + 1)
    return h[:, -1, None, :2] + steps[None, :, None] * h[:, -1, None, 2:]


def _normalize(histories: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    origin = histories[:, -1, :2].copy()
    feats = histories.copy()
    feats[:, :, :2] -= origin[:, None, :]
    return feats, origin


# ---------------------------------------------------------------------------
# network


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _check(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise TrainingDivergenceError(f"non-finite activation in layer {name!r}")


def _forward_raw(theta, arch: Architecture, feats: np.ndarray):
    """Raw head output (B, F, 4) for normalised features (B, T, D), plus the cache."""
    p = arch.unpack(theta)
    H = arch.hidden
    B, T, _ = feats.shape
    h = np.zeros((B, H))
    cache = []
    for t in range(T):
        x = feats[:, t]
        a = x @ p["W"].T + p["b"]
        c = h @ p["U"].T
        z = _sigmoid(a[:, :H] + c[:, :H])
        r = _sigmoid(a[:, H : 2 * H] + c[:, H : 2 * H])
        g = c[:, 2 * H :] + p["b_hn"]
        n = np.tanh(a[:, 2 * H :] + r * g)
        h_new = (1.0 - z) * n + z * h
        cache.append((x, h, z, r, g, n))
        h = h_new
    _check("encoder", h)
    base = h @ p["Dh"].T + p["d"]
    s = np.tanh(base[:, None, :] + p["E"].T[None, :, :])
    _check("decoder", s)
    out = s @ p["O"].T + p["o"]
    _check("head", out)
    return out, (cache, h, s)


def _backward(theta, arch: Architecture, dout: np.ndarray, cache) -> np.ndarray:
    p = arch.unpack(theta)
    g_all = np.zeros_like(theta)
    gp = arch.unpack(g_all)  # views into g_all
    H = arch.hidden
    steps, h_last, s = cache
    gp["O"][...] = np.einsum("bfk,bfj->kj", dout, s)
    gp["o"][...] = dout.sum(axis=(0, 1))
    dpre = (dout @ p["O"]) * (1.0 - s * s)
    gp["E"][...] = dpre.sum(axis=0).T
    dbase = dpre.sum(axis=1)
    gp["d"][...] = dbase.sum(axis=0)
    gp["Dh"][...] = dbase.T @ h_last
    dh = dbase @ p["Dh"]
    for x, h_prev, z, r, g, n in reversed(steps):
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        dr = dan * g
        dg = dan * r
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        da = np.hstack([dz_pre, dr_pre, dan])
        dc = np.hstack([dz_pre, dr_pre, dg])
        gp["W"][...] += da.T @ x
        gp["b"][...] += da.sum(axis=0)
        gp["U"][...] += dc.T @ h_prev
        gp["b_hn"][...] += dg.sum(axis=0)
        dh = dh_prev + dc @ p["U"]
    return g_all


def _split_head(out: np.ndarray):
    return out[..., :2], _softplus(out[..., 2:]) + VAR_FLOOR


def forward_batch(member: EnsembleMember, histories) -> tuple[np.ndarray, np.ndarray]:
    """Means (B, F, 2) in world coordinates and variances (B, F, 2)."""
    h = np.asarray(histories, dtype=float)
    feats, origin = _normalize(h)
    out, _ = _forward_raw(member.theta, member.arch, feats)
    mean, var = _split_head(out)
    return mean + origin[:, None, :], var


def forward(member: EnsembleMember, history) -> tuple[np.ndarray, np.ndarray]:
    """Per-step mean (F, 2) and variance (F, 2) for one history window."""
    mean, var = forward_batch(member, validate_history(history)[None])
    return mean[0], var[0]


# ---------------------------------------------------------------------------
# loss


def gaussian_nll(mean, variance, target) -> float:
    """Per-axis Gaussian NLL summed over axes, additive constant dropped."""
    mean, variance, target = (np.asarray(a, dtype=float) for a in (mean, variance, target))
    if np.any(variance <= 0):
        raise ValueError("variance must be strictly positive")
    return float(np.sum(0.5 * np.log(variance) + 0.5 * (target - mean) ** 2 / variance))


def batch_loss(member: EnsembleMember, histories, futures) -> float:
    """Mean over samples and steps of the per-step NLL."""
    mean, var = forward_batch(member, histories)
    B, F = mean.shape[:2]
    return gaussian_nll(mean, var, futures) / (B * F)


def nll_gradient(member: EnsembleMember, histories, futures) -> tuple[float, np.ndarray]:
    """Loss and exact gradient of :func:`batch_loss` with respect to ``member.theta``."""
    h = np.asarray(histories, dtype=float)
    y = np.asarray(futures, dtype=float)
    if len(h) == 0:
        raise ValueError("batch must be non-empty")
    return _loss_and_grad(member.theta, member.arch, h, y)


def _loss_and_grad(theta, arch: Architecture, h: np.ndarray, y: np.ndarray):
    feats, origin = _normalize(h)
    target = y - origin[:, None, :]
    out, cache = _forward_raw(theta, arch, feats)
    mean, var = _split_head(out)
    B, F = mean.shape[:2]
    scale = 1.0 / (B * F)
    resid = target - mean
    loss = scale * float(np.sum(0.5 * np.log(var) + 0.5 * resid**2 / var))
    dout = np.empty_like(out)
    dout[..., :2] = -scale * resid / var
    dvar = scale * (0.5 / var - 0.5 * resid**2 / var**2)
    dout[..., 2:] = dvar * _sigmoid(out[..., 2:])
    grad = _backward(theta, arch, dout, cache)
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise TrainingDivergenceError(f"non-finite gradient at parameter index {bad[0]}")
    return loss, grad


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, n: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_member(
    histories: np.ndarray,
    futures: np.ndarray,
    config: TrainConfig,
    index: int = 0,
    log: list | None = None,
) -> tuple[EnsembleMember, float, float]:
    """Train one member; returns (member, initial full-set NLL, final full-set NLL)."""
    arch = Architecture(hidden=config.hidden, decoder_hidden=config.hidden)
    seed = config.seed + 1000 * index
    rng = np.random.default_rng(seed)
    member = EnsembleMember(arch.init(rng), arch, seed)
    opt = Adam(arch.n_params, config.lr, config.beta1, config.beta2, config.eps)
    initial = batch_loss(member, histories, futures)
    n = len(histories)
    theta = member.theta
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                loss, grad = _loss_and_grad(theta, arch, histories[idx], futures[idx])
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"member {index}, epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"member {index}, epoch {epoch}: NLL is {loss}")
            if config.clip_norm is not None:
                norm = np.linalg.norm(grad)
                if norm > config.clip_norm:
                    grad = grad * (config.clip_norm / norm)
            theta = opt.step(theta, grad)
            total += loss * len(idx)
        if log is not None:
            log.append({"member": index, "epoch": epoch, "nll": total / n})
        logger.debug("member %d epoch %d nll %.4f", index, epoch, total / n)
    member = EnsembleMember(theta, arch, seed)
    final = batch_loss(member, histories, futures)
    return member, initial, final


def train_ensemble(histories, futures, config: TrainConfig = TrainConfig(), log: list | None = None) -> Ensemble:
    """Train ``config.members`` independent members on the whole dataset."""
    histories = np.asarray(histories, dtype=float)
    futures = np.asarray(futures, dtype=float)
    if len(histories) == 0:
        raise ValueError("dataset is empty")
    if histories.shape[1:] != (HISTORY_LEN, 4) or futures.shape[1:] != (FUTURE_LEN, 2):
        raise ValueError(
            f"expected histories (S, 8, 4) and futures (S, 12, 2), got {histories.shape} and {futures.shape}"
        )
    if config.members < 1:
        raise ValueError("need at least one member")
    members, initial, final = [], [], []
    for i in range(config.members):
        m, a, b = train_member(histories, futures, config, i, log)
        members.append(m)
        initial.append(a)
        final.append(b)
    meta = {
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "seeds": [m.seed for m in members],
        "initial_nll": initial,
        "final_nll": final,
        "n_samples": int(len(histories)),
    }
    return Ensemble(members, meta)


# ---------------------------------------------------------------------------
# ensemble combination


def mixture(means, variances) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-mixture moments over the leading (member) axis."""
    mu = np.asarray(means, dtype=float)
    var = np.asarray(variances, dtype=float)
    mu_star = mu.mean(axis=0)
    var_star = (var + mu * mu).mean(axis=0) - mu_star * mu_star
    return mu_star, np.maximum(var_star, 0.0)


def decompose_uncertainty(means, variances) -> UncertaintySplit:
    """Aleatoric (mean of variances) and epistemic (population variance of means)."""
    mu = np.asarray(means, dtype=float)
    var = np.asarray(variances, dtype=float)
    if mu.shape[0] < 1:
        raise ValueError("need at least one member")
    return UncertaintySplit(var.mean(axis=0), ((mu - mu.mean(axis=0)) ** 2).mean(axis=0))


def member_outputs(ensemble: Ensemble, histories) -> tuple[np.ndarray, np.ndarray]:
    """Stacked member means and variances, shape (M, B, F, 2)."""
    outs = [forward_batch(m, histories) for m in ensemble.members]
    return np.stack([o[0] for o in outs]), np.stack([o[1] for o in outs])


def predict_batch(ensemble: Ensemble, histories) -> tuple[np.ndarray, np.ndarray]:
    """Mixture means (B, F, 2) and per-axis variances (B, F, 2)."""
    return mixture(*member_outputs(ensemble, histories))


def ensemble_predict(ensemble: Ensemble, history, ped_id: int = 0, start_step: int = 0) -> GaussianForecast:
    h = validate_history(history)
    mu, var = predict_batch(ensemble, h[None])
    covs = np.zeros((mu.shape[1], 2, 2))
    covs[:, 0, 0] = var[0, :, 0]
    covs[:, 1, 1] = var[0, :, 1]
    return GaussianForecast(mu[0], covs, ped_id, start_step, current=h[-1, :2])


# ---------------------------------------------------------------------------
# persistence


def save_ensemble(ensemble: Ensemble, path) -> Path:
    path = Path(path)
    arch = ensemble.arch
    header = {
        "format": MODEL_FORMAT,
        "architecture": {
            "input_dim": arch.input_dim,
            "hidden": arch.hidden,
            "decoder_hidden": arch.decoder_hidden,
            "history": arch.history,
            "horizon": arch.horizon,
        },
        "members": len(ensemble),
        "member_seeds": [m.seed for m in ensemble.members],
        "metadata": ensemble.metadata,
    }
    arrays = {f"theta_{i}": m.theta for i, m in enumerate(ensemble.members)}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)
    return path


def load_ensemble(path) -> Ensemble:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {header.get('format')!r} in {path}")
        arch = Architecture(**header["architecture"])
        seeds = header["member_seeds"]
        members = [EnsembleMember(data[f"theta_{i}"], arch, seeds[i]) for i in range(header["members"])]
    return Ensemble(members, header.get("metadata", {}))
