"""Property regressors: a ReLU feedforward network and a sum-of-RBF Gaussian process."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}")


class NotPositiveDefinite(RuntimeError):
    pass


def _dense(X) -> np.ndarray:
    if hasattr(X, "toarray"):
        X = X.toarray()
    X = np.asarray(X, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


# -- ANN --------------------------------------------------------------------

@dataclass(frozen=True)
class AnnConfig:
    hidden_layers: tuple[int, ...] = (500,)
    learning_rate: float = 1e-4
    l2_lambda: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 2000
    early_stop_patience: int = 100
    seed: int = 0
    standardize_x: bool = True
    standardize_y: bool = True
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if any(w < 1 for w in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.activation != "relu":
            raise ValueError("only the 'relu' activation is supported")


@dataclass
class AnnModel:
    config: AnnConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def predict(self, X) -> np.ndarray:
        return ann_predict(self, X)

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{tr!r},{va!r}" for e, tr, va in self.history]
        return "\n".join(lines) + "\n"


def _standardizer(A: np.ndarray, enabled: bool):
    if not enabled:
        return np.zeros(A.shape[1]), np.ones(A.shape[1])
    mean = A.mean(axis=0)
    scale = A.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def init_ann(n_features: int, cfg: AnnConfig, rng: np.random.Generator | None = None) -> AnnModel:
    """Glorot-uniform weights, zero biases, identity standardization."""
    rng = rng or np.random.default_rng(cfg.seed)
    sizes = [n_features, *cfg.hidden_layers, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return AnnModel(cfg, weights, biases, np.zeros(n_features), np.ones(n_features))


def _forward(weights, biases, Z):
    acts = [Z]
    pre = []
    h = Z
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        a = h @ w + b
        pre.append(a)
        h = a if i == last else np.maximum(a, 0.0)
        acts.append(h)
    return pre, acts


def _loss_and_grads(weights, biases, Z, t, lam):
    """Regularized MSE and its gradients, all in standardized units."""
    pre, acts = _forward(weights, biases, Z)
    out = acts[-1][:, 0]
    n = Z.shape[0]
    resid = out - t
    mse = float(np.mean(resid ** 2))
    penalty = 0.5 * lam * sum(float((w * w).sum()) for w in weights)
    g = (2.0 / n) * resid[:, None]
    gw, gb = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ g + lam * weights[i]
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ weights[i].T) * (pre[i - 1] > 0)
    return mse + penalty, mse, gw, gb


def _mse(weights, biases, Z, t) -> float:
    out = _forward(weights, biases, Z)[1][-1][:, 0]
    return float(np.mean((out - t) ** 2))


def ann_train(X_train, y_train, X_val=None, y_val=None, cfg: AnnConfig = AnnConfig()) -> AnnModel:
    """Adam on shuffled mini-batches with early stopping on validation MSE.

    Losses in the history are standardized-space MSE (without the L2 term).
    With validation data the returned model carries the weights from the best
    validation epoch; without it, training runs ``max_epochs`` and the final
    weights are kept.
    """
    X = _dense(X_train)
    y = np.asarray(y_train, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("X_train and y_train differ in length")
    has_val = X_val is not None and y_val is not None and len(y_val) > 0
    rng = np.random.default_rng(cfg.seed)
    model = init_ann(X.shape[1], cfg, rng)
    model.x_mean, model.x_scale = _standardizer(X, cfg.standardize_x)
    if cfg.standardize_y:
        model.y_mean = float(y.mean())
        model.y_scale = float(y.std()) or 1.0
    Z = (X - model.x_mean) / model.x_scale
    t = (y - model.y_mean) / model.y_scale
    if has_val:
        Zv = (_dense(X_val) - model.x_mean) / model.x_scale
        tv = (np.asarray(y_val, dtype=float).ravel() - model.y_mean) / model.y_scale

    W, B = model.weights, model.biases
    params = W + B
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-7
    step = 0
    best = (np.inf, None, None)
    since_best = 0
    n = X.shape[0]
    bs = max(1, min(cfg.batch_size, n))

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            loss, _, gw, gb = _loss_and_grads(W, B, Z[idx], t[idx], cfg.l2_lambda)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            step += 1
            lr_t = cfg.learning_rate * math.sqrt(1 - beta2 ** step) / (1 - beta1 ** step)
            for k, (p, g) in enumerate(zip(params, gw + gb)):
                m1[k] = beta1 * m1[k] + (1 - beta1) * g
                m2[k] = beta2 * m2[k] + (1 - beta2) * g * g
                p -= lr_t * m1[k] / (np.sqrt(m2[k]) + eps)
        train_loss = _mse(W, B, Z, t)
        val_loss = _mse(W, B, Zv, tv) if has_val else float("nan")
        if not np.isfinite(train_loss):
            raise TrainingDiverged(epoch)
        model.history.append((epoch, train_loss, val_loss))
        if not has_val:
            model.best_epoch = epoch
            continue
        if val_loss < best[0]:
            best = (val_loss, [w.copy() for w in W], [b.copy() for b in B])
            model.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    if has_val and best[1] is not None:
        model.weights, model.biases = best[1], best[2]
    return model


def ann_predict(model: AnnModel, X) -> np.ndarray:
    X = _dense(X)
    if X.shape[1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {X.shape[1]}")
    Z = (X - model.x_mean) / model.x_scale
    out = _forward(model.weights, model.biases, Z)[1][-1][:, 0]
    return out * model.y_scale + model.y_mean


def ann_loss(model: AnnModel, X, y, lam: float | None = None) -> float:
    """Regularized training objective for ``(X, y)`` under the model's scaling."""
    lam = model.config.l2_lambda if lam is None else lam
    Z = (_dense(X) - model.x_mean) / model.x_scale
    t = (np.asarray(y, dtype=float).ravel() - model.y_mean) / model.y_scale
    return _loss_and_grads(model.weights, model.biases, Z, t, lam)[0]


def ann_gradients(model: AnnModel, X, y, lam: float | None = None):
    lam = model.config.l2_lambda if lam is None else lam
    Z = (_dense(X) - model.x_mean) / model.x_scale
    t = (np.asarray(y, dtype=float).ravel() - model.y_mean) / model.y_scale
    _, _, gw, gb = _loss_and_grads(model.weights, model.biases, Z, t, lam)
    return gw, gb


def ann_gradient_check(model: AnnModel, X, y, epsilon: float = 1e-5,
                       lam: float | None = None) -> float:
    """Max relative error between backprop and central differences over all parameters."""
    gw, gb = ann_gradients(model, X, y, lam)
    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + epsilon
                up = ann_loss(model, X, y, lam)
                p[idx] = orig - epsilon
                down = ann_loss(model, X, y, lam)
                p[idx] = orig
                numeric = (up - down) / (2 * epsilon)
                denom = max(abs(numeric) + abs(g[idx]), 1e-10)
                worst = max(worst, abs(numeric - g[idx]) / denom)
    return worst


# -- GPR --------------------------------------------------------------------

@dataclass(frozen=True)
class GprConfig:
    length_scales: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0)
    amplitudes: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    alpha: float = 1e-5
    restarts: int = 5
    seed: int = 19
    normalize_y: bool = True
    optimize: bool = True
    max_iter: int = 200
    log_bounds: tuple[float, float] = (-11.5, 11.5)

    def __post_init__(self):
        object.__setattr__(self, "length_scales", tuple(float(v) for v in self.length_scales))
        object.__setattr__(self, "amplitudes", tuple(float(v) for v in self.amplitudes))
        if len(self.length_scales) != len(self.amplitudes):
            raise ValueError("need one amplitude per length scale")
        if any(v <= 0 for v in self.length_scales + self.amplitudes):
            raise ValueError("length scales and amplitudes must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def initial_theta(self) -> np.ndarray:
        return np.log(np.array(self.length_scales + self.amplitudes))


def rbf_sum_kernel(A, B, length_scales, amplitudes) -> np.ndarray:
    """Sum over components of ``amp * exp(-|a - b|^2 / (2 ell^2))``."""
    d2 = cdist(_dense(A), _dense(B), "sqeuclidean")
    K = np.zeros_like(d2)
    for ell, amp in zip(length_scales, amplitudes):
        K += amp * np.exp(-0.5 * d2 / (ell * ell))
    return K


def _split_theta(theta):
    c = len(theta) // 2
    return np.exp(theta[:c]), np.exp(theta[c:])


def log_marginal_likelihood(theta, X, y, alpha, d2=None, eval_gradient=False):
    """LML of ``y`` under the RBF-sum kernel at log-parameters ``theta``.

    ``theta`` is ``[log ell_1..ell_c, log amp_1..amp_c]``; the gradient is
    with respect to those log-parameters.
    """
    ells, amps = _split_theta(np.asarray(theta, dtype=float))
    if d2 is None:
        d2 = cdist(X, X, "sqeuclidean")
    comps = [amp * np.exp(-0.5 * d2 / (ell * ell)) for ell, amp in zip(ells, amps)]
    K = sum(comps) + alpha * np.eye(len(y))
    try:
        L = cholesky(K, lower=True)
    except LinAlgError:
        return (-np.inf, np.zeros_like(theta)) if eval_gradient else -np.inf
    w = cho_solve((L, True), y)
    n = len(y)
    lml = -0.5 * y @ w - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    if not eval_gradient:
        return float(lml)
    inner = np.outer(w, w) - cho_solve((L, True), np.eye(n))
    grad = np.empty(len(theta))
    c = len(ells)
    for i, (ell, kc) in enumerate(zip(ells, comps)):
        grad[i] = 0.5 * np.sum(inner * (kc * d2 / (ell * ell)))
        grad[c + i] = 0.5 * np.sum(inner * kc)
    return float(lml), grad


@dataclass
class GprModel:
    config: GprConfig
    X_train: np.ndarray
    length_scales: np.ndarray
    amplitudes: np.ndarray
    alpha_used: float
    chol: np.ndarray
    weights: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    lml: float = float("nan")
    runs: list[tuple[float, float]] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    def kernel(self, A, B) -> np.ndarray:
        return rbf_sum_kernel(A, B, self.length_scales, self.amplitudes)

    def predict(self, X) -> np.ndarray:
        return gpr_predict(self, X).mean


def _factor(K: np.ndarray, alpha: float):
    for a in (alpha, 10 * alpha, 100 * alpha):
        try:
            return cholesky(K + a * np.eye(len(K)), lower=True), a
        except LinAlgError:
            log.warning("Cholesky failed with alpha=%g, escalating jitter", a)
    raise NotPositiveDefinite(f"kernel matrix not positive definite even with alpha={100 * alpha:g}")


def gpr_train(X_train, y_train, cfg: GprConfig = GprConfig()) -> GprModel:
    """Fit kernel parameters by maximizing the log marginal likelihood.

    Run 0 starts from the configured initials; each restart starts from a
    log-uniform draw within a factor of 10 of them. L-BFGS-B with analytic
    gradients climbs the LML; a run never ends below its starting LML.
    """
    X = _dense(X_train)
    y = np.asarray(y_train, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("X_train and y_train differ in length")
    if X.shape[0] < 1:
        raise ValueError("GPR needs at least one training row")
    y_mean, y_scale = 0.0, 1.0
    if cfg.normalize_y:
        y_mean = float(y.mean())
        y_scale = float(y.std()) or 1.0
    t = (y - y_mean) / y_scale
    d2 = cdist(X, X, "sqeuclidean")
    theta0 = cfg.initial_theta()
    lo, hi = cfg.log_bounds

    best_theta, best_lml = theta0, log_marginal_likelihood(theta0, X, t, cfg.alpha, d2)
    runs = []
    if cfg.optimize:
        rng = np.random.default_rng(cfg.seed)
        starts = [theta0] + [
            theta0 + rng.uniform(-math.log(10), math.log(10), size=theta0.shape)
            for _ in range(cfg.restarts)
        ]

        def objective(th):
            v, g = log_marginal_likelihood(th, X, t, cfg.alpha, d2, eval_gradient=True)
            if not np.isfinite(v):
                return 1e25, np.zeros_like(th)
            return -v, -g

        for start in starts:
            start = np.clip(start, lo, hi)
            init = log_marginal_likelihood(start, X, t, cfg.alpha, d2)
            res = minimize(objective, start, jac=True, method="L-BFGS-B",
                           bounds=[(lo, hi)] * len(start),
                           options={"maxiter": cfg.max_iter})
            theta, final = res.x, -float(res.fun)
            if not final >= init:
                theta, final = start, init
            runs.append((float(init), float(final)))
            if final > best_lml:
                best_theta, best_lml = theta, final

    ells, amps = _split_theta(best_theta)
    K = rbf_sum_kernel(X, X, ells, amps)
    L, alpha_used = _factor(K, cfg.alpha)
    w = cho_solve((L, True), t)
    return GprModel(cfg, X, ells, amps, alpha_used, L, w, y_mean, y_scale,
                    float(best_lml), runs)


@dataclass
class GprPrediction:
    mean: np.ndarray
    variance: np.ndarray
    n_clamped: int = 0
    min_raw_variance: float = 0.0

    def __iter__(self):
        return iter((self.mean, self.variance))


def gpr_predict(model: GprModel, X) -> GprPrediction:
    """Posterior mean and variance (in target units); negative variances clamp to 0."""
    X = _dense(X)
    if X.shape[1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {X.shape[1]}")
    Ks = model.kernel(X, model.X_train)
    mean = Ks @ model.weights
    v = solve_triangular(model.chol, Ks.T, lower=True)
    prior = float(model.amplitudes.sum())
    var = prior - np.einsum("ij,ij->j", v, v)
    n_neg = int((var < 0).sum())
    raw_min = float(var.min()) if var.size else 0.0
    var = np.maximum(var, 0.0)
    return GprPrediction(mean * model.y_scale + model.y_mean,
                         var * model.y_scale ** 2, n_neg, raw_min)


# -- serialization helpers ----------------------------------------------------

def ann_to_payload(model: AnnModel) -> dict:
    return {
        "config": asdict(model.config),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "x_mean": model.x_mean.tolist(),
        "x_scale": model.x_scale.tolist(),
        "y_mean": model.y_mean,
        "y_scale": model.y_scale,
        "best_epoch": model.best_epoch,
        "history": [list(h) for h in model.history],
    }


def ann_from_payload(p: dict) -> AnnModel:
    cfg = AnnConfig(**p["config"])
    return AnnModel(
        cfg,
        [np.array(w, dtype=float) for w in p["weights"]],
        [np.array(b, dtype=float) for b in p["biases"]],
        np.array(p["x_mean"], dtype=float),
        np.array(p["x_scale"], dtype=float),
        float(p["y_mean"]),
        float(p["y_scale"]),
        [tuple(h) for h in p.get("history", [])],
        p.get("best_epoch"),
    )


def gpr_to_payload(model: GprModel) -> dict:
    return {
        "config": asdict(model.config),
        "X_train": model.X_train.tolist(),
        "length_scales": model.length_scales.tolist(),
        "amplitudes": model.amplitudes.tolist(),
        "alpha_used": model.alpha_used,
        "chol": model.chol.tolist(),
        "weights": model.weights.tolist(),
        "y_mean": model.y_mean,
        "y_scale": model.y_scale,
        "lml": model.lml,
        "runs": [list(r) for r in model.runs],
    }


def gpr_from_payload(p: dict) -> GprModel:
    cfg = GprConfig(**p["config"])
    n = len(p["X_train"])
    X = np.array(p["X_train"], dtype=float).reshape(n, -1)
    return GprModel(
        cfg, X,
        np.array(p["length_scales"], dtype=float),
        np.array(p["amplitudes"], dtype=float),
        float(p["alpha_used"]),
        np.array(p["chol"], dtype=float).reshape(n, n),
        np.array(p["weights"], dtype=float),
        float(p["y_mean"]),
        float(p["y_scale"]),
        float(p["lml"]),
        [tuple(r) for r in p.get("runs", [])],
    )
