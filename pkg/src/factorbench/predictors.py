"""Desk-scale predictors mapping observations to normalized factor estimates."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .factors import FactorSpace
from .splits import SplitAssignment

log = logging.getLogger(__name__)

KINDS = ("mean", "ridge", "mlp", "oracle-readout")
READOUT_HIDDEN = (40, 40, 40)
PIXEL_HIDDEN = (256, 256)


class TrainingDivergedError(RuntimeError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    iterations: int = 20000
    seed: int = 0
    ridge_lambda: float = 100.0  # sized for 64x64 sprite pixels
    hidden: tuple[int, ...] = PIXEL_HIDDEN
    early_stop: bool = True
    window: int = 500  # iterations per loss-trace entry
    patience: int = 4  # windows without 1% improvement before stopping
    sign_flip: bool = False
    random_flips: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class Predictor:
    kind: str = ""

    def __init__(self, input_dim: int, n_factors: int):
        self.input_dim = int(input_dim)
        self.n_factors = int(n_factors)
        self.meta: dict = {}

    def _predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        return predict_batch(self, X)

    def arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError


def predict_batch(predictor: Predictor, X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim > 2:
        X = X.reshape(X.shape[0], -1)
    if X.ndim == 1:
        X = X.reshape(0, predictor.input_dim) if X.size == 0 else X[None, :]
    if X.shape[0] == 0:
        return np.zeros((0, predictor.n_factors))
    if X.shape[1] != predictor.input_dim:
        raise ShapeMismatchError(
            f"{predictor.kind} predictor expects {predictor.input_dim} features, got {X.shape[1]}")
    return predictor._predict(X.astype(np.float64, copy=False))


class MeanPredictor(Predictor):
    kind = "mean"

    def __init__(self, input_dim: int, means: np.ndarray):
        super().__init__(input_dim, len(means))
        self.means = np.asarray(means, dtype=np.float64)

    def _predict(self, X):
        return np.broadcast_to(self.means, (X.shape[0], self.n_factors)).copy()

    def arrays(self):
        return {"means": self.means}


def fit_mean(targets, input_dim: int = 0) -> MeanPredictor:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[0] == 0:
        raise ValueError("fit_mean needs a nonempty (n, n_factors) target matrix")
    return MeanPredictor(input_dim, targets.mean(axis=0))


class RidgePredictor(Predictor):
    kind = "ridge"

    def __init__(self, weights: np.ndarray):
        # last row of ``weights`` is the bias
        super().__init__(weights.shape[0] - 1, weights.shape[1])
        self.weights = weights

    def _predict(self, X):
        return X @ self.weights[:-1] + self.weights[-1]

    def arrays(self):
        return {"weights": self.weights}


def ridge_system(X, Y, lam: float, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Regularised normal equations (A, B) with a trailing unpenalised bias feature."""
    X = np.asarray(X)
    Y = np.asarray(Y, dtype=np.float64)
    n, d = X.shape
    A = np.zeros((d + 1, d + 1))
    B = np.zeros((d + 1, Y.shape[1]))
    for start in range(0, n, chunk):
        xb = np.hstack([np.asarray(X[start:start + chunk], dtype=np.float64),
                        np.ones((min(chunk, n - start), 1))])
        A += xb.T @ xb
        B += xb.T @ Y[start:start + chunk]
    A[np.arange(d), np.arange(d)] += lam
    return A, B


def fit_ridge(X, Y, lam: float) -> RidgePredictor:
    if lam < 0:
        raise ValueError("ridge lambda must be >= 0")
    X = np.asarray(X)
    X = X.reshape(X.shape[0], -1)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("ridge needs at least one training sample")
    A, B = ridge_system(X, Y, lam)
    try:
        W = linalg.cho_solve(linalg.cho_factor(A, lower=False, check_finite=True), B)
    except linalg.LinAlgError:
        hint = "; use lambda > 0" if lam == 0 else ""
        raise linalg.LinAlgError(f"normal equations are singular at lambda={lam}{hint}") from None
    return RidgePredictor(W)


class MLP:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def forward(self, X: np.ndarray, keep: bool = False):
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
            if keep:
                acts.append(h)
        return (h, acts) if keep else h

    def loss_and_grads(self, X, Y) -> tuple[float, list[np.ndarray]]:
        """Batch loss sum_j ||y_j - f(x_j)||^2 / b and its gradient, ordered like ``params``."""
        out, acts = self.forward(X, keep=True)
        b = X.shape[0]
        diff = out - Y
        loss = float(np.sum(diff * diff) / b)
        delta = 2.0 * diff / b
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return loss, [g for wb in zip(grads_w, grads_b) for g in wb]


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class MLPPredictor(Predictor):
    kind = "mlp"

    def __init__(self, net: MLP, input_sign: np.ndarray | None = None):
        super().__init__(net.sizes[0], net.sizes[-1])
        self.net = net
        self.input_sign = input_sign
        self.loss_trace: list[float] = []

    def _predict(self, X):
        if self.input_sign is not None:
            X = X * self.input_sign
        out = np.empty((X.shape[0], self.n_factors))
        for start in range(0, X.shape[0], 8192):
            out[start:start + 8192] = self.net.forward(X[start:start + 8192])
        return out

    def arrays(self):
        out = {"sizes": np.asarray(self.net.sizes, dtype=np.float64)}
        for i, (W, b) in enumerate(zip(self.net.weights, self.net.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        if self.input_sign is not None:
            out["input_sign"] = self.input_sign
        return out


def fit_mlp(X, Y, config: TrainConfig, hidden: tuple[int, ...] | None = None) -> MLPPredictor:
    """Mini-batch Adam on the summed-over-factors squared error."""
    X = np.asarray(X)
    X = X.reshape(X.shape[0], -1)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("mlp needs at least one training sample")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    hidden = config.hidden if hidden is None else hidden
    net = MLP((X.shape[1],) + tuple(hidden) + (Y.shape[1],), rng)
    pred = MLPPredictor(net)
    opt = Adam(net.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    with np.errstate(over="ignore", invalid="ignore"):  # the finiteness check reports instead
        _train_loop(net, opt, pred, X, Y, config, rng)
    pred.meta = {"iterations_run": int(opt.t), "seed": config.seed}
    return pred


def _train_loop(net, opt, pred, X, Y, config, rng) -> None:
    n = X.shape[0]
    window_sum, best, stale = 0.0, np.inf, 0
    for it in range(1, config.iterations + 1):
        batch = rng.integers(0, n, size=min(config.batch_size, n))
        xb = np.asarray(X[batch], dtype=np.float64)
        loss, grads = net.loss_and_grads(xb, Y[batch])
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at iteration {it}")
        opt.step(grads)
        window_sum += loss
        if it % config.window == 0:
            mean_loss = window_sum / config.window
            pred.loss_trace.append(mean_loss)
            window_sum = 0.0
            if mean_loss < best * 0.99:
                best, stale = mean_loss, 0
            else:
                stale += 1
            if config.early_stop and stale >= config.patience:
                log.debug("plateau after %d iterations (loss %.3g)", it, mean_loss)
                break


def flip_signs(n: int, config: TrainConfig) -> np.ndarray | None:
    if config.random_flips:
        rng = np.random.Generator(np.random.PCG64(config.seed + 7919))
        return rng.choice([-1.0, 1.0], size=n)
    if config.sign_flip:
        return -np.ones(n)
    return None


def oracle_readout(space: FactorSpace, assignment: SplitAssignment, sign_flip: bool | None = None,
                   config: TrainConfig | None = None, eval_indices=None):
    """Fit the readout MLP on ground-truth factors of the train cells; score on the test cells.

    Returns ``(predictor, report)``. The predictor takes *unflipped* normalized
    factors; any sign flip is applied inside it.
    """
    from .metrics import r_squared

    config = config or TrainConfig(hidden=READOUT_HIDDEN)
    if sign_flip is not None:
        config = TrainConfig(**{**config.to_dict(), "sign_flip": sign_flip})
    y_train = space.normalized_factors(assignment.train_indices)
    signs = flip_signs(space.n_factors, config)
    x_train = y_train if signs is None else y_train * signs
    pred = fit_mlp(x_train, y_train, config, hidden=config.hidden)
    pred.input_sign = signs
    pred.kind = "oracle-readout"
    test = assignment.test_indices if eval_indices is None else np.asarray(eval_indices)
    y_test = space.normalized_factors(test)
    report = r_squared(pred.predict(y_test), y_test, space.variance_per_factor(),
                       factor_names=space.names, subset="full-test",
                       predictor="oracle-readout" + ("+sign-flip" if signs is not None else ""),
                       seed=config.seed)
    return pred, report


# Blob: b"FBP1", u32 version, u32 header length, JSON header, then the arrays
# listed in the header as little-endian float64, C order, back to back.
BLOB_MAGIC = b"FBP1"


def save_predictor(pred: Predictor, path=None) -> bytes:
    arrays = pred.arrays()
    header = {"version": 1, "kind": pred.kind, "class": type(pred).__name__,
              "input_dim": pred.input_dim, "n_factors": pred.n_factors, "meta": pred.meta,
              "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]}
    if isinstance(pred, MLPPredictor):
        header["loss_trace"] = pred.loss_trace
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = BLOB_MAGIC + struct.pack("<II", 1, len(hbytes)) + hbytes + b"".join(
        np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(blob)
    return blob


def load_predictor(source) -> Predictor:
    blob = source if isinstance(source, (bytes, bytearray)) else open(source, "rb").read()
    if blob[:4] != BLOB_MAGIC:
        raise ValueError("not a predictor blob (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise ValueError(f"unsupported predictor blob version {version}")
    header = json.loads(blob[12:12 + hlen])
    pos = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[spec["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(
            spec["shape"]).copy()
        pos += 8 * count
    cls = header["class"]
    if cls == "MeanPredictor":
        pred: Predictor = MeanPredictor(header["input_dim"], arrays["means"])
    elif cls == "RidgePredictor":
        pred = RidgePredictor(arrays["weights"])
    elif cls == "MLPPredictor":
        sizes = [int(s) for s in arrays["sizes"]]
        net = MLP(sizes, np.random.Generator(np.random.PCG64(0)))
        for i in range(len(sizes) - 1):
            net.weights[i][...] = arrays[f"W{i}"]
            net.biases[i][...] = arrays[f"b{i}"]
        pred = MLPPredictor(net, arrays.get("input_sign"))
        pred.loss_trace = list(header.get("loss_trace", []))
    else:
        raise ValueError(f"unknown predictor class {cls!r}")
    pred.kind = header["kind"]
    pred.meta = header["meta"]
    return pred
