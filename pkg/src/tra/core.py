"""The routing head: K linear predictors, the error memory and the router."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, backbone_forward, init_backbone
from .numerics import NumericalError, glorot_uniform, gumbel_sample

INPUT_MODES = ("LR", "TPE", "LR+TPE", "Random")
SUMMARIZERS = ("rnn", "ema")
ERROR_NORMS = ("none", "center")


class MissingEntityError(KeyError):
    pass


# --------------------------------------------------------------------------
# predictors


@dataclass
class PredictorHeads:
    weights: np.ndarray  # (K, latent_dim)
    biases: np.ndarray  # (K,)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, K: int, latent_dim: int, rng: np.random.Generator) -> "PredictorHeads":
        if K < 1:
            raise ValueError("K must be >= 1")
        return cls(glorot_uniform(rng, K, latent_dim), np.zeros(K))


def head_predict(heads: PredictorHeads, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != heads.weights.shape[1]:
        raise ValueError(f"latent length {h.shape[-1]} != head input {heads.weights.shape[1]}")
    return h @ heads.weights.T + heads.biases


def head_backward(heads: PredictorHeads, h, grad_y):
    """Returns (dW, db, dh) for upstream gradient ``grad_y`` of shape (N, K)."""
    h = np.atleast_2d(h)
    grad_y = np.atleast_2d(grad_y)
    return grad_y.T @ h, grad_y.sum(axis=0), grad_y @ heads.weights


# --------------------------------------------------------------------------
# error memory


class ErrorMemory:
    """Per-sample per-predictor loss cache indexed by (stock, day).

    Stocks and days are integer indices into the panel the memory was built
    from. ``values[row]`` stays at ``fill_value`` until the row is written.
    """

    def __init__(self, stock_idx, day_idx, K: int, n_stocks: int, n_days: int, fill_value: float = 0.0):
        stock_idx = np.asarray(stock_idx, dtype=np.int64)
        day_idx = np.asarray(day_idx, dtype=np.int64)
        self.K = K
        self.fill_value = float(fill_value)
        self.n_stocks, self.n_days = n_stocks, n_days
        self.values = np.full((len(stock_idx), K), self.fill_value)
        self.row_of = np.full((n_stocks, n_days), -1, dtype=np.int64)
        if len(np.unique(stock_idx * n_days + day_idx)) != len(stock_idx):
            raise ValueError("duplicate (stock, day) key in memory index")
        self.row_of[stock_idx, day_idx] = np.arange(len(stock_idx))
        self.stock_idx, self.day_idx = stock_idx, day_idx
        self.read_log: list[tuple[np.ndarray, np.ndarray]] | None = None

    def copy(self) -> "ErrorMemory":
        other = object.__new__(ErrorMemory)
        other.__dict__.update(self.__dict__)
        other.values = self.values.copy()
        other.read_log = None
        return other

    def enable_read_log(self) -> None:
        self.read_log = []

    def rows(self, stock, day) -> np.ndarray:
        stock = np.asarray(stock, dtype=np.int64)
        day = np.asarray(day, dtype=np.int64)
        if np.any((stock < 0) | (stock >= self.n_stocks)):
            raise MissingEntityError(f"unknown stock index in {np.unique(stock[(stock < 0) | (stock >= self.n_stocks)])}")
        r = self.row_of[stock, day]
        if np.any(r < 0):
            raise MissingEntityError("(stock, day) not indexed in memory")
        return r

    def aggregate(self, stock, t, T: int, gap: int) -> np.ndarray:
        """Loss rows for days ``t-T .. t-gap`` (oldest first), shape (..., T-gap+1, K)."""
        if gap < 1 or T < gap:
            raise ValueError(f"need 1 <= gap <= T, got gap={gap}, T={T}")
        stock = np.asarray(stock, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        if np.any((stock < 0) | (stock >= self.n_stocks)):
            raise MissingEntityError(f"unknown stock index {stock}")
        offsets = np.arange(T, gap - 1, -1)
        days = t[..., None] - offsets
        inside = (days >= 0) & (days < self.n_days)
        rows = np.where(inside, self.row_of[stock[..., None], np.clip(days, 0, self.n_days - 1)], -1)
        out = np.where((rows >= 0)[..., None], self.values[np.maximum(rows, 0)], self.fill_value)
        if self.read_log is not None:
            hit = rows >= 0
            qt = np.broadcast_to(t[..., None], days.shape)
            self.read_log.append((qt[hit].copy(), days[hit].copy()))
        return out

    def write(self, stock, day, losses) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        stock = np.atleast_1d(np.asarray(stock, dtype=np.int64))
        day = np.atleast_1d(np.asarray(day, dtype=np.int64))
        losses = losses.reshape(len(stock), -1)
        if losses.shape[1] != self.K:
            raise ValueError(f"losses have {losses.shape[1]} columns, memory holds K={self.K}")
        if not np.all(np.isfinite(losses)):
            raise ValueError("losses must be finite")
        self.values[self.rows(stock, day)] = losses

    def write_rows(self, rows, losses) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if losses.ndim != 2 or losses.shape[1] != self.K:
            raise ValueError(f"losses must have shape (n, {self.K})")
        self.values[np.asarray(rows)] = losses

    def max_lookahead(self, gap: int) -> int:
        """Largest ``read_day - (query_day - gap)`` seen; <= 0 means no lookahead."""
        worst = -(10**9)
        for q, r in self.read_log or []:
            if len(q):
                worst = max(worst, int((r - (q - gap)).max()))
        return worst


def aggregate_temporal_errors(memory: ErrorMemory, s, t, T: int, gap: int) -> np.ndarray:
    return memory.aggregate(s, t, T, gap)


def memory_write(memory: ErrorMemory, s, t, losses) -> ErrorMemory:
    memory.write(s, t, losses)
    return memory


# --------------------------------------------------------------------------
# router


@dataclass
class RouterConfig:
    input_mode: str = "LR+TPE"
    summarizer: str = "rnn"
    state_dim: int = 8
    ema_decay: float = 0.9
    tau: float = 1.0
    lookback: int = 10  # T
    gap: int = 2  # h
    hard_infer: bool = True
    error_scale: float = 10.0
    # "center" subtracts the per-row mean across heads so only relative errors remain
    error_norm: str = "center"

    def validate(self) -> None:
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"router.input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.summarizer not in SUMMARIZERS:
            raise ValueError(f"router.summarizer must be one of {SUMMARIZERS}, got {self.summarizer!r}")
        if self.tau <= 0:
            raise ValueError("router.tau must be > 0")
        if self.state_dim < 1:
            raise ValueError("router.state_dim must be >= 1")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("router.ema_decay must be in [0, 1)")
        if self.error_norm not in ERROR_NORMS:
            raise ValueError(f"router.error_norm must be one of {ERROR_NORMS}, got {self.error_norm!r}")
        if self.gap < 1 or self.lookback < self.gap:
            raise ValueError("router requires 1 <= gap <= lookback")

    @property
    def window_rows(self) -> int:
        return self.lookback - self.gap + 1

    def embed_dim(self, K: int) -> int:
        return self.state_dim if self.summarizer == "rnn" else K


def init_router(cfg: RouterConfig, K: int, latent_dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    cfg.validate()
    p: dict[str, np.ndarray] = {}
    e = cfg.embed_dim(K)
    if cfg.summarizer == "rnn":
        p["U"] = glorot_uniform(rng, e, K)
        p["V"] = glorot_uniform(rng, e, e)
        p["c"] = np.zeros(e)
    p["Gh"] = glorot_uniform(rng, K, latent_dim)
    p["Ge"] = glorot_uniform(rng, K, e)
    p["g"] = np.zeros(K)
    return p


@dataclass
class RouteResult:
    logits: np.ndarray  # (N, K)
    q: np.ndarray  # (N, K)
    chosen: np.ndarray  # (N,)
    noise: np.ndarray | None = None  # gumbel noise used in train mode
    cache: dict = field(default_factory=dict, repr=False)


def _summarize(cfg: RouterConfig, p, errw: np.ndarray):
    if cfg.error_norm == "center":
        errw = errw - errw.mean(axis=-1, keepdims=True)
    x = errw * cfg.error_scale
    n, rows, _ = x.shape
    if cfg.summarizer == "ema":
        m = np.zeros((n, x.shape[2]))
        for j in range(rows):
            m = cfg.ema_decay * m + (1.0 - cfg.ema_decay) * x[:, j]
        return m, {"x": x}
    s = np.zeros((n, cfg.state_dim))
    states = []
    for j in range(rows):
        s = np.tanh(x[:, j] @ p["U"].T + s @ p["V"].T + p["c"])
        states.append(s)
    return s, {"x": x, "states": states}


def _summarize_backward(cfg: RouterConfig, p, cache, grad_emb, grads) -> None:
    if cfg.summarizer == "ema":
        return
    x, states = cache["x"], cache["states"]
    gU, gV, gc = np.zeros_like(p["U"]), np.zeros_like(p["V"]), np.zeros_like(p["c"])
    ds = grad_emb
    for j in reversed(range(x.shape[1])):
        dpre = ds * (1.0 - states[j] ** 2)
        gU += dpre.T @ x[:, j]
        if j > 0:
            gV += dpre.T @ states[j - 1]
        gc += dpre.sum(axis=0)
        ds = dpre @ p["V"]
    grads["U"], grads["V"], grads["c"] = gU, gV, gc


def random_inputs(cfg: RouterConfig, n: int, latent_dim: int, K: int, noise_rng: np.random.Generator):
    return noise_rng.standard_normal((n, latent_dim)), noise_rng.standard_normal((n, cfg.embed_dim(K)))


def router_inputs(cfg: RouterConfig, p, h, errw, noise_rng=None, noise_inputs=None):
    """Build the two gate inputs per input mode; Random replaces both with noise."""
    n = h.shape[0]
    K = p["g"].shape[0]
    cache: dict = {}
    if cfg.input_mode == "Random":
        if noise_inputs is None:
            if noise_rng is None:
                raise ValueError("Random input mode needs a noise generator")
            noise_inputs = random_inputs(cfg, n, h.shape[1], K, noise_rng)
        h_in, e_in = noise_inputs
        return h_in, e_in, cache
    h_in = h if cfg.input_mode in ("LR", "LR+TPE") else np.zeros_like(h)
    if cfg.input_mode in ("TPE", "LR+TPE"):
        e_in, cache = _summarize(cfg, p, errw)
    else:
        e_in = np.zeros((n, cfg.embed_dim(K)))
    return h_in, e_in, cache


def route(
    cfg: RouterConfig,
    p,
    h,
    err_window,
    rng: np.random.Generator | None = None,
    mode: str = "infer",
    noise_rng: np.random.Generator | None = None,
    gumbel: np.ndarray | None = None,
    noise_inputs=None,
) -> RouteResult:
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    errw = np.asarray(err_window, dtype=np.float64)
    if errw.ndim == 2:
        errw = errw[None]
    K = p["g"].shape[0]
    if errw.shape[-1] != K:
        raise ValueError(f"error window has {errw.shape[-1]} columns, router expects K={K}")
    h_in, e_in, scache = router_inputs(cfg, p, h, errw, noise_rng, noise_inputs)
    a = h_in @ p["Gh"].T + e_in @ p["Ge"].T + p["g"]
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))
        raise NumericalError("non-finite router logits", {"first_bad_index": bad[0].tolist(), "count": len(bad)})
    chosen = np.argmax(a, axis=1)  # argmax returns the lowest index on ties
    noise = None
    if mode == "train":
        if gumbel is not None:
            noise = np.asarray(gumbel, dtype=np.float64)
        elif rng is None:
            raise ValueError("train-mode routing needs a generator for gumbel noise")
        else:
            noise = gumbel_sample(rng, a.shape)
        z = (a + noise) / cfg.tau
    elif mode == "infer":
        z = a / cfg.tau
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    q = ez / ez.sum(axis=1, keepdims=True)
    cache = {"h_in": h_in, "e_in": e_in, "summ": scache}
    return RouteResult(a, q, chosen, noise, cache)


def route_backward(cfg: RouterConfig, p, res: RouteResult, grad_q):
    """Gradients of ``sum(grad_q * q)``; returns (param grads, d h)."""
    q = res.q
    dz = q * (grad_q - np.sum(grad_q * q, axis=1, keepdims=True))
    da = dz / cfg.tau
    c = res.cache
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    grads["Gh"] = da.T @ c["h_in"]
    grads["Ge"] = da.T @ c["e_in"]
    grads["g"] = da.sum(axis=0)
    if cfg.input_mode in ("LR", "LR+TPE"):
        dh = da @ p["Gh"]
    else:
        dh = np.zeros_like(c["h_in"])
    if cfg.input_mode in ("TPE", "LR+TPE"):
        _summarize_backward(cfg, p, c["summ"], da @ p["Ge"], grads)
    return grads, dh


# --------------------------------------------------------------------------
# full model


@dataclass
class TRAModel:
    backbone_cfg: BackboneConfig
    router_cfg: RouterConfig
    backbone: dict[str, np.ndarray]
    heads: PredictorHeads
    router: dict[str, np.ndarray]

    @property
    def K(self) -> int:
        return self.heads.K

    @classmethod
    def init(cls, backbone_cfg: BackboneConfig, router_cfg: RouterConfig, K: int, rngs) -> "TRAModel":
        backbone = init_backbone(backbone_cfg, rngs["backbone"])
        heads = PredictorHeads.init(K, backbone_cfg.latent_dim, rngs["heads"])
        router = init_router(router_cfg, K, backbone_cfg.latent_dim, rngs["router"])
        return cls(backbone_cfg, router_cfg, backbone, heads, router)

    def params(self) -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in self.backbone.items()}
        out["heads.W"] = self.heads.weights
        out["heads.b"] = self.heads.biases
        out.update({f"router.{k}": v for k, v in self.router.items()})
        return out

    def set_params(self, flat: dict[str, np.ndarray]) -> None:
        for k, v in flat.items():
            group, name = k.split(".", 1)
            if group == "backbone":
                self.backbone[name] = v
            elif group == "router":
                self.router[name] = v
            elif name == "W":
                self.heads.weights = v
            else:
                self.heads.biases = v

    def copy(self) -> "TRAModel":
        return TRAModel(
            self.backbone_cfg,
            self.router_cfg,
            {k: v.copy() for k, v in self.backbone.items()},
            PredictorHeads(self.heads.weights.copy(), self.heads.biases.copy()),
            {k: v.copy() for k, v in self.router.items()},
        )


@dataclass
class RoutedPrediction:
    y_hat_all: np.ndarray  # (N, K)
    q: np.ndarray  # (N, K)
    p_hat: np.ndarray  # (N,)
    chosen: np.ndarray  # (N,)
    logits: np.ndarray | None = None


def combine(y_hat_all: np.ndarray, q: np.ndarray, chosen: np.ndarray, hard: bool) -> np.ndarray:
    if hard:
        return y_hat_all[np.arange(len(chosen)), chosen]
    return np.sum(q * y_hat_all, axis=1)


def tra_forward(
    model: TRAModel,
    windows,
    stock,
    day,
    memory: ErrorMemory,
    rng: np.random.Generator | None = None,
    mode: str = "infer",
    noise_rng: np.random.Generator | None = None,
) -> RoutedPrediction:
    h = np.atleast_2d(backbone_forward(model.backbone_cfg, model.backbone, windows))
    y_all = head_predict(model.heads, h)
    rc = model.router_cfg
    errw = memory.aggregate(np.atleast_1d(stock), np.atleast_1d(day), rc.lookback, rc.gap)
    res = route(rc, model.router, h, errw, rng=rng, mode=mode, noise_rng=noise_rng)
    hard = mode == "infer" and rc.hard_infer
    p_hat = combine(y_all, res.q, res.chosen, hard)
    return RoutedPrediction(y_all, res.q, p_hat, res.chosen, res.logits)
