"""Training loop with two-stage memory refresh and OT-regularised routing.

Each epoch refreshes the error memory for every training sample, then walks
shuffled mini-batches. Per batch the regularisation weight decays, the
balanced assignment of samples to predictors is solved, the objective

    mean (p_hat - y)^2  -  lambda * mean_i sum_k P_ik log(q_ik + 1e-12)

is minimised for one optimiser step (P held constant), and the batch rows of
the memory are overwritten with the losses of that forward pass.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, backbone_backward, backbone_forward, init_backbone
from .core import (
    ErrorMemory,
    PredictorHeads,
    RouterConfig,
    TRAModel,
    combine,
    head_backward,
    head_predict,
    random_inputs,
    route,
    route_backward,
)
from .dataprep import WindowSet
from .evaluation import pearson, ranking_metrics
from .numerics import NumericalError, gumbel_sample, spawn_rngs
from .ot import SinkhornConfig, build_loss_matrix, sinkhorn_plan

log = logging.getLogger(__name__)

RNG_STREAMS = ["backbone", "heads", "router", "shuffle", "gumbel", "noise", "infer_noise"]
LOG_EPS = 1e-12


@dataclass
class TrainConfig:
    K: int = 3
    lam: float = 10.0
    rho: float = 0.999
    epochs: int = 25
    batch_size: int = 512
    learning_rate: float = 1e-2
    optimizer: str = "adaptive-moments"
    early_stop_patience: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError("train.K must be >= 1")
        if self.lam < 0:
            raise ValueError("train.lambda must be >= 0")
        if not 0 < self.rho <= 1:
            raise ValueError("train.rho must satisfy rho ∈ (0,1]")
        if self.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.lam > 0 and self.batch_size < self.K:
            raise ValueError("train.batch_size must be >= K when lambda > 0")
        if self.learning_rate <= 0:
            raise ValueError("train.learning_rate must be > 0")
        if self.optimizer not in ("plain-gradient", "adaptive-moments"):
            raise ValueError("train.optimizer must be plain-gradient or adaptive-moments")
        if self.early_stop_patience < 1:
            raise ValueError("train.early_stop_patience must be >= 1")


# --------------------------------------------------------------------------
# optimiser


class Optimizer:
    """Plain gradient descent or the adaptive-moments rule (beta 0.9/0.999)."""

    def __init__(self, kind: str, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind, self.lr = kind, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        if self.kind == "plain-gradient":
            for k, p in params.items():
                out[k] = p - self.lr * grads[k]
            return out
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * self.v[k] + (1.0 - b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


# --------------------------------------------------------------------------
# objective


@dataclass
class BatchOutputs:
    total: float
    base: float
    reg: float
    y_all: np.ndarray
    q: np.ndarray
    p_hat: np.ndarray
    logits: np.ndarray
    grads: dict[str, np.ndarray] = field(repr=False)


def objective(model: TRAModel, X, y, errw, gumbel, P, lam: float, noise_inputs=None) -> BatchOutputs:
    """Regularised batch loss and its gradient with P and the noise held fixed."""
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    bcfg, rcfg = model.backbone_cfg, model.router_cfg
    h, bcache = backbone_forward(bcfg, model.backbone, X, return_cache=True)
    y_all = head_predict(model.heads, h)
    res = route(rcfg, model.router, h, errw, mode="train", gumbel=gumbel, noise_inputs=noise_inputs)
    q = res.q
    p_hat = np.sum(q * y_all, axis=1)
    resid = p_hat - y
    base = float(np.mean(resid * resid))
    dp = 2.0 * resid / n
    dq = y_all * dp[:, None]
    if P is not None and lam > 0:
        reg = float(-np.mean(np.sum(P * np.log(q + LOG_EPS), axis=1)))
        dq = dq - (lam / n) * P / (q + LOG_EPS)
    elif P is not None:
        reg = float(-np.mean(np.sum(P * np.log(q + LOG_EPS), axis=1)))
    else:
        reg = 0.0
    total = base + lam * reg if lam > 0 else base
    dy_all = q * dp[:, None]
    r_grads, dh_r = route_backward(rcfg, model.router, res, dq)
    dW, db, dh = head_backward(model.heads, h, dy_all)
    dh = dh + dh_r
    b_grads = backbone_backward(bcfg, model.backbone, X, dh, cache=bcache)
    grads = {f"backbone.{k}": v for k, v in b_grads.items()}
    grads["heads.W"], grads["heads.b"] = dW, db
    grads.update({f"router.{k}": v for k, v in r_grads.items()})
    return BatchOutputs(total, base, reg, y_all, q, p_hat, res.logits, grads)


def lambda_at(lam0: float, rho: float, m: int) -> float:
    """Regularisation weight after m decays."""
    return lam0 * rho**m


@dataclass
class StepResult:
    total: float
    base: float
    reg: float
    lam: float
    chosen_counts: np.ndarray
    sinkhorn_iters: int = 0
    sinkhorn_violation: float = 0.0
    sinkhorn_converged: bool = True
    losses: np.ndarray | None = field(default=None, repr=False)


def train_step(
    model: TRAModel,
    opt: Optimizer,
    data: WindowSet,
    batch: np.ndarray,
    memory: ErrorMemory,
    lam: float,
    rngs: dict,
    sinkhorn: SinkhornConfig,
) -> StepResult:
    if len(batch) == 0:
        raise ValueError("empty batch")
    X = data.windows(batch)
    y = data.labels[batch]
    s, t = data.stock_idx[batch], data.day_idx[batch]
    rc = model.router_cfg
    errw = memory.aggregate(s, t, rc.lookback, rc.gap)
    K = model.K
    gumbel = gumbel_sample(rngs["gumbel"], (len(batch), K))
    noise_inputs = None
    if rc.input_mode == "Random":
        noise_inputs = random_inputs(rc, len(batch), model.backbone_cfg.latent_dim, K, rngs["noise"])
    # forward pass for the OT plan; objective() repeats it with the router attached
    h = backbone_forward(model.backbone_cfg, model.backbone, X)
    L = build_loss_matrix(head_predict(model.heads, h), y)
    P = None
    iters, viol, conv = 0, 0.0, True
    if K == 1:
        P = np.ones((len(batch), 1))
    elif lam > 0:
        plan = sinkhorn_plan(L, np.full(K, 1.0 / K), sinkhorn)
        P, iters, viol, conv = plan.P, plan.iterations, plan.violation, plan.converged
    out = objective(model, X, y, errw, gumbel, P, lam, noise_inputs)
    if not math.isfinite(out.total):
        raise NumericalError("non-finite training loss", {"base": out.base, "reg": out.reg})
    model.set_params(opt.step(model.params(), out.grads))
    memory.write_rows(memory.rows(s, t), L)
    counts = np.bincount(np.argmax(out.logits, axis=1), minlength=K)
    return StepResult(out.total, out.base, out.reg, lam, counts, iters, viol, conv, L)


# --------------------------------------------------------------------------
# memory and inference


def build_memory(K: int, *sets: WindowSet, fill_value: float = 0.0) -> ErrorMemory:
    ref = sets[0]
    s = np.concatenate([w.stock_idx for w in sets])
    d = np.concatenate([w.day_idx for w in sets])
    return ErrorMemory(s, d, K, len(ref.stocks), len(ref.dates), fill_value)


def predict_all_heads(model: TRAModel, data: WindowSet, sel=None, chunk: int = 8192) -> np.ndarray:
    idx = np.arange(len(data)) if sel is None else np.asarray(sel)
    out = np.empty((len(idx), model.K))
    for a in range(0, len(idx), chunk):
        part = idx[a : a + chunk]
        h = backbone_forward(model.backbone_cfg, model.backbone, data.windows(part))
        out[a : a + chunk] = head_predict(model.heads, np.atleast_2d(h))
    return out


def refresh_memory(model: TRAModel, data: WindowSet, memory: ErrorMemory) -> ErrorMemory:
    y_all = predict_all_heads(model, data)
    memory.write_rows(memory.rows(data.stock_idx, data.day_idx), (y_all - data.labels[:, None]) ** 2)
    return memory


@dataclass
class InferenceResult:
    p_hat: np.ndarray
    chosen: np.ndarray
    y_all: np.ndarray
    q: np.ndarray
    label_reads: list = field(default_factory=list, repr=False)  # (label_day, read_day)


def sequential_inference(
    model: TRAModel,
    memory: ErrorMemory,
    data: WindowSet,
    noise_rng: np.random.Generator | None = None,
    horizon: int | None = None,
) -> InferenceResult:
    """Day-by-day hard routing; losses enter memory once their label is realised."""
    d = data.day_idx
    if np.any(np.diff(d) < 0):
        raise ValueError("sequential inference needs samples sorted by timestamp")
    horizon = data.horizon if horizon is None else horizon
    rc = model.router_cfg
    n, K = len(data), model.K
    y_all = predict_all_heads(model, data)
    p_hat = np.empty(n)
    chosen = np.empty(n, dtype=np.int64)
    q_all = np.empty((n, K))
    rows = memory.rows(data.stock_idx, d)
    label_reads = []
    pending: list[tuple[int, np.ndarray]] = []  # (label_day, sample positions)

    def flush(now: int) -> None:
        while pending and pending[0][0] + horizon <= now:
            day, pos = pending.pop(0)
            label_reads.append((day, now))
            memory.write_rows(rows[pos], (y_all[pos] - data.labels[pos][:, None]) ** 2)

    for g in data.day_groups():
        t = int(d[g[0]])
        flush(t - 1)
        h = np.atleast_2d(backbone_forward(model.backbone_cfg, model.backbone, data.windows(g)))
        errw = memory.aggregate(data.stock_idx[g], d[g], rc.lookback, rc.gap)
        res = route(rc, model.router, h, errw, mode="infer", noise_rng=noise_rng)
        q_all[g] = res.q
        chosen[g] = res.chosen
        p_hat[g] = combine(y_all[g], res.q, res.chosen, rc.hard_infer)
        pending.append((t, g))
        flush(t)
    return InferenceResult(p_hat, chosen, y_all, q_all, label_reads)


# --------------------------------------------------------------------------
# reports and checkpoints


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    base_loss: float
    regularizer: float
    valid_mse: float
    valid_ic: float | None
    lam: float
    shares: list[float]
    sinkhorn_warnings: int = 0


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_ic: float | None = None
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        from .evaluation import _clean

        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls([EpochRecord(**e) for e in d["epochs"]], d["best_epoch"], d["best_valid_ic"], d["stopped_early"])


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def save_checkpoint(path, model: TRAModel, train_cfg: TrainConfig, sinkhorn: SinkhornConfig, extra: dict | None = None,
                    opt: Optimizer | None = None, best: TRAModel | None = None, rngs: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.params().items()}
    meta = {
        "format": "tra-checkpoint-1",
        "backbone": asdict(model.backbone_cfg),
        "router": asdict(model.router_cfg),
        "train": asdict(train_cfg),
        "sinkhorn": asdict(sinkhorn),
        "shapes": {k: list(v.shape) for k, v in model.params().items()},
    }
    if opt is not None:
        meta["optimizer"] = {"kind": opt.kind, "lr": opt.lr, "t": opt.t}
        arrays.update({f"opt_m/{k}": v for k, v in opt.m.items()})
        arrays.update({f"opt_v/{k}": v for k, v in opt.v.items()})
    if best is not None:
        arrays.update({f"best/{k}": v for k, v in best.params().items()})
    if rngs is not None:
        meta["rng_state"] = {k: _rng_state(r) for k, r in rngs.items()}
    if extra:
        meta.update(extra)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True, default=_json_default).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


@dataclass
class Checkpoint:
    model: TRAModel
    train_cfg: TrainConfig
    sinkhorn: SinkhornConfig
    meta: dict
    opt: Optimizer | None
    best: TRAModel | None


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        arrays = {k: z[k] for k in z.files if k != "meta"}
    bcfg = BackboneConfig(**meta["backbone"])
    rcfg = RouterConfig(**meta["router"])
    tcfg = TrainConfig(**meta["train"])
    scfg = SinkhornConfig(**meta["sinkhorn"])

    def model_from(prefix: str) -> TRAModel | None:
        params = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
        if not params:
            return None
        for k, shape in meta["shapes"].items():
            if list(params[k].shape) != shape:
                raise ValueError(f"checkpoint tensor {k} has shape {params[k].shape}, expected {shape}")
        m = TRAModel(bcfg, rcfg, {}, PredictorHeads(params["heads.W"], params["heads.b"]), {})
        m.set_params(params)
        return m

    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = Optimizer(o["kind"], o["lr"])
        opt.t = o["t"]
        opt.m = {k[6:]: v for k, v in arrays.items() if k.startswith("opt_m/")}
        opt.v = {k[6:]: v for k, v in arrays.items() if k.startswith("opt_v/")}
    return Checkpoint(model_from("param/"), tcfg, scfg, meta, opt, model_from("best/"))


# --------------------------------------------------------------------------
# training


def _validate_sets(datasets: dict) -> None:
    for name in ("train", "valid"):
        if name not in datasets or len(datasets[name]) == 0:
            raise ValueError(f"empty {name} split")
    if datasets["train"].day_idx.max() >= datasets["valid"].day_idx.min():
        raise ValueError("train and valid splits overlap in time")


def evaluate_valid(model: TRAModel, memory: ErrorMemory, valid: WindowSet, rngs) -> tuple[float, float | None, InferenceResult]:
    res = sequential_inference(model, memory.copy(), valid, noise_rng=rngs["infer_noise"])
    rm = ranking_metrics(res.p_hat, valid.labels, valid.day_idx)
    return rm.mse, rm.ic_mean, res


def run_training(
    train_cfg: TrainConfig,
    backbone_cfg: BackboneConfig,
    router_cfg: RouterConfig,
    datasets: dict,
    sinkhorn: SinkhornConfig | None = None,
    checkpoint_path=None,
    resume_from=None,
    max_epochs: int | None = None,
) -> tuple[TRAModel, TrainReport]:
    """Fit a routed model; returns the best-validation-IC model and the report.

    ``max_epochs`` stops the loop early without changing the schedule, which
    together with ``checkpoint_path``/``resume_from`` allows interrupted runs.
    """
    train_cfg.validate()
    backbone_cfg.validate()
    router_cfg.validate()
    sinkhorn = sinkhorn or SinkhornConfig()
    _validate_sets(datasets)
    train, valid = datasets["train"], datasets["valid"]
    rngs = spawn_rngs(train_cfg.seed, RNG_STREAMS)
    model = TRAModel.init(backbone_cfg, router_cfg, train_cfg.K, rngs)
    opt = Optimizer(train_cfg.optimizer, train_cfg.learning_rate)
    report = TrainReport()
    best = model.copy()
    best_ic = -math.inf
    patience = 0
    start_epoch = 1
    lam_steps = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        model, opt, best = ck.model, ck.opt, ck.best
        st = ck.meta["resume"]
        for k, s in ck.meta["rng_state"].items():
            _set_rng_state(rngs[k], s)
        report = TrainReport.from_dict(st["report"])
        best_ic = st["best_ic"] if st["best_ic"] is not None else -math.inf
        patience = st["patience"]
        start_epoch = st["epoch"] + 1
        lam_steps = st["lam_steps"]
        if st.get("stopped"):
            return best, report
    memory = build_memory(train_cfg.K, train, valid)
    n = len(train)
    epochs_run = 0
    for epoch in range(start_epoch, train_cfg.epochs + 1):
        if max_epochs is not None and epochs_run >= max_epochs:
            break
        epochs_run += 1
        refresh_memory(model, train, memory)
        perm = rngs["shuffle"].permutation(n)
        tot = base = reg = 0.0
        counts = np.zeros(train_cfg.K, dtype=np.int64)
        warns = 0
        n_batches = 0
        for a in range(0, n, train_cfg.batch_size):
            batch = np.sort(perm[a : a + train_cfg.batch_size])
            lam_steps += 1
            lam = lambda_at(train_cfg.lam, train_cfg.rho, lam_steps)
            try:
                st = train_step(model, opt, train, batch, memory, lam, rngs, sinkhorn)
            except NumericalError:
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, train_cfg, sinkhorn, {"aborted_epoch": epoch}, opt, best, rngs)
                raise
            tot += st.total
            base += st.base
            reg += st.reg
            counts += st.chosen_counts
            warns += int(not st.sinkhorn_converged and st.sinkhorn_violation > 10 * sinkhorn.tol)
            n_batches += 1
        v_mse, v_ic, _ = evaluate_valid(model, memory, valid, rngs)
        shares = (counts / counts.sum()).tolist()
        report.epochs.append(
            EpochRecord(epoch, tot / n_batches, base / n_batches, reg / n_batches, v_mse, v_ic,
                        lambda_at(train_cfg.lam, train_cfg.rho, lam_steps), shares, warns)
        )
        score = v_ic if v_ic is not None else -math.inf
        if score > best_ic:
            best_ic, best, patience = score, model.copy(), 0
            report.best_epoch, report.best_valid_ic = epoch, v_ic
        else:
            patience += 1
        stopped = patience >= train_cfg.early_stop_patience
        if checkpoint_path is not None:
            resume = {"report": report.to_dict(), "best_ic": None if best_ic == -math.inf else best_ic,
                      "patience": patience, "epoch": epoch, "lam_steps": lam_steps, "stopped": stopped}
            save_checkpoint(checkpoint_path, model, train_cfg, sinkhorn, {"resume": resume}, opt, best, rngs)
        log.info("epoch %d loss %.5f valid mse %.5f ic %s shares %s", epoch, tot / n_batches, v_mse, v_ic,
                 np.round(shares, 3).tolist())
        if stopped:
            report.stopped_early = True
            break
    return best, report


# --------------------------------------------------------------------------
# plain backbone + single head, and the period-split ensemble


@dataclass
class PlainModel:
    backbone_cfg: BackboneConfig
    backbone: dict[str, np.ndarray]
    head: PredictorHeads

    def predict(self, data: WindowSet, sel=None, chunk: int = 8192) -> np.ndarray:
        idx = np.arange(len(data)) if sel is None else np.asarray(sel)
        out = np.empty(len(idx))
        for a in range(0, len(idx), chunk):
            part = idx[a : a + chunk]
            h = np.atleast_2d(backbone_forward(self.backbone_cfg, self.backbone, data.windows(part)))
            out[a : a + chunk] = head_predict(self.head, h)[:, 0]
        return out

    def params(self) -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in self.backbone.items()}
        out["heads.W"], out["heads.b"] = self.head.weights, self.head.biases
        return out

    def set_params(self, flat) -> None:
        for k, v in flat.items():
            group, name = k.split(".", 1)
            if group == "backbone":
                self.backbone[name] = v
            elif name == "W":
                self.head.weights = v
            else:
                self.head.biases = v

    def copy(self) -> "PlainModel":
        return PlainModel(self.backbone_cfg, {k: v.copy() for k, v in self.backbone.items()},
                          PredictorHeads(self.head.weights.copy(), self.head.biases.copy()))


def plain_step(model: PlainModel, opt: Optimizer, X, y) -> float:
    h, cache = backbone_forward(model.backbone_cfg, model.backbone, X, return_cache=True)
    pred = head_predict(model.head, h)[:, 0]
    resid = pred - y
    loss = float(np.mean(resid * resid))
    dp = 2.0 * resid / len(y)
    dW, db, dh = head_backward(model.head, h, dp[:, None])
    grads = {f"backbone.{k}": v for k, v in backbone_backward(model.backbone_cfg, model.backbone, X, dh, cache).items()}
    grads["heads.W"], grads["heads.b"] = dW, db
    model.set_params(opt.step(model.params(), grads))
    return loss


def train_plain(train_cfg: TrainConfig, backbone_cfg: BackboneConfig, datasets: dict) -> tuple[PlainModel, list[dict]]:
    """Backbone plus one linear head, same seeds and schedule as the routed trainer."""
    train_cfg.validate()
    _validate_sets(datasets)
    train, valid = datasets["train"], datasets["valid"]
    rngs = spawn_rngs(train_cfg.seed, RNG_STREAMS)
    model = PlainModel(backbone_cfg, init_backbone(backbone_cfg, rngs["backbone"]),
                       PredictorHeads.init(1, backbone_cfg.latent_dim, rngs["heads"]))
    opt = Optimizer(train_cfg.optimizer, train_cfg.learning_rate)
    best, best_ic, patience = model.copy(), -math.inf, 0
    history = []
    n = len(train)
    for epoch in range(1, train_cfg.epochs + 1):
        perm = rngs["shuffle"].permutation(n)
        losses = []
        for a in range(0, n, train_cfg.batch_size):
            batch = np.sort(perm[a : a + train_cfg.batch_size])
            losses.append(plain_step(model, opt, train.windows(batch), train.labels[batch]))
        rm = ranking_metrics(model.predict(valid), valid.labels, valid.day_idx)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_mse": rm.mse, "valid_ic": rm.ic_mean})
        score = rm.ic_mean if rm.ic_mean is not None else -math.inf
        if score > best_ic:
            best, best_ic, patience = model.copy(), score, 0
        else:
            patience += 1
            if patience >= train_cfg.early_stop_patience:
                break
    return best, history


def period_spans(train: WindowSet, n_periods: int) -> list[np.ndarray]:
    days = np.unique(train.day_idx)
    chunks = np.array_split(days, n_periods)
    return [np.isin(train.day_idx, c) for c in chunks]


def train_period_ensemble(train_cfg: TrainConfig, backbone_cfg: BackboneConfig, datasets: dict, n_periods: int,
                          test: WindowSet | None = None):
    """One plain model per contiguous training span; test prediction is their mean."""
    if n_periods < 1:
        raise ValueError("n_periods must be >= 1")
    test = datasets["test"] if test is None else test
    members = []
    for j, mask in enumerate(period_spans(datasets["train"], n_periods)):
        if mask.sum() < train_cfg.batch_size:
            raise ValueError(f"period {j} has {int(mask.sum())} samples, fewer than one batch")
        sub = {"train": datasets["train"].subset(mask), "valid": datasets["valid"]}
        model, _ = train_plain(train_cfg, backbone_cfg, sub)
        members.append(model)
    preds = np.mean([m.predict(test) for m in members], axis=0)
    return preds, members


def average_predictions(member_preds) -> np.ndarray:
    return np.mean(np.asarray(member_preds, dtype=np.float64), axis=0)


def daily_ic(pred, data: WindowSet) -> list[float | None]:
    return [pearson(pred[g], data.labels[g]) for g in data.day_groups()]
