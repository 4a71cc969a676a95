"""First-order bi-level search and from-scratch retraining."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import flatten_optimizer, load_tensors, restore_optimizer, save_tensors
from .config import SearchConfig, TrainConfig
from .data import Scaler, WindowSet
from .genotype import Genotype, derive_genotype, genotype_from_dict
from .metrics import MetricsReport, evaluate, mae
from .model import build_discrete_model
from .supernet import SuperNet, temperature_at

log = logging.getLogger(__name__)


class SearchDiverged(RuntimeError):
    """Non-finite loss; ``last_epoch`` is the last epoch that completed finitely."""

    def __init__(self, message: str, last_epoch: int):
        super().__init__(message)
        self.last_epoch = last_epoch


def loss_fn(kind: str):
    if kind == "mae":
        return lambda p, y: (p - y).abs().mean()
    if kind == "mse":
        return lambda p, y: ((p - y) ** 2).mean()
    raise ValueError(f"unknown loss {kind!r}")


def _batches(windows: WindowSet, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(len(windows))
    for start in range(0, len(perm), batch_size):
        idx = np.sort(perm[start:start + batch_size])
        yield torch.from_numpy(windows.inputs[idx]), torch.from_numpy(windows.targets[idx])


def _cycle(windows: WindowSet, batch_size: int, seed: int, epoch: int, stream: int):
    rounds = 0
    while True:
        yield from _batches(windows, batch_size, np.random.default_rng([seed, epoch, stream, rounds]))
        rounds += 1


def _forecast(net, x, scaler: Scaler):
    out = net(x)
    if out.dim() == 3:  # single step [B, N, 1] -> [B, N, 1, 1]
        out = out.unsqueeze(-1)
    return scaler.inverse_target(out)


def _gradient_step(net, params, opt, batch, scaler, criterion, clip: float) -> float:
    x, y = batch
    net.train()
    loss = criterion(_forecast(net, x, scaler), y.to(x.dtype))
    if not torch.isfinite(loss):
        raise SearchDiverged(f"non-finite loss {loss.item()}", -1)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if not all(torch.isfinite(g).all() for g in grads):
        log.warning("non-finite gradient, step skipped")
        return loss.item()
    for p, g in zip(params, grads):
        p.grad = g
    if clip:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()
    for p in params:
        p.grad = None
    return loss.item()


def theta_step(state: "SearchState", batch, scaler: Scaler) -> float:
    """One adaptive-moment step on the architecture parameters; network weights untouched."""
    return _gradient_step(state.net, state.net.arch_parameters(), state.opt_theta, batch, scaler,
                          loss_fn(state.config.loss), state.config.grad_clip)


def w_step(state: "SearchState", batch, scaler: Scaler) -> float:
    """One adaptive-moment step on the network weights; architecture parameters untouched."""
    return _gradient_step(state.net, state.net.weight_parameters(), state.opt_w, batch, scaler,
                          loss_fn(state.config.loss), state.config.grad_clip)


@dataclass
class SearchState:
    net: SuperNet
    opt_theta: torch.optim.Optimizer
    opt_w: torch.optim.Optimizer
    config: SearchConfig
    epoch: int = 0
    step: int = 0
    tau: float = 5.0
    log: list = field(default_factory=list)
    best_loss: float = math.inf
    best_epoch: int = -1
    best_genotype: dict | None = None


def init_search(config: SearchConfig, n_features: int, horizon: int, mode: str, supports, adjacency) -> SearchState:
    net = SuperNet(
        n_features, horizon, mode, supports, adjacency, M=config.M, B=config.B, d=config.D,
        fraction=config.partial_channel_fraction, residual=config.residual,
        share_micro=config.no_macro_search, macro_search=not config.no_macro_search,
        tau=1.0 if config.no_temperature else config.tau_init, seed=config.seed,
    )
    opt_theta = torch.optim.Adam(net.arch_parameters(), lr=config.theta_lr, betas=tuple(config.theta_betas),
                                 weight_decay=config.theta_weight_decay)
    opt_w = torch.optim.Adam(net.weight_parameters(), lr=config.w_lr, weight_decay=config.w_weight_decay)
    return SearchState(net, opt_theta, opt_w, config, tau=net.tau)


@dataclass
class SearchResult:
    genotype: Genotype
    final_genotype: Genotype
    log: list
    state: SearchState


def run_search(state: SearchState, d_train: WindowSet, d_val: WindowSet, scaler: Scaler, dataset: str = "",
               until_epoch: int | None = None, checkpoint_dir=None) -> SearchResult:
    """Alternate Theta steps (pseudo-val batches) and w steps (pseudo-train batches).

    Runs from ``state.epoch`` up to ``until_epoch`` (default: config.epochs),
    annealing the temperature after each epoch.  Returns the genotype of the
    epoch with the lowest mean pseudo-validation loss.
    """
    cfg = state.config
    if len(d_train) == 0 or len(d_val) == 0:
        raise ValueError("empty pseudo split")
    until = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    while state.epoch < until:
        e = state.epoch
        state.net.tau = state.tau
        val_iter = _cycle(d_val, cfg.batch_size, cfg.seed, e, 1)
        tl, vl = [], []
        try:
            for batch in _batches(d_train, cfg.batch_size, np.random.default_rng([cfg.seed, e, 0])):
                vl.append(theta_step(state, next(val_iter), scaler))
                tl.append(w_step(state, batch, scaler))
                state.step += 1
        except SearchDiverged as exc:
            raise SearchDiverged(f"epoch {e}: {exc}", e - 1) from None
        record = {"epoch": e, "tau": state.tau, "loss_train": float(np.mean(tl)),
                  "loss_val": float(np.mean(vl)), "sharpness": state.net.sharpness()}
        state.log.append(record)
        log.info("epoch %d tau %.4g train %.4f val %.4f sharp %.3f", e, record["tau"], record["loss_train"],
                 record["loss_val"], record["sharpness"])
        genotype = derive_genotype(state.net, dataset, cfg.forbid_zero_on_mandatory_edge)
        if record["loss_val"] < state.best_loss:
            state.best_loss, state.best_epoch = record["loss_val"], e
            state.best_genotype = genotype.to_dict()
        if not cfg.no_temperature:
            # closed form rather than repeated multiplication, so the trace has no drift
            state.tau = temperature_at(e + 1, cfg.tau_init, cfg.tau_factor, cfg.tau_floor)
        state.epoch += 1
        if checkpoint_dir is not None:
            save_search_checkpoint(checkpoint_dir, state, genotype, meta=_net_meta(state.net, dataset))
    final = derive_genotype(state.net, dataset, cfg.forbid_zero_on_mandatory_edge)
    best = genotype_from_dict(state.best_genotype) if state.best_genotype else final
    return SearchResult(best, final, list(state.log), state)


def _net_meta(net: SuperNet, dataset: str) -> dict:
    return {"n_features": net.embedding.in_features, "horizon": net.head.horizon, "mode": net.head.mode,
            "dataset": dataset}


def joint_search(d_train: WindowSet, d_val: WindowSet, scaler: Scaler, supports, adjacency,
                 config: SearchConfig, n_features: int, dataset: str = "", checkpoint_dir=None) -> SearchResult:
    horizon = d_train.Q
    state = init_search(config, n_features, horizon, d_train.mode, supports, adjacency)
    return run_search(state, d_train, d_val, scaler, dataset, checkpoint_dir=checkpoint_dir)


def search_no_macro(d_train, d_val, scaler, supports, adjacency, config: SearchConfig, n_features: int,
                    dataset: str = "", checkpoint_dir=None) -> SearchResult:
    """One shared micro-DAG, stacked B times in a chain with residual connections."""
    cfg = dataclasses.replace(config, no_macro_search=True)
    return joint_search(d_train, d_val, scaler, supports, adjacency, cfg, n_features, dataset, checkpoint_dir)


# ----------------------------------------------------------------- checkpoints


def save_search_checkpoint(directory, state: SearchState, genotype: Genotype, meta: dict):
    directory = Path(directory)
    tensors = {f"net/{k}": v for k, v in state.net.state_dict().items()}
    t_theta, m_theta = flatten_optimizer("opt_theta", state.opt_theta)
    t_w, m_w = flatten_optimizer("opt_w", state.opt_w)
    tensors.update(t_theta)
    tensors.update(t_w)
    metadata = {
        "config": asdict(state.config), "epoch": state.epoch, "step": state.step, "tau": state.tau,
        "log": state.log, "best_loss": state.best_loss, "best_epoch": state.best_epoch,
        "best_genotype": state.best_genotype, "opt_theta": m_theta, "opt_w": m_w, **meta,
    }
    save_tensors(directory, tensors, metadata)
    tmp = directory / "genotype.json.tmp"
    tmp.write_text(genotype.to_json())
    tmp.replace(directory / "genotype.json")


def load_search_checkpoint(directory, supports, adjacency) -> tuple[SearchState, dict]:
    tensors, meta = load_tensors(directory)
    cfg_dict = meta["config"]
    cfg_dict["theta_betas"] = tuple(cfg_dict["theta_betas"])
    config = SearchConfig(**cfg_dict)
    state = init_search(config, meta["n_features"], meta["horizon"], meta["mode"], supports, adjacency)
    state.net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net/")})
    restore_optimizer("opt_theta", state.opt_theta, tensors, meta["opt_theta"])
    restore_optimizer("opt_w", state.opt_w, tensors, meta["opt_w"])
    state.epoch, state.step, state.tau = meta["epoch"], meta["step"], meta["tau"]
    state.net.tau = state.tau
    state.log = meta["log"]
    state.best_loss, state.best_epoch = meta["best_loss"], meta["best_epoch"]
    state.best_genotype = meta["best_genotype"]
    return state, meta


# ------------------------------------------------------------------ retraining


@dataclass
class TrainResult:
    model: torch.nn.Module
    report: MetricsReport
    history: list
    best_epoch: int


@torch.no_grad()
def _val_mae(model, windows: WindowSet, scaler: Scaler, batch_size: int = 256) -> float:
    model.eval()
    errs, count = 0.0, 0
    for start in range(0, len(windows), batch_size):
        x = torch.from_numpy(windows.inputs[start:start + batch_size])
        y = torch.from_numpy(windows.targets[start:start + batch_size])
        p = _forecast(model, x, scaler)
        errs += float((p - y).abs().sum())
        count += y.numel()
    return errs / count


def train_from_scratch(genotype: Genotype, train: WindowSet, val: WindowSet, test: WindowSet, scaler: Scaler,
                       supports, adjacency, config: TrainConfig, horizons=(3, 6, 12), dataset: str = "",
                       allow_reference: bool = False) -> TrainResult:
    """Fresh weights, early stopping on validation MAE, metrics on the test split."""
    n_features = train.inputs.shape[-1]
    model = build_discrete_model(genotype, n_features, train.Q, train.mode, supports, adjacency,
                                 residual=config.residual, allow_reference=allow_reference, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    criterion = loss_fn(config.loss)
    params = list(model.parameters())
    best, best_state, best_epoch, stale = math.inf, copy.deepcopy(model.state_dict()), -1, 0
    history = []
    for epoch in range(config.train_epochs):
        model.train()
        losses = []
        diverged = False
        for x, y in _batches(train, config.train_batch_size, np.random.default_rng([config.seed, epoch, 2])):
            loss = criterion(_forecast(model, x, scaler), y)
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            losses.append(loss.item())
        if diverged:
            log.warning("training diverged at epoch %d; keeping best validation checkpoint", epoch)
            break
        v = _val_mae(model, val, scaler)
        history.append({"epoch": epoch, "loss_train": float(np.mean(losses)), "val_mae": v})
        if v < best:
            best, best_epoch, stale = v, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    report = evaluate(model, test, scaler, horizons, dataset, genotype.hash())
    return TrainResult(model, report, history, best_epoch)
