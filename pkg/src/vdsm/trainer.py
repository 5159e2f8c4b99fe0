"""Two-stage training, generation, reconstruction and factor swapping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .config import TrainConfig
from .datasets import identity_batches
from .model import VDSM, Factors
from .objectives import LossBreakdown, pretrain_elbo, sequence_elbo
from .schedules import PRETRAIN, SEQUENCE, AnnealState, pretrain_schedule, sequence_schedule

log = logging.getLogger(__name__)

INIT = "init"
STAGE_CODES = {PRETRAIN: 1, SEQUENCE: 2}
METRIC_COLUMNS = [
    "stage", "epoch", "recon", "kl_s", "kl_d", "kl_z1", "kl_z_trans",
    "lambda_z", "lambda_s", "tau_s",
]


class StageOrderError(RuntimeError):
    pass


@dataclass
class ModelState:
    config: TrainConfig
    model: VDSM
    optimizer: Optional[torch.optim.Adam] = None
    trainable: List[str] = field(default_factory=list)  # optimizer parameter order
    anneal: Optional[AnnealState] = None
    stage: str = INIT
    epoch: int = 0  # epochs completed in the current stage
    joint: bool = False  # sequence stage run without pretraining or freezing
    history: List[Dict] = field(default_factory=list)
    rng_state: Optional[torch.Tensor] = None

    @property
    def pretrain_complete(self) -> bool:
        return self.stage == PRETRAIN and self.epoch >= self.config.pretrain_epochs

    @property
    def sequence_complete(self) -> bool:
        return self.stage == SEQUENCE and self.epoch >= self.config.sequence_epochs

    @property
    def tau(self) -> float:
        return self.anneal.tau_s if self.anneal is not None else self.config.schedule.tau_min

    def frozen_flags(self) -> Dict[str, bool]:
        return self.model.frozen_flags()


def init_state(config: TrainConfig) -> ModelState:
    torch.manual_seed(config.seed)
    return ModelState(config, VDSM(config))


def epoch_seed(seed: int, stage: str, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, STAGE_CODES[stage], epoch]).generate_state(1)[0])


def make_optimizer(state: ModelState, names: List[str]) -> None:
    params = dict(state.model.named_parameters())
    state.trainable = list(names)
    state.optimizer = torch.optim.Adam([params[n] for n in names], lr=state.config.lr)


def _as_tensor(data) -> torch.Tensor:
    frames = getattr(data, "frames", data)
    return torch.as_tensor(np.asarray(frames, dtype=np.float32))


def _steps_per_epoch(n: int, config: TrainConfig) -> int:
    return config.batches_per_epoch or -(-n // config.batch_size)


def _batches_pretrain(frames: np.ndarray, config: TrainConfig, seed: int):
    """Stacks of whole identity groups, ``batch_size`` groups per step."""
    steps = _steps_per_epoch(len(frames), config)
    groups, rep = [], 0
    while True:
        for b in identity_batches(frames, frames.shape[1], seed, rep):
            groups.append(b.frames)
            if len(groups) == config.batch_size:
                yield np.stack(groups)
                groups = []
                steps -= 1
                if steps == 0:
                    return
        if groups and not config.batches_per_epoch:
            yield np.stack(groups)
            return
        rep += 1


def _batches_sequence(frames: np.ndarray, config: TrainConfig, seed: int):
    steps = _steps_per_epoch(len(frames), config)
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(len(frames)) for _ in range(-(-steps * config.batch_size // len(frames)))])
    for k in range(steps):
        idx = order[k * config.batch_size : (k + 1) * config.batch_size]
        if len(idx):
            yield frames[np.sort(idx)]


def _run_epoch(state: ModelState, frames: np.ndarray, stage: str, anneal: AnnealState) -> Dict:
    cfg = state.config
    seed = epoch_seed(cfg.seed, stage, state.epoch)
    gen = torch.Generator().manual_seed(seed)
    elbo = pretrain_elbo if stage == PRETRAIN else sequence_elbo
    batches = _batches_pretrain(frames, cfg, seed) if stage == PRETRAIN else _batches_sequence(frames, cfg, seed)
    params = state.optimizer.param_groups[0]["params"]
    model = state.model
    model.train()
    sums: Dict[str, float] = {}
    n = 0
    for batch in batches:
        lb = elbo(model, torch.from_numpy(batch), anneal, generator=gen)
        state.optimizer.zero_grad(set_to_none=True)
        (-lb.weighted_total).backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        state.optimizer.step()
        for k, v in lb.floats().items():
            sums[k] = sums.get(k, 0.0) + v
        n += 1
    means = {k: v / n for k, v in sums.items()}
    state.rng_state = gen.get_state()
    return {
        "stage": stage,
        "epoch": state.epoch,
        "recon": means["reconstruction"],
        "kl_s": means["kl_s"],
        "kl_d": means["kl_d"],
        "kl_z1": means["kl_z1"],
        "kl_z_trans": means["kl_z_trans"],
        "weighted_total": means["weighted_total"],
        "lambda_z": anneal.lambda_z,
        "lambda_s": anneal.lambda_s,
        "tau_s": anneal.tau_s,
    }


EpochHook = Callable[[ModelState, Dict], None]


def _loop(state, frames, stage, total, schedule, on_epoch, max_epochs):
    done = 0
    while state.epoch < total and (max_epochs is None or done < max_epochs):
        anneal = schedule(state.epoch, total, state.config.schedule)
        row = _run_epoch(state, frames, stage, anneal)
        state.anneal = anneal
        state.epoch += 1
        state.history.append(row)
        done += 1
        log.info("%s epoch %d/%d elbo %.1f", stage, state.epoch, total, row["weighted_total"])
        if on_epoch is not None:
            on_epoch(state, row)
    return state


def pretrain(
    dataset,
    config: TrainConfig,
    state: Optional[ModelState] = None,
    on_epoch: Optional[EpochHook] = None,
    max_epochs: Optional[int] = None,
) -> ModelState:
    """Stage one: encoder, expert bank and static head on identity-grouped frames.

    ``dataset`` is a ``SequenceDataset`` or a (N, T, C, H, W) array; each
    sequence is one identity group. Passing a partially pretrained ``state``
    resumes it.
    """
    frames = np.asarray(getattr(dataset, "frames", dataset), dtype=np.float32)
    if frames.ndim != 5 or len(frames) == 0:
        raise ValueError("pretraining needs a nonempty (N, T, C, H, W) set of sequences to group frames by")
    if state is None:
        state = init_state(config)
    if state.stage == INIT:
        state.stage = PRETRAIN
        state.epoch = 0
        state.model.unfreeze()
        names = [n for n, _ in state.model.named_parameters() if n.startswith(("encoder.", "bank."))]
        for n, p in state.model.named_parameters():
            p.requires_grad_(n in names)
        make_optimizer(state, names)
        if config.pretrain_epochs:
            state.anneal = pretrain_schedule(0, config.pretrain_epochs, config.schedule)
    elif state.stage != PRETRAIN:
        raise StageOrderError(f"cannot pretrain a model in stage {state.stage!r}")
    return _loop(state, frames, PRETRAIN, config.pretrain_epochs, pretrain_schedule, on_epoch, max_epochs)


def train_sequences(
    dataset,
    state: ModelState,
    config: Optional[TrainConfig] = None,
    on_epoch: Optional[EpochHook] = None,
    max_epochs: Optional[int] = None,
    joint: bool = False,
) -> ModelState:
    """Stage two: the full sequential bound with the pretrained parts frozen.

    ``joint=True`` is the no-pretraining ablation: it accepts a fresh state
    and trains every parameter.
    """
    config = config or state.config
    frames = np.asarray(getattr(dataset, "frames", dataset), dtype=np.float32)
    if frames.ndim != 5 or frames.shape[1] < 2:
        raise ValueError("sequence training needs (N, T, C, H, W) sequences with T >= 2")
    if state.stage == SEQUENCE:
        pass  # resume
    elif joint and state.stage == INIT:
        state.stage, state.epoch, state.joint = SEQUENCE, 0, True
        state.model.unfreeze()
        make_optimizer(state, [n for n, _ in state.model.named_parameters()])
    elif state.pretrain_complete:
        state.stage, state.epoch = SEQUENCE, 0
        state.model.apply_stage_two_freeze()
        # optimizer moments are not carried across the stage boundary
        make_optimizer(state, [n for n, _ in state.model.stage_two_trainable()])
    else:
        raise StageOrderError("sequence training requires a completed pretraining stage")
    return _loop(state, frames, SEQUENCE, config.sequence_epochs, sequence_schedule, on_epoch, max_epochs)


def train(dataset, config: TrainConfig, joint: bool = False) -> ModelState:
    """Both stages back to back (or the joint ablation)."""
    if joint:
        return train_sequences(dataset, init_state(config), config, joint=True)
    return train_sequences(dataset, pretrain(dataset, config), config)


# -- testing-time procedures ---------------------------------------------------


def _frames_tensor(frames) -> torch.Tensor:
    x = _as_tensor(frames)
    return x[None] if x.dim() == 4 else x


@torch.no_grad()
def infer(state: ModelState, frames) -> Factors:
    state.model.eval()
    return state.model.infer_factors(_frames_tensor(frames))


@torch.no_grad()
def generate(
    state: ModelState,
    T: int,
    init: Optional[Dict[str, torch.Tensor]] = None,
    seed: Optional[int] = 0,
    n: int = 1,
) -> torch.Tensor:
    """Sample sequences (n, T, C, H, W).

    Factors missing from ``init`` (keys ``s``, ``d``, ``z1``) are drawn from
    their priors. ``seed=None`` rolls out the transition means instead of
    sampling transition noise (prior draws then use seed 0).
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    model = state.model
    model.eval()
    init = dict(init or {})
    if init:
        n = next(iter(init.values())).shape[0]
    gen = torch.Generator().manual_seed(0 if seed is None else seed)
    prior = model.sample_prior_factors(n, gen)
    factors = Factors(init.get("s", prior.s), init.get("d", prior.d), init.get("z1", prior.z1))
    noise = None
    if seed is not None:
        noise = torch.randn(n, T - 1, model.config.kappa_z, generator=gen)
    return model.generate_from(factors, T, state.tau, noise)


def reconstruct(state: ModelState, frames, T: Optional[int] = None, seed: Optional[int] = None) -> torch.Tensor:
    """Regenerate sequences from their own inferred factors."""
    x = _frames_tensor(frames)
    f = infer(state, x)
    return generate(state, T or x.shape[1], {"s": f.s, "d": f.d, "z1": f.z1}, seed)


FACTORS = ("identity", "dynamics")


def swap(state: ModelState, seq_a, seq_b, factor: str, T: Optional[int] = None, seed: Optional[int] = None):
    """Generate from ``seq_a`` with ``factor`` taken from ``seq_b``.

    ``identity`` transfers b's static factor onto a's dynamics; ``dynamics``
    transfers b's dynamics (and the initial pose they imply) onto a's identity.
    """
    if factor not in FACTORS:
        raise ValueError(f"unknown factor {factor!r}; valid factors: {', '.join(FACTORS)}")
    a, b = _frames_tensor(seq_a), _frames_tensor(seq_b)
    fa, fb = infer(state, a), infer(state, b)
    if factor == "identity":
        init = {"s": fb.s, "d": fa.d, "z1": fa.z1}
    else:
        init = {"s": fa.s, "d": fb.d, "z1": fb.z1}
    return generate(state, T or a.shape[1], init, seed)
