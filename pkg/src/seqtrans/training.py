"""Two-step multitask training: text-only LM pass, then speech pass.

Each update first computes the weighted LM gradients on the prediction
network and its classifier from a text batch (clipped, retained, no
parameter update), then the weighted CTC + transducer gradients from a
speech batch, adds the retained gradients, clips the combined tree again,
and applies one Adam step to every parameter. Gradients on the prediction
network therefore accumulate across the two passes.

The metrics log is newline-delimited
"epoch,step,L_ctc,L_trans,L_lm,L_total,grad_norm,lr"; per-epoch checkpoints
are written as epoch_{n}.stck with a resume sidecar for the newest one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .autodiff import ParamTree, Tape, Tensor
from .data import SpecAugmentConfig, TextCorpus, Utterance, spec_augment
from .errors import ConfigError, DataError, NumericError
from .losses import LossWeights, ctc_loss, lm_loss, transducer_loss
from .networks import Model

GradTree = dict[str, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip_max_norm: float = 5.0
    epochs: int = 130
    average_last: int = 15
    batch_speech: int = 8
    batch_text: int = 8
    seed: int = 1234
    warmup_steps: int = 25000
    peak_lr: float = 0.0  # 0 -> 1/sqrt(d_trans)
    total_steps: int = 0  # 0 -> epochs * steps-per-epoch
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    keep_checkpoints: int = 20
    specaugment: SpecAugmentConfig | None = None

    def __post_init__(self) -> None:
        if not self.grad_clip_max_norm > 0:
            raise ConfigError("gradient clip norm must be positive (use inf to disable)")
        if self.average_last > self.epochs:
            raise ConfigError("average_last cannot exceed the number of epochs")
        if not 0 < self.adam_beta1 < 1 or not 0 < self.adam_beta2 < 1:
            raise ConfigError("Adam betas must lie in (0, 1)")


@dataclass
class OptimizerState:
    step: int
    m: GradTree
    v: GradTree
    beta1: float
    beta2: float
    eps: float
    warmup_steps: int
    peak_lr: float
    total_steps: int


def init_optimizer(params: ParamTree, cfg: TrainConfig, d_trans: int,
                   total_steps: int) -> OptimizerState:
    peak = cfg.peak_lr if cfg.peak_lr > 0 else 1.0 / math.sqrt(d_trans)
    return OptimizerState(
        step=0,
        m={name: np.zeros_like(t.data) for name, t in params.items()},
        v={name: np.zeros_like(t.data) for name, t in params.items()},
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        warmup_steps=cfg.warmup_steps,
        peak_lr=peak,
        total_steps=total_steps,
    )


def learning_rate(step: int, warmup_steps: int, peak_lr: float, total_steps: int) -> float:
    """Linear warmup to the peak, then linear decay to zero at total_steps."""
    if step <= warmup_steps:
        return peak_lr * step / max(1, warmup_steps)
    if total_steps <= warmup_steps:
        return 0.0
    return peak_lr * max(0.0, (total_steps - step) / (total_steps - warmup_steps))


def global_norm(grads: GradTree) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return math.sqrt(total)


def clip_gradients(grads: GradTree, max_norm: float) -> GradTree:
    """Scale the whole tree down when its global L2 norm exceeds max_norm."""
    norm = global_norm(grads)
    if norm <= max_norm or not math.isfinite(max_norm):
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def adam_step(state: OptimizerState, params: ParamTree, grads: GradTree
              ) -> tuple[OptimizerState, ParamTree]:
    """Bias-corrected Adam with the warmup/linear-decay schedule."""
    step = state.step + 1
    lr = learning_rate(step, state.warmup_steps, state.peak_lr, state.total_steps)
    b1, b2 = state.beta1, state.beta2
    new_m: GradTree = {}
    new_v: GradTree = {}
    new_params = ParamTree()
    for name, tensor in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_m[name] = m
        new_v[name] = v
        new_params.add(name, tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    new_state = replace(state, step=step, m=new_m, v=new_v)
    return new_state, new_params


# ---------------------------------------------------------------------------
# batch objectives
# ---------------------------------------------------------------------------


def _mean(tensors: list[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(tensors))


def speech_batch_loss(model: Model, batch: Sequence[Utterance], weights: LossWeights,
                      train: bool = False, rng: np.random.Generator | None = None
                      ) -> tuple[Tensor, dict[str, float]]:
    """alpha1 * mean CTC + alpha2 * mean transducer over the batch."""
    if not batch:
        raise ConfigError("speech batch is empty")
    ctc_terms: list[Tensor] = []
    rnnt_terms: list[Tensor] = []
    for utt in batch:
        f = nets.transcription_forward(model.params, model.cfg.transcription,
                                       utt.features, train, rng)
        if weights.alpha1 > 0:
            ctc_terms.append(ctc_loss(nets.ctc_log_probs(model.params, f), utt.tokens))
        if weights.alpha2 > 0:
            g, _ = nets.prediction_forward(model.params, model.cfg.prediction, utt.tokens,
                                           d_lm=model.cfg.d_lm, train=train, rng=rng)
            grid = nets.joint_log_probs(model.params, model.cfg.joint, f, g)
            rnnt_terms.append(transducer_loss(grid, utt.tokens))

    comps: dict[str, float] = {}
    terms: list[Tensor] = []
    if ctc_terms:
        mean_ctc = _mean(ctc_terms)
        comps["l_ctc"] = mean_ctc.item()
        terms.append(ad.mul(mean_ctc, weights.alpha1))
    if rnnt_terms:
        mean_rnnt = _mean(rnnt_terms)
        comps["l_trans"] = mean_rnnt.item()
        terms.append(ad.mul(mean_rnnt, weights.alpha2))
    loss = terms[0]
    for term in terms[1:]:
        loss = ad.add(loss, term)
    return loss, comps


def text_batch_loss(model: Model, batch: Sequence[tuple[int, ...]],
                    train: bool = False, rng: np.random.Generator | None = None
                    ) -> Tensor:
    """Mean per-sentence LM loss (each already a mean over its steps)."""
    if not batch:
        raise ConfigError("text batch is empty")
    terms = []
    for sentence in batch:
        g, _ = nets.prediction_forward(model.params, model.cfg.prediction, sentence,
                                       d_lm=model.cfg.d_lm, train=train, rng=rng)
        terms.append(lm_loss(nets.lm_log_probs(model.params, g), sentence))
    return _mean(terms)


def _zero_grads(params: ParamTree) -> GradTree:
    return {name: np.zeros_like(t.data) for name, t in params.items()}


def two_step_update(model: Model, text_batch: Sequence[tuple[int, ...]] | None,
                    speech_batch: Sequence[Utterance] | None, cfg: TrainConfig,
                    opt: OptimizerState, rng: np.random.Generator | None = None,
                    train: bool = True) -> tuple[Model, OptimizerState, dict[str, float]]:
    """One multitask update; see the module docstring for the two passes."""
    w = cfg.weights
    diag: dict[str, float] = {"l_ctc": 0.0, "l_trans": 0.0, "l_lm": 0.0}
    combined = _zero_grads(model.params)

    if w.alpha3 > 0:
        if not text_batch:
            raise ConfigError("two_step_update: LM weight is positive but the text batch is empty")
        with Tape() as tape:
            lm_mean = text_batch_loss(model, text_batch, train, rng)
            step1 = ad.mul(lm_mean, w.alpha3)
        value = lm_mean.item()
        if not math.isfinite(value):
            raise NumericError(f"LM loss diverged: {value}")
        diag["l_lm"] = value
        text_grads = clip_gradients(ad.backward(tape, step1).tree(model.params),
                                    cfg.grad_clip_max_norm)
        for name, g in text_grads.items():
            combined[name] += g

    if w.alpha1 > 0 or w.alpha2 > 0:
        if not speech_batch:
            raise ConfigError("two_step_update: speech weights are positive but the speech batch is empty")
        with Tape() as tape:
            speech, comps = speech_batch_loss(model, speech_batch, w, train, rng)
        for key, value in comps.items():
            if not math.isfinite(value):
                raise NumericError(f"{'CTC' if key == 'l_ctc' else 'transducer'} loss diverged: {value}")
            diag[key] = value
        speech_grads = ad.backward(tape, speech).tree(model.params)
        for name, g in speech_grads.items():
            combined[name] += g

    combined = clip_gradients(combined, cfg.grad_clip_max_norm)
    diag["grad_norm"] = global_norm(combined)
    diag["l_total"] = w.alpha1 * diag["l_ctc"] + w.alpha2 * diag["l_trans"] + w.alpha3 * diag["l_lm"]
    opt, params = adam_step(opt, model.params, combined)
    diag["lr"] = learning_rate(opt.step, opt.warmup_steps, opt.peak_lr, opt.total_steps)
    return Model(model.cfg, params), opt, diag


# ---------------------------------------------------------------------------
# checkpoint averaging and the training loop
# ---------------------------------------------------------------------------


def average_checkpoints(paths: Sequence[str | Path]) -> ParamTree:
    """Arithmetic per-leaf mean over checkpoints with identical structure."""
    if not paths:
        raise ConfigError("average_checkpoints: no checkpoints given")
    trees = [nets.load_checkpoint(p) for p in paths]
    names = trees[0].names()
    for path, tree in zip(paths, trees):
        if tree.names() != names:
            raise DataError(f"{path}: parameter tree structure differs from {paths[0]}")
    out = ParamTree()
    for name in names:
        # extended-precision accumulation keeps the mean of identical
        # checkpoints bit-exact (float64 sum-then-divide is not)
        stacked = np.stack([tree[name].data for tree in trees]).astype(np.longdouble)
        out.add(name, stacked.mean(axis=0).astype(np.float64))
    return out


def _augment(utt: Utterance, cfg: TrainConfig, rng: np.random.Generator) -> Utterance:
    sa = cfg.specaugment
    if sa is None:
        return utt
    return spec_augment(utt, sa, rng)


METRICS_HEADER = "epoch,step,L_ctc,L_trans,L_lm,L_total,grad_norm,lr"


def _metrics_line(epoch: int, diag: dict[str, float], step: int) -> str:
    return (f"{epoch},{step},{diag['l_ctc']:.10g},{diag['l_trans']:.10g},"
            f"{diag['l_lm']:.10g},{diag['l_total']:.10g},{diag['grad_norm']:.10g},"
            f"{diag['lr']:.10g}")


def _save_state(out_dir: Path, epoch: int, opt: OptimizerState,
                rng: np.random.Generator, text_cursor: int,
                text_order: list[int]) -> None:
    opt_tree = ParamTree()
    for name, arr in opt.m.items():
        opt_tree.add(f"m.{name}", arr)
    for name, arr in opt.v.items():
        opt_tree.add(f"v.{name}", arr)
    nets.save_checkpoint(out_dir / f"epoch_{epoch}.opt.stck", opt_tree)
    state = {
        "epoch": epoch,
        "step": opt.step,
        "rng_state": rng.bit_generator.state,
        "text_cursor": text_cursor,
        "text_order": [int(i) for i in text_order],
    }
    (out_dir / f"epoch_{epoch}.state.json").write_text(json.dumps(state))


def _load_state(out_dir: Path, epoch: int, opt: OptimizerState,
                rng: np.random.Generator) -> tuple[OptimizerState, int, list[int]]:
    state = json.loads((out_dir / f"epoch_{epoch}.state.json").read_text())
    opt_tree = nets.load_checkpoint(out_dir / f"epoch_{epoch}.opt.stck")
    m = {name[2:]: t.data for name, t in opt_tree.items() if name.startswith("m.")}
    v = {name[2:]: t.data for name, t in opt_tree.items() if name.startswith("v.")}
    rng.bit_generator.state = state["rng_state"]
    opt = replace(opt, step=state["step"], m=m, v=v)
    return opt, state["text_cursor"], list(state["text_order"])


def latest_epoch(out_dir: Path) -> int:
    """Highest epoch with a full (checkpoint + sidecar) set; 0 when none."""
    best = 0
    for path in out_dir.glob("epoch_*.state.json"):
        try:
            epoch = int(path.name.split("_")[1].split(".")[0])
        except (IndexError, ValueError):
            continue
        if (out_dir / f"epoch_{epoch}.stck").exists():
            best = max(best, epoch)
    return best


def run_training(model: Model, utterances: Sequence[Utterance], corpus: TextCorpus | None,
                 cfg: TrainConfig, out_dir: str | Path | None = None,
                 resume: bool = False) -> tuple[Model, list[str]]:
    """Run the epoch loop; deterministic for a given config and seed.

    Returns the trained model and the metrics lines. When `out_dir` is given,
    per-epoch checkpoints, a resume sidecar for the newest epoch, and
    metrics.csv are written there.
    """
    if not utterances and (cfg.weights.alpha1 > 0 or cfg.weights.alpha2 > 0):
        raise ConfigError("run_training: no utterances")
    if cfg.weights.alpha3 > 0 and (corpus is None or not corpus.sentences):
        raise ConfigError("run_training: LM weight is positive but the corpus is empty")

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    steps_per_epoch = max(1, math.ceil(len(utterances) / cfg.batch_speech))
    total_steps = cfg.total_steps if cfg.total_steps > 0 else cfg.epochs * steps_per_epoch
    opt = init_optimizer(model.params, cfg, model.cfg.d_trans, total_steps)
    rng = np.random.default_rng(cfg.seed)
    sentences = corpus.sentences if corpus is not None else []
    text_order = [int(i) for i in rng.permutation(len(sentences))] if sentences else []
    text_cursor = 0

    start_epoch = 1
    if resume:
        if out_path is None:
            raise ConfigError("resume requires an output directory")
        done = latest_epoch(out_path)
        if done:
            model = Model(model.cfg, nets.load_checkpoint(out_path / f"epoch_{done}.stck"))
            opt, text_cursor, text_order = _load_state(out_path, done, opt, rng)
            start_epoch = done + 1

    def next_text_batch() -> list[tuple[int, ...]]:
        nonlocal text_cursor, text_order
        batch = []
        for _ in range(cfg.batch_text):
            if text_cursor >= len(text_order):
                text_order = [int(i) for i in rng.permutation(len(sentences))]
                text_cursor = 0
            batch.append(tuple(sentences[text_order[text_cursor]]))
            text_cursor += 1
        return batch

    metrics: list[str] = []
    mode = "a" if (resume and start_epoch > 1) else "w"
    log_fh = open(out_path / "metrics.csv", mode) if out_path is not None else None
    if log_fh is not None and mode == "w":
        log_fh.write(METRICS_HEADER + "\n")

    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            if opt.step >= total_steps:
                break
            order = rng.permutation(len(utterances))
            for lo in range(0, len(order), cfg.batch_speech):
                if opt.step >= total_steps:
                    break
                speech = [_augment(utterances[i], cfg, rng) for i in order[lo : lo + cfg.batch_speech]]
                text = next_text_batch() if cfg.weights.alpha3 > 0 else None
                try:
                    model, opt, diag = two_step_update(model, text, speech, cfg, opt, rng)
                except NumericError as err:
                    line = f"{epoch},{opt.step + 1},nan,nan,nan,nan,nan,nan"
                    metrics.append(line + f"  # step skipped: {err}")
                    continue
                line = _metrics_line(epoch, diag, opt.step)
                metrics.append(line)
                if log_fh is not None:
                    log_fh.write(line + "\n")
                    log_fh.flush()
            if out_path is not None:
                nets.save_checkpoint(out_path / f"epoch_{epoch}.stck", model.params)
                _save_state(out_path, epoch, opt, rng, text_cursor, text_order)
                _prune(out_path, epoch, max(cfg.keep_checkpoints, cfg.average_last))
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, metrics


def _prune(out_dir: Path, epoch: int, keep: int) -> None:
    # old sidecars are superseded immediately; old checkpoints beyond `keep`
    for path in out_dir.glob("epoch_*.state.json"):
        if path != out_dir / f"epoch_{epoch}.state.json":
            path.unlink()
    for path in out_dir.glob("epoch_*.opt.stck"):
        if path != out_dir / f"epoch_{epoch}.opt.stck":
            path.unlink()
    cutoff = epoch - keep
    for path in out_dir.glob("epoch_*.stck"):
        name = path.name
        if name.endswith(".opt.stck"):
            continue
        try:
            n = int(name.split("_")[1].split(".")[0])
        except (IndexError, ValueError):
            continue
        if n <= cutoff:
            path.unlink()


def recent_checkpoints(out_dir: str | Path, k: int) -> list[Path]:
    """The newest k epoch checkpoints, oldest first."""
    out_dir = Path(out_dir)
    epochs = []
    for path in out_dir.glob("epoch_*.stck"):
        if path.name.endswith(".opt.stck"):
            continue
        try:
            epochs.append((int(path.name.split("_")[1].split(".")[0]), path))
        except (IndexError, ValueError):
            continue
    epochs.sort()
    return [path for _, path in epochs[-k:]]
