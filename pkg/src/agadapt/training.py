"""Backbone pretraining, two-stage adapter adaptation, and evaluation.

Stage 1 trains the encoder adapters with cross-entropy only; stage 2 trains
both adapter sets with the joint objective (cross-entropy plus the weighted
guidance loss). The backbone is frozen throughout adaptation, and each stage
ends by averaging the best checkpoints by validation loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .guidance import (
    GuidanceTarget,
    HeadSelection,
    ag_loss,
    count_and_select,
    guidance_target,
)
from .model import (
    ModelConfig,
    Seq2SeqModel,
    TokenSequence,
    Vocabulary,
    build_prompt,
    extract_attention,
)
from .numerics import (
    OptimizerState,
    Tensor,
    adamw_step,
    backward,
    cross_entropy,
    no_grad,
    softmax_rows,
)
from .synthtask import (
    KIND_CS,
    MerReport,
    Utterance,
    edit_distance,
    mixed_error_rate,
)

MODES = ("one-stage", "one-stage-ag", "two-stage-ag")

PRETRAIN_ACCURACY_GATE = 0.90


@dataclass
class TrainConfig:
    gamma: float = 0.01
    c: float = 0.6
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 16
    seed: int = 0
    head_fraction: float = 0.6
    avg_count: int = 3
    mode: str = "two-stage-ag"
    weight_decay: float = 0.01
    pretrain_epochs: int = 20

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ConfigError("epoch counts must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.avg_count < 1:
            raise ConfigError("checkpoint-average count must be positive")
        if not 0.0 <= self.head_fraction <= 1.0:
            raise ConfigError("head fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Config file: flat "key = value" lines, '#' comments, CLI overrides on top
# ---------------------------------------------------------------------------

def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(raw: str, kind: type):
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(raw)
    return kind(raw)


def build_train_config(values: Mapping[str, str],
                       overrides: Mapping[str, object] | None = None) -> TrainConfig:
    defaults = {f.name: f.default for f in dc_fields(TrainConfig)}
    kwargs: dict[str, object] = {}
    for key, raw in values.items():
        if key not in defaults:
            continue
        try:
            kwargs[key] = _coerce(raw, type(defaults[key]))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                kwargs[key] = value
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def build_model_config(values: Mapping[str, str]) -> ModelConfig:
    defaults = {f.name: f.default for f in dc_fields(ModelConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key in defaults:
            try:
                kwargs[key] = type(defaults[key])(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    uids: list[str]
    frames: np.ndarray        # (B, T_max, feat)
    frame_mask: np.ndarray    # (B, T_max) bool
    tokens: np.ndarray        # (B, N_max) int64, <blnk>-padded
    ce_mask: np.ndarray       # (B, N_max) float, 1 on predictable rows
    onehot: np.ndarray        # (B, N_max, M)
    lengths: list[int]        # true token lengths
    sequences: list[TokenSequence]


def make_batches(utts: Sequence[Utterance], vocab: Vocabulary,
                 batch_size: int) -> list[Batch]:
    """Length-bucketed batches: sort by token length (then id), chunk, pad.

    Padded token positions use <blnk> and are excluded from the loss masks.
    """
    blnk = vocab.id("<blnk>")
    m = vocab.size
    ordered = sorted(utts, key=lambda u: (u.reference.n, u.uid))
    batches = []
    for start in range(0, len(ordered), batch_size):
        chunk = ordered[start:start + batch_size]
        b = len(chunk)
        t_max = max(u.frames.shape[0] for u in chunk)
        n_max = max(u.reference.n for u in chunk)
        feat = chunk[0].frames.shape[1]
        frames = np.zeros((b, t_max, feat))
        frame_mask = np.zeros((b, t_max), dtype=bool)
        tokens = np.full((b, n_max), blnk, dtype=np.int64)
        ce_mask = np.zeros((b, n_max))
        for i, utt in enumerate(chunk):
            t = utt.frames.shape[0]
            n = utt.reference.n
            frames[i, :t] = utt.frames
            frame_mask[i, :t] = True
            tokens[i, :n] = utt.reference.ids
            ce_mask[i, 1:n] = 1.0  # row 0 has no left context
        onehot = np.zeros((b, n_max, m))
        rows = np.arange(b)[:, None]
        cols = np.arange(n_max)[None, :]
        onehot[rows, cols, tokens] = 1.0
        batches.append(Batch(uids=[u.uid for u in chunk], frames=frames,
                             frame_mask=frame_mask, tokens=tokens,
                             ce_mask=ce_mask, onehot=onehot,
                             lengths=[u.reference.n for u in chunk],
                             sequences=[u.reference for u in chunk]))
    return batches


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def sequence_ce(model: Seq2SeqModel, batch: Batch,
                enc_adapters: bool = True, dec_adapters: bool = True):
    """Summed cross-entropy over all predictable rows of a batch; returns
    (ce_sum, forward_out) so callers can reuse the attention maps."""
    out = model.forward(batch.frames, batch.tokens, batch.frame_mask,
                        enc_adapters=enc_adapters, dec_adapters=dec_adapters)
    probs = softmax_rows(out.logits)
    return cross_entropy(probs, batch.onehot, row_mask=batch.ce_mask), out


def batch_loss(model: Seq2SeqModel, batch: Batch, selection: HeadSelection | None,
               gamma: float, targets: Mapping[str, GuidanceTarget] | None
               ) -> tuple[Tensor, float, float]:
    """Joint loss for one batch: mean per-utterance CE plus gamma times the
    mean per-utterance guidance loss. Returns (loss, ce_mean, ag_mean)."""
    b = len(batch.uids)
    ce_sum, out = sequence_ce(model, batch)
    ce_mean = ce_sum * (1.0 / b)
    if gamma == 0.0:
        return ce_mean, ce_mean.item(), 0.0
    if selection is None:
        raise ConfigError("guidance weight is positive but no head selection given")
    selection.require_nonempty()
    ag_total: Tensor | None = None
    for i, uid in enumerate(batch.uids):
        n = batch.lengths[i]
        maps = {}
        for layer, head in set(selection.selected):
            maps[(layer, head)] = out.attention[layer][i, head, :n, :n]
        term = ag_loss(maps, selection, targets[uid])
        ag_total = term if ag_total is None else ag_total + term
    ag_mean = ag_total * (1.0 / b)
    loss = ce_mean + gamma * ag_mean
    return loss, ce_mean.item(), ag_mean.item()


def joint_loss(model: Seq2SeqModel, frames: np.ndarray, y: TokenSequence,
               selection: HeadSelection | None, gamma: float,
               c: float = 0.6) -> Tensor:
    """Per-utterance joint objective; with gamma = 0 this is exactly the CE."""
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    out = model.forward(frames[None], np.asarray(y.ids)[None])
    m = model.vocab.size
    n = y.n
    onehot = np.zeros((1, n, m))
    onehot[0, np.arange(n), y.ids] = 1.0
    ce_mask = np.zeros((1, n))
    ce_mask[0, 1:] = 1.0
    ce = cross_entropy(softmax_rows(out.logits), onehot, row_mask=ce_mask)
    if gamma == 0.0:
        return ce
    if selection is None:
        raise ConfigError("guidance weight is positive but no head selection given")
    target = guidance_target(y, c)
    maps = {}
    for layer, head in set(selection.selected):
        maps[(layer, head)] = out.attention[layer][0, head]
    return ce + gamma * ag_loss(maps, selection, target)


def validation_ce(model: Seq2SeqModel, batches: Sequence[Batch]) -> float:
    """Mean per-utterance teacher-forced CE over a validation set."""
    total = 0.0
    count = 0
    with no_grad():
        for batch in batches:
            ce_sum, _ = sequence_ce(model, batch)
            total += ce_sum.item()
            count += len(batch.uids)
    if count == 0:
        raise DataError("validation set is empty")
    return total / count


# ---------------------------------------------------------------------------
# Run records and checkpoint averaging
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_ce: float
    train_ag: float
    val_ce: float
    seconds: float


@dataclass
class EpochCheckpoint:
    epoch: int
    val_loss: float
    params: dict[str, np.ndarray]


@dataclass
class RunRecord:
    stage: str
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoints: list[EpochCheckpoint] = field(default_factory=list)
    final_val_ce: float | None = None

    def loss_trace(self) -> list[tuple[float, float, float]]:
        return [(e.train_ce, e.train_ag, e.val_ce) for e in self.epochs]


def average_checkpoints(run: RunRecord, k: int) -> dict[str, np.ndarray]:
    """Coordinate-wise mean of the k checkpoints with the lowest validation
    loss (earlier epoch wins ties).

    Tensors that are bit-identical across the chosen checkpoints are passed
    through verbatim; the arithmetic mean of identical values is that value,
    and copying preserves it exactly.
    """
    if k > len(run.checkpoints):
        raise ConfigError(
            f"cannot average {k} checkpoints, only {len(run.checkpoints)} exist")
    ranked = sorted(run.checkpoints, key=lambda cp: (cp.val_loss, cp.epoch))[:k]
    names = ranked[0].params.keys()
    averaged: dict[str, np.ndarray] = {}
    for name in names:
        stack = [cp.params[name] for cp in ranked]
        if all(np.array_equal(stack[0], arr) for arr in stack[1:]):
            averaged[name] = stack[0].copy()
        else:
            acc = np.zeros_like(stack[0])
            for arr in stack:
                acc += arr
            averaged[name] = acc / k
    return averaged


# ---------------------------------------------------------------------------
# Training engine
# ---------------------------------------------------------------------------

def _run_training(model: Seq2SeqModel, train_utts: Sequence[Utterance],
                  valid_utts: Sequence[Utterance], cfg: TrainConfig, *,
                  stage: str, stage_tag: int, param_names: Sequence[str],
                  selection: HeadSelection | None, gamma: float,
                  epochs: int) -> RunRecord:
    params = {name: model.params[name] for name in param_names}
    for name, p in params.items():
        if not p.trainable:
            raise ConfigError(f"parameter {name!r} is frozen and cannot be trained")
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    batches = make_batches(train_utts, model.vocab, cfg.batch_size)
    valid_batches = make_batches(valid_utts, model.vocab, cfg.batch_size)
    if not batches:
        raise DataError("training set is empty")
    targets = None
    if gamma > 0.0:
        targets = {u.uid: guidance_target(u.reference, cfg.c) for u in train_utts}
    shuffle_rng = np.random.default_rng([cfg.seed, 977, stage_tag])
    record = RunRecord(stage=stage)
    for epoch in range(epochs):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(batches))
        ce_acc = 0.0
        ag_acc = 0.0
        n_utts = 0
        for bi in order:
            batch = batches[bi]
            loss, ce_mean, ag_mean = batch_loss(model, batch, selection, gamma, targets)
            grads = backward(loss, params.values())
            adamw_step(opt, params, grads)
            b = len(batch.uids)
            ce_acc += ce_mean * b
            ag_acc += ag_mean * b
            n_utts += b
        val_ce = validation_ce(model, valid_batches)
        record.epochs.append(EpochStats(
            epoch=epoch, train_ce=ce_acc / n_utts, train_ag=ag_acc / n_utts,
            val_ce=val_ce, seconds=time.perf_counter() - start))
        record.checkpoints.append(EpochCheckpoint(
            epoch=epoch, val_loss=val_ce,
            params={n: p.data.copy() for n, p in params.items()}))
    averaged = average_checkpoints(record, min(cfg.avg_count, len(record.checkpoints)))
    for name, arr in averaged.items():
        model.params[name].data = arr.copy()
    record.final_val_ce = validation_ce(model, valid_batches)
    return record


def run_stage1(model: Seq2SeqModel, train_utts: Sequence[Utterance],
               valid_utts: Sequence[Utterance], cfg: TrainConfig) -> RunRecord:
    """Encoder adapters only, cross-entropy only; decoder adapters untouched."""
    if not model.has_adapters:
        raise ConfigError("stage 1 requires initialised adapters")
    names = sorted(model.adapter_params("enc"))
    return _run_training(model, train_utts, valid_utts, cfg, stage="stage1",
                         stage_tag=1, param_names=names, selection=None,
                         gamma=0.0, epochs=cfg.epochs)


def run_stage2(model: Seq2SeqModel, train_utts: Sequence[Utterance],
               valid_utts: Sequence[Utterance], cfg: TrainConfig,
               selection: HeadSelection | None,
               gamma: float | None = None) -> RunRecord:
    """Both adapter sets under the joint objective (or plain CE at gamma 0)."""
    if not model.has_adapters:
        raise ConfigError("stage 2 requires initialised adapters")
    gamma = cfg.gamma if gamma is None else gamma
    if gamma > 0.0:
        if selection is None:
            raise ConfigError("guided training requires a head selection")
        selection.require_nonempty()
    names = sorted(model.adapter_params())
    return _run_training(model, train_utts, valid_utts, cfg, stage="stage2",
                         stage_tag=2, param_names=names, selection=selection,
                         gamma=gamma, epochs=cfg.epochs)


def run_adaptation(model: Seq2SeqModel, train_utts: Sequence[Utterance],
                   valid_utts: Sequence[Utterance], cfg: TrainConfig,
                   selection: HeadSelection | None) -> list[RunRecord]:
    """Dispatch on the configured mode; returns one record per stage run."""
    if cfg.mode == "one-stage":
        return [run_stage2(model, train_utts, valid_utts, cfg, None, gamma=0.0)]
    if cfg.mode == "one-stage-ag":
        return [run_stage2(model, train_utts, valid_utts, cfg, selection)]
    if cfg.mode == "two-stage-ag":
        first = run_stage1(model, train_utts, valid_utts, cfg)
        second = run_stage2(model, train_utts, valid_utts, cfg, selection)
        return [first, second]
    raise ConfigError(f"unknown mode {cfg.mode!r}")


# ---------------------------------------------------------------------------
# Backbone pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainReport:
    mono_accuracy: float
    cs_accuracy: float
    record: RunRecord


def pretrain_backbone(model: Seq2SeqModel, pretrain_utts: Sequence[Utterance],
                      valid_utts: Sequence[Utterance], cfg: TrainConfig) -> PretrainReport:
    """Train the backbone on monolingual data, gate on held-out accuracy,
    then freeze every backbone parameter."""
    if model.has_adapters:
        raise ConfigError("pretrain the backbone before inserting adapters")
    for utt in pretrain_utts:
        if utt.kind == KIND_CS:
            raise DataError("pretraining corpus must be monolingual only")
    # Validation sequences must use the monolingual prompt the backbone is
    # trained on; the valid split stores bilingual-prompt references.
    valid_mono = []
    for utt in valid_utts:
        if utt.lang is None:
            continue
        ref = TokenSequence.from_words(model.vocab, utt.words, utt.lang)
        valid_mono.append(Utterance(uid=utt.uid, frames=utt.frames,
                                    reference=ref, kind=utt.kind))
    if not valid_mono:
        raise DataError("validation set has no monolingual utterances")
    names = sorted(model.params)
    record = _run_training(model, pretrain_utts, valid_mono, cfg,
                           stage="pretrain", stage_tag=0, param_names=names,
                           selection=None, gamma=0.0, epochs=cfg.pretrain_epochs)
    mono = [u for u in valid_utts if u.kind != KIND_CS]
    cs = [u for u in valid_utts if u.kind == KIND_CS]
    mono_acc = token_accuracy(model, mono, bilingual_prompt=False)
    cs_acc = token_accuracy(model, cs, bilingual_prompt=True) if cs else 0.0
    if mono_acc < PRETRAIN_ACCURACY_GATE:
        raise NumericError(
            f"pretraining reached monolingual accuracy {mono_acc:.3f} < "
            f"{PRETRAIN_ACCURACY_GATE}; increase pretrain_epochs")
    model.freeze_backbone()
    return PretrainReport(mono_accuracy=mono_acc, cs_accuracy=cs_acc, record=record)


# ---------------------------------------------------------------------------
# Head selection over the frozen backbone
# ---------------------------------------------------------------------------

def collect_head_maps(model: Seq2SeqModel, utts: Sequence[Utterance],
                      batch_size: int = 32):
    """Per-utterance decoder self-attention maps from teacher-forced passes,
    with adapters disabled (selection runs on the backbone alone)."""
    batches = make_batches(utts, model.vocab, batch_size)
    with no_grad():
        for batch in batches:
            out = model.forward(batch.frames, batch.tokens, batch.frame_mask,
                                enc_adapters=False, dec_adapters=False)
            for i in range(len(batch.uids)):
                yield extract_attention(out, batch_index=i, n=batch.lengths[i])


def select_heads(model: Seq2SeqModel, utts: Sequence[Utterance],
                 fraction: float | None = None, top_k: int | None = None,
                 batch_size: int = 32) -> HeadSelection:
    omega = (1, 2)  # LID positions in the bilingual prompt
    seqs = [u for u in utts if len(u.reference.lid_positions) == 2]
    if not seqs:
        raise DataError("head selection needs bilingual-prompt utterances")
    maps = collect_head_maps(model, seqs, batch_size=batch_size)
    return count_and_select(maps, omega, top_k=top_k, fraction=fraction)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    mer: MerReport
    lid_attribution: float | None
    qualifying_heads: int | None = None

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("all", "overall_mer", self.mer.overall)]
        for kind, rate in sorted(self.mer.per_kind.items()):
            out.append((kind, "token_error_rate", rate))
        if self.lid_attribution is not None:
            out.append(("test-cs", "lid_attribution", self.lid_attribution))
        return out


def _decode_set(model: Seq2SeqModel, utts: Sequence[Utterance],
                prompt: list[int], chunk: int = 64) -> dict[str, list[int]]:
    hyps: dict[str, list[int]] = {}
    ordered = sorted(utts, key=lambda u: u.frames.shape[0])
    for start in range(0, len(ordered), chunk):
        group = ordered[start:start + chunk]
        t_max = max(u.frames.shape[0] for u in group)
        feat = group[0].frames.shape[1]
        frames = np.zeros((len(group), t_max, feat))
        mask = np.zeros((len(group), t_max), dtype=bool)
        for i, utt in enumerate(group):
            t = utt.frames.shape[0]
            frames[i, :t] = utt.frames
            mask[i, :t] = True
        decoded = model.greedy_decode(frames, mask, prompt)
        for utt, hyp in zip(group, decoded):
            hyps[utt.uid] = hyp
    return hyps


def token_accuracy(model: Seq2SeqModel, utts: Sequence[Utterance],
                   bilingual_prompt: bool) -> float:
    """1 - (total edit distance / total reference tokens), floored at 0."""
    if not utts:
        raise DataError("cannot compute accuracy on an empty set")
    groups: dict[tuple, list[Utterance]] = {}
    for utt in utts:
        if bilingual_prompt:
            prompt = tuple(build_prompt(model.vocab))
        else:
            if utt.lang is None:
                raise DataError("monolingual prompt requires a monolingual utterance")
            prompt = tuple(build_prompt(model.vocab, utt.lang))
        groups.setdefault(prompt, []).append(utt)
    total_err = 0
    total_ref = 0
    for prompt, group in sorted(groups.items()):
        hyps = _decode_set(model, group, list(prompt))
        for utt in group:
            total_err += edit_distance(utt.words, hyps[utt.uid]).distance
            total_ref += len(utt.words)
    return max(0.0, 1.0 - total_err / total_ref)


def lid_attribution(model: Seq2SeqModel, utts: Sequence[Utterance],
                    selection: HeadSelection, batch_size: int = 32,
                    use_adapters: bool = True) -> float:
    """Fraction of word tokens whose mean selected-head attention puts its
    argmax over the two LID columns on the token's true language."""
    selection.require_nonempty()
    batches = make_batches(utts, model.vocab, batch_size)
    correct = 0
    total = 0
    with no_grad():
        for batch in batches:
            out = model.forward(batch.frames, batch.tokens, batch.frame_mask,
                                enc_adapters=use_adapters, dec_adapters=use_adapters)
            for i, seq in enumerate(batch.sequences):
                n = batch.lengths[i]
                acc = np.zeros((n, n))
                for layer, head in selection.selected:
                    acc += out.attention[layer].data[i, head, :n, :n]
                acc /= len(selection.selected)
                zh_col, en_col = seq.lid_positions
                for pos in seq.word_positions:
                    predicted = "A" if acc[pos, zh_col] >= acc[pos, en_col] else "B"
                    correct += int(predicted == seq.lang_tags[pos])
                    total += 1
    if total == 0:
        raise DataError("no word tokens to attribute")
    return correct / total


def evaluate_model(model: Seq2SeqModel, test_sets: Mapping[str, Sequence[Utterance]],
                   selection: HeadSelection | None = None,
                   decode_fn: Callable | None = None) -> EvalReport:
    """Greedy-decode the three test sets and report error rates, plus the
    LID-attribution accuracy on the code-switched set when heads are given."""
    for name, utts in test_sets.items():
        if not utts:
            raise DataError(f"test set {name!r} is empty")
    refs: dict[str, list[int]] = {}
    hyps: dict[str, list[int]] = {}
    kinds: dict[str, str] = {}
    prompt = build_prompt(model.vocab)
    for name in sorted(test_sets):
        utts = test_sets[name]
        if decode_fn is not None:
            decoded = decode_fn(model, utts)
            set_hyps = {u.uid: h for u, h in zip(utts, decoded)}
        else:
            set_hyps = _decode_set(model, utts, prompt)
        for utt in utts:
            refs[utt.uid] = utt.words
            hyps[utt.uid] = set_hyps[utt.uid]
            kinds[utt.uid] = utt.kind
    mer = mixed_error_rate(refs, hyps, kinds)
    attribution = None
    if selection is not None:
        cs_utts = [u for utts in test_sets.values() for u in utts if u.kind == KIND_CS]
        if cs_utts:
            attribution = lid_attribution(model, cs_utts, selection)
    return EvalReport(mer=mer, lid_attribution=attribution)
