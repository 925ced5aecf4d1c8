"""Deterministic training/evaluation harness with persistent artifacts.

One run = one key-value config file describing the model, optimizer, data
source, and schedule.  The loop is single-threaded and fully seeded: the
same config and seed reproduce bitwise-identical metrics files.  Wall-clock
fields would break that, so the clock is injectable: pass ``clock=`` to
``train`` or set the MERIT_FIXED_CLOCK environment variable to freeze it.

Artifacts:
- metrics: JSONL, one record per logged step (schema in MetricsRecord); a
  run whose loss goes non-finite stops early and appends a divergence
  marker record instead of raising.
- checkpoint: versioned binary container (magic ``MERITCKPT``) holding the
  model config, weights, and optimizer state; round-trips bitwise.
- comparison: long-format CSV ``step,run_id,val_loss,peak_mal,
  clip_fraction,bound_fraction`` aligned across runs that share model,
  data, and seed.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from merit.diagnostics import TriggerStats, trigger_stats
from merit.model import ModelConfig, cross_entropy, forward, init_params, loss_and_grads
from merit.optim import (
    OPTIMIZERS,
    HyperParams,
    OptimState,
    Schedule,
    apply_updates,
    cosine_lr,
    global_grad_clip,
)
from merit.tensor import SeededRng, Tensor


class ConfigError(ValueError):
    """Config file failed to parse or validate; message is line-anchored."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not match the container format."""


class MetricsFormatError(ValueError):
    """A metrics JSONL line failed to parse; message cites the line number."""


@dataclass
class SyntheticSpec:
    """Order-k Markov byte stream standing in for a text corpus."""

    seed: int = 0
    length: int = 65536
    order: int = 1
    concentration: float = 3.0

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"synthetic length must be positive, got {self.length}")
        if self.order < 1:
            raise ValueError(f"synthetic order must be >= 1, got {self.order}")
        if self.concentration < 0:
            raise ValueError(
                f"synthetic concentration must be >= 0, got {self.concentration}"
            )


@dataclass
class TrainConfig:
    """Everything one training run needs; mirrors the config file schema."""

    model: ModelConfig
    optimizer: str = "merit"
    hp: HyperParams = field(default_factory=HyperParams)
    sched: Schedule = field(default_factory=lambda: Schedule(total_steps=100))
    batch_size_sequences: int = 8
    grad_accum_steps: int = 1
    seed: int = 0
    eval_interval: int = 50
    log_interval: int = 10
    eval_batches: int = 4
    corpus_path: str | None = None
    synthetic: SyntheticSpec | None = None
    out_dir: str = "runs/run"
    exempt_vectors: bool = False
    run_id: str | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(
                f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}"
            )
        for name in ("batch_size_sequences", "grad_accum_steps", "eval_interval",
                     "log_interval", "eval_batches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.synthetic is None and self.corpus_path is None:
            self.synthetic = SyntheticSpec(seed=self.seed)

    @property
    def effective_batch(self) -> int:
        return self.batch_size_sequences * self.grad_accum_steps


@dataclass
class MetricsRecord:
    """One logged training step; serialized as a single JSON line."""

    step: int
    lr: float
    train_loss: float
    val_loss: float | None
    per_layer_max_logit: list[float]
    mean_attention_entropy: float
    clip_fraction: float
    bound_fraction: float
    global_grad_norm: float
    wall_ms: int
    tokens_per_step: int

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "lr": self.lr,
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "per_layer_max_logit": self.per_layer_max_logit,
                "mean_attention_entropy": self.mean_attention_entropy,
                "clip_fraction": self.clip_fraction,
                "bound_fraction": self.bound_fraction,
                "global_grad_norm": self.global_grad_norm,
                "wall_ms": self.wall_ms,
                "tokens_per_step": self.tokens_per_step,
            },
            separators=(",", ":"),
        )


@dataclass
class Checkpoint:
    """Model + optimizer snapshot; round-trips through save/load bitwise."""

    cfg: ModelConfig
    step: int
    optimizer: str
    params: dict[str, Tensor]
    opt_m: dict[str, Tensor]
    opt_v: dict[str, Tensor]
    opt_t: int


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics_path: Path
    checkpoint_path: Path
    diverged: bool
    final_train_loss: float | None
    final_val_loss: float | None


# --------------------------------------------------------------------------
# config file parsing


_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}

_CONFIG_KEYS = {
    "optimizer": str,
    "seed": int,
    "out_dir": str,
    "run_id": str,
    "total_steps": int,
    "warmup_ratio": float,
    "floor_fraction": float,
    "peak_lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "weight_decay": float,
    "clip_threshold": float,
    "global_grad_clip": float,
    "n_layer": int,
    "n_head": int,
    "d_model": int,
    "context_len": int,
    "vocab_size": int,
    "qk_norm": bool,
    "dtype": str,
    "batch_size_sequences": int,
    "grad_accum_steps": int,
    "eval_interval": int,
    "log_interval": int,
    "eval_batches": int,
    "corpus_path": str,
    "synthetic_seed": int,
    "synthetic_length": int,
    "synthetic_order": int,
    "synthetic_concentration": float,
    "exempt_vectors": bool,
}

_MODEL_DEFAULTS = dict(n_layer=2, n_head=2, d_model=64, context_len=32, vocab_size=256)


def _coerce(key: str, raw: str, lineno: int, path: str):
    kind = _CONFIG_KEYS[key]
    try:
        if kind is bool:
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"expected true/false, got {raw!r}")
            return _BOOL_WORDS[word]
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc


def parse_config_text(text: str, path: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines into a TrainConfig.

    Blank lines and ``#`` comments are ignored; unknown keys, duplicate
    keys, and out-of-range values raise ConfigError citing the line.
    """
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, lineno, path)

    def take(key, default):
        return values.pop(key, default)

    try:
        model = ModelConfig(
            n_layer=take("n_layer", _MODEL_DEFAULTS["n_layer"]),
            n_head=take("n_head", _MODEL_DEFAULTS["n_head"]),
            d_model=take("d_model", _MODEL_DEFAULTS["d_model"]),
            context_len=take("context_len", _MODEL_DEFAULTS["context_len"]),
            vocab_size=take("vocab_size", _MODEL_DEFAULTS["vocab_size"]),
            qk_norm=take("qk_norm", False),
            dtype=take("dtype", "f64"),
        )
        hp = HyperParams(
            peak_lr=take("peak_lr", 1e-3),
            beta1=take("beta1", 0.9),
            beta2=take("beta2", 0.95),
            eps=take("eps", 1e-8),
            weight_decay=take("weight_decay", 0.1),
            clip_threshold=take("clip_threshold", 1.0),
            global_grad_clip=take("global_grad_clip", 1.0),
        )
        sched = Schedule(
            total_steps=take("total_steps", 100),
            warmup_ratio=take("warmup_ratio", 0.02),
            floor_fraction=take("floor_fraction", 0.1),
        )
        seed = take("seed", 0)
        synthetic = None
        if any(k.startswith("synthetic_") for k in values) or "corpus_path" not in values:
            synthetic = SyntheticSpec(
                seed=take("synthetic_seed", seed),
                length=take("synthetic_length", 65536),
                order=take("synthetic_order", 1),
                concentration=take("synthetic_concentration", 3.0),
            )
        cfg = TrainConfig(
            model=model,
            optimizer=take("optimizer", "merit"),
            hp=hp,
            sched=sched,
            batch_size_sequences=take("batch_size_sequences", 8),
            grad_accum_steps=take("grad_accum_steps", 1),
            seed=seed,
            eval_interval=take("eval_interval", 50),
            log_interval=take("log_interval", 10),
            eval_batches=take("eval_batches", 4),
            corpus_path=take("corpus_path", None),
            synthetic=synthetic,
            out_dir=take("out_dir", "runs/run"),
            exempt_vectors=take("exempt_vectors", False),
            run_id=take("run_id", None),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def parse_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


# --------------------------------------------------------------------------
# data


def load_corpus(path) -> tuple[Tensor, Tensor]:
    """Read a file as raw bytes -> token ids 0..255; last 5% is validation."""
    data = Path(path).read_bytes()
    if len(data) == 0:
        raise OSError(f"corpus file is empty: {path}")
    tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    n_val = max(1, len(tokens) // 20)
    return tokens[:-n_val], tokens[-n_val:]


def synth_corpus(
    seed: int,
    length: int,
    order: int = 1,
    concentration: float = 3.0,
    vocab: int = 256,
) -> Tensor:
    """Deterministic order-k Markov byte stream with entropy below ln(vocab).

    Each context's next-token distribution is a softmax of Normal(0, 1)
    logits scaled by ``concentration`` and derived purely from (seed, order,
    context), so streams are reproducible and contexts are consistent no
    matter the walk order.  concentration=0 degenerates to uniform bytes
    (entropy exactly ln(vocab)); larger values make the stream more
    predictable and hence learnable.
    """
    spec = SyntheticSpec(seed=seed, length=length, order=order, concentration=concentration)
    walk = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0xA17])))
    # context before uniforms so a longer stream extends a shorter one
    context = tuple(int(t) for t in walk.integers(0, vocab, spec.order))
    u = walk.random(spec.length)
    out = np.empty(spec.length, dtype=np.int64)
    cumdist_cache: dict[tuple, np.ndarray] = {}

    def cumdist(ctx: tuple) -> np.ndarray:
        row = cumdist_cache.get(ctx)
        if row is None:
            g = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([spec.seed, spec.order, *ctx]))
            )
            logits = g.standard_normal(vocab) * spec.concentration
            e = np.exp(logits - logits.max())
            row = np.cumsum(e / e.sum())
            cumdist_cache[ctx] = row
        return row

    for i in range(spec.length):
        nxt = int(np.searchsorted(cumdist(context), u[i], side="right"))
        nxt = min(nxt, vocab - 1)
        out[i] = nxt
        context = context[1:] + (nxt,) if spec.order > 1 else (nxt,)
    return out


def next_batch(
    split: Tensor,
    step: int,
    *,
    seed: int,
    batch_size: int,
    context_len: int,
    tag: str = "train",
) -> tuple[Tensor, Tensor]:
    """Deterministic batch: windows chosen purely by (seed, tag, step)."""
    split = np.asarray(split)
    if split.size < context_len + 1:
        raise ValueError(
            f"split of {split.size} tokens is shorter than context_len+1 = {context_len + 1}"
        )
    tag_word = int.from_bytes(tag.encode("utf-8"), "little") % (2**63)
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag_word, step])))
    starts = g.integers(0, split.size - context_len, size=batch_size)
    windows = np.stack([split[s : s + context_len + 1] for s in starts])
    return windows[:, :-1], windows[:, 1:]


def _load_run_data(cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    if cfg.corpus_path is not None:
        return load_corpus(cfg.corpus_path)
    spec = cfg.synthetic
    stream = synth_corpus(
        spec.seed, spec.length, spec.order, spec.concentration, cfg.model.vocab_size
    )
    n_val = max(1, len(stream) // 20)
    return stream[:-n_val], stream[-n_val:]


# --------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"MERITCKPT"
CKPT_VERSION = 1

_WIDTH_TO_DTYPE = {8: np.dtype("<f8"), 4: np.dtype("<f4")}


def _write_tensor(f, name: str, arr: Tensor) -> None:
    nb = name.encode("utf-8")
    width = arr.dtype.itemsize
    if width not in _WIDTH_TO_DTYPE:
        raise CheckpointFormatError(f"unsupported element width {width} for {name}")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<BB", width, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_WIDTH_TO_DTYPE[width]).tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError("truncated checkpoint")
    return buf


def _read_tensor(f) -> tuple[str, Tensor]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    width, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if width not in _WIDTH_TO_DTYPE:
        raise CheckpointFormatError(f"unsupported element width {width} for {name}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    raw = _read_exact(f, count * width)
    arr = np.frombuffer(raw, dtype=_WIDTH_TO_DTYPE[width]).reshape(shape)
    return name, arr.astype(arr.dtype.newbyteorder("="), copy=True)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {
            "model": {
                "n_layer": ckpt.cfg.n_layer,
                "n_head": ckpt.cfg.n_head,
                "d_model": ckpt.cfg.d_model,
                "context_len": ckpt.cfg.context_len,
                "vocab_size": ckpt.cfg.vocab_size,
                "qk_norm": ckpt.cfg.qk_norm,
                "dtype": ckpt.cfg.dtype,
            },
            "step": ckpt.step,
            "optimizer": ckpt.optimizer,
            "opt_t": ckpt.opt_t,
        },
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for group in (ckpt.params, ckpt.opt_m, ckpt.opt_v):
            f.write(struct.pack("<I", len(group)))
        for prefix, group in (("p", ckpt.params), ("m", ckpt.opt_m), ("v", ckpt.opt_v)):
            for name, arr in group.items():
                _write_tensor(f, f"{prefix}:{name}", arr)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointFormatError(f"not a checkpoint file (bad magic): {path}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            header = json.loads(_read_exact(f, hlen).decode("utf-8"))
            cfg = ModelConfig(**header["model"])
            step = int(header["step"])
            optimizer = str(header["optimizer"])
            opt_t = int(header["opt_t"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from exc
        counts = struct.unpack("<3I", _read_exact(f, 12))
        groups: dict[str, dict[str, Tensor]] = {"p": {}, "m": {}, "v": {}}
        for prefix, count in zip(("p", "m", "v"), counts):
            for _ in range(count):
                name, arr = _read_tensor(f)
                got_prefix, _, bare = name.partition(":")
                if got_prefix != prefix or not bare:
                    raise CheckpointFormatError(f"unexpected tensor record {name!r}")
                groups[prefix][bare] = arr
        if f.read(1):
            raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return Checkpoint(
        cfg=cfg,
        step=step,
        optimizer=optimizer,
        params=groups["p"],
        opt_m=groups["m"],
        opt_v=groups["v"],
        opt_t=opt_t,
    )


# --------------------------------------------------------------------------
# metrics


def parse_metrics(path) -> list[dict]:
    """Read a metrics JSONL file; errors cite the 1-indexed line number."""
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise MetricsFormatError(f"{path}: line {lineno}: {exc.msg}") from exc
    return records


# --------------------------------------------------------------------------
# training and evaluation


def _resolve_clock(clock):
    if clock is not None:
        return clock
    if os.environ.get("MERIT_FIXED_CLOCK"):
        return lambda: 0.0
    return time.monotonic


def eval_loss(
    model_cfg: ModelConfig,
    params: dict[str, Tensor],
    split: Tensor,
    batches: int = 4,
    batch_size: int = 8,
) -> float:
    """Mean cross-entropy on a fixed, deterministic set of windows."""
    losses = []
    for b in range(batches):
        tokens, targets = next_batch(
            split, b, seed=0, batch_size=batch_size,
            context_len=model_cfg.context_len, tag="eval",
        )
        # params may be mid-divergence; a non-finite result is the signal
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            logits, _, _ = forward(model_cfg, params, tokens)
            losses.append(cross_entropy(logits, targets))
    return float(np.mean(losses))


def evaluate(ckpt: Checkpoint, split: Tensor, batches: int = 4, batch_size: int = 8) -> float:
    return eval_loss(ckpt.cfg, ckpt.params, split, batches, batch_size)


def train(cfg: TrainConfig, clock=None) -> TrainResult:
    """Run the full training loop described by cfg.

    Per step: draw the effective batch deterministically from (seed, step),
    average gradients over grad_accum_steps micro-batches, clip the global
    gradient norm, apply the configured optimizer at the cosine-schedule lr,
    and log metrics at the configured intervals.  A non-finite loss stops
    the run and appends a divergence marker to the metrics file.  Returns
    the final checkpoint (also written to out_dir) and artifact paths.
    """
    clock = _resolve_clock(clock)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint.bin"

    train_split, val_split = _load_run_data(cfg)
    root = SeededRng(cfg.seed)
    params = init_params(cfg.model, root.spawn("init"))
    states = {name: OptimState.zeros_like(w) for name, w in params.items()}
    mcfg = cfg.model
    B, K, T = cfg.batch_size_sequences, cfg.grad_accum_steps, mcfg.context_len
    tokens_per_step = B * K * T

    start = clock()
    diverged = False
    final_train_loss: float | None = None
    final_val_loss: float | None = None
    step_done = 0

    with open(metrics_path, "w", encoding="utf-8") as mf:
        for step in range(1, cfg.sched.total_steps + 1):
            lr = cosine_lr(step, cfg.sched, cfg.hp.peak_lr)
            all_tokens, all_targets = next_batch(
                train_split, step, seed=cfg.seed, batch_size=B * K,
                context_len=T, tag="train",
            )
            grads_acc = None
            loss_acc = 0.0
            layer_mal = [-math.inf] * mcfg.n_layer
            entropy_acc = 0.0
            for k in range(K):
                sl = slice(k * B, (k + 1) * B)
                # divergence is an expected, flagged outcome; keep numpy quiet
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    loss, grads, probes = loss_and_grads(
                        mcfg, params, all_tokens[sl], all_targets[sl]
                    )
                if not math.isfinite(loss):
                    diverged = True
                    break
                loss_acc += loss
                entropy_acc += sum(p.attention_entropy for p in probes) / mcfg.n_layer
                layer_mal = [max(a, p.max_logit) for a, p in zip(layer_mal, probes)]
                if grads_acc is None:
                    grads_acc = grads
                else:
                    for name in grads_acc:
                        grads_acc[name] += grads[name]
            if diverged:
                mf.write(json.dumps({"step": step, "diverged": True},
                                    separators=(",", ":")) + "\n")
                break
            train_loss = loss_acc / K
            final_train_loss = train_loss
            grads = {name: g / K for name, g in grads_acc.items()}
            grads, global_norm = global_grad_clip(grads, cfg.hp.global_grad_clip)
            params, diags = apply_updates(
                cfg.optimizer, params, grads, states, cfg.hp, lr,
                exempt_vectors=cfg.exempt_vectors,
            )
            step_done = step

            want_log = step % cfg.log_interval == 0 or step == cfg.sched.total_steps
            want_eval = step % cfg.eval_interval == 0 or step == cfg.sched.total_steps
            if want_log or want_eval:
                val = None
                if want_eval:
                    val = eval_loss(mcfg, params, val_split,
                                    cfg.eval_batches, cfg.batch_size_sequences)
                    final_val_loss = val
                if diags is not None:
                    stats = trigger_stats(diags, cfg.hp.clip_threshold)
                else:
                    stats = TriggerStats(clip_fraction=0.0, bound_fraction=0.0)
                record = MetricsRecord(
                    step=step,
                    lr=lr,
                    train_loss=train_loss,
                    val_loss=val,
                    per_layer_max_logit=layer_mal,
                    mean_attention_entropy=entropy_acc / K,
                    clip_fraction=stats.clip_fraction,
                    bound_fraction=stats.bound_fraction,
                    global_grad_norm=global_norm,
                    wall_ms=int((clock() - start) * 1000),
                    tokens_per_step=tokens_per_step,
                )
                mf.write(record.to_json_line() + "\n")

    ckpt = Checkpoint(
        cfg=mcfg,
        step=step_done,
        optimizer=cfg.optimizer,
        params=params,
        opt_m={n: s.m for n, s in states.items()},
        opt_v={n: s.v for n, s in states.items()},
        opt_t=next(iter(states.values())).t if states else 1,
    )
    save_checkpoint(ckpt, ckpt_path)
    return TrainResult(
        checkpoint=ckpt,
        metrics_path=metrics_path,
        checkpoint_path=ckpt_path,
        diverged=diverged,
        final_train_loss=final_train_loss,
        final_val_loss=final_val_loss,
    )


def compare(cfgs: list[TrainConfig], out_csv, clock=None) -> tuple[list[dict], Path]:
    """Train each config on identical data/seed and tabulate eval rows.

    Configs must agree on model shape, seed, data source, and step count;
    they may differ in optimizer and hyperparameters.  Output rows (and the
    CSV written to out_csv) carry one line per evaluation step per run with
    columns step,run_id,val_loss,peak_mal,clip_fraction,bound_fraction.
    A diverged run contributes the rows it logged before stopping.
    """
    if not cfgs:
        raise ConfigError("compare needs at least one config")
    base = cfgs[0]
    for other in cfgs[1:]:
        same = (
            other.model == base.model
            and other.seed == base.seed
            and other.corpus_path == base.corpus_path
            and other.synthetic == base.synthetic
            and other.sched.total_steps == base.sched.total_steps
            and other.batch_size_sequences == base.batch_size_sequences
            and other.grad_accum_steps == base.grad_accum_steps
        )
        if not same:
            raise ConfigError(
                "compare configs must share model, seed, data, and step budget; "
                "only optimizer and hyperparameters may differ"
            )
    run_ids: list[str] = []
    for cfg in cfgs:
        rid = cfg.run_id or cfg.optimizer
        n = sum(1 for r in run_ids if r == rid or r.startswith(rid + "#"))
        run_ids.append(rid if n == 0 else f"{rid}#{n + 1}")

    rows: list[dict] = []
    for rid, cfg in zip(run_ids, cfgs):
        sub_dir = Path(base.out_dir) / rid
        sub_cfg = TrainConfig(
            model=cfg.model, optimizer=cfg.optimizer, hp=cfg.hp, sched=cfg.sched,
            batch_size_sequences=cfg.batch_size_sequences,
            grad_accum_steps=cfg.grad_accum_steps, seed=cfg.seed,
            eval_interval=cfg.eval_interval, log_interval=cfg.log_interval,
            eval_batches=cfg.eval_batches, corpus_path=cfg.corpus_path,
            synthetic=cfg.synthetic, out_dir=str(sub_dir),
            exempt_vectors=cfg.exempt_vectors, run_id=rid,
        )
        result = train(sub_cfg, clock=clock)
        for rec in parse_metrics(result.metrics_path):
            if rec.get("diverged"):
                continue
            if rec.get("val_loss") is None:
                continue
            rows.append(
                {
                    "step": rec["step"],
                    "run_id": rid,
                    "val_loss": rec["val_loss"],
                    "peak_mal": max(rec["per_layer_max_logit"]),
                    "clip_fraction": rec["clip_fraction"],
                    "bound_fraction": rec["bound_fraction"],
                }
            )
    rows.sort(key=lambda r: (r["step"], run_ids.index(r["run_id"])))
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", encoding="utf-8", newline="") as f:
        f.write("step,run_id,val_loss,peak_mal,clip_fraction,bound_fraction\n")
        for r in rows:
            f.write(
                f"{r['step']},{r['run_id']},{r['val_loss']!r},{r['peak_mal']!r},"
                f"{r['clip_fraction']!r},{r['bound_fraction']!r}\n"
            )
    return rows, out_csv
