"""Losses, training configuration and the joint training loop.

One training step runs the full differentiable pipeline

    audio -> DWT -> embed -> IDWT -> distortion -> DWT -> decode

and takes one Adam step on encoder and decoder for the weighted composite
loss, followed by one Adam step on the discriminator with the watermarked
coefficients treated as constant data.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import engine as E
from .channel import ENHANCED_OPS, DistortionConfig, dar, enhanced_sample, load_ir_dir, synthetic_ir_set
from .engine import Adam, Tensor
from .nets import Architecture, ModelBundle, load_bundle, restore_optimizer, save_bundle
from .signal import WavFormatError, load_wav, segment
from .wavelet import analysis, dwt_op, idwt_op, synthesis

log = logging.getLogger(__name__)

ADV_SIGNS = ("literal", "flipped")


class TrainingError(RuntimeError):
    """Raised when training cannot continue (non-finite loss, no usable data)."""


class ConfigError(ValueError):
    """Raised for malformed configuration files; carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# losses ------------------------------------------------------------------------


def _check_lengths(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def encoder_loss(a_ac: Tensor, a_ac_w: Tensor) -> Tensor:
    """Mean squared coefficient change: (2/N) * sum over the N/2 coefficients."""
    _check_lengths(a_ac, a_ac_w, "encoder_loss")
    return E.mse(a_ac_w, a_ac)


def _one_minus(t: Tensor) -> Tensor:
    return E.add_scalar(E.mul_scalar(t, -1.0), 1.0)


def generator_loss(d_fake: Tensor, adv_sign: str = "literal") -> Tensor:
    """Encoder-side adversarial term ``L_d`` (see ``adversarial_losses``)."""
    if adv_sign == "literal":
        return E.mean(E.log(_one_minus(d_fake)))
    if adv_sign == "flipped":
        return E.mean(E.log(d_fake))
    raise ValueError(f"adv_sign must be one of {ADV_SIGNS}")


def discriminator_loss(d_real: Tensor, d_fake: Tensor, adv_sign: str = "literal") -> Tensor:
    """Discriminator objective ``L_D`` (see ``adversarial_losses``)."""
    if adv_sign == "literal":
        return E.add(E.mean(E.log(_one_minus(d_real))), E.mean(E.log(d_fake)))
    if adv_sign == "flipped":
        return E.add(E.mean(E.log(d_real)), E.mean(E.log(_one_minus(d_fake))))
    raise ValueError(f"adv_sign must be one of {ADV_SIGNS}")


def adversarial_losses(d_real: Tensor, d_fake: Tensor, adv_sign: str = "literal") -> tuple[Tensor, Tensor]:
    """Return ``(L_d, L_D)`` for clamped discriminator outputs; both are minimized.

    literal:  L_d = log(1 - D(fake)),  L_D = log(1 - D(real)) + log(D(fake))
    flipped:  the two outcomes swap roles in both terms,
              L_d = log(D(fake)),      L_D = log(D(real)) + log(1 - D(fake))

    Under the literal form the discriminator learns to score clean input high
    and watermarked input low; the encoder term then rewards pushing its output
    towards the clean side. Batched inputs are averaged.
    """
    return generator_loss(d_fake, adv_sign), discriminator_loss(d_real, d_fake, adv_sign)


def watermark_loss(w, w_soft: Tensor) -> Tensor:
    """Mean squared error between the +-1 bits and the soft decoded values."""
    target = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=w_soft.dtype)
    if target.size != w_soft.data.size:
        raise ValueError(f"watermark_loss: length mismatch {target.shape} vs {w_soft.shape}")
    return E.mse(w_soft, Tensor(target.reshape(w_soft.shape).astype(w_soft.dtype)))


def total_loss(l_e: Tensor, l_d: Tensor, l_w: Tensor, config: "TrainingConfig") -> Tensor:
    parts = []
    for weight, term in ((config.lambda_e, l_e), (config.lambda_d, l_d), (config.lambda_w, l_w)):
        if weight != 0:
            parts.append(E.mul_scalar(term, weight))
    if not parts:
        return E.mul_scalar(l_e, 0.0)
    out = parts[0]
    for p in parts[1:]:
        out = E.add(out, p)
    return out


# configuration -----------------------------------------------------------------


@dataclass
class TrainingConfig:
    """All knobs of a training run. ``load_config`` reads them from ``key = value`` text."""

    lambda_e: float = 150.0
    lambda_d: float = 0.01
    lambda_w: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    steps_per_epoch: int = 0  # 0 -> one pass over the training segments
    segment_length: int = 16384
    watermark_length: int = 16
    sample_rate: int = 44100
    channels: int = 16
    kernel: int = 9
    skip: bool = True
    chip_key: int | None = 7
    decoder_warmup: int = 100
    adv_sign: str = "literal"
    enhanced: bool = False
    reverb: bool = True
    bandpass: bool = True
    noise: bool = True
    highpass: float = 1000.0
    lowpass: float = 4000.0
    noise_snr_min: float = 20.0
    noise_snr_max: float = 25.0
    ir_dir: str | None = None
    ir_count: int = 16
    ir_tail_level: float = 0.1
    rt60_min: float = 0.05
    rt60_max: float = 0.15
    validation_fraction: float = 0.05
    seed: int = 0
    checkpoint_interval: int = 1  # epochs between periodic checkpoints; 0 disables

    def __post_init__(self):
        for name in ("lambda_e", "lambda_d", "lambda_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.steps_per_epoch < 0 or self.decoder_warmup < 0:
            raise ValueError("epochs, steps_per_epoch and decoder_warmup must be >= 0")
        if self.segment_length % 2:
            raise ValueError("segment_length must be even")
        if not 1 <= self.watermark_length <= self.segment_length // 2:
            raise ValueError("watermark_length must be in [1, segment_length/2]")
        if self.adv_sign not in ADV_SIGNS:
            raise ValueError(f"adv_sign must be one of {ADV_SIGNS}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")

    def architecture(self) -> Architecture:
        return Architecture(channels=self.channels, kernel=self.kernel, skip=self.skip)

    def distortion(self) -> DistortionConfig:
        irs = None
        if self.reverb:
            if self.ir_dir:
                irs = load_ir_dir(self.ir_dir, seed=self.seed)
            else:
                irs = synthetic_ir_set(
                    count=self.ir_count,
                    seed=self.seed,
                    rt60_range=(self.rt60_min, self.rt60_max),
                    sample_rate=self.sample_rate,
                    tail_level=self.ir_tail_level,
                )
        return DistortionConfig(
            highpass=self.highpass,
            lowpass=self.lowpass,
            noise_snr_range=(self.noise_snr_min, self.noise_snr_max),
            ir_set=irs,
            enhanced_ops=ENHANCED_OPS if self.enhanced else (),
            sample_rate=self.sample_rate,
            reverb=self.reverb,
            bandpass=self.bandpass,
            noise=self.noise,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_value(raw: str, kind: str):
    text = raw.strip()
    optional = "None" in kind
    if optional and text.lower() in ("none", "null", ""):
        return None
    if kind.startswith("bool"):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def parse_config(text: str, base: TrainingConfig | None = None) -> TrainingConfig:
    """Parse ``key = value`` lines (``#`` comments, blank lines allowed)."""
    types = {f.name: str(f.type) for f in fields(TrainingConfig)}
    values = dataclasses.asdict(base) if base else {}
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
    try:
        return TrainingConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> TrainingConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(config: TrainingConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


# data ----------------------------------------------------------------------------


def load_corpus(corpus_dir, segment_length: int) -> list[np.ndarray]:
    """Segment every readable WAV in ``corpus_dir`` (sorted by name)."""
    root = Path(corpus_dir)
    if not root.is_dir():
        raise TrainingError(f"corpus directory {root} does not exist")
    files = sorted(root.glob("*.wav"))
    if not files:
        raise TrainingError(f"corpus {root} has no .wav files")
    segments = []
    for f in files:
        try:
            sig = load_wav(f)
        except WavFormatError as exc:
            log.warning("skipping %s: %s", f, exc)
            continue
        segments.extend(s.samples for s in segment(sig, segment_length))
    if not segments:
        raise TrainingError(f"no readable audio in {root}")
    return segments


def split_segments(segments: list[np.ndarray], fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle with ``seed`` and hold out ``ceil(fraction * n)`` segments (at least one)."""
    if len(segments) < 2:
        raise TrainingError("need at least two segments to hold one out for validation")
    order = np.random.default_rng(seed).permutation(len(segments))
    n_val = max(1, math.ceil(fraction * len(segments)))
    data = np.stack(segments)
    return data[order[n_val:]], data[order[:n_val]]


# training ------------------------------------------------------------------------


@dataclass
class TrainingRecord:
    steps: list[dict] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)

    def add_step(self, entry: dict) -> None:
        self.steps.append(entry)

    def add_evaluation(self, entry: dict) -> None:
        self.evaluations.append(entry)

    @property
    def final(self) -> dict | None:
        return self.evaluations[-1] if self.evaluations else None


@dataclass
class TrainerState:
    """Mutable state of a run: model, optimizers, RNG and counters."""

    bundle: ModelBundle
    enc_opt: Adam
    dec_opt: Adam
    dis_opt: Adam
    rng: np.random.Generator
    distortion: DistortionConfig
    step: int = 0
    epoch: int = 0
    best_score: tuple | None = None

    @classmethod
    def fresh(cls, config: TrainingConfig) -> "TrainerState":
        bundle = ModelBundle.create(
            config.architecture(),
            config.watermark_length,
            config.segment_length,
            seed=config.seed,
            sample_rate=config.sample_rate,
            chip_key=config.chip_key,
        )
        lr = config.learning_rate
        return cls(
            bundle,
            Adam(bundle.encoder.parameters(), lr),
            Adam(bundle.decoder.parameters(), lr),
            Adam(bundle.discriminator.parameters(), lr),
            np.random.default_rng(config.seed),
            config.distortion(),
        )

    def optimizers(self) -> dict[str, Adam]:
        return {"encoder": self.enc_opt, "decoder": self.dec_opt, "discriminator": self.dis_opt}


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def forward_pipeline(bundle: ModelBundle, x: np.ndarray, bits: np.ndarray, distort, strength: float = 1.0):
    """Differentiable forward pass. ``distort`` maps the watermarked audio tensor
    to the received tensor. Returns (a_ac, a_ac_w, received audio, soft bits)."""
    a, d = analysis(x[:, None, :].astype(bundle.dtype))
    a_t = Tensor(a)
    a_w = bundle.embed(a_t, bits, strength)
    x_w = idwt_op(a_w, Tensor(d))
    x_r = distort(x_w)
    a_r, _ = dwt_op(x_r)
    return a_t, a_w, x_r, bundle.decode(a_r)


def train_step(state: TrainerState, batch: np.ndarray, config: TrainingConfig) -> dict:
    """One En+De Adam step on the composite loss, then one discriminator step."""
    bundle, rng = state.bundle, state.rng
    bits = rng.choice(np.array([-1.0, 1.0]), size=(batch.shape[0], config.watermark_length))
    tag = "dar"

    def distort(x_w):
        nonlocal tag
        if config.enhanced:
            out, tag = enhanced_sample(x_w, state.distortion, rng)
            return out
        return dar(x_w, state.distortion, rng)

    dis_params = bundle.discriminator.parameters()
    _set_requires_grad(dis_params, False)
    try:
        a_t, a_w, _, w_soft = forward_pipeline(bundle, batch, bits, distort)
        l_e = encoder_loss(a_t, a_w)
        l_d = generator_loss(bundle.discriminate(a_w), config.adv_sign)
        l_w = watermark_loss(bits, w_soft)
        loss = total_loss(l_e, l_d, l_w, config)
        if not np.isfinite(loss.item()):
            raise TrainingError(
                f"non-finite loss at step {state.step}: Le={l_e.item()} Ld={l_d.item()} Lw={l_w.item()}"
            )
        state.enc_opt.zero_grad()
        state.dec_opt.zero_grad()
        loss.backward()
    finally:
        _set_requires_grad(dis_params, True)
    if state.step >= config.decoder_warmup:
        state.enc_opt.step()
    state.dec_opt.step()

    # discriminator step on constant data
    enc_dec = bundle.encoder.parameters() + bundle.decoder.parameters()
    _set_requires_grad(enc_dec, False)
    try:
        d_real = bundle.discriminate(a_t)
        d_fake = bundle.discriminate(Tensor(a_w.data))
        l_D = discriminator_loss(d_real, d_fake, config.adv_sign)
        if not np.isfinite(l_D.item()):
            raise TrainingError(f"non-finite discriminator loss at step {state.step}")
        state.dis_opt.zero_grad()
        l_D.backward()
        state.dis_opt.step()
    finally:
        _set_requires_grad(enc_dec, True)

    entry = {
        "step": state.step,
        "Le": l_e.item(),
        "Ld": l_d.item(),
        "Lw": l_w.item(),
        "L": loss.item(),
        "LD": l_D.item(),
        "distortion": tag,
    }
    state.step += 1
    return entry


def evaluate_bundle(
    bundle: ModelBundle,
    clips: np.ndarray,
    distortion: DistortionConfig,
    seed: int = 1234,
    strength: float | None = None,
    batch_size: int = 16,
    attack=None,
    lambdas: tuple[float, float] = (150.0, 1.0),
) -> dict:
    """Held-out SNR and bit accuracy (clean and under the simulated channel).

    Watermarks and channel randomness come from ``seed`` so repeated calls agree.
    ``attack`` optionally replaces the simulated channel with another callable.
    ``objective`` is lambda_e * Le + lambda_w * Lw measured on the channel output.
    """
    from .signal import snr as snr_db

    rng = np.random.default_rng(seed)
    s = bundle.strength if strength is None else strength
    snrs, clean, channel, l_e, l_w = [], [], [], [], []
    for start in range(0, len(clips), batch_size):
        x = np.asarray(clips[start : start + batch_size], dtype=np.float64)
        bits = rng.choice(np.array([-1.0, 1.0]), size=(x.shape[0], bundle.watermark_length))
        a, d = analysis(x[:, None, :])
        a_w = bundle.embed(a.astype(bundle.dtype), bits, s).data.astype(np.float64)
        l_e.extend(np.mean((a_w - a) ** 2, axis=(1, 2)))
        x_w = synthesis(a_w, d)[:, 0, :]
        for ref, test in zip(x, x_w):
            snrs.append(snr_db(ref, test))
        soft = bundle.decode(analysis(x_w[:, None, :])[0]).data[:, 0, :]
        clean.extend(np.mean(np.where(soft >= 0, 1.0, -1.0) == bits, axis=1))
        if attack is None:
            x_r = dar(Tensor(x_w[:, None, :]), distortion, rng).data
        else:
            x_r = attack(x_w[:, None, :], rng)
        soft = bundle.decode(analysis(x_r)[0]).data[:, 0, :]
        l_w.extend(np.mean((soft - bits) ** 2, axis=1))
        channel.extend(np.mean(np.where(soft >= 0, 1.0, -1.0) == bits, axis=1))
    return {
        "snr_db": float(np.mean(snrs)),
        "clean_acc": float(np.mean(clean)),
        "dar_acc": float(np.mean(channel)),
        "Le": float(np.mean(l_e)),
        "Lw": float(np.mean(l_w)),
        "objective": float(lambdas[0] * np.mean(l_e) + lambdas[1] * np.mean(l_w)),
        "n_clips": int(len(clips)),
    }


def _score(metrics: dict) -> tuple:
    """Higher is better: lowest validation objective, then higher channel accuracy."""
    return (-round(metrics["objective"], 12), round(metrics["dar_acc"], 9))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def train(
    corpus,
    config: TrainingConfig,
    out_dir=None,
    resume=None,
    log_path=None,
    progress=None,
) -> tuple[ModelBundle, TrainingRecord]:
    """Train on a directory of WAVs (or an array of segments).

    Returns the bundle with the lowest validation objective (see
    ``evaluate_bundle``; ties go to higher channel accuracy) and the record.
    With ``out_dir``, writes ``best.ckpt``, ``last.ckpt`` and ``train.jsonl`` there.
    """
    if isinstance(corpus, (str, Path)):
        segments = load_corpus(corpus, config.segment_length)
    else:
        segments = [np.asarray(s, dtype=np.float64) for s in corpus]
        if not segments:
            raise TrainingError("empty corpus")
    train_set, val_set = split_segments(segments, config.validation_fraction, config.seed)
    if len(train_set) == 0:
        raise TrainingError("no training segments left after the validation split")

    state = TrainerState.fresh(config)
    record = TrainingRecord()
    if resume is not None:
        _resume(state, record, resume)

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log_file = Path(log_path) if log_path else (out / "train.jsonl" if out else None)
    sink = open(log_file, "a" if resume else "w") if log_file else None
    best = state.bundle.copy()
    if resume is not None and out and (out / "best.ckpt").exists():
        best, _ = load_bundle(out / "best.ckpt", dtype=state.bundle.dtype)
    steps_per_epoch = config.steps_per_epoch or max(1, len(train_set) // config.batch_size)
    eval_seed = config.seed + 1_000_003
    t0 = time.perf_counter()
    try:
        while state.epoch < config.epochs:
            for _ in range(steps_per_epoch):
                idx = state.rng.integers(0, len(train_set), config.batch_size)
                entry = train_step(state, train_set[idx], config)
                entry["epoch"] = state.epoch
                record.add_step(entry)
                if sink:
                    sink.write(json.dumps({"type": "step", **entry}) + "\n")
            state.epoch += 1
            metrics = evaluate_bundle(
                state.bundle, val_set, state.distortion, seed=eval_seed, lambdas=(config.lambda_e, config.lambda_w)
            )
            metrics.update(epoch=state.epoch, step=state.step, elapsed_s=round(time.perf_counter() - t0, 3))
            record.add_evaluation(metrics)
            if sink:
                sink.write(json.dumps({"type": "eval", **metrics}) + "\n")
                sink.flush()
            if progress:
                progress(metrics)
            score = _score(metrics)
            if state.best_score is None or score > tuple(state.best_score):
                state.best_score = score
                best = state.bundle.copy()
                best.meta = {"validation": metrics}
                if out:
                    save_bundle(best, out / "best.ckpt")
            if out and config.checkpoint_interval and state.epoch % config.checkpoint_interval == 0:
                _save_state(state, out / "last.ckpt", config)
    finally:
        if sink:
            sink.close()
    if out:
        _save_state(state, out / "last.ckpt", config)
        if state.best_score is None:
            save_bundle(best, out / "best.ckpt")
    return best, record


def _save_state(state: TrainerState, path, config: TrainingConfig) -> None:
    save_bundle(
        state.bundle,
        path,
        optimizers=state.optimizers(),
        extra={
            "step": state.step,
            "epoch": state.epoch,
            "best_score": list(state.best_score) if state.best_score else None,
            "rng": _rng_state(state.rng),
            "config": config.to_dict(),
        },
    )


def _resume(state: TrainerState, record: TrainingRecord, path) -> None:
    bundle, meta = load_bundle(path, dtype=state.bundle.dtype)
    extra = meta.get("extra", {})
    if "step" not in extra:
        raise TrainingError(f"{path} holds a model but no training state")
    if bundle.architecture_descriptor()["arch"] != state.bundle.architecture_descriptor()["arch"]:
        raise TrainingError("checkpoint architecture does not match the config")
    state.bundle = bundle
    lr = state.enc_opt.lr
    state.enc_opt = Adam(bundle.encoder.parameters(), lr)
    state.dec_opt = Adam(bundle.decoder.parameters(), lr)
    state.dis_opt = Adam(bundle.discriminator.parameters(), lr)
    for group, opt in state.optimizers().items():
        restore_optimizer(opt, group, meta)
    state.step = int(extra["step"])
    state.epoch = int(extra["epoch"])
    state.best_score = tuple(extra["best_score"]) if extra.get("best_score") else None
    state.rng.bit_generator.state = extra["rng"]
