import logging
import math

import numpy as np
import pytest

import dear.engine as E
from conftest import numeric_grad, rel_error
from dear.corpus import synth_clips, write_corpus
from dear.engine import Tensor
from dear.nets import ModelBundle, load_bundle
from dear.train import (
    ConfigError,
    TrainerState,
    TrainingConfig,
    TrainingError,
    adversarial_losses,
    dump_config,
    encoder_loss,
    evaluate_bundle,
    forward_pipeline,
    load_config,
    load_corpus,
    parse_config,
    split_segments,
    total_loss,
    train,
    train_step,
    watermark_loss,
)


def tiny_config(**kw):
    base = dict(
        segment_length=256, watermark_length=4, channels=4, kernel=3, batch_size=4,
        epochs=1, steps_per_epoch=3, decoder_warmup=0, learning_rate=1e-3, ir_count=2,
        validation_fraction=0.2,
    )
    base.update(kw)
    return TrainingConfig(**base)


def tiny_segments(count=10, seed=0):
    return list(synth_clips(count, 256, seed=seed))


# losses ---------------------------------------------------------------------------

def test_encoder_loss_examples():
    a = Tensor(np.zeros((1, 1, 2)))
    assert encoder_loss(a, a).item() == 0.0
    assert encoder_loss(a, Tensor(np.full((1, 1, 2), 0.3))).item() == pytest.approx(0.09)
    assert encoder_loss(a, Tensor(np.array([[[0.1, 0.3]]]))).item() == pytest.approx(0.05)
    with pytest.raises(ValueError):
        encoder_loss(a, Tensor(np.zeros((1, 1, 3))))


def test_adversarial_examples():
    half = Tensor(np.array([0.5]))
    l_d, l_D = adversarial_losses(half, half)
    assert l_d.item() == pytest.approx(math.log(0.5))
    assert l_D.item() == pytest.approx(2 * math.log(0.5))
    sure = Tensor(np.array([1 - 1e-6]))
    l_d, _ = adversarial_losses(half, sure)
    assert l_d.item() == pytest.approx(math.log(1e-6), rel=1e-6)
    flipped_d, flipped_D = adversarial_losses(Tensor(np.array([0.8])), Tensor(np.array([0.3])), "flipped")
    assert flipped_d.item() == pytest.approx(math.log(0.3))
    assert flipped_D.item() == pytest.approx(math.log(0.8) + math.log(0.7))
    with pytest.raises(ValueError):
        adversarial_losses(half, half, "sideways")


def test_watermark_loss_examples():
    w = np.array([1.0, -1.0])
    assert watermark_loss(w, Tensor(w.copy())).item() == 0.0
    assert watermark_loss(w, Tensor(np.zeros(2))).item() == 1.0
    assert watermark_loss(w, Tensor(np.array([0.5, -1.0]))).item() == pytest.approx(0.125)
    with pytest.raises(ValueError):
        watermark_loss(w, Tensor(np.zeros(3)))


def test_total_loss_examples():
    cfg = TrainingConfig()
    parts = [Tensor(np.array(v)) for v in (0.001, -0.693, 0.5)]
    assert total_loss(*parts, cfg).item() == pytest.approx(0.64307, abs=1e-12)
    zeros = [Tensor(np.array(0.0)) for _ in range(3)]
    assert total_loss(*zeros, cfg).item() == 0.0


def _loss_parts(bundle, x, bits, cfg):
    a_t, a_w, _, soft = forward_pipeline(bundle, x, bits, lambda v: v)
    return encoder_loss(a_t, a_w), E.mean(E.log(E.add_scalar(E.mul_scalar(bundle.discriminate(a_w), -1), 1))), watermark_loss(bits, soft)


def test_total_gradient_is_weighted_sum_of_parts():
    cfg = tiny_config(lambda_e=150.0, lambda_d=0.5, lambda_w=2.0)
    bundle = ModelBundle.create(cfg.architecture(), 4, 256, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 256)) * 0.2
    bits = rng.choice([-1.0, 1.0], (2, 4))
    p = bundle.named_parameters()["enc1.weight"]

    def grad_of(select):
        p.grad = None
        parts = _loss_parts(bundle, x, bits, cfg)
        select(parts).backward()
        return p.grad.copy()

    weights = (cfg.lambda_e, cfg.lambda_d, cfg.lambda_w)
    combined = grad_of(lambda parts: total_loss(*parts, cfg))
    separate = sum(w * grad_of(lambda parts, i=i: parts[i]) for i, w in enumerate(weights))
    np.testing.assert_allclose(combined, separate, rtol=1e-10, atol=1e-14)

    def f(v):
        old = p.data
        p.data = v
        try:
            return total_loss(*_loss_parts(bundle, x, bits, cfg), cfg).item()
        finally:
            p.data = old

    assert rel_error(combined, numeric_grad(f, p.data.copy())) < 1e-4


def test_zero_lambda_d_removes_discriminator_influence():
    cfg = tiny_config(lambda_d=0.0)
    bundle = ModelBundle.create(cfg.architecture(), 4, 256, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    x, bits = rng.standard_normal((2, 256)) * 0.2, rng.choice([-1.0, 1.0], (2, 4))
    p = bundle.named_parameters()["enc0.weight"]
    grads = []
    for scale in (1.0, 5.0):
        for q in bundle.discriminator.parameters():
            q.data = q.data * scale
        p.grad = None
        total_loss(*_loss_parts(bundle, x, bits, cfg), cfg).backward()
        grads.append(p.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


# configuration -----------------------------------------------------------------------

def test_parse_config_and_round_trip(tmp_path):
    cfg = parse_config("# desk run\nlambda_e = 150\nlearning_rate=1e-3  # faster\nenhanced = yes\nir_dir = none\n\n")
    assert cfg.learning_rate == 1e-3 and cfg.enhanced is True and cfg.ir_dir is None
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@pytest.mark.parametrize(
    "text,line,fragment",
    [
        ("epochs = 2\nbogus = 1\n", 2, "unknown key"),
        ("epochs = 2\n\nepochs = 3\n", 3, "duplicate"),
        ("batch_size = eight\n", 1, "bad value"),
        ("# c\nenhanced = maybe\n", 2, "bad value"),
        ("just words\n", 1, "key = value"),
    ],
)
def test_config_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value) and fragment in str(info.value)


def test_config_semantic_errors():
    with pytest.raises(ConfigError):
        parse_config("batch_size = 0\n")
    with pytest.raises(ConfigError):
        parse_config("adv_sign = sideways\n")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.cfg")


# data --------------------------------------------------------------------------------

def test_corpus_loading(tmp_path, caplog):
    write_corpus(tmp_path, 3, 600, seed=0)
    (tmp_path / "broken.wav").write_bytes(b"RIFFxxxx")
    with caplog.at_level(logging.WARNING):
        segs = load_corpus(tmp_path, 256)
    assert len(segs) == 3 * 3
    assert "skipping" in caplog.text


def test_corpus_errors(tmp_path):
    with pytest.raises(TrainingError):
        load_corpus(tmp_path / "missing", 256)
    with pytest.raises(TrainingError):
        load_corpus(tmp_path, 256)
    (tmp_path / "a.wav").write_bytes(b"junk")
    with pytest.raises(TrainingError, match="no readable"):
        load_corpus(tmp_path, 256)
    with pytest.raises(TrainingError):
        train([], tiny_config())


def test_split_holds_out_by_seed():
    segs = [np.full(4, i, dtype=float) for i in range(20)]
    tr, va = split_segments(segs, 0.05, seed=3)
    assert len(va) == 1 and len(tr) == 19
    tr2, va2 = split_segments(segs, 0.05, seed=3)
    np.testing.assert_array_equal(va, va2)
    assert sorted(np.concatenate([tr[:, 0], va[:, 0]])) == list(range(20))


# training loop ---------------------------------------------------------------------

def test_step_populates_gradients_and_freezes_the_other_side():
    cfg = tiny_config()
    state = TrainerState.fresh(cfg)
    batch = np.stack(tiny_segments(4))
    snapshot = {k: p.data.copy() for k, p in state.bundle.named_parameters().items()}
    seen = {}
    inner = state.dis_opt.step

    def spy():
        seen.update({k: p.data.copy() for k, p in state.bundle.named_parameters().items()})
        seen["grads"] = {k: p.grad for k, p in state.bundle.named_parameters().items()}
        inner()

    state.dis_opt.step = spy
    entry = train_step(state, batch, cfg)
    grads = seen.pop("grads")
    for net in (state.bundle.encoder, state.bundle.decoder):
        for p in net.parameters():
            assert grads[p.name] is not None and np.all(np.isfinite(grads[p.name])), p.name
            assert not np.array_equal(seen[p.name], snapshot[p.name]), p.name
    for p in state.bundle.discriminator.parameters():
        # untouched by the encoder/decoder step, then moved by its own step
        np.testing.assert_array_equal(seen[p.name], snapshot[p.name])
        assert not np.array_equal(p.data, snapshot[p.name])
    for net in (state.bundle.encoder, state.bundle.decoder):
        for p in net.parameters():
            np.testing.assert_array_equal(p.data, seen[p.name])
    assert set(entry) >= {"step", "Le", "Ld", "Lw", "L", "LD", "distortion"}


def test_warmup_keeps_encoder_fixed():
    cfg = tiny_config(decoder_warmup=2)
    state = TrainerState.fresh(cfg)
    enc = {p.name: p.data.copy() for p in state.bundle.encoder.parameters()}
    batch = np.stack(tiny_segments(4))
    train_step(state, batch, cfg)
    train_step(state, batch, cfg)
    for p in state.bundle.encoder.parameters():
        np.testing.assert_array_equal(p.data, enc[p.name])
    train_step(state, batch, cfg)
    assert any(not np.array_equal(p.data, enc[p.name]) for p in state.bundle.encoder.parameters())


class _FixedBits:
    """RNG stand-in that always draws the same watermarks (everything else delegates)."""

    def __init__(self, rng, bits):
        self._rng, self._bits = rng, bits

    def choice(self, values, size=None):
        return self._bits.copy()

    def __getattr__(self, name):
        return getattr(self._rng, name)


def test_encoder_loss_alone_decreases_monotonically():
    cfg = tiny_config(lambda_w=0.0, lambda_d=0.0, learning_rate=1e-3)
    state = TrainerState.fresh(cfg)
    state.rng = _FixedBits(state.rng, np.random.default_rng(5).choice([-1.0, 1.0], (4, 4)))
    batch = np.stack(tiny_segments(4))
    losses = [train_step(state, batch, cfg)["Le"] for _ in range(50)]
    assert np.all(np.diff(losses) < 0)
    assert losses[-1] < 0.5 * losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    cfg = tiny_config()
    state = TrainerState.fresh(cfg)
    batch = np.stack(tiny_segments(4))
    batch[0, 3] = np.inf
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(state, batch, cfg)


def test_enhanced_steps_record_their_distortion():
    cfg = tiny_config(enhanced=True)
    state = TrainerState.fresh(cfg)
    batch = np.stack(tiny_segments(4))
    tags = {train_step(state, batch, cfg)["distortion"] for _ in range(30)}
    assert "dar" in tags and len(tags) >= 4


def test_loss_stays_finite_for_1000_steps():
    cfg = tiny_config()
    state = TrainerState.fresh(cfg)
    data = np.stack(tiny_segments(16))
    rng = np.random.default_rng(0)
    for _ in range(1000):
        entry = train_step(state, data[rng.integers(0, 16, 4)], cfg)
        assert math.isfinite(entry["L"]) and math.isfinite(entry["LD"])


def test_zero_epochs_returns_initial_bundle():
    cfg = tiny_config(epochs=0)
    bundle, record = train(tiny_segments(), cfg)
    fresh = ModelBundle.create(cfg.architecture(), 4, 256, seed=cfg.seed)
    for name, p in fresh.named_parameters().items():
        np.testing.assert_array_equal(bundle.named_parameters()[name].data, p.data)
    assert record.steps == [] and record.final is None


def test_training_is_deterministic(tmp_path):
    cfg = tiny_config(epochs=2)
    runs = [train(tiny_segments(), cfg, out_dir=tmp_path / str(i)) for i in range(2)]
    assert runs[0][1].steps == runs[1][1].steps
    assert [{k: v for k, v in e.items() if k != "elapsed_s"} for e in runs[0][1].evaluations] == [
        {k: v for k, v in e.items() if k != "elapsed_s"} for e in runs[1][1].evaluations
    ]
    a = (tmp_path / "0" / "train.jsonl").read_text().count('"type": "step"')
    assert a == 6


def test_resume_continues_counters_and_adam_state(tmp_path):
    segs = tiny_segments()
    full_bundle, full = train(segs, tiny_config(epochs=2), out_dir=tmp_path / "full")
    train(segs, tiny_config(epochs=1), out_dir=tmp_path / "half")
    resumed_bundle, resumed = train(
        segs, tiny_config(epochs=2), out_dir=tmp_path / "half", resume=tmp_path / "half" / "last.ckpt"
    )
    assert [e["step"] for e in resumed.steps] == [3, 4, 5]
    assert resumed.steps == full.steps[3:]
    last_full, meta_full = load_bundle(tmp_path / "full" / "last.ckpt")
    last_res, meta_res = load_bundle(tmp_path / "half" / "last.ckpt")
    assert meta_res["extra"]["step"] == 6 and meta_res["optimizers"]["encoder"]["step_count"] == 6
    for name, p in last_full.named_parameters().items():
        np.testing.assert_array_equal(last_res.named_parameters()[name].data, p.data)


def test_resume_rejects_plain_models(tmp_path):
    from dear.nets import save_bundle

    cfg = tiny_config()
    save_bundle(TrainerState.fresh(cfg).bundle, tmp_path / "plain.ckpt")
    with pytest.raises(TrainingError, match="no training state"):
        train(tiny_segments(), cfg, resume=tmp_path / "plain.ckpt")


def test_evaluate_bundle_is_seeded():
    cfg = tiny_config()
    bundle = TrainerState.fresh(cfg).bundle
    clips = np.stack(tiny_segments(5))
    a = evaluate_bundle(bundle, clips, cfg.distortion(), seed=4)
    b = evaluate_bundle(bundle, clips, cfg.distortion(), seed=4)
    assert a == b
    assert set(a) == {"snr_db", "clean_acc", "dar_acc", "Le", "Lw", "objective", "n_clips"}
    assert a["objective"] == pytest.approx(150 * a["Le"] + a["Lw"])
