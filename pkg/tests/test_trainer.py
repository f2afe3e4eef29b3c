import math

import numpy as np
import pytest
import torch

from catintell import baseline, dataset, imaging, trainer
from catintell import discriminator as D
from catintell import generator as G
from catintell import perceptual as P
from catintell.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from catintell.dataset import PairRecord
from catintell.errors import ConfigError, EmptyCorpusError, NotFoundError, NumericalError, PhaseError, RangeError

GEN_TINY = G.GeneratorConfig(stages=1, width=4, blocks_per_encoder_stage=1, bottleneck_blocks=1)
DISC_TINY = D.DiscriminatorConfig(stages=1, embed_dim=8, window=4, heads_per_stage=(1,))
EX_TINY = P.ExtractorConfig(stem_width=4, widths=(8, 16), convs_per_block=1)


def _extractor():
    return P.build_extractor(EX_TINY, seed=1).freeze()


def _cfg(**kw):
    base = dict(iterations=300, batch=2, lr_base=2e-3, warmup_iters=10, patch=32, resize=48,
                checkpoint_every=100, validate_every=100)
    base.update(kw)
    return trainer.TrainConfig(**base)


def _params(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def _pairs(tmp_path, n, size=48, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    (tmp_path / "hq").mkdir(parents=True, exist_ok=True)
    (tmp_path / "deg").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        img = baseline.render_fundus(size, rng)
        deg = baseline.degrade_traditional(img, baseline.random_haze(0, rng))
        imaging.save_image(img, tmp_path / "hq" / f"{i}.png")
        imaging.save_image(deg, tmp_path / "deg" / f"{i}.png")
        recs.append(PairRecord(tmp_path / "hq" / f"{i}.png", tmp_path / "deg" / f"{i}.png"))
    return recs


# --- schedule -------------------------------------------------------------

def test_lr_warmup_and_peak():
    cfg = trainer.TrainConfig()
    assert trainer.lr_at(cfg, 0) == 0.0
    assert trainer.lr_at(cfg, 500) == pytest.approx(5e-6, abs=1e-18)
    assert trainer.lr_at(cfg, 1000) == pytest.approx(1e-5, abs=1e-18)


def test_lr_cosine_endpoint_and_midpoint():
    cfg = trainer.TrainConfig()
    assert abs(trainer.lr_at(cfg, 80000)) <= 1e-12
    mid = 1000 + (80000 - 1000) // 2
    assert trainer.lr_at(cfg, mid) == pytest.approx(5e-6, rel=1e-9)


def test_lr_peak_is_global_max():
    cfg = trainer.TrainConfig(iterations=2000, warmup_iters=100)
    values = [trainer.lr_at(cfg, s) for s in range(2001)]
    assert max(values) == cfg.lr_base == values[100]
    assert np.all(np.abs(np.diff(values)) <= cfg.lr_base / 100 + 1e-18)


def test_finetune_schedule_linear():
    sched = trainer.finetune_schedule(trainer.TrainConfig())
    assert trainer.lr_at(sched, 0) == 1e-6
    assert trainer.lr_at(sched, sched.iterations // 2) == pytest.approx(5e-7)
    assert trainer.lr_at(sched, sched.iterations) == 0.0


def test_lr_out_of_range():
    with pytest.raises(RangeError):
        trainer.lr_at(trainer.TrainConfig(), 80001)


def test_config_validation():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(iterations=10, warmup_iters=10)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(decay="step")
    with pytest.raises(ConfigError):
        trainer.TrainConfig.from_dict({"iters": 3})


# --- gan_step ---------------------------------------------------------------

@pytest.fixture
def res_state():
    return trainer.new_state("res", GEN_TINY, DISC_TINY, _cfg(), _extractor())


def test_zero_lr_is_noop(res_state, rng):
    hq, deg = rng.random((2, 2, 32, 32, 3), dtype=np.float32)
    g0, d0 = _params(res_state.gen), _params(res_state.disc)
    state, report = trainer.gan_step(res_state, hq, deg, lr=0.0)
    assert _same(g0, _params(state.gen)) and _same(d0, _params(state.disc))
    assert math.isfinite(report.total) and state.step == 1


def test_nan_input_raises_without_corruption(res_state, rng):
    hq, deg = rng.random((2, 2, 32, 32, 3), dtype=np.float32)
    deg[0, 3, 3, 1] = np.nan
    g0, d0 = _params(res_state.gen), _params(res_state.disc)
    with pytest.raises(NumericalError):
        trainer.gan_step(res_state, hq, deg)
    assert res_state.step == 0
    assert _same(g0, _params(res_state.gen)) and _same(d0, _params(res_state.disc))


def test_nan_generator_loss_restores_discriminator(res_state, rng):
    hq, deg = rng.random((2, 2, 32, 32, 3), dtype=np.float32)
    with torch.no_grad():
        res_state.extractor.blocks[0][0].weight.fill_(float("nan"))
    g0, d0 = _params(res_state.gen), _params(res_state.disc)
    with pytest.raises(NumericalError) as info:
        trainer.gan_step(res_state, hq, deg)
    assert "fp" in info.value.diagnostics
    assert _same(g0, _params(res_state.gen)) and _same(d0, _params(res_state.disc))
    assert res_state.step == 0


def test_extractor_stays_frozen(res_state, rng):
    before = _params(res_state.extractor)
    for _ in range(3):
        hq, deg = rng.random((2, 2, 32, 32, 3), dtype=np.float32)
        trainer.gan_step(res_state, hq, deg)
    assert _same(before, _params(res_state.extractor))


def test_loss_decreases_over_200_steps(tmp_path):
    recs = _pairs(tmp_path, 4)
    firsts, lasts = [], []
    for seed in range(3):
        state = trainer.new_state("res", GEN_TINY, DISC_TINY, _cfg(iterations=200, seed=seed), _extractor())
        totals = []
        for step in range(200):
            hq, deg = dataset.sample_paired_batch(recs, 2, 32, trainer.step_rng(state.cfg, "res", step), 48)
            state, rep = trainer.gan_step(state, hq, deg)
            totals.append(rep.total)
        firsts.append(totals[0])
        lasts.append(totals[-1])
    assert np.median(lasts) < np.median(firsts)


# --- phases ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def syn_run(tmp_path_factory, toy_corpus):
    corpus, _ = toy_corpus
    split = dataset.FoldSplit(0, corpus.hq_paths, (), corpus.cataract_paths[::3], ())
    out = tmp_path_factory.mktemp("syn")
    torch.set_num_threads(1)
    path = trainer.train_syn(split, _cfg(), GEN_TINY, DISC_TINY, _extractor(), out)
    return split, out, path


def test_syn_checkpoint_and_probability_band(syn_run):
    split, out, path = syn_run
    assert path.is_file() and (out / "syn_log.csv").is_file() and (out / "previews").is_dir()
    ck = load_checkpoint(path)
    assert ck.phase == "syn" and ck.step == 300
    state = trainer.state_from_checkpoint(ck)
    imgs = np.stack([np.array(dataset.load_resized(p, 48)) for p in split.train_hq])
    fakes = G.forward(state.gen, imgs)
    p = D.predict(state.disc, fakes).mean()
    assert 0.2 <= p <= 0.8


def test_syn_resume_matches_uninterrupted(syn_run, tmp_path):
    split, _, full = syn_run
    part = trainer.train_syn(split, _cfg(), GEN_TINY, DISC_TINY, _extractor(), tmp_path, stop_at=150)
    assert load_checkpoint(part).step == 150
    resumed = trainer.train_syn(split, _cfg(), GEN_TINY, DISC_TINY, None, tmp_path, resume=load_checkpoint(part))
    a, b = load_checkpoint(full), load_checkpoint(resumed)
    assert a.step == b.step == 300
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k], err_msg=k)
    assert full.read_bytes() == resumed.read_bytes()


def test_syn_empty_cataract_raises(tmp_path, toy_corpus):
    corpus, _ = toy_corpus
    split = dataset.FoldSplit(0, corpus.hq_paths, (), (), ())
    with pytest.raises(EmptyCorpusError):
        trainer.train_syn(split, _cfg(), GEN_TINY, DISC_TINY, _extractor(), tmp_path)


def test_generate_pairs(syn_run, tmp_path, toy_corpus):
    corpus, _ = toy_corpus
    _, _, path = syn_run
    ck = load_checkpoint(path)
    hq = corpus.hq_paths[:10]
    trainer.generate_pairs(ck, hq, tmp_path / "a")
    trainer.generate_pairs(ck, hq, tmp_path / "b")
    recs = dataset.read_pairs(tmp_path / "a")
    assert len(recs) == 10
    diffs = []
    for r in recs:
        h, s = imaging.load_image(r.hq_path), imaging.load_image(r.syn_path)
        assert h.shape == s.shape == (48, 48, 3)
        assert r.syn_path.read_bytes() == (tmp_path / "b" / "syn" / r.syn_path.name).read_bytes()
        diffs.append(np.abs(h - s).mean())
    assert min(diffs) > 0


def test_generate_pairs_needs_syn(tmp_path, res_state):
    with pytest.raises(PhaseError):
        trainer.generate_pairs(trainer.state_to_checkpoint(res_state), [], tmp_path)


def test_res_and_finetune(tmp_path):
    recs = _pairs(tmp_path / "data", 3)
    cfg = _cfg(iterations=20, warmup_iters=2, finetune_iterations=10, checkpoint_every=10)
    res = trainer.train_res(recs, cfg, GEN_TINY, DISC_TINY, _extractor(), tmp_path / "res")
    assert load_checkpoint(res).phase == "res"
    seen = []
    ft = trainer.finetune_res(load_checkpoint(res), recs, tmp_path / "ft", on_step=lambda s, r: seen.append(r.lr))
    ck = load_checkpoint(ft)
    assert ck.phase == "res-finetune" and ck.step == 10
    sched = trainer.finetune_schedule(cfg)
    assert seen == [trainer.lr_at(sched, s) for s in range(1, 11)]
    assert seen[0] == pytest.approx(cfg.lr_finetune * 0.9)


def test_finetune_on_syn_raises(syn_run, tmp_path):
    _, _, path = syn_run
    with pytest.raises(PhaseError):
        trainer.finetune_res(load_checkpoint(path), [PairRecord(path, path)], tmp_path)


def test_train_res_empty_raises(tmp_path):
    with pytest.raises(EmptyCorpusError):
        trainer.train_res([], _cfg(), GEN_TINY, DISC_TINY, _extractor(), tmp_path)


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_byte_round_trip(res_state, rng, tmp_path):
    hq, deg = rng.random((2, 2, 32, 32, 3), dtype=np.float32)
    trainer.gan_step(res_state, hq, deg)
    p1 = save_checkpoint(trainer.state_to_checkpoint(res_state), tmp_path / "a.ckpt")
    p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    state = trainer.state_from_checkpoint(load_checkpoint(p1))
    p3 = save_checkpoint(trainer.state_to_checkpoint(state), tmp_path / "c.ckpt")
    assert p1.read_bytes() == p3.read_bytes()


def test_checkpoint_preserves_dtypes(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.float32([1.5]), "c": np.zeros((0, 4))}
    ck = load_checkpoint(save_checkpoint(Checkpoint({"x": [1]}, arrays, 7, "syn", {"m": 1}), tmp_path / "k"))
    assert ck.step == 7 and ck.phase == "syn" and ck.meta == {"m": 1} and ck.config == {"x": [1]}
    for k, v in arrays.items():
        assert ck.arrays[k].dtype == v.dtype
        np.testing.assert_array_equal(ck.arrays[k], v)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(NotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_restore_images_keeps_names_and_sizes(tmp_path, res_state, rng):
    (tmp_path / "in").mkdir()
    for name, shape in (("a.png", (20, 30)), ("b.png", (17, 17))):
        imaging.save_image(rng.random((*shape, 3)), tmp_path / "in" / name)
    out = trainer.restore_images(res_state.gen, dataset.list_images(tmp_path / "in"), tmp_path / "out")
    assert [p.name for p in out] == ["a.png", "b.png"]
    assert imaging.load_image(out[0]).shape == (20, 30, 3)
