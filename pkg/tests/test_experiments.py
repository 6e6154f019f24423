import numpy as np
import pytest

from ara_vos import attacks as A
from ara_vos import experiments as E
from ara_vos import synthvid as sv
from ara_vos import vos_model as vm


# -- config -----------------------------------------------------------------------------------
def test_defaults_derive_seeds_from_streams():
    cfg = E.RunConfig(seed=7).finalize()
    assert cfg.train.seed == E.derive_seed(7, "init")
    assert cfg.attack.seed == E.derive_seed(7, "attack")
    assert cfg.train.seed != cfg.attack.seed
    assert E.RunConfig(seed=8).finalize().train.seed != cfg.train.seed


def test_derive_seed_is_stable_and_32_bit():
    a = E.derive_seed(0, "data.train")
    assert a == E.derive_seed(0, "data.train")
    assert 0 <= a < 2**32
    assert a != E.derive_seed(0, "data.eval")


def test_parse_values_fractions_tuples_and_bools():
    text = """
[run]
seed = 3
[attack]
epsilon = 4/255   # inline comment
iterations = 5
[data]
contrast = 0.4, 0.9
train_objects = 1, 2
[train]
cosine = no
"""
    cfg = E.parse_config(text)
    assert cfg.seed == 3
    assert cfg.attack.epsilon == pytest.approx(4 / 255)
    assert cfg.attack.iterations == 5
    assert cfg.data.contrast == (0.4, 0.9)
    assert cfg.data.train_objects == (1, 2)
    assert cfg.train.cosine is False
    assert cfg.train.seed == E.derive_seed(3, "init")


def test_explicit_seed_wins_over_stream():
    cfg = E.parse_config("[run]\nseed = 3\n[train]\nseed = 11\n")
    assert cfg.train.seed == 11
    assert cfg.attack.seed == E.derive_seed(3, "attack")


@pytest.mark.parametrize("text,line", [
    ("[attack]\nepsilon = 0.1\nbogus = 1\n", 3),
    ("[attack]\n\niterations = many\n", 3),
    ("[nosuch]\nx = 1\n", 1),
    ("x = 1\n", 1),
    ("[run]\nseed = 1\n[attack]\nnorm_mode = l7\n", 4),
    ("[run]\nseed = 1\ncolour = red\n", 3),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(E.ConfigError) as info:
        E.parse_config(text, "run.ini")
    assert info.value.line == line
    assert f"run.ini:{line}:" in str(info.value)


def test_dump_parse_round_trip():
    cfg = E.parse_config("[run]\nseed = 5\n[attack]\nepsilon = 2/255\nnorm_mode = l2\n")
    back = E.parse_config(E.dump_config(cfg))
    assert back.snapshot() == cfg.snapshot()


def test_load_config(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[attack]\nalpha = 0.4\n")
    assert E.load_config(p).attack.alpha == 0.4


# -- hashing ----------------------------------------------------------------------------------
def test_content_hash(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "a.txt").write_text("one")
    (tmp_path / "d" / "b.txt").write_text("two")
    h = E.content_hash(tmp_path / "d")
    assert h.startswith("sha256:") and len(h) == 7 + 64
    assert h == E.content_hash(tmp_path / "d")
    (tmp_path / "d" / "b.txt").write_text("three")
    assert h != E.content_hash(tmp_path / "d")


# -- statistics -------------------------------------------------------------------------------
def test_paired_bootstrap_constant_difference():
    a = np.arange(10.0)
    mean, lo, hi = E.paired_bootstrap(a + 0.5, a, n=500)
    assert mean == lo == hi == pytest.approx(0.5)


def test_paired_bootstrap_matches_manual_resampling():
    rng = np.random.default_rng(0)
    a, b = rng.random(12), rng.random(12)
    mean, lo, hi = E.paired_bootstrap(a, b, n=2000, seed=4)
    d = a - b
    idx = np.random.default_rng(4).integers(0, 12, size=(2000, 12))
    means = d[idx].mean(axis=1)
    assert mean == pytest.approx(d.mean())
    assert (lo, hi) == pytest.approx(tuple(np.quantile(means, [0.025, 0.975])))
    assert lo < mean < hi


def test_paired_bootstrap_rejects_empty():
    with pytest.raises(ValueError):
        E.paired_bootstrap([], [])


def test_sweep_overrides():
    assert E.sweep_overrides("epsilon", 0.1) == {"epsilon": 0.1, "beta": 0.1}
    assert E.sweep_overrides("frames_to_attack", 2.0) == {"frames_to_attack": 2}
    with pytest.raises(ValueError):
        E.sweep_overrides("lr", 0.1)


# -- panels -----------------------------------------------------------------------------------
def test_datasets_follow_config():
    cfg = E.parse_config("[data]\ntrain_count = 3\neval_count = 2\nframes = 4\n")
    train, evals = E.build_datasets(cfg)
    assert len(train) == 3 and len(evals) == 2
    assert train[0].frames.shape[0] == 4
    assert train[0].vid != evals[0].vid


def test_attack_panel_order_and_jobs():
    videos = sv.make_dataset(2, seed=3, T=4)
    params = vm.VosParams.init(0)
    cfg = A.AttackConfig(iterations=1)
    serial_rows = E.attack_panel(params, videos, "pgd", cfg, seeds=(1, 2))
    parallel = E.attack_panel(params, videos, "pgd", cfg, seeds=(1, 2), jobs=2)
    assert [(r.seed, r.vid) for r in serial_rows] == [(1, videos[0].vid), (1, videos[1].vid),
                                                      (2, videos[0].vid), (2, videos[1].vid)]
    for a, b in zip(serial_rows, parallel):
        assert a.result.first.tobytes() == b.result.first.tobytes()
        assert a.drop == b.drop


def test_evaluate_with_identity_adv_matches_clean():
    videos = sv.make_dataset(1, seed=3, T=3)
    params = vm.VosParams.init(0)
    clean = E.evaluate(params, videos)
    same = E.evaluate(params, videos, {videos[0].vid: {0: videos[0].frames[0].copy()}})
    assert clean[0].JF == same[0].JF
