import pytest

from udareid.config import TrainConfig


def test_full_scale_defaults():
    pre = TrainConfig("pretrain")
    fine = TrainConfig("finetune")
    assert (pre.epochs, fine.epochs, fine.iters_per_epoch) == (120, 80, 400)
    assert pre.base_lr == 3.5e-4 and pre.lr_milestones == [40, 70] and pre.lr_factor == 0.1
    assert pre.warmup_epochs == 10 and fine.warmup_epochs == 0
    assert fine.eta == 0.999
    assert (fine.kappa, fine.alpha, fine.beta, fine.gamma, fine.delta, fine.margin) == (1, 1, 1, 0.5, 0.5, 0.3)
    assert (fine.ecab_r, fine.ecab_h) == (4, 5)
    assert (pre.num_instances_p, pre.num_instances_k, pre.batch_size) == (32, 4, 128)
    assert (pre.height, pre.width, pre.pad) == (256, 128, 10)
    assert (pre.flip_prob, pre.color_dropout_prob, pre.erase_prob) == (0.5, 0.4, 0.5)
    assert fine.weight_decay == 5e-4


def test_lr_schedule():
    cfg = TrainConfig("pretrain")
    assert cfg.lr_at(39) == pytest.approx(3.5e-4, rel=1e-12)
    assert cfg.lr_at(40) == pytest.approx(3.5e-5, rel=1e-12)
    assert cfg.lr_at(70) == pytest.approx(3.5e-6, rel=1e-12)
    assert cfg.lr_at(0) == pytest.approx(3.5e-5, rel=1e-12)
    warm = [cfg.lr_at(e) for e in range(11)]
    assert warm == sorted(warm) and warm[10] == pytest.approx(3.5e-4)
    assert TrainConfig("finetune").lr_at(79) == 3.5e-4


@pytest.mark.parametrize("bad", [dict(eta=1.0), dict(ecab_h=4), dict(epochs=0), dict(height=63), dict(flip_prob=2.0),
                                 dict(gamma=-1), dict(stage="eval")])
def test_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_yaml_roundtrip(tmp_path):
    cfg = TrainConfig.toy("finetune", seed=3)
    path = cfg.save(tmp_path / "c.yaml")
    back = TrainConfig.load(path)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert "eta: 0.995" in path.read_text()


def test_unknown_key_rejected(tmp_path):
    (tmp_path / "c.yaml").write_text("stage: pretrain\nlearning_rate: 0.1\n")
    with pytest.raises(ValueError):
        TrainConfig.load(tmp_path / "c.yaml")


def test_hash_changes_with_fields():
    assert TrainConfig.toy().config_hash() != TrainConfig.toy(seed=8).config_hash()
    assert len(TrainConfig().config_hash()) == 16


def test_toy_preset():
    cfg = TrainConfig.toy("pretrain")
    assert (cfg.height, cfg.width, cfg.batch_size, cfg.epochs) == (64, 32, 32, 10)
    assert cfg.policy().target_size == (64, 32)
    assert TrainConfig.toy("finetune").iters_per_epoch == 50
