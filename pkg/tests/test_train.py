import numpy as np
import pytest

from fetrack.errors import ConfigError
from fetrack.model import ModelConfig, TrackerNet
from fetrack.numerics import Parameter
from fetrack.synthetic import SyntheticScene, generate_synthetic
from fetrack.train import AdamW, TrainConfig, TrainingDiverged, train_desk_scale
from fetrack import train as train_mod

TINY = ModelConfig(depth=1, dim=8, d_state=4, prompt_dim=4, n_prompts=2, template_size=32,
                   search_size=64, head_width=4, head_stages=1, score_hidden=4)


@pytest.fixture(scope="module")
def seq():
    return generate_synthetic(SyntheticScene(height=96, width=96, obj_w=20, obj_h=14), 5, seed=3)


def snapshot(params):
    return [p.data.copy() for p in params]


def test_adamw_matches_hand_update():
    p = Parameter(np.array([1.0, -2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    g = np.array([0.5, -0.25])
    opt.step([g])
    m, v = 0.1 * g, 0.001 * g * g
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-14)


def test_zero_lr_keeps_parameters(seq):
    net = TrackerNet(TINY, seed=0)
    before = snapshot(net.parameters())
    res = train_desk_scale(net, seq, TrainConfig(steps=3, batch_size=1, lr=0.0, score_steps=2))
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b.data)
    assert len(res.losses) == 3


def test_score_phase_freezes_base(seq):
    net = TrackerNet(TINY, seed=1)
    train_desk_scale(net, seq, TrainConfig(steps=0, batch_size=2, score_steps=3))
    base = snapshot(net.base_parameters())
    head = snapshot(net.score_head.parameters())
    train_desk_scale(net, seq, TrainConfig(steps=0, batch_size=2, score_steps=3, lr=1e-2, seed=1))
    for a, b in zip(base, net.base_parameters()):
        np.testing.assert_array_equal(a, b.data)
    assert any(not np.array_equal(a, b.data) for a, b in zip(head, net.score_head.parameters()))
    assert all(p.requires_grad for p in net.base_parameters())


def test_curve_persisted(seq, tmp_path):
    net = TrackerNet(TINY, seed=2)
    train_desk_scale(net, seq, TrainConfig(steps=2, batch_size=1, score_steps=1), curve_path=tmp_path / "c.json")
    assert '"losses"' in (tmp_path / "c.json").read_text()


def test_divergence_aborts(seq, monkeypatch):
    monkeypatch.setattr(train_mod, "DIVERGENCE_LIMIT", 1e-9)
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_desk_scale(TrackerNet(TINY, seed=3), seq, TrainConfig(steps=2, batch_size=1))


def test_config_checks():
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_dict({"batch_size": 0})
    assert err.value.field == "batch_size"
