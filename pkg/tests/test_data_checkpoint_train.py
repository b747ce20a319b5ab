import csv
import struct
from collections import OrderedDict

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from pcpredict.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from pcpredict.data import (
    Shape,
    SyntheticSceneSpec,
    gen_bouncing_shapes,
    gen_dataset,
    list_sequence_dirs,
    load_sequence_dir,
    render_shapes,
    save_sequence_dir,
)
from pcpredict.errors import ConfigError, FormatError, TruncatedFileError
from pcpredict.train import (
    TrainConfig,
    batch_indices,
    build_network,
    evaluate_sequence,
    learning_rate,
    load_network,
    loss_for_batch,
    make_backbone,
    train,
)
from pcpredict.losses import LossWeights


# --- synthetic data ---------------------------------------------------------------------------


def test_zero_velocity_is_static():
    seq = render_shapes([Shape("square", 5, (3, 4), (0, 0), 0.8)], 16, 16, 4)
    assert seq.shape == (4, 1, 16, 16)
    for t in range(4):
        assert torch.equal(seq[t], seq[0])
    assert seq[0, 0, 4:9, 3:8].eq(0.8).all()
    assert seq.sum().item() == pytest.approx(4 * 25 * 0.8, rel=1e-6)


def test_same_seed_same_sequence():
    spec = SyntheticSceneSpec(seed=7, n_shapes=2, kinds=("square", "disc"), T=6)
    assert torch.equal(gen_bouncing_shapes(spec), gen_bouncing_shapes(spec))
    other = SyntheticSceneSpec(seed=8, n_shapes=2, kinds=("square", "disc"), T=6)
    assert not torch.equal(gen_bouncing_shapes(spec), gen_bouncing_shapes(other))


def _top_left(frame):
    ys, xs = np.nonzero(frame[0].numpy())
    return xs.min(), ys.min()


def test_unit_velocity_moves_one_pixel_per_frame():
    seq = render_shapes([Shape("square", 3, (5, 6), (1, 0), 1.0)], 16, 16, 3)
    for t in range(3):
        expected = torch.zeros(16, 16)
        expected[6:9, 5 + t:8 + t] = 1.0
        assert torch.equal(seq[t, 0], expected)


def test_motion_follows_closed_form_with_reflection():
    # W - size = 12; x: 10 -> 13 reflects to 11, then 8, 5
    seq = render_shapes([Shape("square", 4, (10, 2), (3, 1), 1.0)], 16, 16, 4)
    assert [_top_left(seq[t]) for t in range(4)] == [(10, 2), (11, 3), (8, 4), (5, 5)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_generated_frames_are_in_range(seed):
    seq = gen_bouncing_shapes(SyntheticSceneSpec(seed=seed, n_shapes=2, kinds=("square", "disc"),
                                                 H=24, W=24, T=5, size_range=(4, 8)))
    assert seq.min() >= 0 and seq.max() <= 1
    assert (seq.flatten(1).amax(dim=1) > 0).all()


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        gen_bouncing_shapes(SyntheticSceneSpec(n_shapes=0))
    with pytest.raises(ValueError):
        gen_bouncing_shapes(SyntheticSceneSpec(H=8, W=8))
    with pytest.raises(ValueError):
        gen_bouncing_shapes(SyntheticSceneSpec(T=1))


def test_gen_dataset_seeds():
    base = SyntheticSceneSpec(seed=3, T=3, H=16, W=16, size_range=(4, 6))
    ds = gen_dataset(base, 3, seed_offset=10)
    assert ds.shape == (3, 3, 1, 16, 16)
    assert torch.equal(ds[1], gen_bouncing_shapes(SyntheticSceneSpec(seed=14, T=3, H=16, W=16,
                                                                     size_range=(4, 6))))


def test_png_round_trip(tmp_path):
    gen = torch.Generator().manual_seed(0)
    seq = torch.rand(3, 1, 16, 20, generator=gen)
    paths = save_sequence_dir(seq, tmp_path)
    assert [p.name for p in paths] == ["frame_000.png", "frame_001.png", "frame_002.png"]
    back = load_sequence_dir(tmp_path)
    assert back.shape == seq.shape
    assert (back - seq).abs().max() <= 0.5 / 255 + 1e-7
    rgb = torch.rand(2, 3, 16, 16, generator=gen)
    save_sequence_dir(rgb, tmp_path / "rgb")
    assert load_sequence_dir(tmp_path / "rgb").shape == (2, 3, 16, 16)


def test_full_white_maps_to_one(tmp_path):
    Image.fromarray(np.full((16, 16), 255, dtype=np.uint8)).save(tmp_path / "a.png")
    assert load_sequence_dir(tmp_path).eq(1.0).all()


def test_mixed_dimensions_rejected(tmp_path):
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((16, 18), dtype=np.uint8)).save(tmp_path / "b.png")
    with pytest.raises(FormatError, match="mixed"):
        load_sequence_dir(tmp_path)


def test_unreadable_frame_names_file(tmp_path):
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(tmp_path / "a.png")
    (tmp_path / "b.png").write_bytes(b"not an image")
    with pytest.raises(OSError, match="b.png"):
        load_sequence_dir(tmp_path)
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError):
        load_sequence_dir(tmp_path / "empty")


def test_list_sequence_dirs(tmp_path):
    seq = torch.zeros(2, 1, 16, 16)
    save_sequence_dir(seq, tmp_path / "s1")
    save_sequence_dir(seq, tmp_path / "s0")
    assert [p.name for p in list_sequence_dirs(tmp_path)] == ["s0", "s1"]
    assert list_sequence_dirs(tmp_path / "s1") == [tmp_path / "s1"]


# --- checkpoint archive -----------------------------------------------------------------------


def _params():
    gen = torch.Generator().manual_seed(0)
    return OrderedDict([
        ("a.weight", torch.randn(3, 2, generator=gen)),
        ("b.double", torch.randn(4, generator=gen, dtype=torch.float64)),
        ("c.scalar", torch.tensor(2.5)),
        ("d.int", torch.arange(6, dtype=torch.int64).reshape(2, 3)),
        ("e.empty", torch.zeros(0, 5)),
    ])


def test_checkpoint_round_trip(tmp_path):
    params = _params()
    path = save_checkpoint(params, tmp_path / "x.pcpk", {"k": [1, 2]}, step=17)
    ck = load_checkpoint(path)
    assert list(ck.params) == list(params)
    for k in params:
        assert ck.params[k].dtype == params[k].dtype
        assert torch.equal(ck.params[k], params[k])
    assert ck.config == {"k": [1, 2]} and ck.step == 17
    assert path.read_bytes()[:5] == MAGIC
    assert not (tmp_path / "x.pcpk.tmp").exists()


def test_checkpoint_is_little_endian(tmp_path):
    path = save_checkpoint({"v": torch.tensor([1.0], dtype=torch.float32)}, tmp_path / "v.pcpk")
    assert path.read_bytes().endswith(struct.pack("<f", 1.0))


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = save_checkpoint(_params(), tmp_path / "x.pcpk")
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [3, 12, 40, -1])
def test_checkpoint_truncation(tmp_path, cut):
    path = save_checkpoint(_params(), tmp_path / "x.pcpk")
    data = path.read_bytes()
    path.write_bytes(data[:cut])
    with pytest.raises((TruncatedFileError, FormatError)):
        load_checkpoint(path)
    path.write_bytes(data + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_version_check(tmp_path):
    path = save_checkpoint(_params(), tmp_path / "x.pcpk")
    data = bytearray(path.read_bytes())
    data[5:9] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version 99"):
        load_checkpoint(path)


def test_checkpoint_uses_state_dict_names(tmp_path):
    cfg = _tiny_cfg()
    net = build_network(cfg)
    res = train(cfg.__class__(**{**cfg.to_dict(), "steps": 0}), _tiny_data(cfg), out_dir=tmp_path)
    ck = load_checkpoint(res.checkpoint)
    assert list(ck.params) == list(net.state_dict())
    assert ck.config["train"]["T1"] == cfg.T1


# --- training ---------------------------------------------------------------------------------


def _tiny_cfg(**kw):
    base = dict(channels=(1, 4, 8), image_shape=(1, 16, 16), T1=2, T2=2, batch_size=2, steps=3,
                n_train=4, size_range=(4, 6), seed=0, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def _tiny_data(cfg):
    return gen_dataset(cfg.scene_spec(), cfg.n_train)


def test_train_config_dict_round_trip_and_unknown_keys():
    cfg = _tiny_cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)


def test_batch_indices_depend_only_on_seed_and_step():
    cfg = _tiny_cfg()
    assert np.array_equal(batch_indices(cfg, 5, 10), batch_indices(cfg, 5, 10))
    assert batch_indices(cfg, 5, 10).shape == (2,)


def test_zero_steps_keeps_initialisation(tmp_path):
    cfg = _tiny_cfg(steps=0)
    res = train(cfg, _tiny_data(cfg), out_dir=tmp_path)
    ref = build_network(cfg)
    for k, v in ref.state_dict().items():
        assert torch.equal(res.network.state_dict()[k], v)
    assert res.curve == []


def test_curve_row_matches_recomputed_loss(tmp_path):
    cfg = _tiny_cfg(steps=1, perceptual=True)
    data = _tiny_data(cfg)
    res = train(cfg, data, out_dir=tmp_path)
    init = build_network(cfg)
    batch = data[torch.as_tensor(batch_indices(cfg, 0, data.shape[0]))]
    w = LossWeights.build(cfg.T1, cfg.T2, init.config.L, cfg.image_shape)
    report, _ = loss_for_batch(init, batch, w, make_backbone(cfg), cfg.T1)
    assert res.curve[0]["Ltotal"] == pytest.approx(report.L_total.item(), rel=1e-6)
    rows = list(csv.DictReader(open(tmp_path / "curve.csv")))
    assert list(rows[0]) == ["step", "L1", "L2", "Llpips", "Ltotal"]
    assert float(rows[0]["Ltotal"]) == res.curve[0]["Ltotal"]


def test_training_is_deterministic():
    cfg = _tiny_cfg()
    data = _tiny_data(cfg)
    a = train(cfg, data)
    b = train(cfg, data)
    assert a.curve == b.curve
    for (k, va), vb in zip(a.network.state_dict().items(), b.network.state_dict().values()):
        assert torch.equal(va, vb), k


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = _tiny_cfg(steps=4)
    data = _tiny_data(cfg)
    full = train(cfg, data)
    half = train(_tiny_cfg(steps=2), data, out_dir=tmp_path / "a")
    rest = train(cfg, data, out_dir=tmp_path / "b", resume=half.checkpoint)
    assert half.curve + rest.curve == full.curve
    for k, v in full.network.state_dict().items():
        assert torch.allclose(rest.network.state_dict()[k], v, atol=0, rtol=0), k
    net, ck = load_network(rest.checkpoint)
    assert ck.step == 4
    assert any(k.startswith("optim.") for k in ck.params)


def test_cosine_schedule_endpoints_and_monotone():
    cfg = _tiny_cfg(steps=11, lr_schedule="cosine", lr=1e-3, lr_min=1e-4)
    lrs = [learning_rate(cfg, k) for k in range(11)]
    assert lrs[0] == pytest.approx(1e-3, abs=1e-15)
    assert lrs[5] == pytest.approx(5.5e-4, abs=1e-15)
    assert lrs[-1] == pytest.approx(1e-4, abs=1e-15)
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert learning_rate(_tiny_cfg(steps=11), 7) == 1e-3
    with pytest.raises(ConfigError):
        _tiny_cfg(lr_schedule="step")


def test_cosine_resume_matches_uninterrupted_run(tmp_path):
    cfg = _tiny_cfg(steps=4, lr_schedule="cosine")
    data = _tiny_data(cfg)
    full = train(cfg, data)
    # the schedule depends on the total step count, so resume from a mid-run snapshot of the same config
    train(_tiny_cfg(steps=4, lr_schedule="cosine", checkpoint_every=2), data, out_dir=tmp_path)
    rest = train(cfg, data, resume=tmp_path / "step_000002.pcpk")
    assert rest.curve == full.curve[2:]
    for k, v in full.network.state_dict().items():
        assert torch.equal(rest.network.state_dict()[k], v), k


def test_adam_beta1_zero_scalar_step():
    # with beta1 = 0 the first moment is the raw gradient
    p = torch.nn.Parameter(torch.tensor([0.5], dtype=torch.float64))
    opt = torch.optim.Adam([p], lr=0.1, betas=(0.0, 0.99), eps=1e-8)
    grads = [0.3, -1.2, 0.7]
    v, x = 0.0, 0.5
    for k, g in enumerate(grads, start=1):
        p.grad = torch.tensor([g], dtype=torch.float64)
        opt.step()
        v = 0.99 * v + 0.01 * g * g
        vhat = v / (1 - 0.99 ** k)
        x -= 0.1 * g / (vhat ** 0.5 + 1e-8)
        assert p.item() == pytest.approx(x, abs=1e-12)


def _max_change(cfg):
    res = train(cfg, _tiny_data(cfg))
    ref = build_network(cfg).state_dict()
    return max((res.network.state_dict()[k] - v).abs().max().item() for k, v in ref.items() if v.numel())


def test_grad_clip_limits_update():
    # clipped gradients sit far below eps, so the Adam step shrinks to ~lr * g / eps
    assert _max_change(_tiny_cfg(steps=1, lr=0.5, grad_clip=1e-12)) < 1e-3
    assert _max_change(_tiny_cfg(steps=1, lr=0.5)) > 0.1


def test_l1_falls_on_one_sequence():
    cfg = _tiny_cfg(steps=500, n_train=1, batch_size=1, perceptual=False)
    res = train(cfg, _tiny_data(cfg))
    assert res.curve[-1]["L1"] < res.curve[0]["L1"]


def test_train_rejects_short_sequences():
    cfg = _tiny_cfg()
    with pytest.raises(ValueError):
        train(cfg, _tiny_data(cfg)[:, :3])


def test_evaluate_sequence_baseline():
    cfg = _tiny_cfg()
    seq = torch.zeros(4, 1, 16, 16)
    out = evaluate_sequence(build_network(cfg), seq, cfg.T1)
    assert out["mse_baseline"] == 0.0
    assert out["ssim_baseline"] == pytest.approx(1.0)
    assert set(out) == {"mse_model", "mse_baseline", "ssim_model", "ssim_baseline"}
