import csv
from pathlib import Path

import numpy as np
import pytest

from xmorpher import io
from xmorpher.architecture import ArchConfig, init_params, patch_embed, stage_rounds
from xmorpher.attention import AttentionDump
from xmorpher.cli import PAIR_FILES, attention_map, main
from xmorpher.registration import TrainConfig, jacobian_nonpositive_fraction
from xmorpher.tensorcore import Tensor

from oracles import dense_window_attention_weights

TINY_CFG = """\
# tiny model for fast command tests
size = 8
channels = 4
levels = 1
blocks = 1
window = 2,2,2
magnification = 3,3,3
heads = 2,2
mlp_ratio = 4
no_cross = false
lr = 0.005
iters = 5
smooth_weight = 0.01
similarity = mse
ncc_radius = 2
seed = 3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


@pytest.fixture
def tiny_pair(tmp_path):
    out = tmp_path / "pair"
    assert main(["synth", "--seed", "4", "--size", "8", "--levels", "1", "--out-dir", str(out)]) == 0
    return out


def one_line_error(capsys, kind=None):
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error: "), err
    if kind:
        assert f"error: {kind}:" in err
    return err


# -- volume files ----------------------------------------------------------


@pytest.mark.parametrize(
    "array,kind",
    [
        (np.random.default_rng(0).random((3, 4, 5)).astype(np.float32), "scalar"),
        (np.arange(60, dtype=np.uint16).reshape(3, 4, 5), "label"),
        (np.random.default_rng(1).standard_normal((3, 2, 3, 4)).astype(np.float32), "vector3"),
    ],
)
def test_volume_roundtrip(tmp_path, array, kind):
    io.write_volume(tmp_path / "v.xmv", array, kind)
    back, got = io.read_volume(tmp_path / "v.xmv")
    assert got == kind and back.dtype == array.dtype
    assert np.array_equal(back, array)


def test_volume_header_layout(tmp_path):
    io.write_volume(tmp_path / "v.xmv", np.zeros((2, 3, 4), np.uint16), "label")
    raw = (tmp_path / "v.xmv").read_bytes()
    assert raw.startswith(b"XMVOL1 2 3 4 label 1.0\n")
    assert len(raw) == len(b"XMVOL1 2 3 4 label 1.0\n") + 2 * 3 * 4 * 2


def test_truncated_or_mislabeled_volume_rejected(tmp_path):
    path = tmp_path / "v.xmv"
    io.write_volume(path, np.zeros((2, 2, 2), np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(io.FormatError, match="payload"):
        io.read_volume(path)
    path.write_bytes(raw.replace(b"scalar", b"label "))
    with pytest.raises(io.FormatError):
        io.read_volume(path)
    path.write_bytes(raw.replace(b"XMVOL1", b"XMVOL2"))
    with pytest.raises(io.FormatError):
        io.read_volume(path)
    path.write_bytes(raw.replace(b" 2 2 2 ", b" 2 x 2 "))
    with pytest.raises(io.FormatError):
        io.read_volume(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(io.FormatError):
        io.read_volume(path)


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = ArchConfig(size=(8, 8, 8), channels=4, levels=1, heads=(2, 2), blocks=2)
    params = init_params(cfg, seed=11, zero_head=False)
    io.save_checkpoint(tmp_path / "c.ckpt", cfg, params)
    cfg2, params2 = io.load_checkpoint(tmp_path / "c.ckpt")
    assert cfg2 == cfg
    assert list(params2) == list(params)
    assert all(np.array_equal(params[k].data, params2[k].data) for k in params)
    io.save_checkpoint(tmp_path / "d.ckpt", cfg2, params2)
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    cfg = ArchConfig(size=(8, 8, 8), channels=4, levels=1, heads=(2, 2))
    io.save_checkpoint(tmp_path / "c.ckpt", cfg, init_params(cfg))
    raw = (tmp_path / "c.ckpt").read_bytes()
    for bad in (b"XMCKPT2\n" + raw[8:], raw[:-3], raw + b"\0\0"):
        (tmp_path / "bad.ckpt").write_bytes(bad)
        with pytest.raises(io.FormatError):
            io.load_checkpoint(tmp_path / "bad.ckpt")


# -- config ----------------------------------------------------------------


def test_config_roundtrip(tiny_config, tmp_path):
    arch, tcfg = io.load_config(tiny_config)
    assert arch == ArchConfig(size=(8, 8, 8), channels=4, levels=1, heads=(2, 2))
    assert tcfg == TrainConfig(lr=0.005, iters=5, seed=3)
    (tmp_path / "again.cfg").write_text(io.arch_to_text(arch) + io.train_to_text(tcfg))
    assert io.load_config(tmp_path / "again.cfg") == (arch, tcfg)


def test_missing_key_is_named(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY_CFG.replace("heads = 2,2\n", ""))
    with pytest.raises(io.ConfigError, match="'heads'"):
        io.load_config(tmp_path / "c.cfg")


def test_unknown_key_rejected(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY_CFG + "momentum = 0.9\n")
    with pytest.raises(io.ConfigError, match="'momentum'"):
        io.load_config(tmp_path / "c.cfg")


def test_shipped_config_loads():
    arch, tcfg = io.load_config(Path(__file__).parents[1] / "configs" / "desk.cfg")
    assert arch == ArchConfig()
    assert tcfg == TrainConfig()


# -- commands --------------------------------------------------------------


def test_synth_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--seed", "7", "--size", "16", "--out-dir", str(tmp_path / d)]) == 0
    for name, _ in PAIR_FILES.values():
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    phi, kind = io.read_volume(tmp_path / "a" / "phi_gt.xmv")
    assert kind == "vector3" and jacobian_nonpositive_fraction(phi) == 0.0


def test_synth_rejects_incompatible_size(tmp_path, capsys):
    assert main(["synth", "--seed", "7", "--size", "15", "--out-dir", str(tmp_path / "x")]) == 1
    one_line_error(capsys, "CommandError")
    assert not (tmp_path / "x").exists()


def test_usage_error_is_one_line(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--seed", "1"])
    assert exc.value.code == 2
    one_line_error(capsys, "UsageError")


def test_train_zero_iters_saves_initialisation(tmp_path, tiny_config, tiny_pair):
    ckpt = tmp_path / "init.ckpt"
    assert main(["train", "--pairs", str(tiny_pair), "--config", str(tiny_config), "--out", str(ckpt), "--iters", "0"]) == 0
    arch, params = io.load_checkpoint(ckpt)
    expected = init_params(arch, seed=3)
    assert all(np.array_equal(params[k].data, expected[k].data) for k in expected)


def test_train_writes_loss_log(tmp_path, tiny_config, tiny_pair):
    log = tmp_path / "loss.csv"
    assert main(["train", "--pairs", str(tiny_pair), "--config", str(tiny_config),
                 "--out", str(tmp_path / "m.ckpt"), "--log", str(log)]) == 0
    rows = list(csv.reader(log.open()))
    assert rows[0] == ["iteration", "total", "similarity", "smoothness"]
    assert [int(r[0]) for r in rows[1:]] == list(range(5))
    assert all(float(r[1]) == pytest.approx(float(r[2]) + float(r[3]), rel=1e-6) for r in rows[1:])


def test_train_missing_key_exits_with_named_key(tmp_path, tiny_pair, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(TINY_CFG.replace("lr = 0.005\n", ""))
    assert main(["train", "--pairs", str(tiny_pair), "--config", str(cfg), "--out", str(tmp_path / "m.ckpt")]) == 1
    assert "'lr'" in one_line_error(capsys, "ConfigError")


def test_register_with_zero_head_and_eval(tmp_path, tiny_config, tiny_pair, capsys):
    ckpt = tmp_path / "init.ckpt"
    main(["train", "--pairs", str(tiny_pair), "--config", str(tiny_config), "--out", str(ckpt), "--iters", "0"])
    dvf, warped, wl = tmp_path / "dvf.xmv", tmp_path / "warped.xmv", tmp_path / "wl.xmv"
    assert main(["register", "--moving", str(tiny_pair / "moving.xmv"), "--fixed", str(tiny_pair / "fixed.xmv"),
                 "--checkpoint", str(ckpt), "--out-dvf", str(dvf), "--out-warped", str(warped),
                 "--moving-labels", str(tiny_pair / "moving_labels.xmv"), "--out-warped-labels", str(wl)]) == 0
    moving, _ = io.read_volume(tiny_pair / "moving.xmv")
    fixed, _ = io.read_volume(tiny_pair / "fixed.xmv")
    out, _ = io.read_volume(warped)
    phi, kind = io.read_volume(dvf)
    assert np.array_equal(out, moving)
    assert kind == "vector3" and phi.shape == (3,) + fixed.shape and np.all(phi == 0)
    capsys.readouterr()

    assert main(["eval", "--warped-labels", str(tiny_pair / "fixed_labels.xmv"),
                 "--fixed-labels", str(tiny_pair / "fixed_labels.xmv"), "--dvf", str(dvf)]) == 0
    assert capsys.readouterr().out.strip() == "dsc=1.000000 jac_nonpos_pct=0.000000"


def test_eval_hand_counted_cube(tmp_path, capsys):
    a = np.zeros((8, 8, 8), np.uint16)
    b = np.zeros((8, 8, 8), np.uint16)
    a[0:4, 0:4, 0:4] = 1
    b[2:6, 0:4, 0:4] = 1
    io.write_volume(tmp_path / "a.xmv", a, "label")
    io.write_volume(tmp_path / "b.xmv", b, "label")
    io.write_volume(tmp_path / "phi.xmv", np.zeros((3, 8, 8, 8), np.float32), "vector3")
    assert main(["eval", "--warped-labels", str(tmp_path / "a.xmv"), "--fixed-labels", str(tmp_path / "b.xmv"),
                 "--dvf", str(tmp_path / "phi.xmv")]) == 0
    assert capsys.readouterr().out.strip() == "dsc=0.500000 jac_nonpos_pct=0.000000"


def test_eval_rejects_wrong_kind(tmp_path, tiny_pair, capsys):
    assert main(["eval", "--warped-labels", str(tiny_pair / "moving.xmv"), "--fixed-labels",
                 str(tiny_pair / "fixed_labels.xmv"), "--dvf", str(tiny_pair / "phi_gt.xmv")]) == 1
    one_line_error(capsys, "FormatError")


def test_bench_csv(tmp_path, tiny_config, tiny_pair, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--sizes", "1,2", "--out", str(out), "--config", str(tiny_config),
                 "--pair", str(tiny_pair), "--iters", "2", "--repeats", "1"]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["window", "dsc", "jac_nonpos_pct", "forward_seconds"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert all(len(r) == 4 for r in rows)
    assert "qualitative, not gated" in capsys.readouterr().out


def test_dump_attention_matches_recomputation(tmp_path, tiny_config, tiny_pair):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--pairs", str(tiny_pair), "--config", str(tiny_config), "--out", str(ckpt), "--iters", "3"])
    out = tmp_path / "dump"
    assert main(["dump-attention", "--checkpoint", str(ckpt), "--pair", str(tiny_pair),
                 "--level", "0", "--direction", "mf", "--out", str(out)]) == 0
    files = sorted(out.glob("window_*.xma"))
    assert len(files) == 8  # 4^3 grid at level 0, 2^3 base windows

    # independent recomputation: checkpoint weights + pre-fusion grids from an untraced path
    arch, params = io.load_checkpoint(ckpt)
    moving, _ = io.read_volume(tiny_pair / "moving.xmv")
    fixed, _ = io.read_volume(tiny_pair / "fixed.xmv")
    m = patch_embed(Tensor(moving.astype(np.float64)), params["embed.w"], params["embed.b"]).data
    f = patch_embed(Tensor(fixed.astype(np.float64)), params["embed.w"], params["embed.b"]).data
    p = stage_rounds(params, arch, "enc0")[0]
    expected = dense_window_attention_weights(m, f, p, arch.window.base, arch.window.magnification)
    for path, ref in zip(files, expected):
        w, base_origin, search_origin = io.read_attention_window(path)
        assert np.abs(w.sum(-1) - 1.0).max() < 1e-5
        assert np.abs(w - ref).max() < 1e-5
        np.testing.assert_array_equal(search_origin, base_origin - 2)
    for axis in range(3):
        img = (out / f"attention_mip_axis{axis}.pgm").read_bytes()
        assert img.startswith(b"P5\n32 32\n255\n")


def test_attention_map_sums_received_weight():
    weights = np.zeros((1, 1, 1, 8))
    weights[0, 0, 0, :] = 1 / 8
    dump = AttentionDump(weights, np.zeros((1, 3), int), np.zeros((1, 3), int), (1, 1, 1), (2, 2, 2), np.ones((1, 8), bool))
    np.testing.assert_allclose(attention_map(dump, (2, 2, 2)), np.full((2, 2, 2), 1 / 8))


def test_missing_pair_directory(tmp_path, tiny_config, capsys):
    assert main(["train", "--pairs", str(tmp_path / "nope"), "--config", str(tiny_config),
                 "--out", str(tmp_path / "m.ckpt")]) == 1
    one_line_error(capsys, "CommandError")
