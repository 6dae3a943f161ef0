import csv
import io
import math
import re
from contextlib import redirect_stdout

import numpy as np
import pytest
from helpers import tiny_bundle

from cwic import codec, container
from cwic.cli import main
from cwic.pipeline import parse_config
from cwic.errors import ConfigurationError
from cwic.ppm import read_ppm, to_planes, write_ppm

SMALL = """\
train_dir = {corpus}
model_out = {model}
seed = 3
channels = 8, 12, 16   # desk-scale widths
steps = 200
pretrain_steps = 50
batch_size = 8
lr = 1e-3
quant_lr = 1e-3
code_groups = 2
imp_groups = 2
tcae_resblocks = 1
tcae_steps = 100
tcae_batch = 8
"""


def run(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main([str(a) for a in argv])
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("make-toy-corpus", "--count", 64, "--seed", 1, d / "corpus")[0] == 0
    cfg = d / "run.cfg"
    cfg.write_text(SMALL.format(corpus=d / "corpus", model=d / "toy.cwmd"))
    code, out = run("train", "--config", cfg)
    assert code == 0, out
    return d


class TestTrain:
    def test_model_loads(self, trained):
        bundle, mid = container.load_model((trained / "toy.cwmd").read_bytes())
        assert (bundle.n, bundle.L, bundle.T) == (8, 4, 4) and len(mid) == 16

    def test_metrics_csv(self, trained):
        rows = list(csv.DictReader(open(trained / "toy.cwmd.metrics.csv")))
        assert len(rows) == 200
        assert list(rows[0]) == ["phase", "step", "lr", "L_D", "L_R", "L_Quant", "sum_m", "bpp_est"]
        assert rows[0]["phase"] == "pretrain" and rows[-1]["phase"] == "finetune"
        tcae = list(csv.DictReader(open(trained / "toy.cwmd.tcae.csv")))
        assert {r["model"] for r in tcae} == {"code", "importance"}

    def test_seeded_run_is_reproducible(self, trained, tmp_path):
        cfg = tmp_path / "again.cfg"
        cfg.write_text(SMALL.format(corpus=trained / "corpus", model=tmp_path / "again.cwmd"))
        assert run("train", "--config", cfg)[0] == 0
        assert (tmp_path / "again.cwmd.metrics.csv").read_bytes() == (trained / "toy.cwmd.metrics.csv").read_bytes()
        assert (tmp_path / "again.cwmd").read_bytes() == (trained / "toy.cwmd").read_bytes()

    def test_missing_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("train_dir = x\n")
        assert main(["train", "--config", str(cfg)]) == 4
        assert "model_out" in capsys.readouterr().err

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="colour"):
            parse_config("train_dir = a\nmodel_out = b\ncolour = red\n")

    def test_overrides(self):
        cfg = parse_config("train_dir = a\nmodel_out = b\nsteps = 10\npretrain_steps = 5\n", seed=7, loss="msssim")
        assert (cfg.seed, cfg.loss, cfg.steps) == (7, "msssim", 10)

    def test_missing_corpus(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"train_dir = {tmp_path / 'nowhere'}\nmodel_out = {tmp_path / 'm'}\n")
        assert main(["train", "--config", str(cfg)]) == 3

    def test_unreadable_image_named(self, tmp_path, capsys):
        (tmp_path / "imgs").mkdir()
        write_ppm(tmp_path / "imgs" / "a.ppm", np.zeros((8, 8, 3), np.uint8))
        (tmp_path / "imgs" / "b.ppm").write_bytes(b"P6\n8 8\n255\n" + bytes(10))
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"train_dir = {tmp_path / 'imgs'}\nmodel_out = {tmp_path / 'm'}\n")
        assert main(["train", "--config", str(cfg)]) == 3
        assert "b.ppm" in capsys.readouterr().err


class TestCodec:
    def test_encode_decode(self, trained, tmp_path):
        src = trained / "corpus" / "img00003.ppm"
        code, out = run("encode", "--model", trained / "toy.cwmd", src, tmp_path / "a.cwic")
        assert code == 0
        data = (tmp_path / "a.cwic").read_bytes()
        bpp = float(re.search(r"bpp=([\d.]+)", out).group(1))
        assert bpp == pytest.approx(8 * len(data) / (32 * 32), abs=1e-6)
        assert f"bytes={len(data)}" in out

        assert run("decode", "--model", trained / "toy.cwmd", tmp_path / "a.cwic", tmp_path / "on.ppm")[0] == 0
        args = ("decode", "--model", trained / "toy.cwmd", "--parallel-planes", "off")
        assert run(*args, tmp_path / "a.cwic", tmp_path / "off.ppm")[0] == 0
        assert (tmp_path / "on.ppm").read_bytes() == (tmp_path / "off.ppm").read_bytes()
        assert read_ppm(tmp_path / "on.ppm").shape == (32, 32, 3)

    def test_transport_matches_library(self, trained, tmp_path):
        bundle, mid = container.load_model((trained / "toy.cwmd").read_bytes())
        x = to_planes(read_ppm(trained / "corpus" / "img00000.ppm"))
        run("encode", "--model", trained / "toy.cwmd", trained / "corpus" / "img00000.ppm", tmp_path / "b.cwic")
        enc = codec.encode_image(bundle, x, mid=mid)
        assert (tmp_path / "b.cwic").read_bytes() == enc.data
        assert np.array_equal(codec.decode_image(bundle, enc.data, mid=mid).z, enc.z)

    def test_constant_image_beats_uniform_baseline(self, trained, tmp_path):
        # baseline n*log2(T)/64 counts code bits only, so the fixed header is left out
        write_ppm(tmp_path / "const.ppm", np.full((32, 32, 3), 120, np.uint8))
        code, _ = run("encode", "--model", trained / "toy.cwmd", tmp_path / "const.ppm", tmp_path / "c.cwic")
        assert code == 0
        payload = (tmp_path / "c.cwic").stat().st_size - container.HEADER_SIZE
        assert 8 * payload / (32 * 32) < 8 * math.log2(4) / 64

    def test_auto_pad_flag(self, trained, tmp_path):
        write_ppm(tmp_path / "odd.ppm", np.random.default_rng(0).integers(0, 256, (13, 21, 3), dtype=np.uint8))
        m = trained / "toy.cwmd"
        assert run("encode", "--model", m, tmp_path / "odd.ppm", tmp_path / "o.cwic")[0] == 4
        assert run("encode", "--model", m, "--auto-pad", tmp_path / "odd.ppm", tmp_path / "o.cwic")[0] == 0
        assert run("decode", "--model", m, tmp_path / "o.cwic", tmp_path / "o.ppm")[0] == 0
        assert read_ppm(tmp_path / "o.ppm").shape == (13, 21, 3)

    def test_exit_codes(self, trained, tmp_path, capsys):
        m = trained / "toy.cwmd"
        assert main(["encode", "--model", str(m), str(tmp_path / "missing.ppm"), str(tmp_path / "x")]) == 3
        (tmp_path / "junk.cwic").write_bytes(b"garbage")
        assert main(["decode", "--model", str(m), str(tmp_path / "junk.cwic"), str(tmp_path / "y.ppm")]) == 5
        assert "not a CWIC stream" in capsys.readouterr().err
        bad = bytearray(m.read_bytes())
        bad[200] ^= 1
        (tmp_path / "bad.cwmd").write_bytes(bytes(bad))
        src = trained / "corpus" / "img00000.ppm"
        assert main(["encode", "--model", str(tmp_path / "bad.cwmd"), str(src), str(tmp_path / "z")]) == 5
        with pytest.raises(SystemExit) as exc:
            main(["encode"])
        assert exc.value.code == 2

    def test_wrong_model(self, trained, tmp_path, capsys):
        other = tiny_bundle(n=8, L=4, T=4)
        (tmp_path / "other.cwmd").write_bytes(container.save_model(other))
        src = trained / "corpus" / "img00000.ppm"
        run("encode", "--model", trained / "toy.cwmd", src, tmp_path / "s.cwic")
        assert main(["decode", "--model", str(tmp_path / "other.cwmd"), str(tmp_path / "s.cwic"), str(tmp_path / "o.ppm")]) == 4


class TestEvalInspect:
    def test_eval_csv(self, trained, tmp_path):
        imgs = tmp_path / "imgs"
        imgs.mkdir()
        for i in range(3):
            (imgs / f"p{i}.ppm").write_bytes((trained / "corpus" / f"img0000{i}.ppm").read_bytes())
        code, _ = run("eval", "--model", trained / "toy.cwmd", "--output", tmp_path / "e.csv", imgs)
        assert code == 0
        rows = list(csv.DictReader(open(tmp_path / "e.csv")))
        assert [r["image"] for r in rows] == ["p0.ppm", "p1.ppm", "p2.ppm", "mean"]
        for r in rows[:3]:
            _, out = run("encode", "--model", trained / "toy.cwmd", imgs / r["image"], tmp_path / "t.cwic")
            assert r["bpp"] == re.search(r"bpp=([\d.]+)", out).group(1)
            assert 0 < float(r["psnr"]) < 99 and 0 < float(r["msssim"]) <= 1
        assert float(rows[3]["bpp"]) == pytest.approx(np.mean([float(r["bpp"]) for r in rows[:3]]), abs=1e-6)

    def test_eval_empty_dir(self, trained, tmp_path):
        assert run("eval", "--model", trained / "toy.cwmd", tmp_path)[0] == 3

    def test_inspect(self, trained, tmp_path):
        src = trained / "corpus" / "img00005.ppm"
        _, out = run("encode", "--model", trained / "toy.cwmd", src, tmp_path / "i.cwic")
        sum_m = int(re.search(r"sum_m=(\d+)", out).group(1))
        code, text = run("inspect", "--model", trained / "toy.cwmd", tmp_path / "i.cwic")
        assert code == 0
        assert "32x32" in text and "8, 4, 4" in text
        counts = [int(c) for c in re.findall(r"level\s+\d+: (\d+)", text)]
        assert len(counts) == 4 and sum(counts) == 16
        assert sum((8 // 4) * lv * c for lv, c in enumerate(counts)) == sum_m
        assert f"sum_m            {sum_m}" in text
        art = text.split("importance map:\n")[1].splitlines()
        assert len(art) == 4 and all(len(row) == 4 for row in art)

    def test_inspect_header_only(self, trained, tmp_path):
        run("encode", "--model", trained / "toy.cwmd", trained / "corpus" / "img00001.ppm", tmp_path / "h.cwic")
        code, text = run("inspect", tmp_path / "h.cwic")
        assert code == 0 and "model id" in text and "--model" in text
