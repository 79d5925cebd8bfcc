import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from ncollage import cli, codec, metrics
from ncollage.raster import PartitionScheme, RasterImage, load_image, save_image
from ncollage.synthetic import random_pifs_code, selfsimilar_image

DATA = Path(__file__).parent / "data"


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "x.pgm"
    save_image(selfsimilar_image(32, seed=5), path)
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out else None)


def test_encode_pifs_and_inspect(capsys, image, tmp_path):
    code, info = run(capsys, "encode", "--method", "pifs", "--range", 4, "--domain", 8, "--stride", 8, image, tmp_path / "o.nc")
    assert code == 0 and info["kind"] == "pifs" and info["bpp"] > 0
    code, head = run(capsys, "inspect", tmp_path / "o.nc")
    assert code == 0 and head["kind"] == "pifs" and head["width"] == 32


def test_encode_collage_header_echo(capsys, image, tmp_path):
    code, info = run(capsys, "encode", "--aux", 10, "--epsilon", 4, "--range", 4, "--domain", 8, "--stride", 8,
                     "--gd-steps", 5, image, tmp_path / "o.nc")
    assert code == 0 and info["V"] == 10 and info["epsilon"] == 4
    head = codec.deserialize(tmp_path / "o.nc").header()
    assert head["V"] == 10 and head["epsilon"] == 4


def test_decode_respects_ct_bound(capsys, image, tmp_path):
    _, info = run(capsys, "encode", "--range", 4, "--domain", 8, "--stride", 4, "--gd-steps", 20, image, tmp_path / "o.nc")
    code, dec = run(capsys, "decode", "--tolerance", 1e-10, "--max-iters", 2000, tmp_path / "o.nc", tmp_path / "y.pgm")
    assert code == 0 and dec["converged"]
    x = RasterImage.from_array(np.clip(load_image(image).data, 0, 1))
    stored = codec.deserialize(tmp_path / "o.nc").dequantize()[0]
    from ncollage.collage import SolveConfig, decode

    y = decode(stored, SolveConfig(tolerance=1e-12, max_iters=5000))
    assert metrics.psnr(x, y) >= info["ct_psnr_lower"] - 1e-6


def test_decode_scale(capsys, image, tmp_path):
    run(capsys, "encode", "--range", 4, "--domain", 8, "--stride", 8, "--gd-steps", 0, image, tmp_path / "o.nc")
    code, info = run(capsys, "decode", "--scale", 2, tmp_path / "o.nc", tmp_path / "y.pgm")
    assert code == 0 and (info["width"], info["height"]) == (64, 64)
    assert load_image(tmp_path / "y.pgm").shape == (1, 64, 64)


def test_decode_corrupt_container(capsys, tmp_path):
    (tmp_path / "bad.nc").write_bytes(b"XCOLLAGE" + bytes(100))
    assert cli.main(["decode", str(tmp_path / "bad.nc"), str(tmp_path / "y.pgm")]) == 3
    assert "FormatError" in capsys.readouterr().err


def test_decode_non_contractive(capsys, tmp_path):
    code = random_pifs_code(np.random.default_rng(0), 8, 8, PartitionScheme(2, 4, 4))
    q = codec.quantize_code(code)
    q = codec.QuantizedPifs(q.scheme, 8, 8, 1, q.domain_index, q.aug, np.full(16, 1.5, np.float16), q.b)
    path = tmp_path / "hot.nc"
    path.write_bytes(codec.CodeContainer("pifs", 8, 8, (1, 1), [q]).to_bytes())
    assert cli.main(["decode", str(path), str(tmp_path / "y.pgm")]) == 4
    assert cli.main(["decode", "--force", "--max-iters", "3", str(path), str(tmp_path / "y.pgm")]) == 0


def test_missing_input_exit_3(tmp_path):
    assert cli.main(["encode", str(tmp_path / "nope.pgm"), str(tmp_path / "o.nc")]) == 3


@pytest.mark.parametrize(
    "argv",
    [["encode", "--epsilon", "7"], ["encode", "--range", "8", "--domain", "4"], ["encode", "--method", "wavelet"],
     ["encode", "--method", "pifs", "--aux", "2"]],
)
def test_usage_errors(image, tmp_path, argv):
    assert cli.main(argv + [str(image), str(tmp_path / "o.nc")]) == 2


def test_fractalize_scales(capsys, image, tmp_path):
    code, info = run(capsys, "fractalize", "--scales", "1,2", "--gd-steps", 10, image, tmp_path / "f.pgm")
    assert code == 0
    assert [o["width"] for o in info["outputs"]] == [32, 64]
    assert load_image(tmp_path / "f_x2.pgm").shape == (1, 64, 64)
    code, _ = run(capsys, "fractalize", "--scales", "1", "--gd-steps", 0, image, tmp_path / "g_{scale}.pgm")
    assert code == 0 and load_image(tmp_path / "g_1.pgm").shape == (1, 32, 32)


def test_fractalize_non_square(tmp_path):
    save_image(RasterImage.from_array(np.zeros((8, 16))), tmp_path / "r.pgm")
    assert cli.main(["fractalize", str(tmp_path / "r.pgm"), str(tmp_path / "o.pgm")]) == 2


def test_dct_and_psnr(capsys, image, tmp_path):
    code, info = run(capsys, "dct", "--patch", 8, image, tmp_path / "d.pgm")
    assert code == 0 and info["bpp"] == 0.5
    code, p = run(capsys, "psnr", image, image)
    assert code == 0 and p["psnr_db"] == 100.0


def _bench(capsys, tmp_path, folder, threads, tag):
    return run(capsys, "bench", "--range", 4, "--domain", 8, "--stride", 8, "--block", 16, "--patch", 8,
               "--gd-steps", 5, "--repeats", 1, "--threads", threads, "--methods", "pifs,collage,dct",
               "--output", tmp_path / tag, folder)


def test_bench_reports(capsys, tmp_path):
    folder = tmp_path / "imgs"
    folder.mkdir()
    for i in range(2):
        save_image(selfsimilar_image(32, seed=i), folder / f"{i}.pgm")
    code, info = _bench(capsys, tmp_path, folder, 1, "one")
    assert code == 0 and info["rows"] == 6 and info["errors"] == 0
    _bench(capsys, tmp_path, folder, 8, "eight")
    strip = lambda p: [{k: r[k] for k in ("image", "method", "bpp", "psnr_db", "error")}
                       for r in json.load(open(p))["rows"]]
    assert strip(tmp_path / "one.json") == strip(tmp_path / "eight.json")
    assert len((tmp_path / "one.csv").read_text().strip().splitlines()) == 7


def test_bench_argument_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["bench", str(empty)]) == 2
    shutil.copy(DATA / "selfsimilar64.pgm", empty)
    assert cli.main(["bench", "--methods", "jpeg", str(empty)]) == 2


def test_thread_env_override(monkeypatch, capsys, image, tmp_path):
    monkeypatch.setenv("NCOLLAGE_THREADS", "zero")
    assert cli.main(["encode", "--method", "pifs", str(image), str(tmp_path / "o.nc")]) == 2
