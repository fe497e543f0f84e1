import numpy as np
import pytest

from superseg.labeling import LabelMap
from superseg.pipeline import RasterStack
from superseg.raster_io import (
    RasterFormatError, read_csv_grid, read_image, read_label_map, read_raster_stack, to_uint8,
    write_csv_grid, write_image, write_label_map, write_raster_stack,
)


def test_rsk1_round_trip_bitwise(tmp_path):
    data = np.random.default_rng(0).normal(size=(3, 2, 2)).astype(np.float32).astype(np.float64)
    data[1, 0, 1] = np.nan
    path = tmp_path / "a.rsk"
    write_raster_stack(RasterStack(data), path)
    assert path.stat().st_size == 18 + 12 * 4
    back = read_raster_stack(path)
    assert back.data.shape == (3, 2, 2)
    assert back.data.tobytes() == data.tobytes()
    write_raster_stack(back, tmp_path / "b.rsk")
    assert (tmp_path / "b.rsk").read_bytes() == path.read_bytes()


def test_rsk1_errors_name_offsets(tmp_path):
    path = tmp_path / "a.rsk"
    write_raster_stack(RasterStack(np.zeros((1, 2, 2))), path)
    blob = path.read_bytes()
    (tmp_path / "magic.rsk").write_bytes(b"XSK1" + blob[4:])
    with pytest.raises(RasterFormatError, match="byte 0"):
        read_raster_stack(tmp_path / "magic.rsk")
    (tmp_path / "short.rsk").write_bytes(blob[:-3])
    with pytest.raises(RasterFormatError, match="from byte 18"):
        read_raster_stack(tmp_path / "short.rsk")
    (tmp_path / "hdr.rsk").write_bytes(blob[:7])
    with pytest.raises(RasterFormatError, match="truncated header"):
        read_raster_stack(tmp_path / "hdr.rsk")


def test_csv_stack_and_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    grids = [rng.normal(size=(4, 4)) for _ in range(2)]
    grids[0][2, 3] = np.nan
    paths = []
    for i, g in enumerate(grids):
        p = tmp_path / f"ch{i}.csv"
        write_csv_grid(g, p)
        paths.append(p)
    stack = read_raster_stack(paths)
    assert stack.data.shape == (2, 4, 4)
    assert stack.names == ["ch0", "ch1"]
    assert stack.data.tobytes() == np.stack(grids).tobytes()


def test_csv_empty_cell_and_errors(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("1,,3\n4,5,6\n")
    g = read_csv_grid(p)
    assert np.isnan(g[0, 1]) and g[1, 2] == 6.0
    p.write_text("1,2,3\n4,5\n")
    with pytest.raises(RasterFormatError, match="row 2"):
        read_csv_grid(p)
    p.write_text("1,2\n4,x\n")
    with pytest.raises(RasterFormatError, match="row 2, column 2"):
        read_csv_grid(p)
    q = tmp_path / "h.csv"
    q.write_text("1,2,3\n")
    p.write_text("1,2\n")
    with pytest.raises(RasterFormatError, match="expected"):
        read_raster_stack([p, q])


def test_label_csv_example(tmp_path):
    p = tmp_path / "l.csv"
    write_label_map(LabelMap(np.array([[0, 1], [1, 1]]), 2), p)
    assert p.read_text() == "0,1\n1,1\n"
    assert read_label_map(p).labels.tolist() == [[0, 1], [1, 1]]


def test_pgm16_round_trip(tmp_path):
    lab = np.random.default_rng(2).integers(0, 60000, size=(7, 5))
    lab[0, 0] = 59999
    lm = LabelMap(lab, 60000)
    p = tmp_path / "l.pgm"
    write_label_map(lm, p)
    assert p.read_bytes().startswith(b"P5\n5 7\n65535\n")
    back = read_label_map(p)
    assert np.array_equal(back.labels, lab)
    write_label_map(back, tmp_path / "m.pgm")
    assert (tmp_path / "m.pgm").read_bytes() == p.read_bytes()


def test_pgm16_overflow(tmp_path):
    lab = np.arange(70000).reshape(280, 250)
    with pytest.raises(ValueError, match="16-bit"):
        write_label_map(LabelMap(lab, 70000), tmp_path / "x.pgm")


def test_png_conventions(tmp_path):
    assert np.all(to_uint8(np.full((3, 3), 4.2)) == 128)
    write_image(np.array([[0.0, 1.0], [1.0, 0.0]]), tmp_path / "a.png")
    assert read_image(tmp_path / "a.png").tolist() == [[0, 255], [255, 0]]
    write_image(np.zeros((4, 4)), tmp_path / "b.png", boundaries=np.arange(16).reshape(4, 4))
    assert np.all(read_image(tmp_path / "b.png") == 255)
    rgb = np.random.default_rng(3).normal(size=(3, 4, 4))
    write_image(rgb, tmp_path / "c.png")
    assert read_image(tmp_path / "c.png").shape == (4, 4, 3)
    with pytest.raises(ValueError):
        write_image(np.zeros((2, 2, 2)), tmp_path / "d.png")
