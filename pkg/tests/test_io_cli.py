"""File I/O, fixture, and command-line tests."""
import os
import struct

import numpy as np
import pytest

from linr.cli import build_parser, main, _build_config
from linr.errors import DepthError, ParseError
from linr.plyio import (
    generate_fixture,
    read_cloud,
    read_cloud_report,
    write_cloud,
)
from linr.voxel import SparseVoxelSet


def make_set(points):
    return SparseVoxelSet(np.array(sorted(points), dtype=np.int64))


class TestPlyRead:
    def test_ascii_three_vertices(self, tmp_path):
        p = tmp_path / "tri.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n1 2 3\n4 5 6\n7 8 9\n"
        )
        pc = read_cloud(p)
        assert [tuple(r) for r in pc.coords] == [(1, 2, 3), (4, 5, 6), (7, 8, 9)]

    def test_duplicate_vertex_reported(self, tmp_path):
        p = tmp_path / "dup.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n1 1 1\n1 1 1\n2 2 2\n"
        )
        pc, report = read_cloud_report(p)
        assert len(pc) == 2
        assert report.duplicates == 1

    def test_extra_vertex_property_skipped(self, tmp_path):
        p = tmp_path / "rgb.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nend_header\n1 2 3 255\n"
        )
        with pytest.warns(UserWarning):
            pc, report = read_cloud_report(p)
        assert report.skipped_properties == ["red"]
        assert [tuple(r) for r in pc.coords] == [(1, 2, 3)]

    def test_binary_little_endian(self, tmp_path):
        p = tmp_path / "bin.ply"
        header = (
            "ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n"
        )
        body = struct.pack("<6f", 1, 2, 3, 10, 20, 30)
        p.write_bytes(header.encode() + body)
        pc = read_cloud(p)
        assert [tuple(r) for r in pc.coords] == [(1, 2, 3), (10, 20, 30)]

    def test_truncated_binary(self, tmp_path):
        p = tmp_path / "trunc.ply"
        header = (
            "ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n"
        )
        p.write_bytes(header.encode() + struct.pack("<3f", 1, 2, 3))
        with pytest.raises(ParseError):
            read_cloud(p)

    def test_non_integer_needs_voxelize(self, tmp_path):
        p = tmp_path / "real.xyz"
        p.write_text("0.5 0.25 0.75\n0.1 0.9 0.4\n")
        with pytest.raises(ParseError):
            read_cloud(p)
        pc = read_cloud(p, voxelize=8)
        assert len(pc) == 2
        assert pc.coords.max() <= 255

    def test_depth_error(self, tmp_path):
        p = tmp_path / "deep.xyz"
        p.write_text("2000 0 0\n")
        with pytest.raises(DepthError):
            read_cloud(p, bit_depth=10)
        assert len(read_cloud(p, bit_depth=11)) == 1

    def test_unknown_extension(self, tmp_path):
        p = tmp_path / "c.pcd"
        p.write_text("hi")
        with pytest.raises(ParseError):
            read_cloud(p)


class TestWriteRead:
    @pytest.mark.parametrize("fmt,suffix", [
        ("binary", ".ply"), ("ascii", ".ply"), ("xyz", ".xyz"),
    ])
    def test_roundtrip(self, tmp_path, fmt, suffix):
        rng = np.random.default_rng(0)
        pc = SparseVoxelSet(rng.integers(0, 1024, size=(300, 3)))
        path = tmp_path / f"cloud{suffix}"
        write_cloud(pc, path, fmt=fmt)
        assert read_cloud(path) == pc

    def test_empty_set(self, tmp_path):
        pc = SparseVoxelSet(np.zeros((0, 3), dtype=np.int64))
        path = tmp_path / "empty.ply"
        write_cloud(pc, path, fmt="ascii")
        assert len(read_cloud(path)) == 0

    def test_bit_depth_maximum_survives(self, tmp_path):
        pc = make_set([(65535, 65535, 65535), (0, 0, 0)])
        path = tmp_path / "max.ply"
        write_cloud(pc, path, fmt="binary")
        assert read_cloud(path, bit_depth=16) == pc


class TestFixtures:
    def test_cube_count(self):
        assert len(generate_fixture("cube", 4)) == 64

    def test_random_deterministic(self):
        a = generate_fixture("random", 500, seed=7)
        b = generate_fixture("random", 500, seed=7)
        assert a == b and len(a) == 500
        c = generate_fixture("random", 500, seed=8)
        assert a != c

    def test_sphere_shell_matches_brute_force(self):
        r = 20
        pc = generate_fixture("sphere-shell", r)
        count = 0
        center = r + 0.5
        for x in range(2 * r + 2):
            for y in range(2 * r + 2):
                for z in range(2 * r + 2):
                    d = ((x - center) ** 2 + (y - center) ** 2
                         + (z - center) ** 2) ** 0.5
                    if r - 0.5 <= d < r + 0.5:
                        count += 1
        assert len(pc) == count

    def test_plane(self):
        pc = generate_fixture("plane", 8)
        assert len(pc) == 64
        assert np.all(pc.coords[:, 2] == 0)

    def test_offset_translates(self):
        a = generate_fixture("cube", 3)
        b = generate_fixture("cube", 3, offset=5)
        assert np.array_equal(a.coords + 5, b.coords)


class TestCli:
    def encode_args(self, seq, out):
        return ["encode", "--input", str(seq), "--out", str(out),
                "--gop", "4", "--epochs-first", "1", "--bits", "8"]

    @pytest.fixture()
    def sequence(self, tmp_path):
        seq = tmp_path / "seq"
        assert main(["fixture", "--kind", "cube", "--size", "5",
                     "--frames", "3", "--out", str(seq)]) == 0
        return seq

    def test_encode_verify_roundtrip(self, tmp_path, sequence):
        out = tmp_path / "s.linr"
        assert main(self.encode_args(sequence, out)) == 0
        assert out.exists()
        assert main(["verify", "--input", str(out),
                     "--against", str(sequence)]) == 0

    def test_decode_writes_frames(self, tmp_path, sequence):
        out = tmp_path / "s.linr"
        dec = tmp_path / "dec"
        main(self.encode_args(sequence, out))
        assert main(["decode", "--input", str(out), "--out", str(dec)]) == 0
        files = sorted(dec.iterdir())
        assert [f.name for f in files] == [f"frame_{k:04d}.ply" for k in range(3)]
        assert read_cloud(files[0]) == read_cloud(sequence / "frame_0000.ply")

    def test_decode_truncated_fails_without_output(self, tmp_path, sequence):
        out = tmp_path / "s.linr"
        main(self.encode_args(sequence, out))
        trunc = tmp_path / "t.linr"
        trunc.write_bytes(out.read_bytes()[:-5])
        dec = tmp_path / "never"
        assert main(["decode", "--input", str(trunc), "--out", str(dec)]) == 1
        assert not dec.exists()

    def test_verify_against_wrong_cloud(self, tmp_path, sequence):
        out = tmp_path / "s.linr"
        main(self.encode_args(sequence, out))
        other = tmp_path / "other.ply"
        write_cloud(generate_fixture("cube", 4), other)
        assert main(["verify", "--input", str(out),
                     "--against", str(other)]) == 1

    def test_stats_shares_sum_to_one(self, tmp_path, sequence, capsys):
        out = tmp_path / "s.linr"
        main(self.encode_args(sequence, out))
        capsys.readouterr()  # drop the encode chatter
        assert main(["stats", "--input", str(out)]) == 0
        lines = capsys.readouterr().out.splitlines()
        # Table rows carry two percentages: byte share, then decode time.
        section_shares = []
        for l in lines:
            if l.count("%") == 2:
                section_shares.append(float(l.split("%")[0].split()[-1]))
        assert len(section_shares) == 3  # params, lowest, one scale
        assert sum(section_shares) == pytest.approx(100.0, abs=1e-6)

    def test_stats_csv(self, tmp_path, sequence):
        out = tmp_path / "s.linr"
        csv = tmp_path / "pp.csv"
        main(self.encode_args(sequence, out))
        assert main(["stats", "--input", str(out),
                     "--per-point-csv", str(csv)]) == 0
        lines = csv.read_text().splitlines()
        assert lines[0] == "x,y,z,scale,bits"
        assert len(lines) > 100

    def test_usage_error_exit_two(self):
        with pytest.raises(SystemExit) as err:
            main(["encode", "--input", "x"])  # missing --out
        assert err.value.code == 2

    def test_missing_input_exit_one(self, tmp_path):
        assert main(["encode", "--input", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o.linr")]) == 1

    def test_config_precedence(self, tmp_path, monkeypatch):
        cfg = tmp_path / "run.conf"
        cfg.write_text("seed = 5\ngop = 7\n# comment\nepochs-first = 3\n")
        parser = build_parser()
        args = parser.parse_args([
            "encode", "--input", "x", "--out", "y",
            "--config", str(cfg), "--gop", "9",
        ])
        monkeypatch.delenv("LINR_SEED", raising=False)
        config = _build_config(args)
        assert config.gop_size == 9          # flag beats file
        assert config.seed == 5              # file beats default
        assert config.epochs_first == 3
        assert config.epochs_rest == 1       # default
        monkeypatch.setenv("LINR_SEED", "11")
        config = _build_config(args)
        assert config.seed == 11             # env beats file
        args2 = parser.parse_args([
            "encode", "--input", "x", "--out", "y",
            "--config", str(cfg), "--seed", "2",
        ])
        config = _build_config(args2)
        assert config.seed == 2              # flag beats env

    def test_fixture_single_file(self, tmp_path):
        out = tmp_path / "ball.ply"
        assert main(["fixture", "--kind", "sphere-shell", "--size", "6",
                     "--out", str(out)]) == 0
        assert len(read_cloud(out)) > 100
