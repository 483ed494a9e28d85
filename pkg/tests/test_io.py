import json
import os
import struct

import numpy as np
import pytest

from warptomo.data import TiltSeries, VoxelVolume
from warptomo.errors import AnglesParseError, MrcFormatError, MrcModeError, MrcTruncatedError
from warptomo.io import (
    atomic_write_bytes,
    load_manifest,
    read_angles,
    read_mrc,
    read_tilt_series,
    read_volume,
    save_run_manifest,
    sha256_file,
    write_angles,
    write_loss_csv,
    write_mrc,
)


class TestMrc:
    def test_volume_round_trip_bitwise(self, rng, tmp_path):
        data = rng.uniform(-1, 1, (16, 16, 16)).astype(np.float32).astype(float)
        path = tmp_path / "v.mrc"
        write_mrc(VoxelVolume(data, voxel_size=2.5), path)
        vol = read_volume(path)
        assert np.array_equal(vol.data, data)
        assert vol.voxel_size == 2.5

    def test_stack_round_trip(self, rng, tmp_path):
        images = rng.uniform(0, 1, (7, 12, 12)).astype(np.float32).astype(float)
        path = tmp_path / "ts.mrc"
        write_mrc(TiltSeries(images, np.linspace(-30, 30, 7)), path)
        data, meta = read_mrc(path)
        assert np.array_equal(data, images.astype(np.float32))
        assert (meta["nz"], meta["ny"], meta["nx"]) == (7, 12, 12)

    def test_missing_map_magic_rejected(self, rng, tmp_path):
        path = tmp_path / "bad.mrc"
        write_mrc(VoxelVolume(rng.uniform(0, 1, (4, 4, 4))), path)
        blob = bytearray(path.read_bytes())
        blob[208:212] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(MrcFormatError):
            read_mrc(path)

    def test_unsupported_mode_rejected(self, rng, tmp_path):
        path = tmp_path / "mode1.mrc"
        write_mrc(VoxelVolume(rng.uniform(0, 1, (4, 4, 4))), path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<i", blob, 12, 1)
        path.write_bytes(bytes(blob))
        with pytest.raises(MrcModeError):
            read_mrc(path)

    def test_truncated_payload_rejected(self, rng, tmp_path):
        path = tmp_path / "trunc.mrc"
        write_mrc(VoxelVolume(rng.uniform(0, 1, (8, 8, 8))), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: 1024 + 100])
        with pytest.raises(MrcTruncatedError):
            read_mrc(path)

    def test_reads_externally_built_reference_header(self, tmp_path):
        # hand-built MRC2014 file using only the published byte offsets
        nx, ny, nz = 3, 4, 5
        voxel = 1.5
        header = bytearray(1024)
        struct.pack_into("<3i", header, 0, nx, ny, nz)
        struct.pack_into("<i", header, 12, 2)
        struct.pack_into("<3i", header, 28, nx, ny, nz)
        struct.pack_into("<3f", header, 40, nx * voxel, ny * voxel, nz * voxel)
        struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
        struct.pack_into("<3i", header, 64, 1, 2, 3)
        header[208:212] = b"MAP "
        header[212:216] = bytes([0x44, 0x44, 0, 0])
        payload = np.arange(nx * ny * nz, dtype="<f4").tobytes()
        path = tmp_path / "ref.mrc"
        path.write_bytes(bytes(header) + payload)

        data, meta = read_mrc(path)
        assert data.shape == (nz, ny, nx)
        assert meta["voxel_size"] == pytest.approx(voxel)
        assert np.array_equal(data.ravel(), np.arange(nx * ny * nz, dtype=np.float32))

    def test_statistics_recomputed_on_write(self, rng, tmp_path):
        data = rng.uniform(-3, 7, (6, 6, 6))
        path = tmp_path / "s.mrc"
        write_mrc(VoxelVolume(data), path)
        _, meta = read_mrc(path)
        payload = data.astype(np.float32)
        assert meta["dmin"] == pytest.approx(payload.min())
        assert meta["dmax"] == pytest.approx(payload.max())
        assert meta["dmean"] == pytest.approx(payload.mean(), rel=1e-6)

    def test_extended_header_skipped(self, rng, tmp_path):
        path = tmp_path / "ext.mrc"
        write_mrc(VoxelVolume(rng.uniform(0, 1, (4, 4, 4))), path)
        blob = bytearray(path.read_bytes())
        extra = b"\xab" * 128
        struct.pack_into("<i", blob, 92, len(extra))
        path.write_bytes(bytes(blob[:1024]) + extra + bytes(blob[1024:]))
        data, _ = read_mrc(path)
        assert data.shape == (4, 4, 4)

    def test_2d_image_written_as_single_section(self, rng, tmp_path):
        img = rng.uniform(0, 1, (9, 9))
        path = tmp_path / "img.mrc"
        write_mrc(img, path)
        data, meta = read_mrc(path)
        assert meta["nz"] == 1 and data.shape == (1, 9, 9)


class TestAngles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "a.tlt"
        write_angles([-60.0, -58.0, 0.0, 60.0], path)
        assert read_angles(path) == [-60.0, -58.0, 0.0, 60.0]

    def test_parse_simple(self, tmp_path):
        path = tmp_path / "a.tlt"
        path.write_text("0.0\n2.0\n")
        assert read_angles(path) == [0.0, 2.0]

    def test_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "a.tlt"
        path.write_text("\n-1.5\n\n3.25\n\n")
        assert read_angles(path) == [-1.5, 3.25]

    def test_empty_file_empty_list(self, tmp_path):
        path = tmp_path / "a.tlt"
        path.write_text("")
        assert read_angles(path) == []

    def test_parse_error_carries_line_number(self, tmp_path):
        path = tmp_path / "a.tlt"
        path.write_text("1.0\nfoo\n3.0\n")
        with pytest.raises(AnglesParseError, match="2"):
            read_angles(path)

    def test_default_protocol_file_matches_angle_list(self, tmp_path):
        from warptomo.simulate import default_angles

        path = tmp_path / "a.tlt"
        write_angles(default_angles(), path)
        got = read_angles(path)
        assert len(got) == 61
        assert got == list(default_angles())

    def test_count_mismatch_rejected(self, rng, tmp_path):
        mrc = tmp_path / "ts.mrc"
        write_mrc(TiltSeries(rng.uniform(0, 1, (3, 4, 4)), np.array([-10.0, 0, 10])), mrc)
        tlt = tmp_path / "a.tlt"
        write_angles([0.0, 1.0], tlt)
        with pytest.raises(AnglesParseError):
            read_tilt_series(mrc, tlt)


class TestManifest:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "manifest.json"
        config = {"epochs": 5, "seed": 3, "lr_volume": 0.01}
        save_run_manifest(path, command="train", config=config, seeds={"train": 3},
                          input_hashes={"ts": "abc"}, outputs=["loss.csv"])
        doc = load_manifest(path)
        assert doc["config"] == config
        assert doc["command"] == "train"
        assert "numpy" in doc["versions"] and "kernel_backend" in doc["versions"]

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        path = tmp_path / "out.bin"
        atomic_write_bytes(path, b"hello")
        assert path.read_bytes() == b"hello"
        assert os.listdir(tmp_path) == ["out.bin"]

    def test_sha256_file(self, tmp_path):
        path = tmp_path / "x"
        path.write_bytes(b"abc")
        assert sha256_file(path) == (
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )


class TestCsv:
    def test_loss_csv_layout(self, tmp_path):
        path = tmp_path / "loss.csv"
        rows = [
            {"epoch": 0, "total_loss": 1.5, "data_loss": 1.25, "reg_loss": 0.25,
             "wall_seconds": 0.1},
            {"epoch": 1, "total_loss": 1.0, "data_loss": 0.9, "reg_loss": 0.1,
             "wall_seconds": 0.2},
        ]
        write_loss_csv(path, rows)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,total_loss,data_loss,reg_loss,wall_seconds"
        assert len(lines) == 3
        assert lines[1].startswith("0,1.5,1.25,0.25,")

    def test_fsc_csv_layout(self, rng, tmp_path):
        from warptomo.io import write_fsc_csv
        from warptomo.metrics import fsc

        v = rng.uniform(0, 1, (8, 8, 8))
        curve = fsc(v, v)
        path = tmp_path / "fsc.csv"
        write_fsc_csv(path, curve, voxel_size=2.0)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "shell_index,spatial_frequency,fsc"
        first = lines[1].split(",")
        assert int(first[0]) == 1
        assert float(first[1]) == pytest.approx(1.0 / (8 * 2.0))
