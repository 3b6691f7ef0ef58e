import math

import numpy as np
import pytest

from qsample.cli import export_bvec, main, plot_dirs_svg
from qsample.sphere import DirectionSet, load_directions_csv, save_directions_csv
from qsample.tract import load_qtrk
from qsample.volume import load_qvol


def run(*argv):
    return main([str(a) for a in argv])


class TestDispatch:
    def test_unknown_subcommand_exits_1(self, capsys):
        assert run("frobnicate") == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_flag_exits_1(self, tmp_path):
        assert run("design", "--n", "3", "--frob", "x", "--out", tmp_path / "d.csv") == 1

    def test_missing_file_exits_2(self, tmp_path, capsys):
        assert run("score-psnr", "--recon", tmp_path / "a.qvol", "--ref", tmp_path / "b.qvol", "--out", tmp_path / "r") == 2
        assert "error" in capsys.readouterr().err

    def test_design_writes_csv_and_manifest(self, tmp_path):
        out = tmp_path / "d.csv"
        assert run("design", "--n", "6", "--seed", "1", "--out", out) == 0
        dirs = load_directions_csv(out)
        assert len(dirs) == 6
        manifest = (tmp_path / "d.csv.manifest").read_text()
        assert "subcommand: design" in manifest
        assert "seed: 1" in manifest

    def test_design_rerun_bit_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run("design", "--n", "5", "--seed", "3", "--out", a) == 0
        assert run("design", "--n", "5", "--seed", "3", "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()


class TestPhantomAndResample:
    def test_phantom_outputs(self, tmp_path):
        out = tmp_path / "p.qvol"
        assert run(
            "phantom", "--preset", "crossing(60)", "--dims", "16", "16", "16",
            "--n-dirs", "12", "--seed", "2", "--out", out,
        ) == 0
        vol = load_qvol(out)
        assert vol.dims == (16, 16, 16) and vol.n_channels == 12
        assert (tmp_path / "p.truth.txt").exists()
        assert (tmp_path / "p.fibermask.qvol").exists()
        assert (tmp_path / "p.roi-cross-a-a.qvol").exists()

    def test_resample_identity(self, tmp_path):
        vol_path = tmp_path / "p.qvol"
        run("phantom", "--preset", "straight", "--dims", "16", "16", "16",
            "--n-dirs", "12", "--out", vol_path)
        run("design", "--n", "4", "--seed", "0", "--out", tmp_path / "d.csv")
        out = tmp_path / "sub.qvol"
        assert run("resample", "--in", vol_path, "--dirs", tmp_path / "d.csv", "--out", out) == 0
        sub = load_qvol(out)
        assert sub.n_channels == 4

    def test_resample_sh_interp_back_to_target(self, tmp_path):
        vol_path = tmp_path / "p.qvol"
        run("phantom", "--preset", "straight", "--dims", "16", "16", "16",
            "--n-dirs", "12", "--out", vol_path)
        run("design", "--n", "6", "--seed", "0", "--out", tmp_path / "d.csv")
        vol = load_qvol(vol_path)
        save_directions_csv(tmp_path / "target.csv", vol.dirs)
        out = tmp_path / "rec.qvol"
        assert run(
            "resample", "--in", vol_path, "--dirs", tmp_path / "d.csv",
            "--recon", "sh-interp", "--target-dirs", tmp_path / "target.csv", "--out", out,
        ) == 0
        assert load_qvol(out).n_channels == 12


@pytest.fixture(scope="module")
def tracked(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trk")
    vol = tmp / "p.qvol"
    run("phantom", "--preset", "straight", "--dims", "16", "16", "16",
        "--n-dirs", "30", "--seed", "1", "--out", vol)
    out = tmp / "t.qtrk"
    code = run("track", "--in", vol, "--seed-mask", tmp / "p.fibermask.qvol", "--out", out)
    return code, tmp, out


class TestTrackAndScore:
    def test_track_writes_qtrk(self, tracked):
        code, tmp, out = tracked
        assert code == 0
        tractogram = load_qtrk(out)
        assert len(tractogram) > 0

    def test_score_connections(self, tracked, capsys):
        code, tmp, out = tracked
        report = tmp / "conn"
        assert run("score-connections", "--tract", out, "--truth", tmp / "p.truth.txt", "--out", report) == 0
        text = (tmp / "conn.txt").read_text()
        assert "vc:" in text
        csv_text = (tmp / "conn.csv").read_text()
        assert csv_text.startswith("vc,ic,nc,vb,ib,ol,or,f1")

    def test_score_bd_self_is_zero(self, tracked, capsys):
        code, tmp, out = tracked
        assert run("score-bd", "--test", out, "--ref", out, "--truth", tmp / "p.truth.txt", "--out", tmp / "bd") == 0
        text = (tmp / "bd.txt").read_text()
        assert "bd_mean: 0.0" in text
        assert "# bins: 32" in text

    def test_score_psnr_inf_sentinel(self, tracked, capsys):
        code, tmp, _ = tracked
        assert run("score-psnr", "--recon", tmp / "p.qvol", "--ref", tmp / "p.qvol", "--out", tmp / "ps") == 0
        assert "psnr_db: inf" in (tmp / "ps.txt").read_text()


class TestTrain:
    def test_train_and_rerun_deterministic(self, tmp_path):
        vol = tmp_path / "p.qvol"
        run("phantom", "--preset", "crossing(90)", "--dims", "16", "16", "16",
            "--n-dirs", "12", "--seed", "3", "--snr", "25", "--out", vol)
        for tag in ("a", "b"):
            assert run(
                "train", "--train", vol, "--val", vol, "--af", "2", "--mode", "learned",
                "--recon", "linear", "--epochs", "3", "--seed", "5",
                "--out-dir", tmp_path / tag,
            ) == 0
        for name in ("dirs.csv", "loss_history.csv", "dir_history.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_train_config_file_mirrors_flags(self, tmp_path):
        vol = tmp_path / "p.qvol"
        run("phantom", "--preset", "crossing(90)", "--dims", "16", "16", "16",
            "--n-dirs", "12", "--seed", "3", "--snr", "25", "--out", vol)
        cfg = tmp_path / "train.cfg"
        cfg.write_text("af=2\nmode=learned\nrecon=linear\nepochs=3\nseed=5\n")
        assert run("train", "--train", vol, "--val", vol, "--config", cfg,
                   "--out-dir", tmp_path / "c") == 0
        assert (tmp_path / "c" / "dirs.csv").exists()
        assert (tmp_path / "c" / "recon.npz").exists()

    def test_bad_config_key_exits_2(self, tmp_path):
        vol = tmp_path / "p.qvol"
        run("phantom", "--preset", "straight", "--dims", "16", "16", "16",
            "--n-dirs", "6", "--out", vol)
        cfg = tmp_path / "train.cfg"
        cfg.write_text("bogus=1\n")
        assert run("train", "--train", vol, "--config", cfg, "--out-dir", tmp_path / "x") == 2


class TestExportBvec:
    def test_format(self, tmp_path):
        dirs = DirectionSet([0.4, 1.0, 2.0], [0.1, 2.5, 5.0])
        export_bvec(dirs, 1000.0, 1, tmp_path / "g.bvec", tmp_path / "g.bval")
        bvec_lines = (tmp_path / "g.bvec").read_text().strip().split("\n")
        assert len(bvec_lines) == 3
        columns = [line.split() for line in bvec_lines]
        assert all(len(c) == 4 for c in columns)
        assert columns[0][0] == "0.00000000"
        bvals = (tmp_path / "g.bval").read_text().split()
        assert bvals == ["0", "1000", "1000", "1000"]

    def test_round_trip_and_hemisphere(self, tmp_path):
        dirs = DirectionSet([0.4, 1.0, 2.6], [0.1, 2.5, 5.0])
        export_bvec(dirs, 1000.0, 0, tmp_path / "g.bvec", tmp_path / "g.bval")
        rows = [list(map(float, line.split())) for line in (tmp_path / "g.bvec").read_text().strip().split("\n")]
        vecs = np.array(rows).T
        assert np.all(vecs[:, 2] >= 0)  # canonical hemisphere
        original = dirs.to_cartesian()
        for v, o in zip(vecs, original):
            assert min(np.linalg.norm(v - o), np.linalg.norm(v + o)) < 1e-6

    def test_cli_subcommand(self, tmp_path):
        run("design", "--n", "3", "--seed", "0", "--out", tmp_path / "d.csv")
        assert run("export-bvec", "--dirs", tmp_path / "d.csv", "--b-value", "2000",
                   "--n-b0", "2", "--out-bvec", tmp_path / "o.bvec",
                   "--out-bval", tmp_path / "o.bval") == 0
        assert (tmp_path / "o.bval").read_text().split()[:2] == ["0", "0"]


class TestPlot:
    def test_marker_count_and_center(self):
        dirs = DirectionSet([0.0, 1.2], [0.0, 0.7])
        svg = plot_dirs_svg([dirs]).decode()
        assert svg.count("<circle") == 3  # outline + 2 markers
        assert 'cx="180.0000" cy="180.0000"' in svg  # the pole lands at the center

    def test_deterministic_bytes(self, tmp_path):
        dirs = DirectionSet([0.3, 0.9, 1.4], [0.0, 2.0, 4.0])
        assert plot_dirs_svg([dirs]) == plot_dirs_svg([dirs])

    def test_two_sets_cli(self, tmp_path):
        run("design", "--n", "4", "--seed", "0", "--out", tmp_path / "a.csv")
        run("design", "--n", "6", "--seed", "1", "--out", tmp_path / "b.csv")
        out = tmp_path / "p.svg"
        assert run("plot-dirs", "--dirs", tmp_path / "a.csv", "--dirs2", tmp_path / "b.csv",
                   "--colors", "red,blue", "--out", out) == 0
        svg = out.read_text()
        assert svg.count('fill="red"') == 4
        assert svg.count('fill="blue"') == 6
