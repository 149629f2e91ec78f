"""End-to-end tests of the splatmap command line"""

import json

import numpy as np
import pytest

from main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from modules.camera import CameraPose
from modules.datakit import load_dataset, load_ply, load_png, save_tum

TINY_TRAIN = {
    'train': {
        'iterations': 6, 'k': 3, 'n_appearance': 4, 'epsilon': 0.05, 'feature_dim': 6, 'hidden': 8,
        'refine_start': 4, 'refine_end': 10, 'log_every': 5,
        'fpr': {'active_window': [2, 10]},
        'refine': {'window': 4, 'epsilon_g': 0.05},
    },
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--scene", "tiny", "--out", str(root / "data")]) == EXIT_OK
    config = root / "tiny.json"
    config.write_text(json.dumps(TINY_TRAIN))
    assert main(["train", "--data", str(root / "data"), "--config", str(config),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def test_synth_writes_loadable_dataset(workspace):
    dataset = load_dataset(workspace / "data")
    assert len(dataset.frames) == 4
    assert sum(f.is_keyframe for f in dataset.frames) == 3


def test_synth_from_spec_file(tmp_path, capsys):
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps({'n_blobs': 2, 'ring': {'count': 3}, 'width': 16, 'height': 16,
                                'focal': 16.0, 'keyframes': [0, 2]}))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d"), "--seed", "3"]) == EXIT_OK
    assert "wrote 3 views" in capsys.readouterr().out
    assert load_dataset(tmp_path / "d").meta['seed'] == 3


def test_synth_spec_errors(tmp_path, capsys):
    assert main(["synth", "--spec", str(tmp_path / "none.json"), "--out", str(tmp_path / "d")]) == EXIT_USAGE
    assert "spec not found" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"n_blobs\": 2,,\n}")
    assert main(["synth", "--spec", str(bad), "--out", str(tmp_path / "d")]) == EXIT_USAGE
    assert "bad.json:2:" in capsys.readouterr().err


def test_synth_needs_exactly_one_source(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--scene", "tiny", "--spec", "x.json", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_train_artefacts(workspace, capsys):
    run_dir = workspace / "run"
    for name in ("checkpoint.bin", "loss.csv", "metrics.json", "loss.png"):
        assert (run_dir / name).is_file()
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert metrics['iterations'] == 6


def test_train_configuration_errors(workspace, capsys):
    data = str(workspace / "data")
    assert main(["train", "--data", data, "--preset", "ultra", "--out", str(workspace / "x")]) == EXIT_USAGE
    assert "unknown preset" in capsys.readouterr().err
    assert main(["train", "--data", data, "--config", str(workspace / "nope.json"),
                 "--out", str(workspace / "x")]) == EXIT_USAGE


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "void"), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "missing meta.json" in capsys.readouterr().err


def test_render_view(workspace):
    out = workspace / "view.png"
    assert main(["render", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--pose", "0 0 -2 0 0 0 1", "--out", str(out)]) == EXIT_OK
    image = load_png(out)
    assert image.shape == (32, 32, 3)


def test_render_rejects_bad_pose(workspace, capsys):
    code = main(["render", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--pose", "0 0 -2 0 0 0", "--out", str(workspace / "bad.png")])
    assert code == EXIT_RUNTIME
    assert "expected 8 fields" in capsys.readouterr().err


def test_eval_render_reports_test_split(workspace, capsys):
    assert main(["eval-render", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--data", str(workspace / "data")]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report['split'] == 'test'
    assert report['count'] == 1
    assert report['psnr'] > 0


def test_inspect_exports_anchors(workspace, capsys):
    out = workspace / "anchors.ply"
    assert main(["inspect", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                 "--out", str(out)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    points, props = load_ply(out)
    assert report['iteration'] == 6
    assert len(points) == report['anchors']
    assert set(props) == {'scale_x', 'scale_y', 'scale_z'}


def test_eval_traj(tmp_path, capsys):
    poses = [CameraPose.look_at([np.cos(a), 0.2, np.sin(a)], [0.0, 0.0, 0.0])
             for a in np.linspace(0.0, 2.0, 5)]
    save_tum(tmp_path / "gt.txt", poses)
    save_tum(tmp_path / "est.txt", poses)
    assert main(["eval-traj", "--est", str(tmp_path / "est.txt"), "--gt", str(tmp_path / "gt.txt")]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "ATE RMSE: 0.000 cm"


def _scaled_ring(tmp_path):
    angles = np.linspace(0.0, 2.0, 5)
    gt = [CameraPose.look_at([np.cos(a), 0.2, np.sin(a)], [0.0, 0.0, 0.0]) for a in angles]
    est = [CameraPose.look_at([2.0 * np.cos(a), 0.4, 2.0 * np.sin(a)], [0.0, 0.0, 0.0]) for a in angles]
    save_tum(tmp_path / "gt.txt", gt)
    save_tum(tmp_path / "est.txt", est)
    return ["eval-traj", "--est", str(tmp_path / "est.txt"), "--gt", str(tmp_path / "gt.txt")]


def test_eval_traj_similarity_from_preset(tmp_path, capsys):
    argv = _scaled_ring(tmp_path)
    assert main(argv) == EXIT_OK
    assert capsys.readouterr().out.strip() != "ATE RMSE: 0.000 cm"
    assert main(argv + ["--preset", "mono-replica"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "ATE RMSE: 0.000 cm"


def test_eval_traj_similarity_from_config(tmp_path, capsys):
    config = tmp_path / "mono.json"
    config.write_text(json.dumps({'data': {'similarity_alignment': True}}))
    assert main(_scaled_ring(tmp_path) + ["--config", str(config)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "ATE RMSE: 0.000 cm"


def test_ba_demo_reads_robust_section(tmp_path, capsys):
    config = tmp_path / "ba.json"
    config.write_text(json.dumps({'ba': {'huber_delta': None}}))
    assert main(["ba-demo", "--preset", "outliers", "--config", str(config)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    for entry in report['poses']:
        assert entry['huber'] == entry['quadratic']


def test_ba_demo_rejects_unknown_ba_key(tmp_path, capsys):
    config = tmp_path / "ba.json"
    config.write_text(json.dumps({'ba': {'delta': 1.0}}))
    assert main(["ba-demo", "--config", str(config)]) == EXIT_USAGE
    assert "ba.delta" in capsys.readouterr().err


def test_ba_demo_noiseless(capsys):
    assert main(["ba-demo", "--preset", "noiseless", "--seed", "1"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report['outliers'] == 0
    assert len(report['poses']) == 3
    for entry in report['poses']:
        assert entry['huber']['rotation_error'] < 1e-4
        assert entry['quadratic']['translation_error'] < 1e-4


def test_ba_demo_unknown_preset(capsys):
    assert main(["ba-demo", "--preset", "heavy"]) == EXIT_USAGE


@pytest.mark.parametrize("argv", [["--help"], ["train", "--help"], ["ba-demo", "--help"]])
def test_help_exits_cleanly(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 0
    assert "usage: splatmap" in capsys.readouterr().out
