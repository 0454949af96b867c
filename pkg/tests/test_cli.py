"""
Tests for the command-line surface and its exit codes.

Run with:
    pytest tests/test_cli.py -v
"""

import json

import pandas as pd
import pytest

import kpalign.cli as cli
from kpalign import __version__
from kpalign.cli import main
from kpalign.errors import NumericalFailureError

TRAIN_FLAGS = ['--epochs', '20', '--hidden-dim', '8', '--layers', '2', '--flip-every', '10']


@pytest.fixture
def synthetic_files(tmp_path):
    manifest, gt = tmp_path / 'manifest.json', tmp_path / 'gt.json'
    code = main(['synth', '--manifest', str(manifest), '--gt', str(gt), '--images', '4', '--keypoints', '8',
                 '--noise', '0', '--outliers', '0', '--seed', '3'])
    assert code == 0
    return manifest, gt


class TestPipeline:
    """End-to-end runs through main()."""

    def test_synth_align_eval_render(self, tmp_path, synthetic_files, capsys):
        manifest, gt = synthetic_files
        alignment = tmp_path / 'alignment.json'
        loss_log = tmp_path / 'loss.txt'
        weights = tmp_path / 'weights.pt'
        assert main(['align', str(manifest), '--out', str(alignment), '--loss-log', str(loss_log),
                     '--weights-out', str(weights), *TRAIN_FLAGS]) == 0
        assert alignment.exists() and weights.exists()

        lines = loss_log.read_text().splitlines()
        assert len(lines) == 20
        epoch, loss, changed = lines[0].split()
        assert epoch == '0' and float(loss) > 0 and changed.isdigit()

        metrics = tmp_path / 'metrics.json'
        assert main(['eval', str(alignment), str(gt), '--alpha', '0.1', '--out', str(metrics)]) == 0
        document = json.loads(metrics.read_text())
        assert 0.0 <= document['pck'] <= 1.0
        assert 'PCK@0.1' in capsys.readouterr().out

        maps = tmp_path / 'maps'
        assert main(['render', str(alignment), '--out-dir', str(maps)]) == 0
        assert sorted(path.name for path in maps.iterdir()) == [f"image_{k}.ppm" for k in range(1, 5)]

    def test_align_is_byte_reproducible(self, tmp_path, synthetic_files):
        manifest, _ = synthetic_files
        first, second = tmp_path / 'a.json', tmp_path / 'b.json'
        assert main(['align', str(manifest), '--out', str(first), *TRAIN_FLAGS]) == 0
        assert main(['align', str(manifest), '--out', str(second), *TRAIN_FLAGS]) == 0
        assert first.read_bytes() == second.read_bytes()

    def test_build_flags_are_recorded(self, tmp_path, synthetic_files):
        manifest, _ = synthetic_files
        alignment = tmp_path / 'a.json'
        assert main(['align', str(manifest), '--out', str(alignment), '--top-k', '4', '--l2',
                     '--gauge', 'first', *TRAIN_FLAGS]) == 0
        document = json.loads(alignment.read_text())
        assert document['config']['build']['top_k'] == 4
        assert document['config']['train']['robust'] is False
        assert document['gauge'] == 'first'

    def test_graph_stats_csv(self, tmp_path, synthetic_files):
        manifest, _ = synthetic_files
        out = tmp_path / 'stats.csv'
        assert main(['graph-stats', str(manifest), '--out', str(out)]) == 0
        table = pd.read_csv(out)
        assert table['image_id'].tolist() == [1, 2, 3, 4]

    def test_bench_csv(self, tmp_path):
        out = tmp_path / 'bench.csv'
        assert main(['bench', '--points', '16', '--dims', '2', '--repeats', '1', '--out', str(out)]) == 0
        assert len(pd.read_csv(out)) == 2

    def test_accept_subset(self, tmp_path):
        out = tmp_path / 'report.json'
        assert main(['accept', '--only', 'sl3_suite', '--out', str(out)]) == 0
        report = json.loads(out.read_text())
        assert report['checks_total'] == 1
        assert report['detailed_breakdown']['sl3_suite']['status'] == 'passed'


class TestExitCodes:
    """Error categories map to distinct exit codes."""

    def test_invalid_manifest_exits_2(self, tmp_path):
        manifest = tmp_path / 'bad.json'
        manifest.write_text('{"format": "kpalign-manifest", "version": "1.0", "images": [}')
        assert main(['align', str(manifest), '--out', str(tmp_path / 'a.json')]) == 2

    def test_invalid_config_exits_2(self, tmp_path, synthetic_files):
        manifest, _ = synthetic_files
        assert main(['align', str(manifest), '--out', str(tmp_path / 'a.json'), '--sigma', '0']) == 2

    def test_missing_file_exits_4(self, tmp_path):
        assert main(['graph-stats', str(tmp_path / 'absent.json')]) == 4

    def test_numerical_failure_exits_3(self, tmp_path, synthetic_files, monkeypatch):
        manifest, _ = synthetic_files

        def failing(graph, config, sink):
            raise NumericalFailureError("non-finite gradient in head.w", [1.0, 0.5])

        monkeypatch.setattr(cli, 'align_collection', failing)
        assert main(['align', str(manifest), '--out', str(tmp_path / 'a.json')]) == 3
        assert not (tmp_path / 'a.json').exists()

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(['--version'])
        assert excinfo.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(['frobnicate'])
        assert excinfo.value.code == 2
