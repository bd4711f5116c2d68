import json
import subprocess
import sys
from pathlib import Path

import pytest

from hkd.distill import MetricsLog
from hkd.errors import ConfigurationError
from hkd.main import main, make_argument_parser
from hkd.models import ARCHITECTURES
from hkd.workflow import parse_values, coerce_value, resolve_args

TINY = [
    '--teacher-arch', 'small-convnet-T', '--student-arch', 'small-convnet-S',
    '--k', '3', '--embedding-width', '16', '--batch-size', '16',
    '--n-negatives', '32', '--epochs', '1', '--teacher-epochs', '2',
    '--precision', 'float64',
    '--num-classes', '4', '--image-size', '8', '--train-per-class', '16',
    '--test-per-class', '8']


def test_parse_values():
    assert parse_values('2,4,8,16') == [2, 4, 8, 16]
    assert parse_values('0.1, 1, 1e-2') == [0.1, 1, 0.01]
    assert parse_values('knn,random,fc') == ['knn', 'random', 'fc']
    with pytest.raises(ConfigurationError):
        parse_values('2,,4')
    with pytest.raises(ConfigurationError):
        parse_values('')


def test_coerce_value():
    assert coerce_value('k', 4.0) == 4
    assert coerce_value('beta', 1) == 1.0
    assert coerce_value('graph_mode', 'fc') == 'fc'
    with pytest.raises(ConfigurationError):
        coerce_value('k', 2.5)
    with pytest.raises(ConfigurationError):
        coerce_value('colour', 1)


def test_resolve_args_maps_flags():
    args = make_argument_parser().parse_args(
        ['distill', '--lambda', '0.5', '--hops', '2', '--data-seed', '7'])
    config, dataset = resolve_args(args)
    assert config.lambda_kd == 0.5
    assert config.L == 2
    assert dataset.seed == 7


def test_ari_command(tmp_path, results_table, capsys):
    output = tmp_path / 'with-ari.csv'
    assert main(['ari', '--table', str(results_table),
                 '--output', str(output)]) == 0
    printed = capsys.readouterr().out
    assert 'CRD+KD' in printed
    assert '126.' in printed
    assert output.exists()


def test_ari_missing_table(tmp_path):
    assert main(['ari', '--table', str(tmp_path / 'missing.csv')]) == 2


def test_list_archs(capsys):
    assert main(['list-archs', '--num-classes', '10']) == 0
    printed = capsys.readouterr().out
    for name in ARCHITECTURES:
        assert name in printed


def test_configuration_errors_exit_with_one(tmp_path):
    root = ['--output-folder', str(tmp_path)]
    assert main(root + ['distill', '--k', '64']) == 1
    assert main(root + ['distill'] + TINY) == 1

    config = tmp_path / 'bad.yaml'
    config.write_text('alpha: 3\n')
    assert main(root + ['distill', '--config', str(config)]) == 1
    assert main([]) == 1


def test_full_pipeline(tmp_path, capsys):
    root = ['--output-folder', str(tmp_path)]
    assert main(root + ['pretrain-teacher'] + TINY) == 0
    teacher, = tmp_path.glob('pretrain-teacher-*/teacher.pt')

    assert main(root + ['distill', '--teacher', str(teacher)] + TINY) == 0
    run_dir, = tmp_path.glob('distill-*')
    assert (run_dir / 'manifest.yaml').exists()
    assert (run_dir / 'metrics.jsonl').exists()

    assert main(['evaluate', str(run_dir)]) == 0
    assert 'test accuracy' in capsys.readouterr().out
    args = make_argument_parser().parse_args(['evaluate', str(run_dir)])
    last_epoch = [r for r in MetricsLog(run_dir / 'metrics.jsonl').read()
                  if r['kind'] == 'epoch'][-1]
    assert args.func(args) == last_epoch['test_acc']

    heatmaps = tmp_path / 'heatmaps'
    assert main(['--output-folder', str(heatmaps), 'heatmap', str(teacher),
                 str(run_dir / 'checkpoint-last.pt')]) == 0
    assert 'Frobenius distance' in capsys.readouterr().out
    assert len(list(heatmaps.glob('*.png'))) == 2

    probe = tmp_path / 'probe.csv'
    assert main([
        'transfer', '--checkpoint', str(run_dir / 'checkpoint-last.pt'),
        '--output', str(probe), '--num-classes', '4', '--image-size', '12',
        '--train-per-class', '16', '--test-per-class', '8',
        '--data-seed', '5']) == 0
    assert probe.exists()


def test_evaluate_detects_a_changed_log(tmp_path, teacher_checkpoint):
    root = ['--output-folder', str(tmp_path)]
    assert main(root + ['distill', '--teacher', str(teacher_checkpoint)]
                + TINY) == 0
    run_dir, = tmp_path.glob('distill-*')
    metrics = MetricsLog(run_dir / 'metrics.jsonl')
    records = metrics.read()
    records[-1]['test_acc'] += 1.0
    metrics.path.write_text(
        ''.join(json.dumps(r) + '\n' for r in records))
    assert main(['evaluate', str(run_dir)]) == 3


def test_importing_the_front_end_leaves_pyplot_alone():
    code = ("import sys, hkd.main; "
            "sys.exit('matplotlib.pyplot' in sys.modules)")
    root = Path(__file__).resolve().parents[1]
    assert subprocess.run([sys.executable, '-c', code],
                          cwd=str(root)).returncode == 0
