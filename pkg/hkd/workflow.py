"""
Implements the HKD experiment commands. Every command takes the namespace
produced by :py:mod:`hkd.main`; the ablation and sweep grids are noodles
workflows sharing a single teacher-pretraining job.
"""

import logging
import os
import warnings
from dataclasses import fields
from datetime import datetime
from pathlib import Path
from typing import Optional

import noodles
import numpy as np
import pandas as pd
from pyparsing import (
    Regex, Word, alphas, alphanums, delimitedList, tokenMap, ParseException)
import torch

from .checkpoint import load_checkpoint, backbone_from_checkpoint
from .config import (
    DistillConfig, ExperimentManifest, resolve, config_hash)
from .data.data_set import DatasetSpec, load_dataset
from .data.transfer import make_transfer_split
from .distill import (
    train, pretrain_teacher, train_plain_student, evaluate_accuracy, predict,
    MetricsLog)
from .errors import ConfigurationError, ReproducibilityError
from .models import ARCHITECTURES, build_backbone, count_parameters
from .plotting import plot_similarity_heatmap, plot_sweep, plot_ablation
from .probe import linear_probe
from .stats import (
    read_ari_table, ari_table, summarize_runs, prediction_similarity,
    frobenius_distance)

log = logging.getLogger(__name__)

CONFIG_FLAGS = {f.name for f in fields(DistillConfig)}
DATASET_FLAGS = {f.name for f in fields(DatasetSpec)}

ABLATION_GROUPS = {
    'baselines': [
        ('CE', None),
        ('KD', {'beta': 0.0, 'lambda_kd': 1.0}),
        ('HKD', {'beta': 1.0, 'lambda_kd': 0.0}),
        ('HKD+KD', {'beta': 1.0, 'lambda_kd': 1.0})],
    'graph': [
        ('KNN', {'graph_mode': 'knn'}),
        ('Rand', {'graph_mode': 'random'}),
        ('FC', {'graph_mode': 'fc'})],
    'encoder': [
        ('GNN', {'encoder_mode': 'gnn'}),
        ('Sum', {'encoder_mode': 'sum'}),
        ('Mean', {'encoder_mode': 'mean'})],
    'strategy': [
        ('InfoNCE+bank', {'objective': 'infonce_bank'}),
        ('InfoNCE', {'objective': 'infonce_batch'}),
        ('MSE', {'objective': 'mse'}),
        ('JSD', {'objective': 'jsd'}),
        ('Graph bank', {'objective': 'graph_bank'}),
        ('Relational', {'objective': 'relational'})],
}


def run(workflow, n_threads=1, db_file='hkd-cache.db'):
    from noodles.run.threading.sqlite3 import run_parallel
    from .serialisers import registry

    log.info("running workflow on %d threads", n_threads)
    return run_parallel(
        workflow, n_threads=n_threads, registry=registry,
        db_file=str(db_file), always_cache=False,
        echo_log=False)


def run_single(workflow, db_file='hkd-cache.db'):
    from noodles.run.single.sqlite3 import run_single
    from .serialisers import registry
    return run_single(
        workflow, registry=registry,
        db_file=str(db_file), always_cache=False)


def output_root(args=None):
    """``--output-folder``, else ``$HKD_OUTPUT_ROOT``, else ``./runs``."""
    if args is not None and getattr(args, 'output_folder', None):
        return Path(args.output_folder)
    return Path(os.environ.get('HKD_OUTPUT_ROOT', 'runs'))


def make_run_dir(root, command, config, dataset):
    """Fresh ``{root}/{command}-{YYYYmmdd-HHMMSS}-{hash[:8]}`` directory
    holding the run manifest."""
    stamp = datetime.now().strftime('%Y%m%d-%H%M%S')
    base = '{}-{}-{}'.format(command, stamp, config_hash(config, dataset)[:8])
    path, n = Path(root) / base, 1
    while path.exists():
        n += 1
        path = Path(root) / '{}-{}'.format(base, n)
    path.mkdir(parents=True)
    ExperimentManifest.create(config, dataset, path, command).write()
    return path


def resolve_args(args):
    """Validated ``(DistillConfig, DatasetSpec)`` from ``--config`` and the
    flags present on ``args``."""
    values = vars(args)
    config_flags = {k: values[k] for k in CONFIG_FLAGS if k in values}
    dataset_flags = {k[len('dataset_'):]: values[k] for k in values
                     if k.startswith('dataset_')
                     and k[len('dataset_'):] in DATASET_FLAGS}
    if config_flags.get('lr_decay_epochs') is not None:
        config_flags['lr_decay_epochs'] = tuple(
            config_flags['lr_decay_epochs'])
    return resolve(getattr(args, 'config', None), config_flags, dataset_flags)


def parse_values(text):
    """Parse a comma separated list of numbers or names, like ``2,4,8,16``,
    ``0.1, 1, 10`` or ``knn,random,fc``."""
    p_int = Regex(r'[+-]?\d+(?![.\deE])').setParseAction(tokenMap(int))
    p_float = Regex(r'[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?') \
        .setParseAction(tokenMap(float))
    p_name = Word(alphas, alphanums + '_-')
    p_list = delimitedList(p_int | p_float | p_name)
    try:
        return list(p_list.parseString(text, parseAll=True))
    except ParseException as err:
        raise ConfigurationError(
            "cannot parse value list '{}': {}".format(text, err)) from None


def coerce_value(param, value):
    """Cast a parsed sweep value to the type of the config field."""
    types = {f.name: f.type for f in fields(DistillConfig)}
    if param not in types or param in ('lr_decay_epochs', 'device'):
        raise ConfigurationError("cannot sweep '{}'".format(param))
    field_type = types[param]
    if field_type is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigurationError(
                "{} takes integers, got {}".format(param, value))
        return int(value)
    if field_type in (float, Optional[float]):
        return float(value)
    return str(value)


def write_figure(fig, filename):
    fig.savefig(str(filename), bbox_inches='tight')
    return Path(filename)


# ~~~~ single runs ~~~~

def pretrain_teacher_command(args):
    config, dataset = resolve_args(args)
    run_dir = make_run_dir(output_root(args), 'pretrain-teacher',
                           config, dataset)
    path = pretrain_teacher(config, dataset, run_dir)
    container = load_checkpoint(path, kind='teacher')
    print("teacher checkpoint: {}".format(path))
    print("test accuracy: {:.2f}%".format(container['test_accuracy']))
    return path


def distill_command(args):
    if args.resume:
        # the run directory fixes the configuration
        run_dir = Path(args.resume).parent
        manifest = ExperimentManifest.read(run_dir)
        config, dataset = manifest.config, manifest.dataset
    else:
        config, dataset = resolve_args(args)
        run_dir = make_run_dir(output_root(args), 'distill', config, dataset)
    state = train(config, dataset, args.teacher, run_dir, args.resume)
    print("run directory: {}".format(run_dir))
    print("test accuracy: {:.2f}%".format(state.history[-1]['test_acc']
                                         if state.history else float('nan')))
    return run_dir


def logged_test_accuracy(run_dir, epoch):
    """Test accuracy of ``epoch`` in the metrics log of ``run_dir``, or
    ``None`` when the log has no such epoch record."""
    for record in reversed(MetricsLog(Path(run_dir) / 'metrics.jsonl').read()):
        if record['kind'] == 'epoch' and record['epoch'] == epoch:
            return record['test_acc']
    return None


def evaluate_command(args):
    """Rebuild the student of a run directory and check that its test
    accuracy equals the one logged after that epoch.

    :raises ReproducibilityError: on any difference.
    """
    run_dir = Path(args.run_dir)
    manifest = ExperimentManifest.read(run_dir)
    checkpoint = Path(args.checkpoint) if args.checkpoint \
        else run_dir / 'checkpoint-last.pt'
    container = load_checkpoint(checkpoint, kind='distill')
    dtype = manifest.config.dtype
    student = backbone_from_checkpoint(container, 'student', dtype)
    _, test = load_dataset(
        DatasetSpec.from_dict(container['dataset']), dtype)
    acc = evaluate_accuracy(student, test)
    print("epoch {}: test accuracy {:.4f}%".format(container['epoch'], acc))

    logged = [container.get('test_accuracy'),
              logged_test_accuracy(run_dir, container['epoch'])]
    for value in logged:
        if value is not None and acc != value:
            raise ReproducibilityError(
                "re-evaluated test accuracy {}% differs from the logged "
                "{}%".format(acc, value))
    return acc


def transfer_command(args):
    """Linear probe on frozen student features of a target dataset."""
    container = load_checkpoint(args.checkpoint)
    source = DatasetSpec.from_dict(container['dataset'])
    _, target = resolve_args(args)
    split = make_transfer_split(source, target, args.checkpoint, args.role)
    acc = linear_probe(split.train, split.test, split.num_classes,
                       seed=args.seed or 0)
    print("linear probe accuracy on {}: {:.2f}%".format(target.name, acc))
    if args.output:
        pd.DataFrame(
            {'checkpoint': [str(args.checkpoint)], 'target': [target.name],
             'feature_dim': [split.feature_dim], 'accuracy': [acc]}) \
            .to_csv(args.output, index=False)
    return acc


def _parse_checkpoint_arg(text):
    path, _, role = str(text).partition(':')
    return Path(path), role or None


def heatmap_command(args):
    """Prediction-similarity heatmaps on the first test instances; every
    further checkpoint is compared with the first one."""
    entries = [_parse_checkpoint_arg(c) for c in args.checkpoints]
    output = Path(args.output_folder or '.')
    output.mkdir(parents=True, exist_ok=True)

    matrices = []
    for path, role in entries:
        container = load_checkpoint(path)
        role = role or ('teacher' if container['kind'] == 'teacher'
                        else 'student')
        model = backbone_from_checkpoint(container, role)
        _, test = load_dataset(DatasetSpec.from_dict(container['dataset']))
        n = min(args.batch_size, len(test))
        if n < args.batch_size:
            warnings.warn("test split holds only {} instances, {} requested"
                          .format(n, args.batch_size))
        test.images, test.labels = test.images[:n], test.labels[:n]
        matrix = prediction_similarity(predict(model, test))
        name = '{}-{}'.format(path.stem, role)
        np.savetxt(output / '{}.csv'.format(name), matrix.numpy(),
                   delimiter=',')
        image = write_figure(
            plot_similarity_heatmap(matrix, '{} ({})'.format(path.name, role)),
            output / '{}.png'.format(name))
        print("heatmap: {}".format(image))
        matrices.append((name, matrix))

    reference_name, reference = matrices[0]
    distances = {}
    for name, matrix in matrices[1:]:
        if matrix.shape != reference.shape:
            raise ConfigurationError(
                "{} and {} were evaluated on batches of different size"
                .format(reference_name, name))
        distances[name] = frobenius_distance(reference, matrix)
        print("Frobenius distance {} <-> {}: {:.4f}".format(
            reference_name, name, distances[name]))
    return distances


def student_checkpoint(output_dir):
    """Final student checkpoint of a distillation or plain run directory."""
    output_dir = Path(output_dir)
    last = output_dir / 'checkpoint-last.pt'
    return last if last.exists() else output_dir / 'student.pt'


def heatmap_distances(teacher, runs, dataset, batch_size=32,
                      dtype=torch.float64):
    """Frobenius distance between the teacher's prediction-similarity matrix
    and that of every run's student, on the first ``batch_size`` test
    instances of ``dataset``.

    :param teacher: path of the teacher checkpoint.
    :param runs: data frame with ``variant``, ``seed``, ``test_acc`` and
        ``output_dir`` columns.
    :return: ``runs`` with an added ``frobenius`` column.
    """
    _, test = load_dataset(dataset, dtype)
    n = min(batch_size, len(test))
    test.images, test.labels = test.images[:n], test.labels[:n]

    def similarity(path, role):
        model = backbone_from_checkpoint(load_checkpoint(path), role, dtype)
        return prediction_similarity(predict(model, test))

    reference = similarity(teacher, 'teacher')
    table = runs.copy()
    table['frobenius'] = [
        frobenius_distance(reference, similarity(
            student_checkpoint(d), 'student')) for d in runs['output_dir']]
    return table


def ari_command(args):
    table = ari_table(read_ari_table(args.table), method=args.method,
                      student=args.student)
    column = table['ARI (%)'].dropna()
    print(column.to_string(float_format='{:.2f}'.format))
    if args.output:
        table.to_csv(args.output, float_format='%.4f')
    return column


def list_archs_command(args):
    rows = []
    for name, arch in ARCHITECTURES.items():
        model = build_backbone(name, args.num_classes)
        rows.append({
            'name': name, 'stands in for': arch.full_scale_name,
            'd': arch.feature_dim, 'lightweight': arch.lightweight,
            'parameters': count_parameters(model)})
    table = pd.DataFrame(rows).set_index('name')
    print(table.to_string())
    return table


# ~~~~ grids ~~~~

@noodles.schedule
@noodles.maybe
def pretrain_job(config, dataset, output_dir):
    return pretrain_teacher(config, dataset, output_dir)


@noodles.schedule
@noodles.maybe
def distill_job(label, config, dataset, teacher, output_dir):
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    ExperimentManifest.create(config, dataset, output_dir).write()
    state = train(config, dataset, teacher, output_dir)
    return {'variant': label, 'seed': config.seed,
            'test_acc': state.history[-1]['test_acc'],
            'output_dir': str(output_dir)}


@noodles.schedule
@noodles.maybe
def plain_job(label, config, dataset, output_dir):
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    ExperimentManifest.create(config, dataset, output_dir, 'plain').write()
    _, history = train_plain_student(config, dataset, output_dir)
    return {'variant': label, 'seed': config.seed,
            'test_acc': history[-1]['test_acc'],
            'output_dir': str(output_dir)}


def _teacher_promise(args, config, dataset, run_dir):
    if args.teacher:
        return Path(args.teacher)
    return pretrain_job(config, dataset, run_dir / 'teacher')


def _slug(label):
    return str(label).lower().replace(' ', '-').replace('+', 'p')


def ablation_workflow(args, config, dataset, run_dir):
    groups = list(ABLATION_GROUPS) if args.group == 'all' else [args.group]
    teacher = _teacher_promise(args, config, dataset, run_dir)
    jobs, seen = [], set()
    for group in groups:
        for label, changes in ABLATION_GROUPS[group]:
            if label in seen:
                continue
            seen.add(label)
            for i in range(args.seeds):
                seed = config.seed + i
                out = run_dir / '{}-seed{}'.format(_slug(label), seed)
                if changes is None:
                    jobs.append(plain_job(
                        label, config.replace(seed=seed), dataset, out))
                else:
                    variant = config.replace(seed=seed, **changes).validate()
                    jobs.append(distill_job(
                        label, variant, dataset, teacher, out))
    return noodles.gather(*jobs)


def sweep_workflow(args, config, dataset, run_dir, values):
    teacher = _teacher_promise(args, config, dataset, run_dir)
    jobs = []
    for value in values:
        for i in range(args.seeds):
            seed = config.seed + i
            variant = config.replace(
                seed=seed, **{args.param: value}).validate()
            out = run_dir / '{}-{}-seed{}'.format(args.param, value, seed)
            jobs.append(distill_job(value, variant, dataset, teacher, out))
    return noodles.gather(*jobs)


def _execute(args, workflow, run_dir):
    db_file = run_dir / 'hkd-cache.db'
    if args.single:
        results = run_single(workflow, db_file)
    else:
        results = run(workflow, args.jobs, db_file)

    ok = []
    for result in results:
        if noodles.failed(result):
            log.error("job failed: %s", result)
        else:
            ok.append(result)
    if not ok:
        raise RuntimeError("every job of the workflow failed")
    return pd.DataFrame(ok)


def ablate_command(args):
    config, dataset = resolve_args(args)
    run_dir = make_run_dir(output_root(args), 'ablate', config, dataset)
    runs = _execute(args, ablation_workflow(args, config, dataset, run_dir),
                    run_dir)
    runs.to_csv(run_dir / 'runs.csv', index=False)
    summary = summarize_runs(runs, 'variant')

    teacher = Path(args.teacher) if args.teacher \
        else run_dir / 'teacher' / 'teacher.pt'
    distances = heatmap_distances(teacher, runs, dataset, dtype=config.dtype)
    distances.to_csv(run_dir / 'heatmap-distances.csv', index=False)
    summary['frobenius'] = distances.groupby('variant')['frobenius'].mean()

    summary.to_csv(run_dir / 'summary.csv')
    write_figure(plot_ablation(summary, 'ablation: {}'.format(args.group)),
                 run_dir / 'ablation.png')
    print(summary.to_string(float_format='{:.2f}'.format))
    print("run directory: {}".format(run_dir))
    return summary


def sweep_command(args):
    config, dataset = resolve_args(args)
    values = [coerce_value(args.param, v) for v in parse_values(args.values)]
    run_dir = make_run_dir(output_root(args), 'sweep', config, dataset)
    runs = _execute(
        args, sweep_workflow(args, config, dataset, run_dir, values), run_dir)
    runs = runs.rename(columns={'variant': args.param})
    runs.to_csv(run_dir / 'runs.csv', index=False)
    summary = summarize_runs(runs, args.param)
    summary.to_csv(run_dir / 'summary.csv')
    write_figure(plot_sweep(summary, args.param,
                            'sweep over {}'.format(args.param)),
                 run_dir / 'sweep.png')
    print(summary.to_string(float_format='{:.2f}'.format))
    print("run directory: {}".format(run_dir))
    return summary
