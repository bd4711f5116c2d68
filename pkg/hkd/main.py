import argparse
import logging
import sys

from .contrastive import OBJECTIVES
from .data.data_set import DATASET_NAMES
from .encoder import ENCODER_MODES
from .errors import ConfigurationError, DataValidationError, NumericalFailure
from .graph import GRAPH_MODES, KNN_METRICS, EDGE_WEIGHTINGS
from .models import ARCHITECTURES
from .workflow import (
    pretrain_teacher_command, distill_command, evaluate_command,
    transfer_command, heatmap_command, ari_command, ablate_command,
    sweep_command, list_archs_command, ABLATION_GROUPS)

log = logging.getLogger('hkd')

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def add_config_arguments(parser):
    """Flags overriding :py:class:`hkd.config.DistillConfig` fields. All
    default to ``None`` so values from ``--config`` survive."""
    group = parser.add_argument_group("distillation settings")
    group.add_argument(
        "--config", help="YAML experiment file; flags take precedence",
        dest='config')
    group.add_argument(
        "--teacher-arch", choices=list(ARCHITECTURES), dest='teacher_arch')
    group.add_argument(
        "--student-arch", choices=list(ARCHITECTURES), dest='student_arch')
    group.add_argument(
        "--k", help="neighbours per instance in the context graph",
        type=int, dest='k')
    group.add_argument(
        "--hops", help="number of graph convolution hops L",
        type=int, dest='L')
    group.add_argument(
        "--embedding-width", help="width g of the holistic embedding",
        type=int, dest='g')
    group.add_argument(
        "--beta", help="weight of the holistic loss", type=float,
        dest='beta')
    group.add_argument(
        "--lambda", help="weight of the vanilla KD loss", type=float,
        dest='lambda_kd')
    group.add_argument(
        "--tau-kd", help="KD temperature", type=float, dest='tau_kd')
    group.add_argument(
        "--tau-c", help="contrast temperature", type=float, dest='tau_c')
    group.add_argument(
        "--momentum", help="memory bank momentum", type=float,
        dest='momentum')
    group.add_argument(
        "--n-negatives", help="bank negatives per anchor", type=int,
        dest='n_negatives')
    group.add_argument("--batch-size", type=int, dest='batch_size')
    group.add_argument(
        "--lr", help="base learning rate (default: 0.05, or 0.01 for "
        "lightweight students)", type=float, dest='lr')
    group.add_argument("--lr-decay-rate", type=float, dest='lr_decay_rate')
    group.add_argument(
        "--lr-decay-epochs", type=int, nargs='+', dest='lr_decay_epochs')
    group.add_argument("--epochs", type=int, dest='epochs')
    group.add_argument("--teacher-epochs", type=int, dest='teacher_epochs')
    group.add_argument("--teacher-lr", type=float, dest='teacher_lr')
    group.add_argument("--sgd-momentum", type=float, dest='sgd_momentum')
    group.add_argument("--weight-decay", type=float, dest='weight_decay')
    group.add_argument(
        "--graph-mode", choices=GRAPH_MODES, dest='graph_mode')
    group.add_argument(
        "--encoder-mode", choices=ENCODER_MODES, dest='encoder_mode')
    group.add_argument(
        "--objective", choices=OBJECTIVES, dest='objective')
    group.add_argument(
        "--knn-metric", choices=KNN_METRICS, dest='knn_metric')
    group.add_argument(
        "--knn-source", choices=['soft_targets', 'logits'],
        dest='knn_source')
    group.add_argument(
        "--edge-weighting", choices=EDGE_WEIGHTINGS, dest='edge_weighting')
    group.add_argument("--seed", type=int, dest='seed')
    group.add_argument(
        "--precision", choices=['float32', 'float64'], dest='precision')
    group.add_argument("--device", dest='device')


def add_dataset_arguments(parser, title="dataset"):
    group = parser.add_argument_group(title)
    group.add_argument(
        "--dataset", choices=DATASET_NAMES, dest='dataset_name')
    group.add_argument(
        "--data-root", help="folder holding CIFAR batches or class folders",
        dest='dataset_root')
    group.add_argument(
        "--num-classes", type=int, dest='dataset_num_classes')
    group.add_argument("--image-size", type=int, dest='dataset_image_size')
    group.add_argument("--channels", type=int, dest='dataset_channels')
    group.add_argument(
        "--train-per-class", type=int, dest='dataset_train_per_class')
    group.add_argument(
        "--test-per-class", type=int, dest='dataset_test_per_class')
    group.add_argument(
        "--data-seed", type=int, dest='dataset_seed')


def add_grid_arguments(parser):
    parser.add_argument(
        "--teacher", help="teacher checkpoint; pretrained inside the "
        "workflow when absent", dest='teacher')
    parser.add_argument(
        "--seeds", help="runs per variant (default: %(default)s)",
        type=int, default=3, dest='seeds')


def make_argument_parser():
    """Create the argument parser for the `hkd` script."""

    parser = argparse.ArgumentParser(
        prog='hkd',
        description="Distill holistic knowledge from a teacher network")
    parser.add_argument(
        "--output-folder", help="folder where runs are written "
        "(default: $HKD_OUTPUT_ROOT or ./runs)", dest='output_folder')
    parser.add_argument(
        "--single", help="force running in single threaded mode",
        dest="single", action="store_true")
    parser.add_argument(
        "--jobs", help="worker threads for ablations and sweeps "
        "(default: %(default)s)", type=int, default=1, dest='jobs')
    parser.add_argument(
        "--verbose", "-v", help="log per-step records",
        dest='verbose', action='store_true')
    parser.add_argument(
        "--quiet", "-q", help="only log warnings and errors",
        dest='quiet', action='store_true')

    subparser = parser.add_subparsers(
        help="command to run", dest='command')

    pretrain_parser = subparser.add_parser(
        "pretrain-teacher", help="train the teacher with cross-entropy")
    pretrain_parser.set_defaults(func=pretrain_teacher_command)
    add_config_arguments(pretrain_parser)
    add_dataset_arguments(pretrain_parser)

    distill_parser = subparser.add_parser(
        "distill", help="distill a pretrained teacher into a student")
    distill_parser.set_defaults(func=distill_command)
    distill_parser.add_argument(
        "--teacher", help="teacher checkpoint written by pretrain-teacher",
        dest='teacher')
    distill_parser.add_argument(
        "--resume", help="continue from a checkpoint of an earlier run",
        dest='resume')
    add_config_arguments(distill_parser)
    add_dataset_arguments(distill_parser)

    evaluate_parser = subparser.add_parser(
        "evaluate", help="re-evaluate the student of a run directory")
    evaluate_parser.set_defaults(func=evaluate_command)
    evaluate_parser.add_argument("run_dir", help="run directory")
    evaluate_parser.add_argument(
        "--checkpoint", help="checkpoint inside the run "
        "(default: checkpoint-last.pt)", dest='checkpoint')

    transfer_parser = subparser.add_parser(
        "transfer", help="linear probe on frozen features of another "
        "dataset")
    transfer_parser.set_defaults(func=transfer_command)
    transfer_parser.add_argument(
        "--checkpoint", required=True, dest='checkpoint')
    transfer_parser.add_argument(
        "--role", choices=['student', 'teacher'], default='student',
        dest='role')
    transfer_parser.add_argument(
        "--output", help="CSV file for the probe result", dest='output')
    transfer_parser.add_argument(
        "--config", help="YAML file whose dataset section is the target",
        dest='config')
    transfer_parser.add_argument("--seed", type=int, dest='seed')
    add_dataset_arguments(transfer_parser, "target dataset")

    heatmap_parser = subparser.add_parser(
        "heatmap", help="prediction-similarity heatmaps")
    heatmap_parser.set_defaults(func=heatmap_command)
    heatmap_parser.add_argument(
        "checkpoints", nargs='+', help="checkpoint files, optionally "
        "suffixed with ':student' or ':teacher'; all are compared with the "
        "first")
    heatmap_parser.add_argument(
        "--batch-size", type=int, default=32, dest='batch_size',
        help="instances in the heatmap (default: %(default)s)")

    ari_parser = subparser.add_parser(
        "ari", help="average relative improvement from an accuracy table")
    ari_parser.set_defaults(func=ari_command)
    ari_parser.add_argument(
        "--table", required=True, help="CSV with methods as rows and "
        "teacher/student pairs as columns", dest='table')
    ari_parser.add_argument(
        "--method", default='HKD+KD', dest='method',
        help="row whose improvement is measured (default: %(default)s)")
    ari_parser.add_argument(
        "--student", default='Student', dest='student',
        help="row of the plain students (default: %(default)s)")
    ari_parser.add_argument(
        "--output", help="write the table with its ARI column", dest='output')

    ablate_parser = subparser.add_parser(
        "ablate", help="run an ablation grid")
    ablate_parser.set_defaults(func=ablate_command)
    ablate_parser.add_argument(
        "--group", choices=list(ABLATION_GROUPS) + ['all'],
        default='baselines', dest='group')
    add_grid_arguments(ablate_parser)
    add_config_arguments(ablate_parser)
    add_dataset_arguments(ablate_parser)

    sweep_parser = subparser.add_parser(
        "sweep", help="sweep one setting over a list of values")
    sweep_parser.set_defaults(func=sweep_command)
    sweep_parser.add_argument(
        "--param", required=True, help="config field to vary, e.g. k, "
        "beta or L", dest='param')
    sweep_parser.add_argument(
        "--values", required=True, help="comma separated values, e.g. "
        "2,4,8,16", dest='values')
    add_grid_arguments(sweep_parser)
    add_config_arguments(sweep_parser)
    add_dataset_arguments(sweep_parser)

    archs_parser = subparser.add_parser(
        "list-archs", help="list the backbone registry")
    archs_parser.set_defaults(func=list_archs_command)
    archs_parser.add_argument(
        "--num-classes", type=int, default=100, dest='num_classes')

    return parser


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else \
        logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level, format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    logging.getLogger('noodles').setLevel(logging.WARNING)


def main(argv=None):
    """Run the command line; returns the exit code."""
    # disable interactive plotting
    import matplotlib
    matplotlib.use('Agg')

    parser = make_argument_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG

    try:
        args.func(args)
    except ConfigurationError as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG
    except (DataValidationError, FileNotFoundError) as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    except NumericalFailure as err:
        log.error("numerical failure: %s", err)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
