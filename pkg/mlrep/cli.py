"""
mlrep Command Line
==================

    mlrep synth        write synthetic MLRD datasets
    mlrep train-cae    pretrain the autoencoder on the configured train splits
    mlrep embed        encode MLRD splits into embedding files
    mlrep train-clf    train logistic regression on embeddings and score the test split
    mlrep eval         score a saved classifier on an embedding file
    mlrep ablate       modality / dataset-combination ablation table
    mlrep count-params parameter breakdown of a model or configuration
    mlrep gradcheck    finite-difference verification of every backward pass

Global flags (accepted after any verb): --config PATH, --seed N, --out DIR,
--limit N, --precision {32,64}, --log-level LEVEL. The default output root
comes from MLREP_OUTPUT_ROOT.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 data, 4 numeric, 5 I/O.
"""

import argparse
import logging
import sys
from typing import List, Optional

from mlrep import binary_format
from mlrep.cae_model import CAEArchitecture, count_parameters, load_weights, save_weights
from mlrep.config import LOG_LEVEL, MODALITY_ORDER, MODALITY_WIDTHS, OUTPUT_ROOT, SEQUENCE_LENGTH
from mlrep.csv_reports import CsvReporter
from mlrep.dataset_io import load_dataset, save_dataset
from mlrep.demo_helpers import (
    format_metrics,
    format_shape_chain,
    print_info,
    print_section_header,
    print_success,
    print_table,
    print_warning,
)
from mlrep.downstream import classifier_tensors, load_classifier
from mlrep.errors import EXIT_OK, EXIT_USAGE, ConfigError, MlrepError
from mlrep.experiments import (
    RunConfig,
    SyntheticEntry,
    embed_dataset,
    evaluate_classifier,
    generate_synthetic,
    load_run_config,
    load_splits,
    pretrain,
    run_ablation,
    train_eval_classifier,
    write_run_record,
)
from mlrep.gradcheck import assert_gradcheck, run_gradcheck_suite
from mlrep.synthetic import SynthConfig

logger = logging.getLogger(__name__)


# ==============================================================================
# COMMANDS
# ==============================================================================

def cmd_synth(args, config: RunConfig):
    if not config.synthetic:
        schema = args.schema
        synth = SynthConfig(
            n_utterances=args.n,
            class_count=2 if schema == 'sentiment' else 4,
            noise_std=args.noise,
            seed=config.seed,
            name=args.name,
            label_schema=schema,
            signal_modalities=tuple(args.signal) if args.signal else MODALITY_ORDER,
            prototype_seed=args.prototype_seed,
        )
        config = RunConfig(synthetic=(SyntheticEntry(synth, config.output_path / 'data' / args.name),),
                           seed=config.seed, output_dir=config.output_dir)
    print_section_header("SYNTHETIC DATASETS")
    for name, paths in generate_synthetic(config).items():
        print_success(f"{name}: {', '.join(str(p) for p in paths)}")


def cmd_train_cae(args, config: RunConfig):
    loaded = load_splits(config, splits=('train', 'val'))
    result = pretrain(config, loaded)
    out = config.output_path
    reporter = CsvReporter()

    save_weights(result.model, out / 'cae.mlrw')
    save_weights(result.model, out / 'encoder.mlrw', include_decoder=False)
    reporter.write(reporter.history_frame(result.history), out / 'history.csv', 'history')
    write_run_record(config, out, train_count=result.train_count, val_count=result.val_count,
                     best_val_mse=result.best_val_mse)

    print_section_header("AUTOENCODER PRETRAINING")
    print(format_shape_chain(result.model.shape_chain))
    print_success(f"Trained on {result.train_count} utterances; best val MSE {result.best_val_mse:.6f}")
    print_info(f"Weights: {out / 'cae.mlrw'} (encoder only: {out / 'encoder.mlrw'})")


def cmd_embed(args, config: RunConfig):
    model = load_weights(args.weights)
    out = config.output_path / 'embeddings'
    for manifest in args.dataset:
        dataset = load_dataset(manifest).limit(config.limit)
        embeddings = embed_dataset(model, dataset)
        path = save_dataset(embeddings, out / dataset.source / f"{dataset.split}.mlrd")
        print_success(f"{manifest} -> {path} ({len(embeddings)} x {embeddings.width})")


def cmd_train_clf(args, config: RunConfig):
    train = load_dataset(args.train).limit(config.limit)
    test = load_dataset(args.test).limit(config.limit)
    classifier, report = train_eval_classifier(train, test, config.logreg, config.label_rule)

    out = config.output_path
    tensors = classifier_tensors(classifier, config.label_rule)
    binary_format.write_container(out / 'classifier.mlrw', tensors)
    if args.append_to:
        binary_format.append_tensors(args.append_to, tensors)
    reporter = CsvReporter()
    reporter.write(reporter.metrics_frame(report), out / 'metrics.csv', 'metrics')

    print_section_header("DOWNSTREAM CLASSIFICATION")
    for task, reason in classifier.failures.items():
        print_warning(f"{task}: {reason}")
    print(format_metrics(report))
    print_info(f"{classifier.parameter_count:,} classifier parameters")


def cmd_eval(args, config: RunConfig):
    classifier, rule = load_classifier(binary_format.read_container(args.classifier))
    embeddings = load_dataset(args.embeddings).limit(config.limit)
    report = evaluate_classifier(classifier, embeddings, rule)
    reporter = CsvReporter()
    reporter.write(reporter.metrics_frame(report), config.output_path / 'eval_metrics.csv', 'metrics')
    print_section_header("EVALUATION")
    print(format_metrics(report))


def cmd_ablate(args, config: RunConfig):
    report = run_ablation(config)
    out = config.output_path
    reporter = CsvReporter()
    frame = reporter.ablation_frame(report)
    reporter.write(frame, out / 'ablation.csv', 'ablation')
    reporter.write(reporter.ablation_task_frame(report), out / 'ablation_tasks.csv', 'ablation_tasks')
    write_run_record(config, out)
    print_section_header("ABLATION")
    print_table(frame)


def cmd_count_params(args, config: RunConfig):
    if args.weights:
        model = load_weights(args.weights)
        arch, breakdown = model.architecture, count_parameters(model)
    else:
        arch = CAEArchitecture.reference(full_batchnorm=config.full_batchnorm or args.full_batchnorm)
        width = sum(MODALITY_WIDTHS[name] for name in config.modalities)
        breakdown = count_parameters(arch, (SEQUENCE_LENGTH, width))
    reporter = CsvReporter()
    frame = reporter.parameter_frame(breakdown)
    reporter.write(frame, config.output_path / 'parameters.csv', 'parameters')

    print_section_header("PARAMETER COUNT")
    print_table(frame)
    if arch.full_batchnorm:
        extra = 2 * arch.code_channels
        print_info(f"Code-layer batchnorm adds 2 x {arch.code_channels} = {extra} parameters "
                   f"({breakdown.encoder_total - extra:,} without it)")


def cmd_gradcheck(args, config: RunConfig):
    corrupt = {}
    for item in args.corrupt or []:
        layer, _, factor = item.partition('=')
        try:
            corrupt[layer] = float(factor)
        except ValueError as e:
            raise ConfigError(f"--corrupt expects LAYER=FACTOR, got '{item}'") from e
    try:
        report = run_gradcheck_suite(trials=args.trials, base_seed=config.seed,
                                     tolerance=args.tolerance, corrupt=corrupt)
    except KeyError as e:
        raise ConfigError(str(e)) from e
    reporter = CsvReporter()
    frame = reporter.gradcheck_frame(report)
    reporter.write(frame, config.output_path / 'gradcheck.csv', 'gradcheck')
    print_section_header("GRADIENT CHECK")
    print_table(frame)
    assert_gradcheck(report)
    print_success("All backward passes agree with finite differences")


# ==============================================================================
# ARGUMENT PARSING
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration')
    common.add_argument('--seed', type=int, help='Seed for initialization, shuffling and generation')
    common.add_argument('--out', help=f'Output directory (default: {OUTPUT_ROOT})')
    common.add_argument('--limit', type=int, help='Cap utterances per split')
    common.add_argument('--precision', type=int, choices=(32, 64), help='Training precision in bits')
    common.add_argument('--log-level', default=LOG_LEVEL, help='Logging level')

    parser = argparse.ArgumentParser(prog='mlrep', description='Multimodal autoencoder representations')
    verbs = parser.add_subparsers(dest='verb', required=True)

    synth = verbs.add_parser('synth', parents=[common], help='Write synthetic MLRD datasets')
    synth.add_argument('--name', default='synth')
    synth.add_argument('--n', type=int, default=2000, help='Utterances across all splits')
    synth.add_argument('--noise', type=float, default=0.78, help='Latent noise std')
    synth.add_argument('--schema', choices=('sentiment', 'emotions'), default='sentiment')
    synth.add_argument('--signal', nargs='+', choices=('audio', 'vision', 'text'),
                       help='Blocks carrying the class signal (default: all)')
    synth.add_argument('--prototype-seed', type=int)
    synth.set_defaults(handler=cmd_synth)

    verbs.add_parser('train-cae', parents=[common], help='Pretrain the autoencoder').set_defaults(handler=cmd_train_cae)

    embed = verbs.add_parser('embed', parents=[common], help='Encode datasets into embeddings')
    embed.add_argument('--weights', required=True, help='MLRW weights file')
    embed.add_argument('--dataset', nargs='+', required=True, help='MLRD manifest(s)')
    embed.set_defaults(handler=cmd_embed)

    clf = verbs.add_parser('train-clf', parents=[common], help='Train and score logistic regression')
    clf.add_argument('--train', required=True, help='Embedding manifest of the train split')
    clf.add_argument('--test', required=True, help='Embedding manifest of the test split')
    clf.add_argument('--append-to', help='Also append the classifier tensors to this weights file')
    clf.set_defaults(handler=cmd_train_clf)

    evaluate = verbs.add_parser('eval', parents=[common], help='Score a saved classifier')
    evaluate.add_argument('--classifier', required=True, help='MLRW container with task tensors')
    evaluate.add_argument('--embeddings', required=True, help='Embedding manifest')
    evaluate.set_defaults(handler=cmd_eval)

    verbs.add_parser('ablate', parents=[common], help='Ablation table').set_defaults(handler=cmd_ablate)

    count = verbs.add_parser('count-params', parents=[common], help='Parameter breakdown')
    count.add_argument('--weights', help='Count a saved model instead of the configured architecture')
    count.add_argument('--full-batchnorm', action='store_true', help='Also normalize the code layer')
    count.set_defaults(handler=cmd_count_params)

    grad = verbs.add_parser('gradcheck', parents=[common], help='Finite-difference gradient suite')
    grad.add_argument('--trials', type=int, default=20)
    grad.add_argument('--tolerance', type=float, default=1e-4)
    grad.add_argument('--corrupt', action='append', metavar='LAYER=FACTOR',
                      help='Perturb a layer\'s analytic gradient (fault injection)')
    grad.set_defaults(handler=cmd_gradcheck)
    return parser


def configure_logging(level_name: str):
    level = logging.getLevelName(str(level_name).upper())
    if not isinstance(level, int):
        raise ConfigError(f"Unknown log level '{level_name}'")
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 after --help and 2 on bad arguments
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        configure_logging(args.log_level)
        config = load_run_config(args.config) if args.config else RunConfig()
        config = config.with_overrides(seed=args.seed, output_dir=args.out, limit=args.limit,
                                       precision=args.precision)
        args.handler(args, config)
    except MlrepError as e:
        logger.error(f"✗ {type(e).__name__}: {e}")
        return e.exit_code
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
