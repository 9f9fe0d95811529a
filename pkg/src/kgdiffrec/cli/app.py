"""
kgdiffrec command-line interface

Subcommands:
    gen-synth  Write a planted synthetic dataset (interactions, KG, labels)
    train      Train one model; writes checkpoint, metrics trace, config snapshot
    eval       Rank a checkpoint's held-out split against popularity/random baselines
    diffuse    Reconstruct a KG with a checkpoint's denoiser and dump it
    ablate     Train the full model and the three ablation variants and compare
    sweep      Train over several values of one hyperparameter and compare

Run settings come from defaults, then a KEY=VALUE --config file, then flags.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical divergence.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, get_args, get_origin

import numpy as np
import torch
from dotenv import dotenv_values
from pydantic import ValidationError

from kgdiffrec.config import Config
from kgdiffrec.errors import (
    CheckpointError,
    ConfigurationError,
    DataFormatError,
    DivergenceError,
    EmptyGraphError,
    KnowledgeGraphReferenceError,
    ParameterError,
)
from kgdiffrec.models import ComparisonReport, RankingSummary, RunConfig, SyntheticSpec
from kgdiffrec.services.diffusion import generate_denoised_kg, guidance_table
from kgdiffrec.services.evaluation import (
    RankingResult,
    baseline_popularity,
    baseline_random,
    embedding_scorer,
    evaluate,
)
from kgdiffrec.services.graph import (
    DatasetSplit,
    KnowledgeGraph,
    build_knowledge_graph,
    generate_synthetic,
    load_interactions,
    load_kg,
    load_labels,
    save_kg,
    split_train_test,
    write_dataset,
)
from kgdiffrec.services.recommender import RecommenderTrainer, load_checkpoint, save_checkpoint
from kgdiffrec.services.rwr_attention import AttentionCache

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3

# first match wins
EXIT_CODES: List[Tuple[type, int]] = [
    (DivergenceError, EXIT_DIVERGENCE),
    (DataFormatError, EXIT_DATA),
    (EmptyGraphError, EXIT_DATA),
    (KnowledgeGraphReferenceError, EXIT_DATA),
    (CheckpointError, EXIT_DATA),
    (OSError, EXIT_DATA),
    (ConfigurationError, EXIT_USAGE),
    (ParameterError, EXIT_USAGE),
    (ValidationError, EXIT_USAGE),
]

# RunConfig fields with hand-named flags
PATH_FLAGS = {
    'interactions_path': '--interactions',
    'kg_path': '--kg',
    'labels_path': '--labels',
    'output_dir': '--output-dir',
}
ABLATION_FLAGS = {
    'disable_attention_matrix': '--disable-attention',
    'disable_guidance': '--disable-guidance',
    'disable_contrastive': '--disable-contrastive',
}
VARIANT_FLAGS = {
    'full': None,
    'no_attention': 'disable_attention_matrix',
    'no_guidance': 'disable_guidance',
    'no_contrastive': 'disable_contrastive',
}
SWEEP_PARAMETERS = ['xi', 'steps', 'tau', 'theta1', 'num_paths', 'path_length', 'q']

CHECKPOINT_FILE = 'checkpoint.pt'
METRICS_FILE = 'metrics.jsonl'
SNAPSHOT_FILE = 'config.env'
REPORT_FILE = 'report.json'


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that reports usage errors with exit status 1"""

    def error(self, message: str) -> Any:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def exit_code_for(error: BaseException) -> Optional[int]:
    for error_type, code in EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return None


# ============================================================================
# Run configuration
# ============================================================================

def _flag_name(field_name: str) -> str:
    return '--' + field_name.replace('_', '-')


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    """--config, data paths, ablation flags and one flag per hyperparameter"""
    parser.add_argument('--config', help='KEY=VALUE run configuration file; flags override it')
    parser.add_argument('--interactions', dest='interactions_path', help='user<TAB>item interactions file')
    parser.add_argument('--kg', dest='kg_path', help='item<TAB>relation<TAB>entity knowledge graph file')
    parser.add_argument('--labels', dest='labels_path', help='planted labels file (synthetic data)')
    parser.add_argument('--output-dir', dest='output_dir', help=f'run directory (default ${{KGDIFFREC_OUTPUT_DIR}})')

    ablation = parser.add_mutually_exclusive_group()
    for field_name, flag in ABLATION_FLAGS.items():
        ablation.add_argument(flag, dest=field_name, action='store_true', default=None,
                              help=f'ablation: set {field_name}')

    hyper = parser.add_argument_group('hyperparameters')
    for field_name, info in RunConfig.model_fields.items():
        if field_name in PATH_FLAGS or field_name in ABLATION_FLAGS:
            continue
        annotation = info.annotation
        help_text = f'default: {info.default}'
        if annotation is bool:
            hyper.add_argument(_flag_name(field_name), dest=field_name, default=None,
                               action=argparse.BooleanOptionalAction, help=help_text)
        elif get_origin(annotation) is Literal:
            hyper.add_argument(_flag_name(field_name), dest=field_name, default=None,
                               choices=list(get_args(annotation)), help=help_text)
        else:
            hyper.add_argument(_flag_name(field_name), dest=field_name, default=None,
                               type=annotation if annotation in (int, float) else str, help=help_text)


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Parse a KEY=VALUE run configuration file

    Keys are RunConfig field names in any case. Empty values are ignored.

    Raises:
        ConfigurationError: If the file is missing or names an unknown key
    """
    if not os.path.exists(path):
        raise ConfigurationError(f"Config file not found: {path}")
    values: Dict[str, Any] = {}
    for key, value in dotenv_values(path).items():
        name = key.lower()
        if name not in RunConfig.model_fields:
            raise ConfigurationError(f"{path}: unknown config key {key!r}")
        if value is None or value == '':
            continue
        values[name] = value
    return values


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """
    Defaults < --config file < flags

    Raises:
        ConfigurationError: On conflicting settings
        pydantic.ValidationError: On out-of-range values
    """
    values: Dict[str, Any] = {}
    if getattr(args, 'config', None):
        values.update(read_config_file(args.config))
    for field_name in RunConfig.model_fields:
        flag_value = getattr(args, field_name, None)
        if flag_value is not None:
            values[field_name] = flag_value
    explicit_threads = 'threads' in values
    values.setdefault('output_dir', Config.OUTPUT_DIR)
    values.setdefault('threads', Config.THREADS)

    config = RunConfig(**values)
    if config.deterministic and explicit_threads and config.threads > 1:
        raise ConfigurationError("--deterministic runs single-threaded; drop --threads or set it to 1")
    return config


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return str(value)


def write_config_snapshot(config: RunConfig, path: str) -> str:
    """Write the resolved configuration in the --config format"""
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write("# resolved kgdiffrec run configuration\n")
        for name, value in config.model_dump().items():
            if value is None:
                continue
            handle.write(f"{name.upper()}={_format_value(value)}\n")
    return path


# ============================================================================
# Shared run steps
# ============================================================================

def load_dataset(config: RunConfig) -> Tuple[KnowledgeGraph, DatasetSplit]:
    """Load interactions (required) and KG (optional) and split them"""
    if not config.interactions_path:
        raise ConfigurationError("--interactions is required")
    graph = load_interactions(config.interactions_path)
    if config.kg_path:
        kg = load_kg(config.kg_path, graph)
    else:
        kg = build_knowledge_graph([], graph, source='<no kg>')
    split = split_train_test(graph, config.holdout_per_user, config.seed)
    return kg, split


def train_run(config: RunConfig, output_dir: str) -> Tuple[RecommenderTrainer, RankingResult]:
    """
    Train one configuration into `output_dir`

    Writes config.env, metrics.jsonl and checkpoint.pt, and returns the
    trainer with its final evaluation.
    """
    os.makedirs(output_dir, exist_ok=True)
    write_config_snapshot(config, os.path.join(output_dir, SNAPSHOT_FILE))
    metrics_path = os.path.join(output_dir, METRICS_FILE)
    if os.path.exists(metrics_path):
        os.remove(metrics_path)

    kg, split = load_dataset(config)
    cache = AttentionCache() if Config.ATTENTION_CACHE_DIR else None
    logger.info(f"Training variant {config.variant!r} (seed {config.seed}) into {output_dir}")
    trainer = RecommenderTrainer(split, kg, config.train_config(), cache=cache, metrics_path=metrics_path)
    trainer.fit()
    save_checkpoint(trainer, os.path.join(output_dir, CHECKPOINT_FILE))
    result = evaluate(trainer.scorer(), split, config.top_n)
    return trainer, result


def _write_json(path: str, payload: Any) -> None:
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2)
        handle.write('\n')


def _mean_summary(name: str, results: Sequence[RankingResult]) -> RankingSummary:
    return RankingSummary(
        name=name,
        top_n=results[0].top_n,
        recall=float(np.mean([r.mean_recall for r in results])),
        ndcg=float(np.mean([r.mean_ndcg for r in results])),
        num_users=results[0].num_users,
    )


# ============================================================================
# Subcommands
# ============================================================================

def cmd_gen_synth(args: argparse.Namespace) -> int:
    """Generate a planted dataset and write its three files"""
    overrides = {
        name: getattr(args, name) for name in SyntheticSpec.model_fields if getattr(args, name, None) is not None
    }
    spec = SyntheticSpec(**overrides)
    graph, kg, labels = generate_synthetic(spec)
    paths = write_dataset(graph, kg, labels, args.out)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Train one model and write its run directory"""
    config = resolve_run_config(args)
    output_dir = config.output_dir or Config.OUTPUT_DIR
    trainer, result = train_run(config, output_dir)

    report: Dict[str, Any] = {
        'variant': config.variant,
        'summary': result.summary(config.variant).model_dump(),
        'epochs': trainer.epoch,
        'denoised_triples': trainer.denoised_kg.num_triples,
    }
    if config.labels_path:
        labels = load_labels(config.labels_path, trainer.kg)
        report['original_kg_precision'] = labels.precision(trainer.kg)
        report['denoised_kg_precision'] = labels.precision(trainer.denoised_kg)
    _write_json(os.path.join(output_dir, REPORT_FILE), report)

    print(f"Recall@{config.top_n}={result.mean_recall:.4f} NDCG@{config.top_n}={result.mean_ndcg:.4f}")
    print(f"checkpoint: {os.path.join(output_dir, CHECKPOINT_FILE)}")
    return EXIT_OK


def evaluate_checkpoint(path: str, top_n: Optional[int] = None, baselines: bool = True) -> ComparisonReport:
    """Evaluate a checkpoint's stored embeddings (and baselines) on its held-out split"""
    checkpoint = load_checkpoint(path)
    n = top_n or checkpoint.config.top_n
    split = checkpoint.split
    final = checkpoint.final_embeddings
    results = {'model': evaluate(embedding_scorer(final.users.numpy(), final.items.numpy()), split, n)}
    if baselines:
        results['popularity'] = evaluate(baseline_popularity(split.train), split, n)
        results['random'] = evaluate(baseline_random(split.train.num_items, checkpoint.config.seed), split, n)
    return ComparisonReport(
        title=f"Evaluation of {path}",
        rows=[result.summary(name) for name, result in results.items()],
        details={'checkpoint': path, 'epochs': checkpoint.epoch},
    )


def cmd_eval(args: argparse.Namespace) -> int:
    """Print Recall@N / NDCG@N of a checkpoint and its baselines"""
    report = evaluate_checkpoint(args.checkpoint, args.top_n, baselines=not args.no_baselines)
    print(report.to_table())
    if args.json:
        _write_json(args.json, report.model_dump())
    return EXIT_OK


def cmd_diffuse(args: argparse.Namespace) -> int:
    """Reconstruct the KG from pure noise (or observed rows) and dump it"""
    checkpoint = load_checkpoint(args.checkpoint)
    denoiser = checkpoint.build_denoiser()
    if denoiser is None:
        raise EmptyGraphError(f"{args.checkpoint} was trained without a knowledge graph")
    model = checkpoint.build_model()
    config = checkpoint.config
    guidance = guidance_table(checkpoint.split.train, model.user_embedding)
    if not config.use_guidance:
        guidance = torch.zeros_like(guidance)
    seed = args.seed if args.seed is not None else config.seed
    generator = torch.Generator().manual_seed(seed)
    denoised = generate_denoised_kg(
        checkpoint.kg, denoiser, checkpoint.schedule, guidance, args.q,
        generator=generator,
        reverse_from_observed=config.reverse_from_observed,
        start_step=config.observed_start_step,
        sample_noise=config.reverse_noise,
    )
    directory = os.path.dirname(args.out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    save_kg(denoised, args.out)
    print(f"{denoised.num_triples} triples (q={args.q}) written to {args.out}")

    if args.labels:
        labels = load_labels(args.labels, checkpoint.kg)
        print(f"labeled precision: original={labels.precision(checkpoint.kg):.4f} "
              f"denoised={labels.precision(denoised):.4f}")
    return EXIT_OK


def _seed_list(config: RunConfig, count: int) -> List[int]:
    return [config.seed + offset for offset in range(count)]


def cmd_ablate(args: argparse.Namespace) -> int:
    """Train full / no_attention / no_guidance / no_contrastive over one or more seeds"""
    config = resolve_run_config(args)
    if config.variant != 'full':
        raise ConfigurationError("ablate trains every variant itself; drop the --disable-* flag")
    if args.seeds < 1:
        raise ConfigurationError("--seeds must be >= 1")
    output_dir = config.output_dir or Config.OUTPUT_DIR
    seeds = _seed_list(config, args.seeds)

    rows: List[RankingSummary] = []
    per_seed: Dict[str, List[Dict[str, float]]] = {}
    for variant in Config.ABLATION_VARIANTS:
        flag = VARIANT_FLAGS[variant]
        results = []
        for seed in seeds:
            values = config.model_dump()
            values['seed'] = seed
            if flag:
                values[flag] = True
            run_dir = os.path.join(output_dir, 'ablation', variant, f'seed-{seed}')
            _, result = train_run(RunConfig(**values), run_dir)
            results.append(result)
        rows.append(_mean_summary(variant, results))
        per_seed[variant] = [{'recall': r.mean_recall, 'ndcg': r.mean_ndcg} for r in results]

    report = ComparisonReport(
        title=f"Ablation over seeds {seeds}",
        rows=rows,
        details={'seeds': seeds, 'per_seed': per_seed},
    )
    print(report.to_table())
    _write_json(os.path.join(output_dir, 'ablation.json'), report.model_dump())
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Train once per value of one hyperparameter"""
    config = resolve_run_config(args)
    values = [value.strip() for value in args.values.split(',') if value.strip()]
    if not values:
        raise ConfigurationError("--values needs at least one value")
    output_dir = config.output_dir or Config.OUTPUT_DIR

    rows: List[RankingSummary] = []
    for value in values:
        settings = config.model_dump()
        settings[args.param] = value
        run_config = RunConfig(**settings)
        run_dir = os.path.join(output_dir, 'sweep', f'{args.param}-{value}')
        _, result = train_run(run_config, run_dir)
        rows.append(result.summary(f'{args.param}={value}'))

    report = ComparisonReport(
        title=f"Sensitivity to {args.param}",
        rows=rows,
        details={'param': args.param, 'values': values},
    )
    print(report.to_table())
    _write_json(os.path.join(output_dir, f'sweep-{args.param}.json'), report.model_dump())
    return EXIT_OK


# ============================================================================
# Parser and entry point
# ============================================================================

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='kgdiffrec', description='Knowledge-graph diffusion recommender')
    parser.add_argument('--log-level', default=None, help='logging level (default ${KGDIFFREC_LOG_LEVEL})')
    subparsers = parser.add_subparsers(dest='command', required=True)

    gen = subparsers.add_parser('gen-synth', help='write a planted synthetic dataset')
    gen.add_argument('--out', required=True, help='output directory')
    for field_name, info in SyntheticSpec.model_fields.items():
        gen.add_argument(_flag_name(field_name), dest=field_name, default=None,
                         type=info.annotation if info.annotation in (int, float) else str,
                         help=f'default: {info.default}')
    gen.set_defaults(handler=cmd_gen_synth)

    train = subparsers.add_parser('train', help='train one model')
    _add_run_arguments(train)
    train.set_defaults(handler=cmd_train)

    evaluation = subparsers.add_parser('eval', help='evaluate a checkpoint')
    evaluation.add_argument('--checkpoint', required=True)
    evaluation.add_argument('--top-n', type=int, default=None, help='cutoff N (default: the run\'s top_n)')
    evaluation.add_argument('--no-baselines', action='store_true', help='skip popularity and random baselines')
    evaluation.add_argument('--json', default=None, help='also write the report as JSON')
    evaluation.set_defaults(handler=cmd_eval)

    diffuse = subparsers.add_parser('diffuse', help='dump a reconstructed knowledge graph')
    diffuse.add_argument('--checkpoint', required=True)
    diffuse.add_argument('--q', type=int, default=1, help='entities kept per item')
    diffuse.add_argument('--out', required=True, help='output KG file')
    diffuse.add_argument('--labels', default=None, help='labels file to score the reconstruction against')
    diffuse.add_argument('--seed', type=int, default=None, help='sampling seed (default: the run seed)')
    diffuse.set_defaults(handler=cmd_diffuse)

    ablate = subparsers.add_parser('ablate', help='train and compare the ablation variants')
    _add_run_arguments(ablate)
    ablate.add_argument('--seeds', type=int, default=1, help='seeds per variant (seed, seed+1, ...)')
    ablate.set_defaults(handler=cmd_ablate)

    sweep = subparsers.add_parser('sweep', help='train over values of one hyperparameter')
    _add_run_arguments(sweep)
    sweep.add_argument('--param', required=True, choices=SWEEP_PARAMETERS)
    sweep.add_argument('--values', required=True, help='comma-separated values')
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (args.log_level or Config.LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except Exception as e:
        code = exit_code_for(e)
        if code is None:
            raise
        logger.debug("Run failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == '__main__':
    sys.exit(main())
