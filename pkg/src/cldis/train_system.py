"""
Module containing the run-level commands: dataset export, the three training
phases, traversal figures, the evaluation suite and the capacity and
component sweeps. Every command works inside one run directory and leaves it
self-describing (``config.txt``, ``run_manifest`` and per-phase checkpoints).
"""
import logging
import os
import shutil
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from filelock import FileLock
from transformers import set_seed

from . import __version__
from .BetaVae import VaeConfig
from .DiffusionAutoencoder import DiffAeConfig, DiffusionAutoencoder
from .SemanticsNavigator import SemanticsNavigator, direction_accuracy, traverse, train_navigation
from .cldis_args import (
    GenerateCommandArguments,
    RunConfig,
    SweepCommandArguments,
    TraverseCommandArguments,
    validate_run_config,
)
from .cldis_closed_loop import (
    CDynController,
    ClosedLoopState,
    export_c_dyn_curve,
    phase1_pretrain,
    phase2_train,
)
from .cldis_data import FactorDataset, FactorSpec, generate, load_dataset, save_dataset
from .cldis_errors import ConfigError, DependencyError, PreconditionError
from .cldis_flow import estimate_flow, flow_ratio_from_flow, mean_finite, threshold_curve_from_flows
from .cldis_io import MANIFEST_NAME, load_image, read_manifest, read_table, save_heatmap, save_image_grid, write_manifest
from .cldis_metrics import (
    axis_navigator,
    dci_scores,
    default_heatmap_magnitudes,
    encode_dataset,
    factor_vae_score,
    locality_heatmap,
    make_oracle_encoder,
    make_shift_pairs,
)

logger = logging.getLogger(__name__)

LOCK_NAME = '.lock'
RUN_MANIFEST = 'run_manifest'
TRAIN_LOG = 'train_log.csv'
NAVIGATION_LOG = 'navigation_log.csv'
C_DYN_FILE = 'c_dyn.csv'
REPORT_FILE = 'report.txt'
DETERMINISTIC_ENV = 'CLDIS_DETERMINISTIC'
# max abs difference of final losses between two runs with the same config and seed
DETERMINISTIC_TOLERANCE = 0.0
NONDETERMINISTIC_TOLERANCE = 1e-4

ABLATION_VARIANTS = ('baseline', 'navigation', 'distillation', 'feedback', 'full')


def configure_logging(level: int = logging.INFO) -> None:
    logging.basicConfig(
        format="%(asctime)s - %(levelname)s - %(name)s -   %(message)s",
        datefmt="%m/%d/%Y %H:%M:%S",
        level=level,
    )


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, '0') == '1'


def set_run_seed(seed: int) -> bool:
    """
    Seed python, numpy and torch. With ``CLDIS_DETERMINISTIC=1`` torch is
    also restricted to deterministic kernels.

    :return: whether deterministic kernels are enforced
    """
    deterministic = deterministic_requested()
    if deterministic:
        os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
    set_seed(seed)
    return deterministic


def write_run_manifest(run_dir: str, config: RunConfig, deterministic: bool) -> str:
    return write_manifest(run_dir, {
        'format': 'cldis-run',
        'cldis_version': __version__,
        'torch_version': torch.__version__,
        'numpy_version': np.__version__,
        'device': config.training.device,
        'seed': config.training.seed,
        'deterministic': int(deterministic),
        'loss_tolerance': DETERMINISTIC_TOLERANCE if deterministic else NONDETERMINISTIC_TOLERANCE,
    }, name=RUN_MANIFEST)


def _is_nonempty(directory: str) -> bool:
    return os.path.isdir(directory) and any(name != LOCK_NAME for name in os.listdir(directory))


def _check_target(directory: str, overwrite: bool) -> None:
    if _is_nonempty(directory) and not overwrite:
        raise ConfigError(f"Output directory ({directory}) already exists and is not empty. Use --overwrite to overcome.")


def _has_checkpoint(directory: str) -> bool:
    return os.path.isfile(os.path.join(directory, MANIFEST_NAME))


def run_lock(run_dir: str) -> FileLock:
    os.makedirs(run_dir, exist_ok=True)
    return FileLock(os.path.join(run_dir, LOCK_NAME))


def spec_from_config(config: RunConfig) -> FactorSpec:
    data = config.data
    return FactorSpec.from_cardinalities(data.cardinalities, (data.channels, data.image_height, data.image_width))


def load_training_data(config: RunConfig) -> FactorDataset:
    """
    The dataset a run trains and evaluates on: the exported dataset in
    ``data_dir`` if given, otherwise one generated in memory.
    """
    data = config.data
    if data.data_dir is not None:
        dataset = load_dataset(data.data_dir)
        logger.info("Loaded %d images from %s", len(dataset), data.data_dir)
        return dataset
    spec = spec_from_config(config)
    if data.num_samples > 0:
        return generate(spec, 'sampled', n=data.num_samples, seed=data.data_seed)
    return generate(spec, 'exhaustive')


def diffae_config(config: RunConfig, image_size) -> DiffAeConfig:
    model = config.model
    return DiffAeConfig(
        image_size=tuple(image_size),
        latent_dim=model.latent_dim,
        unet_channels=model.unet_channels,
        encoder_channels=model.encoder_channels,
        timesteps=model.timesteps,
        beta_start=model.beta_start,
        beta_end=model.beta_end,
    )


def vae_config(config: RunConfig, image_size) -> VaeConfig:
    model = config.model
    return VaeConfig(image_size=tuple(image_size), latent_dim=model.latent_dim,
                     channels=model.encoder_channels, beta=model.vae_beta)


def build_state(config: RunConfig, image_size) -> ClosedLoopState:
    model = config.model
    return ClosedLoopState.create(
        diffae_config(config, image_size),
        vae_config(config, image_size),
        c_base=model.c_base,
        c_max=model.c_max,
        lambda_dt=model.lambda_dt,
        lambda_fd=model.lambda_fd,
        learning_rate=config.training.learning_rate,
        device=config.training.device,
    )


def truncate_log(path: str, step: int) -> None:
    """Drop rows past ``step`` so a resumed run continues the log without duplicates."""
    if not os.path.isfile(path):
        return
    table = read_table(path)
    kept = table[table['step'] <= step]
    if len(kept) < len(table):
        logger.info("Dropping %d log rows after step %d from %s", len(table) - len(kept), step, path)
    kept.to_csv(path, index=False)


def generate_data(config: RunConfig, command: GenerateCommandArguments = GenerateCommandArguments()) -> str:
    """
    Generate the dataset described by ``config.data`` and export it.

    :return: the dataset directory
    """
    validate_run_config(config)
    target = command.data_out or os.path.join(config.training.out, 'dataset')
    _check_target(target, config.training.overwrite)
    with run_lock(target):
        dataset = load_training_data(replace(config, data=replace(config.data, data_dir=None)))
        save_dataset(dataset, target)
    logger.info("Wrote %d images to %s", len(dataset), target)
    return target


def train_phase(config: RunConfig, phase: int) -> str:
    """
    Run one training phase inside ``config.training.out``.

    Phase 1 pre-trains from scratch (or resumes ``--resume``) and writes
    ``phase1/``; phase 2 continues from ``phase1/`` (or ``--resume``) with
    the closed loop and writes ``phase2/`` and ``c_dyn.csv``; phase 3 learns
    directions on the frozen ``phase2/`` model (or ``phase1/`` with
    ``--navigation_source phase1``) and writes ``phase3/``.

    :return: the run directory
    :raises DependencyError: if the checkpoint a phase builds on is missing
    """
    validate_run_config(config)
    if phase not in (1, 2, 3):
        raise ConfigError(f"Unknown training phase {phase}")
    training = config.training
    run_dir = training.out
    with run_lock(run_dir):
        deterministic = set_run_seed(training.seed)
        config.write(run_dir)
        write_run_manifest(run_dir, config, deterministic)
        logger.info("Training parameters %s", training)
        logger.info("Model parameters %s", config.model)
        logger.info("Data parameters %s", config.data)
        if phase == 1:
            _train_phase1(config, run_dir)
        elif phase == 2:
            _train_phase2(config, run_dir)
        else:
            _train_phase3(config, run_dir)
    return run_dir


def _periodic_dir(config: RunConfig, target: str) -> Optional[str]:
    return target if config.training.checkpoint_every > 0 else None


def _train_phase1(config: RunConfig, run_dir: str) -> None:
    training = config.training
    target = os.path.join(run_dir, 'phase1')
    data = load_training_data(config)
    if training.resume:
        state = ClosedLoopState.load(training.resume, training.device)
        if state.phase > 1:
            raise ConfigError(f"{training.resume} holds a phase-{state.phase} checkpoint and cannot resume pre-training")
        logger.info("Resuming pre-training from %s at step %d", training.resume, state.step)
    else:
        _check_target(target, training.overwrite)
        state = build_state(config, data.spec.image_size)
    log_path = os.path.join(run_dir, TRAIN_LOG)
    truncate_log(log_path, state.step)
    phase1_pretrain(state, data, training, log_path, checkpoint_dir=_periodic_dir(config, target))
    state.save(target)
    logger.info("Saved the pre-trained state at step %d to %s", state.step, target)


def _train_phase2(config: RunConfig, run_dir: str) -> None:
    training, model = config.training, config.model
    target = os.path.join(run_dir, 'phase2')
    source = training.resume or os.path.join(run_dir, 'phase1')
    if not _has_checkpoint(source):
        raise DependencyError(f"Phase 2 needs a phase-1 checkpoint in {source}; run `cldis train --phase 1` first")
    state = ClosedLoopState.load(source, training.device)
    if state.phase < 1:
        raise DependencyError(f"{source} has not been pre-trained")
    if state.phase == 1:
        if state.step < training.phase1_steps:
            raise DependencyError(f"Pre-training in {source} stopped at step {state.step} of {training.phase1_steps}")
        if source != target:
            _check_target(target, training.overwrite)
        state.controller = CDynController(model.c_base, model.c_max)
        state.lambda_dt, state.lambda_fd = model.lambda_dt, model.lambda_fd
    else:
        logger.info("Resuming the closed loop from %s at step %d", source, state.step)
    data = load_training_data(config)
    log_path = os.path.join(run_dir, TRAIN_LOG)
    truncate_log(log_path, state.step)
    phase2_train(state, data, training, log_path, checkpoint_dir=_periodic_dir(config, target))
    state.save(target)
    export_c_dyn_curve(state, os.path.join(run_dir, C_DYN_FILE))
    logger.info("Saved the closed-loop state at step %d to %s", state.step, target)


def _train_phase3(config: RunConfig, run_dir: str) -> None:
    training, model, evaluation = config.training, config.model, config.evaluation
    source_name = training.navigation_source
    source = os.path.join(run_dir, source_name)
    if not _has_checkpoint(source):
        raise DependencyError(f"Phase 3 needs a {source_name} checkpoint in {source}; "
                              f"run `cldis train --phase {source_name[-1]}` first")
    target = os.path.join(run_dir, 'phase3')
    _check_target(target, training.overwrite)
    state = ClosedLoopState.load(source, training.device)
    data = load_training_data(config)

    generator = torch.Generator()
    generator.manual_seed(training.seed)
    navigator = SemanticsNavigator(
        state.diffae,
        num_directions=model.num_directions,
        lambda_reg=model.lambda_reg,
        sample_steps=model.sample_steps,
        navigation_sample_steps=model.navigation_sample_steps,
        predictor_channels=model.encoder_channels,
        generator=generator,
    ).to(training.device)
    log_path = os.path.join(run_dir, NAVIGATION_LOG)
    if os.path.exists(log_path):
        os.remove(log_path)
    images = data.image_tensor()
    train_navigation(navigator, images, training, log_path)
    navigator.source = source_name
    navigator.save(target)
    accuracy, delta_error = direction_accuracy(navigator, images, evaluation.pairs, evaluation.eval_seed)
    logger.info("Held-out direction accuracy %.4f, mean |delta| error %.4f", accuracy, delta_error)


def _model_encoder(diffae: DiffusionAutoencoder) -> Callable[[torch.Tensor], torch.Tensor]:
    device = next(diffae.parameters()).device

    def encode(images: torch.Tensor) -> torch.Tensor:
        return diffae.encode(images.to(device))

    return encode


def navigation_source(phase3_dir: str) -> str:
    """The checkpoint the learned directions in ``phase3_dir`` were trained on (``phase2`` if unrecorded)."""
    return read_manifest(phase3_dir).get('source', 'phase2')


def evaluation_navigator(run_dir: str, checkpoint: str, diffae: DiffusionAutoencoder, num_directions: int):
    """
    The learned directions of ``phase3/`` when evaluating the model they were
    learned on, otherwise the first unit latent axes.

    :return: the navigator and ``'learned'`` or ``'axes'``
    """
    phase3 = os.path.join(run_dir, 'phase3')
    if _has_checkpoint(phase3) and navigation_source(phase3) == checkpoint:
        return SemanticsNavigator.load(phase3, diffae), 'learned'
    return axis_navigator(diffae, num_directions), 'axes'


def _source_images(images: torch.Tensor, count: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return images[torch.as_tensor(rng.integers(0, images.shape[0], size=count))]


def evaluate_run(config: RunConfig) -> Dict[str, Any]:
    """
    Score a trained checkpoint of ``config.training.out`` with the selected
    metrics and write ``evaluation/<checkpoint>/``: ``report.txt``, per-pair
    flow scores, the threshold curve, the DCI importance matrix and one
    locality heatmap per direction.

    :return: the report entries
    """
    validate_run_config(config)
    evaluation, model, training = config.evaluation, config.model, config.training
    run_dir = training.out
    source = os.path.join(run_dir, evaluation.checkpoint)
    if not _has_checkpoint(source):
        raise DependencyError(f"No {evaluation.checkpoint} checkpoint in {run_dir}")
    out_dir = os.path.join(run_dir, 'evaluation', evaluation.checkpoint)

    with run_lock(run_dir):
        set_run_seed(evaluation.eval_seed)
        state = ClosedLoopState.load(source, training.device)
        diffae = state.diffae
        diffae.eval()
        data = load_training_data(config)
        images = data.image_tensor()
        os.makedirs(out_dir, exist_ok=True)
        logger.info("Evaluation parameters %s", evaluation)

        report: Dict[str, Any] = {
            'checkpoint': evaluation.checkpoint,
            'step': state.step,
            'encoder': evaluation.encoder,
            'threshold': evaluation.threshold,
        }
        encode = make_oracle_encoder(data) if evaluation.encoder == 'oracle' else _model_encoder(diffae)
        metrics = set(evaluation.metrics)

        if metrics & {'flow', 'locality'}:
            navigator, kind = evaluation_navigator(run_dir, evaluation.checkpoint, diffae, model.num_directions)
            report['directions'] = kind
        if 'flow' in metrics:
            report.update(_evaluate_flow(config, navigator, images, out_dir))
        if 'factor_vae' in metrics:
            report['factor_vae'] = factor_vae_score(encode, data, evaluation.factor_vae_votes,
                                                    evaluation.factor_vae_group_size, evaluation.eval_seed)
        if 'dci' in metrics:
            report.update(_evaluate_dci(config, encode, data, out_dir))
        if 'locality' in metrics:
            report.update(_evaluate_locality(config, navigator, images, out_dir))

        write_manifest(out_dir, report, name=REPORT_FILE)
    for key, value in report.items():
        logger.info("  %s = %s", key, value)
    return report


def _evaluate_flow(config: RunConfig, navigator: SemanticsNavigator, images: torch.Tensor, out_dir: str) -> Dict[str, Any]:
    evaluation = config.evaluation
    pairs = make_shift_pairs(navigator, images, evaluation.pairs, evaluation.shift_magnitude, evaluation.eval_seed,
                             evaluation.x_t_mode, steps=config.model.sample_steps)
    flows = [estimate_flow(a, b) for a, b in pairs]
    scores = [flow_ratio_from_flow(flow, evaluation.threshold) for flow in flows]
    mean, infinite = mean_finite(scores)
    if infinite:
        logger.warning("%d of %d pairs scored inf and were excluded from the mean", infinite, len(scores))
    pd.DataFrame({
        'pair': np.arange(len(scores)),
        'direction': np.arange(len(scores)) % navigator.directions.K,
        'score': scores,
    }).to_csv(os.path.join(out_dir, 'flow_pairs.csv'), index=False)
    threshold_curve_from_flows(flows, evaluation.curve_thresholds).to_csv(os.path.join(out_dir, 'flow_curve.csv'), index=False)
    return {'flow_ratio': mean, 'flow_pairs': len(scores), 'flow_infinite_pairs': infinite}


def _evaluate_dci(config: RunConfig, encode, data: FactorDataset, out_dir: str) -> Dict[str, Any]:
    evaluation = config.evaluation
    latents = encode_dataset(encode, data.image_tensor())
    factors = np.asarray(data.factor_values)
    if evaluation.dci_samples < len(data):
        rng = np.random.default_rng(evaluation.eval_seed)
        rows = np.sort(rng.choice(len(data), size=evaluation.dci_samples, replace=False))
        latents, factors = latents[rows], factors[rows]
    result = dci_scores(latents, factors, seed=evaluation.eval_seed)
    pd.DataFrame(result.importance, columns=list(data.spec.names)).to_csv(
        os.path.join(out_dir, 'dci_importance.csv'), index_label='latent')
    return {
        'dci_disentanglement': result.disentanglement,
        'dci_completeness': result.completeness,
        'dci_informativeness': result.informativeness,
    }


@torch.no_grad()
def _evaluate_locality(config: RunConfig, navigator: SemanticsNavigator, images: torch.Tensor, out_dir: str) -> Dict[str, Any]:
    evaluation, steps = config.evaluation, config.model.sample_steps
    diffae = navigator.diffae
    x0 = _source_images(images, 1, evaluation.eval_seed).to(navigator.device)
    z = diffae.encode(x0)
    if evaluation.x_t_mode == 'inverted':
        x_T = diffae.invert(x0, z, steps)
    else:
        generator = torch.Generator()
        generator.manual_seed(evaluation.eval_seed)
        x_T = torch.randn(x0.shape, generator=generator).to(navigator.device)
    magnitudes = default_heatmap_magnitudes(evaluation.shift_magnitude)
    entries = {}
    for k in range(navigator.directions.K):
        heatmap = locality_heatmap(navigator, z, k, magnitudes, x_T, steps)
        low, high = save_heatmap(os.path.join(out_dir, f'locality_{k}.png'), heatmap)
        entries[f'locality_{k}_mean'] = float(heatmap.mean())
        entries[f'locality_{k}_min'] = low
        entries[f'locality_{k}_max'] = high
    return entries


def traverse_run(config: RunConfig, command: TraverseCommandArguments) -> str:
    """
    Write a traversal grid, one row per magnitude, of an image shifted along
    a learned direction of ``phase3/``.

    :return: the grid path
    """
    training = config.training
    run_dir = training.out
    phase3 = os.path.join(run_dir, 'phase3')
    if not _has_checkpoint(phase3):
        raise DependencyError(f"Traversals need learned directions in {phase3}; run `cldis train --phase 3` first")
    with run_lock(run_dir):
        state = ClosedLoopState.load(os.path.join(run_dir, navigation_source(phase3)), training.device)
        navigator = SemanticsNavigator.load(phase3, state.diffae)
        image_size = state.diffae.config.image_size
        if command.image_file is not None:
            x0 = torch.from_numpy(load_image(command.image_file, image_size[0]))
            if tuple(x0.shape) != tuple(image_size):
                raise PreconditionError(f"{command.image_file} has shape {tuple(x0.shape)}, the model expects {tuple(image_size)}")
        else:
            data = load_training_data(config)
            if not 0 <= command.image_index < len(data):
                raise PreconditionError(f"image_index must be in [0, {len(data)}), got {command.image_index}")
            x0 = data.image_tensor([command.image_index])[0]
        if not 0 <= command.direction < navigator.directions.K:
            raise PreconditionError(f"direction must be in [0, {navigator.directions.K}), got {command.direction}")
        frames = traverse(navigator, x0, command.direction, command.magnitudes)
        path = save_image_grid(os.path.join(run_dir, command.grid_name), [[frame.cpu().numpy()] for frame in frames])
    logger.info("Wrote a %d-row traversal of direction %d to %s", len(frames), command.direction, path)
    return path


def _variant(config: RunConfig, out: str, seed: int, resume: Optional[str] = None,
             evaluation: Optional[Dict[str, Any]] = None, training: Optional[Dict[str, Any]] = None,
             **model_changes) -> RunConfig:
    return RunConfig(
        data=config.data,
        model=replace(config.model, **model_changes),
        training=replace(config.training, out=out, seed=seed, resume=resume, **(training or {})),
        evaluation=replace(config.evaluation, **(evaluation or {})),
    )


def _pretrain(config: RunConfig, out: str, seed: int) -> RunConfig:
    base = _variant(config, out, seed)
    if _has_checkpoint(os.path.join(out, 'phase1')) and not config.training.overwrite:
        logger.info("Reusing the pre-trained state in %s", out)
    else:
        train_phase(replace(base, training=replace(base.training, overwrite=True)), 1)
    return base


def _summarize(runs: pd.DataFrame, keys: List[str], metrics: List[str]) -> pd.DataFrame:
    grouped = runs.groupby(keys, sort=False)
    table = grouped.size().rename('seeds').reset_index()
    for metric in metrics:
        table[metric + '_mean'] = grouped[metric].mean().to_numpy()
        table[metric + '_std'] = grouped[metric].std(ddof=0).to_numpy()
    return table


def sweep_capacity(config: RunConfig, sweep: SweepCommandArguments) -> pd.DataFrame:
    """
    Train the closed loop for every ``(c_base, c_max)`` pair and seed, all
    starting from one pre-trained state per seed, and tabulate the FactorVAE
    score and DCI disentanglement as mean and std over seeds.

    :return: the table also written to ``capacity_sweep.csv``
    """
    grid = sweep.parsed_grid()
    root = config.training.out
    metrics = {'metrics': ['factor_vae', 'dci'], 'checkpoint': 'phase2'}
    runs = []
    for seed in sweep.seeds:
        pretrain = _pretrain(config, os.path.join(root, f'seed{seed}', 'pretrain'), seed)
        for c_base, c_max in grid:
            out = os.path.join(root, f'seed{seed}', f'capacity_{c_base:g}_{c_max:g}')
            variant = _variant(config, out, seed, resume=os.path.join(pretrain.training.out, 'phase1'),
                               evaluation=metrics, c_base=c_base, c_max=c_max)
            train_phase(variant, 2)
            report = evaluate_run(variant)
            runs.append({'c_base': c_base, 'c_max': c_max, 'seed': seed,
                         'factor_vae': report['factor_vae'], 'dci': report['dci_disentanglement']})
    runs = pd.DataFrame(runs)
    os.makedirs(root, exist_ok=True)
    runs.to_csv(os.path.join(root, 'capacity_sweep_runs.csv'), index=False)
    table = _summarize(runs, ['c_base', 'c_max'], ['factor_vae', 'dci'])
    table.to_csv(os.path.join(root, 'capacity_sweep.csv'), index=False)
    logger.info("Capacity sweep:\n%s", table.to_string(index=False))
    return table


def sweep_ablation(config: RunConfig, sweep: SweepCommandArguments) -> pd.DataFrame:
    """
    Cumulative component ablation over seeds: the pre-trained baseline scored
    along latent axes, the baseline with learned directions, then the closed
    loop with only distillation, only capacity feedback, and both. Every
    variant after the baseline learns its own directions, so its flow score
    is measured along them.

    :return: the table also written to ``ablation.csv``
    """
    root = config.training.out
    model = config.model
    metrics = ['factor_vae', 'dci', 'flow']
    runs = []
    for seed in sweep.seeds:
        pretrain = _pretrain(config, os.path.join(root, f'seed{seed}', 'pretrain'), seed)
        phase1_dir = os.path.join(pretrain.training.out, 'phase1')
        for name in ABLATION_VARIANTS:
            out = os.path.join(root, f'seed{seed}', name)
            if name == 'baseline':
                variant = _variant(config, pretrain.training.out, seed,
                                   evaluation={'metrics': metrics, 'checkpoint': 'phase1'})
            elif name == 'navigation':
                variant = _variant(config, out, seed, evaluation={'metrics': metrics, 'checkpoint': 'phase1'},
                                   training={'navigation_source': 'phase1'})
                shutil.copytree(phase1_dir, os.path.join(out, 'phase1'), dirs_exist_ok=True)
                train_phase(variant, 3)
            else:
                lambdas = {
                    'distillation': (model.lambda_dt, 0.0),
                    'feedback': (0.0, model.lambda_fd),
                    'full': (model.lambda_dt, model.lambda_fd),
                }[name]
                variant = _variant(config, out, seed, resume=phase1_dir,
                                   evaluation={'metrics': metrics, 'checkpoint': 'phase2'},
                                   training={'navigation_source': 'phase2'},
                                   lambda_dt=lambdas[0], lambda_fd=lambdas[1])
                train_phase(variant, 2)
                train_phase(variant, 3)
            report = evaluate_run(variant)
            runs.append({'variant': name, 'seed': seed, 'factor_vae': report['factor_vae'],
                         'dci': report['dci_disentanglement'], 'flow': report['flow_ratio'],
                         'directions': report['directions']})
    runs = pd.DataFrame(runs)
    os.makedirs(root, exist_ok=True)
    runs.to_csv(os.path.join(root, 'ablation_runs.csv'), index=False)
    table = _summarize(runs, ['variant'], metrics)
    table.to_csv(os.path.join(root, 'ablation.csv'), index=False)
    logger.info("Component ablation:\n%s", table.to_string(index=False))
    return table
