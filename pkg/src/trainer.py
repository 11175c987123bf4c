"""
Цикл обучения Full Encoder.

Каждая группа параметров получает градиент только от своей функции потерь
(encoder0 <- L_encoder0, encoder <- L_encoder, nn0 <- L_nn0, nn_i <- L_nni,
decoder <- L_decoder). Все градиенты считаются от параметров до шага,
затем выполняется шаг Adam в каждой группе.
"""

from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import tensor as T
from .data_structures import Dataset, HistoryRecord, ModelConfig, TrainConfig, TrainHistory
from .errors import ConfigError, NumericalError
from .full_encoder import FEParams, compute_losses, forward_full, latent_kl
from .metrics import recon_error_per_level
from .nonlinear_system import split_holdout
from .optim import Adam
from .storage import Checkpoint, load_checkpoint, save_checkpoint

# поля TrainConfig, которые можно менять при продолжении обучения
_RESUMABLE_FIELDS = ("iterations", "checkpoint_path", "log_every")


def make_batches(n_rows: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """
    Бесконечный поток индексов батчей: равномерная выборка с возвращением

    Args:
        n_rows: Количество строк набора данных
        batch_size: Размер батча
        rng: Генератор

    Returns:
        Iterator[np.ndarray]: Индексы строк каждого батча
    """
    if n_rows < 1:
        raise ConfigError("Пустой набор данных")
    if batch_size < 1:
        raise ConfigError("batch_size должен быть >= 1")

    def stream():
        while True:
            yield rng.integers(0, n_rows, size=batch_size)

    return stream()


def make_optimizers(params: FEParams, lr: float) -> Dict[str, Adam]:
    """По одному Adam на группу параметров"""
    return {name: Adam(tensors, lr=lr) for name, tensors in params.groups().items()}


def train_step(params: FEParams, x: np.ndarray, y: Optional[np.ndarray],
               optimizers: Dict[str, Adam], rng: np.random.Generator,
               iteration: int = 0) -> Dict[str, float]:
    """
    Один шаг обучения с маршрутизацией градиентов по группам

    Args:
        params: Параметры модели (обновляются на месте)
        x: Батч наблюдений
        y: Метки (supervised) или None
        optimizers: Adam по группам
        rng: Генератор для dropout и eps
        iteration: Номер итерации для диагностики

    Returns:
        Dict[str, float]: Значения функций потерь по группам и KL
    """
    config = params.config
    groups = params.groups()
    for optimizer in optimizers.values():
        optimizer.zero_grad()

    with T.Tape() as tape:
        outputs = forward_full(params, x, y, training=True, rng=rng)
        losses = compute_losses(outputs, x, y, config)
        kl = latent_kl(outputs, config)

    values = {name: loss.item() for name, loss in losses.items()}
    values["kl"] = kl.item()
    if not all(np.isfinite(v) for v in values.values()):
        raise NumericalError(f"Нечисловое значение функции потерь на итерации {iteration}",
                             iteration=iteration, losses=values)

    for name, loss in losses.items():
        T.backward(tape, loss, params=groups[name])
    for optimizer in optimizers.values():
        optimizer.step()
    return values


def _labels(config: ModelConfig, dataset: Dataset) -> Optional[np.ndarray]:
    if not config.supervised:
        return None
    return dataset.S[:, list(config.label_factors)]


def _validate(dataset: Dataset, model_config: ModelConfig) -> None:
    if dataset.n_outputs != model_config.n_outputs:
        raise ConfigError(f"Набор данных имеет {dataset.n_outputs} выходов, модель ожидает "
                          f"{model_config.n_outputs}")
    if model_config.supervised:
        if not dataset.has_factors:
            raise ConfigError("Supervised обучение требует факторы S в наборе данных")
        if max(model_config.label_factors) >= dataset.n_inputs:
            raise ConfigError(f"label_factors выходят за {dataset.n_inputs} факторов набора данных")


def prepare_splits(dataset: Dataset, train_config: TrainConfig) -> Tuple[Dataset, Dataset]:
    """Обучающая выборка и фиксированная отложенная выборка оценки"""
    train, holdout = split_holdout(dataset, train_config.eval_size)
    if train_config.dataset_size is not None:
        if train_config.dataset_size > train.n:
            raise ConfigError(f"dataset_size={train_config.dataset_size} больше {train.n} доступных строк")
        train = train.subset(np.arange(train_config.dataset_size))
    if train_config.batch_size > train.n:
        raise ConfigError(f"batch_size={train_config.batch_size} больше обучающей выборки ({train.n})")
    return train, holdout


def snapshot(params: FEParams, optimizers: Dict[str, Adam], rng: np.random.Generator,
             iteration: int, history: TrainHistory, train_config: TrainConfig,
             dataset_digest: str = "") -> Checkpoint:
    """Состояние обучения для сохранения в чекпоинт"""
    tensors = {name: t.values.copy() for name, t in params.named_tensors().items()}
    adam_m, adam_v, adam_t = {}, {}, {}
    for optimizer in optimizers.values():
        for param, state in zip(optimizer.params, optimizer.states):
            adam_m[param.name] = state.m.copy()
            adam_v[param.name] = state.v.copy()
            adam_t[param.name] = state.t
    return Checkpoint(
        model_config=params.config, train_config=train_config, iteration=iteration,
        rng_state=rng.bit_generator.state, history=history, tensors=tensors,
        adam_m=adam_m, adam_v=adam_v, adam_t=adam_t, dataset_digest=dataset_digest,
    )


def restore(checkpoint: Checkpoint, params: FEParams, optimizers: Dict[str, Adam],
            rng: np.random.Generator) -> None:
    """Загружает параметры, моменты Adam и состояние генератора на место"""
    params.load_values(checkpoint.tensors)
    for optimizer in optimizers.values():
        for param, state in zip(optimizer.params, optimizer.states):
            if param.name in checkpoint.adam_m:
                state.m = checkpoint.adam_m[param.name].copy()
                state.v = checkpoint.adam_v[param.name].copy()
                state.t = checkpoint.adam_t.get(param.name, 0)
    rng.bit_generator.state = checkpoint.rng_state


def params_from_checkpoint(checkpoint: Checkpoint) -> FEParams:
    """Параметры модели из загруженного чекпоинта"""
    params = FEParams.init(checkpoint.model_config, np.random.default_rng(0))
    params.load_values(checkpoint.tensors)
    return params


def train_run(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
              resume_from: Optional[Union[str, Path]] = None,
              verbose: bool = True) -> Tuple[FEParams, TrainHistory]:
    """
    Полный прогон обучения

    Args:
        dataset: Набор данных (последние eval_size строк - отложенная выборка)
        model_config: Конфигурация модели
        train_config: Протокол обучения
        resume_from: Чекпоинт для продолжения обучения
        verbose: Печатать прогресс

    Returns:
        Tuple[FEParams, TrainHistory]: Обученные параметры и история оценок
    """
    _validate(dataset, model_config)
    train, holdout = prepare_splits(dataset, train_config)
    y_train = _labels(model_config, train)

    params = FEParams.init(model_config, np.random.default_rng([train_config.seed, 0]),
                           output_mean=train.X.mean(axis=0))
    optimizers = make_optimizers(params, train_config.lr)
    rng = np.random.default_rng([train_config.seed, 1])
    history = TrainHistory(levels=model_config.levels)
    start = 0

    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from, expected_config=model_config)
        saved = {k: v for k, v in checkpoint.train_config.to_dict().items() if k not in _RESUMABLE_FIELDS}
        current = {k: v for k, v in train_config.to_dict().items() if k not in _RESUMABLE_FIELDS}
        if saved != current:
            raise ConfigError("Протокол обучения чекпоинта не совпадает с текущим")
        if checkpoint.iteration > train_config.iterations:
            raise ConfigError(f"Чекпоинт на итерации {checkpoint.iteration} дальше цели "
                              f"{train_config.iterations}")
        restore(checkpoint, params, optimizers, rng)
        history = checkpoint.history
        start = checkpoint.iteration
        if verbose:
            print(f"🔄 Продолжение обучения с итерации {start}: {resume_from}")

    if verbose:
        print(f"🔧 Модель {model_config.kind}: n={model_config.n_latents}, "
              f"параметров {params.num_parameters()}, обучающих строк {train.n}")

    batches = make_batches(train.n, train_config.batch_size, rng)
    iterations = range(start + 1, train_config.iterations + 1)
    for iteration in tqdm(iterations, desc="🧠 Обучение", disable=not verbose, leave=False):
        idx = next(batches)
        y = None if y_train is None else y_train[idx]
        values = train_step(params, train.X[idx], y, optimizers, rng, iteration)

        if iteration % train_config.eval_every == 0 or iteration == train_config.iterations:
            re = recon_error_per_level(params, holdout.X)
            history.append(HistoryRecord(iteration=iteration, re=re,
                                         losses={k: v for k, v in values.items() if k != "kl"},
                                         kl=values["kl"]))
        if verbose and iteration % train_config.log_every == 0:
            re_text = ", ".join(f"{v:.4f}" for v in recon_error_per_level(params, holdout.X))
            tqdm.write(f"📊 Итерация {iteration}: RE = [{re_text}], KL = {values['kl']:.4f}")

    if train_config.checkpoint_path:
        path = save_checkpoint(snapshot(params, optimizers, rng, train_config.iterations, history,
                                        train_config, dataset.digest()),
                               train_config.checkpoint_path)
        if verbose:
            print(f"💾 Чекпоинт сохранен: {path}")
    return params, history


def history_to_frame(history: TrainHistory) -> pd.DataFrame:
    """История в таблицу: iteration, re_<level>..., kl, loss_<group>..."""
    rows = []
    for record in history.records:
        row = {'iteration': record.iteration}
        for level, value in zip(history.levels, record.re):
            row[f're_{level}'] = value
        row['kl'] = record.kl
        for name, value in record.losses.items():
            row[f'loss_{name}'] = value
        rows.append(row)
    columns: List[str] = ['iteration'] + [f're_{level}' for level in history.levels] + ['kl']
    if rows:
        columns += [c for c in rows[0] if c.startswith('loss_')]
    return pd.DataFrame(rows, columns=columns)


def save_history_csv(history: TrainHistory, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history_to_frame(history).to_csv(path, index=False)
    return path
