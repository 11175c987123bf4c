"""
Full Encoder: Encoder0 + Encoder, прогрессивно патчащий декодер (NN0, NN1..NNn, Decoder)
и функции потерь всех групп параметров.

Уровень i реконструкции использует только z0..zi: m0 = NN0(z0),
m_i = patch(m_{i-1}, NNi(z_i)), x_hat_i = Decoder(m_i).
Флаг baseline_vae сворачивает модель в обычный VAE с одной реконструкцией.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data_structures import ModelConfig
from .errors import ConfigError, ShapeError
from .tensor import Tensor

PATCHER_GAIN = 0.1
DECODER_GAIN = 0.1


@dataclass
class Dense:
    """Полносвязный слой x @ W + b"""
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator, name: str,
             gain: float = 1.0) -> "Dense":
        # LeCun normal - стандартная инициализация для SeLU
        weight = rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)
        return cls(
            weight=Tensor(weight, requires_grad=True, name=f"{name}.weight"),
            bias=Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}.bias"),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


def _mlp_init(sizes: Sequence[int], rng: np.random.Generator, name: str,
              head_gain: float = 1.0) -> List[Dense]:
    layers = []
    for idx, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = head_gain if idx == len(sizes) - 2 else 1.0
        layers.append(Dense.init(fan_in, fan_out, rng, f"{name}.{idx}", gain=gain))
    return layers


def _mlp_forward(layers: List[Dense], x: Tensor, linear: bool) -> Tensor:
    """Скрытые слои с SeLU (или тождеством), последний слой линейный"""
    h = x
    for layer in layers[:-1]:
        h = layer(h)
        h = T.identity(h) if linear else T.selu(h)
    return layers[-1](h)


@dataclass
class FEParams:
    """Слои модели по модулям; группы параметров - разбиение всех тензоров"""
    config: ModelConfig
    modules: Dict[str, List[Dense]]

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator,
             output_mean: Optional[np.ndarray] = None) -> "FEParams":
        """
        Случайная инициализация

        Выход Decoder начинается почти с константы output_mean (средний вектор
        обучающих наблюдений), поэтому RE необученной сети близка к дисперсии X.

        Args:
            config: Конфигурация модели
            rng: Генератор инициализации
            output_mean: Начальное смещение последнего слоя Decoder (None - нули)

        Returns:
            FEParams: Параметры с размерами слоев по конфигурации
        """
        n, d, md = config.n_latents, config.n_outputs, config.median_dim
        enc, nnh, dec = list(config.encoder_hidden), list(config.nn_hidden), list(config.decoder_hidden)
        modules: Dict[str, List[Dense]] = OrderedDict()

        if config.baseline_vae:
            modules["encoder"] = _mlp_init([d] + enc + [2 * n], rng, "encoder")
            modules["latent_mlp"] = _mlp_init([n] + nnh + [md], rng, "latent_mlp")
            modules["decoder"] = _mlp_init([md] + dec + [d], rng, "decoder", head_gain=DECODER_GAIN)
            return cls(config=config, modules=modules)._with_output_mean(output_mean)

        head0 = config.z0_dim if config.supervised else 2
        modules["encoder0"] = _mlp_init([d] + enc + [head0], rng, "encoder0")
        modules["encoder"] = _mlp_init([d] + enc + [2 * n], rng, "encoder")
        modules["nn0"] = _mlp_init([config.z0_dim] + nnh + [md], rng, "nn0")
        for i in range(1, n + 1):
            modules[f"nn{i}"] = _mlp_init([1] + nnh + [2 * md], rng, f"nn{i}", head_gain=PATCHER_GAIN)
        modules["decoder"] = _mlp_init([md] + dec + [d], rng, "decoder", head_gain=DECODER_GAIN)
        return cls(config=config, modules=modules)._with_output_mean(output_mean)

    def _with_output_mean(self, output_mean: Optional[np.ndarray]) -> "FEParams":
        if output_mean is None:
            return self
        head = self.modules["decoder"][-1]
        output_mean = np.asarray(output_mean, dtype=np.float64).reshape(1, -1)
        if output_mean.shape != head.bias.shape:
            raise ShapeError(f"output_mean: ожидалось {head.bias.shape[1]} значений, получено {output_mean.shape[1]}")
        head.bias.values = output_mean.copy()
        return self

    def groups(self) -> Dict[str, List[Tensor]]:
        """Группа параметров -> тензоры; каждая группа обучается своей функцией потерь"""
        result: Dict[str, List[Tensor]] = OrderedDict()
        for module, layers in self.modules.items():
            group = "decoder" if module == "latent_mlp" else module
            result.setdefault(group, [])
            for layer in layers:
                result[group].extend([layer.weight, layer.bias])
        return result

    def named_tensors(self) -> Dict[str, Tensor]:
        result = OrderedDict()
        for layers in self.modules.values():
            for layer in layers:
                result[layer.weight.name] = layer.weight
                result[layer.bias.name] = layer.bias
        return result

    def num_parameters(self) -> int:
        return int(sum(t.values.size for t in self.named_tensors().values()))

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        """Копирует значения тензоров по именам (например, из чекпоинта)"""
        named = self.named_tensors()
        if set(named) != set(values):
            raise ConfigError("Набор тензоров не совпадает с архитектурой модели")
        for name, t in named.items():
            if values[name].shape != t.shape:
                raise ShapeError(f"{name}: форма {values[name].shape} != {t.shape}")
            t.values = np.array(values[name], dtype=np.float64)

    def copy(self) -> "FEParams":
        clone = FEParams.init(self.config, np.random.default_rng(0))
        clone.load_values({k: t.values for k, t in self.named_tensors().items()})
        return clone


@dataclass
class ForwardOutputs:
    """Промежуточные величины одного прямого прохода"""
    levels: List[int]
    z0: Optional[Tensor] = None  # вход NN0 (y при teacher forcing)
    y_hat: Optional[Tensor] = None
    mu0: Optional[Tensor] = None
    sigma0: Optional[Tensor] = None
    eps0: Optional[np.ndarray] = None
    mu: Optional[Tensor] = None
    sigma: Optional[Tensor] = None
    eps: Optional[np.ndarray] = None
    z: Optional[Tensor] = None
    p1: List[Tensor] = field(default_factory=list)  # уровни 1..n
    p2: List[Tensor] = field(default_factory=list)
    m: List[Tensor] = field(default_factory=list)  # по levels
    x_hat: List[Tensor] = field(default_factory=list)  # по levels


def _check_input(config: ModelConfig, x: Tensor) -> None:
    if x.values.ndim != 2 or x.shape[1] != config.n_outputs:
        raise ShapeError(f"Ожидалась матрица B x {config.n_outputs}, получено {x.shape}")


def _gaussian_head(config: ModelConfig, out: Tensor, width: int) -> Tuple[Tensor, Tensor]:
    """Делит выход на mu и log sigma; sigma = exp(clamp(log sigma))"""
    mu = T.take_columns(out, 0, width)
    log_sigma = T.clamp(T.take_columns(out, width, 2 * width), config.logsigma_min, config.logsigma_max)
    return mu, T.exp(log_sigma)


def encode0(params: FEParams, x, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Optional[Tensor]]:
    """
    Encoder0: первый латент

    Args:
        params: Параметры модели
        x: Батч наблюдений B x n_outputs
        training: Включить dropout на входе
        rng: Генератор для dropout

    Returns:
        Tuple[Tensor, Optional[Tensor]]: supervised - (y_hat, None), иначе (mu0, sigma0)
    """
    config = params.config
    if config.baseline_vae:
        raise ConfigError("У baseline VAE нет Encoder0")
    x = T.as_tensor(x)
    _check_input(config, x)
    h, _ = T.dropout_forward(x, config.drop_ratio, training, rng)
    out = _mlp_forward(params.modules["encoder0"], h, config.linear_activation)
    if config.supervised:
        return out, None
    return _gaussian_head(config, out, 1)


def encode(params: FEParams, x, training: bool = False,
           rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """
    Encoder: dropout -> FC -> SeLU -> FC -> SeLU -> FC 2n, деление на mu и log sigma

    Returns:
        Tuple[Tensor, Tensor]: (mu, sigma), по n столбцов
    """
    config = params.config
    x = T.as_tensor(x)
    _check_input(config, x)
    h, _ = T.dropout_forward(x, config.drop_ratio, training, rng)
    out = _mlp_forward(params.modules["encoder"], h, config.linear_activation)
    return _gaussian_head(config, out, config.n_latents)


def reparameterize(mu, sigma, rng: Optional[np.random.Generator] = None,
                   eps: Optional[np.ndarray] = None) -> Tensor:
    """
    z = mu + sigma * eps, eps ~ N(0, I); eps не получает градиент

    Args:
        mu: Среднее
        sigma: Стандартное отклонение (> 0)
        rng: Генератор eps (если eps не задан)
        eps: Готовый шум; без rng и eps шум нулевой (z = mu)

    Returns:
        Tensor: z
    """
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise ShapeError(f"reparameterize: формы mu {mu.shape} и sigma {sigma.shape} не совпадают")
    if eps is None:
        eps = rng.standard_normal(mu.shape) if rng is not None else np.zeros(mu.shape)
    if np.shape(eps) != mu.shape:
        raise ShapeError(f"reparameterize: форма eps {np.shape(eps)} != {mu.shape}")
    return T.add(mu, T.mul(sigma, Tensor(eps)))


def patch(m_prev, p1, p2, rule: str) -> Tensor:
    """
    Обновление медианного кода

    Args:
        m_prev: Предыдущий медианный код
        p1: Аддитивный патчер
        p2: Мультипликативный патчер (игнорируется правилом additive)
        rule: additive (m = p1 + m_prev) | two-step (m = p1 + p2 * m_prev)

    Returns:
        Tensor: Новый медианный код
    """
    m_prev, p1 = T.as_tensor(m_prev), T.as_tensor(p1)
    if p1.shape != m_prev.shape:
        raise ShapeError(f"patch: формы p1 {p1.shape} и m {m_prev.shape} не совпадают")
    if rule == "additive":
        return T.add(p1, m_prev)
    if rule == "two-step":
        p2 = T.as_tensor(p2)
        if p2.shape != m_prev.shape:
            raise ShapeError(f"patch: формы p2 {p2.shape} и m {m_prev.shape} не совпадают")
        return T.add(p1, T.mul(p2, m_prev))
    raise ConfigError(f"Неизвестное правило патча: {rule}")


def patchers(params: FEParams, level: int, z_col: Tensor) -> Tuple[Tensor, Tensor]:
    """NN_level(z_level) -> (p1, p2); к p2 прибавляется 1, чтобы начальный патч был тождественным"""
    config = params.config
    md = config.median_dim
    out = _mlp_forward(params.modules[f"nn{level}"], z_col, config.linear_activation)
    return T.take_columns(out, 0, md), T.add(T.take_columns(out, md, 2 * md), 1.0)


def decode(params: FEParams, m: Tensor) -> Tensor:
    return _mlp_forward(params.modules["decoder"], m, params.config.linear_activation)


def _sample_latent(config: ModelConfig, mu: Tensor, sigma: Tensor, training: bool,
                   rng: Optional[np.random.Generator]) -> Tuple[Tensor, np.ndarray]:
    if training and config.variational:
        eps = rng.standard_normal(mu.shape)
    else:
        eps = np.zeros(mu.shape)
    return reparameterize(mu, sigma, eps=eps), eps


def forward_full(params: FEParams, x, y=None, training: bool = True,
                 rng: Optional[np.random.Generator] = None) -> ForwardOutputs:
    """
    Полный прямой проход

    Args:
        params: Параметры модели
        x: Батч наблюдений B x n_outputs
        y: Метки B x z0_dim (нужны для teacher forcing при обучении)
        training: Режим обучения (dropout и сэмплирование eps); иначе z = mu
        rng: Генератор для dropout и eps

    Returns:
        ForwardOutputs: Латенты, патчеры, медианные коды и реконструкции
    """
    config = params.config
    if training and rng is None:
        raise ConfigError("Для режима обучения нужен генератор rng")
    x = T.as_tensor(x)
    _check_input(config, x)
    out = ForwardOutputs(levels=config.levels)

    if config.baseline_vae:
        out.mu, out.sigma = encode(params, x, training, rng)
        out.z, out.eps = _sample_latent(config, out.mu, out.sigma, training, rng)
        m = _mlp_forward(params.modules["latent_mlp"], out.z, config.linear_activation)
        out.m.append(m)
        out.x_hat.append(decode(params, m))
        return out

    if config.supervised:
        out.y_hat, _ = encode0(params, x, training, rng)
        if config.teacher_forcing and training and y is not None:
            y = T.as_tensor(y)
            if y.shape != out.y_hat.shape:
                raise ShapeError(f"Форма меток {y.shape} != {out.y_hat.shape}")
            out.z0 = y
        else:
            out.z0 = out.y_hat
    else:
        out.mu0, out.sigma0 = encode0(params, x, training, rng)
        out.z0, out.eps0 = _sample_latent(config, out.mu0, out.sigma0, training, rng)

    out.mu, out.sigma = encode(params, x, training, rng)
    out.z, out.eps = _sample_latent(config, out.mu, out.sigma, training, rng)
    out.p1, out.p2, out.m, out.x_hat = decode_levels(params, out.z0, out.z)
    return out


def decode_levels(params: FEParams, z0, z) -> Tuple[List[Tensor], List[Tensor], List[Tensor], List[Tensor]]:
    """
    Прогрессивный декодер из заданных латентов

    Args:
        params: Параметры модели
        z0: Первый латент (или блок меток) B x z0_dim
        z: Латенты Encoder B x n

    Returns:
        Tuple: (p1 по уровням 1..n, p2 по уровням 1..n, m по уровням 0..n, x_hat по уровням 0..n)
    """
    config = params.config
    z0, z = T.as_tensor(z0), T.as_tensor(z)
    if z.values.ndim != 2 or z.shape[1] != config.n_latents:
        raise ShapeError(f"Ожидалось {config.n_latents} латентов, получено {z.shape}")
    p1s, p2s = [], []
    m = _mlp_forward(params.modules["nn0"], z0, config.linear_activation)
    ms, x_hats = [m], [decode(params, m)]
    for i in range(1, config.n_latents + 1):
        p1, p2 = patchers(params, i, T.take_columns(z, i - 1, i))
        m = patch(m, p1, p2, config.patch_rule)
        p1s.append(p1)
        p2s.append(p2)
        ms.append(m)
        x_hats.append(decode(params, m))
    return p1s, p2s, ms, x_hats


def weight_multiplier(i: int, xi: float, alpha: float) -> float:
    """xi * (1 - alpha^i) / (1 - alpha) + 1; для i = 0 равен 1"""
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha должен лежать в (0, 1), получено {alpha}")
    if i < 0:
        raise ConfigError(f"Уровень должен быть >= 0, получено {i}")
    return xi * (1.0 - alpha ** i) / (1.0 - alpha) + 1.0


def level_weights(config: ModelConfig) -> List[float]:
    """Множители для уровней 0..n"""
    return [weight_multiplier(i, config.xi, config.alpha) for i in range(config.n_latents + 1)]


def latent_kl(outputs: ForwardOutputs, config: ModelConfig) -> Tensor:
    """
    KL латентов Encoder: для FE (1/n) * сумма KL(z_i), для обычного VAE - сумма
    """
    if not config.variational:
        return Tensor(0.0)
    kl = T.gaussian_kl(outputs.mu, outputs.sigma)
    return kl if config.baseline_vae else T.mul(kl, 1.0 / config.n_latents)


def reconstruction_loss(x_hat, x) -> Tensor:
    """
    Квадратичная ошибка, просуммированная по выходам и усредненная по батчу

    RE в метриках - среднее по элементам, здесь - сумма по выходам образца.
    """
    x = T.as_tensor(x)
    width = x.shape[1] if x.values.ndim > 1 else 1
    return T.mul(T.mse(x_hat, x), float(width))


def compute_losses(outputs: ForwardOutputs, x, y, config: ModelConfig) -> Dict[str, Tensor]:
    """
    Функции потерь по группам параметров

    Args:
        outputs: Результат forward_full на этом же батче
        x: Батч наблюдений
        y: Метки (обязательны в supervised режиме)
        config: Конфигурация модели

    Returns:
        Dict[str, Tensor]: Имя группы -> скалярная функция потерь этой группы
    """
    x = T.as_tensor(x)
    recon = [reconstruction_loss(x_hat, x) for x_hat in outputs.x_hat]
    kl = latent_kl(outputs, config)
    losses: Dict[str, Tensor] = OrderedDict()

    if config.baseline_vae:
        losses["encoder"] = T.add(recon[0], T.mul(kl, config.beta))
        losses["decoder"] = recon[0]
        return losses

    if config.supervised:
        if y is None:
            raise ConfigError("В supervised режиме нужны метки y")
        losses["encoder0"] = T.mse(outputs.y_hat, T.as_tensor(y))
    elif config.variational:
        kl0 = T.gaussian_kl(outputs.mu0, outputs.sigma0)
        losses["encoder0"] = T.add(recon[0], T.mul(kl0, config.beta))
    else:
        losses["encoder0"] = recon[0]

    weights = level_weights(config)
    encoder_loss = T.mul(kl, config.beta)
    for i in range(1, config.n_latents + 1):
        encoder_loss = T.add(encoder_loss, T.mul(recon[i], weights[i]))
    losses["encoder"] = encoder_loss

    losses["nn0"] = recon[0]
    for i in range(1, config.n_latents + 1):
        losses[f"nn{i}"] = recon[i]

    decoder_loss = recon[0]
    for i in range(1, config.n_latents + 1):
        decoder_loss = T.add(decoder_loss, T.mul(recon[i], weights[i]))
    losses["decoder"] = decoder_loss
    return losses


def reconstruct(params: FEParams, x) -> List[np.ndarray]:
    """Реконструкции всех уровней в режиме оценки (z = mu, без dropout)"""
    outputs = forward_full(params, x, training=False)
    return [x_hat.numpy() for x_hat in outputs.x_hat]


def latent_labels(config: ModelConfig) -> List[str]:
    """Имена столбцов латентов: z0 - L1 (или L1.1.. для блока меток), затем L2..L(n+1)"""
    if config.baseline_vae:
        return [f"L{i}" for i in range(1, config.n_latents + 1)]
    if config.z0_dim == 1:
        head = ["L1"]
    else:
        head = [f"L1.{j + 1}" for j in range(config.z0_dim)]
    return head + [f"L{i}" for i in range(2, config.n_latents + 2)]


def encode_latents(params: FEParams, x) -> Tuple[np.ndarray, List[str]]:
    """
    Латентные отклики в режиме оценки

    Args:
        params: Параметры модели
        x: Наблюдения N x n_outputs

    Returns:
        Tuple[np.ndarray, List[str]]: (N x столбцов, имена столбцов)
    """
    config = params.config
    mu, _ = encode(params, x)
    if config.baseline_vae:
        return mu.numpy(), latent_labels(config)
    head, _ = encode0(params, x)
    return np.hstack([head.numpy(), mu.numpy()]), latent_labels(config)
