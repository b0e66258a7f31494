""" Supervised fitting: the source model (every parameter) and BN-only fitting of pool candidates. """
import json
import os
from os.path import join as pj
from typing import Sequence

import numpy as np
from loguru import logger
from scipy.special import log_softmax
from tqdm import tqdm

from .batchnorm import merge_batch_stats
from .exceptions import InsufficientSamplesError, SourceAccuracyError
from .network import BnMode, CachePolicy, ModelSpec, Network, _reverse, backward_bn_affine
from .stream import TaskSpec

__all__ = ('Config', 'SourceTrainer', 'cross_entropy_grad', 'accuracy', 'fit_source_model', 'fit_bn_supervised',
           'load_source')

DEFAULT_STATS_MOMENTUM = 0.9


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray):
    """ Mean cross-entropy over the batch and its gradient w.r.t. the logits. """
    log_probs = log_softmax(logits, axis=1)
    size = logits.shape[0]
    loss = -log_probs[np.arange(size), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(size), labels] -= 1.0
    return loss, grad / size


def accuracy(network: Network, samples: np.ndarray, labels: np.ndarray, bn_mode: BnMode = BnMode.RUNNING) -> float:
    return float((network.predict(samples, bn_mode=bn_mode) == labels).mean())


def fit_source_model(task: TaskSpec,
                     spec: ModelSpec,
                     epochs: int = 10,
                     lr: float = 0.1,
                     batch_size: int = 32,
                     train_size: int = 4000,
                     stats_momentum: float = DEFAULT_STATS_MOMENTUM,
                     seed: int = 0,
                     min_accuracy: float = 0.95,
                     disable_progress: bool = True) -> Network:
    """ Train every parameter (dense and BN) on clean task samples with mini-batch gradient descent.

    This is the only place dense weights change. BN layers train on batch statistics and integrate them into the
    running ones, which the returned model uses for inference.

    @param min_accuracy: Clean held-out accuracy the model must reach, `None` to skip the check.
    """
    assert batch_size >= 2, 'BN training needs batches of at least two samples'
    network = Network.initialize(spec, seed)
    data_rng, order_rng = np.random.default_rng(seed + 1), np.random.default_rng(seed + 2)
    x, y = task.sample(train_size, data_rng)
    x_test, y_test = task.sample(max(train_size // 4, 200), data_rng)
    for e in tqdm(range(epochs), disable=disable_progress):
        order = order_rng.permutation(train_size)
        total_loss = []
        for start in range(0, train_size - batch_size + 1, batch_size):
            index = order[start:start + batch_size]
            logits, cache = network.forward(x[index], bn_mode=BnMode.BATCH, cache_policy=CachePolicy.FOR_BACKWARD)
            loss, grad = cross_entropy_grad(logits, y[index])
            bn_grads, dense_grads = _reverse(network, cache, grad, with_dense=True)
            for n, (g_weight, g_bias) in dense_grads.items():
                network.params[n].weight -= lr * g_weight
                network.params[n].bias -= lr * g_bias
            for layer, (g_gamma, g_beta) in zip(network.bn_layers, bn_grads):
                layer.gamma -= lr * g_gamma
                layer.beta -= lr * g_beta
            merge_batch_stats(network, cache, stats_momentum)
            total_loss.append(loss)
        logger.debug(f'[epoch {e}/{epochs}] average loss: {round(float(np.mean(total_loss)), 4)}')
    acc = accuracy(network, x_test, y_test)
    logger.info(f'source model clean accuracy: {round(acc * 100, 2)}')
    if min_accuracy is not None and acc < min_accuracy:
        raise SourceAccuracyError(acc, min_accuracy)
    return network


def fit_bn_supervised(network: Network,
                      samples: np.ndarray,
                      labels: np.ndarray,
                      epochs: int = 2,
                      lr: float = 0.01,
                      batch_size: int = 16,
                      stats_momentum: float = DEFAULT_STATS_MOMENTUM,
                      seed: int = 0) -> Network:
    """ Fit only the BN layers of a copy of `network` to a labeled subset.

    Cross-entropy drives gamma/beta through the BN-affine reverse pass; the running statistics absorb every batch's
    statistics via the merge rule. Dense weights stay frozen.
    """
    if len(samples) < batch_size:
        raise InsufficientSamplesError(len(samples), batch_size, 'supervised BN fitting')
    network = network.copy()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples) - batch_size + 1, batch_size):
            index = order[start:start + batch_size]
            logits, cache = network.forward(samples[index], bn_mode=BnMode.BATCH,
                                            cache_policy=CachePolicy.FOR_BACKWARD)
            _, grad = cross_entropy_grad(logits, labels[index])
            for layer, (g_gamma, g_beta) in zip(network.bn_layers, backward_bn_affine(network, cache, grad)):
                layer.gamma -= lr * g_gamma
                layer.beta -= lr * g_beta
            merge_batch_stats(network, cache, stats_momentum)
    return network


class Config:
    """ Source checkpoint managing class. """

    def __init__(self, checkpoint_dir: str, config_file: str = 'trainer_config.json', **kwargs):
        self.checkpoint_dir = checkpoint_dir
        if os.path.exists(pj(self.checkpoint_dir, config_file)):
            logger.info(f'load config from existing checkpoint at {self.checkpoint_dir}')
            self.config = self.safe_open(pj(self.checkpoint_dir, config_file))
        else:
            logger.info(f'initialize checkpoint at {self.checkpoint_dir}')
            self.config = kwargs
            os.makedirs(self.checkpoint_dir, exist_ok=True)
            with open(pj(self.checkpoint_dir, config_file), 'w') as f:
                json.dump(self.config, f)

        self.__dict__.update(self.config)
        logger.info('hyperparameters')
        for k, v in self.config.items():
            logger.info(f'\t * {k}: {str(v)[:min(100, len(str(v)))]}')

    @staticmethod
    def safe_open(_file):
        with open(_file, 'r') as f:
            return json.load(f)


class SourceTrainer:
    """ Fit the source model into a checkpoint directory (`trainer_config.json`, `model.json`, `run.log`). """

    def __init__(self,
                 checkpoint_dir: str,
                 input_dim: int = 32,
                 class_count: int = 10,
                 noise_scale: float = 0.35,
                 prototype_scale: float = 1.0,
                 task_seed: int = 0,
                 hidden: Sequence[int] = (64, 64),
                 eps: float = 1e-5,
                 epochs: int = 10,
                 batch: int = 32,
                 lr: float = 0.1,
                 train_size: int = 4000,
                 random_seed: int = 0,
                 min_accuracy: float = 0.95,
                 disable_log: bool = False,
                 config_file: str = 'trainer_config.json'):
        self.config = Config(
            config_file=config_file, checkpoint_dir=checkpoint_dir, input_dim=input_dim, class_count=class_count,
            noise_scale=noise_scale, prototype_scale=prototype_scale, task_seed=task_seed, hidden=list(hidden),
            eps=eps, epochs=epochs, batch=batch, lr=lr, train_size=train_size, random_seed=random_seed,
            min_accuracy=min_accuracy)
        if not disable_log:
            logger.add(pj(self.config.checkpoint_dir, 'run.log'), level='DEBUG')
        self.model_path = pj(self.config.checkpoint_dir, 'model.json')
        self.task = TaskSpec.create(self.config.input_dim, self.config.class_count, self.config.noise_scale,
                                    self.config.prototype_scale, self.config.task_seed)
        self.spec = ModelSpec.mlp(self.config.input_dim, self.config.hidden, self.config.class_count, self.config.eps)

    def train(self, disable_progress: bool = False) -> Network:
        if os.path.exists(self.model_path):
            logger.info('training is completed')
            return Network.load(self.model_path)
        logger.info('start source model training')
        network = fit_source_model(self.task, self.spec, epochs=self.config.epochs, lr=self.config.lr,
                                   batch_size=self.config.batch, train_size=self.config.train_size,
                                   seed=self.config.random_seed, min_accuracy=self.config.min_accuracy,
                                   disable_progress=disable_progress)
        network.save(self.model_path)
        logger.info(f'complete training: model was saved at {self.model_path}')
        return network


def load_source(checkpoint_dir: str, config_file: str = 'trainer_config.json'):
    """ Task and fitted source model of a checkpoint directory. """
    config = Config.safe_open(pj(checkpoint_dir, config_file))
    task = TaskSpec.create(config['input_dim'], config['class_count'], config['noise_scale'],
                           config['prototype_scale'], config['task_seed'])
    return task, Network.load(pj(checkpoint_dir, 'model.json'))
