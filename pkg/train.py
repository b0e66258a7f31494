import fire
from typing import List

from odtta.trainer import SourceTrainer


class SourceFitting:

    def fit_source(
            self,
            checkpoint_dir: str = './cp',
            input_dim: int = 32,
            class_count: int = 10,
            noise_scale: float = 0.35,
            prototype_scale: float = 1.0,
            task_seed: int = 0,
            hidden: List[int] = (64, 64),
            eps: float = 1e-5,
            epochs: int = 10,
            batch: int = 32,
            lr: float = 0.1,
            train_size: int = 4000,
            random_seed: int = 0,
            min_accuracy: float = 0.95,
            disable_log: bool = False,
            config_file: str = 'trainer_config.json'
    ):
        assert (
            checkpoint_dir
        ), "Please specify a --checkpoint_dir, e.g. --checkpoint_dir='./cp'"
        trainer = SourceTrainer(
            checkpoint_dir=checkpoint_dir,
            input_dim=input_dim,
            class_count=class_count,
            noise_scale=noise_scale,
            prototype_scale=prototype_scale,
            task_seed=task_seed,
            hidden=hidden,
            eps=eps,
            epochs=epochs,
            batch=batch,
            lr=lr,
            train_size=train_size,
            random_seed=random_seed,
            min_accuracy=min_accuracy,
            disable_log=disable_log,
            config_file=config_file
        )
        trainer.train()


if __name__ == '__main__':
    fire.Fire(SourceFitting)
