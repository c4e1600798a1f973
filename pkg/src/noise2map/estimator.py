"""scikit-learn compatible wrapper around the train/predict pipeline."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import ConfusionMatrix, summarize
from .inference import predict_logits
from .model import UNetConfig, build_model
from .objectives import ClassWeights
from .schedule import ScheduleConfig
from .training import Checkpoint, TaskData, TrainConfig, load_pretrained, train_task
from .validation import check_images, check_masks


class DiffusionSegmenter(ClassifierMixin, BaseEstimator):
    """Pixel classifier trained on task-structured noised inputs.

    ``X`` is ``[N, C, H, W]`` for ``task="ss"`` and ``[N, 2C, H, W]`` (pre
    image channels first) for ``task="cd"``; ``y`` is ``[N, H, W]`` of class
    indices. Prediction is a single forward pass at ``inference_timestep``
    (``None`` means the final timestep).

    Setting ``diffusion=False`` trains the same backbone without timestep
    conditioning and without noising.
    """

    def __init__(self, task="ss", n_classes=2, in_channels=3, stage_channels=(16, 32, 64), num_resolutions=3,
                 time_embed_dim=64, timesteps=1000, schedule="linear_beta", base_steps=1000, diffusion=True,
                 class_weights=None, epochs=50, batch_size=8, lr=1e-4, grad_accum=2, optimizer="adam",
                 lr_schedule="constant", inference_timestep=None, init_checkpoint=None, random_state=0):
        self.task = task
        self.n_classes = n_classes
        self.in_channels = in_channels
        self.stage_channels = stage_channels
        self.num_resolutions = num_resolutions
        self.time_embed_dim = time_embed_dim
        self.timesteps = timesteps
        self.schedule = schedule
        self.base_steps = base_steps
        self.diffusion = diffusion
        self.class_weights = class_weights
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.grad_accum = grad_accum
        self.optimizer = optimizer
        self.lr_schedule = lr_schedule
        self.inference_timestep = inference_timestep
        self.init_checkpoint = init_checkpoint
        self.random_state = random_state

    def _channels(self):
        return self.in_channels * (2 if self.task == "cd" else 1)

    def _multiple(self):
        return 2 ** (self.num_resolutions - 1)

    def _task_data(self, X, y):
        x = check_images(X, self._channels(), self._multiple())
        yt = check_masks(y, x.shape[0], x.shape[2:], self.n_classes)
        return TaskData(x, yt, [str(i) for i in range(x.shape[0])], self.task)

    def fit(self, X, y, X_val=None, y_val=None):
        train = self._task_data(X, y)
        val = self._task_data(X_val, y_val) if X_val is not None else None
        config = UNetConfig(
            in_channels=self.in_channels, out_classes=self.n_classes, stage_channels=tuple(self.stage_channels),
            num_resolutions=self.num_resolutions, time_embed_dim=self.time_embed_dim,
            use_timestep_conditioning=self.diffusion, tasks=(self.task,),
        )
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = build_model(config, seed=seed)
        self.n_transferred_ = 0
        if self.init_checkpoint is not None:
            self.n_transferred_ = load_pretrained(self.model_, self.init_checkpoint)
        self.schedule_ = ScheduleConfig.create(task=self.task, T=self.timesteps, kind=self.schedule,
                                               base_steps=self.base_steps)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, grad_accum=self.grad_accum,
                          optimizer=self.optimizer, lr_schedule=self.lr_schedule, seed=seed,
                          diffusion=self.diffusion)
        weights = ClassWeights(tuple(self.class_weights)) if self.class_weights is not None else None
        self.checkpoint_: Checkpoint = train_task(self.model_, train, val, task=self.task, schedule=self.schedule_,
                                                  cfg=cfg, class_weights=weights)
        self.history_ = self.checkpoint_.history
        self.classes_ = np.arange(self.n_classes)
        self.n_features_in_ = self._channels()
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        x = check_images(X, self._channels(), self._multiple())
        logits = predict_logits(self.model_, x, self.schedule_, self.inference_timestep)
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, X):
        check_is_fitted(self, "model_")
        x = check_images(X, self._channels(), self._multiple())
        return predict_logits(self.model_, x, self.schedule_, self.inference_timestep).argmax(dim=1).numpy()

    def score(self, X, y, sample_weight=None):
        """Foreground F1 for binary problems, macro F1 otherwise."""
        pred = self.predict(X)
        y = check_masks(y, pred.shape[0], pred.shape[1:], self.n_classes).numpy()
        cm = ConfusionMatrix.zeros(self.n_classes).accumulate(pred, y)
        return summarize(cm)["mean_f1"]
