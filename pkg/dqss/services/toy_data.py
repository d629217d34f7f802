"""
Desk-scale models and datasets.

- toy CNN: conv-relu-conv-bn-relu-avgpool-fc on 1 x 8 x 8 inputs, 3 searchable layers.
- outlier images: class templates plus Gaussian noise, with a small fraction of
  pixels replaced by heavy-tailed (Student-t) spikes, so the first layer sees
  activations whose max |x| sits far above the bulk.
- toy MLP + two moons: 2-D points scaled into [-1, 1].
"""
from typing import Optional, Sequence

import numpy as np

from dqss.storage.calibration_store import CalibrationSet
from dqss.tensor.graph import Graph, LayerNode
from dqss.tensor.tensor import Tensor

IMAGE_SHAPE = (1, 8, 8)
IMAGE_CLASSES = 4
OUTLIER_RATE = 0.01
OUTLIER_SCALE = 4.0
OUTLIER_CLIP = 30.0


def _he(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def conv_node(name: str, rng: np.random.Generator, out_c: int, in_c: int, kernel: int = 3,
              padding: int = 1) -> LayerNode:
    fan_in = in_c * kernel * kernel
    return LayerNode(
        kind="conv2d", name=name, hyper={"stride": 1, "padding": padding},
        params={
            "weight": Tensor(_he(rng, (out_c, in_c, kernel, kernel), fan_in), name=f"{name}.weight"),
            "bias": Tensor(np.zeros(out_c, dtype=np.float32), name=f"{name}.bias"),
        },
    )


def linear_node(name: str, rng: np.random.Generator, out_f: int, in_f: int) -> LayerNode:
    return LayerNode(
        kind="linear", name=name,
        params={
            "weight": Tensor(_he(rng, (out_f, in_f), in_f), name=f"{name}.weight"),
            "bias": Tensor(np.zeros(out_f, dtype=np.float32), name=f"{name}.bias"),
        },
    )


def toy_cnn(seed: int = 42, channels: int = 8, num_classes: int = IMAGE_CLASSES) -> Graph:
    rng = np.random.default_rng(seed)
    pooled = channels * (IMAGE_SHAPE[1] // 2) * (IMAGE_SHAPE[2] // 2)
    ones = np.ones(channels, dtype=np.float32)
    zeros = np.zeros(channels, dtype=np.float32)
    nodes = [
        conv_node("conv1", rng, channels, IMAGE_SHAPE[0]),
        LayerNode(kind="relu", name="relu1"),
        conv_node("conv2", rng, channels, channels),
        LayerNode(kind="batchnorm", name="bn2", hyper={"eps": 1e-5}, params={
            "gamma": Tensor(ones, name="bn2.gamma"), "beta": Tensor(zeros, name="bn2.beta"),
            "running_mean": Tensor(zeros, name="bn2.running_mean"),
            "running_var": Tensor(ones, name="bn2.running_var"),
        }),
        LayerNode(kind="relu", name="relu2"),
        LayerNode(kind="avgpool", name="pool", hyper={"kernel": 2}),
        LayerNode(kind="flatten", name="flatten"),
        linear_node("fc", rng, num_classes, pooled),
        LayerNode(kind="softmax_cross_entropy", name="head"),
    ]
    return Graph(nodes, IMAGE_SHAPE, num_classes)


def toy_mlp(seed: int = 42, hidden: int = 16, num_classes: int = 2) -> Graph:
    rng = np.random.default_rng(seed)
    nodes = [
        linear_node("fc1", rng, hidden, 2),
        LayerNode(kind="relu", name="relu1"),
        linear_node("fc2", rng, hidden, hidden),
        LayerNode(kind="relu", name="relu2"),
        linear_node("fc3", rng, num_classes, hidden),
        LayerNode(kind="softmax_cross_entropy", name="head"),
    ]
    return Graph(nodes, (2,), num_classes)


def class_templates(seed: int = 0, num_classes: int = IMAGE_CLASSES) -> np.ndarray:
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((num_classes,) + IMAGE_SHAPE)
    # 3x3 box blur gives the templates spatial structure
    padded = np.pad(raw, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    blurred = sum(padded[:, :, i:i + IMAGE_SHAPE[1], j:j + IMAGE_SHAPE[2]] for i in range(3) for j in range(3)) / 9.0
    return (blurred / np.abs(blurred).max(axis=(1, 2, 3), keepdims=True)).astype(np.float32)


def outlier_images(n: int, seed: int, templates: Optional[np.ndarray] = None, noise: float = 0.5,
                   outlier_rate: float = OUTLIER_RATE) -> CalibrationSet:
    templates = class_templates() if templates is None else templates
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, templates.shape[0], size=n)
    x = templates[labels] + noise * rng.standard_normal((n,) + IMAGE_SHAPE)
    spikes = rng.random(x.shape) < outlier_rate
    heavy = np.clip(OUTLIER_SCALE * rng.standard_t(2.0, size=x.shape), -OUTLIER_CLIP, OUTLIER_CLIP)
    x = np.where(spikes, heavy, x)
    return CalibrationSet(inputs=x.astype(np.float32), labels=labels.astype(np.int64), input_shape=IMAGE_SHAPE)


def two_moons(n: int, seed: int, noise: float = 0.1) -> CalibrationSet:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, np.pi, size=n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    points = np.where(labels[:, None] == 0, upper, lower) + noise * rng.standard_normal((n, 2))
    # fixed affine map of the noiseless moons' bounding box onto [-1, 1]
    points = (points - np.array([0.5, 0.25])) / np.array([1.6, 1.0])
    return CalibrationSet(inputs=points.astype(np.float32), labels=labels.astype(np.int64), input_shape=(2,))
