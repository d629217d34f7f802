import logging
from pathlib import Path
from typing import Dict

from pydantic import ValidationError

from dqss.core.errors import ManifestValidationError, ManifestVersionError, UnknownLayerKindError
from dqss.schemas.manifest_schema import MANIFEST_VERSION, BlobRef, LayerDescriptor, ModelManifest
from dqss.storage.codec import PathLike, read_blob, read_json, write_blob, write_json
from dqss.tensor.graph import LAYER_KINDS, Graph, LayerNode
from dqss.tensor.tensor import Tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def _field_errors(exc: ValidationError) -> str:
    return "; ".join(".".join(str(p) for p in err["loc"]) + f": {err['msg']}" for err in exc.errors())


def read_manifest(manifest_path: PathLike) -> ModelManifest:
    raw = read_json(manifest_path)
    if not isinstance(raw, dict):
        raise ManifestValidationError("manifest must be a JSON object")
    version = raw.get("format_version")
    if version != MANIFEST_VERSION:
        raise ManifestVersionError(
            f"manifest format_version {version!r} is not supported (expected {MANIFEST_VERSION})"
        )
    try:
        manifest = ModelManifest.model_validate(raw)
    except ValidationError as exc:
        raise ManifestValidationError(f"invalid manifest: {_field_errors(exc)}")
    for layer in manifest.layers:
        if layer.kind not in LAYER_KINDS:
            raise UnknownLayerKindError(f"layer {layer.name!r} has unknown kind {layer.kind!r}")
    return manifest


def load_model(manifest_path: PathLike) -> Graph:
    """
    Load a model manifest and its float32 blobs into a Graph.

    Every blob is checked (existence, byte length) before any tensor is built.

    Args:
        manifest_path (PathLike): path of manifest.json; blobs are resolved next to it.

    Raises:
        ManifestVersionError: unsupported format_version.
        ManifestValidationError: schema violation, naming the offending field.
        UnknownLayerKindError: layer kind outside the supported set.
        MissingBlobError: a referenced blob file is absent.
        BlobLengthError: a blob's size differs from 4 * product(shape).

    Returns:
        Graph: the model with all parameter tensors populated.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    arrays = {}
    for layer in manifest.layers:
        for key, ref in layer.tensors.items():
            arrays[(layer.name, key)] = read_blob(root / ref.file, ref.shape)

    nodes = []
    for layer in manifest.layers:
        params = {key: Tensor(arrays[(layer.name, key)], name=f"{layer.name}.{key}") for key in layer.tensors}
        nodes.append(LayerNode(kind=layer.kind, name=layer.name, hyper=dict(layer.hyper),
                               params=params, inputs=layer.inputs))
    graph = Graph(nodes, manifest.input_shape, manifest.num_classes)
    logger.info(f"loaded {manifest_path} ({len(nodes)} layers, {len(graph.searchable_layers())} searchable)")
    return graph


def save_model(graph: Graph, directory: PathLike) -> Path:
    """Write manifest.json plus one <layer>.<param>.bin blob per parameter tensor."""
    directory = Path(directory)
    layers = []
    for node in graph.nodes:
        tensors: Dict[str, BlobRef] = {}
        for key, tensor in node.params.items():
            filename = f"{node.name}.{key}.bin"
            write_blob(directory / filename, tensor.data)
            tensors[key] = BlobRef(file=filename, shape=list(tensor.shape))
        layers.append(LayerDescriptor(kind=node.kind, name=node.name, hyper=dict(node.hyper),
                                      tensors=tensors, inputs=node.inputs))
    manifest = ModelManifest(format_version=MANIFEST_VERSION, input_shape=list(graph.input_shape),
                             num_classes=graph.num_classes, layers=layers)
    return write_json(directory / MANIFEST_NAME, manifest.model_dump(exclude_none=True))
