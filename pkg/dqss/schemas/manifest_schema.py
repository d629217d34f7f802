from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

MANIFEST_VERSION = 1


class BlobRef(BaseModel):
    file: str = Field(..., min_length=1)
    shape: List[int]

    @model_validator(mode="after")
    def check_shape(self) -> "BlobRef":
        if any(d < 0 for d in self.shape):
            raise ValueError("tensor dimensions must be non-negative")
        return self


class LayerDescriptor(BaseModel):
    kind: str
    name: str = Field(..., min_length=1)
    hyper: Dict[str, Any] = Field(default_factory=dict)
    tensors: Dict[str, BlobRef] = Field(default_factory=dict)
    inputs: Optional[str] = None


class ModelManifest(BaseModel):
    format_version: int
    input_shape: List[int] = Field(..., min_length=1)
    num_classes: int = Field(..., gt=0)
    layers: List[LayerDescriptor]

    @model_validator(mode="after")
    def check_unique_names(self) -> "ModelManifest":
        names = [layer.name for layer in self.layers]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"layer names must be unique, repeated: {duplicates}")
        return self
