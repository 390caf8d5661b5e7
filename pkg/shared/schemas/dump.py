"""Attention dump and parameter file manifests."""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

DUMP_VERSION = 1
PARAMS_VERSION = 1


class LayerFiles(BaseModel):
    model_config = ConfigDict(extra="forbid")

    maps: str
    head_values: str


class DumpManifest(BaseModel):
    """Directory of per-layer f32 tensors.

    Layer files hold arrays of shape (samples, heads, seq_len, seq_len) for the
    maps and (samples, heads, seq_len, d_model) for the head values, C order.
    """
    model_config = ConfigDict(extra="forbid")

    version: int = DUMP_VERSION
    layers: int = Field(ge=1)
    heads: int = Field(ge=1)
    seq_len: int = Field(ge=1)
    d_model: int = Field(ge=1)
    samples: int = Field(default=1, ge=1)
    dtype: Literal["f32"] = "f32"
    byte_order: Literal["little"] = "little"
    causal: bool = False
    files: list[LayerFiles]

    @model_validator(mode="after")
    def check_files(self):
        if len(self.files) != self.layers:
            raise ValueError(f"manifest lists {len(self.files)} layer entries for {self.layers} layers")
        return self

    def maps_bytes(self) -> int:
        return self.samples * self.heads * self.seq_len * self.seq_len * 4

    def values_bytes(self) -> int:
        return self.samples * self.heads * self.seq_len * self.d_model * 4


class TensorEntry(BaseModel):
    name: str
    shape: list[int]
    offset: int


class ParamsManifest(BaseModel):
    """Layout of params.bin: concatenated little-endian f32 blobs."""
    model_config = ConfigDict(extra="forbid")

    version: int = PARAMS_VERSION
    dtype: Literal["f32"] = "f32"
    byte_order: Literal["little"] = "little"
    config: dict
    tensors: list[TensorEntry]
