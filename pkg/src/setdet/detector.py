"""End-to-end detector: conv backbone -> 1x1 projection -> encoder-decoder
-> shared prediction heads, plus postprocessing and checkpoint io.

Class logits stay raw in the output; softmax happens in the loss and in
postprocessing, which is numerically equivalent and keeps the loss path
stable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import ConfigError, Linear, kaiming_uniform, xavier_uniform
from .posenc import QUERY_MODES, SPATIAL_MODES, SpatialEncoding, init_object_queries
from .tensor import Parameter, Tensor
from .transformer import Decoder, Encoder, zero_queries

CHECKPOINT_MAGIC = b"SDTR"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters of the toy detector."""

    d: int = 64                       # transformer width
    num_heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 10             # slots N; must cover max objects per image
    num_classes: int = 3              # thing classes K; no-object is index K
    ffn_width: int = 256
    dropout: float = 0.1
    backbone_channels: tuple = (16, 32, 64)
    image_side: int = 64
    spatial_encoding: str = "sine-attn"
    query_encoding: str = "attn"
    temperature: float = 10000.0
    skip_first_self_attention: bool = False

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.d % self.num_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by {self.num_heads} heads")
        if self.d % 4 != 0:
            raise ConfigError(f"d={self.d} must be divisible by 4 for sine encodings")
        if self.spatial_encoding not in SPATIAL_MODES:
            raise ConfigError(f"unknown spatial encoding {self.spatial_encoding!r}")
        if self.query_encoding not in QUERY_MODES:
            raise ConfigError(f"unknown query encoding {self.query_encoding!r}")
        if self.image_side % self.stride != 0:
            raise ConfigError(
                f"image side {self.image_side} not divisible by stride {self.stride}")
        if self.num_queries < 1:
            raise ConfigError("need at least one query slot")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def feature_side(self) -> int:
        return self.image_side // self.stride

    def to_dict(self) -> dict:
        return {
            "d": self.d, "num_heads": self.num_heads,
            "enc_layers": self.enc_layers, "dec_layers": self.dec_layers,
            "num_queries": self.num_queries, "num_classes": self.num_classes,
            "ffn_width": self.ffn_width, "dropout": self.dropout,
            "backbone_channels": list(self.backbone_channels),
            "image_side": self.image_side,
            "spatial_encoding": self.spatial_encoding,
            "query_encoding": self.query_encoding,
            "temperature": self.temperature,
            "skip_first_self_attention": self.skip_first_self_attention,
        }

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        return ModelConfig(**data)


@dataclass
class LayerPrediction:
    """One decoder layer's slot predictions.

    ``class_logits`` is [N, K+1] (or [B, N, K+1]); ``boxes`` is [N, 4]
    (or [B, N, 4]) in normalized (cx, cy, w, h), sigmoid-bounded.
    """

    class_logits: Tensor
    boxes: Tensor


@dataclass
class DetectionOutput:
    """Per-layer predictions, final layer last."""

    layers: list

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def layer(self, index: int) -> LayerPrediction:
        return self.layers[index]


@dataclass
class Detection:
    """One emitted detection; no-object is never emitted."""

    class_id: int
    confidence: float
    box: np.ndarray


class Backbone:
    """Small trainable conv stack; each 3x3 conv halves the resolution."""

    def __init__(self, channels, rng, name="backbone"):
        self.convs = []
        c_in = 3
        for i, c_out in enumerate(channels):
            w = Parameter(f"{name}.conv{i}.weight",
                          Tensor(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)))
            b = Parameter(f"{name}.conv{i}.bias", Tensor(np.zeros(c_out)))
            self.convs.append((w, b))
            c_in = c_out
        self.out_channels = c_in

    def __call__(self, images: Tensor) -> Tensor:
        x = images
        for w, b in self.convs:
            x = T.relu(T.conv2d(x, w.tensor, b.tensor, stride=2, padding=1))
        return x

    def parameters(self):
        return [p for pair in self.convs for p in pair]

    def parameter_count(self) -> int:
        return sum(p.tensor.size for p in self.parameters())


class Detector:
    """The full model.  Forward accepts [3,H,W] or [B,3,H,W] arrays."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        cfg = config
        self.config = cfg
        self.backbone = Backbone(cfg.backbone_channels, rng)
        d = cfg.d
        c = self.backbone.out_channels
        self.input_proj_w = Parameter(
            "input_proj.weight",
            Tensor(xavier_uniform(rng, (d, c), c, d).reshape(d, c, 1, 1)))
        self.input_proj_b = Parameter("input_proj.bias", Tensor(np.zeros(d)))
        side = cfg.feature_side
        self.spatial_enc = SpatialEncoding(cfg.spatial_encoding, side, side, d,
                                           cfg.temperature, rng)
        self.object_queries = init_object_queries(cfg.num_queries, d, rng)
        self.encoder = Encoder(cfg.enc_layers, d, cfg.num_heads, cfg.ffn_width, rng)
        self.decoder = Decoder(cfg.dec_layers, d, cfg.num_heads, cfg.ffn_width, rng,
                               skip_first_self_attention=cfg.skip_first_self_attention)
        self.class_head = Linear(d, cfg.num_classes + 1, rng, "class_head")
        self.box_head = [Linear(d, d, rng, "box_head.0"),
                         Linear(d, d, rng, "box_head.1"),
                         Linear(d, 4, rng, "box_head.2")]
        self._params = self._collect_parameters()

    def _collect_parameters(self):
        params = []
        params += self.backbone.parameters()
        params += [self.input_proj_w, self.input_proj_b]
        params += self.spatial_enc.parameters()
        params += [self.object_queries]
        params += self.encoder.parameters()
        params += self.decoder.parameters()
        params += self.class_head.parameters()
        for lin in self.box_head:
            params += lin.parameters()
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate parameter names: {dupes}")
        return params

    def parameters(self) -> list[Parameter]:
        return self._params

    def parameter_count(self) -> int:
        return sum(p.tensor.size for p in self._params)

    def zero_grad(self):
        for p in self._params:
            p.tensor.zero_grad()

    def param_groups(self) -> dict:
        """Backbone vs everything else, for the two learning rates."""
        backbone = [p for p in self._params if p.name.startswith("backbone.")]
        rest = [p for p in self._params if not p.name.startswith("backbone.")]
        return {"backbone": backbone, "transformer": rest}

    # -- forward ---------------------------------------------------------

    def backbone_forward(self, image) -> Tensor:
        """Feature map [C, H/s, W/s] (or batched) from an image in [0,1]."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        side = x.shape[-1]
        if side % self.config.stride != 0:
            raise ConfigError(
                f"image side {side} not divisible by stride {self.config.stride}")
        return self.backbone(x)

    def forward(self, images, train: bool = False, rng=None) -> DetectionOutput:
        """Full pipeline to per-layer slot predictions.

        In train mode dropout is active and ``rng`` must be supplied.
        """
        output, _, _ = self._forward_core(images, train, rng)
        return output

    def forward_with_internals(self, images, train: bool = False, rng=None):
        """Forward pass that also exposes (encoder memory, final decoder
        embeddings) for the mask head."""
        return self._forward_core(images, train, rng)

    def _forward_core(self, images, train: bool, rng):
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        squeeze = x.ndim == 3
        feats = self.backbone_forward(x)
        feats = T.conv2d(feats, self.input_proj_w.tensor, self.input_proj_b.tensor)
        if squeeze:
            d, fh, fw = feats.shape
            src = T.reshape(feats, (d, fh * fw))
            batch = None
        else:
            b, d, fh, fw = feats.shape
            src = T.reshape(feats, (b, d, fh * fw))
            batch = b

        enc = self.spatial_enc
        if enc.shape[1] != fh or enc.shape[2] != fw:
            if enc.mode in ("sine-attn", "sine-input"):
                enc = SpatialEncoding(enc.mode, fh, fw, d, cfg.temperature)
            else:
                raise ConfigError(
                    f"feature grid {fh}x{fw} does not match the "
                    f"{enc.shape[1]}x{enc.shape[2]} spatial encoding table")
        pos_input = enc.at_input()
        if pos_input is not None:
            src = src + pos_input
        pos_attn = enc.at_attention()

        memory = self.encoder(src, pos_attn, dropout=cfg.dropout, rng=rng, train=train)

        if cfg.query_encoding == "attn":
            queries_init = zero_queries(batch, d, cfg.num_queries)
            query_pos = self.object_queries.tensor
        else:
            # queries enter once as the decoder input instead of at each layer
            qp = self.object_queries.tensor
            queries_init = qp if batch is None \
                else zero_queries(batch, d, cfg.num_queries) + qp
            query_pos = None
        layer_states = self.decoder(queries_init, memory, pos_attn, query_pos,
                                    dropout=cfg.dropout, rng=rng, train=train)

        layers = []
        for state in layer_states:
            logits = T.transpose(self.class_head(state))         # [.., N, K+1]
            h = state
            h = T.relu(self.box_head[0](h))
            h = T.relu(self.box_head[1](h))
            boxes = T.transpose(T.sigmoid(self.box_head[2](h)))  # [.., N, 4]
            layers.append(LayerPrediction(logits, boxes))
        return DetectionOutput(layers), memory, layer_states[-1]

    def predict(self, image, use_layer: int = -1,
                override_empty: bool = True) -> list[Detection]:
        """Inference on one image: forward in eval mode + postprocess."""
        with T.no_grad():
            out = self.forward(image)
        return postprocess(out, use_layer=use_layer, override_empty=override_empty)


def postprocess(output: DetectionOutput, use_layer: int = -1,
                override_empty: bool = True):
    """Turn one layer's slot predictions into detections.

    Slots whose argmax is the no-object class are dropped, unless
    ``override_empty`` is set, in which case they emit their best real
    class at that class's (lower) probability.  Returns a list of
    Detection for a single image, or a list of lists for a batch.
    """
    layer = output.layers[use_layer]
    logits = layer.class_logits.data
    boxes = layer.boxes.data
    if logits.ndim == 3:
        return [_postprocess_single(logits[b], boxes[b], override_empty)
                for b in range(logits.shape[0])]
    return _postprocess_single(logits, boxes, override_empty)


def _postprocess_single(logits, boxes, override_empty):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    no_object = probs.shape[-1] - 1
    detections = []
    for slot in range(probs.shape[0]):
        best = int(np.argmax(probs[slot]))
        if best == no_object:
            if not override_empty:
                continue
            best = int(np.argmax(probs[slot, :no_object]))
        detections.append(Detection(best, float(probs[slot, best]), boxes[slot].copy()))
    return detections


# -- checkpoint io ------------------------------------------------------------

class CheckpointError(ValueError):
    """Malformed checkpoint or mismatch against the configured model."""


def save_checkpoint(model: Detector, path: str):
    """Bit-exact binary dump of all parameters (little-endian f64)."""
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            _write_array(fh, p.name, p.tensor.data)


def load_checkpoint(model: Detector, path: str):
    """Load a checkpoint into a model built from the same config.

    Rejects wrong magic/version and any name or shape mismatch.
    """
    with open(path, "rb") as fh:
        entries = _read_entries(fh)
    params = {p.name: p for p in model.parameters()}
    if set(entries) != set(params):
        missing = sorted(set(params) - set(entries))
        extra = sorted(set(entries) - set(params))
        raise CheckpointError(
            f"parameter names disagree with model (missing {missing}, extra {extra})")
    for name, array in entries.items():
        p = params[name]
        if array.shape != p.tensor.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {array.shape} "
                f"vs model {p.tensor.data.shape}")
        p.tensor.data = array


def _write_array(fh, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(array.astype("<f8").tobytes())


def _read_entries(fh) -> dict:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    version, count = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
        entries[name] = data.astype(np.float64).copy()
    return entries


def read_checkpoint_arrays(path: str) -> dict:
    """Raw name -> array view of a checkpoint (no model needed)."""
    with open(path, "rb") as fh:
        return _read_entries(fh)
