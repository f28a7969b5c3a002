"""
Serialized computation-graph denoisers ("DNSR" files).

File layout (little-endian):

    magic       4 bytes  b"DNSR"
    version     u32      (1)
    dim         u32      state dimension n
    out_scale   f32      inputs are divided by it, outputs multiplied back
    n_levels    u32
    levels      f32[n_levels]   sigma levels of the embedding tables
    n_nodes     u32
    nodes       n_nodes records:
        kind      u8   0 affine, 1 conv2d, 2 relu, 3 add, 4 embed_add, 5 embed_mul
        n_inputs  u32
        inputs    u32[n_inputs]   node ids; id 0 is the (scaled) input state
        payload   kind specific:
            affine     u32 out, u32 in, f32 W[out*in] (row-major), f32 bias[out]
            conv2d     u32 c_out, c_in, height, width, kh, kw,
                       f32 kernel[c_out*c_in*kh*kw], f32 bias[c_out]
                       ('same' zero padding, stride 1, odd kernel sizes)
            relu, add  none
            embed_*    u32 d, f32 table[n_levels*d]

Node i + 1 is the i-th record; the output is the last node (the input if there are none).
Sigma conditioning picks the table row of the nearest level.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
from scipy import signal

from .diffusion import Denoiser

logger = logging.getLogger(__name__)

MAGIC = b"DNSR"
VERSION = 1
NODE_KINDS = {0: "affine", 1: "conv2d", 2: "relu", 3: "add", 4: "embed_add", 5: "embed_mul"}
KIND_CODES = {v: k for k, v in NODE_KINDS.items()}


class DenoiserFormatError(ValueError):
    """Raised for malformed or inconsistent denoiser files."""
    pass


class UnsupportedNodeError(DenoiserFormatError):
    """Raised for node kinds outside the supported set."""
    pass


@dataclass
class GraphNode:
    kind: str
    inputs: List[int]
    params: Dict[str, np.ndarray] = field(default_factory=dict)


def _node_output_dim(node: GraphNode, dims: List[int], n_levels: int) -> int:
    in_dims = [dims[i] for i in node.inputs]
    p = node.params
    if node.kind in ("affine", "conv2d", "relu", "embed_add", "embed_mul") and len(in_dims) != 1:
        raise DenoiserFormatError(f"{node.kind} node takes exactly one input")
    if node.kind == "affine":
        W = p["weight"]
        if W.shape[1] != in_dims[0] or p["bias"].shape != (W.shape[0],):
            raise DenoiserFormatError(f"affine shape mismatch: weight {W.shape}, input dim {in_dims[0]}")
        return W.shape[0]
    if node.kind == "conv2d":
        K = p["kernel"]
        c_out, c_in, kh, kw = K.shape
        h, w = p["image_shape"]
        if c_in * h * w != in_dims[0] or p["bias"].shape != (c_out,):
            raise DenoiserFormatError("conv2d shape mismatch with its input")
        if kh % 2 == 0 or kw % 2 == 0:
            raise DenoiserFormatError("conv2d kernels must have odd sizes")
        return c_out * h * w
    if node.kind == "relu":
        return in_dims[0]
    if node.kind == "add":
        if len(in_dims) < 2 or len(set(in_dims)) != 1:
            raise DenoiserFormatError("add node needs two or more inputs of equal size")
        return in_dims[0]
    if node.kind in ("embed_add", "embed_mul"):
        table = p["table"]
        if table.shape != (n_levels, in_dims[0]):
            raise DenoiserFormatError(f"{node.kind} table shape {table.shape} does not match "
                                      f"({n_levels}, {in_dims[0]})")
        return in_dims[0]
    raise UnsupportedNodeError(f"Unsupported node kind: {node.kind}")


class GraphDenoiser(Denoiser):
    """
    Denoiser evaluated from an explicit computation graph.

    The Jacobian is not available; vjp falls back to the identity surrogate.
    """

    def __init__(self, dim: int, levels: Sequence[float], nodes: Sequence[GraphNode], output_scale: float = 1.0):
        self._dim = int(dim)
        self.levels = np.asarray(levels, dtype=float)
        self.nodes = list(nodes)
        self.output_scale = float(output_scale)
        if self._dim < 1:
            raise DenoiserFormatError("Denoiser dimension must be positive")
        if not self.output_scale > 0:
            raise DenoiserFormatError("Output scale must be positive")
        dims = [self._dim]
        for i, node in enumerate(self.nodes):
            if any(j < 0 or j > i for j in node.inputs):
                raise DenoiserFormatError(f"node {i + 1} references a later or missing node")
            if node.kind.startswith("embed") and self.levels.size == 0:
                raise DenoiserFormatError("Embedding nodes need at least one sigma level")
            dims.append(_node_output_dim(node, dims, self.levels.size))
        if dims[-1] != self._dim:
            raise DenoiserFormatError(f"Graph output size {dims[-1]} differs from state size {self._dim}")

    @property
    def dim(self) -> int:
        return self._dim

    def level_index(self, sigma: float) -> int:
        return int(np.argmin(np.abs(self.levels - sigma)))

    def __call__(self, sigma, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        values = [np.atleast_2d(x) / self.output_scale]
        level = self.level_index(sigma) if self.levels.size else 0
        for node in self.nodes:
            values.append(self._evaluate(node, [values[i] for i in node.inputs], level))
        out = values[-1] * self.output_scale
        return out[0] if single else out

    @staticmethod
    def _evaluate(node: GraphNode, inputs: List[np.ndarray], level: int) -> np.ndarray:
        p = node.params
        if node.kind == "affine":
            return inputs[0] @ p["weight"].T + p["bias"]
        if node.kind == "relu":
            return np.maximum(inputs[0], 0.0)
        if node.kind == "add":
            return np.sum(inputs, axis=0)
        if node.kind == "embed_add":
            return inputs[0] + p["table"][level]
        if node.kind == "embed_mul":
            return inputs[0] * p["table"][level]
        if node.kind == "conv2d":
            K = p["kernel"]
            c_out, c_in = K.shape[:2]
            h, w = p["image_shape"]
            img = inputs[0].reshape(-1, c_in, h, w)
            out = np.empty((img.shape[0], c_out, h, w))
            for b in range(img.shape[0]):
                for o in range(c_out):
                    acc = np.full((h, w), p["bias"][o])
                    for c in range(c_in):
                        acc += signal.correlate(img[b, c], K[o, c], mode="same")
                    out[b, o] = acc
            return out.reshape(img.shape[0], -1)
        raise UnsupportedNodeError(f"Unsupported node kind: {node.kind}")

    @classmethod
    def identity(cls, dim: int) -> "GraphDenoiser":
        return cls(dim, [], [])

    @classmethod
    def from_gaussian_diagonal(cls, mean, variances, sigmas) -> "GraphDenoiser":
        """
        Export the exact denoiser of N(mean, diag(variances)) at the given levels.

        D = f x + (1 - f) mean with f = v / (v + sigma^2), one table row per level.
        """
        mean = np.asarray(mean, dtype=float)
        variances = np.asarray(variances, dtype=float)
        sigmas = np.asarray(sigmas, dtype=float)
        shrink = variances / (variances + sigmas[:, None] ** 2)
        nodes = [GraphNode("embed_mul", [0], {"table": shrink}),
                 GraphNode("embed_add", [1], {"table": (1.0 - shrink) * mean})]
        return cls(mean.size, sigmas, nodes)


def save_graph_denoiser(path: Union[str, Path], graph: GraphDenoiser):
    """Write a GraphDenoiser in the DNSR format."""
    f32 = "<f4"
    chunks = [MAGIC, struct.pack("<IIfI", VERSION, graph.dim, graph.output_scale, graph.levels.size),
              graph.levels.astype(f32).tobytes(), struct.pack("<I", len(graph.nodes))]
    for node in graph.nodes:
        if node.kind not in KIND_CODES:
            raise UnsupportedNodeError(f"Unsupported node kind: {node.kind}")
        chunks.append(struct.pack("<BI", KIND_CODES[node.kind], len(node.inputs)))
        chunks.append(np.asarray(node.inputs, dtype="<u4").tobytes())
        p = node.params
        if node.kind == "affine":
            chunks.append(struct.pack("<II", *p["weight"].shape))
            chunks += [p["weight"].astype(f32).tobytes(), p["bias"].astype(f32).tobytes()]
        elif node.kind == "conv2d":
            c_out, c_in, kh, kw = p["kernel"].shape
            h, w = p["image_shape"]
            chunks.append(struct.pack("<6I", c_out, c_in, h, w, kh, kw))
            chunks += [p["kernel"].astype(f32).tobytes(), p["bias"].astype(f32).tobytes()]
        elif node.kind in ("embed_add", "embed_mul"):
            chunks.append(struct.pack("<I", p["table"].shape[1]))
            chunks.append(p["table"].astype(f32).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DenoiserFormatError("Unexpected end of denoiser file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).astype(float if "f" in dtype else int)


def load_external_denoiser(path: Union[str, Path]) -> GraphDenoiser:
    """
    Load a DNSR file.

    Raises:
        DenoiserFormatError: bad magic, truncated data or shape mismatch
        UnsupportedNodeError: unknown node kind
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DenoiserFormatError(f"Cannot read denoiser file {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise DenoiserFormatError("Not a DNSR file (bad magic)")
    version, dim, scale, n_levels = r.unpack("<IIfI")
    if version != VERSION:
        raise DenoiserFormatError(f"Unsupported DNSR version {version}")
    levels = r.array("<f4", n_levels)
    (n_nodes,) = r.unpack("<I")
    nodes = []
    for _ in range(n_nodes):
        code, n_inputs = r.unpack("<BI")
        if code not in NODE_KINDS:
            raise UnsupportedNodeError(f"Unsupported node kind code: {code}")
        kind = NODE_KINDS[code]
        inputs = [int(i) for i in r.array("<u4", n_inputs)]
        params = {}
        if kind == "affine":
            out_dim, in_dim = r.unpack("<II")
            params["weight"] = r.array("<f4", out_dim * in_dim).reshape(out_dim, in_dim)
            params["bias"] = r.array("<f4", out_dim)
        elif kind == "conv2d":
            c_out, c_in, h, w, kh, kw = r.unpack("<6I")
            params["kernel"] = r.array("<f4", c_out * c_in * kh * kw).reshape(c_out, c_in, kh, kw)
            params["bias"] = r.array("<f4", c_out)
            params["image_shape"] = (h, w)
        elif kind in ("embed_add", "embed_mul"):
            (d,) = r.unpack("<I")
            params["table"] = r.array("<f4", n_levels * d).reshape(n_levels, d)
        nodes.append(GraphNode(kind, inputs, params))
    if r.pos != len(data):
        raise DenoiserFormatError("Trailing bytes after the last node")
    graph = GraphDenoiser(dim, levels, nodes, output_scale=scale)
    logger.info("Loaded denoiser %s: dim=%d, %d nodes, %d levels", path, dim, n_nodes, n_levels)
    return graph
