"""Neural parameterization of the factored grammar, and its checkpoint file.

Every factor matrix is a softmax over scores ``R_j . f(E_i)`` where ``E`` are
symbol embeddings, ``R`` rank embeddings and ``f`` a small MLP.  MLPs are
shared in pairs: U1/U2, U3/U4, V1/V3, V2/V4, W1/W3 and W2/W4.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .factored import FACTOR_NAMES, FactoredGrammar
from .grammar import GrammarDims, NumericError, ShapeError

SHARED_MLPS = ("fU12", "fU34", "fV13", "fV24", "fW13", "fW24")
RESIDUAL_MLPS = ("fP", "fs", "fQ")


def param_shapes(dims, ranks, d):
    r1, r2, r3, r4 = ranks
    shapes = {"E1": (dims.m, d), "E2": (dims.m2, d), "root": (d,),
              "R1e": (r1, d), "R2e": (r2, d), "R3e": (r3, d), "R4e": (r4, d)}
    for name in SHARED_MLPS:
        shapes.update({f"{name}.W1": (d, d), f"{name}.b1": (d,),
                       f"{name}.W2": (d, d), f"{name}.b2": (d,)})
    for name, width in zip(RESIDUAL_MLPS, (4, dims.m1, dims.v)):
        shapes.update({f"{name}.W1": (d, d), f"{name}.b1": (d,),
                       f"{name}.W2": (d, d), f"{name}.b2": (d,),
                       f"{name}.Wo": (d, width), f"{name}.bo": (width,)})
    return shapes


@dataclass
class NeuralParams:
    dims: GrammarDims
    ranks: tuple
    d: int
    arrays: dict

    def __post_init__(self):
        want = param_shapes(self.dims, self.ranks, self.d)
        if set(want) != set(self.arrays):
            missing = sorted(set(want) ^ set(self.arrays))
            raise ShapeError(f"parameter names differ from the layout: {missing}")
        for name, shape in want.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.arrays[name].shape}, "
                                 f"expected {shape}")

    @property
    def dtype(self):
        return self.arrays["E1"].dtype

    def names(self):
        return list(param_shapes(self.dims, self.ranks, self.d))

    def astype(self, dtype):
        return NeuralParams(self.dims, tuple(self.ranks), self.d,
                            {k: np.asarray(v, dtype=dtype) for k, v in self.arrays.items()})

    def copy(self):
        return self.astype(self.dtype)

    def replace(self, arrays):
        return NeuralParams(self.dims, tuple(self.ranks), self.d, dict(arrays))

    def size(self):
        return sum(a.size for a in self.arrays.values())


def xavier_init(dims, ranks, d, seed, dtype=np.float32):
    """Xavier-uniform weights and embeddings, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(dims, ranks, d).items():
        if len(shape) == 1:
            if name == "root":
                bound = np.sqrt(6.0 / (1 + shape[0]))
                arrays[name] = rng.uniform(-bound, bound, shape)
            else:
                arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1])) if sum(shape) else 0.0
            arrays[name] = rng.uniform(-bound, bound, shape)
    return NeuralParams(dims, tuple(ranks), d,
                        {k: v.astype(dtype) for k, v in arrays.items()})


def zero_params(dims, ranks, d, dtype=np.float64):
    return NeuralParams(dims, tuple(ranks), d,
                        {k: np.zeros(s, dtype=dtype)
                         for k, s in param_shapes(dims, ranks, d).items()})


def _mlp(p, name, x):
    h = ad.relu(ad.affine(x, p[f"{name}.W1"], p[f"{name}.b1"]))
    return ad.affine(h, p[f"{name}.W2"], p[f"{name}.b2"])


def _residual(p, name, x):
    h = ad.add(_mlp(p, name, x), x)
    return ad.affine(h, p[f"{name}.Wo"], p[f"{name}.bo"])


def _scores(feats, ranks_emb):
    return ad.matmul(feats, ad.transpose(ranks_emb))


def _checked_softmax(x, axis, name):
    v = ad.value(x)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite scores for {name}")
    if v.shape[axis] == 0:
        return x
    return ad.softmax(x, axis=axis)


def build_factors(p, dims, ranks):
    """Factors from a name -> array/Var mapping (differentiable)."""
    r1, r2, r3, r4 = ranks
    m1 = dims.m1
    E1, E2 = p["E1"], p["E2"]
    top = ad.getitem(E1, slice(0, m1))

    u12 = _checked_softmax(
        _scores(_mlp(p, "fU12", top), ad.concat([p["R1e"], p["R2e"]], axis=0)), 1, "U1/U2")
    u34 = _checked_softmax(
        _scores(_mlp(p, "fU34", E2), ad.concat([p["R3e"], p["R4e"]], axis=0)), 1, "U3/U4")
    fv13, fv24 = _mlp(p, "fV13", E1), _mlp(p, "fV24", E1)
    fw13, fw24 = _mlp(p, "fW13", E1), _mlp(p, "fW24", E2)

    def col(feats, R, name):
        return _checked_softmax(_scores(feats, R), 0, name)

    P = ad.transpose(_checked_softmax(_residual(p, "fP", p["R4e"]), 1, "P"))
    s = _checked_softmax(_residual(p, "fs", p["root"]), 0, "s")
    Q = _checked_softmax(_residual(p, "fQ", ad.getitem(E1, slice(m1, None))), 1, "Q")
    return FactoredGrammar(
        dims, tuple(ranks),
        U1=ad.getitem(u12, (slice(None), slice(0, r1))),
        V1=col(fv13, p["R1e"], "V1"), W1=col(fw13, p["R1e"], "W1"),
        U2=ad.getitem(u12, (slice(None), slice(r1, r1 + r2))),
        V2=col(fv24, p["R2e"], "V2"), W2=col(fw24, p["R2e"], "W2"),
        U3=ad.getitem(u34, (slice(None), slice(0, r3))),
        V3=col(fv13, p["R3e"], "V3"), W3=col(fw13, p["R3e"], "W3"),
        U4=ad.getitem(u34, (slice(None), slice(r3, r3 + r4))),
        V4=col(fv24, p["R4e"], "V4"), W4=col(fw24, p["R4e"], "W4"),
        P=P, s=s, Q=Q)


def forward(params, dims=None, ranks=None):
    """Normalized factors for ``params`` (plain arrays, no tape)."""
    if dims is not None and dims != params.dims:
        raise ShapeError(f"dims {dims} differ from the parameters' {params.dims}")
    if ranks is not None and tuple(ranks) != tuple(params.ranks):
        raise ShapeError(f"ranks {ranks} differ from the parameters' {params.ranks}")
    return build_factors(params.arrays, params.dims, params.ranks)


def on_tape(params, tape):
    """Leaf variables for every parameter, keyed by name."""
    return {k: tape.leaf(v, k) for k, v in params.arrays.items()}


# ---------------------------------------------------------------------------
# checkpoint container

NPM_MAGIC = b"LCFRS2-NPM\0"
NPM_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _atomic_write(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_container(path, dims, ranks, d, blocks, dtype):
    """Write named arrays after a header and a manifest of (name, shape, offset)."""
    dt = np.dtype(dtype)
    if dt not in _CODES:
        raise ValueError(f"unsupported dtype {dt}")
    head = [NPM_MAGIC, struct.pack("<II", NPM_VERSION, _CODES[dt]),
            struct.pack("<9Q", dims.m1, dims.m2, dims.p, dims.v, d, *ranks),
            struct.pack("<I", len(blocks))]
    data, offset = [], 0
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[dt]])
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        head.append(struct.pack("<Q", offset))
        data.append(arr.tobytes())
        offset += arr.nbytes
    _atomic_write(path, b"".join(head + data))


def load_container(path):
    """Return (dims, ranks, d, blocks, dtype)."""
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(NPM_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    off = len(NPM_MAGIC)
    version, code = struct.unpack_from("<II", buf, off)
    if version != NPM_VERSION or code not in _DTYPES:
        raise ValueError(f"{path}: unsupported version {version} or dtype code {code}")
    off += 8
    m1, m2, p, v, d, r1, r2, r3, r4 = struct.unpack_from("<9Q", buf, off)
    off += 72
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    manifest = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        (start,) = struct.unpack_from("<Q", buf, off)
        off += 8
        manifest.append((name, shape, start))
    dt = _DTYPES[code]
    blocks = {}
    for name, shape, start in manifest:
        n = int(np.prod(shape))
        if off + start + n * dt.itemsize > len(buf):
            raise ValueError(f"{path}: block {name} runs past the end of the file")
        blocks[name] = np.frombuffer(buf, dtype=dt, count=n,
                                     offset=off + start).reshape(shape).copy()
    return GrammarDims(m1, m2, p, v), (r1, r2, r3, r4), d, blocks, dt


def save_params(path, params, extra=None):
    blocks = dict(params.arrays)
    blocks.update(extra or {})
    save_container(path, params.dims, params.ranks, params.d, blocks, params.dtype)


def load_params(path):
    """Return (NeuralParams, extra blocks)."""
    dims, ranks, d, blocks, dt = load_container(path)
    names = param_shapes(dims, ranks, d)
    arrays = {k: blocks.pop(k).astype(dt.newbyteorder("=")) for k in names}
    return NeuralParams(dims, ranks, d, arrays), blocks


def save_factored(path, fg):
    fg = fg.numpy()
    blocks = {f"fg.{n}": getattr(fg, n) for n in FACTOR_NAMES}
    save_container(path, fg.dims, fg.ranks, 0, blocks, blocks["fg.Q"].dtype)


def load_factored(path):
    dims, ranks, _, blocks, dt = load_container(path)
    kw = {n: blocks[f"fg.{n}"].astype(dt.newbyteorder("=")) for n in FACTOR_NAMES}
    return FactoredGrammar(dims, ranks, **kw)
