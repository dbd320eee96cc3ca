"""Minimal h5ad reader against the documented AnnData HDF5 encoding.

Supports what the converter needs: a dense or CSR/CSC X (or layer), the
obs/var index columns, plain or categorical obs columns, and obsm arrays.
"""

import h5py
import numpy as np
from scipy import sparse

from . import ConversionError


def _decode(values):
    values = np.asarray(values)
    if values.dtype.kind in ("S", "O"):
        return np.array([v.decode() if isinstance(v, bytes) else str(v)
                         for v in values])
    return values


def _read_matrix(node):
    if isinstance(node, h5py.Dataset):
        return node[...]
    enc = node.attrs.get("encoding-type", "")
    if enc not in ("csr_matrix", "csc_matrix"):
        raise ConversionError(f"unsupported matrix encoding {enc!r}")
    shape = tuple(node.attrs["shape"])
    cls = sparse.csr_matrix if enc == "csr_matrix" else sparse.csc_matrix
    mat = cls((node["data"][...], node["indices"][...], node["indptr"][...]),
              shape=shape)
    return mat.tocsr()


def _read_column(node):
    if isinstance(node, h5py.Group):  # categorical
        if "codes" in node and "categories" in node:
            cats = _decode(node["categories"][...])
            codes = node["codes"][...]
            out = np.empty(codes.shape, dtype=object)
            valid = codes >= 0
            out[valid] = cats[codes[valid]]
            out[~valid] = None
            return out
        raise ConversionError("unsupported obs column group encoding")
    return _decode(node[...])


def _read_frame(group):
    index_key = group.attrs.get("_index", "_index")
    if isinstance(index_key, bytes):
        index_key = index_key.decode()
    if index_key not in group:
        raise ConversionError(f"missing index column {index_key!r}")
    index = _decode(group[index_key][...])
    columns = {}
    for key in group:
        if key == index_key:
            continue
        try:
            columns[key] = _read_column(group[key])
        except ConversionError:
            continue  # skip exotic encodings, they are not needed
    return index, columns


class H5adFile:
    """Parsed pieces of one h5ad container."""

    def __init__(self, path, layer=None):
        self.path = str(path)
        with h5py.File(path, "r") as f:
            if layer:
                if "layers" not in f or layer not in f["layers"]:
                    raise ConversionError(
                        f"{self.path}: missing layer {layer!r}")
                self.x = _read_matrix(f["layers"][layer])
            else:
                if "X" not in f:
                    raise ConversionError(f"{self.path}: no X matrix")
                self.x = _read_matrix(f["X"])
            if "var" not in f:
                raise ConversionError(f"{self.path}: no var frame")
            self.var_names, _ = _read_frame(f["var"])
            if "obs" not in f:
                raise ConversionError(f"{self.path}: no obs frame")
            self.obs_names, self.obs = _read_frame(f["obs"])
            self.obsm = {}
            if "obsm" in f:
                for key in f["obsm"]:
                    node = f["obsm"][key]
                    if isinstance(node, h5py.Dataset):
                        self.obsm[key] = node[...]
        n_obs, n_var = self.x.shape
        if n_obs != len(self.obs_names) or n_var != len(self.var_names):
            raise ConversionError(
                f"{self.path}: X shape {self.x.shape} disagrees with "
                f"obs/var lengths {len(self.obs_names)}/{len(self.var_names)}")

    def coordinates(self, key="spatial"):
        if key not in self.obsm:
            raise ConversionError(
                f"{self.path}: no {key!r} coordinates in obsm "
                f"(available: {sorted(self.obsm)})")
        coords = np.asarray(self.obsm[key], dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] < 2:
            raise ConversionError(f"{self.path}: obsm[{key!r}] is not n x 2")
        return coords[:, :2]
