"""PACE: canonical DAG linearization, dag2seq positional encodings and a masked Transformer encoder."""

from .canonize import CanonicalForm, canonical_form, certificate, is_isomorphic
from .dag import DagSample, LabeledDag, OperationDictionary, read_dag_file, validate, write_dag_file
from .dag2seq import dag2seq, exact_sequence
from .encoder import ModelConfig, PaceEncoder, prepare
from .errors import PaceError
from .mask import MaskMatrix, mask_dfs, mask_floyd, mask_tree_backtracking

__version__ = "0.1.0"

__all__ = [
    "CanonicalForm",
    "DagSample",
    "LabeledDag",
    "MaskMatrix",
    "ModelConfig",
    "OperationDictionary",
    "PaceEncoder",
    "PaceError",
    "canonical_form",
    "certificate",
    "dag2seq",
    "exact_sequence",
    "is_isomorphic",
    "mask_dfs",
    "mask_floyd",
    "mask_tree_backtracking",
    "prepare",
    "read_dag_file",
    "validate",
    "write_dag_file",
]
