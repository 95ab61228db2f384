"""Exact MCS/GED ground truth and derived quantities."""

from g2r.oracle.bounds import (
    LabeledPair,
    PairFormatError,
    bunke_ged,
    check_edit_bound,
    label_pair,
    load_pairs,
    nged_target,
    nmcs_target,
    phi,
    save_pairs,
)
from g2r.oracle.errors import BudgetExceeded, InconsistentCount, OracleError, OracleTimeout
from g2r.oracle.ged import EditOp, GedResult, apply_edit_path, edit_path_from_mapping, ged_exact
from g2r.oracle.mcs import McsResult, common_edges, mcs_exact

__all__ = [
    "BudgetExceeded",
    "EditOp",
    "GedResult",
    "InconsistentCount",
    "LabeledPair",
    "PairFormatError",
    "McsResult",
    "OracleError",
    "OracleTimeout",
    "apply_edit_path",
    "bunke_ged",
    "check_edit_bound",
    "common_edges",
    "edit_path_from_mapping",
    "ged_exact",
    "label_pair",
    "load_pairs",
    "mcs_exact",
    "nged_target",
    "nmcs_target",
    "phi",
    "save_pairs",
]
