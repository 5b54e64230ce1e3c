from .genotype import (
    CELL_TYPES,
    EDGES,
    AlphaTable,
    Genotype,
    GenotypeFormatError,
    InvalidGenotypeError,
    cell_edges,
    derive_genotype,
    shrink_opset,
    to_dot,
    validate_genotype,
)
from .network import (
    CellSpec,
    NetworkConfig,
    SuperNetwork,
    backbone_parameter_count,
    build_supernetwork,
    count_parameters,
    full_candidates,
    supernetwork_parameter_count,
)
from .ops import CATALOGS, NORMAL_OPS, REDUCTION_OPS, op_param_count

__all__ = [
    "CATALOGS",
    "CELL_TYPES",
    "EDGES",
    "NORMAL_OPS",
    "REDUCTION_OPS",
    "AlphaTable",
    "CellSpec",
    "Genotype",
    "GenotypeFormatError",
    "InvalidGenotypeError",
    "NetworkConfig",
    "SuperNetwork",
    "backbone_parameter_count",
    "build_supernetwork",
    "cell_edges",
    "count_parameters",
    "derive_genotype",
    "full_candidates",
    "op_param_count",
    "shrink_opset",
    "supernetwork_parameter_count",
    "to_dot",
    "validate_genotype",
]
