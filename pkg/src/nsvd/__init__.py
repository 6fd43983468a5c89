"""Calibration-driven low-rank compression toolkit.

Plain, activation-aware, and nested matrix decompositions for weight
matrices, with identity-verification suites and a synthetic
distribution-shift benchmark.
"""

from .calibration import (GramStats, Whitener, gram_accumulate,
                          whitener_cholesky, whitener_diag_absmean,
                          whitener_eigen)
from .compress import (METHODS, CompressedLayer, FactorPair, FlopCounter,
                       RankBudget, apply, apply_flops, compress_layer,
                       compress_activation_aware, compress_nested,
                       compress_plain_svd, rank_budget)
from .container import (TensorContainer, read_compressed_model,
                        read_container, write_compressed_model,
                        write_container)
from .errors import (ArgumentError, DecompositionError,
                     DegenerateActivationError, FormatError,
                     InfeasibleBudgetError, NsvdError,
                     PositiveDefinitenessError)
from .evalbench import (LossReport, ShiftSpec, activation_loss,
                        cosine_similarity_profile, generate_shifted, sweep,
                        sweep_summary, verify_loss_identities,
                        verify_whitener_equivalence, verify_scaled_whitener_bound)
from .linalg import (EigFactors, IdFactors, SvdFactors, cholesky, column_id,
                     eig_sym, svd, tsvd)

__all__ = [name for name in dir() if not name.startswith("_")]
