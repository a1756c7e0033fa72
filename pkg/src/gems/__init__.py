"""Graph-Haar double-sparse dictionary learning for graph signals."""

from .data import (
    SignalSet,
    add_noise,
    denoise_benchmark,
    gen_piecewise_smooth,
    gen_smooth_signals,
    ingest_geo_events,
    mterm_benchmark,
    normalized_rmse,
)
from .dict_learning import (
    AtomUpdateWorkspace,
    SparseDict,
    TrainConfig,
    atom_update_admm,
    atom_update_greedy,
    coeff_update,
    gems_objective,
    gems_train,
    init_sparse_dict,
    ksvd_train,
    normalize_atom_pair,
)
from .errors import DisconnectedGraphError, GemsError, InvalidInputError, NumericalError
from .graph_core import (
    LaplacianMatrix,
    WeightedGraph,
    build_inverse_distance_graph,
    build_rbf_graph,
    dirichlet_energy,
    fiedler_vector,
    laplacian,
)
from .laplacian_learning import LaplacianLearnConfig, adaptive_train, learn_laplacian
from .sparse_coding import CodeMatrix, grsc, omp, omp_batch, refit_on_supports
from .wavelet import HaarBasis, PartitionTree, bisect, build_haar_basis, build_partition_tree

__version__ = "0.1.0"
